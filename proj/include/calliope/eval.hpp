#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "calliope/model.hpp"

namespace calliope {

/// Token-level reconstruction accuracies, micro-averaged over non-pad
/// positions. Absent when a track contributed no positions.
struct AccuracyReport {
  std::array<std::optional<double>, kNumTracks> next_track;
  std::optional<double> next_all;
  std::array<std::optional<double>, kNumTracks> seq_track;
  std::optional<double> seq_all;
};

/// Teacher-forced argmax-vs-gold accuracy over all songs (micro, all
/// tracks pooled).
double accuracy_next(Calliope& model, const std::vector<SongTokens>& songs);
/// Autoregressive decode compared position-wise against gold up to the
/// gold non-pad length (micro, all tracks pooled).
double accuracy_seq(Calliope& model, const std::vector<SongTokens>& songs);
AccuracyReport accuracy_report(Calliope& model,
                               const std::vector<SongTokens>& songs);

/// Per-track ratio of measures holding zero notes.
std::array<std::optional<double>, kNumTracks> metric_eb(
    const std::vector<GridSong>& songs);
/// Mean distinct pitch classes per non-empty measure; drums excluded.
std::array<std::optional<double>, kNumTracks> metric_upc(
    const std::vector<GridSong>& songs);
/// Share of notes lasting at least 3 steps; drums excluded.
std::array<std::optional<double>, kNumTracks> metric_qn(
    const std::vector<GridSong>& songs);
/// Share of drum onsets on the 16-beat grid (time divisible by 6).
std::optional<double> metric_dp(const std::vector<GridSong>& songs);

struct GenMetrics {
  std::array<std::optional<double>, kNumTracks> eb;
  std::array<std::optional<double>, kNumTracks> upc;
  std::array<std::optional<double>, kNumTracks> qn;
  std::optional<double> dp;
};

GenMetrics gen_metrics(const std::vector<GridSong>& songs);

struct GeneratedSong {
  GridSong song;
  SongTokens tokens;
  int malformed = 0;
};

/// Greedy-decodes `count` latent codes drawn from the standard normal
/// prior; deterministic per (seed, index).
std::vector<GeneratedSong> generate(Calliope& model, int count,
                                    std::uint64_t seed);

/// {"eb": {...}, "upc": {...}, "qn": {...}, "dp": v, "seq_acc": {...},
/// "next_acc": {...}, "n_songs": n}; absent values are null, accuracy
/// sections are null entirely when acc is null.
std::string metrics_report_json(const GenMetrics& gm,
                                const AccuracyReport* acc, int n_songs);

}  // namespace calliope
