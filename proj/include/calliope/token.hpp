#pragma once

#include <cstdint>
#include <vector>

#include "calliope/midi.hpp"

namespace calliope {

// vocabulary layout: [0,127] pitch, [128,223] time (96 steps),
// [224,319] duration (1..96 mapped to 224+(d-1)), then pad/SOS/EOS
constexpr int kPitchBase = 0;
constexpr int kTimeBase = 128;
constexpr int kDurationBase = 224;
constexpr int kPad = 320;
constexpr int kSos = 321;
constexpr int kEos = 322;
constexpr int kVocab = 323;

constexpr int kDefaultMaxNotes = 24;

/// Fixed sequence length for a per-track measure: SOS + 3 ids per note + EOS.
constexpr int seq_len_for(int max_notes) { return 3 * max_notes + 2; }

using TokenSeq = std::vector<std::uint16_t>;

/// [SOS, (time, pitch, duration) per note, EOS, pad...] of length
/// seq_len_for(max_notes). When the measure holds more than max_notes
/// notes the lowest pitches are dropped first. Dropped notes are counted
/// into *dropped when given.
TokenSeq tokenize_measure(const TrackMeasure& m, int max_notes,
                          int* dropped = nullptr);

struct DetokenizeResult {
  TrackMeasure measure;
  int malformed = 0;
};

/// Lenient inverse scan: walks left to right, accepts a (time, pitch,
/// duration) window wherever one matches, counts every skipped id as
/// malformed, stops at the first EOS. Output is normalized.
DetokenizeResult detokenize_measure(const TokenSeq& seq);

/// All per-track measure sequences of one song, measure-major then
/// track-major: seqs[m * kNumTracks + t].
struct SongTokens {
  int n_measures = 0;
  int seq_len = 0;
  std::vector<TokenSeq> seqs;
};

SongTokens tokenize_song(const GridSong& song, int max_notes,
                         int* dropped = nullptr);

struct SongDetokenizeResult {
  GridSong song;
  int malformed = 0;
};

SongDetokenizeResult detokenize_song(const SongTokens& tokens);

}  // namespace calliope
