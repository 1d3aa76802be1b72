#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "calliope/error.hpp"

namespace calliope {

constexpr int kNumTracks = 4;
constexpr int kStepsPerMeasure = 96;

enum class TrackRole : int { Bass = 0, Drums = 1, GuitarPiano = 2, Strings = 3 };

const char* role_name(TrackRole role);

/// One note on the 96-step grid of a single 4/4 measure.
struct NoteEvent {
  int time = 0;
  int pitch = 0;
  int duration = 1;

  NoteEvent() = default;
  NoteEvent(int time_in, int pitch_in, int duration_in)
      : time(time_in), pitch(pitch_in), duration(duration_in) {
    if (time < 0 || time >= kStepsPerMeasure || pitch < 0 || pitch > 127 ||
        duration < 1 || duration > kStepsPerMeasure) {
      throw InvalidNote("note (" + std::to_string(time) + "," +
                        std::to_string(pitch) + "," + std::to_string(duration) +
                        ") outside grid");
    }
  }

  auto operator<=>(const NoteEvent&) const = default;
};

/// One instrument's notes within one measure, sorted by (time, pitch,
/// duration) with exact-duplicate triples removed.
struct TrackMeasure {
  TrackRole role = TrackRole::Bass;
  std::vector<NoteEvent> notes;

  void normalize();  // sort + dedupe
};

/// A fixed 4-track song on the measure grid; tracks[t][m] is measure m of
/// role t. All four tracks always span the same n_measures.
struct GridSong {
  std::array<std::vector<TrackMeasure>, kNumTracks> tracks;

  static GridSong empty(int n_measures);
  int n_measures() const { return static_cast<int>(tracks[0].size()); }
  /// Measures [start, start+count) as a standalone song.
  GridSong window(int start, int count) const;
  bool has_notes() const;
};

/// Raw SMF content after parsing: matched notes with absolute ticks plus
/// the tempo / time-signature maps. No quantization yet.
struct MidiSongRaw {
  struct Note {
    std::int64_t tick = 0;
    std::int64_t duration_ticks = 1;
    int channel = 0;
    int program = 0;
    int pitch = 0;
    int velocity = 0;
  };
  struct TimeSig {
    std::int64_t tick = 0;
    int numerator = 4;
    int denominator = 4;
  };
  struct Tempo {
    std::int64_t tick = 0;
    std::int64_t us_per_quarter = 500000;
  };

  int format = 0;
  int division = 480;  // ticks per quarter note
  std::vector<Note> notes;
  std::vector<TimeSig> time_sigs;
  std::vector<Tempo> tempos;
};

/// Parses SMF format 0/1 bytes. Every note-on is matched to a note-off;
/// unmatched note-ons are closed at their track's end-of-track tick.
MidiSongRaw parse_smf(const std::vector<std::uint8_t>& bytes);
MidiSongRaw parse_smf_file(const std::string& path);

/// True when every time signature in the file (if any) is 4/4.
bool is_four_four(const MidiSongRaw& raw);

/// GM-style banding: channel 9 is Drums; otherwise programs 32-39 Bass,
/// 0-31 GuitarPiano, 40-55 Strings; everything else is discarded.
std::optional<TrackRole> route_instrument(int channel, int program);

/// Snaps onsets and durations to the step grid (nearest step, duration at
/// least 1), truncates notes at the measure boundary, routes instruments,
/// and trims trailing all-empty measures.
GridSong quantize(const MidiSongRaw& raw,
                  int steps_per_measure = kStepsPerMeasure);

/// Format-1 SMF with one track per role (Drums on channel 9) such that
/// parse_smf + quantize reproduces the song exactly, except that a note
/// spilling over a later same-pitch onset is truncated there (on/off
/// pairs cannot express the overlap). One write settles any song: the
/// output of the first round trip reproduces exactly thereafter.
std::vector<std::uint8_t> write_smf(const GridSong& song, int ticks_per_step);
void write_smf_file(const std::string& path, const GridSong& song,
                    int ticks_per_step);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);

}  // namespace calliope
