#include "calliope/token.hpp"

#include <algorithm>
#include <tuple>

namespace calliope {

TokenSeq tokenize_measure(const TrackMeasure& m, int max_notes, int* dropped) {
  std::vector<NoteEvent> notes = m.notes;
  if (static_cast<int>(notes.size()) > max_notes) {
    std::sort(notes.begin(), notes.end(),
              [](const NoteEvent& a, const NoteEvent& b) {
                return std::tie(a.pitch, a.time, a.duration) <
                       std::tie(b.pitch, b.time, b.duration);
              });
    const int excess = static_cast<int>(notes.size()) - max_notes;
    notes.erase(notes.begin(), notes.begin() + excess);
    if (dropped) *dropped += excess;
    std::sort(notes.begin(), notes.end());
  }
  TokenSeq seq;
  seq.reserve(seq_len_for(max_notes));
  seq.push_back(kSos);
  for (const NoteEvent& n : notes) {
    seq.push_back(static_cast<std::uint16_t>(kTimeBase + n.time));
    seq.push_back(static_cast<std::uint16_t>(kPitchBase + n.pitch));
    seq.push_back(static_cast<std::uint16_t>(kDurationBase + n.duration - 1));
  }
  seq.push_back(kEos);
  seq.resize(seq_len_for(max_notes), kPad);
  return seq;
}

namespace {

bool is_time(int id) { return id >= kTimeBase && id < kDurationBase; }
bool is_pitch(int id) { return id >= kPitchBase && id < kTimeBase; }
bool is_duration(int id) { return id >= kDurationBase && id < kPad; }

}  // namespace

DetokenizeResult detokenize_measure(const TokenSeq& seq) {
  DetokenizeResult out;
  const int n = static_cast<int>(seq.size());
  int p = 0;
  if (p < n && seq[p] == kSos) ++p;
  while (p < n && seq[p] != kEos) {
    if (p + 2 < n && is_time(seq[p]) && is_pitch(seq[p + 1]) &&
        is_duration(seq[p + 2])) {
      out.measure.notes.emplace_back(seq[p] - kTimeBase,
                                     seq[p + 1] - kPitchBase,
                                     seq[p + 2] - kDurationBase + 1);
      p += 3;
    } else {
      ++out.malformed;
      ++p;
    }
  }
  out.measure.normalize();
  return out;
}

SongTokens tokenize_song(const GridSong& song, int max_notes, int* dropped) {
  SongTokens out;
  out.n_measures = song.n_measures();
  out.seq_len = seq_len_for(max_notes);
  out.seqs.reserve(static_cast<std::size_t>(out.n_measures) * kNumTracks);
  for (int m = 0; m < out.n_measures; ++m) {
    for (int t = 0; t < kNumTracks; ++t) {
      out.seqs.push_back(tokenize_measure(song.tracks[t][m], max_notes,
                                          dropped));
    }
  }
  return out;
}

SongDetokenizeResult detokenize_song(const SongTokens& tokens) {
  if (static_cast<int>(tokens.seqs.size()) != tokens.n_measures * kNumTracks) {
    throw ShapeMismatch("song tokens: sequence count mismatch");
  }
  SongDetokenizeResult out;
  out.song = GridSong::empty(tokens.n_measures);
  for (int m = 0; m < tokens.n_measures; ++m) {
    for (int t = 0; t < kNumTracks; ++t) {
      DetokenizeResult r =
          detokenize_measure(tokens.seqs[m * kNumTracks + t]);
      r.measure.role = static_cast<TrackRole>(t);
      out.song.tracks[t][m] = std::move(r.measure);
      out.malformed += r.malformed;
    }
  }
  return out;
}

}  // namespace calliope
