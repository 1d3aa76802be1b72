#include "calliope/midi.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <map>

namespace calliope {

const char* role_name(TrackRole role) {
  switch (role) {
    case TrackRole::Bass:
      return "bass";
    case TrackRole::Drums:
      return "drums";
    case TrackRole::GuitarPiano:
      return "guitar_piano";
    case TrackRole::Strings:
      return "strings";
  }
  return "?";
}

void TrackMeasure::normalize() {
  std::sort(notes.begin(), notes.end());
  notes.erase(std::unique(notes.begin(), notes.end()), notes.end());
}

GridSong GridSong::empty(int n_measures) {
  GridSong s;
  for (int t = 0; t < kNumTracks; ++t) {
    s.tracks[t].resize(n_measures);
    for (auto& m : s.tracks[t]) m.role = static_cast<TrackRole>(t);
  }
  return s;
}

GridSong GridSong::window(int start, int count) const {
  if (start < 0 || count < 1 || start + count > n_measures()) {
    throw ShapeMismatch("window outside song");
  }
  GridSong s = empty(count);
  for (int t = 0; t < kNumTracks; ++t) {
    for (int m = 0; m < count; ++m) s.tracks[t][m] = tracks[t][start + m];
  }
  return s;
}

bool GridSong::has_notes() const {
  for (const auto& track : tracks) {
    for (const auto& m : track) {
      if (!m.notes.empty()) return true;
    }
  }
  return false;
}

namespace {

class SmfReader {
 public:
  explicit SmfReader(const std::vector<std::uint8_t>& bytes)
      : p_(bytes.data()), n_(bytes.size()) {}

  std::uint32_t u32be() {
    need(4);
    std::uint32_t v = std::uint32_t(p_[pos_]) << 24 |
                      std::uint32_t(p_[pos_ + 1]) << 16 |
                      std::uint32_t(p_[pos_ + 2]) << 8 |
                      std::uint32_t(p_[pos_ + 3]);
    pos_ += 4;
    return v;
  }

  std::uint16_t u16be() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(p_[pos_] << 8 | p_[pos_ + 1]);
    pos_ += 2;
    return v;
  }

  std::uint8_t u8() {
    need(1);
    return p_[pos_++];
  }

  std::uint8_t peek() const {
    need(1);
    return p_[pos_];
  }

  std::uint32_t vlq() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      const std::uint8_t b = u8();
      v = (v << 7) | (b & 0x7f);
      if (!(b & 0x80)) return v;
    }
    throw TruncatedChunk("variable-length quantity longer than 4 bytes");
  }

  void skip(std::size_t len) {
    need(len);
    pos_ += len;
  }

  bool tag(const char* four) {
    need(4);
    const bool ok = std::equal(four, four + 4, p_ + pos_);
    pos_ += 4;
    return ok;
  }

  std::size_t pos() const { return pos_; }
  bool eof() const { return pos_ >= n_; }

 private:
  void need(std::size_t len) const {
    if (pos_ + len > n_) throw TruncatedChunk("file ends mid-chunk");
  }
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

struct ChannelEvent {
  std::int64_t tick;
  int track;
  int seq;  // file order, for a stable merge
  int kind;  // 0 off, 1 on, 2 program
  int channel;
  int a;  // pitch or program
  int b;  // velocity
};

}  // namespace

MidiSongRaw parse_smf(const std::vector<std::uint8_t>& bytes) {
  SmfReader r(bytes);
  if (!r.tag("MThd")) throw MalformedHeader("missing MThd");
  const std::uint32_t hlen = r.u32be();
  if (hlen < 6) throw MalformedHeader("header chunk too short");
  const int format = r.u16be();
  const int ntrks = r.u16be();
  const int division = r.u16be();
  r.skip(hlen - 6);
  if (format != 0 && format != 1) {
    throw UnsupportedFormat("SMF format " + std::to_string(format));
  }
  if (division & 0x8000) throw UnsupportedFormat("SMPTE time division");
  if (division == 0) throw MalformedHeader("zero time division");

  MidiSongRaw song;
  song.format = format;
  song.division = division;

  std::vector<ChannelEvent> events;
  std::vector<std::int64_t> track_end(ntrks, 0);
  int seq = 0;

  for (int trk = 0; trk < ntrks; ++trk) {
    while (!r.tag("MTrk")) {
      // unknown chunk: skip per the SMF spec
      const std::uint32_t len = r.u32be();
      r.skip(len);
      if (r.eof()) throw TruncatedChunk("expected MTrk chunk");
    }
    const std::uint32_t len = r.u32be();
    const std::size_t chunk_end = r.pos() + len;
    std::int64_t tick = 0;
    int running = -1;
    bool ended = false;
    while (r.pos() < chunk_end && !ended) {
      tick += r.vlq();
      std::uint8_t status = r.peek();
      if (status & 0x80) {
        r.u8();
        if (status < 0xf0) running = status;
      } else {
        if (running < 0) throw MalformedHeader("data byte without status");
        status = static_cast<std::uint8_t>(running);
      }
      if (status == 0xff) {
        const std::uint8_t type = r.u8();
        const std::uint32_t mlen = r.vlq();
        if (type == 0x2f) {
          r.skip(mlen);
          ended = true;
        } else if (type == 0x51 && mlen == 3) {
          std::int64_t us = 0;
          for (int i = 0; i < 3; ++i) us = (us << 8) | r.u8();
          song.tempos.push_back({tick, us});
        } else if (type == 0x58 && mlen >= 2) {
          const int nn = r.u8();
          const int dd = r.u8();
          r.skip(mlen - 2);
          song.time_sigs.push_back({tick, nn, 1 << dd});
        } else {
          r.skip(mlen);
        }
      } else if (status == 0xf0 || status == 0xf7) {
        r.skip(r.vlq());
      } else {
        const int kind = status >> 4;
        const int channel = status & 0x0f;
        switch (kind) {
          case 0x8: {
            const int pitch = r.u8();
            r.u8();
            events.push_back({tick, trk, seq++, 0, channel, pitch, 0});
            break;
          }
          case 0x9: {
            const int pitch = r.u8();
            const int vel = r.u8();
            events.push_back(
                {tick, trk, seq++, vel > 0 ? 1 : 0, channel, pitch, vel});
            break;
          }
          case 0xc: {
            const int prog = r.u8();
            events.push_back({tick, trk, seq++, 2, channel, prog, 0});
            break;
          }
          case 0xd:
            r.u8();
            break;
          case 0xa:
          case 0xb:
          case 0xe:
            r.u8();
            r.u8();
            break;
          default:
            throw MalformedHeader("unexpected status byte");
        }
      }
    }
    if (!ended && r.pos() != chunk_end) {
      throw TruncatedChunk("track chunk ends mid-event");
    }
    track_end[trk] = tick;
  }

  std::stable_sort(events.begin(), events.end(),
                   [](const ChannelEvent& a, const ChannelEvent& b) {
                     if (a.tick != b.tick) return a.tick < b.tick;
                     return a.seq < b.seq;
                   });

  struct Open {
    std::int64_t tick;
    int program;
    int velocity;
    int track;
  };
  int program[16] = {0};
  std::map<std::pair<int, int>, std::deque<Open>> open;  // (channel, pitch)
  for (const auto& e : events) {
    if (e.kind == 2) {
      program[e.channel] = e.a;
    } else if (e.kind == 1) {
      open[{e.channel, e.a}].push_back(
          {e.tick, program[e.channel], e.b, e.track});
    } else {
      auto it = open.find({e.channel, e.a});
      if (it == open.end() || it->second.empty()) continue;  // stray off
      const Open o = it->second.front();
      it->second.pop_front();
      song.notes.push_back({o.tick, std::max<std::int64_t>(1, e.tick - o.tick),
                            e.channel, o.program, e.a, o.velocity});
    }
  }
  for (auto& [key, queue] : open) {
    for (const Open& o : queue) {
      const std::int64_t end = track_end[o.track];
      song.notes.push_back({o.tick, std::max<std::int64_t>(1, end - o.tick),
                            key.first, o.program, key.second, o.velocity});
    }
  }
  std::sort(song.notes.begin(), song.notes.end(),
            [](const MidiSongRaw::Note& a, const MidiSongRaw::Note& b) {
              return std::tie(a.tick, a.channel, a.pitch, a.duration_ticks) <
                     std::tie(b.tick, b.channel, b.pitch, b.duration_ticks);
            });
  return song;
}

MidiSongRaw parse_smf_file(const std::string& path) {
  return parse_smf(read_file_bytes(path));
}

bool is_four_four(const MidiSongRaw& raw) {
  for (const auto& ts : raw.time_sigs) {
    if (ts.numerator != 4 || ts.denominator != 4) return false;
  }
  return true;
}

std::optional<TrackRole> route_instrument(int channel, int program) {
  if (channel == 9) return TrackRole::Drums;
  if (program >= 32 && program <= 39) return TrackRole::Bass;
  if (program >= 0 && program <= 31) return TrackRole::GuitarPiano;
  if (program >= 40 && program <= 55) return TrackRole::Strings;
  return std::nullopt;
}

GridSong quantize(const MidiSongRaw& raw, int steps_per_measure) {
  if (steps_per_measure != kStepsPerMeasure) {
    throw ConfigError("grid is fixed at 96 steps per measure");
  }
  const double steps_per_tick = 24.0 / raw.division;  // 24 steps per quarter
  struct Placed {
    int measure;
    NoteEvent note;
    TrackRole role;
  };
  std::vector<Placed> placed;
  int last_measure = -1;
  for (const auto& n : raw.notes) {
    const auto role = route_instrument(n.channel, n.program);
    if (!role) continue;
    const std::int64_t start =
        std::llround(static_cast<double>(n.tick) * steps_per_tick);
    std::int64_t dur = std::llround(static_cast<double>(n.duration_ticks) *
                                    steps_per_tick);
    if (dur < 1) dur = 1;
    const int measure = static_cast<int>(start / steps_per_measure);
    const int time = static_cast<int>(start % steps_per_measure);
    if (dur > steps_per_measure - time) dur = steps_per_measure - time;
    placed.push_back(
        {measure, NoteEvent(time, n.pitch, static_cast<int>(dur)), *role});
    last_measure = std::max(last_measure, measure);
  }
  if (placed.empty()) throw EmptyAfterQuantize("no notes survive routing");
  GridSong song = GridSong::empty(last_measure + 1);
  for (const auto& p : placed) {
    song.tracks[static_cast<int>(p.role)][p.measure].notes.push_back(p.note);
  }
  for (auto& track : song.tracks) {
    for (auto& m : track) m.normalize();
  }
  return song;
}

namespace {

void put_u32be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void put_u16be(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void put_vlq(std::vector<std::uint8_t>& out, std::int64_t v) {
  std::uint8_t stack[5];
  int n = 0;
  do {
    stack[n++] = static_cast<std::uint8_t>(v & 0x7f);
    v >>= 7;
  } while (v > 0);
  while (n > 1) out.push_back(stack[--n] | 0x80);
  out.push_back(stack[0]);
}

struct WriteEvent {
  std::int64_t tick;
  int order;  // offs (0) before ons (1) at equal ticks
  std::vector<std::uint8_t> bytes;
};

// channel and GM program used when writing each role
constexpr int kWriteChannel[kNumTracks] = {0, 9, 2, 3};
constexpr int kWriteProgram[kNumTracks] = {33, 0, 0, 48};

}  // namespace

std::vector<std::uint8_t> write_smf(const GridSong& song, int ticks_per_step) {
  if (ticks_per_step < 1) throw ConfigError("ticks_per_step must be >= 1");
  const int division = 24 * ticks_per_step;
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'M', 'T', 'h', 'd'});
  put_u32be(out, 6);
  put_u16be(out, 1);
  put_u16be(out, kNumTracks);
  put_u16be(out, static_cast<std::uint16_t>(division));

  for (int t = 0; t < kNumTracks; ++t) {
    const int ch = kWriteChannel[t];
    std::vector<WriteEvent> evs;
    if (t == 0) {
      // time signature 4/4 and tempo 120 on the first track
      evs.push_back({0, -2, {0xff, 0x58, 0x04, 0x04, 0x02, 0x18, 0x08}});
      evs.push_back({0, -2, {0xff, 0x51, 0x03, 0x07, 0xa1, 0x20}});
    }
    if (ch != 9) {
      evs.push_back({0,
                     -1,
                     {static_cast<std::uint8_t>(0xc0 | ch),
                      static_cast<std::uint8_t>(kWriteProgram[t])}});
    }
    struct AbsNote {
      std::int64_t start;  // in steps
      int pitch;
      int dur;
    };
    std::vector<AbsNote> notes;
    for (int m = 0; m < song.n_measures(); ++m) {
      for (const NoteEvent& n : song.tracks[t][m].notes) {
        notes.push_back(
            {static_cast<std::int64_t>(m) * kStepsPerMeasure + n.time,
             n.pitch, n.duration});
      }
    }
    // A note spilling over a later same-pitch onset cannot be written as
    // on/off pairs (the off would pair with the wrong on), so it
    // retriggers: truncated at that onset, exact duplicates dropped.
    std::sort(notes.begin(), notes.end(),
              [](const AbsNote& a, const AbsNote& b) {
                return std::tie(a.pitch, a.start, a.dur) <
                       std::tie(b.pitch, b.start, b.dur);
              });
    for (std::size_t i = 0; i < notes.size(); ++i) {
      std::size_t j = i + 1;
      while (j < notes.size() && notes[j].pitch == notes[i].pitch &&
             notes[j].start == notes[i].start) {
        ++j;
      }
      if (j < notes.size() && notes[j].pitch == notes[i].pitch &&
          notes[i].start + notes[i].dur > notes[j].start) {
        notes[i].dur = static_cast<int>(notes[j].start - notes[i].start);
      }
    }
    notes.erase(std::unique(notes.begin(), notes.end(),
                            [](const AbsNote& a, const AbsNote& b) {
                              return a.pitch == b.pitch &&
                                     a.start == b.start && a.dur == b.dur;
                            }),
                notes.end());
    std::sort(notes.begin(), notes.end(),
              [](const AbsNote& a, const AbsNote& b) {
                return std::tie(a.start, a.pitch, a.dur) <
                       std::tie(b.start, b.pitch, b.dur);
              });
    for (const AbsNote& n : notes) {
      const std::int64_t on = n.start * ticks_per_step;
      const std::int64_t off =
          on + static_cast<std::int64_t>(n.dur) * ticks_per_step;
      evs.push_back({on,
                     1,
                     {static_cast<std::uint8_t>(0x90 | ch),
                      static_cast<std::uint8_t>(n.pitch), 96}});
      evs.push_back({off,
                     0,
                     {static_cast<std::uint8_t>(0x80 | ch),
                      static_cast<std::uint8_t>(n.pitch), 64}});
    }
    std::stable_sort(evs.begin(), evs.end(),
                     [](const WriteEvent& a, const WriteEvent& b) {
                       return std::tie(a.tick, a.order) <
                              std::tie(b.tick, b.order);
                     });
    std::vector<std::uint8_t> body;
    std::int64_t cursor = 0;
    for (const auto& e : evs) {
      put_vlq(body, e.tick - cursor);
      cursor = e.tick;
      body.insert(body.end(), e.bytes.begin(), e.bytes.end());
    }
    // end of track at the last measure boundary (or the last note-off, if
    // a generated note spills past it)
    const std::int64_t end_tick =
        std::max(cursor, static_cast<std::int64_t>(song.n_measures()) *
                             kStepsPerMeasure * ticks_per_step);
    put_vlq(body, end_tick - cursor);
    body.insert(body.end(), {0xff, 0x2f, 0x00});

    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    put_u32be(out, static_cast<std::uint32_t>(body.size()));
    out.insert(out.end(), body.begin(), body.end());
  }
  return out;
}

void write_smf_file(const std::string& path, const GridSong& song,
                    int ticks_per_step) {
  const auto bytes = write_smf(song, ticks_per_step);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to " + path);
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
}

}  // namespace calliope
