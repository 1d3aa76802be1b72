#include "calliope/eval.hpp"

#include <cmath>
#include <set>

#include "calliope/rng.hpp"
#include "calliope/train.hpp"
#include "json.hpp"

namespace calliope {

namespace {

struct Counts {
  long long hit = 0;
  long long total = 0;

  std::optional<double> ratio() const {
    if (total == 0) return std::nullopt;
    return static_cast<double>(hit) / static_cast<double>(total);
  }
};

int argmax_row(const Tensor& t, int row) {
  const float* p = t.row_ptr(row);
  int best = 0;
  for (int j = 1; j < t.cols(); ++j) {
    if (p[j] > p[best]) best = j;
  }
  return best;
}

long long non_pad_len(const TokenSeq& seq) {
  long long n = 0;
  for (std::uint16_t id : seq) n += id != kPad ? 1 : 0;
  return n;
}

void accuracy_next_counts(Calliope& model,
                          const std::vector<SongTokens>& songs,
                          std::array<Counts, kNumTracks>& per_track) {
  for (const SongTokens& song : songs) {
    Graph g;
    g.set_grad_enabled(false);
    Calliope::Bound b = model.bind(g);
    const std::vector<std::vector<int>> gold = to_int_seqs(song);
    Var z = model.encode_song(b, gold);
    std::vector<Var> logits = model.decode_song_logits(b, z, gold);
    for (std::size_t i = 0; i < gold.size(); ++i) {
      Counts& c = per_track[i % kNumTracks];
      const Tensor& lg = g.value(logits[i]);
      // row p-1 scores position p; the leading SOS is input, not target
      for (std::size_t p = 1; p < gold[i].size(); ++p) {
        if (gold[i][p] == kPad) continue;
        ++c.total;
        c.hit += argmax_row(lg, static_cast<int>(p) - 1) == gold[i][p] ? 1 : 0;
      }
    }
  }
}

void accuracy_seq_counts(Calliope& model,
                         const std::vector<SongTokens>& songs,
                         std::array<Counts, kNumTracks>& per_track) {
  for (const SongTokens& song : songs) {
    Graph g;
    g.set_grad_enabled(false);
    Calliope::Bound b = model.bind(g);
    const std::vector<std::vector<int>> gold = to_int_seqs(song);
    Var z = model.encode_song(b, gold);
    const std::vector<std::vector<int>> emitted = model.decode_song_greedy(b, z);
    for (std::size_t i = 0; i < gold.size(); ++i) {
      Counts& c = per_track[i % kNumTracks];
      const long long len = non_pad_len(song.seqs[i]);
      for (long long p = 0; p < len; ++p) {
        ++c.total;
        c.hit += emitted[i][p] == gold[i][p] ? 1 : 0;
      }
    }
  }
}

Counts pool(const std::array<Counts, kNumTracks>& per_track) {
  Counts all;
  for (const Counts& c : per_track) {
    all.hit += c.hit;
    all.total += c.total;
  }
  return all;
}

}  // namespace

double accuracy_next(Calliope& model, const std::vector<SongTokens>& songs) {
  std::array<Counts, kNumTracks> per_track{};
  accuracy_next_counts(model, songs, per_track);
  return pool(per_track).ratio().value_or(0.0);
}

double accuracy_seq(Calliope& model, const std::vector<SongTokens>& songs) {
  std::array<Counts, kNumTracks> per_track{};
  accuracy_seq_counts(model, songs, per_track);
  return pool(per_track).ratio().value_or(0.0);
}

AccuracyReport accuracy_report(Calliope& model,
                               const std::vector<SongTokens>& songs) {
  AccuracyReport r;
  std::array<Counts, kNumTracks> next{}, seq{};
  accuracy_next_counts(model, songs, next);
  accuracy_seq_counts(model, songs, seq);
  for (int t = 0; t < kNumTracks; ++t) {
    r.next_track[t] = next[t].ratio();
    r.seq_track[t] = seq[t].ratio();
  }
  r.next_all = pool(next).ratio();
  r.seq_all = pool(seq).ratio();
  return r;
}

std::array<std::optional<double>, kNumTracks> metric_eb(
    const std::vector<GridSong>& songs) {
  std::array<Counts, kNumTracks> c{};
  for (const GridSong& song : songs) {
    for (int t = 0; t < kNumTracks; ++t) {
      for (const TrackMeasure& m : song.tracks[t]) {
        ++c[t].total;
        c[t].hit += m.notes.empty() ? 1 : 0;
      }
    }
  }
  std::array<std::optional<double>, kNumTracks> out;
  for (int t = 0; t < kNumTracks; ++t) out[t] = c[t].ratio();
  return out;
}

std::array<std::optional<double>, kNumTracks> metric_upc(
    const std::vector<GridSong>& songs) {
  std::array<std::optional<double>, kNumTracks> out;
  for (int t = 0; t < kNumTracks; ++t) {
    if (t == static_cast<int>(TrackRole::Drums)) continue;
    long long class_sum = 0;
    long long bars = 0;
    for (const GridSong& song : songs) {
      for (const TrackMeasure& m : song.tracks[t]) {
        if (m.notes.empty()) continue;
        std::set<int> classes;
        for (const NoteEvent& n : m.notes) classes.insert(n.pitch % 12);
        class_sum += static_cast<long long>(classes.size());
        ++bars;
      }
    }
    if (bars > 0) {
      out[t] = static_cast<double>(class_sum) / static_cast<double>(bars);
    }
  }
  return out;
}

std::array<std::optional<double>, kNumTracks> metric_qn(
    const std::vector<GridSong>& songs) {
  std::array<std::optional<double>, kNumTracks> out;
  for (int t = 0; t < kNumTracks; ++t) {
    if (t == static_cast<int>(TrackRole::Drums)) continue;
    Counts c;
    for (const GridSong& song : songs) {
      for (const TrackMeasure& m : song.tracks[t]) {
        for (const NoteEvent& n : m.notes) {
          ++c.total;
          c.hit += n.duration >= 3 ? 1 : 0;
        }
      }
    }
    out[t] = c.ratio();
  }
  return out;
}

std::optional<double> metric_dp(const std::vector<GridSong>& songs) {
  Counts c;
  const int drums = static_cast<int>(TrackRole::Drums);
  for (const GridSong& song : songs) {
    for (const TrackMeasure& m : song.tracks[drums]) {
      for (const NoteEvent& n : m.notes) {
        ++c.total;
        c.hit += n.time % 6 == 0 ? 1 : 0;
      }
    }
  }
  return c.ratio();
}

GenMetrics gen_metrics(const std::vector<GridSong>& songs) {
  GenMetrics gm;
  gm.eb = metric_eb(songs);
  gm.upc = metric_upc(songs);
  gm.qn = metric_qn(songs);
  gm.dp = metric_dp(songs);
  return gm;
}

std::vector<GeneratedSong> generate(Calliope& model, int count,
                                    std::uint64_t seed) {
  std::vector<GeneratedSong> out;
  out.reserve(static_cast<std::size_t>(count));
  const int nz = model.config().n_z;
  for (int i = 0; i < count; ++i) {
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(i)));
    Tensor z = Tensor::zeros({1, nz});
    for (auto& x : z.data) x = static_cast<float>(rng.normal());
    Graph g;
    g.set_grad_enabled(false);
    Calliope::Bound b = model.bind(g);
    const std::vector<std::vector<int>> seqs =
        model.decode_song_greedy(b, g.constant(z));
    GeneratedSong gen;
    gen.tokens.n_measures = model.config().n_measures;
    gen.tokens.seq_len = model.config().seq_len();
    for (const auto& seq : seqs) {
      gen.tokens.seqs.emplace_back(seq.begin(), seq.end());
    }
    SongDetokenizeResult det = detokenize_song(gen.tokens);
    gen.song = std::move(det.song);
    gen.malformed = det.malformed;
    out.push_back(std::move(gen));
  }
  return out;
}

namespace {

nlohmann::json per_track_json(
    const std::array<std::optional<double>, kNumTracks>& values) {
  nlohmann::json obj;
  for (int t = 0; t < kNumTracks; ++t) {
    const char* key = role_name(static_cast<TrackRole>(t));
    if (values[t]) {
      obj[key] = *values[t];
    } else {
      obj[key] = nullptr;
    }
  }
  return obj;
}

nlohmann::json opt_json(const std::optional<double>& v) {
  if (v) return *v;
  return nullptr;
}

nlohmann::json acc_json(
    const std::array<std::optional<double>, kNumTracks>& per_track,
    const std::optional<double>& all) {
  nlohmann::json obj = per_track_json(per_track);
  obj["all"] = opt_json(all);
  return obj;
}

}  // namespace

std::string metrics_report_json(const GenMetrics& gm,
                                const AccuracyReport* acc, int n_songs) {
  nlohmann::json j;
  j["eb"] = per_track_json(gm.eb);
  j["upc"] = per_track_json(gm.upc);
  j["qn"] = per_track_json(gm.qn);
  j["dp"] = opt_json(gm.dp);
  if (acc) {
    j["seq_acc"] = acc_json(acc->seq_track, acc->seq_all);
    j["next_acc"] = acc_json(acc->next_track, acc->next_all);
  } else {
    j["seq_acc"] = nullptr;
    j["next_acc"] = nullptr;
  }
  j["n_songs"] = n_songs;
  return j.dump(2) + "\n";
}

}  // namespace calliope
