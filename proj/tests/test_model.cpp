#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <string>
#include <vector>

#include "calliope/adam.hpp"
#include "calliope/model.hpp"
#include "calliope/rng.hpp"

using namespace calliope;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.n_measures = 1;
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 24;
  cfg.n_z = 16;
  cfg.l_mem = 3;
  cfg.d_disc = 8;
  cfg.max_notes = 2;  // sequence length 8
  return cfg;
}

struct NoteIds {
  int time;
  int pitch;
  int duration;
};

// [SOS, (time, pitch, duration) per note, EOS, pad...] in token ids
std::vector<int> make_seq(const ModelConfig& cfg,
                          const std::vector<NoteIds>& notes) {
  std::vector<int> seq;
  seq.push_back(kSos);
  for (const NoteIds& n : notes) {
    seq.push_back(kTimeBase + n.time);
    seq.push_back(n.pitch);
    seq.push_back(kDurationBase + n.duration - 1);
  }
  seq.push_back(kEos);
  seq.resize(cfg.seq_len(), kPad);
  return seq;
}

std::vector<int> random_seq(const ModelConfig& cfg, Rng& rng) {
  const int count = static_cast<int>(rng.uniform_int(0, cfg.max_notes));
  std::vector<NoteIds> notes;
  for (int i = 0; i < count; ++i) {
    notes.push_back({static_cast<int>(rng.uniform_int(0, 95)),
                     static_cast<int>(rng.uniform_int(0, 127)),
                     static_cast<int>(rng.uniform_int(1, 96))});
  }
  return make_seq(cfg, notes);
}

std::vector<std::vector<int>> random_song_seqs(const ModelConfig& cfg,
                                               Rng& rng) {
  std::vector<std::vector<int>> seqs;
  for (int i = 0; i < cfg.n_measures * kNumTracks; ++i) {
    seqs.push_back(random_seq(cfg, rng));
  }
  return seqs;
}

float max_abs(const Tensor& t) {
  float m = 0.0f;
  for (float x : t.data) m = std::max(m, std::abs(x));
  return m;
}

bool exactly_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data == b.data;
}

double sample_std(const Tensor& t) {
  double mean = 0.0;
  for (float x : t.data) mean += x;
  mean /= static_cast<double>(t.data.size());
  double var = 0.0;
  for (float x : t.data) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(t.data.size()));
}

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.rfind(prefix, 0) == 0;
}

// Randomizes every bias so that zero-input pass-through checks compare
// against something other than the zero vector.
void randomize_biases(Calliope& model, std::uint64_t seed) {
  Rng rng(seed);
  for (const std::string& name : model.params().names) {
    if (name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0) {
      for (auto& x : model.params().get(name).data) {
        x = static_cast<float>(rng.normal() * 0.1);
      }
    }
  }
}

}  // namespace

TEST_CASE("config validation rejects inconsistent dimensions") {
  CHECK_NOTHROW(ModelConfig{}.validate());
  CHECK_NOTHROW(small_config().validate());

  ModelConfig bad = small_config();
  bad.d_model = 10;
  bad.n_heads = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = small_config();
  bad.n_z = 6;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = small_config();
  bad.n_layers = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = small_config();
  bad.n_measures = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("registry holds the canonical parameter names") {
  ModelConfig cfg = small_config();
  cfg.n_measures = 2;
  Calliope model(cfg);
  const ParamsT<float>& p = model.params();

  for (const char* name :
       {"enc.bass.embed", "enc.drums.rel", "enc.guitar_piano.u",
        "enc.strings.layer0.attn.wq", "enc.bass.layer0.ln1.g",
        "enc.bass.layer0.ff.w1", "comp.w", "comp.b", "barc.w", "barc.b",
        "songc.w", "songc.ln.g", "songd.pos", "songd.w", "bard.bass.w",
        "bard.strings.b", "dec.guitar_piano.decomp.w",
        "dec.drums.layer0.src.wk", "dec.bass.layer0.ln3.b", "dec.bass.out.w",
        "disc.l1.w", "disc.l3.b"}) {
    CAPTURE(name);
    CHECK(p.has(name));
  }

  const int L = cfg.seq_len();
  CHECK(p.get("enc.bass.rel").shape == std::vector<int>{2 * L - 1, 8});
  CHECK(p.get("songd.pos").shape == std::vector<int>{2, 16});
  CHECK(p.get("dec.bass.decomp.w").shape == std::vector<int>{16, 3 * 16});
  CHECK(p.get("bard.drums.w").shape == std::vector<int>{4, 16});
  CHECK(p.get("disc.l1.w").shape == std::vector<int>{16, 8});
  CHECK(p.get("dec.strings.out.w").shape == std::vector<int>{16, kVocab});

  for (const std::string& name : p.names) {
    CAPTURE(name);
    bool known = false;
    for (const char* prefix : {"enc.", "comp.", "barc.", "songc.", "songd.",
                               "bard.", "dec.", "disc."}) {
      if (starts_with(name, prefix)) known = true;
    }
    CHECK(known);
    CHECK(is_discriminator_param(name) == starts_with(name, "disc."));
    const bool enc_side = starts_with(name, "enc.") ||
                          starts_with(name, "comp.") ||
                          starts_with(name, "barc.") ||
                          starts_with(name, "songc.");
    CHECK(is_encoder_side_param(name) == enc_side);
  }
}

TEST_CASE("initialization is deterministic per seed with damped output heads") {
  Calliope a(small_config());
  Calliope b(small_config());
  a.init_params(7);
  b.init_params(7);
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CAPTURE(a.params().names[i]);
    CHECK(exactly_equal(a.params().tensors[i], b.params().tensors[i]));
  }

  Calliope c(small_config());
  c.init_params(8);
  CHECK_FALSE(exactly_equal(a.params().get("comp.w"), c.params().get("comp.w")));

  CHECK(max_abs(a.params().get("comp.b")) == 0.0f);
  CHECK(max_abs(a.params().get("enc.bass.u")) == 0.0f);
  CHECK(max_abs(a.params().get("dec.drums.layer0.src.bq")) == 0.0f);
  for (float x : a.params().get("songc.ln.g").data) CHECK(x == 1.0f);

  const double head = sample_std(a.params().get("dec.bass.out.w"));
  const double body = sample_std(a.params().get("enc.bass.embed"));
  CHECK(head > 0.0005);
  CHECK(head < 0.004);
  CHECK(body > 0.012);
  CHECK(body < 0.03);
}

TEST_CASE("sequence helpers mask after the end token and shift targets") {
  ModelConfig cfg = small_config();
  std::vector<int> ids = make_seq(cfg, {{0, 60, 1}});
  // [SOS, time, pitch, dur, EOS, pad, pad, pad]
  auto mask = Calliope::valid_mask(ids);
  CHECK(mask == std::vector<std::uint8_t>{1, 1, 1, 1, 1, 0, 0, 0});

  std::vector<int> no_eos(cfg.seq_len(), 50);
  CHECK(Calliope::valid_mask(no_eos) ==
        std::vector<std::uint8_t>(cfg.seq_len(), 1));

  CHECK(Calliope::next_targets({5, 6, 7}) == std::vector<int>{6, 7, kPad});
  CHECK(Calliope::next_targets(ids) ==
        std::vector<int>{kTimeBase, 60, kDurationBase, kEos, kPad, kPad, kPad,
                         kPad});
}

TEST_CASE("encoder and compressor shape contracts") {
  ModelConfig cfg = small_config();
  Calliope model(cfg);
  model.init_params(1);
  Graph g;
  auto b = model.bind(g);

  std::vector<int> ids = make_seq(cfg, {{0, 60, 4}, {48, 64, 2}});
  Var h = model.encode_measure_track(b, 0, ids);
  CHECK(g.value(h).shape == std::vector<int>{8, 16});

  Var code = model.comp(b, h, Calliope::valid_mask(ids));
  CHECK(g.value(code).shape == std::vector<int>{1, 16});

  Var bar = model.bar_compress(b, {code, code, code, code});
  CHECK(g.value(bar).shape == std::vector<int>{1, 16});
  CHECK_THROWS_AS(model.bar_compress(b, {code, code}), ShapeMismatch);

  Var z = model.song_compress(b, {bar});
  CHECK(g.value(z).shape == std::vector<int>{1, 16});
  CHECK_THROWS_AS(model.song_compress(b, {bar, bar}), BarsMismatch);

  std::vector<int> short_ids(5, kPad);
  CHECK_THROWS_AS(model.encode_measure_track(b, 0, short_ids), ShapeMismatch);

  Rng rng(2);
  Var z2 = model.encode_song(b, random_song_seqs(cfg, rng));
  CHECK(g.value(z2).shape == std::vector<int>{1, 16});
  CHECK_THROWS_AS(model.encode_song(b, {ids, ids}), BarsMismatch);
}

TEST_CASE("song compression output is row-normalized before gain and bias") {
  ModelConfig cfg = small_config();
  cfg.n_measures = 2;
  Calliope model(cfg);
  model.init_params(3);
  // at this tiny width the default init leaves the pre-norm variance near
  // the layer-norm epsilon; scale the final projection up so the
  // normalization property is measurable
  for (auto& x : model.params().get("songc.w").data) x *= 100.0f;
  Graph g;
  auto b = model.bind(g);
  Rng rng(4);
  Var z = model.encode_song(b, random_song_seqs(cfg, rng));

  const Tensor& zv = g.value(z);
  double mean = 0.0;
  for (float x : zv.data) mean += x;
  mean /= zv.data.size();
  double var = 0.0;
  for (float x : zv.data) var += (x - mean) * (x - mean);
  var /= zv.data.size();
  CHECK(std::abs(mean) < 1e-5);
  // the layer-norm epsilon keeps the normalized variance a hair below 1
  CHECK(var > 1.0 - 1e-3);
  CHECK(var < 1.0 + 1e-4);
}

TEST_CASE("decoder-side shapes and zero-latent bias pass-through") {
  ModelConfig cfg = small_config();
  Calliope model(cfg);
  model.init_params(5);
  randomize_biases(model, 6);
  Graph g;
  auto b = model.bind(g);

  Var zero_z = g.constant(Tensor::zeros({1, 16}));
  std::vector<Var> measures = model.song_decompress(b, zero_z);
  REQUIRE(measures.size() == 1);
  CHECK(g.value(measures[0]).shape == std::vector<int>{1, 16});

  std::vector<Var> per_track = model.bar_decompress(b, zero_z);
  REQUIRE(per_track.size() == kNumTracks);
  for (int t = 0; t < kNumTracks; ++t) {
    CHECK(g.value(per_track[t]).shape == std::vector<int>{1, 16});
    const std::string role = role_name(static_cast<TrackRole>(t));
    CHECK(exactly_equal(g.value(per_track[t]),
                        model.params().get("bard." + role + ".b")));
  }

  Var zc = g.constant(Tensor::zeros({1, 16}));
  Var barc_out = model.bar_compress(b, {zc, zc, zc, zc});
  CHECK(exactly_equal(g.value(barc_out), model.params().get("barc.b")));

  Var mem = model.decomp(b, 2, zero_z);
  CHECK(g.value(mem).shape == std::vector<int>{3, 16});

  std::vector<int> inputs = make_seq(cfg, {{0, 60, 1}});
  Var logits = model.decode_measure_track(b, 2, mem, inputs);
  CHECK(g.value(logits).shape == std::vector<int>{8, kVocab});
  std::vector<int> short_in(4, kPad);
  CHECK_THROWS_AS(model.decode_measure_track(b, 2, mem, short_in),
                  ShapeMismatch);

  Var d = model.discriminate(b, zero_z);
  CHECK(g.value(d).shape == std::vector<int>{1, 1});
}

TEST_CASE("song decompression distinguishes measures by position") {
  ModelConfig cfg = small_config();
  cfg.n_measures = 3;
  Calliope model(cfg);
  model.init_params(9);
  Graph g;
  auto b = model.bind(g);

  Rng rng(10);
  Tensor z = Tensor::zeros({1, 16});
  for (auto& x : z.data) x = static_cast<float>(rng.normal());
  std::vector<Var> measures = model.song_decompress(b, g.constant(z));
  REQUIRE(measures.size() == 3);
  for (int i = 0; i < 3; ++i) {
    for (int j = i + 1; j < 3; ++j) {
      Tensor diff = g.value(measures[i]);
      float delta = 0.0f;
      for (std::size_t k = 0; k < diff.data.size(); ++k) {
        delta = std::max(delta, std::abs(diff.data[k] -
                                         g.value(measures[j]).data[k]));
      }
      CHECK(delta > 1e-7f);
    }
  }
}

TEST_CASE("different inputs produce different codes and memories") {
  ModelConfig cfg = small_config();
  Calliope model(cfg);
  model.init_params(11);
  Graph g;
  auto b = model.bind(g);

  std::vector<std::vector<int>> song_a, song_b;
  for (int t = 0; t < kNumTracks; ++t) {
    song_a.push_back(make_seq(cfg, {{0, 60, 4}}));
    song_b.push_back(make_seq(cfg, {{0, 60, 4}}));
  }
  song_b[2] = make_seq(cfg, {{0, 61, 4}});

  const Tensor za = g.value(model.encode_song(b, song_a));
  const Tensor zb = g.value(model.encode_song(b, song_b));
  float delta = 0.0f;
  for (std::size_t i = 0; i < za.data.size(); ++i) {
    delta = std::max(delta, std::abs(za.data[i] - zb.data[i]));
  }
  CHECK(delta > 1e-7f);

  Rng rng(12);
  Tensor z1 = Tensor::zeros({1, 16});
  Tensor z2 = Tensor::zeros({1, 16});
  for (auto& x : z1.data) x = static_cast<float>(rng.normal());
  for (auto& x : z2.data) x = static_cast<float>(rng.normal());
  const Tensor m1 = g.value(model.decomp(b, 0, g.constant(z1)));
  const Tensor m2 = g.value(model.decomp(b, 0, g.constant(z2)));
  CHECK_FALSE(exactly_equal(m1, m2));
}

TEST_CASE("pad positions beyond the end token cannot influence the code") {
  ModelConfig cfg = small_config();
  Calliope model(cfg);
  model.init_params(13);
  Graph g;
  auto b = model.bind(g);

  std::vector<int> clean = make_seq(cfg, {{0, 60, 1}});
  std::vector<int> noisy = clean;
  // scribble over the pad tail without introducing another end token
  noisy[5] = 50;
  noisy[6] = kTimeBase + 17;
  noisy[7] = kDurationBase + 30;
  REQUIRE(Calliope::valid_mask(clean) == Calliope::valid_mask(noisy));

  Var ha = model.encode_measure_track(b, 1, clean);
  Var hb = model.encode_measure_track(b, 1, noisy);
  const Tensor ca = g.value(model.comp(b, ha, Calliope::valid_mask(clean)));
  const Tensor cb = g.value(model.comp(b, hb, Calliope::valid_mask(noisy)));
  CHECK(exactly_equal(ca, cb));
}

TEST_CASE("note order within a measure changes the code") {
  ModelConfig cfg = small_config();
  Calliope model(cfg);
  model.init_params(14);
  Graph g;
  auto b = model.bind(g);

  std::vector<int> fwd = make_seq(cfg, {{0, 60, 4}, {48, 64, 2}});
  std::vector<int> rev = make_seq(cfg, {{48, 64, 2}, {0, 60, 4}});
  Var hf = model.encode_measure_track(b, 0, fwd);
  Var hr = model.encode_measure_track(b, 0, rev);
  const Tensor cf = g.value(model.comp(b, hf, Calliope::valid_mask(fwd)));
  const Tensor cr = g.value(model.comp(b, hr, Calliope::valid_mask(rev)));
  CHECK_FALSE(exactly_equal(cf, cr));
}

TEST_CASE("decoder logits respect the causal mask") {
  ModelConfig cfg = small_config();
  Calliope model(cfg);
  model.init_params(15);
  Graph g;
  auto b = model.bind(g);

  Rng rng(16);
  Tensor z = Tensor::zeros({1, 16});
  for (auto& x : z.data) x = static_cast<float>(rng.normal());
  Var mem = model.decomp(b, 3, g.constant(z));

  std::vector<int> inputs = make_seq(cfg, {{0, 60, 4}});
  const int p = 3;
  std::vector<int> altered = inputs;
  for (int i = p + 1; i < cfg.seq_len(); ++i) altered[i] = 77;

  const Tensor la = g.value(model.decode_measure_track(b, 3, mem, inputs));
  const Tensor lb = g.value(model.decode_measure_track(b, 3, mem, altered));
  for (int i = 0; i <= p; ++i) {
    for (int j = 0; j < kVocab; ++j) {
      CAPTURE(i);
      CAPTURE(j);
      REQUIRE(la.at(i, j) == lb.at(i, j));
    }
  }
}

TEST_CASE("greedy decoding starts at the start token and pads after the end") {
  ModelConfig cfg = small_config();
  cfg.n_measures = 2;
  Calliope model(cfg);
  model.init_params(17);
  Graph g;
  g.set_grad_enabled(false);
  auto b = model.bind(g);

  Rng rng(18);
  Tensor z = Tensor::zeros({1, 16});
  for (auto& x : z.data) x = static_cast<float>(rng.normal());
  std::vector<std::vector<int>> seqs = model.decode_song_greedy(b, g.constant(z));
  REQUIRE(static_cast<int>(seqs.size()) == cfg.n_measures * kNumTracks);
  for (const auto& seq : seqs) {
    REQUIRE(static_cast<int>(seq.size()) == cfg.seq_len());
    CHECK(seq[0] == kSos);
    bool ended = false;
    for (std::size_t i = 1; i < seq.size(); ++i) {
      CHECK(seq[i] >= 0);
      CHECK(seq[i] < kVocab);
      if (ended) CHECK(seq[i] == kPad);
      if (seq[i] == kEos) ended = true;
    }
  }
}

TEST_CASE("discriminator outputs probabilities and is one half at zero") {
  // freshly constructed parameters are all zero, so the logit is exactly 0
  Calliope zero_model(small_config());
  Graph g0;
  auto b0 = zero_model.bind(g0);
  Rng rng(19);
  Tensor z = Tensor::zeros({1, 16});
  for (auto& x : z.data) x = static_cast<float>(rng.normal());
  CHECK(g0.value(zero_model.discriminate_logit(b0, g0.constant(z))).at(0, 0) ==
        0.0f);
  CHECK(g0.value(zero_model.discriminate(b0, g0.constant(z))).at(0, 0) == 0.5f);

  Calliope model(small_config());
  model.init_params(20);
  Graph g;
  auto b = model.bind(g);
  for (int i = 0; i < 10; ++i) {
    for (auto& x : z.data) x = static_cast<float>(rng.normal() * 3.0);
    const float d = g.value(model.discriminate(b, g.constant(z))).at(0, 0);
    CHECK(d > 0.0f);
    CHECK(d < 1.0f);
  }
}

TEST_CASE("discriminator alone separates two gaussian clusters") {
  ModelConfig cfg = small_config();
  Calliope model(cfg);
  model.init_params(21);
  Rng rng(22);

  const auto draw = [&](float center) {
    Tensor z = Tensor::zeros({1, 16});
    for (auto& x : z.data) {
      x = center + static_cast<float>(rng.normal() * 0.25);
    }
    return z;
  };

  Adam adam(AdamConfig{5e-3, 0.9, 0.999, 1e-8});
  const int batch = 8;
  for (int step = 0; step < 200; ++step) {
    Graph g;
    auto b = model.bind(g, is_discriminator_param, is_discriminator_param);
    std::vector<Var> terms;
    for (int i = 0; i < batch; ++i) {
      Var s_pos = model.discriminate_logit(b, g.constant(draw(2.0f)));
      Var s_neg = model.discriminate_logit(b, g.constant(draw(-2.0f)));
      terms.push_back(g.softplus(g.scale(s_pos, -1.0f)));
      terms.push_back(g.softplus(s_neg));
    }
    Var loss = g.mean_all(g.concat_rows(terms));
    g.backward(loss);
    for (const auto& [name, var] : b.vars) {
      adam.step(name, model.params().get(name), g.grad(var));
    }
  }

  Graph g;
  g.set_grad_enabled(false);
  auto b = model.bind(g);
  int hits = 0;
  const int trials = 200;
  for (int i = 0; i < trials; ++i) {
    const float dp = g.value(model.discriminate(b, g.constant(draw(2.0f))))
                         .at(0, 0);
    const float dn = g.value(model.discriminate(b, g.constant(draw(-2.0f))))
                         .at(0, 0);
    if (dp > 0.5f) ++hits;
    if (dn < 0.5f) ++hits;
  }
  CHECK(static_cast<double>(hits) / (2 * trials) > 0.9);
}

TEST_CASE("reconstruction gradients reach every non-discriminator parameter") {
  ModelConfig cfg = small_config();
  cfg.n_measures = 2;
  Calliope model(cfg);
  model.init_params(23);
  Graph g;
  auto b = model.bind(g);

  std::vector<std::vector<int>> gold;
  for (int m = 0; m < cfg.n_measures; ++m) {
    for (int t = 0; t < kNumTracks; ++t) {
      gold.push_back(make_seq(cfg, {{m * 7, 40 + 3 * t, 2}, {50, 70 + t, 5}}));
    }
  }

  Var z = model.encode_song(b, gold);
  std::vector<Var> logits = model.decode_song_logits(b, z, gold);
  std::vector<Var> losses;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    losses.push_back(
        g.cross_entropy(logits[i], Calliope::next_targets(gold[i]), kPad));
  }
  g.backward(g.mean_all(g.concat_rows(losses)));

  for (const auto& [name, var] : b.vars) {
    CAPTURE(name);
    if (is_discriminator_param(name)) {
      CHECK(max_abs(g.grad(var)) == 0.0f);
    } else {
      CHECK(max_abs(g.grad(var)) > 0.0f);
    }
  }
}

TEST_CASE("a single-track loss leaves other tracks' decoders untouched") {
  ModelConfig cfg = small_config();
  Calliope model(cfg);
  model.init_params(24);
  Graph g;
  auto b = model.bind(g);

  std::vector<std::vector<int>> gold;
  for (int t = 0; t < kNumTracks; ++t) {
    gold.push_back(make_seq(cfg, {{6 * t, 30 + 5 * t, 3}}));
  }
  const int target_track = 2;

  Var z = model.encode_song(b, gold);
  std::vector<Var> logits = model.decode_song_logits(b, z, gold);
  g.backward(g.cross_entropy(logits[target_track],
                             Calliope::next_targets(gold[target_track]),
                             kPad));

  const std::string own = role_name(static_cast<TrackRole>(target_track));
  for (const auto& [name, var] : b.vars) {
    CAPTURE(name);
    bool other_track_decoder = false;
    for (int t = 0; t < kNumTracks; ++t) {
      if (t == target_track) continue;
      const std::string role = role_name(static_cast<TrackRole>(t));
      if (starts_with(name, "dec." + role + ".") ||
          starts_with(name, "bard." + role + ".")) {
        other_track_decoder = true;
      }
    }
    if (other_track_decoder || is_discriminator_param(name)) {
      CHECK(max_abs(g.grad(var)) == 0.0f);
    }
  }
  CHECK(max_abs(g.grad(b["dec." + own + ".out.w"])) > 0.0f);
  CHECK(max_abs(g.grad(b["bard." + own + ".w"])) > 0.0f);
  CHECK(max_abs(g.grad(b["songd.w"])) > 0.0f);
  // the shared latent couples every encoder stack to any track's loss
  CHECK(max_abs(g.grad(b["songc.w"])) > 0.0f);
  CHECK(max_abs(g.grad(b["enc.bass.layer0.attn.wq"])) > 0.0f);
}

TEST_CASE("an encoder-side loss from one track stays inside that stack") {
  ModelConfig cfg = small_config();
  Calliope model(cfg);
  model.init_params(25);
  Graph g;
  auto b = model.bind(g);

  const int track = 1;
  std::vector<int> ids = make_seq(cfg, {{12, 45, 6}});
  Var h = model.encode_measure_track(b, track, ids);
  Var code = model.comp(b, h, Calliope::valid_mask(ids));
  g.backward(g.sum(code));

  const std::string own =
      std::string("enc.") + role_name(static_cast<TrackRole>(track)) + ".";
  for (const auto& [name, var] : b.vars) {
    CAPTURE(name);
    if (starts_with(name, own) || starts_with(name, "comp.")) {
      CHECK(max_abs(g.grad(var)) > 0.0f);
    } else {
      CHECK(max_abs(g.grad(var)) == 0.0f);
    }
  }
}

TEST_CASE("bind honors keep and trainable filters") {
  Calliope model(small_config());
  model.init_params(26);
  Graph g;
  auto kept = model.bind(g, is_discriminator_param, is_discriminator_param);
  CHECK_NOTHROW(kept["disc.l1.w"]);
  CHECK_THROWS_AS(kept["comp.w"], Error);

  Graph g2;
  auto all = model.bind(g2, is_discriminator_param);
  CHECK(g2.requires_grad(all["disc.l1.w"]));
  CHECK_FALSE(g2.requires_grad(all["comp.w"]));

  Graph g3;
  auto full = model.bind(g3);
  CHECK(g3.requires_grad(full["comp.w"]));
  CHECK(full.vars.size() == model.params().size());
}

TEST_CASE("parameter entries round trip through the checkpoint codec") {
  Calliope a(small_config());
  a.init_params(27);
  std::vector<CheckpointEntry> entries = params_to_entries(a.params());
  CHECK(entries.size() == a.params().size());

  Calliope b(small_config());
  params_from_entries(b.params(), entries);
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CAPTURE(a.params().names[i]);
    CHECK(exactly_equal(a.params().tensors[i], b.params().tensors[i]));
  }

  std::vector<CheckpointEntry> wrong_shape = entries;
  wrong_shape[0] = make_entry_f32(entries[0].name, Tensor::zeros({1, 1}));
  Calliope c(small_config());
  CHECK_THROWS_AS(params_from_entries(c.params(), wrong_shape),
                  MalformedHeader);

  std::vector<CheckpointEntry> missing = entries;
  missing.pop_back();
  CHECK_THROWS_AS(params_from_entries(c.params(), missing), MalformedHeader);
}

TEST_CASE("shape contracts hold for random small configurations") {
  Rng rng(28);
  for (int trial = 0; trial < 6; ++trial) {
    ModelConfig cfg;
    cfg.n_heads = static_cast<int>(rng.uniform_int(1, 2));
    cfg.d_model = cfg.n_heads * static_cast<int>(rng.uniform_int(4, 8));
    cfg.n_layers = static_cast<int>(rng.uniform_int(1, 2));
    cfg.d_ff = static_cast<int>(rng.uniform_int(8, 16));
    cfg.n_z = 4 * static_cast<int>(rng.uniform_int(1, 4));
    cfg.l_mem = static_cast<int>(rng.uniform_int(1, 4));
    cfg.d_disc = static_cast<int>(rng.uniform_int(4, 8));
    cfg.max_notes = static_cast<int>(rng.uniform_int(1, 3));
    cfg.n_measures = static_cast<int>(rng.uniform_int(1, 3));
    CAPTURE(trial);

    Calliope model(cfg);
    model.init_params(100 + trial);
    Graph g;
    auto b = model.bind(g);

    std::vector<std::vector<int>> gold = random_song_seqs(cfg, rng);
    Var z = model.encode_song(b, gold);
    CHECK(g.value(z).shape == std::vector<int>{1, cfg.n_z});

    std::vector<Var> logits = model.decode_song_logits(b, z, gold);
    REQUIRE(static_cast<int>(logits.size()) == cfg.n_measures * kNumTracks);
    for (const Var& l : logits) {
      CHECK(g.value(l).shape == std::vector<int>{cfg.seq_len(), kVocab});
    }

    std::vector<std::vector<int>> emitted = model.decode_song_greedy(b, z);
    REQUIRE(static_cast<int>(emitted.size()) == cfg.n_measures * kNumTracks);
    for (const auto& seq : emitted) {
      CHECK(static_cast<int>(seq.size()) == cfg.seq_len());
    }

    CHECK(g.value(model.discriminate(b, z)).shape == std::vector<int>{1, 1});
  }
}
