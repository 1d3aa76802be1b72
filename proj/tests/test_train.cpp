#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "calliope/rng.hpp"
#include "calliope/train.hpp"

using namespace calliope;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_cfg() {
  TrainConfig cfg;
  cfg.bars = 1;
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 24;
  cfg.n_z = 16;
  cfg.l_mem = 3;
  cfg.d_disc = 8;
  cfg.max_notes = 2;
  cfg.lr = 1e-3;
  cfg.batch_size = 4;
  cfg.total_steps = 3;
  cfg.seed = 5;
  cfg.beta_start_step = 1 << 20;  // regularization off unless a test wants it
  return cfg;
}

GridSong song_with_notes(std::uint64_t seed, int n_measures, int max_notes) {
  Rng rng(seed);
  GridSong song = GridSong::empty(n_measures);
  for (int t = 0; t < kNumTracks; ++t) {
    for (int m = 0; m < n_measures; ++m) {
      const int count = static_cast<int>(rng.uniform_int(1, max_notes));
      for (int i = 0; i < count; ++i) {
        song.tracks[t][m].notes.emplace_back(
            static_cast<int>(rng.uniform_int(0, 95)),
            static_cast<int>(rng.uniform_int(20, 100)),
            static_cast<int>(rng.uniform_int(1, 8)));
      }
      song.tracks[t][m].normalize();
    }
  }
  return song;
}

std::vector<SongTokens> tiny_corpus(int n_songs, int n_measures,
                                    int max_notes) {
  std::vector<SongTokens> corpus;
  for (int i = 0; i < n_songs; ++i) {
    corpus.push_back(
        tokenize_song(song_with_notes(1000 + i, n_measures, max_notes),
                      max_notes));
  }
  return corpus;
}

Trainer::Batch as_batch(const std::vector<SongTokens>& corpus) {
  Trainer::Batch batch;
  for (const auto& song : corpus) batch.push_back(&song);
  return batch;
}

std::vector<Tensor> snapshot(const Calliope& model) {
  return model.params().tensors;
}

std::vector<std::string> changed_names(const Calliope& model,
                                       const std::vector<Tensor>& before) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (model.params().tensors[i].data != before[i].data) {
      out.push_back(model.params().names[i]);
    }
  }
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("calliope_train_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("config text parses defaults, comments, and overrides") {
  const TrainConfig def = TrainConfig::parse_text("");
  CHECK(def.to_key_values() == TrainConfig{}.to_key_values());

  const TrainConfig cfg = TrainConfig::parse_text(
      "# a comment\n"
      "lr = 5e-4   # trailing comment\n"
      "\n"
      "bars=2\n"
      "adv_single_term = true\n"
      "total_steps = 42\n");
  CHECK(cfg.lr == 5e-4);
  CHECK(cfg.bars == 2);
  CHECK(cfg.adv_single_term);
  CHECK(cfg.total_steps == 42);

  CHECK_THROWS_AS(TrainConfig::parse_text("no_such_key = 1\n"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::parse_text("adv_single_term = maybe\n"),
                  ConfigError);
  CHECK_THROWS(TrainConfig::parse_text("lr = abc\n"));
}

TEST_CASE("every config key survives a serialization round trip") {
  TrainConfig cfg = tiny_cfg();
  cfg.tf_prob = 0.25;
  cfg.ss_k = 2;
  cfg.beta_max = 0.05;
  cfg.beta_start_step = 123;
  cfg.beta_ramp_steps = 456;
  cfg.split_train = 0.6;
  cfg.split_valid = 0.2;
  cfg.split_test = 0.2;
  cfg.grad_clip = 2.5;
  cfg.adv_single_term = true;
  cfg.checkpoint_every = 7;
  cfg.valid_every = 3;

  const std::string text = cfg.to_key_values();
  const TrainConfig back = TrainConfig::parse_text(text);
  CHECK(back.to_key_values() == text);
}

TEST_CASE("config validation rejects out-of-range values") {
  CHECK_NOTHROW(tiny_cfg().validate());

  TrainConfig cfg = tiny_cfg();
  cfg.tf_prob = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = tiny_cfg();
  cfg.split_train = 0.5;  // now sums to 0.8
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = tiny_cfg();
  cfg.beta_max = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  cfg = tiny_cfg();
  cfg.total_steps = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("unset batch size and annealing start follow the bar count") {
  TrainConfig cfg;
  cfg.bars = 1;
  CHECK(cfg.resolved_batch() == 20);
  CHECK(cfg.resolved_beta_start() == 50000);
  cfg.bars = 2;
  CHECK(cfg.resolved_batch() == 20);
  CHECK(cfg.resolved_beta_start() == 50000);
  cfg.bars = 16;
  CHECK(cfg.resolved_batch() == 2);
  CHECK(cfg.resolved_beta_start() == 25000);

  cfg.batch_size = 7;
  cfg.beta_start_step = 99;
  CHECK(cfg.resolved_batch() == 7);
  CHECK(cfg.resolved_beta_start() == 99);
}

TEST_CASE("annealing schedule ramps linearly from the start step") {
  TrainConfig cfg;
  cfg.beta_max = 0.1;
  cfg.beta_start_step = 100;
  cfg.beta_ramp_steps = 10;
  CHECK(beta_schedule(0, cfg) == 0.0);
  CHECK(beta_schedule(99, cfg) == 0.0);
  CHECK(beta_schedule(100, cfg) == 0.0);
  CHECK(beta_schedule(105, cfg) == doctest::Approx(0.05));
  CHECK(beta_schedule(110, cfg) == doctest::Approx(0.1));
  CHECK(beta_schedule(100000, cfg) == doctest::Approx(0.1));

  cfg.beta_ramp_steps = 0;
  CHECK(beta_schedule(99, cfg) == 0.0);
  CHECK(beta_schedule(100, cfg) == doctest::Approx(0.1));
}

TEST_CASE("dataset split is disjoint, sized by fraction, and seeded") {
  const Split sp = split_dataset(10, 0.7, 0.1, 0.2, 42);
  CHECK(sp.train.size() == 7);
  CHECK(sp.valid.size() == 1);
  CHECK(sp.test.size() == 2);
  std::set<int> all;
  for (int i : sp.train) all.insert(i);
  for (int i : sp.valid) all.insert(i);
  for (int i : sp.test) all.insert(i);
  CHECK(all.size() == 10);
  CHECK(*all.begin() == 0);
  CHECK(*all.rbegin() == 9);

  const Split again = split_dataset(10, 0.7, 0.1, 0.2, 42);
  CHECK(again.train == sp.train);
  CHECK(again.valid == sp.valid);
  CHECK(again.test == sp.test);

  const Split other = split_dataset(20, 0.7, 0.1, 0.2, 43);
  const Split other2 = split_dataset(20, 0.7, 0.1, 0.2, 44);
  CHECK(other.train != other2.train);

  // counts round half away from zero
  const Split odd = split_dataset(15, 0.7, 0.1, 0.2, 1);
  CHECK(odd.train.size() == 11);
  CHECK(odd.valid.size() == 2);
  CHECK(odd.test.size() == 2);

  CHECK_THROWS_AS(split_dataset(9, 0.7, 0.1, 0.2, 1), TooFewSongs);
  CHECK_THROWS_AS(split_dataset(10, 0.5, 0.1, 0.2, 1), ConfigError);
}

TEST_CASE("token sequences convert to plain int rows") {
  const std::vector<SongTokens> corpus = tiny_corpus(1, 1, 2);
  const std::vector<std::vector<int>> rows = to_int_seqs(corpus[0]);
  REQUIRE(rows.size() == corpus[0].seqs.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    REQUIRE(rows[i].size() == corpus[0].seqs[i].size());
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      CHECK(rows[i][j] == static_cast<int>(corpus[0].seqs[i][j]));
    }
  }
}

TEST_CASE("reconstruction updates spare the discriminator") {
  const TrainConfig cfg = tiny_cfg();
  const std::vector<SongTokens> corpus = tiny_corpus(4, 1, 2);
  Trainer trainer(cfg);

  const std::vector<Tensor> before = snapshot(trainer.model());
  Trainer::GroupNorms norms;
  const double loss = trainer.reconstruction_phase(as_batch(corpus), 77, &norms);
  CHECK(std::isfinite(loss));
  CHECK(loss > 0.0);
  CHECK(norms.encoder > 0.0);
  CHECK(norms.decoder > 0.0);
  CHECK(norms.disc == 0.0);

  bool any_changed = false;
  for (const std::string& name : changed_names(trainer.model(), before)) {
    CAPTURE(name);
    CHECK_FALSE(is_discriminator_param(name));
    any_changed = true;
  }
  CHECK(any_changed);
}

TEST_CASE("adversarial updates split into discriminator and encoder halves") {
  const TrainConfig cfg = tiny_cfg();
  const std::vector<SongTokens> corpus = tiny_corpus(4, 1, 2);
  Trainer trainer(cfg);

  const std::vector<Tensor> before = snapshot(trainer.model());
  Trainer::GroupNorms disc_norms, enc_norms;
  const Trainer::RegStats reg = trainer.regularization_phase(
      as_batch(corpus), 0.1, 99, &disc_norms, &enc_norms);
  CHECK(std::isfinite(reg.disc_loss));
  CHECK(reg.disc_loss > 0.0);
  CHECK(std::isfinite(reg.enc_adv_loss));
  CHECK(reg.post_var >= 0.0);
  CHECK(reg.post_abs_mean >= 0.0);

  CHECK(disc_norms.disc > 0.0);
  CHECK(disc_norms.encoder == 0.0);
  CHECK(disc_norms.decoder == 0.0);
  CHECK(enc_norms.encoder > 0.0);
  CHECK(enc_norms.disc == 0.0);
  CHECK(enc_norms.decoder == 0.0);

  bool disc_changed = false;
  bool enc_changed = false;
  for (const std::string& name : changed_names(trainer.model(), before)) {
    CAPTURE(name);
    const bool ok =
        is_discriminator_param(name) || is_encoder_side_param(name);
    CHECK(ok);
    if (is_discriminator_param(name)) disc_changed = true;
    if (is_encoder_side_param(name)) enc_changed = true;
  }
  CHECK(disc_changed);
  CHECK(enc_changed);
}

TEST_CASE("full teacher forcing reproduces the plain teacher-forced loss") {
  TrainConfig cfg = tiny_cfg();
  cfg.tf_prob = 1.0;
  const std::vector<SongTokens> corpus = tiny_corpus(4, 1, 2);

  Trainer a(cfg);
  Trainer b(cfg);
  const double reference = b.teacher_forced_loss(as_batch(corpus));
  const double sampled = a.reconstruction_phase(as_batch(corpus), 123);
  CHECK(sampled == reference);
}

TEST_CASE("same seed, same trajectory") {
  TrainConfig cfg = tiny_cfg();
  cfg.valid_every = 1;
  const std::vector<SongTokens> corpus = tiny_corpus(6, 1, 2);

  Trainer a(cfg);
  Trainer b(cfg);
  for (int s = 0; s < 3; ++s) {
    const StepStats sa = a.train_step(corpus, corpus);
    const StepStats sb = b.train_step(corpus, corpus);
    CHECK(sa.step == sb.step);
    CHECK(sa.recon_loss == sb.recon_loss);
    CHECK(sa.valid_next_acc == sb.valid_next_acc);
  }
  for (std::size_t i = 0; i < a.model().params().size(); ++i) {
    CAPTURE(a.model().params().names[i]);
    CHECK(a.model().params().tensors[i].data ==
          b.model().params().tensors[i].data);
  }

  TrainConfig other = cfg;
  other.seed = cfg.seed + 1;
  Trainer c(other);
  c.train_step(corpus, corpus);
  Trainer d(cfg);
  const StepStats sd = d.train_step(corpus, corpus);
  CHECK(sd.recon_loss !=
        doctest::Approx(c.train_step(corpus, corpus).recon_loss));
}

TEST_CASE("checkpoint resume continues the exact trajectory") {
  TrainConfig cfg = tiny_cfg();
  const std::vector<SongTokens> corpus = tiny_corpus(6, 1, 2);
  TempDir dir("resume");

  Trainer a(cfg);
  a.train_step(corpus, corpus);
  a.train_step(corpus, corpus);
  const std::string ck = dir.str() + "/mid.cllp";
  a.save_checkpoint(ck);

  Trainer b(cfg);
  b.load_checkpoint(ck);
  CHECK(b.step() == 2);

  a.train_step(corpus, corpus);
  b.train_step(corpus, corpus);
  for (std::size_t i = 0; i < a.model().params().size(); ++i) {
    CAPTURE(a.model().params().names[i]);
    CHECK(a.model().params().tensors[i].data ==
          b.model().params().tensors[i].data);
  }

  TrainConfig wrong = cfg;
  wrong.d_model = 8;
  wrong.n_heads = 1;
  Trainer c(wrong);
  CHECK_THROWS_AS(c.load_checkpoint(ck), MalformedHeader);
}

TEST_CASE("training loop writes metrics, checkpoints, and a manifest row per step") {
  TrainConfig cfg = tiny_cfg();
  cfg.total_steps = 2;
  cfg.checkpoint_every = 1;
  cfg.valid_every = 1;
  const std::vector<SongTokens> corpus = tiny_corpus(4, 1, 2);
  TempDir dir("loop");

  int callbacks = 0;
  const TrainResult result = train_loop(cfg, corpus, dir.str(), "",
                                        [&](const StepStats&) { ++callbacks; });
  CHECK(result.steps_run == 2);
  CHECK(callbacks == 2);
  CHECK(fs::exists(result.final_checkpoint));
  CHECK(fs::exists(dir.path / "ckpt_step1.cllp"));
  CHECK(fs::exists(dir.path / "ckpt_step2.cllp"));

  const std::vector<std::string> lines =
      read_lines((dir.path / "metrics.csv").string());
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] ==
        "step,recon_loss,disc_loss,enc_adv_loss,beta,valid_next_acc,wall_ms");
  const std::vector<std::string> row = split_csv(lines[1]);
  REQUIRE(row.size() == 7);
  CHECK(row[0] == "1");
  CHECK(row[1] != "");  // reconstruction loss always present
  CHECK(row[2] == "");  // regularization disabled at this beta
  CHECK(row[3] == "");
  CHECK(row[4] == "0");
  CHECK(row[5] != "");  // validated every step
  CHECK(std::stod(row[5]) >= 0.0);
  CHECK(std::stod(row[5]) <= 1.0);
}

TEST_CASE("a resumed run ends byte-identical to an uninterrupted one") {
  TrainConfig cfg = tiny_cfg();
  cfg.total_steps = 4;
  const std::vector<SongTokens> corpus = tiny_corpus(5, 1, 2);

  TempDir one("oneshot");
  const TrainResult full = train_loop(cfg, corpus, one.str());

  TrainConfig half = cfg;
  half.total_steps = 2;
  TempDir two("firsthalf");
  const TrainResult first = train_loop(half, corpus, two.str());

  TempDir three("secondhalf");
  const TrainResult second =
      train_loop(cfg, corpus, three.str(), first.final_checkpoint);
  CHECK(second.steps_run == 2);

  CHECK(read_file(full.final_checkpoint) ==
        read_file(second.final_checkpoint));
}

TEST_CASE("two same-seed runs produce byte-identical checkpoints") {
  TrainConfig cfg = tiny_cfg();
  cfg.total_steps = 3;
  cfg.beta_start_step = 1;  // exercise the adversarial phase too
  cfg.beta_ramp_steps = 0;
  const std::vector<SongTokens> corpus = tiny_corpus(5, 1, 2);

  TempDir a("rep_a");
  TempDir b("rep_b");
  const TrainResult ra = train_loop(cfg, corpus, a.str());
  const TrainResult rb = train_loop(cfg, corpus, b.str());
  CHECK(read_file(ra.final_checkpoint) == read_file(rb.final_checkpoint));
}

TEST_CASE("regularized steps report adversarial statistics") {
  TrainConfig cfg = tiny_cfg();
  cfg.beta_start_step = 0;
  cfg.beta_ramp_steps = 0;
  cfg.total_steps = 1;
  const std::vector<SongTokens> corpus = tiny_corpus(4, 1, 2);

  Trainer trainer(cfg);
  const StepStats st = trainer.train_step(corpus, corpus);
  CHECK(st.beta == doctest::Approx(0.1));
  CHECK(std::isfinite(st.disc_loss));
  CHECK(st.disc_loss > 0.0);
  CHECK(std::isfinite(st.enc_adv_loss));
  CHECK(st.post_var >= 0.0);
  CHECK(std::isnan(st.valid_next_acc));  // no validation cadence configured
}

TEST_CASE("a tight clipping threshold records clip events") {
  TrainConfig cfg = tiny_cfg();
  cfg.grad_clip = 1e-6;
  cfg.total_steps = 1;
  const std::vector<SongTokens> corpus = tiny_corpus(4, 1, 2);
  Trainer trainer(cfg);
  const StepStats st = trainer.train_step(corpus, corpus);
  CHECK(st.clip_events > 0);
  CHECK(trainer.clip_events() == st.clip_events);
}

TEST_CASE("corpus shape mismatches are rejected up front") {
  TrainConfig cfg = tiny_cfg();
  TempDir dir("reject");

  const std::vector<SongTokens> two_bar = tiny_corpus(4, 2, 2);
  CHECK_THROWS_AS(train_loop(cfg, two_bar, dir.str()), BarsMismatch);

  const std::vector<SongTokens> wide = tiny_corpus(4, 1, 3);
  CHECK_THROWS_AS(train_loop(cfg, wide, dir.str()), ShapeMismatch);

  CHECK_THROWS_AS(train_loop(cfg, {}, dir.str()), TooFewSongs);
}

TEST_CASE("a non-finite forward pass aborts with a rescue checkpoint") {
  TrainConfig cfg = tiny_cfg();
  cfg.total_steps = 2;
  const std::vector<SongTokens> corpus = tiny_corpus(4, 1, 2);
  TempDir dir("abort");

  Trainer poisoned(cfg);
  poisoned.model().params().get("comp.w").data[0] =
      std::numeric_limits<float>::infinity();
  const std::string bad_ck = dir.str() + "/poisoned.cllp";
  poisoned.save_checkpoint(bad_ck);

  CHECK_THROWS_AS(train_loop(cfg, corpus, dir.str(), bad_ck), NonFiniteLoss);
  CHECK(fs::exists(dir.path / "ckpt_abort.cllp"));
}

TEST_CASE("a corpus below the split minimum trains on everything") {
  TrainConfig cfg = tiny_cfg();
  cfg.total_steps = 1;
  cfg.valid_every = 1;
  const std::vector<SongTokens> corpus = tiny_corpus(3, 1, 2);
  TempDir dir("small");

  const TrainResult result = train_loop(cfg, corpus, dir.str());
  CHECK(result.steps_run == 1);
  // validation ran against the full corpus, so the stat is present
  CHECK(std::isfinite(result.last.valid_next_acc));
}
