#include "calliope/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "calliope/corpus.hpp"
#include "calliope/eval.hpp"
#include "calliope/rng.hpp"

namespace calliope {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// substream kinds; each (kind, step) pair owns an independent stream so a
// resumed run replays the exact randomness of an uninterrupted one
constexpr std::uint64_t kStreamInit = 1;
constexpr std::uint64_t kStreamCoins = 2;
constexpr std::uint64_t kStreamPrior = 3;
constexpr std::uint64_t kStreamBatch = 4;
constexpr std::uint64_t kStreamSplit = 5;

long long count_non_pad(const std::vector<int>& ids) {
  long long n = 0;
  for (int id : ids) n += id != kPad ? 1 : 0;
  return n;
}

int argmax_row(const Tensor& t, int row) {
  const float* p = t.row_ptr(row);
  int best = 0;
  for (int j = 1; j < t.cols(); ++j) {
    if (p[j] > p[best]) best = j;
  }
  return best;
}

bool group_recon(const std::string& name) {
  return !is_discriminator_param(name);
}

}  // namespace

void TrainConfig::validate() const {
  model_config().validate();
  if (bars < 1) throw ConfigError("bars must be >= 1");
  if (lr <= 0) throw ConfigError("lr must be positive");
  if (batch_size < 0) throw ConfigError("batch_size must be >= 0");
  if (tf_prob < 0 || tf_prob > 1) throw ConfigError("tf_prob must be in [0,1]");
  if (ss_k < 1) throw ConfigError("ss_k must be >= 1");
  if (beta_max < 0) throw ConfigError("beta_max must be >= 0");
  if (beta_ramp_steps < 0) throw ConfigError("beta_ramp_steps must be >= 0");
  if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
  if (split_train <= 0 || split_valid < 0 || split_test < 0) {
    throw ConfigError("split fractions must be non-negative, train positive");
  }
  if (std::abs(split_train + split_valid + split_test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  if (grad_clip < 0) throw ConfigError("grad_clip must be >= 0");
  if (checkpoint_every < 0 || valid_every < 0) {
    throw ConfigError("periods must be >= 0");
  }
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig m;
  m.n_measures = bars;
  m.d_model = d_model;
  m.n_layers = n_layers;
  m.n_heads = n_heads;
  m.d_ff = d_ff;
  m.n_z = n_z;
  m.l_mem = l_mem;
  m.d_disc = d_disc;
  m.max_notes = max_notes;
  return m;
}

int TrainConfig::resolved_batch() const {
  if (batch_size > 0) return batch_size;
  return bars >= 16 ? 2 : 20;
}

long long TrainConfig::resolved_beta_start() const {
  if (beta_start_step >= 0) return beta_start_step;
  return bars >= 16 ? 25000 : 50000;
}

namespace {

struct Field {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

long long parse_ll(const std::string& v) {
  std::size_t used = 0;
  const long long x = std::stoll(v, &used);
  if (used != v.size()) throw ConfigError("bad integer value: " + v);
  return x;
}

double parse_dbl(const std::string& v) {
  std::size_t used = 0;
  const double x = std::stod(v, &used);
  if (used != v.size()) throw ConfigError("bad number value: " + v);
  return x;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("bad boolean value: " + v);
}

std::string fmt_dbl(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

const std::vector<std::pair<std::string, Field>>& config_fields() {
  auto int_field = [](int TrainConfig::* p) {
    return Field{[p](TrainConfig& c, const std::string& v) {
                   c.*p = static_cast<int>(parse_ll(v));
                 },
                 [p](const TrainConfig& c) { return std::to_string(c.*p); }};
  };
  auto ll_field = [](long long TrainConfig::* p) {
    return Field{[p](TrainConfig& c, const std::string& v) {
                   c.*p = parse_ll(v);
                 },
                 [p](const TrainConfig& c) { return std::to_string(c.*p); }};
  };
  auto dbl_field = [](double TrainConfig::* p) {
    return Field{[p](TrainConfig& c, const std::string& v) {
                   c.*p = parse_dbl(v);
                 },
                 [p](const TrainConfig& c) { return fmt_dbl(c.*p); }};
  };
  static const std::vector<std::pair<std::string, Field>> fields = {
      {"bars", int_field(&TrainConfig::bars)},
      {"d_model", int_field(&TrainConfig::d_model)},
      {"n_layers", int_field(&TrainConfig::n_layers)},
      {"n_heads", int_field(&TrainConfig::n_heads)},
      {"d_ff", int_field(&TrainConfig::d_ff)},
      {"n_z", int_field(&TrainConfig::n_z)},
      {"l_mem", int_field(&TrainConfig::l_mem)},
      {"d_disc", int_field(&TrainConfig::d_disc)},
      {"max_notes", int_field(&TrainConfig::max_notes)},
      {"lr", dbl_field(&TrainConfig::lr)},
      {"batch_size", int_field(&TrainConfig::batch_size)},
      {"tf_prob", dbl_field(&TrainConfig::tf_prob)},
      {"ss_k", int_field(&TrainConfig::ss_k)},
      {"beta_max", dbl_field(&TrainConfig::beta_max)},
      {"beta_start_step", ll_field(&TrainConfig::beta_start_step)},
      {"beta_ramp_steps", ll_field(&TrainConfig::beta_ramp_steps)},
      {"total_steps", ll_field(&TrainConfig::total_steps)},
      {"seed",
       Field{[](TrainConfig& c, const std::string& v) {
               c.seed = static_cast<std::uint64_t>(std::stoull(v));
             },
             [](const TrainConfig& c) { return std::to_string(c.seed); }}},
      {"split_train", dbl_field(&TrainConfig::split_train)},
      {"split_valid", dbl_field(&TrainConfig::split_valid)},
      {"split_test", dbl_field(&TrainConfig::split_test)},
      {"grad_clip", dbl_field(&TrainConfig::grad_clip)},
      {"adv_single_term",
       Field{[](TrainConfig& c, const std::string& v) {
               c.adv_single_term = parse_bool(v);
             },
             [](const TrainConfig& c) {
               return c.adv_single_term ? std::string("true")
                                        : std::string("false");
             }}},
      {"checkpoint_every", ll_field(&TrainConfig::checkpoint_every)},
      {"valid_every", ll_field(&TrainConfig::valid_every)},
  };
  return fields;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t z = s.find_last_not_of(" \t\r\n");
  return s.substr(a, z - a + 1);
}

}  // namespace

TrainConfig TrainConfig::parse_text(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line without '=': " + line);
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    bool found = false;
    for (const auto& [name, field] : config_fields()) {
      if (name == key) {
        field.set(cfg, value);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError("unknown config key: " + key);
  }
  return cfg;
}

TrainConfig TrainConfig::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_text(buf.str());
}

std::string TrainConfig::to_key_values() const {
  std::string out;
  for (const auto& [name, field] : config_fields()) {
    out += name + "=" + field.get(*this) + "\n";
  }
  return out;
}

double beta_schedule(long long step, const TrainConfig& cfg) {
  const long long start = cfg.resolved_beta_start();
  if (step < start) return 0.0;
  if (cfg.beta_ramp_steps <= 0) return cfg.beta_max;
  if (step >= start + cfg.beta_ramp_steps) return cfg.beta_max;
  return cfg.beta_max * static_cast<double>(step - start) /
         static_cast<double>(cfg.beta_ramp_steps);
}

Split split_dataset(int n_songs, double f_train, double f_valid,
                    double f_test, std::uint64_t seed) {
  if (n_songs < 10) throw TooFewSongs("need at least 10 songs to split");
  if (std::abs(f_train + f_valid + f_test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  std::vector<int> ids(n_songs);
  for (int i = 0; i < n_songs; ++i) ids[i] = i;
  Rng rng(seed);
  rng.shuffle(ids);
  long long n_train = std::llround(f_train * n_songs);
  long long n_valid = std::llround(f_valid * n_songs);
  if (n_train + n_valid > n_songs) n_valid = n_songs - n_train;
  Split sp;
  sp.train.assign(ids.begin(), ids.begin() + n_train);
  sp.valid.assign(ids.begin() + n_train, ids.begin() + n_train + n_valid);
  sp.test.assign(ids.begin() + n_train + n_valid, ids.end());
  return sp;
}

std::vector<std::vector<int>> to_int_seqs(const SongTokens& song) {
  std::vector<std::vector<int>> out;
  out.reserve(song.seqs.size());
  for (const TokenSeq& seq : song.seqs) {
    out.emplace_back(seq.begin(), seq.end());
  }
  return out;
}

std::uint64_t Trainer::substream(std::uint64_t seed, std::uint64_t kind,
                                 std::uint64_t step) {
  return Rng::mix(seed, (kind << 56) ^ step);
}

Trainer::Trainer(const TrainConfig& cfg)
    : cfg_(cfg),
      model_(cfg.model_config()),
      adam_(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8}) {
  cfg_.validate();
  model_.init_params(substream(cfg_.seed, kStreamInit, 0));
}

void Trainer::apply_updates(
    Graph& g, const Calliope::Bound& b,
    const std::function<bool(const std::string&)>& group) {
  ParamsT<float>& params = model_.params();
  std::vector<std::pair<int, Tensor>> grads;
  double norm_sq = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names[i];
    if (!group(name)) continue;
    Tensor grad = g.grad(b[name]);
    for (float x : grad.data) norm_sq += double(x) * double(x);
    grads.emplace_back(static_cast<int>(i), std::move(grad));
  }
  const double norm = std::sqrt(norm_sq);
  float scale = 1.0f;
  if (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) {
    scale = static_cast<float>(cfg_.grad_clip / norm);
    ++clip_events_;
  }
  for (auto& [i, grad] : grads) {
    if (scale != 1.0f) {
      for (float& x : grad.data) x *= scale;
    }
    adam_.step(params.names[i], params.tensors[i], grad);
  }
}

namespace {

void accumulate_norms(const Calliope::Bound& b, Graph& g,
                      const ParamsT<float>& params,
                      Trainer::GroupNorms* norms) {
  if (!norms) return;
  double enc = 0, dec = 0, disc = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names[i];
    auto it = b.vars.find(name);
    if (it == b.vars.end()) continue;
    const Tensor grad = g.grad(it->second);
    double s = 0;
    for (float x : grad.data) s += double(x) * double(x);
    if (is_discriminator_param(name)) {
      disc += s;
    } else if (is_encoder_side_param(name)) {
      enc += s;
    } else {
      dec += s;
    }
  }
  norms->encoder = std::sqrt(enc);
  norms->decoder = std::sqrt(dec);
  norms->disc = std::sqrt(disc);
}

}  // namespace

double Trainer::reconstruction_phase(const Batch& batch,
                                     std::uint64_t coin_seed,
                                     GroupNorms* norms) {
  if (batch.empty()) throw ConfigError("empty batch");
  Graph g;
  Calliope::Bound b = model_.bind(g);
  Rng coins(coin_seed);
  std::vector<Var> losses;
  long long total_count = 0;
  for (const SongTokens* song : batch) {
    const std::vector<std::vector<int>> gold = to_int_seqs(*song);
    Var z = model_.encode_song(b, gold);
    std::vector<std::vector<int>> inputs = gold;
    if (cfg_.tf_prob < 1.0) {
      for (int round = 0; round < cfg_.ss_k; ++round) {
        g.set_grad_enabled(false);
        std::vector<Var> draft =
            model_.decode_song_logits_from_inputs(b, z, inputs);
        g.set_grad_enabled(true);
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          const Tensor& logits = g.value(draft[i]);
          std::vector<int>& in = inputs[i];
          // row p-1 of the draft is the model's guess for position p
          for (std::size_t p = 1; p < in.size(); ++p) {
            const bool keep_gold = coins.uniform() < cfg_.tf_prob;
            in[p] = keep_gold ? gold[i][p]
                              : argmax_row(logits, static_cast<int>(p) - 1);
          }
        }
      }
    }
    std::vector<Var> logits = model_.decode_song_logits_from_inputs(b, z, inputs);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const std::vector<int> targets = Calliope::next_targets(gold[i]);
      losses.push_back(g.cross_entropy(logits[i], targets, kPad, false));
      total_count += count_non_pad(targets);
    }
  }
  Var total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) {
    total = g.add(total, losses[i]);
  }
  Var loss = g.scale(total, 1.0f / static_cast<float>(total_count));
  g.backward(loss);
  accumulate_norms(b, g, model_.params(), norms);
  apply_updates(g, b, group_recon);
  return static_cast<double>(g.value(loss).data[0]);
}

Trainer::RegStats Trainer::regularization_phase(const Batch& batch,
                                                double beta,
                                                std::uint64_t prior_seed,
                                                GroupNorms* disc_norms,
                                                GroupNorms* enc_norms) {
  if (batch.empty()) throw ConfigError("empty batch");
  RegStats st;
  const int nz = cfg_.n_z;

  // step A: fit the discriminator; encoder frozen
  {
    Graph g;
    Calliope::Bound b = model_.bind(g, is_discriminator_param);
    std::vector<Var> post, prior;
    for (const SongTokens* song : batch) {
      Var z = model_.encode_song(b, to_int_seqs(*song));
      post.push_back(model_.discriminate_logit(b, z));
    }
    Rng pr(prior_seed);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Tensor zp = Tensor::zeros({1, nz});
      for (auto& x : zp.data) x = static_cast<float>(pr.normal());
      prior.push_back(model_.discriminate_logit(b, g.constant(zp)));
    }
    Var s_post = g.concat_rows(post);
    Var s_prior = g.concat_rows(prior);
    Var loss = g.add(g.mean_all(g.softplus(g.scale(s_post, -1.0f))),
                     g.mean_all(g.softplus(s_prior)));
    g.backward(loss);
    accumulate_norms(b, g, model_.params(), disc_norms);
    apply_updates(g, b, is_discriminator_param);
    st.disc_loss = static_cast<double>(g.value(loss).data[0]);
  }

  // step B: move the encoder along the density-ratio KL estimate;
  // discriminator frozen
  {
    Graph g;
    Calliope::Bound b = model_.bind(g, is_encoder_side_param);
    std::vector<Var> post;
    std::vector<Tensor> codes;
    for (const SongTokens* song : batch) {
      Var z = model_.encode_song(b, to_int_seqs(*song));
      codes.push_back(g.value(z));
      post.push_back(model_.discriminate_logit(b, z));
    }
    Var s_post = g.concat_rows(post);
    // log d - log(1-d) collapses to the raw logit; the single-term
    // variant keeps only log d
    Var kl = cfg_.adv_single_term
                 ? g.scale(g.softplus(g.scale(s_post, -1.0f)), -1.0f)
                 : s_post;
    Var kl_mean = g.mean_all(kl);
    Var loss = g.scale(kl_mean, static_cast<float>(beta));
    g.backward(loss);
    accumulate_norms(b, g, model_.params(), enc_norms);
    apply_updates(g, b, is_encoder_side_param);
    st.enc_adv_loss = static_cast<double>(g.value(kl_mean).data[0]);

    const std::size_t n = codes.size();
    double abs_mean_sum = 0, var_sum = 0;
    for (int j = 0; j < nz; ++j) {
      double mu = 0;
      for (const Tensor& c : codes) mu += c.data[j];
      mu /= static_cast<double>(n);
      double var = 0;
      for (const Tensor& c : codes) {
        var += (c.data[j] - mu) * (c.data[j] - mu);
      }
      var /= static_cast<double>(n);
      abs_mean_sum += std::abs(mu);
      var_sum += var;
    }
    st.post_abs_mean = abs_mean_sum / nz;
    st.post_var = var_sum / nz;
  }
  return st;
}

double Trainer::teacher_forced_loss(const Batch& batch) {
  if (batch.empty()) throw ConfigError("empty batch");
  Graph g;
  g.set_grad_enabled(false);
  Calliope::Bound b = model_.bind(g);
  std::vector<Var> losses;
  long long total_count = 0;
  for (const SongTokens* song : batch) {
    const std::vector<std::vector<int>> gold = to_int_seqs(*song);
    Var z = model_.encode_song(b, gold);
    std::vector<Var> logits = model_.decode_song_logits(b, z, gold);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const std::vector<int> targets = Calliope::next_targets(gold[i]);
      losses.push_back(g.cross_entropy(logits[i], targets, kPad, false));
      total_count += count_non_pad(targets);
    }
  }
  Var total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) {
    total = g.add(total, losses[i]);
  }
  Var loss = g.scale(total, 1.0f / static_cast<float>(total_count));
  return static_cast<double>(g.value(loss).data[0]);
}

StepStats Trainer::train_step(const std::vector<SongTokens>& train,
                              const std::vector<SongTokens>& valid) {
  if (train.empty()) throw TooFewSongs("empty training set");
  const long long s = step_;
  const int want = cfg_.resolved_batch();
  Batch batch;
  if (want >= static_cast<int>(train.size())) {
    for (const auto& song : train) batch.push_back(&song);
  } else {
    Rng br(substream(cfg_.seed, kStreamBatch, static_cast<std::uint64_t>(s)));
    std::vector<int> ids(train.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    for (int i = 0; i < want; ++i) {
      const int j = br.uniform_int(i, static_cast<int>(ids.size()) - 1);
      std::swap(ids[i], ids[j]);
      batch.push_back(&train[ids[i]]);
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  const int clips_before = clip_events_;
  StepStats st;
  st.step = s + 1;
  st.beta = beta_schedule(s, cfg_);
  st.recon_loss = reconstruction_phase(
      batch, substream(cfg_.seed, kStreamCoins, static_cast<std::uint64_t>(s)));
  if (st.beta > 0) {
    const RegStats reg = regularization_phase(
        batch, st.beta,
        substream(cfg_.seed, kStreamPrior, static_cast<std::uint64_t>(s)));
    st.disc_loss = reg.disc_loss;
    st.enc_adv_loss = reg.enc_adv_loss;
    st.post_abs_mean = reg.post_abs_mean;
    st.post_var = reg.post_var;
  } else {
    st.disc_loss = kNaN;
    st.enc_adv_loss = kNaN;
    st.post_abs_mean = kNaN;
    st.post_var = kNaN;
  }
  step_ = s + 1;
  if (cfg_.valid_every > 0 && step_ % cfg_.valid_every == 0 && !valid.empty()) {
    st.valid_next_acc = accuracy_next(model_, valid);
  } else {
    st.valid_next_acc = kNaN;
  }
  st.clip_events = clip_events_ - clips_before;
  st.wall_ms = std::chrono::duration<double, std::milli>(
                   std::chrono::steady_clock::now() - t0)
                   .count();
  return st;
}

void Trainer::save_checkpoint(const std::string& path) const {
  std::vector<CheckpointEntry> entries = params_to_entries(model_.params());
  for (const auto& [name, state] : adam_.states()) {
    entries.push_back(make_entry_f32("adam.m." + name, state.m));
    entries.push_back(make_entry_f32("adam.v." + name, state.v));
    entries.push_back(make_entry_u64("adam.t." + name, state.t));
  }
  const ModelConfig m = cfg_.model_config();
  entries.push_back(make_entry_u32_list(
      "meta.model",
      {static_cast<std::uint32_t>(m.n_measures),
       static_cast<std::uint32_t>(m.d_model),
       static_cast<std::uint32_t>(m.n_layers),
       static_cast<std::uint32_t>(m.n_heads),
       static_cast<std::uint32_t>(m.d_ff), static_cast<std::uint32_t>(m.n_z),
       static_cast<std::uint32_t>(m.l_mem),
       static_cast<std::uint32_t>(m.d_disc),
       static_cast<std::uint32_t>(m.max_notes)}));
  entries.push_back(
      make_entry_u64("meta.step", static_cast<std::uint64_t>(step_)));
  entries.push_back(make_entry_u64("meta.seed", cfg_.seed));
  write_checkpoint(path, entries);
}

namespace {

ModelConfig model_config_from_meta(const std::vector<CheckpointEntry>& entries) {
  for (const auto& e : entries) {
    if (e.name != "meta.model") continue;
    const auto dims = entry_as_u32_list(e);
    if (dims.size() != 9) throw MalformedHeader("meta.model has wrong arity");
    ModelConfig m;
    m.n_measures = static_cast<int>(dims[0]);
    m.d_model = static_cast<int>(dims[1]);
    m.n_layers = static_cast<int>(dims[2]);
    m.n_heads = static_cast<int>(dims[3]);
    m.d_ff = static_cast<int>(dims[4]);
    m.n_z = static_cast<int>(dims[5]);
    m.l_mem = static_cast<int>(dims[6]);
    m.d_disc = static_cast<int>(dims[7]);
    m.max_notes = static_cast<int>(dims[8]);
    return m;
  }
  throw MalformedHeader("checkpoint lacks meta.model");
}

bool same_model_config(const ModelConfig& a, const ModelConfig& b) {
  return a.n_measures == b.n_measures && a.d_model == b.d_model &&
         a.n_layers == b.n_layers && a.n_heads == b.n_heads &&
         a.d_ff == b.d_ff && a.n_z == b.n_z && a.l_mem == b.l_mem &&
         a.d_disc == b.d_disc && a.max_notes == b.max_notes;
}

}  // namespace

void Trainer::load_checkpoint(const std::string& path) {
  const std::vector<CheckpointEntry> entries = read_checkpoint(path);
  if (!same_model_config(model_config_from_meta(entries),
                         cfg_.model_config())) {
    throw MalformedHeader("checkpoint written by a different model shape");
  }
  params_from_entries(model_.params(), entries);
  std::map<std::string, Tensor> m_parts, v_parts;
  std::map<std::string, std::uint64_t> t_parts;
  for (const auto& e : entries) {
    if (e.name.rfind("adam.m.", 0) == 0) {
      m_parts.emplace(e.name.substr(7), entry_as_f32(e));
    } else if (e.name.rfind("adam.v.", 0) == 0) {
      v_parts.emplace(e.name.substr(7), entry_as_f32(e));
    } else if (e.name.rfind("adam.t.", 0) == 0) {
      t_parts.emplace(e.name.substr(7), entry_as_u64(e));
    }
  }
  adam_.states().clear();
  for (auto& [name, m] : m_parts) {
    auto vi = v_parts.find(name);
    auto ti = t_parts.find(name);
    if (vi == v_parts.end() || ti == t_parts.end()) {
      throw MalformedHeader("incomplete optimizer state for " + name);
    }
    Adam::State state;
    state.m = std::move(m);
    state.v = std::move(vi->second);
    state.t = ti->second;
    adam_.states().emplace(name, std::move(state));
  }
  std::uint64_t loaded_step = 0;
  bool have_step = false;
  for (const auto& e : entries) {
    if (e.name == "meta.step") {
      loaded_step = entry_as_u64(e);
      have_step = true;
    }
  }
  if (!have_step) throw MalformedHeader("checkpoint lacks meta.step");
  step_ = static_cast<long long>(loaded_step);
}

namespace {

void csv_field(std::string& row, double v) {
  if (!std::isnan(v)) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    row += buf;
  }
  row += ',';
}

}  // namespace

TrainResult train_loop(const TrainConfig& cfg,
                       const std::vector<SongTokens>& corpus,
                       const std::string& run_dir,
                       const std::string& resume_checkpoint,
                       const std::function<void(const StepStats&)>& on_step) {
  cfg.validate();
  if (corpus.empty()) throw TooFewSongs("corpus is empty");
  const int L = seq_len_for(cfg.max_notes);
  for (const auto& song : corpus) {
    if (song.n_measures != cfg.bars) {
      throw BarsMismatch("corpus song has " + std::to_string(song.n_measures) +
                         " measures, config expects " +
                         std::to_string(cfg.bars));
    }
    if (song.seq_len != L) {
      throw ShapeMismatch("corpus sequence length " +
                          std::to_string(song.seq_len) + ", config needs " +
                          std::to_string(L));
    }
  }

  std::vector<SongTokens> train_set, valid_set;
  if (corpus.size() >= 10) {
    const Split sp =
        split_dataset(static_cast<int>(corpus.size()), cfg.split_train,
                      cfg.split_valid, cfg.split_test,
                      Rng::mix(cfg.seed, kStreamSplit << 56));
    for (int id : sp.train) train_set.push_back(corpus[id]);
    for (int id : sp.valid) valid_set.push_back(corpus[id]);
  } else {
    // too small to split meaningfully; memorization-scale runs train and
    // validate on everything
    train_set = corpus;
    valid_set = corpus;
  }

  namespace fs = std::filesystem;
  fs::create_directories(run_dir);
  const std::string csv_path = run_dir + "/metrics.csv";
  const bool fresh_csv = !fs::exists(csv_path);
  std::ofstream csv(csv_path, std::ios::app);
  if (!csv) throw IoError("cannot open " + csv_path);
  if (fresh_csv) {
    csv << "step,recon_loss,disc_loss,enc_adv_loss,beta,valid_next_acc,"
           "wall_ms\n";
  }

  Trainer trainer(cfg);
  if (!resume_checkpoint.empty()) trainer.load_checkpoint(resume_checkpoint);

  TrainResult result;
  while (trainer.step() < cfg.total_steps) {
    StepStats st;
    try {
      st = trainer.train_step(train_set, valid_set);
    } catch (const NonFiniteValue& e) {
      const std::string abort_path = run_dir + "/ckpt_abort.cllp";
      trainer.save_checkpoint(abort_path);
      throw NonFiniteLoss(std::string("training aborted (") + e.what() +
                          "); last good state in " + abort_path);
    }
    std::string row = std::to_string(st.step) + ",";
    csv_field(row, st.recon_loss);
    csv_field(row, st.disc_loss);
    csv_field(row, st.enc_adv_loss);
    csv_field(row, st.beta);
    csv_field(row, st.valid_next_acc);
    char wall[64];
    std::snprintf(wall, sizeof(wall), "%.3f", st.wall_ms);
    row += wall;
    csv << row << "\n";
    csv.flush();
    if (on_step) on_step(st);
    if (cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0) {
      trainer.save_checkpoint(run_dir + "/ckpt_step" +
                              std::to_string(st.step) + ".cllp");
    }
    result.last = st;
    ++result.steps_run;
  }
  result.final_checkpoint = run_dir + "/ckpt_final.cllp";
  trainer.save_checkpoint(result.final_checkpoint);
  result.clip_events = trainer.clip_events();
  return result;
}

Calliope load_model_checkpoint(const std::string& path, ModelConfig* cfg_out) {
  const std::vector<CheckpointEntry> entries = read_checkpoint(path);
  const ModelConfig m = model_config_from_meta(entries);
  Calliope model(m);
  params_from_entries(model.params(), entries);
  if (cfg_out) *cfg_out = m;
  return model;
}

}  // namespace calliope
