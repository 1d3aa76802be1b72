#include "calliope/model.hpp"

#include <algorithm>
#include <cmath>

#include "calliope/rng.hpp"

namespace calliope {

void ModelConfig::validate() const {
  if (n_measures < 1) throw ConfigError("n_measures must be >= 1");
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || l_mem < 1 ||
      d_disc < 1 || max_notes < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model must be divisible by n_heads");
  }
  if (n_z % kNumTracks != 0) {
    throw ConfigError("n_z must be divisible by the track count");
  }
  if (n_z < kNumTracks) throw ConfigError("n_z too small");
}

template <typename S>
TensorT<S>& ParamsT<S>::add(const std::string& name, TensorT<S> t) {
  if (index.count(name)) throw ConfigError("duplicate parameter " + name);
  index[name] = static_cast<int>(names.size());
  names.push_back(name);
  tensors.push_back(std::move(t));
  return tensors.back();
}

template <typename S>
TensorT<S>& ParamsT<S>::get(const std::string& name) {
  auto it = index.find(name);
  if (it == index.end()) throw ConfigError("unknown parameter " + name);
  return tensors[it->second];
}

template <typename S>
const TensorT<S>& ParamsT<S>::get(const std::string& name) const {
  auto it = index.find(name);
  if (it == index.end()) throw ConfigError("unknown parameter " + name);
  return tensors[it->second];
}

template <typename S>
Var CalliopeT<S>::Bound::operator[](const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw Error("parameter not bound: " + name);
  return it->second;
}

template <typename S>
CalliopeT<S>::CalliopeT(ModelConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  register_all();
}

template <typename S>
void CalliopeT<S>::reg(const std::string& name, std::vector<int> shape,
                       InitKind kind) {
  params_.add(name, TensorT<S>::zeros(shape));
  kinds_.push_back(kind);
}

template <typename S>
void CalliopeT<S>::register_all() {
  const int d = cfg_.d_model;
  const int dh = cfg_.d_head();
  const int L = cfg_.seq_len();
  const int nz = cfg_.n_z;
  const auto layer_core = [&](const std::string& p) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      reg(p + ".attn." + w, {d, d}, InitKind::Weight);
    }
    for (const char* bias : {"bq", "bk", "bv", "bo"}) {
      reg(p + ".attn." + bias, {1, d}, InitKind::Zero);
    }
    reg(p + ".ln1.g", {1, d}, InitKind::One);
    reg(p + ".ln1.b", {1, d}, InitKind::Zero);
  };
  const auto ff = [&](const std::string& p, const std::string& ln) {
    reg(p + ".ff.w1", {d, cfg_.d_ff}, InitKind::Weight);
    reg(p + ".ff.b1", {1, cfg_.d_ff}, InitKind::Zero);
    reg(p + ".ff.w2", {cfg_.d_ff, d}, InitKind::Weight);
    reg(p + ".ff.b2", {1, d}, InitKind::Zero);
    reg(p + "." + ln + ".g", {1, d}, InitKind::One);
    reg(p + "." + ln + ".b", {1, d}, InitKind::Zero);
  };

  for (int t = 0; t < kNumTracks; ++t) {
    const std::string stack =
        std::string("enc.") + role_name(static_cast<TrackRole>(t));
    reg(stack + ".embed", {kVocab, d}, InitKind::Weight);
    reg(stack + ".rel", {2 * L - 1, dh}, InitKind::Weight);
    reg(stack + ".u", {cfg_.n_heads, dh}, InitKind::Zero);
    reg(stack + ".v", {cfg_.n_heads, dh}, InitKind::Zero);
    for (int k = 0; k < cfg_.n_layers; ++k) {
      const std::string p = stack + ".layer" + std::to_string(k);
      layer_core(p);
      ff(p, "ln2");
    }
  }
  reg("comp.w", {d, nz}, InitKind::Weight);
  reg("comp.b", {1, nz}, InitKind::Zero);
  reg("barc.w", {kNumTracks * nz, nz}, InitKind::Weight);
  reg("barc.b", {1, nz}, InitKind::Zero);
  reg("songc.w", {cfg_.n_measures * nz, nz}, InitKind::Weight);
  reg("songc.b", {1, nz}, InitKind::Zero);
  reg("songc.ln.g", {1, nz}, InitKind::One);
  reg("songc.ln.b", {1, nz}, InitKind::Zero);

  reg("songd.pos", {cfg_.n_measures, nz}, InitKind::Weight);
  reg("songd.w", {2 * nz, nz}, InitKind::Weight);
  reg("songd.b", {1, nz}, InitKind::Zero);
  for (int t = 0; t < kNumTracks; ++t) {
    const std::string p =
        std::string("bard.") + role_name(static_cast<TrackRole>(t));
    reg(p + ".w", {nz / kNumTracks, nz}, InitKind::Weight);
    reg(p + ".b", {1, nz}, InitKind::Zero);
  }
  for (int t = 0; t < kNumTracks; ++t) {
    const std::string stack =
        std::string("dec.") + role_name(static_cast<TrackRole>(t));
    reg(stack + ".decomp.w", {nz, cfg_.l_mem * d}, InitKind::Weight);
    reg(stack + ".decomp.b", {1, cfg_.l_mem * d}, InitKind::Zero);
    reg(stack + ".rel", {2 * L - 1, dh}, InitKind::Weight);
    reg(stack + ".u", {cfg_.n_heads, dh}, InitKind::Zero);
    reg(stack + ".v", {cfg_.n_heads, dh}, InitKind::Zero);
    for (int k = 0; k < cfg_.n_layers; ++k) {
      const std::string p = stack + ".layer" + std::to_string(k);
      layer_core(p);
      for (const char* w : {"wq", "wk", "wv", "wo"}) {
        reg(p + ".src." + w, {d, d}, InitKind::Weight);
      }
      for (const char* bias : {"bq", "bk", "bv", "bo"}) {
        reg(p + ".src." + bias, {1, d}, InitKind::Zero);
      }
      reg(p + ".ln2.g", {1, d}, InitKind::One);
      reg(p + ".ln2.b", {1, d}, InitKind::Zero);
      ff(p, "ln3");
    }
    reg(stack + ".out.w", {d, kVocab}, InitKind::Head);
    reg(stack + ".out.b", {1, kVocab}, InitKind::Zero);
  }
  reg("disc.l1.w", {nz, cfg_.d_disc}, InitKind::Weight);
  reg("disc.l1.b", {1, cfg_.d_disc}, InitKind::Zero);
  reg("disc.l2.w", {cfg_.d_disc, cfg_.d_disc}, InitKind::Weight);
  reg("disc.l2.b", {1, cfg_.d_disc}, InitKind::Zero);
  reg("disc.l3.w", {cfg_.d_disc, 1}, InitKind::Weight);
  reg("disc.l3.b", {1, 1}, InitKind::Zero);
}

template <typename S>
void CalliopeT<S>::init_params(std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    TensorT<S>& t = params_.tensors[i];
    switch (kinds_[i]) {
      case InitKind::Weight:
        for (auto& x : t.data) x = S(rng.normal() * 0.02);
        break;
      case InitKind::Head:
        for (auto& x : t.data) x = S(rng.normal() * 0.002);
        break;
      case InitKind::Zero:
        for (auto& x : t.data) x = S(0);
        break;
      case InitKind::One:
        for (auto& x : t.data) x = S(1);
        break;
    }
  }
}

template <typename S>
typename CalliopeT<S>::Bound CalliopeT<S>::bind(
    GraphT<S>& g, const std::function<bool(const std::string&)>& trainable,
    const std::function<bool(const std::string&)>& keep) const {
  Bound b;
  b.g = &g;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::string& name = params_.names[i];
    if (keep && !keep(name)) continue;
    const bool wants_grad = trainable ? trainable(name) : true;
    b.vars[name] = g.leaf(params_.tensors[i], wants_grad);
  }
  return b;
}

template <typename S>
typename CalliopeT<S>::Bound CalliopeT<S>::bind_vars(
    GraphT<S>& g, const std::vector<Var>& vars) const {
  if (vars.size() != params_.size()) {
    throw ShapeMismatch("bind_vars: wrong variable count");
  }
  Bound b;
  b.g = &g;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    b.vars[params_.names[i]] = vars[i];
  }
  return b;
}

template <typename S>
std::vector<std::uint8_t> CalliopeT<S>::valid_mask(
    const std::vector<int>& ids) {
  std::vector<std::uint8_t> mask(ids.size(), 1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == kEos) {
      for (std::size_t j = i + 1; j < ids.size(); ++j) mask[j] = 0;
      break;
    }
  }
  return mask;
}

template <typename S>
std::vector<int> CalliopeT<S>::next_targets(const std::vector<int>& ids) {
  std::vector<int> out(ids.size());
  std::copy(ids.begin() + 1, ids.end(), out.begin());
  out.back() = kPad;
  return out;
}

template <typename S>
Var CalliopeT<S>::attention_block(Bound& b, const std::string& prefix,
                                  const std::string& stack, Var x,
                                  const std::vector<std::uint8_t>& key_valid,
                                  bool causal) const {
  GraphT<S>& g = *b.g;
  const int dh = cfg_.d_head();
  Var q = g.linear(x, b[prefix + "wq"], b[prefix + "bq"]);
  Var k = g.linear(x, b[prefix + "wk"], b[prefix + "bk"]);
  Var v = g.linear(x, b[prefix + "wv"], b[prefix + "bv"]);
  Var rel = b[stack + "rel"];
  Var u_all = b[stack + "u"];
  Var v_all = b[stack + "v"];
  std::vector<Var> heads;
  for (int h = 0; h < cfg_.n_heads; ++h) {
    Var qh = g.slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = g.slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = g.slice_cols(v, h * dh, (h + 1) * dh);
    Var uh = g.slice_rows(u_all, h, h + 1);
    Var vbh = g.slice_rows(v_all, h, h + 1);
    Var scores = g.rel_scores(qh, kh, rel, uh, vbh);
    Var weights = g.masked_softmax(scores, key_valid, causal);
    heads.push_back(g.matmul(weights, vh));
  }
  Var merged = g.concat_cols(heads);
  return g.linear(merged, b[prefix + "wo"], b[prefix + "bo"]);
}

template <typename S>
Var CalliopeT<S>::source_attention_block(Bound& b, const std::string& prefix,
                                         Var x, Var memory) const {
  GraphT<S>& g = *b.g;
  const int dh = cfg_.d_head();
  Var q = g.linear(x, b[prefix + "wq"], b[prefix + "bq"]);
  Var k = g.linear(memory, b[prefix + "wk"], b[prefix + "bk"]);
  Var v = g.linear(memory, b[prefix + "wv"], b[prefix + "bv"]);
  std::vector<Var> heads;
  for (int h = 0; h < cfg_.n_heads; ++h) {
    Var qh = g.slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = g.slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = g.slice_cols(v, h * dh, (h + 1) * dh);
    Var scores = g.scale(g.matmul(qh, g.transpose(kh)),
                         S(1) / std::sqrt(S(dh)));
    Var weights = g.masked_softmax(scores, {}, false);
    heads.push_back(g.matmul(weights, vh));
  }
  Var merged = g.concat_cols(heads);
  return g.linear(merged, b[prefix + "wo"], b[prefix + "bo"]);
}

template <typename S>
Var CalliopeT<S>::ff_block(Bound& b, const std::string& prefix, Var x) const {
  GraphT<S>& g = *b.g;
  Var h = g.gelu(g.linear(x, b[prefix + "w1"], b[prefix + "b1"]));
  return g.linear(h, b[prefix + "w2"], b[prefix + "b2"]);
}

template <typename S>
Var CalliopeT<S>::encode_measure_track(Bound& b, int track,
                                       const std::vector<int>& ids) const {
  if (static_cast<int>(ids.size()) != cfg_.seq_len()) {
    throw ShapeMismatch("encode: sequence length mismatch");
  }
  GraphT<S>& g = *b.g;
  const std::string stack =
      std::string("enc.") + role_name(static_cast<TrackRole>(track)) + ".";
  const std::vector<std::uint8_t> mask = valid_mask(ids);
  Var x = g.embedding_lookup(b[stack + "embed"], ids);
  for (int k = 0; k < cfg_.n_layers; ++k) {
    const std::string p = stack + "layer" + std::to_string(k) + ".";
    Var a = attention_block(b, p + "attn.", stack, x, mask, false);
    x = g.layer_norm(g.add(x, a), b[p + "ln1.g"], b[p + "ln1.b"]);
    Var f = ff_block(b, p + "ff.", x);
    x = g.layer_norm(g.add(x, f), b[p + "ln2.g"], b[p + "ln2.b"]);
  }
  return x;
}

template <typename S>
Var CalliopeT<S>::comp(Bound& b, Var h,
                       const std::vector<std::uint8_t>& row_valid) const {
  GraphT<S>& g = *b.g;
  Var pooled = g.masked_mean_rows(h, row_valid);
  return g.linear(pooled, b["comp.w"], b["comp.b"]);
}

template <typename S>
Var CalliopeT<S>::bar_compress(Bound& b, const std::vector<Var>& per_track) const {
  if (static_cast<int>(per_track.size()) != kNumTracks) {
    throw ShapeMismatch("bar_compress: need one code per track");
  }
  GraphT<S>& g = *b.g;
  Var cat = g.concat_cols(per_track);
  return g.linear(cat, b["barc.w"], b["barc.b"]);
}

template <typename S>
Var CalliopeT<S>::song_compress(Bound& b,
                                const std::vector<Var>& per_measure) const {
  if (static_cast<int>(per_measure.size()) != cfg_.n_measures) {
    throw BarsMismatch("song_compress: measure count mismatch");
  }
  GraphT<S>& g = *b.g;
  Var cat = per_measure.size() == 1 ? per_measure[0]
                                    : g.concat_cols(per_measure);
  Var lin = g.linear(cat, b["songc.w"], b["songc.b"]);
  return g.layer_norm(lin, b["songc.ln.g"], b["songc.ln.b"]);
}

template <typename S>
Var CalliopeT<S>::encode_song(Bound& b,
                              const std::vector<std::vector<int>>& seqs) const {
  if (static_cast<int>(seqs.size()) != cfg_.n_measures * kNumTracks) {
    throw BarsMismatch("encode_song: sequence count mismatch");
  }
  std::vector<Var> per_measure;
  for (int m = 0; m < cfg_.n_measures; ++m) {
    std::vector<Var> per_track;
    for (int t = 0; t < kNumTracks; ++t) {
      const std::vector<int>& ids = seqs[m * kNumTracks + t];
      Var h = encode_measure_track(b, t, ids);
      per_track.push_back(comp(b, h, valid_mask(ids)));
    }
    per_measure.push_back(bar_compress(b, per_track));
  }
  return song_compress(b, per_measure);
}

template <typename S>
std::vector<Var> CalliopeT<S>::song_decompress(Bound& b, Var z) const {
  GraphT<S>& g = *b.g;
  Var pos = b["songd.pos"];
  std::vector<Var> out;
  for (int m = 0; m < cfg_.n_measures; ++m) {
    Var tagged = g.concat_cols({z, g.slice_rows(pos, m, m + 1)});
    out.push_back(g.linear(tagged, b["songd.w"], b["songd.b"]));
  }
  return out;
}

template <typename S>
std::vector<Var> CalliopeT<S>::bar_decompress(Bound& b, Var z_measure) const {
  GraphT<S>& g = *b.g;
  std::vector<Var> chunks = g.split_cols(z_measure, kNumTracks);
  std::vector<Var> out;
  for (int t = 0; t < kNumTracks; ++t) {
    const std::string p =
        std::string("bard.") + role_name(static_cast<TrackRole>(t)) + ".";
    out.push_back(g.linear(chunks[t], b[p + "w"], b[p + "b"]));
  }
  return out;
}

template <typename S>
Var CalliopeT<S>::decomp(Bound& b, int track, Var z_track) const {
  GraphT<S>& g = *b.g;
  const std::string p =
      std::string("dec.") + role_name(static_cast<TrackRole>(track)) +
      ".decomp.";
  Var flat = g.linear(z_track, b[p + "w"], b[p + "b"]);
  std::vector<Var> slots = g.split_cols(flat, cfg_.l_mem);
  return g.concat_rows(slots);
}

template <typename S>
Var CalliopeT<S>::decode_measure_track(Bound& b, int track, Var memory,
                                       const std::vector<int>& inputs) const {
  if (static_cast<int>(inputs.size()) != cfg_.seq_len()) {
    throw ShapeMismatch("decode: sequence length mismatch");
  }
  GraphT<S>& g = *b.g;
  const std::string role = role_name(static_cast<TrackRole>(track));
  const std::string stack = "dec." + role + ".";
  Var x = g.embedding_lookup(b["enc." + role + ".embed"], inputs);
  for (int k = 0; k < cfg_.n_layers; ++k) {
    const std::string p = stack + "layer" + std::to_string(k) + ".";
    Var a = attention_block(b, p + "attn.", stack, x, {}, true);
    x = g.layer_norm(g.add(x, a), b[p + "ln1.g"], b[p + "ln1.b"]);
    Var s = source_attention_block(b, p + "src.", x, memory);
    x = g.layer_norm(g.add(x, s), b[p + "ln2.g"], b[p + "ln2.b"]);
    Var f = ff_block(b, p + "ff.", x);
    x = g.layer_norm(g.add(x, f), b[p + "ln3.g"], b[p + "ln3.b"]);
  }
  return g.linear(x, b[stack + "out.w"], b[stack + "out.b"]);
}

template <typename S>
std::vector<int> CalliopeT<S>::decode_measure_track_greedy(Bound& b, int track,
                                                           Var memory) const {
  GraphT<S>& g = *b.g;
  const int L = cfg_.seq_len();
  std::vector<int> emitted(L, kPad);
  emitted[0] = kSos;
  for (int p = 1; p < L; ++p) {
    Var logits = decode_measure_track(b, track, memory, emitted);
    const TensorT<S>& lv = g.value(logits);
    const S* row = lv.row_ptr(p - 1);
    int best = 0;
    for (int j = 1; j < kVocab; ++j) {
      if (row[j] > row[best]) best = j;
    }
    emitted[p] = best;
    if (best == kEos) break;
  }
  return emitted;
}

template <typename S>
std::vector<Var> CalliopeT<S>::decode_song_logits(
    Bound& b, Var z, const std::vector<std::vector<int>>& gold) const {
  return decode_song_logits_from_inputs(b, z, gold);
}

template <typename S>
std::vector<Var> CalliopeT<S>::decode_song_logits_from_inputs(
    Bound& b, Var z, const std::vector<std::vector<int>>& inputs) const {
  if (static_cast<int>(inputs.size()) != cfg_.n_measures * kNumTracks) {
    throw BarsMismatch("decode_song_logits: sequence count mismatch");
  }
  std::vector<Var> per_measure = song_decompress(b, z);
  std::vector<Var> logits;
  for (int m = 0; m < cfg_.n_measures; ++m) {
    std::vector<Var> per_track = bar_decompress(b, per_measure[m]);
    for (int t = 0; t < kNumTracks; ++t) {
      Var memory = decomp(b, t, per_track[t]);
      logits.push_back(decode_measure_track(b, t, memory,
                                            inputs[m * kNumTracks + t]));
    }
  }
  return logits;
}

template <typename S>
std::vector<std::vector<int>> CalliopeT<S>::decode_song_greedy(Bound& b,
                                                               Var z) const {
  std::vector<Var> per_measure = song_decompress(b, z);
  std::vector<std::vector<int>> out;
  for (int m = 0; m < cfg_.n_measures; ++m) {
    std::vector<Var> per_track = bar_decompress(b, per_measure[m]);
    for (int t = 0; t < kNumTracks; ++t) {
      Var memory = decomp(b, t, per_track[t]);
      out.push_back(decode_measure_track_greedy(b, t, memory));
    }
  }
  return out;
}

template <typename S>
Var CalliopeT<S>::discriminate_logit(Bound& b, Var z) const {
  GraphT<S>& g = *b.g;
  Var h1 = g.gelu(g.linear(z, b["disc.l1.w"], b["disc.l1.b"]));
  Var h2 = g.gelu(g.linear(h1, b["disc.l2.w"], b["disc.l2.b"]));
  return g.linear(h2, b["disc.l3.w"], b["disc.l3.b"]);
}

template <typename S>
Var CalliopeT<S>::discriminate(Bound& b, Var z) const {
  return b.g->sigmoid(discriminate_logit(b, z));
}

template struct ParamsT<float>;
template struct ParamsT<double>;
template class CalliopeT<float>;
template class CalliopeT<double>;

std::vector<CheckpointEntry> params_to_entries(const ParamsT<float>& params) {
  std::vector<CheckpointEntry> entries;
  entries.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    entries.push_back(make_entry_f32(params.names[i], params.tensors[i]));
  }
  return entries;
}

void params_from_entries(ParamsT<float>& params,
                         const std::vector<CheckpointEntry>& entries) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto it = by_name.find(params.names[i]);
    if (it == by_name.end()) {
      throw MalformedHeader("checkpoint missing parameter " + params.names[i]);
    }
    Tensor t = entry_as_f32(*it->second);
    if (!t.same_shape(params.tensors[i])) {
      throw MalformedHeader("checkpoint shape mismatch for " +
                            params.names[i]);
    }
    params.tensors[i] = std::move(t);
  }
}

bool is_discriminator_param(const std::string& name) {
  return name.rfind("disc.", 0) == 0;
}

bool is_encoder_side_param(const std::string& name) {
  return name.rfind("enc.", 0) == 0 || name.rfind("comp.", 0) == 0 ||
         name.rfind("barc.", 0) == 0 || name.rfind("songc.", 0) == 0;
}

}  // namespace calliope
