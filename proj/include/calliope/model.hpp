#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "calliope/checkpoint.hpp"
#include "calliope/graph.hpp"
#include "calliope/token.hpp"

namespace calliope {

struct ModelConfig {
  int n_measures = 1;
  int d_model = 256;
  int n_layers = 6;
  int n_heads = 4;
  int d_ff = 512;
  int n_z = 256;
  int l_mem = 8;
  int d_disc = 512;
  int max_notes = kDefaultMaxNotes;

  int seq_len() const { return seq_len_for(max_notes); }
  int d_head() const { return d_model / n_heads; }
  void validate() const;
};

/// Named parameter registry in fixed insertion order; the order defines
/// checkpoint layout and gradient-check input order.
template <typename S>
struct ParamsT {
  std::vector<std::string> names;
  std::vector<TensorT<S>> tensors;
  std::map<std::string, int> index;

  TensorT<S>& add(const std::string& name, TensorT<S> t);
  TensorT<S>& get(const std::string& name);
  const TensorT<S>& get(const std::string& name) const;
  bool has(const std::string& name) const { return index.count(name) != 0; }
  std::size_t size() const { return names.size(); }
};

/// The full adversarial autoencoder: four per-instrument encoder and
/// decoder stacks around a measure/song compression bottleneck, plus the
/// latent discriminator. Methods build forward passes on a caller-owned
/// graph; bind() decides which parameters receive gradients.
template <typename S>
class CalliopeT {
 public:
  explicit CalliopeT(ModelConfig cfg);

  /// Draws fresh parameter values: weights N(0, 0.02^2) with a smaller
  /// 0.002 std on the output heads, biases and attention biases zero,
  /// layer-norm gains one. Same seed, same values.
  void init_params(std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamsT<S>& params() { return params_; }
  const ParamsT<S>& params() const { return params_; }

  /// Parameters leafed onto a graph. vars holds only the bound subset
  /// when bind() was given a name filter.
  struct Bound {
    GraphT<S>* g = nullptr;
    std::map<std::string, Var> vars;
    Var operator[](const std::string& name) const;
  };

  /// Leafs every parameter (or those passing keep) onto g. trainable
  /// decides requires_grad per name; both default to everything.
  Bound bind(GraphT<S>& g,
             const std::function<bool(const std::string&)>& trainable = {},
             const std::function<bool(const std::string&)>& keep = {}) const;
  /// Binds against caller-created leaves, one per parameter in registry
  /// order; used by gradient checks that own the leaves.
  Bound bind_vars(GraphT<S>& g, const std::vector<Var>& vars) const;

  // ---- sequence helpers ----
  /// Positions up to and including the first EOS (all, if none).
  static std::vector<std::uint8_t> valid_mask(const std::vector<int>& ids);
  /// [ids[1], …, ids[L-1], pad]: per-row targets when the gold sequence
  /// itself is the decoder input (row p scores the token at p+1).
  static std::vector<int> next_targets(const std::vector<int>& ids);

  // ---- encoder side ----
  /// Per-instrument Transformer over one measure: (L, d_model), pad
  /// positions excluded from attention keys.
  Var encode_measure_track(Bound& b, int track,
                           const std::vector<int>& ids) const;
  /// Mean over valid positions then linear to the latent width: (1, n_z).
  Var comp(Bound& b, Var h, const std::vector<std::uint8_t>& row_valid) const;
  /// Concat per-track codes, linear 4*n_z -> n_z.
  Var bar_compress(Bound& b, const std::vector<Var>& per_track) const;
  /// Concat per-measure codes, linear N*n_z -> n_z, layer norm.
  Var song_compress(Bound& b, const std::vector<Var>& per_measure) const;
  /// Whole encoder: seqs are measure-major (seqs[m*4+t]) token ids.
  Var encode_song(Bound& b, const std::vector<std::vector<int>>& seqs) const;

  // ---- decoder side ----
  /// z replicated per measure, tagged with a learned position embedding,
  /// projected back to n_z.
  std::vector<Var> song_decompress(Bound& b, Var z) const;
  /// Equal split into 4 chunks, per-track projection n_z/4 -> n_z.
  std::vector<Var> bar_decompress(Bound& b, Var z_measure) const;
  /// Latent to source-attention memory: (l_mem, d_model).
  Var decomp(Bound& b, int track, Var z_track) const;
  /// Logits (L, vocab) over next tokens: row p is conditioned on
  /// inputs[0..p] and scores the token at position p+1.
  Var decode_measure_track(Bound& b, int track, Var memory,
                           const std::vector<int>& inputs) const;
  /// Greedy decode from SOS until EOS or length L; returns L token ids
  /// (leading SOS, pad after EOS).
  std::vector<int> decode_measure_track_greedy(Bound& b, int track,
                                               Var memory) const;
  /// Teacher-forced logits for a whole song: each gold sequence doubles
  /// as the decoder input, pair with next_targets for the loss.
  std::vector<Var> decode_song_logits(
      Bound& b, Var z, const std::vector<std::vector<int>>& gold) const;
  /// Same, but from caller-supplied decoder inputs; scheduled sampling
  /// feeds mixed gold/predicted tokens through here.
  std::vector<Var> decode_song_logits_from_inputs(
      Bound& b, Var z, const std::vector<std::vector<int>>& inputs) const;
  std::vector<std::vector<int>> decode_song_greedy(Bound& b, Var z) const;

  // ---- discriminator ----
  /// Pre-sigmoid score s with d(z) = sigmoid(s): (1,1).
  Var discriminate_logit(Bound& b, Var z) const;
  Var discriminate(Bound& b, Var z) const;

 private:
  enum class InitKind { Weight, Head, Zero, One };

  ModelConfig cfg_;
  ParamsT<S> params_;
  std::vector<InitKind> kinds_;

  void reg(const std::string& name, std::vector<int> shape, InitKind kind);
  void register_all();
  Var attention_block(Bound& b, const std::string& prefix,
                      const std::string& stack, Var x,
                      const std::vector<std::uint8_t>& key_valid,
                      bool causal) const;
  Var source_attention_block(Bound& b, const std::string& prefix, Var x,
                             Var memory) const;
  Var ff_block(Bound& b, const std::string& prefix, Var x) const;
};

using Calliope = CalliopeT<float>;
using Calliope64 = CalliopeT<double>;

/// Checkpoint round trip for the float model's parameters.
std::vector<CheckpointEntry> params_to_entries(const ParamsT<float>& params);
void params_from_entries(ParamsT<float>& params,
                         const std::vector<CheckpointEntry>& entries);

/// Parameter-name classifiers for the optimizer phase groups.
bool is_discriminator_param(const std::string& name);
bool is_encoder_side_param(const std::string& name);

}  // namespace calliope
