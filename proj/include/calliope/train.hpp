#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "calliope/adam.hpp"
#include "calliope/model.hpp"

namespace calliope {

struct TrainConfig {
  // model
  int bars = 1;
  int d_model = 256;
  int n_layers = 6;
  int n_heads = 4;
  int d_ff = 512;
  int n_z = 256;
  int l_mem = 8;
  int d_disc = 512;
  int max_notes = kDefaultMaxNotes;
  // optimization
  double lr = 1e-4;
  int batch_size = 0;  // 0 = paper default for the bar count
  double tf_prob = 0.5;
  int ss_k = 1;
  double beta_max = 0.1;
  long long beta_start_step = -1;  // -1 = paper default for the bar count
  long long beta_ramp_steps = 10000;
  long long total_steps = 1000;
  std::uint64_t seed = 1;
  double split_train = 0.7;
  double split_valid = 0.1;
  double split_test = 0.2;
  double grad_clip = 1.0;  // global-norm cap per updated group; 0 disables
  bool adv_single_term = false;
  long long checkpoint_every = 0;  // 0 = final checkpoint only
  long long valid_every = 0;       // 0 = no periodic validation

  void validate() const;
  ModelConfig model_config() const;
  int resolved_batch() const;
  long long resolved_beta_start() const;

  /// key=value lines, '#' comments; unknown keys rejected.
  static TrainConfig parse_text(const std::string& text);
  static TrainConfig parse_file(const std::string& path);
  std::string to_key_values() const;
};

/// 0 before the start step, linear to beta_max over the ramp, flat after.
double beta_schedule(long long step, const TrainConfig& cfg);

struct Split {
  std::vector<int> train;
  std::vector<int> valid;
  std::vector<int> test;
};

/// Deterministic disjoint shuffle-split of song indices [0, n_songs).
Split split_dataset(int n_songs, double f_train, double f_valid,
                    double f_test, std::uint64_t seed);

/// One row of the metrics log. Quantities a step did not produce are NaN
/// (skipped regularization, validation not scheduled this step).
struct StepStats {
  long long step = 0;  // 1-based, the step just completed
  double recon_loss = 0;
  double disc_loss = 0;
  double enc_adv_loss = 0;
  double beta = 0;
  double valid_next_acc = 0;
  double wall_ms = 0;
  double post_abs_mean = 0;
  double post_var = 0;
  int clip_events = 0;
};

class Trainer {
 public:
  using Batch = std::vector<const SongTokens*>;

  struct GroupNorms {
    double encoder = 0;
    double decoder = 0;
    double disc = 0;
  };

  struct RegStats {
    double disc_loss = 0;
    double enc_adv_loss = 0;  // density-ratio KL estimate, pre-beta
    double post_abs_mean = 0;
    double post_var = 0;
  };

  explicit Trainer(const TrainConfig& cfg);

  Calliope& model() { return model_; }
  const Calliope& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  long long step() const { return step_; }
  int clip_events() const { return clip_events_; }

  /// Scheduled-sampling reconstruction pass: updates everything except the
  /// discriminator. Gradient norms per group land in *norms when given.
  double reconstruction_phase(const Batch& batch, std::uint64_t coin_seed,
                              GroupNorms* norms = nullptr);
  /// Adversarial pass: step A fits the discriminator on posterior-vs-prior
  /// codes (encoder frozen), step B moves the encoder along
  /// beta * mean[log d - log(1-d)] (discriminator frozen).
  RegStats regularization_phase(const Batch& batch, double beta,
                                std::uint64_t prior_seed,
                                GroupNorms* disc_norms = nullptr,
                                GroupNorms* enc_norms = nullptr);
  /// Plain teacher-forced token cross entropy, no sampling, no updates.
  double teacher_forced_loss(const Batch& batch);

  /// One full training step at the current counter: batch selection,
  /// reconstruction, regularization when beta > 0, optional validation.
  StepStats train_step(const std::vector<SongTokens>& train,
                       const std::vector<SongTokens>& valid);

  /// Parameters, optimizer state, and step counter; bit-exact round trip.
  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

 private:
  TrainConfig cfg_;
  Calliope model_;
  Adam adam_;
  long long step_ = 0;
  int clip_events_ = 0;

  void apply_updates(Graph& g, const Calliope::Bound& b,
                     const std::function<bool(const std::string&)>& group);
  static std::uint64_t substream(std::uint64_t seed, std::uint64_t kind,
                                 std::uint64_t step);
  friend struct TrainerTestHook;
};

struct TrainResult {
  std::string final_checkpoint;
  long long steps_run = 0;
  int clip_events = 0;
  StepStats last;
};

/// Runs (or resumes) training: splits the corpus, writes metrics.csv and
/// periodic checkpoints under run_dir, and saves ckpt_final.cllp at the
/// end. A non-finite value aborts after writing ckpt_abort.cllp.
TrainResult train_loop(
    const TrainConfig& cfg, const std::vector<SongTokens>& corpus,
    const std::string& run_dir, const std::string& resume_checkpoint = "",
    const std::function<void(const StepStats&)>& on_step = {});

/// Rebuilds a model from a checkpoint written by Trainer::save_checkpoint.
Calliope load_model_checkpoint(const std::string& path,
                               ModelConfig* cfg_out = nullptr);

std::vector<std::vector<int>> to_int_seqs(const SongTokens& song);

}  // namespace calliope
