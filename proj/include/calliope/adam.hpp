#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "calliope/tensor.hpp"

namespace calliope {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with one (m, v, t) state per parameter name. Each parameter keeps
/// its own step counter: a parameter only updated in some phases (e.g. the
/// discriminator) bias-corrects with its own t, not the global step.
template <typename S>
class AdamT {
 public:
  struct State {
    TensorT<S> m;
    TensorT<S> v;
    std::uint64_t t = 0;
  };

  explicit AdamT(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// Applies one update in place. State is created on first use.
  void step(const std::string& name, TensorT<S>& param,
            const TensorT<S>& grad);

  const AdamConfig& config() const { return cfg_; }
  std::map<std::string, State>& states() { return states_; }
  const std::map<std::string, State>& states() const { return states_; }

 private:
  AdamConfig cfg_;
  std::map<std::string, State> states_;
};

using Adam = AdamT<float>;

}  // namespace calliope
