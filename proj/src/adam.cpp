#include "calliope/adam.hpp"

#include <cmath>

namespace calliope {

template <typename S>
void AdamT<S>::step(const std::string& name, TensorT<S>& param,
                    const TensorT<S>& grad) {
  if (!param.same_shape(grad)) {
    throw ShapeMismatch("adam step: param/grad shape mismatch for " + name);
  }
  auto it = states_.find(name);
  if (it == states_.end()) {
    State s;
    s.m = TensorT<S>::zeros(param.shape);
    s.v = TensorT<S>::zeros(param.shape);
    it = states_.emplace(name, std::move(s)).first;
  }
  State& st = it->second;
  if (!st.m.same_shape(param)) {
    throw ShapeMismatch("adam step: stale state shape for " + name);
  }
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < param.data.size(); ++i) {
    const double g = static_cast<double>(grad.data[i]);
    const double m = cfg_.beta1 * static_cast<double>(st.m.data[i]) +
                     (1.0 - cfg_.beta1) * g;
    const double v = cfg_.beta2 * static_cast<double>(st.v.data[i]) +
                     (1.0 - cfg_.beta2) * g * g;
    st.m.data[i] = S(m);
    st.v.data[i] = S(v);
    const double mh = m / bc1;
    const double vh = v / bc2;
    param.data[i] =
        S(static_cast<double>(param.data[i]) -
          cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps));
  }
}

template class AdamT<float>;
template class AdamT<double>;

}  // namespace calliope
