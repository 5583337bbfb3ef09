#pragma once

// AdamW with global-norm gradient clipping. Clipping is applied to the raw
// gradient before it ever touches the moment estimates; weight decay is
// decoupled (applied to parameters directly, never through the moments).

#include <vector>

#include "model.hpp"

namespace dlmwpo {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double max_grad_norm = 0.0;  // 0 disables clipping
};

template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> m, v;
  long step = 0;

  static OptimizerState init(const ParamStore<T>& ps) {
    OptimizerState st;
    st.m.reserve(ps.tensors.size());
    st.v.reserve(ps.tensors.size());
    for (const auto& t : ps.tensors) {
      st.m.emplace_back(t.shape);
      st.v.emplace_back(t.shape);
    }
    return st;
  }
};

// One optimizer step, in place. Throws numeric_error on any non-finite
// gradient, leaving params and state untouched. Returns the pre-clip global
// gradient norm.
template <typename T>
double adam_step(ParamStore<T>& ps, const GradStore<T>& gs, OptimizerState<T>& st,
                 const AdamConfig& cfg) {
  if (gs.grads.size() != ps.tensors.size())
    throw std::invalid_argument("adam: gradient count mismatch");
  for (std::size_t i = 0; i < gs.grads.size(); ++i)
    if (!gs.grads[i].same_shape(ps.tensors[i]))
      throw std::invalid_argument("adam: gradient shape mismatch at index " + std::to_string(i));

  double norm = gs.global_norm();
  if (!is_finite(norm) || !gs.finite())
    throw numeric_error("adam: non-finite gradient, step aborted");

  double scale = 1.0;
  if (cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm) scale = cfg.max_grad_norm / norm;

  st.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < ps.tensors.size(); ++i) {
    T* p = ps.tensors[i].ptr();
    T* m = st.m[i].ptr();
    T* v = st.v[i].ptr();
    const T* g = gs.grads[i].ptr();
    std::size_t n = ps.tensors[i].size();
    for (std::size_t j = 0; j < n; ++j) {
      double gj = static_cast<double>(g[j]) * scale;
      double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * gj;
      double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
      double decayed = cfg.weight_decay * static_cast<double>(p[j]);
      p[j] = static_cast<T>(static_cast<double>(p[j]) - cfg.lr * (update + decayed));
    }
  }
  return norm;
}

}  // namespace dlmwpo
