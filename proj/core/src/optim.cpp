#include "dubox/optim.hpp"

#include <cmath>

namespace dubox {

template <typename T>
SgdStepStats sgd_step(std::span<Parameter<T>> params, const SgdOptions& options) {
  if (!(options.lr > 0.0)) throw ContractError("sgd_step: learning rate must be positive");
  if (options.clip <= 0.0) throw ContractError("sgd_step: clip must be positive");

  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.value.has_grad()) throw ContractError("sgd_step: parameter " + p.name + " has no gradient");
    for (T g : p.value.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  SgdStepStats stats;
  stats.grad_norm = std::sqrt(sq);
  if (!std::isfinite(stats.grad_norm)) throw NumericError("sgd_step: non-finite gradient norm");
  if (std::isfinite(options.clip) && stats.grad_norm > options.clip) {
    stats.clip_scale = options.clip / stats.grad_norm;
  }

  const T scale = static_cast<T>(stats.clip_scale);
  const T mu = static_cast<T>(options.momentum);
  const T wd = static_cast<T>(options.weight_decay);
  const T lr = static_cast<T>(options.lr);
  for (auto& p : params) {
    auto w = p.value.data();
    auto g = p.value.grad();
    auto v = p.momentum.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = mu * v[i] + (g[i] * scale + wd * w[i]);
      w[i] -= lr * v[i];
    }
  }
  return stats;
}

template SgdStepStats sgd_step<float>(std::span<Parameter<float>>, const SgdOptions&);
template SgdStepStats sgd_step<double>(std::span<Parameter<double>>, const SgdOptions&);

}  // namespace dubox
