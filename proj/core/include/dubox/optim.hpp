#pragma once

#include <limits>
#include <span>

#include "dubox/tensor.hpp"

namespace dubox {

struct SgdOptions {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // Global gradient-norm cap; infinity disables clipping.
  double clip = 10.0;
};

struct SgdStepStats {
  double grad_norm = 0.0;  // before clipping
  double clip_scale = 1.0;
};

// One SGD step with momentum and L2 weight decay:
//   g <- g * min(1, clip / ||g||)      (norm over all parameters)
//   v <- momentum * v + (g + weight_decay * w)
//   w <- w - lr * v
// Every parameter must carry a gradient. Throws ContractError for lr <= 0.
template <typename T>
SgdStepStats sgd_step(std::span<Parameter<T>> params, const SgdOptions& options);

}  // namespace dubox
