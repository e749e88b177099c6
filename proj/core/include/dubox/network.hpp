#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dubox/checkpoint.hpp"
#include "dubox/tensor.hpp"

namespace dubox {

// Which feature map feeds detector 2's residual head: its own (`high`) or
// detector 1's, sampled down by a stride-4 head (`low`).
enum class ResidualSource { kHigh, kLow };

struct ModelConfig {
  int num_classes = 3;
  int head_channels = 64;
  // Output channels of the six stride-2 backbone stages (strides 2..64).
  std::vector<int> backbone_channels{16, 32, 64, 64, 64, 64};
  int input_h = 128;
  int input_w = 128;
  std::uint64_t seed = 1;
  ResidualSource residual_source = ResidualSource::kHigh;
  // Kernel of the stride-2 up-sampling deconvolutions (1 = zero insertion, or 2).
  int upsample_kernel = 1;

  void validate() const;

  // "key=value" lines, stored in checkpoint headers.
  std::string to_kv() const;
  static ModelConfig from_kv(const std::string& text);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct DetectorOutput {
  BasicTensor<T> cls;              // [N,C,h,w], sigmoid probabilities
  BasicTensor<T> bbox;             // [N,4,h,w], sigmoid offsets
  BasicTensor<T> residual_logits;  // tau(V_b), [N,4,h,w]
  BasicTensor<T> bridged_base;     // phi(logits_1) on detector 2; zeros on detector 1
  BasicTensor<T> feature;          // refined feature V_b fed to the heads
};

template <typename T>
struct ForwardResult {
  DetectorOutput<T> d1;  // stride 8
  DetectorOutput<T> d2;  // stride 32
};

// Dual-scale residual detector.
//
// Backbone: six 3x3 stride-2 convs + ReLU (strides 2..64). Each detector
// fuses two adjacent scales (8+16 and 32+64): both are projected to c
// channels by 1x1 convs, the coarser one is up-sampled by a stride-2
// deconvolution, the sum goes through ReLU and the refine module
//   x = V * sigmoid(deconv(relu(conv_s2(V)))).
// A 3x3 tower conv + ReLU feeds 3x3 classification and box heads. Detector 2
// predicts box logits as phi(logits_1) + tau_2(V_2), where the bridge phi is
// conv1x1/s2 (4c ch) -> ReLU -> conv1x1/s2 (4 ch).
template <typename T>
class DuBoxModel {
 public:
  explicit DuBoxModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  ForwardResult<T> forward(const BasicTensor<T>& images) const;

  // Attention module on a fused feature of detector `detector_id`.
  BasicTensor<T> refine(const BasicTensor<T>& feature, int detector_id) const;

  // Stride-4 map from detector-1 box logits to detector 2's grid.
  BasicTensor<T> bbox_bridge(const BasicTensor<T>& low_bbox_logits) const;

  std::span<Parameter<T>> parameters() { return params_; }
  std::span<const Parameter<T>> parameters() const { return params_; }
  Parameter<T>& parameter(const std::string& name);
  std::size_t parameter_count() const;

  Checkpoint to_checkpoint(const std::string& extra_header = {}) const;
  // Rebuilds a model from a checkpoint's header and restores its weights.
  static DuBoxModel from_checkpoint(const Checkpoint& ckpt);

 private:
  struct Conv {
    std::size_t weight = 0;
    std::size_t bias = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
    bool transposed = false;
  };
  struct Refine {
    Conv down, up;
  };
  struct Branch {
    Conv project_fine, project_coarse, upsample;
    Refine refine;
    Conv tower, cls, box;
  };

  Conv add_conv(const std::string& name, int cin, int cout, int kernel, int stride, int padding,
                std::mt19937_64& rng);
  Conv add_deconv(const std::string& name, int cin, int cout, int kernel, int stride,
                  std::mt19937_64& rng);
  BasicTensor<T> apply(const Conv& conv, const BasicTensor<T>& x) const;
  BasicTensor<T> fuse(const Branch& branch, const BasicTensor<T>& fine,
                      const BasicTensor<T>& coarse) const;
  BasicTensor<T> refine_with(const Refine& r, const BasicTensor<T>& v) const;

  ModelConfig config_;
  std::vector<Parameter<T>> params_;
  std::vector<Conv> backbone_;
  Branch branch1_, branch2_;
  Conv bridge_hidden_, bridge_out_;
};

}  // namespace dubox
