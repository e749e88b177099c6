#include "dubox/network.hpp"

#include <cmath>
#include <map>
#include <sstream>

#include "dubox/ops.hpp"

namespace dubox {

void ModelConfig::validate() const {
  if (num_classes <= 0) throw ContractError("model: num_classes must be positive");
  if (head_channels < 8) throw ContractError("model: head_channels must be >= 8");
  if (backbone_channels.size() != 6) {
    throw ContractError("model: backbone_channels needs 6 entries (strides 2..64)");
  }
  for (int c : backbone_channels) {
    if (c <= 0) throw ContractError("model: backbone channel counts must be positive");
  }
  if (input_h <= 0 || input_w <= 0 || input_h % 64 != 0 || input_w % 64 != 0) {
    throw ContractError("model: input size must be a positive multiple of 64");
  }
  if (upsample_kernel != 1 && upsample_kernel != 2) {
    throw ContractError("model: upsample_kernel must be 1 or 2");
  }
}

std::string ModelConfig::to_kv() const {
  std::ostringstream os;
  os << "num_classes=" << num_classes << '\n';
  os << "head_channels=" << head_channels << '\n';
  os << "backbone_channels=";
  for (std::size_t i = 0; i < backbone_channels.size(); ++i) {
    os << (i ? "," : "") << backbone_channels[i];
  }
  os << '\n';
  os << "input_h=" << input_h << '\n';
  os << "input_w=" << input_w << '\n';
  os << "seed=" << seed << '\n';
  os << "residual_source=" << (residual_source == ResidualSource::kHigh ? "high" : "low") << '\n';
  os << "upsample_kernel=" << upsample_kernel << '\n';
  return os.str();
}

ModelConfig ModelConfig::from_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto need = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ContractError("checkpoint header lacks model key '" + key + "'");
    return it->second;
  };
  ModelConfig c;
  try {
    c.num_classes = std::stoi(need("num_classes"));
    c.head_channels = std::stoi(need("head_channels"));
    c.backbone_channels.clear();
    std::istringstream chans(need("backbone_channels"));
    std::string tok;
    while (std::getline(chans, tok, ',')) c.backbone_channels.push_back(std::stoi(tok));
    c.input_h = std::stoi(need("input_h"));
    c.input_w = std::stoi(need("input_w"));
    c.seed = std::stoull(need("seed"));
    const std::string& src = need("residual_source");
    if (src != "high" && src != "low") throw ContractError("bad residual_source '" + src + "'");
    c.residual_source = src == "high" ? ResidualSource::kHigh : ResidualSource::kLow;
    c.upsample_kernel = std::stoi(need("upsample_kernel"));
  } catch (const std::invalid_argument&) {
    throw ContractError("malformed model header in checkpoint");
  } catch (const std::out_of_range&) {
    throw ContractError("malformed model header in checkpoint");
  }
  c.validate();
  return c;
}

template <typename T>
typename DuBoxModel<T>::Conv DuBoxModel<T>::add_conv(const std::string& name, int cin, int cout,
                                                      int kernel, int stride, int padding,
                                                      std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(cin) * kernel * kernel;
  const double fan_out = static_cast<double>(cout) * kernel * kernel;
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  const Shape wshape{static_cast<std::size_t>(cout), static_cast<std::size_t>(cin),
                     static_cast<std::size_t>(kernel), static_cast<std::size_t>(kernel)};
  std::vector<T> w(shape_numel(wshape));
  for (T& v : w) v = static_cast<T>(dist(rng));

  Conv conv;
  conv.weight = params_.size();
  params_.emplace_back(name + ".weight", BasicTensor<T>(wshape, std::move(w)));
  conv.bias = params_.size();
  params_.emplace_back(name + ".bias", BasicTensor<T>(Shape{static_cast<std::size_t>(cout)}));
  conv.stride = static_cast<std::size_t>(stride);
  conv.padding = static_cast<std::size_t>(padding);
  return conv;
}

template <typename T>
typename DuBoxModel<T>::Conv DuBoxModel<T>::add_deconv(const std::string& name, int cin, int cout,
                                                        int kernel, int stride,
                                                        std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(cin) * kernel * kernel;
  const double fan_out = static_cast<double>(cout) * kernel * kernel;
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  const Shape wshape{static_cast<std::size_t>(cin), static_cast<std::size_t>(cout),
                     static_cast<std::size_t>(kernel), static_cast<std::size_t>(kernel)};
  std::vector<T> w(shape_numel(wshape));
  for (T& v : w) v = static_cast<T>(dist(rng));

  Conv conv;
  conv.weight = params_.size();
  params_.emplace_back(name + ".weight", BasicTensor<T>(wshape, std::move(w)));
  conv.bias = params_.size();
  params_.emplace_back(name + ".bias", BasicTensor<T>(Shape{static_cast<std::size_t>(cout)}));
  conv.stride = static_cast<std::size_t>(stride);
  conv.transposed = true;
  return conv;
}

template <typename T>
DuBoxModel<T>::DuBoxModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const int c = config_.head_channels;
  const auto& bc = config_.backbone_channels;

  int cin = 3;
  for (std::size_t s = 0; s < bc.size(); ++s) {
    backbone_.push_back(add_conv("backbone." + std::to_string(s), cin, bc[s], 3, 2, 1, rng));
    cin = bc[s];
  }

  auto make_branch = [&](const std::string& prefix, int fine_ch, int coarse_ch) {
    Branch b;
    b.project_fine = add_conv(prefix + ".project_fine", fine_ch, c, 1, 1, 0, rng);
    b.project_coarse = add_conv(prefix + ".project_coarse", coarse_ch, c, 1, 1, 0, rng);
    b.upsample = add_deconv(prefix + ".upsample", c, c, config_.upsample_kernel, 2, rng);
    b.refine.down = add_conv(prefix + ".refine.down", c, c, 1, 2, 0, rng);
    b.refine.up = add_deconv(prefix + ".refine.up", c, c, 1, 2, rng);
    b.tower = add_conv(prefix + ".tower", c, c, 3, 1, 1, rng);
    b.cls = add_conv(prefix + ".cls", c, config_.num_classes, 3, 1, 1, rng);
    return b;
  };
  // Stage indices: 2 -> stride 8, 3 -> 16, 4 -> 32, 5 -> 64.
  branch1_ = make_branch("d1", bc[2], bc[3]);
  branch1_.box = add_conv("d1.box", c, 4, 3, 1, 1, rng);
  branch2_ = make_branch("d2", bc[4], bc[5]);
  if (config_.residual_source == ResidualSource::kHigh) {
    branch2_.box = add_conv("d2.box", c, 4, 3, 1, 1, rng);
  } else {
    branch2_.box = add_conv("d2.box", c, 4, 3, 4, 1, rng);
  }
  bridge_hidden_ = add_conv("bridge.hidden", 4, 4 * c, 1, 2, 0, rng);
  bridge_out_ = add_conv("bridge.out", 4 * c, 4, 1, 2, 0, rng);
}

template <typename T>
BasicTensor<T> DuBoxModel<T>::apply(const Conv& conv, const BasicTensor<T>& x) const {
  const auto& w = params_[conv.weight].value;
  const auto& b = params_[conv.bias].value;
  if (conv.transposed) return ops::deconv2d(x, w, b, conv.stride);
  return ops::conv2d(x, w, b, conv.stride, conv.padding);
}

template <typename T>
BasicTensor<T> DuBoxModel<T>::refine_with(const Refine& r, const BasicTensor<T>& v) const {
  if (v.rank() != 4 || v.dim(2) % 2 != 0 || v.dim(3) % 2 != 0) {
    throw ShapeError("refine: feature " + shape_to_string(v.shape()) + " needs even spatial dims");
  }
  auto gamma = ops::sigmoid(apply(r.up, ops::relu(apply(r.down, v))));
  return ops::mul(v, gamma);
}

template <typename T>
BasicTensor<T> DuBoxModel<T>::refine(const BasicTensor<T>& feature, int detector_id) const {
  return refine_with(detector_id == 1 ? branch1_.refine : branch2_.refine, feature);
}

template <typename T>
BasicTensor<T> DuBoxModel<T>::fuse(const Branch& branch, const BasicTensor<T>& fine,
                                   const BasicTensor<T>& coarse) const {
  auto a = apply(branch.project_fine, fine);
  auto b = apply(branch.upsample, apply(branch.project_coarse, coarse));
  return ops::relu(ops::add(a, b));
}

template <typename T>
BasicTensor<T> DuBoxModel<T>::bbox_bridge(const BasicTensor<T>& low) const {
  if (low.rank() != 4 || low.dim(1) != 4 || low.dim(2) % 4 != 0 || low.dim(3) % 4 != 0) {
    throw ShapeError("bbox_bridge: input " + shape_to_string(low.shape()) +
                     " must be [N,4,h,w] with h,w divisible by 4");
  }
  return apply(bridge_out_, ops::relu(apply(bridge_hidden_, low)));
}

template <typename T>
ForwardResult<T> DuBoxModel<T>::forward(const BasicTensor<T>& images) const {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw ShapeError("forward: images must be [N,3,H,W], got " + shape_to_string(images.shape()));
  }
  if (images.dim(2) % 64 != 0 || images.dim(3) % 64 != 0) {
    throw ShapeError("forward: image size must be divisible by 64");
  }
  std::vector<BasicTensor<T>> stages;
  BasicTensor<T> x = images;
  for (const Conv& conv : backbone_) {
    x = ops::relu(apply(conv, x));
    stages.push_back(x);
  }

  ForwardResult<T> out;
  const auto v1 = refine_with(branch1_.refine, fuse(branch1_, stages[2], stages[3]));
  const auto t1 = ops::relu(apply(branch1_.tower, v1));
  out.d1.feature = v1;
  out.d1.cls = ops::sigmoid(apply(branch1_.cls, t1));
  out.d1.residual_logits = apply(branch1_.box, t1);
  out.d1.bbox = ops::sigmoid(out.d1.residual_logits);
  out.d1.bridged_base = BasicTensor<T>(out.d1.residual_logits.shape());

  const auto v2 = refine_with(branch2_.refine, fuse(branch2_, stages[4], stages[5]));
  const auto t2 = ops::relu(apply(branch2_.tower, v2));
  out.d2.feature = v2;
  out.d2.cls = ops::sigmoid(apply(branch2_.cls, t2));
  out.d2.residual_logits = config_.residual_source == ResidualSource::kHigh
                               ? apply(branch2_.box, t2)
                               : apply(branch2_.box, t1);
  out.d2.bridged_base = bbox_bridge(out.d1.residual_logits);
  out.d2.bbox = ops::sigmoid(ops::add(out.d2.bridged_base, out.d2.residual_logits));
  return out;
}

template <typename T>
Parameter<T>& DuBoxModel<T>::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw ContractError("model has no parameter " + name);
}

template <typename T>
std::size_t DuBoxModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

template <typename T>
Checkpoint DuBoxModel<T>::to_checkpoint(const std::string& extra_header) const {
  return make_checkpoint<T>(params_, config_.to_kv() + extra_header);
}

template <typename T>
DuBoxModel<T> DuBoxModel<T>::from_checkpoint(const Checkpoint& ckpt) {
  DuBoxModel<T> model(ModelConfig::from_kv(ckpt.header));
  restore_parameters<T>(ckpt, model.params_);
  return model;
}

template class DuBoxModel<float>;
template class DuBoxModel<double>;

}  // namespace dubox
