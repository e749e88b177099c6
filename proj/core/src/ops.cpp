#include "dubox/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <string>
#include <vector>

#include "dubox/parallel.hpp"

namespace dubox::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t channels;  // channels of the image side
  std::size_t height, width;
  std::size_t kh, kw;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
};

// col[(c*kh+ki)*kw+kj][oy*out_w+ox] = image[c][oy*s-p+ki][ox*s-p+kj] (zero outside).
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const std::size_t cols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                   static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.out_w;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(y) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                     static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (x < 0 || x >= static_cast<std::ptrdiff_t>(g.width))
                          ? T(0)
                          : src[static_cast<std::size_t>(x)];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back into the image.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* image) {
  const std::size_t cols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                   static_cast<std::ptrdiff_t>(g.pad);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = plane + static_cast<std::size_t>(y) * g.width;
          const T* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                     static_cast<std::ptrdiff_t>(g.pad);
            if (x < 0 || x >= static_cast<std::ptrdiff_t>(g.width)) continue;
            dst[static_cast<std::size_t>(x)] += src[ox];
          }
        }
      }
    }
  }
}

bool is_identity_layout(const ConvGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
}

template <typename T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must be rank " + std::to_string(rank) +
                     ", got " + shape_to_string(t.shape()));
  }
}

// Sums per-sample partial gradients in sample order so the result does not
// depend on how samples were distributed across threads.
template <typename T>
void reduce_partials(const std::vector<T>& partials, std::size_t samples, std::span<T> dst) {
  const std::size_t len = dst.size();
  for (std::size_t n = 0; n < samples; ++n) {
    const T* p = partials.data() + n * len;
    for (std::size_t i = 0; i < len; ++i) dst[i] += p[i];
  }
}

template <typename T>
void accumulate_bias_grad(const T* dy, std::size_t batch, std::size_t channels,
                          std::size_t plane, std::span<T> dbias) {
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T* p = dy + (n * channels + c) * plane;
      T s = T(0);
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      dbias[c] += s;
    }
  }
}

template <typename T>
void check_grad_finite(std::span<const T> g, const char* op) {
  for (T v : g) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite gradient in ") + op);
  }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding) {
  constexpr const char* kOp = "conv2d";
  require_rank(input, 4, kOp, "input");
  require_rank(weight, 4, kOp, "weight");
  require_rank(bias, 1, kOp, "bias");
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t batch = input.dim(0);
  const std::size_t cin = input.dim(1);
  const std::size_t cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw ShapeError("conv2d: weight " + shape_to_string(weight.shape()) +
                     " does not match input " + shape_to_string(input.shape()));
  }
  if (bias.dim(0) != cout) throw ShapeError("conv2d: bias must have Cout entries");
  ConvGeometry g{cin, input.dim(2), input.dim(3), weight.dim(2), weight.dim(3), stride,
                 padding, 0, 0};
  if (g.kh > g.height + 2 * padding || g.kw > g.width + 2 * padding) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  g.out_h = (g.height + 2 * padding - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kw) / stride + 1;

  const std::size_t rows = g.rows();
  const std::size_t cols = g.cols();
  const std::size_t in_sample = cin * g.height * g.width;
  const std::size_t out_sample = cout * cols;
  BasicTensor<T> out(Shape{batch, cout, g.out_h, g.out_w});

  const T* x = input.data().data();
  const T* w = weight.data().data();
  const T* b = bias.data().data();
  T* y = out.data().data();
  ConstMatMap<T> wm(w, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(rows));
  const bool direct = is_identity_layout(g);

  parallel_for(batch, [&](std::size_t n) {
    MatMap<T> ym(y + n * out_sample, static_cast<Eigen::Index>(cout),
                 static_cast<Eigen::Index>(cols));
    if (direct) {
      ConstMatMap<T> xm(x + n * in_sample, static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
      ym.noalias() = wm * xm;
    } else {
      std::vector<T> col(rows * cols);
      im2col(x + n * in_sample, g, col.data());
      ConstMatMap<T> cm(col.data(), static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
      ym.noalias() = wm * cm;
    }
    for (std::size_t c = 0; c < cout; ++c) {
      T* p = y + n * out_sample + c * cols;
      for (std::size_t i = 0; i < cols; ++i) p[i] += b[c];
    }
  });
  out.check_finite(kOp);

  if (grad_enabled_for<T>({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    active_tape<T>()->record(kOp, [input, weight, bias, out, g, direct]() mutable {
      if (!out.has_grad()) return;
      const std::size_t rows = g.rows();
      const std::size_t cols = g.cols();
      const std::size_t batch = input.dim(0);
      const std::size_t cout = weight.dim(0);
      const std::size_t in_sample = g.channels * g.height * g.width;
      const std::size_t out_sample = cout * cols;
      const T* dy = out.grad().data();
      const T* x = input.data().data();
      ConstMatMap<T> wm(weight.data().data(), static_cast<Eigen::Index>(cout),
                        static_cast<Eigen::Index>(rows));
      const bool want_dx = input.requires_grad();
      const bool want_dw = weight.requires_grad();
      T* dx = want_dx ? input.mutable_grad().data() : nullptr;
      std::vector<T> dw_partials(want_dw ? batch * cout * rows : 0);

      parallel_for(batch, [&](std::size_t n) {
        ConstMatMap<T> dym(dy + n * out_sample, static_cast<Eigen::Index>(cout),
                           static_cast<Eigen::Index>(cols));
        std::vector<T> col;
        const T* col_ptr = x + n * in_sample;
        if (!direct && want_dw) {
          col.resize(rows * cols);
          im2col(x + n * in_sample, g, col.data());
          col_ptr = col.data();
        }
        if (want_dw) {
          ConstMatMap<T> cm(col_ptr, static_cast<Eigen::Index>(rows),
                            static_cast<Eigen::Index>(cols));
          MatMap<T> dwm(dw_partials.data() + n * cout * rows, static_cast<Eigen::Index>(cout),
                        static_cast<Eigen::Index>(rows));
          dwm.noalias() = dym * cm.transpose();
        }
        if (want_dx) {
          if (direct) {
            MatMap<T> dxm(dx + n * in_sample, static_cast<Eigen::Index>(rows),
                          static_cast<Eigen::Index>(cols));
            dxm.noalias() += wm.transpose() * dym;
          } else {
            std::vector<T> dcol(rows * cols);
            MatMap<T> dcm(dcol.data(), static_cast<Eigen::Index>(rows),
                          static_cast<Eigen::Index>(cols));
            dcm.noalias() = wm.transpose() * dym;
            col2im(dcol.data(), g, dx + n * in_sample);
          }
        }
      });
      if (want_dw) {
        reduce_partials(dw_partials, batch, weight.mutable_grad());
        check_grad_finite<T>(weight.grad(), "conv2d");
      }
      if (bias.requires_grad()) {
        accumulate_bias_grad(dy, batch, cout, cols, bias.mutable_grad());
      }
      if (want_dx) check_grad_finite<T>(input.grad(), "conv2d");
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> deconv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                        const BasicTensor<T>& bias, std::size_t stride) {
  constexpr const char* kOp = "deconv2d";
  require_rank(input, 4, kOp, "input");
  require_rank(weight, 4, kOp, "weight");
  require_rank(bias, 1, kOp, "bias");
  if (stride == 0) throw ContractError("deconv2d: stride must be positive");
  const std::size_t batch = input.dim(0);
  const std::size_t cin = input.dim(1);
  const std::size_t h = input.dim(2);
  const std::size_t w = input.dim(3);
  if (weight.dim(0) != cin) {
    throw ShapeError("deconv2d: weight " + shape_to_string(weight.shape()) +
                     " does not match input " + shape_to_string(input.shape()));
  }
  const std::size_t cout = weight.dim(1);
  if (bias.dim(0) != cout) throw ShapeError("deconv2d: bias must have Cout entries");
  if (weight.dim(2) > stride || weight.dim(3) > stride) {
    throw ShapeError("deconv2d: kernel extent must not exceed the stride");
  }
  // Geometry of the conv2d this op is the adjoint of: its image side is our output.
  ConvGeometry g{cout, h * stride, w * stride, weight.dim(2), weight.dim(3), stride, 0, h, w};
  const std::size_t rows = g.rows();  // cout*kh*kw
  const std::size_t cols = g.cols();  // h*w
  const std::size_t in_sample = cin * cols;
  const std::size_t out_plane = g.height * g.width;
  const std::size_t out_sample = cout * out_plane;
  BasicTensor<T> out(Shape{batch, cout, g.height, g.width});

  const T* x = input.data().data();
  const T* b = bias.data().data();
  T* y = out.data().data();
  ConstMatMap<T> wm(weight.data().data(), static_cast<Eigen::Index>(cin),
                    static_cast<Eigen::Index>(rows));

  parallel_for(batch, [&](std::size_t n) {
    ConstMatMap<T> xm(x + n * in_sample, static_cast<Eigen::Index>(cin),
                      static_cast<Eigen::Index>(cols));
    std::vector<T> col(rows * cols);
    MatMap<T> cm(col.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    cm.noalias() = wm.transpose() * xm;
    T* yn = y + n * out_sample;
    col2im(col.data(), g, yn);
    for (std::size_t c = 0; c < cout; ++c) {
      T* p = yn + c * out_plane;
      for (std::size_t i = 0; i < out_plane; ++i) p[i] += b[c];
    }
  });
  out.check_finite(kOp);

  if (grad_enabled_for<T>({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    active_tape<T>()->record(kOp, [input, weight, bias, out, g]() mutable {
      if (!out.has_grad()) return;
      const std::size_t rows = g.rows();
      const std::size_t cols = g.cols();
      const std::size_t batch = input.dim(0);
      const std::size_t cin = input.dim(1);
      const std::size_t cout = g.channels;
      const std::size_t in_sample = cin * cols;
      const std::size_t out_plane = g.height * g.width;
      const std::size_t out_sample = cout * out_plane;
      const T* dy = out.grad().data();
      const T* x = input.data().data();
      ConstMatMap<T> wm(weight.data().data(), static_cast<Eigen::Index>(cin),
                        static_cast<Eigen::Index>(rows));
      const bool want_dx = input.requires_grad();
      const bool want_dw = weight.requires_grad();
      T* dx = want_dx ? input.mutable_grad().data() : nullptr;
      std::vector<T> dw_partials(want_dw ? batch * cin * rows : 0);

      parallel_for(batch, [&](std::size_t n) {
        std::vector<T> dcol(rows * cols);
        im2col(dy + n * out_sample, g, dcol.data());
        ConstMatMap<T> dcm(dcol.data(), static_cast<Eigen::Index>(rows),
                           static_cast<Eigen::Index>(cols));
        if (want_dx) {
          MatMap<T> dxm(dx + n * in_sample, static_cast<Eigen::Index>(cin),
                        static_cast<Eigen::Index>(cols));
          dxm.noalias() += wm * dcm;
        }
        if (want_dw) {
          ConstMatMap<T> xm(x + n * in_sample, static_cast<Eigen::Index>(cin),
                            static_cast<Eigen::Index>(cols));
          MatMap<T> dwm(dw_partials.data() + n * cin * rows, static_cast<Eigen::Index>(cin),
                        static_cast<Eigen::Index>(rows));
          dwm.noalias() = xm * dcm.transpose();
        }
      });
      if (want_dw) {
        reduce_partials(dw_partials, batch, weight.mutable_grad());
        check_grad_finite<T>(weight.grad(), "deconv2d");
      }
      if (bias.requires_grad()) {
        accumulate_bias_grad(dy, batch, cout, out_plane, bias.mutable_grad());
      }
      if (want_dx) check_grad_finite<T>(input.grad(), "deconv2d");
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
  out.check_finite("relu");
  if (grad_enabled_for<T>({&x})) {
    out.set_requires_grad(true);
    active_tape<T>()->record("relu", [x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto dx = x.mutable_grad();
      auto v = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (v[i] > T(0)) dx[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const T v = src[i];
    // Branches keep exp() from overflowing for large |v|.
    if (v >= T(0)) {
      dst[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      dst[i] = e / (T(1) + e);
    }
  }
  out.check_finite("sigmoid");
  if (grad_enabled_for<T>({&x})) {
    out.set_requires_grad(true);
    active_tape<T>()->record("sigmoid", [x, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto y = out.data();
      auto dx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

namespace {

enum class Broadcast { kNone, kChannel };

template <typename T>
Broadcast check_binary(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (a.rank() == 4 && b.rank() == 1 && b.dim(0) == a.dim(1)) return Broadcast::kChannel;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_to_string(a.shape()) +
                   " and " + shape_to_string(b.shape()));
}

// Index into `b` for element i of `a` under the broadcast rule.
struct BroadcastIndex {
  Broadcast mode;
  std::size_t plane = 1;
  std::size_t channels = 1;
  std::size_t operator()(std::size_t i) const {
    return mode == Broadcast::kNone ? i : (i / plane) % channels;
  }
};

template <typename T>
BroadcastIndex make_index(const BasicTensor<T>& a, Broadcast mode) {
  BroadcastIndex idx{mode};
  if (mode == Broadcast::kChannel) {
    idx.plane = a.dim(2) * a.dim(3);
    idx.channels = a.dim(1);
  }
  return idx;
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Broadcast mode = check_binary(a, b, "add");
  const BroadcastIndex bi = make_index(a, mode);
  BasicTensor<T> out(a.shape());
  auto pa = a.data();
  auto pb = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < pa.size(); ++i) dst[i] = pa[i] + pb[bi(i)];
  out.check_finite("add");
  if (grad_enabled_for<T>({&a, &b})) {
    out.set_requires_grad(true);
    active_tape<T>()->record("add", [a, b, out, bi]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto da = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (b.requires_grad()) {
        auto db = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) db[bi(i)] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Broadcast mode = check_binary(a, b, "mul");
  const BroadcastIndex bi = make_index(a, mode);
  BasicTensor<T> out(a.shape());
  auto pa = a.data();
  auto pb = b.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < pa.size(); ++i) dst[i] = pa[i] * pb[bi(i)];
  out.check_finite("mul");
  if (grad_enabled_for<T>({&a, &b})) {
    out.set_requires_grad(true);
    active_tape<T>()->record("mul", [a, b, out, bi]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto va = a.data();
      auto vb = b.data();
      if (a.requires_grad()) {
        auto da = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * vb[bi(i)];
      }
      if (b.requires_grad()) {
        auto db = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) db[bi(i)] += g[i] * va[i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  BasicTensor<T> out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] * factor;
  out.check_finite("scale");
  if (grad_enabled_for<T>({&x})) {
    out.set_requires_grad(true);
    active_tape<T>()->record("scale", [x, out, factor]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto dx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  BasicTensor<T> out = BasicTensor<T>::scalar(total);
  out.check_finite("sum");
  if (grad_enabled_for<T>({&x})) {
    out.set_requires_grad(true);
    active_tape<T>()->record("sum", [x, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (T& d : x.mutable_grad()) d += g;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> pointwise(const BasicTensor<T>& x, PointwiseKind kind, const BasicTensor<T>* other,
                         T factor) {
  switch (kind) {
    case PointwiseKind::kRelu:
      return relu(x);
    case PointwiseKind::kSigmoid:
      return sigmoid(x);
    case PointwiseKind::kScale:
      return scale(x, factor);
    case PointwiseKind::kAdd:
    case PointwiseKind::kMul:
      if (other == nullptr) throw ContractError("pointwise add/mul needs a second operand");
      return kind == PointwiseKind::kAdd ? add(x, *other) : mul(x, *other);
  }
  throw ContractError("unknown pointwise kind");
}

#define DUBOX_INSTANTIATE(T)                                                                \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                 const BasicTensor<T>&, std::size_t, std::size_t);         \
  template BasicTensor<T> deconv2d(const BasicTensor<T>&, const BasicTensor<T>&,           \
                                   const BasicTensor<T>&, std::size_t);                    \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                     \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                  \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                 \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                      \
  template BasicTensor<T> pointwise(const BasicTensor<T>&, PointwiseKind,                  \
                                    const BasicTensor<T>*, T);

DUBOX_INSTANTIATE(float)
DUBOX_INSTANTIATE(double)

#undef DUBOX_INSTANTIATE

}  // namespace dubox::ops
