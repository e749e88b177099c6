#pragma once

#include <cstddef>

#include "dubox/tensor.hpp"

// Differentiable operations. Every op validates shapes (ShapeError), rejects
// non-finite results (NumericError) and, when a tape is active and an input
// requires a gradient, records a backward closure.
namespace dubox::ops {

// Cross-correlation. input [N,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout].
// Output [N,Cout,(H+2p-kh)/stride+1,(W+2p-kw)/stride+1].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::size_t stride = 1,
                      std::size_t padding = 0);

// Transposed convolution, the exact adjoint of conv2d(stride, padding 0) with
// the same weights: input [N,Cin,H,W], weight [Cin,Cout,kh,kw] (the conv2d
// weight it is adjoint to), bias [Cout]. Output [N,Cout,H*stride,W*stride];
// requires kh,kw <= stride. A 1x1 kernel with stride 2 is zero insertion.
template <typename T>
BasicTensor<T> deconv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                        const BasicTensor<T>& bias, std::size_t stride);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);

// Elementwise sum. `b` must match `a` or be a per-channel vector: shape [C]
// against a 4-D `a` of shape [N,C,H,W].
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Elementwise product; same broadcasting rule as add.
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);

// Sum of all elements as a shape-[1] tensor.
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

enum class PointwiseKind { kRelu, kSigmoid, kAdd, kMul, kScale };

// Dispatching form of the elementwise ops. `other` is used by kAdd/kMul,
// `factor` by kScale.
template <typename T>
BasicTensor<T> pointwise(const BasicTensor<T>& x, PointwiseKind kind,
                         const BasicTensor<T>* other = nullptr, T factor = T(1));

}  // namespace dubox::ops
