#pragma once

#include <cstddef>
#include <vector>

#include "tvae/rng.hpp"
#include "tvae/tensor.hpp"

// Differentiable operations over Tensor<T>, T in {float, double}.
//
// Binary elementwise ops broadcast with numpy rules. Every op checks that its
// output is finite and throws tvae::DivergenceError otherwise; shape problems
// raise tvae::DimensionError naming the offending shapes.
namespace tvae::diff {

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
/// Exact (erf) GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
template <typename T>
Tensor<T> log(const Tensor<T>& x);

/// max(x, floor) elementwise. The gradient passes only where x > floor, so
/// entries held at the floor are constants (free-bits semantics).
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T floor);

/// Matrix product over the last two axes; leading axes broadcast. A rank-1
/// operand is promoted to a row (left) or column (right) vector and the
/// promoted axis is dropped from the result.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);
template <typename T>
Tensor<T> mean_all(const Tensor<T>& x);

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::ptrdiff_t axis, bool keepdim = false);
template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::ptrdiff_t axis, bool keepdim = false);
/// The gradient goes to the first maximal entry of each reduced slice.
template <typename T>
Tensor<T> max(const Tensor<T>& x, std::ptrdiff_t axis, bool keepdim = false);

/// Mean/max along `axis` over entries where `mask` (broadcast to x) is set.
/// A slice with no set entries is an error.
template <typename T>
Tensor<T> masked_mean(const Tensor<T>& x, const Mask& mask, std::ptrdiff_t axis);
template <typename T>
Tensor<T> masked_max(const Tensor<T>& x, const Mask& mask, std::ptrdiff_t axis);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::ptrdiff_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::ptrdiff_t axis, std::size_t start, std::size_t length);

/// Rows of `table` (V x H) gathered by `ids`; result shape ids.shape + [H].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const Ids& ids);

/// Softmax over the last axis restricted to positions where `mask`
/// (broadcast to logits) is set. Masked entries are exactly 0.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const Mask& mask);

/// RMS normalisation over the last axis: x / sqrt(mean(x^2) + eps) * gain.
/// No mean-centring and no bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-6));

/// Per-position negative log-likelihood of `targets` under softmax(logits).
/// Shape equals targets.shape; masked-out positions are 0.
template <typename T>
Tensor<T> token_nll(const Tensor<T>& logits, const Ids& targets, const Mask& mask);

template <typename T>
struct CrossEntropy {
  Tensor<T> nll;          // summed over unmasked positions
  std::size_t count = 0;  // contributing positions
};

template <typename T>
CrossEntropy<T> cross_entropy_logits(const Tensor<T>& logits, const Ids& targets, const Mask& mask);

/// Inverted dropout; identity when p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng);

/// Numpy broadcast of two shapes; DimensionError when incompatible.
Shape broadcast_shapes(const Shape& a, const Shape& b);

}  // namespace tvae::diff
