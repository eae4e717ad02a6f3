#include "tvae/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "tvae/error.hpp"
#include "tvae/kernels.hpp"

namespace tvae::diff {

namespace {

template <typename T>
using Node = detail::Node<T>;

template <typename T>
using Backward = std::function<void(Node<T>&)>;

template <typename T>
void check_finite(const std::vector<T>& values, const char* op) {
  for (const T v : values) {
    if (!std::isfinite(v)) throw DivergenceError(std::string("non-finite value produced by ") + op);
  }
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      Backward<T> backward, const char* op) {
  check_finite(data, op);
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.is_leaf = false;
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

// Parent `i` of `self` if it needs a gradient, with its grad buffer ready.
template <typename T>
Node<T>* grad_target(Node<T>& self, std::size_t i) {
  Node<T>* p = self.parents[i].get();
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return p;
}

std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank, const Shape& shape) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  const auto a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape));
  }
  return static_cast<std::size_t>(a);
}

// For every flat index of `out`, the flat index into `in` under broadcasting.
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> map(n);
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  std::vector<std::size_t> in_stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t d = rank; d-- > offset;) {
    const std::size_t in_dim = in[d - offset];
    in_stride[d] = in_dim == 1 ? 0 : s;
    s *= in_dim;
  }
  std::vector<std::size_t> counter(rank, 0);
  std::size_t idx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = idx;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      idx += in_stride[d];
      if (counter[d] < out[d]) break;
      idx -= in_stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return map;
}

std::vector<std::uint8_t> expand_mask(const Mask& mask, const Shape& target, const char* op) {
  Shape b;
  try {
    b = broadcast_shapes(mask.shape, target);
  } catch (const DimensionError&) {
    b.clear();
  }
  if (b != target) {
    throw DimensionError(std::string(op) + ": mask shape " + shape_str(mask.shape) +
                         " does not broadcast to " + shape_str(target));
  }
  if (mask.shape == target) return mask.values;
  const auto map = broadcast_index(mask.shape, target);
  std::vector<std::uint8_t> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = mask.values[map[i]];
  return out;
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.len = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
  Shape out = shape;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Fwd f, Da da, Db db, const char* op) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  const std::size_t n = shape_numel(out_shape);
  const bool same = a.shape() == out_shape && b.shape() == out_shape;
  std::vector<std::size_t> ia, ib;
  if (!same) {
    ia = broadcast_index(a.shape(), out_shape);
    ib = broadcast_index(b.shape(), out_shape);
  }
  std::vector<T> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = same ? f(ad[i], bd[i]) : f(ad[ia[i]], bd[ib[i]]);
  }
  return make_result<T>(
      out_shape, std::move(out), {a, b},
      [same, ia = std::move(ia), ib = std::move(ib), da, db](Node<T>& self) {
        const auto& A = self.parents[0]->data;
        const auto& B = self.parents[1]->data;
        Node<T>* pa = grad_target(self, 0);
        Node<T>* pb = grad_target(self, 1);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          const std::size_t ja = same ? i : ia[i];
          const std::size_t jb = same ? i : ib[i];
          if (pa) pa->grad[ja] += self.grad[i] * da(A[ja], B[jb]);
          if (pb) pb->grad[jb] += self.grad[i] * db(A[ja], B[jb]);
        }
      },
      op);
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd f, Deriv d, const char* op) {
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
  return make_result<T>(
      x.shape(), std::move(out), {x},
      [d](Node<T>& self) {
        Node<T>* p = grad_target(self, 0);
        if (!p) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          p->grad[i] += self.grad[i] * d(p->data[i], self.data[i]);
        }
      },
      op);
}

// Batched product with explicit operand shapes (rank >= 2 each).
template <typename T>
Tensor<T> matmul_nd(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t k2 = bs[bs.size() - 2], n = bs.back();
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions differ for shapes " + shape_str(as) + " and " +
                         shape_str(bs));
  }
  const Shape a_batch(as.begin(), as.end() - 2);
  const Shape b_batch(bs.begin(), bs.end() - 2);
  Shape batch;
  try {
    batch = broadcast_shapes(a_batch, b_batch);
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch dimensions do not broadcast for shapes " + shape_str(as) +
                         " and " + shape_str(bs));
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  // A rank-2 right operand lets the whole left batch fold into one product.
  if (b_batch.empty()) {
    const std::size_t rows = shape_numel(a_batch) * m;
    std::vector<T> out(rows * n);
    kernels::gemm<T>(false, false, rows, n, k, a.data().data(), b.data().data(), out.data(), false);
    return make_result<T>(
        std::move(out_shape), std::move(out), {a, b},
        [rows, n, k](Node<T>& self) {
          const T* g = self.grad.data();
          if (Node<T>* pa = grad_target(self, 0)) {
            kernels::gemm<T>(false, true, rows, k, n, g, self.parents[1]->data.data(),
                             pa->grad.data(), true);
          }
          if (Node<T>* pb = grad_target(self, 1)) {
            kernels::gemm<T>(true, false, k, n, rows, self.parents[0]->data.data(), g,
                             pb->grad.data(), true);
          }
        },
        "matmul");
  }

  const std::size_t batches = shape_numel(batch);
  std::vector<std::size_t> ia = a_batch == batch ? std::vector<std::size_t>{} : broadcast_index(a_batch, batch);
  std::vector<std::size_t> ib = b_batch == batch ? std::vector<std::size_t>{} : broadcast_index(b_batch, batch);
  auto a_of = [ia](std::size_t i) { return ia.empty() ? i : ia[i]; };
  auto b_of = [ib](std::size_t i) { return ib.empty() ? i : ib[i]; };
  std::vector<T> out(batches * m * n);
  for (std::size_t bi = 0; bi < batches; ++bi) {
    kernels::gemm<T>(false, false, m, n, k, a.data().data() + a_of(bi) * m * k,
                     b.data().data() + b_of(bi) * k * n, out.data() + bi * m * n, false);
  }
  return make_result<T>(
      std::move(out_shape), std::move(out), {a, b},
      [batches, m, n, k, a_of, b_of](Node<T>& self) {
        const auto& A = self.parents[0]->data;
        const auto& B = self.parents[1]->data;
        Node<T>* pa = grad_target(self, 0);
        Node<T>* pb = grad_target(self, 1);
        for (std::size_t bi = 0; bi < batches; ++bi) {
          const T* g = self.grad.data() + bi * m * n;
          if (pa) {
            kernels::gemm<T>(false, true, m, k, n, g, B.data() + b_of(bi) * k * n,
                             pa->grad.data() + a_of(bi) * m * k, true);
          }
          if (pb) {
            kernels::gemm<T>(true, false, k, n, m, A.data() + a_of(bi) * m * k, g,
                             pb->grad.data() + b_of(bi) * k * n, true);
          }
        }
      },
      "matmul");
}

template <typename T>
Tensor<T> masked_reduce(const Tensor<T>& x, const std::vector<std::uint8_t>* mask,
                        std::ptrdiff_t axis_in, bool keepdim, bool take_max, bool average,
                        const char* op) {
  const std::size_t axis = normalize_axis(axis_in, x.rank(), x.shape());
  const AxisSplit s = split_axis(x.shape(), axis);
  const auto xd = x.data();
  std::vector<T> out(s.outer * s.inner);
  // For max: index of the winning entry. For mean: the divisor per output.
  std::vector<std::size_t> argmax;
  std::vector<T> divisor;
  if (take_max) argmax.resize(out.size());
  if (average) divisor.resize(out.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t oi = o * s.inner + in;
      T acc = take_max ? -std::numeric_limits<T>::infinity() : T(0);
      std::size_t best = 0, count = 0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const std::size_t xi = (o * s.len + l) * s.inner + in;
        if (mask && !(*mask)[xi]) continue;
        ++count;
        if (take_max) {
          if (count == 1 || xd[xi] > acc) {
            acc = xd[xi];
            best = xi;
          }
        } else {
          acc += xd[xi];
        }
      }
      if (count == 0) {
        throw ValueError(std::string(op) + ": reduced slice has no unmasked entries");
      }
      if (take_max) argmax[oi] = best;
      if (average) {
        divisor[oi] = static_cast<T>(count);
        acc /= divisor[oi];
      }
      out[oi] = acc;
    }
  }
  std::vector<std::uint8_t> mask_copy = mask ? *mask : std::vector<std::uint8_t>{};
  return make_result<T>(
      reduced_shape(x.shape(), axis, keepdim), std::move(out), {x},
      [s, take_max, average, argmax = std::move(argmax), divisor = std::move(divisor),
       mask_copy = std::move(mask_copy)](Node<T>& self) {
        Node<T>* p = grad_target(self, 0);
        if (!p) return;
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t oi = o * s.inner + in;
            if (take_max) {
              p->grad[argmax[oi]] += self.grad[oi];
              continue;
            }
            const T g = average ? self.grad[oi] / divisor[oi] : self.grad[oi];
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t xi = (o * s.len + l) * s.inner + in;
              if (!mask_copy.empty() && !mask_copy[xi]) continue;
              p->grad[xi] += g;
            }
          }
        }
      },
      op);
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) +
                           " do not broadcast");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); },
      "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); },
      "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; },
      "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; }, "scale");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  return unary(
      x, [value](T v) { return v + value; }, [](T, T) { return T(1); }, "add_scalar");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); },
      "relu");
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      },
      "gelu");
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; }, "exp");
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; }, "log");
}

template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T floor) {
  return unary(
      x, [floor](T v) { return v > floor ? v : floor; },
      [floor](T v, T) { return v > floor ? T(1) : T(0); }, "clamp_min");
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() == 0 || b.rank() == 0) {
    throw DimensionError("matmul: scalar operand, shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const bool a_vec = a.rank() == 1;
  const bool b_vec = b.rank() == 1;
  if (!a_vec && !b_vec) return matmul_nd(a, b);
  const Tensor<T> a2 = a_vec ? reshape(a, Shape{1, a.dim(0)}) : a;
  const Tensor<T> b2 = b_vec ? reshape(b, Shape{b.dim(0), 1}) : b;
  if (a2.dim(-1) != b2.dim(-2)) {
    throw DimensionError("matmul: inner dimensions differ for shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  Tensor<T> r = matmul_nd(a2, b2);
  Shape s = r.shape();
  if (b_vec) s.pop_back();
  if (a_vec) s.erase(s.end() - (b_vec ? 1 : 2));
  return reshape(r, s);
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = 0;
  for (const T v : x.data()) acc += v;
  return make_result<T>(
      Shape{}, std::vector<T>{acc}, {x},
      [](Node<T>& self) {
        Node<T>* p = grad_target(self, 0);
        if (!p) return;
        for (auto& g : p->grad) g += self.grad[0];
      },
      "sum_all");
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::ptrdiff_t axis, bool keepdim) {
  return masked_reduce<T>(x, nullptr, axis, keepdim, false, false, "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::ptrdiff_t axis, bool keepdim) {
  return masked_reduce<T>(x, nullptr, axis, keepdim, false, true, "mean");
}

template <typename T>
Tensor<T> max(const Tensor<T>& x, std::ptrdiff_t axis, bool keepdim) {
  return masked_reduce<T>(x, nullptr, axis, keepdim, true, false, "max");
}

template <typename T>
Tensor<T> masked_mean(const Tensor<T>& x, const Mask& mask, std::ptrdiff_t axis) {
  const auto m = expand_mask(mask, x.shape(), "masked_mean");
  return masked_reduce<T>(x, &m, axis, false, false, true, "masked_mean");
}

template <typename T>
Tensor<T> masked_max(const Tensor<T>& x, const Mask& mask, std::ptrdiff_t axis) {
  const auto m = expand_mask(mask, x.shape(), "masked_max");
  return masked_reduce<T>(x, &m, axis, false, true, false, "masked_max");
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>(
      std::move(shape), std::move(out), {x},
      [](Node<T>& self) {
        Node<T>* p = grad_target(self, 0);
        if (!p) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
      },
      "reshape");
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  const std::size_t rank = in.size();
  if (axes.size() != rank) {
    throw DimensionError("permute: " + std::to_string(axes.size()) + " axes given for shape " +
                         shape_str(in));
  }
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (axes[i] >= rank || seen[axes[i]]) throw DimensionError("permute: invalid axis order");
    seen[axes[i]] = true;
    out_shape[i] = in[axes[i]];
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_stride[d - 1] = in_stride[d] * in[d];
  const std::size_t n = x.numel();
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t idx = 0;
  for (std::size_t i = 0; i < n; ++i) {
    map[i] = idx;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      idx += in_stride[axes[d]];
      if (counter[d] < out_shape[d]) break;
      idx -= in_stride[axes[d]] * counter[d];
      counter[d] = 0;
    }
  }
  const auto xd = x.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xd[map[i]];
  return make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [map = std::move(map)](Node<T>& self) {
        Node<T>* p = grad_target(self, 0);
        if (!p) return;
        for (std::size_t i = 0; i < map.size(); ++i) p->grad[map[i]] += self.grad[i];
      },
      "permute");
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::ptrdiff_t axis_in) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const std::size_t axis = normalize_axis(axis_in, first.size(), first);
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = first;
    if (a.size() != b.size()) throw DimensionError("concat: rank mismatch");
    a[axis] = b[axis] = 0;
    if (a != b) {
      throw DimensionError("concat: shapes " + shape_str(p.shape()) + " and " + shape_str(first) +
                           " differ off the concat axis");
    }
    out_shape[axis] += p.shape()[axis];
  }
  const AxisSplit s = split_axis(out_shape, axis);
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.shape()[axis];
    const auto pd = p.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner), len * s.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * s.len + off) * s.inner));
    }
    off += len;
  }
  check_finite(out, "concat");
  Tensor<T> result(std::move(out_shape), std::move(out));
  if (!grad_enabled()) return result;
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (!any) return result;
  auto& node = *result.node();
  node.requires_grad = true;
  node.is_leaf = false;
  for (const auto& p : parts) node.parents.push_back(p.node());
  node.backward = [s, axis, offsets](Node<T>& self) {
    for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
      Node<T>* p = grad_target(self, pi);
      if (!p) continue;
      const std::size_t len = p->shape[axis];
      for (std::size_t o = 0; o < s.outer; ++o) {
        const T* src = self.grad.data() + (o * s.len + offsets[pi]) * s.inner;
        T* dst = p->grad.data() + o * len * s.inner;
        for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
      }
    }
  };
  return result;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::ptrdiff_t axis_in, std::size_t start, std::size_t length) {
  const std::size_t axis = normalize_axis(axis_in, x.rank(), x.shape());
  if (length == 0 || start + length > x.shape()[axis]) {
    throw DimensionError("slice: [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") out of range on axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<T> out(shape_numel(out_shape));
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((o * s.len + start) * s.inner),
                length * s.inner, out.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
  }
  return make_result<T>(
      std::move(out_shape), std::move(out), {x},
      [s, start, length](Node<T>& self) {
        Node<T>* p = grad_target(self, 0);
        if (!p) return;
        for (std::size_t o = 0; o < s.outer; ++o) {
          const T* src = self.grad.data() + o * length * s.inner;
          T* dst = p->grad.data() + (o * s.len + start) * s.inner;
          for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
        }
      },
      "slice");
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const Ids& ids) {
  if (table.rank() != 2) {
    throw DimensionError("embedding: table must be rank 2, got " + shape_str(table.shape()));
  }
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  for (const auto id : ids.values) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ValueError("embedding: id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
  }
  Shape out_shape = ids.shape;
  out_shape.push_back(width);
  std::vector<T> out(ids.size() * width);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids.values[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  return make_result<T>(
      std::move(out_shape), std::move(out), {table},
      [ids = ids.values, width](Node<T>& self) {
        Node<T>* p = grad_target(self, 0);
        if (!p) return;
        for (std::size_t i = 0; i < ids.size(); ++i) {
          T* dst = p->grad.data() + static_cast<std::size_t>(ids[i]) * width;
          const T* src = self.grad.data() + i * width;
          for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
        }
      },
      "embedding");
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const Mask& mask) {
  if (logits.rank() == 0) throw DimensionError("masked_softmax: scalar input");
  const auto m = expand_mask(mask, logits.shape(), "masked_softmax");
  const std::size_t n = logits.dim(-1);
  const std::size_t rows = logits.numel() / n;
  const auto xd = logits.data();
  std::vector<T> out(logits.numel(), T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * n;
    T peak = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (!m[base + j]) continue;
      any = true;
      peak = std::max(peak, xd[base + j]);
    }
    if (!any) throw ValueError("masked_softmax: row " + std::to_string(r) + " is fully masked");
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!m[base + j]) continue;
      out[base + j] = std::exp(xd[base + j] - peak);
      total += out[base + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[base + j] /= total;
  }
  return make_result<T>(
      logits.shape(), std::move(out), {logits},
      [n, rows](Node<T>& self) {
        Node<T>* p = grad_target(self, 0);
        if (!p) return;
        const auto& y = self.data;
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * n;
          T inner = 0;
          for (std::size_t j = 0; j < n; ++j) inner += y[base + j] * self.grad[base + j];
          for (std::size_t j = 0; j < n; ++j) {
            p->grad[base + j] += y[base + j] * (self.grad[base + j] - inner);
          }
        }
      },
      "masked_softmax");
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  if (x.rank() == 0 || gain.rank() != 1 || gain.dim(0) != x.dim(-1)) {
    throw DimensionError("layer_norm: gain shape " + shape_str(gain.shape()) +
                         " does not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t h = x.dim(-1);
  const std::size_t rows = x.numel() / h;
  const auto xd = x.data();
  const auto gd = gain.data();
  std::vector<T> out(x.numel());
  std::vector<T> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * h;
    T ms = 0;
    for (std::size_t j = 0; j < h; ++j) ms += row[j] * row[j];
    ms /= static_cast<T>(h);
    inv_rms[r] = T(1) / std::sqrt(ms + eps);
    for (std::size_t j = 0; j < h; ++j) out[r * h + j] = row[j] * inv_rms[r] * gd[j];
  }
  return make_result<T>(
      x.shape(), std::move(out), {x, gain},
      [h, rows, inv_rms = std::move(inv_rms)](Node<T>& self) {
        const auto& X = self.parents[0]->data;
        const auto& G = self.parents[1]->data;
        Node<T>* px = grad_target(self, 0);
        Node<T>* pg = grad_target(self, 1);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xr = X.data() + r * h;
          const T* gr = self.grad.data() + r * h;
          const T inv = inv_rms[r];
          if (pg) {
            for (std::size_t j = 0; j < h; ++j) pg->grad[j] += gr[j] * xr[j] * inv;
          }
          if (px) {
            T dot = 0;
            for (std::size_t j = 0; j < h; ++j) dot += gr[j] * G[j] * xr[j];
            const T coeff = dot * inv * inv * inv / static_cast<T>(h);
            for (std::size_t j = 0; j < h; ++j) {
              px->grad[r * h + j] += gr[j] * G[j] * inv - xr[j] * coeff;
            }
          }
        }
      },
      "layer_norm");
}

template <typename T>
Tensor<T> token_nll(const Tensor<T>& logits, const Ids& targets, const Mask& mask) {
  if (logits.rank() < 1) throw DimensionError("token_nll: scalar logits");
  const Shape lead(logits.shape().begin(), logits.shape().end() - 1);
  if (targets.shape != lead || mask.shape != lead) {
    throw DimensionError("token_nll: logits " + shape_str(logits.shape()) + " vs targets " +
                         shape_str(targets.shape) + " and mask " + shape_str(mask.shape));
  }
  const std::size_t v = logits.dim(-1);
  const std::size_t rows = targets.size();
  const auto xd = logits.data();
  std::vector<T> out(rows, T(0));
  std::vector<T> lse(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask.values[r]) continue;
    const auto t = targets.values[r];
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw ValueError("token_nll: target id " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(v));
    }
    const T* row = xd.data() + r * v;
    const T peak = *std::max_element(row, row + v);
    T total = 0;
    for (std::size_t j = 0; j < v; ++j) total += std::exp(row[j] - peak);
    lse[r] = peak + std::log(total);
    out[r] = lse[r] - row[t];
  }
  return make_result<T>(
      lead, std::move(out), {logits},
      [v, rows, lse = std::move(lse), tg = targets.values, mk = mask.values](Node<T>& self) {
        Node<T>* p = grad_target(self, 0);
        if (!p) return;
        const auto& X = p->data;
        for (std::size_t r = 0; r < rows; ++r) {
          if (!mk[r]) continue;
          const T g = self.grad[r];
          const T* row = X.data() + r * v;
          T* dst = p->grad.data() + r * v;
          for (std::size_t j = 0; j < v; ++j) dst[j] += g * std::exp(row[j] - lse[r]);
          dst[tg[r]] -= g;
        }
      },
      "token_nll");
}

template <typename T>
CrossEntropy<T> cross_entropy_logits(const Tensor<T>& logits, const Ids& targets, const Mask& mask) {
  CrossEntropy<T> ce;
  ce.nll = sum_all(token_nll(logits, targets, mask));
  ce.count = static_cast<std::size_t>(std::count_if(mask.values.begin(), mask.values.end(),
                                                    [](std::uint8_t b) { return b != 0; }));
  return ce;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ValueError("dropout: rate must lie in [0, 1)");
  if (p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> factor(x.numel());
  for (auto& f : factor) f = rng.bernoulli(p) ? T(0) : keep_scale;
  const auto xd = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor[i];
  return make_result<T>(
      x.shape(), std::move(out), {x},
      [factor = std::move(factor)](Node<T>& self) {
        Node<T>* p = grad_target(self, 0);
        if (!p) return;
        for (std::size_t i = 0; i < factor.size(); ++i) p->grad[i] += self.grad[i] * factor[i];
      },
      "dropout");
}

#define TVAE_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                         \
  template Tensor<T> relu(const Tensor<T>&);                                                  \
  template Tensor<T> gelu(const Tensor<T>&);                                                  \
  template Tensor<T> exp(const Tensor<T>&);                                                   \
  template Tensor<T> log(const Tensor<T>&);                                                   \
  template Tensor<T> clamp_min(const Tensor<T>&, T);                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> sum_all(const Tensor<T>&);                                               \
  template Tensor<T> mean_all(const Tensor<T>&);                                              \
  template Tensor<T> sum(const Tensor<T>&, std::ptrdiff_t, bool);                             \
  template Tensor<T> mean(const Tensor<T>&, std::ptrdiff_t, bool);                            \
  template Tensor<T> max(const Tensor<T>&, std::ptrdiff_t, bool);                             \
  template Tensor<T> masked_mean(const Tensor<T>&, const Mask&, std::ptrdiff_t);              \
  template Tensor<T> masked_max(const Tensor<T>&, const Mask&, std::ptrdiff_t);               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                        \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);              \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::ptrdiff_t);                   \
  template Tensor<T> slice(const Tensor<T>&, std::ptrdiff_t, std::size_t, std::size_t);       \
  template Tensor<T> embedding(const Tensor<T>&, const Ids&);                                 \
  template Tensor<T> masked_softmax(const Tensor<T>&, const Mask&);                           \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, T);                       \
  template Tensor<T> token_nll(const Tensor<T>&, const Ids&, const Mask&);                    \
  template CrossEntropy<T> cross_entropy_logits(const Tensor<T>&, const Ids&, const Mask&);   \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&);

TVAE_INSTANTIATE_OPS(float)
TVAE_INSTANTIATE_OPS(double)

#undef TVAE_INSTANTIATE_OPS

}  // namespace tvae::diff
