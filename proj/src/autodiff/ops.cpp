#include "rtdlab/autodiff/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "kernels.hpp"
#include "vmath.hpp"

namespace rtdlab::ad {

namespace {

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Tensor<T> make_output(Shape shape, std::vector<T> values) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  return Tensor<T>(std::move(impl));
}

template <typename T>
void record(const char* op, std::vector<ImplPtr<T>> inputs, const Tensor<T>& out,
            typename Tape<T>::BackwardFn fn) {
  Tape<T>::current().record(op, std::move(inputs), out.impl_ptr(), std::move(fn));
}

// Hands the output gradient to input i when that input holds no gradient
// yet, saving a zero-fill and a copy. The sweep never reads a node's output
// gradient after its backward has run, so the buffer is free to move.
template <typename T>
bool take_out_grad(typename Tape<T>::Node& n, std::size_t i) {
  auto& in = *n.inputs[i];
  auto& g = n.output->grad;
  if (!in.requires_grad || !in.grad.empty() || g.size() != in.values.size()) return false;
  in.grad = std::move(g);
  g.clear();
  return true;
}

void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ShapeError(op, detail);
}

// --- broadcasting -----------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
  bool same = false;
};

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

Broadcast broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  bc.out.assign(rank, 1);
  bc.stride_a.assign(rank, 0);
  bc.stride_b.assign(rank, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  const std::size_t off_a = rank - a.size();
  const std::size_t off_b = rank - b.size();
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i >= off_a ? a[i - off_a] : 1;
    const std::size_t db = i >= off_b ? b[i - off_b] : 1;
    require(da == db || da == 1 || db == 1, op,
            "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    bc.out[i] = std::max(da, db);
    if (i >= off_a && da != 1) bc.stride_a[i] = sa[i - off_a];
    if (i >= off_b && db != 1) bc.stride_b[i] = sb[i - off_b];
  }
  return bc;
}

// Calls fn(o, ia, step_a, ib, step_b, len) for runs along the last axis:
// output elements o..o+len-1 read a at ia + j*step_a and b at ib + j*step_b,
// where each step is 0 (broadcast) or 1.
template <typename Fn>
void for_each_run(const Broadcast& bc, Fn&& fn) {
  const std::size_t total = numel(bc.out);
  if (total == 0) return;
  if (bc.same || bc.out.empty()) {
    fn(std::size_t{0}, std::size_t{0}, std::size_t{1}, std::size_t{0}, std::size_t{1}, total);
    return;
  }
  const std::size_t rank = bc.out.size();
  const std::size_t inner = bc.out[rank - 1];
  const std::size_t ia_step = bc.stride_a[rank - 1];
  const std::size_t ib_step = bc.stride_b[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off_a = 0, off_b = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    fn(o, off_a, ia_step, off_b, ib_step, inner);
    // advance the odometer over all but the last axis
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      off_a += bc.stride_a[d];
      off_b += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      off_a -= bc.stride_a[d] * idx[d];
      off_b -= bc.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  for_each_run(bc, [&](std::size_t o, std::size_t ia, std::size_t sa, std::size_t ib, std::size_t sb, std::size_t len) {
    for (std::size_t j = 0; j < len; ++j) fn(o + j, ia + j * sa, ib + j * sb);
  });
}

// dst[j] += alpha * src[j * step] for j < len, with step 0 meaning a
// reduction into a single element when dst_step is 0.
template <typename T>
void accumulate_run(T* dst, std::size_t dst_step, const T* src, std::size_t len, T alpha) {
  if (dst_step == 1) {
    if (alpha == T(1)) {
      for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
    } else {
      for (std::size_t j = 0; j < len; ++j) dst[j] += alpha * src[j];
    }
  } else {
    T acc = T(0);
    for (std::size_t j = 0; j < len; ++j) acc += src[j];
    dst[0] += alpha * acc;
  }
}

template <typename T>
Tensor<T> add_scaled(const char* op, const Tensor<T>& a, const Tensor<T>& b, T alpha) {
  const auto bc = broadcast_shapes(op, a.shape(), b.shape());
  std::vector<T> out(numel(bc.out));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out.data();
  for_each_run(bc, [&](std::size_t o, std::size_t ia, std::size_t sa, std::size_t ib, std::size_t sb, std::size_t len) {
    const T* ap = av + ia;
    const T* bp = bv + ib;
    T* op_ = ov + o;
    if (sa == 1 && sb == 1) {
      if (alpha == T(1)) {
        for (std::size_t j = 0; j < len; ++j) op_[j] = ap[j] + bp[j];
      } else {
        for (std::size_t j = 0; j < len; ++j) op_[j] = ap[j] + alpha * bp[j];
      }
    } else {
      for (std::size_t j = 0; j < len; ++j) op_[j] = ap[j * sa] + alpha * bp[j * sb];
    }
  });
  auto result = make_output<T>(bc.out, std::move(out));
  if (recording<T>({&a, &b})) {
    record<T>(op, {a.impl_ptr(), b.impl_ptr()}, result, [bc, alpha](auto& n) {
      if (bc.same) {
        auto g = n.out_grad();
        if (n.inputs[1]->requires_grad) accumulate_run(n.in_grad(1).data(), 1, g.data(), g.size(), alpha);
        if (n.inputs[0]->requires_grad && !take_out_grad<T>(n, 0)) {
          accumulate_run(n.in_grad(0).data(), 1, g.data(), g.size(), T(1));
        }
        return;
      }
      auto g = n.out_grad();
      auto ga = n.in_grad(0);
      auto gb = n.in_grad(1);
      for_each_run(bc, [&](std::size_t o, std::size_t ia, std::size_t sa, std::size_t ib, std::size_t sb,
                           std::size_t len) {
        if (!ga.empty()) accumulate_run(ga.data() + ia, sa, g.data() + o, len, T(1));
        if (!gb.empty()) accumulate_run(gb.data() + ib, sb, g.data() + o, len, alpha);
      });
    });
  }
  return result;
}

std::size_t outer_of(const Shape& s, std::size_t axis) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < axis; ++i) n *= s[i];
  return n;
}

std::size_t inner_of(const Shape& s, std::size_t axis) {
  std::size_t n = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) n *= s[i];
  return n;
}

std::size_t last_dim(const char* op, const Shape& s) {
  require(!s.empty(), op, "needs rank >= 1, got scalar");
  return s.back();
}

}  // namespace

// --- elementwise ------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return add_scaled("add", a, b, T(1));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add_scaled("sub", a, b, T(-1));
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto bc = broadcast_shapes("multiply", a.shape(), b.shape());
  std::vector<T> out(numel(bc.out));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = av[ia] * bv[ib];
  });
  auto result = make_output<T>(bc.out, std::move(out));
  if (recording<T>({&a, &b})) {
    record<T>("multiply", {a.impl_ptr(), b.impl_ptr()}, result, [bc](auto& n) {
      auto g = n.out_grad();
      const auto& av = n.inputs[0]->values;
      const auto& bv = n.inputs[1]->values;
      auto ga = n.in_grad(0);
      auto gb = n.in_grad(1);
      for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        if (!ga.empty()) ga[ia] += g[o] * bv[ib];
        if (!gb.empty()) gb[ib] += g[o] * av[ia];
      });
    });
  }
  return result;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  auto result = make_output<T>(a.shape(), std::move(out));
  if (recording<T>({&a})) {
    record<T>("scale", {a.impl_ptr()}, result, [factor](auto& n) {
      if (take_out_grad<T>(n, 0)) {
        for (auto& v : n.inputs[0]->grad) v *= factor;
        return;
      }
      auto g = n.out_grad();
      auto ga = n.in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
    });
  }
  return result;
}

// --- linear algebra and layout ---------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  require(sa.size() >= 2 && sb.size() >= 2, "matmul",
          "operands need rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t n = sb.back();
  require(sb[sb.size() - 2] == k, "matmul",
          "inner extents differ: " + shape_str(sa) + " x " + shape_str(sb));
  // b's batch extents must match the trailing batch extents of a; b is then
  // reused across a's leading batch axes.
  require(sb.size() <= sa.size() && std::equal(sb.begin(), sb.end() - 2, sa.end() - static_cast<std::ptrdiff_t>(sb.size())), "matmul",
          "batch extents differ: " + shape_str(sa) + " x " + shape_str(sb));
  const bool shared_rhs = sb.size() == 2;
  const std::size_t batch = outer_of(sa, sa.size() - 2);
  const std::size_t b_batch = outer_of(sb, sb.size() - 2);
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(batch * m * n, T(0));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  if (shared_rhs) {
    kernels::gemm_nn(av, bv, out.data(), batch * m, n, k);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      kernels::gemm_nn(av + i * m * k, bv + (i % b_batch) * k * n, out.data() + i * m * n, m, n, k);
    }
  }
  auto result = make_output<T>(std::move(out_shape), std::move(out));
  if (recording<T>({&a, &b})) {
    record<T>("matmul", {a.impl_ptr(), b.impl_ptr()}, result,
              [shared_rhs, batch, b_batch, m, n, k](auto& node) {
                const T* g = node.out_grad().data();
                const T* av = node.inputs[0]->values.data();
                const T* bv = node.inputs[1]->values.data();
                auto ga = node.in_grad(0);
                auto gb = node.in_grad(1);
                std::vector<T> scratch;
                if (shared_rhs) {
                  if (!ga.empty()) kernels::gemm_nt(g, bv, ga.data(), batch * m, k, n, scratch);
                  if (!gb.empty()) kernels::gemm_tn(av, g, gb.data(), k, n, batch * m);
                  return;
                }
                for (std::size_t i = 0; i < batch; ++i) {
                  const T* gi = g + i * m * n;
                  const std::size_t bi = i % b_batch;
                  if (!ga.empty()) {
                    kernels::gemm_nt(gi, bv + bi * k * n, ga.data() + i * m * k, m, k, n, scratch);
                  }
                  if (!gb.empty()) {
                    kernels::gemm_tn(av + i * m * k, gi, gb.data() + bi * k * n, k, n, m);
                  }
                }
              });
  }
  return result;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const auto& s = a.shape();
  const std::size_t rank = s.size();
  require(perm.size() == rank, "permute",
          "permutation of length " + std::to_string(perm.size()) + " for shape " + shape_str(s));
  std::vector<bool> seen(rank, false);
  for (auto p : perm) {
    require(p < rank && !seen[p], "permute", "invalid permutation for shape " + shape_str(s));
    seen[p] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = s[perm[i]];
  const auto in_strides = contiguous_strides(s);
  // Elements move in runs when the last axis stays last; `src` holds the
  // source offset of each run, shared by forward and backward.
  const std::size_t total = numel(s);
  const std::size_t run = rank > 0 && perm[rank - 1] == rank - 1 ? s[rank - 1] : 1;
  const std::size_t n_runs = run == 0 ? 0 : total / run;
  const std::size_t odo_rank = run == 1 ? rank : rank - 1;
  auto src = std::make_shared<std::vector<std::size_t>>(n_runs);
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t o = 0; o < n_runs; ++o) {
      (*src)[o] = off;
      for (std::size_t d = odo_rank; d-- > 0;) {
        ++idx[d];
        off += in_strides[perm[d]];
        if (idx[d] < out_shape[d]) break;
        off -= in_strides[perm[d]] * idx[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<T> out(total);
  const T* av = a.values().data();
  for (std::size_t o = 0; o < n_runs; ++o) {
    std::copy_n(av + (*src)[o], run, out.data() + o * run);
  }
  auto result = make_output<T>(std::move(out_shape), std::move(out));
  if (recording<T>({&a})) {
    record<T>("permute", {a.impl_ptr()}, result, [src, run](auto& n) {
      auto g = n.out_grad();
      auto ga = n.in_grad(0);
      for (std::size_t o = 0; o < src->size(); ++o) {
        T* dst = ga.data() + (*src)[o];
        const T* from = g.data() + o * run;
        for (std::size_t j = 0; j < run; ++j) dst[j] += from[j];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  const std::size_t rank = a.rank();
  require(rank >= 2, "transpose", "needs rank >= 2, got " + shape_str(a.shape()));
  const std::size_t rows = a.dim(rank - 2);
  const std::size_t cols = a.dim(rank - 1);
  const std::size_t batch = outer_of(a.shape(), rank - 2);
  Shape out_shape = a.shape();
  std::swap(out_shape[rank - 1], out_shape[rank - 2]);
  std::vector<T> out(a.size());
  const T* av = a.values().data();
  for (std::size_t i = 0; i < batch; ++i) {
    kernels::transpose_into(av + i * rows * cols, out.data() + i * rows * cols, rows, cols);
  }
  auto result = make_output<T>(std::move(out_shape), std::move(out));
  if (recording<T>({&a})) {
    record<T>("transpose", {a.impl_ptr()}, result, [batch, rows, cols](auto& n) {
      const T* g = n.out_grad().data();
      const bool fresh = n.inputs[0]->grad.empty();
      auto ga = n.in_grad(0);
      if (fresh) {
        for (std::size_t i = 0; i < batch; ++i) {
          kernels::transpose_into(g + i * rows * cols, ga.data() + i * rows * cols, cols, rows);
        }
        return;
      }
      std::vector<T> tmp(rows * cols);
      for (std::size_t i = 0; i < batch; ++i) {
        kernels::transpose_into(g + i * rows * cols, tmp.data(), cols, rows);
        T* dst = ga.data() + i * rows * cols;
        for (std::size_t j = 0; j < tmp.size(); ++j) dst[j] += tmp[j];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(numel(shape) == a.size(), "reshape",
          "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  auto result = make_output<T>(std::move(shape), std::vector<T>(a.values().begin(), a.values().end()));
  if (recording<T>({&a})) {
    record<T>("reshape", {a.impl_ptr()}, result, [](auto& n) {
      if (take_out_grad<T>(n, 0)) return;
      auto g = n.out_grad();
      auto ga = n.in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  require(!parts.empty(), "concat", "no inputs");
  const Shape& s0 = parts[0].shape();
  require(axis < s0.size(), "concat", "axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    require(ok, "concat", "cannot join " + shape_str(s0) + " with " + shape_str(s) +
                              " along axis " + std::to_string(axis));
    extents.push_back(s[axis]);
  }
  const std::size_t outer = outer_of(s0, axis);
  const std::size_t inner = inner_of(s0, axis);
  const std::size_t total_axis = std::accumulate(extents.begin(), extents.end(), std::size_t{0});
  Shape out_shape = s0;
  out_shape[axis] = total_axis;
  std::vector<T> out(outer * total_axis * inner);
  std::size_t col = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const T* src = parts[p].values().data();
    const std::size_t block = extents[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * block, block, out.data() + (o * total_axis + col) * inner);
    }
    col += extents[p];
  }
  auto result = make_output<T>(std::move(out_shape), std::move(out));
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (any && grad_enabled()) {
    std::vector<ImplPtr<T>> inputs;
    for (const auto& p : parts) inputs.push_back(p.impl_ptr());
    record<T>("concat", std::move(inputs), result, [extents, outer, inner, total_axis](auto& n) {
      auto g = n.out_grad();
      std::size_t col = 0;
      for (std::size_t p = 0; p < extents.size(); ++p) {
        auto gp = n.in_grad(p);
        const std::size_t block = extents[p] * inner;
        if (!gp.empty()) {
          for (std::size_t o = 0; o < outer; ++o) {
            const T* src = g.data() + (o * total_axis + col) * inner;
            for (std::size_t i = 0; i < block; ++i) gp[o * block + i] += src[i];
          }
        }
        col += extents[p];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  require(axis < s.size(), "slice", "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  require(start + length <= s[axis], "slice",
          "range [" + std::to_string(start) + "," + std::to_string(start + length) +
              ") exceeds extent " + std::to_string(s[axis]) + " of " + shape_str(s));
  const std::size_t outer = outer_of(s, axis);
  const std::size_t inner = inner_of(s, axis);
  const std::size_t extent = s[axis];
  Shape out_shape = s;
  out_shape[axis] = length;
  std::vector<T> out(outer * length * inner);
  const T* src = a.values().data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src + (o * extent + start) * inner, length * inner, out.data() + o * length * inner);
  }
  auto result = make_output<T>(std::move(out_shape), std::move(out));
  if (recording<T>({&a})) {
    record<T>("slice", {a.impl_ptr()}, result, [outer, inner, extent, start, length](auto& n) {
      auto g = n.out_grad();
      auto ga = n.in_grad(0);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < length * inner; ++i) {
          ga[(o * extent + start) * inner + i] += g[o * length * inner + i];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const Index> ids, Shape ids_shape) {
  require(table.rank() == 2, "embedding_gather", "table must be (V, d), got " + shape_str(table.shape()));
  require(numel(ids_shape) == ids.size(), "embedding_gather",
          "id shape " + shape_str(ids_shape) + " does not hold " + std::to_string(ids.size()) + " ids");
  const std::size_t rows = table.dim(0);
  const std::size_t width = table.dim(1);
  std::vector<Index> id_copy(ids.begin(), ids.end());
  for (auto id : id_copy) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw std::out_of_range("embedding_gather: id " + std::to_string(id) + " outside [0, " +
                              std::to_string(rows) + ")");
    }
  }
  std::vector<T> out(ids.size() * width);
  const T* src = table.values().data();
  for (std::size_t i = 0; i < id_copy.size(); ++i) {
    std::copy_n(src + static_cast<std::size_t>(id_copy[i]) * width, width, out.data() + i * width);
  }
  Shape out_shape = std::move(ids_shape);
  out_shape.push_back(width);
  auto result = make_output<T>(std::move(out_shape), std::move(out));
  if (recording<T>({&table})) {
    record<T>("embedding_gather", {table.impl_ptr()}, result,
              [ids = std::move(id_copy), width](auto& n) {
                auto g = n.out_grad();
                auto gt = n.in_grad(0);
                for (std::size_t i = 0; i < ids.size(); ++i) {
                  T* row = gt.data() + static_cast<std::size_t>(ids[i]) * width;
                  const T* gi = g.data() + i * width;
                  for (std::size_t j = 0; j < width; ++j) row[j] += gi[j];
                }
              });
  }
  return result;
}

template <typename T>
Tensor<T> take_along_last(const Tensor<T>& a, std::span<const Index> index, std::size_t cols) {
  const Shape& s = a.shape();
  require(s.size() >= 2, "take_along_last", "needs rank >= 2, got " + shape_str(s));
  const std::size_t rows = s[s.size() - 2];
  const std::size_t width = s.back();
  require(index.size() == rows * cols, "take_along_last",
          "index table of " + std::to_string(index.size()) + " entries for " +
              std::to_string(rows) + " rows x " + std::to_string(cols) + " cols");
  std::vector<Index> idx(index.begin(), index.end());
  for (auto v : idx) {
    if (v < 0 || static_cast<std::size_t>(v) >= width) {
      throw std::out_of_range("take_along_last: index " + std::to_string(v) + " outside [0, " +
                              std::to_string(width) + ")");
    }
  }
  const std::size_t outer = outer_of(s, s.size() - 2);
  std::vector<T> out(outer * rows * cols);
  const T* src = a.values().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = src + (o * rows + r) * width;
      T* dst = out.data() + (o * rows + r) * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] = row[idx[r * cols + c]];
    }
  }
  Shape out_shape = s;
  out_shape.back() = cols;
  auto result = make_output<T>(std::move(out_shape), std::move(out));
  if (recording<T>({&a})) {
    record<T>("take_along_last", {a.impl_ptr()}, result,
              [idx = std::move(idx), outer, rows, cols, width](auto& n) {
                auto g = n.out_grad();
                auto ga = n.in_grad(0);
                for (std::size_t o = 0; o < outer; ++o) {
                  for (std::size_t r = 0; r < rows; ++r) {
                    T* row = ga.data() + (o * rows + r) * width;
                    const T* gr = g.data() + (o * rows + r) * cols;
                    for (std::size_t c = 0; c < cols; ++c) row[idx[r * cols + c]] += gr[c];
                  }
                }
              });
  }
  return result;
}

// --- normalizations and activations -----------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  const std::size_t width = last_dim("softmax", a.shape());
  const std::size_t rows = width ? a.size() / width : 0;
  std::vector<T> out(a.size());
  const T* x = a.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * width;
    T* yr = out.data() + r * width;
    const T mx = *std::max_element(xr, xr + width);
    for (std::size_t j = 0; j < width; ++j) yr[j] = xr[j] - mx;
  }
  vmath::exp_inplace(out.data(), out.size());
  for (std::size_t r = 0; r < rows; ++r) {
    T* yr = out.data() + r * width;
    T total = 0;
    for (std::size_t j = 0; j < width; ++j) total += yr[j];
    for (std::size_t j = 0; j < width; ++j) yr[j] /= total;
  }
  auto result = make_output<T>(a.shape(), std::move(out));
  if (recording<T>({&a})) {
    record<T>("softmax", {a.impl_ptr()}, result, [rows, width](auto& n) {
      auto g = n.out_grad();
      const auto& y = n.output->values;
      auto ga = n.in_grad(0);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * width;
        T dot = 0;
        for (std::size_t j = 0; j < width; ++j) dot += g[base + j] * y[base + j];
        for (std::size_t j = 0; j < width; ++j) ga[base + j] += y[base + j] * (g[base + j] - dot);
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  const std::size_t width = last_dim("log_softmax", a.shape());
  const std::size_t rows = width ? a.size() / width : 0;
  std::vector<T> out(a.size());
  const T* x = a.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * width;
    T* yr = out.data() + r * width;
    const T mx = *std::max_element(xr, xr + width);
    T total = 0;
    for (std::size_t j = 0; j < width; ++j) total += std::exp(xr[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < width; ++j) yr[j] = xr[j] - lse;
  }
  auto result = make_output<T>(a.shape(), std::move(out));
  if (recording<T>({&a})) {
    record<T>("log_softmax", {a.impl_ptr()}, result, [rows, width](auto& n) {
      auto g = n.out_grad();
      const auto& y = n.output->values;
      auto ga = n.in_grad(0);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * width;
        T total = 0;
        for (std::size_t j = 0; j < width; ++j) total += g[base + j];
        for (std::size_t j = 0; j < width; ++j) ga[base + j] += g[base + j] - std::exp(y[base + j]) * total;
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t width = last_dim("layer_norm", x.shape());
  require(gamma.shape() == Shape{width} && beta.shape() == Shape{width}, "layer_norm",
          "gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
              " must be (" + std::to_string(width) + ")");
  const std::size_t rows = width ? x.size() / width : 0;
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.size());
  const T* xv = x.values().data();
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv + r * width;
    T mu = 0;
    for (std::size_t j = 0; j < width; ++j) mu += xr[j];
    mu /= static_cast<T>(width);
    T var = 0;
    for (std::size_t j = 0; j < width; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(width);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < width; ++j) {
      const T h = (xr[j] - mu) * rs;
      (*xhat)[r * width + j] = h;
      out[r * width + j] = h * gv[j] + bv[j];
    }
  }
  auto result = make_output<T>(x.shape(), std::move(out));
  if (recording<T>({&x, &gamma, &beta})) {
    record<T>("layer_norm", {x.impl_ptr(), gamma.impl_ptr(), beta.impl_ptr()}, result,
              [xhat, rstd, rows, width](auto& n) {
                auto g = n.out_grad();
                const auto& gv = n.inputs[1]->values;
                auto gx = n.in_grad(0);
                auto gg = n.in_grad(1);
                auto gb = n.in_grad(2);
                for (std::size_t r = 0; r < rows; ++r) {
                  const std::size_t base = r * width;
                  T mean_d = 0, mean_dx = 0;
                  for (std::size_t j = 0; j < width; ++j) {
                    const T d = g[base + j] * gv[j];
                    mean_d += d;
                    mean_dx += d * (*xhat)[base + j];
                    if (!gg.empty()) gg[j] += g[base + j] * (*xhat)[base + j];
                    if (!gb.empty()) gb[j] += g[base + j];
                  }
                  if (gx.empty()) continue;
                  mean_d /= static_cast<T>(width);
                  mean_dx /= static_cast<T>(width);
                  for (std::size_t j = 0; j < width; ++j) {
                    const T d = g[base + j] * gv[j];
                    gx[base + j] += (*rstd)[r] * (d - mean_d - (*xhat)[base + j] * mean_dx);
                  }
                }
              });
  }
  return result;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  const std::size_t size = a.size();
  const T* x = a.values().data();
  std::vector<T> cdf(size);
  for (std::size_t i = 0; i < size; ++i) cdf[i] = x[i] * kInvSqrt2;
  vmath::erf_inplace(cdf.data(), size);
  for (auto& c : cdf) c = T(0.5) * (T(1) + c);
  std::vector<T> out(size);
  for (std::size_t i = 0; i < size; ++i) out[i] = x[i] * cdf[i];
  if (!recording<T>({&a})) return make_output<T>(a.shape(), std::move(out));
  // The derivative Phi(x) + x phi(x) is formed here so backward needs no
  // second erf evaluation.
  auto deriv = std::make_shared<std::vector<T>>(size);
  T* d = deriv->data();
  for (std::size_t i = 0; i < size; ++i) d[i] = T(-0.5) * x[i] * x[i];
  vmath::exp_inplace(d, size);
  for (std::size_t i = 0; i < size; ++i) d[i] = cdf[i] + x[i] * kInvSqrt2Pi * d[i];
  auto result = make_output<T>(a.shape(), std::move(out));
  record<T>("gelu", {a.impl_ptr()}, result, [deriv](auto& n) {
    auto g = n.out_grad();
    auto ga = n.in_grad(0);
    const T* d = deriv->data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * d[i];
  });
  return result;
}

namespace {
template <typename T>
T stable_sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}
}  // namespace

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  const T* x = a.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(x[i]);
  auto result = make_output<T>(a.shape(), std::move(out));
  if (recording<T>({&a})) {
    record<T>("sigmoid", {a.impl_ptr()}, result, [](auto& n) {
      auto g = n.out_grad();
      const auto& y = n.output->values;
      auto ga = n.in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }
  return result;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (!is_training() || p == 0.0) return a;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<T>>(a.size());
  std::vector<T> out(a.size());
  const T* x = a.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    (*mask)[i] = u < p ? T(0) : keep_scale;
    out[i] = x[i] * (*mask)[i];
  }
  auto result = make_output<T>(a.shape(), std::move(out));
  if (recording<T>({&a})) {
    record<T>("dropout", {a.impl_ptr()}, result, [mask](auto& n) {
      auto g = n.out_grad();
      auto ga = n.in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*mask)[i];
    });
  }
  return result;
}

// --- losses and reductions --------------------------------------------------

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const Index> targets) {
  require(logits.rank() == 2, "cross_entropy", "logits must be (N, V), got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0);
  const std::size_t width = logits.dim(1);
  require(targets.size() == rows && rows > 0, "cross_entropy",
          std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  std::vector<Index> tgt(targets.begin(), targets.end());
  const T* x = logits.values().data();
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= width) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(tgt[r]) + " outside [0, " +
                              std::to_string(width) + ")");
    }
    const T* xr = x + r * width;
    const T mx = *std::max_element(xr, xr + width);
    T z = 0;
    for (std::size_t j = 0; j < width; ++j) {
      const T e = std::exp(xr[j] - mx);
      (*probs)[r * width + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < width; ++j) (*probs)[r * width + j] /= z;
    total += mx + std::log(z) - xr[tgt[r]];
  }
  auto result = make_output<T>(Shape{}, std::vector<T>{total / static_cast<T>(rows)});
  if (recording<T>({&logits})) {
    record<T>("cross_entropy", {logits.impl_ptr()}, result,
              [probs, tgt = std::move(tgt), rows, width](auto& n) {
                const T g = n.out_grad()[0] / static_cast<T>(rows);
                auto gl = n.in_grad(0);
                for (std::size_t r = 0; r < rows; ++r) {
                  for (std::size_t j = 0; j < width; ++j) gl[r * width + j] += g * (*probs)[r * width + j];
                  gl[r * width + static_cast<std::size_t>(tgt[r])] -= g;
                }
              });
  }
  return result;
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> labels, std::span<const T> weights) {
  const std::size_t count = logits.size();
  require(labels.size() == count && weights.size() == count, "bce_with_logits",
          std::to_string(labels.size()) + " labels / " + std::to_string(weights.size()) +
              " weights for logits " + shape_str(logits.shape()));
  T wsum = 0;
  for (T w : weights) wsum += w;
  if (!(wsum > 0)) throw std::invalid_argument("bce_with_logits: weights sum to zero");
  const T* x = logits.values().data();
  T total = 0;
  for (std::size_t i = 0; i < count; ++i) {
    if (weights[i] == T(0)) continue;
    const T l = std::max(x[i], T(0)) - x[i] * labels[i] + std::log1p(std::exp(-std::abs(x[i])));
    total += weights[i] * l;
  }
  auto result = make_output<T>(Shape{}, std::vector<T>{total / wsum});
  if (recording<T>({&logits})) {
    record<T>("bce_with_logits", {logits.impl_ptr()}, result,
              [y = std::vector<T>(labels.begin(), labels.end()),
               w = std::vector<T>(weights.begin(), weights.end()), wsum](auto& n) {
                const T g = n.out_grad()[0] / wsum;
                const auto& x = n.inputs[0]->values;
                auto gl = n.in_grad(0);
                for (std::size_t i = 0; i < gl.size(); ++i) {
                  if (w[i] == T(0)) continue;
                  gl[i] += g * w[i] * (stable_sigmoid(x[i]) - y[i]);
                }
              });
  }
  return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.values()) total += v;
  auto result = make_output<T>(Shape{}, std::vector<T>{total});
  if (recording<T>({&a})) {
    record<T>("sum", {a.impl_ptr()}, result, [](auto& n) {
      const T g = n.out_grad()[0];
      for (auto& v : n.in_grad(0)) v += g;
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  require(a.size() > 0, "mean", "empty tensor " + shape_str(a.shape()));
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

namespace detail {
StopGradientReplay& stop_gradient_replay() {
  thread_local StopGradientReplay replay;
  return replay;
}
}  // namespace detail

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  auto& replay = detail::stop_gradient_replay();
  if (replay.mode == detail::StopGradientReplay::Mode::kRecord) {
    replay.frozen.emplace_back(out.begin(), out.end());
  } else if (replay.mode == detail::StopGradientReplay::Mode::kReplay) {
    if (replay.cursor >= replay.frozen.size() || replay.frozen[replay.cursor].size() != out.size()) {
      throw AutodiffError("stop_gradient: graph structure changed between grad-check passes");
    }
    const auto& frozen = replay.frozen[replay.cursor++];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(frozen[i]);
  }
  return make_output<T>(a.shape(), std::move(out));
}

// --- table-driven dispatch --------------------------------------------------

namespace {
constexpr std::array kAllOps = {
    OpKind::kAdd,        OpKind::kSub,         OpKind::kMultiply,    OpKind::kScale,
    OpKind::kMatmul,     OpKind::kTranspose,   OpKind::kPermute,     OpKind::kReshape,
    OpKind::kConcat,     OpKind::kSlice,       OpKind::kEmbeddingGather,
    OpKind::kTakeAlongLast, OpKind::kSoftmax,  OpKind::kLogSoftmax,  OpKind::kLayerNorm,
    OpKind::kGelu,       OpKind::kSigmoid,     OpKind::kDropout,     OpKind::kCrossEntropy,
    OpKind::kBceWithLogits, OpKind::kSum,      OpKind::kMean,        OpKind::kStopGradient,
};

void expect_arity(OpKind kind, std::size_t got, std::size_t want) {
  if (got != want) {
    throw std::invalid_argument(std::string(op_name(kind)) + ": expected " + std::to_string(want) +
                                " inputs, got " + std::to_string(got));
  }
}
}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMultiply: return "multiply";
    case OpKind::kScale: return "scale";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kPermute: return "permute";
    case OpKind::kReshape: return "reshape";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kEmbeddingGather: return "embedding_gather";
    case OpKind::kTakeAlongLast: return "take_along_last";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kGelu: return "gelu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kDropout: return "dropout";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kBceWithLogits: return "bce_with_logits";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kStopGradient: return "stop_gradient";
  }
  return "unknown";
}

std::span<const OpKind> all_op_kinds() { return kAllOps; }

template <typename T>
Tensor<T> op_forward(OpKind kind, const std::vector<Tensor<T>>& in, const OpAttrs& attrs) {
  switch (kind) {
    case OpKind::kAdd: expect_arity(kind, in.size(), 2); return add(in[0], in[1]);
    case OpKind::kSub: expect_arity(kind, in.size(), 2); return sub(in[0], in[1]);
    case OpKind::kMultiply: expect_arity(kind, in.size(), 2); return mul(in[0], in[1]);
    case OpKind::kScale: expect_arity(kind, in.size(), 1); return scale(in[0], static_cast<T>(attrs.factor));
    case OpKind::kMatmul: expect_arity(kind, in.size(), 2); return matmul(in[0], in[1]);
    case OpKind::kTranspose: expect_arity(kind, in.size(), 1); return transpose(in[0]);
    case OpKind::kPermute: expect_arity(kind, in.size(), 1); return permute(in[0], attrs.perm);
    case OpKind::kReshape: expect_arity(kind, in.size(), 1); return reshape(in[0], attrs.shape);
    case OpKind::kConcat: return concat(in, attrs.axis);
    case OpKind::kSlice: expect_arity(kind, in.size(), 1); return slice(in[0], attrs.axis, attrs.start, attrs.length);
    case OpKind::kEmbeddingGather:
      expect_arity(kind, in.size(), 1);
      return embedding(in[0], std::span<const Index>(attrs.indices), attrs.shape);
    case OpKind::kTakeAlongLast:
      expect_arity(kind, in.size(), 1);
      return take_along_last(in[0], std::span<const Index>(attrs.indices), attrs.cols);
    case OpKind::kSoftmax: expect_arity(kind, in.size(), 1); return softmax(in[0]);
    case OpKind::kLogSoftmax: expect_arity(kind, in.size(), 1); return log_softmax(in[0]);
    case OpKind::kLayerNorm:
      expect_arity(kind, in.size(), 3);
      return layer_norm(in[0], in[1], in[2], static_cast<T>(attrs.eps));
    case OpKind::kGelu: expect_arity(kind, in.size(), 1); return gelu(in[0]);
    case OpKind::kSigmoid: expect_arity(kind, in.size(), 1); return sigmoid(in[0]);
    case OpKind::kDropout: {
      expect_arity(kind, in.size(), 1);
      if (attrs.rng == nullptr) throw std::invalid_argument("dropout: attrs.rng is required");
      return dropout(in[0], attrs.p, *attrs.rng);
    }
    case OpKind::kCrossEntropy:
      expect_arity(kind, in.size(), 1);
      return cross_entropy(in[0], std::span<const Index>(attrs.indices));
    case OpKind::kBceWithLogits: {
      expect_arity(kind, in.size(), 1);
      std::vector<T> y(attrs.labels.begin(), attrs.labels.end());
      std::vector<T> w(attrs.weights.begin(), attrs.weights.end());
      if (w.empty()) w.assign(y.size(), T(1));
      return bce_with_logits(in[0], std::span<const T>(y), std::span<const T>(w));
    }
    case OpKind::kSum: expect_arity(kind, in.size(), 1); return sum(in[0]);
    case OpKind::kMean: expect_arity(kind, in.size(), 1); return mean(in[0]);
    case OpKind::kStopGradient: expect_arity(kind, in.size(), 1); return stop_gradient(in[0]);
  }
  throw std::invalid_argument("op_forward: unknown op kind");
}

#define RTDLAB_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> transpose(const Tensor<T>&);                                               \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                        \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);            \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const Index>, Shape);                \
  template Tensor<T> take_along_last(const Tensor<T>&, std::span<const Index>, std::size_t);    \
  template Tensor<T> softmax(const Tensor<T>&);                                                 \
  template Tensor<T> log_softmax(const Tensor<T>&);                                             \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> gelu(const Tensor<T>&);                                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                 \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&);                                   \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const Index>);                   \
  template Tensor<T> bce_with_logits(const Tensor<T>&, std::span<const T>, std::span<const T>); \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                    \
  template Tensor<T> stop_gradient(const Tensor<T>&);                                           \
  template Tensor<T> op_forward(OpKind, const std::vector<Tensor<T>>&, const OpAttrs&);

RTDLAB_INSTANTIATE_OPS(float)
RTDLAB_INSTANTIATE_OPS(double)

#undef RTDLAB_INSTANTIATE_OPS

}  // namespace rtdlab::ad
