// Differentiable tensor operations.
//
// Each op computes its forward value eagerly and, when any input requires
// grad and recording is enabled, appends a backward rule to the thread's tape.
// Binary elementwise ops broadcast numpy-style (right-aligned extents, 1
// stretches).

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "rtdlab/autodiff/tensor.hpp"

namespace rtdlab::ad {

using Index = std::int32_t;
using Rng = std::mt19937_64;

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

// a: (..., m, k); b: (..., k, n) whose batch extents equal the trailing
// batch extents of a (none at all for a single shared matrix). b is reused
// across a's remaining leading axes.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// Swaps the last two axes.
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length);

// Row gather: output shape is ids_shape + (table.dim(1)). Repeated ids
// accumulate gradient into the same row.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const Index> ids, Shape ids_shape);

// out[..., m, n] = a[..., m, index[m * cols + n]] for a of shape (..., M, R)
// and an M x cols index table shared across leading axes.
template <typename T>
Tensor<T> take_along_last(const Tensor<T>& a, std::span<const Index> index, std::size_t cols);

template <typename T> Tensor<T> softmax(const Tensor<T>& a);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& a);
// Normalizes the last axis, then applies gamma/beta of that axis's extent.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-7));
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
// Inverted dropout; identity when the training flag is off or p == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& a, double p, Rng& rng);

// Mean over rows of -log softmax(logits)[target]; logits (N, V).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const Index> targets);
// Weighted mean of binary cross-entropy with logits; weights of 0 drop a
// position. Labels and weights are constants with one entry per logit.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> labels,
                          std::span<const T> weights);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

// Identity forward; contributes no gradient to its input. The result is a
// constant with no tape identity, so nothing upstream of it is reachable
// from a loss through this edge.
template <typename T> Tensor<T> stop_gradient(const Tensor<T>& a);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// Table-driven entry point over every op kind, used by the property tests.
enum class OpKind {
  kAdd,
  kSub,
  kMultiply,
  kScale,
  kMatmul,
  kTranspose,
  kPermute,
  kReshape,
  kConcat,
  kSlice,
  kEmbeddingGather,
  kTakeAlongLast,
  kSoftmax,
  kLogSoftmax,
  kLayerNorm,
  kGelu,
  kSigmoid,
  kDropout,
  kCrossEntropy,
  kBceWithLogits,
  kSum,
  kMean,
  kStopGradient,
};

std::string_view op_name(OpKind kind);
std::span<const OpKind> all_op_kinds();

struct OpAttrs {
  Shape shape;                       // reshape target; index shape for gathers
  std::vector<std::size_t> perm;     // permute
  std::size_t axis = 0;              // concat / slice
  std::size_t start = 0;             // slice
  std::size_t length = 0;            // slice
  std::size_t cols = 0;              // take_along_last
  std::vector<Index> indices;        // gather ids, targets, index tables
  std::vector<double> labels;        // bce
  std::vector<double> weights;       // bce
  double factor = 1.0;               // scale
  double p = 0.0;                    // dropout
  double eps = 1e-7;                 // layer_norm
  Rng* rng = nullptr;                // dropout
};

template <typename T>
Tensor<T> op_forward(OpKind kind, const std::vector<Tensor<T>>& inputs, const OpAttrs& attrs);

namespace detail {

// Lets grad_check hold stop_gradient outputs fixed at their unperturbed
// values while it perturbs leaves, so finite differences see the declared
// semantics of sg rather than the raw composite function.
struct StopGradientReplay {
  enum class Mode { kOff, kRecord, kReplay };
  Mode mode = Mode::kOff;
  std::vector<std::vector<double>> frozen;
  std::size_t cursor = 0;
};

StopGradientReplay& stop_gradient_replay();

}  // namespace detail

}  // namespace rtdlab::ad
