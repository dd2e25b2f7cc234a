#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lightdarts/autodiff.hpp"

namespace lightdarts {

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;
};

// Output extent of a strided, dilated, padded window sweep.
std::size_t conv_output_size(std::size_t in, std::size_t kernel, const Conv2dOptions& opt);

// Cross-correlation of input [N,C,H,W] with kernel [Co, C/groups, kh, kw].
Var conv2d(Var input, Var kernel, const Conv2dOptions& opt = {});

enum class PoolKind { avg, max };

// Square-window pooling. Average pooling divides by the number of in-bounds
// elements only; padded cells never win a max.
Var pool2d(Var input, PoolKind kind, std::size_t window, std::size_t stride, std::size_t padding);

// out[k] = max(a[k], b[k]); the subgradient goes to `a` on ties.
Var elementwise_max(Var a, Var b);

Var relu(Var x);
Var add(Var a, Var b);
// Sum of any number of same-shape terms.
Var add_n(std::span<const Var> terms);
Var scale(Var x, double factor);
Var reshape(Var x, Shape shape);
Var sum(Var x);
// Scalar sum(x * weights) with a constant weight tensor.
Var dot_constant(Var x, const Tensor& weights);

// Row-wise over the last axis of a rank-2 tensor.
Var softmax(Var logits);
Var log_softmax(Var logits);
// Mean negative log-likelihood of `labels` under logits [N, K].
Var cross_entropy(Var logits, std::span<const int> labels);

// x [N, D] * weight^T [D, O] + bias [O].
Var linear(Var x, Var weight, Var bias);

Var concat_channels(std::span<const Var> parts);
Var slice_channels(Var x, std::size_t begin, std::size_t count);
// [N,C,H,W] -> [N,C], mean over H and W.
Var global_avg_pool(Var x);
// Every second pixel starting at (offset, offset); positions past the edge read zero.
// Output is [N,C,ceil(H/2),ceil(W/2)].
Var subsample2(Var x, std::size_t offset);
// Constant zeros on the tape.
Var zeros(Tape& tape, Shape shape);

// sum_k weights[row, k] * terms[k]; weights is [R, K] with K == terms.size().
Var weighted_sum(std::span<const Var> terms, Var weights, std::size_t row);
// sum_i weights[row, columns[i]] * terms[i]. Columns not listed contribute
// nothing and receive no gradient.
Var weighted_sum(std::span<const Var> terms, std::span<const std::size_t> columns, Var weights, std::size_t row);

struct NormStatistics {
  std::vector<double> mean;
  std::vector<double> var;
};

inline constexpr double kNormEpsilon = 1e-5;

// Per-channel normalization over (N, H, W) followed by a learned affine map.
// With `frozen` the given statistics are used as constants; otherwise batch
// statistics are used and, if `observed` is set, written there.
Var channel_norm(Var x, Var scale, Var shift, const NormStatistics* frozen = nullptr,
                 NormStatistics* observed = nullptr);

}  // namespace lightdarts
