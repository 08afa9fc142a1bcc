#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "todsynth/numerics/tape.hpp"

namespace todsynth {

// Mask label excluded from losses and metrics.
inline constexpr std::uint8_t kIgnoreIndex = 255;

// C = op(A)·op(B) for row-major float matrices, accumulated in double.
// A is m×k after op, B is k×n after op. With `accumulate`, C += result.
void gemm(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
          std::size_t n, std::size_t k, bool trans_a, bool trans_b, bool accumulate = false);

// Per-position -log softmax(logits)[label]; ignored positions yield 0.
std::vector<double> per_position_cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels);

namespace ops {

Var matmul(Var a, Var b);     // [m×k]·[k×n]
Var matmul_nt(Var a, Var b);  // [m×k]·[n×k]ᵀ
Var transpose(Var a);         // 2-D

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float s);
Var add_rowwise(Var a, Var bias);   // [m×n] + [n]
Var mul_rowwise(Var a, Var scale);  // [m×n] ⊙ [n]
// out[i, :] = a[i, :] + row[0, :] for every row; row is [1×n] or [n].
Var add_broadcast_row(Var a, Var row);

Var relu(Var a);
Var gelu(Var a);
Var silu(Var a);

Var sum(Var a);
Var mean(Var a);
Var mse(Var pred, Var target);

Var softmax(Var x, std::size_t axis);
// Multi-head scaled dot-product attention. q [Lq×d], k and v [Lk×d]; columns
// are split into `heads` contiguous groups. Returns [Lq×d].
Var attention(Var q, Var k, Var v, std::size_t heads);
// Row-wise RMS normalisation of [m×n] with a learned [n] gain.
Var rms_norm(Var x, Var gain, float eps = 1e-6f);
// Mean of -log softmax(logits[p])[labels[p]] over positions whose label is not
// kIgnoreIndex. logits is [P×C].
Var cross_entropy(Var logits, std::span<const std::uint8_t> labels);

Var reshape(Var a, Shape shape);
// Concatenate along the leading axis; trailing extents must agree.
Var concat(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
// out.flat[i] = a.flat[index[i]]; backward scatter-adds.
Var gather(Var a, std::vector<std::uint32_t> index, Shape out_shape);

// x [C×H×W], w [O×C×k×k], b [O] -> [O×H'×W'].
Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t pad);
// Nearest-neighbour 2x upsampling of [C×H×W].
Var upsample2x(Var x);

}  // namespace ops
}  // namespace todsynth
