#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "vqmir/numerics/tape.hpp"

// Differentiable ops on tape values. Matrices are row-major; "rows" of a
// tensor are everything but its trailing axis.
namespace vqmir::ops {

// Per-row selection flags (1 = selected). An empty mask selects every row.
using RowMask = std::vector<std::uint8_t>;

Var matmul(Var a, Var b);
// a · bᵀ
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// Adds a trailing-axis vector to every row.
Var add_bias(Var x, Var bias);
// Adds a non-differentiable tensor of the same shape (attention masks).
Var add_constant(Var x, const Tensor& c);
Var linear(Var x, Var weight, Var bias);

Var sum(Var x);
Var mean(Var x);

// tanh-approximated GELU.
Var gelu(Var x);
Var relu(Var x);

// Max-subtracted softmax along `axis` (negative counts from the back).
Var softmax(Var x, int axis = -1);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

Var slice_cols(Var x, std::size_t start, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var table, std::span<const int> ids);
// Mean over the selected rows; result has shape [1 x cols].
Var mean_rows(Var x, const RowMask& keep = {});

// Forward value of x, no gradient flows back.
Var stop_gradient(Var x);
// Forward value `quantized`, gradient copied unchanged to `latent`.
Var straight_through(Var latent, const Tensor& quantized);
Var dropout(Var x, double rate, std::mt19937_64& rng);

// 1-D convolution over a [length x channels] sequence with weight
// [kernel x in_channels x out_channels] and bias [out_channels].
Var conv1d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding);
// Transposed counterpart: output length (L - 1) * stride - 2 * padding + kernel.
Var conv_transpose1d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding);

// Mean over selected rows of -log softmax(logits)[target], each term scaled by
// class_weights[target] when weights are given. Throws when no row is selected.
Var cross_entropy(Var logits, std::span<const int> targets, const RowMask& mask = {},
                  std::span<const double> class_weights = {});
// Mean over elements of selected rows of the Huber penalty with threshold delta.
Var huber(Var pred, Var target, double delta, const RowMask& mask = {});
Var mse(Var a, Var b);

// Kink band used by huber when registering non-smooth loci.
inline constexpr double kHuberKinkBand = 1e-3;

}  // namespace vqmir::ops
