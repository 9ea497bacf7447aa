#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "hyperens/tape.hpp"

// Differentiable primitives. Every op validates shapes and throws ShapeError
// naming itself on mismatch.
namespace hyperens::ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);

/// x[..., c] op v[c]
Var add_lastdim(Var x, Var v);
Var mul_lastdim(Var x, Var v);
/// x[b, ..., c] op v[b, c]: row-specific vectors broadcast over middle dims.
Var add_rows(Var x, Var v);
Var mul_rows(Var x, Var v);

/// [n,k] x [k,m] -> [n,m]
Var matmul(Var a, Var b);
/// [n,k] x [m,k]^T -> [n,m]
Var matmul_nt(Var a, Var b);

/// Row lookup: out[i] = table[index[i]].
Var gather_rows(Var table, std::span<const std::size_t> index);
/// Per-segment row mean; empty segments are zero.
Var segment_mean(Var x, std::span<const std::size_t> segment, std::size_t num_segments);
Var segment_sum(Var x, std::span<const std::size_t> segment, std::size_t num_segments);

Var relu(Var x);
Var tanh(Var x);
Var exp(Var x);
Var log(Var x);
/// log(max(x, floor)); gradient is zero where the floor is active.
Var log_clamped(Var x, double floor);
Var square(Var x);

Var sum(Var x);
Var mean(Var x);
/// [n, c] -> [n]
Var sum_lastdim(Var x);
/// [K, ...] -> [...]
Var mean_axis0(Var x);
Var reshape(Var x, Shape shape);

enum class Padding { valid, same };
/// NHWC input [b,h,w,cin], kernel [l,l,cin,cout], stride 1.
Var conv2d(Var x, Var kernel, Padding padding);

Var softmax(Var logits);
/// Per-row cross entropy -sum_c t_c log softmax(z)_c against constant targets.
Var softmax_xent(Var logits, const Tensor& targets);
/// out[i] = x[i, labels[i]]
Var pick(Var x, std::span<const std::size_t> labels);

/// One-hot of the row argmax (ties to lowest index). Not differentiable.
Var argmax_onehot(Var x);

}  // namespace hyperens::ops
