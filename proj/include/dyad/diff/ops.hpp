#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dyad/diff/mask.hpp"
#include "dyad/diff/tape.hpp"

namespace dyad::diff {

// Every op records its result on the tape and, when any input needs a
// gradient, a closure for the reverse sweep. Shapes are rows x cols.

template <typename T> Var matmul(Tape<T>& t, Var a, Var b);
template <typename T> Var add(Tape<T>& t, Var a, Var b);
template <typename T> Var sub(Tape<T>& t, Var a, Var b);
template <typename T> Var mul(Tape<T>& t, Var a, Var b);
/// a (n x c) + row (1 x c), broadcast over rows.
template <typename T> Var add_row(Tape<T>& t, Var a, Var row);
/// a (n x c) * row (1 x c), broadcast over rows.
template <typename T> Var mul_row(Tape<T>& t, Var a, Var row);
template <typename T> Var scale(Tape<T>& t, Var a, T factor);
template <typename T> Var add_scalar(Tape<T>& t, Var a, T value);
template <typename T> Var exp(Tape<T>& t, Var a);
template <typename T> Var gelu(Tape<T>& t, Var a);
template <typename T> Var silu(Tape<T>& t, Var a);

/// Per-row standardization (biased variance), no affine.
template <typename T> Var normalize_rows(Tape<T>& t, Var a, T eps = T(1e-5));

/// Scaled dot-product attention over `heads` column groups of q, k, v
/// (n x d each); disallowed pairs contribute exactly nothing.
template <typename T>
Var attention(Tape<T>& t, Var q, Var k, Var v, const AttentionMask& mask, std::size_t heads);

/// Rotary embedding applied to adjacent column pairs inside each head.
template <typename T>
Var rope(Tape<T>& t, Var x, std::span<const int> positions, std::size_t heads, double base = 10000.0);

template <typename T> Var concat_cols(Tape<T>& t, const std::vector<Var>& parts);
template <typename T> Var concat_rows(Tape<T>& t, const std::vector<Var>& parts);
template <typename T> Var slice_cols(Tape<T>& t, Var a, std::size_t c0, std::size_t n);
template <typename T> Var slice_rows(Tape<T>& t, Var a, std::size_t r0, std::size_t n);
/// out[r] = a[index[r]]; repeated indices are allowed.
template <typename T> Var gather_rows(Tape<T>& t, Var a, std::vector<std::size_t> index);

template <typename T> Var sum(Tape<T>& t, Var a);
template <typename T> Var mean_square(Tape<T>& t, Var a);
template <typename T> Var mse(Tape<T>& t, Var a, Var b);
/// Sum over dims of 0.5 * (mu^2 + exp(lv) - lv - 1), averaged over rows.
template <typename T> Var gaussian_kl(Tape<T>& t, Var mu, Var log_var);

}  // namespace dyad::diff
