#include "dyad/diff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace dyad::diff {

// ---------------------------------------------------------------------------
// Mask

AttentionMask AttentionMask::causal(std::size_t n) {
  AttentionMask m(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j);
  return m;
}

void AttentionMask::validate() const {
  for (std::size_t i = 0; i < n_; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < n_ && !any; ++j) any = allowed(i, j);
    if (!any) throw InvalidMaskError("attention mask row " + std::to_string(i) + " allows no keys");
  }
}

bool AttentionMask::diagonal_allowed() const {
  for (std::size_t i = 0; i < n_; ++i)
    if (!allowed(i, i)) return false;
  return true;
}

bool AttentionMask::respects_time(std::span<const int> temporal_index) const {
  if (temporal_index.size() != n_) throw ShapeError("respects_time: index length mismatch");
  for (std::size_t i = 0; i < n_; ++i)
    for (std::size_t j = 0; j < n_; ++j)
      if (allowed(i, j) && temporal_index[j] > temporal_index[i]) return false;
  return true;
}

std::vector<std::vector<std::uint32_t>> AttentionMask::key_lists() const {
  std::vector<std::vector<std::uint32_t>> keys(n_);
  for (std::size_t i = 0; i < n_; ++i)
    for (std::size_t j = 0; j < n_; ++j)
      if (allowed(i, j)) keys[i].push_back(static_cast<std::uint32_t>(j));
  return keys;
}

namespace {

// Plain loop kernels. Each output element accumulates in a fixed order that
// does not depend on how many rows the operands have, so a row's result is
// identical whether it is computed alone or inside a larger batch.

// C (n x m) += A (n x k) * B (k x m)
template <typename T>
void gemm_nn(const T* A, const T* B, T* C, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    T* c = C + i * m;
    const T* a = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[p];
      const T* b = B + p * m;
      for (std::size_t j = 0; j < m; ++j) c[j] += av * b[j];
    }
  }
}

// C (n x k) += A (n x m) * B^T, B is (k x m)
template <typename T>
void gemm_nt(const T* A, const T* B, T* C, std::size_t n, std::size_t m, std::size_t k) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* a = A + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T* b = B + p * m;
      T acc = 0;
      for (std::size_t j = 0; j < m; ++j) acc += a[j] * b[j];
      C[i * k + p] += acc;
    }
  }
}

// C (k x m) += A^T * B, A is (n x k), B is (n x m)
template <typename T>
void gemm_tn(const T* A, const T* B, T* C, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* a = A + i * k;
    const T* b = B + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[p];
      T* c = C + p * m;
      for (std::size_t j = 0; j < m; ++j) c[j] += av * b[j];
    }
  }
}

template <typename T>
NdArray<T> elementwise(const NdArray<T>& a, auto&& f) {
  NdArray<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.cols() != B.rows())
    throw ShapeError("matmul: " + std::to_string(A.rows()) + "x" + std::to_string(A.cols()) +
                     " by " + std::to_string(B.rows()) + "x" + std::to_string(B.cols()));
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  NdArray<T> out(n, m);
  gemm_nn(A.data(), B.data(), out.data(), n, k, m);
  return t.record(std::move(out), t.needs_grad({a, b}), [a, b, n, k, m](Tape<T>& tp, const NdArray<T>& g) {
    if (tp.needs_grad(a)) gemm_nt(g.data(), tp.value(b).data(), tp.grad(a).data(), n, m, k);
    if (tp.needs_grad(b)) gemm_tn(tp.value(a).data(), g.data(), tp.grad(b).data(), n, k, m);
  });
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  require_shape(A.same_shape(B), "add: shape mismatch");
  NdArray<T> out = A;
  out += B;
  return t.record(std::move(out), t.needs_grad({a, b}), [a, b](Tape<T>& tp, const NdArray<T>& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

template <typename T>
Var sub(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  require_shape(A.same_shape(B), "sub: shape mismatch");
  NdArray<T> out(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] - B[i];
  return t.record(std::move(out), t.needs_grad({a, b}), [a, b](Tape<T>& tp, const NdArray<T>& g) {
    tp.accumulate(a, g);
    if (tp.needs_grad(b)) {
      auto& gb = tp.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  require_shape(A.same_shape(B), "mul: shape mismatch");
  NdArray<T> out(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * B[i];
  return t.record(std::move(out), t.needs_grad({a, b}), [a, b](Tape<T>& tp, const NdArray<T>& g) {
    if (tp.needs_grad(a)) {
      auto& ga = tp.grad(a);
      const auto& B = tp.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (tp.needs_grad(b)) {
      auto& gb = tp.grad(b);
      const auto& A = tp.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

template <typename T>
Var add_row(Tape<T>& t, Var a, Var row) {
  const auto& A = t.value(a);
  const auto& R = t.value(row);
  require_shape(R.rows() == 1 && R.cols() == A.cols(), "add_row: row must be 1 x cols");
  NdArray<T> out = A;
  for (std::size_t r = 0; r < A.rows(); ++r) {
    T* o = out.row(r);
    for (std::size_t c = 0; c < A.cols(); ++c) o[c] += R[c];
  }
  return t.record(std::move(out), t.needs_grad({a, row}), [a, row](Tape<T>& tp, const NdArray<T>& g) {
    tp.accumulate(a, g);
    if (tp.needs_grad(row)) {
      auto& gr = tp.grad(row);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gr[c] += g(r, c);
    }
  });
}

template <typename T>
Var mul_row(Tape<T>& t, Var a, Var row) {
  const auto& A = t.value(a);
  const auto& R = t.value(row);
  require_shape(R.rows() == 1 && R.cols() == A.cols(), "mul_row: row must be 1 x cols");
  NdArray<T> out = A;
  for (std::size_t r = 0; r < A.rows(); ++r) {
    T* o = out.row(r);
    for (std::size_t c = 0; c < A.cols(); ++c) o[c] *= R[c];
  }
  return t.record(std::move(out), t.needs_grad({a, row}), [a, row](Tape<T>& tp, const NdArray<T>& g) {
    const auto& A = tp.value(a);
    const auto& R = tp.value(row);
    if (tp.needs_grad(a)) {
      auto& ga = tp.grad(a);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += g(r, c) * R[c];
    }
    if (tp.needs_grad(row)) {
      auto& gr = tp.grad(row);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gr[c] += g(r, c) * A(r, c);
    }
  });
}

template <typename T>
Var scale(Tape<T>& t, Var a, T factor) {
  NdArray<T> out = elementwise(t.value(a), [factor](T x) { return x * factor; });
  return t.record(std::move(out), t.needs_grad(a), [a, factor](Tape<T>& tp, const NdArray<T>& g) {
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Var add_scalar(Tape<T>& t, Var a, T value) {
  NdArray<T> out = elementwise(t.value(a), [value](T x) { return x + value; });
  return t.record(std::move(out), t.needs_grad(a),
                  [a](Tape<T>& tp, const NdArray<T>& g) { tp.accumulate(a, g); });
}

template <typename T>
Var exp(Tape<T>& t, Var a) {
  NdArray<T> out = elementwise(t.value(a), [](T x) { return std::exp(x); });
  const Var self{t.size()};
  return t.record(std::move(out), t.needs_grad(a), [a, self](Tape<T>& tp, const NdArray<T>& g) {
    auto& ga = tp.grad(a);
    const auto& y = tp.value(self);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

template <typename T>
Var gelu(Tape<T>& t, Var a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  NdArray<T> out =
      elementwise(t.value(a), [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); });
  return t.record(std::move(out), t.needs_grad(a), [a](Tape<T>& tp, const NdArray<T>& g) {
    constexpr T inv_sqrt2pi = T(0.39894228040143267794);
    const auto& x = tp.value(a);
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T xi = x[i];
      const T cdf = T(0.5) * (T(1) + std::erf(xi * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * xi * xi);
      ga[i] += g[i] * (cdf + xi * pdf);
    }
  });
}

template <typename T>
Var silu(Tape<T>& t, Var a) {
  NdArray<T> out = elementwise(t.value(a), [](T x) { return x / (T(1) + std::exp(-x)); });
  return t.record(std::move(out), t.needs_grad(a), [a](Tape<T>& tp, const NdArray<T>& g) {
    const auto& x = tp.value(a);
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-x[i]));
      ga[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
    }
  });
}

template <typename T>
Var normalize_rows(Tape<T>& t, Var a, T eps) {
  const auto& A = t.value(a);
  const std::size_t n = A.rows(), d = A.cols();
  NdArray<T> out(n, d);
  std::vector<T> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    const T* x = A.row(r);
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += x[c];
    mean /= T(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (x[c] - mean) * (x[c] - mean);
    var /= T(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    T* o = out.row(r);
    for (std::size_t c = 0; c < d; ++c) o[c] = (x[c] - mean) * inv_std[r];
  }
  const Var y{t.size()};
  return t.record(std::move(out), t.needs_grad(a), [a, y, inv_std = std::move(inv_std)](Tape<T>& tp, const NdArray<T>& g) {
    const auto& xhat = tp.value(y);
    auto& ga = tp.grad(a);
    const std::size_t d = g.cols();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      const T* gr = g.row(r);
      const T* xr = xhat.row(r);
      T mg = 0, mgx = 0;
      for (std::size_t c = 0; c < d; ++c) {
        mg += gr[c];
        mgx += gr[c] * xr[c];
      }
      mg /= T(d);
      mgx /= T(d);
      T* o = ga.row(r);
      for (std::size_t c = 0; c < d; ++c) o[c] += inv_std[r] * (gr[c] - mg - xr[c] * mgx);
    }
  });
}

template <typename T>
Var attention(Tape<T>& t, Var q, Var k, Var v, const AttentionMask& mask, std::size_t heads) {
  const auto& Q = t.value(q);
  const auto& K = t.value(k);
  const auto& V = t.value(v);
  const std::size_t n = Q.rows(), d = Q.cols();
  require_shape(K.rows() == n && V.rows() == n && K.cols() == d && V.cols() == d,
                "attention: q, k, v must share shape");
  require_shape(heads > 0 && d % heads == 0, "attention: dim not divisible by heads");
  require_shape(mask.size() == n, "attention: mask size mismatch");
  mask.validate();
  const std::size_t dh = d / heads;
  const T inv_scale = T(1) / std::sqrt(T(dh));
  auto keys = mask.key_lists();

  // probs[h][i] holds one weight per allowed key of row i.
  std::vector<std::vector<T>> probs(heads * n);
  NdArray<T> out(n, d);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ks = keys[i];
      auto& p = probs[h * n + i];
      p.resize(ks.size());
      const T* qi = Q.row(i) + off;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t a = 0; a < ks.size(); ++a) {
        const T* kj = K.row(ks[a]) + off;
        T s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        p[a] = s * inv_scale;
        mx = std::max(mx, p[a]);
      }
      T z = 0;
      for (auto& pa : p) {
        pa = std::exp(pa - mx);
        z += pa;
      }
      for (auto& pa : p) pa /= z;
      T* o = out.row(i) + off;
      for (std::size_t a = 0; a < ks.size(); ++a) {
        const T* vj = V.row(ks[a]) + off;
        for (std::size_t c = 0; c < dh; ++c) o[c] += p[a] * vj[c];
      }
    }
  }
  return t.record(std::move(out), t.needs_grad({q, k, v}),
                  [q, k, v, heads, dh, inv_scale, keys = std::move(keys), probs = std::move(probs)](
                      Tape<T>& tp, const NdArray<T>& g) {
                    const auto& Q = tp.value(q);
                    const auto& K = tp.value(k);
                    const auto& V = tp.value(v);
                    const std::size_t n = Q.rows();
                    const bool gq_on = tp.needs_grad(q), gk_on = tp.needs_grad(k), gv_on = tp.needs_grad(v);
                    NdArray<T>* gQ = gq_on ? &tp.grad(q) : nullptr;
                    NdArray<T>* gK = gk_on ? &tp.grad(k) : nullptr;
                    NdArray<T>* gV = gv_on ? &tp.grad(v) : nullptr;
                    std::vector<T> dp;
                    for (std::size_t h = 0; h < heads; ++h) {
                      const std::size_t off = h * dh;
                      for (std::size_t i = 0; i < n; ++i) {
                        const auto& ks = keys[i];
                        const auto& p = probs[h * n + i];
                        const T* gi = g.row(i) + off;
                        dp.assign(ks.size(), T(0));
                        T dot = 0;
                        for (std::size_t a = 0; a < ks.size(); ++a) {
                          const T* vj = V.row(ks[a]) + off;
                          T s = 0;
                          for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
                          dp[a] = s;
                          dot += p[a] * s;
                          if (gV) {
                            T* gvj = gV->row(ks[a]) + off;
                            for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[a] * gi[c];
                          }
                        }
                        const T* qi = Q.row(i) + off;
                        for (std::size_t a = 0; a < ks.size(); ++a) {
                          const T ds = p[a] * (dp[a] - dot) * inv_scale;
                          if (gQ) {
                            const T* kj = K.row(ks[a]) + off;
                            T* gqi = gQ->row(i) + off;
                            for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                          }
                          if (gK) {
                            T* gkj = gK->row(ks[a]) + off;
                            for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                          }
                        }
                      }
                    }
                  });
}

template <typename T>
Var rope(Tape<T>& t, Var x, std::span<const int> positions, std::size_t heads, double base) {
  const auto& X = t.value(x);
  const std::size_t n = X.rows(), d = X.cols();
  require_shape(positions.size() == n, "rope: one position per row required");
  require_shape(heads > 0 && d % heads == 0, "rope: dim not divisible by heads");
  const std::size_t dh = d / heads;
  require_shape(dh % 2 == 0, "rope: per-head dim must be even");
  const std::size_t pairs = dh / 2;
  std::vector<T> cs(n * pairs), sn(n * pairs);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < pairs; ++i) {
      const double angle = positions[r] * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      cs[r * pairs + i] = static_cast<T>(std::cos(angle));
      sn[r * pairs + i] = static_cast<T>(std::sin(angle));
    }
  NdArray<T> out(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < pairs; ++i) {
        const std::size_t c = h * dh + 2 * i;
        const T c0 = cs[r * pairs + i], s0 = sn[r * pairs + i];
        const T a = X(r, c), b = X(r, c + 1);
        out(r, c) = a * c0 - b * s0;
        out(r, c + 1) = a * s0 + b * c0;
      }
  return t.record(std::move(out), t.needs_grad(x),
                  [x, heads, dh, pairs, cs = std::move(cs), sn = std::move(sn)](Tape<T>& tp, const NdArray<T>& g) {
                    auto& gx = tp.grad(x);
                    for (std::size_t r = 0; r < g.rows(); ++r)
                      for (std::size_t h = 0; h < heads; ++h)
                        for (std::size_t i = 0; i < pairs; ++i) {
                          const std::size_t c = h * dh + 2 * i;
                          const T c0 = cs[r * pairs + i], s0 = sn[r * pairs + i];
                          const T ga = g(r, c), gb = g(r, c + 1);
                          gx(r, c) += ga * c0 + gb * s0;
                          gx(r, c + 1) += -ga * s0 + gb * c0;
                        }
                  });
}

template <typename T>
Var concat_cols(Tape<T>& t, const std::vector<Var>& parts) {
  require_shape(!parts.empty(), "concat_cols: no inputs");
  const std::size_t n = t.value(parts[0]).rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  bool ng = false;
  for (Var p : parts) {
    require_shape(t.value(p).rows() == n, "concat_cols: row count mismatch");
    widths.push_back(t.value(p).cols());
    total += widths.back();
    ng = ng || t.needs_grad(p);
  }
  NdArray<T> out(n, total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& P = t.value(parts[k]);
    for (std::size_t r = 0; r < n; ++r) std::copy(P.row(r), P.row(r) + widths[k], out.row(r) + off);
    off += widths[k];
  }
  return t.record(std::move(out), ng, [parts, widths](Tape<T>& tp, const NdArray<T>& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (tp.needs_grad(parts[k])) {
        auto& gp = tp.grad(parts[k]);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) gp(r, c) += g(r, off + c);
      }
      off += widths[k];
    }
  });
}

template <typename T>
Var concat_rows(Tape<T>& t, const std::vector<Var>& parts) {
  require_shape(!parts.empty(), "concat_rows: no inputs");
  const std::size_t d = t.value(parts[0]).cols();
  std::size_t total = 0;
  std::vector<std::size_t> heights;
  bool ng = false;
  for (Var p : parts) {
    require_shape(t.value(p).cols() == d, "concat_rows: column count mismatch");
    heights.push_back(t.value(p).rows());
    total += heights.back();
    ng = ng || t.needs_grad(p);
  }
  NdArray<T> out(total, d);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& P = t.value(parts[k]);
    std::copy(P.data(), P.data() + P.size(), out.row(off));
    off += heights[k];
  }
  return t.record(std::move(out), ng, [parts, heights](Tape<T>& tp, const NdArray<T>& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (tp.needs_grad(parts[k])) {
        auto& gp = tp.grad(parts[k]);
        const T* src = g.row(off);
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
      }
      off += heights[k];
    }
  });
}

template <typename T>
Var slice_cols(Tape<T>& t, Var a, std::size_t c0, std::size_t n) {
  const auto& A = t.value(a);
  require_shape(c0 + n <= A.cols(), "slice_cols: out of range");
  NdArray<T> out(A.rows(), n);
  for (std::size_t r = 0; r < A.rows(); ++r) std::copy(A.row(r) + c0, A.row(r) + c0 + n, out.row(r));
  return t.record(std::move(out), t.needs_grad(a), [a, c0, n](Tape<T>& tp, const NdArray<T>& g) {
    auto& ga = tp.grad(a);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < n; ++c) ga(r, c0 + c) += g(r, c);
  });
}

template <typename T>
Var slice_rows(Tape<T>& t, Var a, std::size_t r0, std::size_t n) {
  NdArray<T> out = t.value(a).slice_rows(r0, n);
  return t.record(std::move(out), t.needs_grad(a), [a, r0](Tape<T>& tp, const NdArray<T>& g) {
    auto& ga = tp.grad(a);
    T* dst = ga.row(r0);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

template <typename T>
Var gather_rows(Tape<T>& t, Var a, std::vector<std::size_t> index) {
  const auto& A = t.value(a);
  NdArray<T> out(index.size(), A.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    require_shape(index[r] < A.rows(), "gather_rows: index out of range");
    std::copy(A.row(index[r]), A.row(index[r]) + A.cols(), out.row(r));
  }
  return t.record(std::move(out), t.needs_grad(a), [a, index = std::move(index)](Tape<T>& tp, const NdArray<T>& g) {
    auto& ga = tp.grad(a);
    for (std::size_t r = 0; r < index.size(); ++r) {
      T* dst = ga.row(index[r]);
      const T* src = g.row(r);
      for (std::size_t c = 0; c < g.cols(); ++c) dst[c] += src[c];
    }
  });
}

template <typename T>
Var sum(Tape<T>& t, Var a) {
  const auto& A = t.value(a);
  T s = 0;
  for (T x : A.values()) s += x;
  return t.record(NdArray<T>(1, 1, s), t.needs_grad(a), [a](Tape<T>& tp, const NdArray<T>& g) {
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
  });
}

template <typename T>
Var mean_square(Tape<T>& t, Var a) {
  const auto& A = t.value(a);
  require_shape(A.size() > 0, "mean_square: empty input");
  T s = 0;
  for (T x : A.values()) s += x * x;
  const T inv_n = T(1) / T(A.size());
  return t.record(NdArray<T>(1, 1, s * inv_n), t.needs_grad(a), [a, inv_n](Tape<T>& tp, const NdArray<T>& g) {
    auto& ga = tp.grad(a);
    const auto& A = tp.value(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * T(2) * A[i] * inv_n;
  });
}

template <typename T>
Var mse(Tape<T>& t, Var a, Var b) {
  return mean_square(t, sub(t, a, b));
}

template <typename T>
Var gaussian_kl(Tape<T>& t, Var mu, Var log_var) {
  const auto& M = t.value(mu);
  const auto& L = t.value(log_var);
  require_shape(M.same_shape(L) && M.rows() > 0, "gaussian_kl: mu/log_var shape mismatch");
  T s = 0;
  for (std::size_t i = 0; i < M.size(); ++i) s += T(0.5) * (M[i] * M[i] + std::exp(L[i]) - L[i] - T(1));
  const T inv_rows = T(1) / T(M.rows());
  return t.record(NdArray<T>(1, 1, s * inv_rows), t.needs_grad({mu, log_var}),
                  [mu, log_var, inv_rows](Tape<T>& tp, const NdArray<T>& g) {
                    const auto& M = tp.value(mu);
                    const auto& L = tp.value(log_var);
                    const T c = g[0] * inv_rows;
                    if (tp.needs_grad(mu)) {
                      auto& gm = tp.grad(mu);
                      for (std::size_t i = 0; i < M.size(); ++i) gm[i] += c * M[i];
                    }
                    if (tp.needs_grad(log_var)) {
                      auto& gl = tp.grad(log_var);
                      for (std::size_t i = 0; i < L.size(); ++i) gl[i] += c * T(0.5) * (std::exp(L[i]) - T(1));
                    }
                  });
}

#define DYAD_INSTANTIATE_OPS(T)                                                             \
  template Var matmul<T>(Tape<T>&, Var, Var);                                               \
  template Var add<T>(Tape<T>&, Var, Var);                                                  \
  template Var sub<T>(Tape<T>&, Var, Var);                                                  \
  template Var mul<T>(Tape<T>&, Var, Var);                                                  \
  template Var add_row<T>(Tape<T>&, Var, Var);                                              \
  template Var mul_row<T>(Tape<T>&, Var, Var);                                              \
  template Var scale<T>(Tape<T>&, Var, T);                                                  \
  template Var add_scalar<T>(Tape<T>&, Var, T);                                             \
  template Var exp<T>(Tape<T>&, Var);                                                       \
  template Var gelu<T>(Tape<T>&, Var);                                                      \
  template Var silu<T>(Tape<T>&, Var);                                                      \
  template Var normalize_rows<T>(Tape<T>&, Var, T);                                         \
  template Var attention<T>(Tape<T>&, Var, Var, Var, const AttentionMask&, std::size_t);    \
  template Var rope<T>(Tape<T>&, Var, std::span<const int>, std::size_t, double);           \
  template Var concat_cols<T>(Tape<T>&, const std::vector<Var>&);                           \
  template Var concat_rows<T>(Tape<T>&, const std::vector<Var>&);                           \
  template Var slice_cols<T>(Tape<T>&, Var, std::size_t, std::size_t);                      \
  template Var slice_rows<T>(Tape<T>&, Var, std::size_t, std::size_t);                      \
  template Var gather_rows<T>(Tape<T>&, Var, std::vector<std::size_t>);                     \
  template Var sum<T>(Tape<T>&, Var);                                                       \
  template Var mean_square<T>(Tape<T>&, Var);                                               \
  template Var mse<T>(Tape<T>&, Var, Var);                                                  \
  template Var gaussian_kl<T>(Tape<T>&, Var, Var);

DYAD_INSTANTIATE_OPS(float)
DYAD_INSTANTIATE_OPS(double)

}  // namespace dyad::diff
