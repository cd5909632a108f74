#pragma once

// Brute-force references used to validate the model: the message-set
// enumerator, naive scalar-loop attention implementations, perturbation-based
// Jacobian sparsity, and exact operation counts. Everything here favours
// obviousness over speed; nothing shares code with the tensor engine's
// compute paths.

#include <cstdint>
#include <set>
#include <vector>

#include "gem2/common.hpp"
#include "gem2/model.hpp"
#include "gem2/tensor.hpp"

namespace gem2 {

// Set of order-m index tuples a target many-body has aggregated messages
// from after axial attentions on axes 1..k.
struct MessageSet {
  int order = 0;
  std::set<std::vector<int>> tuples;
};

// Literal recursion: the k-th step unions the (k-1)-step sets over all
// replacements of index position k. The closed form (free positions 1..k)
// is asserted as a property in tests, not used here.
inline MessageSet aggred_message(int k, const std::vector<int>& target, int n) {
  const int m = static_cast<int>(target.size());
  if (k < 0 || k > m) throw InputError("aggred_message: k must be in 0..m");
  MessageSet out;
  out.order = m;
  if (k == 0) {
    out.tuples.insert(target);
    return out;
  }
  for (int rep = 0; rep < n; ++rep) {
    std::vector<int> t = target;
    t[static_cast<size_t>(k - 1)] = rep;
    auto sub = aggred_message(k - 1, t, n);
    out.tuples.insert(sub.tuples.begin(), sub.tuples.end());
  }
  return out;
}

// Plain-array weights for the naive attention loops. Layout matches the
// engine's linear: w[in][out] row-major, y_j = sum_i x_i w[i][j] + b_j.
struct NaiveAxialParams {
  int c = 0, c_hi = 0, heads = 1;
  bool has_hi = false;
  bool scale_inv_sqrt_d = true;
  std::vector<double> ln_gain, ln_offset;
  std::vector<double> ln_hi_gain, ln_hi_offset;
  std::vector<double> wq, bq, wk, bk, wv, bv;
  std::vector<double> wkh, bkh, wvh, bvh;
  std::vector<double> wo, bo;
};

template <class Real>
NaiveAxialParams extract_axial_params(const ParamStore<Real>& s, const AxialAttentionP& a) {
  auto copy = [&](int idx) {
    const auto& v = s.value(idx).vec();
    return std::vector<double>(v.begin(), v.end());
  };
  NaiveAxialParams p;
  p.c = a.c;
  p.c_hi = a.c_hi;
  p.heads = a.heads;
  p.has_hi = a.has_hi;
  p.scale_inv_sqrt_d = a.scale == LogitScale::inverse_sqrt_head_dim;
  p.ln_gain = copy(a.ln_in.gain);
  p.ln_offset = copy(a.ln_in.offset);
  p.wq = copy(a.q.w);
  p.bq = copy(a.q.b);
  p.wk = copy(a.k.w);
  p.bk = copy(a.k.b);
  p.wv = copy(a.v.w);
  p.bv = copy(a.v.b);
  if (a.has_hi) {
    p.ln_hi_gain = copy(a.ln_hi.gain);
    p.ln_hi_offset = copy(a.ln_hi.offset);
    p.wkh = copy(a.kh.w);
    p.bkh = copy(a.kh.b);
    p.wvh = copy(a.vh.w);
    p.bvh = copy(a.vh.b);
  }
  p.wo = copy(a.out.w);
  p.bo = copy(a.out.b);
  return p;
}

namespace naive {

inline std::vector<double> layer_norm_rows(const std::vector<double>& x, int64_t rows, int64_t c,
                                           const std::vector<double>& gain,
                                           const std::vector<double>& offset) {
  std::vector<double> out(x.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * c;
    double mean = 0;
    for (int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0;
    for (int64_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int64_t j = 0; j < c; ++j) {
      out[static_cast<size_t>(r * c + j)] =
          (row[j] - mean) * inv * gain[static_cast<size_t>(j)] + offset[static_cast<size_t>(j)];
    }
  }
  return out;
}

inline std::vector<double> linear_rows(const std::vector<double>& x, int64_t rows, int64_t ci,
                                       const std::vector<double>& w, const std::vector<double>& b) {
  const int64_t co = static_cast<int64_t>(b.size());
  std::vector<double> out(static_cast<size_t>(rows * co));
  for (int64_t r = 0; r < rows; ++r) {
    double* y = out.data() + r * co;
    for (int64_t j = 0; j < co; ++j) y[j] = b[static_cast<size_t>(j)];
    const double* xr = x.data() + r * ci;
    for (int64_t k = 0; k < ci; ++k) {
      const double xv = xr[k];
      if (xv == 0.0) continue;
      const double* wr = w.data() + k * co;
      for (int64_t j = 0; j < co; ++j) y[j] += xv * wr[j];
    }
  }
  return out;
}

}  // namespace naive

// Axial attention with explicit index loops and scalar accumulation. Visits
// every output many-body, walks its keys along 'axis', and accumulates the
// higher-order fused keys/values exactly as defined. pair_ok, when present,
// is an N*N row-major table of (query index, key index) admissibility.
inline std::vector<double> naive_axial_attention(const std::vector<double>& z, const Shape& z_shape,
                                                 const std::vector<double>* z_hi,
                                                 const Shape& z_hi_shape, int axis,
                                                 const NaiveAxialParams& p,
                                                 const std::vector<uint8_t>* pair_ok = nullptr) {
  const int m = static_cast<int>(z_shape.size()) - 1;
  if (axis < 1 || axis > m) throw ShapeError("naive axial attention: axis out of range");
  const int64_t n = z_shape[0];
  const int64_t c = z_shape[static_cast<size_t>(m)];
  const int64_t rows = numel(z_shape) / c;
  const int k0 = axis - 1;
  const int64_t d = c / p.heads;

  const auto zn = naive::layer_norm_rows(z, rows, c, p.ln_gain, p.ln_offset);
  const auto q_all = naive::linear_rows(zn, rows, c, p.wq, p.bq);
  const auto k_all = naive::linear_rows(zn, rows, c, p.wk, p.bk);
  const auto v_all = naive::linear_rows(zn, rows, c, p.wv, p.bv);

  std::vector<double> kh_all, vh_all;
  std::vector<int64_t> st_hi;
  if (p.has_hi) {
    if (!z_hi) throw ShapeError("naive axial attention: higher-order input missing");
    const int64_t c_hi = z_hi_shape.back();
    const int64_t rows_hi = numel(z_hi_shape) / c_hi;
    const auto zhn = naive::layer_norm_rows(*z_hi, rows_hi, c_hi, p.ln_hi_gain, p.ln_hi_offset);
    kh_all = naive::linear_rows(zhn, rows_hi, c_hi, p.wkh, p.bkh);
    vh_all = naive::linear_rows(zhn, rows_hi, c_hi, p.wvh, p.bvh);
    Shape atom_axes(z_hi_shape.begin(), z_hi_shape.end() - 1);
    st_hi = contiguous_strides(atom_axes);
  }

  // row strides over the atom axes of z
  Shape atom_shape(z_shape.begin(), z_shape.end() - 1);
  const auto st = contiguous_strides(atom_shape);
  const double scale = p.scale_inv_sqrt_d ? 1.0 / std::sqrt(static_cast<double>(d)) : 1.0;

  std::vector<double> out(z.size());
  std::vector<int> tuple(static_cast<size_t>(m), 0);
  std::vector<double> logits(static_cast<size_t>(n));
  std::vector<double> alpha(static_cast<size_t>(n));
  std::vector<double> o(static_cast<size_t>(c));

  for (int64_t r = 0; r < rows; ++r) {
    // decompose the row into its index tuple
    int64_t rem = r;
    for (int a = 0; a < m; ++a) {
      tuple[static_cast<size_t>(a)] = static_cast<int>(rem / st[static_cast<size_t>(a)]);
      rem %= st[static_cast<size_t>(a)];
    }
    const int i = tuple[static_cast<size_t>(k0)];
    const int64_t row_base = r - i * st[static_cast<size_t>(k0)];

    int64_t hi_base = 0;
    if (p.has_hi) {
      for (int a = 0; a < m; ++a) {
        const size_t hi_axis = a <= k0 ? static_cast<size_t>(a) : static_cast<size_t>(a) + 1;
        hi_base += tuple[static_cast<size_t>(a)] * st_hi[hi_axis];
      }
    }

    std::fill(o.begin(), o.end(), 0.0);
    for (int h = 0; h < p.heads; ++h) {
      const int64_t t0 = h * d;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < n; ++j) {
        if (pair_ok && !(*pair_ok)[static_cast<size_t>(i) * n + j]) continue;
        const int64_t rj = row_base + j * st[static_cast<size_t>(k0)];
        const int64_t rhi = p.has_hi ? hi_base + j * st_hi[static_cast<size_t>(k0) + 1] : 0;
        double dot = 0;
        for (int64_t tch = t0; tch < t0 + d; ++tch) {
          double key = k_all[static_cast<size_t>(rj * c + tch)];
          if (p.has_hi) key += kh_all[static_cast<size_t>(rhi * c + tch)];
          dot += q_all[static_cast<size_t>(r * c + tch)] * key;
        }
        logits[static_cast<size_t>(j)] = dot * scale;
        mx = std::max(mx, logits[static_cast<size_t>(j)]);
      }
      if (!std::isfinite(mx)) throw DegenerateSliceError("naive axial attention: fully masked slice");
      double denom = 0;
      for (int64_t j = 0; j < n; ++j) {
        if (pair_ok && !(*pair_ok)[static_cast<size_t>(i) * n + j]) continue;
        denom += std::exp(logits[static_cast<size_t>(j)] - mx);
      }
      for (int64_t j = 0; j < n; ++j) {
        const bool ok = !pair_ok || (*pair_ok)[static_cast<size_t>(i) * n + j];
        alpha[static_cast<size_t>(j)] = ok ? std::exp(logits[static_cast<size_t>(j)] - mx) / denom : 0.0;
      }
      for (int64_t tch = t0; tch < t0 + d; ++tch) {
        double acc = 0;
        for (int64_t j = 0; j < n; ++j) {
          const int64_t rj = row_base + j * st[static_cast<size_t>(k0)];
          double val = v_all[static_cast<size_t>(rj * c + tch)];
          if (p.has_hi) {
            const int64_t rhi = hi_base + j * st_hi[static_cast<size_t>(k0) + 1];
            val += vh_all[static_cast<size_t>(rhi * c + tch)];
          }
          acc += alpha[static_cast<size_t>(j)] * val;
        }
        o[static_cast<size_t>(tch)] = acc;
      }
    }
    // output projection
    double* y = out.data() + r * c;
    for (int64_t j = 0; j < c; ++j) y[j] = p.bo[static_cast<size_t>(j)];
    for (int64_t k = 0; k < c; ++k) {
      const double xv = o[static_cast<size_t>(k)];
      if (xv == 0.0) continue;
      const double* wr = p.wo.data() + k * c;
      for (int64_t j = 0; j < c; ++j) y[j] += xv * wr[j];
    }
  }
  return out;
}

// Single-head attention over all order-m bodies flattened to tokens. Only a
// receptive-field and cost reference; axial attention approximates, never
// equals, this.
struct FullAttentionParams {
  int c = 0;
  bool scale_inv_sqrt_d = true;
  std::vector<double> wq, wk, wv, wo;  // [c][c], no biases
};

inline std::vector<double> full_attention_reference(const std::vector<double>& z,
                                                    const Shape& z_shape,
                                                    const FullAttentionParams& p,
                                                    int64_t token_guard = 125) {
  const int64_t c = z_shape.back();
  const int64_t tokens = numel(z_shape) / c;
  if (tokens > token_guard) {
    throw InputError("full attention refused: " + std::to_string(tokens) +
                     " tokens exceed the size guard " + std::to_string(token_guard));
  }
  const std::vector<double> zero_bias(static_cast<size_t>(c), 0.0);
  const auto q = naive::linear_rows(z, tokens, c, p.wq, zero_bias);
  const auto k = naive::linear_rows(z, tokens, c, p.wk, zero_bias);
  const auto v = naive::linear_rows(z, tokens, c, p.wv, zero_bias);
  const double scale = p.scale_inv_sqrt_d ? 1.0 / std::sqrt(static_cast<double>(c)) : 1.0;

  std::vector<double> att(static_cast<size_t>(tokens * c));
  std::vector<double> logits(static_cast<size_t>(tokens));
  for (int64_t i = 0; i < tokens; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < tokens; ++j) {
      double dot = 0;
      for (int64_t t = 0; t < c; ++t) {
        dot += q[static_cast<size_t>(i * c + t)] * k[static_cast<size_t>(j * c + t)];
      }
      logits[static_cast<size_t>(j)] = dot * scale;
      mx = std::max(mx, logits[static_cast<size_t>(j)]);
    }
    double denom = 0;
    for (int64_t j = 0; j < tokens; ++j) denom += std::exp(logits[static_cast<size_t>(j)] - mx);
    for (int64_t t = 0; t < c; ++t) {
      double acc = 0;
      for (int64_t j = 0; j < tokens; ++j) {
        acc += std::exp(logits[static_cast<size_t>(j)] - mx) / denom * v[static_cast<size_t>(j * c + t)];
      }
      att[static_cast<size_t>(i * c + t)] = acc;
    }
  }
  return naive::linear_rows(att, tokens, c, p.wo, zero_bias);
}

// Structural dependence of fn's output on each input element, probed with
// central differences of step 1e-4. dep is out-major.
struct SparsityPattern {
  Shape out_shape, in_shape;
  std::vector<uint8_t> dep;

  bool depends(int64_t out, int64_t in) const {
    return dep[static_cast<size_t>(out) * static_cast<size_t>(numel(in_shape)) +
               static_cast<size_t>(in)] != 0;
  }
};

template <class Fn>
SparsityPattern jacobian_sparsity(Fn&& fn, const Tensor<double>& x, double threshold = 1e-9,
                                  double step = 1e-4) {
  SparsityPattern pat;
  pat.in_shape = x.shape();
  const Tensor<double> base = fn(x);
  pat.out_shape = base.shape();
  const int64_t out_n = base.size();
  const int64_t in_n = x.size();
  pat.dep.assign(static_cast<size_t>(out_n * in_n), 0);
  for (int64_t i = 0; i < in_n; ++i) {
    auto vp = x.vec();
    auto vm = x.vec();
    vp[static_cast<size_t>(i)] += step;
    vm[static_cast<size_t>(i)] -= step;
    const Tensor<double> fp = fn(Tensor<double>(x.shape(), std::move(vp)));
    const Tensor<double> fm = fn(Tensor<double>(x.shape(), std::move(vm)));
    for (int64_t o = 0; o < out_n; ++o) {
      if (std::abs(fp.data()[o] - fm.data()[o]) > threshold) {
        pat.dep[static_cast<size_t>(o) * static_cast<size_t>(in_n) + static_cast<size_t>(i)] = 1;
      }
    }
  }
  return pat;
}

enum class AttnKind { axial, full };

// Exact multiply-accumulate count of the attention logits (query-key inner
// products) under this implementation: every query of the kernel meets every
// admissible key with c multiplies. Axial covers all m axes.
inline int64_t count_ops(AttnKind kind, int64_t n, int m, int64_t c) {
  if (n < 1 || m < 1 || c < 1) throw InputError("count_ops: parameters must be >= 1");
  auto ipow = [](int64_t b, int e) {
    int64_t r = 1;
    for (int i = 0; i < e; ++i) r *= b;
    return r;
  };
  if (kind == AttnKind::full) return ipow(n, 2 * m) * c;
  return static_cast<int64_t>(m) * ipow(n, m + 1) * c;
}

}  // namespace gem2
