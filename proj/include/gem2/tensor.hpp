#pragma once

// Dense multi-axis tensors with reverse-mode differentiation.
//
// A Tensor is an immutable value: shape + shared row-major payload. All
// primitives run through a Tape, which records just enough to replay the
// computation backward. Tensors are only meaningful on the tape that created
// them; a tape is single-threaded, independent tapes may run concurrently.

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <utility>

#include "gem2/common.hpp"

namespace gem2 {

// Boolean mask; true marks positions that participate (real atoms, allowed keys).
struct BoolTensor {
  Shape shape;
  std::vector<uint8_t> v;

  BoolTensor() = default;
  BoolTensor(Shape s, std::vector<uint8_t> data) : shape(std::move(s)), v(std::move(data)) {
    if (numel(shape) != static_cast<int64_t>(v.size())) {
      throw ShapeError("mask payload does not match shape " + shape_str(shape));
    }
  }
  static BoolTensor full(Shape s, bool val) {
    const auto n = static_cast<size_t>(numel(s));
    return BoolTensor(std::move(s), std::vector<uint8_t>(n, val ? 1 : 0));
  }
};

template <class Real>
class Tape;

template <class Real>
class Tensor {
 public:
  Tensor() : data_(std::make_shared<const std::vector<Real>>()), shape_{0} {}

  Tensor(Shape shape, std::vector<Real> data)
      : data_(std::make_shared<const std::vector<Real>>(std::move(data))), shape_(std::move(shape)) {
    if (numel(shape_) != static_cast<int64_t>(data_->size())) {
      throw ShapeError("payload size " + std::to_string(data_->size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) {
    const auto n = static_cast<size_t>(numel(shape));
    return Tensor(std::move(shape), std::vector<Real>(n, Real(0)));
  }

  static Tensor full(Shape shape, Real value) {
    const auto n = static_cast<size_t>(numel(shape));
    return Tensor(std::move(shape), std::vector<Real>(n, value));
  }

  static Tensor scalar_value(Real value) { return full({1}, value); }

  const Shape& shape() const { return shape_; }
  int64_t dim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t size() const { return static_cast<int64_t>(data_->size()); }
  const std::vector<Real>& vec() const { return *data_; }
  const Real* data() const { return data_->data(); }

  Real at(const std::vector<int64_t>& idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch");
    const auto st = contiguous_strides(shape_);
    int64_t off = 0;
    for (size_t i = 0; i < idx.size(); ++i) off += idx[i] * st[i];
    return (*data_)[static_cast<size_t>(off)];
  }

  Real scalar() const {
    if (size() != 1) throw ShapeError("scalar() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }

  bool tracked() const { return node_ >= 0; }
  int node() const { return node_; }

  // Structural accessor used by the tape; payload stays shared.
  Tensor with_node(int node) const {
    Tensor t = *this;
    t.node_ = node;
    return t;
  }

  Tensor untracked() const { return with_node(-1); }

  std::shared_ptr<const std::vector<Real>> payload() const { return data_; }

 private:
  std::shared_ptr<const std::vector<Real>> data_;
  Shape shape_;
  int node_ = -1;
};

// Convert between precisions (feature tensors are built in double).
template <class To, class From>
Tensor<To> cast_tensor(const Tensor<From>& t) {
  std::vector<To> out(t.vec().begin(), t.vec().end());
  return Tensor<To>(t.shape(), std::move(out));
}

template <class Real>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  size_t node_count() const { return nodes_.size(); }

  // Registers a leaf whose gradient will be available after backward().
  Tensor<Real> leaf(const Tensor<Real>& t) {
    if (!grad_enabled_) return t.untracked();
    if (t.tracked()) return t;
    const int id = new_node(t.shape(), {}, nullptr);
    return t.with_node(id);
  }

  // ---- elementwise with broadcasting ----

  Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    return binary(a, b, "add", [](Real x, Real y) { return x + y; },
                  [](Real, Real, Real g) { return g; },
                  [](Real, Real, Real g) { return g; });
  }

  Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    return binary(a, b, "sub", [](Real x, Real y) { return x - y; },
                  [](Real, Real, Real g) { return g; },
                  [](Real, Real, Real g) { return -g; });
  }

  Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    return binary(a, b, "mul", [](Real x, Real y) { return x * y; },
                  [](Real, Real y, Real g) { return g * y; },
                  [](Real x, Real, Real g) { return g * x; });
  }

  Tensor<Real> scale(const Tensor<Real>& a, Real s) {
    return unary(a, "scale", [s](Real x) { return x * s; }, [s](Real, Real, Real g) { return g * s; });
  }

  Tensor<Real> neg(const Tensor<Real>& a) { return scale(a, Real(-1)); }

  Tensor<Real> gelu(const Tensor<Real>& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return unary(a, "gelu",
                 [](Real x) {
                   const double xd = static_cast<double>(x);
                   return static_cast<Real>(0.5 * xd * (1.0 + std::erf(xd * inv_sqrt2)));
                 },
                 [](Real x, Real, Real g) {
                   const double xd = static_cast<double>(x);
                   const double phi = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
                   const double pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
                   return static_cast<Real>(static_cast<double>(g) * (phi + xd * pdf));
                 });
  }

  Tensor<Real> softplus(const Tensor<Real>& a) {
    return unary(a, "softplus",
                 [](Real x) {
                   const double xd = static_cast<double>(x);
                   return static_cast<Real>(xd > 0 ? xd + std::log1p(std::exp(-xd))
                                                   : std::log1p(std::exp(xd)));
                 },
                 [](Real x, Real, Real g) {
                   const double xd = static_cast<double>(x);
                   return static_cast<Real>(static_cast<double>(g) / (1.0 + std::exp(-xd)));
                 });
  }

  Tensor<Real> abs_val(const Tensor<Real>& a) {
    return unary(a, "abs", [](Real x) { return x < Real(0) ? -x : x; },
                 [](Real x, Real, Real g) { return x > Real(0) ? g : (x < Real(0) ? -g : Real(0)); });
  }

  // ---- shape ops ----

  Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
    if (numel(shape) != a.size()) {
      throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                       " changes element count");
    }
    Tensor<Real> out(shape, std::vector<Real>(a.vec()));
    if (!track(a)) return out;
    const Shape in_shape = a.shape();
    const int id = new_node(shape, {a.node()},
                            [](Tape& t, const std::vector<Real>& g, const BackCtx& ctx) {
                              auto& ga = t.grad_buf(ctx.parents[0]);
                              for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                            });
    return out.with_node(id);
  }

  Tensor<Real> unsqueeze(const Tensor<Real>& a, int axis) {
    Shape s = a.shape();
    if (axis < 0 || axis > static_cast<int>(s.size())) throw ShapeError("unsqueeze axis out of range");
    s.insert(s.begin() + axis, 1);
    return reshape(a, std::move(s));
  }

  // ---- reductions ----

  Tensor<Real> sum_axis(const Tensor<Real>& a, int axis) {
    check_axis(a, axis, "sum_axis");
    const Shape in = a.shape();
    Shape out_shape = in;
    out_shape.erase(out_shape.begin() + axis);
    auto out = std::vector<Real>(static_cast<size_t>(numel(out_shape)), Real(0));
    const auto st = contiguous_strides(in);
    const int64_t n = in[static_cast<size_t>(axis)];
    const int64_t ax_stride = st[static_cast<size_t>(axis)];
    // strides of the output space inside the input
    std::vector<int64_t> rs;
    for (size_t i = 0; i < in.size(); ++i)
      if (static_cast<int>(i) != axis) rs.push_back(st[i]);
    const std::vector<int64_t> zero(rs.size(), 0);
    walk2(out_shape, rs.data(), zero.data(), [&](int64_t lin, int64_t off, int64_t) {
      Real acc = 0;
      const Real* p = a.data() + off;
      for (int64_t j = 0; j < n; ++j) acc += p[j * ax_stride];
      out[static_cast<size_t>(lin)] = acc;
    });
    Tensor<Real> result(out_shape, std::move(out));
    check_finite(result, "sum_axis");
    if (!track(a)) return result;
    const int id =
        new_node(out_shape, {a.node()},
                 [in, out_shape, st, axis, n, ax_stride, rs, zero](
                     Tape& t, const std::vector<Real>& g, const BackCtx& ctx) {
                   auto& ga = t.grad_buf(ctx.parents[0]);
                   walk2(out_shape, rs.data(), zero.data(), [&](int64_t lin, int64_t off, int64_t) {
                     const Real gv = g[static_cast<size_t>(lin)];
                     Real* p = ga.data() + off;
                     for (int64_t j = 0; j < n; ++j) p[j * ax_stride] += gv;
                   });
                 });
    return result.with_node(id);
  }

  Tensor<Real> sum_all(const Tensor<Real>& a) {
    Real acc = 0;
    for (Real v : a.vec()) acc += v;
    Tensor<Real> result({1}, {acc});
    check_finite(result, "sum_all");
    if (!track(a)) return result;
    const int id = new_node({1}, {a.node()},
                            [](Tape& t, const std::vector<Real>& g, const BackCtx& ctx) {
                              auto& ga = t.grad_buf(ctx.parents[0]);
                              for (auto& v : ga) v += g[0];
                            });
    return result.with_node(id);
  }

  // Arithmetic mean over unmasked positions along 'axis'. Mask broadcasts to
  // the input shape; a slice with no unmasked position is degenerate.
  Tensor<Real> mean_pool(const Tensor<Real>& a, int axis, const BoolTensor* mask = nullptr) {
    check_axis(a, axis, "mean_pool");
    const Shape in = a.shape();
    Shape out_shape = in;
    out_shape.erase(out_shape.begin() + axis);
    const auto st = contiguous_strides(in);
    const int64_t n = in[static_cast<size_t>(axis)];
    const int64_t ax_stride = st[static_cast<size_t>(axis)];
    std::vector<int64_t> rs, ms_rest;
    std::vector<int64_t> mst;
    int64_t m_ax_stride = 0;
    if (mask) {
      if (mask->shape.size() == 1 && mask->shape[0] == n) {
        // rank-1 mask marks positions along the pooled axis
        mst.assign(in.size(), 0);
        mst[static_cast<size_t>(axis)] = 1;
      } else {
        mst = broadcast_strides(mask->shape, in);
      }
      m_ax_stride = mst[static_cast<size_t>(axis)];
    }
    for (size_t i = 0; i < in.size(); ++i) {
      if (static_cast<int>(i) == axis) continue;
      rs.push_back(st[i]);
      ms_rest.push_back(mask ? mst[i] : 0);
    }
    auto out = std::vector<Real>(static_cast<size_t>(numel(out_shape)), Real(0));
    auto counts = std::make_shared<std::vector<int64_t>>(out.size(), 0);
    const uint8_t* mv = mask ? mask->v.data() : nullptr;
    walk2(out_shape, rs.data(), ms_rest.data(), [&](int64_t lin, int64_t off, int64_t moff) {
      Real acc = 0;
      int64_t cnt = 0;
      const Real* p = a.data() + off;
      for (int64_t j = 0; j < n; ++j) {
        if (!mv || mv[moff + j * m_ax_stride]) {
          acc += p[j * ax_stride];
          ++cnt;
        }
      }
      if (cnt == 0) throw DegenerateSliceError("mean_pool: slice has no unmasked positions");
      out[static_cast<size_t>(lin)] = acc / static_cast<Real>(cnt);
      (*counts)[static_cast<size_t>(lin)] = cnt;
    });
    Tensor<Real> result(out_shape, std::move(out));
    check_finite(result, "mean_pool");
    if (!track(a)) return result;
    auto mask_copy = mask ? std::make_shared<BoolTensor>(*mask) : nullptr;
    const int id = new_node(
        out_shape, {a.node()},
        [out_shape, rs, ms_rest, n, ax_stride, m_ax_stride, counts, mask_copy](
            Tape& t, const std::vector<Real>& g, const BackCtx& ctx) {
          auto& ga = t.grad_buf(ctx.parents[0]);
          const uint8_t* m = mask_copy ? mask_copy->v.data() : nullptr;
          walk2(out_shape, rs.data(), ms_rest.data(), [&](int64_t lin, int64_t off, int64_t moff) {
            const Real gv = g[static_cast<size_t>(lin)] / static_cast<Real>((*counts)[static_cast<size_t>(lin)]);
            Real* p = ga.data() + off;
            for (int64_t j = 0; j < n; ++j) {
              if (!m || m[moff + j * m_ax_stride]) p[j * ax_stride] += gv;
            }
          });
        });
    return result.with_node(id);
  }

  // ---- neural primitives ----

  // y[..., j] = sum_i x[..., i] * w[i, j] + b[j]
  Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
    if (x.dim() < 1 || w.dim() != 2 || b.dim() != 1) {
      throw ShapeError("linear: expected x[..., c_in], w[c_in, c_out], b[c_out]; got x " +
                       shape_str(x.shape()) + ", w " + shape_str(w.shape()) + ", b " +
                       shape_str(b.shape()));
    }
    const int64_t ci = x.shape().back();
    const int64_t co = w.shape()[1];
    if (w.shape()[0] != ci || b.shape()[0] != co) {
      throw ShapeError("linear: x " + shape_str(x.shape()) + " incompatible with w " +
                       shape_str(w.shape()) + ", b " + shape_str(b.shape()));
    }
    const int64_t rows = x.size() / ci;
    Shape out_shape = x.shape();
    out_shape.back() = co;
    std::vector<Real> out(static_cast<size_t>(rows * co));
    const Real* xp = x.data();
    const Real* wp = w.data();
    const Real* bp = b.data();
    for (int64_t r = 0; r < rows; ++r) {
      Real* yrow = out.data() + r * co;
      for (int64_t j = 0; j < co; ++j) yrow[j] = bp[j];
      const Real* xrow = xp + r * ci;
      for (int64_t k = 0; k < ci; ++k) {
        const Real xv = xrow[k];
        if (xv == Real(0)) continue;
        const Real* wrow = wp + k * co;
        for (int64_t j = 0; j < co; ++j) yrow[j] += xv * wrow[j];
      }
    }
    Tensor<Real> result(out_shape, std::move(out));
    check_finite(result, "linear");
    const bool tx = track(x), tw = track(w), tb = track(b);
    if (!tx && !tw && !tb) return result;
    auto xs = x.payload();
    auto ws = w.payload();
    const int id = new_node(
        out_shape, {x.node(), w.node(), b.node()},
        [xs, ws, rows, ci, co](Tape& t, const std::vector<Real>& g, const BackCtx& ctx) {
          const Real* xp2 = xs->data();
          const Real* wp2 = ws->data();
          if (ctx.parents[0] >= 0) {
            auto& gx = t.grad_buf(ctx.parents[0]);
            for (int64_t r = 0; r < rows; ++r) {
              const Real* grow = g.data() + r * co;
              Real* gxrow = gx.data() + r * ci;
              for (int64_t k = 0; k < ci; ++k) {
                const Real* wrow = wp2 + k * co;
                Real acc = 0;
                for (int64_t j = 0; j < co; ++j) acc += grow[j] * wrow[j];
                gxrow[k] += acc;
              }
            }
          }
          if (ctx.parents[1] >= 0) {
            auto& gw = t.grad_buf(ctx.parents[1]);
            for (int64_t r = 0; r < rows; ++r) {
              const Real* grow = g.data() + r * co;
              const Real* xrow = xp2 + r * ci;
              for (int64_t k = 0; k < ci; ++k) {
                const Real xv = xrow[k];
                if (xv == Real(0)) continue;
                Real* gwrow = gw.data() + k * co;
                for (int64_t j = 0; j < co; ++j) gwrow[j] += xv * grow[j];
              }
            }
          }
          if (ctx.parents[2] >= 0) {
            auto& gb = t.grad_buf(ctx.parents[2]);
            for (int64_t r = 0; r < rows; ++r) {
              const Real* grow = g.data() + r * co;
              for (int64_t j = 0; j < co; ++j) gb[static_cast<size_t>(j)] += grow[j];
            }
          }
        });
    return result.with_node(id);
  }

  // Normalizes each last-axis slice to zero mean / unit variance, then applies
  // gain and offset. eps = 1e-5.
  Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& offset) {
    static constexpr double kEps = 1e-5;
    if (x.dim() < 1 || gain.dim() != 1 || offset.dim() != 1) {
      throw ShapeError("layer_norm: expected x[..., c], gain[c], offset[c]");
    }
    const int64_t c = x.shape().back();
    if (gain.shape()[0] != c || offset.shape()[0] != c) {
      throw ShapeError("layer_norm: x " + shape_str(x.shape()) + " incompatible with gain " +
                       shape_str(gain.shape()) + ", offset " + shape_str(offset.shape()));
    }
    const int64_t rows = x.size() / c;
    std::vector<Real> out(static_cast<size_t>(x.size()));
    auto xhat = std::make_shared<std::vector<Real>>(static_cast<size_t>(x.size()));
    auto inv_std = std::make_shared<std::vector<Real>>(static_cast<size_t>(rows));
    const Real* xp = x.data();
    const Real* gp = gain.data();
    const Real* op = offset.data();
    for (int64_t r = 0; r < rows; ++r) {
      const Real* xrow = xp + r * c;
      double mean = 0;
      for (int64_t j = 0; j < c; ++j) mean += static_cast<double>(xrow[j]);
      mean /= static_cast<double>(c);
      double var = 0;
      for (int64_t j = 0; j < c; ++j) {
        const double d = static_cast<double>(xrow[j]) - mean;
        var += d * d;
      }
      var /= static_cast<double>(c);
      const double is = 1.0 / std::sqrt(var + kEps);
      (*inv_std)[static_cast<size_t>(r)] = static_cast<Real>(is);
      Real* hrow = xhat->data() + r * c;
      Real* yrow = out.data() + r * c;
      for (int64_t j = 0; j < c; ++j) {
        const Real h = static_cast<Real>((static_cast<double>(xrow[j]) - mean) * is);
        hrow[j] = h;
        yrow[j] = h * gp[j] + op[j];
      }
    }
    Tensor<Real> result(x.shape(), std::move(out));
    check_finite(result, "layer_norm");
    const bool tx = track(x), tg = track(gain), to = track(offset);
    if (!tx && !tg && !to) return result;
    auto gs = gain.payload();
    const int id = new_node(
        x.shape(), {x.node(), gain.node(), offset.node()},
        [xhat, inv_std, gs, rows, c](Tape& t, const std::vector<Real>& g, const BackCtx& ctx) {
          const Real* gp2 = gs->data();
          if (ctx.parents[0] >= 0) {
            auto& gx = t.grad_buf(ctx.parents[0]);
            for (int64_t r = 0; r < rows; ++r) {
              const Real* grow = g.data() + r * c;
              const Real* hrow = xhat->data() + r * c;
              Real* gxrow = gx.data() + r * c;
              double s1 = 0, s2 = 0;
              for (int64_t j = 0; j < c; ++j) {
                const double gg = static_cast<double>(grow[j]) * static_cast<double>(gp2[j]);
                s1 += gg;
                s2 += gg * static_cast<double>(hrow[j]);
              }
              s1 /= static_cast<double>(c);
              s2 /= static_cast<double>(c);
              const double is = static_cast<double>((*inv_std)[static_cast<size_t>(r)]);
              for (int64_t j = 0; j < c; ++j) {
                const double gg = static_cast<double>(grow[j]) * static_cast<double>(gp2[j]);
                gxrow[j] += static_cast<Real>(is * (gg - s1 - static_cast<double>(hrow[j]) * s2));
              }
            }
          }
          if (ctx.parents[1] >= 0) {
            auto& gg = t.grad_buf(ctx.parents[1]);
            for (int64_t r = 0; r < rows; ++r) {
              const Real* grow = g.data() + r * c;
              const Real* hrow = xhat->data() + r * c;
              for (int64_t j = 0; j < c; ++j) gg[static_cast<size_t>(j)] += grow[j] * hrow[j];
            }
          }
          if (ctx.parents[2] >= 0) {
            auto& go = t.grad_buf(ctx.parents[2]);
            for (int64_t r = 0; r < rows; ++r) {
              const Real* grow = g.data() + r * c;
              for (int64_t j = 0; j < c; ++j) go[static_cast<size_t>(j)] += grow[j];
            }
          }
        });
    return result.with_node(id);
  }

  // Max-subtracted softmax along 'axis'. Masked-out entries are exactly zero;
  // a fully masked slice is degenerate.
  Tensor<Real> softmax(const Tensor<Real>& x, int axis, const BoolTensor* mask = nullptr) {
    check_axis(x, axis, "softmax");
    const Shape in = x.shape();
    const auto st = contiguous_strides(in);
    const int64_t n = in[static_cast<size_t>(axis)];
    const int64_t ax_stride = st[static_cast<size_t>(axis)];
    std::vector<int64_t> mst;
    int64_t m_ax_stride = 0;
    if (mask) {
      mst = broadcast_strides(mask->shape, in);
      m_ax_stride = mst[static_cast<size_t>(axis)];
    }
    Shape rest_shape = in;
    rest_shape.erase(rest_shape.begin() + axis);
    std::vector<int64_t> rs, ms_rest;
    for (size_t i = 0; i < in.size(); ++i) {
      if (static_cast<int>(i) == axis) continue;
      rs.push_back(st[i]);
      ms_rest.push_back(mask ? mst[i] : 0);
    }
    std::vector<Real> out(static_cast<size_t>(x.size()), Real(0));
    const Real* xp = x.data();
    const uint8_t* mv = mask ? mask->v.data() : nullptr;
    walk2(rest_shape, rs.data(), ms_rest.data(), [&](int64_t, int64_t off, int64_t moff) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < n; ++j) {
        if (mv && !mv[moff + j * m_ax_stride]) continue;
        mx = std::max(mx, static_cast<double>(xp[off + j * ax_stride]));
      }
      if (!std::isfinite(mx)) throw DegenerateSliceError("softmax: fully masked slice");
      double denom = 0;
      for (int64_t j = 0; j < n; ++j) {
        if (mv && !mv[moff + j * m_ax_stride]) continue;
        denom += std::exp(static_cast<double>(xp[off + j * ax_stride]) - mx);
      }
      for (int64_t j = 0; j < n; ++j) {
        const int64_t o = off + j * ax_stride;
        if (mv && !mv[moff + j * m_ax_stride]) {
          out[static_cast<size_t>(o)] = Real(0);
        } else {
          out[static_cast<size_t>(o)] =
              static_cast<Real>(std::exp(static_cast<double>(xp[o]) - mx) / denom);
        }
      }
    });
    Tensor<Real> result(in, std::move(out));
    check_finite(result, "softmax");
    if (!track(x)) return result;
    auto ys = result.payload();
    const int id = new_node(
        in, {x.node()},
        [ys, rest_shape, rs, ms_rest, n, ax_stride](Tape& t, const std::vector<Real>& g,
                                                    const BackCtx& ctx) {
          auto& gx = t.grad_buf(ctx.parents[0]);
          const Real* yp = ys->data();
          const std::vector<int64_t> zero(rs.size(), 0);
          walk2(rest_shape, rs.data(), zero.data(), [&](int64_t, int64_t off, int64_t) {
            double dot = 0;
            for (int64_t j = 0; j < n; ++j) {
              const int64_t o = off + j * ax_stride;
              dot += static_cast<double>(g[static_cast<size_t>(o)]) * static_cast<double>(yp[o]);
            }
            for (int64_t j = 0; j < n; ++j) {
              const int64_t o = off + j * ax_stride;
              gx[static_cast<size_t>(o)] += static_cast<Real>(
                  static_cast<double>(yp[o]) * (static_cast<double>(g[static_cast<size_t>(o)]) - dot));
            }
          });
        });
    return result.with_node(id);
  }

  // Zeroes entries with probability p during training, scaling survivors by
  // 1/(1-p). Identity at inference. Deterministic in rng_seed.
  Tensor<Real> dropout(const Tensor<Real>& x, double p, bool training, uint64_t rng_seed) {
    if (p < 0.0 || p >= 1.0) {
      throw ConfigError("dropout: probability must be in [0, 1), got " + std::to_string(p));
    }
    if (!training || p == 0.0) {
      // identity, but still a tape node so gradients flow
      if (!track(x)) return x.untracked();
      const int id = new_node(x.shape(), {x.node()},
                              [](Tape& t, const std::vector<Real>& g, const BackCtx& ctx) {
                                auto& gx = t.grad_buf(ctx.parents[0]);
                                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                              });
      return x.with_node(id);
    }
    std::mt19937_64 eng(rng_seed);
    auto keep = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(x.size()));
    const Real inv_keep = static_cast<Real>(1.0 / (1.0 - p));
    std::vector<Real> out(static_cast<size_t>(x.size()));
    for (size_t i = 0; i < out.size(); ++i) {
      const bool k = uniform01(eng) >= p;
      (*keep)[i] = k ? 1 : 0;
      out[i] = k ? x.data()[i] * inv_keep : Real(0);
    }
    Tensor<Real> result(x.shape(), std::move(out));
    check_finite(result, "dropout");
    if (!track(x)) return result;
    const int id = new_node(x.shape(), {x.node()},
                            [keep, inv_keep](Tape& t, const std::vector<Real>& g, const BackCtx& ctx) {
                              auto& gx = t.grad_buf(ctx.parents[0]);
                              for (size_t i = 0; i < g.size(); ++i) {
                                if ((*keep)[i]) gx[i] += g[i] * inv_keep;
                              }
                            });
    return result.with_node(id);
  }

  // ---- backward ----

  void backward(const Tensor<Real>& loss) {
    if (loss.size() != 1) {
      throw NumericError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (!std::isfinite(static_cast<double>(loss.scalar()))) {
      throw NumericError("backward: loss is not finite");
    }
    if (!loss.tracked()) throw NumericError("backward: loss is not on this tape");
    if (backward_done_) {
      throw NumericError("backward: called twice on the same tape without a new forward pass");
    }
    backward_done_ = true;
    grads_.clear();
    grads_.resize(nodes_.size());
    grad_buf(loss.node())[0] = Real(1);
    for (int i = loss.node(); i >= 0; --i) {
      const auto& node = nodes_[static_cast<size_t>(i)];
      if (!grads_[static_cast<size_t>(i)] || !node.backward) continue;
      BackCtx ctx{node.parents};
      node.backward(*this, *grads_[static_cast<size_t>(i)], ctx);
    }
    for (size_t i = 0; i < grads_.size(); ++i) {
      if (!grads_[i]) continue;
      for (Real v : *grads_[i]) {
        if (!std::isfinite(static_cast<double>(v))) {
          throw NumericError("backward: non-finite gradient encountered");
        }
      }
    }
  }

  bool backward_done() const { return backward_done_; }

  // Gradient of the last backward() w.r.t. a tracked tensor. A tensor the
  // loss never touched gets zeros.
  Tensor<Real> grad(const Tensor<Real>& t) const {
    if (!backward_done_) throw NumericError("grad: backward() has not run");
    if (!t.tracked() || t.node() >= static_cast<int>(nodes_.size())) {
      throw NumericError("grad: tensor is not tracked on this tape");
    }
    const auto& buf = grads_[static_cast<size_t>(t.node())];
    if (!buf) return Tensor<Real>::zeros(t.shape());
    return Tensor<Real>(t.shape(), *buf);
  }

  std::vector<Real>& grad_buf(int node) {
    auto& slot = grads_[static_cast<size_t>(node)];
    if (!slot) {
      slot = std::make_unique<std::vector<Real>>(
          static_cast<size_t>(numel(nodes_[static_cast<size_t>(node)].shape)), Real(0));
    }
    return *slot;
  }

 private:
  struct BackCtx {
    const std::vector<int>& parents;
  };
  using BackwardFn = std::function<void(Tape&, const std::vector<Real>&, const BackCtx&)>;

  struct Node {
    Shape shape;
    std::vector<int> parents;  // -1 for untracked inputs
    BackwardFn backward;
  };

  bool track(const Tensor<Real>& t) const { return grad_enabled_ && t.tracked(); }

  int new_node(Shape shape, std::vector<int> parents, BackwardFn fn) {
    if (backward_done_) {
      throw NumericError("tape: recording after backward(); start a new forward pass");
    }
    nodes_.push_back(Node{std::move(shape), std::move(parents), std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  static void check_finite(const Tensor<Real>& t, const char* op) {
    for (Real v : t.vec()) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw NumericError(std::string(op) + ": produced a non-finite value");
      }
    }
  }

  static void check_axis(const Tensor<Real>& t, int axis, const char* op) {
    if (axis < 0 || axis >= static_cast<int>(t.shape().size())) {
      throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                       " out of range for shape " + shape_str(t.shape()));
    }
  }

  template <class FwdF, class BackA, class BackB>
  Tensor<Real> binary(const Tensor<Real>& a, const Tensor<Real>& b, const char* op, FwdF fwd,
                      BackA back_a, BackB back_b) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    std::vector<Real> out(static_cast<size_t>(numel(out_shape)));
    const Real* ap = a.data();
    const Real* bp = b.data();
    walk2(out_shape, sa.data(), sb.data(), [&](int64_t lin, int64_t oa, int64_t ob) {
      out[static_cast<size_t>(lin)] = fwd(ap[oa], bp[ob]);
    });
    Tensor<Real> result(out_shape, std::move(out));
    check_finite(result, op);
    const bool ta = track(a), tb = track(b);
    if (!ta && !tb) return result;
    auto as = a.payload();
    auto bs = b.payload();
    const Shape ash = a.shape(), bsh = b.shape();
    const int id = new_node(
        out_shape, {a.node(), b.node()},
        [as, bs, ash, bsh, out_shape, sa, sb, back_a, back_b](Tape& t, const std::vector<Real>& g,
                                                              const BackCtx& ctx) {
          const Real* ap2 = as->data();
          const Real* bp2 = bs->data();
          if (ctx.parents[0] >= 0) {
            auto& ga = t.grad_buf(ctx.parents[0]);
            walk2(out_shape, sa.data(), sb.data(), [&](int64_t lin, int64_t oa, int64_t ob) {
              ga[static_cast<size_t>(oa)] += back_a(ap2[oa], bp2[ob], g[static_cast<size_t>(lin)]);
            });
          }
          if (ctx.parents[1] >= 0) {
            auto& gb = t.grad_buf(ctx.parents[1]);
            walk2(out_shape, sb.data(), sa.data(), [&](int64_t lin, int64_t ob, int64_t oa) {
              gb[static_cast<size_t>(ob)] += back_b(ap2[oa], bp2[ob], g[static_cast<size_t>(lin)]);
            });
          }
        });
    return result.with_node(id);
  }

  template <class FwdF, class BackF>
  Tensor<Real> unary(const Tensor<Real>& a, const char* op, FwdF fwd, BackF back) {
    std::vector<Real> out(static_cast<size_t>(a.size()));
    for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] = fwd(a.data()[i]);
    Tensor<Real> result(a.shape(), std::move(out));
    check_finite(result, op);
    if (!track(a)) return result;
    auto as = a.payload();
    auto ys = result.payload();
    const int id = new_node(a.shape(), {a.node()},
                            [as, ys, back](Tape& t, const std::vector<Real>& g, const BackCtx& ctx) {
                              auto& ga = t.grad_buf(ctx.parents[0]);
                              for (size_t i = 0; i < g.size(); ++i) {
                                ga[i] += back((*as)[i], (*ys)[i], g[i]);
                              }
                            });
    return result.with_node(id);
  }

  bool grad_enabled_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::vector<std::unique_ptr<std::vector<Real>>> grads_;
};

}  // namespace gem2
