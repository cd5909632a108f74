#pragma once

// The GEM-2 network. Representations of order m live in tensors with m atom
// axes plus a channel axis. Each block runs one track per updated order;
// a track mixes in the lower order (outer product or per-index-drop sums),
// attends along every atom axis with keys/values fused from the next order
// up, and finishes with a feed-forward residual. Atom representations are
// mean-pooled and fed to a small MLP for the scalar prediction.

#include <array>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gem2/common.hpp"
#include "gem2/featurize.hpp"
#include "gem2/tensor.hpp"

namespace gem2 {

enum class LogitScale { none, inverse_sqrt_head_dim };

struct ModelConfig {
  int L = 12;
  int M = 2;  // highest updated order; order M+1 enters as static context
  std::array<int, 3> c{256, 256, 256};
  std::array<int, 3> n_heads{8, 8, 8};
  std::array<double, 3> p_drop{0.05, 0.05, 0.05};
  int ff_expansion = 4;
  LogitScale logit_scale = LogitScale::inverse_sqrt_head_dim;
  std::optional<int> long_range_level;
  int c_outer = 32;
  std::array<int, 3> feat_widths{0, 0, 0};  // input widths of X1, X2, X3
  uint64_t init_seed = 1;

  // orders that get an embedding: 1..M and the context order when features exist
  int embedded_orders() const { return std::min(M + 1, 3); }

  void validate() const {
    if (L < 1) throw ConfigError("model: L must be >= 1");
    if (M < 1 || M > 3) throw ConfigError("model: M must be in 1..3");
    for (int m = 1; m <= embedded_orders(); ++m) {
      if (c[static_cast<size_t>(m - 1)] < 1) throw ConfigError("model: c must be positive");
      if (feat_widths[static_cast<size_t>(m - 1)] < 1) {
        throw ConfigError("model: feature width for order " + std::to_string(m) + " is unset");
      }
      if (p_drop[static_cast<size_t>(m - 1)] < 0 || p_drop[static_cast<size_t>(m - 1)] >= 1) {
        throw ConfigError("model: dropout must be in [0, 1)");
      }
    }
    for (int m = 1; m <= M; ++m) {
      const int cm = c[static_cast<size_t>(m - 1)];
      const int h = n_heads[static_cast<size_t>(m - 1)];
      if (h < 1 || cm % h != 0) {
        throw ConfigError("model: c_" + std::to_string(m) + "=" + std::to_string(cm) +
                          " not divisible by n_heads=" + std::to_string(h));
      }
    }
    if (ff_expansion < 1) throw ConfigError("model: ff_expansion must be >= 1");
    if (c_outer < 1) throw ConfigError("model: c_outer must be >= 1");
    if (long_range_level && *long_range_level < 1) {
      throw ConfigError("model: long_range_level must be >= 1");
    }
  }
};

// Named parameter tensors in deterministic registration order.
template <class Real>
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed) : eng_(seed) {}

  int add_weight(const std::string& name, int64_t fan_in, int64_t fan_out) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<Real> v(static_cast<size_t>(fan_in * fan_out));
    for (auto& x : v) x = static_cast<Real>((2.0 * uniform01(eng_) - 1.0) * a);
    return add(name, Tensor<Real>({fan_in, fan_out}, std::move(v)));
  }

  int add_constant(const std::string& name, Shape shape, Real value) {
    return add(name, Tensor<Real>::full(std::move(shape), value));
  }

  int add(const std::string& name, Tensor<Real> value) {
    for (const auto& n : names_) {
      if (n == name) throw ConfigError("duplicate parameter name '" + name + "'");
    }
    names_.push_back(name);
    values_.push_back(std::move(value));
    return static_cast<int>(values_.size()) - 1;
  }

  int size() const { return static_cast<int>(values_.size()); }
  const std::string& name(int i) const { return names_[static_cast<size_t>(i)]; }
  const Tensor<Real>& value(int i) const { return values_[static_cast<size_t>(i)]; }

  void set_value(int i, Tensor<Real> v) {
    if (v.shape() != values_[static_cast<size_t>(i)].shape()) {
      throw ShapeError("parameter '" + names_[static_cast<size_t>(i)] + "': cannot replace " +
                       shape_str(values_[static_cast<size_t>(i)].shape()) + " with " +
                       shape_str(v.shape()));
    }
    values_[static_cast<size_t>(i)] = std::move(v);
  }

  int index_of(const std::string& name) const {
    for (int i = 0; i < size(); ++i) {
      if (names_[static_cast<size_t>(i)] == name) return i;
    }
    return -1;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<Real>> values_;
  std::mt19937_64 eng_;
};

// Per-tape view of the parameters (leaves when gradients are on).
template <class Real>
struct BoundParams {
  std::vector<Tensor<Real>> t;
  const Tensor<Real>& operator[](int i) const { return t[static_cast<size_t>(i)]; }
};

template <class Real>
BoundParams<Real> bind_params(Tape<Real>& tape, const ParamStore<Real>& store) {
  BoundParams<Real> b;
  b.t.reserve(static_cast<size_t>(store.size()));
  for (int i = 0; i < store.size(); ++i) b.t.push_back(tape.leaf(store.value(i)));
  return b;
}

// Deterministic per-call dropout seeds derived from one base seed.
class SeedStream {
 public:
  explicit SeedStream(uint64_t base) : base_(base) {}
  uint64_t next() { return mix_seed(base_, ++n_); }

 private:
  uint64_t base_;
  uint64_t n_ = 0;
};

struct LinearP {
  int w = -1, b = -1;
  int in = 0, out = 0;
};

struct NormP {
  int gain = -1, offset = -1;
  int c = 0;
};

template <class Real>
LinearP make_linear(ParamStore<Real>& s, const std::string& prefix, int ci, int co) {
  LinearP l;
  l.in = ci;
  l.out = co;
  l.w = s.add_weight(prefix + ".weight", ci, co);
  l.b = s.add_constant(prefix + ".bias", {co}, Real(0));
  return l;
}

template <class Real>
NormP make_norm(ParamStore<Real>& s, const std::string& prefix, int c) {
  NormP n;
  n.c = c;
  n.gain = s.add_constant(prefix + ".gain", {c}, Real(1));
  n.offset = s.add_constant(prefix + ".offset", {c}, Real(0));
  return n;
}

template <class Real>
Tensor<Real> apply_linear(Tape<Real>& t, const BoundParams<Real>& b, const LinearP& l,
                          const Tensor<Real>& x) {
  return t.linear(x, b[l.w], b[l.b]);
}

template <class Real>
Tensor<Real> apply_norm(Tape<Real>& t, const BoundParams<Real>& b, const NormP& n,
                        const Tensor<Real>& x) {
  return t.layer_norm(x, b[n.gain], b[n.offset]);
}

// Recorded attention rows for inspection; filters select what gets kept.
struct AttentionTrace {
  std::optional<int> block, order, axis;
  struct Entry {
    int block = 0, order = 0, axis = 0, heads = 0;
    Shape shape;  // [atom axes..., j, heads]
    std::vector<double> alpha;
  };
  std::vector<Entry> entries;

  bool wants(int b, int o, int a) const {
    return (!block || *block == b) && (!order || *order == o) && (!axis || *axis == a);
  }
};

struct TraceCtx {
  AttentionTrace* sink = nullptr;
  int block = 0;
  int order = 0;
};

// Attention along one atom axis of an order-m tensor. Queries come from the
// axis entries; keys and values sum the order-m entry at the key index with
// the order-(m+1) entry formed by inserting the key index next to the axis.
struct AxialAttentionP {
  NormP ln_in, ln_hi;
  LinearP q, k, v, kh, vh, out;
  int c = 0, c_hi = 0, heads = 0;
  bool has_hi = false;
  LogitScale scale = LogitScale::inverse_sqrt_head_dim;
};

template <class Real>
AxialAttentionP make_axial_attention(ParamStore<Real>& s, const std::string& prefix, int c,
                                     int c_hi, int heads, LogitScale scale) {
  if (heads < 1 || c % heads != 0) {
    throw ConfigError(prefix + ": width " + std::to_string(c) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  AxialAttentionP a;
  a.c = c;
  a.c_hi = c_hi;
  a.heads = heads;
  a.has_hi = c_hi > 0;
  a.scale = scale;
  a.ln_in = make_norm(s, prefix + ".ln", c);
  a.q = make_linear(s, prefix + ".q", c, c);
  a.k = make_linear(s, prefix + ".k", c, c);
  a.v = make_linear(s, prefix + ".v", c, c);
  if (a.has_hi) {
    a.ln_hi = make_norm(s, prefix + ".ln_hi", c_hi);
    a.kh = make_linear(s, prefix + ".k_hi", c_hi, c);
    a.vh = make_linear(s, prefix + ".v_hi", c_hi, c);
  }
  a.out = make_linear(s, prefix + ".out", c, c);
  return a;
}

template <class Real>
Tensor<Real> apply_axial_attention(Tape<Real>& t, const BoundParams<Real>& b,
                                   const AxialAttentionP& p, const Tensor<Real>& z,
                                   const std::type_identity_t<Tensor<Real>>* z_hi, int axis,
                                   const BoolTensor* key_mask = nullptr,
                                   const TraceCtx& trace = {}) {
  const int m = static_cast<int>(z.dim()) - 1;
  if (axis < 1 || axis > m) {
    throw ShapeError("axial attention: axis " + std::to_string(axis) + " out of range for order " +
                     std::to_string(m));
  }
  if (z.shape().back() != p.c) {
    throw ShapeError("axial attention: channel width " + std::to_string(z.shape().back()) +
                     " does not match module width " + std::to_string(p.c));
  }
  if (p.has_hi) {
    if (!z_hi) throw ShapeError("axial attention: module expects a higher-order input");
    if (z_hi->dim() != z.dim() + 1) {
      throw ShapeError("axial attention: higher-order input must have exactly one more atom axis, got " +
                       shape_str(z_hi->shape()) + " vs " + shape_str(z.shape()));
    }
  }
  const int k0 = axis - 1;
  const int d = p.c / p.heads;

  auto zn = apply_norm(t, b, p.ln_in, z);
  auto split_heads = [&](Tensor<Real> x) {
    Shape s = x.shape();
    s.back() = p.heads;
    s.push_back(d);
    return t.reshape(x, std::move(s));
  };
  auto qh = split_heads(apply_linear(t, b, p.q, zn));   // [A..., h, d]
  auto kh = split_heads(apply_linear(t, b, p.k, zn));
  auto vh = split_heads(apply_linear(t, b, p.v, zn));

  auto qx = t.unsqueeze(qh, k0 + 1);  // add key axis
  auto kx = t.unsqueeze(kh, k0);      // original axis becomes the key axis
  auto vx = t.unsqueeze(vh, k0);
  Tensor<Real> keys = kx, values = vx;
  if (p.has_hi) {
    auto zhn = apply_norm(t, b, p.ln_hi, *z_hi);
    auto khh = split_heads(apply_linear(t, b, p.kh, zhn));  // axes (k0, k0+1) are (i, j)
    auto vhh = split_heads(apply_linear(t, b, p.vh, zhn));
    keys = t.add(kx, khh);
    values = t.add(vx, vhh);
  }

  auto logits = t.sum_axis(t.mul(qx, keys), static_cast<int>(z.dim()) + 1);  // drop d axis
  if (p.scale == LogitScale::inverse_sqrt_head_dim) {
    logits = t.scale(logits, static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d))));
  }
  auto alpha = t.softmax(logits, k0 + 1, key_mask);
  if (trace.sink && trace.sink->wants(trace.block, trace.order, axis)) {
    AttentionTrace::Entry e;
    e.block = trace.block;
    e.order = trace.order;
    e.axis = axis;
    e.heads = p.heads;
    e.shape = alpha.shape();
    e.alpha.assign(alpha.vec().begin(), alpha.vec().end());
    trace.sink->entries.push_back(std::move(e));
  }
  auto weighted = t.mul(t.unsqueeze(alpha, static_cast<int>(alpha.dim())), values);
  auto o = t.sum_axis(weighted, k0 + 1);  // [A..., h, d]
  Shape merged = z.shape();
  auto oc = t.reshape(o, std::move(merged));
  return apply_linear(t, b, p.out, oc);
}

// Order 1 -> 2: outer product of two narrow projections, flattened and
// projected to the pair width.
struct OuterLow2HighP {
  NormP ln;
  LinearP left, right, proj;
  int c_outer = 0;
};

template <class Real>
OuterLow2HighP make_outer_low2high(ParamStore<Real>& s, const std::string& prefix, int c_in,
                                   int c_outer, int c_out) {
  OuterLow2HighP o;
  o.c_outer = c_outer;
  o.ln = make_norm(s, prefix + ".ln", c_in);
  o.left = make_linear(s, prefix + ".left", c_in, c_outer);
  o.right = make_linear(s, prefix + ".right", c_in, c_outer);
  o.proj = make_linear(s, prefix + ".proj", c_outer * c_outer, c_out);
  return o;
}

template <class Real>
Tensor<Real> apply_outer_low2high(Tape<Real>& t, const BoundParams<Real>& b,
                                  const OuterLow2HighP& p, const Tensor<Real>& z1) {
  if (z1.dim() != 2) throw ShapeError("outer low2high expects [N, c], got " + shape_str(z1.shape()));
  const int64_t n = z1.shape()[0];
  auto zn = apply_norm(t, b, p.ln, z1);
  auto a = apply_linear(t, b, p.left, zn);   // [N, co]
  auto c = apply_linear(t, b, p.right, zn);  // [N, co]
  auto ax = t.unsqueeze(t.unsqueeze(a, 1), 3);  // [N, 1, co, 1]
  auto cx = t.unsqueeze(t.unsqueeze(c, 0), 2);  // [1, N, 1, co]
  auto outer = t.mul(ax, cx);                   // [N, N, co, co]
  auto flat = t.reshape(outer, {n, n, static_cast<int64_t>(p.c_outer) * p.c_outer});
  return apply_linear(t, b, p.proj, flat);
}

// Order m-1 -> m for m > 2: one projection per dropped index position,
// summed, then activation and a final projection.
struct AddLow2HighP {
  NormP ln;
  std::vector<LinearP> drops;
  LinearP after;
  int order = 0;
};

template <class Real>
AddLow2HighP make_add_low2high(ParamStore<Real>& s, const std::string& prefix, int order, int c_in,
                               int c_out) {
  if (order <= 2) throw ConfigError("additive low2high requires order > 2");
  AddLow2HighP a;
  a.order = order;
  a.ln = make_norm(s, prefix + ".ln", c_in);
  for (int k = 0; k < order; ++k) {
    a.drops.push_back(make_linear(s, prefix + ".drop" + std::to_string(k + 1), c_in, c_out));
  }
  a.after = make_linear(s, prefix + ".after", c_out, c_out);
  return a;
}

template <class Real>
Tensor<Real> apply_add_low2high(Tape<Real>& t, const BoundParams<Real>& b, const AddLow2HighP& p,
                                const Tensor<Real>& z_prev) {
  if (z_prev.dim() != p.order) {
    throw ShapeError("additive low2high: expected order " + std::to_string(p.order - 1) +
                     " input, got " + shape_str(z_prev.shape()));
  }
  auto zn = apply_norm(t, b, p.ln, z_prev);
  Tensor<Real> acc;
  for (int k = 0; k < p.order; ++k) {
    // the k-th term supplies the entry with index position k dropped
    auto lifted = t.unsqueeze(apply_linear(t, b, p.drops[static_cast<size_t>(k)], zn), k);
    acc = k == 0 ? lifted : t.add(acc, lifted);
  }
  return apply_linear(t, b, p.after, t.gelu(acc));
}

struct FeedForwardP {
  NormP ln;
  LinearP up, down;
};

template <class Real>
FeedForwardP make_feed_forward(ParamStore<Real>& s, const std::string& prefix, int c, int expansion) {
  FeedForwardP f;
  f.ln = make_norm(s, prefix + ".ln", c);
  f.up = make_linear(s, prefix + ".up", c, c * expansion);
  f.down = make_linear(s, prefix + ".down", c * expansion, c);
  return f;
}

template <class Real>
Tensor<Real> apply_feed_forward(Tape<Real>& t, const BoundParams<Real>& b, const FeedForwardP& p,
                                const Tensor<Real>& z) {
  return apply_linear(t, b, p.down, t.gelu(apply_linear(t, b, p.up, apply_norm(t, b, p.ln, z))));
}

struct TrackP {
  int order = 0;
  std::optional<OuterLow2HighP> outer;
  std::optional<AddLow2HighP> addl2h;
  std::vector<AxialAttentionP> attn;  // one per axis 1..order
  FeedForwardP ff;
};

struct EmbedP {
  LinearP proj;
  NormP norm;
};

struct HeadP {
  LinearP h1, h2, out;
};

template <class Real>
struct RepresentationSet {
  std::vector<Tensor<Real>> z;          // z[m-1], m = 1..M
  std::optional<Tensor<Real>> z_ctx;    // embedded order M+1, never updated
};

template <class Real>
class Gem2Model {
 public:
  explicit Gem2Model(const ModelConfig& cfg) : cfg_(cfg), store_(cfg.init_seed) {
    cfg_.validate();
    for (int o = 1; o <= cfg_.embedded_orders(); ++o) {
      EmbedP e;
      const std::string prefix = "embed" + std::to_string(o);
      e.proj = make_linear(store_, prefix + ".proj", cfg_.feat_widths[static_cast<size_t>(o - 1)],
                           cfg_.c[static_cast<size_t>(o - 1)]);
      e.norm = make_norm(store_, prefix + ".norm", cfg_.c[static_cast<size_t>(o - 1)]);
      embeds_.push_back(e);
    }
    for (int l = 0; l < cfg_.L; ++l) {
      std::vector<TrackP> tracks;
      for (int m = 1; m <= cfg_.M; ++m) {
        tracks.push_back(make_track(l, m));
      }
      blocks_.push_back(std::move(tracks));
    }
    const int c1 = cfg_.c[0];
    head_.h1 = make_linear(store_, "head.h1", c1, c1);
    head_.h2 = make_linear(store_, "head.h2", c1, std::max(1, c1 / 2));
    head_.out = make_linear(store_, "head.out", std::max(1, c1 / 2), 1);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<Real>& params() { return store_; }
  const ParamStore<Real>& params() const { return store_; }
  const std::vector<std::vector<TrackP>>& blocks() const { return blocks_; }

  BoundParams<Real> bind(Tape<Real>& tape) const { return bind_params(tape, store_); }

  struct ForwardOptions {
    bool training = false;
    uint64_t dropout_seed = 0;
    AttentionTrace* trace = nullptr;
    std::optional<int> long_range_override;
  };

  // Alg: embed every order, dropout, layer norm.
  RepresentationSet<Real> embed(Tape<Real>& t, const BoundParams<Real>& b,
                                const FeatureSet<Real>& f, bool training, SeedStream& seeds) const {
    check_features(f);
    RepresentationSet<Real> reps;
    const std::array<const Tensor<Real>*, 3> xs{&f.x1, &f.x2, &f.x3};
    for (int o = 1; o <= cfg_.embedded_orders(); ++o) {
      const EmbedP& e = embeds_[static_cast<size_t>(o - 1)];
      auto h = apply_linear(t, b, e.proj, *xs[static_cast<size_t>(o - 1)]);
      h = t.dropout(h, cfg_.p_drop[static_cast<size_t>(o - 1)], training, seeds.next());
      h = apply_norm(t, b, e.norm, h);
      if (o <= cfg_.M) {
        reps.z.push_back(std::move(h));
      } else {
        reps.z_ctx = std::move(h);
      }
    }
    return reps;
  }

  // Residual composition of one track: low2high, one attention per axis in
  // ascending order, then feed-forward.
  Tensor<Real> apply_track(Tape<Real>& t, const BoundParams<Real>& b, const TrackP& track,
                           const Tensor<Real>* z_lower, const Tensor<Real>& z_m,
                           const Tensor<Real>* z_hi, const FeatureSet<Real>& f,
                           std::optional<int> level, bool training, SeedStream& seeds,
                           const TraceCtx& trace) const {
    const int m = track.order;
    const double p = cfg_.p_drop[static_cast<size_t>(m - 1)];
    Tensor<Real> zh = z_m;
    if (track.outer) {
      auto o = apply_outer_low2high(t, b, *track.outer, *z_lower);
      zh = t.add(zh, t.dropout(o, p, training, seeds.next()));
    } else if (track.addl2h) {
      auto o = apply_add_low2high(t, b, *track.addl2h, *z_lower);
      zh = t.add(zh, t.dropout(o, p, training, seeds.next()));
    }
    for (int a = 1; a <= m; ++a) {
      const auto mask = key_mask_for(f, m, a, level);
      auto o = apply_axial_attention(t, b, track.attn[static_cast<size_t>(a - 1)], zh, z_hi, a,
                                     mask ? &*mask : nullptr, trace);
      zh = t.add(zh, t.dropout(o, p, training, seeds.next()));
    }
    auto ff = apply_feed_forward(t, b, track.ff, zh);
    return t.add(zh, t.dropout(ff, p, training, seeds.next()));
  }

  // Tracks run in ascending order; track m sees the already-updated order
  // m-1 and the pre-block order m+1. The context tensor is never touched.
  void apply_block(Tape<Real>& t, const BoundParams<Real>& b, int block_index,
                   RepresentationSet<Real>& reps, const FeatureSet<Real>& f,
                   std::optional<int> level, bool training, SeedStream& seeds,
                   AttentionTrace* trace) const {
    const auto& tracks = blocks_[static_cast<size_t>(block_index)];
    const std::vector<Tensor<Real>> pre = reps.z;
    for (int m = 1; m <= cfg_.M; ++m) {
      const Tensor<Real>* z_lower = m >= 2 ? &reps.z[static_cast<size_t>(m - 2)] : nullptr;
      const Tensor<Real>* z_hi = nullptr;
      if (m < cfg_.M) {
        z_hi = &pre[static_cast<size_t>(m)];
      } else if (reps.z_ctx) {
        z_hi = &*reps.z_ctx;
      }
      TraceCtx tc{trace, block_index, m};
      reps.z[static_cast<size_t>(m - 1)] =
          apply_track(t, b, tracks[static_cast<size_t>(m - 1)], z_lower,
                      reps.z[static_cast<size_t>(m - 1)], z_hi, f, level, training, seeds, tc);
    }
  }

  Tensor<Real> forward(Tape<Real>& t, const BoundParams<Real>& b, const FeatureSet<Real>& f,
                       const ForwardOptions& opts = {}) const {
    SeedStream seeds(opts.dropout_seed);
    const std::optional<int> level =
        opts.long_range_override ? opts.long_range_override : cfg_.long_range_level;
    auto reps = embed(t, b, f, opts.training, seeds);
    for (int l = 0; l < cfg_.L; ++l) {
      apply_block(t, b, l, reps, f, level, opts.training, seeds, opts.trace);
    }
    auto pooled = t.mean_pool(reps.z[0], 0, &f.atom_mask);      // [c1]
    auto h = t.gelu(apply_linear(t, b, head_.h1, pooled));
    h = t.gelu(apply_linear(t, b, head_.h2, h));
    return apply_linear(t, b, head_.out, h);  // [1]
  }

  // Convenience: run a gradient-free forward pass on the stored parameters.
  Real predict(const FeatureSet<Real>& f, std::optional<int> long_range_override = {}) const {
    Tape<Real> tape(false);
    auto b = bind(tape);
    ForwardOptions opts;
    opts.long_range_override = long_range_override;
    return forward(tape, b, f, opts).scalar();
  }

  // Attention row for one query many-body: per-head and head-averaged
  // weights over the key index.
  struct AttentionWeights {
    std::vector<std::vector<double>> per_head;  // [heads][N]
    std::vector<double> averaged;               // [N]
  };

  AttentionWeights attention_weights(const FeatureSet<Real>& f, const std::vector<int>& query,
                                     int block, int axis) const {
    const int order = static_cast<int>(query.size());
    if (order < 1 || order > cfg_.M) {
      throw InputError("attention query expects 1.." + std::to_string(cfg_.M) + " indices, got " +
                       std::to_string(order));
    }
    if (block < 0 || block >= cfg_.L) throw InputError("block index out of range");
    if (axis < 1 || axis > order) throw InputError("axis out of range for order " + std::to_string(order));
    for (int idx : query) {
      if (idx < 0 || idx >= f.n) throw InputError("query atom index out of range");
    }
    AttentionTrace trace;
    trace.block = block;
    trace.order = order;
    trace.axis = axis;
    Tape<Real> tape(false);
    auto b = bind(tape);
    ForwardOptions opts;
    opts.trace = &trace;
    forward(tape, b, f, opts);
    if (trace.entries.empty()) throw InputError("no attention recorded for the requested site");
    return slice_attention(trace.entries.front(), query);
  }

  static AttentionWeights slice_attention(const AttentionTrace::Entry& e,
                                          const std::vector<int>& query) {
    const int k0 = e.axis - 1;
    const auto st = contiguous_strides(e.shape);
    const int64_t n = e.shape[static_cast<size_t>(k0 + 1)];
    int64_t base = 0;
    // atom axes: 0..k0 take query[0..k0], axes k0+2.. take the rest
    for (int a = 0; a <= k0; ++a) base += query[static_cast<size_t>(a)] * st[static_cast<size_t>(a)];
    for (size_t a = static_cast<size_t>(k0) + 1; a < query.size(); ++a) {
      base += query[a] * st[a + 1];
    }
    const int heads = static_cast<int>(e.shape.back());
    AttentionWeights w;
    w.per_head.assign(static_cast<size_t>(heads), std::vector<double>(static_cast<size_t>(n), 0.0));
    w.averaged.assign(static_cast<size_t>(n), 0.0);
    const auto jst = st[static_cast<size_t>(k0 + 1)];
    const auto hst = st[e.shape.size() - 1];
    for (int h = 0; h < heads; ++h) {
      for (int64_t j = 0; j < n; ++j) {
        const double v = e.alpha[static_cast<size_t>(base + j * jst + h * hst)];
        w.per_head[static_cast<size_t>(h)][static_cast<size_t>(j)] = v;
        w.averaged[static_cast<size_t>(j)] += v / heads;
      }
    }
    return w;
  }

 private:
  TrackP make_track(int block, int m) {
    const std::string prefix = "block" + std::to_string(block) + ".track" + std::to_string(m);
    const int cm = cfg_.c[static_cast<size_t>(m - 1)];
    TrackP track;
    track.order = m;
    if (m == 2) {
      track.outer = make_outer_low2high(store_, prefix + ".outer", cfg_.c[0], cfg_.c_outer, cm);
    } else if (m > 2) {
      track.addl2h =
          make_add_low2high(store_, prefix + ".low2high", m, cfg_.c[static_cast<size_t>(m - 2)], cm);
    }
    const bool has_hi = m + 1 <= cfg_.embedded_orders();
    const int c_hi = has_hi ? cfg_.c[static_cast<size_t>(m)] : 0;
    for (int a = 1; a <= m; ++a) {
      track.attn.push_back(make_axial_attention(store_, prefix + ".attn_axis" + std::to_string(a),
                                                cm, c_hi, cfg_.n_heads[static_cast<size_t>(m - 1)],
                                                cfg_.logit_scale));
    }
    track.ff = make_feed_forward(store_, prefix + ".ff", cm, cfg_.ff_expansion);
    return track;
  }

  void check_features(const FeatureSet<Real>& f) const {
    const std::array<const Tensor<Real>*, 3> xs{&f.x1, &f.x2, &f.x3};
    for (int o = 1; o <= cfg_.embedded_orders(); ++o) {
      const auto& x = *xs[static_cast<size_t>(o - 1)];
      if (x.dim() != o + 1 || x.shape().back() != cfg_.feat_widths[static_cast<size_t>(o - 1)]) {
        throw ConfigError("features for order " + std::to_string(o) + " have shape " +
                          shape_str(x.shape()) + "; model expects trailing width " +
                          std::to_string(cfg_.feat_widths[static_cast<size_t>(o - 1)]));
      }
    }
  }

  // Key-validity mask for attention of order m along 'axis': a key j is
  // usable when it is a real atom and, under long-range masking, within
  // 'level' hops of the query's index on that axis.
  std::optional<BoolTensor> key_mask_for(const FeatureSet<Real>& f, int m, int axis,
                                         std::optional<int> level) const {
    bool any_pad = false;
    for (uint8_t v : f.atom_mask.v) {
      if (!v) any_pad = true;
    }
    if (!any_pad && !level) return std::nullopt;
    const int64_t n = f.n;
    const int k0 = axis - 1;
    Shape shape(static_cast<size_t>(m) + 2, 1);  // atom axes + key axis + head axis
    shape[static_cast<size_t>(k0 + 1)] = n;
    if (level) shape[static_cast<size_t>(k0)] = n;
    std::vector<uint8_t> v(static_cast<size_t>(numel(shape)));
    if (level) {
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
          const bool ok = f.atom_mask.v[static_cast<size_t>(j)] &&
                          f.topo_dist[static_cast<size_t>(i * n + j)] <= *level;
          v[static_cast<size_t>(i * n + j)] = ok ? 1 : 0;
        }
      }
    } else {
      for (int64_t j = 0; j < n; ++j) v[static_cast<size_t>(j)] = f.atom_mask.v[static_cast<size_t>(j)];
    }
    return BoolTensor(std::move(shape), std::move(v));
  }

  ModelConfig cfg_;
  ParamStore<Real> store_;
  std::vector<EmbedP> embeds_;
  std::vector<std::vector<TrackP>> blocks_;
  HeadP head_;
};

}  // namespace gem2
