#pragma once

// Optimization: Adam with warmup/hold/decay, EMA shadow parameters for
// evaluation, L1 and binary-cross-entropy losses, and the grouped
// topological-distance evaluation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "gem2/featurize.hpp"
#include "gem2/model.hpp"

namespace gem2 {

enum class LossKind { l1, binary_cross_entropy };

struct TrainConfig {
  int batch_size = 512;
  double base_lr = 4e-4;
  double warmup_start_frac = 0.01;
  double warmup_epochs = 10;
  double hold_epochs = 40;
  double decay_every = 10;
  double decay_factor = 0.5;
  int total_epochs = 100;
  int max_steps = 0;  // 0: no step cap
  double ema_decay = 0.999;
  LossKind loss = LossKind::l1;
  uint64_t seed = 0;
  double val_fraction = 0.1;

  void validate() const {
    if (base_lr <= 0) throw ConfigError("train: base_lr must be positive");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (ema_decay < 0 || ema_decay >= 1) throw ConfigError("train: ema_decay must be in [0, 1)");
    if (total_epochs < 0) throw ConfigError("train: total_epochs must be >= 0");
    if (warmup_epochs < 0 || hold_epochs < 0 || decay_every <= 0) {
      throw ConfigError("train: schedule epochs must be non-negative (decay_every positive)");
    }
    if (decay_factor <= 0 || decay_factor > 1) throw ConfigError("train: decay_factor in (0, 1]");
    if (val_fraction < 0 || val_fraction >= 1) throw ConfigError("train: val_fraction in [0, 1)");
  }
};

// Warmup from warmup_start_frac of base to base, hold, then stepwise decay.
inline double lr_at(double epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ConfigError("lr_at: epoch must be >= 0");
  if (epoch < cfg.warmup_epochs) {
    const double t = epoch / cfg.warmup_epochs;
    return cfg.base_lr * (cfg.warmup_start_frac + (1.0 - cfg.warmup_start_frac) * t);
  }
  if (epoch < cfg.warmup_epochs + cfg.hold_epochs) return cfg.base_lr;
  const double past = epoch - cfg.warmup_epochs - cfg.hold_epochs;
  const double halvings = std::floor(past / cfg.decay_every) + 1.0;
  return cfg.base_lr * std::pow(cfg.decay_factor, halvings);
}

// Moments and EMA shadows are kept in double regardless of the parameter
// precision; shapes mirror the parameter store entry for entry.
struct TrainState {
  std::vector<std::vector<double>> m, v, shadow;
  int64_t step = 0;

  template <class Real>
  static TrainState init(const ParamStore<Real>& params) {
    TrainState st;
    st.m.resize(static_cast<size_t>(params.size()));
    st.v.resize(static_cast<size_t>(params.size()));
    st.shadow.resize(static_cast<size_t>(params.size()));
    for (int i = 0; i < params.size(); ++i) {
      const auto n = static_cast<size_t>(params.value(i).size());
      st.m[static_cast<size_t>(i)].assign(n, 0.0);
      st.v[static_cast<size_t>(i)].assign(n, 0.0);
      st.shadow[static_cast<size_t>(i)].assign(params.value(i).vec().begin(),
                                               params.value(i).vec().end());
    }
    return st;
  }
};

// Standard bias-corrected Adam (beta1 0.9, beta2 0.999, eps 1e-8).
template <class Real>
void adam_step(ParamStore<Real>& params, TrainState& st,
               const std::vector<std::vector<double>>& grads, double lr) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  ++st.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
  for (int i = 0; i < params.size(); ++i) {
    const auto& g = grads[static_cast<size_t>(i)];
    auto& m = st.m[static_cast<size_t>(i)];
    auto& v = st.v[static_cast<size_t>(i)];
    const auto& value = params.value(i);
    std::vector<Real> next(value.vec());
    for (size_t e = 0; e < g.size(); ++e) {
      if (!std::isfinite(g[e])) {
        throw NumericError("adam: non-finite gradient for parameter '" + params.name(i) + "'");
      }
      m[e] = beta1 * m[e] + (1.0 - beta1) * g[e];
      v[e] = beta2 * v[e] + (1.0 - beta2) * g[e] * g[e];
      const double mhat = m[e] / c1;
      const double vhat = v[e] / c2;
      next[e] = static_cast<Real>(static_cast<double>(next[e]) - lr * mhat / (std::sqrt(vhat) + eps));
    }
    params.set_value(i, Tensor<Real>(value.shape(), std::move(next)));
  }
}

template <class Real>
void ema_update(const ParamStore<Real>& params, TrainState& st, double decay) {
  for (int i = 0; i < params.size(); ++i) {
    auto& s = st.shadow[static_cast<size_t>(i)];
    const auto& p = params.value(i).vec();
    for (size_t e = 0; e < s.size(); ++e) {
      s[e] = decay * s[e] + (1.0 - decay) * static_cast<double>(p[e]);
    }
  }
}

// Shadow parameters as tensors, for evaluation-time loading.
template <class Real>
std::vector<Tensor<Real>> ema_apply(const ParamStore<Real>& params, const TrainState& st) {
  std::vector<Tensor<Real>> out;
  out.reserve(st.shadow.size());
  for (int i = 0; i < params.size(); ++i) {
    const auto& s = st.shadow[static_cast<size_t>(i)];
    out.emplace_back(params.value(i).shape(), std::vector<Real>(s.begin(), s.end()));
  }
  return out;
}

template <class Real>
std::vector<Tensor<Real>> snapshot_parameters(const ParamStore<Real>& params) {
  std::vector<Tensor<Real>> out;
  for (int i = 0; i < params.size(); ++i) out.push_back(params.value(i));
  return out;
}

template <class Real>
void load_parameters(ParamStore<Real>& params, const std::vector<Tensor<Real>>& values) {
  if (static_cast<int>(values.size()) != params.size()) {
    throw ConfigError("parameter count mismatch when loading values");
  }
  for (int i = 0; i < params.size(); ++i) params.set_value(i, values[static_cast<size_t>(i)]);
}

inline double mean_absolute_error(const std::vector<double>& pred, const std::vector<double>& label) {
  if (pred.empty() || pred.size() != label.size()) throw InputError("mae: bad input sizes");
  double s = 0;
  for (size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - label[i]);
  return s / static_cast<double>(pred.size());
}

// Probability that a random positive outranks a random negative; ties count
// one half (average ranks).
inline double roc_auc(const std::vector<double>& scores, const std::vector<double>& labels) {
  if (scores.empty() || scores.size() != labels.size()) throw InputError("roc_auc: bad input sizes");
  int64_t n_pos = 0, n_neg = 0;
  for (double l : labels) {
    if (l == 1.0) {
      ++n_pos;
    } else if (l == 0.0) {
      ++n_neg;
    } else {
      throw InputError("roc_auc: labels must be 0 or 1");
    }
  }
  if (n_pos == 0 || n_neg == 0) {
    throw NumericError("roc_auc: undefined metric, labels contain a single class");
  }
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size(), 0.0);
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double rank_sum_pos = 0;
  for (size_t k = 0; k < labels.size(); ++k) {
    if (labels[k] == 1.0) rank_sum_pos += rank[k];
  }
  const double u = rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct GroupStats {
  int count = 0;
  double mae = 0.0;
};

// Bins by bond-graph diameter: short <= 7, moderate 8..11, long >= 12.
// Empty bins stay absent.
struct GroupedEval {
  int n = 0;
  double overall_mae = 0.0;
  std::optional<GroupStats> short_range, moderate_range, long_range;
};

inline GroupedEval eval_grouped(const std::vector<MoleculeRecord>& records,
                                const std::function<double(const MoleculeRecord&)>& predict) {
  if (records.empty()) throw InputError("eval_grouped: empty dataset");
  GroupedEval out;
  double overall = 0;
  std::array<double, 3> sums{0, 0, 0};
  std::array<int, 3> counts{0, 0, 0};
  for (const auto& rec : records) {
    const double err = std::abs(predict(rec) - rec.label);
    overall += err;
    ++out.n;
    const int d = max_topo_dist(rec);
    const int bin = d <= 7 ? 0 : (d <= 11 ? 1 : 2);
    sums[static_cast<size_t>(bin)] += err;
    ++counts[static_cast<size_t>(bin)];
  }
  out.overall_mae = overall / out.n;
  auto fill = [&](int bin) -> std::optional<GroupStats> {
    if (counts[static_cast<size_t>(bin)] == 0) return std::nullopt;
    return GroupStats{counts[static_cast<size_t>(bin)],
                      sums[static_cast<size_t>(bin)] / counts[static_cast<size_t>(bin)]};
  };
  out.short_range = fill(0);
  out.moderate_range = fill(1);
  out.long_range = fill(2);
  return out;
}

struct MetricEntry {
  int epoch = 0;
  int64_t step = 0;
  double lr = 0;
  double train_loss = 0;
  double val_metric = 0;
  double wall_ms = 0;
};

template <class Real>
struct TrainResult {
  std::vector<MetricEntry> log;
  std::vector<Tensor<Real>> best_params;  // EMA parameters of the best epoch
  double best_val = 0;
  int best_epoch = -1;
  int64_t steps = 0;
  bool aborted = false;
  std::string abort_reason;
};

struct SplitIndices {
  std::vector<size_t> train, val;
};

// Declared splits win; otherwise a seeded random fraction goes to
// validation. A dataset too small to split validates on the training data.
inline SplitIndices split_dataset(const std::vector<MoleculeRecord>& records, double val_fraction,
                                  uint64_t seed) {
  SplitIndices out;
  bool any_declared = false;
  for (const auto& r : records) {
    if (r.split) any_declared = true;
  }
  if (any_declared) {
    for (size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      if (!r.split) {
        throw InputError("dataset declares splits for some records only (molecule '" + r.id + "')");
      }
      if (*r.split == "train") {
        out.train.push_back(i);
      } else if (*r.split == "valid") {
        out.val.push_back(i);
      } else {
        throw InputError("molecule '" + r.id + "': unknown split '" + *r.split + "'");
      }
    }
    if (out.train.empty()) throw InputError("declared splits leave no training records");
    if (out.val.empty()) out.val = out.train;
    return out;
  }
  std::vector<size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::mt19937_64 eng(mix_seed(seed, 0xa11ce));
  for (size_t i = idx.size() - 1; i > 0; --i) {
    std::swap(idx[i], idx[static_cast<size_t>(eng() % (i + 1))]);
  }
  size_t n_val = static_cast<size_t>(std::llround(val_fraction * static_cast<double>(idx.size())));
  if (val_fraction > 0 && n_val == 0) n_val = 1;
  if (n_val >= idx.size()) n_val = idx.size() - 1;
  out.val.assign(idx.begin(), idx.begin() + static_cast<long>(n_val));
  out.train.assign(idx.begin() + static_cast<long>(n_val), idx.end());
  if (out.val.empty()) out.val = out.train;
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

template <class Real>
Tensor<Real> loss_tensor(Tape<Real>& t, const Tensor<Real>& pred, double label, LossKind kind) {
  if (kind == LossKind::l1) {
    return t.abs_val(t.sub(pred, Tensor<Real>::scalar_value(static_cast<Real>(label))));
  }
  if (label != 0.0 && label != 1.0) {
    throw InputError("binary cross entropy needs labels in {0, 1}");
  }
  // -log sigmoid(s) for positives, -log(1 - sigmoid(s)) for negatives
  auto pos = t.softplus(t.neg(pred));
  auto neg = t.softplus(pred);
  return t.add(t.scale(pos, static_cast<Real>(label)), t.scale(neg, static_cast<Real>(1.0 - label)));
}

// Shuffled mini-batch epochs with per-epoch validation on EMA parameters.
// The best-validation parameters are retained; a non-finite loss or gradient
// aborts and returns the last good state.
template <class Real>
TrainResult<Real> train(Gem2Model<Real>& model, const std::vector<MoleculeRecord>& records,
                        const TrainConfig& tc, const FeaturizerConfig& fc,
                        const std::function<void(const MetricEntry&)>& on_epoch = nullptr) {
  tc.validate();
  if (records.empty()) throw InputError("train: empty dataset");
  const auto split = split_dataset(records, tc.val_fraction, tc.seed);

  std::vector<FeatureSet<Real>> features;
  features.reserve(records.size());
  std::vector<double> labels;
  for (const auto& rec : records) {
    features.push_back(cast_features<Real>(featurize(rec, fc)));
    labels.push_back(rec.label);
  }

  auto& params = model.params();
  TrainState st = TrainState::init(params);
  TrainResult<Real> result;
  result.best_params = ema_apply(params, st);

  const bool lower_better = tc.loss == LossKind::l1;
  const size_t n_train = split.train.size();

  auto validate_now = [&]() {
    const auto current = snapshot_parameters(params);
    load_parameters(params, ema_apply(params, st));
    std::vector<double> preds, val_labels;
    for (size_t i : split.val) {
      preds.push_back(static_cast<double>(model.predict(features[i])));
      val_labels.push_back(labels[i]);
    }
    load_parameters(params, current);
    return tc.loss == LossKind::l1 ? mean_absolute_error(preds, val_labels)
                                   : roc_auc(preds, val_labels);
  };

  bool stop = false;
  for (int epoch = 0; epoch < tc.total_epochs && !stop; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<size_t> order = split.train;
    std::mt19937_64 eng(mix_seed(tc.seed, static_cast<uint64_t>(epoch) + 1));
    for (size_t i = order.size() - 1; i > 0; --i) {
      std::swap(order[i], order[static_cast<size_t>(eng() % (i + 1))]);
    }

    double epoch_loss = 0;
    int64_t epoch_batches = 0;
    double last_lr = 0;
    try {
      for (size_t start = 0; start < order.size() && !stop; start += static_cast<size_t>(tc.batch_size)) {
        const size_t end = std::min(order.size(), start + static_cast<size_t>(tc.batch_size));
        const double epoch_float =
            static_cast<double>(epoch) + static_cast<double>(start) / static_cast<double>(n_train);
        const double lr = lr_at(epoch_float, tc);
        last_lr = lr;

        std::vector<std::vector<double>> grads(static_cast<size_t>(params.size()));
        for (int i = 0; i < params.size(); ++i) {
          grads[static_cast<size_t>(i)].assign(static_cast<size_t>(params.value(i).size()), 0.0);
        }
        double batch_loss = 0;
        const double inv_b = 1.0 / static_cast<double>(end - start);
        for (size_t bi = start; bi < end; ++bi) {
          const size_t mol = order[bi];
          Tape<Real> tape;
          auto bound = model.bind(tape);
          typename Gem2Model<Real>::ForwardOptions opts;
          opts.training = true;
          opts.dropout_seed = mix_seed(tc.seed, mix_seed(static_cast<uint64_t>(st.step) + 1,
                                                         static_cast<uint64_t>(mol)));
          auto pred = model.forward(tape, bound, features[mol], opts);
          auto loss = loss_tensor(tape, pred, labels[mol], tc.loss);
          batch_loss += static_cast<double>(loss.scalar()) * inv_b;
          tape.backward(loss);
          for (int i = 0; i < params.size(); ++i) {
            const auto g = tape.grad(bound.t[static_cast<size_t>(i)]);
            auto& acc = grads[static_cast<size_t>(i)];
            for (int64_t e = 0; e < g.size(); ++e) {
              acc[static_cast<size_t>(e)] += static_cast<double>(g.data()[e]) * inv_b;
            }
          }
        }
        adam_step(params, st, grads, lr);
        ema_update(params, st, tc.ema_decay);
        epoch_loss += batch_loss;
        ++epoch_batches;
        if (tc.max_steps > 0 && st.step >= tc.max_steps) stop = true;
      }
    } catch (const NumericError& e) {
      result.aborted = true;
      result.abort_reason = e.what();
      result.steps = st.step;
      return result;
    }

    MetricEntry entry;
    entry.epoch = epoch;
    entry.step = st.step;
    entry.lr = last_lr;
    entry.train_loss = epoch_batches ? epoch_loss / static_cast<double>(epoch_batches) : 0.0;
    entry.val_metric = validate_now();
    entry.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);

    const bool better = result.best_epoch < 0 ||
                        (lower_better ? entry.val_metric < result.best_val
                                      : entry.val_metric > result.best_val);
    if (better) {
      result.best_val = entry.val_metric;
      result.best_epoch = epoch;
      result.best_params = ema_apply(params, st);
    }
  }
  result.steps = st.step;
  return result;
}

}  // namespace gem2
