#pragma once

// Wall-clock scaling measurements of the attention kernels, paired with
// exact logit MAC counts. Axial mode times the production kernel stacked
// over all m axes (no higher-order fusion, so the single-kernel cost is what
// scales); full mode times the naive all-pairs reference.

#include <algorithm>
#include <chrono>
#include <string>
#include <vector>

#include "gem2/model.hpp"
#include "gem2/oracle.hpp"

namespace gem2 {

struct BenchRow {
  int m = 0;
  int64_t n = 0;
  std::string mode;
  int64_t wall_ns = 0;
  int64_t mac_count = 0;
};

struct BenchOptions {
  int channels = 16;
  int heads = 4;
  int reps = 5;
  int warmups = 2;
  int64_t full_token_guard = 4096;
  uint64_t seed = 7;
};

namespace bench_detail {

inline Tensor<double> random_cube(int64_t n, int axes, int c, std::mt19937_64& eng) {
  Shape s(static_cast<size_t>(axes), n);
  s.push_back(c);
  std::vector<double> v(static_cast<size_t>(numel(s)));
  for (auto& x : v) x = 2.0 * uniform01(eng) - 1.0;
  return Tensor<double>(std::move(s), std::move(v));
}

template <class F>
int64_t median_wall_ns(int reps, int warmups, F&& body) {
  for (int i = 0; i < warmups; ++i) body();
  // sub-millisecond kernels run in an amortizing inner loop per repetition
  const auto e0 = std::chrono::steady_clock::now();
  body();
  const int64_t estimate =
      std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - e0)
          .count();
  const int64_t iters = std::max<int64_t>(1, 500'000 / std::max<int64_t>(estimate, 1));
  std::vector<int64_t> times;
  times.reserve(static_cast<size_t>(reps));
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int64_t it = 0; it < iters; ++it) body();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count() / iters);
  }
  std::nth_element(times.begin(), times.begin() + times.size() / 2, times.end());
  return times[times.size() / 2];
}

}  // namespace bench_detail

inline std::vector<BenchRow> run_bench(const std::vector<int>& orders,
                                       const std::vector<int64_t>& sizes, AttnKind kind,
                                       const BenchOptions& opt = {}) {
  if (opt.reps < 1 || opt.warmups < 0) throw ConfigError("bench: reps must be >= 1");
  std::mt19937_64 eng(opt.seed);
  std::vector<BenchRow> rows;
  for (int m : orders) {
    if (m < 1 || m > 3) throw InputError("bench: orders must be in 1..3");

    // per-order module set reused across sizes
    ParamStore<double> store(mix_seed(opt.seed, static_cast<uint64_t>(m)));
    std::vector<AxialAttentionP> mods;
    if (kind == AttnKind::axial) {
      for (int a = 1; a <= m; ++a) {
        mods.push_back(make_axial_attention(store, "bench.axis" + std::to_string(a), opt.channels,
                                            0, opt.heads, LogitScale::inverse_sqrt_head_dim));
      }
    }
    FullAttentionParams fp;
    if (kind == AttnKind::full) {
      fp.c = opt.channels;
      for (auto* w : {&fp.wq, &fp.wk, &fp.wv, &fp.wo}) {
        w->resize(static_cast<size_t>(opt.channels) * opt.channels);
        for (auto& x : *w) x = 2.0 * uniform01(eng) - 1.0;
      }
    }

    for (int64_t n : sizes) {
      if (n < 1) throw InputError("bench: sizes must be >= 1");
      const auto z = bench_detail::random_cube(n, m, opt.channels, eng);
      BenchRow row;
      row.m = m;
      row.n = n;
      row.mac_count = count_ops(kind, n, m, opt.channels);
      if (kind == AttnKind::axial) {
        row.mode = "axial";
        row.wall_ns = bench_detail::median_wall_ns(opt.reps, opt.warmups, [&] {
          Tape<double> t(false);
          auto b = bind_params(t, store);
          Tensor<double> zh = z;
          for (int a = 1; a <= m; ++a) {
            zh = apply_axial_attention(t, b, mods[static_cast<size_t>(a - 1)], zh, nullptr, a);
          }
        });
      } else {
        row.mode = "full";
        const int64_t tokens = numel(Shape(z.shape().begin(), z.shape().end() - 1));
        if (tokens > opt.full_token_guard) {
          throw InputError("bench: full mode refuses " + std::to_string(tokens) +
                           " tokens (guard " + std::to_string(opt.full_token_guard) + ")");
        }
        row.wall_ns = bench_detail::median_wall_ns(opt.reps, opt.warmups, [&] {
          full_attention_reference(z.vec(), z.shape(), fp, opt.full_token_guard);
        });
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

// Least-squares slope of log(wall) against log(n) for one order/mode.
inline double log_log_slope(const std::vector<BenchRow>& rows) {
  if (rows.size() < 2) throw InputError("slope needs at least two sizes");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(rows.size());
  for (const auto& r : rows) {
    const double x = std::log(static_cast<double>(r.n));
    const double y = std::log(static_cast<double>(r.wall_ns));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace gem2
