#pragma once

// Bundled synthetic molecules with exactly computable labels, so training
// and acceptance probes need no external data. Graphs are random trees with
// an occasional ring-closing edge; coordinates come from a jittered
// bond-length layout. The label mixes a pairwise-distance response with a
// triplet-angle response, both evaluated from the same formulas the tests
// use as ground truth.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "gem2/common.hpp"
#include "gem2/featurize.hpp"

namespace gem2 {

struct SyntheticConfig {
  int count = 200;
  int n_min = 3;
  int n_max = 6;
  uint64_t seed = 2024;
  double pair_weight = 2.0;
  double angle_weight = 1.5;
};

// label = wp * mean_{i<j} exp(-(d_ij - 1.5)^2)
//       + wa * mean_{i<j<k} mean_a cos(2 theta_a) over the triangle's interior angles
// cos(2 theta) rather than cos(theta): interior angles sum to pi, which pins
// the plain cosine mean near a constant; the doubled angle keeps real spread
// between thin and equilateral triangles.
inline double synthetic_label(const MoleculeRecord& rec, const SyntheticConfig& cfg = {}) {
  const int n = rec.n_atoms();
  auto dist = [&](int i, int j) {
    double s = 0;
    for (int k = 0; k < 3; ++k) {
      const double d = rec.coords[static_cast<size_t>(i)][static_cast<size_t>(k)] -
                       rec.coords[static_cast<size_t>(j)][static_cast<size_t>(k)];
      s += d * d;
    }
    return std::sqrt(s);
  };

  double pair_sum = 0;
  int pairs = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const double d = dist(i, j) - 1.5;
      pair_sum += std::exp(-d * d);
      ++pairs;
    }
  }
  const double pair_term = pairs ? pair_sum / pairs : 0.0;

  const auto angles = triplet_angles(rec);
  double angle_sum = 0;
  int triplets = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      for (int k = j + 1; k < n; ++k) {
        double c = 0;
        for (int a = 0; a < 3; ++a) c += std::cos(2.0 * angles.at({i, j, k, a}));
        angle_sum += c / 3.0;
        ++triplets;
      }
    }
  }
  const double angle_term = triplets ? angle_sum / triplets : 0.0;

  return cfg.pair_weight * pair_term + cfg.angle_weight * angle_term;
}

namespace detail {

inline std::array<double, 3> random_unit(std::mt19937_64& eng) {
  for (;;) {
    std::array<double, 3> v{2.0 * uniform01(eng) - 1.0, 2.0 * uniform01(eng) - 1.0,
                            2.0 * uniform01(eng) - 1.0};
    const double norm = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (norm > 0.1 && norm <= 1.0) {
      for (auto& x : v) x /= norm;
      return v;
    }
  }
}

// bonds on the tree path between two atoms (the cycle a closing edge creates)
inline std::vector<int> tree_path_bonds(const std::vector<int>& parent, int a, int b) {
  auto chain = [&](int x) {
    std::vector<int> c{x};
    while (parent[static_cast<size_t>(c.back())] >= 0) c.push_back(parent[static_cast<size_t>(c.back())]);
    return c;
  };
  auto ca = chain(a), cb = chain(b);
  // drop the shared suffix up to the lowest common ancestor
  while (ca.size() > 1 && cb.size() > 1 && ca[ca.size() - 2] == cb[cb.size() - 2]) {
    ca.pop_back();
    cb.pop_back();
  }
  std::vector<int> nodes(ca.begin(), ca.end());
  for (auto it = cb.rbegin(); it != cb.rend(); ++it) {
    if (*it != nodes.back()) nodes.push_back(*it);
  }
  return nodes;
}

}  // namespace detail

inline MoleculeRecord random_molecule(std::mt19937_64& eng, int n_min, int n_max,
                                      const std::string& id) {
  const int n = n_min + static_cast<int>(eng() % static_cast<uint64_t>(n_max - n_min + 1));
  MoleculeRecord rec;
  rec.id = id;
  const double base_len = 1.35 + 0.3 * uniform01(eng);

  std::vector<int> parent(static_cast<size_t>(n), -1);
  for (int i = 0; i < n; ++i) {
    Atom a;
    const double u = uniform01(eng);
    a.atomic_number = u < 0.6 ? 6 : (u < 0.85 ? 7 : 8);
    a.num_hydrogens = static_cast<int>(eng() % 4);
    a.hybridization = static_cast<Hybridization>(eng() % 5);
    rec.atoms.push_back(a);
    if (i == 0) {
      rec.coords.push_back({0.0, 0.0, 0.0});
      continue;
    }
    const int p = static_cast<int>(eng() % static_cast<uint64_t>(i));
    parent[static_cast<size_t>(i)] = p;
    const auto dir = detail::random_unit(eng);
    const double len = base_len + 0.15 * (uniform01(eng) - 0.5);
    rec.coords.push_back({rec.coords[static_cast<size_t>(p)][0] + len * dir[0],
                          rec.coords[static_cast<size_t>(p)][1] + len * dir[1],
                          rec.coords[static_cast<size_t>(p)][2] + len * dir[2]});
    Bond b;
    b.i = p;
    b.j = i;
    b.bond_type = uniform01(eng) < 0.15 ? BondType::double_ : BondType::single;
    rec.bonds.push_back(b);
  }

  // occasionally close a ring between non-adjacent atoms
  if (n >= 4 && uniform01(eng) < 0.3) {
    const int a = static_cast<int>(eng() % static_cast<uint64_t>(n));
    const int b = static_cast<int>(eng() % static_cast<uint64_t>(n));
    bool adjacent = a == b;
    for (const Bond& bd : rec.bonds) {
      if ((bd.i == a && bd.j == b) || (bd.i == b && bd.j == a)) adjacent = true;
    }
    if (!adjacent) {
      Bond closing;
      closing.i = std::min(a, b);
      closing.j = std::max(a, b);
      closing.in_ring = true;
      rec.bonds.push_back(closing);
      const auto cycle = detail::tree_path_bonds(parent, a, b);
      for (Bond& bd : rec.bonds) {
        for (size_t k = 0; k + 1 < cycle.size(); ++k) {
          const int u = cycle[k], v = cycle[k + 1];
          if ((bd.i == u && bd.j == v) || (bd.i == v && bd.j == u)) bd.in_ring = true;
        }
      }
    }
  }

  std::vector<int> degree(static_cast<size_t>(n), 0);
  for (const Bond& b : rec.bonds) {
    ++degree[static_cast<size_t>(b.i)];
    ++degree[static_cast<size_t>(b.j)];
  }
  for (int i = 0; i < n; ++i) rec.atoms[static_cast<size_t>(i)].degree = degree[static_cast<size_t>(i)];
  return rec;
}

inline std::vector<MoleculeRecord> synthetic_dataset(const SyntheticConfig& cfg = {}) {
  if (cfg.count < 1 || cfg.n_min < 1 || cfg.n_max < cfg.n_min) {
    throw ConfigError("synthetic dataset: bad count or atom range");
  }
  std::mt19937_64 eng(cfg.seed);
  std::vector<MoleculeRecord> out;
  out.reserve(static_cast<size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "synth-%04d", i);
    auto rec = random_molecule(eng, cfg.n_min, cfg.n_max, buf);
    rec.label = synthetic_label(rec, cfg);
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace gem2
