#pragma once

// Molecule records and their conversion into dense input tensors: one-hot
// blocks for categorical features, BFS hop distances, Euclidean geometry,
// triplet angles, and Gaussian radial-basis expansion of continuous values.

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "gem2/common.hpp"
#include "gem2/tensor.hpp"

namespace gem2 {

enum class Chirality : uint8_t { cw = 0, ccw = 1, unspecified = 2, other = 3 };
enum class BondType : uint8_t { single = 0, double_ = 1, triple = 2, aromatic = 3 };
enum class BondDir : uint8_t {
  none = 0,
  begin_wedge = 1,
  begin_dash = 2,
  end_wedge = 3,
  end_dash = 4,
  either_double = 5,
  unknown = 6,
};
enum class Hybridization : uint8_t { sp = 0, sp2 = 1, sp3 = 2, sp3d = 3, sp3d2 = 4 };

struct Atom {
  int atomic_number = 6;
  int formal_charge = 0;
  Chirality chirality_tag = Chirality::unspecified;
  bool aromatic = false;
  int degree = 0;
  int num_hydrogens = 0;
  Hybridization hybridization = Hybridization::sp3;
};

struct Bond {
  int i = 0;
  int j = 0;
  BondType bond_type = BondType::single;
  BondDir bond_dir = BondDir::none;
  bool in_ring = false;
};

struct MoleculeRecord {
  std::vector<Atom> atoms;
  std::vector<Bond> bonds;
  std::vector<std::array<double, 3>> coords;  // angstrom
  double label = 0.0;
  std::string id;
  std::optional<std::string> split;

  int n_atoms() const { return static_cast<int>(atoms.size()); }

  void validate() const {
    const int n = n_atoms();
    if (n == 0) throw InputError("molecule '" + id + "': no atoms");
    if (static_cast<int>(coords.size()) != n) {
      throw InputError("molecule '" + id + "': " + std::to_string(coords.size()) +
                       " coordinates for " + std::to_string(n) + " atoms");
    }
    std::vector<std::pair<int, int>> seen;
    for (const Bond& b : bonds) {
      if (b.i < 0 || b.i >= n || b.j < 0 || b.j >= n) {
        throw InputError("molecule '" + id + "': bond endpoint out of range (" +
                         std::to_string(b.i) + ", " + std::to_string(b.j) + ")");
      }
      if (b.i == b.j) {
        throw InputError("molecule '" + id + "': self-bond on atom " + std::to_string(b.i));
      }
      const std::pair<int, int> key = std::minmax(b.i, b.j);
      for (const auto& s : seen) {
        if (s == key) {
          throw InputError("molecule '" + id + "': duplicate bond (" + std::to_string(key.first) +
                           ", " + std::to_string(key.second) + ")");
        }
      }
      seen.push_back(key);
    }
  }
};

// Gaussian expansion e_m(x) = exp(-gamma (x - mu_m)^2) on a fixed grid of
// centers from lo to hi with stride 0.1.
struct RbfSpec {
  double gamma = 10.0;
  double lo = 0.0;
  double hi = 1.0;
  static constexpr double kStride = 0.1;

  std::vector<double> centers() const {
    if (hi < lo) throw ConfigError("rbf: hi < lo");
    std::vector<double> c;
    for (int m = 0;; ++m) {
      const double mu = lo + kStride * m;
      if (mu > hi + 1e-12) break;
      c.push_back(mu);
    }
    return c;
  }
  int count() const { return static_cast<int>(centers().size()); }
};

struct FeaturizerConfig {
  RbfSpec hop{10.0, 0.0, 20.0};
  RbfSpec dist{10.0, 0.0, 10.0};
  RbfSpec angle{10.0, 0.0, std::numbers::pi};

  // one-hot block widths; the three bond blocks carry an appended
  // "no-bond" category because the pair tensor is dense over all pairs
  static constexpr int kAtomType = 119;
  static constexpr int kAromatic = 2;
  static constexpr int kCharge = 16;  // formal charge -8..7
  static constexpr int kChargeOffset = 8;
  static constexpr int kChirality = 4;
  static constexpr int kDegree = 11;
  static constexpr int kNumH = 9;
  static constexpr int kHybrid = 5;
  static constexpr int kBondDir = 7 + 1;
  static constexpr int kBondType = 4 + 1;
  static constexpr int kInRing = 2 + 1;

  int x1_width() const {
    return kAtomType + kAromatic + kCharge + kChirality + kDegree + kNumH + kHybrid;
  }
  int x2_width() const { return kBondDir + kBondType + kInRing + hop.count() + dist.count(); }
  int x3_width() const { return 3 * angle.count() + 3 * hop.count(); }
};

template <class Real>
struct FeatureSet {
  Tensor<Real> x1;  // [N, c1]
  Tensor<Real> x2;  // [N, N, c2]
  Tensor<Real> x3;  // [N, N, N, c3]
  BoolTensor atom_mask;
  std::vector<int> topo_dist;  // row-major N*N hop counts, sentinel N if unreachable
  int n = 0;
};

template <class To, class From>
FeatureSet<To> cast_features(const FeatureSet<From>& f) {
  return FeatureSet<To>{cast_tensor<To>(f.x1), cast_tensor<To>(f.x2), cast_tensor<To>(f.x3),
                        f.atom_mask, f.topo_dist, f.n};
}

// All-pairs shortest hop counts over the bond graph via BFS from every atom.
// Unreachable pairs carry the sentinel value N.
inline std::vector<int> topo_distance(const MoleculeRecord& rec) {
  const int n = rec.n_atoms();
  std::vector<std::vector<int>> adj(static_cast<size_t>(n));
  for (const Bond& b : rec.bonds) {
    adj[static_cast<size_t>(b.i)].push_back(b.j);
    adj[static_cast<size_t>(b.j)].push_back(b.i);
  }
  std::vector<int> dist(static_cast<size_t>(n) * static_cast<size_t>(n), n);
  for (int s = 0; s < n; ++s) {
    auto* row = dist.data() + static_cast<size_t>(s) * static_cast<size_t>(n);
    row[s] = 0;
    std::deque<int> q{s};
    while (!q.empty()) {
      const int u = q.front();
      q.pop_front();
      for (int v : adj[static_cast<size_t>(u)]) {
        if (row[v] == n && v != s) {
          row[v] = row[u] + 1;
          q.push_back(v);
        }
      }
    }
  }
  return dist;
}

// Maximum finite hop distance between any two atoms (bond-graph diameter).
inline int max_topo_dist(const MoleculeRecord& rec) {
  const auto d = topo_distance(rec);
  const int n = rec.n_atoms();
  int mx = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const int v = d[static_cast<size_t>(i) * static_cast<size_t>(n) + static_cast<size_t>(j)];
      if (v < n) mx = std::max(mx, v);
    }
  }
  return mx;
}

// Symmetric Euclidean distance matrix in angstrom.
inline Tensor<double> pair_distance(const MoleculeRecord& rec) {
  const int n = rec.n_atoms();
  if (static_cast<int>(rec.coords.size()) != n) {
    throw InputError("molecule '" + rec.id + "': coordinates missing");
  }
  std::vector<double> out(static_cast<size_t>(n) * static_cast<size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) {
        const double d = rec.coords[static_cast<size_t>(i)][static_cast<size_t>(k)] -
                         rec.coords[static_cast<size_t>(j)][static_cast<size_t>(k)];
        s += d * d;
      }
      const double d = std::sqrt(s);
      out[static_cast<size_t>(i) * n + j] = d;
      out[static_cast<size_t>(j) * n + i] = d;
    }
  }
  return Tensor<double>({n, n}, std::move(out));
}

// Interior angles (radians) of the triangle spanned by each atom triplet, in
// the order (angle at i, at j, at k). Degenerate triplets -- repeated
// indices, coincident points, or zero-area triangles -- map to (0, 0, 0).
inline Tensor<double> triplet_angles(const MoleculeRecord& rec) {
  const int n = rec.n_atoms();
  if (static_cast<int>(rec.coords.size()) != n) {
    throw InputError("molecule '" + rec.id + "': coordinates missing");
  }
  std::vector<double> out(static_cast<size_t>(n) * n * n * 3, 0.0);
  auto angle_at = [&](int a, int b, int c) {
    // angle at vertex a between rays a->b and a->c
    double ab[3], ac[3];
    double nab = 0, nac = 0, dot = 0;
    for (int k = 0; k < 3; ++k) {
      ab[k] = rec.coords[static_cast<size_t>(b)][static_cast<size_t>(k)] -
              rec.coords[static_cast<size_t>(a)][static_cast<size_t>(k)];
      ac[k] = rec.coords[static_cast<size_t>(c)][static_cast<size_t>(k)] -
              rec.coords[static_cast<size_t>(a)][static_cast<size_t>(k)];
      nab += ab[k] * ab[k];
      nac += ac[k] * ac[k];
      dot += ab[k] * ac[k];
    }
    const double denom = std::sqrt(nab * nac);
    const double cosv = std::clamp(dot / denom, -1.0, 1.0);
    return std::acos(cosv);
  };
  auto cross_norm = [&](int a, int b, int c) {
    double ab[3], ac[3];
    for (int k = 0; k < 3; ++k) {
      ab[k] = rec.coords[static_cast<size_t>(b)][static_cast<size_t>(k)] -
              rec.coords[static_cast<size_t>(a)][static_cast<size_t>(k)];
      ac[k] = rec.coords[static_cast<size_t>(c)][static_cast<size_t>(k)] -
              rec.coords[static_cast<size_t>(a)][static_cast<size_t>(k)];
    }
    const double cx = ab[1] * ac[2] - ab[2] * ac[1];
    const double cy = ab[2] * ac[0] - ab[0] * ac[2];
    const double cz = ab[0] * ac[1] - ab[1] * ac[0];
    return std::sqrt(cx * cx + cy * cy + cz * cz);
  };
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) {
        if (i == j || j == k || i == k) continue;
        if (cross_norm(i, j, k) < 1e-9) continue;  // zero-area triangle
        const size_t base = ((static_cast<size_t>(i) * n + j) * n + k) * 3;
        out[base + 0] = angle_at(i, j, k);
        out[base + 1] = angle_at(j, i, k);
        out[base + 2] = angle_at(k, i, j);
      }
    }
  }
  return Tensor<double>({n, n, n, 3}, std::move(out));
}

inline void rbf_expand_into(double x, const RbfSpec& spec, const std::vector<double>& centers,
                            double* out) {
  for (size_t m = 0; m < centers.size(); ++m) {
    const double d = x - centers[m];
    out[m] = std::exp(-spec.gamma * d * d);
  }
}

// Expands every entry of x into num_centers Gaussian responses, appending a
// trailing axis.
inline Tensor<double> rbf_expand(const Tensor<double>& x, const RbfSpec& spec) {
  const auto centers = spec.centers();
  Shape out_shape = x.shape();
  out_shape.push_back(static_cast<int64_t>(centers.size()));
  std::vector<double> out(static_cast<size_t>(x.size()) * centers.size());
  for (int64_t i = 0; i < x.size(); ++i) {
    rbf_expand_into(x.data()[i], spec, centers, out.data() + static_cast<size_t>(i) * centers.size());
  }
  return Tensor<double>(std::move(out_shape), std::move(out));
}

namespace detail {

inline void set_one_hot(std::vector<double>& row, size_t base, int index, int width,
                        const char* what, int atom_index) {
  if (index < 0 || index >= width) {
    throw FeatureError("atom " + std::to_string(atom_index) + ": " + what + " value " +
                       std::to_string(index) + " outside one-hot width " + std::to_string(width));
  }
  row[base + static_cast<size_t>(index)] = 1.0;
}

inline BondDir mirror_dir(BondDir d) {
  switch (d) {
    case BondDir::begin_wedge: return BondDir::end_wedge;
    case BondDir::begin_dash: return BondDir::end_dash;
    case BondDir::end_wedge: return BondDir::begin_wedge;
    case BondDir::end_dash: return BondDir::begin_dash;
    default: return d;
  }
}

}  // namespace detail

struct OneHotBlocks {
  Tensor<double> atoms;  // [N, 166]
  Tensor<double> pairs;  // [N, N, 16] bond dir + bond type + in-ring
};

// Categorical blocks of the feature table. Every defined category gets
// exactly one 1 per slice; pairs without a bond light the appended no-bond
// category of each bond block.
inline OneHotBlocks one_hot_features(const MoleculeRecord& rec) {
  using FC = FeaturizerConfig;
  rec.validate();
  const int n = rec.n_atoms();

  const int aw = FC{}.x1_width();
  std::vector<double> av(static_cast<size_t>(n) * static_cast<size_t>(aw), 0.0);
  for (int i = 0; i < n; ++i) {
    const Atom& a = rec.atoms[static_cast<size_t>(i)];
    std::vector<double> row(static_cast<size_t>(aw), 0.0);
    size_t base = 0;
    if (a.atomic_number < 1 || a.atomic_number > 118) {
      throw FeatureError("atom " + std::to_string(i) + ": atomic_number " +
                         std::to_string(a.atomic_number) + " outside 1..118");
    }
    detail::set_one_hot(row, base, a.atomic_number, FC::kAtomType, "atomic_number", i);
    base += FC::kAtomType;
    detail::set_one_hot(row, base, a.aromatic ? 1 : 0, FC::kAromatic, "aromatic", i);
    base += FC::kAromatic;
    detail::set_one_hot(row, base, a.formal_charge + FC::kChargeOffset, FC::kCharge,
                        "formal_charge", i);
    base += FC::kCharge;
    detail::set_one_hot(row, base, static_cast<int>(a.chirality_tag), FC::kChirality,
                        "chirality_tag", i);
    base += FC::kChirality;
    detail::set_one_hot(row, base, a.degree, FC::kDegree, "degree", i);
    base += FC::kDegree;
    detail::set_one_hot(row, base, a.num_hydrogens, FC::kNumH, "num_hydrogens", i);
    base += FC::kNumH;
    detail::set_one_hot(row, base, static_cast<int>(a.hybridization), FC::kHybrid,
                        "hybridization", i);
    std::copy(row.begin(), row.end(), av.begin() + static_cast<size_t>(i) * aw);
  }

  const int pw = FC::kBondDir + FC::kBondType + FC::kInRing;
  std::vector<double> pv(static_cast<size_t>(n) * n * static_cast<size_t>(pw), 0.0);
  // start from no-bond everywhere, then overwrite bonded pairs
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double* row = pv.data() + (static_cast<size_t>(i) * n + j) * pw;
      row[FC::kBondDir - 1] = 1.0;
      row[FC::kBondDir + FC::kBondType - 1] = 1.0;
      row[FC::kBondDir + FC::kBondType + FC::kInRing - 1] = 1.0;
    }
  }
  auto write_pair = [&](int i, int j, BondDir dir, BondType type, bool ring) {
    double* row = pv.data() + (static_cast<size_t>(i) * n + j) * pw;
    std::fill(row, row + pw, 0.0);
    row[static_cast<int>(dir)] = 1.0;
    row[FC::kBondDir + static_cast<int>(type)] = 1.0;
    row[FC::kBondDir + FC::kBondType + (ring ? 1 : 0)] = 1.0;
  };
  for (const Bond& b : rec.bonds) {
    write_pair(b.i, b.j, b.bond_dir, b.bond_type, b.in_ring);
    write_pair(b.j, b.i, detail::mirror_dir(b.bond_dir), b.bond_type, b.in_ring);
  }

  return OneHotBlocks{Tensor<double>({n, aw}, std::move(av)),
                      Tensor<double>({n, n, pw}, std::move(pv))};
}

// Assembles the three input tensors: one-hot blocks, then RBF expansions of
// hop distance, geometric distance, triplet angles, and triplet hop
// distances, concatenated along the channel axis.
inline FeatureSet<double> featurize(const MoleculeRecord& rec,
                                    const FeaturizerConfig& cfg = FeaturizerConfig{}) {
  const int n = rec.n_atoms();
  const auto blocks = one_hot_features(rec);
  const auto topo = topo_distance(rec);
  const auto dist = pair_distance(rec);
  const auto angles = triplet_angles(rec);

  const auto hop_centers = cfg.hop.centers();
  const auto dist_centers = cfg.dist.centers();
  const auto angle_centers = cfg.angle.centers();

  const int c2 = cfg.x2_width();
  const int pw = FeaturizerConfig::kBondDir + FeaturizerConfig::kBondType + FeaturizerConfig::kInRing;
  std::vector<double> x2(static_cast<size_t>(n) * n * static_cast<size_t>(c2), 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const size_t pidx = static_cast<size_t>(i) * n + j;
      double* row = x2.data() + pidx * c2;
      const double* oh = blocks.pairs.data() + pidx * pw;
      std::copy(oh, oh + pw, row);
      double* p = row + pw;
      rbf_expand_into(static_cast<double>(topo[pidx]), cfg.hop, hop_centers, p);
      p += hop_centers.size();
      rbf_expand_into(dist.data()[pidx], cfg.dist, dist_centers, p);
    }
  }

  const int c3 = cfg.x3_width();
  std::vector<double> x3(static_cast<size_t>(n) * n * n * static_cast<size_t>(c3), 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) {
        const size_t tidx = (static_cast<size_t>(i) * n + j) * n + k;
        double* p = x3.data() + tidx * c3;
        for (int a = 0; a < 3; ++a) {
          rbf_expand_into(angles.data()[tidx * 3 + a], cfg.angle, angle_centers, p);
          p += angle_centers.size();
        }
        const int hops[3] = {topo[static_cast<size_t>(i) * n + j],
                             topo[static_cast<size_t>(i) * n + k],
                             topo[static_cast<size_t>(j) * n + k]};
        for (int a = 0; a < 3; ++a) {
          rbf_expand_into(static_cast<double>(hops[a]), cfg.hop, hop_centers, p);
          p += hop_centers.size();
        }
      }
    }
  }

  FeatureSet<double> out;
  out.x1 = blocks.atoms;
  out.x2 = Tensor<double>({n, n, c2}, std::move(x2));
  out.x3 = Tensor<double>({n, n, n, c3}, std::move(x3));
  out.atom_mask = BoolTensor::full({n}, true);
  out.topo_dist = topo;
  out.n = n;
  return out;
}

// Applies an atom relabeling to a record (atom p of the result is atom
// perm[p] of the input). Used by equivariance checks.
inline MoleculeRecord permute_record(const MoleculeRecord& rec, const std::vector<int>& perm) {
  const int n = rec.n_atoms();
  std::vector<int> inv(static_cast<size_t>(n));
  for (int p = 0; p < n; ++p) inv[static_cast<size_t>(perm[static_cast<size_t>(p)])] = p;
  MoleculeRecord out = rec;
  for (int p = 0; p < n; ++p) {
    out.atoms[static_cast<size_t>(p)] = rec.atoms[static_cast<size_t>(perm[static_cast<size_t>(p)])];
    out.coords[static_cast<size_t>(p)] = rec.coords[static_cast<size_t>(perm[static_cast<size_t>(p)])];
  }
  for (Bond& b : out.bonds) {
    b.i = inv[static_cast<size_t>(b.i)];
    b.j = inv[static_cast<size_t>(b.j)];
  }
  return out;
}

}  // namespace gem2
