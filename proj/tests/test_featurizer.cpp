#include <catch2/catch_amalgamated.hpp>

#include <numbers>
#include <random>

#include "gem2/featurize.hpp"
#include "support/testutil.hpp"

using namespace gem2;
using testutil::close;

namespace {

MoleculeRecord path_molecule(int n, double spacing = 1.5) {
  MoleculeRecord rec;
  rec.id = "path" + std::to_string(n);
  for (int i = 0; i < n; ++i) {
    Atom a;
    a.atomic_number = 6;
    a.degree = (i == 0 || i == n - 1) ? (n > 1 ? 1 : 0) : 2;
    rec.atoms.push_back(a);
    rec.coords.push_back({spacing * i, 0.0, 0.0});
  }
  for (int i = 0; i + 1 < n; ++i) rec.bonds.push_back(Bond{i, i + 1});
  return rec;
}

MoleculeRecord ring_molecule(int n) {
  MoleculeRecord rec;
  rec.id = "ring" + std::to_string(n);
  for (int i = 0; i < n; ++i) {
    Atom a;
    a.atomic_number = 6;
    a.degree = 2;
    rec.atoms.push_back(a);
    const double th = 2.0 * std::numbers::pi * i / n;
    rec.coords.push_back({1.4 * std::cos(th), 1.4 * std::sin(th), 0.0});
  }
  for (int i = 0; i < n; ++i) rec.bonds.push_back(Bond{i, (i + 1) % n, BondType::aromatic});
  return rec;
}

}  // namespace

TEST_CASE("one-hot atom blocks") {
  MoleculeRecord rec = path_molecule(2);
  rec.atoms[1].aromatic = true;
  auto blocks = one_hot_features(rec);
  // carbon lights index 6 of the 119-wide atom-type block
  CHECK(blocks.atoms.at({0, 6}) == 1.0);
  for (int k = 0; k < 119; ++k) {
    if (k != 6) CHECK(blocks.atoms.at({0, k}) == 0.0);
  }
  // aromaticity block sits right after atom type
  CHECK(blocks.atoms.at({0, 119}) == 1.0);
  CHECK(blocks.atoms.at({0, 120}) == 0.0);
  CHECK(blocks.atoms.at({1, 119}) == 0.0);
  CHECK(blocks.atoms.at({1, 120}) == 1.0);
  // exactly one 1 per block
  int ones = 0;
  for (int k = 0; k < FeaturizerConfig{}.x1_width(); ++k) ones += blocks.atoms.at({0, k}) == 1.0;
  CHECK(ones == 7);
}

TEST_CASE("pair one-hot blocks carry a no-bond category") {
  auto rec = path_molecule(3);
  auto blocks = one_hot_features(rec);
  const int dirw = FeaturizerConfig::kBondDir;
  const int typew = FeaturizerConfig::kBondType;
  // bonded pair (0,1): single bond type, not the no-bond slot
  CHECK(blocks.pairs.at({0, 1, dirw + 0}) == 1.0);
  CHECK(blocks.pairs.at({0, 1, dirw + typew - 1}) == 0.0);
  // non-bonded pair (0,2): no-bond slots set, all true categories clear
  CHECK(blocks.pairs.at({0, 2, dirw + typew - 1}) == 1.0);
  for (int k = 0; k < typew - 1; ++k) CHECK(blocks.pairs.at({0, 2, dirw + k}) == 0.0);
  CHECK(blocks.pairs.at({0, 2, dirw - 1}) == 1.0);
  // diagonal is treated as non-bonded
  CHECK(blocks.pairs.at({1, 1, dirw + typew - 1}) == 1.0);
}

TEST_CASE("out-of-range categories name the atom") {
  auto rec = path_molecule(2);
  rec.atoms[1].atomic_number = 240;
  try {
    one_hot_features(rec);
    FAIL("expected FeatureError");
  } catch (const FeatureError& e) {
    CHECK(std::string(e.what()).find("atom 1") != std::string::npos);
  }
}

TEST_CASE("record validation rejects bad bonds and coords") {
  auto rec = path_molecule(3);
  rec.bonds.push_back(Bond{1, 0});  // duplicate of (0,1)
  CHECK_THROWS_AS(rec.validate(), InputError);

  auto rec2 = path_molecule(3);
  rec2.bonds[0].j = 7;
  CHECK_THROWS_AS(rec2.validate(), InputError);

  auto rec3 = path_molecule(3);
  rec3.coords.pop_back();
  CHECK_THROWS_AS(rec3.validate(), InputError);
}

TEST_CASE("topo_distance on paths, rings, and disconnected graphs") {
  auto p = path_molecule(3);
  auto d = topo_distance(p);
  CHECK(d[0 * 3 + 2] == 2);
  for (int i = 0; i < 3; ++i) CHECK(d[static_cast<size_t>(i) * 3 + i] == 0);

  auto benzene = ring_molecule(6);
  auto db = topo_distance(benzene);
  CHECK(db[0 * 6 + 3] == 3);  // opposite atoms of a 6-cycle
  CHECK(db[0 * 6 + 5] == 1);

  // two disconnected atoms: sentinel N
  MoleculeRecord iso;
  iso.id = "iso";
  iso.atoms = {Atom{}, Atom{}};
  iso.coords = {{0, 0, 0}, {5, 0, 0}};
  auto di = topo_distance(iso);
  CHECK(di[1] == 2);
  CHECK(di[2] == 2);
}

TEST_CASE("topo_distance satisfies the triangle inequality on connected graphs") {
  std::mt19937_64 eng(17);
  for (int rep = 0; rep < 10; ++rep) {
    const int n = 4 + static_cast<int>(eng() % 5);
    MoleculeRecord rec;
    rec.id = "rand";
    for (int i = 0; i < n; ++i) {
      Atom a;
      rec.atoms.push_back(a);
      rec.coords.push_back({static_cast<double>(i), 0, 0});
    }
    for (int i = 1; i < n; ++i) rec.bonds.push_back(Bond{static_cast<int>(eng() % i), i});
    auto d = topo_distance(rec);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k)
          CHECK(d[static_cast<size_t>(i) * n + j] <=
                d[static_cast<size_t>(i) * n + k] + d[static_cast<size_t>(k) * n + j]);
  }
}

TEST_CASE("pair_distance geometry") {
  MoleculeRecord rec;
  rec.id = "tri";
  rec.atoms = {Atom{}, Atom{}};
  rec.coords = {{0, 0, 0}, {3, 4, 0}};
  auto d = pair_distance(rec);
  CHECK(d.at({0, 1}) == 5.0);
  CHECK(d.at({0, 0}) == 0.0);

  std::mt19937_64 eng(29);
  MoleculeRecord r2;
  r2.id = "rand";
  for (int i = 0; i < 5; ++i) {
    r2.atoms.push_back(Atom{});
    r2.coords.push_back({gem2::uniform01(eng), gem2::uniform01(eng), gem2::uniform01(eng)});
  }
  auto d2 = pair_distance(r2);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) CHECK(d2.at({i, j}) == d2.at({j, i}));
}

TEST_CASE("triplet_angles on reference triangles") {
  MoleculeRecord eq;
  eq.id = "equilateral";
  eq.atoms = {Atom{}, Atom{}, Atom{}};
  eq.coords = {{0, 0, 0}, {1, 0, 0}, {0.5, std::sqrt(3.0) / 2.0, 0}};
  auto a = triplet_angles(eq);
  for (int c = 0; c < 3; ++c) CHECK(close(a.at({0, 1, 2, c}), std::numbers::pi / 3.0, 1e-12));

  MoleculeRecord ri;
  ri.id = "right-isoceles";
  ri.atoms = {Atom{}, Atom{}, Atom{}};
  ri.coords = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  auto b = triplet_angles(ri);
  CHECK(close(b.at({0, 1, 2, 0}), std::numbers::pi / 2.0, 1e-12));
  CHECK(close(b.at({0, 1, 2, 1}), std::numbers::pi / 4.0, 1e-12));
  CHECK(close(b.at({0, 1, 2, 2}), std::numbers::pi / 4.0, 1e-12));

  // repeated index and collinear triplets are zeroed
  for (int c = 0; c < 3; ++c) CHECK(a.at({0, 0, 2, c}) == 0.0);
  MoleculeRecord col = path_molecule(3);
  auto z = triplet_angles(col);
  for (int c = 0; c < 3; ++c) CHECK(z.at({0, 1, 2, c}) == 0.0);
}

TEST_CASE("rbf_expand values and smoothness") {
  RbfSpec spec{10.0, 0.0, 2.0};
  const auto centers = spec.centers();
  CHECK(centers.size() == 21);
  CHECK(centers.front() == 0.0);
  CHECK(close(centers.back(), 2.0, 1e-12));

  auto e = rbf_expand(Tensor<double>({1}, {centers[5]}), spec);
  CHECK(e.at({0, 5}) == 1.0);

  auto e2 = rbf_expand(Tensor<double>({1}, {centers[5] + 0.1}), spec);
  CHECK(close(e2.at({0, 5}), std::exp(-0.1), 1e-12));

  for (int m = 0; m < 21; ++m) {
    CHECK(e2.at({0, m}) > 0.0);
    CHECK(e2.at({0, m}) <= 1.0);
  }

  // d e_m / dx == -2 gamma (x - mu_m) e_m(x)
  const double x0 = 0.73;
  const double h = 1e-6;
  auto lo = rbf_expand(Tensor<double>({1}, {x0 - h}), spec);
  auto hi = rbf_expand(Tensor<double>({1}, {x0 + h}), spec);
  auto mid = rbf_expand(Tensor<double>({1}, {x0}), spec);
  for (int m = 0; m < 21; ++m) {
    const double fd = (hi.at({0, m}) - lo.at({0, m})) / (2 * h);
    const double analytic = -2.0 * spec.gamma * (x0 - centers[static_cast<size_t>(m)]) * mid.at({0, m});
    CHECK(close(fd, analytic, 1e-6, 1e-8));
  }
}

TEST_CASE("featurize composes blocks with the configured widths") {
  FeaturizerConfig cfg;
  MoleculeRecord rec = path_molecule(2);
  auto fs = featurize(rec, cfg);
  CHECK(fs.x1.shape() == Shape{2, cfg.x1_width()});
  CHECK(fs.x2.shape() == Shape{2, 2, cfg.x2_width()});
  CHECK(fs.x3.shape() == Shape{2, 2, 2, cfg.x3_width()});

  // bonded carbons at 1.5 A: single-bond category set, distance RBF peaks at 1.5
  const int pw = FeaturizerConfig::kBondDir + FeaturizerConfig::kBondType + FeaturizerConfig::kInRing;
  CHECK(fs.x2.at({0, 1, FeaturizerConfig::kBondDir + 0}) == 1.0);
  const int dist_base = pw + cfg.hop.count();
  int peak = 0;
  double best = -1;
  for (int m = 0; m < cfg.dist.count(); ++m) {
    const double v = fs.x2.at({0, 1, dist_base + m});
    if (v > best) {
      best = v;
      peak = m;
    }
  }
  CHECK(close(cfg.dist.centers()[static_cast<size_t>(peak)], 1.5, 1e-9));
  CHECK(best == 1.0);
}

TEST_CASE("featurize single-atom molecule") {
  MoleculeRecord rec;
  rec.id = "one";
  rec.atoms = {Atom{}};
  rec.coords = {{0, 0, 0}};
  auto fs = featurize(rec);
  CHECK(fs.n == 1);
  CHECK(fs.x2.shape()[0] == 1);
  CHECK(fs.x3.shape()[2] == 1);
  CHECK(fs.topo_dist[0] == 0);
}

TEST_CASE("featurize is permutation equivariant") {
  std::mt19937_64 eng(37);
  auto rec = ring_molecule(5);
  rec.atoms[2].atomic_number = 8;
  rec.atoms[4].num_hydrogens = 2;
  rec.bonds[1].bond_type = BondType::double_;
  rec.bonds[2].bond_dir = BondDir::begin_wedge;

  std::vector<int> perm{3, 0, 4, 1, 2};
  auto fs = featurize(rec);
  auto fp = featurize(permute_record(rec, perm));

  const int n = 5;
  const auto c1 = fs.x1.shape()[1];
  for (int p = 0; p < n; ++p)
    for (int c = 0; c < c1; ++c) CHECK(fp.x1.at({p, c}) == fs.x1.at({perm[static_cast<size_t>(p)], c}));
  const auto c2 = fs.x2.shape()[2];
  for (int p = 0; p < n; ++p)
    for (int q = 0; q < n; ++q)
      for (int c = 0; c < c2; ++c)
        CHECK(fp.x2.at({p, q, c}) ==
              fs.x2.at({perm[static_cast<size_t>(p)], perm[static_cast<size_t>(q)], c}));
  const auto c3 = fs.x3.shape()[3];
  for (int p = 0; p < n; ++p)
    for (int q = 0; q < n; ++q)
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < c3; ++c)
          CHECK(fp.x3.at({p, q, r, c}) == fs.x3.at({perm[static_cast<size_t>(p)],
                                                    perm[static_cast<size_t>(q)],
                                                    perm[static_cast<size_t>(r)], c}));
}

TEST_CASE("x2 symmetry for symmetric source features") {
  auto rec = ring_molecule(6);
  rec.bonds[0].bond_dir = BondDir::begin_wedge;  // asymmetric feature, excluded below
  auto fs = featurize(rec);
  const int pw = FeaturizerConfig::kBondDir + FeaturizerConfig::kBondType + FeaturizerConfig::kInRing;
  const auto c2 = fs.x2.shape()[2];
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) {
      for (int c = FeaturizerConfig::kBondDir; c < c2; ++c) {
        CHECK(fs.x2.at({i, j, c}) == fs.x2.at({j, i, c}));
      }
    }
  }
  (void)pw;
}
