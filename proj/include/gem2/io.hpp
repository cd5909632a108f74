#pragma once

// Serialization: JSON-lines molecule records, the versioned feature-cache
// and checkpoint containers (little-endian), and canonical JSON for configs.
// Unknown config fields are rejected so silent typos cannot change a run.

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "gem2/featurize.hpp"
#include "gem2/model.hpp"
#include "gem2/train.hpp"

namespace gem2 {

using json = nlohmann::json;

// ---- enums <-> strings ----

namespace io_detail {

template <class E>
struct EnumNames {
  std::vector<std::pair<E, const char*>> items;
  const char* to_string(E e) const {
    for (const auto& [v, s] : items) {
      if (v == e) return s;
    }
    throw InputError("unknown enum value");
  }
  E from_string(const std::string& s, const char* what) const {
    for (const auto& [v, n] : items) {
      if (s == n) return v;
    }
    throw InputError(std::string("unknown ") + what + " '" + s + "'");
  }
};

inline const EnumNames<Chirality>& chirality_names() {
  static const EnumNames<Chirality> n{{{Chirality::cw, "CW"},
                                       {Chirality::ccw, "CCW"},
                                       {Chirality::unspecified, "unspecified"},
                                       {Chirality::other, "other"}}};
  return n;
}

inline const EnumNames<BondType>& bond_type_names() {
  static const EnumNames<BondType> n{{{BondType::single, "single"},
                                      {BondType::double_, "double"},
                                      {BondType::triple, "triple"},
                                      {BondType::aromatic, "aromatic"}}};
  return n;
}

inline const EnumNames<BondDir>& bond_dir_names() {
  static const EnumNames<BondDir> n{{{BondDir::none, "none"},
                                     {BondDir::begin_wedge, "begin_wedge"},
                                     {BondDir::begin_dash, "begin_dash"},
                                     {BondDir::end_wedge, "end_wedge"},
                                     {BondDir::end_dash, "end_dash"},
                                     {BondDir::either_double, "either_double"},
                                     {BondDir::unknown, "unknown"}}};
  return n;
}

inline const EnumNames<Hybridization>& hybridization_names() {
  static const EnumNames<Hybridization> n{{{Hybridization::sp, "sp"},
                                           {Hybridization::sp2, "sp2"},
                                           {Hybridization::sp3, "sp3"},
                                           {Hybridization::sp3d, "sp3d"},
                                           {Hybridization::sp3d2, "sp3d2"}}};
  return n;
}

inline void check_fields(const json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) {
      if (key == a) ok = true;
    }
    if (!ok) throw InputError(where + ": unknown field '" + key + "'");
  }
}

template <class T>
T require(const json& j, const char* field, const std::string& where) {
  if (!j.contains(field)) throw InputError(where + ": missing field '" + field + "'");
  try {
    return j.at(field).get<T>();
  } catch (const json::exception&) {
    throw InputError(where + ": field '" + std::string(field) + "' has the wrong type");
  }
}

}  // namespace io_detail

// ---- molecule records ----

inline MoleculeRecord molecule_from_json(const json& j, const std::string& where) {
  using namespace io_detail;
  check_fields(j, {"id", "label", "atoms", "bonds", "coords", "split"}, where);
  MoleculeRecord rec;
  rec.id = require<std::string>(j, "id", where);
  if (rec.id.empty()) throw InputError(where + ": empty id");
  rec.label = require<double>(j, "label", where);
  if (j.contains("split")) rec.split = j.at("split").get<std::string>();

  const auto atoms = require<json>(j, "atoms", where);
  for (const auto& a : atoms) {
    check_fields(a,
                 {"atomic_number", "formal_charge", "chirality_tag", "aromatic", "degree",
                  "num_hydrogens", "hybridization"},
                 where + " atom");
    Atom atom;
    atom.atomic_number = require<int>(a, "atomic_number", where + " atom");
    atom.formal_charge = require<int>(a, "formal_charge", where + " atom");
    atom.chirality_tag =
        chirality_names().from_string(require<std::string>(a, "chirality_tag", where), "chirality_tag");
    atom.aromatic = require<bool>(a, "aromatic", where + " atom");
    atom.degree = require<int>(a, "degree", where + " atom");
    atom.num_hydrogens = require<int>(a, "num_hydrogens", where + " atom");
    atom.hybridization = hybridization_names().from_string(
        require<std::string>(a, "hybridization", where), "hybridization");
    rec.atoms.push_back(atom);
  }

  const auto bonds = require<json>(j, "bonds", where);
  for (const auto& b : bonds) {
    check_fields(b, {"i", "j", "bond_type", "bond_dir", "in_ring"}, where + " bond");
    Bond bond;
    bond.i = require<int>(b, "i", where + " bond");
    bond.j = require<int>(b, "j", where + " bond");
    bond.bond_type =
        bond_type_names().from_string(require<std::string>(b, "bond_type", where), "bond_type");
    bond.bond_dir =
        bond_dir_names().from_string(require<std::string>(b, "bond_dir", where), "bond_dir");
    bond.in_ring = require<bool>(b, "in_ring", where + " bond");
    rec.bonds.push_back(bond);
  }

  const auto coords = require<json>(j, "coords", where);
  for (const auto& c : coords) {
    if (!c.is_array() || c.size() != 3) throw InputError(where + ": coords entries must be [x, y, z]");
    rec.coords.push_back({c[0].get<double>(), c[1].get<double>(), c[2].get<double>()});
  }
  rec.validate();
  return rec;
}

inline json molecule_to_json(const MoleculeRecord& rec) {
  using namespace io_detail;
  json atoms = json::array();
  for (const auto& a : rec.atoms) {
    atoms.push_back({{"atomic_number", a.atomic_number},
                     {"formal_charge", a.formal_charge},
                     {"chirality_tag", chirality_names().to_string(a.chirality_tag)},
                     {"aromatic", a.aromatic},
                     {"degree", a.degree},
                     {"num_hydrogens", a.num_hydrogens},
                     {"hybridization", hybridization_names().to_string(a.hybridization)}});
  }
  json bonds = json::array();
  for (const auto& b : rec.bonds) {
    bonds.push_back({{"i", b.i},
                     {"j", b.j},
                     {"bond_type", bond_type_names().to_string(b.bond_type)},
                     {"bond_dir", bond_dir_names().to_string(b.bond_dir)},
                     {"in_ring", b.in_ring}});
  }
  json coords = json::array();
  for (const auto& c : rec.coords) coords.push_back({c[0], c[1], c[2]});
  json j{{"id", rec.id}, {"label", rec.label}, {"atoms", atoms}, {"bonds", bonds}, {"coords", coords}};
  if (rec.split) j["split"] = *rec.split;
  return j;
}

inline MoleculeRecord parse_molecule_line(const std::string& line, size_t line_number) {
  const std::string where = "line " + std::to_string(line_number);
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw InputError(where + ": invalid JSON: " + e.what());
  }
  return molecule_from_json(j, where);
}

// Reads a JSONL dataset. With skip_bad, malformed lines are collected into
// 'errors' instead of aborting.
inline std::vector<MoleculeRecord> read_molecules(const std::string& path, bool skip_bad = false,
                                                  std::vector<std::string>* errors = nullptr) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open dataset '" + path + "'");
  std::vector<MoleculeRecord> out;
  std::string line;
  size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    try {
      out.push_back(parse_molecule_line(line, line_number));
    } catch (const InputError& e) {
      if (!skip_bad) throw;
      if (errors) errors->push_back(e.what());
    }
  }
  return out;
}

inline void write_molecules(const std::string& path, const std::vector<MoleculeRecord>& records) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path + "'");
  for (const auto& rec : records) out << molecule_to_json(rec).dump() << '\n';
}

// ---- binary containers ----

namespace io_detail {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <class T>
void write_pod(std::ostream& os, T v) {
  write_bytes(os, &v, sizeof v);
}

inline void read_bytes(std::istream& is, void* p, size_t n, const std::string& what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is) throw InputError("truncated container while reading " + what);
}

template <class T>
T read_pod(std::istream& is, const std::string& what) {
  T v;
  read_bytes(is, &v, sizeof v, what);
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
  write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is, const std::string& what) {
  const auto n = read_pod<uint32_t>(is, what);
  std::string s(n, '\0');
  read_bytes(is, s.data(), n, what);
  return s;
}

inline void write_array(std::ostream& os, const Tensor<double>& t) {
  write_pod<uint32_t>(os, static_cast<uint32_t>(t.shape().size()));
  for (int64_t d : t.shape()) write_pod<uint64_t>(os, static_cast<uint64_t>(d));
  write_bytes(os, t.data(), static_cast<size_t>(t.size()) * sizeof(double));
}

inline Tensor<double> read_array(std::istream& is, const std::string& what) {
  const auto rank = read_pod<uint32_t>(is, what);
  if (rank > 8) throw InputError(what + ": implausible tensor rank");
  Shape shape;
  for (uint32_t i = 0; i < rank; ++i) {
    shape.push_back(static_cast<int64_t>(read_pod<uint64_t>(is, what)));
  }
  std::vector<double> data(static_cast<size_t>(numel(shape)));
  read_bytes(is, data.data(), data.size() * sizeof(double), what);
  return Tensor<double>(std::move(shape), std::move(data));
}

inline void check_magic(std::istream& is, const char* magic, size_t len, const std::string& what) {
  std::vector<char> buf(len);
  read_bytes(is, buf.data(), len, what + " magic");
  if (std::memcmp(buf.data(), magic, len) != 0) {
    throw InputError(what + ": bad magic bytes");
  }
}

}  // namespace io_detail

constexpr char kFeatureMagic[] = "GEM2FS";  // 7 bytes on disk including NUL
constexpr char kCheckpointMagic[] = "GEM2CK";
constexpr uint16_t kContainerVersion = 1;

struct CachedFeatures {
  std::string id;
  double label = 0;
  FeatureSet<double> features;
};

inline void write_feature_cache(const std::string& path, const std::string& id, double label,
                                const FeatureSet<double>& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write feature cache '" + path + "'");
  io_detail::write_bytes(os, kFeatureMagic, 7);
  io_detail::write_pod<uint16_t>(os, kContainerVersion);
  io_detail::write_string(os, id);
  io_detail::write_pod<double>(os, label);
  io_detail::write_array(os, f.x1);
  io_detail::write_array(os, f.x2);
  io_detail::write_array(os, f.x3);
  Tensor<double> mask({f.n}, std::vector<double>(f.atom_mask.v.begin(), f.atom_mask.v.end()));
  io_detail::write_array(os, mask);
  Tensor<double> topo({f.n, f.n}, std::vector<double>(f.topo_dist.begin(), f.topo_dist.end()));
  io_detail::write_array(os, topo);
}

inline CachedFeatures read_feature_cache(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open feature cache '" + path + "'");
  io_detail::check_magic(is, kFeatureMagic, 7, "feature cache");
  const auto version = io_detail::read_pod<uint16_t>(is, "feature cache version");
  if (version != kContainerVersion) {
    throw InputError("feature cache '" + path + "': unsupported version " + std::to_string(version));
  }
  CachedFeatures out;
  out.id = io_detail::read_string(is, "feature cache id");
  out.label = io_detail::read_pod<double>(is, "feature cache label");
  out.features.x1 = io_detail::read_array(is, "x1");
  out.features.x2 = io_detail::read_array(is, "x2");
  out.features.x3 = io_detail::read_array(is, "x3");
  const auto mask = io_detail::read_array(is, "atom_mask");
  const auto topo = io_detail::read_array(is, "topo_dist");
  out.features.n = static_cast<int>(out.features.x1.shape()[0]);
  out.features.atom_mask.shape = {out.features.n};
  out.features.atom_mask.v.assign(mask.vec().begin(), mask.vec().end());
  out.features.topo_dist.assign(topo.vec().begin(), topo.vec().end());
  return out;
}

// ---- config JSON ----

inline json model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["L"] = cfg.L;
  j["M"] = cfg.M;
  j["c"] = cfg.c;
  j["n_heads"] = cfg.n_heads;
  j["p_drop"] = cfg.p_drop;
  j["ff_expansion"] = cfg.ff_expansion;
  j["attention_logit_scale"] =
      cfg.logit_scale == LogitScale::none ? "none" : "inverse_sqrt_head_dim";
  j["long_range_level"] = cfg.long_range_level ? json(*cfg.long_range_level) : json(nullptr);
  j["c_outer"] = cfg.c_outer;
  j["feat_widths"] = cfg.feat_widths;
  j["init_seed"] = cfg.init_seed;
  return j;
}

inline ModelConfig model_config_from_json(const json& j) {
  io_detail::check_fields(j,
                          {"L", "M", "c", "n_heads", "p_drop", "ff_expansion",
                           "attention_logit_scale", "long_range_level", "c_outer", "feat_widths",
                           "init_seed"},
                          "model config");
  ModelConfig cfg;
  if (j.contains("L")) cfg.L = j.at("L").get<int>();
  if (j.contains("M")) cfg.M = j.at("M").get<int>();
  if (j.contains("c")) cfg.c = j.at("c").get<std::array<int, 3>>();
  if (j.contains("n_heads")) cfg.n_heads = j.at("n_heads").get<std::array<int, 3>>();
  if (j.contains("p_drop")) cfg.p_drop = j.at("p_drop").get<std::array<double, 3>>();
  if (j.contains("ff_expansion")) cfg.ff_expansion = j.at("ff_expansion").get<int>();
  if (j.contains("attention_logit_scale")) {
    const auto s = j.at("attention_logit_scale").get<std::string>();
    if (s == "none") {
      cfg.logit_scale = LogitScale::none;
    } else if (s == "inverse_sqrt_head_dim") {
      cfg.logit_scale = LogitScale::inverse_sqrt_head_dim;
    } else {
      throw InputError("model config: unknown attention_logit_scale '" + s + "'");
    }
  }
  if (j.contains("long_range_level") && !j.at("long_range_level").is_null()) {
    cfg.long_range_level = j.at("long_range_level").get<int>();
  }
  if (j.contains("c_outer")) cfg.c_outer = j.at("c_outer").get<int>();
  if (j.contains("feat_widths")) cfg.feat_widths = j.at("feat_widths").get<std::array<int, 3>>();
  if (j.contains("init_seed")) cfg.init_seed = j.at("init_seed").get<uint64_t>();
  return cfg;
}

inline json train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["batch_size"] = cfg.batch_size;
  j["base_lr"] = cfg.base_lr;
  j["warmup_start_frac"] = cfg.warmup_start_frac;
  j["warmup_epochs"] = cfg.warmup_epochs;
  j["hold_epochs"] = cfg.hold_epochs;
  j["decay_every"] = cfg.decay_every;
  j["decay_factor"] = cfg.decay_factor;
  j["total_epochs"] = cfg.total_epochs;
  j["max_steps"] = cfg.max_steps;
  j["ema_decay"] = cfg.ema_decay;
  j["loss"] = cfg.loss == LossKind::l1 ? "l1" : "binary_cross_entropy";
  j["seed"] = cfg.seed;
  j["val_fraction"] = cfg.val_fraction;
  return j;
}

inline TrainConfig train_config_from_json(const json& j) {
  io_detail::check_fields(j,
                          {"batch_size", "base_lr", "warmup_start_frac", "warmup_epochs",
                           "hold_epochs", "decay_every", "decay_factor", "total_epochs",
                           "max_steps", "ema_decay", "loss", "seed", "val_fraction"},
                          "train config");
  TrainConfig cfg;
  if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
  if (j.contains("base_lr")) cfg.base_lr = j.at("base_lr").get<double>();
  if (j.contains("warmup_start_frac")) cfg.warmup_start_frac = j.at("warmup_start_frac").get<double>();
  if (j.contains("warmup_epochs")) cfg.warmup_epochs = j.at("warmup_epochs").get<double>();
  if (j.contains("hold_epochs")) cfg.hold_epochs = j.at("hold_epochs").get<double>();
  if (j.contains("decay_every")) cfg.decay_every = j.at("decay_every").get<double>();
  if (j.contains("decay_factor")) cfg.decay_factor = j.at("decay_factor").get<double>();
  if (j.contains("total_epochs")) cfg.total_epochs = j.at("total_epochs").get<int>();
  if (j.contains("max_steps")) cfg.max_steps = j.at("max_steps").get<int>();
  if (j.contains("ema_decay")) cfg.ema_decay = j.at("ema_decay").get<double>();
  if (j.contains("loss")) {
    const auto s = j.at("loss").get<std::string>();
    if (s == "l1") {
      cfg.loss = LossKind::l1;
    } else if (s == "binary_cross_entropy") {
      cfg.loss = LossKind::binary_cross_entropy;
    } else {
      throw InputError("train config: unknown loss '" + s + "'");
    }
  }
  if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
  if (j.contains("val_fraction")) cfg.val_fraction = j.at("val_fraction").get<double>();
  return cfg;
}

inline json featurizer_config_to_json(const FeaturizerConfig& cfg) {
  json j;
  j["gamma"] = cfg.hop.gamma;
  j["hop_range"] = {cfg.hop.lo, cfg.hop.hi};
  j["dist_range"] = {cfg.dist.lo, cfg.dist.hi};
  j["angle_range"] = {cfg.angle.lo, cfg.angle.hi};
  return j;
}

inline FeaturizerConfig featurizer_config_from_json(const json& j) {
  io_detail::check_fields(j, {"gamma", "hop_range", "dist_range", "angle_range"}, "featurizer config");
  FeaturizerConfig cfg;
  double gamma = cfg.hop.gamma;
  if (j.contains("gamma")) gamma = j.at("gamma").get<double>();
  auto range = [&](const char* field, RbfSpec spec) {
    if (j.contains(field)) {
      const auto r = j.at(field).get<std::array<double, 2>>();
      spec.lo = r[0];
      spec.hi = r[1];
    }
    spec.gamma = gamma;
    return spec;
  };
  cfg.hop = range("hop_range", cfg.hop);
  cfg.dist = range("dist_range", cfg.dist);
  cfg.angle = range("angle_range", cfg.angle);
  return cfg;
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  FeaturizerConfig featurizer;
  std::string dataset;
  std::string out_dir;
  uint64_t seed = 0;
  std::string precision = "float64";
};

inline json run_config_to_json(const RunConfig& cfg) {
  json j;
  j["model"] = model_config_to_json(cfg.model);
  j["train"] = train_config_to_json(cfg.train);
  j["featurizer"] = featurizer_config_to_json(cfg.featurizer);
  j["dataset"] = cfg.dataset;
  j["out_dir"] = cfg.out_dir;
  j["seed"] = cfg.seed;
  j["precision"] = cfg.precision;
  return j;
}

inline RunConfig run_config_from_json(const json& j) {
  io_detail::check_fields(
      j, {"preset", "model", "train", "featurizer", "dataset", "out_dir", "seed", "precision"},
      "run config");
  RunConfig cfg;
  if (j.contains("preset")) {
    const auto p = j.at("preset").get<std::string>();
    if (p == "quantum") {
      cfg.model.c = {256, 256, 256};
      cfg.model.p_drop = {0.05, 0.05, 0.05};
      cfg.train.batch_size = 512;
      cfg.train.base_lr = 4e-4;
      cfg.train.loss = LossKind::l1;
    } else if (p == "drug") {
      cfg.model.c = {128, 128, 128};
      cfg.model.p_drop = {0.2, 0.2, 0.2};
      cfg.train.batch_size = 256;
      cfg.train.base_lr = 2e-4;
      cfg.train.loss = LossKind::binary_cross_entropy;
    } else {
      throw InputError("run config: unknown preset '" + p + "'");
    }
  }
  if (j.contains("model")) {
    json merged = model_config_to_json(cfg.model);
    merged.update(j.at("model"));
    cfg.model = model_config_from_json(merged);
  }
  if (j.contains("train")) {
    json merged = train_config_to_json(cfg.train);
    merged.update(j.at("train"));
    cfg.train = train_config_from_json(merged);
  }
  if (j.contains("featurizer")) cfg.featurizer = featurizer_config_from_json(j.at("featurizer"));
  if (j.contains("dataset")) cfg.dataset = j.at("dataset").get<std::string>();
  if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
  if (j.contains("precision")) {
    cfg.precision = j.at("precision").get<std::string>();
    if (cfg.precision != "float64" && cfg.precision != "float32") {
      throw InputError("run config: precision must be float64 or float32");
    }
  }
  return cfg;
}

// Paths of fields whose values differ, as "path: a vs b".
inline void config_diff_into(const json& a, const json& b, const std::string& path,
                             std::vector<std::string>& out) {
  if (a == b) return;
  if (a.is_object() && b.is_object()) {
    for (const auto& [key, value] : a.items()) {
      const std::string sub = path.empty() ? key : path + "." + key;
      if (!b.contains(key)) {
        out.push_back(sub + ": " + value.dump() + " vs <missing>");
      } else {
        config_diff_into(value, b.at(key), sub, out);
      }
    }
    for (const auto& [key, value] : b.items()) {
      if (!a.contains(key)) {
        out.push_back((path.empty() ? key : path + "." + key) + ": <missing> vs " + value.dump());
      }
    }
    return;
  }
  out.push_back(path + ": " + a.dump() + " vs " + b.dump());
}

inline std::vector<std::string> config_diff(const json& a, const json& b) {
  std::vector<std::string> out;
  config_diff_into(a, b, "", out);
  return out;
}

// ---- checkpoints ----

template <class Real>
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const FeaturizerConfig& feat_cfg, const ParamStore<Real>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write checkpoint '" + path + "'");
  io_detail::write_bytes(os, kCheckpointMagic, 7);
  io_detail::write_pod<uint16_t>(os, kContainerVersion);
  json echo{{"model", model_config_to_json(cfg)}, {"featurizer", featurizer_config_to_json(feat_cfg)}};
  io_detail::write_string(os, echo.dump());
  io_detail::write_pod<uint32_t>(os, static_cast<uint32_t>(params.size()));
  for (int i = 0; i < params.size(); ++i) {
    io_detail::write_string(os, params.name(i));
    io_detail::write_array(os, cast_tensor<double>(params.value(i)));
  }
}

struct LoadedCheckpoint {
  ModelConfig config;
  FeaturizerConfig featurizer;
  json config_json;  // combined {model, featurizer} echo
  std::vector<std::pair<std::string, Tensor<double>>> params;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint '" + path + "'");
  io_detail::check_magic(is, kCheckpointMagic, 7, "checkpoint");
  const auto version = io_detail::read_pod<uint16_t>(is, "checkpoint version");
  if (version != kContainerVersion) {
    throw InputError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
  }
  LoadedCheckpoint out;
  out.config_json = json::parse(io_detail::read_string(is, "checkpoint config"));
  out.config = model_config_from_json(out.config_json.at("model"));
  out.featurizer = featurizer_config_from_json(out.config_json.at("featurizer"));
  const auto n = io_detail::read_pod<uint32_t>(is, "checkpoint parameter count");
  for (uint32_t i = 0; i < n; ++i) {
    auto name = io_detail::read_string(is, "parameter name");
    auto value = io_detail::read_array(is, "parameter '" + name + "'");
    out.params.emplace_back(std::move(name), std::move(value));
  }
  return out;
}

// Restores checkpoint parameters into a freshly built model; names must
// cover the store exactly.
template <class Real>
Gem2Model<Real> model_from_checkpoint(const LoadedCheckpoint& ck) {
  Gem2Model<Real> model(ck.config);
  auto& store = model.params();
  if (static_cast<int>(ck.params.size()) != store.size()) {
    throw ConfigError("checkpoint has " + std::to_string(ck.params.size()) + " parameters, model needs " +
                      std::to_string(store.size()));
  }
  for (const auto& [name, value] : ck.params) {
    const int idx = store.index_of(name);
    if (idx < 0) throw ConfigError("checkpoint parameter '" + name + "' is unknown to the model");
    store.set_value(idx, cast_tensor<Real>(value));
  }
  return model;
}

inline json metric_entry_to_json(const MetricEntry& e) {
  return json{{"epoch", e.epoch},      {"step", e.step},
              {"lr", e.lr},            {"train_loss", e.train_loss},
              {"val_metric", e.val_metric}, {"wall_ms", e.wall_ms}};
}

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace gem2
