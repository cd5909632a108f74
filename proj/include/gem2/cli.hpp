#pragma once

// Command-line front end: synthetic data generation, featurization with an
// on-disk cache, training, evaluation, kernel benchmarking, and attention
// inspection. Exit codes: 0 success, 2 input error, 3 numeric failure,
// 4 config mismatch.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "gem2/bench.hpp"
#include "gem2/io.hpp"
#include "gem2/synthetic.hpp"
#include "gem2/train.hpp"

namespace gem2::cli {

namespace fs = std::filesystem;

inline int worker_count() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (const char* env = std::getenv("GEM2_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) n = std::min(n, cap);
  }
  return n;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline std::array<int, 3> feature_widths(const FeaturizerConfig& fc) {
  return {fc.x1_width(), fc.x2_width(), fc.x3_width()};
}

// ---- featurize ----

inline int cmd_featurize(const std::string& input, const std::string& out_dir, bool skip_bad,
                         const std::optional<std::string>& config_path, std::ostream& out,
                         std::ostream& err) {
  FeaturizerConfig fc;
  if (config_path) {
    const auto rc = run_config_from_json(read_json_file(*config_path));
    fc = rc.featurizer;
  }
  std::ifstream in(input);
  if (!in) throw InputError("cannot open dataset '" + input + "'");
  fs::create_directories(out_dir);

  struct Item {
    std::string line;
    size_t line_number = 0;
    MoleculeRecord record;
    std::string hash;
    std::string file;
    bool skip = false;
  };
  std::vector<Item> items;
  std::string line;
  size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    Item item;
    item.line = line;
    item.line_number = line_number;
    try {
      item.record = parse_molecule_line(line, line_number);
    } catch (const InputError& e) {
      if (!skip_bad) throw;
      err << "skipped: " << e.what() << "\n";
      continue;
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(item.line)));
    item.hash = buf;
    item.file = item.hash + ".gem2fs";
    items.push_back(std::move(item));
  }

  for (size_t i = 0; i < items.size(); ++i) {
    for (size_t j = i + 1; j < items.size(); ++j) {
      if (items[i].record.id == items[j].record.id) {
        throw InputError("duplicate molecule id '" + items[i].record.id + "' (lines " +
                         std::to_string(items[i].line_number) + " and " +
                         std::to_string(items[j].line_number) + ")");
      }
    }
  }

  // previous manifest makes re-runs skip unchanged inputs
  const std::string manifest_path = out_dir + "/manifest.json";
  if (fs::exists(manifest_path)) {
    const auto old = read_json_file(manifest_path);
    for (auto& item : items) {
      for (const auto& entry : old.at("entries")) {
        if (entry.at("id") == item.record.id && entry.at("hash") == item.hash &&
            fs::exists(out_dir + "/" + entry.at("file").get<std::string>())) {
          item.skip = true;
          item.file = entry.at("file").get<std::string>();
        }
      }
    }
  }

  const int threads = std::min<int>(worker_count(), std::max<size_t>(items.size(), 1));
  std::vector<std::thread> pool;
  std::atomic<size_t> cursor{0};
  std::atomic<bool> failed{false};
  std::string failure;
  std::mutex failure_mu;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const size_t i = cursor.fetch_add(1);
        if (i >= items.size() || failed.load()) return;
        if (items[i].skip) continue;
        try {
          const auto f = featurize(items[i].record, fc);
          write_feature_cache(out_dir + "/" + items[i].file, items[i].record.id,
                              items[i].record.label, f);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lock(failure_mu);
          failed = true;
          failure = "molecule '" + items[i].record.id + "': " + e.what();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failed) throw InputError(failure);

  json entries = json::array();
  size_t skipped = 0;
  for (const auto& item : items) {
    entries.push_back({{"id", item.record.id}, {"hash", item.hash}, {"file", item.file}});
    if (item.skip) ++skipped;
  }
  std::ofstream mout(manifest_path);
  mout << json{{"entries", entries}}.dump(2) << "\n";
  out << json{{"cached", items.size() - skipped}, {"skipped", skipped},
              {"manifest", manifest_path}}
             .dump()
      << "\n";
  return 0;
}

// ---- train ----

template <class Real>
int run_train(RunConfig rc, std::ostream& out, std::ostream& err) {
  auto records = read_molecules(rc.dataset);
  if (records.empty()) throw InputError("dataset '" + rc.dataset + "' is empty");

  rc.model.feat_widths = feature_widths(rc.featurizer);
  ModelConfig mc = rc.model;
  mc.init_seed = mix_seed(rc.seed, rc.model.init_seed);
  TrainConfig tc = rc.train;
  tc.seed = mix_seed(rc.seed, rc.train.seed);
  mc.validate();
  tc.validate();

  fs::create_directories(rc.out_dir);
  {
    std::ofstream cfg_out(rc.out_dir + "/config.resolved.json");
    cfg_out << run_config_to_json(rc).dump(2) << "\n";
  }

  Gem2Model<Real> model(mc);
  std::ofstream metrics(rc.out_dir + "/metrics.jsonl");
  auto result = train(model, records, tc, rc.featurizer, [&](const MetricEntry& e) {
    metrics << metric_entry_to_json(e).dump() << "\n";
    metrics.flush();
    err << "epoch " << e.epoch << " step " << e.step << " lr " << e.lr << " train_loss "
        << e.train_loss << " val " << e.val_metric << "\n";
  });

  load_parameters(model.params(), result.best_params);
  const std::string ck_path = rc.out_dir + "/checkpoint.gem2ck";
  save_checkpoint(ck_path, mc, rc.featurizer, model.params());

  out << json{{"checkpoint", ck_path},
              {"best_epoch", result.best_epoch},
              {"best_val", result.best_val},
              {"steps", result.steps},
              {"aborted", result.aborted}}
             .dump()
      << "\n";
  if (result.aborted) {
    err << "training aborted: " << result.abort_reason << " (best checkpoint kept)\n";
    return 3;
  }
  return 0;
}

inline int cmd_train(const std::string& config_path, std::ostream& out, std::ostream& err) {
  const auto rc = run_config_from_json(read_json_file(config_path));
  if (rc.dataset.empty()) throw InputError("run config: 'dataset' is required");
  if (rc.out_dir.empty()) throw InputError("run config: 'out_dir' is required");
  if (rc.precision == "float32") return run_train<float>(rc, out, err);
  return run_train<double>(rc, out, err);
}

// ---- eval ----

inline int cmd_eval(const std::string& checkpoint, const std::string& dataset, bool group_topo,
                    std::optional<int> long_range_level, const std::optional<std::string>& config_path,
                    const std::string& metric, const std::optional<std::string>& out_path,
                    std::ostream& out, std::ostream& err) {
  const auto ck = load_checkpoint(checkpoint);
  if (config_path) {
    auto rc = run_config_from_json(read_json_file(*config_path));
    rc.model.feat_widths = feature_widths(rc.featurizer);
    rc.model.init_seed = mix_seed(rc.seed, rc.model.init_seed);
    const json want{{"model", model_config_to_json(rc.model)},
                    {"featurizer", featurizer_config_to_json(rc.featurizer)}};
    const auto diff = config_diff(want, ck.config_json);
    if (!diff.empty()) {
      err << "config/checkpoint mismatch:\n";
      for (const auto& d : diff) err << "  " << d << "\n";
      throw ConfigError("config does not match checkpoint '" + checkpoint + "'");
    }
  }
  auto model = model_from_checkpoint<double>(ck);
  const auto records = read_molecules(dataset);
  if (records.empty()) throw InputError("dataset '" + dataset + "' is empty");

  auto predict = [&](const MoleculeRecord& rec) {
    return model.predict(featurize(rec, ck.featurizer), long_range_level);
  };

  json report;
  report["n"] = records.size();
  if (long_range_level) report["long_range_level"] = *long_range_level;

  if (metric == "auc") {
    if (group_topo) throw InputError("grouped evaluation reports MAE; drop --metric auc");
    std::vector<double> scores, labels;
    for (const auto& rec : records) {
      scores.push_back(predict(rec));
      labels.push_back(rec.label);
    }
    report["metric"] = "roc_auc";
    report["value"] = roc_auc(scores, labels);
  } else if (metric == "mae") {
    if (group_topo) {
      const auto ev = eval_grouped(records, predict);
      report["metric"] = "mae";
      report["value"] = ev.overall_mae;
      json groups;
      auto put = [&](const char* name, const std::optional<GroupStats>& g) {
        if (g) groups[name] = {{"count", g->count}, {"mae", g->mae}};
      };
      put("short", ev.short_range);
      put("moderate", ev.moderate_range);
      put("long", ev.long_range);
      report["groups"] = groups;
    } else {
      std::vector<double> preds, labels;
      for (const auto& rec : records) {
        preds.push_back(predict(rec));
        labels.push_back(rec.label);
      }
      report["metric"] = "mae";
      report["value"] = mean_absolute_error(preds, labels);
    }
  } else {
    throw InputError("unknown metric '" + metric + "' (use mae or auc)");
  }

  const std::string text = report.dump();
  out << text << "\n";
  if (out_path) {
    std::ofstream f(*out_path);
    f << text << "\n";
  }
  return 0;
}

// ---- bench ----

inline int cmd_bench(const std::vector<int>& orders, const std::vector<int64_t>& sizes,
                     const std::string& mode, const BenchOptions& opt,
                     const std::optional<std::string>& out_path, std::ostream& out) {
  if (orders.empty() || sizes.empty()) throw InputError("bench: need --orders and --sizes");
  AttnKind kind;
  if (mode == "axial") {
    kind = AttnKind::axial;
  } else if (mode == "full") {
    kind = AttnKind::full;
  } else {
    throw InputError("bench: mode must be axial or full");
  }
  const auto rows = run_bench(orders, sizes, kind, opt);
  std::ostringstream csv;
  csv << "m,N,mode,wall_ns,mac_count\n";
  for (const auto& r : rows) {
    csv << r.m << ',' << r.n << ',' << r.mode << ',' << r.wall_ns << ',' << r.mac_count << '\n';
  }
  out << csv.str();
  if (out_path) {
    std::ofstream f(*out_path);
    f << csv.str();
  }
  return 0;
}

// ---- inspect attention ----

inline int cmd_inspect_attention(const std::string& checkpoint, const std::string& molecule_path,
                                 const std::vector<int>& query, int block, int axis, int index,
                                 const std::optional<std::string>& out_path, std::ostream& out) {
  const auto ck = load_checkpoint(checkpoint);
  auto model = model_from_checkpoint<double>(ck);
  const auto records = read_molecules(molecule_path);
  if (records.empty()) throw InputError("no molecules in '" + molecule_path + "'");
  if (index < 0 || index >= static_cast<int>(records.size())) {
    throw InputError("molecule index " + std::to_string(index) + " out of range (file has " +
                     std::to_string(records.size()) + ")");
  }
  const auto& rec = records[static_cast<size_t>(index)];
  const auto f = featurize(rec, ck.featurizer);
  const auto w = model.attention_weights(f, query, block, axis);

  json j;
  j["id"] = rec.id;
  j["query"] = query;
  j["block"] = block;
  j["axis"] = axis;
  j["heads"] = w.per_head.size();
  j["per_head"] = w.per_head;
  j["averaged"] = w.averaged;
  const std::string text = j.dump();
  out << text << "\n";
  if (out_path) {
    std::ofstream fo(*out_path);
    fo << text << "\n";
  }
  return 0;
}

// ---- synth ----

inline int cmd_synth(const std::string& out_path, const SyntheticConfig& cfg, std::ostream& out) {
  const auto records = synthetic_dataset(cfg);
  write_molecules(out_path, records);
  out << json{{"written", records.size()}, {"path", out_path}}.dump() << "\n";
  return 0;
}

// ---- dispatcher ----

inline int run(std::vector<std::string> args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"GEM-2 molecular property prediction toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate the bundled synthetic dataset");
  std::string synth_out;
  SyntheticConfig synth_cfg;
  synth->add_option("--out", synth_out, "output JSONL path")->required();
  synth->add_option("--count", synth_cfg.count, "number of molecules");
  synth->add_option("--seed", synth_cfg.seed, "generator seed");
  synth->add_option("--n-min", synth_cfg.n_min, "minimum atoms");
  synth->add_option("--n-max", synth_cfg.n_max, "maximum atoms");

  // featurize
  auto* feat = app.add_subcommand("featurize", "cache feature tensors for a dataset");
  std::string feat_input, feat_out;
  bool feat_skip_bad = false;
  std::string feat_config;
  feat->add_option("input", feat_input, "dataset JSONL")->required();
  feat->add_option("out_dir", feat_out, "cache directory")->required();
  feat->add_flag("--skip-bad", feat_skip_bad, "skip malformed lines instead of aborting");
  feat->add_option("--config", feat_config, "run config supplying the featurizer section");

  // train
  auto* tr = app.add_subcommand("train", "train a model from a run config");
  std::string train_config;
  tr->add_option("config", train_config, "run config JSON")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string eval_ck, eval_data, eval_metric = "mae", eval_config, eval_out;
  bool eval_group = false;
  int eval_level = 0;
  ev->add_option("checkpoint", eval_ck)->required();
  ev->add_option("dataset", eval_data)->required();
  ev->add_flag("--group-topo", eval_group, "report MAE per topological-diameter group");
  ev->add_option("--long-range-level", eval_level, "restrict attention to pairs within k hops");
  ev->add_option("--metric", eval_metric, "mae or auc");
  ev->add_option("--config", eval_config, "run config to validate against the checkpoint");
  ev->add_option("--out", eval_out, "also write the report here");

  // bench
  auto* be = app.add_subcommand("bench", "time attention kernels and report MAC counts");
  std::vector<int> bench_orders;
  std::vector<int64_t> bench_sizes;
  std::string bench_mode = "axial", bench_out;
  BenchOptions bench_opt;
  be->add_option("--orders", bench_orders, "many-body orders m")->required()->delimiter(',');
  be->add_option("--sizes", bench_sizes, "atom counts N")->required()->delimiter(',');
  be->add_option("--mode", bench_mode, "axial or full");
  be->add_option("--channels", bench_opt.channels, "channel width c");
  be->add_option("--heads", bench_opt.heads, "attention heads");
  be->add_option("--reps", bench_opt.reps, "timed repetitions (median)");
  be->add_option("--warmups", bench_opt.warmups, "untimed warmup runs");
  be->add_option("--guard", bench_opt.full_token_guard, "full-mode token guard");
  be->add_option("--seed", bench_opt.seed, "input seed");
  be->add_option("--out", bench_out, "also write the CSV here");

  // inspect-attention
  auto* ia = app.add_subcommand("inspect-attention", "export attention rows for one query body");
  std::string ia_ck, ia_mol, ia_out;
  std::vector<int> ia_query;
  int ia_block = 0, ia_axis = 1, ia_index = 0;
  ia->add_option("checkpoint", ia_ck)->required();
  ia->add_option("molecule", ia_mol, "molecule JSONL")->required();
  ia->add_option("--query", ia_query, "query body atom indices")->required()->delimiter(',');
  ia->add_option("--block", ia_block, "block index");
  ia->add_option("--axis", ia_axis, "attention axis (1-based)");
  ia->add_option("--index", ia_index, "molecule index within the file");
  ia->add_option("--out", ia_out, "also write the JSON here");

  std::vector<const char*> argv;
  argv.push_back("gem2");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
    if (*synth) return cmd_synth(synth_out, synth_cfg, out);
    if (*feat) {
      return cmd_featurize(feat_input, feat_out, feat_skip_bad,
                           feat_config.empty() ? std::nullopt : std::optional(feat_config), out, err);
    }
    if (*tr) return cmd_train(train_config, out, err);
    if (*ev) {
      return cmd_eval(eval_ck, eval_data, eval_group,
                      eval_level > 0 ? std::optional(eval_level) : std::nullopt,
                      eval_config.empty() ? std::nullopt : std::optional(eval_config), eval_metric,
                      eval_out.empty() ? std::nullopt : std::optional(eval_out), out, err);
    }
    if (*be) {
      return cmd_bench(bench_orders, bench_sizes, bench_mode, bench_opt,
                       bench_out.empty() ? std::nullopt : std::optional(bench_out), out);
    }
    if (*ia) {
      return cmd_inspect_attention(ia_ck, ia_mol, ia_query, ia_block, ia_axis, ia_index,
                                   ia_out.empty() ? std::nullopt : std::optional(ia_out), out);
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    std::ostringstream dummy;
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace gem2::cli
