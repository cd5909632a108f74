#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "gem2/synthetic.hpp"
#include "gem2/train.hpp"
#include "support/testutil.hpp"

using namespace gem2;
using testutil::close;

namespace {

FeaturizerConfig small_feat_cfg() {
  FeaturizerConfig cfg;
  cfg.hop = RbfSpec{10.0, 0.0, 3.0};
  cfg.dist = RbfSpec{10.0, 0.0, 3.0};
  cfg.angle = RbfSpec{10.0, 0.0, std::numbers::pi};
  return cfg;
}

ModelConfig tiny_model_cfg(const FeaturizerConfig& fc, int L, int M, int c) {
  ModelConfig mc;
  mc.L = L;
  mc.M = M;
  mc.c = {c, c, c};
  mc.n_heads = {2, 2, 2};
  mc.p_drop = {0.0, 0.0, 0.0};
  mc.ff_expansion = 2;
  mc.c_outer = 2;
  mc.feat_widths = {fc.x1_width(), fc.x2_width(), fc.x3_width()};
  mc.init_seed = 5;
  return mc;
}

}  // namespace

TEST_CASE("learning-rate schedule endpoints and decay") {
  TrainConfig tc;
  tc.base_lr = 1.0;
  CHECK(lr_at(0.0, tc) == 0.01);
  CHECK(lr_at(10.0, tc) == 1.0);
  CHECK(lr_at(30.0, tc) == 1.0);
  CHECK(close(lr_at(50.0, tc), 0.5, 1e-15));
  CHECK(close(lr_at(60.0, tc), 0.25, 1e-15));
  CHECK(close(lr_at(95.0, tc), std::pow(0.5, 5), 1e-15));

  // continuity at the warmup/hold joint
  CHECK(close(lr_at(10.0 - 1e-9, tc), lr_at(10.0, tc), 1e-6));
  // monotone non-increasing after the hold
  double prev = lr_at(50.0, tc);
  for (double e = 50.0; e <= 120.0; e += 0.5) {
    const double cur = lr_at(e, tc);
    CHECK(cur <= prev + 1e-15);
    prev = cur;
  }
}

TEST_CASE("adam: zero gradients, single step, constant-gradient fixed point") {
  ParamStore<double> params(1);
  params.add("p", Tensor<double>({3}, {1.0, -2.0, 0.5}));
  auto st = TrainState::init(params);

  adam_step(params, st, {{0.0, 0.0, 0.0}}, 0.1);
  CHECK(params.value(0).vec() == std::vector<double>{1.0, -2.0, 0.5});

  // one step from zero moments moves each entry by ~lr against the gradient sign
  ParamStore<double> p2(1);
  p2.add("p", Tensor<double>({2}, {0.0, 0.0}));
  auto st2 = TrainState::init(p2);
  adam_step(p2, st2, {{0.3, -0.7}}, 0.01);
  CHECK(close(p2.value(0).vec()[0], -0.01, 1e-4));
  CHECK(close(p2.value(0).vec()[1], 0.01, 1e-4));

  // with a constant gradient the bias-corrected update magnitude approaches lr
  ParamStore<double> p3(1);
  p3.add("p", Tensor<double>({1}, {0.0}));
  auto st3 = TrainState::init(p3);
  double before = 0;
  for (int s = 0; s < 5000; ++s) {
    before = p3.value(0).vec()[0];
    adam_step(p3, st3, {{0.42}}, 1e-3);
  }
  CHECK(close(std::abs(p3.value(0).vec()[0] - before), 1e-3, 1e-6));

  CHECK_THROWS_AS(adam_step(p3, st3, {{std::nan("")}}, 1e-3), NumericError);
}

TEST_CASE("ema: fixed point, zero decay, geometric closed form") {
  ParamStore<double> params(1);
  params.add("p", Tensor<double>({2}, {0.8, -0.4}));
  auto st = TrainState::init(params);

  for (int k = 0; k < 10; ++k) ema_update(params, st, 0.999);
  CHECK(st.shadow[0][0] == 0.8);  // shadow initialized to params stays put
  CHECK(st.shadow[0][1] == -0.4);

  st.shadow[0] = {3.0, 3.0};
  ema_update(params, st, 0.0);
  CHECK(st.shadow[0][0] == 0.8);

  // frozen params p, shadow s0: after k updates shadow = p + (s0 - p) 0.999^k
  st.shadow[0] = {3.0, 3.0};
  const int k = 250;
  for (int s = 0; s < k; ++s) ema_update(params, st, 0.999);
  const double want0 = 0.8 + (3.0 - 0.8) * std::pow(0.999, k);
  const double want1 = -0.4 + (3.0 - (-0.4)) * std::pow(0.999, k);
  CHECK(std::abs(st.shadow[0][0] - want0) < 1e-12);
  CHECK(std::abs(st.shadow[0][1] - want1) < 1e-12);

  auto tensors = ema_apply(params, st);
  CHECK(tensors[0].shape() == Shape{2});
}

TEST_CASE("roc_auc: separation, ties, chance level, and the degenerate case") {
  CHECK(roc_auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == 1.0);
  CHECK(roc_auc({0.1, 0.2, 0.8, 0.9}, {1, 1, 0, 0}) == 0.0);
  CHECK(roc_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == 0.5);

  std::mt19937_64 eng(7);
  std::vector<double> scores, labels;
  for (int i = 0; i < 4000; ++i) {
    scores.push_back(uniform01(eng));
    labels.push_back(eng() % 2 ? 1.0 : 0.0);
  }
  CHECK(std::abs(roc_auc(scores, labels) - 0.5) < 0.03);

  CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {1, 1}), NumericError);
}

TEST_CASE("grouped evaluation bins by bond-graph diameter") {
  auto path = [](int n) {
    MoleculeRecord rec;
    rec.id = "p" + std::to_string(n);
    for (int i = 0; i < n; ++i) {
      rec.atoms.push_back(Atom{});
      rec.coords.push_back({1.5 * i, 0, 0});
      if (i) rec.bonds.push_back(Bond{i - 1, i});
    }
    rec.label = 1.0;
    return rec;
  };

  // an 8-atom path has diameter 7: the short bin; a 13-atom path lands long
  std::vector<MoleculeRecord> recs{path(8), path(10), path(13)};
  auto ev = eval_grouped(recs, [](const MoleculeRecord&) { return 0.0; });
  REQUIRE(ev.short_range.has_value());
  REQUIRE(ev.moderate_range.has_value());
  REQUIRE(ev.long_range.has_value());
  CHECK(ev.short_range->count == 1);
  CHECK(ev.moderate_range->count == 1);
  CHECK(ev.long_range->count == 1);
  CHECK(ev.overall_mae == 1.0);

  // single-bin dataset: overall equals the bin MAE, other bins absent
  std::vector<MoleculeRecord> short_only{path(3), path(5)};
  auto ev2 = eval_grouped(short_only, [](const MoleculeRecord& r) { return r.label + 0.25; });
  REQUIRE(ev2.short_range.has_value());
  CHECK_FALSE(ev2.moderate_range.has_value());
  CHECK_FALSE(ev2.long_range.has_value());
  CHECK(close(ev2.overall_mae, ev2.short_range->mae, 1e-15));
  CHECK(close(ev2.overall_mae, 0.25, 1e-15));
}

TEST_CASE("dataset splitting honors declared splits and is seeded") {
  auto recs = synthetic_dataset(SyntheticConfig{20, 3, 4, 99, 2.0, 1.5});
  auto a = split_dataset(recs, 0.1, 7);
  auto b = split_dataset(recs, 0.1, 7);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.val.size() == 2);
  CHECK(a.train.size() == 18);

  auto c = split_dataset(recs, 0.1, 8);
  CHECK(a.val != c.val);

  for (auto& r : recs) r.split = "train";
  recs[3].split = "valid";
  recs[9].split = "valid";
  auto d = split_dataset(recs, 0.5, 1);
  CHECK(d.val == std::vector<size_t>{3, 9});
  CHECK(d.train.size() == 18);

  recs[0].split.reset();
  CHECK_THROWS_AS(split_dataset(recs, 0.1, 1), InputError);
}

TEST_CASE("loss tensors: exact zero for perfect L1, stable BCE") {
  Tape<double> t(false);
  auto pred = Tensor<double>::scalar_value(1.7);
  CHECK(loss_tensor(t, pred, 1.7, LossKind::l1).scalar() == 0.0);
  CHECK(close(loss_tensor(t, Tensor<double>::scalar_value(0.0), 1.0, LossKind::binary_cross_entropy)
                  .scalar(),
              std::log(2.0), 1e-12));
  // large logits stay finite
  CHECK(std::isfinite(
      loss_tensor(t, Tensor<double>::scalar_value(500.0), 0.0, LossKind::binary_cross_entropy)
          .scalar()));
  CHECK_THROWS_AS(loss_tensor(t, pred, 0.5, LossKind::binary_cross_entropy), InputError);
}

TEST_CASE("training is deterministic given the seed") {
  auto fc = small_feat_cfg();
  auto recs = synthetic_dataset(SyntheticConfig{10, 3, 4, 42, 2.0, 1.5});
  TrainConfig tc;
  tc.batch_size = 4;
  tc.base_lr = 1e-3;
  tc.warmup_epochs = 1;
  tc.hold_epochs = 100;
  tc.total_epochs = 3;
  tc.ema_decay = 0.9;
  tc.seed = 11;

  auto run = [&]() {
    Gem2Model<double> model(tiny_model_cfg(fc, 1, 1, 4));
    return train(model, recs, tc, fc);
  };
  auto r1 = run();
  auto r2 = run();
  REQUIRE(r1.log.size() == r2.log.size());
  for (size_t i = 0; i < r1.log.size(); ++i) {
    CHECK(r1.log[i].epoch == r2.log[i].epoch);
    CHECK(r1.log[i].step == r2.log[i].step);
    CHECK(r1.log[i].lr == r2.log[i].lr);
    CHECK(r1.log[i].train_loss == r2.log[i].train_loss);   // bitwise
    CHECK(r1.log[i].val_metric == r2.log[i].val_metric);   // bitwise
  }
  for (size_t i = 0; i < r1.best_params.size(); ++i) {
    CHECK(r1.best_params[i].vec() == r2.best_params[i].vec());
  }
}

TEST_CASE("ema decay zero makes evaluation parameters track training parameters") {
  auto fc = small_feat_cfg();
  auto recs = synthetic_dataset(SyntheticConfig{6, 3, 3, 13, 2.0, 1.5});
  TrainConfig tc;
  tc.batch_size = 3;
  tc.base_lr = 1e-3;
  tc.warmup_epochs = 0;
  tc.total_epochs = 2;
  tc.ema_decay = 0.0;
  tc.seed = 3;
  Gem2Model<double> model(tiny_model_cfg(fc, 1, 1, 4));
  auto r = train(model, recs, tc, fc);
  const auto ema = r.best_params;
  // after the last step, shadow == params exactly when decay is zero
  for (int i = 0; i < model.params().size(); ++i) {
    if (r.best_epoch == 1) {
      CHECK(model.params().value(i).vec() == ema[static_cast<size_t>(i)].vec());
    }
  }
}

TEST_CASE("single-sample memorization drives the training loss below 1e-3") {
  auto fc = small_feat_cfg();
  auto recs = synthetic_dataset(SyntheticConfig{1, 4, 4, 21, 2.0, 1.5});
  TrainConfig tc;
  tc.batch_size = 1;
  tc.base_lr = 3e-3;
  tc.warmup_start_frac = 1.0;  // no warmup ramp
  tc.warmup_epochs = 0;
  tc.hold_epochs = 1e9;
  tc.total_epochs = 200;
  tc.max_steps = 200;
  tc.ema_decay = 0.9;
  tc.seed = 1;
  Gem2Model<double> model(tiny_model_cfg(fc, 1, 1, 8));
  auto r = train(model, recs, tc, fc);
  double best = 1e9;
  for (const auto& e : r.log) best = std::min(best, e.train_loss);
  INFO("best train loss " << best << " over " << r.steps << " steps");
  CHECK(best < 1e-3);
}

TEST_CASE("empty dataset is rejected") {
  auto fc = small_feat_cfg();
  Gem2Model<double> model(tiny_model_cfg(fc, 1, 1, 4));
  TrainConfig tc;
  CHECK_THROWS_AS(train(model, {}, tc, fc), InputError);
}
