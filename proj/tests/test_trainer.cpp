// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "xpert/container.hpp"
#include "xpert/errors.hpp"
#include "xpert/serialize.hpp"
#include "xpert/trainer.hpp"

namespace xpert {
namespace {

ToyTaskConfig small_task() {
  ToyTaskConfig t;
  t.widths = {16, 24, 24, 8};
  t.train_samples = 128;
  t.eval_samples = 64;
  t.batch_size = 32;
  return t;
}

PruneConfig small_config(std::uint64_t seed = 0) {
  PruneConfig c;
  c.rank = 4;
  c.seed = seed;
  c.learning_rate = 1e-3;
  return c;
}

double max_output_diff(const ToyModel& a, const ToyModel& b, const Matrix& x) {
  return max_abs_diff(forward(a, x, Exec::serial).output, forward(b, x, Exec::serial).output);
}

TEST(Config, ValidationRejectsOutOfRange) {
  PruneConfig c;
  EXPECT_NO_THROW(c.validate());
  c.sparsity = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.ema_rate = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.lambda = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.criterion = Criterion::foresight_q;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Config, DefaultsFollowRecipe) {
  const PruneConfig c;
  EXPECT_EQ(c.sparsity, 0.5);
  EXPECT_EQ(c.ema_rate, 0.5);
  EXPECT_EQ(c.lambda, 1e-8);
  EXPECT_EQ(c.rank, 8u);
  EXPECT_EQ(c.epochs, 3u);
  EXPECT_EQ(c.learning_rate, 1e-4);
}

TEST(ToyTask, RankMustBeBelowLayerWidths) {
  auto t = small_task();
  auto c = small_config();
  c.rank = 8;
  EXPECT_THROW(make_toy_task(t, c), ValidationError);
}

TEST(TrainEpoch, ZeroLearningRateLeavesAdaptersBitwise) {
  auto task = make_toy_task(small_task(), small_config());
  ToyModel model = task.model;
  const double loss = train_epoch(model, task.train, 0.0, 32, task.loss, 1, Exec::serial);
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_GT(loss, 0.0);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    EXPECT_EQ(model.layers[l].adapter_b, task.model.layers[l].adapter_b);
    EXPECT_EQ(model.layers[l].adapter_a, task.model.layers[l].adapter_a);
    EXPECT_EQ(model.layers[l].base_w, task.model.layers[l].base_w);
  }
}

TEST(TrainEpoch, SingleLayerLossNonIncreasingOnFixedBatch) {
  test::Rng rng(70);
  for (int seed = 0; seed < 5; ++seed) {
    std::vector<LoraLinear> layers{LoraLinear{rng.matrix(6, 5), rng.matrix(6, 2, 0.1),
                                              rng.matrix(2, 5, 0.5), 2.0, std::nullopt}};
    ToyModel model = make_mlp(std::move(layers), Activation::identity);
    const Dataset batch{rng.matrix(16, 6), rng.matrix(16, 5)};
    double prev = evaluate_loss(model, batch, LossKind::mse, Exec::serial);
    for (int step = 0; step < 50; ++step) {
      train_epoch(model, batch, 1e-2, batch.inputs.rows(), LossKind::mse, step, Exec::serial);
      const double cur = evaluate_loss(model, batch, LossKind::mse, Exec::serial);
      EXPECT_LE(cur, prev * (1.0 + 1e-12)) << "seed " << seed << " step " << step;
      prev = cur;
    }
  }
}

TEST(TrainEpoch, DivergenceRaisesNumericError) {
  auto task = make_toy_task(small_task(), small_config());
  ToyModel model = task.model;
  EXPECT_THROW(train_epoch(model, task.train, 1e6, 32, task.loss, 1, Exec::serial), NumericError);
}

TEST(TrainEpoch, MismatchedDatasetThrows) {
  auto task = make_toy_task(small_task(), small_config());
  Dataset bad{task.train.inputs, Matrix(3, 8)};
  EXPECT_THROW(train_epoch(task.model, bad, 1e-3, 32, task.loss, 1), ShapeError);
  EXPECT_THROW(train_epoch(task.model, task.train, 1e-3, 0, task.loss, 1), ValidationError);
}

void check_gradients(ToyModel model, const Matrix& x, const Matrix& y, LossKind kind) {
  const auto g = loss_and_gradients(model, x, y, kind, Exec::serial);
  const double h = 1e-6;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    for (int which = 0; which < 2; ++which) {
      Matrix& p = which == 0 ? model.layers[l].adapter_b : model.layers[l].adapter_a;
      const Matrix& analytic = which == 0 ? g.grad_b[l] : g.grad_a[l];
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double saved = p.data()[k];
        p.data()[k] = saved + h;
        const double up = evaluate_loss(model, {x, y}, kind, Exec::serial);
        p.data()[k] = saved - h;
        const double dn = evaluate_loss(model, {x, y}, kind, Exec::serial);
        p.data()[k] = saved;
        const double fd = (up - dn) / (2 * h);
        EXPECT_LE(std::abs(analytic.data()[k] - fd), 1e-5 * std::max(1.0, std::abs(fd)))
            << "layer " << l << (which ? " A" : " B") << " entry " << k;
      }
    }
  }
}

TEST(Gradients, MatchFiniteDifferencesMse) {
  test::Rng rng(71);
  std::vector<LoraLinear> layers;
  for (int l = 0; l < 2; ++l) {
    layers.push_back(LoraLinear{rng.matrix(4, 4), rng.matrix(4, 2), rng.matrix(2, 4), 2.0, std::nullopt});
  }
  check_gradients(make_mlp(layers, Activation::identity), rng.matrix(5, 4), rng.matrix(5, 4), LossKind::mse);
  layers[0].mask = rng.binary(4, 4, 0.5);
  check_gradients(make_mlp(layers, Activation::identity), rng.matrix(5, 4), rng.matrix(5, 4), LossKind::mse);
}

TEST(Gradients, MatchFiniteDifferencesCrossEntropy) {
  test::Rng rng(72);
  std::vector<LoraLinear> layers{LoraLinear{rng.matrix(4, 4), rng.matrix(4, 2), rng.matrix(2, 4), 2.0, std::nullopt}};
  Matrix y(6, 4);
  for (std::size_t i = 0; i < 6; ++i) y(i, i % 4) = 1.0;
  check_gradients(make_mlp(layers, Activation::identity), rng.matrix(6, 4), y, LossKind::cross_entropy);
}

TEST(Gradients, MatchFiniteDifferencesRelu) {
  test::Rng rng(73);
  std::vector<LoraLinear> layers;
  layers.push_back(LoraLinear{rng.matrix(4, 4), rng.matrix(4, 2), rng.matrix(2, 4), 2.0, std::nullopt});
  layers.push_back(LoraLinear{rng.matrix(4, 3), rng.matrix(4, 2), rng.matrix(2, 3), 2.0, std::nullopt});
  const auto model = make_mlp(layers, Activation::relu);
  const auto x = rng.matrix(5, 4);
  // Skip the check if a pre-activation sits within the FD step of the kink.
  const auto pre = matmul(x, forward_weight(model.layers[0]));
  for (double v : pre.data()) ASSERT_GT(std::abs(v), 1e-3);
  check_gradients(model, x, rng.matrix(5, 3), LossKind::mse);
}

TEST(Merge, EqualsMaskedForwardAndIsIdempotent) {
  test::Rng rng(74);
  std::vector<LoraLinear> layers;
  for (auto [m, n] : {std::pair{6, 5}, {5, 4}}) {
    layers.push_back(LoraLinear{rng.matrix(m, n), rng.matrix(m, 2), rng.matrix(2, n), 2.0, rng.binary(m, n, 0.5)});
  }
  const auto model = make_mlp(layers, Activation::relu);
  const auto merged = merge_and_mask(model);
  const auto x = rng.matrix(9, 6);
  EXPECT_LE(max_output_diff(model, merged, x), 1e-12);
  for (const auto& l : merged.layers) {
    EXPECT_EQ(frobenius_sq(l.adapter_b), 0.0);
    EXPECT_EQ(frobenius_sq(l.adapter_a), 0.0);
    for (std::size_t k = 0; k < l.base_w.size(); ++k)
      if (l.mask->data()[k] == 0.0) {
        EXPECT_EQ(l.base_w.data()[k], 0.0);
      }
  }
  const auto twice = merge_and_mask(merged);
  for (std::size_t i = 0; i < merged.layers.size(); ++i) {
    EXPECT_EQ(twice.layers[i].base_w, merged.layers[i].base_w);
  }
}

TEST(Merge, MissingMaskOnPrunableLayerThrows) {
  test::Rng rng(75);
  std::vector<LoraLinear> layers{LoraLinear{rng.matrix(4, 3), rng.matrix(4, 1), rng.matrix(1, 3), 2.0, std::nullopt}};
  EXPECT_THROW(merge_and_mask(make_mlp(layers, Activation::identity)), ValidationError);
}

class RunFixture : public ::testing::Test {
 protected:
  ToyTaskConfig task_config = small_task();
  PruneConfig config = small_config(3);
  ToyTask task = make_toy_task(task_config, config);
};

TEST_F(RunFixture, RecordShapeSparsityAndPbsNeverIncreasesResidual) {
  const auto r = run_method(Method::efficientxpert, task, task_config, config, Exec::serial);
  ASSERT_EQ(r.record.epochs.size(), config.epochs);
  EXPECT_EQ(r.record.epochs[0].mask_churn, 0.0);
  for (const auto& e : r.record.epochs) {
    EXPECT_TRUE(std::isfinite(e.train_loss));
    ASSERT_EQ(e.layers.size(), 3u);
    for (const auto& l : e.layers) {
      EXPECT_EQ(l.sparsity, 0.5);
      EXPECT_LE(l.residual_after, l.violation_mass + 1e-9);
    }
  }
  for (const auto& [idx, mask] : r.masks) {
    EXPECT_EQ(r.record.final_sparsity.at(idx), 0.5);
    for (std::size_t row = 0; row < mask.rows(); ++row) {
      auto v = mask.row(row);
      EXPECT_EQ(std::count(v.begin(), v.end(), 0.0), static_cast<long>(mask.cols() / 2));
    }
  }
  EXPECT_TRUE(r.record.eval_metrics.count("eval_loss"));
  EXPECT_TRUE(r.record.eval_metrics.count("dense_eval_loss"));
}

TEST_F(RunFixture, MergedOutputEqualsPreMergeMaskedOutput) {
  const auto r = run_method(Method::efficientxpert, task, task_config, config, Exec::serial);
  EXPECT_LE(max_output_diff(r.model, r.adapted, task.eval.inputs), 1e-12);
}

TEST_F(RunFixture, BaseWeightsFrozenUntilMerge) {
  const auto r = run_method(Method::efficientxpert, task, task_config, config, Exec::serial);
  for (std::size_t l = 0; l < task.model.layers.size(); ++l) {
    EXPECT_EQ(r.adapted.layers[l].base_w, task.model.layers[l].base_w);
  }
}

TEST_F(RunFixture, DeterministicInSerialMode) {
  const auto a = run_method(Method::efficientxpert, task, task_config, config, Exec::serial);
  const auto b = run_method(Method::efficientxpert, make_toy_task(task_config, config), task_config,
                            config, Exec::serial);
  EXPECT_EQ(encode_container(model_to_container(a.model)), encode_container(model_to_container(b.model)));
  EXPECT_EQ(to_json(a.record).dump(), to_json(b.record).dump());
}

TEST_F(RunFixture, SerialAndParallelRunsAgree) {
  set_num_threads(4);
  const auto a = run_method(Method::efficientxpert, task, task_config, config, Exec::serial);
  const auto b = run_method(Method::efficientxpert, task, task_config, config, Exec::parallel);
  set_num_threads(1);
  EXPECT_EQ(encode_container(model_to_container(a.model)), encode_container(model_to_container(b.model)));
}

TEST_F(RunFixture, ZeroSparsityEqualsMergedDense) {
  config.sparsity = 0.0;
  const auto r = run_method(Method::efficientxpert, task, task_config, config, Exec::serial);
  for (std::size_t l = 0; l < r.model.layers.size(); ++l) {
    EXPECT_EQ(r.model.layers[l].base_w, compose_effective(r.adapted.layers[l], Exec::serial));
  }
}

TEST_F(RunFixture, OneEpochWandaPipelineEqualsOneShotWanda) {
  config.epochs = 1;
  config.ema_rate = 1.0;
  config.pbs_enabled = false;
  config.criterion = Criterion::wanda;
  const auto r = run_method(Method::efficientxpert, task, task_config, config, Exec::serial);
  ToyModel dense = r.adapted;
  for (auto& l : dense.layers) l.mask.reset();
  const auto stats = forward(dense, task.calibration, Exec::serial).stats;
  for (const auto& [idx, mask] : r.masks) {
    const auto w = compose_effective(dense.layers[idx], Exec::serial);
    EXPECT_EQ(mask, rowwise_prune(wanda_scores(w, stats.input_col_norms[idx]), config.sparsity));
  }
}

TEST_F(RunFixture, WandaBaselineKeepsMaskAndSparsity) {
  const auto r = run_method(Method::wanda_baseline, task, task_config, config, Exec::serial);
  ASSERT_EQ(r.record.epochs.size(), config.epochs);
  for (const auto& e : r.record.epochs) EXPECT_EQ(e.mask_churn, 0.0);
  const auto stats = forward(task.model, task.calibration, Exec::serial).stats;
  for (const auto& [idx, mask] : r.masks) {
    EXPECT_EQ(r.record.final_sparsity.at(idx), 0.5);
    EXPECT_EQ(mask, rowwise_prune(wanda_scores(task.model.layers[idx].base_w, stats.input_col_norms[idx]), 0.5));
  }
  EXPECT_LE(max_output_diff(r.model, r.adapted, task.eval.inputs), 1e-12);
}

TEST_F(RunFixture, WandaBaselineAtZeroSparsityIsPlainFineTune) {
  config.sparsity = 0.0;
  const auto base = run_method(Method::wanda_baseline, task, task_config, config, Exec::serial);
  // With PBS off nothing but gradient descent touches the adapters.
  PruneConfig plain = config;
  plain.pbs_enabled = false;
  const auto tuned = run_method(Method::efficientxpert, task, task_config, plain, Exec::serial);
  for (std::size_t l = 0; l < base.model.layers.size(); ++l) {
    EXPECT_EQ(base.adapted.layers[l].adapter_b, tuned.adapted.layers[l].adapter_b);
    EXPECT_EQ(base.adapted.layers[l].adapter_a, tuned.adapted.layers[l].adapter_a);
    EXPECT_EQ(base.model.layers[l].base_w, tuned.model.layers[l].base_w);
  }
}

TEST(CharTask, RunsAndReportsAccuracy) {
  ToyTaskConfig t;
  t.kind = TaskKind::char_classification;
  t.widths = {0, 24, 0};
  t.train_samples = 96;
  t.eval_samples = 48;
  PruneConfig c;
  c.rank = 4;
  c.epochs = 2;
  c.learning_rate = 1e-2;
  const auto task = make_toy_task(t, c);
  EXPECT_EQ(task.loss, LossKind::cross_entropy);
  EXPECT_EQ(task.model.layers.front().in_dim(), 6u + 36u);
  EXPECT_EQ(task.model.layers.back().out_dim(), 12u);
  const auto r = run_method(Method::efficientxpert, task, t, c, Exec::serial);
  const double acc = r.record.eval_metrics.at("eval_accuracy");
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
}

}  // namespace
}  // namespace xpert
