// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "xpert/config.hpp"
#include "xpert/errors.hpp"

namespace xpert {
namespace {

using json = nlohmann::json;

TEST(RunSpecJson, RoundTripsNonDefaultValues) {
  RunSpec s;
  s.method = Method::wanda_baseline;
  s.prune.sparsity = 0.3;
  s.prune.ema_rate = 0.25;
  s.prune.lambda = 1e-4;
  s.prune.rank = 3;
  s.prune.epochs = 5;
  s.prune.learning_rate = 0.1 / 3.0;
  s.prune.seed = 0xFFFFFFFFFFFFFFFFULL;
  s.prune.calibration = {3, 7};
  s.prune.criterion = Criterion::magnitude;
  s.prune.pbs_enabled = false;
  s.prune.post_final_pbs = true;
  s.task.kind = TaskKind::char_classification;
  s.task.widths = {10, 20, 5};
  s.task.hidden = Activation::identity;
  s.task.lora_scale = 1.0 / 7.0;
  EXPECT_EQ(run_spec_from_json(json::parse(to_json(s).dump())), s);
}

TEST(RunSpecJson, EmptyObjectGivesDefaults) {
  EXPECT_EQ(run_spec_from_json(json::object()), RunSpec{});
}

TEST(RunSpecJson, RejectsUnknownKeysWrongTypesAndRanges) {
  EXPECT_THROW(run_spec_from_json(json::parse(R"({"prune":{"sparsty":0.5}})")), ValidationError);
  EXPECT_THROW(run_spec_from_json(json::parse(R"({"extra":1})")), ValidationError);
  EXPECT_THROW(run_spec_from_json(json::parse(R"({"prune":{"sparsity":"half"}})")), ValidationError);
  EXPECT_THROW(run_spec_from_json(json::parse(R"({"prune":{"sparsity":1.5}})")), ValidationError);
  EXPECT_THROW(run_spec_from_json(json::parse(R"({"prune":{"criterion":"random"}})")), ValidationError);
  EXPECT_THROW(run_spec_from_json(json::parse(R"({"method":"sparsegpt"})")), ValidationError);
}

TEST(Manifest, EchoedConfigReloadsIdentically) {
  RunManifest m;
  m.config.prune.seed = 42;
  m.config.prune.sparsity = 0.4;
  m.phase_seconds["train"] = 1.25;
  const auto path = std::filesystem::temp_directory_path() / "xpert_manifest_test.json";
  save_manifest(path, m);
  const auto reloaded = load_run_spec(path);
  std::filesystem::remove(path);
  EXPECT_EQ(reloaded, m.config);
  const auto j = to_json(m);
  EXPECT_EQ(j.at("seed"), 42);
  EXPECT_EQ(j.at("toolkit_version"), kToolkitVersion);
}

TEST(Manifest, MissingOrInvalidFileIsValidationError) {
  EXPECT_THROW(load_run_spec("/nonexistent/config.json"), ValidationError);
  const auto path = std::filesystem::temp_directory_path() / "xpert_bad_config.json";
  std::ofstream(path) << "{ nope";
  EXPECT_THROW(load_run_spec(path), ValidationError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace xpert
