// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration file (JSON):
//
//   {
//     "method": "efficientxpert" | "wanda_baseline",
//     "prune": { "sparsity": 0.5, "ema_rate": 0.5, "lambda": 1e-8, "rank": 8,
//                "epochs": 3, "learning_rate": 1e-4, "seed": 0,
//                "calibration": {"batches": 8, "seq_len": 16},
//                "criterion": "foresight", "pbs_enabled": true,
//                "pbs_scale_adapter": true, "post_final_pbs": false,
//                "global_budget": false },
//     "task": { "kind": "teacher_student", "widths": [32, 48, 48, 24],
//               "hidden": "relu", "train_samples": 512, "eval_samples": 256,
//               "batch_size": 32, "lora_scale": 2.0, "gain_spread": 0.5,
//               "teacher_rank": 4, "teacher_shift": 0.5, "alphabet": 6,
//               "classes": 12, "sequence_length": 24 }
//   }
//
// Every field is optional and defaults to the values above. Unknown keys are
// rejected. A run manifest (which embeds the config under "config") is also
// accepted wherever a config file is.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xpert/trainer.hpp"

namespace xpert {

inline constexpr const char* kToolkitVersion = "0.3.0";

struct RunSpec {
  Method method = Method::efficientxpert;
  PruneConfig prune;
  ToyTaskConfig task;

  friend bool operator==(const RunSpec&, const RunSpec&) = default;
};

nlohmann::json to_json(const PruneConfig& c);
nlohmann::json to_json(const ToyTaskConfig& t);
nlohmann::json to_json(const RunSpec& s);
RunSpec run_spec_from_json(const nlohmann::json& j);

RunSpec load_run_spec(const std::filesystem::path& path);

struct RunManifest {
  RunSpec config;
  std::string toolkit_version = kToolkitVersion;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::map<std::string, double> phase_seconds;
  std::map<std::string, std::string> notes;
};

nlohmann::json to_json(const RunManifest& m);
void save_manifest(const std::filesystem::path& path, const RunManifest& m);

}  // namespace xpert
