// SPDX-License-Identifier: Apache-2.0
#include "xpert/config.hpp"

#include <fstream>
#include <set>

namespace xpert {

using json = nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const char* where) {
  if (!j.is_object()) throw ValidationError(std::string("config: '") + where + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) {
      throw ValidationError(std::string("config: unknown key '") + k + "' in " + where);
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("config: field '") + key + "' has the wrong type");
  }
}

}  // namespace

json to_json(const PruneConfig& c) {
  return {{"sparsity", c.sparsity},
          {"ema_rate", c.ema_rate},
          {"lambda", c.lambda},
          {"rank", c.rank},
          {"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"seed", c.seed},
          {"calibration", {{"batches", c.calibration.batches}, {"seq_len", c.calibration.seq_len}}},
          {"criterion", to_string(c.criterion)},
          {"pbs_enabled", c.pbs_enabled},
          {"pbs_scale_adapter", c.pbs_scale_adapter},
          {"post_final_pbs", c.post_final_pbs},
          {"global_budget", c.global_budget}};
}

json to_json(const ToyTaskConfig& t) {
  return {{"kind", to_string(t.kind)},
          {"widths", t.widths},
          {"hidden", to_string(t.hidden)},
          {"train_samples", t.train_samples},
          {"eval_samples", t.eval_samples},
          {"batch_size", t.batch_size},
          {"lora_scale", t.lora_scale},
          {"gain_spread", t.gain_spread},
          {"teacher_rank", t.teacher_rank},
          {"teacher_shift", t.teacher_shift},
          {"alphabet", t.alphabet},
          {"classes", t.classes},
          {"sequence_length", t.sequence_length}};
}

json to_json(const RunSpec& s) {
  return {{"method", to_string(s.method)}, {"prune", to_json(s.prune)}, {"task", to_json(s.task)}};
}

RunSpec run_spec_from_json(const json& j) {
  reject_unknown(j, {"method", "prune", "task"}, "top level");
  RunSpec s;
  if (j.contains("method")) {
    std::string m;
    read(j, "method", m);
    s.method = method_from_string(m);
  }
  if (j.contains("prune")) {
    const auto& p = j["prune"];
    reject_unknown(p,
                   {"sparsity", "ema_rate", "lambda", "rank", "epochs", "learning_rate", "seed",
                    "calibration", "criterion", "pbs_enabled", "pbs_scale_adapter",
                    "post_final_pbs", "global_budget"},
                   "prune");
    auto& c = s.prune;
    read(p, "sparsity", c.sparsity);
    read(p, "ema_rate", c.ema_rate);
    read(p, "lambda", c.lambda);
    read(p, "rank", c.rank);
    read(p, "epochs", c.epochs);
    read(p, "learning_rate", c.learning_rate);
    read(p, "seed", c.seed);
    if (p.contains("calibration")) {
      reject_unknown(p["calibration"], {"batches", "seq_len"}, "prune.calibration");
      read(p["calibration"], "batches", c.calibration.batches);
      read(p["calibration"], "seq_len", c.calibration.seq_len);
    }
    if (p.contains("criterion")) {
      std::string name;
      read(p, "criterion", name);
      c.criterion = criterion_from_string(name);
    }
    read(p, "pbs_enabled", c.pbs_enabled);
    read(p, "pbs_scale_adapter", c.pbs_scale_adapter);
    read(p, "post_final_pbs", c.post_final_pbs);
    read(p, "global_budget", c.global_budget);
  }
  if (j.contains("task")) {
    const auto& t = j["task"];
    reject_unknown(t,
                   {"kind", "widths", "hidden", "train_samples", "eval_samples", "batch_size",
                    "lora_scale", "gain_spread", "teacher_rank", "teacher_shift", "alphabet",
                    "classes", "sequence_length"},
                   "task");
    auto& c = s.task;
    if (t.contains("kind")) {
      std::string k;
      read(t, "kind", k);
      c.kind = task_kind_from_string(k);
    }
    read(t, "widths", c.widths);
    if (t.contains("hidden")) {
      std::string h;
      read(t, "hidden", h);
      c.hidden = activation_from_string(h);
    }
    read(t, "train_samples", c.train_samples);
    read(t, "eval_samples", c.eval_samples);
    read(t, "batch_size", c.batch_size);
    read(t, "lora_scale", c.lora_scale);
    read(t, "gain_spread", c.gain_spread);
    read(t, "teacher_rank", c.teacher_rank);
    read(t, "teacher_shift", c.teacher_shift);
    read(t, "alphabet", c.alphabet);
    read(t, "classes", c.classes);
    read(t, "sequence_length", c.sequence_length);
  }
  s.prune.validate();
  s.task.validate();
  return s;
}

RunSpec load_run_spec(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ValidationError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (j.is_object() && j.contains("toolkit_version") && j.contains("config")) {
    return run_spec_from_json(j["config"]);
  }
  return run_spec_from_json(j);
}

json to_json(const RunManifest& m) {
  return {{"toolkit_version", m.toolkit_version},
          {"seed", m.config.prune.seed},
          {"config", to_json(m.config)},
          {"inputs", m.inputs},
          {"outputs", m.outputs},
          {"phase_seconds", m.phase_seconds},
          {"notes", m.notes}};
}

void save_manifest(const std::filesystem::path& path, const RunManifest& m) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ValidationError("cannot write manifest '" + path.string() + "'");
  f << to_json(m).dump(2) << '\n';
}

}  // namespace xpert
