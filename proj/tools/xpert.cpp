// SPDX-License-Identifier: Apache-2.0
// xpert: joint LoRA fine-tuning and pruning on toy networks.
//
// Exit codes: 0 success, 2 validation failure, 3 numeric failure.
// Errors are printed to stderr as a single line "error: <kind>: <message>".

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include <nlohmann/json.hpp>

#include "xpert/analysis.hpp"
#include "xpert/config.hpp"
#include "xpert/container.hpp"
#include "xpert/errors.hpp"
#include "xpert/kernels.hpp"
#include "xpert/masking.hpp"
#include "xpert/pbs.hpp"
#include "xpert/scoring.hpp"
#include "xpert/serialize.hpp"
#include "xpert/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace xpert;

namespace {

enum class Format { text, json };

struct Common {
  int threads = 0;
  std::string format = "text";

  Format fmt() const { return format == "json" ? Format::json : Format::text; }
  Exec exec() const { return threads == 1 ? Exec::serial : Exec::parallel; }
};

// Options shared by the prune-config overrides of several subcommands.
struct Overrides {
  std::optional<double> sparsity, lambda, ema;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> criterion;

  void apply(PruneConfig& c) const {
    if (sparsity) c.sparsity = *sparsity;
    if (lambda) c.lambda = *lambda;
    if (ema) c.ema_rate = *ema;
    if (epochs) c.epochs = *epochs;
    if (seed) c.seed = *seed;
    if (criterion) c.criterion = criterion_from_string(*criterion);
    c.validate();
  }
};

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

const char* const kCriteria[] = {"foresight", "wanda", "magnitude"};

void add_overrides(CLI::App* app, Overrides& o, bool with_training) {
  app->add_option("--sparsity", o.sparsity, "Fraction pruned per row, in [0, 1)");
  app->add_option("--criterion", o.criterion, "Pruning criterion")
      ->check(CLI::IsMember({kCriteria[0], kCriteria[1], kCriteria[2]}));
  if (!with_training) return;
  app->add_option("--lambda", o.lambda, "PBS ridge strength");
  app->add_option("--ema", o.ema, "EMA rate for score smoothing");
  app->add_option("--epochs", o.epochs, "Fine-tuning epochs");
  app->add_option("--seed", o.seed, "Random seed");
}

RunSpec spec_from(const std::string& config_path) {
  return config_path.empty() ? RunSpec{} : load_run_spec(config_path);
}

std::string model_score_name(std::size_t layer) { return layer_tensor(layer, "scores"); }

// Layers named layers.<i>.<field> present in a container, in index order.
std::vector<std::size_t> layers_with(const TensorContainer& c, const char* field) {
  std::vector<std::size_t> out;
  const std::string suffix = std::string(".") + field;
  for (const auto& [name, t] : c.tensors) {
    if (name.rfind("layers.", 0) != 0 || name.size() <= suffix.size() ||
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) {
      continue;
    }
    const auto idx = name.substr(7, name.size() - 7 - suffix.size());
    if (idx.empty() || !std::all_of(idx.begin(), idx.end(), ::isdigit)) continue;
    out.push_back(std::stoul(idx));
  }
  std::sort(out.begin(), out.end());
  return out;
}

Matrix adapter_product(const LoraLinear& l, Exec exec) {
  return scaled(matmul(l.adapter_b, l.adapter_a, exec), l.scale);
}

const LoraLinear& layer_at(const ToyModel& m, std::size_t i) {
  if (i >= m.layers.size()) {
    throw ValidationError("layer " + std::to_string(i) + " out of range (model has " +
                          std::to_string(m.layers.size()) + " layers)");
  }
  return m.layers[i];
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

// ---- subcommands ----------------------------------------------------------

int cmd_demo(const Common& common) {
  const auto report = propagation_demo();
  std::cout << (common.fmt() == Format::json ? render_json(report) : render_text(report));
  return 0;
}

int cmd_toy(const Common& common, const std::string& config, const Overrides& o,
            const std::string& output, const std::string& calibration) {
  auto spec = spec_from(config);
  o.apply(spec.prune);
  const auto task = make_toy_task(spec.task, spec.prune);
  save_container(output, model_to_container(task.model));
  TensorContainer calib;
  calib.tensors["calibration"] = NamedTensor::f64(task.calibration);
  save_container(calibration, calib);
  if (common.fmt() == Format::json) {
    print_json({{"model", output}, {"calibration", calibration}, {"layers", task.model.layers.size()}});
  } else {
    std::cout << "wrote " << output << " (" << task.model.layers.size() << " layers) and "
              << calibration << '\n';
  }
  return 0;
}

CalibrationStats calibration_stats(const ToyModel& model, const std::string& path, Exec exec) {
  const auto c = load_container(path);
  return forward(model, c.at("calibration"), exec).stats;
}

TensorContainer score_model(const ToyModel& model, const CalibrationStats& stats,
                            Criterion criterion, Exec exec) {
  TensorContainer out;
  out.metadata["criterion"] = to_string(criterion);
  for (const auto& [idx, rule] : model.pairing) {
    out.tensors[model_score_name(idx)] =
        NamedTensor::f64(score_layer(model, idx, stats, criterion, exec).scores);
  }
  return out;
}

int cmd_score(const Common& common, const std::string& weights, const std::string& calibration,
              const Overrides& o, const std::string& output) {
  const auto model = model_from_container(load_container(weights));
  const auto criterion = criterion_from_string(o.criterion.value_or("foresight"));
  const auto scores =
      score_model(model, calibration_stats(model, calibration, common.exec()), criterion,
                  common.exec());
  save_container(output, scores);
  if (common.fmt() == Format::json) {
    print_json({{"output", output}, {"criterion", to_string(criterion)}, {"layers", scores.tensors.size()}});
  } else {
    std::cout << "wrote " << scores.tensors.size() << " score matrices (" << to_string(criterion)
              << ") to " << output << '\n';
  }
  return 0;
}

int cmd_prune(const Common& common, const std::string& scores_path, const std::string& weights,
              const std::string& calibration, const Overrides& o, const std::string& output) {
  const double sparsity = o.sparsity.value_or(PruneConfig{}.sparsity);
  TensorContainer scores;
  if (!scores_path.empty()) {
    scores = load_container(scores_path);
  } else if (!weights.empty() && !calibration.empty()) {
    const auto model = model_from_container(load_container(weights));
    scores = score_model(model, calibration_stats(model, calibration, common.exec()),
                         criterion_from_string(o.criterion.value_or("foresight")), common.exec());
  } else {
    throw ValidationError("prune needs --scores, or --weights together with --calibration");
  }
  TensorContainer masks;
  json summary = json::object();
  for (std::size_t idx : layers_with(scores, "scores")) {
    const Matrix mask = rowwise_prune({scores.at(model_score_name(idx)), Criterion::magnitude},
                                      sparsity, common.exec());
    summary[std::to_string(idx)] = sparsity_of(mask);
    masks.tensors[layer_tensor(idx, "mask")] = NamedTensor::mask(mask);
  }
  if (masks.tensors.empty()) throw ValidationError("no layers.<i>.scores tensors to prune");
  save_container(output, masks);
  if (common.fmt() == Format::json) {
    print_json({{"output", output}, {"sparsity", summary}});
  } else {
    for (const auto& [k, v] : summary.items()) {
      std::cout << "layer " << k << " sparsity=" << v.get<double>() << '\n';
    }
  }
  return 0;
}

int cmd_pbs(const Common& common, const std::string& weights, const std::string& mask_path,
            double lambda, const std::string& output) {
  const auto model = model_from_container(load_container(weights));
  const auto masks = load_container(mask_path);
  TensorContainer out;
  json reports = json::object();
  std::ostringstream text;
  for (std::size_t idx : layers_with(masks, "mask")) {
    const auto& layer = layer_at(model, idx);
    const auto result = pbs_correct(layer, masks.at(layer_tensor(idx, "mask")),
                                    PbsOptions{lambda, true}, common.exec());
    out.tensors[layer_tensor(idx, "delta_b")] = NamedTensor::f64(result.delta_b);
    reports[std::to_string(idx)] = to_json(result.report);
    text << "layer " << idx << '\n' << format_pbs_report(result.report);
  }
  if (out.tensors.empty()) throw ValidationError("no layers.<i>.mask tensors in " + mask_path);
  save_container(output, out);
  if (common.fmt() == Format::json) {
    print_json({{"output", output}, {"lambda", lambda}, {"layers", reports}});
  } else {
    std::cout << text.str();
  }
  return 0;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_run(const Common& common, const std::string& config, const Overrides& o,
            const std::string& method, const std::string& output) {
  auto spec = spec_from(config);
  o.apply(spec.prune);
  if (!method.empty()) spec.method = method_from_string(method);
  const fs::path dir(output);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create output directory '" + output + "': " + ec.message());

  RunManifest manifest;
  manifest.config = spec;
  if (!config.empty()) manifest.inputs.push_back(config);
  manifest.notes["threads"] = std::to_string(num_threads());
  manifest.notes["exec"] = common.exec() == Exec::serial ? "serial" : "parallel";

  auto t0 = std::chrono::steady_clock::now();
  const auto task = make_toy_task(spec.task, spec.prune);
  manifest.phase_seconds["setup"] = seconds_since(t0);
  t0 = std::chrono::steady_clock::now();
  const auto result = run_method(spec.method, task, spec.task, spec.prune, common.exec());
  manifest.phase_seconds["train"] = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  const auto model_path = (dir / "model.xptc").string();
  const auto adapters_path = (dir / "adapters.xptc").string();
  const auto record_path = (dir / "record.json").string();
  save_container(model_path, model_to_container(result.model));
  save_container(adapters_path, model_to_container(result.adapted));
  {
    std::ofstream f(record_path, std::ios::trunc);
    if (!f) throw ValidationError("cannot write '" + record_path + "'");
    f << to_json(result.record).dump(2) << '\n';
  }
  manifest.outputs = {model_path, adapters_path, record_path};
  manifest.phase_seconds["write"] = seconds_since(t0);
  save_manifest(dir / "manifest.json", manifest);

  if (common.fmt() == Format::json) {
    print_json(to_json(result.record));
  } else {
    std::cout << format_run_record(result.record);
  }
  return 0;
}

int cmd_grassmann(const Common& common, const std::string& a_path, const std::string& b_path,
                  std::size_t layer, std::size_t rank) {
  const auto a = model_from_container(load_container(a_path));
  const auto b = model_from_container(load_container(b_path));
  const auto r = grassmann(adapter_product(layer_at(a, layer), common.exec()),
                           adapter_product(layer_at(b, layer), common.exec()), rank);
  if (common.fmt() == Format::json) {
    print_json({{"distance", r.distance}, {"cosines", r.cosines}, {"clamp", r.clamp_magnitude}});
  } else {
    std::cout << "grassmann_distance=" << r.distance << " clamp=" << r.clamp_magnitude << '\n';
  }
  return 0;
}

int cmd_energy(const Common& common, const std::string& path, std::size_t layer,
               std::size_t rank) {
  const auto model = model_from_container(load_container(path));
  const auto& l = layer_at(model, layer);
  const auto e = projection_energy(adapter_product(l, common.exec()), l.base_w, rank);
  if (common.fmt() == Format::json) {
    print_json({{"projection_energy", e.value}, {"degenerate_spectrum", e.degenerate_spectrum}});
  } else {
    std::cout << "projection_energy=" << e.value
              << (e.degenerate_spectrum ? " (degenerate spectrum)" : "") << '\n';
  }
  return 0;
}

// Metrics file: {"group": [[pruned, dense], ...], ...}
int cmd_relperf(const Common& common, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open metrics file '" + path + "'");
  MetricGroups groups;
  try {
    const auto j = json::parse(f);
    for (const auto& [name, pairs] : j.items()) {
      auto& g = groups[name];
      for (const auto& p : pairs) {
        if (!p.is_array() || p.size() != 2) throw ValidationError("metric '" + name + "' entries must be [pruned, dense]");
        g.push_back({p[0].get<double>(), p[1].get<double>()});
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError("metrics file '" + path + "': " + e.what());
  }
  const double rel = relative_performance(groups);
  if (common.fmt() == Format::json) {
    print_json({{"relative_performance", rel}});
  } else {
    std::cout << "relative_performance=" << rel << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint LoRA fine-tuning and pruning on toy networks"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(kToolkitVersion));

  Common common;
  app.add_option("--threads", common.threads, "Worker threads (1 = bitwise reference mode)")
      ->check(CLI::NonNegativeNumber);
  app.add_option("--format", common.format, "Output format")
      ->check(CLI::IsMember({"text", "json"}));

  Overrides o;
  std::string config, weights, calibration, mask, scores, output, method, other;
  double lambda = kDefaultPbsLambda;
  std::size_t layer = 0, rank = 8;

  auto* demo = app.add_subcommand("demo", "Two-layer error-propagation example");

  auto* toy = app.add_subcommand("toy", "Generate a toy model and calibration container");
  toy->add_option("--config", config, "Run config (JSON)");
  toy->add_option("--output", output, "Model container")->required();
  toy->add_option("--calibration", calibration, "Calibration container")->required();
  toy->add_option("--seed", o.seed, "Random seed");

  auto* score = app.add_subcommand("score", "Score every prunable layer");
  score->add_option("--weights", weights, "Model container")->required();
  score->add_option("--calibration", calibration, "Calibration container")->required();
  score->add_option("--output", output, "Score container")->required();
  score->add_option("--criterion", o.criterion, "Pruning criterion")
      ->check(CLI::IsMember({kCriteria[0], kCriteria[1], kCriteria[2]}));

  auto* prune = app.add_subcommand("prune", "Row-wise masks from scores");
  prune->add_option("--scores", scores, "Score container");
  prune->add_option("--weights", weights, "Model container (scored on the fly)");
  prune->add_option("--calibration", calibration, "Calibration container");
  prune->add_option("--output", output, "Mask container")->required();
  add_overrides(prune, o, false);

  auto* pbs = app.add_subcommand("pbs", "Closed-form adapter correction for a mask");
  pbs->add_option("--weights", weights, "Model container")->required();
  pbs->add_option("--mask", mask, "Mask container")->required();
  pbs->add_option("--lambda", lambda, "Ridge strength")->check(CLI::PositiveNumber);
  pbs->add_option("--output", output, "Delta-B container")->required();

  auto* run = app.add_subcommand("run", "Fine-tune and prune a toy model end to end");
  run->add_option("--config", config, "Run config or manifest (JSON)");
  run->add_option("--method", method, "Pipeline")
      ->check(CLI::IsMember({"efficientxpert", "wanda_baseline"}));
  run->add_option("--output", output, "Output directory")->required();
  add_overrides(run, o, true);

  auto* analyze = app.add_subcommand("analyze", "Subspace and aggregate analytics");
  analyze->require_subcommand(1);
  analyze->fallthrough();
  auto* grass = analyze->add_subcommand("grassmann", "Distance between adapter subspaces");
  grass->add_option("--weights", weights, "First model container")->required();
  grass->add_option("--other", other, "Second model container")->required();
  grass->add_option("--layer", layer, "Layer index");
  grass->add_option("--rank", rank, "Subspace dimension")->check(CLI::PositiveNumber);
  auto* energy = analyze->add_subcommand("energy", "Adapter energy in the base weight's top-r span");
  energy->add_option("--weights", weights, "Model container")->required();
  energy->add_option("--layer", layer, "Layer index");
  energy->add_option("--rank", rank, "Subspace dimension")->check(CLI::PositiveNumber);
  auto* relperf = analyze->add_subcommand("relperf", "Relative performance of metric groups");
  relperf->add_option("--metrics", other, "Metrics file (JSON)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << '\n';
    return 2;
  }

  try {
    if (common.threads > 0) set_num_threads(common.threads);
    if (*demo) return cmd_demo(common);
    if (*toy) return cmd_toy(common, config, o, output, calibration);
    if (*score) return cmd_score(common, weights, calibration, o, output);
    if (*prune) return cmd_prune(common, scores, weights, calibration, o, output);
    if (*pbs) return cmd_pbs(common, weights, mask, lambda, output);
    if (*run) return cmd_run(common, config, o, method, output);
    if (*grass) return cmd_grassmann(common, weights, other, layer, rank);
    if (*energy) return cmd_energy(common, weights, layer, rank);
    if (*relperf) return cmd_relperf(common, other);
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.kind() << ": " << one_line(e.what()) << '\n';
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << one_line(e.what()) << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << one_line(e.what()) << '\n';
    return 1;
  }
  return 2;
}
