// SPDX-License-Identifier: Apache-2.0
#include "xpert/serialize.hpp"

#include <charconv>
#include <sstream>

namespace xpert {

using json = nlohmann::json;

std::string layer_tensor(std::size_t layer, const char* field) {
  return "layers." + std::to_string(layer) + "." + field;
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

std::string exact(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::size_t parse_index(const std::string& s) {
  std::size_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ValidationError("model container: bad index '" + s + "'");
  }
  return v;
}

std::string rule_to_string(const PairingRule& r) {
  switch (r.kind) {
    case PairingRule::Kind::downstream: return "downstream:" + std::to_string(r.partner);
    case PairingRule::Kind::attention_q: return "attention_q:" + std::to_string(r.partner);
    case PairingRule::Kind::attention_k: return "attention_k:" + std::to_string(r.partner);
    case PairingRule::Kind::local_fallback: return "local";
  }
  return "local";
}

PairingRule rule_from_string(const std::string& s) {
  if (s == "local") return PairingRule::local_fallback();
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw ValidationError("model container: bad pairing '" + s + "'");
  const auto kind = s.substr(0, colon);
  const auto partner = parse_index(s.substr(colon + 1));
  if (kind == "downstream") return PairingRule::downstream(partner);
  if (kind == "attention_q") return PairingRule::attention_q(partner);
  if (kind == "attention_k") return PairingRule::attention_k(partner);
  throw ValidationError("model container: bad pairing '" + s + "'");
}

}  // namespace

TensorContainer model_to_container(const ToyModel& model) {
  model.validate();
  TensorContainer c;
  std::string acts, scales, pairing;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    c.tensors[layer_tensor(i, "base")] = NamedTensor::f64(l.base_w);
    c.tensors[layer_tensor(i, "lora_b")] = NamedTensor::f64(l.adapter_b);
    c.tensors[layer_tensor(i, "lora_a")] = NamedTensor::f64(l.adapter_a);
    if (l.mask) c.tensors[layer_tensor(i, "mask")] = NamedTensor::mask(*l.mask);
    acts += (i ? "," : "") + to_string(model.activations[i]);
    scales += (i ? "," : "") + exact(l.scale);
  }
  for (const auto& [idx, rule] : model.pairing) {
    pairing += (pairing.empty() ? "" : ";") + std::to_string(idx) + "=" + rule_to_string(rule);
  }
  c.metadata["model.layers"] = std::to_string(model.layers.size());
  c.metadata["model.activations"] = acts;
  c.metadata["model.scales"] = scales;
  c.metadata["model.pairing"] = pairing;
  c.metadata["lora.scale_in_effective_product"] = "true";
  return c;
}

ToyModel model_from_container(const TensorContainer& c) {
  auto meta = [&](const char* key) -> const std::string& {
    auto it = c.metadata.find(key);
    if (it == c.metadata.end()) throw ValidationError(std::string("model container: missing metadata '") + key + "'");
    return it->second;
  };
  const std::size_t count = parse_index(meta("model.layers"));
  const auto acts = split(meta("model.activations"), ',');
  const auto scales = split(meta("model.scales"), ',');
  if (count == 0 || acts.size() != count || scales.size() != count) {
    throw ValidationError("model container: layer metadata is inconsistent");
  }
  ToyModel model;
  for (std::size_t i = 0; i < count; ++i) {
    LoraLinear l;
    l.base_w = c.at(layer_tensor(i, "base"));
    l.adapter_b = c.at(layer_tensor(i, "lora_b"));
    l.adapter_a = c.at(layer_tensor(i, "lora_a"));
    double scale = 0.0;
    auto res = std::from_chars(scales[i].data(), scales[i].data() + scales[i].size(), scale);
    if (res.ec != std::errc()) throw ValidationError("model container: bad scale '" + scales[i] + "'");
    l.scale = scale;
    if (c.contains(layer_tensor(i, "mask"))) l.mask = c.at(layer_tensor(i, "mask"));
    model.layers.push_back(std::move(l));
    model.activations.push_back(activation_from_string(acts[i]));
  }
  for (const auto& item : split(meta("model.pairing"), ';')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ValidationError("model container: bad pairing '" + item + "'");
    model.pairing[parse_index(item.substr(0, eq))] = rule_from_string(item.substr(eq + 1));
  }
  model.validate();
  return model;
}

json to_json(const RunRecord& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs) {
    json layers = json::array();
    for (const auto& l : e.layers) {
      layers.push_back({{"layer", l.layer},
                        {"sparsity", l.sparsity},
                        {"churn", l.churn},
                        {"violation_mass", l.violation_mass},
                        {"residual_after", l.residual_after},
                        {"over_constrained_rows", l.over_constrained_rows},
                        {"update_norm", l.update_norm}});
    }
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"mask_churn", e.mask_churn},
                      {"layers", layers}});
  }
  json sparsity = json::object();
  for (const auto& [idx, s] : r.final_sparsity) sparsity[std::to_string(idx)] = s;
  return {{"method", to_string(r.method)},
          {"epochs", epochs},
          {"final_sparsity", sparsity},
          {"eval_metrics", r.eval_metrics}};
}

json to_json(const PbsReport& r) {
  json rows = json::array();
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    const auto& row = r.rows[i];
    rows.push_back({{"row", i},
                    {"pruned", row.pruned_count},
                    {"residual_before", row.residual_before},
                    {"residual_after", row.residual_after},
                    {"update_norm", row.update_norm},
                    {"over_constrained", row.over_constrained}});
  }
  return {{"rows", rows},
          {"total_before", r.total_before()},
          {"total_after", r.total_after()},
          {"over_constrained_rows", r.over_constrained_rows()}};
}

std::string format_run_record(const RunRecord& r) {
  std::ostringstream out;
  out << "method " << to_string(r.method) << '\n';
  for (const auto& e : r.epochs) {
    out << "epoch " << e.epoch << " train_loss=" << e.train_loss << " churn=" << e.mask_churn
        << '\n';
    for (const auto& l : e.layers) {
      out << "  layer " << l.layer << " sparsity=" << l.sparsity << " churn=" << l.churn
          << " violation=" << l.violation_mass << " after_pbs=" << l.residual_after
          << " over_constrained_rows=" << l.over_constrained_rows << '\n';
    }
  }
  for (const auto& [idx, s] : r.final_sparsity) {
    out << "final sparsity layer " << idx << " = " << s << '\n';
  }
  for (const auto& [k, v] : r.eval_metrics) out << k << " = " << v << '\n';
  return out.str();
}

}  // namespace xpert
