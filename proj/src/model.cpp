// SPDX-License-Identifier: Apache-2.0
#include "xpert/model.hpp"

#include <algorithm>
#include <cmath>

namespace xpert {

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw ValidationError("unknown activation '" + s + "'");
}

void LoraLinear::validate() const {
  const auto m = base_w.rows();
  const auto n = base_w.cols();
  if (base_w.empty()) throw ShapeError("lora layer: base weight is empty");
  if (adapter_b.rows() != m) {
    throw ShapeError("lora layer: adapter_b has " + std::to_string(adapter_b.rows()) +
                     " rows, base weight has " + std::to_string(m));
  }
  if (adapter_b.cols() != adapter_a.rows()) {
    throw ShapeError("lora layer: adapter_b.cols=" + std::to_string(adapter_b.cols()) +
                     " != adapter_a.rows=" + std::to_string(adapter_a.rows()));
  }
  if (adapter_a.cols() != n) {
    throw ShapeError("lora layer: adapter_a has " + std::to_string(adapter_a.cols()) +
                     " cols, base weight has " + std::to_string(n));
  }
  if (rank() >= std::min(m, n)) {
    throw ShapeError("lora layer: rank " + std::to_string(rank()) + " must be < min(" +
                     std::to_string(m) + ", " + std::to_string(n) + ")");
  }
  if (!(scale >= 0.0) || !std::isfinite(scale)) {
    throw ValidationError("lora layer: scale must be a finite nonnegative number");
  }
  if (mask) {
    require_same_shape(base_w, *mask, "lora layer mask");
    if (!is_binary(*mask)) throw ValidationError("lora layer: mask entries must be 0 or 1");
  }
}

LoraLinear make_lora_linear(Matrix base_w, Matrix adapter_a, double scale) {
  LoraLinear layer;
  layer.adapter_b = Matrix(base_w.rows(), adapter_a.rows());
  layer.base_w = std::move(base_w);
  layer.adapter_a = std::move(adapter_a);
  layer.scale = scale;
  layer.validate();
  return layer;
}

bool ToyModel::is_branch(std::size_t layer) const {
  auto it = pairing.find(layer);
  return it != pairing.end() && it->second.kind == PairingRule::Kind::attention_k;
}

void ToyModel::validate() const {
  if (layers.empty()) throw ValidationError("model has no layers");
  if (activations.size() != layers.size()) {
    throw ValidationError("model: " + std::to_string(activations.size()) +
                          " activations for " + std::to_string(layers.size()) + " layers");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    try {
      layers[i].validate();
    } catch (const ShapeError& e) {
      throw ShapeError("layer " + std::to_string(i) + ": " + e.what());
    }
  }
  std::size_t width = layers.front().in_dim();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (is_branch(i)) continue;
    if (l.in_dim() != width) {
      throw ShapeError("layer " + std::to_string(i) + " expects input dim " +
                       std::to_string(l.in_dim()) + " but previous layer emits " +
                       std::to_string(width));
    }
    width = l.out_dim();
  }
  for (const auto& [idx, rule] : pairing) {
    if (idx >= layers.size()) {
      throw ValidationError("pairing refers to missing layer " + std::to_string(idx));
    }
    const auto& self = layers[idx];
    const auto tag = "pairing for layer " + std::to_string(idx);
    switch (rule.kind) {
      case PairingRule::Kind::local_fallback:
        break;
      case PairingRule::Kind::downstream: {
        if (rule.partner >= layers.size()) throw ValidationError(tag + ": partner out of range");
        if (layers[rule.partner].in_dim() != self.out_dim()) {
          throw ShapeError(tag + ": downstream layer " + std::to_string(rule.partner) +
                           " has input dim " + std::to_string(layers[rule.partner].in_dim()) +
                           ", expected " + std::to_string(self.out_dim()));
        }
        break;
      }
      case PairingRule::Kind::attention_q:
      case PairingRule::Kind::attention_k: {
        if (rule.partner >= layers.size()) throw ValidationError(tag + ": partner out of range");
        const auto& p = layers[rule.partner];
        if (!p.base_w.same_shape(self.base_w)) {
          throw ShapeError(tag + ": attention partner shape " + p.base_w.shape_str() +
                           " differs from " + self.base_w.shape_str());
        }
        if (self.out_dim() > self.in_dim()) {
          throw ShapeError(tag + ": attention scoring needs d_k <= d");
        }
        if (rule.kind == PairingRule::Kind::attention_k && rule.partner >= idx) {
          throw ValidationError(tag + ": K branch must follow its Q partner");
        }
        break;
      }
    }
  }
}

ToyModel make_mlp(std::vector<LoraLinear> layers, Activation hidden) {
  ToyModel model;
  const auto count = layers.size();
  model.layers = std::move(layers);
  model.activations.assign(count, hidden);
  if (count) model.activations.back() = Activation::identity;
  for (std::size_t i = 0; i + 1 < count; ++i) model.pairing[i] = PairingRule::downstream(i + 1);
  if (count) model.pairing[count - 1] = PairingRule::local_fallback();
  model.validate();
  return model;
}

Matrix compose_effective(const LoraLinear& layer, Exec exec) {
  layer.validate();
  Matrix out = matmul(layer.adapter_b, layer.adapter_a, exec);
  auto o = out.data();
  auto w = layer.base_w.data();
  for (std::size_t k = 0; k < o.size(); ++k) o[k] = w[k] + layer.scale * o[k];
  return out;
}

Matrix forward_weight(const LoraLinear& layer, Exec exec) {
  Matrix w = compose_effective(layer, exec);
  if (layer.mask) w = hadamard(w, *layer.mask);
  return w;
}

Matrix apply_activation(const Matrix& z, Activation act) {
  if (act == Activation::identity) return z;
  Matrix out = z;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

ForwardResult forward(const ToyModel& model, const Matrix& input, Exec exec) {
  model.validate();
  if (input.cols() != model.layers.front().in_dim()) {
    throw ShapeError("forward: input has " + std::to_string(input.cols()) +
                     " columns, first layer expects " +
                     std::to_string(model.layers.front().in_dim()));
  }
  ForwardResult result;
  result.stats.input_col_norms.resize(model.layers.size());
  std::vector<Matrix> seen_inputs(model.layers.size());
  Matrix current = input;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& layer = model.layers[i];
    const bool branch = model.is_branch(i);
    const Matrix& x = branch ? seen_inputs[model.pairing.at(i).partner] : current;
    result.stats.input_col_norms[i] = column_norms(x);
    Matrix y = apply_activation(matmul(x, forward_weight(layer, exec), exec), model.activations[i]);
    if (!y.all_finite()) {
      throw NumericError("forward: non-finite activation at layer " + std::to_string(i));
    }
    seen_inputs[i] = x;
    if (!branch) current = std::move(y);
  }
  result.output = std::move(current);
  return result;
}

}  // namespace xpert
