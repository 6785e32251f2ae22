// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xpert/kernels.hpp"
#include "xpert/matrix.hpp"

namespace xpert {

// LoRA multiplier alpha/r for the alpha=16, r=8 recipe.
inline constexpr double kDefaultLoraScale = 2.0;

enum class Activation { identity, relu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Linear layer y = x * (W + scale * B * A), optionally masked.
// W is in_dim x out_dim, B is in_dim x r, A is r x out_dim.
struct LoraLinear {
  Matrix base_w;
  Matrix adapter_b;
  Matrix adapter_a;
  double scale = kDefaultLoraScale;
  std::optional<Matrix> mask;

  std::size_t in_dim() const noexcept { return base_w.rows(); }
  std::size_t out_dim() const noexcept { return base_w.cols(); }
  std::size_t rank() const noexcept { return adapter_a.rows(); }

  // Throws ShapeError / ValidationError naming the offending dimensions.
  void validate() const;
};

// Adapter with B = 0 and the given A, so the effective weight starts at W.
LoraLinear make_lora_linear(Matrix base_w, Matrix adapter_a, double scale = kDefaultLoraScale);

struct PairingRule {
  enum class Kind { downstream, attention_q, attention_k, local_fallback };

  Kind kind = Kind::local_fallback;
  std::size_t partner = 0;

  static PairingRule downstream(std::size_t next) { return {Kind::downstream, next}; }
  static PairingRule attention_q(std::size_t k_layer) { return {Kind::attention_q, k_layer}; }
  static PairingRule attention_k(std::size_t q_layer) { return {Kind::attention_k, q_layer}; }
  static PairingRule local_fallback() { return {Kind::local_fallback, 0}; }

  friend bool operator==(const PairingRule&, const PairingRule&) = default;
};

// Ordered stack of adapted layers. activations[i] is applied to the output of
// layer i before it feeds the next chained layer. A layer paired as
// attention_k is a fan-out branch: it reads the same input as its Q partner
// and its output leaves the chain.
struct ToyModel {
  std::vector<LoraLinear> layers;
  std::vector<Activation> activations;
  std::map<std::size_t, PairingRule> pairing;

  bool is_prunable(std::size_t layer) const { return pairing.count(layer) != 0; }
  bool is_branch(std::size_t layer) const;
  void validate() const;
};

// Sequential MLP: layer i pairs with layer i+1, the last layer falls back to a
// local score. `hidden` is used between layers, the output is left linear.
ToyModel make_mlp(std::vector<LoraLinear> layers, Activation hidden);

// Per-layer L2 norm of every input channel over the rows seen by forward().
struct CalibrationStats {
  std::vector<std::vector<double>> input_col_norms;
};

// W + scale * B * A. The mask, if any, is NOT applied.
Matrix compose_effective(const LoraLinear& layer, Exec exec = Exec::parallel);

// The weight a forward pass actually uses: mask (if set) times the effective weight.
Matrix forward_weight(const LoraLinear& layer, Exec exec = Exec::parallel);

Matrix apply_activation(const Matrix& z, Activation act);

struct ForwardResult {
  Matrix output;
  CalibrationStats stats;
};

ForwardResult forward(const ToyModel& model, const Matrix& input, Exec exec = Exec::parallel);

}  // namespace xpert
