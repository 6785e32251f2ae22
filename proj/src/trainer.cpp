// SPDX-License-Identifier: Apache-2.0
#include "xpert/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace xpert {

std::string to_string(LossKind k) { return k == LossKind::mse ? "mse" : "cross_entropy"; }

std::string to_string(TaskKind k) {
  return k == TaskKind::teacher_student ? "teacher_student" : "char_classification";
}

std::string to_string(Method m) {
  return m == Method::efficientxpert ? "efficientxpert" : "wanda_baseline";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "teacher_student") return TaskKind::teacher_student;
  if (s == "char_classification") return TaskKind::char_classification;
  throw ValidationError("unknown task kind '" + s + "'");
}

Method method_from_string(const std::string& s) {
  if (s == "efficientxpert") return Method::efficientxpert;
  if (s == "wanda_baseline") return Method::wanda_baseline;
  throw ValidationError("unknown method '" + s + "'");
}

void PruneConfig::validate() const {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw ValidationError("config: sparsity must lie in [0, 1)");
  if (!(ema_rate > 0.0 && ema_rate <= 1.0)) throw ValidationError("config: ema_rate must lie in (0, 1]");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ValidationError("config: lambda must be positive");
  if (rank == 0) throw ValidationError("config: rank must be >= 1");
  if (epochs == 0) throw ValidationError("config: epochs must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ValidationError("config: learning_rate must be finite and nonnegative");
  }
  if (calibration.batches == 0 || calibration.seq_len == 0) {
    throw ValidationError("config: calibration batches and seq_len must be >= 1");
  }
  if (criterion == Criterion::foresight_q || criterion == Criterion::foresight_k) {
    throw ValidationError("config: criterion must be foresight, wanda or magnitude");
  }
}

void ToyTaskConfig::validate() const {
  if (widths.size() < 2) throw ValidationError("task: need at least one layer (two widths)");
  if (train_samples == 0 || eval_samples == 0 || batch_size == 0) {
    throw ValidationError("task: sample counts and batch size must be >= 1");
  }
  if (!(lora_scale >= 0.0)) throw ValidationError("task: lora_scale must be nonnegative");
  if (kind == TaskKind::char_classification) {
    if (alphabet < 2 || classes < 2 || sequence_length < 2) {
      throw ValidationError("task: alphabet, classes and sequence_length must be >= 2");
    }
  }
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream));
}

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}

  double normal() { return normal_(rng_); }
  double uniform() { return uniform_(rng_); }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_);
  }
  Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = stddev * normal();
    return m;
  }
  // Log-normal gains rescaled to unit root-mean-square.
  std::vector<double> gains(std::size_t n, double spread) {
    std::vector<double> g(n);
    double ms = 0.0;
    for (double& v : g) {
      v = std::exp(spread * normal());
      ms += v * v;
    }
    const double norm = std::sqrt(ms / static_cast<double>(n));
    for (double& v : g) v /= norm;
    return g;
  }
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Frozen "pretrained" weight with heterogeneous input and output channel gains.
// Variance-preserving for ReLU stacks (He scaling).
Matrix base_weight(Sampler& s, std::size_t m, std::size_t n, double spread) {
  const auto row_gain = s.gains(m, spread);
  const auto col_gain = s.gains(n, spread);
  Matrix w = s.normal_matrix(m, n, std::sqrt(2.0 / static_cast<double>(m)));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) w(i, j) *= row_gain[i] * col_gain[j];
  return w;
}

Matrix chain_forward(const std::vector<Matrix>& weights, Activation hidden, const Matrix& x) {
  Matrix h = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    h = matmul(h, weights[l], Exec::serial);
    if (l + 1 < weights.size()) h = apply_activation(h, hidden);
  }
  return h;
}

Matrix gaussian_inputs(Sampler& s, std::size_t rows, const std::vector<double>& scales) {
  Matrix x(rows, scales.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < scales.size(); ++j) x(i, j) = scales[j] * s.normal();
  return x;
}

struct CharSource {
  std::vector<double> start;               // alphabet
  std::vector<std::vector<double>> trans;  // alphabet x alphabet
};

std::size_t draw(Sampler& s, const std::vector<double>& probs) {
  double u = s.uniform();
  for (std::size_t k = 0; k + 1 < probs.size(); ++k) {
    if (u < probs[k]) return k;
    u -= probs[k];
  }
  return probs.size() - 1;
}

std::vector<double> random_distribution(Sampler& s, std::size_t n) {
  std::vector<double> p(n);
  double total = 0.0;
  for (double& v : p) {
    v = std::exp(1.5 * s.normal());
    total += v;
  }
  for (double& v : p) v /= total;
  return p;
}

// Unigram and bigram frequencies of a sampled character sequence, plus its label.
void sample_sequences(Sampler& s, const std::vector<CharSource>& sources, std::size_t alphabet,
                      std::size_t length, std::size_t rows, Dataset& out) {
  const std::size_t feat = alphabet + alphabet * alphabet;
  out.inputs = Matrix(rows, feat);
  out.targets = Matrix(rows, sources.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t label = s.index(sources.size());
    const auto& src = sources[label];
    std::size_t prev = draw(s, src.start);
    out.inputs(r, prev) += 1.0 / static_cast<double>(length);
    for (std::size_t t = 1; t < length; ++t) {
      const std::size_t next = draw(s, src.trans[prev]);
      out.inputs(r, next) += 1.0 / static_cast<double>(length);
      out.inputs(r, alphabet + prev * alphabet + next) += 1.0 / static_cast<double>(length - 1);
      prev = next;
    }
    out.targets(r, label) = 1.0;
  }
}

struct Trace {
  std::vector<Matrix> inputs;   // input of each layer
  std::vector<Matrix> pre;      // pre-activation of each layer
  std::vector<Matrix> weights;  // weight actually used (masked if set)
  Matrix output;
};

void require_sequential(const ToyModel& model) {
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (model.is_branch(i)) {
      throw ValidationError("training: layer " + std::to_string(i) +
                            " is an attention branch; only sequential models are trainable");
    }
  }
}

Trace trace_forward(const ToyModel& model, const Matrix& x, Exec exec) {
  Trace t;
  Matrix h = x;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    t.weights.push_back(forward_weight(model.layers[l], exec));
    Matrix z = matmul(h, t.weights.back(), exec);
    t.inputs.push_back(std::move(h));
    h = apply_activation(z, model.activations[l]);
    t.pre.push_back(std::move(z));
  }
  t.output = std::move(h);
  return t;
}

// Loss value and dLoss/dOutput.
double loss_and_seed(const Matrix& out, const Matrix& targets, LossKind kind, Matrix* grad) {
  require_same_shape(out, targets, "loss targets");
  const double rows = static_cast<double>(out.rows());
  if (kind == LossKind::mse) {
    const double count = static_cast<double>(out.size());
    double loss = 0.0;
    if (grad) *grad = Matrix(out.rows(), out.cols());
    for (std::size_t k = 0; k < out.size(); ++k) {
      const double d = out.data()[k] - targets.data()[k];
      loss += d * d;
      if (grad) grad->data()[k] = 2.0 * d / count;
    }
    return loss / count;
  }
  double loss = 0.0;
  if (grad) *grad = Matrix(out.rows(), out.cols());
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto z = out.row(i);
    const double zmax = *std::max_element(z.begin(), z.end());
    double denom = 0.0;
    for (double v : z) denom += std::exp(v - zmax);
    const double log_denom = std::log(denom) + zmax;
    for (std::size_t j = 0; j < z.size(); ++j) {
      const double p = std::exp(z[j] - log_denom);
      loss -= targets(i, j) * (z[j] - log_denom);
      if (grad) (*grad)(i, j) = (p - targets(i, j)) / rows;
    }
  }
  return loss / rows;
}

Matrix select_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    auto src = m.row(idx[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

void finalize(RunResult& result, const ToyModel& trained, const Dataset& eval, LossKind loss,
              Exec exec) {
  result.record.eval_metrics["dense_eval_loss"] = evaluate_loss(
      [&] {
        ToyModel dense = trained;
        for (auto& l : dense.layers) l.mask.reset();
        return dense;
      }(),
      eval, loss, exec);
  ToyModel masked = trained;
  for (const auto& [idx, mask] : result.masks) {
    masked.layers[idx] = apply_mask(masked.layers[idx], mask);
  }
  result.adapted = masked;
  result.model = merge_and_mask(std::move(masked), exec);
  for (const auto& [idx, mask] : result.masks) {
    result.record.final_sparsity[idx] = sparsity_of(mask);
  }
  result.record.eval_metrics["eval_loss"] = evaluate_loss(result.model, eval, loss, exec);
  if (loss == LossKind::cross_entropy) {
    result.record.eval_metrics["eval_accuracy"] = evaluate_accuracy(result.model, eval, exec);
  }
}

}  // namespace

ToyTask make_toy_task(const ToyTaskConfig& task, const PruneConfig& config) {
  task.validate();
  config.validate();
  Sampler s(stream_seed(config.seed, 1));
  ToyTask out;
  std::vector<std::size_t> widths = task.widths;
  std::vector<CharSource> sources;
  if (task.kind == TaskKind::char_classification) {
    widths.front() = task.alphabet + task.alphabet * task.alphabet;
    widths.back() = task.classes;
    out.loss = LossKind::cross_entropy;
  }

  std::vector<LoraLinear> layers;
  std::vector<Matrix> teacher;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t m = widths[l];
    const std::size_t n = widths[l + 1];
    if (config.rank >= std::min(m, n)) {
      throw ValidationError("task: rank " + std::to_string(config.rank) +
                            " must be < min(" + std::to_string(m) + ", " + std::to_string(n) +
                            ") for layer " + std::to_string(l));
    }
    Matrix w = base_weight(s, m, n, task.gain_spread);
    if (task.kind == TaskKind::teacher_student) {
      const std::size_t tr = std::max<std::size_t>(1, std::min({task.teacher_rank, m, n}));
      Matrix shift = matmul(s.normal_matrix(m, tr, 1.0), s.normal_matrix(tr, n, 1.0), Exec::serial);
      const double factor = task.teacher_shift * std::sqrt(frobenius_sq(w) / frobenius_sq(shift));
      teacher.push_back(add(w, scaled(shift, factor)));
    }
    Matrix a = s.normal_matrix(config.rank, n, 1.0 / std::sqrt(static_cast<double>(n)));
    layers.push_back(make_lora_linear(std::move(w), std::move(a), task.lora_scale));
  }
  out.model = make_mlp(std::move(layers), task.hidden);

  const std::size_t calib_rows = config.calibration.batches * config.calibration.seq_len;
  if (task.kind == TaskKind::teacher_student) {
    const auto scales = s.gains(widths.front(), task.gain_spread);
    out.train.inputs = gaussian_inputs(s, task.train_samples, scales);
    out.eval.inputs = gaussian_inputs(s, task.eval_samples, scales);
    out.calibration = gaussian_inputs(s, calib_rows, scales);
    out.train.targets = chain_forward(teacher, task.hidden, out.train.inputs);
    out.eval.targets = chain_forward(teacher, task.hidden, out.eval.inputs);
  } else {
    for (std::size_t c = 0; c < task.classes; ++c) {
      CharSource src;
      src.start = random_distribution(s, task.alphabet);
      for (std::size_t a = 0; a < task.alphabet; ++a) {
        src.trans.push_back(random_distribution(s, task.alphabet));
      }
      sources.push_back(std::move(src));
    }
    sample_sequences(s, sources, task.alphabet, task.sequence_length, task.train_samples, out.train);
    sample_sequences(s, sources, task.alphabet, task.sequence_length, task.eval_samples, out.eval);
    Dataset calib;
    sample_sequences(s, sources, task.alphabet, task.sequence_length, calib_rows, calib);
    out.calibration = std::move(calib.inputs);
  }
  return out;
}

double evaluate_loss(const ToyModel& model, const Dataset& data, LossKind loss, Exec exec) {
  const auto out = forward(model, data.inputs, exec).output;
  return loss_and_seed(out, data.targets, loss, nullptr);
}

double evaluate_accuracy(const ToyModel& model, const Dataset& data, Exec exec) {
  const auto out = forward(model, data.inputs, exec).output;
  require_same_shape(out, data.targets, "accuracy targets");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto z = out.row(i);
    auto t = data.targets.row(i);
    const auto pred = std::max_element(z.begin(), z.end()) - z.begin();
    const auto truth = std::max_element(t.begin(), t.end()) - t.begin();
    hits += pred == truth;
  }
  return static_cast<double>(hits) / static_cast<double>(out.rows());
}

LossAndGrads loss_and_gradients(const ToyModel& model, const Matrix& inputs,
                                const Matrix& targets, LossKind loss, Exec exec) {
  model.validate();
  require_sequential(model);
  if (inputs.cols() != model.layers.front().in_dim()) {
    throw ShapeError("training: input width " + std::to_string(inputs.cols()) +
                     " does not match layer 0 input dim " +
                     std::to_string(model.layers.front().in_dim()));
  }
  const Trace t = trace_forward(model, inputs, exec);
  LossAndGrads out;
  Matrix grad_h;
  out.loss = loss_and_seed(t.output, targets, loss, &grad_h);
  const std::size_t count = model.layers.size();
  out.grad_b.resize(count);
  out.grad_a.resize(count);
  for (std::size_t l = count; l-- > 0;) {
    const auto& layer = model.layers[l];
    Matrix grad_z = grad_h;
    if (model.activations[l] == Activation::relu) {
      for (std::size_t k = 0; k < grad_z.size(); ++k) {
        if (!(t.pre[l].data()[k] > 0.0)) grad_z.data()[k] = 0.0;
      }
    }
    Matrix grad_w = matmul_tn(t.inputs[l], grad_z, exec);
    if (layer.mask) grad_w = hadamard(grad_w, *layer.mask);
    out.grad_b[l] = scaled(matmul_nt(grad_w, layer.adapter_a, exec), layer.scale);
    out.grad_a[l] = scaled(matmul_tn(layer.adapter_b, grad_w, exec), layer.scale);
    if (l > 0) grad_h = matmul_nt(grad_z, t.weights[l], exec);
  }
  return out;
}

double train_epoch(ToyModel& model, const Dataset& data, double learning_rate,
                   std::size_t batch_size, LossKind loss, std::uint64_t shuffle_seed, Exec exec) {
  if (batch_size == 0) throw ValidationError("train_epoch: batch size must be >= 1");
  if (data.inputs.rows() != data.targets.rows()) {
    throw ShapeError("train_epoch: " + std::to_string(data.inputs.rows()) + " inputs but " +
                     std::to_string(data.targets.rows()) + " targets");
  }
  std::vector<std::size_t> order(data.inputs.rows());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(shuffle_seed);
  std::shuffle(order.begin(), order.end(), rng);

  double total = 0.0;
  std::size_t steps = 0;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    const std::span<const std::size_t> idx(order.data() + start, end - start);
    const auto g = loss_and_gradients(model, select_rows(data.inputs, idx),
                                      select_rows(data.targets, idx), loss, exec);
    if (!std::isfinite(g.loss)) {
      throw NumericError("train_epoch: loss became non-finite at step " + std::to_string(steps) +
                         " (learning rate " + std::to_string(learning_rate) + ")");
    }
    total += g.loss;
    ++steps;
    if (learning_rate == 0.0) continue;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
      auto& layer = model.layers[l];
      auto b = layer.adapter_b.data();
      auto a = layer.adapter_a.data();
      for (std::size_t k = 0; k < b.size(); ++k) b[k] -= learning_rate * g.grad_b[l].data()[k];
      for (std::size_t k = 0; k < a.size(); ++k) a[k] -= learning_rate * g.grad_a[l].data()[k];
      if (!layer.adapter_b.all_finite() || !layer.adapter_a.all_finite()) {
        throw NumericError("train_epoch: adapters of layer " + std::to_string(l) +
                           " diverged at step " + std::to_string(steps));
      }
    }
  }
  return total / static_cast<double>(steps);
}

ToyModel merge_and_mask(ToyModel model, Exec exec) {
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    auto& layer = model.layers[i];
    if (model.is_prunable(i) && !layer.mask) {
      throw ValidationError("merge_and_mask: prunable layer " + std::to_string(i) +
                            " has no mask");
    }
    Matrix merged = compose_effective(layer, exec);
    if (layer.mask) merged = hadamard(merged, *layer.mask);
    layer.base_w = std::move(merged);
    layer.adapter_b = Matrix(layer.adapter_b.rows(), layer.adapter_b.cols());
    layer.adapter_a = Matrix(layer.adapter_a.rows(), layer.adapter_a.cols());
  }
  return model;
}

RunResult efficientxpert_run(ToyModel model, const Dataset& train, const Dataset& eval,
                             const Matrix& calibration, LossKind loss, std::size_t batch_size,
                             const PruneConfig& config, Exec exec) {
  config.validate();
  model.validate();
  RunResult result;
  result.record.method = Method::efficientxpert;
  ScoreState state;
  state.ema_rate = config.ema_rate;
  const PbsOptions pbs{config.lambda, config.pbs_scale_adapter};

  for (std::size_t t = 1; t <= config.epochs; ++t) {
    EpochRecord er;
    er.epoch = t;
    er.train_loss = train_epoch(model, train, config.learning_rate, batch_size, loss,
                                stream_seed(config.seed, 100 + t), exec);

    const auto stats = forward(model, calibration, exec).stats;
    std::map<std::size_t, ScoreMatrix> fresh;
    for (const auto& [idx, rule] : model.pairing) {
      fresh.emplace(idx, score_layer(model, idx, stats, config.criterion, exec));
    }
    state = ema_update(std::move(state), fresh);

    for (const auto& [idx, rule] : model.pairing) {
      const auto& smoothed = state.smoothed.at(idx);
      Matrix mask = config.global_budget ? global_prune(smoothed, config.sparsity)
                                         : rowwise_prune(smoothed, config.sparsity, exec);
      auto& layer = model.layers[idx];
      LayerEpochRecord lr;
      lr.layer = idx;
      lr.sparsity = sparsity_of(mask);
      auto prev = result.masks.find(idx);
      lr.churn = prev == result.masks.end() ? 0.0 : mask_churn(prev->second, mask);
      lr.violation_mass = masked_residual_norm(layer, mask);
      lr.residual_after = lr.violation_mass;
      if (config.pbs_enabled) {
        const auto corr = pbs_correct(layer, mask, pbs, exec);
        layer.adapter_b = add(layer.adapter_b, corr.delta_b);
        lr.residual_after = masked_residual_norm(layer, mask);
        lr.over_constrained_rows = corr.report.over_constrained_rows();
        lr.update_norm = std::sqrt(frobenius_sq(corr.delta_b));
      }
      result.masks[idx] = std::move(mask);
      er.mask_churn += lr.churn;
      er.layers.push_back(lr);
    }
    if (!er.layers.empty()) er.mask_churn /= static_cast<double>(er.layers.size());
    result.record.epochs.push_back(std::move(er));
  }

  if (config.pbs_enabled && config.post_final_pbs) {
    for (const auto& [idx, mask] : result.masks) {
      auto& layer = model.layers[idx];
      layer.adapter_b = add(layer.adapter_b, pbs_correct(layer, mask, pbs, exec).delta_b);
    }
  }
  finalize(result, model, eval, loss, exec);
  return result;
}

RunResult wanda_baseline_run(ToyModel model, const Dataset& train, const Dataset& eval,
                             const Matrix& calibration, LossKind loss, std::size_t batch_size,
                             const PruneConfig& config, Exec exec) {
  config.validate();
  model.validate();
  RunResult result;
  result.record.method = Method::wanda_baseline;

  const auto stats = forward(model, calibration, exec).stats;
  for (const auto& [idx, rule] : model.pairing) {
    const auto scores = score_layer(model, idx, stats, Criterion::wanda, exec);
    result.masks[idx] = config.global_budget ? global_prune(scores, config.sparsity)
                                             : rowwise_prune(scores, config.sparsity, exec);
  }
  for (const auto& [idx, mask] : result.masks) {
    model.layers[idx].base_w = hadamard(model.layers[idx].base_w, mask);
  }

  for (std::size_t t = 1; t <= config.epochs; ++t) {
    EpochRecord er;
    er.epoch = t;
    er.train_loss = train_epoch(model, train, config.learning_rate, batch_size, loss,
                                stream_seed(config.seed, 100 + t), exec);
    for (const auto& [idx, mask] : result.masks) {
      LayerEpochRecord lr;
      lr.layer = idx;
      lr.sparsity = sparsity_of(mask);
      lr.violation_mass = masked_residual_norm(model.layers[idx], mask);
      lr.residual_after = lr.violation_mass;
      er.layers.push_back(lr);
    }
    result.record.epochs.push_back(std::move(er));
  }
  finalize(result, model, eval, loss, exec);
  return result;
}

RunResult run_method(Method method, const ToyTask& task, const ToyTaskConfig& task_config,
                     const PruneConfig& config, Exec exec) {
  if (method == Method::wanda_baseline) {
    return wanda_baseline_run(task.model, task.train, task.eval, task.calibration, task.loss,
                              task_config.batch_size, config, exec);
  }
  return efficientxpert_run(task.model, task.train, task.eval, task.calibration, task.loss,
                            task_config.batch_size, config, exec);
}

}  // namespace xpert
