#pragma once

// l2-regularized logistic and ridge objectives, split along a vertical partition.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "vafl/dataplane.hpp"
#include "vafl/error.hpp"

namespace vafl {

enum class LossKind { logistic, ridge };

struct LossSpec {
  LossKind kind = LossKind::logistic;
  double lambda = 1e-4;
  bool has_bias = false;  // ridge only; the bias lives on the active worker

  static LossSpec logistic(double lambda) { return {LossKind::logistic, lambda, false}; }
  static LossSpec ridge(double lambda, bool has_bias = true) {
    return {LossKind::ridge, lambda, has_bias};
  }

  void validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("loss: lambda must be nonnegative");
    if (has_bias && kind != LossKind::ridge) {
      throw std::invalid_argument("loss: a bias term is only supported for ridge");
    }
  }
};

/// The model as the union of all workers' blocks.
struct ModelView {
  std::vector<std::vector<double>> blocks;
  double bias = 0.0;

  static ModelView zeros(const VerticalPartition& part) {
    ModelView m;
    for (const auto& g : part.groups()) m.blocks.emplace_back(g.size(), 0.0);
    return m;
  }

  static ModelView from_full(std::span<const double> w, const VerticalPartition& part,
                             double bias = 0.0) {
    if (w.size() != part.features()) throw std::invalid_argument("model: dimension mismatch");
    ModelView m;
    for (std::size_t b = 0; b < part.workers(); ++b) m.blocks.push_back(part.slice(w, b));
    m.bias = bias;
    return m;
  }

  std::vector<double> to_full(const VerticalPartition& part) const {
    std::vector<double> w(part.features(), 0.0);
    for (std::size_t b = 0; b < part.workers(); ++b) {
      const auto& g = part.group(b);
      for (std::size_t k = 0; k < g.size(); ++k) w[g[k]] = blocks[b][k];
    }
    return w;
  }

  void check_conforms(const VerticalPartition& part) const {
    if (blocks.size() != part.workers()) throw std::invalid_argument("model: block count mismatch");
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (blocks[b].size() != part.group(b).size()) {
        throw std::invalid_argument("model: block dimension mismatch");
      }
    }
  }

  bool operator==(const ModelView&) const = default;
};

inline double local_product(std::span<const double> w_block, std::span<const double> x_block) {
  if (w_block.size() != x_block.size()) {
    throw std::invalid_argument("local_product: dimension mismatch");
  }
  double s = 0.0;
  for (std::size_t k = 0; k < w_block.size(); ++k) s += w_block[k] * x_block[k];
  return s;
}

/// log(1 + e^z) without overflow.
inline double log1p_exp(double z) {
  if (z > 30.0) return z;
  if (z < -30.0) return std::exp(z);
  return std::log1p(std::exp(z));
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Per-sample data loss at the full score (bias included).
inline double sample_loss(const LossSpec& spec, double score, double y) {
  if (spec.kind == LossKind::logistic) return log1p_exp(-y * score);
  const double r = score - y;
  return r * r;
}

/// d loss / d score. This scalar is all a non-label-holding worker needs to
/// form its block gradient.
inline double loss_derivative(const LossSpec& spec, double score, double y) {
  if (spec.kind == LossKind::logistic) return -y * sigmoid(-y * score);
  return 2.0 * (score - y);
}

inline double squared_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

/// Sum of the per-block local products for sample i, excluding the bias.
inline double full_score(const ModelView& model, const Dataset& ds, const VerticalPartition& part,
                         std::size_t i) {
  double s = 0.0;
  const auto row = ds.row(i);
  for (std::size_t b = 0; b < part.workers(); ++b) {
    s += local_product(model.blocks[b], part.slice(row, b));
  }
  return s;
}

inline double objective_value(const LossSpec& spec, const ModelView& model, const Dataset& ds,
                              const VerticalPartition& part) {
  model.check_conforms(part);
  double data = 0.0;
  for (std::size_t i = 0; i < ds.n_samples; ++i) {
    const double score = full_score(model, ds, part, i) + (spec.has_bias ? model.bias : 0.0);
    data += sample_loss(spec, score, ds.labels[i]);
  }
  double reg = 0.0;
  for (const auto& b : model.blocks) reg += squared_norm(b);
  if (spec.has_bias) reg += model.bias * model.bias;
  return data / static_cast<double>(ds.n_samples) + 0.5 * spec.lambda * reg;
}

/// residual * x_block + lambda * w_block.
inline std::vector<double> block_gradient_from_residual(double residual,
                                                        std::span<const double> x_block,
                                                        std::span<const double> w_block,
                                                        double lambda) {
  std::vector<double> g(x_block.size());
  for (std::size_t k = 0; k < g.size(); ++k) g[k] = residual * x_block[k] + lambda * w_block[k];
  return g;
}

struct BlockGradient {
  std::vector<double> grad;
  std::optional<double> bias;  // set only for the active worker of a ridge model with bias
};

/// Gradient of f_i with respect to block `block` given the (possibly stale)
/// aggregated score. The bias is added here, the score never carries it.
inline BlockGradient sample_block_gradient(const LossSpec& spec, const ModelView& model,
                                           const Dataset& ds, const VerticalPartition& part,
                                           std::size_t i, std::size_t block, double score) {
  if (block >= part.workers()) throw std::out_of_range("sample_block_gradient: bad block");
  if (i >= ds.n_samples) throw std::out_of_range("sample_block_gradient: bad sample");
  const double b = spec.has_bias ? model.bias : 0.0;
  const double r = loss_derivative(spec, score + b, ds.labels[i]);
  BlockGradient out;
  out.grad = block_gradient_from_residual(r, part.slice(ds.row(i), block), model.blocks[block],
                                          spec.lambda);
  if (spec.has_bias && worker_of(block) == part.active_worker()) {
    out.bias = r + spec.lambda * model.bias;
  }
  return out;
}

inline BlockGradient full_block_gradient(const LossSpec& spec, const ModelView& model,
                                         const Dataset& ds, const VerticalPartition& part,
                                         std::size_t block) {
  model.check_conforms(part);
  BlockGradient acc;
  acc.grad.assign(part.group(block).size(), 0.0);
  double bias_acc = 0.0;
  bool has_bias = false;
  for (std::size_t i = 0; i < ds.n_samples; ++i) {
    const auto g = sample_block_gradient(spec, model, ds, part, i, block,
                                         full_score(model, ds, part, i));
    for (std::size_t k = 0; k < g.grad.size(); ++k) acc.grad[k] += g.grad[k];
    if (g.bias) {
      bias_acc += *g.bias;
      has_bias = true;
    }
  }
  const auto n = static_cast<double>(ds.n_samples);
  for (auto& v : acc.grad) v /= n;
  if (has_bias) acc.bias = bias_acc / n;
  return acc;
}

// Unpartitioned forms over the full weight vector. Used by the reference
// optimizer and as the decomposition check for the block gradients.

inline double objective_full(const LossSpec& spec, std::span<const double> w, double bias,
                             const Dataset& ds) {
  double data = 0.0;
  for (std::size_t i = 0; i < ds.n_samples; ++i) {
    const double score = local_product(w, ds.row(i)) + (spec.has_bias ? bias : 0.0);
    data += sample_loss(spec, score, ds.labels[i]);
  }
  double reg = squared_norm(w) + (spec.has_bias ? bias * bias : 0.0);
  return data / static_cast<double>(ds.n_samples) + 0.5 * spec.lambda * reg;
}

/// Gradient over (w, bias); the bias entry is appended when spec.has_bias.
inline std::vector<double> gradient_full(const LossSpec& spec, std::span<const double> w,
                                         double bias, const Dataset& ds) {
  const std::size_t d = w.size();
  std::vector<double> g(d + (spec.has_bias ? 1 : 0), 0.0);
  for (std::size_t i = 0; i < ds.n_samples; ++i) {
    const auto row = ds.row(i);
    const double score = local_product(w, row) + (spec.has_bias ? bias : 0.0);
    const double r = loss_derivative(spec, score, ds.labels[i]);
    for (std::size_t j = 0; j < d; ++j) g[j] += r * row[j];
    if (spec.has_bias) g[d] += r;
  }
  const auto n = static_cast<double>(ds.n_samples);
  for (std::size_t j = 0; j < d; ++j) g[j] = g[j] / n + spec.lambda * w[j];
  if (spec.has_bias) g[d] = g[d] / n + spec.lambda * bias;
  return g;
}

/// Second derivative of the per-sample loss with respect to the score.
inline double loss_curvature(const LossSpec& spec, double score, double y) {
  if (spec.kind == LossKind::logistic) {
    const double s = sigmoid(y * score);
    return s * (1.0 - s);
  }
  return 2.0;
}

/// Global upper bound on loss_curvature.
inline double loss_curvature_bound(const LossSpec& spec) {
  return spec.kind == LossKind::logistic ? 0.25 : 2.0;
}

}  // namespace vafl
