#pragma once

// Unbiased stochastic local-gradient estimators (SGD, SVRG, SAGA) for one block.

#include <algorithm>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vafl/losses.hpp"

namespace vafl {

namespace detail {
inline void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw std::invalid_argument(std::string(what) + ": dimension mismatch");
}
}  // namespace detail

inline std::vector<double> sgd_estimate(std::span<const double> grad_at_stale) {
  return {grad_at_stale.begin(), grad_at_stale.end()};
}

/// grad_stale - grad_snapshot + full_snapshot.
inline std::vector<double> svrg_estimate(std::span<const double> grad_stale,
                                         std::span<const double> grad_snapshot,
                                         std::span<const double> snapshot_full) {
  detail::require_same_size(grad_stale.size(), grad_snapshot.size(), "svrg_estimate");
  detail::require_same_size(grad_stale.size(), snapshot_full.size(), "svrg_estimate");
  std::vector<double> v(grad_stale.size());
  for (std::size_t k = 0; k < v.size(); ++k) {
    v[k] = grad_stale[k] - grad_snapshot[k] + snapshot_full[k];
  }
  return v;
}

/// Snapshot model and the per-block full gradients evaluated at it.
struct SvrgSnapshot {
  ModelView snapshot_model;
  std::vector<std::vector<double>> full_block_gradients;
};

/// Per-worker table of the latest per-sample block gradients with an
/// incrementally maintained mean. The mean is recomputed exactly after every
/// `samples()` updates to bound drift.
class SagaTable {
 public:
  SagaTable() = default;

  /// `entries` is row-major, one row of `dim` values per sample.
  SagaTable(std::size_t samples, std::size_t dim, std::vector<double> entries)
      : samples_(samples), dim_(dim), entries_(std::move(entries)), mean_(dim, 0.0) {
    if (samples_ == 0) throw std::invalid_argument("saga table: no samples");
    if (entries_.size() != samples_ * dim_) throw std::invalid_argument("saga table: bad size");
    recompute_mean();
  }

  bool initialized() const { return samples_ > 0; }
  std::size_t samples() const { return samples_; }
  std::size_t dim() const { return dim_; }

  std::span<const double> entry(std::size_t i) const {
    return {entries_.data() + i * dim_, dim_};
  }
  std::span<const double> running_mean() const { return mean_; }

  void update_entry(std::size_t i, std::span<const double> value) {
    if (!initialized()) throw std::logic_error("saga table: not initialized");
    if (i >= samples_) throw std::out_of_range("saga table: sample index out of range");
    detail::require_same_size(value.size(), dim_, "saga_update_entry");
    double* row = entries_.data() + i * dim_;
    const auto n = static_cast<double>(samples_);
    for (std::size_t k = 0; k < dim_; ++k) {
      mean_[k] += (value[k] - row[k]) / n;
      row[k] = value[k];
    }
    if (++updates_since_exact_ >= samples_) recompute_mean();
  }

  void recompute_mean() {
    std::fill(mean_.begin(), mean_.end(), 0.0);
    for (std::size_t i = 0; i < samples_; ++i) {
      for (std::size_t k = 0; k < dim_; ++k) mean_[k] += entries_[i * dim_ + k];
    }
    for (auto& m : mean_) m /= static_cast<double>(samples_);
    updates_since_exact_ = 0;
  }

 private:
  std::size_t samples_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> entries_;
  std::vector<double> mean_;
  std::size_t updates_since_exact_ = 0;
};

/// grad_stale - alpha_i + mean(alpha). Does not touch the table.
inline std::vector<double> saga_estimate(std::span<const double> grad_stale,
                                         const SagaTable& table, std::size_t i) {
  if (!table.initialized()) throw std::logic_error("saga_estimate: table not initialized");
  if (i >= table.samples()) throw std::out_of_range("saga_estimate: sample index out of range");
  detail::require_same_size(grad_stale.size(), table.dim(), "saga_estimate");
  const auto alpha = table.entry(i);
  const auto mean = table.running_mean();
  std::vector<double> v(grad_stale.size());
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = grad_stale[k] - alpha[k] + mean[k];
  return v;
}

inline void saga_update_entry(SagaTable& table, std::size_t i, std::span<const double> new_grad) {
  table.update_entry(i, new_grad);
}

/// In-place block step: block -= gamma * v.
inline void apply_update_inplace(std::span<double> block, std::span<const double> v,
                                 double gamma) {
  detail::require_same_size(block.size(), v.size(), "apply_update");
  if (!(gamma > 0.0)) throw std::invalid_argument("apply_update: gamma must be positive");
  for (std::size_t k = 0; k < block.size(); ++k) block[k] = block[k] - gamma * v[k];
}

inline std::vector<double> apply_update(std::span<const double> block, std::span<const double> v,
                                        double gamma) {
  std::vector<double> out(block.begin(), block.end());
  apply_update_inplace(out, v, gamma);
  return out;
}

}  // namespace vafl
