#pragma once

// Dataset ingestion, column standardization and vertical feature partitioning.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "vafl/error.hpp"

namespace vafl {

enum class Task { classification, regression };

/// Dense sample-by-feature matrix plus labels. Rows are samples.
struct Dataset {
  std::size_t n_samples = 0;
  std::size_t n_features = 0;
  std::vector<double> features;  // row-major, n_samples * n_features
  std::vector<double> labels;
  Task task = Task::classification;

  std::span<const double> row(std::size_t i) const {
    return {features.data() + i * n_features, n_features};
  }
  double at(std::size_t i, std::size_t j) const { return features[i * n_features + j]; }
  double& at(std::size_t i, std::size_t j) { return features[i * n_features + j]; }

  /// Throws std::invalid_argument when the shape or label invariants do not hold.
  void validate() const {
    if (features.size() != n_samples * n_features) {
      throw std::invalid_argument("dataset: feature matrix size does not match shape");
    }
    if (labels.size() != n_samples) {
      throw std::invalid_argument("dataset: label count does not match sample count");
    }
    if (task == Task::classification) {
      for (double y : labels) {
        if (y != 1.0 && y != -1.0) {
          throw std::invalid_argument("dataset: classification labels must be +1 or -1");
        }
      }
    }
  }
};

struct LibsvmOptions {
  Task task = Task::classification;
  /// Map labels {0,1} to {-1,+1}. Only honoured for classification.
  bool map_zero_one_labels = false;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline bool parse_real(std::string_view tok, double& out) {
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  if (tok.empty()) return false;
  const auto* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, out);
  return ec == std::errc{} && ptr == end;
}

inline bool parse_index(std::string_view tok, std::size_t& out) {
  if (tok.empty()) return false;
  const auto* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, out);
  return ec == std::errc{} && ptr == end;
}

template <class Fn>
void for_each_token(std::string_view line, Fn&& fn) {
  std::size_t pos = 0;
  while (pos < line.size()) {
    while (pos < line.size() && (line[pos] == ' ' || line[pos] == '\t')) ++pos;
    if (pos >= line.size()) break;
    std::size_t end = pos;
    while (end < line.size() && line[end] != ' ' && line[end] != '\t') ++end;
    fn(line.substr(pos, end - pos));
    pos = end;
  }
}

template <class Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto stop = nl == std::string_view::npos ? text.size() : nl;
    ++line_no;
    fn(line_no, text.substr(pos, stop - pos));
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
}

}  // namespace detail

/// Parses LIBSVM text (`<label> <idx>:<val> ...`, 1-based strictly increasing
/// indices) into a dense dataset. Blank lines and `#` comment lines are skipped.
inline Dataset parse_libsvm(std::string_view text, std::size_t n_features,
                            const LibsvmOptions& options = {}) {
  Dataset ds;
  ds.n_features = n_features;
  ds.task = options.task;

  detail::for_each_line(text, [&](std::size_t line_no, std::string_view raw) {
    const auto line = detail::trim(raw);
    if (line.empty() || line.front() == '#') return;

    std::vector<double> row(n_features, 0.0);
    bool have_label = false;
    double label = 0.0;
    std::size_t last_index = 0;

    detail::for_each_token(line, [&](std::string_view tok) {
      if (!have_label) {
        if (!detail::parse_real(tok, label)) {
          throw ParseError(line_no, "malformed label '" + std::string(tok) + "'");
        }
        have_label = true;
        return;
      }
      const auto colon = tok.find(':');
      if (colon == std::string_view::npos) {
        throw ParseError(line_no, "expected <index>:<value>, got '" + std::string(tok) + "'");
      }
      std::size_t index = 0;
      double value = 0.0;
      if (!detail::parse_index(tok.substr(0, colon), index)) {
        throw ParseError(line_no, "malformed feature index in '" + std::string(tok) + "'");
      }
      if (!detail::parse_real(tok.substr(colon + 1), value)) {
        throw ParseError(line_no, "malformed feature value in '" + std::string(tok) + "'");
      }
      if (index == 0 || index > n_features) {
        throw BoundsError(line_no, "feature index " + std::to_string(index) +
                                       " outside [1, " + std::to_string(n_features) + "]");
      }
      if (index <= last_index) {
        throw ParseError(line_no, "feature indices must be strictly increasing");
      }
      last_index = index;
      row[index - 1] = value;
    });

    if (options.task == Task::classification) {
      if (options.map_zero_one_labels && label == 0.0) label = -1.0;
      if (label != 1.0 && label != -1.0) {
        throw ParseError(line_no, "classification label must be +1 or -1");
      }
    }
    ds.labels.push_back(label);
    ds.features.insert(ds.features.end(), row.begin(), row.end());
    ++ds.n_samples;
  });
  return ds;
}

/// Largest feature index referenced in LIBSVM text; used when the dimension
/// is not given up front.
inline std::size_t infer_libsvm_dimension(std::string_view text) {
  std::size_t max_index = 0;
  detail::for_each_line(text, [&](std::size_t line_no, std::string_view raw) {
    const auto line = detail::trim(raw);
    if (line.empty() || line.front() == '#') return;
    bool first = true;
    detail::for_each_token(line, [&](std::string_view tok) {
      if (first) {
        first = false;
        return;
      }
      const auto colon = tok.find(':');
      std::size_t index = 0;
      if (colon == std::string_view::npos || !detail::parse_index(tok.substr(0, colon), index)) {
        throw ParseError(line_no, "malformed feature token '" + std::string(tok) + "'");
      }
      max_index = std::max(max_index, index);
    });
  });
  return max_index;
}

/// Writes the non-zero entries of every row using shortest round-trip formatting.
inline std::string serialize_libsvm(const Dataset& ds) {
  std::string out;
  char buf[64];
  auto put = [&](double v) {
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    out.append(buf, ptr);
  };
  for (std::size_t i = 0; i < ds.n_samples; ++i) {
    put(ds.labels[i]);
    for (std::size_t j = 0; j < ds.n_features; ++j) {
      const double v = ds.at(i, j);
      if (v == 0.0) continue;
      out.push_back(' ');
      out += std::to_string(j + 1);
      out.push_back(':');
      put(v);
    }
    out.push_back('\n');
  }
  return out;
}

struct ColumnStats {
  double mean = 0.0;
  double stddev = 0.0;  // population; 0 marks a zero-variance column
};

struct Standardized {
  Dataset data;
  std::vector<ColumnStats> stats;
};

/// Applies previously computed column statistics (e.g. to held-out data).
/// Zero-variance columns become all-zero.
inline Dataset apply_standardization(const Dataset& ds, std::span<const ColumnStats> stats) {
  if (stats.size() != ds.n_features) {
    throw std::invalid_argument("standardize: statistics do not match feature count");
  }
  Dataset out = ds;
  for (std::size_t i = 0; i < ds.n_samples; ++i) {
    for (std::size_t j = 0; j < ds.n_features; ++j) {
      const auto& s = stats[j];
      out.at(i, j) = s.stddev == 0.0 ? 0.0 : (ds.at(i, j) - s.mean) / s.stddev;
    }
  }
  return out;
}

inline Standardized standardize(const Dataset& ds) {
  if (ds.n_samples < 2) throw std::invalid_argument("standardize: need at least two samples");
  const auto n = static_cast<double>(ds.n_samples);
  std::vector<ColumnStats> stats(ds.n_features);
  for (std::size_t j = 0; j < ds.n_features; ++j) {
    double sum = 0.0;
    double max_abs = 0.0;
    for (std::size_t i = 0; i < ds.n_samples; ++i) {
      sum += ds.at(i, j);
      max_abs = std::max(max_abs, std::abs(ds.at(i, j)));
    }
    const double mean = sum / n;
    double ss = 0.0;
    for (std::size_t i = 0; i < ds.n_samples; ++i) {
      const double c = ds.at(i, j) - mean;
      ss += c * c;
    }
    const double sd = std::sqrt(ss / n);
    // Relative threshold so a constant column with rounding noise still maps to zeros.
    stats[j] = {mean, sd <= 1e-12 * max_abs ? 0.0 : sd};
  }
  return {apply_standardization(ds, stats), std::move(stats)};
}

/// Disjoint feature groups G_1..G_q; group k belongs to worker k+1.
class VerticalPartition {
 public:
  VerticalPartition() = default;

  VerticalPartition(std::vector<std::vector<std::size_t>> groups, std::size_t n_features,
                    WorkerId active_worker = 1)
      : groups_(std::move(groups)), n_features_(n_features), active_(active_worker) {
    if (groups_.empty()) throw InvalidPartition("partition: no groups");
    if (active_ < 1 || active_ > groups_.size()) {
      throw InvalidPartition("partition: active worker out of range");
    }
    std::vector<bool> seen(n_features_, false);
    std::size_t covered = 0;
    for (const auto& g : groups_) {
      if (g.empty()) throw InvalidPartition("partition: empty feature group");
      for (auto f : g) {
        if (f >= n_features_) throw InvalidPartition("partition: feature index out of range");
        if (seen[f]) throw InvalidPartition("partition: groups overlap");
        seen[f] = true;
        ++covered;
      }
    }
    if (covered != n_features_) throw InvalidPartition("partition: groups do not cover all features");
  }

  std::size_t workers() const { return groups_.size(); }
  std::size_t features() const { return n_features_; }
  WorkerId active_worker() const { return active_; }
  const std::vector<std::size_t>& group(std::size_t block) const { return groups_.at(block); }
  const std::vector<std::vector<std::size_t>>& groups() const { return groups_; }

  /// Copies the columns of `block` out of one sample row.
  std::vector<double> slice(std::span<const double> row, std::size_t block) const {
    const auto& g = group(block);
    std::vector<double> out(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) out[k] = row[g[k]];
    return out;
  }

 private:
  std::vector<std::vector<std::size_t>> groups_;
  std::size_t n_features_ = 0;
  WorkerId active_ = 1;
};

enum class PartitionMode { contiguous, round_robin };

inline VerticalPartition partition_features(std::size_t d, std::size_t q, PartitionMode mode) {
  if (q == 0 || q > d) {
    throw InvalidPartition("partition: need 1 <= q <= d (q=" + std::to_string(q) +
                           ", d=" + std::to_string(d) + ")");
  }
  std::vector<std::vector<std::size_t>> groups(q);
  if (mode == PartitionMode::contiguous) {
    const std::size_t base = d / q;
    const std::size_t extra = d % q;
    std::size_t next = 0;
    for (std::size_t k = 0; k < q; ++k) {
      const std::size_t size = base + (k < extra ? 1 : 0);
      for (std::size_t c = 0; c < size; ++c) groups[k].push_back(next++);
    }
  } else {
    for (std::size_t j = 0; j < d; ++j) groups[j % q].push_back(j);
  }
  return VerticalPartition(std::move(groups), d, 1);
}

struct SyntheticOptions {
  double noise_stddev = 0.1;          // regression label noise
  double label_noise_stddev = 0.5;    // classification score noise before taking the sign
};

/// Gaussian features, Gaussian ground-truth weights scaled so the clean score
/// has unit variance. Deterministic for a fixed seed.
inline Dataset generate_synthetic(std::size_t n, std::size_t d, Task task, std::uint64_t seed,
                                  const SyntheticOptions& options = {}) {
  if (n == 0 || d == 0) throw std::invalid_argument("synthetic: n and d must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<double> truth(d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& w : truth) w = normal(rng) * scale;

  Dataset ds;
  ds.n_samples = n;
  ds.n_features = d;
  ds.task = task;
  ds.features.resize(n * d);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double score = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double x = normal(rng);
      ds.at(i, j) = x;
      score += x * truth[j];
    }
    if (task == Task::classification) {
      ds.labels[i] = score + options.label_noise_stddev * normal(rng) >= 0.0 ? 1.0 : -1.0;
    } else {
      ds.labels[i] = score + options.noise_stddev * normal(rng);
    }
  }
  return ds;
}

}  // namespace vafl
