#pragma once

// Offline analysis: reference optimum, sub-optimality and speedup metrics,
// trace-derived delay statistics and the step-size / feasibility calculators.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "vafl/dataplane.hpp"
#include "vafl/engine.hpp"
#include "vafl/error.hpp"
#include "vafl/losses.hpp"

namespace vafl {

struct Optimum {
  std::vector<double> w;  // full feature order
  double bias = 0.0;
  double f_star = 0.0;
  double grad_inf_norm = 0.0;
  std::size_t iterations = 0;
};

struct OptimumOptions {
  double tolerance = 1e-10;  // on the infinity norm of the full gradient
  std::size_t max_iterations = 500;
};

namespace detail {

inline double inf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// Hessian of the full objective over (w, bias).
inline Eigen::MatrixXd objective_hessian(const LossSpec& spec, std::span<const double> w,
                                         double bias, const Dataset& ds) {
  const std::size_t d = w.size();
  const std::size_t m = d + (spec.has_bias ? 1 : 0);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m),
                                            static_cast<Eigen::Index>(m));
  Eigen::VectorXd x(static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < ds.n_samples; ++i) {
    const auto row = ds.row(i);
    for (std::size_t j = 0; j < d; ++j) x[static_cast<Eigen::Index>(j)] = row[j];
    if (spec.has_bias) x[static_cast<Eigen::Index>(d)] = 1.0;
    const double score = local_product(w, row) + (spec.has_bias ? bias : 0.0);
    h.selfadjointView<Eigen::Lower>().rankUpdate(x, loss_curvature(spec, score, ds.labels[i]));
  }
  h = h.selfadjointView<Eigen::Lower>();
  h /= static_cast<double>(ds.n_samples);
  h.diagonal().array() += spec.lambda;
  return h;
}

}  // namespace detail

/// Closed-form ridge minimizer from the normal equations, (w, bias) with the
/// bias appended when present.
inline std::vector<double> ridge_normal_equations(const LossSpec& spec, const Dataset& ds) {
  if (spec.kind != LossKind::ridge) throw AnalysisError("ridge_normal_equations: not a ridge loss");
  const std::size_t d = ds.n_features;
  const auto m = static_cast<Eigen::Index>(d + (spec.has_bias ? 1 : 0));
  Eigen::MatrixXd x(static_cast<Eigen::Index>(ds.n_samples), m);
  Eigen::VectorXd y(static_cast<Eigen::Index>(ds.n_samples));
  for (std::size_t i = 0; i < ds.n_samples; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t j = 0; j < d; ++j) x(r, static_cast<Eigen::Index>(j)) = ds.at(i, j);
    if (spec.has_bias) x(r, m - 1) = 1.0;
    y[r] = ds.labels[i];
  }
  // (2/n) X^T (Xz - y) + lambda z = 0
  const double n = static_cast<double>(ds.n_samples);
  Eigen::MatrixXd a = (2.0 / n) * x.transpose() * x;
  a.diagonal().array() += spec.lambda;
  const Eigen::VectorXd z = a.ldlt().solve((2.0 / n) * x.transpose() * y);
  return {z.data(), z.data() + z.size()};
}

/// Minimizes the full objective with damped Newton steps under an Armijo
/// backtracking line search, falling back to the gradient direction when the
/// Newton direction is not a descent direction.
inline Optimum reference_optimum(const LossSpec& spec, const Dataset& ds,
                                 const OptimumOptions& options = {}) {
  spec.validate();
  if (!(spec.lambda > 0.0)) throw AnalysisError("reference_optimum: lambda must be positive");
  ds.validate();
  const std::size_t d = ds.n_features;
  const std::size_t m = d + (spec.has_bias ? 1 : 0);
  std::vector<double> z(m, 0.0);  // (w, bias)
  auto split_w = [&](const std::vector<double>& v) { return std::span<const double>(v.data(), d); };
  auto split_b = [&](const std::vector<double>& v) { return spec.has_bias ? v[d] : 0.0; };

  double f = objective_full(spec, split_w(z), split_b(z), ds);
  auto g = gradient_full(spec, split_w(z), split_b(z), ds);
  std::size_t it = 0;
  for (; it < options.max_iterations && detail::inf_norm(g) > options.tolerance; ++it) {
    const Eigen::MatrixXd h = detail::objective_hessian(spec, split_w(z), split_b(z), ds);
    const Eigen::Map<const Eigen::VectorXd> gv(g.data(), static_cast<Eigen::Index>(m));
    Eigen::VectorXd dir = -h.ldlt().solve(gv);
    double slope = gv.dot(dir);
    if (!dir.allFinite() || !(slope < 0.0)) {
      dir = -gv;
      slope = -gv.squaredNorm();
    }
    double step = 1.0;
    std::vector<double> trial(m);
    double f_trial = f;
    bool accepted = false;
    for (int k = 0; k < 60; ++k) {
      for (std::size_t j = 0; j < m; ++j) trial[j] = z[j] + step * dir[static_cast<Eigen::Index>(j)];
      f_trial = objective_full(spec, split_w(trial), split_b(trial), ds);
      if (f_trial <= f + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // Round-off floor: accept the full Newton step if it does not increase f.
      for (std::size_t j = 0; j < m; ++j) trial[j] = z[j] + dir[static_cast<Eigen::Index>(j)];
      f_trial = objective_full(spec, split_w(trial), split_b(trial), ds);
      if (f_trial > f) break;
    }
    z = std::move(trial);
    f = f_trial;
    g = gradient_full(spec, split_w(z), split_b(z), ds);
  }
  const double achieved = detail::inf_norm(g);
  if (achieved > options.tolerance) {
    throw ConvergenceError("reference_optimum: gradient norm " + std::to_string(achieved) +
                               " above tolerance after " + std::to_string(it) + " iterations",
                           achieved);
  }
  if (spec.kind == LossKind::ridge) {
    const auto closed = ridge_normal_equations(spec, ds);
    for (std::size_t j = 0; j < m; ++j) {
      if (std::abs(closed[j] - z[j]) > 1e-8 * std::max(1.0, std::abs(closed[j]))) {
        throw AnalysisError("reference_optimum: descent and normal equations disagree at coordinate " +
                            std::to_string(j));
      }
    }
  }
  Optimum out;
  out.w.assign(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(d));
  out.bias = split_b(z);
  out.f_star = f;
  out.grad_inf_norm = achieved;
  out.iterations = it;
  return out;
}

struct CurvePoint {
  double time_ms = 0.0;
  std::size_t updates = 0;
  double suboptimality = 0.0;
};

/// f(w) - f* per snapshot. Values down to -1e-9 are clamped to zero; anything
/// lower means the reference optimum is wrong.
inline std::vector<CurvePoint> suboptimality_curve(const std::vector<ModelSnapshot>& snapshots,
                                                   double f_star, const LossSpec& spec,
                                                   const Dataset& ds,
                                                   const VerticalPartition& part) {
  std::vector<CurvePoint> out;
  out.reserve(snapshots.size());
  for (const auto& s : snapshots) {
    double gap = objective_value(spec, s.model, ds, part) - f_star;
    if (gap < -1e-9) {
      throw AnalysisError("suboptimality_curve: negative sub-optimality " + std::to_string(gap) +
                          " at t=" + std::to_string(s.time_ms) + "ms; reference optimum is broken");
    }
    out.push_back({s.time_ms, s.updates, std::max(gap, 0.0)});
  }
  return out;
}

/// First time the curve reaches `target`, linearly interpolated between the
/// bracketing points. Returns a negative value if never reached.
inline double time_to_target(const std::vector<CurvePoint>& curve, double target) {
  for (std::size_t k = 0; k < curve.size(); ++k) {
    if (curve[k].suboptimality <= target) {
      if (k == 0) return curve[0].time_ms;
      const auto& a = curve[k - 1];
      const auto& b = curve[k];
      const double frac = (a.suboptimality - target) / (a.suboptimality - b.suboptimality);
      return a.time_ms + frac * (b.time_ms - a.time_ms);
    }
  }
  return -1.0;
}

/// (sync time to target) / (async time to target).
inline double speedup(const std::vector<CurvePoint>& async_curve,
                      const std::vector<CurvePoint>& sync_curve, double target) {
  const double ta = time_to_target(async_curve, target);
  if (ta < 0.0) throw AnalysisError("speedup: async curve never reaches target " + std::to_string(target));
  const double ts = time_to_target(sync_curve, target);
  if (ts < 0.0) throw AnalysisError("speedup: sync curve never reaches target " + std::to_string(target));
  if (ta == 0.0) {
    if (ts == 0.0) return 1.0;
    throw AnalysisError("speedup: async curve starts below target");
  }
  return ts / ta;
}

struct EpochStats {
  std::size_t upsilon = 0;
  std::size_t measured_tau = 0;
  std::size_t measured_eta1 = 0;
  std::size_t measured_eta2 = 0;
  std::vector<std::size_t> k_sizes;
};

/// Greedy left-to-right split of the worker sequence into minimal windows
/// that contain every worker. eta1 is the largest count of one worker inside
/// one complete window.
inline EpochStats epoch_stats_from_sequence(std::span<const WorkerId> workers, std::size_t q) {
  if (q == 0) throw AnalysisError("epoch_stats: q must be positive");
  std::vector<bool> seen_any(q + 1, false);
  for (WorkerId w : workers) {
    if (w == 0 || w > q) throw AnalysisError("epoch_stats: worker id " + std::to_string(w) + " out of range");
    seen_any[w] = true;
  }
  std::string missing;
  for (WorkerId w = 1; w <= q; ++w) {
    if (!seen_any[w]) missing += (missing.empty() ? "" : ",") + std::to_string(w);
  }
  if (!missing.empty()) throw AnalysisError("epoch_stats: workers absent from log: " + missing);

  EpochStats s;
  std::vector<std::size_t> counts(q + 1, 0);
  std::size_t distinct = 0;
  std::size_t len = 0;
  for (WorkerId w : workers) {
    if (counts[w]++ == 0) ++distinct;
    ++len;
    if (distinct == q) {
      ++s.upsilon;
      s.k_sizes.push_back(len);
      s.measured_eta1 = std::max(s.measured_eta1, *std::max_element(counts.begin(), counts.end()));
      std::fill(counts.begin(), counts.end(), 0);
      distinct = 0;
      len = 0;
    }
  }
  return s;
}

inline EpochStats epoch_stats(const EventLog& log, std::size_t q) {
  std::vector<WorkerId> seq;
  seq.reserve(log.size());
  for (const auto& r : log.records()) seq.push_back(r.worker);
  auto s = epoch_stats_from_sequence(seq, q);
  for (const auto& r : log.records()) {
    s.measured_tau = std::max(s.measured_tau, r.max_staleness);
    for (auto lag : r.block_lag) s.measured_eta2 = std::max(s.measured_eta2, lag);
  }
  return s;
}

struct TheoryConstants {
  double L = 1.0;
  double L_max = 1.0;
  double mu = 1.0;
  double G = 1.0;
  double q = 1.0;
  double eta1 = 1.0;
  double eta2 = 1.0;
  double tau = 1.0;
  double epsilon = 1.0;
  double initial_gap = 1.0;  // f(w_0) - f(w*), used by the epoch bounds

  void validate() const {
    for (double v : {L, L_max, mu, G, q, eta1, eta2, tau, epsilon, initial_gap}) {
      if (!(v > 0.0) || !std::isfinite(v)) throw AnalysisError("theory constants must be positive and finite");
    }
  }
  /// L_max <= L <= q L_max.
  bool smoothness_consistent() const { return L_max <= L && L <= q * L_max; }
};

struct Theorem1Result {
  double gamma = 0.0;
  double min_epochs = 0.0;
};

inline Theorem1Result stepsize_theorem1(const TheoryConstants& c) {
  c.validate();
  const double delay = c.q * c.eta1 * c.eta1 + c.eta2 * c.tau;
  const double denom = 2.0 * c.L * c.L * delay;
  const double inner = c.L_max * c.L_max +
                       2.0 * c.mu * c.epsilon * (c.L * c.L * c.q * c.eta1 * c.eta1 + c.eta2 * c.L * c.L * c.tau) /
                           (c.G * c.eta1 * c.q);
  const double numer = -c.L_max + std::sqrt(inner);
  if (denom == 0.0 || numer == 0.0) throw AnalysisError("stepsize_theorem1: zero denominator");
  Theorem1Result r;
  r.gamma = numer / denom;
  r.min_epochs = (2.0 / c.mu) * (denom / numer) * std::log(2.0 * c.initial_gap / c.epsilon);
  return r;
}

struct Theorem2Report {
  double C = 0.0;
  double rho = 0.0;
  bool rho_positive = false;
  double ratio_bound = 0.0;
  bool ratio_bound_ok = false;
  double noise_term = 0.0;
  double noise_limit = 0.0;
  bool noise_term_ok = false;
  double inner_epochs = 0.0;  // log 0.25 / log(1 - rho), NaN unless 0 < rho < 1
  double outer_loops = 0.0;
  bool feasible = false;
  std::string note = "rho is required to be positive";
};

inline Theorem2Report check_theorem2(const TheoryConstants& c, double gamma) {
  c.validate();
  if (!(gamma > 0.0)) throw AnalysisError("check_theorem2: gamma must be positive");
  const double L2 = c.L * c.L;
  Theorem2Report r;
  r.C = (c.eta1 * gamma * L2 * c.q * c.eta1 + c.L_max) * gamma * gamma / 2.0;
  r.rho = gamma * c.mu / 2.0 - 16.0 * L2 * c.eta1 * c.q * r.C / c.mu;
  r.rho_positive = r.rho > 0.0;
  r.ratio_bound = 8.0 * L2 * c.eta1 * c.q * r.C / (r.rho * c.mu);
  r.ratio_bound_ok = r.rho_positive && r.ratio_bound <= 0.5;
  const double cg = r.C / gamma;
  r.noise_term = gamma * gamma * gamma *
               ((0.5 + 2.0 * cg) * c.eta2 * c.tau + 4.0 * cg * c.eta1 * c.eta1 * c.q) *
               c.eta1 * c.q * L2 * c.G / r.rho;
  r.noise_limit = c.epsilon / 8.0;
  r.noise_term_ok = r.rho_positive && r.noise_term <= r.noise_limit;
  r.inner_epochs = (r.rho > 0.0 && r.rho < 1.0) ? std::log(0.25) / std::log(1.0 - r.rho)
                                                : std::numeric_limits<double>::quiet_NaN();
  r.outer_loops = std::log(2.0 * c.initial_gap / c.epsilon) / std::log(4.0 / 3.0);
  r.feasible = r.rho_positive && r.ratio_bound_ok && r.noise_term_ok;
  return r;
}

struct Theorem3Report {
  double c0 = 0.0;
  double c1 = 0.0;
  double c2 = 0.0;
  double margin = 0.0;       // gamma mu^2 / 4 - 2 c1 - c2
  bool margin_positive = false;
  double residual_term = 0.0;
  double residual_limit = 0.0;
  bool residual_term_ok = false;
  double contraction = 0.0;   // 1 - gamma mu / 4
  bool contraction_ok = false;
  double c2_coupling = 0.0;
  bool c2_coupling_ok = false;
  double c1_coupling = 0.0;
  bool c1_coupling_ok = false;
  double epochs = 0.0;       // NaN when the log argument is not positive
  bool feasible = false;
};

/// `l` is the number of samples.
inline Theorem3Report check_theorem3(const TheoryConstants& c, double gamma, double rho,
                                     std::size_t l) {
  c.validate();
  if (!(gamma > 0.0)) throw AnalysisError("check_theorem3: gamma must be positive");
  if (l == 0) throw AnalysisError("check_theorem3: l must be positive");
  const double ld = static_cast<double>(l);
  if (!(rho > 1.0 - 1.0 / ld && rho < 1.0)) {
    throw AnalysisError("check_theorem3: rho must lie in (1 - 1/l, 1)");
  }
  const double L2 = c.L * c.L;
  const double q = c.q, e1 = c.eta1, e2 = c.eta2;
  Theorem3Report r;
  r.c0 = ((e2 / 2.0 + 3.0 * (gamma * q * e1 * e1 + c.L_max) * (e1 + 2.0 * e2)) * c.tau +
          (gamma * L2 * q * e1 * e1 + 8.0 * c.L_max) * e1 * q * e1) *
         std::pow(gamma, 4) * L2 * e1 * q * c.G;
  r.c1 = (gamma * L2 * q * e1 * e1 + c.L_max) * gamma * gamma * e1 * q * 2.0 * L2;
  r.c2 = 4.0 * (gamma * L2 * q * e1 * e1 + c.L_max) * (L2 * e1 * e1 * q / ld) * gamma * gamma;
  const double quarter = gamma * c.mu * c.mu / 4.0;
  r.margin = quarter - 2.0 * r.c1 - r.c2;
  r.margin_positive = r.margin > 0.0;
  r.residual_term = 4.0 * r.c0 / (gamma * c.mu * (1.0 - rho) * r.margin);
  r.residual_limit = c.epsilon / 2.0;
  r.residual_term_ok = r.residual_term <= r.residual_limit;
  r.contraction = 1.0 - gamma * c.mu / 4.0;
  r.contraction_ok = r.contraction > 0.0 && r.contraction < 1.0;
  const double ratio = 1.0 / (1.0 - (1.0 - 1.0 / ld) / rho);
  r.c2_coupling = -quarter + 2.0 * r.c1 + r.c2 * (1.0 + ratio);
  r.c2_coupling_ok = r.c2_coupling <= 0.0;
  r.c1_coupling = -quarter + r.c2 + r.c1 * (2.0 + ratio);
  r.c1_coupling_ok = r.c1_coupling <= 0.0;
  const double arg = 2.0 * (2.0 * rho - 1.0 + gamma * c.mu / 4.0) * c.initial_gap /
                     (c.epsilon * (rho - 1.0 + gamma * c.mu / 4.0) * r.margin);
  r.epochs = arg > 0.0 ? std::log(arg) / std::log(1.0 / rho) : std::numeric_limits<double>::quiet_NaN();
  r.feasible = r.margin_positive && r.residual_term_ok && r.contraction_ok && r.c2_coupling_ok && r.c1_coupling_ok;
  return r;
}

/// Conservative problem constants: mu = lambda; L from the top eigenvalue of
/// X^T X / n scaled by the curvature bound; L_max the largest block analogue;
/// G the largest squared per-sample block gradient at `model`.
inline TheoryConstants estimate_constants(const LossSpec& spec, const Dataset& ds,
                                          const VerticalPartition& part, const ModelView& model) {
  auto top_eigen = [&](const std::vector<std::size_t>& cols) {
    const auto k = static_cast<Eigen::Index>(cols.size() + (spec.has_bias ? 1 : 0));
    Eigen::MatrixXd x(static_cast<Eigen::Index>(ds.n_samples), k);
    for (std::size_t i = 0; i < ds.n_samples; ++i) {
      for (std::size_t j = 0; j < cols.size(); ++j) {
        x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = ds.at(i, cols[j]);
      }
      if (spec.has_bias) x(static_cast<Eigen::Index>(i), k - 1) = 1.0;
    }
    const Eigen::MatrixXd gram = x.transpose() * x / static_cast<double>(ds.n_samples);
    return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(gram, Eigen::EigenvaluesOnly)
        .eigenvalues()
        .maxCoeff();
  };

  const double curv = loss_curvature_bound(spec);
  TheoryConstants c;
  c.mu = spec.lambda;
  std::vector<std::size_t> all(ds.n_features);
  for (std::size_t j = 0; j < all.size(); ++j) all[j] = j;
  c.L = curv * top_eigen(all) + spec.lambda;
  c.L_max = 0.0;
  for (const auto& g : part.groups()) c.L_max = std::max(c.L_max, curv * top_eigen(g) + spec.lambda);
  c.L = std::max(c.L, c.L_max);
  c.q = static_cast<double>(part.workers());
  c.G = 0.0;
  for (std::size_t i = 0; i < ds.n_samples; ++i) {
    const double score = full_score(model, ds, part, i);
    for (std::size_t b = 0; b < part.workers(); ++b) {
      const auto g = sample_block_gradient(spec, model, ds, part, i, b, score);
      c.G = std::max(c.G, squared_norm(g.grad) + (g.bias ? *g.bias * *g.bias : 0.0));
    }
  }
  return c;
}

}  // namespace vafl
