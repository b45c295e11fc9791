#pragma once

// Independent reference implementations used only by tests. None of these
// call into the code under test except for plain data types.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "vafl/analysis.hpp"
#include "vafl/dataplane.hpp"
#include "vafl/engine.hpp"
#include "vafl/treecomm.hpp"

namespace oracle {

// ---- trees ----------------------------------------------------------------

struct Tree {
  int leaf = 0;  // >0 for leaves
  std::shared_ptr<Tree> left, right;
};
using TreePtr = std::shared_ptr<Tree>;

inline TreePtr make_leaf(int id) {
  auto t = std::make_shared<Tree>();
  t->leaf = id;
  return t;
}

inline TreePtr make_join(TreePtr a, TreePtr b) {
  auto t = std::make_shared<Tree>();
  t->left = std::move(a);
  t->right = std::move(b);
  return t;
}

inline TreePtr clone(const TreePtr& t) {
  if (t->leaf) return make_leaf(t->leaf);
  return make_join(clone(t->left), clone(t->right));
}

// Every edge (and the spot above the root) of `t` where a new leaf can be
// grafted; returns the tree obtained by grafting at position `pos`.
inline int count_positions(const TreePtr& t) {
  if (t->leaf) return 1;
  return 1 + count_positions(t->left) + count_positions(t->right);
}

inline TreePtr graft(const TreePtr& t, int& pos, int id) {
  if (pos == 0) {
    --pos;
    return make_join(clone(t), make_leaf(id));
  }
  --pos;
  if (t->leaf) return make_leaf(t->leaf);
  auto l = graft(t->left, pos, id);
  auto r = graft(t->right, pos, id);
  return make_join(l, r);
}

/// All (2n-3)!! rooted binary trees with leaves 1..n, by stepwise insertion.
inline std::vector<TreePtr> enumerate_trees(int n) {
  std::vector<TreePtr> cur{make_leaf(1)};
  for (int id = 2; id <= n; ++id) {
    std::vector<TreePtr> next;
    for (const auto& t : cur) {
      const int positions = count_positions(t);
      for (int p = 0; p < positions; ++p) {
        int pos = p;
        next.push_back(graft(t, pos, id));
      }
    }
    cur = std::move(next);
  }
  return cur;
}

inline std::uint32_t clade_mask(const TreePtr& t, std::vector<std::uint32_t>& internal) {
  if (t->leaf) return 1u << t->leaf;
  const auto m = clade_mask(t->left, internal) | clade_mask(t->right, internal);
  internal.push_back(m);
  return m;
}

/// Significant difference by brute force over clade bitmasks.
inline bool significantly_different(const TreePtr& a, const TreePtr& b, int q) {
  std::vector<std::uint32_t> ca, cb;
  clade_mask(a, ca);
  clade_mask(b, cb);
  for (auto x : ca) {
    const int sx = __builtin_popcount(x);
    if (sx <= 1 || sx >= q) continue;
    for (auto y : cb) {
      if (x == y) return false;
    }
  }
  return true;
}

inline vafl::TreeTopology to_topology(const TreePtr& t) {
  if (t->leaf) return vafl::TreeTopology::leaf(static_cast<vafl::WorkerId>(t->leaf));
  return vafl::TreeTopology::join(to_topology(t->left), to_topology(t->right));
}

// ---- epoch windows --------------------------------------------------------

struct Windows {
  std::size_t count = 0;
  std::size_t eta1 = 0;
  std::vector<std::size_t> sizes;
};

/// For each start, scans every candidate end and keeps the shortest window
/// containing all q workers.
inline Windows brute_force_windows(const std::vector<std::size_t>& seq, std::size_t q) {
  Windows w;
  std::size_t start = 0;
  while (start < seq.size()) {
    std::size_t best_end = seq.size();
    for (std::size_t end = start; end < seq.size(); ++end) {
      bool covers = true;
      for (std::size_t worker = 1; worker <= q && covers; ++worker) {
        covers = std::find(seq.begin() + static_cast<std::ptrdiff_t>(start),
                           seq.begin() + static_cast<std::ptrdiff_t>(end) + 1,
                           worker) != seq.begin() + static_cast<std::ptrdiff_t>(end) + 1;
      }
      if (covers) {
        best_end = end;
        break;
      }
    }
    if (best_end == seq.size()) break;
    ++w.count;
    w.sizes.push_back(best_end - start + 1);
    for (std::size_t worker = 1; worker <= q; ++worker) {
      const auto c = static_cast<std::size_t>(
          std::count(seq.begin() + static_cast<std::ptrdiff_t>(start),
                     seq.begin() + static_cast<std::ptrdiff_t>(best_end) + 1, worker));
      w.eta1 = std::max(w.eta1, c);
    }
    start = best_end + 1;
  }
  return w;
}

// ---- sequential single-worker optimizers ----------------------------------

inline double logistic_sigma(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double residual(const vafl::LossSpec& spec, double score, double y) {
  if (spec.kind == vafl::LossKind::logistic) return -y * logistic_sigma(-y * score);
  return 2.0 * (score - y);
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += a[k] * b[k];
  return s;
}

/// Plain SGD / SVRG on the whole vector with the engine's sampling stream.
inline std::vector<double> sequential_run(const vafl::Dataset& ds, const vafl::RunConfig& c) {
  const std::size_t d = ds.n_features;
  std::vector<double> w(d, 0.0);
  auto rng = vafl::worker_sampler(c.seed, 1);
  std::uniform_int_distribution<std::size_t> pick(0, ds.n_samples - 1);
  std::vector<double> snap, full, snap_r;
  auto take_snapshot = [&] {
    snap = w;
    full.assign(d, 0.0);
    snap_r.resize(ds.n_samples);
    for (std::size_t i = 0; i < ds.n_samples; ++i) {
      snap_r[i] = residual(c.loss, dot(snap.data(), &ds.features[i * d], d), ds.labels[i]);
      for (std::size_t k = 0; k < d; ++k) {
        full[k] += snap_r[i] * ds.features[i * d + k] + c.loss.lambda * snap[k];
      }
    }
    for (auto& v : full) v /= static_cast<double>(ds.n_samples);
  };
  for (std::size_t t = 0; t < c.updates; ++t) {
    if (c.algorithm == vafl::Algorithm::afsvrg && t % c.snapshot_interval == 0) take_snapshot();
    const std::size_t i = pick(rng);
    const double* x = &ds.features[i * d];
    const double r = residual(c.loss, dot(w.data(), x, d), ds.labels[i]);
    std::vector<double> v(d);
    for (std::size_t k = 0; k < d; ++k) {
      v[k] = r * x[k] + c.loss.lambda * w[k];
      if (c.algorithm == vafl::Algorithm::afsvrg) {
        v[k] = v[k] - (snap_r[i] * x[k] + c.loss.lambda * snap[k]) + full[k];
      }
    }
    for (std::size_t k = 0; k < d; ++k) w[k] = w[k] - c.gamma * v[k];
  }
  return w;
}

/// SAGA with the mean recomputed from scratch at every step.
inline std::vector<double> sequential_saga(const vafl::Dataset& ds, const vafl::RunConfig& c) {
  const std::size_t d = ds.n_features, n = ds.n_samples;
  std::vector<double> w(d, 0.0);
  auto rng = vafl::worker_sampler(c.seed, 1);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::vector<double>> table(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i) {
    const double r = residual(c.loss, 0.0, ds.labels[i]);
    for (std::size_t k = 0; k < d; ++k) table[i][k] = r * ds.features[i * d + k];
  }
  for (std::size_t t = 0; t < c.updates; ++t) {
    const std::size_t i = pick(rng);
    const double* x = &ds.features[i * d];
    const double r = residual(c.loss, dot(w.data(), x, d), ds.labels[i]);
    std::vector<double> g(d), v(d);
    for (std::size_t k = 0; k < d; ++k) {
      g[k] = r * x[k] + c.loss.lambda * w[k];
      double mean = 0.0;
      for (std::size_t j = 0; j < n; ++j) mean += table[j][k];
      v[k] = g[k] - table[i][k] + mean / static_cast<double>(n);
    }
    table[i] = g;
    for (std::size_t k = 0; k < d; ++k) w[k] = w[k] - c.gamma * v[k];
  }
  return w;
}

/// SAGA with the usual O(d) running-mean update, refreshed exactly every n steps.
inline std::vector<double> sequential_saga_incremental(const vafl::Dataset& ds, const vafl::RunConfig& c) {
  const std::size_t d = ds.n_features, n = ds.n_samples;
  const auto nd = static_cast<double>(n);
  std::vector<double> w(d, 0.0), mean(d, 0.0);
  auto rng = vafl::worker_sampler(c.seed, 1);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::vector<double>> table(n, std::vector<double>(d));
  auto refresh = [&] {
    for (std::size_t k = 0; k < d; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += table[j][k];
      mean[k] = s / nd;
    }
  };
  for (std::size_t i = 0; i < n; ++i) {
    const double r = residual(c.loss, 0.0, ds.labels[i]);
    for (std::size_t k = 0; k < d; ++k) table[i][k] = r * ds.features[i * d + k] + c.loss.lambda * 0.0;
  }
  refresh();
  for (std::size_t t = 0; t < c.updates; ++t) {
    const std::size_t i = pick(rng);
    const double* x = &ds.features[i * d];
    const double r = residual(c.loss, dot(w.data(), x, d), ds.labels[i]);
    std::vector<double> v(d);
    for (std::size_t k = 0; k < d; ++k) {
      const double g = r * x[k] + c.loss.lambda * w[k];
      v[k] = g - table[i][k] + mean[k];
      mean[k] += (g - table[i][k]) / nd;
      table[i][k] = g;
    }
    if ((t + 1) % n == 0) refresh();
    for (std::size_t k = 0; k < d; ++k) w[k] = w[k] - c.gamma * v[k];
  }
  return w;
}

// ---- finite differences ---------------------------------------------------

inline std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                              std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double orig = x[k];
    x[k] = orig + h;
    const double up = f(x);
    x[k] = orig - h;
    const double down = f(x);
    x[k] = orig;
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

// ---- step-size and feasibility formulas, transcribed directly in long double ----------------

struct Constants {
  long double L, Lmax, mu, G, q, e1, e2, tau, eps, gap;
};

inline Constants from(const vafl::TheoryConstants& c) {
  return {c.L, c.L_max, c.mu, c.G, c.q, c.eta1, c.eta2, c.tau, c.epsilon, c.initial_gap};
}

inline long double stepsize_gamma(const Constants& c) {
  const long double num =
      -c.Lmax + std::sqrt(c.Lmax * c.Lmax + (2 * c.mu * c.eps * (c.L * c.L * c.q * c.e1 * c.e1 +
                                                                   c.e2 * c.L * c.L * c.tau)) /
                                                (c.G * c.e1 * c.q));
  return num / (2 * c.L * c.L * (c.q * c.e1 * c.e1 + c.e2 * c.tau));
}

inline long double stepsize_epochs(const Constants& c) {
  const long double num =
      -c.Lmax + std::sqrt(c.Lmax * c.Lmax + (2 * c.mu * c.eps * (c.L * c.L * c.q * c.e1 * c.e1 +
                                                                   c.e2 * c.L * c.L * c.tau)) /
                                                (c.G * c.e1 * c.q));
  return (2 / c.mu) * (2 * c.L * c.L * (c.q * c.e1 * c.e1 + c.e2 * c.tau)) / num *
         std::log(2 * c.gap / c.eps);
}

struct T2 {
  long double C, rho, ratio_bound, noise_term;
};

inline T2 svrg_feasibility(const Constants& c, long double g) {
  T2 r;
  r.C = (c.e1 * g * c.L * c.L * c.q * c.e1 + c.Lmax) * (g * g / 2);
  r.rho = (g * c.mu) / 2 - (16 * c.L * c.L * c.e1 * c.q * r.C) / c.mu;
  r.ratio_bound = (8 * c.L * c.L * c.e1 * c.q * r.C) / (r.rho * c.mu);
  r.noise_term = g * g * g * ((0.5L + 2 * r.C / g) * c.e2 * c.tau + 4 * (r.C / g) * c.e1 * c.e1 * c.q) *
           (c.e1 * c.q * c.L * c.L * c.G) / r.rho;
  return r;
}

struct T3 {
  long double c0, c1, c2, residual_term, contraction, c2_coupling, c1_coupling;
};

inline T3 saga_feasibility(const Constants& c, long double g, long double rho, long double l) {
  T3 r;
  const long double L2 = c.L * c.L;
  r.c0 = ((c.e2 / 2 + 3 * (g * c.q * c.e1 * c.e1 + c.Lmax) * (c.e1 + 2 * c.e2)) * c.tau +
          (g * L2 * c.q * c.e1 * c.e1 + 8 * c.Lmax) * c.e1 * c.q * c.e1) *
         g * g * g * g * L2 * c.e1 * c.q * c.G;
  r.c1 = (g * L2 * c.q * c.e1 * c.e1 + c.Lmax) * g * g * c.e1 * c.q * 2 * L2;
  r.c2 = 4 * (g * L2 * c.q * c.e1 * c.e1 + c.Lmax) * (L2 * c.e1 * c.e1 * c.q / l) * g * g;
  const long double frac = 1 / (1 - (1 - 1 / l) / rho);
  r.residual_term = 4 * r.c0 / (g * c.mu * (1 - rho) * (g * c.mu * c.mu / 4 - 2 * r.c1 - r.c2));
  r.contraction = 1 - g * c.mu / 4;
  r.c2_coupling = -g * c.mu * c.mu / 4 + 2 * r.c1 + r.c2 * (1 + frac);
  r.c1_coupling = -g * c.mu * c.mu / 4 + r.c2 + r.c1 * (2 + frac);
  return r;
}

inline bool close(long double a, long double b, long double rel = 1e-10L) {
  if (std::isnan(static_cast<double>(a)) || std::isnan(static_cast<double>(b))) {
    return std::isnan(static_cast<double>(a)) && std::isnan(static_cast<double>(b));
  }
  return std::fabs(a - b) <= rel * std::max<long double>(1, std::max(std::fabs(a), std::fabs(b)));
}

}  // namespace oracle
