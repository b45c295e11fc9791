#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "oracles.hpp"
#include "vafl/analysis.hpp"
#include "vafl/engine.hpp"

using namespace vafl;

namespace {

RunConfig base_config(Algorithm a = Algorithm::afsgd) {
  RunConfig c;
  c.algorithm = a;
  c.gamma = 0.05;
  c.updates = 600;
  c.snapshot_interval = 100;
  c.loss = LossSpec::logistic(1e-3);
  c.seed = 11;
  c.eval_interval = 50;
  return c;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

bool bit_equal(const ModelView& a, const ModelView& b) {
  if (a.blocks.size() != b.blocks.size()) return false;
  for (std::size_t k = 0; k < a.blocks.size(); ++k) {
    if (!bit_equal(a.blocks[k], b.blocks[k])) return false;
  }
  return std::memcmp(&a.bias, &b.bias, sizeof(double)) == 0;
}

}  // namespace

TEST(PullProducts, SingleWorker) {
  const auto ds = generate_synthetic(10, 3, Task::classification, 1);
  const auto part = partition_features(3, 1, PartitionMode::contiguous);
  Federation fed(base_config(), ds, part);
  auto m = ModelView::zeros(part);
  m.blocks[0] = {0.5, -1.0, 2.0};
  fed.set_model(m);
  const auto p = fed.pull_products(1, 4);
  ASSERT_TRUE(p);
  EXPECT_EQ(p->score, local_product(m.blocks[0], ds.row(4)));
  EXPECT_EQ(fed.log()[0].max_staleness, 0u);
  EXPECT_EQ(fed.log()[0].messages, 0u);
}

TEST(PullProducts, FrozenModelGivesFullDotProduct) {
  const auto ds = generate_synthetic(20, 9, Task::classification, 2);
  const auto part = partition_features(9, 4, PartitionMode::round_robin);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  std::vector<double> w(9);
  for (auto& v : w) v = nd(rng);
  auto plain_cfg = base_config();
  auto masked_cfg = base_config();
  masked_cfg.mask_mode = MaskMode::masked;
  Federation plain(plain_cfg, ds, part), masked(masked_cfg, ds, part);
  plain.set_model(ModelView::from_full(w, part));
  masked.set_model(ModelView::from_full(w, part));
  for (std::size_t i = 0; i < 20; ++i) {
    const double direct = local_product(w, ds.row(i));
    const auto a = plain.pull_products(1 + i % 4, i);
    const auto b = masked.pull_products(1 + i % 4, i);
    ASSERT_TRUE(a && b);
    EXPECT_NEAR(a->score, direct, 1e-12 * std::max(1.0, std::abs(direct)));
    EXPECT_LT(std::abs(a->score - b->score) / std::max(1.0, std::abs(a->score)), 1e-9);
    EXPECT_EQ(a->versions, (std::vector<std::size_t>{0, 0, 0, 0}));
  }
}

TEST(PullProducts, InFlightUpdatesCountAsStaleness) {
  const auto ds = generate_synthetic(10, 4, Task::classification, 2);
  const auto part = partition_features(4, 2, PartitionMode::contiguous);
  Federation fed(base_config(), ds, part);
  const auto a = fed.pull_products(1, 0);  // t=0, worker 1 in flight
  const auto b = fed.pull_products(2, 1);  // t=1 misses update 0
  ASSERT_TRUE(a && b);
  EXPECT_EQ(fed.log()[1].max_staleness, 1u);
  EXPECT_EQ(fed.log()[1].block_lag, (std::vector<std::size_t>{1, 0}));
  fed.finish_step(1, *a);
  const auto c = fed.pull_products(1, 2);  // t=2 misses update 1
  EXPECT_EQ(fed.log()[2].max_staleness, 1u);
  EXPECT_EQ(c->versions, (std::vector<std::size_t>{1, 0}));
  EXPECT_THROW(fed.pull_products(3, 0), std::out_of_range);
  EXPECT_THROW(fed.pull_products(1, 10), std::out_of_range);
}

TEST(RunAsync, SingleWorkerMatchesSequentialSgdAndSvrgBitForBit) {
  const auto ds = generate_synthetic(40, 6, Task::classification, 4);
  const auto part = partition_features(6, 1, PartitionMode::contiguous);
  for (auto a : {Algorithm::afsgd, Algorithm::afsvrg}) {
    auto c = base_config(a);
    c.updates = 777;
    c.snapshot_interval = 80;
    const auto r = run_async(c, ds, part);
    EXPECT_TRUE(bit_equal(r.final_model.blocks[0], oracle::sequential_run(ds, c))) << to_string(a);
  }
}

TEST(RunAsync, SingleWorkerSagaMatchesExactMeanReference) {
  const auto ds = generate_synthetic(30, 5, Task::classification, 4);
  const auto part = partition_features(5, 1, PartitionMode::contiguous);
  auto c = base_config(Algorithm::afsaga);
  c.updates = 500;
  const auto r = run_async(c, ds, part);
  const auto ref = oracle::sequential_saga(ds, c);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(r.final_model.blocks[0][k], ref[k], 1e-10);
  EXPECT_TRUE(bit_equal(r.final_model.blocks[0], oracle::sequential_saga_incremental(ds, c)));
}

TEST(RunSync, SingleWorkerEqualsAsync) {
  const auto ds = generate_synthetic(30, 5, Task::classification, 4);
  const auto part = partition_features(5, 1, PartitionMode::contiguous);
  for (auto a : {Algorithm::afsgd, Algorithm::afsvrg, Algorithm::afsaga}) {
    const auto c = base_config(a);
    const auto x = run_async(c, ds, part);
    const auto y = run_sync(c, ds, part);
    EXPECT_TRUE(bit_equal(x.final_model, y.final_model)) << to_string(a);
    EXPECT_EQ(x.log.to_csv().size(), y.log.to_csv().size());
  }
}

TEST(RunAsync, ReplayReproducesFinalModel) {
  const auto cls = generate_synthetic(40, 10, Task::classification, 5);
  const auto reg = generate_synthetic(40, 10, Task::regression, 5);
  const auto part = partition_features(10, 4, PartitionMode::contiguous);
  for (auto a : {Algorithm::afsgd, Algorithm::afsvrg, Algorithm::afsaga}) {
    for (bool ridge : {false, true}) {
      for (auto mode : {RunMode::async, RunMode::sync}) {
        auto c = base_config(a);
        c.mode = mode;
        c.mask_mode = ridge ? MaskMode::masked : MaskMode::plain;
        c.loss = ridge ? LossSpec::ridge(1e-3, true) : LossSpec::logistic(1e-3);
        c = inject_straggler(c, 3, 2.5);
        const auto& ds = ridge ? reg : cls;
        const auto r = run(c, ds, part);
        const auto replayed = replay_event_log(r.initial_model, r.log, c.gamma, part, c.loss.has_bias);
        EXPECT_TRUE(bit_equal(replayed, r.final_model)) << to_string(a) << ridge << to_string(mode);
        if (ridge) {
          EXPECT_NE(r.final_model.bias, 0.0);
        }
      }
    }
  }
}

TEST(RunAsync, DeterministicInVirtualTime) {
  const auto ds = generate_synthetic(40, 8, Task::classification, 6);
  const auto part = partition_features(8, 4, PartitionMode::contiguous);
  auto c = inject_straggler(base_config(Algorithm::afsaga), 2, 1.7);
  c.mask_mode = MaskMode::masked;
  const auto a = run_async(c, ds, part);
  const auto b = run_async(c, ds, part);
  EXPECT_EQ(a.log.to_csv(), b.log.to_csv());
  EXPECT_TRUE(bit_equal(a.final_model, b.final_model));
  for (std::size_t t = 0; t < a.log.size(); ++t) {
    EXPECT_EQ(a.log[t].t, t);
    EXPECT_TRUE(bit_equal(a.log[t].update, b.log[t].update));
  }
  EXPECT_EQ(a.log.to_csv().substr(0, a.log.to_csv().find('\n')),
            "t,worker,sample,sim_time_ms,max_staleness,messages");
}

TEST(RunAsync, MessageAccounting) {
  const auto ds = generate_synthetic(30, 8, Task::classification, 7);
  for (std::size_t q : {1u, 2u, 3u, 4u, 8u}) {
    const auto part = partition_features(8, q, PartitionMode::contiguous);
    for (auto mask : {MaskMode::plain, MaskMode::masked}) {
      if (q == 1 && mask == MaskMode::masked) continue;
      auto c = base_config();
      c.mask_mode = mask;
      const std::size_t per = (mask == MaskMode::plain ? 1 : 2) * (q - 1);
      const auto a = run_async(c, ds, part);
      for (const auto& r : a.log.records()) ASSERT_EQ(r.messages, per);
      EXPECT_EQ(a.metrics.messages, per * c.updates);
      const auto s = run_sync(c, ds, part);
      for (const auto& r : s.log.records()) ASSERT_EQ(r.messages, r.worker == 1 ? per : 0u);
    }
  }
}

TEST(RunAsync, SetupPassesAreCountedSeparately) {
  const auto ds = generate_synthetic(30, 8, Task::classification, 7);
  const auto part = partition_features(8, 4, PartitionMode::contiguous);
  auto c = base_config(Algorithm::afsaga);
  const auto saga = run_async(c, ds, part);
  EXPECT_EQ(saga.metrics.setup_messages, 30u * 3u);
  c.algorithm = Algorithm::afsvrg;
  const auto svrg = run_async(c, ds, part);
  EXPECT_EQ(svrg.metrics.snapshot_passes, c.updates / c.snapshot_interval);
  EXPECT_EQ(svrg.metrics.setup_messages, svrg.metrics.snapshot_passes * 30u * 3u);
}

TEST(RunAsync, StalenessCapIsEnforced) {
  const auto ds = generate_synthetic(30, 8, Task::classification, 8);
  const auto part = partition_features(8, 4, PartitionMode::contiguous);
  auto c = inject_straggler(base_config(), 4, 3.0);
  c.updates = 2000;
  const auto free_run = run_async(c, ds, part);
  std::size_t observed = 0;
  for (const auto& r : free_run.log.records()) observed = std::max(observed, r.max_staleness);
  ASSERT_GT(observed, 3u);
  c.staleness_cap = 3;
  const auto capped = run_async(c, ds, part);
  for (const auto& r : capped.log.records()) ASSERT_LE(r.max_staleness, 3u);
  EXPECT_GT(capped.metrics.retries, 0u);
  EXPECT_EQ(capped.log.size(), c.updates);
}

TEST(RunAsync, StragglerCompletesFewerUpdates) {
  const auto ds = generate_synthetic(30, 8, Task::classification, 9);
  const auto part = partition_features(8, 4, PartitionMode::contiguous);
  auto c = inject_straggler(base_config(), 2, 3.0);
  c.updates = 20000;
  c.comm_cost_ms = 0.0;
  const auto r = run_async(c, ds, part);
  const auto& u = r.metrics.updates_per_worker;
  EXPECT_NEAR(static_cast<double>(u[1]) / static_cast<double>(u[0]), 1.0 / 3.0, 0.01);
  EXPECT_NEAR(static_cast<double>(u[0]), static_cast<double>(u[2]), 1.0);
  EXPECT_EQ(u[0] + u[1] + u[2] + u[3], c.updates);
}

TEST(RunSync, StragglerIdleFraction) {
  const auto ds = generate_synthetic(30, 8, Task::classification, 9);
  const auto part = partition_features(8, 4, PartitionMode::contiguous);
  auto c = inject_straggler(base_config(), 4, 3.0);
  c.comm_cost_ms = 0.0;
  const auto r = run_sync(c, ds, part);
  for (std::size_t w = 0; w < 3; ++w) {
    EXPECT_NEAR(r.metrics.idle_ms[w] / r.metrics.total_time_ms, 2.0 / 3.0, 1e-9);
  }
  EXPECT_EQ(r.metrics.idle_ms[3], 0.0);
  for (const auto& rec : r.log.records()) EXPECT_EQ(rec.max_staleness, 0u);
}

TEST(RunAsync, SampleIndicesAreUniform) {
  const std::size_t n = 20;
  const auto ds = generate_synthetic(n, 8, Task::classification, 10);
  const auto part = partition_features(8, 4, PartitionMode::contiguous);
  auto c = inject_straggler(base_config(), 1, 2.0);
  c.updates = 20000;
  c.record_updates = false;
  const auto r = run_async(c, ds, part);
  std::vector<double> counts(n, 0.0);
  for (const auto& rec : r.log.records()) counts[rec.sample] += 1;
  const double expected = static_cast<double>(c.updates) / n;
  double chi2 = 0.0;
  for (double k : counts) chi2 += (k - expected) * (k - expected) / expected;
  EXPECT_LT(chi2, 43.82);  // 19 degrees of freedom, p = 0.001
}

TEST(RunAsync, SnapshotEveryStepIsFullGradientDescent) {
  const auto ds = generate_synthetic(25, 6, Task::classification, 12);
  const auto part = partition_features(6, 2, PartitionMode::contiguous);
  auto c = base_config(Algorithm::afsvrg);
  c.updates = 20;
  c.snapshot_interval = 2;
  const auto r = run_sync(c, ds, part);
  std::vector<double> w(6, 0.0);
  for (int step = 0; step < 10; ++step) {
    const auto g = gradient_full(c.loss, w, 0.0, ds);
    for (std::size_t k = 0; k < 6; ++k) w[k] -= c.gamma * g[k];
  }
  const auto got = r.final_model.to_full(part);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(got[k], w[k], 1e-12);
}

TEST(RunAsync, ConvergesWithSmallGrid) {
  auto ds = generate_synthetic(100, 12, Task::classification, 13);
  const auto part = partition_features(12, 4, PartitionMode::contiguous);
  auto c = base_config();
  c.updates = 40000;
  c.loss = LossSpec::logistic(1e-2);
  double best = 1e9;
  // Reference value from a long full-gradient descent run.
  std::vector<double> w(12, 0.0);
  for (int it = 0; it < 20000; ++it) {
    const auto g = gradient_full(c.loss, w, 0.0, ds);
    for (std::size_t k = 0; k < 12; ++k) w[k] -= 0.5 * g[k];
  }
  const double f_star = objective_full(c.loss, w, 0.0, ds);
  for (double gamma : {0.1, 0.05, 0.01}) {
    c.gamma = gamma;
    const auto r = run_async(c, ds, part);
    best = std::min(best, objective_value(c.loss, r.final_model, ds, part) - f_star);
  }
  EXPECT_LT(best, 1e-2);
}

TEST(RunConfig, Validation) {
  const auto ds = generate_synthetic(10, 4, Task::classification, 1);
  const auto part = partition_features(4, 2, PartitionMode::contiguous);
  auto c = base_config(Algorithm::afsvrg);
  c.snapshot_interval = 0;
  EXPECT_THROW(run_async(c, ds, part), ConfigError);
  c = base_config();
  c.gamma = 0.0;
  EXPECT_THROW(run_async(c, ds, part), ConfigError);
  c = base_config();
  c.stragglers = {1.0, 1.0, 1.0};
  EXPECT_THROW(run_async(c, ds, part), ConfigError);
  c = base_config();
  c.loss = LossSpec::ridge(0.1);
  EXPECT_NO_THROW(run_async(c, ds, part));
  const auto reg = generate_synthetic(10, 4, Task::regression, 1);
  EXPECT_THROW(run_async(base_config(), reg, part), ConfigError);
  EXPECT_THROW(inject_straggler(base_config(), 1, 0.5), ConfigError);
  EXPECT_THROW(inject_straggler(base_config(), 1, 10.5), ConfigError);
  EXPECT_THROW(inject_straggler(base_config(), 0, 2.0), ConfigError);
}

TEST(InjectStraggler, UnitMultiplierIsNoOp) {
  const auto ds = generate_synthetic(20, 6, Task::classification, 2);
  const auto part = partition_features(6, 3, PartitionMode::contiguous);
  const auto c = base_config();
  EXPECT_EQ(run_async(c, ds, part).log.to_csv(), run_async(inject_straggler(c, 2, 1.0), ds, part).log.to_csv());
  const auto s = inject_straggler(c, 3, 1.4);
  EXPECT_EQ(s.multiplier(3), 1.4);
  EXPECT_EQ(s.multiplier(1), 1.0);
}

TEST(WallClock, AsyncAndSyncRunsAreConsistent) {
  const auto ds = generate_synthetic(30, 8, Task::classification, 14);
  const auto part = partition_features(8, 4, PartitionMode::contiguous);
  for (auto a : {Algorithm::afsgd, Algorithm::afsvrg, Algorithm::afsaga}) {
    for (auto mode : {RunMode::async, RunMode::sync}) {
      auto c = inject_straggler(base_config(a), 4, 2.0);
      c.clock = ClockKind::wall_clock;
      c.mode = mode;
      c.updates = 200;
      c.snapshot_interval = 40;
      c.compute_cost_ms = 0.05;
      c.comm_cost_ms = 0.01;
      c.staleness_cap = mode == RunMode::async ? std::optional<std::size_t>(6) : std::nullopt;
      const auto r = run(c, ds, part);
      EXPECT_EQ(r.log.size(), c.updates);
      for (std::size_t t = 0; t < r.log.size(); ++t) ASSERT_EQ(r.log[t].t, t);
      for (const auto& rec : r.log.records()) ASSERT_LE(rec.max_staleness, 6u);
      const auto replayed = replay_event_log(r.initial_model, r.log, c.gamma, part, false);
      EXPECT_TRUE(bit_equal(replayed, r.final_model)) << to_string(a) << ' ' << to_string(mode);
      EXPECT_GT(r.metrics.total_time_ms, 0.0);
      EXPECT_GE(r.snapshots.size(), 2u);
    }
  }
}

TEST(RunAsync, StepSizeBoundGivesSmoothedMonotoneProgress) {
  const auto ds = generate_synthetic(60, 8, Task::classification, 15);
  const auto part = partition_features(8, 4, PartitionMode::contiguous);
  auto c = inject_straggler(base_config(), 3, 1.5);
  c.loss = LossSpec::logistic(0.1);
  c.staleness_cap = 4;
  // Constants from the data, delay bounds from a pilot run.
  const auto pilot = run_async(c, ds, part);
  auto k = estimate_constants(c.loss, ds, part, ModelView::zeros(part));
  const auto es = epoch_stats(pilot.log, 4);
  k.tau = static_cast<double>(std::max<std::size_t>(es.measured_tau, 1));
  k.eta1 = static_cast<double>(es.measured_eta1);
  k.eta2 = 1.0;
  k.epsilon = 1e-3;
  c.gamma = stepsize_theorem1(k).gamma;
  c.updates = 40000;
  c.eval_interval = 100;
  const auto r = run_async(c, ds, part);
  std::vector<double> f;
  for (const auto& s : r.snapshots) f.push_back(objective_value(c.loss, s.model, ds, part));
  const std::size_t window = 20;
  double prev = INFINITY;
  for (std::size_t start = 0; start + window <= f.size(); start += window) {
    double mean = 0.0;
    for (std::size_t j = start; j < start + window; ++j) mean += f[j] / window;
    EXPECT_LT(mean, prev) << "window at snapshot " << start;
    prev = mean;
  }
}
