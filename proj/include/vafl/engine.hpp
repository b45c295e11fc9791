#pragma once

// Asynchronous and synchronous runtimes for vertically partitioned training.
//
// All cross-worker state lives in Federation. Each worker's parameters are
// written only by that worker; remote reads and the event-log append happen
// under one mutex, so a pulled product always reflects a whole committed
// block. The virtual clock drives Federation from a discrete-event queue on
// one thread; the wall clock runs one thread per worker.

#include <algorithm>
#include <barrier>
#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <mutex>
#include <optional>
#include <queue>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "vafl/dataplane.hpp"
#include "vafl/error.hpp"
#include "vafl/estimators.hpp"
#include "vafl/losses.hpp"
#include "vafl/treecomm.hpp"

namespace vafl {

enum class Algorithm { afsgd, afsvrg, afsaga };
enum class RunMode { async, sync };
enum class MaskMode { plain, masked };
enum class ClockKind { virtual_clock, wall_clock };

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::afsgd: return "afsgd";
    case Algorithm::afsvrg: return "afsvrg";
    case Algorithm::afsaga: return "afsaga";
  }
  return "?";
}
inline const char* to_string(RunMode m) { return m == RunMode::async ? "async" : "sync"; }
inline const char* to_string(MaskMode m) { return m == MaskMode::plain ? "plain" : "masked"; }
inline const char* to_string(ClockKind c) {
  return c == ClockKind::virtual_clock ? "virtual" : "wall";
}

struct RunConfig {
  Algorithm algorithm = Algorithm::afsgd;
  RunMode mode = RunMode::async;
  double gamma = 0.1;
  std::size_t updates = 1000;           // total block updates (event records)
  std::size_t snapshot_interval = 0;    // SVRG inner-loop length, in global updates
  LossSpec loss;
  MaskMode mask_mode = MaskMode::plain;
  double mask_range = 1e3;
  std::optional<std::size_t> staleness_cap;
  std::vector<double> stragglers;       // per-worker compute multipliers; missing entries are 1.0
  std::uint64_t seed = 1;
  ClockKind clock = ClockKind::virtual_clock;
  double compute_cost_ms = 1.0;         // one gradient step on the fastest worker
  double comm_cost_ms = 0.1;            // one product aggregation
  double pass_cost_per_sample = 0.02;   // full-pass work per sample, in units of compute_cost_ms
  std::size_t eval_interval = 0;        // capture the model every N committed updates (0: ends only)
  bool record_updates = true;           // keep each step's estimator in the event log

  double multiplier(WorkerId w) const {
    return w - 1 < stragglers.size() ? stragglers[w - 1] : 1.0;
  }

  void validate(std::size_t q) const {
    if (!(gamma > 0.0)) throw ConfigError("gamma must be positive");
    if (updates == 0) throw ConfigError("updates must be positive");
    if (algorithm == Algorithm::afsvrg && snapshot_interval == 0) {
      throw ConfigError("afsvrg needs snapshot_interval > 0");
    }
    if (!(mask_range > 0.0)) throw ConfigError("mask_range must be positive");
    if (stragglers.size() > q) throw ConfigError("straggler entry for a worker that does not exist");
    for (double m : stragglers) {
      if (!(m >= 1.0 && m <= 10.0)) throw ConfigError("straggler multipliers must lie in [1, 10]");
    }
    if (compute_cost_ms < 0.0 || comm_cost_ms < 0.0 || pass_cost_per_sample < 0.0) {
      throw ConfigError("costs must be nonnegative");
    }
    try {
      loss.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
};

/// Returns `config` with worker `worker`'s per-step compute time scaled by
/// `multiplier` (1.4 means 40% slower than the fastest worker).
inline RunConfig inject_straggler(RunConfig config, WorkerId worker, double multiplier) {
  if (worker == 0) throw ConfigError("inject_straggler: worker ids are 1-based");
  if (!(multiplier >= 1.0 && multiplier <= 10.0)) {
    throw ConfigError("inject_straggler: multiplier must lie in [1, 10]");
  }
  if (config.stragglers.size() < worker) config.stragglers.resize(worker, 1.0);
  config.stragglers[worker - 1] = multiplier;
  return config;
}

/// splitmix64 over (seed, stream); independent per-worker generator seeds.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Sample-index generator owned by worker `w`. The synchronous runtime draws
/// its shared per-round index from worker 1's stream.
inline std::mt19937_64 worker_sampler(std::uint64_t seed, WorkerId w) {
  return std::mt19937_64(derive_seed(seed, w));
}

inline std::size_t draw_sample(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

struct EventRecord {
  std::size_t t = 0;
  WorkerId worker = 0;
  std::size_t sample = 0;
  double sim_time_ms = 0.0;
  std::size_t max_staleness = 0;        // t - min D(t), 0 when every read was current
  std::vector<std::size_t> block_lag;   // per block: its updates labelled < t missing from the read
  std::size_t messages = 0;             // merge messages of this aggregation
  std::vector<double> update;           // estimator applied (bias slot last on the active ridge worker)
};

class EventLog {
 public:
  const std::vector<EventRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const EventRecord& operator[](std::size_t t) const { return records_[t]; }

  std::size_t append(EventRecord r) {
    r.t = records_.size();
    records_.push_back(std::move(r));
    return records_.back().t;
  }
  EventRecord& at(std::size_t t) { return records_.at(t); }

  /// `t,worker,sample,sim_time_ms,max_staleness,messages`.
  std::string to_csv() const {
    std::string out = "t,worker,sample,sim_time_ms,max_staleness,messages\n";
    char buf[64];
    for (const auto& r : records_) {
      out += std::to_string(r.t) + ',' + std::to_string(r.worker) + ',' +
             std::to_string(r.sample) + ',';
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), r.sim_time_ms);
      out.append(buf, ptr);
      out += ',' + std::to_string(r.max_staleness) + ',' + std::to_string(r.messages) + '\n';
    }
    return out;
  }

 private:
  std::vector<EventRecord> records_;
};

struct Metrics {
  std::size_t messages = 0;        // merge messages of per-update aggregations
  std::size_t setup_messages = 0;  // merge messages of full passes (SAGA init, SVRG snapshots)
  std::size_t aggregations = 0;
  std::size_t retries = 0;         // pulls refused by the staleness cap
  std::size_t snapshot_passes = 0;
  std::vector<std::size_t> updates_per_worker;
  std::vector<double> busy_ms;
  std::vector<double> idle_ms;     // barrier waiting (sync runs)
  double total_time_ms = 0.0;
};

struct ModelSnapshot {
  double time_ms = 0.0;
  std::size_t updates = 0;
  ModelView model;
};

struct RunResult {
  ModelView initial_model;
  ModelView final_model;
  EventLog log;
  Metrics metrics;
  std::vector<ModelSnapshot> snapshots;
};

/// Result of one demand-based product pull.
struct Pull {
  std::size_t t = 0;
  std::size_t sample = 0;
  double score = 0.0;      // aggregated w_hat . x_i, bias excluded
  double residual = 0.0;   // d loss / d score, supplied by the label holder
  std::vector<std::size_t> versions;
};

class Federation {
 public:
  Federation(const RunConfig& config, const Dataset& ds, const VerticalPartition& part)
      : config_(config), part_(part), n_(ds.n_samples), mask_rng_(derive_seed(config.seed, 0)) {
    config_.validate(part.workers());
    if (ds.n_features != part.features()) throw ConfigError("dataset and partition disagree on d");
    if (config_.loss.kind == LossKind::logistic && ds.task != Task::classification) {
      throw ConfigError("logistic loss needs a classification dataset");
    }
    ds.validate();
    labels_ = ds.labels;
    const std::size_t q = part.workers();
    for (std::size_t b = 0; b < q; ++b) {
      Shard s;
      s.id = worker_of(b);
      s.dim = part.group(b).size();
      s.carries_bias = config_.loss.has_bias && s.id == part.active_worker();
      s.width = s.dim + (s.carries_bias ? 1 : 0);
      s.columns.resize(n_ * s.width);
      for (std::size_t i = 0; i < n_; ++i) {
        const auto row = ds.row(i);
        for (std::size_t k = 0; k < s.dim; ++k) s.columns[i * s.width + k] = row[part.group(b)[k]];
        if (s.carries_bias) s.columns[i * s.width + s.dim] = 1.0;
      }
      s.params.assign(s.width, 0.0);
      s.sampler = worker_sampler(config_.seed, s.id);
      shards_.push_back(std::move(s));
    }
    std::vector<WorkerId> ids(q);
    for (std::size_t b = 0; b < q; ++b) ids[b] = worker_of(b);
    plain_tree_ = build_balanced_tree(ids);
    if (config_.mask_mode == MaskMode::masked) {
      if (q >= 2) trees_.emplace(generate_significantly_different_pair(q, config_.seed));
    }
    metrics_.updates_per_worker.assign(q, 0);
    metrics_.busy_ms.assign(q, 0.0);
    metrics_.idle_ms.assign(q, 0.0);
  }

  std::size_t workers() const { return shards_.size(); }
  std::size_t samples() const { return n_; }
  const RunConfig& config() const { return config_; }
  const VerticalPartition& partition() const { return part_; }

  void set_model(const ModelView& model) {
    std::lock_guard lock(mutex_);
    model.check_conforms(part_);
    for (auto& s : shards_) {
      std::copy(model.blocks[s.id - 1].begin(), model.blocks[s.id - 1].end(), s.params.begin());
      if (s.carries_bias) s.params[s.dim] = model.bias;
    }
  }

  ModelView model() const {
    std::lock_guard lock(mutex_);
    return model_unlocked();
  }

  /// Requester broadcasts i; every worker answers with the product of its
  /// current committed block. Assigns the next global counter on success.
  /// Returns nullopt (and counts a retry) when the staleness cap would be exceeded.
  std::optional<Pull> pull_products(WorkerId requester, std::size_t sample, double now_ms = 0.0) {
    std::lock_guard lock(mutex_);
    if (requester == 0 || requester > workers()) throw std::out_of_range("pull: bad requester");
    if (sample >= n_) throw std::out_of_range("pull: bad sample index");
    const std::size_t t = log_.size();

    std::size_t oldest = t;
    std::vector<std::size_t> lag(workers(), 0);
    for (const auto& s : shards_) {
      if (s.id != requester && s.in_flight) {
        oldest = std::min(oldest, *s.in_flight);
        lag[s.id - 1] = 1;
      }
    }
    const std::size_t staleness = t - oldest;
    if (config_.staleness_cap && staleness > *config_.staleness_cap) {
      ++metrics_.retries;
      return std::nullopt;
    }

    Transcript transcript;
    Pull pull;
    pull.t = t;
    pull.sample = sample;
    pull.score = aggregate(sample, &transcript, pull.versions);
    pull.residual = residual(pull.score, sample, current_bias());

    EventRecord rec;
    rec.worker = requester;
    rec.sample = sample;
    rec.sim_time_ms = now_ms;
    rec.max_staleness = staleness;
    rec.block_lag = std::move(lag);
    rec.messages = transcript.messages.size();
    log_.append(std::move(rec));
    metrics_.messages += transcript.messages.size();
    ++metrics_.aggregations;
    shards_[requester - 1].in_flight = t;
    return pull;
  }

  /// Owner-side step: estimator from the pulled residual, then commit.
  void finish_step(WorkerId w, const Pull& pull) {
    auto v = local_estimate(w, pull);
    commit(w, pull.t, v);
  }

  /// Consistent aggregation for a lockstep round: one event per worker, all
  /// sharing sample and score. Returns the pulls in worker order.
  std::vector<Pull> sync_aggregate(std::size_t sample, double now_ms) {
    std::lock_guard lock(mutex_);
    Transcript transcript;
    Pull base;
    base.sample = sample;
    base.score = aggregate(sample, &transcript, base.versions);
    base.residual = residual(base.score, sample, current_bias());
    metrics_.messages += transcript.messages.size();
    ++metrics_.aggregations;
    std::vector<Pull> pulls;
    for (auto& s : shards_) {
      EventRecord rec;
      rec.worker = s.id;
      rec.sample = sample;
      rec.sim_time_ms = now_ms;
      rec.block_lag.assign(workers(), 0);
      rec.messages = pulls.empty() ? transcript.messages.size() : 0;
      Pull p = base;
      p.t = log_.append(std::move(rec));
      s.in_flight = p.t;
      pulls.push_back(std::move(p));
    }
    return pulls;
  }

  /// Synchronous full pass that fills every worker's SAGA table at the current model.
  void initialize_saga_tables() {
    std::lock_guard lock(mutex_);
    const auto scores = full_pass_scores();
    const double b = current_bias();
    for (auto& s : shards_) {
      std::vector<double> entries(n_ * s.width);
      for (std::size_t i = 0; i < n_; ++i) {
        const double r = residual(scores[i], i, b);
        const auto g = block_gradient_from_residual(r, s.x(i), s.params, config_.loss.lambda);
        std::copy(g.begin(), g.end(), entries.begin() + static_cast<std::ptrdiff_t>(i * s.width));
      }
      s.saga = SagaTable(n_, s.width, std::move(entries));
    }
  }

  /// Synchronous barrier work of an SVRG outer iteration: freeze the snapshot,
  /// aggregate every snapshot score once and form the full block gradients.
  void take_svrg_snapshot() {
    std::lock_guard lock(mutex_);
    const auto scores = full_pass_scores();
    const double b = current_bias();
    snapshot_residuals_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) snapshot_residuals_[i] = residual(scores[i], i, b);
    for (auto& s : shards_) {
      s.snapshot_params = s.params;
      s.snapshot_full.assign(s.width, 0.0);
      for (std::size_t i = 0; i < n_; ++i) {
        const auto g = block_gradient_from_residual(snapshot_residuals_[i], s.x(i),
                                                    s.snapshot_params, config_.loss.lambda);
        for (std::size_t k = 0; k < s.width; ++k) s.snapshot_full[k] += g[k];
      }
      for (auto& v : s.snapshot_full) v /= static_cast<double>(n_);
    }
    ++metrics_.snapshot_passes;
  }

  std::vector<double> local_estimate(WorkerId w, const Pull& pull) {
    Shard& s = shards_[w - 1];
    const auto x = s.x(pull.sample);
    auto g = block_gradient_from_residual(pull.residual, x, s.params, config_.loss.lambda);
    switch (config_.algorithm) {
      case Algorithm::afsgd:
        return sgd_estimate(g);
      case Algorithm::afsvrg: {
        const auto g_snap = block_gradient_from_residual(snapshot_residuals_[pull.sample], x,
                                                         s.snapshot_params, config_.loss.lambda);
        return svrg_estimate(g, g_snap, s.snapshot_full);
      }
      case Algorithm::afsaga: {
        auto v = saga_estimate(g, s.saga, pull.sample);
        saga_update_entry(s.saga, pull.sample, g);
        return v;
      }
    }
    return g;
  }

  /// Applies `v` to the owner's block and marks update t committed.
  void commit(WorkerId w, std::size_t t, std::span<const double> v) {
    {
      std::lock_guard lock(mutex_);
      Shard& s = shards_[w - 1];
      apply_update_inplace(s.params, v, config_.gamma);
      ++s.version;
      s.in_flight.reset();
      if (config_.record_updates) log_.at(t).update.assign(v.begin(), v.end());
      ++metrics_.updates_per_worker[w - 1];
      ++committed_;
    }
    commit_cv_.notify_all();
  }

  /// Blocks until another commit lands (wall-clock staleness-cap retries).
  void wait_for_commit(std::size_t seen) {
    std::unique_lock lock(mutex_);
    commit_cv_.wait(lock, [&] { return committed_ != seen; });
  }

  std::size_t committed() const {
    std::lock_guard lock(mutex_);
    return committed_;
  }

  void capture(double time_ms) {
    std::lock_guard lock(mutex_);
    snapshots_.push_back({time_ms, committed_, model_unlocked()});
  }

  std::size_t draw(WorkerId w) { return draw_sample(shards_[w - 1].sampler, n_); }

  Metrics& metrics() { return metrics_; }
  const EventLog& log() const { return log_; }

  RunResult take_result(ModelView initial) {
    std::lock_guard lock(mutex_);
    RunResult r;
    r.initial_model = std::move(initial);
    r.final_model = model_unlocked();
    r.log = std::move(log_);
    r.metrics = metrics_;
    r.snapshots = std::move(snapshots_);
    return r;
  }

 private:
  struct Shard {
    WorkerId id = 0;
    std::size_t dim = 0;
    std::size_t width = 0;  // dim, plus one bias slot on the active ridge worker
    bool carries_bias = false;
    std::vector<double> columns;  // n * width, bias column fixed at 1
    std::vector<double> params;
    std::size_t version = 0;
    std::optional<std::size_t> in_flight;
    SagaTable saga;
    std::vector<double> snapshot_params;
    std::vector<double> snapshot_full;
    std::mt19937_64 sampler;

    std::span<const double> x(std::size_t i) const { return {columns.data() + i * width, width}; }
    std::span<const double> features(std::size_t i) const {
      return {columns.data() + i * width, dim};
    }
    std::span<const double> weights() const { return {params.data(), dim}; }
  };

  double current_bias() const {
    const auto& a = shards_[part_.active_worker() - 1];
    return a.carries_bias ? a.params[a.dim] : 0.0;
  }

  // Label holder's role: turns the aggregated score into the residual scalar.
  double residual(double score, std::size_t i, double bias) const {
    return loss_derivative(config_.loss, score + bias, labels_[i]);
  }

  double aggregate(std::size_t sample, Transcript* transcript, std::vector<std::size_t>& versions) {
    std::vector<double> contributions(workers());
    versions.resize(workers());
    for (const auto& s : shards_) {
      contributions[s.id - 1] = local_product(s.weights(), s.features(sample));
      versions[s.id - 1] = s.version;
    }
    if (trees_) {
      return masked_tree_sum(*trees_, contributions, config_.mask_range, mask_rng_, transcript);
    }
    return tree_sum(plain_tree_, contributions, transcript);
  }

  std::vector<double> full_pass_scores() {
    std::vector<double> scores(n_);
    std::vector<std::size_t> versions;
    for (std::size_t i = 0; i < n_; ++i) {
      Transcript transcript;
      scores[i] = aggregate(i, &transcript, versions);
      metrics_.setup_messages += transcript.messages.size();
    }
    return scores;
  }

  ModelView model_unlocked() const {
    ModelView m;
    for (const auto& s : shards_) {
      m.blocks.emplace_back(s.params.begin(), s.params.begin() + static_cast<std::ptrdiff_t>(s.dim));
      if (s.carries_bias) m.bias = s.params[s.dim];
    }
    return m;
  }

  RunConfig config_;
  VerticalPartition part_;
  std::size_t n_ = 0;
  std::vector<double> labels_;
  std::vector<Shard> shards_;
  TreeTopology plain_tree_;
  std::optional<TreePair> trees_;
  std::mt19937_64 mask_rng_;
  std::vector<double> snapshot_residuals_;
  EventLog log_;
  Metrics metrics_;
  std::vector<ModelSnapshot> snapshots_;
  std::size_t committed_ = 0;
  mutable std::mutex mutex_;
  std::condition_variable commit_cv_;
};

namespace detail {

inline double full_pass_cost(const RunConfig& c, std::size_t q, std::size_t n) {
  double slowest = 1.0;
  for (std::size_t w = 1; w <= q; ++w) slowest = std::max(slowest, c.multiplier(w));
  return static_cast<double>(n) * (c.comm_cost_ms + c.pass_cost_per_sample * c.compute_cost_ms * slowest);
}

inline void setup_passes(Federation& fed, double& now) {
  const auto& c = fed.config();
  if (c.algorithm == Algorithm::afsaga) {
    fed.initialize_saga_tables();
    now += full_pass_cost(c, fed.workers(), fed.samples());
  }
}

inline bool epoch_boundary(const RunConfig& c, std::size_t epoch_claimed) {
  return c.algorithm == Algorithm::afsvrg && epoch_claimed >= c.snapshot_interval;
}

// Discrete-event scheduler for the asynchronous runtime.
class VirtualAsync {
 public:
  explicit VirtualAsync(Federation& fed) : fed_(fed), c_(fed.config()), q_(fed.workers()) {
    state_.assign(q_ + 1, State::idle);
    sample_.assign(q_ + 1, 0);
    pull_.resize(q_ + 1);
  }

  void run() {
    double now = 0.0;
    fed_.capture(0.0);
    setup_passes(fed_, now);
    if (c_.algorithm == Algorithm::afsvrg) {
      fed_.take_svrg_snapshot();
      now += full_pass_cost(c_, q_, fed_.samples());
    }
    for (WorkerId w = 1; w <= q_; ++w) try_start(w, now);
    while (!queue_.empty()) {
      const Event ev = queue_.top();
      queue_.pop();
      now_ = ev.time;
      if (ev.kind == Kind::aggregate) {
        on_aggregate(ev.worker);
      } else {
        on_commit(ev.worker);
      }
    }
    fed_.metrics().total_time_ms = now_;
    if (fed_.committed() != last_capture_) fed_.capture(now_);
  }

 private:
  enum class State { idle, stepping, waiting, parked, done };
  enum class Kind { commit = 0, aggregate = 1 };
  struct Event {
    double time;
    WorkerId worker;
    Kind kind;
    bool operator>(const Event& o) const {
      if (time != o.time) return time > o.time;
      if (worker != o.worker) return worker > o.worker;
      return kind > o.kind;
    }
  };

  void schedule(double time, WorkerId w, Kind k) { queue_.push({time, w, k}); }

  void try_start(WorkerId w, double now) {
    if (claimed_ >= c_.updates) {
      state_[w] = State::done;
      maybe_barrier(now);
      return;
    }
    if (epoch_boundary(c_, epoch_claimed_)) {
      state_[w] = State::parked;
      maybe_barrier(now);
      return;
    }
    ++claimed_;
    ++epoch_claimed_;
    state_[w] = State::stepping;
    sample_[w] = fed_.draw(w);
    schedule(now + c_.comm_cost_ms, w, Kind::aggregate);
  }

  void on_aggregate(WorkerId w) {
    auto pull = fed_.pull_products(w, sample_[w], now_);
    if (!pull) {
      state_[w] = State::waiting;
      return;
    }
    state_[w] = State::stepping;
    pull_[w] = std::move(*pull);
    const double compute = c_.compute_cost_ms * c_.multiplier(w);
    fed_.metrics().busy_ms[w - 1] += compute;
    schedule(now_ + compute, w, Kind::commit);
  }

  void on_commit(WorkerId w) {
    fed_.finish_step(w, pull_[w]);
    const std::size_t committed = fed_.committed();
    if (c_.eval_interval > 0 && committed % c_.eval_interval == 0) {
      fed_.capture(now_);
      last_capture_ = committed;
    }
    for (WorkerId other = 1; other <= q_; ++other) {
      if (state_[other] == State::waiting) {
        state_[other] = State::stepping;
        schedule(now_, other, Kind::aggregate);
      }
    }
    try_start(w, now_);
  }

  void maybe_barrier(double now) {
    if (claimed_ >= c_.updates) return;
    for (WorkerId w = 1; w <= q_; ++w) {
      if (state_[w] != State::parked && state_[w] != State::done) return;
    }
    fed_.take_svrg_snapshot();
    const double resume = now + full_pass_cost(c_, q_, fed_.samples());
    epoch_claimed_ = 0;
    for (WorkerId w = 1; w <= q_; ++w) {
      if (state_[w] == State::parked) try_start(w, resume);
    }
  }

  Federation& fed_;
  const RunConfig& c_;
  std::size_t q_;
  std::priority_queue<Event, std::vector<Event>, std::greater<>> queue_;
  std::vector<State> state_;
  std::vector<std::size_t> sample_;
  std::vector<Pull> pull_;
  std::size_t claimed_ = 0;
  std::size_t epoch_claimed_ = 0;
  std::size_t last_capture_ = 0;
  double now_ = 0.0;
};

inline void run_virtual_sync(Federation& fed) {
  const auto& c = fed.config();
  const std::size_t q = fed.workers();
  auto rounds_sampler = worker_sampler(c.seed, 1);
  double now = 0.0;
  fed.capture(0.0);
  setup_passes(fed, now);
  double slowest = 0.0;
  for (WorkerId w = 1; w <= q; ++w) slowest = std::max(slowest, c.compute_cost_ms * c.multiplier(w));

  std::size_t done = 0;
  std::size_t epoch = 0;
  std::size_t last_capture = 0;
  bool have_snapshot = false;
  while (done < c.updates) {
    if (c.algorithm == Algorithm::afsvrg && (!have_snapshot || epoch >= c.snapshot_interval)) {
      fed.take_svrg_snapshot();
      now += full_pass_cost(c, q, fed.samples());
      epoch = 0;
      have_snapshot = true;
    }
    const std::size_t i = draw_sample(rounds_sampler, fed.samples());
    now += c.comm_cost_ms;
    auto pulls = fed.sync_aggregate(i, now);
    for (WorkerId w = 1; w <= q; ++w) {
      const double own = c.compute_cost_ms * c.multiplier(w);
      fed.metrics().busy_ms[w - 1] += own;
      fed.metrics().idle_ms[w - 1] += slowest - own;
      fed.finish_step(w, pulls[w - 1]);
    }
    now += slowest;
    done += q;
    epoch += q;
    if (c.eval_interval > 0 && done / c.eval_interval != (done - q) / c.eval_interval) {
      fed.capture(now);
      last_capture = done;
    }
  }
  fed.metrics().total_time_ms = now;
  if (last_capture != done) fed.capture(now);
}

using WallClock = std::chrono::steady_clock;

inline void sleep_ms(double ms) {
  if (ms > 0.0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
}

inline void run_wall_async(Federation& fed) {
  const auto& c = fed.config();
  const std::size_t q = fed.workers();
  const auto start = WallClock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double, std::milli>(WallClock::now() - start).count();
  };

  fed.capture(0.0);
  double setup = 0.0;
  setup_passes(fed, setup);
  sleep_ms(setup);
  if (c.algorithm == Algorithm::afsvrg) {
    fed.take_svrg_snapshot();
    sleep_ms(full_pass_cost(c, q, fed.samples()));
  }

  std::mutex sched_mutex;
  std::condition_variable sched_cv;
  std::size_t claimed = 0;
  std::size_t epoch_claimed = 0;
  std::size_t active = q;
  std::size_t parked = 0;
  std::size_t generation = 0;
  std::mutex capture_mutex;

  auto claim = [&](WorkerId) -> bool {
    std::unique_lock lock(sched_mutex);
    for (;;) {
      if (claimed >= c.updates) {
        --active;
        sched_cv.notify_all();
        return false;
      }
      if (!epoch_boundary(c, epoch_claimed)) break;
      ++parked;
      const std::size_t gen = generation;
      while (generation == gen) {
        if (parked == active) {
          fed.take_svrg_snapshot();
          sleep_ms(full_pass_cost(c, q, fed.samples()));
          epoch_claimed = 0;
          parked = 0;
          ++generation;
          sched_cv.notify_all();
          break;
        }
        sched_cv.wait(lock);
      }
    }
    ++claimed;
    ++epoch_claimed;
    return true;
  };

  auto worker = [&](WorkerId w) {
    const double compute = c.compute_cost_ms * c.multiplier(w);
    while (claim(w)) {
      const std::size_t i = fed.draw(w);
      sleep_ms(c.comm_cost_ms);
      std::optional<Pull> pull;
      for (;;) {
        const std::size_t seen = fed.committed();
        pull = fed.pull_products(w, i, elapsed());
        if (pull) break;
        fed.wait_for_commit(seen);
      }
      const auto t0 = WallClock::now();
      sleep_ms(compute);
      auto v = fed.local_estimate(w, *pull);
      fed.commit(w, pull->t, v);
      fed.metrics().busy_ms[w - 1] +=
          std::chrono::duration<double, std::milli>(WallClock::now() - t0).count();
      const std::size_t committed = fed.committed();
      if (c.eval_interval > 0 && committed % c.eval_interval == 0) {
        std::lock_guard lock(capture_mutex);
        fed.capture(elapsed());
      }
    }
  };

  std::vector<std::thread> threads;
  for (WorkerId w = 1; w <= q; ++w) threads.emplace_back(worker, w);
  for (auto& t : threads) t.join();
  fed.metrics().total_time_ms = elapsed();
  fed.capture(fed.metrics().total_time_ms);
}

inline void run_wall_sync(Federation& fed) {
  const auto& c = fed.config();
  const std::size_t q = fed.workers();
  const auto start = WallClock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double, std::milli>(WallClock::now() - start).count();
  };
  fed.capture(0.0);
  double setup = 0.0;
  setup_passes(fed, setup);
  sleep_ms(setup);

  const std::size_t rounds = (c.updates + q - 1) / q;
  auto rounds_sampler = worker_sampler(c.seed, 1);
  std::vector<Pull> pulls;
  std::size_t epoch = 0;
  bool have_snapshot = false;
  std::barrier sync_point(static_cast<std::ptrdiff_t>(q));

  auto worker = [&](WorkerId w) {
    const double compute = c.compute_cost_ms * c.multiplier(w);
    for (std::size_t r = 0; r < rounds; ++r) {
      if (w == 1) {
        if (c.algorithm == Algorithm::afsvrg && (!have_snapshot || epoch >= c.snapshot_interval)) {
          fed.take_svrg_snapshot();
          sleep_ms(full_pass_cost(c, q, fed.samples()));
          epoch = 0;
          have_snapshot = true;
        }
        const std::size_t i = draw_sample(rounds_sampler, fed.samples());
        sleep_ms(c.comm_cost_ms);
        pulls = fed.sync_aggregate(i, elapsed());
        epoch += q;
      }
      sync_point.arrive_and_wait();
      const auto t0 = WallClock::now();
      sleep_ms(compute);
      fed.finish_step(w, pulls[w - 1]);
      const auto t1 = WallClock::now();
      sync_point.arrive_and_wait();
      const auto t2 = WallClock::now();
      fed.metrics().busy_ms[w - 1] += std::chrono::duration<double, std::milli>(t1 - t0).count();
      fed.metrics().idle_ms[w - 1] += std::chrono::duration<double, std::milli>(t2 - t1).count();
      if (w == 1 && c.eval_interval > 0) {
        const std::size_t done = (r + 1) * q;
        if (done / c.eval_interval != (done - q) / c.eval_interval) fed.capture(elapsed());
      }
      // Keep worker 1 from starting the next aggregation while others still read `pulls`.
      sync_point.arrive_and_wait();
    }
  };

  std::vector<std::thread> threads;
  for (WorkerId w = 1; w <= q; ++w) threads.emplace_back(worker, w);
  for (auto& t : threads) t.join();
  fed.metrics().total_time_ms = elapsed();
  fed.capture(fed.metrics().total_time_ms);
}

}  // namespace detail

/// Lock-free asynchronous training: every worker independently samples,
/// pulls products, forms its estimator and updates its own block.
inline RunResult run_async(RunConfig config, const Dataset& ds, const VerticalPartition& part) {
  config.mode = RunMode::async;
  Federation fed(config, ds, part);
  const ModelView initial = fed.model();
  if (config.clock == ClockKind::virtual_clock) {
    detail::VirtualAsync(fed).run();
  } else {
    detail::run_wall_async(fed);
  }
  return fed.take_result(initial);
}

/// Lockstep baseline: one shared sample per round, a barrier after every update.
inline RunResult run_sync(RunConfig config, const Dataset& ds, const VerticalPartition& part) {
  config.mode = RunMode::sync;
  Federation fed(config, ds, part);
  const ModelView initial = fed.model();
  if (config.clock == ClockKind::virtual_clock) {
    detail::run_virtual_sync(fed);
  } else {
    detail::run_wall_sync(fed);
  }
  return fed.take_result(initial);
}

inline RunResult run(const RunConfig& config, const Dataset& ds, const VerticalPartition& part) {
  return config.mode == RunMode::async ? run_async(config, ds, part) : run_sync(config, ds, part);
}

/// Re-applies the logged estimators in t-order onto `initial`.
inline ModelView replay_event_log(const ModelView& initial, const EventLog& log, double gamma,
                                  const VerticalPartition& part, bool has_bias) {
  ModelView m = initial;
  for (const auto& r : log.records()) {
    auto& block = m.blocks.at(r.worker - 1);
    const bool bias_slot = has_bias && r.worker == part.active_worker();
    if (r.update.size() != block.size() + (bias_slot ? 1 : 0)) {
      throw std::invalid_argument("replay: event " + std::to_string(r.t) + " has no recorded update");
    }
    apply_update_inplace(block, std::span<const double>(r.update).first(block.size()), gamma);
    if (bias_slot) m.bias = m.bias - gamma * r.update.back();
  }
  return m;
}

}  // namespace vafl
