#pragma once

// Config-driven experiment runner behind the vafl command-line tool.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "vafl/analysis.hpp"
#include "vafl/dataplane.hpp"
#include "vafl/engine.hpp"
#include "vafl/error.hpp"
#include "vafl/losses.hpp"
#include "vafl/treecomm.hpp"

namespace vafl {

struct ExperimentConfig {
  std::string data;  // libsvm path; empty selects the synthetic generator
  std::size_t synthetic_n = 200;
  std::size_t synthetic_d = 20;
  Task task = Task::classification;
  std::size_t q = 4;
  PartitionMode partition = PartitionMode::contiguous;
  std::vector<Algorithm> algorithms{Algorithm::afsgd};
  std::vector<RunMode> modes{RunMode::async};
  std::vector<double> gammas{0.1};
  double lambda = 1e-4;
  std::size_t updates = 20000;
  std::size_t snapshot_interval = 0;  // 0: q * n
  std::map<WorkerId, double> stragglers;
  MaskMode mask = MaskMode::plain;
  double mask_range = 1e3;
  std::optional<std::size_t> staleness_cap;
  std::uint64_t seed = 1;
  std::string out = "out";
  std::size_t eval_interval = 0;  // 0: updates / 200
  ClockKind clock = ClockKind::virtual_clock;
  double compute_cost = 1.0;
  double comm_cost = 0.1;
  std::optional<double> target;  // default: 1e-4 for SVRG/SAGA, 10^-2.5 for SGD
  bool standardize = true;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const auto comma = s.find(',', pos);
    const auto end = comma == std::string_view::npos ? s.size() : comma;
    const auto item = trim(s.substr(pos, end - pos));
    if (!item.empty()) out.emplace_back(item);
    pos = end + 1;
  }
  return out;
}

inline double config_double(const std::string& key, std::string_view v) {
  double out = 0.0;
  if (!parse_real(trim(v), out)) throw ConfigError("config: " + key + ": not a number: " + std::string(v));
  return out;
}

inline std::size_t config_size(const std::string& key, std::string_view v) {
  std::size_t out = 0;
  const auto t = trim(v);
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw ConfigError("config: " + key + ": not a nonnegative integer: " + std::string(v));
  }
  return out;
}

inline bool config_bool(const std::string& key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: " + key + ": expected true or false");
}

inline Algorithm parse_algorithm(std::string_view v) {
  if (v == "afsgd" || v == "sgd") return Algorithm::afsgd;
  if (v == "afsvrg" || v == "svrg") return Algorithm::afsvrg;
  if (v == "afsaga" || v == "saga") return Algorithm::afsaga;
  throw ConfigError("config: unknown algorithm: " + std::string(v));
}

}  // namespace detail

/// Applies one key = value setting.
inline void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "data") {
    c.data = value;
  } else if (key == "synthetic.n") {
    c.synthetic_n = config_size(key, value);
  } else if (key == "synthetic.d") {
    c.synthetic_d = config_size(key, value);
  } else if (key == "task") {
    if (value == "classification") c.task = Task::classification;
    else if (value == "regression") c.task = Task::regression;
    else throw ConfigError("config: task must be classification or regression");
  } else if (key == "q") {
    c.q = config_size(key, value);
  } else if (key == "partition") {
    if (value == "contiguous") c.partition = PartitionMode::contiguous;
    else if (value == "round_robin") c.partition = PartitionMode::round_robin;
    else throw ConfigError("config: partition must be contiguous or round_robin");
  } else if (key == "algorithm") {
    c.algorithms.clear();
    for (const auto& a : split_list(value)) c.algorithms.push_back(parse_algorithm(a));
    if (c.algorithms.empty()) throw ConfigError("config: algorithm is empty");
  } else if (key == "mode") {
    if (value == "async") c.modes = {RunMode::async};
    else if (value == "sync") c.modes = {RunMode::sync};
    else if (value == "both") c.modes = {RunMode::async, RunMode::sync};
    else throw ConfigError("config: mode must be async, sync or both");
  } else if (key == "gamma") {
    c.gammas.clear();
    for (const auto& g : split_list(value)) c.gammas.push_back(config_double(key, g));
    if (c.gammas.empty()) throw ConfigError("config: gamma is empty");
  } else if (key == "lambda") {
    c.lambda = config_double(key, value);
  } else if (key == "updates") {
    c.updates = config_size(key, value);
  } else if (key == "snapshot_interval") {
    c.snapshot_interval = config_size(key, value);
  } else if (key.rfind("straggler.", 0) == 0) {
    const auto id = config_size(key, std::string_view(key).substr(10));
    if (id == 0) throw ConfigError("config: straggler ids are 1-based");
    c.stragglers[id] = config_double(key, value);
  } else if (key == "mask") {
    if (value == "plain") c.mask = MaskMode::plain;
    else if (value == "masked") c.mask = MaskMode::masked;
    else throw ConfigError("config: mask must be plain or masked");
  } else if (key == "mask_range") {
    c.mask_range = config_double(key, value);
  } else if (key == "staleness_cap") {
    if (value == "none") c.staleness_cap.reset();
    else c.staleness_cap = config_size(key, value);
  } else if (key == "seed") {
    c.seed = config_size(key, value);
  } else if (key == "out") {
    c.out = value;
  } else if (key == "eval_interval") {
    c.eval_interval = config_size(key, value);
  } else if (key == "clock") {
    if (value == "virtual") c.clock = ClockKind::virtual_clock;
    else if (value == "wall") c.clock = ClockKind::wall_clock;
    else throw ConfigError("config: clock must be virtual or wall");
  } else if (key == "compute_cost") {
    c.compute_cost = config_double(key, value);
  } else if (key == "comm_cost") {
    c.comm_cost = config_double(key, value);
  } else if (key == "target") {
    if (value == "auto") c.target.reset();
    else c.target = config_double(key, value);
  } else if (key == "standardize") {
    c.standardize = config_bool(key, value);
  } else {
    throw ConfigError("config: unknown key: " + key);
  }
}

/// Flat `key = value` lines; `#` starts a comment.
inline ExperimentConfig parse_experiment_config(
    std::string_view text, const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  ExperimentConfig c;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto end = nl == std::string_view::npos ? text.size() : nl;
    auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    apply_setting(c, std::string(detail::trim(line.substr(0, eq))),
                  std::string(detail::trim(line.substr(eq + 1))));
  }
  for (const auto& [k, v] : overrides) apply_setting(c, k, v);
  return c;
}

inline std::string echo_config(const ExperimentConfig& c) {
  using detail::format_double;
  std::ostringstream o;
  o << "data = " << (c.data.empty() ? "synthetic" : c.data) << '\n'
    << "synthetic.n = " << c.synthetic_n << '\n'
    << "synthetic.d = " << c.synthetic_d << '\n'
    << "task = " << (c.task == Task::classification ? "classification" : "regression") << '\n'
    << "q = " << c.q << '\n'
    << "partition = " << (c.partition == PartitionMode::contiguous ? "contiguous" : "round_robin") << '\n'
    << "algorithm = ";
  for (std::size_t k = 0; k < c.algorithms.size(); ++k) o << (k ? "," : "") << to_string(c.algorithms[k]);
  o << "\nmode = " << (c.modes.size() == 2 ? "both" : to_string(c.modes.front())) << "\ngamma = ";
  for (std::size_t k = 0; k < c.gammas.size(); ++k) o << (k ? "," : "") << format_double(c.gammas[k]);
  o << "\nlambda = " << format_double(c.lambda) << '\n'
    << "updates = " << c.updates << '\n'
    << "snapshot_interval = " << c.snapshot_interval << '\n';
  for (const auto& [id, m] : c.stragglers) o << "straggler." << id << " = " << format_double(m) << '\n';
  o << "mask = " << to_string(c.mask) << '\n'
    << "mask_range = " << format_double(c.mask_range) << '\n'
    << "staleness_cap = " << (c.staleness_cap ? std::to_string(*c.staleness_cap) : "none") << '\n'
    << "seed = " << c.seed << '\n'
    << "out = " << c.out << '\n'
    << "eval_interval = " << c.eval_interval << '\n'
    << "clock = " << to_string(c.clock) << '\n'
    << "compute_cost = " << format_double(c.compute_cost) << '\n'
    << "comm_cost = " << format_double(c.comm_cost) << '\n'
    << "target = " << (c.target ? format_double(*c.target) : "auto") << '\n'
    << "standardize = " << (c.standardize ? "true" : "false") << '\n';
  return o.str();
}

inline double default_target(Algorithm a) {
  return a == Algorithm::afsgd ? std::pow(10.0, -2.5) : 1e-4;
}

inline std::string curve_to_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "time_ms,updates,suboptimality\n";
  for (const auto& p : curve) {
    out += detail::format_double(p.time_ms) + ',' + std::to_string(p.updates) + ',' +
           detail::format_double(p.suboptimality) + '\n';
  }
  return out;
}

inline std::vector<CurvePoint> parse_curve_csv(std::string_view text) {
  std::vector<CurvePoint> out;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "time_ms,updates,suboptimality") {
    throw ParseError(1, "curve csv: bad header");
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto parts = detail::split_list(line);
    CurvePoint p;
    if (parts.size() != 3 || !detail::parse_real(parts[0], p.time_ms) ||
        !detail::parse_real(parts[2], p.suboptimality)) {
      throw ParseError(line_no, "curve csv: malformed row");
    }
    p.updates = std::stoull(parts[1]);
    out.push_back(p);
  }
  return out;
}

/// Resolved problem: dataset, partition, loss.
struct Problem {
  Dataset data;
  VerticalPartition partition;
  LossSpec loss;
};

inline Problem load_problem(const ExperimentConfig& c) {
  Dataset ds;
  if (c.data.empty()) {
    ds = generate_synthetic(c.synthetic_n, c.synthetic_d, c.task, c.seed);
  } else {
    std::ifstream in(c.data, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read data file " + c.data);
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    LibsvmOptions opts;
    opts.task = c.task;
    opts.map_zero_one_labels = true;
    ds = parse_libsvm(text, infer_libsvm_dimension(text), opts);
  }
  if (c.standardize) ds = standardize(ds).data;
  auto part = partition_features(ds.n_features, c.q, c.partition);
  const LossSpec loss = c.task == Task::classification ? LossSpec::logistic(c.lambda)
                                                       : LossSpec::ridge(c.lambda, true);
  return {std::move(ds), std::move(part), loss};
}

inline RunConfig make_run_config(const ExperimentConfig& c, const Problem& p, Algorithm a,
                                 RunMode m, double gamma) {
  RunConfig r;
  r.algorithm = a;
  r.mode = m;
  r.gamma = gamma;
  r.updates = c.updates;
  r.snapshot_interval = c.snapshot_interval ? c.snapshot_interval : c.q * p.data.n_samples;
  r.loss = p.loss;
  r.mask_mode = c.mask;
  r.mask_range = c.mask_range;
  r.staleness_cap = c.staleness_cap;
  for (const auto& [id, mult] : c.stragglers) r = inject_straggler(std::move(r), id, mult);
  r.seed = c.seed;
  r.clock = c.clock;
  r.compute_cost_ms = c.compute_cost;
  r.comm_cost_ms = c.comm_cost;
  r.eval_interval = c.eval_interval ? c.eval_interval : std::max<std::size_t>(1, c.updates / 200);
  r.record_updates = false;
  r.validate(c.q);
  return r;
}

struct RunOutcome {
  Algorithm algorithm;
  RunMode mode;
  double gamma;
  std::vector<CurvePoint> curve;
  RunResult result;
  double final_suboptimality() const { return curve.empty() ? 0.0 : curve.back().suboptimality; }
};

struct ExperimentSummary {
  double f_star = 0.0;
  std::vector<RunOutcome> best;  // one per (algorithm, mode), best gamma
  std::map<Algorithm, double> speedups;
  std::string text;
};

/// Runs every requested (algorithm, mode, gamma) and writes the curve CSVs,
/// events.csv and summary.txt into `c.out`.
inline ExperimentSummary run_experiment(const ExperimentConfig& c, std::ostream& progress) {
  using detail::format_double;
  const Problem p = load_problem(c);
  for (auto a : c.algorithms) {
    for (auto m : c.modes) {
      for (double g : c.gammas) (void)make_run_config(c, p, a, m, g);
    }
  }
  std::filesystem::create_directories(c.out);
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream f(std::filesystem::path(c.out) / name, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + (std::filesystem::path(c.out) / name).string());
    f << content;
  };

  const Optimum opt = reference_optimum(p.loss, p.data);
  ExperimentSummary summary;
  summary.f_star = opt.f_star;
  std::ostringstream report;
  report << "[config]\n" << echo_config(c) << "\n[problem]\n"
         << "samples = " << p.data.n_samples << '\n'
         << "features = " << p.data.n_features << '\n'
         << "loss = " << (p.loss.kind == LossKind::logistic ? "logistic" : "ridge") << '\n'
         << "f_star = " << format_double(opt.f_star) << '\n';

  bool events_written = false;
  for (auto a : c.algorithms) {
    for (auto m : c.modes) {
      std::optional<RunOutcome> best;
      for (double g : c.gammas) {
        progress << "running " << to_string(a) << ' ' << to_string(m) << " gamma=" << format_double(g) << '\n';
        const RunConfig rc = make_run_config(c, p, a, m, g);
        RunOutcome o{a, m, g, {}, run(rc, p.data, p.partition)};
        o.curve = suboptimality_curve(o.result.snapshots, opt.f_star, p.loss, p.data, p.partition);
        const std::string base = std::string("curve_") + to_string(a) + '_' + to_string(m);
        const std::string name = c.gammas.size() == 1 ? base + ".csv"
                                                      : base + "_gamma" + format_double(g) + ".csv";
        write(name, curve_to_csv(o.curve));
        report << "\n[run " << to_string(a) << ' ' << to_string(m) << " gamma=" << format_double(g) << "]\n"
               << "curve = " << name << '\n'
               << "final_suboptimality = " << format_double(o.final_suboptimality()) << '\n'
               << "time_ms = " << format_double(o.result.metrics.total_time_ms) << '\n'
               << "messages = " << o.result.metrics.messages << '\n'
               << "setup_messages = " << o.result.metrics.setup_messages << '\n'
               << "retries = " << o.result.metrics.retries << '\n';
        const auto finite = [](double v) { return std::isfinite(v); };
        if (!best || (finite(o.final_suboptimality()) &&
                      (!finite(best->final_suboptimality()) ||
                       o.final_suboptimality() < best->final_suboptimality()))) {
          best = std::move(o);
        }
      }
      const auto& r = best->result;
      report << "\n[best " << to_string(a) << ' ' << to_string(m) << "]\n"
             << "gamma = " << format_double(best->gamma) << '\n'
             << "final_suboptimality = " << format_double(best->final_suboptimality()) << '\n'
             << "messages = " << r.metrics.messages << '\n'
             << "messages_per_aggregation = "
             << (r.metrics.aggregations ? format_double(static_cast<double>(r.metrics.messages) /
                                                        static_cast<double>(r.metrics.aggregations))
                                        : "0")
             << '\n';
      report << "updates_per_worker =";
      for (auto u : r.metrics.updates_per_worker) report << ' ' << u;
      report << "\nidle_ms =";
      for (auto u : r.metrics.idle_ms) report << ' ' << format_double(u);
      report << '\n';
      try {
        const auto es = epoch_stats(r.log, c.q);
        report << "epochs = " << es.upsilon << '\n'
               << "tau = " << es.measured_tau << '\n'
               << "eta1 = " << es.measured_eta1 << '\n'
               << "eta2 = " << es.measured_eta2 << '\n';
      } catch (const AnalysisError& e) {
        report << "epochs = unavailable (" << e.what() << ")\n";
      }
      if (!events_written) {
        write("events.csv", r.log.to_csv());
        report << "events = events.csv (" << to_string(a) << ' ' << to_string(m) << ")\n";
        events_written = true;
      }
      summary.best.push_back(std::move(*best));
    }
  }

  if (c.modes.size() == 2) {
    report << "\n[speedup]\n";
    for (auto a : c.algorithms) {
      const RunOutcome* as = nullptr;
      const RunOutcome* sy = nullptr;
      for (const auto& o : summary.best) {
        if (o.algorithm == a && o.mode == RunMode::async) as = &o;
        if (o.algorithm == a && o.mode == RunMode::sync) sy = &o;
      }
      const double target = c.target.value_or(default_target(a));
      try {
        const double s = speedup(as->curve, sy->curve, target);
        summary.speedups[a] = s;
        report << to_string(a) << " = " << format_double(s) << " (target " << format_double(target) << ")\n";
      } catch (const AnalysisError& e) {
        report << to_string(a) << " = unavailable (" << e.what() << ")\n";
      }
    }
  }
  summary.text = report.str();
  write("summary.txt", summary.text);
  return summary;
}

/// Prints a generated tree pair and its verdict; returns the exit status.
inline int verify_trees(std::size_t q, std::uint64_t seed, std::ostream& out) {
  if (q < 2) throw std::invalid_argument("verify-trees: q must be at least 2");
  const auto pair = generate_significantly_different_pair(q, seed);
  const bool ok = is_significantly_different(pair.first(), pair.second());
  out << "T1: " << pair.first().to_string() << '\n'
      << "T2: " << pair.second().to_string() << '\n'
      << "significantly different: " << (ok ? "true" : "false") << '\n';
  return ok ? 0 : 1;
}

}  // namespace vafl
