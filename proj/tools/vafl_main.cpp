#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "vafl/experiment.hpp"

namespace {

// Accepts `--key=value` and `--key value`.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& args) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t k = 0; k < args.size(); ++k) {
    const std::string& a = args[k];
    if (a.rfind("--", 0) != 0 || a.size() < 3) throw vafl::ConfigError("unexpected argument: " + a);
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
    } else if (k + 1 < args.size()) {
      out.emplace_back(a.substr(2), args[++k]);
    } else {
      throw vafl::ConfigError("missing value for " + a);
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Asynchronous vertically partitioned SGD/SVRG/SAGA simulator"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run an experiment from a key=value config file");
  std::string config_path;
  run->add_option("config", config_path, "Config file")->required();
  run->allow_extras();
  run->footer("Any config key can be overridden with --key=value.");

  auto* trees = app.add_subcommand("verify-trees", "Generate and check a reduction tree pair");
  std::size_t q = 4;
  std::uint64_t seed = 1;
  trees->add_option("--q", q, "Number of workers")->required();
  trees->add_option("--seed", seed, "Seed for the fallback search");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*trees) return vafl::verify_trees(q, seed, std::cout);

    std::ifstream in(config_path);
    if (!in) {
      std::cerr << "error: cannot read config " << config_path << '\n';
      return 2;
    }
    std::stringstream buf;
    buf << in.rdbuf();
    const auto config = vafl::parse_experiment_config(buf.str(), parse_overrides(run->remaining()));
    const auto summary = vafl::run_experiment(config, std::cerr);
    std::cout << summary.text;
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
