// hindsight-attrib ingest|train|backtest|explain --config <json>
#include <CLI11.hpp>

#include <iostream>

#include "hattrib/pipeline.hpp"

int main(int argc, char** argv) {
  using namespace hattrib;
  CLI::App app{"Explain portfolio strategies against a linear model in hindsight"};
  app.require_subcommand(1);

  std::string config_path;
  CommandOptions opts;
  std::string model;
  std::uint64_t seed = 0;
  std::string out;

  for (const char* name : {"ingest", "train", "backtest", "explain"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "run configuration (JSON)")->required();
    sub->add_option("--model", model, "restrict to one model (ppo, a2c, lr, dt, rf, svm, equal_weight, hindsight)");
    sub->add_option("--seed", seed, "override the root seed");
    sub->add_option("--out", out, "override the output directory");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  const auto* sub = app.get_subcommands().front();
  if (sub->count("--model") > 0) opts.model = model;
  if (sub->count("--seed") > 0) opts.seed = seed;
  if (sub->count("--out") > 0) opts.out = out;

  try {
    const RunConfig cfg = apply_overrides(load_config(config_path), opts);
    if (cmd == "ingest") {
      cmd_ingest(cfg);
    } else if (cmd == "train") {
      cmd_train(cfg);
    } else if (cmd == "backtest") {
      cmd_backtest(cfg, opts);
    } else {
      cmd_explain(cfg, opts);
    }
    std::cout << cmd << ": wrote " << cfg.out_dir.string() << '\n';
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(category(e.code()));
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: ConfigError: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}
