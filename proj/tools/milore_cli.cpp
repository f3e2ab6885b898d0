#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "milore/errors.hpp"
#include "milore/pipeline.hpp"
#include "milore/run_config.hpp"

namespace {

using Stage = std::function<std::vector<std::filesystem::path>(const milore::RunConfig&)>;

void print_count(const milore::ParamReport& report) {
  std::cout << fmt::format("total parameters:     {}\n", report.total);
  std::cout << fmt::format("trainable parameters: {}\n", report.trainable);
  std::cout << fmt::format("trainable fraction:   {:.4f}%\n", 100.0 * report.fraction());
}

int run(const std::string& name, const std::string& config_path, bool dry_run, const Stage& stage) {
  const milore::RunConfig cfg = milore::load_run_config(config_path);
  if (name == "count-params") print_count(milore::config_parameter_report(cfg));
  if (dry_run) {
    std::cout << "config ok: " << config_path << "\n";
    std::cout << "planned artifacts for " << name << ":\n";
    for (const auto& p : milore::planned_artifacts(cfg, name)) std::cout << "  " << p.string() << "\n";
    return 0;
  }
  for (const auto& p : stage(cfg)) spdlog::debug("wrote {}", p.string());
  spdlog::info("{} finished; artifacts under {}", name, cfg.output.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MiLorE continual pretraining pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string level = "info";
  app.add_option("--log-level", level, "trace, debug, info, warn, error or off")->capture_default_str();

  const std::vector<std::pair<std::string, Stage>> stages = {
      {"gen-data", milore::stage_gen_data},
      {"kmeans", milore::stage_kmeans},
      {"pretrain", milore::stage_pretrain},
      {"continual", milore::stage_continual},
      {"probe", milore::stage_probe},
      {"activation", milore::stage_activation},
      {"count-params", milore::stage_count_params},
      {"sweep", milore::stage_sweep},
  };
  const std::map<std::string, std::string> help = {
      {"gen-data", "generate the synthetic corpus"},
      {"kmeans", "fit the base codebook on raw frames"},
      {"pretrain", "train the base encoder"},
      {"continual", "continual training on the new languages"},
      {"probe", "probe the base and continual encoders"},
      {"activation", "per-layer expert activation profile"},
      {"count-params", "parameter accounting for the configured model"},
      {"sweep", "rank and expert-count grid"},
  };

  std::string config_path;
  bool dry_run = false;
  for (const auto& [name, stage] : stages) {
    auto* sub = app.add_subcommand(name, help.at(name));
    sub->add_option("-c,--config", config_path, "run config file")->required();
    sub->add_flag("--dry-run", dry_run, "validate the config and list planned artifacts");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  spdlog::set_level(spdlog::level::from_str(level));

  for (const auto& [name, stage] : stages) {
    if (!app.got_subcommand(name)) continue;
    try {
      return run(name, config_path, dry_run, stage);
    } catch (const milore::ConfigError& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return 2;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    }
  }
  return 1;
}
