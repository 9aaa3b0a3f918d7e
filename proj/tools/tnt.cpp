// Command line front end. Every subcommand reads a JSON experiment config,
// writes its artifacts into the output directory, and prints the written
// paths, one per line. Exit codes: 0 success, 2 bad config or usage, 3
// malformed data or files, 1 anything else.
#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "tnt/common.hpp"
#include "tnt/experiment.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::string out;
  int64_t seed = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
  auto* c = cmd->add_option("--config", args.config, "experiment config (JSON)");
  if (config_required) c->required();
  cmd->add_option("--out", args.out, "output directory (overrides config)");
  cmd->add_option("--seed", args.seed, "run a single seed (overrides config)");
}

// Reads the raw config bytes once so the manifest hash covers exactly what
// the user wrote, then applies the command line overrides on top.
tnt::ExperimentConfig load_with_overrides(const CommonArgs& args, std::string& config_text) {
  std::ifstream in(args.config, std::ios::binary);
  if (!in) throw tnt::config_error(tnt::msg(args.config, ": cannot open config"));
  config_text.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  tnt::ExperimentConfig cfg = tnt::parse_experiment_config(config_text);
  if (!args.out.empty()) cfg.out_dir = args.out;
  if (args.seed >= 0) cfg.seeds = {static_cast<uint64_t>(args.seed)};
  return cfg;
}

void print_paths(const std::vector<std::string>& paths) {
  for (const std::string& p : paths) std::cout << p << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"token pruning laboratory"};
  app.require_subcommand(1);

  CommonArgs tb_args, ta_args, sw_args, fl_args, rm_args;
  std::string preset;
  std::string history;
  std::vector<int64_t> samples;

  CLI::App* tb = app.add_subcommand("train-backbone", "train and save classifier backbones");
  add_common(tb, tb_args);
  CLI::App* ta = app.add_subcommand("train-allocator", "train noise allocators on frozen backbones");
  add_common(ta, ta_args);
  CLI::App* sw = app.add_subcommand("sweep", "evaluate pruning methods across keep points");
  add_common(sw, sw_args);
  CLI::App* fl = app.add_subcommand("flops", "analytic cost of a schedule or preset");
  add_common(fl, fl_args, false);
  fl->add_option("--preset", preset, "published model preset instead of a config");
  CLI::App* rm = app.add_subcommand("render-map", "render kept-token maps from a history file");
  add_common(rm, rm_args);
  rm->add_option("--history", history, "history file from a sweep")->required();
  rm->add_option("--samples", samples, "sample ids to render")->required();

  try {
    app.parse(argc, argv);

    std::string config_text;
    if (tb->parsed()) {
      print_paths(tnt::cmd_train_backbone(load_with_overrides(tb_args, config_text), config_text));
    } else if (ta->parsed()) {
      print_paths(tnt::cmd_train_allocator(load_with_overrides(ta_args, config_text), config_text));
    } else if (sw->parsed()) {
      print_paths(tnt::cmd_sweep(load_with_overrides(sw_args, config_text), config_text));
    } else if (fl->parsed()) {
      if (!preset.empty()) {
        if (!fl_args.config.empty())
          throw tnt::usage_error("flops takes --config or --preset, not both");
        print_paths(tnt::cmd_flops_preset(preset, fl_args.out.empty() ? "out" : fl_args.out));
      } else {
        if (fl_args.config.empty())
          throw tnt::usage_error("flops needs --config or --preset");
        print_paths(tnt::cmd_flops(load_with_overrides(fl_args, config_text), config_text));
      }
    } else if (rm->parsed()) {
      print_paths(tnt::cmd_render_map(load_with_overrides(rm_args, config_text), history,
                                      samples, config_text));
    }
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const tnt::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const tnt::usage_error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const tnt::format_error& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
