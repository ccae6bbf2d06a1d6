// xptlab command-line driver.
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "xptlab/commands.hpp"

namespace {

using namespace xptlab;

struct Options {
  std::string config;
  std::optional<std::string> mode;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> checkpoint;
  bool force = false;
};

std::vector<std::uint64_t> seeds_for(const Options& o, const ExperimentConfig& c) {
  if (o.seed) return {*o.seed};
  return c.seeds;
}

std::vector<TuneMode> modes_for(const Options& o) {
  if (o.mode) return {parse_mode(*o.mode)};
  return {TuneMode::kFineTune, TuneMode::kPromptTune};
}

int run(const std::string& command, const Options& o) {
  ExperimentConfig config = load_config(o.config);
  if (o.out) config.output_dir = *o.out;
  const Layout layout{config.output_dir};
  std::ostream& log = std::cerr;

  if (command == "gen") {
    cmd_gen(config, layout, o.force, log);
  } else if (command == "pretrain") {
    cmd_pretrain(config, layout, log);
  } else if (command == "tune") {
    for (TuneMode mode : modes_for(o)) {
      for (std::uint64_t seed : seeds_for(o, config)) cmd_tune(config, layout, mode, seed, log);
    }
  } else if (command == "eval") {
    std::optional<TuneMode> mode;
    if (o.mode) mode = parse_mode(*o.mode);
    std::optional<std::filesystem::path> ckpt;
    if (o.checkpoint) ckpt = *o.checkpoint;
    const EvalSummary s = cmd_eval(config, layout, mode, o.seed.value_or(config.seeds.front()), ckpt, log);
    for (const auto& [lang, acc] : s.accuracy) std::cout << lang << ',' << acc << '\n';
  } else if (command == "analyze") {
    for (std::uint64_t seed : seeds_for(o, config)) cmd_analyze(config, layout, seed, log);
  } else if (command == "report") {
    cmd_report(config, layout, log);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xptlab: prompt tuning vs fine-tuning on a synthetic cross-lingual benchmark"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "experiment directory (overrides output_dir)");
  };
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", o.seed, "run seed (default: every configured seed)"); };
  auto add_mode = [&](CLI::App* sub, const char* help) {
    sub->add_option("--mode", o.mode, help)->check(CLI::IsMember({"ft", "pt"}));
  };

  CLI::App* gen = app.add_subcommand("gen", "generate the synthetic dataset");
  add_common(gen);
  gen->add_flag("--force", o.force, "overwrite a non-empty data directory");

  CLI::App* pretrain = app.add_subcommand("pretrain", "MLM-pretrain the shared backbone");
  add_common(pretrain);

  CLI::App* tune = app.add_subcommand("tune", "fine-tune or prompt-tune from the pretrain checkpoint");
  add_common(tune);
  add_mode(tune, "ft or pt (default: both)");
  add_seed(tune);

  CLI::App* eval = app.add_subcommand("eval", "per-language test accuracy of a checkpoint");
  add_common(eval);
  add_mode(eval, "evaluate the ft/pt run (default: pretrain backbone with an untrained head)");
  eval->add_option("--seed", o.seed, "run seed (default: first configured seed)");
  eval->add_option("--checkpoint", o.checkpoint, "explicit checkpoint path")->check(CLI::ExistingFile);

  CLI::App* analyze = app.add_subcommand("analyze", "representation metrics, t-SNE and boundaries");
  add_common(analyze);
  add_seed(analyze);

  CLI::App* report = app.add_subcommand("report", "aggregate analysis results over seeds");
  add_common(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ErrorKind::kInput);
  }

  try {
    return run(app.get_subcommands().front()->get_name(), o);
  } catch (const Error& e) {
    std::cerr << "xptlab: " << e.what() << '\n';
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "xptlab: unexpected failure: " << e.what() << '\n';
    return EXIT_FAILURE;
  }
}
