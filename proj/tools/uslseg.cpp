#include <CLI11.hpp>
#include <iostream>

#include "uslseg/config.hpp"
#include "uslseg/dataset.hpp"
#include "uslseg/errors.hpp"
#include "uslseg/pipeline.hpp"

namespace {

struct StageArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output;
  std::string preset;
  bool skip_bad = false;
  bool pooled = false;
};

void add_stage_options(CLI::App* cmd, StageArgs& a) {
  cmd->add_option("--config", a.config, "Pipeline config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", a.seed, "Override the config seed");
  cmd->add_option("--output", a.output, "Override output_dir");
  cmd->add_option("--preset", a.preset, "Ablation variant: full, baseline, model1..model5");
  cmd->add_flag("--skip-bad", a.skip_bad, "Skip undecodable images with a warning");
  cmd->add_flag("--pooled", a.pooled, "Pool confusion counts instead of averaging per image");
}

uslseg::PipelineConfig resolve(const StageArgs& a) {
  uslseg::PipelineConfig c = a.config.empty() ? uslseg::PipelineConfig{} : uslseg::load_config(a.config);
  if (a.seed) c.seed = *a.seed;
  if (!a.output.empty()) c.output_dir = a.output;
  if (!a.preset.empty()) c = uslseg::apply_preset(c, uslseg::parse_variant(a.preset));
  if (a.skip_bad) c.dataset.skip_bad = true;
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised skin lesion segmentation pipeline"};
  app.require_subcommand(1);

  StageArgs args;
  std::string chosen;
  for (const char* name : {"pretrain", "ccam", "labels", "train", "refine", "infer", "evaluate", "all"}) {
    auto* cmd = app.add_subcommand(name, std::string("Run the ") + name + " stage");
    add_stage_options(cmd, args);
    cmd->callback([&chosen, name] { chosen = name; });
  }

  std::string synth_dir;
  uslseg::SyntheticOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write the synthetic lesion suite in the isic layout");
  synth_cmd->add_option("dir", synth_dir, "Destination directory")->required();
  synth_cmd->add_option("--count", synth.count, "Number of images");
  synth_cmd->add_option("--seed", synth.seed, "Generator seed");

  std::string config_out, config_preset, toy_root;
  auto* config_cmd = app.add_subcommand("config", "Print a config (defaults, a preset or the toy settings)");
  config_cmd->add_option("--preset", config_preset, "Ablation variant");
  config_cmd->add_option("--toy", toy_root, "Dataset root for the small synthetic settings");
  config_cmd->add_option("--output", config_out, "Output directory written into the config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (synth_cmd->parsed()) {
      uslseg::write_synthetic_suite(synth_dir, synth);
      std::cout << "wrote " << synth.count << " images to " << synth_dir << "\n";
      return 0;
    }
    if (config_cmd->parsed()) {
      uslseg::PipelineConfig c;
      if (!toy_root.empty()) c = uslseg::toy_config(toy_root, config_out.empty() ? "runs/toy" : config_out);
      else if (!config_out.empty()) c.output_dir = config_out;
      if (!config_preset.empty()) c = uslseg::apply_preset(c, uslseg::parse_variant(config_preset));
      std::cout << uslseg::to_text(c);
      return 0;
    }
    const auto cfg = resolve(args);
    uslseg::RunOptions opt;
    opt.pooled = args.pooled;
    const auto res = uslseg::run(uslseg::parse_stage(chosen), cfg, opt);
    std::cout << "manifest: " << res.manifest.string() << "\n";
    return 0;
  } catch (const uslseg::MissingPrerequisite& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const uslseg::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
