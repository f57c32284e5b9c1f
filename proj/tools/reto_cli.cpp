#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "reto/commands.hpp"

namespace {

const char* kDescriptions[] = {
    "generate synthetic sphere-flow samples and a train/val/test manifest",
    "train one model variant on the dataset",
    "evaluate a checkpoint on a split (relative L2, error PDF, quartiles)",
    "predict fields for one sample file",
    "train and evaluate all four variants with identical seeds and budgets",
    "attention-entropy histograms and optional attention-row export",
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reto: rotary-embedded transformer operator for point-cloud field regression"};
  app.require_subcommand(1, 1);
  app.footer("Config keys (JSON object of scalars, or --set key=value):\n" + reto::config_help());

  std::string config_file;
  std::vector<std::string> overrides;
  int threads = 0;
  std::string variant;
  bool force = false;
  bool per_channel = false;

  const auto& names = reto::command_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto* sub = app.add_subcommand(names[i], kDescriptions[i]);
    sub->add_option("-c,--config", config_file, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("-s,--set", overrides, "override a config key (key=value), repeatable");
    sub->add_option("--threads", threads, "worker threads; 1 gives bit-reproducible runs")->check(CLI::PositiveNumber);
    sub->add_option("--variant", variant, "full, no_rope, no_sincos or neither");
    sub->add_flag("--force", force, "allow entropy analysis above the resolution cap");
    sub->add_flag("--per-channel", per_channel, "print pressure / velocity / per-channel errors");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : reto::kExitInput;
  }

  reto::CommandOptions options;
  std::string command;
  for (auto* sub : app.get_subcommands()) command = sub->get_name();
  try {
    if (!config_file.empty()) options.keys.load_file(config_file);
    for (const auto& kv : overrides) options.keys.set_text(kv);  // flags win over the file
    if (!variant.empty()) options.keys.set_variant(variant);
    if (threads > 0) options.keys.set_text("threads=" + std::to_string(threads));
    options.config = options.keys.build();
  } catch (const reto::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return reto::kExitInput;
  }
  options.force = force;
  options.per_channel = per_channel;
  return reto::run_command(command, options);
}
