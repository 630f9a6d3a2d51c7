// SPDX-License-Identifier: Apache-2.0
// iqtool: command-line front end for the intraq pipeline stages.
#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "intraq/config.hpp"
#include "intraq/errors.hpp"
#include "intraq/pipeline.hpp"

namespace {

using intraq::config::ExperimentConfig;
using intraq::pipeline::Summary;

// Leftover arguments are `--key value` or `--key=value` config overrides.
void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    const auto& a = args[i];
    if (a.rfind("--", 0) != 0) throw intraq::ConfigError("unexpected argument '" + a + "'");
    const auto body = a.substr(2);
    if (const auto eq = body.find('='); eq != std::string::npos) {
      intraq::config::apply_setting(cfg, body.substr(0, eq), body.substr(eq + 1));
    } else {
      if (i + 1 >= args.size()) throw intraq::ConfigError("override '" + a + "' has no value");
      intraq::config::apply_setting(cfg, body, args[++i]);
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-shot quantization with intra-class heterogeneous synthetic data"};
  app.require_subcommand(1);
  std::string config_path;

  struct Command {
    const char* name;
    const char* help;
    Summary (*run)(const ExperimentConfig&);
  };
  const std::vector<Command> commands = {
      {"make-data", "write the procedural shapes train/val splits",
       [](const ExperimentConfig& c) {
         intraq::pipeline::make_data(c);
         Summary s;
         s.set("train_data", c.train_data.string());
         s.set("val_data", c.val_data.string());
         return s;
       }},
      {"pretrain", "train the full-precision reference model", intraq::pipeline::run_pretrain},
      {"capture-stats", "dump the reference model's BN running statistics", intraq::pipeline::run_capture_stats},
      {"synthesize", "generate the synthetic image set", intraq::pipeline::run_synthesize},
      {"finetune", "quantize and fine-tune on the synthetic set", intraq::pipeline::run_finetune},
      {"evaluate", "top-1 accuracy of the quantized model on val_data", intraq::pipeline::run_evaluate},
      {"diagnose", "intra-class cosine distance of the synthetic set", intraq::pipeline::run_diagnose},
      {"pipeline", "run every stage end to end", intraq::pipeline::run_pipeline},
      {"show-config", "print the effective config and its hash",
       [](const ExperimentConfig& c) {
         std::cout << intraq::config::to_text(c);
         Summary s;
         s.set("config_hash", intraq::config::config_hash(c));
         return s;
       }},
  };
  std::vector<CLI::App*> subs;
  for (const auto& cmd : commands) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("-c,--config", config_path, "experiment config file (key = value)");
    sub->allow_extras();
    subs.push_back(sub);
  }

  CLI11_PARSE(app, argc, argv);

  for (std::size_t i = 0; i < commands.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    const std::string name = commands[i].name;
    try {
      ExperimentConfig cfg;
      try {
        if (!config_path.empty()) cfg = intraq::config::load_config(config_path);
        apply_overrides(cfg, subs[i]->remaining());
      } catch (const std::exception& e) {
        throw intraq::StageError("config", e.what());
      }
      std::cout << commands[i].run(cfg).text();
      return 0;
    } catch (const intraq::StageError& e) {
      std::cerr << "iqtool: " << e.what() << "\n";
      return 2;
    } catch (const std::exception& e) {
      std::cerr << "iqtool: " << intraq::StageError(name, e.what()).what() << "\n";
      return 2;
    }
  }
  return 1;
}
