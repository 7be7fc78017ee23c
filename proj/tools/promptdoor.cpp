// promptdoor: staged experiment runner.
//
//   promptdoor gen-corpus --run-dir runs/a [--config cfg.json] [--set backdoor.epochs=30]
//   promptdoor pretrain --run-dir runs/a
//   ...
//   promptdoor run --run-dir runs/a            # every stage in order
//   promptdoor generate --run-dir runs/a --prompt backdoor_prompt.ckpt "read a book"
//
// Exit codes: 0 ok, 1 usage or config error, 2 stage precondition failure,
// 3 numerical divergence.
#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "promptdoor/pipeline.hpp"

namespace rp = promptdoor::pipeline;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string run_dir;
  std::string config;
  std::vector<std::string> sets;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--run-dir,-d", c.run_dir, "run directory holding artifacts")->required();
  cmd->add_option("--config,-c", c.config, "JSON config file (defaults apply to missing fields)");
  cmd->add_option("--set", c.sets, "override a config field, e.g. --set backdoor.epochs=30");
  cmd->add_flag("--quiet,-q", c.quiet, "log to the run directory only");
}

// Config from --config, else the config recorded by an earlier stage of the
// run, else defaults; --set overrides apply last.
rp::ExperimentConfig resolve_config(const Common& c) {
  nlohmann::json patch = nlohmann::json::object();
  if (!c.config.empty()) {
    try {
      patch = nlohmann::json::parse(promptdoor::read_file(c.config));
    } catch (const nlohmann::json::exception& e) {
      throw rp::ConfigError("config '" + c.config + "': " + e.what());
    } catch (const std::runtime_error& e) {
      throw rp::ConfigError(e.what());
    }
  } else {
    for (auto s : rp::all_stages()) {
      const auto m = fs::path(c.run_dir) / (rp::stage_name(s) + ".manifest.json");
      if (fs::exists(m)) {
        patch = nlohmann::json::parse(promptdoor::read_file(m.string())).at("config");
        break;
      }
    }
  }
  for (const auto& s : c.sets) rp::merge_patch(patch, rp::parse_override(s));
  return rp::config_from_json(patch);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Soft-prompt backdoor experiments on a tiny planning language model"};
  app.require_subcommand(1);

  Common common;
  std::vector<std::pair<CLI::App*, rp::Stage>> stage_cmds;
  for (auto s : rp::all_stages()) {
    auto* cmd = app.add_subcommand(rp::stage_name(s), "run the " + rp::stage_name(s) + " stage");
    add_common(cmd, common);
    stage_cmds.push_back({cmd, s});
  }
  auto* run_cmd = app.add_subcommand("run", "run every stage in order");
  add_common(run_cmd, common);
  std::string from_stage = "gen-corpus";
  run_cmd->add_option("--from", from_stage, "first stage to run");

  auto* show_cmd = app.add_subcommand("show-config", "print the effective config");
  add_common(show_cmd, common);

  auto* gen_cmd = app.add_subcommand("generate", "greedy plans from a deployed soft prompt");
  add_common(gen_cmd, common);
  std::string prompt_file = "backdoor_prompt.ckpt";
  std::vector<std::string> inputs;
  gen_cmd->add_option("--prompt,-p", prompt_file, "soft prompt artifact (relative to the run directory)");
  gen_cmd->add_option("inputs", inputs, "task descriptions")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    auto cfg = resolve_config(common);
    if (show_cmd->parsed()) {
      std::cout << rp::to_json(cfg).dump(2) << "\n";
      return 0;
    }
    rp::Pipeline p(cfg, common.run_dir, common.quiet ? nullptr : &std::cout);
    if (gen_cmd->parsed()) {
      // Deployment side: backbone, vocabulary and the materialized prompt only.
      const fs::path dir(common.run_dir);
      for (const char* f : {"backbone.ckpt", "vocab.txt"}) {
        if (!fs::exists(dir / f)) throw rp::StageError(std::string("missing ") + f + " in " + dir.string());
      }
      if (!fs::exists(dir / prompt_file)) throw rp::StageError("missing " + prompt_file + " in " + dir.string());
      auto model = promptdoor::LanguageModel::from_checkpoint(
          promptdoor::Checkpoint::deserialize(promptdoor::read_file((dir / "backbone.ckpt").string())));
      auto vocab = promptdoor::Vocabulary::deserialize(promptdoor::read_file((dir / "vocab.txt").string()));
      auto P = promptdoor::prompt_from_checkpoint(
          promptdoor::Checkpoint::deserialize(promptdoor::read_file((dir / prompt_file).string())));
      auto gens = promptdoor::generate_plans(model, P, inputs, vocab, cfg.max_plan_tokens);
      for (std::size_t i = 0; i < gens.size(); ++i) {
        std::cout << inputs[i] << "\t" << vocab.detokenize(gens[i].tokens) << (gens[i].truncated ? "\t[truncated]" : "")
                  << "\n";
      }
      return 0;
    }
    if (run_cmd->parsed()) {
      p.run_from(rp::parse_stage(from_stage));
      return 0;
    }
    for (auto& [cmd, s] : stage_cmds) {
      if (cmd->parsed()) p.run(s);
    }
    return 0;
  } catch (const rp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const promptdoor::VocabError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const promptdoor::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return 3;
  } catch (const rp::StageError& e) {
    std::cerr << "stage error: " << e.what() << "\n";
    return 2;
  } catch (const promptdoor::FormatError& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
