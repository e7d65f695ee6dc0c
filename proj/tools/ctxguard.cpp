// ctxguard command-line driver.
//
//   ctxguard <gen|train-backbone|train-tedm|attack|eval|compare> --config <path>
//            [--seed N] [--out DIR] [--kind fff|uap] [--model baseline|tedm] [--mode whole|region]
//
// Exit codes: 0 success, 2 config, 3 I/O, 4 missing prerequisite, 5 consistency.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "ctxguard/config.hpp"
#include "ctxguard/errors.hpp"
#include "ctxguard/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 2, kIo = 3, kMissing = 4, kConsistency = 5 };

int run(int argc, char** argv) {
  using namespace ctxguard;
  CLI::App app{"ctxguard: contextual rescoring of detections under universal perturbations"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::string kind, model = "baseline", mode;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration (JSON)")->required();
    sub->add_option("--seed", seed, "run seed (overrides the config)");
    sub->add_option("--out", out, "run directory (overrides the config)");
  };
  CLI::App* gen = app.add_subcommand("gen", "generate train and val datasets");
  CLI::App* tbb = app.add_subcommand("train-backbone", "train the appearance backbone");
  CLI::App* ttd = app.add_subcommand("train-tedm", "train the rescoring encoder with SCG");
  CLI::App* att = app.add_subcommand("attack", "synthesize a universal perturbation");
  CLI::App* evl = app.add_subcommand("eval", "evaluate one condition on the val split");
  CLI::App* cmp = app.add_subcommand("compare", "tabulate TEDM minus baseline per condition");
  for (CLI::App* sub : {gen, tbb, ttd, att, evl, cmp}) common(sub);
  att->add_option("--kind", kind, "fff or uap")->required()->check(CLI::IsMember({"fff", "uap"}));
  evl->add_option("--kind", kind, "attack kind: none, fff or uap")->check(CLI::IsMember({"none", "fff", "uap"}));
  evl->add_option("--model", model, "baseline or tedm")->check(CLI::IsMember({"baseline", "tedm"}));
  evl->add_option("--mode", mode, "whole or region")->check(CLI::IsMember({"whole", "region"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  RunConfig cfg;
  try {
    cfg = load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (out) cfg.output_dir = *out;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  }

  try {
    if (*gen) {
      cmd_gen(cfg, std::cout);
    } else if (*tbb) {
      cmd_train_backbone(cfg, std::cout);
    } else if (*ttd) {
      cmd_train_tedm(cfg, std::cout);
    } else if (*att) {
      cmd_attack(cfg, parse_attack_kind(kind), std::cout);
    } else if (*evl) {
      Condition cond;
      cond.model = model;
      if (!kind.empty() && kind != "none") {
        cond.attack = parse_attack_kind(kind);
        cond.mode = parse_apply_mode(mode.empty() ? "whole" : mode);
      } else if (!mode.empty()) {
        std::cerr << "warning: --mode is ignored without an attack\n";
      }
      cmd_eval(cfg, cond, std::cout);
    } else if (*cmp) {
      cmd_compare(cfg, std::cout);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const PrerequisiteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const ConsistencyError& e) {
    std::cerr << "consistency error: " << e.what() << "\n";
    return kConsistency;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const ParseError& e) {
    std::cerr << "I/O error: malformed artifact: " << e.what() << "\n";
    return kIo;
  } catch (const VersionError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const ArgumentError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const Error& e) {
    std::cerr << "consistency error: " << e.what() << "\n";
    return kConsistency;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kConsistency;
  }
}
