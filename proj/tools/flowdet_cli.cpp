// Command-line front end. Talks to the engine exclusively through the C API.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowdet/flowdet_c.h"

namespace {

int fail(fd_status status) {
  std::fprintf(stderr, "error: %s\n", fd_last_error());
  return static_cast<int>(status);
}

// Builds the effective config: file (or defaults) -> --set overrides ->
// FLOWDET_SEED -> validation. Returns nullptr after printing the error.
fd_config* build_config(const std::string& config_path,
                        const std::vector<std::string>& overrides,
                        fd_status* status_out) {
  fd_config* cfg = nullptr;
  fd_status status = config_path.empty() ? fd_config_create(&cfg)
                                         : fd_config_load(config_path.c_str(), &cfg);
  if (status == FD_OK) {
    for (const auto& item : overrides) {
      const std::size_t eq = item.find('=');
      if (eq == std::string::npos) {
        std::fprintf(stderr, "error: --set expects key=value, got '%s'\n",
                     item.c_str());
        fd_config_free(cfg);
        *status_out = FD_ERR_CONFIG;
        return nullptr;
      }
      status = fd_config_set(cfg, item.substr(0, eq).c_str(),
                             item.substr(eq + 1).c_str());
      if (status != FD_OK) break;
    }
  }
  if (status == FD_OK) status = fd_config_apply_env(cfg);
  if (status == FD_OK) status = fd_config_validate(cfg);
  if (status != FD_OK) {
    std::fprintf(stderr, "error: %s\n", fd_last_error());
    fd_config_free(cfg);
    *status_out = status;
    return nullptr;
  }
  *status_out = FD_OK;
  return cfg;
}

void add_config_flags(CLI::App* cmd, std::string* config_path,
                      std::vector<std::string>* overrides) {
  cmd->fallthrough();  // lets --quiet appear after the subcommand
  cmd->add_option("--config", *config_path, "key=value config file");
  cmd->add_option("--set", *overrides, "override, e.g. --set train.steps=100");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowdet: detection as generative transport (desk scale)"};
  app.require_subcommand(1);
  app.set_version_flag("--version", fd_version());

  std::string config_path;
  std::vector<std::string> overrides;
  bool quiet = false;
  app.add_flag("--quiet", quiet, "suppress progress logs");

  std::string gen_out = "data";
  CLI::App* gen = app.add_subcommand("gen-data", "generate train/val datasets");
  add_config_flags(gen, &config_path, &overrides);
  gen->add_option("--out", gen_out, "output directory");

  std::string train_data = "data", train_out = "run", train_resume;
  CLI::App* train = app.add_subcommand("train", "train a detector");
  add_config_flags(train, &config_path, &overrides);
  train->add_option("--data", train_data, "dataset directory");
  train->add_option("--out", train_out, "run directory (checkpoint.json)");
  train->add_option("--resume", train_resume, "checkpoint to resume from");

  std::string eval_ckpt, eval_data, eval_out;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_config_flags(eval, &config_path, &overrides);
  eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "dataset file (e.g. data/val.jsonl)")
      ->required();
  eval->add_option("--out", eval_out, "JSON report path");

  std::string sweep_ckpt, sweep_data, sweep_out = "sweep";
  int sweep_threads = 1;
  CLI::App* sweep = app.add_subcommand("sweep", "n_eval x steps x solver grid");
  add_config_flags(sweep, &config_path, &overrides);
  sweep->add_option("--ckpt", sweep_ckpt, "checkpoint file")->required();
  sweep->add_option("--data", sweep_data, "dataset file")->required();
  sweep->add_option("--out", sweep_out, "output directory");
  sweep->add_option("--threads", sweep_threads, "worker cap for grid cells");

  std::string ablate_out = "ablate";
  CLI::App* ablate = app.add_subcommand("ablate", "prior/matcher/solver tables");
  add_config_flags(ablate, &config_path, &overrides);
  ablate->add_option("--out", ablate_out, "output directory");

  CLI11_PARSE(app, argc, argv);
  const int verbose = quiet ? 0 : 1;

  fd_status status = FD_OK;
  fd_config* cfg = build_config(config_path, overrides, &status);
  if (!cfg) return static_cast<int>(status);

  if (gen->parsed()) {
    fd_gen_result r{};
    status = fd_gen_data(cfg, gen_out.c_str(), &r);
    if (status == FD_OK)
      std::printf("wrote %d train + %d val scenes to %s (config %s)\n",
                  r.n_train, r.n_val, gen_out.c_str(), r.config_hash);
  } else if (train->parsed()) {
    fd_train_result r{};
    status = fd_train(cfg, train_data.c_str(), train_out.c_str(),
                      train_resume.empty() ? nullptr : train_resume.c_str(),
                      verbose, &r);
    if (status == FD_OK) {
      std::printf("trained %lld steps, final loss %.4f",
                  static_cast<long long>(r.steps_run), r.loss);
      if (r.has_eval) std::printf(", val ap50 %.4f", r.val_ap50);
      std::printf("; checkpoint at %s/checkpoint.json\n", train_out.c_str());
    }
  } else if (eval->parsed()) {
    fd_eval_result r{};
    status = fd_eval(cfg, eval_ckpt.c_str(), eval_data.c_str(),
                     eval_out.empty() ? nullptr : eval_out.c_str(), verbose, &r);
    if (status == FD_OK && quiet)
      std::printf("ap=%.4f ap50=%.4f ap75=%.4f recall=%.4f nfe=%.2f\n", r.ap,
                  r.ap50, r.ap75, r.recall, r.nfe);
  } else if (sweep->parsed()) {
    int32_t rows = 0;
    status = fd_sweep(cfg, sweep_ckpt.c_str(), sweep_data.c_str(),
                      sweep_out.c_str(), sweep_threads, verbose, &rows);
    if (status == FD_OK)
      std::printf("sweep: %d rows -> %s/sweep.csv\n", rows, sweep_out.c_str());
  } else if (ablate->parsed()) {
    int32_t rows = 0;
    status = fd_ablate(cfg, ablate_out.c_str(), verbose, &rows);
    if (status == FD_OK)
      std::printf("ablate: %d rows -> %s/ablate_{prior,match,solver}.csv\n",
                  rows, ablate_out.c_str());
  }

  fd_config_free(cfg);
  if (status != FD_OK) return fail(status);
  return 0;
}
