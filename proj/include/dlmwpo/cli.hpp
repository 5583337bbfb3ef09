#pragma once

// Subcommand front end. Exit codes: 0 success, 1 a check or run failed,
// 2 usage problems (bad flags, unreadable config). Usage failures must not
// leave a half-created run directory behind, so config loading always
// precedes prepare_run_dir.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "audits.hpp"
#include "config.hpp"
#include "tasks.hpp"
#include "trainer.hpp"

namespace dlmwpo {

namespace detail {

inline std::string resolve_out(const std::string& given, const std::string& stem,
                               const Config& cfg) {
  if (!given.empty()) return given;
  const char* env = std::getenv("DLMWPO_OUT");
  if (env == nullptr || *env == '\0')
    throw config_error("no --out given and DLMWPO_OUT is unset");
  return std::string(env) + "/" + stem + "-" + hex64(cfg.hash());
}

inline std::vector<TaskInstance> load_instances(const std::string& path, const Config& cfg) {
  std::vector<TaskInstance> all = read_dataset(path);
  const std::string task = cfg.word("task");
  for (const TaskInstance& inst : all)
    if (inst.task != task)
      throw config_error("dataset row task '" + inst.task + "' disagrees with config task '" +
                         task + "'");
  if (all.empty()) throw config_error("dataset is empty: " + path);
  return all;
}

}  // namespace detail

inline int cli_main(int argc, const char* const* argv) {
  CLI::App app{"training and verification toolkit for masked-diffusion policies"};
  app.require_subcommand(1);

  std::string config_path, data_path, init_path, out_dir, metrics_path, out_file;
  std::vector<std::string> overrides;
  std::string task = "countdown", method_s = "wd1", check = "all";
  long long count = 512;
  std::uint64_t seed = 42;

  CLI::App* gen = app.add_subcommand("gen-data", "generate a verifiable instance dataset");
  gen->add_option("--task", task, "countdown, sudoku, or arithmetic");
  gen->add_option("--count", count, "instances to generate")->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "generation seed");
  gen->add_option("--out", out_file, "output JSONL path")->required();

  CLI::App* pre = app.add_subcommand("pretrain", "masked-denoising pretraining on gold pairs");
  pre->add_option("--config", config_path, "key=value config file")->required();
  pre->add_option("--set", overrides, "config override key=value (repeatable)");
  pre->add_option("--data", data_path, "instance JSONL")->required();
  pre->add_option("--out", out_dir, "run directory (default $DLMWPO_OUT/<name>)");

  CLI::App* rl = app.add_subcommand("rl-train", "grouped RL fine-tuning from a checkpoint");
  rl->add_option("--config", config_path, "key=value config file")->required();
  rl->add_option("--set", overrides, "config override key=value (repeatable)");
  rl->add_option("--method", method_s, "wd1, wd1-p, or diffu-grpo");
  rl->add_option("--data", data_path, "instance JSONL")->required();
  rl->add_option("--init", init_path, "initial checkpoint")->required();
  rl->add_option("--out", out_dir, "run directory (default $DLMWPO_OUT/<name>)");

  CLI::App* ev = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  ev->add_option("--config", config_path, "key=value config file")->required();
  ev->add_option("--set", overrides, "config override key=value (repeatable)");
  ev->add_option("--ckpt", init_path, "checkpoint to evaluate")->required();
  ev->add_option("--data", data_path, "instance JSONL")->required();
  ev->add_option("--out", out_dir, "optional directory for eval.json");

  CLI::App* orc = app.add_subcommand("oracle", "exact verification checks");
  orc->add_option("--check", check, "weights, eq6, thm1, thm2, thm3, elbo, or all");
  orc->add_option("--out", out_file, "optional JSON report path");

  CLI::App* plot = app.add_subcommand("plot-data", "reward curve CSV from a metrics stream");
  plot->add_option("--metrics", metrics_path, "metrics.jsonl from a run")->required();
  plot->add_option("--out", out_file, "output CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      RngStream rng(seed);
      std::vector<TaskInstance> insts;
      insts.reserve(static_cast<std::size_t>(count));
      for (long long i = 0; i < count; ++i) insts.push_back(make_task_instance(task, rng));
      write_dataset(out_file, insts);
      std::cout << "{\"task\":\"" << task << "\",\"count\":" << count << ",\"path\":\"" << out_file
                << "\"}\n";
      return 0;
    }

    if (pre->parsed()) {
      Config cfg = Config::from_file(config_path, overrides);
      cfg.validate();
      std::vector<TaskInstance> data = detail::load_instances(data_path, cfg);
      RunPaths paths = prepare_run_dir(detail::resolve_out(out_dir, "pretrain", cfg), cfg);
      RunLock lock(paths.dir);
      PretrainResult r = pretrain(cfg, data, paths);
      nlohmann::json summary = {{"steps_run", r.steps_run},
                                {"final_loss", r.final_loss},
                                {"checkpoint", paths.checkpoint}};
      std::cout << summary.dump() << "\n";
      return 0;
    }

    if (rl->parsed()) {
      Config cfg = Config::from_file(config_path, overrides);
      cfg.validate();
      RlMethod method = parse_method(method_s);
      std::vector<TaskInstance> data = detail::load_instances(data_path, cfg);
      ParamStore<float> init_ps = load_checkpoint(init_path);
      RunPaths paths =
          prepare_run_dir(detail::resolve_out(out_dir, std::string("rl-") + method_name(method), cfg), cfg);
      RunLock lock(paths.dir);
      RlResult r = rl_train(cfg, method, data, init_ps, paths);
      nlohmann::json summary = {{"gradient_steps", r.gradient_steps},
                                {"nfe_sampling", r.nfe.sampling},
                                {"nfe_likelihood", r.nfe.likelihood},
                                {"checkpoint", paths.checkpoint}};
      std::cout << summary.dump() << "\n";
      return 0;
    }

    if (ev->parsed()) {
      Config cfg = Config::from_file(config_path, overrides);
      cfg.validate();
      std::vector<TaskInstance> data = detail::load_instances(data_path, cfg);
      std::size_t cap = static_cast<std::size_t>(cfg.integer("eval_prompts"));
      if (data.size() > cap) data.resize(cap);
      ParamStore<float> ps = load_checkpoint(init_path);
      EvalReport rep = evaluate(cfg, ps, data);
      std::cout << rep.to_json().dump() << "\n";
      if (!out_dir.empty()) {
        RunPaths paths = prepare_run_dir(out_dir, cfg);
        std::ofstream f(paths.dir + "/eval.json", std::ios::trunc);
        f << rep.to_json().dump() << "\n";
      }
      return 0;
    }

    if (orc->parsed()) {
      std::vector<OracleReport> reports;
      if (check == "all") {
        reports = run_all_audits();
      } else if (check == "weights") {
        reports.push_back(audit_weights());
      } else if (check == "eq6") {
        reports.push_back(audit_eq6());
      } else if (check == "thm1") {
        reports.push_back(audit_thm1());
      } else if (check == "thm2") {
        reports.push_back(audit_thm2());
      } else if (check == "thm3") {
        reports.push_back(audit_thm3());
      } else if (check == "elbo") {
        reports.push_back(audit_elbo());
      } else {
        throw config_error("unknown oracle check: " + check);
      }
      bool all_pass = true;
      nlohmann::json arr = nlohmann::json::array();
      for (const OracleReport& r : reports) {
        std::cout << r.to_json().dump() << "\n";
        arr.push_back(r.to_json());
        if (!r.pass) {
          all_pass = false;
          std::cerr << "oracle check failed: " << r.check << "\n";
        }
      }
      if (!out_file.empty()) {
        std::ofstream f(out_file, std::ios::trunc);
        f << arr.dump(2) << "\n";
      }
      return all_pass ? 0 : 1;
    }

    if (plot->parsed()) {
      write_plot_csv(metrics_path, out_file);
      std::cout << "{\"out\":\"" << out_file << "\"}\n";
      return 0;
    }
  } catch (const config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace dlmwpo
