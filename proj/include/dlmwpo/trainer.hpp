#pragma once

// Training loops: masked-denoising pretraining and the grouped RL outer loop.
// Determinism contract: given (config, seed) the metrics stream is
// byte-identical across runs; wall-clock throughput goes to the side log,
// never into metrics.

#include <chrono>
#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "adam.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "diffusion.hpp"
#include "model.hpp"
#include "policy_opt.hpp"
#include "sampler.hpp"
#include "tasks.hpp"
#include "vocab.hpp"

namespace dlmwpo {

struct NfeCounters {
  std::uint64_t sampling = 0;
  std::uint64_t likelihood = 0;
};

enum class RlMethod { kWd1, kWd1P, kDiffuGrpo };

inline RlMethod parse_method(const std::string& s) {
  if (s == "wd1") return RlMethod::kWd1;
  if (s == "wd1-p") return RlMethod::kWd1P;
  if (s == "diffu-grpo") return RlMethod::kDiffuGrpo;
  throw config_error("method must be wd1, wd1-p, or diffu-grpo, got '" + s + "'");
}

inline const char* method_name(RlMethod m) {
  switch (m) {
    case RlMethod::kWd1: return "wd1";
    case RlMethod::kWd1P: return "wd1-p";
    case RlMethod::kDiffuGrpo: return "diffu-grpo";
  }
  return "?";
}

// ----- run directory plumbing -----

struct RunPaths {
  std::string dir;
  std::string metrics;
  std::string checkpoint;
  std::string resolved;
  std::string log;
};

// Exclusive advisory lock; a leftover lock means another run owns the
// directory and this one must not clobber it.
class RunLock {
 public:
  explicit RunLock(const std::string& dir) : path_(dir + "/.lock") {
    int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw config_error("run dir is locked by another run: " + dir);
    ::close(fd);
  }
  ~RunLock() { ::unlink(path_.c_str()); }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
};

inline RunPaths prepare_run_dir(const std::string& out_dir, const Config& cfg) {
  std::filesystem::create_directories(out_dir);
  RunPaths p;
  p.dir = out_dir;
  p.metrics = out_dir + "/metrics.jsonl";
  p.checkpoint = out_dir + "/checkpoint.bin";
  p.resolved = out_dir + "/config.resolved";
  p.log = out_dir + "/run.log";
  std::ofstream rf(p.resolved, std::ios::trunc);
  rf << cfg.resolved_text();
  rf << "# hash " << hex64(cfg.hash()) << "\n";
  return p;
}

class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) : f_(path, std::ios::trunc) {
    if (!f_) throw config_error("cannot open metrics file: " + path);
  }
  void append(const nlohmann::json& rec) {
    f_ << rec.dump() << "\n";
    f_.flush();
  }

 private:
  std::ofstream f_;
};

// ----- token plumbing -----

// Gold pair for pretraining: completion gets an explicit stop token and pad
// fill so every row in a bucket shares the same length.
inline PromptCompletion make_pc(const TaskInstance& inst, int gen_length, int max_prompt_length) {
  const Vocab& voc = task_vocab();
  PromptCompletion pc;
  pc.prompt = voc.encode(inst.prompt);
  if (static_cast<int>(pc.prompt.size()) > max_prompt_length)
    throw config_error("instance prompt exceeds max_prompt_length: " + inst.prompt);
  pc.completion = voc.encode(inst.answer);
  if (static_cast<int>(pc.completion.size()) + 1 > gen_length)
    throw config_error("instance answer exceeds max_completion_length: " + inst.task);
  pc.completion.push_back(Vocab::kEos);
  while (static_cast<int>(pc.completion.size()) < gen_length) pc.completion.push_back(Vocab::kPad);
  return pc;
}

inline int completion_token_len(const std::vector<int>& completion) {
  int n = 0;
  for (int t : completion) {
    if (t == Vocab::kEos || t == Vocab::kPad) break;
    ++n;
  }
  return n;
}

// ----- pretraining -----

struct PretrainResult {
  int steps_run = 0;
  double final_loss = 0.0;
};

inline PretrainResult pretrain(const Config& cfg, const std::vector<TaskInstance>& data,
                               const RunPaths& paths) {
  if (data.empty()) throw config_error("pretrain: empty dataset");
  const DenoiserConfig mc = cfg.model_config();
  RngStream root(cfg.u64("seed"));
  RngStream init_rng = root.fork(1);
  RngStream data_rng = root.fork(2);
  RngStream mask_rng = root.fork(3);
  ParamStore<float> ps = init_params<float>(mc, init_rng);
  OptimizerState<float> opt = OptimizerState<float>::init(ps);
  const AdamConfig adam = cfg.adam_config();
  const int gen_len = static_cast<int>(cfg.integer("max_completion_length"));
  const int max_plen = static_cast<int>(cfg.integer("max_prompt_length"));
  const double t_floor = cfg.real("t_floor");

  // bucket by prompt length so batch rows share a shape
  std::map<int, std::vector<PromptCompletion>> buckets;
  for (const TaskInstance& inst : data) {
    PromptCompletion pc = make_pc(inst, gen_len, max_plen);
    buckets[static_cast<int>(pc.prompt.size())].push_back(std::move(pc));
  }
  std::vector<std::pair<int, std::size_t>> bucket_sizes;  // (plen, count)
  std::size_t total = 0;
  for (const auto& [plen, v] : buckets) {
    bucket_sizes.push_back({plen, v.size()});
    total += v.size();
  }

  MetricsWriter mw(paths.metrics);
  const int steps = static_cast<int>(cfg.integer("pretrain_steps"));
  const int bs = static_cast<int>(cfg.integer("batch_size"));
  const int window = static_cast<int>(cfg.integer("plateau_window"));
  const double plateau_tol = cfg.real("plateau_tol");
  std::vector<double> losses;
  const std::uint64_t seed = cfg.u64("seed");

  PretrainResult res;
  for (int step = 0; step < steps; ++step) {
    std::size_t pick = data_rng.uniform_int(total);
    int plen = bucket_sizes.back().first;
    for (const auto& [pl, count] : bucket_sizes) {
      if (pick < count) {
        plen = pl;
        break;
      }
      pick -= count;
    }
    const std::vector<PromptCompletion>& bucket = buckets[plen];
    std::vector<PromptCompletion> batch;
    for (int b = 0; b < bs; ++b) batch.push_back(bucket[data_rng.uniform_int(bucket.size())]);

    try {
      Graph<float> g;
      auto loss = elbo_loss_graph(g, ps, batch, t_floor, mask_rng);
      double loss_v = static_cast<double>(g.val(loss)[0]);
      if (!is_finite(loss_v)) throw numeric_error("pretrain: non-finite loss");
      g.backward(loss);
      GradStore<float> gs = export_grads(g, ps);
      double norm = adam_step(ps, gs, opt, adam);
      mw.append({{"step", step}, {"loss", loss_v}, {"grad_norm", norm}, {"seed", seed}});
      losses.push_back(loss_v);
      res.steps_run = step + 1;
      res.final_loss = loss_v;
    } catch (const numeric_error&) {
      // parameters have not been touched by the failing step; keep them
      CheckpointMeta meta;
      meta.step = res.steps_run;
      meta.config_hash = hex64(cfg.hash());
      save_checkpoint(paths.dir + "/checkpoint.lastgood.bin", ps, meta);
      throw;
    }

    if (static_cast<int>(losses.size()) >= 2 * window) {
      double recent = 0.0, previous = 0.0;
      for (int i = 0; i < window; ++i) {
        recent += losses[losses.size() - 1 - static_cast<std::size_t>(i)];
        previous += losses[losses.size() - 1 - static_cast<std::size_t>(window + i)];
      }
      if ((previous - recent) / window < plateau_tol) break;
    }
  }

  CheckpointMeta meta;
  meta.step = res.steps_run;
  meta.config_hash = hex64(cfg.hash());
  save_checkpoint(paths.checkpoint, ps, meta);
  return res;
}

// ----- RL loop -----

struct RlResult {
  int gradient_steps = 0;
  NfeCounters nfe;
};

namespace detail {

struct GroupRows {
  Tensor<int> rows;     // model inputs
  Tensor<int> targets;  // clean tokens
  int plen = 0;
  int len = 0;
};

inline GroupRows build_targets(const std::vector<int>& prompt,
                               const std::vector<std::vector<int>>& completions) {
  GroupRows gr;
  gr.plen = static_cast<int>(prompt.size());
  gr.len = gr.plen + static_cast<int>(completions[0].size());
  int gsz = static_cast<int>(completions.size());
  gr.targets = Tensor<int>({gsz, gr.len});
  for (int i = 0; i < gsz; ++i) {
    for (int k = 0; k < gr.plen; ++k) gr.targets.at(i, k) = prompt[static_cast<std::size_t>(k)];
    for (int k = 0; k < gr.len - gr.plen; ++k)
      gr.targets.at(i, gr.plen + k) = completions[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
  }
  return gr;
}

// Per-token log-likelihood table under a fixed parameter set for prepared
// rows; prompt positions are zeroed (they carry no trainable signal here).
inline Tensor<float> gather_token_logp(const ParamStore<float>& ps, const Tensor<int>& rows,
                                       const Tensor<int>& targets, int plen) {
  Tensor<float> lp = eval_logprobs(ps, rows);
  int gsz = rows.dim(0), len = rows.dim(1), v = lp.dim(2);
  Tensor<float> out({gsz, len}, 0.0f);
  for (int i = 0; i < gsz; ++i)
    for (int k = plen; k < len; ++k)
      out.at(i, k) = lp[static_cast<std::size_t>((i * len + k) * v + targets.at(i, k))];
  return out;
}

// ELBO-style scoring rows: per sequence, n_draws independent completion
// maskings at t ~ U(t_floor, 1); coeff carries c_i * (1/t)/n_draws (or
// c_i/n_draws unweighted) at masked completion positions.
inline void build_elbo_rows(const Tensor<int>& targets, int plen, const std::vector<double>& coeffs,
                            int n_draws, double t_floor, bool weighted, bool length_normalize,
                            RngStream& rng, Tensor<int>* rows_out, Tensor<int>* targets_out,
                            Tensor<float>* coeff_out) {
  int gsz = targets.dim(0), len = targets.dim(1), n = len - plen;
  *rows_out = Tensor<int>({gsz * n_draws, len});
  *targets_out = Tensor<int>({gsz * n_draws, len});
  *coeff_out = Tensor<float>({gsz * n_draws, len}, 0.0f);
  for (int i = 0; i < gsz; ++i) {
    double base = coeffs[static_cast<std::size_t>(i)] / n_draws;
    if (length_normalize) base /= n;
    for (int d = 0; d < n_draws; ++d) {
      int r = i * n_draws + d;
      double t = t_floor + (1.0 - t_floor) * rng.uniform();
      double w = weighted ? base / t : base;
      for (int k = 0; k < len; ++k) {
        int tok = targets.at(i, k);
        targets_out->at(r, k) = tok;
        if (k < plen) {
          rows_out->at(r, k) = tok;
        } else if (rng.uniform() < t) {
          rows_out->at(r, k) = Vocab::kMask;
          coeff_out->at(r, k) = static_cast<float>(w);
        } else {
          rows_out->at(r, k) = tok;
        }
      }
    }
  }
}

}  // namespace detail

inline RlResult rl_train(const Config& cfg, RlMethod method, const std::vector<TaskInstance>& pool,
                         const ParamStore<float>& init_ps, const RunPaths& paths) {
  if (pool.empty()) throw config_error("rl_train: empty instance pool");
  const DenoiserConfig mc = cfg.model_config();
  if (init_ps.cfg.vocab != mc.vocab || init_ps.cfg.d_model != mc.d_model ||
      init_ps.cfg.n_layers != mc.n_layers || init_ps.cfg.n_heads != mc.n_heads)
    throw config_error("rl_train: checkpoint model shape disagrees with config");

  const SampleConfig scfg = cfg.sample_config();
  const AdamConfig adam = cfg.adam_config();
  const bool use_ref = cfg.real("beta") > 0.0;
  const bool positive_only = method == RlMethod::kWd1P;
  const bool length_normalize = cfg.flag("length_normalize");
  const bool advantage_shift = cfg.flag("advantage_shift");
  const std::string likelihood_mode = cfg.word("likelihood_mode");
  if (likelihood_mode == "elbo" && method == RlMethod::kDiffuGrpo)
    throw config_error("rl_train: the baseline caches one-pass likelihoods; likelihood_mode=elbo applies to wd1 only");
  const int gsz = static_cast<int>(cfg.integer("num_generations"));
  const int n_prompts = static_cast<int>(cfg.integer("num_prompts_per_step"));
  const int mu = static_cast<int>(cfg.integer("num_iterations"));
  const int global_steps = static_cast<int>(cfg.integer("global_steps"));
  const int retries = static_cast<int>(cfg.integer("rollback_retries"));
  const double p_mask = cfg.real("p_mask_prompt");
  const double lambda = cfg.real("lambda");
  const double beta = cfg.real("beta");
  const double psi = 1.0 / (lambda + beta);
  const double eps_clip = cfg.real("epsilon");
  const double t_floor = cfg.real("t_floor");
  const int elbo_draws = static_cast<int>(cfg.integer("elbo_draws"));
  const bool elbo_weighted = cfg.flag("elbo_weighted");
  const std::uint64_t seed = cfg.u64("seed");
  const Vocab& voc = task_vocab();

  ParamStore<float> theta = init_ps;
  ParamStore<float> ref;
  if (use_ref || advantage_shift) ref = init_ps;  // frozen reference
  OptimizerState<float> opt = OptimizerState<float>::init(theta);

  RngStream root(cfg.u64("seed"));
  RngStream data_rng = root.fork(10);
  RngStream sample_root = root.fork(11);
  RngStream mask_root = root.fork(12);

  MetricsWriter mw(paths.metrics);
  std::ofstream side_log(paths.log, std::ios::trunc);
  RlResult res;

  struct GroupState {
    const TaskInstance* inst = nullptr;
    std::vector<int> prompt;
    std::vector<std::vector<int>> completions;
    std::vector<double> rewards;
    std::vector<double> advantages;
    Wd1Weights weights;
    std::uint64_t weights_fp = 0;
    detail::GroupRows cached;     // baseline rows, drawn once per global step
    Tensor<float> logp_old;
    Tensor<float> logp_ref;
  };

  for (int gstep = 0; gstep < global_steps; ++gstep) {
    auto step_start = std::chrono::steady_clock::now();
    ParamStore<float> old_ps = theta;  // frozen sampling policy for this step
    const std::uint64_t old_fp = old_ps.fingerprint();

    std::vector<GroupState> groups(static_cast<std::size_t>(n_prompts));
    for (auto& gs : groups) {
      gs.inst = &pool[data_rng.uniform_int(pool.size())];
      gs.prompt = voc.encode(gs.inst->prompt);
    }

    // sampling with bounded rollback; a failed attempt discards nothing but
    // the completions themselves
    bool sampled = false;
    for (int attempt = 0; attempt <= retries && !sampled; ++attempt) {
      try {
        NfeCounters trial_nfe;
        for (int p = 0; p < n_prompts; ++p) {
          RngStream s = sample_root.fork(static_cast<std::uint64_t>(gstep))
                            .fork(static_cast<std::uint64_t>(attempt))
                            .fork(static_cast<std::uint64_t>(p));
          GroupSample out = generate_group(old_ps, use_ref ? &ref : nullptr,
                                           groups[static_cast<std::size_t>(p)].prompt, gsz, scfg, s);
          trial_nfe.sampling +=
              static_cast<std::uint64_t>(gsz) * static_cast<std::uint64_t>(out.nfe_per_completion);
          groups[static_cast<std::size_t>(p)].completions = std::move(out.completions);
        }
        res.nfe.sampling += trial_nfe.sampling;
        sampled = true;
      } catch (const generation_error&) {
        if (attempt == retries) throw;
      } catch (const numeric_error&) {
        if (attempt == retries) throw;
      }
    }

    // rewards, advantages, weights; weights are fixed for the whole step
    double reward_mean = 0.0, reward_max = -1e300, comp_len_mean = 0.0;
    RngStream shift_rng = mask_root.fork(static_cast<std::uint64_t>(gstep)).fork(7001);
    bool shift_nfe_counted = false;
    for (auto& gs : groups) {
      gs.rewards.resize(static_cast<std::size_t>(gsz));
      for (int i = 0; i < gsz; ++i) {
        const std::vector<int>& comp = gs.completions[static_cast<std::size_t>(i)];
        std::string text = voc.decode_until_stop(comp);
        gs.rewards[static_cast<std::size_t>(i)] = task_reward(*gs.inst, text).total();
        reward_mean += gs.rewards[static_cast<std::size_t>(i)];
        reward_max = std::max(reward_max, gs.rewards[static_cast<std::size_t>(i)]);
        comp_len_mean += completion_token_len(comp);
      }
      gs.advantages = group_advantage(gs.rewards);
      if (advantage_shift) {
        if (!shift_nfe_counted) {
          res.nfe.likelihood += 1;  // one reference evaluation event per step
          shift_nfe_counted = true;
        }
        std::vector<double> ref_seq(static_cast<std::size_t>(gsz), 0.0);
        for (int i = 0; i < gsz; ++i) {
          PromptCompletion pc{gs.prompt, gs.completions[static_cast<std::size_t>(i)]};
          std::vector<double> tok = token_loglik_masked_prompt(ref, pc, p_mask, shift_rng);
          for (double v : tok) ref_seq[static_cast<std::size_t>(i)] += v;
        }
        gs.advantages = shift_advantages(gs.advantages, ref_seq, lambda, beta);
      }
      if (method != RlMethod::kDiffuGrpo) {
        gs.weights = wd1_weights(gs.advantages, psi);
        gs.weights_fp = gs.weights.fingerprint();
      }
    }
    reward_mean /= gsz * n_prompts;
    comp_len_mean /= gsz * n_prompts;

    // baseline: one-pass likelihood caches under the shared per-step mask
    if (method == RlMethod::kDiffuGrpo) {
      for (int p = 0; p < n_prompts; ++p) {
        GroupState& gs = groups[static_cast<std::size_t>(p)];
        gs.cached = detail::build_targets(gs.prompt, gs.completions);
        RngStream mrng = mask_root.fork(static_cast<std::uint64_t>(gstep)).fork(static_cast<std::uint64_t>(p));
        gs.cached.rows = masked_prompt_rows(gs.prompt, gs.cached.len - gs.cached.plen, gsz, p_mask, mrng);
        gs.logp_old = detail::gather_token_logp(old_ps, gs.cached.rows, gs.cached.targets, gs.cached.plen);
      }
      res.nfe.likelihood += 1;  // old-policy evaluation event
      if (use_ref) {
        for (auto& gs : groups)
          gs.logp_ref = detail::gather_token_logp(ref, gs.cached.rows, gs.cached.targets, gs.cached.plen);
        res.nfe.likelihood += 1;
      }
    }

    // inner gradient iterations
    for (int j = 0; j < mu; ++j) {
      Graph<float> g;
      std::vector<typename Graph<float>::NodeRef> parts;
      for (int p = 0; p < n_prompts; ++p) {
        GroupState& gs = groups[static_cast<std::size_t>(p)];
        if (method == RlMethod::kDiffuGrpo) {
          parts.push_back(diffu_grpo_loss_node(g, theta, gs.cached.rows, gs.cached.targets,
                                               gs.cached.plen, gs.logp_old,
                                               use_ref ? &gs.logp_ref : nullptr, gs.advantages,
                                               eps_clip, use_ref ? beta : 0.0));
          continue;
        }
        detail::GroupRows tg = detail::build_targets(gs.prompt, gs.completions);
        RngStream mrng = mask_root.fork(static_cast<std::uint64_t>(gstep))
                             .fork(1000 + static_cast<std::uint64_t>(j))
                             .fork(static_cast<std::uint64_t>(p));
        if (likelihood_mode == "elbo") {
          Tensor<int> rows, targets;
          Tensor<float> coeff;
          detail::build_elbo_rows(tg.targets, tg.plen, wd1_coefficients(gs.weights, positive_only),
                                  elbo_draws, t_floor, elbo_weighted, length_normalize, mrng, &rows,
                                  &targets, &coeff);
          parts.push_back(g.weighted_logp_sum(forward_logprobs(g, theta, rows), targets, coeff));
        } else {
          Tensor<int> rows = masked_prompt_rows(gs.prompt, tg.len - tg.plen, gsz, p_mask, mrng);
          parts.push_back(wd1_loss_node(g, theta, rows, tg.targets, tg.plen, gs.weights,
                                        positive_only, length_normalize));
        }
      }
      auto total = g.combine(parts, std::vector<float>(parts.size(), 1.0f / n_prompts));
      double loss_v = static_cast<double>(g.val(total)[0]);
      if (!is_finite(loss_v)) throw numeric_error("rl_train: non-finite loss");
      g.backward(total);
      GradStore<float> grads = export_grads(g, theta);
      res.nfe.likelihood += 1;  // current-policy evaluation event
      double norm = adam_step(theta, grads, opt, adam);
      ++res.gradient_steps;
      mw.append({{"step", res.gradient_steps},
                 {"reward_mean", reward_mean},
                 {"reward_max", reward_max},
                 {"loss", loss_v},
                 {"grad_norm", norm},
                 {"completion_len_mean", comp_len_mean},
                 {"nfe_sampling", res.nfe.sampling},
                 {"nfe_likelihood", res.nfe.likelihood},
                 {"seed", seed}});
    }

    // contract checks: the snapshot stayed frozen, the weights were never
    // recomputed inside the inner loop
    if (old_ps.fingerprint() != old_fp)
      throw std::logic_error("rl_train: sampling snapshot mutated during inner iterations");
    for (const auto& gs : groups)
      if (method != RlMethod::kDiffuGrpo && gs.weights.fingerprint() != gs.weights_fp)
        throw std::logic_error("rl_train: group weights changed inside the inner loop");

    auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - step_start).count();
    double toks = static_cast<double>(gsz) * n_prompts * scfg.gen_length;
    side_log << "global_step " << gstep << " tokens_per_sec " << (dt > 0 ? toks / dt : 0.0)
             << " reward_mean " << reward_mean << "\n";
    side_log.flush();
  }

  CheckpointMeta meta;
  meta.step = res.gradient_steps;
  meta.config_hash = hex64(cfg.hash());
  meta.extra = {{"method", method_name(method)},
                {"nfe_sampling", res.nfe.sampling},
                {"nfe_likelihood", res.nfe.likelihood}};
  save_checkpoint(paths.checkpoint, theta, meta);
  return res;
}

// ----- evaluation -----

struct EvalReport {
  int n = 0;
  double success_rate = 0.0;
  double mean_reward = 0.0;
  double mean_completion_len = 0.0;

  nlohmann::json to_json() const {
    return {{"n", n}, {"success_rate", success_rate}, {"mean_reward", mean_reward},
            {"mean_completion_len", mean_completion_len}};
  }
};

// Injectable generation for harness tests (an oracle policy, a canned
// completion); the default path greedily decodes the trained policy alone.
using GeneratorHook =
    std::function<std::vector<int>(const TaskInstance&, const std::vector<int>& prompt)>;

inline EvalReport evaluate(const Config& cfg, const ParamStore<float>& ps,
                           const std::vector<TaskInstance>& insts, GeneratorHook hook = nullptr) {
  SampleConfig scfg = cfg.sample_config();
  scfg.temperature = 0.0;  // greedy
  scfg.beta = 0.0;         // score the policy itself, no mixture at eval
  scfg.lambda = 1.0;
  const Vocab& voc = task_vocab();
  EvalReport rep;
  RngStream dummy(cfg.u64("seed"));
  for (const TaskInstance& inst : insts) {
    std::vector<int> prompt = voc.encode(inst.prompt);
    std::vector<int> comp;
    if (hook) {
      comp = hook(inst, prompt);
    } else {
      comp = generate(ps, static_cast<const ParamStore<float>*>(nullptr), prompt, scfg,
                      dummy.fork(static_cast<std::uint64_t>(rep.n)));
    }
    std::string text = voc.decode_until_stop(comp);
    RewardBreakdown rb = task_reward(inst, text);
    rep.mean_reward += rb.total();
    rep.success_rate += task_success(inst, rb) ? 1.0 : 0.0;
    rep.mean_completion_len += completion_token_len(comp);
    ++rep.n;
  }
  if (rep.n > 0) {
    rep.mean_reward /= rep.n;
    rep.success_rate /= rep.n;
    rep.mean_completion_len /= rep.n;
  }
  return rep;
}

// ----- plot data export -----

// CSV columns (step, reward_mean, reward_std_window50, completion_len_mean)
// with a trailing-window standard deviation; byte-stable for a given input.
inline void write_plot_csv(const std::string& metrics_path, const std::string& out_csv,
                           int window = 50) {
  std::ifstream f(metrics_path);
  if (!f) throw config_error("plot-data: cannot open metrics: " + metrics_path);
  std::ofstream out(out_csv, std::ios::trunc);
  if (!out) throw config_error("plot-data: cannot open output: " + out_csv);
  out << "step,reward_mean,reward_std_window50,completion_len_mean\n";
  std::vector<double> rewards;
  std::string line;
  char buf[192];
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw config_error("plot-data: bad JSONL in " + metrics_path);
    if (!j.contains("reward_mean")) continue;  // pretraining records carry no reward
    double r = j.at("reward_mean").get<double>();
    rewards.push_back(r);
    std::size_t W = std::min<std::size_t>(rewards.size(), static_cast<std::size_t>(window));
    double m = 0.0;
    for (std::size_t i = rewards.size() - W; i < rewards.size(); ++i) m += rewards[i];
    m /= static_cast<double>(W);
    double var = 0.0;
    for (std::size_t i = rewards.size() - W; i < rewards.size(); ++i)
      var += (rewards[i] - m) * (rewards[i] - m);
    var /= static_cast<double>(W);
    std::snprintf(buf, sizeof buf, "%lld,%.10g,%.10g,%.10g\n", j.at("step").get<long long>(), r,
                  std::sqrt(var), j.at("completion_len_mean").get<double>());
    out << buf;
  }
}

}  // namespace dlmwpo
