#pragma once

// Semi-autoregressive block decoding.
//
// Blocks are decoded left to right; inside a block, each step predicts every
// still-masked position, commits the highest-confidence predictions, and
// leaves the rest masked. Confidence is the probability of the chosen token
// under the untempered distribution; temperature only perturbs the draw.
// Committed tokens are never revisited.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "diffusion.hpp"
#include "model.hpp"

namespace dlmwpo {

enum class Remasking { kLowConfidence, kRandom };

struct SampleConfig {
  int gen_length = 32;
  int diffusion_steps = 16;
  int block_length = 16;
  double temperature = 1.0;
  Remasking remasking = Remasking::kLowConfidence;
  double lambda = 1.0;
  double beta = 0.0;
  bool mixture_unnormalized = false;  // keep raw geometric-mixture values

  void validate() const {
    if (gen_length <= 0 || diffusion_steps <= 0 || block_length <= 0)
      throw config_error("sampler: lengths and steps must be positive");
    if (gen_length % block_length != 0)
      throw config_error("sampler: block_length must divide gen_length");
    if (diffusion_steps < gen_length / block_length)
      throw config_error("sampler: diffusion_steps below the block count");
    if (temperature < 0.0) throw config_error("sampler: negative temperature");
    if (lambda < 0.0 || beta < 0.0 || lambda + beta <= 0.0)
      throw config_error("sampler: lambda/beta must be nonnegative with positive sum");
  }
};

// Per-step commit counts, flattened across blocks. Steps are split across
// blocks remainder-first, then each block's tokens are split across its steps
// remainder-first: (32, 5, 32) -> [7,7,6,6,6].
inline std::vector<int> unmasking_schedule(int gen_length, int diffusion_steps, int block_length) {
  SampleConfig probe;
  probe.gen_length = gen_length;
  probe.diffusion_steps = diffusion_steps;
  probe.block_length = block_length;
  probe.validate();
  int blocks = gen_length / block_length;
  int base = diffusion_steps / blocks, rem = diffusion_steps % blocks;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(diffusion_steps));
  for (int b = 0; b < blocks; ++b) {
    int steps = base + (b < rem ? 1 : 0);
    int tbase = block_length / steps, trem = block_length % steps;
    for (int s = 0; s < steps; ++s) out.push_back(tbase + (s < trem ? 1 : 0));
  }
  return out;
}

// Combined per-position log-probs of the geometric mixture,
// (lambda * logprobs_old + beta * logprobs_ref) / (lambda + beta), computed
// from log-softmaxed inputs. The default renormalizes the combination (the
// sampling distribution is identical either way; the values differ).
// beta == 0 short-circuits to the old policy's log-probs exactly.
template <typename T>
void mixture_logprob_row(const T* logits_old, const T* logits_ref, int v, double lambda,
                         double beta, bool unnormalized, T* out) {
  log_softmax_row(logits_old, out, v);
  if (beta == 0.0 || logits_ref == nullptr) {
    if (beta > 0.0) throw config_error("mixture: beta > 0 requires reference logits");
    return;
  }
  std::vector<T> lr(static_cast<std::size_t>(v));
  log_softmax_row(logits_ref, lr.data(), v);
  T wl = static_cast<T>(lambda / (lambda + beta));
  T wr = static_cast<T>(beta / (lambda + beta));
  for (int i = 0; i < v; ++i) out[i] = wl * out[i] + wr * lr[static_cast<std::size_t>(i)];
  if (!unnormalized) log_softmax_row(out, out, v);
}

struct GroupSample {
  std::vector<std::vector<int>> completions;  // G rows of exactly gen_length tokens
  long nfe_per_completion = 0;                // model evaluations per completion
};

// Inverse-CDF draw from softmax(lp / temperature); u is the caller's uniform.
template <typename T>
int sample_tempered(const T* lp, int v, double temperature, double u) {
  double m = static_cast<double>(lp[0]) / temperature;
  for (int j = 1; j < v; ++j) m = std::max(m, static_cast<double>(lp[j]) / temperature);
  double z = 0.0;
  for (int j = 0; j < v; ++j) z += std::exp(static_cast<double>(lp[j]) / temperature - m);
  double acc = 0.0;
  for (int j = 0; j < v; ++j) {
    acc += std::exp(static_cast<double>(lp[j]) / temperature - m) / z;
    if (u < acc) return j;
  }
  return v - 1;  // guard against accumulated rounding
}

// Draws G completions for one prompt in lock step (one batched forward per
// denoising step). Stream i = base.fork(i) drives completion i, so results are
// independent of batching and replay exactly. With beta > 0 both policies are
// evaluated each step and params_ref must be present.
template <typename T>
GroupSample generate_group(const ParamStore<T>& ps_old, const ParamStore<T>* ps_ref,
                           const std::vector<int>& prompt, int g, const SampleConfig& cfg,
                           const RngStream& base) {
  cfg.validate();
  if (g < 1) throw config_error("sampler: group size must be positive");
  if (cfg.beta > 0.0 && ps_ref == nullptr)
    throw config_error("sampler: beta > 0 requires a reference policy");
  int q0 = static_cast<int>(prompt.size());
  int len = q0 + cfg.gen_length;
  int v = ps_old.cfg.vocab;

  Tensor<int> x({g, len});
  for (int i = 0; i < g; ++i) {
    for (int k = 0; k < q0; ++k) x.at(i, k) = prompt[static_cast<std::size_t>(k)];
    for (int k = q0; k < len; ++k) x.at(i, k) = Vocab::kMask;
  }
  std::vector<RngStream> streams;
  streams.reserve(static_cast<std::size_t>(g));
  for (int i = 0; i < g; ++i) streams.push_back(base.fork(static_cast<std::uint64_t>(i)));

  std::vector<int> schedule = unmasking_schedule(cfg.gen_length, cfg.diffusion_steps, cfg.block_length);
  int blocks = cfg.gen_length / cfg.block_length;
  int sbase = cfg.diffusion_steps / blocks, srem = cfg.diffusion_steps % blocks;

  bool use_ref = cfg.beta > 0.0;
  long nfe = 0;
  std::vector<T> lp(static_cast<std::size_t>(v));
  struct Cand {
    double conf;
    int pos, tok;
  };
  std::vector<Cand> cands;

  int step_idx = 0;
  for (int b = 0; b < blocks; ++b) {
    int block_lo = q0 + b * cfg.block_length;
    int block_hi = block_lo + cfg.block_length;
    int steps = sbase + (b < srem ? 1 : 0);
    for (int s = 0; s < steps; ++s, ++step_idx) {
      int commit = schedule[static_cast<std::size_t>(step_idx)];
      Graph<T> g_old;
      const Tensor<T>& logits_old = g_old.val(forward_logits(g_old, ps_old, x));
      const Tensor<T>* logits_ref = nullptr;
      Graph<T> g_ref;
      if (use_ref) logits_ref = &g_ref.val(forward_logits(g_ref, *ps_ref, x));
      nfe += use_ref ? 2 : 1;

      for (int i = 0; i < g; ++i) {
        cands.clear();
        for (int k = block_lo; k < block_hi; ++k) {
          if (x.at(i, k) != Vocab::kMask) continue;
          mixture_logprob_row(&logits_old.at(i, k, 0),
                              logits_ref ? &logits_ref->at(i, k, 0) : nullptr, v, cfg.lambda,
                              cfg.beta, cfg.mixture_unnormalized, lp.data());
          // the absorbing token is never a legal output; decode-time only,
          // likelihood scoring stays on the full softmax
          double pmask = std::exp(static_cast<double>(lp[Vocab::kMask]));
          lp[Vocab::kMask] = -std::numeric_limits<T>::infinity();
          int tok;
          if (cfg.temperature == 0.0) {
            tok = 0;
            for (int j = 1; j < v; ++j)
              if (lp[static_cast<std::size_t>(j)] > lp[static_cast<std::size_t>(tok)]) tok = j;
          } else {
            double u = streams[static_cast<std::size_t>(i)].uniform();
            tok = sample_tempered(lp.data(), v, cfg.temperature, u);
          }
          double conf;
          if (cfg.remasking == Remasking::kRandom) {
            conf = streams[static_cast<std::size_t>(i)].uniform();
          } else {
            // probability under the normalized untempered mixture, with the
            // absorbing token's mass renormalized away
            double lse = pmask < 1.0 ? std::log1p(-pmask) : 0.0;
            if (cfg.mixture_unnormalized) {
              double m = static_cast<double>(lp[0]);
              for (int j = 1; j < v; ++j) m = std::max(m, static_cast<double>(lp[static_cast<std::size_t>(j)]));
              double sum = 0.0;
              for (int j = 0; j < v; ++j) sum += std::exp(static_cast<double>(lp[static_cast<std::size_t>(j)]) - m);
              lse = m + std::log(sum);
            }
            conf = std::exp(static_cast<double>(lp[static_cast<std::size_t>(tok)]) - lse);
          }
          cands.push_back({conf, k, tok});
        }
        // keep the `commit` most confident; ties prefer the lowest position
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
          if (a.conf != b.conf) return a.conf > b.conf;
          return a.pos < b.pos;
        });
        int take = std::min<int>(commit, static_cast<int>(cands.size()));
        for (int c = 0; c < take; ++c) x.at(i, cands[static_cast<std::size_t>(c)].pos) =
            cands[static_cast<std::size_t>(c)].tok;
      }
    }
  }

  GroupSample out;
  out.nfe_per_completion = nfe;
  out.completions.resize(static_cast<std::size_t>(g));
  for (int i = 0; i < g; ++i) {
    auto& c = out.completions[static_cast<std::size_t>(i)];
    c.resize(static_cast<std::size_t>(cfg.gen_length));
    for (int k = 0; k < cfg.gen_length; ++k) {
      c[static_cast<std::size_t>(k)] = x.at(i, q0 + k);
      if (c[static_cast<std::size_t>(k)] == Vocab::kMask)
        throw numeric_error("sampler: mask survived decoding, schedule broken");
    }
  }
  return out;
}

template <typename T>
std::vector<int> generate(const ParamStore<T>& ps_old, const ParamStore<T>* ps_ref,
                          const std::vector<int>& prompt, const SampleConfig& cfg,
                          const RngStream& stream, long* nfe_out = nullptr) {
  GroupSample gs = generate_group(ps_old, ps_ref, prompt, 1, cfg, stream);
  if (nfe_out) *nfe_out = gs.nfe_per_completion;
  return gs.completions[0];
}

}  // namespace dlmwpo
