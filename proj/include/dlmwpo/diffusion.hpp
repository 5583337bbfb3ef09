#pragma once

// Forward masking process and likelihood machinery.
//
// The forward process masks each completion token independently with
// probability t; prompts are never masked by it. The evidence bound draws
// t ~ U[t_floor, 1] and scores masked positions with weight 1/t. t_floor
// avoids the 1/t blowup and is part of the estimator's definition here: the
// exact oracle integrates over the same truncated range, so estimator and
// oracle agree to quadrature precision.

#include <vector>

#include "model.hpp"
#include "rng.hpp"
#include "vocab.hpp"

namespace dlmwpo {

constexpr double kTFloorDefault = 1e-3;

struct PromptCompletion {
  std::vector<int> prompt;
  std::vector<int> completion;

  std::vector<int> full() const {
    std::vector<int> out = prompt;
    out.insert(out.end(), completion.begin(), completion.end());
    return out;
  }
};

// ----- forward process -----

// Masks completion positions of x0 = [prompt || completion] independently
// with probability t. Draw order is one uniform per completion position,
// ascending, so trajectories replay exactly from the stream state.
inline std::vector<int> forward_mask(const PromptCompletion& pc, double t, RngStream& rng) {
  if (t < 0.0 || t > 1.0) throw std::invalid_argument("forward_mask: t outside [0,1]");
  std::vector<int> x = pc.full();
  for (std::size_t k = pc.prompt.size(); k < x.size(); ++k)
    if (rng.uniform() < t) x[k] = Vocab::kMask;
  return x;
}

namespace detail {

// Shared draw for the bound estimator and the per-token variant: one t, then
// one uniform per completion position. Returns the masked row.
inline std::vector<int> draw_elbo_sample(const PromptCompletion& pc, double t_floor, RngStream& rng,
                                         double* t_out) {
  double t = rng.uniform_range(t_floor, 1.0);
  *t_out = t;
  std::vector<int> x = pc.full();
  for (std::size_t k = pc.prompt.size(); k < x.size(); ++k)
    if (rng.uniform() < t) x[k] = Vocab::kMask;
  return x;
}

}  // namespace detail

// ----- Monte Carlo bound -----

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
  long n = 0;
};

// Monte Carlo estimate of the bound: mean over samples of
// (1/t) * sum over masked completion positions of log pi(x0_k | x_t).
// Every sample value is <= 0 by the sign convention of the maximand.
template <typename T>
MeanStderr elbo_estimate(const ParamStore<T>& ps, const PromptCompletion& pc, long n_samples,
                         double t_floor, RngStream& rng) {
  if (n_samples < 1) throw std::invalid_argument("elbo_estimate: need at least one sample");
  int len = static_cast<int>(pc.prompt.size() + pc.completion.size());
  int q0 = static_cast<int>(pc.prompt.size());
  const long chunk = 256;
  double sum = 0.0, sumsq = 0.0;
  std::vector<double> ts;
  std::vector<int> rows;
  for (long done = 0; done < n_samples;) {
    long b = std::min(chunk, n_samples - done);
    ts.clear();
    rows.clear();
    for (long s = 0; s < b; ++s) {
      double t;
      std::vector<int> x = detail::draw_elbo_sample(pc, t_floor, rng, &t);
      ts.push_back(t);
      rows.insert(rows.end(), x.begin(), x.end());
    }
    Tensor<int> tokens({static_cast<int>(b), len});
    tokens.data = rows;
    Tensor<T> lp = eval_logprobs(ps, tokens);
    for (long s = 0; s < b; ++s) {
      double acc = 0.0;
      for (int k = q0; k < len; ++k)
        if (tokens.at(static_cast<int>(s), k) == Vocab::kMask)
          acc += static_cast<double>(lp.at(static_cast<int>(s), k, pc.completion[static_cast<std::size_t>(k - q0)]));
      double v = acc / ts[static_cast<std::size_t>(s)];
      sum += v;
      sumsq += v * v;
    }
    done += b;
  }
  MeanStderr out;
  out.n = n_samples;
  out.mean = sum / static_cast<double>(n_samples);
  double var = sumsq / static_cast<double>(n_samples) - out.mean * out.mean;
  if (var < 0.0) var = 0.0;
  out.stderr_ = std::sqrt(var / static_cast<double>(n_samples));
  return out;
}

// Differentiable version for training: scalar node of the negative bound,
// averaged over the batch. One (t, mask) draw per sequence per call.
template <typename T>
typename Graph<T>::NodeRef elbo_loss_graph(Graph<T>& g, const ParamStore<T>& ps,
                                           const std::vector<PromptCompletion>& batch,
                                           double t_floor, RngStream& rng) {
  if (batch.empty()) throw std::invalid_argument("elbo_loss: empty batch");
  int len = static_cast<int>(batch[0].prompt.size() + batch[0].completion.size());
  int bsz = static_cast<int>(batch.size());
  Tensor<int> tokens({bsz, len});
  Tensor<int> targets({bsz, len});
  Tensor<T> coeff({bsz, len});
  for (int bi = 0; bi < bsz; ++bi) {
    const PromptCompletion& pc = batch[static_cast<std::size_t>(bi)];
    if (static_cast<int>(pc.prompt.size() + pc.completion.size()) != len)
      throw std::invalid_argument("elbo_loss: batch rows must share one length");
    double t;
    std::vector<int> x = detail::draw_elbo_sample(pc, t_floor, rng, &t);
    int q0 = static_cast<int>(pc.prompt.size());
    for (int k = 0; k < len; ++k) {
      tokens.at(bi, k) = x[static_cast<std::size_t>(k)];
      targets.at(bi, k) = k < q0 ? 0 : pc.completion[static_cast<std::size_t>(k - q0)];
      coeff.at(bi, k) =
          (k >= q0 && x[static_cast<std::size_t>(k)] == Vocab::kMask) ? static_cast<T>(1.0 / t) : T(0);
    }
  }
  auto lp = forward_logprobs(g, ps, tokens);
  auto s = g.weighted_logp_sum(lp, targets, coeff);
  return g.combine({s}, {static_cast<T>(-1.0 / bsz)});
}

// ----- exact oracle -----

namespace detail {

struct GaussLegendre {
  std::vector<double> x, w;  // nodes and weights on [-1, 1]
};

// Newton iteration on Legendre P_n; standard construction, double precision.
inline const GaussLegendre& gl64() {
  static const GaussLegendre table = [] {
    const int n = 64;
    GaussLegendre t;
    t.x.resize(n);
    t.w.resize(n);
    for (int i = 0; i < n / 2; ++i) {
      double x = std::cos(3.14159265358979323846 * (i + 0.75) / (n + 0.5));
      double pp = 0.0;
      for (int it = 0; it < 100; ++it) {
        double p0 = 1.0, p1 = x;
        for (int k = 2; k <= n; ++k) {
          double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
          p0 = p1;
          p1 = p2;
        }
        pp = n * (x * p1 - p0) / (x * x - 1.0);
        double dx = p1 / pp;
        x -= dx;
        if (std::abs(dx) < 1e-15) break;
      }
      t.x[static_cast<std::size_t>(i)] = -x;
      t.x[static_cast<std::size_t>(n - 1 - i)] = x;
      double w = 2.0 / ((1.0 - x * x) * pp * pp);
      t.w[static_cast<std::size_t>(i)] = w;
      t.w[static_cast<std::size_t>(n - 1 - i)] = w;
    }
    return t;
  }();
  return table;
}

// Per-pattern log-prob sums for all 2^L mask patterns of the completion.
// out[pattern][k] = log pi(x0_k | x_pattern) for masked k, 0 elsewhere.
template <typename T>
std::vector<std::vector<double>> pattern_logprobs(const ParamStore<T>& ps,
                                                  const PromptCompletion& pc) {
  int lc = static_cast<int>(pc.completion.size());
  int q0 = static_cast<int>(pc.prompt.size());
  int len = q0 + lc;
  int n_pat = 1 << lc;
  Tensor<int> tokens({n_pat, len});
  for (int p = 0; p < n_pat; ++p) {
    std::vector<int> x = pc.full();
    for (int k = 0; k < lc; ++k)
      if (p & (1 << k)) x[static_cast<std::size_t>(q0 + k)] = Vocab::kMask;
    for (int k = 0; k < len; ++k) tokens.at(p, k) = x[static_cast<std::size_t>(k)];
  }
  Tensor<T> lp = eval_logprobs(ps, tokens);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(n_pat),
                                       std::vector<double>(static_cast<std::size_t>(lc), 0.0));
  for (int p = 0; p < n_pat; ++p)
    for (int k = 0; k < lc; ++k)
      if (p & (1 << k))
        out[static_cast<std::size_t>(p)][static_cast<std::size_t>(k)] =
            static_cast<double>(lp.at(p, q0 + k, pc.completion[static_cast<std::size_t>(k)]));
  return out;
}

}  // namespace detail

// Exact expectation of the Monte Carlo bound by enumerating all mask patterns
// and integrating the truncated-uniform t with 64-point Gauss-Legendre.
// Completion lengths above 4 are refused: 2^L enumeration is the point here.
template <typename T>
double exact_elbo_oracle(const ParamStore<T>& ps, const PromptCompletion& pc, double t_floor) {
  int lc = static_cast<int>(pc.completion.size());
  if (lc < 1 || lc > 4)
    throw capability_error("exact_elbo_oracle: completion length must be in [1,4], got " +
                           std::to_string(lc));
  auto lp = detail::pattern_logprobs(ps, pc);
  const auto& gl = detail::gl64();
  double a = t_floor, b = 1.0;
  double total = 0.0;
  for (std::size_t i = 0; i < gl.x.size(); ++i) {
    double t = 0.5 * (b - a) * gl.x[i] + 0.5 * (a + b);
    double f = 0.0;
    for (int p = 1; p < (1 << lc); ++p) {
      int m = __builtin_popcount(static_cast<unsigned>(p));
      double s = 0.0;
      for (int k = 0; k < lc; ++k)
        if (p & (1 << k)) s += lp[static_cast<std::size_t>(p)][static_cast<std::size_t>(k)];
      f += std::pow(t, m - 1) * std::pow(1.0 - t, lc - m) * s;
    }
    total += gl.w[i] * f;
  }
  total *= 0.5 * (b - a);   // map from [-1,1]
  total /= (b - a);         // density of t ~ U[t_floor, 1]
  return total;
}

// Exact per-token expectations of token_loglik_elbo, same enumeration.
// weighted selects the 1/t-weighted estimator (the default one).
template <typename T>
std::vector<double> exact_token_elbo_oracle(const ParamStore<T>& ps, const PromptCompletion& pc,
                                            double t_floor, bool weighted) {
  int lc = static_cast<int>(pc.completion.size());
  if (lc < 1 || lc > 4)
    throw capability_error("exact_token_elbo_oracle: completion length must be in [1,4]");
  auto lp = detail::pattern_logprobs(ps, pc);
  const auto& gl = detail::gl64();
  double a = t_floor, b = 1.0;
  std::vector<double> out(static_cast<std::size_t>(lc), 0.0);
  for (std::size_t i = 0; i < gl.x.size(); ++i) {
    double t = 0.5 * (b - a) * gl.x[i] + 0.5 * (a + b);
    for (int k = 0; k < lc; ++k) {
      double f = 0.0;
      for (int p = 1; p < (1 << lc); ++p) {
        if (!(p & (1 << k))) continue;
        int m = __builtin_popcount(static_cast<unsigned>(p));
        double weight = weighted ? std::pow(t, m - 1) : std::pow(t, m);
        f += weight * std::pow(1.0 - t, lc - m) * lp[static_cast<std::size_t>(p)][static_cast<std::size_t>(k)];
      }
      out[static_cast<std::size_t>(k)] += gl.w[i] * f * 0.5 * (b - a);
    }
  }
  for (double& v : out) v /= (b - a);
  return out;
}

// ----- per-token likelihood approximations -----

// Builds the one-pass likelihood input rows: each row is the prompt with
// tokens independently masked at rate p_mask_prompt, followed by an all-mask
// completion slot. One rng draw per prompt position per row, ascending.
inline Tensor<int> masked_prompt_rows(const std::vector<int>& prompt, int gen_len, int rows,
                                      double p_mask_prompt, RngStream& rng) {
  int q0 = static_cast<int>(prompt.size());
  Tensor<int> tokens({rows, q0 + gen_len});
  for (int r = 0; r < rows; ++r) {
    for (int k = 0; k < q0; ++k) {
      bool m = rng.uniform() < p_mask_prompt;
      tokens.at(r, k) = m ? Vocab::kMask : prompt[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < gen_len; ++k) tokens.at(r, q0 + k) = Vocab::kMask;
  }
  return tokens;
}

// One-pass per-token log-likelihoods: log pi(o_k | q') at every completion
// position from a single forward over [q' || all-mask]. Entries are always
// <= 0 (log-softmax of a row that contains its own maximum).
template <typename T>
std::vector<double> token_loglik_masked_prompt(const ParamStore<T>& ps, const PromptCompletion& pc,
                                               double p_mask_prompt, RngStream& rng) {
  if (p_mask_prompt < 0.0 || p_mask_prompt >= 1.0)
    throw std::invalid_argument("token_loglik: p_mask_prompt outside [0,1)");
  int lc = static_cast<int>(pc.completion.size());
  int q0 = static_cast<int>(pc.prompt.size());
  Tensor<int> tokens = masked_prompt_rows(pc.prompt, lc, 1, p_mask_prompt, rng);
  Tensor<T> lp = eval_logprobs(ps, tokens);
  std::vector<double> out(static_cast<std::size_t>(lc));
  for (int k = 0; k < lc; ++k)
    out[static_cast<std::size_t>(k)] =
        static_cast<double>(lp.at(0, q0 + k, pc.completion[static_cast<std::size_t>(k)]));
  return out;
}

// Multi-pass per-token bound variant: for each draw, a token's log-prob
// contributes only when that token is masked; the sum is normalized by the
// total draw count. weighted applies the 1/t factor (default behavior).
template <typename T>
std::vector<double> token_loglik_elbo(const ParamStore<T>& ps, const PromptCompletion& pc,
                                      long n_draws, double t_floor, bool weighted, RngStream& rng) {
  if (n_draws < 1) throw std::invalid_argument("token_loglik_elbo: need at least one draw");
  int lc = static_cast<int>(pc.completion.size());
  int q0 = static_cast<int>(pc.prompt.size());
  int len = q0 + lc;
  const long chunk = 256;
  std::vector<double> acc(static_cast<std::size_t>(lc), 0.0);
  std::vector<double> ts;
  std::vector<int> rows;
  for (long done = 0; done < n_draws;) {
    long b = std::min(chunk, n_draws - done);
    ts.clear();
    rows.clear();
    for (long s = 0; s < b; ++s) {
      double t;
      std::vector<int> x = detail::draw_elbo_sample(pc, t_floor, rng, &t);
      ts.push_back(t);
      rows.insert(rows.end(), x.begin(), x.end());
    }
    Tensor<int> tokens({static_cast<int>(b), len});
    tokens.data = rows;
    Tensor<T> lp = eval_logprobs(ps, tokens);
    for (long s = 0; s < b; ++s)
      for (int k = 0; k < lc; ++k)
        if (tokens.at(static_cast<int>(s), q0 + k) == Vocab::kMask) {
          double v = static_cast<double>(lp.at(static_cast<int>(s), q0 + k,
                                               pc.completion[static_cast<std::size_t>(k)]));
          acc[static_cast<std::size_t>(k)] += weighted ? v / ts[static_cast<std::size_t>(s)] : v;
        }
    done += b;
  }
  for (double& v : acc) v /= static_cast<double>(n_draws);
  return acc;
}

// Mean-field sequence log-likelihood: sum of per-token values, or their mean
// when normalize is set.
inline double seq_loglik_meanfield(const std::vector<double>& per_token, bool normalize) {
  if (per_token.empty()) throw std::invalid_argument("seq_loglik: empty per-token vector");
  double s = 0.0;
  for (double v : per_token) s += v;
  return normalize ? s / static_cast<double>(per_token.size()) : s;
}

}  // namespace dlmwpo
