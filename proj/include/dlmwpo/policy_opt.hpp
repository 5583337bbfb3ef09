#pragma once

// Group-relative advantages, weighted log-likelihood loss, and the clipped
// ratio baseline loss. Weights are plain numbers computed from rewards and
// never differentiated through.

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "common.hpp"
#include "graph.hpp"
#include "model.hpp"

namespace dlmwpo {

// Mean-subtracted rewards, no standard-deviation division.
inline std::vector<double> group_advantage(const std::vector<double>& rewards) {
  if (rewards.size() < 2) throw config_error("group_advantage: need a group of at least 2");
  double mean = 0.0;
  for (double r : rewards) {
    if (!is_finite(r)) throw std::invalid_argument("group_advantage: non-finite reward");
    mean += r;
  }
  mean /= static_cast<double>(rewards.size());
  std::vector<double> adv(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = rewards[i] - mean;
  return adv;
}

struct Wd1Weights {
  std::vector<double> pos;  // softmax(psi * A)
  std::vector<double> neg;  // softmax(-psi * A)
  double psi = 1.0;

  // Bit-stable digest; the trainer checks it after the inner loop to catch
  // accidental recomputation.
  std::uint64_t fingerprint() const {
    std::uint64_t h = fnv1a(pos.data(), pos.size() * sizeof(double));
    h = fnv1a(neg.data(), neg.size() * sizeof(double), h);
    return fnv1a(&psi, sizeof(double), h);
  }
};

namespace detail {

// Max-subtracted softmax in double. Exact negation of z keeps
// softmax_stable(-z) bitwise equal to the mirrored weight array.
inline std::vector<double> softmax_stable(const std::vector<double>& z) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  std::vector<double> out(z.size());
  double den = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp(z[i] - m);
    den += out[i];
  }
  for (double& v : out) v /= den;
  return out;
}

}  // namespace detail

inline Wd1Weights wd1_weights(const std::vector<double>& advantages, double psi) {
  if (advantages.size() < 2) throw config_error("wd1_weights: need a group of at least 2");
  if (!(psi > 0.0)) throw std::invalid_argument("wd1_weights: psi must be positive");
  std::vector<double> z(advantages.size()), zn(advantages.size());
  for (std::size_t i = 0; i < advantages.size(); ++i) {
    if (!is_finite(advantages[i])) throw std::invalid_argument("wd1_weights: non-finite advantage");
    z[i] = psi * advantages[i];
    zn[i] = -z[i];
  }
  Wd1Weights w;
  w.psi = psi;
  w.pos = detail::softmax_stable(z);
  w.neg = detail::softmax_stable(zn);
  return w;
}

// Per-sequence loss coefficients: -w+ + w- (only -w+ when the downweighting
// half is dropped). All-equal advantages give exact zeros.
inline std::vector<double> wd1_coefficients(const Wd1Weights& w, bool positive_only = false) {
  std::vector<double> c(w.pos.size());
  for (std::size_t i = 0; i < c.size(); ++i)
    c[i] = positive_only ? -w.pos[i] : -w.pos[i] + w.neg[i];
  return c;
}

// Advantage correction for sampling from pi_old instead of the mixture:
// A_i + beta * log pi_ref(o_i|q) / (lambda + beta). Off by default.
inline std::vector<double> shift_advantages(const std::vector<double>& advantages,
                                            const std::vector<double>& logp_ref_seq, double lambda,
                                            double beta) {
  if (advantages.size() != logp_ref_seq.size())
    throw std::invalid_argument("shift_advantages: size mismatch");
  if (!(lambda + beta > 0.0)) throw config_error("shift_advantages: lambda + beta must be positive");
  std::vector<double> out(advantages.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = advantages[i] + beta * logp_ref_seq[i] / (lambda + beta);
  return out;
}

// Self-normalized importance-weighted NLL over one group. Equals the
// positive-weight half of the wd1 loss.
inline double nll_is_estimate(const std::vector<double>& advantages, double psi,
                              const std::vector<double>& seq_logliks) {
  if (advantages.size() != seq_logliks.size())
    throw std::invalid_argument("nll_is_estimate: size mismatch");
  Wd1Weights w = wd1_weights(advantages, psi);
  double acc = 0.0;
  for (std::size_t i = 0; i < advantages.size(); ++i) acc -= w.pos[i] * seq_logliks[i];
  return acc;
}

// Weighted log-likelihood loss for one prompt group. rows holds the model
// inputs (masked prompt, fully masked completion region), targets the clean
// tokens; every position from prompt_len on is scored. No 1/G factor here,
// averaging across prompts is the caller's job.
template <typename T>
typename Graph<T>::NodeRef wd1_loss_node(Graph<T>& g, ParamStore<T>& ps, const Tensor<int>& rows,
                                         const Tensor<int>& targets, int prompt_len,
                                         const Wd1Weights& w, bool positive_only = false,
                                         bool length_normalize = false) {
  if (rows.rank() != 2 || !rows.same_shape(targets))
    throw std::invalid_argument("wd1_loss: rows and targets must be matching [G, L]");
  int gsz = rows.dim(0), len = rows.dim(1);
  if (static_cast<std::size_t>(gsz) != w.pos.size() || w.pos.size() != w.neg.size())
    throw std::invalid_argument("wd1_loss: weight count does not match group size");
  if (prompt_len <= 0 || prompt_len >= len)
    throw std::invalid_argument("wd1_loss: prompt_len out of range");
  std::vector<double> c = wd1_coefficients(w, positive_only);
  int n = len - prompt_len;
  Tensor<T> coeff({gsz, len}, T(0));
  for (int i = 0; i < gsz; ++i) {
    double ci = length_normalize ? c[static_cast<std::size_t>(i)] / n : c[static_cast<std::size_t>(i)];
    for (int k = prompt_len; k < len; ++k) coeff.at(i, k) = static_cast<T>(ci);
  }
  typename Graph<T>::NodeRef logp = forward_logprobs(g, ps, rows);
  return g.weighted_logp_sum(logp, targets, coeff);
}

// Clipped ratio baseline loss for one prompt group, negated objective.
// logp_old / logp_ref are detached [G, L] per-token log-likelihood tables;
// entries before prompt_len are ignored (replaced internally so stray values
// cannot poison the forward pass).
template <typename T>
typename Graph<T>::NodeRef diffu_grpo_loss_node(Graph<T>& g, ParamStore<T>& ps,
                                                const Tensor<int>& rows, const Tensor<int>& targets,
                                                int prompt_len, const Tensor<T>& logp_old,
                                                const Tensor<T>* logp_ref,
                                                const std::vector<double>& advantages, double eps,
                                                double beta_kl) {
  if (rows.rank() != 2 || !rows.same_shape(targets))
    throw std::invalid_argument("diffu_grpo_loss: rows and targets must be matching [G, L]");
  int gsz = rows.dim(0), len = rows.dim(1);
  if (gsz < 2) throw config_error("diffu_grpo_loss: need a group of at least 2");
  if (prompt_len <= 0 || prompt_len >= len)
    throw std::invalid_argument("diffu_grpo_loss: prompt_len out of range");
  if (logp_old.shape != rows.shape) throw std::invalid_argument("diffu_grpo_loss: logp_old shape mismatch");
  if (advantages.size() != static_cast<std::size_t>(gsz))
    throw std::invalid_argument("diffu_grpo_loss: advantage count mismatch");
  if (!(eps > 0.0)) throw std::invalid_argument("diffu_grpo_loss: eps must be positive");
  if (beta_kl < 0.0) throw std::invalid_argument("diffu_grpo_loss: beta_kl must be nonnegative");
  if (beta_kl > 0.0 && logp_ref == nullptr)
    throw config_error("diffu_grpo_loss: beta_kl > 0 requires reference log-likelihoods");

  typename Graph<T>::NodeRef lnew = g.gather_logp(forward_logprobs(g, ps, rows), targets);
  const Tensor<T>& lnew_v = g.val(lnew);

  Tensor<T> adv({gsz});
  for (int i = 0; i < gsz; ++i) adv[static_cast<std::size_t>(i)] = static_cast<T>(advantages[static_cast<std::size_t>(i)]);
  int n = len - prompt_len;
  Tensor<T> wt({gsz, len}, T(0));
  T per_tok = static_cast<T>(1.0 / (static_cast<double>(gsz) * n));
  for (int i = 0; i < gsz; ++i)
    for (int k = prompt_len; k < len; ++k) wt.at(i, k) = per_tok;

  Tensor<T> old_use = logp_old;
  for (int i = 0; i < gsz; ++i)
    for (int k = 0; k < prompt_len; ++k) old_use.at(i, k) = lnew_v.at(i, k);

  auto clip = g.clipped_ratio(lnew, old_use, adv, static_cast<T>(eps));
  auto obj = g.weighted_sum(clip, wt);
  if (beta_kl == 0.0) return g.combine({obj}, {T(-1)});

  if (logp_ref->shape != rows.shape) throw std::invalid_argument("diffu_grpo_loss: logp_ref shape mismatch");
  Tensor<T> ref_use = *logp_ref;
  for (int i = 0; i < gsz; ++i)
    for (int k = 0; k < prompt_len; ++k) ref_use.at(i, k) = lnew_v.at(i, k);
  auto kl = g.weighted_sum(g.kl3(lnew, ref_use), wt);
  return g.combine({obj, kl}, {T(-1), static_cast<T>(beta_kl)});
}

}  // namespace dlmwpo
