#pragma once

// Exact tabular machinery: closed-form target policies, NLL oracles, policy
// improvement bound checks, and regularized iteration traces. Everything here
// is 64-bit and deterministic.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "common.hpp"
#include "policy_opt.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace dlmwpo {

struct TabularPolicy {
  int nq = 0;
  int no = 0;
  Tensor<double> p;  // [nq, no], rows sum to 1

  TabularPolicy() = default;
  TabularPolicy(int nq_, int no_) : nq(nq_), no(no_), p({nq_, no_}, 0.0) {}

  static TabularPolicy uniform(int nq_, int no_) {
    TabularPolicy t(nq_, no_);
    t.p.fill(1.0 / no_);
    return t;
  }

  static TabularPolicy from_logits(const Tensor<double>& z) {
    if (z.rank() != 2) throw std::invalid_argument("TabularPolicy: logits must be [nq, no]");
    TabularPolicy t(z.dim(0), z.dim(1));
    for (int q = 0; q < t.nq; ++q) softmax_row(&z[static_cast<std::size_t>(q) * t.no],
                                               &t.p[static_cast<std::size_t>(q) * t.no], t.no);
    return t;
  }

  const double* row(int q) const { return &p[static_cast<std::size_t>(q) * no]; }
  double* row(int q) { return &p[static_cast<std::size_t>(q) * no]; }

  void validate(double tol = 1e-12) const {
    if (nq <= 0 || no <= 0) throw std::invalid_argument("TabularPolicy: empty table");
    for (int q = 0; q < nq; ++q) {
      double s = 0.0;
      for (int o = 0; o < no; ++o) {
        double v = row(q)[o];
        if (!is_finite(v) || v < 0.0) throw std::invalid_argument("TabularPolicy: bad probability");
        s += v;
      }
      if (std::abs(s - 1.0) > tol)
        throw std::invalid_argument("TabularPolicy: row " + std::to_string(q) + " sums to " +
                                    std::to_string(s));
    }
  }

  void renormalize() {
    for (int q = 0; q < nq; ++q) {
      double s = 0.0;
      for (int o = 0; o < no; ++o) s += row(q)[o];
      if (!(s > 0.0)) throw numeric_error("TabularPolicy: zero row mass");
      for (int o = 0; o < no; ++o) row(q)[o] /= s;
    }
  }
};

// pi_old^{lambda/(lambda+beta)} * pi_ref^{beta/(lambda+beta)}, renormalized.
// beta = 0 returns pi_old bit-exactly.
inline TabularPolicy geometric_mixture(const TabularPolicy& pi_old, const TabularPolicy& pi_ref,
                                       double lambda, double beta) {
  if (pi_old.nq != pi_ref.nq || pi_old.no != pi_ref.no)
    throw std::invalid_argument("geometric_mixture: shape mismatch");
  if (!(lambda + beta > 0.0)) throw config_error("geometric_mixture: lambda + beta must be positive");
  if (beta == 0.0) return pi_old;
  double a = lambda / (lambda + beta), b = beta / (lambda + beta);
  TabularPolicy out(pi_old.nq, pi_old.no);
  for (int q = 0; q < out.nq; ++q) {
    for (int o = 0; o < out.no; ++o)
      out.row(q)[o] = std::pow(pi_old.row(q)[o], a) * std::pow(pi_ref.row(q)[o], b);
    double s = 0.0;
    for (int o = 0; o < out.no; ++o) s += out.row(q)[o];
    if (!(s > 0.0)) throw numeric_error("geometric_mixture: zero normalizer at prompt " + std::to_string(q));
    for (int o = 0; o < out.no; ++o) out.row(q)[o] /= s;
  }
  return out;
}

// Target policy: pi_old_ref(o|q) * exp(psi * A(q,o)), normalized per prompt.
inline TabularPolicy closed_form_target(const TabularPolicy& pi_old_ref,
                                        const Tensor<double>& advantage, double psi) {
  if (advantage.rank() != 2 || advantage.dim(0) != pi_old_ref.nq || advantage.dim(1) != pi_old_ref.no)
    throw std::invalid_argument("closed_form_target: advantage table shape mismatch");
  if (!all_finite(advantage)) throw std::invalid_argument("closed_form_target: non-finite advantage");
  TabularPolicy out(pi_old_ref.nq, pi_old_ref.no);
  for (int q = 0; q < out.nq; ++q) {
    // log-space with max subtraction, zero-support entries stay zero
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> lg(static_cast<std::size_t>(out.no), -std::numeric_limits<double>::infinity());
    for (int o = 0; o < out.no; ++o) {
      double base = pi_old_ref.row(q)[o];
      if (base > 0.0) {
        lg[static_cast<std::size_t>(o)] = std::log(base) + psi * advantage.at(q, o);
        m = std::max(m, lg[static_cast<std::size_t>(o)]);
      }
    }
    if (!is_finite(m)) throw numeric_error("closed_form_target: zero normalizer at prompt " + std::to_string(q));
    double s = 0.0;
    for (int o = 0; o < out.no; ++o) {
      double v = std::isinf(lg[static_cast<std::size_t>(o)]) ? 0.0 : std::exp(lg[static_cast<std::size_t>(o)] - m);
      out.row(q)[o] = v;
      s += v;
    }
    for (int o = 0; o < out.no; ++o) out.row(q)[o] /= s;
  }
  return out;
}

// Cross-entropy of pi_theta under pi_star, averaged over prompts.
inline double exact_nll(const TabularPolicy& pi_star, const TabularPolicy& pi_theta) {
  if (pi_star.nq != pi_theta.nq || pi_star.no != pi_theta.no)
    throw std::invalid_argument("exact_nll: shape mismatch");
  double acc = 0.0;
  for (int q = 0; q < pi_star.nq; ++q)
    for (int o = 0; o < pi_star.no; ++o) {
      double ps = pi_star.row(q)[o];
      if (ps == 0.0) continue;
      double pt = pi_theta.row(q)[o];
      if (pt <= 0.0) throw std::domain_error("exact_nll: candidate has zero mass on target support");
      acc -= ps * std::log(pt);
    }
  return acc / pi_star.nq;
}

inline double kl_rows(const TabularPolicy& a, const TabularPolicy& b) {
  if (a.nq != b.nq || a.no != b.no) throw std::invalid_argument("kl_rows: shape mismatch");
  double acc = 0.0;
  for (int q = 0; q < a.nq; ++q)
    for (int o = 0; o < a.no; ++o) {
      double pa = a.row(q)[o];
      if (pa == 0.0) continue;
      double pb = b.row(q)[o];
      if (pb <= 0.0) return std::numeric_limits<double>::infinity();
      acc += pa * std::log(pa / pb);
    }
  return acc / a.nq;
}

// ----- Monte Carlo estimator convergence -----

struct Thm2Instance {
  std::vector<double> pi_old_ref;  // sampling distribution, one prompt
  std::vector<double> advantage;   // A(q, o) per outcome
  std::vector<double> pi_theta;    // candidate being scored
};

// Mean absolute error of the self-normalized estimate vs the exact value,
// one entry per group size. Errors shrink as G grows (consistency).
inline std::vector<double> thm2_convergence(const Thm2Instance& inst, double psi,
                                            const std::vector<int>& group_sizes, int trials,
                                            RngStream& rng) {
  int n = static_cast<int>(inst.pi_old_ref.size());
  if (n < 2 || inst.advantage.size() != inst.pi_old_ref.size() ||
      inst.pi_theta.size() != inst.pi_old_ref.size())
    throw std::invalid_argument("thm2_convergence: malformed instance");
  TabularPolicy old_ref(1, n), theta(1, n);
  for (int o = 0; o < n; ++o) {
    old_ref.row(0)[o] = inst.pi_old_ref[static_cast<std::size_t>(o)];
    theta.row(0)[o] = inst.pi_theta[static_cast<std::size_t>(o)];
  }
  old_ref.validate(1e-9);
  Tensor<double> adv({1, n});
  for (int o = 0; o < n; ++o) adv.at(0, o) = inst.advantage[static_cast<std::size_t>(o)];
  double exact = exact_nll(closed_form_target(old_ref, adv, psi), theta);

  // inverse-CDF sampling from pi_old_ref
  std::vector<double> cdf(static_cast<std::size_t>(n));
  double run = 0.0;
  for (int o = 0; o < n; ++o) {
    run += inst.pi_old_ref[static_cast<std::size_t>(o)];
    cdf[static_cast<std::size_t>(o)] = run;
  }
  std::vector<double> curve;
  for (int gsz : group_sizes) {
    if (gsz < 2) throw std::invalid_argument("thm2_convergence: group size must be >= 2");
    double err = 0.0;
    for (int t = 0; t < trials; ++t) {
      std::vector<double> a(static_cast<std::size_t>(gsz)), ll(static_cast<std::size_t>(gsz));
      for (int i = 0; i < gsz; ++i) {
        double u = rng.uniform() * run;
        int o = static_cast<int>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
        if (o >= n) o = n - 1;
        a[static_cast<std::size_t>(i)] = adv.at(0, o);
        ll[static_cast<std::size_t>(i)] = std::log(inst.pi_theta[static_cast<std::size_t>(o)]);
      }
      err += std::abs(nll_is_estimate(a, psi, ll) - exact);
    }
    curve.push_back(err / trials);
  }
  return curve;
}

// ----- exact MDP evaluation -----

struct TabularMDP {
  int ns = 0;
  int na = 0;
  std::vector<double> kernel;  // [s][a][s'], rows sum to 1
  std::vector<double> reward;  // [s][a][s']
  double gamma = 0.9;
  std::vector<double> mu0;     // start distribution over s

  double pr(int s, int a, int s2) const {
    return kernel[static_cast<std::size_t>((s * na + a) * ns + s2)];
  }
  double rw(int s, int a, int s2) const {
    return reward[static_cast<std::size_t>((s * na + a) * ns + s2)];
  }

  void validate() const {
    if (ns <= 0 || na <= 0 || ns * na > 64)
      throw std::invalid_argument("TabularMDP: state-action space empty or beyond enumeration bound");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("TabularMDP: gamma must be in [0,1)");
    if (kernel.size() != static_cast<std::size_t>(ns * na * ns) || reward.size() != kernel.size() ||
        mu0.size() != static_cast<std::size_t>(ns))
      throw std::invalid_argument("TabularMDP: table sizes inconsistent");
    for (int s = 0; s < ns; ++s)
      for (int a = 0; a < na; ++a) {
        double sum = 0.0;
        for (int s2 = 0; s2 < ns; ++s2) {
          double v = pr(s, a, s2);
          if (!is_finite(v) || v < 0.0) throw std::invalid_argument("TabularMDP: bad kernel entry");
          sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-12) throw std::invalid_argument("TabularMDP: kernel row does not sum to 1");
      }
    double m = 0.0;
    for (double v : mu0) {
      if (!is_finite(v) || v < 0.0) throw std::invalid_argument("TabularMDP: bad start probability");
      m += v;
    }
    if (std::abs(m - 1.0) > 1e-12) throw std::invalid_argument("TabularMDP: start distribution does not sum to 1");
  }
};

namespace detail {

// Gaussian elimination with partial pivoting; a is n*n row-major, solves in place.
inline std::vector<double> solve_linear(std::vector<double> a, std::vector<double> b, int n) {
  for (int c = 0; c < n; ++c) {
    int piv = c;
    for (int r = c + 1; r < n; ++r)
      if (std::abs(a[static_cast<std::size_t>(r * n + c)]) > std::abs(a[static_cast<std::size_t>(piv * n + c)])) piv = r;
    if (std::abs(a[static_cast<std::size_t>(piv * n + c)]) < 1e-12)
      throw numeric_error("solve_linear: singular system");
    if (piv != c) {
      for (int k = c; k < n; ++k) std::swap(a[static_cast<std::size_t>(c * n + k)], a[static_cast<std::size_t>(piv * n + k)]);
      std::swap(b[static_cast<std::size_t>(c)], b[static_cast<std::size_t>(piv)]);
    }
    for (int r = c + 1; r < n; ++r) {
      double f = a[static_cast<std::size_t>(r * n + c)] / a[static_cast<std::size_t>(c * n + c)];
      if (f == 0.0) continue;
      for (int k = c; k < n; ++k) a[static_cast<std::size_t>(r * n + k)] -= f * a[static_cast<std::size_t>(c * n + k)];
      b[static_cast<std::size_t>(r)] -= f * b[static_cast<std::size_t>(c)];
    }
  }
  std::vector<double> x(static_cast<std::size_t>(n));
  for (int r = n - 1; r >= 0; --r) {
    double acc = b[static_cast<std::size_t>(r)];
    for (int k = r + 1; k < n; ++k) acc -= a[static_cast<std::size_t>(r * n + k)] * x[static_cast<std::size_t>(k)];
    x[static_cast<std::size_t>(r)] = acc / a[static_cast<std::size_t>(r * n + r)];
  }
  return x;
}

}  // namespace detail

struct PolicyEval {
  std::vector<double> v;    // state values
  std::vector<double> q;    // [s][a]
  std::vector<double> adv;  // [s][a]
  std::vector<double> rho;  // discounted visitation, unnormalized
  double eta = 0.0;
};

// Exact policy evaluation by linear solve; policy is [ns][na] row-stochastic.
inline PolicyEval evaluate_policy(const TabularMDP& mdp, const std::vector<double>& policy) {
  mdp.validate();
  if (policy.size() != static_cast<std::size_t>(mdp.ns * mdp.na))
    throw std::invalid_argument("evaluate_policy: policy shape mismatch");
  int n = mdp.ns;
  std::vector<double> p_pi(static_cast<std::size_t>(n * n), 0.0), r_pi(static_cast<std::size_t>(n), 0.0);
  for (int s = 0; s < n; ++s)
    for (int a = 0; a < mdp.na; ++a) {
      double w = policy[static_cast<std::size_t>(s * mdp.na + a)];
      if (w == 0.0) continue;
      for (int s2 = 0; s2 < n; ++s2) {
        p_pi[static_cast<std::size_t>(s * n + s2)] += w * mdp.pr(s, a, s2);
        r_pi[static_cast<std::size_t>(s)] += w * mdp.pr(s, a, s2) * mdp.rw(s, a, s2);
      }
    }
  // (I - gamma P) v = r
  std::vector<double> m(static_cast<std::size_t>(n * n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      m[static_cast<std::size_t>(i * n + j)] = (i == j ? 1.0 : 0.0) - mdp.gamma * p_pi[static_cast<std::size_t>(i * n + j)];
  PolicyEval ev;
  ev.v = detail::solve_linear(m, r_pi, n);
  // rho^T = mu0^T (I - gamma P)^{-1}  ==  (I - gamma P^T) rho = mu0
  std::vector<double> mt(static_cast<std::size_t>(n * n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) mt[static_cast<std::size_t>(i * n + j)] = m[static_cast<std::size_t>(j * n + i)];
  ev.rho = detail::solve_linear(mt, mdp.mu0, n);
  ev.q.assign(static_cast<std::size_t>(n * mdp.na), 0.0);
  ev.adv.assign(static_cast<std::size_t>(n * mdp.na), 0.0);
  for (int s = 0; s < n; ++s)
    for (int a = 0; a < mdp.na; ++a) {
      double acc = 0.0;
      for (int s2 = 0; s2 < n; ++s2) acc += mdp.pr(s, a, s2) * (mdp.rw(s, a, s2) + mdp.gamma * ev.v[static_cast<std::size_t>(s2)]);
      ev.q[static_cast<std::size_t>(s * mdp.na + a)] = acc;
      ev.adv[static_cast<std::size_t>(s * mdp.na + a)] = acc - ev.v[static_cast<std::size_t>(s)];
    }
  ev.eta = 0.0;
  for (int s = 0; s < n; ++s) ev.eta += mdp.mu0[static_cast<std::size_t>(s)] * ev.v[static_cast<std::size_t>(s)];
  return ev;
}

namespace detail {

// max over (s, a) and over every policy of |A^pi(s, a)|. For a fixed (s, a)
// the advantage is affine in V^pi, and the reachable set of value functions
// has deterministic policies at its extreme points, so enumerating them is
// exact. Beyond the enumeration budget, fall back to the range bound
// (r_max - r_min) / (1 - gamma), which dominates every policy's advantage.
inline double max_abs_advantage_all_policies(const TabularMDP& mdp) {
  double budget = std::pow(static_cast<double>(mdp.na), mdp.ns);
  if (budget <= 65536.0) {
    double best = 0.0;
    std::vector<double> policy(static_cast<std::size_t>(mdp.ns * mdp.na));
    std::vector<int> choice(static_cast<std::size_t>(mdp.ns), 0);
    long total = static_cast<long>(budget);
    for (long it = 0; it < total; ++it) {
      long x = it;
      for (int s = 0; s < mdp.ns; ++s) {
        choice[static_cast<std::size_t>(s)] = static_cast<int>(x % mdp.na);
        x /= mdp.na;
      }
      std::fill(policy.begin(), policy.end(), 0.0);
      for (int s = 0; s < mdp.ns; ++s) policy[static_cast<std::size_t>(s * mdp.na + choice[static_cast<std::size_t>(s)])] = 1.0;
      PolicyEval ev = evaluate_policy(mdp, policy);
      for (double a : ev.adv) best = std::max(best, std::abs(a));
    }
    return best;
  }
  double rmax = -std::numeric_limits<double>::infinity(), rmin = std::numeric_limits<double>::infinity();
  for (double r : mdp.reward) {
    rmax = std::max(rmax, r);
    rmin = std::min(rmin, r);
  }
  return (rmax - rmin) / (1.0 - mdp.gamma);
}

}  // namespace detail

struct Thm1Report {
  double eta_new = 0.0;
  double l_value = 0.0;
  double c = 0.0;
  double d_tv_max = 0.0;
  double slack = 0.0;  // eta_new - (l_value - c * d_tv_max^2)
  bool holds = false;
};

// eta(pi_new) >= L_{pi_old}(pi_new) - C * D_TV_max^2, slack tolerance -1e-9.
inline Thm1Report thm1_bound_check(const TabularMDP& mdp, const std::vector<double>& pi_old,
                                   const std::vector<double>& pi_new) {
  PolicyEval old_ev = evaluate_policy(mdp, pi_old);
  PolicyEval new_ev = evaluate_policy(mdp, pi_new);
  Thm1Report rep;
  rep.eta_new = new_ev.eta;
  double surr = 0.0;
  for (int s = 0; s < mdp.ns; ++s)
    for (int a = 0; a < mdp.na; ++a)
      surr += old_ev.rho[static_cast<std::size_t>(s)] * pi_new[static_cast<std::size_t>(s * mdp.na + a)] *
              old_ev.adv[static_cast<std::size_t>(s * mdp.na + a)];
  rep.l_value = old_ev.eta + surr;
  rep.c = 4.0 * detail::max_abs_advantage_all_policies(mdp) * mdp.gamma / ((1.0 - mdp.gamma) * (1.0 - mdp.gamma));
  for (int s = 0; s < mdp.ns; ++s) {
    double tv = 0.0;
    for (int a = 0; a < mdp.na; ++a)
      tv += std::abs(pi_old[static_cast<std::size_t>(s * mdp.na + a)] - pi_new[static_cast<std::size_t>(s * mdp.na + a)]);
    rep.d_tv_max = std::max(rep.d_tv_max, 0.5 * tv);
  }
  rep.slack = rep.eta_new - (rep.l_value - rep.c * rep.d_tv_max * rep.d_tv_max);
  rep.holds = rep.slack >= -1e-9;
  return rep;
}

// ----- regularized iteration (horizon-1 bandit) -----

struct Bandit {
  Tensor<double> reward;    // [nq, no]
  std::vector<double> mu_q; // prompt distribution

  void validate() const {
    if (reward.rank() != 2) throw std::invalid_argument("Bandit: reward must be [nq, no]");
    if (mu_q.size() != static_cast<std::size_t>(reward.dim(0)))
      throw std::invalid_argument("Bandit: prompt distribution shape mismatch");
    double s = 0.0;
    for (double v : mu_q) s += v;
    if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument("Bandit: prompt distribution does not sum to 1");
  }
};

inline double bandit_eta(const Bandit& b, const TabularPolicy& pi) {
  double acc = 0.0;
  for (int q = 0; q < pi.nq; ++q)
    for (int o = 0; o < pi.no; ++o) acc += b.mu_q[static_cast<std::size_t>(q)] * pi.row(q)[o] * b.reward.at(q, o);
  return acc;
}

// eta'(pi) = eta(pi) - beta * E_q KL(pi || pi_ref)
inline double bandit_eta_reg(const Bandit& b, const TabularPolicy& pi, const TabularPolicy& pi_ref,
                             double beta) {
  double kl = 0.0;
  for (int q = 0; q < pi.nq; ++q) {
    double acc = 0.0;
    for (int o = 0; o < pi.no; ++o) {
      double pa = pi.row(q)[o];
      if (pa == 0.0) continue;
      double pb = pi_ref.row(q)[o];
      if (pb <= 0.0) return -std::numeric_limits<double>::infinity();
      acc += pa * std::log(pa / pb);
    }
    kl += b.mu_q[static_cast<std::size_t>(q)] * acc;
  }
  return bandit_eta(b, pi) - beta * kl;
}

// Repeated exact solves of the regularized objective via the closed form;
// returns the eta' trace, entry 0 for the start policy.
inline std::vector<double> thm3_monotone_iterate(const Bandit& b, const TabularPolicy& pi_start,
                                                 const TabularPolicy& pi_ref, double lambda,
                                                 double beta, int iterations) {
  b.validate();
  if (!(lambda + beta > 0.0)) throw config_error("thm3_monotone_iterate: lambda + beta must be positive");
  TabularPolicy pi = pi_start;
  std::vector<double> trace;
  trace.push_back(bandit_eta_reg(b, pi, pi_ref, beta));
  Tensor<double> adv({pi.nq, pi.no});
  for (int it = 0; it < iterations; ++it) {
    for (int q = 0; q < pi.nq; ++q) {
      double base = 0.0;
      for (int o = 0; o < pi.no; ++o) base += pi.row(q)[o] * b.reward.at(q, o);
      for (int o = 0; o < pi.no; ++o) adv.at(q, o) = b.reward.at(q, o) - base;
    }
    pi = closed_form_target(geometric_mixture(pi, pi_ref, lambda, beta), adv, 1.0 / (lambda + beta));
    trace.push_back(bandit_eta_reg(b, pi, pi_ref, beta));
  }
  return trace;
}

// Exponentiated-gradient ascent on E_pi[A] - lambda KL(pi||pi_old) - beta KL(pi||pi_ref),
// the direct simplex cross-check for the closed form. Single prompt row.
inline std::vector<double> maximize_m_simplex(const std::vector<double>& pi_old,
                                              const std::vector<double>& pi_ref,
                                              const std::vector<double>& adv, double lambda,
                                              double beta, int iters = 4000, double lr = 0.1) {
  std::size_t n = pi_old.size();
  if (pi_ref.size() != n || adv.size() != n) throw std::invalid_argument("maximize_m_simplex: size mismatch");
  std::vector<double> pi(n, 1.0 / static_cast<double>(n)), g(n);
  for (int it = 0; it < iters; ++it) {
    for (std::size_t o = 0; o < n; ++o) {
      double lp = std::log(pi[o]);
      g[o] = adv[o] - lambda * (lp - std::log(pi_old[o]) + 1.0) - beta * (lp - std::log(pi_ref[o]) + 1.0);
    }
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t o = 0; o < n; ++o) {
      pi[o] = std::log(pi[o]) + lr * g[o];
      m = std::max(m, pi[o]);
    }
    double s = 0.0;
    for (std::size_t o = 0; o < n; ++o) {
      pi[o] = std::exp(pi[o] - m);
      s += pi[o];
    }
    for (std::size_t o = 0; o < n; ++o) pi[o] /= s;
  }
  return pi;
}

// ----- weighted-likelihood descent vs the closed-form target -----

struct Wd1TabularTrace {
  std::vector<double> kl_pos;   // positive-weights-only descent, asserted elsewhere
  std::vector<double> kl_full;  // full loss descent, recorded only
};

// Exact-expectation gradient descent on tabular logits. The positive-only
// population loss is the cross entropy to the target, so its gradient is
// pi_theta - pi_star per prompt. The full loss adds the mirrored weight
// distribution; its population gradient is constant in theta.
inline Wd1TabularTrace tabular_wd1_vs_target(const TabularPolicy& pi_old_ref,
                                             const Tensor<double>& advantage, double psi, int steps,
                                             double lr) {
  TabularPolicy pi_star = closed_form_target(pi_old_ref, advantage, psi);
  Tensor<double> neg_adv = advantage;
  for (std::size_t i = 0; i < neg_adv.size(); ++i) neg_adv[i] = -neg_adv[i];
  TabularPolicy pi_minus = closed_form_target(pi_old_ref, neg_adv, psi);

  Wd1TabularTrace out;
  Tensor<double> z_pos({pi_star.nq, pi_star.no}, 0.0), z_full = z_pos;
  for (int it = 0; it <= steps; ++it) {
    TabularPolicy th_pos = TabularPolicy::from_logits(z_pos);
    TabularPolicy th_full = TabularPolicy::from_logits(z_full);
    out.kl_pos.push_back(kl_rows(pi_star, th_pos));
    out.kl_full.push_back(kl_rows(pi_star, th_full));
    if (it == steps) break;
    for (int q = 0; q < pi_star.nq; ++q)
      for (int o = 0; o < pi_star.no; ++o) {
        z_pos.at(q, o) -= lr * (th_pos.row(q)[o] - pi_star.row(q)[o]);
        z_full.at(q, o) -= lr * (-pi_star.row(q)[o] + pi_minus.row(q)[o]);
      }
  }
  return out;
}

}  // namespace dlmwpo
