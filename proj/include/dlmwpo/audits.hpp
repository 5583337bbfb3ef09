#pragma once

// Randomized, seed-pinned audits over the exact oracles. Every audit reduces
// to a single slack number with pass <=> slack >= 0, so reports stay uniform
// and regressions show up as a sign flip.

#include <cmath>
#include <json.hpp>
#include <string>
#include <vector>

#include "common.hpp"
#include "diffusion.hpp"
#include "model.hpp"
#include "policy_opt.hpp"
#include "rng.hpp"
#include "tabular.hpp"

namespace dlmwpo {

struct OracleReport {
  std::string check;
  int instances = 0;
  std::vector<std::uint64_t> seeds;
  double worst_slack = 0.0;
  bool pass = false;

  nlohmann::json to_json() const {
    return {{"check", check}, {"instances", instances}, {"seeds", seeds},
            {"worst_slack", worst_slack}, {"pass", pass}};
  }
};

namespace detail {

inline void fold(OracleReport& rep, double slack) {
  if (rep.instances == 0) {
    rep.worst_slack = slack;
  } else {
    rep.worst_slack = std::min(rep.worst_slack, slack);
  }
  ++rep.instances;
}

inline std::vector<double> dirichlet_row(RngStream& rng, int n) {
  std::vector<double> v(static_cast<std::size_t>(n));
  double s = 0.0;
  for (double& x : v) {
    x = -std::log(1.0 - rng.uniform());
    s += x;
  }
  for (double& x : v) x /= s;
  return v;
}

}  // namespace detail

// Weight normalization, mirror symmetry, ordering, shift invariance, and the
// psi -> 0 uniform limit, over random groups.
inline OracleReport audit_weights(std::uint64_t seed = 101, int draws = 200) {
  OracleReport rep;
  rep.check = "weights";
  rep.seeds = {seed};
  RngStream rng(seed);
  for (int d = 0; d < draws; ++d) {
    int gsz = 2 + static_cast<int>(rng.uniform_int(7));
    std::vector<double> rewards(static_cast<std::size_t>(gsz));
    for (double& r : rewards) r = 2.0 * rng.normal();
    double psi = 0.3 + 2.7 * rng.uniform();
    std::vector<double> adv = group_advantage(rewards);
    Wd1Weights w = wd1_weights(adv, psi);

    double slack = 1e-9;
    double sum_pos = 0.0, sum_neg = 0.0;
    for (std::size_t i = 0; i < w.pos.size(); ++i) {
      sum_pos += w.pos[i];
      sum_neg += w.neg[i];
    }
    slack = std::min(slack, 1e-9 - std::abs(sum_pos - 1.0));
    slack = std::min(slack, 1e-9 - std::abs(sum_neg - 1.0));

    std::vector<double> neg_adv(adv.size());
    for (std::size_t i = 0; i < adv.size(); ++i) neg_adv[i] = -adv[i];
    Wd1Weights wm = wd1_weights(neg_adv, psi);
    for (std::size_t i = 0; i < adv.size(); ++i) {
      slack = std::min(slack, 0.0 - std::abs(wm.pos[i] - w.neg[i]));
      slack = std::min(slack, 0.0 - std::abs(wm.neg[i] - w.pos[i]));
    }

    for (std::size_t i = 0; i < adv.size(); ++i)
      for (std::size_t j = i + 1; j < adv.size(); ++j) {
        double da = adv[i] - adv[j];
        bool ok = (da == 0.0) ? (w.pos[i] == w.pos[j] && w.neg[i] == w.neg[j])
                              : (da * (w.pos[i] - w.pos[j]) > 0.0 && da * (w.neg[j] - w.neg[i]) > 0.0);
        if (!ok) slack = std::min(slack, -1.0);
      }

    double c = 10.0 * rng.normal();
    std::vector<double> shifted(rewards.size());
    for (std::size_t i = 0; i < rewards.size(); ++i) shifted[i] = rewards[i] + c;
    Wd1Weights ws = wd1_weights(group_advantage(shifted), psi);
    for (std::size_t i = 0; i < adv.size(); ++i) {
      slack = std::min(slack, 1e-9 - std::abs(ws.pos[i] - w.pos[i]));
      slack = std::min(slack, 1e-9 - std::abs(ws.neg[i] - w.neg[i]));
    }

    Wd1Weights w0 = wd1_weights(adv, 1e-8);
    for (std::size_t i = 0; i < adv.size(); ++i)
      slack = std::min(slack, 1e-6 - std::abs(w0.pos[i] - 1.0 / gsz));

    detail::fold(rep, slack);
  }
  rep.pass = rep.worst_slack >= 0.0;
  return rep;
}

// Closed-form target vs direct simplex maximization of the regularized
// objective, L-infinity tolerance 1e-6.
inline OracleReport audit_eq6(std::uint64_t seed = 102, int draws = 40) {
  OracleReport rep;
  rep.check = "eq6";
  rep.seeds = {seed};
  RngStream rng(seed);
  for (int d = 0; d < draws; ++d) {
    int n = 2 + static_cast<int>(rng.uniform_int(7));
    std::vector<double> po = detail::dirichlet_row(rng, n);
    std::vector<double> pr = detail::dirichlet_row(rng, n);
    std::vector<double> adv(static_cast<std::size_t>(n));
    for (double& a : adv) a = rng.normal();
    double lambda = 0.5 + rng.uniform();
    double beta = 0.5 * rng.uniform();

    TabularPolicy old_t(1, n), ref_t(1, n);
    Tensor<double> adv_t({1, n});
    for (int o = 0; o < n; ++o) {
      old_t.row(0)[o] = po[static_cast<std::size_t>(o)];
      ref_t.row(0)[o] = pr[static_cast<std::size_t>(o)];
      adv_t.at(0, o) = adv[static_cast<std::size_t>(o)];
    }
    TabularPolicy star = closed_form_target(geometric_mixture(old_t, ref_t, lambda, beta), adv_t,
                                            1.0 / (lambda + beta));
    std::vector<double> direct = maximize_m_simplex(po, pr, adv, lambda, beta);
    double linf = 0.0;
    for (int o = 0; o < n; ++o) linf = std::max(linf, std::abs(star.row(0)[o] - direct[static_cast<std::size_t>(o)]));
    detail::fold(rep, 1e-6 - linf);
  }
  rep.pass = rep.worst_slack >= 0.0;
  return rep;
}

// Policy improvement bound over random MDP and policy-pair draws.
inline OracleReport audit_thm1(std::uint64_t seed = 103, int draws = 1000) {
  OracleReport rep;
  rep.check = "thm1";
  rep.seeds = {seed};
  RngStream rng(seed);
  for (int d = 0; d < draws; ++d) {
    TabularMDP mdp;
    mdp.ns = 4;
    mdp.na = 3;
    mdp.gamma = 0.9;
    for (int s = 0; s < mdp.ns; ++s)
      for (int a = 0; a < mdp.na; ++a) {
        std::vector<double> row = detail::dirichlet_row(rng, mdp.ns);
        for (double v : row) mdp.kernel.push_back(v);
        for (int s2 = 0; s2 < mdp.ns; ++s2) {
          (void)s2;
          mdp.reward.push_back(rng.uniform_range(-1.0, 1.0));
        }
      }
    mdp.mu0 = detail::dirichlet_row(rng, mdp.ns);
    std::vector<double> pi_old, pi_new;
    for (int s = 0; s < mdp.ns; ++s) {
      for (double v : detail::dirichlet_row(rng, mdp.na)) pi_old.push_back(v);
      for (double v : detail::dirichlet_row(rng, mdp.na)) pi_new.push_back(v);
    }
    Thm1Report r = thm1_bound_check(mdp, pi_old, pi_new);
    detail::fold(rep, r.slack + 1e-9);
  }
  rep.pass = rep.worst_slack >= 0.0;
  return rep;
}

// Estimator consistency: error curve decreasing in G (25% bounce allowance)
// and final relative error <= 5% at the largest group size.
inline OracleReport audit_thm2(std::uint64_t seed = 104, int trials = 200) {
  OracleReport rep;
  rep.check = "thm2";
  rep.seeds = {seed};
  RngStream rng(seed);

  Thm2Instance inst;
  inst.pi_old_ref = {0.4, 0.3, 0.2, 0.1};
  inst.advantage = {1.0, -0.5, 0.25, 0.0};
  inst.pi_theta = {0.25, 0.25, 0.3, 0.2};
  double psi = 1.0;

  TabularPolicy old_ref(1, 4), theta(1, 4);
  Tensor<double> adv({1, 4});
  for (int o = 0; o < 4; ++o) {
    old_ref.row(0)[o] = inst.pi_old_ref[static_cast<std::size_t>(o)];
    theta.row(0)[o] = inst.pi_theta[static_cast<std::size_t>(o)];
    adv.at(0, o) = inst.advantage[static_cast<std::size_t>(o)];
  }
  double exact = exact_nll(closed_form_target(old_ref, adv, psi), theta);

  std::vector<int> gs = {8, 64, 512, 4096};
  std::vector<double> curve = thm2_convergence(inst, psi, gs, trials, rng);
  for (std::size_t i = 0; i + 1 < curve.size(); ++i)
    detail::fold(rep, 1.25 * curve[i] - curve[i + 1]);
  detail::fold(rep, 0.05 - curve.back() / std::abs(exact));
  rep.pass = rep.worst_slack >= 0.0;
  return rep;
}

// Monotone improvement of the regularized iteration over random bandits.
inline OracleReport audit_thm3(std::uint64_t seed = 105, int draws = 100) {
  OracleReport rep;
  rep.check = "thm3";
  rep.seeds = {seed};
  RngStream rng(seed);
  for (int d = 0; d < draws; ++d) {
    int n = 2 + static_cast<int>(rng.uniform_int(7));
    Bandit b;
    b.reward = Tensor<double>({1, n});
    for (int o = 0; o < n; ++o) b.reward.at(0, o) = rng.uniform_range(-1.0, 1.0);
    b.mu_q = {1.0};
    TabularPolicy start(1, n), ref(1, n);
    std::vector<double> s0 = detail::dirichlet_row(rng, n), r0 = detail::dirichlet_row(rng, n);
    for (int o = 0; o < n; ++o) {
      start.row(0)[o] = s0[static_cast<std::size_t>(o)];
      ref.row(0)[o] = r0[static_cast<std::size_t>(o)];
    }
    std::vector<double> trace = thm3_monotone_iterate(b, start, ref, 1.0, 0.05, 20);
    for (std::size_t i = 0; i + 1 < trace.size(); ++i)
      detail::fold(rep, trace[i + 1] - trace[i] + 1e-9);
  }
  rep.pass = rep.worst_slack >= 0.0;
  return rep;
}

// Monte Carlo evidence-bound estimate vs the exact enumeration oracle,
// 5 standard errors, random small models and completions.
inline OracleReport audit_elbo(std::uint64_t seed = 106, int draws = 6, int n_samples = 20000) {
  OracleReport rep;
  rep.check = "elbo";
  rep.seeds = {seed};
  RngStream rng(seed);
  for (int d = 0; d < draws; ++d) {
    DenoiserConfig cfg;
    cfg.vocab = 12;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.max_seq_len = 8;
    RngStream init = rng.fork(1000 + static_cast<std::uint64_t>(d));
    ParamStore<double> ps = init_params<double>(cfg, init);
    // the head starts at zero by design; give it texture so the oracle sees
    // a nonuniform policy
    Tensor<double>& hw = ps.tensors[static_cast<std::size_t>(ps.find("head.w"))];
    Tensor<double>& hb = ps.tensors[static_cast<std::size_t>(ps.find("head.b"))];
    for (std::size_t i = 0; i < hw.size(); ++i) hw[i] = 0.4 * init.normal();
    for (std::size_t i = 0; i < hb.size(); ++i) hb[i] = 0.1 * init.normal();

    PromptCompletion pc;
    int plen = 2, clen = 1 + static_cast<int>(rng.uniform_int(3));
    for (int k = 0; k < plen; ++k) pc.prompt.push_back(3 + static_cast<int>(rng.uniform_int(9)));
    for (int k = 0; k < clen; ++k) pc.completion.push_back(3 + static_cast<int>(rng.uniform_int(9)));

    double exact = exact_elbo_oracle(ps, pc, kTFloorDefault);
    RngStream mc = rng.fork(2000 + static_cast<std::uint64_t>(d));
    MeanStderr est = elbo_estimate(ps, pc, n_samples, kTFloorDefault, mc);
    double sigma = std::max(est.stderr_, 1e-12);
    detail::fold(rep, 5.0 - std::abs(est.mean - exact) / sigma);
  }
  rep.pass = rep.worst_slack >= 0.0;
  return rep;
}

inline std::vector<OracleReport> run_all_audits() {
  return {audit_weights(), audit_eq6(), audit_thm1(), audit_thm2(), audit_thm3(), audit_elbo()};
}

}  // namespace dlmwpo
