#include <catch2/catch_amalgamated.hpp>

#include <dlmwpo/policy_opt.hpp>
#include <dlmwpo/vocab.hpp>

#include <cmath>

using namespace dlmwpo;
using Catch::Approx;

namespace {

template <typename BuildLoss>
void gradcheck(ParamStore<double>& ps, BuildLoss build, int n_coords, double h, double tol) {
  Graph<double> g;
  auto loss = build(g, ps);
  g.backward(loss);
  GradStore<double> gs = export_grads(g, ps);

  RngStream pick(77);
  for (int c = 0; c < n_coords; ++c) {
    std::size_t ti = pick.uniform_int(ps.tensors.size());
    if (ps.tensors[ti].size() == 0) continue;
    std::size_t j = pick.uniform_int(ps.tensors[ti].size());
    double keep = ps.tensors[ti][j];
    ps.tensors[ti][j] = keep + h;
    Graph<double> gp;
    double up = gp.val(build(gp, ps))[0];
    ps.tensors[ti][j] = keep - h;
    Graph<double> gm;
    double dn = gm.val(build(gm, ps))[0];
    ps.tensors[ti][j] = keep;
    double num = (up - dn) / (2 * h);
    double ana = gs.grads[ti][j];
    double rel = std::abs(num - ana) / std::max(1.0, std::abs(num) + std::abs(ana));
    INFO("tensor " << ps.names[ti] << " coord " << j << " num " << num << " ana " << ana);
    REQUIRE(rel <= tol);
  }
}

ParamStore<double> tiny_model(std::uint64_t seed, int vocab = 9) {
  DenoiserConfig mc;
  mc.vocab = vocab;
  mc.d_model = 12;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.max_seq_len = 6;
  ParamStore<double> ps = init_params<double>(mc, RngStream(seed));
  RngStream r(seed + 1);
  for (const char* name : {"head.w", "head.b"}) {
    Tensor<double>& t = ps.tensors[static_cast<std::size_t>(ps.find(name))];
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.3 * r.normal();
  }
  return ps;
}

struct GroupData {
  Tensor<int> rows;
  Tensor<int> targets;
  int plen;
};

GroupData random_group(std::uint64_t seed, int gsz, int len, int plen, int vocab = 9) {
  GroupData gd{Tensor<int>({gsz, len}), Tensor<int>({gsz, len}), plen};
  RngStream r(seed);
  for (int i = 0; i < gsz; ++i)
    for (int k = 0; k < len; ++k) {
      gd.targets.at(i, k) = static_cast<int>(r.uniform_int(vocab));
      // masked completion region, clean prompt
      gd.rows.at(i, k) = k < plen ? gd.targets.at(i, k) : Vocab::kMask;
    }
  return gd;
}

}  // namespace

TEST_CASE("group advantages are mean-subtracted without std division") {
  auto adv = group_advantage({1.0, 0.1, 0.1});
  REQUIRE(adv[0] == Approx(0.6));
  REQUIRE(adv[1] == Approx(-0.3));
  REQUIRE(adv[2] == Approx(-0.3));
  double s = adv[0] + adv[1] + adv[2];
  REQUIRE(std::abs(s) < 1e-15);

  REQUIRE_THROWS_AS(group_advantage({1.0}), config_error);
  REQUIRE_THROWS_AS(group_advantage({1.0, std::nan("")}), std::invalid_argument);
}

TEST_CASE("wd1 weights match closed forms") {
  // a gap of ln 2 puts two thirds of the mass on the winner
  Wd1Weights w = wd1_weights({std::log(2.0), 0.0}, 1.0);
  REQUIRE(w.pos[0] == Approx(2.0 / 3.0).epsilon(1e-12));
  REQUIRE(w.pos[1] == Approx(1.0 / 3.0).epsilon(1e-12));
  REQUIRE(w.neg[0] == Approx(1.0 / 3.0).epsilon(1e-12));
  REQUIRE(w.neg[1] == Approx(2.0 / 3.0).epsilon(1e-12));

  Wd1Weights w3 = wd1_weights({1.0, 0.0, -1.0}, 1.0);
  REQUIRE(w3.pos[0] == Approx(0.665240955774822).epsilon(1e-10));
  REQUIRE(w3.pos[1] == Approx(0.244728471054798).epsilon(1e-10));
  REQUIRE(w3.pos[2] == Approx(0.0900305731703804).epsilon(1e-10));

  // psi scales inside the softmax
  Wd1Weights wp = wd1_weights({0.5 * std::log(2.0), 0.0}, 2.0);
  REQUIRE(wp.pos[0] == Approx(2.0 / 3.0).epsilon(1e-12));

  double sp = 0, sn = 0;
  for (std::size_t i = 0; i < w3.pos.size(); ++i) {
    sp += w3.pos[i];
    sn += w3.neg[i];
  }
  REQUIRE(sp == Approx(1.0).epsilon(1e-14));
  REQUIRE(sn == Approx(1.0).epsilon(1e-14));

  REQUIRE_THROWS_AS(wd1_weights({1.0}, 1.0), config_error);
  REQUIRE_THROWS_AS(wd1_weights({1.0, 0.0}, 0.0), std::invalid_argument);
  REQUIRE_THROWS_AS(wd1_weights({1.0, 0.0}, -2.0), std::invalid_argument);
  REQUIRE_THROWS_AS(wd1_weights({1.0, std::nan("")}, 1.0), std::invalid_argument);
}

TEST_CASE("negating advantages mirrors the weight arrays bitwise") {
  std::vector<double> adv = {0.37, -1.2, 0.0, 2.5, -0.04};
  std::vector<double> neg(adv.size());
  for (std::size_t i = 0; i < adv.size(); ++i) neg[i] = -adv[i];
  Wd1Weights a = wd1_weights(adv, 3.7);
  Wd1Weights b = wd1_weights(neg, 3.7);
  for (std::size_t i = 0; i < adv.size(); ++i) {
    REQUIRE(a.pos[i] == b.neg[i]);
    REQUIRE(a.neg[i] == b.pos[i]);
  }
}

TEST_CASE("wd1 coefficients") {
  Wd1Weights w = wd1_weights({std::log(2.0), 0.0}, 1.0);
  auto c = wd1_coefficients(w);
  REQUIRE(c[0] == Approx(-1.0 / 3.0).epsilon(1e-12));
  REQUIRE(c[1] == Approx(1.0 / 3.0).epsilon(1e-12));

  auto cp = wd1_coefficients(w, true);
  REQUIRE(cp[0] == Approx(-2.0 / 3.0).epsilon(1e-12));
  REQUIRE(cp[1] == Approx(-1.0 / 3.0).epsilon(1e-12));

  // equal advantages cancel exactly, not just approximately
  Wd1Weights flat = wd1_weights({0.25, 0.25, 0.25}, 5.0);
  for (double v : wd1_coefficients(flat)) REQUIRE(v == 0.0);
}

TEST_CASE("weight fingerprints flag any tampering") {
  Wd1Weights w = wd1_weights({1.0, 0.0, -1.0}, 1.0);
  std::uint64_t fp = w.fingerprint();
  REQUIRE(fp == w.fingerprint());

  Wd1Weights t1 = w;
  t1.pos[0] = std::nextafter(t1.pos[0], 1.0);
  REQUIRE(t1.fingerprint() != fp);

  Wd1Weights t2 = w;
  t2.neg[2] = std::nextafter(t2.neg[2], 1.0);
  REQUIRE(t2.fingerprint() != fp);

  Wd1Weights t3 = w;
  t3.psi = 1.0 + 1e-12;
  REQUIRE(t3.fingerprint() != fp);
}

TEST_CASE("uniform advantages reduce the importance estimate to a plain mean") {
  std::vector<double> ll = {-3.0, -5.0, -1.0, -7.0};
  double est = nll_is_estimate({0.2, 0.2, 0.2, 0.2}, 4.0, ll);
  REQUIRE(est == Approx(4.0).epsilon(1e-12));

  // a dominant advantage pulls the estimate toward that sample's nll
  double skew = nll_is_estimate({50.0, 0.0, 0.0, 0.0}, 1.0, ll);
  REQUIRE(skew == Approx(3.0).epsilon(1e-6));
  REQUIRE_THROWS_AS(nll_is_estimate({0.1, 0.2}, 1.0, ll), std::invalid_argument);
}

TEST_CASE("advantage shift") {
  auto out = shift_advantages({0.5, -0.5}, {-2.0, -4.0}, 1.0, 0.05);
  REQUIRE(out[0] == Approx(0.5 + 0.05 * -2.0 / 1.05).epsilon(1e-14));
  REQUIRE(out[1] == Approx(-0.5 + 0.05 * -4.0 / 1.05).epsilon(1e-14));

  auto noop = shift_advantages({0.5, -0.5}, {-2.0, -4.0}, 1.0, 0.0);
  REQUIRE(noop[0] == 0.5);
  REQUIRE(noop[1] == -0.5);

  REQUIRE_THROWS_AS(shift_advantages({0.5}, {-2.0, -4.0}, 1.0, 0.0), std::invalid_argument);
  REQUIRE_THROWS_AS(shift_advantages({0.5, 0.5}, {-2.0, -4.0}, 0.0, 0.0), config_error);
}

TEST_CASE("wd1 loss value matches a hand computation") {
  ParamStore<double> ps = tiny_model(21);
  GroupData gd = random_group(31, 3, 5, 2);
  Wd1Weights w = wd1_weights({0.9, -0.1, -0.8}, 1.25);
  auto c = wd1_coefficients(w);

  Graph<double> g;
  auto node = wd1_loss_node(g, ps, gd.rows, gd.targets, gd.plen, w);
  double got = g.val(node)[0];

  Tensor<double> lp = eval_logprobs(ps, gd.rows);
  double want = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int k = gd.plen; k < 5; ++k) want += c[static_cast<std::size_t>(i)] * lp.at(i, k, gd.targets.at(i, k));
  REQUIRE(got == Approx(want).epsilon(1e-12));

  // length normalization divides each sequence term by the completion length
  Graph<double> g2;
  double norm = g2.val(wd1_loss_node(g2, ps, gd.rows, gd.targets, gd.plen, w, false, true))[0];
  REQUIRE(norm == Approx(want / 3.0).epsilon(1e-12));

  // dropping the downweighting half only keeps -w+ terms
  Graph<double> g3;
  double pos_only = g3.val(wd1_loss_node(g3, ps, gd.rows, gd.targets, gd.plen, w, true))[0];
  double want_pos = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int k = gd.plen; k < 5; ++k) want_pos += -w.pos[static_cast<std::size_t>(i)] * lp.at(i, k, gd.targets.at(i, k));
  REQUIRE(pos_only == Approx(want_pos).epsilon(1e-12));
}

TEST_CASE("wd1 loss gradients agree with finite differences") {
  ParamStore<double> ps = tiny_model(23);
  GroupData gd = random_group(33, 3, 5, 2);
  Wd1Weights w = wd1_weights({0.9, -0.1, -0.8}, 1.25);
  auto build = [&](Graph<double>& g, ParamStore<double>& p) {
    return wd1_loss_node(g, p, gd.rows, gd.targets, gd.plen, w);
  };
  gradcheck(ps, build, 60, 1e-6, 1e-6);
}

TEST_CASE("wd1 loss rejects malformed inputs") {
  ParamStore<double> ps = tiny_model(25);
  GroupData gd = random_group(35, 3, 5, 2);
  Wd1Weights w = wd1_weights({0.9, -0.1, -0.8}, 1.25);
  Graph<double> g;

  Wd1Weights short_w = wd1_weights({1.0, 0.0}, 1.0);
  REQUIRE_THROWS_AS(wd1_loss_node(g, ps, gd.rows, gd.targets, gd.plen, short_w),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(wd1_loss_node(g, ps, gd.rows, gd.targets, 0, w), std::invalid_argument);
  REQUIRE_THROWS_AS(wd1_loss_node(g, ps, gd.rows, gd.targets, 5, w), std::invalid_argument);
  Tensor<int> bad({3, 4});
  REQUIRE_THROWS_AS(wd1_loss_node(g, ps, gd.rows, bad, gd.plen, w), std::invalid_argument);
}

TEST_CASE("clipped baseline loss vanishes when the policy equals the snapshot") {
  ParamStore<double> ps = tiny_model(41);
  GroupData gd = random_group(51, 4, 5, 2);
  std::vector<double> adv = group_advantage({2.0, 0.5, 0.0, -1.0});

  Tensor<double> lp = eval_logprobs(ps, gd.rows);
  Tensor<double> logp_old({4, 5}, 0.0);
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 5; ++k) logp_old.at(i, k) = lp.at(i, k, gd.targets.at(i, k));

  Graph<double> g;
  auto node = diffu_grpo_loss_node<double>(g, ps, gd.rows, gd.targets, gd.plen, logp_old, nullptr,
                                           adv, 0.2, 0.0);
  // every ratio is exactly one, so the objective is the mean advantage: zero
  REQUIRE(std::abs(g.val(node)[0]) < 1e-12);

  // and the kl penalty against the same table is exactly zero too
  Graph<double> g2;
  auto node2 = diffu_grpo_loss_node<double>(g2, ps, gd.rows, gd.targets, gd.plen, logp_old,
                                            &logp_old, adv, 0.2, 0.04);
  REQUIRE(std::abs(g2.val(node2)[0]) < 1e-12);
}

TEST_CASE("clipped baseline gradients agree with finite differences") {
  ParamStore<double> ps = tiny_model(43);
  GroupData gd = random_group(53, 3, 5, 2);
  std::vector<double> adv = group_advantage({1.5, 0.2, -0.4});

  // stale tables from a different model stand in for the old and ref policies
  ParamStore<double> stale = tiny_model(44);
  ParamStore<double> refm = tiny_model(45);
  Tensor<double> lp_old_full = eval_logprobs(stale, gd.rows);
  Tensor<double> lp_ref_full = eval_logprobs(refm, gd.rows);
  Tensor<double> logp_old({3, 5}, 0.0), logp_ref({3, 5}, 0.0);
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 5; ++k) {
      logp_old.at(i, k) = lp_old_full.at(i, k, gd.targets.at(i, k));
      logp_ref.at(i, k) = lp_ref_full.at(i, k, gd.targets.at(i, k));
    }

  auto build = [&](Graph<double>& g, ParamStore<double>& p) {
    return diffu_grpo_loss_node<double>(g, p, gd.rows, gd.targets, gd.plen, logp_old, &logp_ref,
                                        adv, 0.2, 0.04);
  };
  gradcheck(ps, build, 60, 1e-6, 1e-5);
}

TEST_CASE("clipped baseline rejects malformed inputs") {
  ParamStore<double> ps = tiny_model(47);
  GroupData gd = random_group(57, 3, 5, 2);
  std::vector<double> adv = group_advantage({1.0, 0.0, -1.0});
  Tensor<double> logp_old({3, 5}, -1.0);
  Graph<double> g;

  REQUIRE_THROWS_AS(diffu_grpo_loss_node<double>(g, ps, gd.rows, gd.targets, gd.plen, logp_old,
                                                 nullptr, adv, 0.2, 0.04),
                    config_error);  // kl without a reference table
  Tensor<double> bad({3, 4}, -1.0);
  REQUIRE_THROWS_AS(diffu_grpo_loss_node<double>(g, ps, gd.rows, gd.targets, gd.plen, bad, nullptr,
                                                 adv, 0.2, 0.0),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(diffu_grpo_loss_node<double>(g, ps, gd.rows, gd.targets, gd.plen, logp_old,
                                                 nullptr, adv, 0.0, 0.0),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(diffu_grpo_loss_node<double>(g, ps, gd.rows, gd.targets, gd.plen, logp_old,
                                                 nullptr, {1.0, -1.0}, 0.2, 0.0),
                    std::invalid_argument);

  GroupData solo = random_group(58, 1, 5, 2);
  Tensor<double> lo1({1, 5}, -1.0);
  REQUIRE_THROWS_AS(diffu_grpo_loss_node<double>(g, ps, solo.rows, solo.targets, solo.plen, lo1,
                                                 nullptr, {0.0}, 0.2, 0.0),
                    config_error);
}
