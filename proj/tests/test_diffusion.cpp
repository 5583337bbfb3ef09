#include <catch2/catch_amalgamated.hpp>

#include <dlmwpo/diffusion.hpp>

using namespace dlmwpo;
using Catch::Approx;

namespace {

ParamStore<double> rand_model(std::uint64_t seed, int vocab = 9, int max_seq = 8) {
  DenoiserConfig mc;
  mc.vocab = vocab;
  mc.d_model = 12;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.max_seq_len = max_seq;
  ParamStore<double> ps = init_params<double>(mc, RngStream(seed));
  RngStream r(seed + 1);
  for (const char* name : {"head.w", "head.b"}) {
    Tensor<double>& t = ps.tensors[static_cast<std::size_t>(ps.find(name))];
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.4 * r.normal();
  }
  return ps;
}

ParamStore<double> uniform_model(int vocab, int max_seq = 8) {
  DenoiserConfig mc;
  mc.vocab = vocab;
  mc.d_model = 12;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.max_seq_len = max_seq;
  return init_params<double>(mc, RngStream(17));  // zero head: uniform everywhere
}

}  // namespace

TEST_CASE("forward masking touches only completion positions") {
  PromptCompletion pc{{3, 4, 5}, {6, 7, 8, 6}};
  RngStream rng(1);
  std::vector<int> none = forward_mask(pc, 0.0, rng);
  REQUIRE(none == pc.full());
  std::vector<int> all = forward_mask(pc, 1.0, rng);
  for (std::size_t k = 0; k < 3; ++k) REQUIRE(all[k] == pc.prompt[k]);
  for (std::size_t k = 3; k < all.size(); ++k) REQUIRE(all[k] == Vocab::kMask);
  REQUIRE_THROWS_AS(forward_mask(pc, 1.5, rng), std::invalid_argument);
  REQUIRE_THROWS_AS(forward_mask(pc, -0.1, rng), std::invalid_argument);
}

TEST_CASE("mask rate tracks t") {
  PromptCompletion pc{{3}, std::vector<int>(200, 5)};
  RngStream rng(2);
  int masked = 0;
  const int reps = 50;
  for (int r = 0; r < reps; ++r) {
    std::vector<int> x = forward_mask(pc, 0.3, rng);
    for (std::size_t k = 1; k < x.size(); ++k) masked += x[k] == Vocab::kMask;
  }
  double frac = static_cast<double>(masked) / (200.0 * reps);
  REQUIRE(frac == Approx(0.3).margin(0.02));
}

TEST_CASE("single-token completions make the bound exact") {
  ParamStore<double> ps = rand_model(21);
  PromptCompletion pc{{3, 4, 5}, {6}};
  double oracle = exact_elbo_oracle(ps, pc, 1e-3);

  Tensor<int> row({1, 4});
  row.at(0, 0) = 3;
  row.at(0, 1) = 4;
  row.at(0, 2) = 5;
  row.at(0, 3) = Vocab::kMask;
  Tensor<double> lp = eval_logprobs(ps, row);
  double direct = lp.at(0, 3, 6);
  REQUIRE(oracle == Approx(direct).epsilon(1e-10));
}

TEST_CASE("uniform predictions give the independent-token value") {
  const int vocab = 9;
  ParamStore<double> ps = uniform_model(vocab);
  PromptCompletion pc{{3, 4}, {5, 6}};
  double oracle = exact_elbo_oracle(ps, pc, 1e-3);
  REQUIRE(oracle == Approx(-2.0 * std::log(vocab)).epsilon(1e-10));

  std::vector<double> per_tok = exact_token_elbo_oracle(ps, pc, 1e-3, true);
  REQUIRE(per_tok.size() == 2);
  for (double v : per_tok) REQUIRE(v == Approx(-std::log(vocab)).epsilon(1e-10));

  PromptCompletion too_long{{3}, {5, 6, 7, 8, 5}};
  REQUIRE_THROWS_AS(exact_elbo_oracle(ps, too_long, 1e-3), capability_error);
}

TEST_CASE("monte carlo bound matches the exact oracle within three sigma") {
  for (std::uint64_t seed : {31ull, 32ull, 33ull}) {
    ParamStore<double> ps = rand_model(seed);
    PromptCompletion pc{{3, 4}, {5, 6, 7}};
    double oracle = exact_elbo_oracle(ps, pc, 1e-3);
    RngStream rng(seed * 1000);
    MeanStderr est = elbo_estimate(ps, pc, 20000, 1e-3, rng);
    INFO("seed " << seed << " mean " << est.mean << " exact " << oracle << " stderr "
                 << est.stderr_);
    REQUIRE(std::abs(est.mean - oracle) <= 3.0 * est.stderr_ + 1e-9);
    REQUIRE(est.mean <= 0.0);
  }
}

TEST_CASE("per-token estimators converge to their exact expectations") {
  ParamStore<double> ps = rand_model(41);
  PromptCompletion pc{{3, 4}, {5, 6}};
  for (bool weighted : {true, false}) {
    std::vector<double> exact = exact_token_elbo_oracle(ps, pc, 1e-3, weighted);
    RngStream rng(77);
    std::vector<double> mc = token_loglik_elbo(ps, pc, 50000, 1e-3, weighted, rng);
    REQUIRE(mc.size() == exact.size());
    for (std::size_t k = 0; k < exact.size(); ++k) {
      INFO("weighted " << weighted << " token " << k << " mc " << mc[k] << " exact " << exact[k]);
      REQUIRE(mc[k] == Approx(exact[k]).margin(0.1));
    }
  }
}

TEST_CASE("one-pass likelihood with unmasked prompt equals a direct forward") {
  ParamStore<double> ps = rand_model(51);
  PromptCompletion pc{{3, 4, 5}, {6, 7}};
  RngStream rng(5);
  std::vector<double> tok = token_loglik_masked_prompt(ps, pc, 0.0, rng);
  REQUIRE(tok.size() == 2);

  Tensor<int> row({1, 5});
  for (int k = 0; k < 3; ++k) row.at(0, k) = pc.prompt[static_cast<std::size_t>(k)];
  row.at(0, 3) = Vocab::kMask;
  row.at(0, 4) = Vocab::kMask;
  Tensor<double> lp = eval_logprobs(ps, row);
  REQUIRE(tok[0] == Approx(lp.at(0, 3, 6)).epsilon(1e-12));
  REQUIRE(tok[1] == Approx(lp.at(0, 4, 7)).epsilon(1e-12));
  for (double v : tok) REQUIRE(v <= 0.0);

  REQUIRE_THROWS_AS(token_loglik_masked_prompt(ps, pc, 1.0, rng), std::invalid_argument);
}

TEST_CASE("masked prompt rows mask the prompt at the requested rate only") {
  std::vector<int> prompt(50, 4);
  RngStream rng(6);
  Tensor<int> rows = masked_prompt_rows(prompt, 10, 40, 0.15, rng);
  REQUIRE(rows.dim(0) == 40);
  REQUIRE(rows.dim(1) == 60);
  int masked = 0;
  for (int r = 0; r < 40; ++r) {
    for (int k = 0; k < 50; ++k) masked += rows.at(r, k) == Vocab::kMask;
    for (int k = 50; k < 60; ++k) REQUIRE(rows.at(r, k) == Vocab::kMask);
  }
  REQUIRE(static_cast<double>(masked) / 2000.0 == Approx(0.15).margin(0.03));

  RngStream rng0(7);
  Tensor<int> clean = masked_prompt_rows(prompt, 4, 3, 0.0, rng0);
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 50; ++k) REQUIRE(clean.at(r, k) == 4);
}

TEST_CASE("bound training loss differentiates cleanly") {
  ParamStore<double> ps = rand_model(61);
  std::vector<PromptCompletion> batch = {{{3, 4}, {5, 6, 7}}, {{8, 3}, {4, 5, 6}}};

  auto build = [&](Graph<double>& g, ParamStore<double>& p) {
    RngStream rng(123);  // same masks every evaluation
    return elbo_loss_graph(g, p, batch, 1e-3, rng);
  };
  Graph<double> g;
  auto loss = build(g, ps);
  double v = g.val(loss)[0];
  REQUIRE(v >= 0.0);  // negative bound of log-likelihoods
  g.backward(loss);
  GradStore<double> gs = export_grads(g, ps);

  RngStream pick(3);
  const double h = 1e-6;
  for (int c = 0; c < 50; ++c) {
    std::size_t ti = pick.uniform_int(ps.tensors.size());
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
    REQUIRE(rel <= 1e-5);
  }
}

TEST_CASE("mean-field sequence log-likelihood sums per-token values") {
  std::vector<double> tok = {-1.0, -2.0, -0.5};
  REQUIRE(seq_loglik_meanfield(tok, false) == Approx(-3.5));
  REQUIRE(seq_loglik_meanfield(tok, true) == Approx(-3.5 / 3.0));
  REQUIRE_THROWS_AS(seq_loglik_meanfield({}, false), std::invalid_argument);
}
