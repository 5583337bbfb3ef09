#include <catch2/catch_amalgamated.hpp>

#include <dlmwpo/sampler.hpp>

using namespace dlmwpo;

namespace {

ParamStore<float> rand_model(std::uint64_t seed, int vocab, int max_seq) {
  DenoiserConfig mc;
  mc.vocab = vocab;
  mc.d_model = 16;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.max_seq_len = max_seq;
  ParamStore<float> ps = init_params<float>(mc, RngStream(seed));
  RngStream r(seed + 1);
  for (const char* name : {"head.w", "head.b"}) {
    Tensor<float>& t = ps.tensors[static_cast<std::size_t>(ps.find(name))];
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.4f * static_cast<float>(r.normal());
  }
  return ps;
}

}  // namespace

TEST_CASE("unmasking schedule splits tokens remainder-first") {
  REQUIRE(unmasking_schedule(32, 5, 32) == std::vector<int>{7, 7, 6, 6, 6});
  REQUIRE(unmasking_schedule(64, 8, 16) == std::vector<int>(8, 8));
  REQUIRE(unmasking_schedule(32, 16, 16) == std::vector<int>(16, 2));
  REQUIRE(unmasking_schedule(16, 8, 16) == std::vector<int>(8, 2));
  REQUIRE(unmasking_schedule(16, 3, 8) == std::vector<int>{4, 4, 8});

  int total = 0;
  for (int v : unmasking_schedule(48, 7, 16)) total += v;
  REQUIRE(total == 48);

  REQUIRE_THROWS_AS(unmasking_schedule(30, 5, 16), config_error);   // gen % block != 0
  REQUIRE_THROWS_AS(unmasking_schedule(32, 1, 16), config_error);   // fewer steps than blocks
}

TEST_CASE("zero head decodes to the first vocabulary id everywhere") {
  DenoiserConfig mc;
  mc.vocab = 9;
  mc.d_model = 16;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.max_seq_len = 16;
  ParamStore<float> ps = init_params<float>(mc, RngStream(3));
  SampleConfig cfg;
  cfg.gen_length = 8;
  cfg.diffusion_steps = 4;
  cfg.block_length = 8;
  cfg.temperature = 0.0;
  std::vector<int> prompt = {4, 5};
  GroupSample out = generate_group(ps, static_cast<const ParamStore<float>*>(nullptr), prompt, 2,
                                   cfg, RngStream(9));
  // uniform logits, argmax tie broken by lowest id; the absorbing id never wins
  for (const auto& comp : out.completions) {
    REQUIRE(comp.size() == 8);
    for (int t : comp) REQUIRE(t == Vocab::kPad);
  }
}

TEST_CASE("sampling is deterministic in the stream and sensitive to the salt") {
  ParamStore<float> ps = rand_model(11, 12, 24);
  SampleConfig cfg;
  cfg.gen_length = 16;
  cfg.diffusion_steps = 8;
  cfg.block_length = 8;
  std::vector<int> prompt = {4, 5, 6};

  GroupSample a = generate_group(ps, static_cast<const ParamStore<float>*>(nullptr), prompt, 3,
                                 cfg, RngStream(42));
  GroupSample b = generate_group(ps, static_cast<const ParamStore<float>*>(nullptr), prompt, 3,
                                 cfg, RngStream(42));
  REQUIRE(a.completions == b.completions);

  GroupSample c = generate_group(ps, static_cast<const ParamStore<float>*>(nullptr), prompt, 3,
                                 cfg, RngStream(43));
  REQUIRE(a.completions != c.completions);

  for (const auto& comp : a.completions)
    for (int t : comp) REQUIRE(t != Vocab::kMask);
}

TEST_CASE("a group row replays the single-sequence trajectory") {
  ParamStore<float> ps = rand_model(21, 12, 24);
  SampleConfig cfg;
  cfg.gen_length = 8;
  cfg.diffusion_steps = 4;
  cfg.block_length = 8;
  std::vector<int> prompt = {4, 5};
  GroupSample grp = generate_group(ps, static_cast<const ParamStore<float>*>(nullptr), prompt, 4,
                                   cfg, RngStream(7));
  std::vector<int> solo = generate(ps, static_cast<const ParamStore<float>*>(nullptr), prompt, cfg,
                                   RngStream(7));
  REQUIRE(grp.completions[0] == solo);
}

TEST_CASE("greedy decoding ignores the stream") {
  ParamStore<float> ps = rand_model(31, 12, 24);
  SampleConfig cfg;
  cfg.gen_length = 8;
  cfg.diffusion_steps = 4;
  cfg.block_length = 8;
  cfg.temperature = 0.0;
  std::vector<int> prompt = {4, 5};
  std::vector<int> a = generate(ps, static_cast<const ParamStore<float>*>(nullptr), prompt, cfg,
                                RngStream(1));
  std::vector<int> b = generate(ps, static_cast<const ParamStore<float>*>(nullptr), prompt, cfg,
                                RngStream(999));
  REQUIRE(a == b);
}

TEST_CASE("the normalization flag cannot change a reference-free trajectory") {
  ParamStore<float> ps = rand_model(41, 12, 24);
  SampleConfig cfg;
  cfg.gen_length = 16;
  cfg.diffusion_steps = 8;
  cfg.block_length = 8;
  cfg.beta = 0.0;
  std::vector<int> prompt = {4, 5, 6};
  cfg.mixture_unnormalized = false;
  GroupSample a = generate_group(ps, static_cast<const ParamStore<float>*>(nullptr), prompt, 3,
                                 cfg, RngStream(5));
  cfg.mixture_unnormalized = true;
  GroupSample b = generate_group(ps, static_cast<const ParamStore<float>*>(nullptr), prompt, 3,
                                 cfg, RngStream(5));
  REQUIRE(a.completions == b.completions);
  REQUIRE(a.nfe_per_completion == 8);
}

TEST_CASE("reference-guided decoding doubles the evaluation count") {
  ParamStore<float> ps = rand_model(51, 12, 24);
  ParamStore<float> ref = rand_model(52, 12, 24);
  SampleConfig cfg;
  cfg.gen_length = 8;
  cfg.diffusion_steps = 4;
  cfg.block_length = 8;
  cfg.lambda = 1.0;
  cfg.beta = 0.1;
  std::vector<int> prompt = {4, 5};
  GroupSample out = generate_group(ps, &ref, prompt, 2, cfg, RngStream(6));
  REQUIRE(out.nfe_per_completion == 8);

  cfg.beta = 0.0;
  GroupSample plain = generate_group(ps, &ref, prompt, 2, cfg, RngStream(6));
  REQUIRE(plain.nfe_per_completion == 4);
}

TEST_CASE("the mixture must have a reference when beta is positive") {
  ParamStore<float> ps = rand_model(61, 12, 24);
  SampleConfig cfg;
  cfg.gen_length = 8;
  cfg.diffusion_steps = 4;
  cfg.block_length = 8;
  cfg.beta = 0.1;
  std::vector<int> prompt = {4};
  REQUIRE_THROWS(generate_group(ps, static_cast<const ParamStore<float>*>(nullptr), prompt, 2, cfg,
                                RngStream(1)));
}
