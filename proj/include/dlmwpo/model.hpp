#pragma once

// The denoiser: a small bidirectional transformer encoder over full sequences
// (prompt plus completion), predicting a distribution over clean tokens at
// every position. No causal mask; masked positions attend everywhere.

#include <string>
#include <vector>

#include "graph.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace dlmwpo {

struct DenoiserConfig {
  int vocab = 0;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int max_seq_len = 128;
  double init_std = 0.02;

  void validate() const {
    if (vocab < 2) throw config_error("model: vocab must hold at least mask plus one token");
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || max_seq_len <= 0)
      throw config_error("model: dimensions must be positive");
    if (d_model % n_heads != 0) throw config_error("model: d_model must divide into heads");
  }
};

template <typename T>
struct ParamStore {
  DenoiserConfig cfg;
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    return -1;
  }

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    out.cfg = cfg;
    out.names = names;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }

  // Content hash over shapes and raw values; used to pin policy snapshots.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& t : tensors) {
      for (int d : t.shape) h = fnv1a(&d, sizeof(d), h);
      h = fnv1a(t.data.data(), t.data.size() * sizeof(T), h);
    }
    return h;
  }
};

template <typename T>
struct GradStore {
  std::vector<Tensor<T>> grads;  // aligned with ParamStore order

  double global_norm() const {
    double s = 0.0;
    for (const auto& g : grads)
      for (const T& v : g.data) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
  }

  bool finite() const {
    for (const auto& g : grads)
      if (!all_finite(g)) return false;
    return true;
  }
};

namespace detail {
template <typename T>
void add_param(ParamStore<T>& ps, const std::string& name, std::vector<int> shape) {
  ps.names.push_back(name);
  ps.tensors.emplace_back(std::move(shape));
}

template <typename T>
void gaussian_fill(Tensor<T>& t, double std, RngStream& rng) {
  for (T& v : t.data) v = static_cast<T>(rng.normal() * std);
}
}  // namespace detail

// Fresh parameters. Weight matrices and embeddings are Gaussian(0, init_std);
// norms are identity; every bias is zero; the output head is zero entirely so
// the initial policy is exactly uniform at every position.
template <typename T>
ParamStore<T> init_params(const DenoiserConfig& cfg, RngStream rng) {
  cfg.validate();
  ParamStore<T> ps;
  ps.cfg = cfg;
  int d = cfg.d_model;
  detail::add_param(ps, "tok_emb", {cfg.vocab, d});
  detail::add_param(ps, "pos_emb", {cfg.max_seq_len, d});
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    detail::add_param(ps, p + "ln1.g", {d});
    detail::add_param(ps, p + "ln1.b", {d});
    detail::add_param(ps, p + "qkv.w", {d, 3 * d});
    detail::add_param(ps, p + "qkv.b", {3 * d});
    detail::add_param(ps, p + "proj.w", {d, d});
    detail::add_param(ps, p + "proj.b", {d});
    detail::add_param(ps, p + "ln2.g", {d});
    detail::add_param(ps, p + "ln2.b", {d});
    detail::add_param(ps, p + "mlp1.w", {d, 4 * d});
    detail::add_param(ps, p + "mlp1.b", {4 * d});
    detail::add_param(ps, p + "mlp2.w", {4 * d, d});
    detail::add_param(ps, p + "mlp2.b", {d});
  }
  detail::add_param(ps, "lnf.g", {d});
  detail::add_param(ps, "lnf.b", {d});
  detail::add_param(ps, "head.w", {d, cfg.vocab});
  detail::add_param(ps, "head.b", {cfg.vocab});

  for (std::size_t i = 0; i < ps.names.size(); ++i) {
    const std::string& n = ps.names[i];
    bool is_norm_gain = n.size() >= 2 && n.compare(n.size() - 2, 2, ".g") == 0 && n.find("ln") != std::string::npos;
    bool is_weight = n.size() >= 2 && n.compare(n.size() - 2, 2, ".w") == 0;
    bool is_embedding = n == "tok_emb" || n == "pos_emb";
    if (n == "head.w" || n == "head.b") continue;  // stays zero
    if (is_norm_gain)
      ps.tensors[i].fill(T(1));
    else if (is_weight || is_embedding)
      detail::gaussian_fill(ps.tensors[i], cfg.init_std, rng);
    // biases and norm offsets stay zero
  }
  return ps;
}

// Forward pass on the tape; returns the logits node [B, L, vocab].
// Raises numeric_error naming the first block whose output goes non-finite.
template <typename T>
typename Graph<T>::NodeRef forward_logits(Graph<T>& g, const ParamStore<T>& ps,
                                          const Tensor<int>& tokens) {
  using Ref = typename Graph<T>::NodeRef;
  if (tokens.rank() != 2) throw std::invalid_argument("forward: tokens must be [batch, length]");
  auto p = [&](const std::string& name) -> Ref {
    int idx = ps.find(name);
    if (idx < 0) throw std::invalid_argument("forward: missing parameter " + name);
    return g.param(idx, ps.tensors[static_cast<std::size_t>(idx)]);
  };
  auto check = [&](Ref r, const std::string& where) {
    if (!all_finite(g.val(r))) throw numeric_error("forward: non-finite output at " + where);
  };

  Ref x = g.embed_gather(p("tok_emb"), p("pos_emb"), tokens);
  check(x, "embedding");
  for (int l = 0; l < ps.cfg.n_layers; ++l) {
    std::string pre = "layer" + std::to_string(l) + ".";
    Ref h = g.layer_norm(x, p(pre + "ln1.g"), p(pre + "ln1.b"));
    Ref qkv = g.linear(h, p(pre + "qkv.w"), p(pre + "qkv.b"));
    Ref att = g.attention(qkv, ps.cfg.n_heads);
    Ref proj = g.linear(att, p(pre + "proj.w"), p(pre + "proj.b"));
    x = g.add(x, proj);
    Ref h2 = g.layer_norm(x, p(pre + "ln2.g"), p(pre + "ln2.b"));
    Ref up = g.gelu(g.linear(h2, p(pre + "mlp1.w"), p(pre + "mlp1.b")));
    Ref down = g.linear(up, p(pre + "mlp2.w"), p(pre + "mlp2.b"));
    x = g.add(x, down);
    check(x, "layer" + std::to_string(l));
  }
  Ref hf = g.layer_norm(x, p("lnf.g"), p("lnf.b"));
  Ref logits = g.linear(hf, p("head.w"), p("head.b"));
  check(logits, "head");
  return logits;
}

// Logits then log-softmax: the per-position log-distribution node [B, L, V].
template <typename T>
typename Graph<T>::NodeRef forward_logprobs(Graph<T>& g, const ParamStore<T>& ps,
                                            const Tensor<int>& tokens) {
  return g.log_softmax(forward_logits(g, ps, tokens));
}

// Inference helper when no gradient is needed: plain tensor of log-probs.
template <typename T>
Tensor<T> eval_logprobs(const ParamStore<T>& ps, const Tensor<int>& tokens) {
  Graph<T> g;
  return g.val(forward_logprobs(g, ps, tokens));
}

// Gradients in parameter order; zero tensors for parameters off the tape.
template <typename T>
GradStore<T> export_grads(const Graph<T>& g, const ParamStore<T>& ps) {
  GradStore<T> out;
  out.grads.reserve(ps.tensors.size());
  for (std::size_t i = 0; i < ps.tensors.size(); ++i) {
    const Tensor<T>* pg = g.param_grad(static_cast<int>(i));
    out.grads.push_back(pg ? *pg : Tensor<T>(ps.tensors[i].shape));
  }
  return out;
}

}  // namespace dlmwpo
