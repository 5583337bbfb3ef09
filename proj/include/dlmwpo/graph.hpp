#pragma once

// Reverse-mode autodiff over a flat tape.
//
// Ops evaluate eagerly at construction, so the tape is acyclic by
// construction and node indices always point backwards. backward() walks the
// tape once in reverse. Gradients accumulate in creation order, giving
// bit-identical results for a fixed (params, inputs) pair.
//
// Primitive set: embedding gather, layer norm, linear, gelu, bidirectional
// multi-head attention, residual add, log-softmax, token gathers and masked
// weighted sums, the clipped-ratio and exp(d)-d-1 pointwise terms, and scalar
// linear combination. Everything else is composed from these.

#include <cmath>
#include <vector>

#include "parallel.hpp"
#include "tensor.hpp"

namespace dlmwpo {

// dst += a * b, a: [r,k] row-major, b: [k,n] row-major. The j-loop carries no
// reduction, so it vectorizes without reordering float adds.
template <typename T>
inline void gemm_acc(T* dst, const T* a, const T* b, int r, int k, int n) {
  long grain = r > 64 ? 8 : static_cast<long>(r);
  parallel_for(r, grain, [&](long i0, long i1) {
    for (long i = i0; i < i1; ++i) {
      T* drow = dst + i * n;
      const T* arow = a + i * k;
      for (int kk = 0; kk < k; ++kk) {
        T av = arow[kk];
        const T* brow = b + static_cast<long>(kk) * n;
        for (int j = 0; j < n; ++j) drow[j] += av * brow[j];
      }
    }
  });
}

template <typename T>
inline void transpose_into(std::vector<T>& dst, const T* src, int r, int c) {
  dst.resize(static_cast<std::size_t>(r) * c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) dst[static_cast<std::size_t>(j) * r + i] = src[static_cast<std::size_t>(i) * c + j];
}

template <typename T>
class Graph {
 public:
  struct NodeRef {
    int i = -1;
    bool ok() const { return i >= 0; }
  };

  // ----- leaves -----

  // Registers a parameter leaf. Repeated registration of the same index
  // returns the existing node so gradients from multiple uses accumulate.
  NodeRef param(int param_idx, const Tensor<T>& v) {
    for (const auto& [idx, node] : param_nodes_)
      if (idx == param_idx) return NodeRef{node};
    Node nd;
    nd.op = Op::kParam;
    nd.val = v;
    nd.iparam = param_idx;
    param_nodes_.push_back({param_idx, static_cast<int>(nodes_.size())});
    return push(std::move(nd));
  }

  // ----- ops -----

  NodeRef embed_gather(NodeRef tok_emb, NodeRef pos_emb, const Tensor<int>& tokens) {
    const Tensor<T>& te = val(tok_emb);
    const Tensor<T>& pe = val(pos_emb);
    int v = te.dim(0), d = te.dim(1);
    int bsz = tokens.dim(0), len = tokens.dim(1);
    if (len > pe.dim(0))
      throw std::invalid_argument("embed: sequence length " + std::to_string(len) +
                                  " exceeds positional table " + std::to_string(pe.dim(0)));
    Node nd;
    nd.op = Op::kEmbed;
    nd.a = tok_emb.i;
    nd.b = pos_emb.i;
    nd.itab = tokens;
    nd.val = Tensor<T>({bsz, len, d});
    for (int bi = 0; bi < bsz; ++bi)
      for (int l = 0; l < len; ++l) {
        int tok = tokens.at(bi, l);
        if (tok < 0 || tok >= v)
          throw std::invalid_argument("embed: token id " + std::to_string(tok) +
                                      " out of range [0," + std::to_string(v) + ")");
        const T* tr = te.ptr() + static_cast<std::size_t>(tok) * d;
        const T* pr = pe.ptr() + static_cast<std::size_t>(l) * d;
        T* o = &nd.val.at(bi, l, 0);
        for (int j = 0; j < d; ++j) o[j] = tr[j] + pr[j];
      }
    return push(std::move(nd));
  }

  NodeRef layer_norm(NodeRef x, NodeRef gamma, NodeRef beta) {
    const Tensor<T>& xv = val(x);
    int d = xv.shape.back();
    long rows = static_cast<long>(xv.size()) / d;
    Node nd;
    nd.op = Op::kLayerNorm;
    nd.a = x.i;
    nd.b = gamma.i;
    nd.c = beta.i;
    nd.val = Tensor<T>(xv.shape);
    nd.aux = Tensor<T>({static_cast<int>(rows), d + 1});  // xhat rows plus 1/sigma
    const T* g = val(gamma).ptr();
    const T* bt = val(beta).ptr();
    const T eps = static_cast<T>(1e-5);
    for (long r = 0; r < rows; ++r) {
      const T* in = xv.ptr() + r * d;
      T* out = nd.val.ptr() + r * d;
      T* xh = nd.aux.ptr() + r * (d + 1);
      T mu = T(0);
      for (int j = 0; j < d; ++j) mu += in[j];
      mu /= static_cast<T>(d);
      T var = T(0);
      for (int j = 0; j < d; ++j) {
        T c = in[j] - mu;
        var += c * c;
      }
      var /= static_cast<T>(d);
      T inv = T(1) / std::sqrt(var + eps);
      for (int j = 0; j < d; ++j) {
        xh[j] = (in[j] - mu) * inv;
        out[j] = xh[j] * g[j] + bt[j];
      }
      xh[d] = inv;
    }
    return push(std::move(nd));
  }

  // y = x @ w + b; x is treated as [rows, din], b may be {-1} for none.
  NodeRef linear(NodeRef x, NodeRef w, NodeRef b) {
    const Tensor<T>& xv = val(x);
    const Tensor<T>& wv = val(w);
    int din = wv.dim(0), dout = wv.dim(1);
    if (xv.shape.back() != din)
      throw std::invalid_argument("linear: input width " + std::to_string(xv.shape.back()) +
                                  " vs weight " + wv.shape_str());
    long rows = static_cast<long>(xv.size()) / din;
    Node nd;
    nd.op = Op::kLinear;
    nd.a = x.i;
    nd.b = w.i;
    nd.c = b.ok() ? b.i : -1;
    std::vector<int> oshape = xv.shape;
    oshape.back() = dout;
    nd.val = Tensor<T>(oshape);
    if (nd.c >= 0) {
      const T* bias = val(b).ptr();
      for (long r = 0; r < rows; ++r) {
        T* o = nd.val.ptr() + r * dout;
        for (int j = 0; j < dout; ++j) o[j] = bias[j];
      }
    }
    gemm_acc(nd.val.ptr(), xv.ptr(), wv.ptr(), static_cast<int>(rows), din, dout);
    return push(std::move(nd));
  }

  NodeRef gelu(NodeRef x) {
    const Tensor<T>& xv = val(x);
    Node nd;
    nd.op = Op::kGelu;
    nd.a = x.i;
    nd.val = Tensor<T>(xv.shape);
    for (std::size_t i = 0; i < xv.size(); ++i) nd.val[i] = gelu_fwd(xv[i]);
    return push(std::move(nd));
  }

  // Bidirectional multi-head self-attention over packed qkv [B,L,3D].
  NodeRef attention(NodeRef qkv, int n_heads) {
    const Tensor<T>& q3 = val(qkv);
    int bsz = q3.dim(0), len = q3.dim(1), d3 = q3.dim(2);
    int d = d3 / 3;
    if (d3 % 3 != 0 || d % n_heads != 0)
      throw std::invalid_argument("attention: qkv width " + std::to_string(d3) +
                                  " not divisible for " + std::to_string(n_heads) + " heads");
    int dh = d / n_heads;
    Node nd;
    nd.op = Op::kAttn;
    nd.a = qkv.i;
    nd.iparam = n_heads;
    nd.val = Tensor<T>({bsz, len, d});
    nd.aux = Tensor<T>({bsz * n_heads, len, len});  // softmax rows, kept for backward
    T scale = T(1) / std::sqrt(static_cast<T>(dh));
    parallel_for(static_cast<long>(bsz) * n_heads, 1, [&](long i0, long i1) {
      std::vector<T> qb(static_cast<std::size_t>(len) * dh), kb(qb.size()), vb(qb.size());
      std::vector<T> kt(qb.size()), srow;
      for (long bh = i0; bh < i1; ++bh) {
        int bi = static_cast<int>(bh) / n_heads, h = static_cast<int>(bh) % n_heads;
        gather_head(q3, bi, h * dh, dh, qb);
        gather_head(q3, bi, d + h * dh, dh, kb);
        gather_head(q3, bi, 2 * d + h * dh, dh, vb);
        transpose_into(kt, kb.data(), len, dh);
        T* p = nd.aux.ptr() + bh * len * len;
        std::fill(p, p + static_cast<std::size_t>(len) * len, T(0));
        gemm_acc(p, qb.data(), kt.data(), len, dh, len);
        for (int l = 0; l < len; ++l) {
          T* row = p + static_cast<std::size_t>(l) * len;
          for (int m = 0; m < len; ++m) row[m] *= scale;
          softmax_row(row, row, len);
        }
        srow.assign(static_cast<std::size_t>(len) * dh, T(0));
        gemm_acc(srow.data(), p, vb.data(), len, len, dh);
        for (int l = 0; l < len; ++l) {
          T* o = &nd.val.at(bi, l, h * dh);
          for (int j = 0; j < dh; ++j) o[j] = srow[static_cast<std::size_t>(l) * dh + j];
        }
      }
    });
    return push(std::move(nd));
  }

  NodeRef add(NodeRef a, NodeRef b) {
    const Tensor<T>& av = val(a);
    const Tensor<T>& bv = val(b);
    if (!av.same_shape(bv))
      throw std::invalid_argument("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Node nd;
    nd.op = Op::kAdd;
    nd.a = a.i;
    nd.b = b.i;
    nd.val = Tensor<T>(av.shape);
    for (std::size_t i = 0; i < av.size(); ++i) nd.val[i] = av[i] + bv[i];
    return push(std::move(nd));
  }

  NodeRef log_softmax(NodeRef x) {
    const Tensor<T>& xv = val(x);
    int v = xv.shape.back();
    long rows = static_cast<long>(xv.size()) / v;
    Node nd;
    nd.op = Op::kLogSoftmax;
    nd.a = x.i;
    nd.val = Tensor<T>(xv.shape);
    for (long r = 0; r < rows; ++r) log_softmax_row(xv.ptr() + r * v, nd.val.ptr() + r * v, v);
    return push(std::move(nd));
  }

  // Scalar: sum over (b,l) of coeff[b,l] * logp[b,l,target[b,l]].
  // Positions with coeff 0 are skipped, so targets there may be any valid id.
  NodeRef weighted_logp_sum(NodeRef logp, const Tensor<int>& targets, const Tensor<T>& coeff) {
    const Tensor<T>& lp = val(logp);
    check_bl(lp, targets, coeff, "weighted_logp_sum");
    int v = lp.shape.back();
    Node nd;
    nd.op = Op::kWlogpSum;
    nd.a = logp.i;
    nd.itab = targets;
    nd.ctab = coeff;
    double acc = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      int t = targets[i];
      if (coeff[i] == T(0)) continue;
      if (t < 0 || t >= v) throw std::invalid_argument("weighted_logp_sum: target id out of range");
      acc += static_cast<double>(coeff[i]) * static_cast<double>(lp[i * v + t]);
    }
    nd.val = Tensor<T>({1});
    nd.val[0] = static_cast<T>(acc);
    return push(std::move(nd));
  }

  // [B,L] of logp[b,l,target[b,l]].
  NodeRef gather_logp(NodeRef logp, const Tensor<int>& targets) {
    const Tensor<T>& lp = val(logp);
    int v = lp.shape.back();
    Node nd;
    nd.op = Op::kGatherLogp;
    nd.a = logp.i;
    nd.itab = targets;
    nd.val = Tensor<T>(targets.shape);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      int t = targets[i];
      if (t < 0 || t >= v) throw std::invalid_argument("gather_logp: target id out of range");
      nd.val[i] = lp[i * v + t];
    }
    return push(std::move(nd));
  }

  // Pointwise min(r*A, clip(r, 1-eps, 1+eps)*A) with r = exp(lnew - lold);
  // adv is one value per row (sequence). Ties select the unclipped branch.
  NodeRef clipped_ratio(NodeRef lnew, const Tensor<T>& lold, const Tensor<T>& adv, T eps) {
    const Tensor<T>& ln = val(lnew);
    if (!ln.same_shape(lold)) throw std::invalid_argument("clipped_ratio: old loglik shape mismatch");
    if (adv.size() != static_cast<std::size_t>(ln.dim(0)))
      throw std::invalid_argument("clipped_ratio: advantage count mismatch");
    Node nd;
    nd.op = Op::kClipRatio;
    nd.a = lnew.i;
    nd.ctab = lold;
    nd.ctab2 = adv;
    nd.scalar0 = eps;
    nd.val = Tensor<T>(ln.shape);
    int cols = ln.rank() > 1 ? ln.dim(1) : 1;
    for (std::size_t i = 0; i < ln.size(); ++i) {
      T a = adv[i / cols];
      T r = std::exp(ln[i] - lold[i]);
      T rc = std::min(std::max(r, T(1) - eps), T(1) + eps);
      nd.val[i] = std::min(r * a, rc * a);
    }
    return push(std::move(nd));
  }

  // Pointwise exp(d) - d - 1 with d = lref - lnew (>= 0, zero iff d == 0).
  NodeRef kl3(NodeRef lnew, const Tensor<T>& lref) {
    const Tensor<T>& ln = val(lnew);
    if (!ln.same_shape(lref)) throw std::invalid_argument("kl3: ref loglik shape mismatch");
    Node nd;
    nd.op = Op::kKl3;
    nd.a = lnew.i;
    nd.ctab = lref;
    nd.val = Tensor<T>(ln.shape);
    for (std::size_t i = 0; i < ln.size(); ++i) {
      T d = lref[i] - ln[i];
      nd.val[i] = std::expm1(d) - d;
    }
    return push(std::move(nd));
  }

  // Scalar: sum of w[i] * x[i]; the masked-sum primitive.
  NodeRef weighted_sum(NodeRef x, const Tensor<T>& w) {
    const Tensor<T>& xv = val(x);
    if (!xv.same_shape(w)) throw std::invalid_argument("weighted_sum: weight shape mismatch");
    Node nd;
    nd.op = Op::kWSum;
    nd.a = x.i;
    nd.ctab = w;
    double acc = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i)
      acc += static_cast<double>(w[i]) * static_cast<double>(xv[i]);
    nd.val = Tensor<T>({1});
    nd.val[0] = static_cast<T>(acc);
    return push(std::move(nd));
  }

  // Scalar: sum of coeffs[i] * scalars[i].
  NodeRef combine(const std::vector<NodeRef>& xs, const std::vector<T>& coeffs) {
    if (xs.size() != coeffs.size() || xs.empty())
      throw std::invalid_argument("combine: need matching, nonempty nodes and coeffs");
    Node nd;
    nd.op = Op::kCombine;
    double acc = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const Tensor<T>& v = val(xs[i]);
      if (v.size() != 1) throw std::invalid_argument("combine: inputs must be scalars");
      nd.parents_n.push_back(xs[i].i);
      nd.coeffs.push_back(coeffs[i]);
      acc += static_cast<double>(coeffs[i]) * static_cast<double>(v[0]);
    }
    nd.val = Tensor<T>({1});
    nd.val[0] = static_cast<T>(acc);
    return push(std::move(nd));
  }

  // ----- access -----

  const Tensor<T>& val(NodeRef r) const {
    if (!r.ok() || r.i >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("graph: dangling node reference");
    return nodes_[static_cast<std::size_t>(r.i)].val;
  }

  // Gradient of a parameter registered via param(); nullptr when the
  // parameter never joined the graph or received no gradient.
  const Tensor<T>* param_grad(int param_idx) const {
    for (const auto& [idx, node] : param_nodes_)
      if (idx == param_idx) {
        const Tensor<T>& g = nodes_[static_cast<std::size_t>(node)].grad;
        return g.size() ? &g : nullptr;
      }
    return nullptr;
  }

  // ----- backward -----

  void backward(NodeRef loss) {
    if (!loss.ok()) throw std::invalid_argument("backward: null loss node");
    if (ran_backward_) throw std::invalid_argument("backward: tape already consumed");
    Node& ln = nodes_[static_cast<std::size_t>(loss.i)];
    if (ln.val.size() != 1) throw std::invalid_argument("backward: loss must be a scalar node");
    ran_backward_ = true;
    ln.grad = Tensor<T>({1}, T(1));
    for (int i = loss.i; i >= 0; --i) {
      Node& nd = nodes_[static_cast<std::size_t>(i)];
      if (!nd.grad.size()) continue;  // not on any path to the loss
      dispatch_backward(nd);
    }
  }

 private:
  enum class Op {
    kParam,
    kEmbed,
    kLayerNorm,
    kLinear,
    kGelu,
    kAttn,
    kAdd,
    kLogSoftmax,
    kWlogpSum,
    kGatherLogp,
    kClipRatio,
    kKl3,
    kWSum,
    kCombine,
  };

  struct Node {
    Op op;
    Tensor<T> val;
    Tensor<T> grad;
    int a = -1, b = -1, c = -1;
    Tensor<int> itab;
    Tensor<T> aux;
    Tensor<T> ctab, ctab2;
    std::vector<int> parents_n;
    std::vector<T> coeffs;
    T scalar0 = T(0);
    int iparam = -1;
  };

  NodeRef push(Node&& nd) {
    nodes_.push_back(std::move(nd));
    return NodeRef{static_cast<int>(nodes_.size()) - 1};
  }

  Tensor<T>& grad_of(int idx) {
    Node& nd = nodes_[static_cast<std::size_t>(idx)];
    if (!nd.grad.size()) nd.grad = Tensor<T>(nd.val.shape);
    return nd.grad;
  }

  static T gelu_fwd(T x) {
    const T c = static_cast<T>(0.7978845608028654);
    const T a = static_cast<T>(0.044715);
    return T(0.5) * x * (T(1) + std::tanh(c * (x + a * x * x * x)));
  }

  static T gelu_bwd(T x) {
    const T c = static_cast<T>(0.7978845608028654);
    const T a = static_cast<T>(0.044715);
    T u = c * (x + a * x * x * x);
    T t = std::tanh(u);
    T du = c * (T(1) + T(3) * a * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
  }

  void gather_head(const Tensor<T>& q3, int bi, int off, int dh, std::vector<T>& out) const {
    int len = q3.dim(1);
    for (int l = 0; l < len; ++l) {
      const T* src = &q3.at(bi, l, off);
      T* dst = out.data() + static_cast<std::size_t>(l) * dh;
      for (int j = 0; j < dh; ++j) dst[j] = src[j];
    }
  }

  static void check_bl(const Tensor<T>& lp, const Tensor<int>& targets, const Tensor<T>& coeff,
                       const char* who) {
    std::size_t rows = lp.size() / lp.shape.back();
    if (targets.size() != rows || coeff.size() != rows)
      throw std::invalid_argument(std::string(who) + ": targets/coeff size mismatch");
  }

  void dispatch_backward(Node& nd) {
    switch (nd.op) {
      case Op::kParam:
        break;
      case Op::kEmbed: {
        Tensor<T>& dte = grad_of(nd.a);
        Tensor<T>& dpe = grad_of(nd.b);
        int d = nd.val.shape.back();
        int bsz = nd.itab.dim(0), len = nd.itab.dim(1);
        for (int bi = 0; bi < bsz; ++bi)
          for (int l = 0; l < len; ++l) {
            const T* g = &nd.grad.at(bi, l, 0);
            T* tr = dte.ptr() + static_cast<std::size_t>(nd.itab.at(bi, l)) * d;
            T* pr = dpe.ptr() + static_cast<std::size_t>(l) * d;
            for (int j = 0; j < d; ++j) {
              tr[j] += g[j];
              pr[j] += g[j];
            }
          }
        break;
      }
      case Op::kLayerNorm: {
        Tensor<T>& dx = grad_of(nd.a);
        Tensor<T>& dg = grad_of(nd.b);
        Tensor<T>& db = grad_of(nd.c);
        const T* gamma = nodes_[static_cast<std::size_t>(nd.b)].val.ptr();
        int d = nd.val.shape.back();
        long rows = static_cast<long>(nd.val.size()) / d;
        std::vector<T> dxh(static_cast<std::size_t>(d));
        for (long r = 0; r < rows; ++r) {
          const T* g = nd.grad.ptr() + r * d;
          const T* xh = nd.aux.ptr() + r * (d + 1);
          T inv = xh[d];
          T m1 = T(0), m2 = T(0);
          for (int j = 0; j < d; ++j) {
            dg.ptr()[j] += g[j] * xh[j];
            db.ptr()[j] += g[j];
            dxh[static_cast<std::size_t>(j)] = g[j] * gamma[j];
            m1 += dxh[static_cast<std::size_t>(j)];
            m2 += dxh[static_cast<std::size_t>(j)] * xh[j];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          T* out = dx.ptr() + r * d;
          for (int j = 0; j < d; ++j) out[j] += inv * (dxh[static_cast<std::size_t>(j)] - m1 - xh[j] * m2);
        }
        break;
      }
      case Op::kLinear: {
        const Tensor<T>& xv = nodes_[static_cast<std::size_t>(nd.a)].val;
        const Tensor<T>& wv = nodes_[static_cast<std::size_t>(nd.b)].val;
        int din = wv.dim(0), dout = wv.dim(1);
        long rows = static_cast<long>(xv.size()) / din;
        Tensor<T>& dx = grad_of(nd.a);
        Tensor<T>& dw = grad_of(nd.b);
        std::vector<T> wt, xt;
        transpose_into(wt, wv.ptr(), din, dout);  // [dout, din]
        gemm_acc(dx.ptr(), nd.grad.ptr(), wt.data(), static_cast<int>(rows), dout, din);
        transpose_into(xt, xv.ptr(), static_cast<int>(rows), din);  // [din, rows]
        gemm_acc(dw.ptr(), xt.data(), nd.grad.ptr(), din, static_cast<int>(rows), dout);
        if (nd.c >= 0) {
          Tensor<T>& db = grad_of(nd.c);
          for (long r = 0; r < rows; ++r) {
            const T* g = nd.grad.ptr() + r * dout;
            for (int j = 0; j < dout; ++j) db.ptr()[j] += g[j];
          }
        }
        break;
      }
      case Op::kGelu: {
        Tensor<T>& dx = grad_of(nd.a);
        const Tensor<T>& xv = nodes_[static_cast<std::size_t>(nd.a)].val;
        for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += nd.grad[i] * gelu_bwd(xv[i]);
        break;
      }
      case Op::kAttn: {
        const Tensor<T>& q3 = nodes_[static_cast<std::size_t>(nd.a)].val;
        Tensor<T>& dq3 = grad_of(nd.a);
        int n_heads = nd.iparam;
        int bsz = q3.dim(0), len = q3.dim(1), d = q3.dim(2) / 3;
        int dh = d / n_heads;
        T scale = T(1) / std::sqrt(static_cast<T>(dh));
        parallel_for(static_cast<long>(bsz) * n_heads, 1, [&](long i0, long i1) {
          std::vector<T> qb(static_cast<std::size_t>(len) * dh), kb(qb.size()), vb(qb.size());
          std::vector<T> go(qb.size()), pt, vt, qt, dp(static_cast<std::size_t>(len) * len);
          std::vector<T> dq(qb.size()), dk(qb.size()), dv(qb.size()), dst;
          for (long bh = i0; bh < i1; ++bh) {
            int bi = static_cast<int>(bh) / n_heads, h = static_cast<int>(bh) % n_heads;
            gather_head(q3, bi, h * dh, dh, qb);
            gather_head(q3, bi, d + h * dh, dh, kb);
            gather_head(q3, bi, 2 * d + h * dh, dh, vb);
            for (int l = 0; l < len; ++l) {
              const T* src = &nd.grad.at(bi, l, h * dh);
              for (int j = 0; j < dh; ++j) go[static_cast<std::size_t>(l) * dh + j] = src[j];
            }
            const T* p = nd.aux.ptr() + bh * len * len;
            // dV = P^T go
            transpose_into(pt, p, len, len);
            std::fill(dv.begin(), dv.end(), T(0));
            gemm_acc(dv.data(), pt.data(), go.data(), len, len, dh);
            // dP = go V^T
            transpose_into(vt, vb.data(), len, dh);
            std::fill(dp.begin(), dp.end(), T(0));
            gemm_acc(dp.data(), go.data(), vt.data(), len, dh, len);
            // dS = P * (dP - rowdot(dP, P)), scaled
            for (int l = 0; l < len; ++l) {
              const T* prow = p + static_cast<std::size_t>(l) * len;
              T* dprow = dp.data() + static_cast<std::size_t>(l) * len;
              T dot = T(0);
              for (int m = 0; m < len; ++m) dot += dprow[m] * prow[m];
              for (int m = 0; m < len; ++m) dprow[m] = prow[m] * (dprow[m] - dot) * scale;
            }
            // dQ = dS K ; dK = dS^T Q
            std::fill(dq.begin(), dq.end(), T(0));
            gemm_acc(dq.data(), dp.data(), kb.data(), len, len, dh);
            transpose_into(dst, dp.data(), len, len);
            std::fill(dk.begin(), dk.end(), T(0));
            gemm_acc(dk.data(), dst.data(), qb.data(), len, len, dh);
            for (int l = 0; l < len; ++l) {
              T* q3g = &dq3.at(bi, l, h * dh);
              T* k3g = &dq3.at(bi, l, d + h * dh);
              T* v3g = &dq3.at(bi, l, 2 * d + h * dh);
              for (int j = 0; j < dh; ++j) {
                q3g[j] += dq[static_cast<std::size_t>(l) * dh + j];
                k3g[j] += dk[static_cast<std::size_t>(l) * dh + j];
                v3g[j] += dv[static_cast<std::size_t>(l) * dh + j];
              }
            }
          }
        });
        break;
      }
      case Op::kAdd: {
        Tensor<T>& da = grad_of(nd.a);
        Tensor<T>& db = grad_of(nd.b);
        for (std::size_t i = 0; i < nd.grad.size(); ++i) {
          da[i] += nd.grad[i];
          db[i] += nd.grad[i];
        }
        break;
      }
      case Op::kLogSoftmax: {
        Tensor<T>& dx = grad_of(nd.a);
        int v = nd.val.shape.back();
        long rows = static_cast<long>(nd.val.size()) / v;
        for (long r = 0; r < rows; ++r) {
          const T* g = nd.grad.ptr() + r * v;
          const T* y = nd.val.ptr() + r * v;
          T* o = dx.ptr() + r * v;
          T s = T(0);
          for (int j = 0; j < v; ++j) s += g[j];
          for (int j = 0; j < v; ++j) o[j] += g[j] - std::exp(y[j]) * s;
        }
        break;
      }
      case Op::kWlogpSum: {
        Tensor<T>& dx = grad_of(nd.a);
        int v = nodes_[static_cast<std::size_t>(nd.a)].val.shape.back();
        T g0 = nd.grad[0];
        for (std::size_t i = 0; i < nd.itab.size(); ++i) {
          if (nd.ctab[i] == T(0)) continue;
          dx[i * v + nd.itab[i]] += g0 * nd.ctab[i];
        }
        break;
      }
      case Op::kGatherLogp: {
        Tensor<T>& dx = grad_of(nd.a);
        int v = nodes_[static_cast<std::size_t>(nd.a)].val.shape.back();
        for (std::size_t i = 0; i < nd.itab.size(); ++i) dx[i * v + nd.itab[i]] += nd.grad[i];
        break;
      }
      case Op::kClipRatio: {
        Tensor<T>& dx = grad_of(nd.a);
        const Tensor<T>& ln = nodes_[static_cast<std::size_t>(nd.a)].val;
        T eps = nd.scalar0;
        int cols = ln.rank() > 1 ? ln.dim(1) : 1;
        for (std::size_t i = 0; i < ln.size(); ++i) {
          T a = nd.ctab2[i / cols];
          T r = std::exp(ln[i] - nd.ctab[i]);
          T rc = std::min(std::max(r, T(1) - eps), T(1) + eps);
          T d;
          if (r * a <= rc * a) {
            d = a * r;  // unclipped branch (also taken on exact ties)
          } else {
            d = (r > T(1) - eps && r < T(1) + eps) ? a * r : T(0);
          }
          dx[i] += nd.grad[i] * d;
        }
        break;
      }
      case Op::kKl3: {
        Tensor<T>& dx = grad_of(nd.a);
        const Tensor<T>& ln = nodes_[static_cast<std::size_t>(nd.a)].val;
        for (std::size_t i = 0; i < ln.size(); ++i)
          dx[i] += nd.grad[i] * (-std::expm1(nd.ctab[i] - ln[i]));
        break;
      }
      case Op::kWSum: {
        Tensor<T>& dx = grad_of(nd.a);
        T g0 = nd.grad[0];
        for (std::size_t i = 0; i < nd.ctab.size(); ++i) dx[i] += g0 * nd.ctab[i];
        break;
      }
      case Op::kCombine: {
        T g0 = nd.grad[0];
        for (std::size_t i = 0; i < nd.parents_n.size(); ++i)
          grad_of(nd.parents_n[i])[0] += g0 * nd.coeffs[i];
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<int, int>> param_nodes_;
  bool ran_backward_ = false;
};

}  // namespace dlmwpo
