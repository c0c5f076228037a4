#pragma once

#include <map>
#include <optional>

#include "attention.hpp"
#include "memory.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "sparse.hpp"
#include "structure.hpp"
#include "tensor.hpp"

namespace ressformer {

struct ModelConfig {
  long vocab_size = 256;
  long d_model = 64;
  long n_heads = 4;
  long K = 4;       // recurrent iterations of the weight-tied block
  long k_top = 32;  // keys kept per query
  long m = 16;      // segment-memory slots
  long E = 8;       // experts
  long e = 2;       // active experts per token
  Phi phi = Phi::entmax15;
  double lambda_struct = 0.1;
  double lambda_bias = 1.0;
  double load_balance_coeff = 0.0;
  double dropout_rate = 0.0;
  double router_temp = 1.0;
  long max_len = 2048;  // positional table rows; used only when disable_soes
  bool disable_r2mu = false;
  bool disable_asam = false;
  bool disable_soes = false;

  long d_head() const { return d_model / n_heads; }
  long d_struct() const { return d_model / 2; }
  long ffn_hidden() const { return 4 * d_model; }

  void validate() const {
    auto req = [](bool ok, const std::string& msg) {
      if (!ok) throw std::invalid_argument("config: " + msg);
    };
    req(vocab_size >= 2, "vocab_size must be >= 2");
    req(d_model >= 2 && d_model % 2 == 0, "d_model must be even and >= 2");
    req(n_heads >= 1 && d_model % n_heads == 0, "d_model must be divisible by n_heads");
    req(K >= 1, "K must be >= 1");
    req(k_top >= 1, "k_top must be >= 1");
    req(m >= 1, "m must be >= 1");
    req(E >= 1 && e >= 1 && e <= E, "need 1 <= e <= E");
    req(router_temp > 0, "router_temp must be positive");
    req(dropout_rate >= 0 && dropout_rate < 1, "dropout_rate must be in [0, 1)");
    req(max_len >= 1, "max_len must be >= 1");
  }
};

// The paper-faithful preset sizes; everything else keeps desk defaults.
inline void apply_preset(ModelConfig& cfg, const std::string& name) {
  if (name == "desk") {
    cfg.d_model = 64;
    cfg.n_heads = 4;
    cfg.K = 4;
    cfg.k_top = 32;
    cfg.m = 16;
    cfg.E = 8;
    cfg.e = 2;
  } else if (name == "paper") {
    cfg.K = 4;
    cfg.k_top = 32;
    cfg.m = 128;
    cfg.E = 8;
    cfg.e = 2;
  } else {
    throw std::invalid_argument("unknown preset '" + name + "' (expected desk or paper)");
  }
}

enum class Ablation { r2mu, asam, soes, all };

inline Ablation ablation_from_name(const std::string& s) {
  if (s == "r2mu") return Ablation::r2mu;
  if (s == "asam") return Ablation::asam;
  if (s == "soes") return Ablation::soes;
  if (s == "all") return Ablation::all;
  throw std::invalid_argument("unknown module '" + s + "' (expected r2mu, asam, soes, or all)");
}

inline std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::r2mu: return "r2mu";
    case Ablation::asam: return "asam";
    case Ablation::soes: return "soes";
    case Ablation::all: return "all";
  }
  return "?";
}

// r2mu off: no memory rows, no gates, K iterations kept. asam off: dense
// softmax attention and all experts active. soes off: no edge scores, no
// structure loss, and a learned absolute positional embedding is added so the
// ablated model retains order information.
inline ModelConfig ablate(ModelConfig cfg, Ablation which) {
  switch (which) {
    case Ablation::r2mu:
      cfg.disable_r2mu = true;
      break;
    case Ablation::asam:
      cfg.disable_asam = true;
      break;
    case Ablation::soes:
      cfg.disable_soes = true;
      break;
    case Ablation::all:
      cfg.disable_r2mu = cfg.disable_asam = cfg.disable_soes = true;
      break;
  }
  return cfg;
}

struct ParamSet {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor& add(const std::string& name, Shape shape) {
    items.push_back({name, Tensor::zeros(std::move(shape))});
    items.back().second.set_requires_grad(true);
    return items.back().second;
  }
  Tensor* find(const std::string& name) {
    for (auto& [k, v] : items)
      if (k == name) return &v;
    return nullptr;
  }
  const Tensor* find(const std::string& name) const {
    for (auto& [k, v] : items)
      if (k == name) return &v;
    return nullptr;
  }
  Tensor& get(const std::string& name) {
    Tensor* t = find(name);
    if (!t) throw std::logic_error("missing parameter " + name);
    return *t;
  }
  const Tensor& get(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw std::logic_error("missing parameter " + name);
    return *t;
  }
  long total_size() const {
    long s = 0;
    for (const auto& [k, v] : items) s += v.size();
    return s;
  }
  void zero_grads() {
    for (auto& [k, v] : items) v.zero_grad();
  }
};

inline void fill_normal(Tensor& t, Rng& rng, double std) {
  for (long i = 0; i < t.size(); ++i) t.st->data[i] = rng.normal(0.0, std);
}

// One weight-tied block; the parameter set is independent of K by
// construction. The positional table exists only for the soes-off ablation.
inline ParamSet init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamSet p;
  long d = cfg.d_model;
  double w_std = 1.0 / std::sqrt((double)d);

  fill_normal(p.add("embed", {cfg.vocab_size, d}), rng, 0.05);
  if (cfg.disable_soes) fill_normal(p.add("pos", {cfg.max_len, d}), rng, 0.05);

  for (const char* ln : {"ln1", "ln2", "lnf"}) {
    p.add(std::string(ln) + ".gain", {d});
    p.add(std::string(ln) + ".bias", {d});
    for (long i = 0; i < d; ++i) p.get(std::string(ln) + ".gain").at(i) = 1.0;
  }

  for (const char* w : {"attn.wq", "attn.wk", "attn.wv"}) fill_normal(p.add(w, {d, d}), rng, w_std);
  fill_normal(p.add("attn.wo", {d, d}), rng, w_std * 0.5);
  for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) p.add(b, {d});

  fill_normal(p.add("router.w", {d, cfg.E}), rng, w_std);
  for (long j = 0; j < cfg.E; ++j) {
    std::string base = "moe.e" + std::to_string(j);
    fill_normal(p.add(base + ".w1", {d, cfg.ffn_hidden()}), rng, w_std);
    p.add(base + ".b1", {cfg.ffn_hidden()});
    fill_normal(p.add(base + ".w2", {cfg.ffn_hidden(), d}), rng,
                0.5 / std::sqrt((double)cfg.ffn_hidden()));
    p.add(base + ".b2", {d});
  }

  fill_normal(p.add("soes.wq", {d, cfg.d_struct()}), rng, w_std);
  fill_normal(p.add("soes.wk", {d, cfg.d_struct()}), rng, w_std);
  fill_normal(p.add("soes.bucket", {d}), rng, 1.0);

  fill_normal(p.add("mem.pool_q", {cfg.m, d}), rng, 1.0);
  p.add("mem.gate.w", {2 * d, 1});
  p.add("mem.gate.b", {1});
  return p;
}

struct TraceOptions {
  bool enabled = false;
  long graph_edges_per_node = 4;  // kept per query row in exported graphs
};

struct ForwardResult {
  Tensor logits;       // [B*n x vocab]
  Tensor struct_sum;   // undefined when no regularizer applies
  Tensor balance;      // undefined when routing never ran
  std::vector<Tensor> graphs;
  std::vector<StepTrace> traces;  // per sequence, when tracing
};

struct LossBreakdown {
  Tensor total;
  double cross_entropy = 0;
  double structure = 0;
  double balance = 0;
};

inline Tensor dropout_mask(const Tensor& x, double rate, Rng& rng) {
  Tensor mask = Tensor::zeros(x.shape);
  double keep = 1.0 - rate;
  for (long i = 0; i < mask.size(); ++i)
    mask.st->data[i] = (rng.uniform() < keep) ? 1.0 / keep : 0.0;
  return mul(x, mask);
}

// Algorithm: embed (no positions), then K weight-tied iterations of
//   graph <- edge scores of H      (unless soes off)
//   mem   <- update from H         (unless r2mu off)
//   H     <- H + attn(LN(H), [LN(H) | mem], bias)
//   H     <- H + moe(LN(H))
// followed by a final norm and the tied-embedding readout.
inline ForwardResult forward(const std::vector<std::vector<int>>& batch_ids, ParamSet& p,
                             const ModelConfig& cfg, const TraceOptions& topt = {},
                             const ForwardHooks& hooks = {}, Rng* dropout_rng = nullptr) {
  cfg.validate();
  long batch = (long)batch_ids.size();
  if (batch == 0) throw std::invalid_argument("forward: empty batch");
  long n = (long)batch_ids[0].size();
  if (n == 0) throw std::invalid_argument("forward: empty sequence");
  std::vector<int> flat;
  flat.reserve(batch * n);
  for (const auto& seq : batch_ids) {
    if ((long)seq.size() != n)
      throw std::invalid_argument("forward: ragged batch (expected uniform length " +
                                  std::to_string(n) + ")");
    for (int id : seq) {
      if (id < 0 || id >= cfg.vocab_size)
        throw std::invalid_argument("forward: token id " + std::to_string(id) +
                                    " out of range for vocab " + std::to_string(cfg.vocab_size));
      flat.push_back(id);
    }
  }

  ForwardResult res;
  Tensor h = gather_rows(p.get("embed"), flat);
  if (cfg.disable_soes) {
    if (n > cfg.max_len)
      throw std::invalid_argument("forward: sequence length " + std::to_string(n) +
                                  " exceeds positional table " + std::to_string(cfg.max_len));
    std::vector<int> pos_ids(batch * n);
    for (long i = 0; i < batch * n; ++i) pos_ids[i] = (int)(i % n);
    h = add(h, gather_rows(p.get("pos"), pos_ids));
  }

  if (topt.enabled) res.traces.assign(batch, StepTrace{});

  Phi phi = cfg.disable_asam ? Phi::softmax : cfg.phi;
  long e_active = cfg.disable_asam ? cfg.E : cfg.e;
  bool drop = cfg.dropout_rate > 0 && dropout_rng;

  MemoryParams mp{p.get("mem.pool_q"), p.get("mem.gate.w"), p.get("mem.gate.b")};
  HierMemory mem;
  mem.batch = batch;

  for (long t = 0; t < cfg.K; ++t) {
    IterTrace* iters = nullptr;
    if (topt.enabled) {
      for (long b = 0; b < batch; ++b) res.traces[b].iterations.emplace_back();
    }

    Tensor bias;
    if (!cfg.disable_soes) {
      Tensor edges = score_edges(h, p.get("soes.wq"), p.get("soes.wk"), batch);
      res.graphs.push_back(edges);
      bias = graph_bias(edges, cfg.lambda_bias);
      if (topt.enabled) {
        for (long b = 0; b < batch; ++b)
          res.traces[b].iterations.back().graph = make_latent_graph(
              edges.data() + b * n * n, n, (int)t, topt.graph_edges_per_node);
      }
    }

    Tensor mem_rows;
    if (!cfg.disable_r2mu) {
      PoolTrace ptrace;
      mem = update_memory(h, mem, mp, batch, hooks, topt.enabled ? &ptrace : nullptr);
      if (topt.enabled && mem.alpha.defined()) {
        for (long b = 0; b < batch; ++b)
          res.traces[b].iterations.back().alpha.assign(
              mem.alpha.data() + b * cfg.m, mem.alpha.data() + (b + 1) * cfg.m);
      }
      mem_rows = memory_kv(mem);
    }

    Tensor hn = layer_norm(h, p.get("ln1.gain"), p.get("ln1.bias"), 1e-5);
    Tensor qc = linear(hn, p.get("attn.wq"), p.get("attn.bq"));
    Tensor kc = linear(hn, p.get("attn.wk"), p.get("attn.bk"));
    Tensor vc = linear(hn, p.get("attn.wv"), p.get("attn.bv"));
    Tensor km, vm;
    if (mem_rows.defined()) {
      km = linear(mem_rows, p.get("attn.wk"), p.get("attn.bk"));
      vm = linear(mem_rows, p.get("attn.wv"), p.get("attn.bv"));
    }
    long n_keys = n + (mem_rows.defined() ? mem_rows.dim(0) / batch : 0);
    long k_eff = cfg.disable_asam ? n_keys : cfg.k_top;

    AttnTrace atrace;
    Tensor attn = sparse_attention(qc, kc, vc, km.defined() ? &km : nullptr,
                                   vm.defined() ? &vm : nullptr, bias.defined() ? &bias : nullptr,
                                   batch, cfg.n_heads, k_eff, phi,
                                   topt.enabled ? &atrace : nullptr);
    if (topt.enabled)
      for (long b = 0; b < batch; ++b)
        res.traces[b].iterations.back().attn_heads = atrace.heads[b];

    Tensor attn_out = linear(attn, p.get("attn.wo"), p.get("attn.bo"));
    if (drop) attn_out = dropout_mask(attn_out, cfg.dropout_rate, *dropout_rng);
    h = add(h, attn_out);

    Tensor hn2 = layer_norm(h, p.get("ln2.gain"), p.get("ln2.bias"), 1e-5);
    RoutingDecision dec = route_experts(hn2, p.get("router.w"), cfg.router_temp, e_active);
    std::vector<ExpertParams> experts;
    for (long j = 0; j < cfg.E; ++j) {
      std::string base = "moe.e" + std::to_string(j);
      experts.push_back({p.get(base + ".w1"), p.get(base + ".b1"), p.get(base + ".w2"),
                         p.get(base + ".b2")});
    }
    Tensor ffn = moe_ffn(hn2, dec, experts);
    if (drop) ffn = dropout_mask(ffn, cfg.dropout_rate, *dropout_rng);
    h = add(h, ffn);

    Tensor bal = load_balance_loss(dec.router_probs, dec.expert_sets);
    res.balance = res.balance.defined() ? add(res.balance, bal) : bal;

    if (topt.enabled) {
      for (long b = 0; b < batch; ++b) {
        IterTrace& it = res.traces[b].iterations.back();
        it.expert_sets.assign(dec.expert_sets.begin() + b * n,
                              dec.expert_sets.begin() + (b + 1) * n);
        double norm = 0;
        for (long i = 0; i < n * cfg.d_model; ++i) {
          double v = h.data()[b * n * cfg.d_model + i];
          norm += v * v;
        }
        it.hidden_norm = std::sqrt(norm);
      }
    }
    (void)iters;
  }

  if (res.balance.defined() && cfg.K > 1) res.balance = scale(res.balance, 1.0 / cfg.K);
  if (!cfg.disable_soes && res.graphs.size() >= 2) res.struct_sum = struct_loss(res.graphs);

  Tensor hf = layer_norm(h, p.get("lnf.gain"), p.get("lnf.bias"), 1e-5);
  res.logits = matmul_nt(hf, p.get("embed"));
  return res;
}

// mean token cross-entropy + lambda_struct * struct / batch + coeff * balance
inline LossBreakdown loss(const ForwardResult& fr, const std::vector<long>& targets,
                          const ModelConfig& cfg, long batch) {
  LossBreakdown lb;
  Tensor ce = cross_entropy_rows(fr.logits, targets);
  lb.cross_entropy = ce.at(0);
  lb.total = ce;
  if (fr.struct_sum.defined() && cfg.lambda_struct != 0) {
    Tensor s = scale(fr.struct_sum, cfg.lambda_struct / (double)batch);
    lb.structure = fr.struct_sum.at(0) / (double)batch;
    lb.total = add(lb.total, s);
  }
  if (fr.balance.defined() && cfg.load_balance_coeff != 0) {
    lb.balance = fr.balance.at(0);
    lb.total = add(lb.total, scale(fr.balance, cfg.load_balance_coeff));
  }
  return lb;
}

}  // namespace ressformer
