#pragma once

#include <chrono>
#include <functional>
#include <nlohmann/json.hpp>

#include "checkpoint.hpp"
#include "optimizer.hpp"
#include "tasks.hpp"

namespace ressformer {

struct Metrics {
  double loss = 0;         // full objective (ce + weighted regularizers)
  double ce = 0;           // mean token cross-entropy, nats
  double token_acc = 0;    // argmax == target over scored positions
  double exact_match = 0;  // sequences with every scored position correct
  double perplexity = 0;
  double bpc = 0;  // ce in bits
  long scored = 0;
};

namespace detail {
inline double now_s() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}
}  // namespace detail

inline Metrics evaluate(ParamSet& params, const ModelConfig& cfg, const Dataset& ds,
                        long batch_size) {
  Metrics m;
  double loss_sum = 0, ce_bits = 0;
  long batches = 0, seq_count = 0, seq_exact = 0, tok_correct = 0;
  for (size_t at = 0; at < ds.inputs.size(); at += (size_t)batch_size) {
    size_t end = std::min(ds.inputs.size(), at + (size_t)batch_size);
    std::vector<std::vector<int>> batch(ds.inputs.begin() + at, ds.inputs.begin() + end);
    long B = (long)batch.size(), n = (long)batch[0].size();
    std::vector<long> targets;
    targets.reserve(B * n);
    for (size_t s = at; s < end; ++s)
      targets.insert(targets.end(), ds.targets[s].begin(), ds.targets[s].end());
    ForwardResult fr = forward(batch, params, cfg);
    LossBreakdown lb = loss(fr, targets, cfg, B);
    long scored_here = 0;
    long vocab = fr.logits.shape[1];
    for (long b = 0; b < B; ++b) {
      bool all_ok = true;
      for (long i = 0; i < n; ++i) {
        long r = b * n + i;
        if (targets[r] < 0) continue;
        ++scored_here;
        const double* row = fr.logits.st->data.data() + r * vocab;
        long best = 0;
        for (long c = 1; c < vocab; ++c)
          if (row[c] > row[best]) best = c;
        if (best == targets[r]) ++tok_correct;
        else all_ok = false;
      }
      ++seq_count;
      if (all_ok) ++seq_exact;
    }
    loss_sum += lb.total.at(0);
    ce_bits += lb.cross_entropy * (double)scored_here;
    m.scored += scored_here;
    ++batches;
  }
  m.loss = loss_sum / (double)batches;
  m.ce = m.scored ? ce_bits / (double)m.scored : 0.0;
  m.token_acc = m.scored ? (double)tok_correct / (double)m.scored : 0.0;
  m.exact_match = seq_count ? (double)seq_exact / (double)seq_count : 0.0;
  m.perplexity = std::exp(m.ce);
  m.bpc = m.ce / std::log(2.0);
  return m;
}

struct EvalRecord {
  long step = 0;
  double train_loss = 0;  // mean over steps since the previous record
  double lr = 0;
  double wall_s = 0;
  Metrics dev;
};

struct TrainResult {
  ParamSet params;  // weights from the best dev evaluation
  Metrics best_dev;
  long best_step = -1;
  long steps_run = 0;
  std::string stop_reason;  // max_steps | early_stop | time_budget | target
  std::vector<EvalRecord> history;
};

inline nlohmann::json metrics_json(long step, const std::string& split, const Metrics& m) {
  return nlohmann::json{{"step", step},        {"split", split},
                        {"loss", m.loss},      {"ce", m.ce},
                        {"token_acc", m.token_acc}, {"exact_match", m.exact_match},
                        {"perplexity", m.perplexity}, {"bpc", m.bpc}};
}

// Runs the optimization loop over pre-generated task data. Writes
// metrics.jsonl and the current best checkpoint under out_dir when it is
// non-empty. reached_target, when set, is checked against each dev
// evaluation and ends training early once satisfied.
inline TrainResult train_loop(const RunConfig& rc, const TaskData& td,
                              const std::string& out_dir = "",
                              const std::function<bool(const Metrics&)>& reached_target = {},
                              std::ostream* log = nullptr) {
  rc.validate();
  ModelConfig cfg = rc.model;
  cfg.vocab_size = td.vocab_size;
  RunConfig resolved = rc;
  resolved.model.vocab_size = td.vocab_size;

  TrainResult out;
  out.params = init_params(cfg, rc.seed);
  AdamW opt(rc.train);
  Rng order_rng(rc.seed * 17 + 11), drop_rng(rc.seed * 31 + 7);

  std::ofstream jsonl;
  if (!out_dir.empty()) jsonl.open(out_dir + "/metrics.jsonl", std::ios::trunc);

  long n_train = (long)td.train.inputs.size();
  long B = std::min<long>(rc.train.batch_size, n_train);
  std::vector<long> perm(n_train);
  std::iota(perm.begin(), perm.end(), 0);
  order_rng.shuffle(perm);
  long cursor = 0;

  ParamSet best;  // deep copies of the best dev weights
  double best_ce = std::numeric_limits<double>::infinity();
  long since_best = 0;
  double t0 = detail::now_s(), train_loss_acc = 0;
  long train_loss_n = 0;
  out.stop_reason = "max_steps";

  for (long step = 1; step <= rc.train.steps; ++step) {
    if (cursor + B > n_train) {
      order_rng.shuffle(perm);
      cursor = 0;
    }
    std::vector<std::vector<int>> batch;
    std::vector<long> targets;
    batch.reserve(B);
    for (long i = 0; i < B; ++i) {
      long s = perm[cursor++];
      batch.push_back(td.train.inputs[s]);
      targets.insert(targets.end(), td.train.targets[s].begin(), td.train.targets[s].end());
    }

    ForwardResult fr = forward(batch, out.params, cfg, {}, {}, &drop_rng);
    LossBreakdown lb = loss(fr, targets, cfg, B);
    double lval = lb.total.at(0);
    if (!std::isfinite(lval))
      throw std::runtime_error("training: non-finite loss at step " + std::to_string(step));
    out.params.zero_grads();
    backward(lb.total);
    opt.step(out.params, step);
    train_loss_acc += lval;
    ++train_loss_n;
    out.steps_run = step;

    bool do_eval = (step % rc.train.eval_every == 0) || step == rc.train.steps;
    if (!do_eval) continue;

    EvalRecord rec;
    rec.step = step;
    rec.train_loss = train_loss_acc / (double)train_loss_n;
    rec.lr = lr_at(step, rc.train);
    rec.wall_s = detail::now_s() - t0;
    rec.dev = evaluate(out.params, cfg, td.dev, rc.train.batch_size);
    train_loss_acc = 0;
    train_loss_n = 0;
    out.history.push_back(rec);
    if (jsonl.is_open()) {
      nlohmann::json j = metrics_json(step, "dev", rec.dev);
      j["train_loss"] = rec.train_loss;
      j["lr"] = rec.lr;
      j["wall_s"] = rec.wall_s;
      jsonl << j.dump() << "\n" << std::flush;
    }
    if (log)
      (*log) << "step " << step << " train_loss " << rec.train_loss << " dev_ce " << rec.dev.ce
             << " dev_acc " << rec.dev.token_acc << "\n";

    if (rec.dev.ce < best_ce) {
      best_ce = rec.dev.ce;
      out.best_dev = rec.dev;
      out.best_step = step;
      since_best = 0;
      best = ParamSet();
      for (const auto& [name, t] : out.params.items) {
        Tensor& c = best.add(name, t.shape);
        c.st->data = t.st->data;
      }
      if (!out_dir.empty())
        save_checkpoint(out_dir + "/checkpoint.bin", resolved, out.params, td.vocab_size);
    } else {
      ++since_best;
    }

    if (reached_target && reached_target(rec.dev)) {
      out.stop_reason = "target";
      break;
    }
    if (since_best >= rc.train.early_stop_patience) {
      out.stop_reason = "early_stop";
      break;
    }
    if (rc.train.time_budget_s > 0 && detail::now_s() - t0 > rc.train.time_budget_s) {
      out.stop_reason = "time_budget";
      break;
    }
  }

  if (out.best_step < 0) {  // steps == 0: nothing ran, report initial weights
    out.best_dev = evaluate(out.params, cfg, td.dev, rc.train.batch_size);
    out.best_step = 0;
    if (!out_dir.empty())
      save_checkpoint(out_dir + "/checkpoint.bin", resolved, out.params, td.vocab_size);
  } else if (!best.items.empty()) {
    out.params = best;
  }
  return out;
}

// Test-set metrics at several evaluation lengths; rows of the eval CSV.
struct LengthPoint {
  long length = 0;
  Metrics test;
};

inline std::vector<LengthPoint> length_sweep(const RunConfig& rc, ParamSet& params,
                                             const std::vector<long>& lengths) {
  std::vector<LengthPoint> out;
  for (long L : lengths) {
    TaskData td = gen_task(rc.task, rc.seed, L);
    ModelConfig cfg = rc.model;
    cfg.vocab_size = td.vocab_size;
    LengthPoint p;
    p.length = L;
    p.test = evaluate(params, cfg, td.test, rc.train.batch_size);
    out.push_back(p);
  }
  return out;
}

inline void write_length_csv(const std::string& path, const std::vector<LengthPoint>& pts) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + path + "'");
  f << "length,loss,ce,token_acc,exact_match,perplexity,bpc\n";
  for (const auto& p : pts)
    f << p.length << "," << p.test.loss << "," << p.test.ce << "," << p.test.token_acc << ","
      << p.test.exact_match << "," << p.test.perplexity << "," << p.test.bpc << "\n";
}

}  // namespace ressformer
