#pragma once

#include <fstream>

#include "config.hpp"
#include "rng.hpp"

namespace ressformer {

// targets align with inputs; -1 marks positions that are not scored.
struct Dataset {
  std::vector<std::vector<int>> inputs;
  std::vector<std::vector<long>> targets;
};

struct TaskData {
  Dataset train, dev, test;
  long vocab_size = 0;
  std::vector<std::string> id_text;  // token id -> printable label
};

// The model is permutation-equivariant, so order must live in token content.
// Ordered tasks therefore use fused composite tokens:
//   copy: value x at slot i is the single token F(i, x); the model answers
//         query token Q(i) with F(i, x_i), i.e. it reproduces the input.
//   distractor_qa: a (key, value) pair is the single token P(k, v) from a
//         fixed 64-key, 16-value pool; the query names the needle key and the
//         answer is the needle pair token itself.
// Both stay trivially solvable by a literal scan over the input.
namespace copy_task {
inline long sep_id() { return 0; }
inline long query_id(long i) { return 1 + i; }
inline long fused_id(long len, long vocab, long i, long v) { return 1 + len + i * vocab + v; }
inline long vocab_size(long len, long vocab) { return 1 + len + len * vocab; }
}  // namespace copy_task

namespace dqa_task {
constexpr long kKeys = 64;
constexpr long kValues = 16;
inline long pad_id() { return 0; }
inline long sep_id() { return 1; }
inline long query_id(long k) { return 2 + k; }
inline long pair_id(long k, long v) { return 2 + kKeys + k * kValues + v; }
inline long vocab_size() { return 2 + kKeys + kKeys * kValues; }
}  // namespace dqa_task

namespace cls_task {
inline long sep_id() { return 0; }
inline long label_id(long lbl) { return 1 + lbl; }  // 0 or 1
inline long value_id(long v) { return 3 + v; }
inline long vocab_size(long vocab) { return 3 + vocab; }
}  // namespace cls_task

namespace detail {

inline Dataset gen_copy_split(const TaskSpec& spec, long count, Rng& rng) {
  Dataset ds;
  long L = spec.seq_len, V = spec.task_vocab;
  for (long s = 0; s < count; ++s) {
    std::vector<int> in;
    std::vector<long> tg;
    std::vector<long> vals(L);
    for (long i = 0; i < L; ++i) vals[i] = rng.below(V);
    for (long i = 0; i < L; ++i) {
      in.push_back((int)copy_task::fused_id(L, V, i, vals[i]));
      tg.push_back(-1);
    }
    in.push_back((int)copy_task::sep_id());
    tg.push_back(-1);
    for (long i = 0; i < L; ++i) {
      in.push_back((int)copy_task::query_id(i));
      tg.push_back(copy_task::fused_id(L, V, i, vals[i]));
    }
    ds.inputs.push_back(std::move(in));
    ds.targets.push_back(std::move(tg));
  }
  return ds;
}

inline Dataset gen_dqa_split(const TaskSpec& spec, long count, Rng& rng, long length_override) {
  Dataset ds;
  long L = length_override > 0 ? length_override : spec.seq_len;
  long n_distract = std::lround(spec.noise * (double)(L - 1));
  for (long s = 0; s < count; ++s) {
    long k_star = rng.below(dqa_task::kKeys);
    long v_star = rng.below(dqa_task::kValues);
    std::vector<int> ctx(L, (int)dqa_task::pad_id());
    std::vector<long> slots(L);
    std::iota(slots.begin(), slots.end(), 0);
    rng.shuffle(slots);
    ctx[slots[0]] = (int)dqa_task::pair_id(k_star, v_star);
    for (long i = 0; i < n_distract && 1 + i < L; ++i) {
      long k = rng.below(dqa_task::kKeys - 1);
      if (k >= k_star) ++k;  // distractor keys never collide with the needle
      ctx[slots[1 + i]] = (int)dqa_task::pair_id(k, rng.below(dqa_task::kValues));
    }
    std::vector<int> in = ctx;
    in.push_back((int)dqa_task::sep_id());
    in.push_back((int)dqa_task::query_id(k_star));
    std::vector<long> tg(in.size(), -1);
    tg.back() = dqa_task::pair_id(k_star, v_star);
    ds.inputs.push_back(std::move(in));
    ds.targets.push_back(std::move(tg));
  }
  return ds;
}

inline Dataset gen_cls_split(const TaskSpec& spec, long count, Rng& rng) {
  Dataset ds;
  long L = spec.seq_len, V = std::max<long>(3, spec.task_vocab);
  for (long s = 0; s < count; ++s) {
    long label = rng.below(2);  // balanced in expectation, deterministic
    long hi = 1 + rng.below(L / 2);          // count of the winning value
    long lo = rng.below(hi);                 // count of the losing value
    long c0 = label ? lo : hi, c1 = label ? hi : lo;
    std::vector<int> bag;
    for (long i = 0; i < c0; ++i) bag.push_back((int)cls_task::value_id(0));
    for (long i = 0; i < c1; ++i) bag.push_back((int)cls_task::value_id(1));
    while ((long)bag.size() < L) bag.push_back((int)cls_task::value_id(2 + rng.below(V - 2)));
    bag.resize(L);
    rng.shuffle(bag);
    std::vector<int> in = bag;
    in.push_back((int)cls_task::sep_id());
    std::vector<long> tg(in.size(), -1);
    tg.back() = cls_task::label_id(label);
    ds.inputs.push_back(std::move(in));
    ds.targets.push_back(std::move(tg));
  }
  return ds;
}

struct Corpus {
  std::string text;
  std::vector<int> ids;
  std::vector<char> alphabet;
};

inline Corpus load_corpus(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read corpus file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  Corpus c;
  c.text = ss.str();
  if (c.text.size() < 1000) throw ConfigError("corpus '" + path + "' is too small");
  bool present[256] = {false};
  for (unsigned char ch : c.text) present[ch] = true;
  int id_of[256];
  for (int i = 0; i < 256; ++i) id_of[i] = -1;
  for (int i = 0; i < 256; ++i)
    if (present[i]) {
      id_of[i] = (int)c.alphabet.size();
      c.alphabet.push_back((char)i);
    }
  c.ids.reserve(c.text.size());
  for (unsigned char ch : c.text) c.ids.push_back(id_of[ch]);
  return c;
}

// Windows are drawn from disjoint train/dev/test regions (90/5/5).
inline Dataset gen_char_split(const Corpus& corpus, long count, long window, long region,
                              Rng& rng) {
  long n = (long)corpus.ids.size();
  long train_end = n * 90 / 100, dev_end = n * 95 / 100;
  long lo = region == 0 ? 0 : (region == 1 ? train_end : dev_end);
  long hi = region == 0 ? train_end : (region == 1 ? dev_end : n);
  if (hi - lo <= window + 1) throw ConfigError("corpus region too small for window");
  Dataset ds;
  for (long s = 0; s < count; ++s) {
    long start = lo + rng.below(hi - lo - window - 1);
    std::vector<int> in(corpus.ids.begin() + start, corpus.ids.begin() + start + window);
    std::vector<long> tg(window);
    for (long i = 0; i < window; ++i) tg[i] = corpus.ids[start + i + 1];
    ds.inputs.push_back(std::move(in));
    ds.targets.push_back(std::move(tg));
  }
  return ds;
}

}  // namespace detail

// Deterministic per (spec, seed); split streams are independent.
inline TaskData gen_task(const TaskSpec& spec, uint64_t seed, long length_override = 0) {
  spec.validate();
  TaskData td;
  Rng r_train(seed * 3 + 1), r_dev(seed * 3 + 2), r_test(seed * 3 + 3);
  switch (spec.kind) {
    case TaskKind::copy: {
      td.train = detail::gen_copy_split(spec, spec.n_train, r_train);
      td.dev = detail::gen_copy_split(spec, spec.n_dev, r_dev);
      td.test = detail::gen_copy_split(spec, spec.n_test, r_test);
      td.vocab_size = copy_task::vocab_size(spec.seq_len, spec.task_vocab);
      for (long id = 0; id < td.vocab_size; ++id) {
        if (id == 0) td.id_text.push_back("SEP");
        else if (id <= spec.seq_len) td.id_text.push_back("Q" + std::to_string(id - 1));
        else {
          long f = id - 1 - spec.seq_len;
          td.id_text.push_back("F" + std::to_string(f / spec.task_vocab) + "," +
                               std::to_string(f % spec.task_vocab));
        }
      }
      break;
    }
    case TaskKind::distractor_qa: {
      td.train = detail::gen_dqa_split(spec, spec.n_train, r_train, 0);
      td.dev = detail::gen_dqa_split(spec, spec.n_dev, r_dev, 0);
      td.test = detail::gen_dqa_split(spec, spec.n_test, r_test, length_override);
      td.vocab_size = dqa_task::vocab_size();
      for (long id = 0; id < td.vocab_size; ++id) {
        if (id == 0) td.id_text.push_back("PAD");
        else if (id == 1) td.id_text.push_back("SEP");
        else if (id < 2 + dqa_task::kKeys) td.id_text.push_back("?" + std::to_string(id - 2));
        else {
          long pr = id - 2 - dqa_task::kKeys;
          td.id_text.push_back("P" + std::to_string(pr / dqa_task::kValues) + "," +
                               std::to_string(pr % dqa_task::kValues));
        }
      }
      break;
    }
    case TaskKind::shuffled_cls: {
      td.train = detail::gen_cls_split(spec, spec.n_train, r_train);
      td.dev = detail::gen_cls_split(spec, spec.n_dev, r_dev);
      td.test = detail::gen_cls_split(spec, spec.n_test, r_test);
      td.vocab_size = cls_task::vocab_size(std::max<long>(3, spec.task_vocab));
      for (long id = 0; id < td.vocab_size; ++id) {
        if (id == 0) td.id_text.push_back("SEP");
        else if (id <= 2) td.id_text.push_back("L" + std::to_string(id - 1));
        else td.id_text.push_back("V" + std::to_string(id - 3));
      }
      break;
    }
    case TaskKind::char_lm: {
      detail::Corpus corpus = detail::load_corpus(spec.corpus);
      td.train = detail::gen_char_split(corpus, spec.n_train, spec.seq_len, 0, r_train);
      td.dev = detail::gen_char_split(corpus, spec.n_dev, spec.seq_len, 1, r_dev);
      td.test = detail::gen_char_split(corpus, spec.n_test,
                                       length_override > 0 ? length_override : spec.seq_len, 2,
                                       r_test);
      td.vocab_size = (long)corpus.alphabet.size();
      for (char c : corpus.alphabet) td.id_text.push_back(std::string(1, c));
      break;
    }
  }
  return td;
}

// Reference baseline for char_lm: add-one-smoothed unigram fit on the train
// split, scored on the given split in bits per character.
inline double unigram_bpc(const Dataset& train, const Dataset& eval_split, long vocab) {
  std::vector<double> counts(vocab, 1.0);
  double total = (double)vocab;
  for (const auto& tg : train.targets)
    for (long t : tg)
      if (t >= 0) {
        counts[t] += 1.0;
        total += 1.0;
      }
  double bits = 0;
  long scored = 0;
  for (const auto& tg : eval_split.targets)
    for (long t : tg)
      if (t >= 0) {
        bits += -std::log2(counts[t] / total);
        ++scored;
      }
  return bits / (double)scored;
}

// Literal scan solver for distractor_qa; validates generator correctness.
inline double dqa_scan_oracle_accuracy(const Dataset& ds) {
  long correct = 0, total = 0;
  for (size_t s = 0; s < ds.inputs.size(); ++s) {
    const auto& in = ds.inputs[s];
    long k_star = in.back() - dqa_task::query_id(0);
    long answer = -1;
    for (int tok : in) {
      if (tok >= dqa_task::pair_id(0, 0) &&
          (tok - dqa_task::pair_id(0, 0)) / dqa_task::kValues == k_star)
        answer = tok;
    }
    ++total;
    if (answer == ds.targets[s].back()) ++correct;
  }
  return (double)correct / (double)total;
}

}  // namespace ressformer
