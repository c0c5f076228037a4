#include <gtest/gtest.h>

#include "ressformer/attention.hpp"
#include "ressformer/optimizer.hpp"
#include "ressformer/rng.hpp"
#include "testing_util.hpp"

using namespace ressformer;

namespace {

Tensor leaf(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (long i = 0; i < t.size(); ++i) t.st->data[i] = rng.normal(0.0, sd);
  t.set_requires_grad(true);
  return t;
}

TEST(Projection, ZeroInputGivesZeroProjections) {
  Rng rng(41);
  Tensor h = Tensor::zeros({5, 8});
  Tensor w = leaf({8, 8}, rng);
  Tensor q = matmul(h, w);
  for (long i = 0; i < q.size(); ++i) EXPECT_DOUBLE_EQ(q.at(i), 0.0);
}

TEST(Projection, HeadSplitCoversDistinctColumnSlices) {
  // n=5, d=8, heads=2: head h reads/writes columns [4h, 4h+4). With zero
  // queries every weight is uniform, so each output slice is the mean of the
  // matching value slice.
  long n = 5, d = 8, heads = 2;
  Tensor q = Tensor::zeros({n, d}), k = Tensor::zeros({n, d});
  Tensor v = Tensor::zeros({n, d});
  for (long i = 0; i < n; ++i)
    for (long c = 0; c < d; ++c) v.at(i, c) = (c < d / heads) ? (double)i : 10.0 * i;
  Tensor out = sparse_attention(q, k, v, nullptr, nullptr, nullptr, 1, heads, n, Phi::softmax);
  double mean_i = (0 + 1 + 2 + 3 + 4) / 5.0;
  for (long i = 0; i < n; ++i)
    for (long c = 0; c < d; ++c)
      EXPECT_NEAR(out.at(i, c), (c < d / heads) ? mean_i : 10.0 * mean_i, 1e-12);
}

TEST(SelectTopk, FullKKeepsAllIndices) {
  Tensor scores = Tensor::from({2, 3}, {5, 1, 3, 2, 2, 2});
  auto sets = select_topk(scores, 3);
  for (const auto& s : sets) EXPECT_EQ(s, (std::vector<int>{0, 1, 2}));
  auto wide = select_topk(scores, 10);
  for (const auto& s : wide) EXPECT_EQ(s, (std::vector<int>{0, 1, 2}));
}

TEST(SelectTopk, PicksLargestScores) {
  Tensor scores = Tensor::from({1, 3}, {0.1, 0.9, 0.5});
  auto sets = select_topk(scores, 2);
  EXPECT_EQ(sets[0], (std::vector<int>{1, 2}));
}

TEST(SelectTopk, TiesBreakTowardLowerIndex) {
  Tensor scores = Tensor::from({1, 4}, {2.0, 7.0, 7.0, 7.0});
  auto sets = select_topk(scores, 2);
  EXPECT_EQ(sets[0], (std::vector<int>{1, 2}));
}

TEST(SelectTopk, MatchesFullSortOracle) {
  Rng rng(42);
  for (int rep = 0; rep < 200; ++rep) {
    long nq = 1 + rng.below(6), nk = 1 + rng.below(12);
    long k = 1 + rng.below(nk);
    Tensor scores = leaf({nq, nk}, rng);
    auto got = select_topk(scores, k);
    for (long q = 0; q < nq; ++q) {
      std::vector<int> idx(nk);
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return scores.at(q, a) > scores.at(q, b);
      });
      std::vector<int> want(idx.begin(), idx.begin() + k);
      std::sort(want.begin(), want.end());
      ASSERT_EQ(got[q], want) << "rep " << rep << " row " << q;
    }
  }
}

TEST(SelectTopk, RejectsNonPositiveK) {
  Tensor scores = Tensor::from({1, 2}, {1, 2});
  EXPECT_THROW(select_topk(scores, 0), std::invalid_argument);
}

TEST(SparseAttention, FullKSoftmaxEqualsDenseReference) {
  Rng rng(43);
  long batch = 2, n = 7, d = 12, heads = 3;
  Tensor q = leaf({batch * n, d}, rng), k = leaf({batch * n, d}, rng);
  Tensor v = leaf({batch * n, d}, rng);
  Tensor out = sparse_attention(q, k, v, nullptr, nullptr, nullptr, batch, heads, n, Phi::softmax);
  testutil::DenseAttnArgs a;
  a.q = q.data();
  a.k = k.data();
  a.v = v.data();
  a.batch = batch;
  a.n = n;
  a.d = d;
  a.heads = heads;
  std::vector<double> want = testutil::dense_attention_oracle(a);
  for (long i = 0; i < out.size(); ++i) ASSERT_NEAR(out.at(i), want[i], 1e-10);
}

TEST(SparseAttention, SingleKeyReturnsItsValue) {
  Rng rng(44);
  for (Phi phi : {Phi::softmax, Phi::sparsemax, Phi::entmax15}) {
    Tensor q = leaf({1, 6}, rng), k = leaf({1, 6}, rng), v = leaf({1, 6}, rng);
    Tensor out = sparse_attention(q, k, v, nullptr, nullptr, nullptr, 1, 2, 1, phi);
    for (long c = 0; c < 6; ++c) EXPECT_NEAR(out.at(c), v.at(c), 1e-12) << phi_name(phi);
  }
}

TEST(SparseAttention, TopKSparsemaxEqualsDenseMaskingOracle) {
  Rng rng(45);
  long n = 12, d = 8, heads = 2, k_top = 4;
  long dh = d / heads;
  Tensor q = leaf({n, d}, rng), k = leaf({n, d}, rng), v = leaf({n, d}, rng);
  Tensor out =
      sparse_attention(q, k, v, nullptr, nullptr, nullptr, 1, heads, k_top, Phi::sparsemax);

  // Oracle: full score matrix per head, top-k by full sort, non-selected
  // scores to -inf, simplex projection, convex combination.
  std::vector<std::vector<int>> keep(heads * n);
  double inv_sqrt = 1.0 / std::sqrt((double)dh);
  for (long h = 0; h < heads; ++h)
    for (long i = 0; i < n; ++i) {
      std::vector<double> row(n);
      for (long j = 0; j < n; ++j) {
        double s = 0;
        for (long c = 0; c < dh; ++c) s += q.at(i, h * dh + c) * k.at(j, h * dh + c);
        row[j] = s * inv_sqrt;
      }
      std::vector<int> idx(n);
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return row[a] > row[b]; });
      keep[h * n + i].assign(idx.begin(), idx.begin() + k_top);
    }
  testutil::DenseAttnArgs a;
  a.q = q.data();
  a.k = k.data();
  a.v = v.data();
  a.n = n;
  a.d = d;
  a.heads = heads;
  a.use_sparsemax = true;
  a.mask_sets = &keep;
  std::vector<double> want = testutil::dense_attention_oracle(a);
  for (long i = 0; i < out.size(); ++i) ASSERT_NEAR(out.at(i), want[i], 1e-10);
}

TEST(SparseAttention, FullyMaskedRowYieldsZeroOutputAndFlag) {
  Rng rng(46);
  long n = 4, d = 6;
  Tensor q = leaf({n, d}, rng), k = leaf({n, d}, rng), v = leaf({n, d}, rng);
  Tensor bias = Tensor::zeros({n, n});
  const double ninf = -std::numeric_limits<double>::infinity();
  for (long j = 0; j < n; ++j) bias.at(2, j) = ninf;
  AttnTrace trace;
  Tensor out =
      sparse_attention(q, k, v, nullptr, nullptr, &bias, 1, 2, n, Phi::sparsemax, &trace);
  for (long c = 0; c < d; ++c) {
    EXPECT_DOUBLE_EQ(out.at(2, c), 0.0);
    EXPECT_TRUE(std::isfinite(out.at(2, c)));
  }
  for (long h = 0; h < 2; ++h) {
    EXPECT_TRUE(trace.heads[0][h].empty_row[2]);
    EXPECT_FALSE(trace.heads[0][h].empty_row[0]);
  }
}

TEST(RouteExperts, FullWidthKeepsEverySoftmaxWeight) {
  Rng rng(47);
  long E = 5;
  Tensor h = leaf({6, 8}, rng);
  Tensor w = leaf({8, E}, rng);
  RoutingDecision dec = route_experts(h, w, 1.0, E);
  Tensor probs = softmax_rows(scale(matmul(h, w), 1.0));
  for (long t = 0; t < 6; ++t) {
    std::vector<int> all = {0, 1, 2, 3, 4};
    EXPECT_EQ(dec.expert_sets[t], all);
    for (long j = 0; j < E; ++j)
      EXPECT_NEAR(dec.gate_values[t][j], probs.at(t, j), 1e-12);
  }
}

TEST(RouteExperts, TopOneIsArgmaxWithUnitWeight) {
  Rng rng(48);
  Tensor h = leaf({10, 8}, rng);
  Tensor w = leaf({8, 4}, rng);
  RoutingDecision dec = route_experts(h, w, 1.0, 1);
  Tensor logits = matmul(h, w);
  for (long t = 0; t < 10; ++t) {
    long best = 0;
    for (long j = 1; j < 4; ++j)
      if (logits.at(t, j) > logits.at(t, best)) best = j;
    ASSERT_EQ(dec.expert_sets[t].size(), 1u);
    EXPECT_EQ(dec.expert_sets[t][0], (int)best);
    EXPECT_DOUBLE_EQ(dec.gate_values[t][0], 1.0);
  }
}

TEST(RouteExperts, KeptWeightsRenormalizeToOne) {
  Rng rng(49);
  long tokens = 1000, E = 8, e = 3;
  Tensor h = leaf({tokens, 16}, rng);
  Tensor w = leaf({16, E}, rng);
  RoutingDecision dec = route_experts(h, w, 0.7, e);
  for (long t = 0; t < tokens; ++t) {
    ASSERT_EQ((long)dec.expert_sets[t].size(), e);
    double s = 0;
    for (double g : dec.gate_values[t]) {
      EXPECT_GE(g, 0.0);
      s += g;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    for (size_t c = 1; c < dec.expert_sets[t].size(); ++c)
      EXPECT_LT(dec.expert_sets[t][c - 1], dec.expert_sets[t][c]);
  }
}

TEST(RouteExperts, RejectsBadWidth) {
  Tensor h = Tensor::zeros({2, 4}), w = Tensor::zeros({4, 3});
  EXPECT_THROW(route_experts(h, w, 1.0, 0), std::invalid_argument);
  EXPECT_THROW(route_experts(h, w, 1.0, 4), std::invalid_argument);
}

std::vector<ExpertParams> random_experts(Rng& rng, long E, long d, long hidden) {
  std::vector<ExpertParams> out;
  for (long j = 0; j < E; ++j) {
    ExpertParams ep;
    ep.w1 = leaf({d, hidden}, rng, 0.5);
    ep.b1 = leaf({hidden}, rng, 0.1);
    ep.w2 = leaf({hidden, d}, rng, 0.5);
    ep.b2 = leaf({d}, rng, 0.1);
    out.push_back(ep);
  }
  return out;
}

TEST(MoeFfn, IdenticalExpertsMakeRoutingIrrelevant) {
  Rng rng(50);
  long d = 8, E = 4;
  Tensor h = leaf({6, d}, rng);
  Tensor w = leaf({d, E}, rng);
  std::vector<ExpertParams> experts = random_experts(rng, 1, d, 2 * d);
  std::vector<ExpertParams> same(E, experts[0]);
  Tensor out1 = moe_ffn(h, route_experts(h, w, 1.0, 1), same);
  Tensor out2 = moe_ffn(h, route_experts(h, w, 1.0, E), same);
  for (long i = 0; i < out1.size(); ++i) ASSERT_NEAR(out1.at(i), out2.at(i), 1e-12);
}

TEST(MoeFfn, NeverSelectedExpertGetsExactlyZeroGradient) {
  Rng rng(51);
  long d = 6, E = 4, tokens = 12;
  // Positive inputs make the all-negative router column strictly lowest for
  // every token, so expert 3 is provably starved.
  Tensor h = Tensor::zeros({tokens, d});
  for (long i = 0; i < h.size(); ++i) h.st->data[i] = rng.uniform(0.5, 1.5);
  h.set_requires_grad(true);
  Tensor w = leaf({d, E}, rng, 0.1);
  for (long r = 0; r < d; ++r) w.at(r, 3) = -1.0;
  RoutingDecision dec = route_experts(h, w, 1.0, 2);
  for (const auto& set : dec.expert_sets)
    for (int j : set) ASSERT_NE(j, 3);
  std::vector<ExpertParams> experts = random_experts(rng, E, d, 2 * d);
  Tensor out = moe_ffn(h, dec, experts);
  Tensor loss = sum(mul(out, out));
  for (auto& ep : experts)
    for (Tensor* t : {&ep.w1, &ep.b1, &ep.w2, &ep.b2}) t->zero_grad();
  backward(loss);
  for (Tensor* t : {&experts[3].w1, &experts[3].b1, &experts[3].w2, &experts[3].b2})
    for (long i = 0; i < t->size(); ++i)
      ASSERT_DOUBLE_EQ(t->st->grad[i], 0.0) << "dead expert must stay untouched";
  bool live_nonzero = false;
  for (long i = 0; i < experts[0].w1.size(); ++i)
    if (experts[0].w1.st->grad[i] != 0.0) live_nonzero = true;
  EXPECT_TRUE(live_nonzero);
}

TEST(MoeFfn, FullWidthMatchesDenseMixtureOracle) {
  Rng rng(52);
  long d = 8, E = 3, hidden = 2 * d, tokens = 5;
  Tensor h = leaf({tokens, d}, rng);
  Tensor w = leaf({d, E}, rng);
  RoutingDecision dec = route_experts(h, w, 1.0, E);
  std::vector<ExpertParams> experts = random_experts(rng, E, d, hidden);
  Tensor out = moe_ffn(h, dec, experts);

  for (long t = 0; t < tokens; ++t)
    for (long c = 0; c < d; ++c) {
      double want = 0;
      for (long j = 0; j < E; ++j) {
        std::vector<double> mid(hidden);
        for (long u = 0; u < hidden; ++u) {
          double s = experts[j].b1.at(u);
          for (long a = 0; a < d; ++a) s += h.at(t, a) * experts[j].w1.at(a, u);
          mid[u] = gelu_val(s);
        }
        double y = experts[j].b2.at(c);
        for (long u = 0; u < hidden; ++u) y += mid[u] * experts[j].w2.at(u, c);
        want += dec.gate_values[t][j] * y;
      }
      ASSERT_NEAR(out.at(t, c), want, 1e-10);
    }
}

TEST(LoadBalance, UniformRoutingScoresOne) {
  // 4 tokens, E=4, e=1, each expert takes one token with uniform probs.
  long E = 4;
  Tensor probs = Tensor::full({E, E}, 1.0 / E);
  std::vector<std::vector<int>> sets = {{0}, {1}, {2}, {3}};
  EXPECT_NEAR(load_balance_loss(probs, sets).at(0), 1.0, 1e-12);
}

TEST(LoadBalance, TotalCollapseScoresE) {
  long E = 6, tokens = 10;
  Tensor probs = Tensor::zeros({tokens, E});
  for (long t = 0; t < tokens; ++t) probs.at(t, 2) = 1.0;
  std::vector<std::vector<int>> sets(tokens, std::vector<int>{2});
  EXPECT_NEAR(load_balance_loss(probs, sets).at(0), (double)E, 1e-12);
}

TEST(LoadBalance, PenaltyDrivesSkewedRouterTowardBalance) {
  Rng rng(53);
  long d = 8, E = 4, tokens = 64;
  // Positive-mean inputs turn the +2 weight column into a uniform tilt
  // toward expert 0, so the run starts visibly imbalanced.
  Tensor h = Tensor::zeros({tokens, d});
  for (long i = 0; i < h.size(); ++i) h.st->data[i] = rng.normal(1.0, 0.3);

  auto run = [&](double coeff) {
    Rng wr(7);
    Tensor w = Tensor::zeros({d, E});
    for (long i = 0; i < w.size(); ++i) w.st->data[i] = wr.normal(0.0, 0.2);
    for (long r = 0; r < d; ++r) w.at(r, 0) += 2.0;  // skewed start
    w.set_requires_grad(true);
    ParamSet ps;
    ps.add("router.w", {d, E});
    ps.get("router.w").st->data = w.st->data;
    TrainConfig tc;
    tc.lr_peak = 0.05;
    tc.warmup_steps = 0;
    tc.total_steps = 1000000;
    tc.weight_decay = 0;
    AdamW opt(tc);
    double first = 0, last = 0;
    for (int step = 1; step <= 40; ++step) {
      RoutingDecision d2 = route_experts(h, ps.get("router.w"), 1.0, 2);
      Tensor lb = load_balance_loss(d2.router_probs, d2.expert_sets);
      if (step == 1) first = lb.at(0);
      last = lb.at(0);
      if (coeff == 0) continue;
      Tensor lobj = scale(lb, coeff);
      ps.zero_grads();
      backward(lobj);
      opt.step(ps, step);
    }
    return std::pair{first, last};
  };

  auto [first_pen, last_pen] = run(1.0);
  auto [first_off, last_off] = run(0.0);
  EXPECT_NEAR(first_pen, first_off, 1e-12) << "same seed, same start";
  EXPECT_LT(last_pen, first_pen) << "penalty must reduce imbalance";
  EXPECT_LT(last_pen, last_off) << "penalized run ends more balanced";
}

}  // namespace
