#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "csn/attention.hpp"
#include "csn/graph.hpp"
#include "test_util.hpp"

using namespace csn;
using csn::test::randt;

namespace {

// Independent brute-force head: enumerates every (class, shot) candidate with
// plain loops and applies the softmax formula directly.
struct BruteForceResult {
  std::vector<std::int64_t> winners;
  std::vector<double> dists;
  std::vector<double> weights;
};

BruteForceResult brute_force_head(const ClassSupports<double>& s, const Tensor<double>& q,
                                  bool negative) {
  const std::int64_t n = s.way(), k = s.shots(), d = s.dim();
  BruteForceResult r;
  for (std::int64_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::int64_t best_j = -1;
    for (std::int64_t j = 0; j < k; ++j) {
      double acc = 0;
      for (std::int64_t e = 0; e < d; ++e) {
        const double diff = s.per_class[i][j * d + e] - q[e];
        acc += diff * diff;
      }
      const double dist = std::sqrt(acc);
      if (dist < best) {
        best = dist;
        best_j = j;
      }
    }
    r.winners.push_back(best_j);
    r.dists.push_back(best);
  }
  double norm = 0;
  for (double dist : r.dists) norm += std::exp(negative ? -dist : dist);
  for (double dist : r.dists) r.weights.push_back(std::exp(negative ? -dist : dist) / norm);
  return r;
}

ClassSupports<double> random_supports(std::int64_t n, std::int64_t k, std::int64_t d,
                                      std::uint64_t seed) {
  ClassSupports<double> s;
  for (std::int64_t i = 0; i < n; ++i) s.per_class.push_back(randt({k, d}, seed * 977 + i));
  return s;
}

}  // namespace

TEST(SelectWinners, SingleShotTrivial) {
  ClassSupports<double> s = random_supports(4, 1, 3, 1);
  Tensor<double> q = randt({3}, 2);
  auto [winners, dists] = select_winners(s, q);
  for (std::int64_t i = 0; i < 4; ++i) {
    EXPECT_EQ(winners[i], 0);
    double acc = 0;
    for (int e = 0; e < 3; ++e) {
      const double diff = s.per_class[i][e] - q[e];
      acc += diff * diff;
    }
    EXPECT_NEAR(dists[i], std::sqrt(acc), 1e-15);
  }
}

TEST(SelectWinners, OneDimensionalHandCase) {
  ClassSupports<double> s;
  s.per_class.push_back(Tensor<double>({2, 1}, {0.0, 4.0}));
  Tensor<double> q({1}, {2.5});
  auto [winners, dists] = select_winners(s, q);
  EXPECT_EQ(winners[0], 1);
  EXPECT_NEAR(dists[0], 1.5, 1e-15);
}

TEST(SelectWinners, DuplicatePointTieBreaksLow) {
  ClassSupports<double> s;
  s.per_class.push_back(Tensor<double>({3, 2}, {1, 1, 5, 5, 1, 1}));
  Tensor<double> q({2}, {1, 1});
  auto [winners, dists] = select_winners(s, q);
  EXPECT_EQ(winners[0], 0);
  EXPECT_EQ(dists[0], 0.0);
}

TEST(SelectWinners, DimensionMismatch) {
  ClassSupports<double> s = random_supports(2, 2, 3, 3);
  EXPECT_THROW(select_winners(s, randt({4}, 4)), DimensionError);
}

TEST(CompetitiveWeights, EqualDistancesAreUniform) {
  auto w = competitive_weights<double>({2.0, 2.0, 2.0, 2.0}, AttentionSign::negative);
  for (double v : w) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(CompetitiveWeights, ClosedFormBothSigns) {
  auto neg = competitive_weights<double>({0.5, 1.5}, AttentionSign::negative);
  EXPECT_NEAR(neg[0], 0.7310585786300049, 1e-12);
  EXPECT_NEAR(neg[1], 0.2689414213699951, 1e-12);
  auto lit = competitive_weights<double>({0.5, 1.5}, AttentionSign::literal);
  EXPECT_NEAR(lit[0], 0.2689414213699951, 1e-12);
  EXPECT_NEAR(lit[1], 0.7310585786300049, 1e-12);
}

TEST(Predict, SingleClass) {
  auto out = predict<double>({1.0});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], 1.0);
}

TEST(Predict, OneHotIdentity) {
  std::vector<std::vector<double>> onehot = {{1, 0}, {0, 1}};
  auto out = predict<double>({0.7, 0.3}, onehot);
  EXPECT_NEAR(out[0], 0.7, 1e-15);
  EXPECT_NEAR(out[1], 0.3, 1e-15);
}

TEST(Predict, ArgmaxFollowsNearestClass) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ClassSupports<double> s = random_supports(5, 3, 4, 100 + seed);
    Tensor<double> q = randt({4}, 200 + seed);
    AttentionResult<double> r = competitive_head(s, q, AttentionSign::negative);
    std::int64_t nearest = 0, argmax = 0;
    for (std::int64_t i = 1; i < 5; ++i) {
      if (r.winner_dists[i] < r.winner_dists[nearest]) nearest = i;
      if (r.predicted[i] > r.predicted[argmax]) argmax = i;
    }
    EXPECT_EQ(argmax, nearest);
  }
}

TEST(MatchingAttention, OneShotEqualsCompetitive) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    ClassSupports<double> s = random_supports(4, 1, 5, 300 + seed);
    Tensor<double> q = randt({5}, 400 + seed);
    AttentionResult<double> comp = competitive_head(s, q, AttentionSign::negative);

    std::vector<Tensor<double>> vectors;
    std::vector<std::int64_t> classes;
    for (std::int64_t i = 0; i < 4; ++i) {
      vectors.push_back(Tensor<double>({5}, std::vector<double>(s.per_class[i].values())));
      classes.push_back(i);
    }
    auto match = matching_attention(vectors, classes, 4, q);
    for (std::int64_t i = 0; i < 4; ++i) EXPECT_NEAR(match[i], comp.weights[i], 1e-12);
  }
}

TEST(MatchingAttention, DuplicatedPointRaisesClassMass) {
  // One class holds one point; duplicating that point (two members at the
  // same location) increases the class's softmax mass.
  Tensor<double> q({1}, {0.0});
  std::vector<Tensor<double>> single = {Tensor<double>({1}, {1.0}), Tensor<double>({1}, {-2.0})};
  auto base = matching_attention<double>(single, {0, 1}, 2, q);

  std::vector<Tensor<double>> dup = {Tensor<double>({1}, {1.0}), Tensor<double>({1}, {1.0}),
                                     Tensor<double>({1}, {-2.0})};
  auto boosted = matching_attention<double>(dup, {0, 0, 1}, 2, q);
  EXPECT_GT(boosted[0], base[0]);
}

TEST(MatchingAttention, UniformGeometry) {
  std::vector<Tensor<double>> vectors = {Tensor<double>({2}, {1, 0}), Tensor<double>({2}, {-1, 0}),
                                         Tensor<double>({2}, {0, 1}), Tensor<double>({2}, {0, -1})};
  auto out = matching_attention<double>(vectors, {0, 1, 2, 3}, 4, Tensor<double>({2}, {0, 0}));
  for (double v : out) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(PrototypeHead, SingleShotMatchesCompetitiveArgmax) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ClassSupports<double> s = random_supports(4, 1, 3, 500 + seed);
    Tensor<double> q = randt({3}, 600 + seed);
    auto proto = prototype_head(s, q);
    AttentionResult<double> comp = competitive_head(s, q, AttentionSign::negative);
    std::int64_t pa = 0, ca = 0;
    for (std::int64_t i = 1; i < 4; ++i) {
      if (proto[i] > proto[pa]) pa = i;
      if (comp.predicted[i] > comp.predicted[ca]) ca = i;
    }
    EXPECT_EQ(pa, ca);
  }
}

TEST(PrototypeHead, MeanCollapsesSymmetricPair) {
  ClassSupports<double> s;
  s.per_class.push_back(Tensor<double>({2, 1}, {-1.0, 1.0}));
  s.per_class.push_back(Tensor<double>({2, 1}, {5.0, 7.0}));
  auto out = prototype_head(s, Tensor<double>({1}, {0.0}));
  // Class 0 prototype is exactly 0, squared distance 0 -> dominant weight.
  EXPECT_GT(out[0], out[1]);
  EXPECT_NEAR(out[0], 1.0 / (1.0 + std::exp(-36.0)), 1e-12);
}

TEST(PrototypeHead, SymmetricTwoClassGeometry) {
  ClassSupports<double> s;
  s.per_class.push_back(Tensor<double>({1, 2}, {1.0, 0.0}));
  s.per_class.push_back(Tensor<double>({1, 2}, {-1.0, 0.0}));
  auto out = prototype_head(s, Tensor<double>({2}, {0.0, 0.0}));
  EXPECT_NEAR(out[0], 0.5, 1e-15);
  EXPECT_NEAR(out[1], 0.5, 1e-15);
}

TEST(Oracle, PipelineMatchesBruteForce) {
  std::mt19937_64 rng(4242);
  for (int episode = 0; episode < 1000; ++episode) {
    const std::int64_t n = 2 + static_cast<std::int64_t>(rng() % 5);  // up to 6
    const std::int64_t k = 1 + static_cast<std::int64_t>(rng() % 5);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng() % 8);
    ClassSupports<double> s = random_supports(n, k, d, rng());
    Tensor<double> q = randt({d}, rng());
    const bool negative = (episode % 2 == 0);
    const AttentionSign sign = negative ? AttentionSign::negative : AttentionSign::literal;

    AttentionResult<double> got = competitive_head(s, q, sign);
    BruteForceResult want = brute_force_head(s, q, negative);

    ASSERT_EQ(got.winners, want.winners);
    double sum = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      EXPECT_NEAR(got.weights[i], want.weights[i], 1e-12);
      EXPECT_GT(got.weights[i], 0.0);
      sum += got.weights[i];
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
}

TEST(Invariants, TranslationInvariance) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    ClassSupports<double> s = random_supports(4, 3, 5, 700 + seed);
    Tensor<double> q = randt({5}, 800 + seed);
    Tensor<double> shift = randt({5}, 900 + seed, 10.0);

    AttentionResult<double> base = competitive_head(s, q);

    ClassSupports<double> moved = s;
    for (auto& m : moved.per_class)
      for (std::int64_t j = 0; j < m.dim(0); ++j)
        for (std::int64_t e = 0; e < 5; ++e) m[j * 5 + e] += shift[e];
    Tensor<double> q2 = q;
    for (std::int64_t e = 0; e < 5; ++e) q2[e] += shift[e];

    AttentionResult<double> after = competitive_head(moved, q2);
    ASSERT_EQ(base.winners, after.winners);
    for (std::int64_t i = 0; i < 4; ++i) {
      EXPECT_NEAR(after.weights[i], base.weights[i], 1e-9);
      EXPECT_NEAR(after.predicted[i], base.predicted[i], 1e-9);
    }
  }
}

TEST(Invariants, ScaleCovarianceOfArgmax) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    ClassSupports<double> s = random_supports(5, 2, 4, 1000 + seed);
    Tensor<double> q = randt({4}, 1100 + seed);
    const double c = 0.1 + static_cast<double>(seed) * 0.35;

    AttentionResult<double> base = competitive_head(s, q);
    ClassSupports<double> scaled = s;
    for (auto& m : scaled.per_class)
      for (std::int64_t i = 0; i < m.size(); ++i) m[i] *= c;
    Tensor<double> q2 = q;
    for (std::int64_t e = 0; e < 4; ++e) q2[e] *= c;

    AttentionResult<double> after = competitive_head(scaled, q2);
    ASSERT_EQ(base.winners, after.winners);
    std::int64_t a1 = 0, a2 = 0;
    for (std::int64_t i = 1; i < 5; ++i) {
      if (base.predicted[i] > base.predicted[a1]) a1 = i;
      if (after.predicted[i] > after.predicted[a2]) a2 = i;
    }
    EXPECT_EQ(a1, a2);
  }
}

TEST(Invariants, ReductionToMatchingAndPrototype) {
  // With the class support embedding bypassed and K=1 the three heads agree:
  // competitive == matching on the whole distribution, all three on argmax.
  std::mt19937_64 rng(777);
  for (int episode = 0; episode < 1000; ++episode) {
    const std::int64_t n = 2 + static_cast<std::int64_t>(rng() % 5);
    const std::int64_t d = 1 + static_cast<std::int64_t>(rng() % 8);
    ClassSupports<double> s = random_supports(n, 1, d, rng());
    Tensor<double> q = randt({d}, rng());

    AttentionResult<double> comp = competitive_head(s, q, AttentionSign::negative);
    std::vector<Tensor<double>> vectors;
    std::vector<std::int64_t> classes;
    for (std::int64_t i = 0; i < n; ++i) {
      vectors.push_back(Tensor<double>({d}, std::vector<double>(s.per_class[i].values())));
      classes.push_back(i);
    }
    auto match = matching_attention(vectors, classes, n, q);
    auto proto = prototype_head(s, q);

    std::int64_t ca = 0, ma = 0, pa = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      ASSERT_NEAR(match[i], comp.predicted[i], 1e-12);
      if (comp.predicted[i] > comp.predicted[ca]) ca = i;
      if (match[i] > match[ma]) ma = i;
      if (proto[i] > proto[pa]) pa = i;
    }
    ASSERT_EQ(ca, ma);
    ASSERT_EQ(ca, pa);
  }
}

TEST(Invariants, NonWinnerGradientsAreExactlyZero) {
  // Head loss built in the graph: gradient flows only through each class's
  // winning support row; other rows get exactly zero.
  const std::int64_t n = 3, k = 3, d = 4;
  std::vector<Tensor<double>> params;
  for (std::int64_t i = 0; i < n; ++i) params.push_back(randt({k, d}, 2000 + i));
  Tensor<double> query = randt({d}, 2100);
  params.push_back(query);

  auto build = [&](Graph<double>& g, const std::vector<Var>& vs) {
    Var q = vs.back();
    std::vector<Var> dists;
    std::vector<std::int64_t> winners;
    for (std::int64_t i = 0; i < n; ++i) {
      const Tensor<double>& m = g.value(vs[i]);
      const Tensor<double>& qv = g.value(q);
      std::int64_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::int64_t j = 0; j < k; ++j) {
        double acc = 0;
        for (std::int64_t e = 0; e < d; ++e) {
          const double diff = m[j * d + e] - qv[e];
          acc += diff * diff;
        }
        if (acc < best_d) {
          best_d = acc;
          best = j;
        }
      }
      winners.push_back(best);
      dists.push_back(g.sqrt(g.squared_l2(g.row(vs[i], best), q)));
    }
    Var logits = g.scale(g.stack(dists), -1.0);
    return std::make_pair(g.nll_loss(g.softmax(logits), 1), winners);
  };

  Graph<double> g;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(g.param(p));
  auto [loss, winners] = build(g, vars);
  GradientMap<double> gm = g.backward(loss, vars);

  for (std::int64_t i = 0; i < n; ++i) {
    const Tensor<double>& grad = gm.at(vars[i]);
    for (std::int64_t j = 0; j < k; ++j) {
      double norm = 0;
      for (std::int64_t e = 0; e < d; ++e) norm += std::abs(grad[j * d + e]);
      if (j == winners[i]) {
        EXPECT_GT(norm, 0.0);
      } else {
        EXPECT_EQ(norm, 0.0);
      }
    }
  }

  // And the head as a whole is differentiable: finite differences agree.
  auto report = csn::test::check_loss(params, [&](Graph<double>& g2, const std::vector<Var>& vs) {
    return build(g2, vs).first;
  });
  EXPECT_LE(report.max_rel_err, 1e-4);
  EXPECT_EQ(report.coords_skipped, 0);
}
