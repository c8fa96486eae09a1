#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "csn/attention.hpp"
#include "csn/graph.hpp"
#include "csn/networks.hpp"
#include "test_util.hpp"

using namespace csn;
using csn::test::check_loss;
using csn::test::randt;

namespace {

template <typename T>
std::int64_t total_params(EmbeddingParams<T>& p) {
  std::int64_t n = 0;
  for_each_embedding_tensor(p, [&](const std::string&, Tensor<T>& t) { n += t.size(); });
  return n;
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) return false;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

}  // namespace

TEST(ArchSpec, Conv4ShapeAlgebra) {
  ArchSpec arch = ArchSpec::make_conv(ArchKind::conv4, {1, 28, 28});
  // 28 -> 14 -> 7 -> 3 -> 1 spatial, 64 channels.
  EXPECT_EQ(arch.feature_dim(), 64);
}

TEST(ArchSpec, Conv6AndConv9Dims) {
  EXPECT_EQ(ArchSpec::make_conv(ArchKind::conv6, {1, 28, 28}).feature_dim(), 64);
  EXPECT_EQ(ArchSpec::make_conv(ArchKind::conv9, {3, 84, 84}).feature_dim(), 2000);
}

TEST(ArchSpec, TooSmallInputIsConfigError) {
  ArchSpec arch = ArchSpec::make_conv(ArchKind::conv4, {1, 5, 5});
  EXPECT_THROW(arch.feature_dim(), ConfigError);
  EXPECT_THROW(build_embedding<float>(arch, 1), ConfigError);
}

TEST(ArchSpec, MlpParameterCount) {
  auto params = build_embedding<double>(ArchSpec::make_mlp({2, 32, 16}), 5);
  EXPECT_EQ(total_params(params), 2 * 32 + 32 + 32 * 16 + 16);  // 624
}

TEST(BuildEmbedding, SameSeedBitIdentical) {
  auto a = build_embedding<float>(ArchSpec::make_conv(ArchKind::conv4, {1, 28, 28}), 42);
  auto b = build_embedding<float>(ArchSpec::make_conv(ArchKind::conv4, {1, 28, 28}), 42);
  ASSERT_EQ(a.weights.size(), b.weights.size());
  for (std::size_t i = 0; i < a.weights.size(); ++i) {
    EXPECT_TRUE(bitwise_equal(a.weights[i].value, b.weights[i].value)) << a.weights[i].name;
  }
  auto c = build_embedding<float>(ArchSpec::make_conv(ArchKind::conv4, {1, 28, 28}), 43);
  EXPECT_FALSE(bitwise_equal(a.weights[0].value, c.weights[0].value));
}

TEST(Embed, Conv4OmniglotBatchShape) {
  auto params = build_embedding<float>(ArchSpec::make_conv(ArchKind::conv4, {1, 28, 28}), 7);
  Tensor<float> batch = randt<float>({5, 1, 28, 28}, 8);
  Tensor<float> feats = embed(params, batch);
  EXPECT_EQ(feats.shape(), (Shape{5, 64}));
}

TEST(Embed, BatchShapeMismatch) {
  auto params = build_embedding<float>(ArchSpec::make_mlp({4, 8}), 7);
  Tensor<float> batch = randt<float>({3, 5}, 9);
  EXPECT_THROW(embed(params, batch), DimensionError);
}

TEST(Embed, PermutingRowsPermutesOutputs) {
  auto params = build_embedding<double>(ArchSpec::make_mlp({6, 16, 8}), 11);
  Tensor<double> batch = randt({4, 6}, 12);
  Tensor<double> out = embed(params, batch);

  const std::vector<std::int64_t> perm = {2, 0, 3, 1};
  Tensor<double> shuffled({4, 6});
  for (std::int64_t r = 0; r < 4; ++r)
    for (std::int64_t c = 0; c < 6; ++c) shuffled[r * 6 + c] = batch[perm[r] * 6 + c];
  Tensor<double> out2 = embed(params, shuffled);
  for (std::int64_t r = 0; r < 4; ++r)
    for (std::int64_t c = 0; c < 8; ++c) {
      EXPECT_DOUBLE_EQ(out2[r * 8 + c], out[perm[r] * 8 + c]);
    }
}

TEST(Embed, PerSampleContractInEvalMode) {
  auto params = build_embedding<float>(ArchSpec::make_conv(ArchKind::conv4, {1, 16, 16}), 13);
  Tensor<float> batch = randt<float>({3, 1, 16, 16}, 14);
  Tensor<float> together = embed(params, batch);
  for (std::int64_t r = 0; r < 3; ++r) {
    Tensor<float> one({1, 1, 16, 16});
    for (std::int64_t i = 0; i < 16 * 16; ++i) one[i] = batch[r * 16 * 16 + i];
    Tensor<float> alone = embed(params, one);
    for (std::int64_t c = 0; c < together.dim(1); ++c) {
      EXPECT_NEAR(alone[c], together[r * together.dim(1) + c], 1e-6f);
    }
  }
}

TEST(Embed, ZeroFinalLayerGivesZeroFeatures) {
  auto params = build_embedding<double>(ArchSpec::make_mlp({3, 8, 4}), 15);
  // Final dense weight and bias to zero (bias is already zero-initialized).
  for (auto& w : params.weights) {
    if (w.name.find("dense2") != std::string::npos) {
      for (std::int64_t i = 0; i < w.value.size(); ++i) w.value[i] = 0;
    }
  }
  Tensor<double> out = embed(params, randt({2, 3}, 16));
  for (std::int64_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], 0.0);
}

TEST(ClassSupport, OutputShapeMatchesInput) {
  auto p = build_class_support<float>(5, 64, 64, 21);
  Tensor<float> feats = randt<float>({5, 64}, 22);
  Tensor<float> out = class_support_forward(p, feats);
  EXPECT_EQ(out.shape(), (Shape{5, 64}));
}

TEST(ClassSupport, SingleShotDegenerate) {
  auto p = build_class_support<float>(1, 16, 8, 23);
  Tensor<float> feats = randt<float>({1, 16}, 24);
  EXPECT_EQ(class_support_forward(p, feats).shape(), (Shape{1, 16}));
}

TEST(ClassSupport, SameSeedBitIdentical) {
  auto a = build_class_support<double>(3, 12, 6, 31);
  auto b = build_class_support<double>(3, 12, 6, 31);
  EXPECT_TRUE(bitwise_equal(a.conv1, b.conv1));
  EXPECT_TRUE(bitwise_equal(a.conv2, b.conv2));
  EXPECT_TRUE(bitwise_equal(a.conv3, b.conv3));
}

TEST(ClassSupport, BadParamsAreConfigErrors) {
  EXPECT_THROW(build_class_support<float>(0, 4, 4, 1), ConfigError);
  EXPECT_THROW(build_class_support<float>(2, 0, 4, 1), ConfigError);
  EXPECT_THROW(build_class_support<float>(2, 4, 0, 1), ConfigError);
}

TEST(ClassSupport, WrongInputShapeIsDimensionError) {
  auto p = build_class_support<float>(3, 8, 4, 25);
  EXPECT_THROW(class_support_forward(p, randt<float>({2, 8}, 26)), DimensionError);
  EXPECT_THROW(class_support_forward(p, randt<float>({3, 9}, 27)), DimensionError);
}

TEST(ClassSupport, ZeroMixingLayerGivesZeroOutput) {
  auto p = build_class_support<double>(2, 6, 4, 28);
  for (std::int64_t i = 0; i < p.conv3.size(); ++i) p.conv3[i] = 0;
  Tensor<double> out = class_support_forward(p, randt({2, 6}, 29));
  for (std::int64_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], 0.0);
}

TEST(ClassSupport, NotPermutationEquivariant) {
  // Recorded property, not an invariant: permuting the K input rows does not
  // just permute the K output rows for a random phi.
  auto p = build_class_support<double>(3, 10, 8, 30);
  Tensor<double> feats = randt({3, 10}, 31);
  Tensor<double> base = class_support_forward(p, feats);

  const std::vector<std::int64_t> perm = {1, 2, 0};
  Tensor<double> permuted({3, 10});
  for (std::int64_t r = 0; r < 3; ++r)
    for (std::int64_t c = 0; c < 10; ++c) permuted[r * 10 + c] = feats[perm[r] * 10 + c];
  Tensor<double> out = class_support_forward(p, permuted);

  double max_diff = 0;
  for (std::int64_t r = 0; r < 3; ++r)
    for (std::int64_t c = 0; c < 10; ++c)
      max_diff = std::max(max_diff, std::abs(out[r * 10 + c] - base[perm[r] * 10 + c]));
  EXPECT_GT(max_diff, 1e-3);
}

TEST(ClassSupport, GradientMatchesFiniteDifferences) {
  auto p = build_class_support<double>(3, 6, 4, 33);
  Tensor<double> feats = randt({2, 3, 6}, 34);
  std::vector<Tensor<double>> params = {p.conv1,      p.bn1.gamma, p.bn1.beta, p.conv2,
                                        p.bn2.gamma,  p.bn2.beta,  p.conv3,    feats};
  auto report = check_loss(params, [&](Graph<double>& g, const std::vector<Var>& vs) {
    ClassSupportParams<double> local = p;  // shape metadata + fresh bn states
    BoundClassSupport<double> bound;
    bound.params = &local;
    bound.conv1 = vs[0];
    bound.gamma1 = vs[1];
    bound.beta1 = vs[2];
    bound.conv2 = vs[3];
    bound.gamma2 = vs[4];
    bound.beta2 = vs[5];
    bound.conv3 = vs[6];
    local.bn1.state = BatchNormState<double>();
    local.bn2.state = BatchNormState<double>();
    Var out = class_support_forward_batched(g, bound, vs[7], BnMode::train);
    // Small scale keeps the finite-difference oracle well-conditioned.
    return g.scale(g.sum(out), 0.01);
  });
  EXPECT_LE(report.max_rel_err, 1e-4);
}

TEST(Bypass, IdentityBitwise) {
  Tensor<float> feats = randt<float>({4, 9}, 35);
  EXPECT_TRUE(bitwise_equal(bypass_class_support(feats), feats));
}

TEST(Pipeline, AllParametersReceiveGradient) {
  // Mini episode pipeline: mlp embedding + class support + competitive head.
  const int way = 3, shot = 2, queries = 2;
  auto emb = build_embedding<double>(ArchSpec::make_mlp({4, 12, 6}), 40);
  auto sup = build_class_support<double>(shot, 6, 4, 41);

  Graph<double> g;
  BoundEmbedding<double> bemb = bind_embedding(g, emb, true);
  BoundClassSupport<double> bsup = bind_class_support(g, sup, true);

  Tensor<double> support_batch = randt({way * shot, 4}, 42);
  Tensor<double> query_batch = randt({way * queries, 4}, 43);

  Var sup_feats = embed_forward(g, bemb, g.constant(support_batch), BnMode::train);
  Var qry_feats = embed_forward(g, bemb, g.constant(query_batch), BnMode::train);
  Var per_class = g.reshape(sup_feats, {way, shot, 6});
  Var ups = class_support_forward_batched(g, bsup, per_class, BnMode::train);

  std::vector<Var> losses;
  for (int q = 0; q < way * queries; ++q) {
    Var qv = g.row(qry_feats, q);
    std::vector<Var> dists;
    for (int c = 0; c < way; ++c) {
      Var cls = g.row(ups, c);  // [shot, 6]
      // winner by value inspection
      const Tensor<double>& cm = g.value(cls);
      const Tensor<double>& qm = g.value(qv);
      std::int64_t best = 0;
      double best_d = 1e300;
      for (int j = 0; j < shot; ++j) {
        double acc = 0;
        for (int e = 0; e < 6; ++e) {
          const double diff = cm[j * 6 + e] - qm[e];
          acc += diff * diff;
        }
        if (acc < best_d) {
          best_d = acc;
          best = j;
        }
      }
      dists.push_back(g.sqrt(g.squared_l2(g.row(cls, best), qv)));
    }
    Var logits = g.scale(g.stack(dists), -1.0);
    losses.push_back(g.nll_loss(g.softmax(logits), q / queries));
  }
  Var loss = g.mean_of(losses);

  std::vector<Var> wrt = bemb.weights;
  for (auto [gv, bv] : bemb.bn) {
    wrt.push_back(gv);
    wrt.push_back(bv);
  }
  wrt.insert(wrt.end(), {bsup.conv1, bsup.gamma1, bsup.beta1, bsup.conv2, bsup.gamma2, bsup.beta2,
                         bsup.conv3});
  GradientMap<double> gm = g.backward(loss, wrt);
  for (Var v : wrt) {
    const Tensor<double>& grad = gm.at(v);
    double norm = 0;
    for (std::int64_t i = 0; i < grad.size(); ++i) norm += std::abs(grad[i]);
    EXPECT_GT(norm, 0.0) << "node " << v.id << " received no gradient";
  }
}
