#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "csn/error.hpp"
#include "csn/graph.hpp"
#include "csn/tensor.hpp"

namespace csn {

enum class ArchKind { mlp, conv4, conv6, conv9 };

inline std::string arch_kind_name(ArchKind k) {
  switch (k) {
    case ArchKind::mlp: return "mlp";
    case ArchKind::conv4: return "conv4";
    case ArchKind::conv6: return "conv6";
    case ArchKind::conv9: return "conv9";
  }
  return "?";
}

inline ArchKind arch_kind_from_name(const std::string& name) {
  if (name == "mlp") return ArchKind::mlp;
  if (name == "conv4") return ArchKind::conv4;
  if (name == "conv6") return ArchKind::conv6;
  if (name == "conv9") return ArchKind::conv9;
  throw ConfigError("unknown architecture kind '" + name + "'");
}

struct ArchSpec {
  ArchKind kind = ArchKind::mlp;
  Shape input_shape;                     // {D} for mlp, {C,H,W} for conv nets
  std::vector<std::int64_t> mlp_widths;  // mlp only; first entry is the input dim

  static ArchSpec make_mlp(std::vector<std::int64_t> widths) {
    if (widths.size() < 2) throw ConfigError("mlp needs at least an input and one layer width");
    for (auto w : widths) {
      if (w <= 0) throw ConfigError("mlp widths must be positive");
    }
    ArchSpec a;
    a.kind = ArchKind::mlp;
    a.input_shape = {widths.front()};
    a.mlp_widths = std::move(widths);
    return a;
  }

  static ArchSpec make_conv(ArchKind kind, Shape input_chw) {
    if (kind == ArchKind::mlp) throw ConfigError("make_conv: mlp is not a conv architecture");
    if (input_chw.size() != 3) {
      throw ConfigError("conv architectures need a {channels,height,width} input shape, got " +
                        shape_str(input_chw));
    }
    ArchSpec a;
    a.kind = kind;
    a.input_shape = std::move(input_chw);
    return a;
  }

  std::int64_t feature_dim() const;
};

namespace detail_nets {

struct EmbeddingLayer {
  enum class Kind { conv3, conv1, dense, pool, flatten, gap };
  Kind kind;
  std::int64_t width = 0;  // conv filters or dense output width
  bool bn = false;
  bool relu = false;
};

inline std::vector<EmbeddingLayer> embedding_layers(const ArchSpec& arch) {
  using L = EmbeddingLayer;
  using K = EmbeddingLayer::Kind;
  std::vector<L> layers;
  switch (arch.kind) {
    case ArchKind::mlp: {
      for (std::size_t i = 1; i < arch.mlp_widths.size(); ++i) {
        const bool last = (i + 1 == arch.mlp_widths.size());
        layers.push_back({K::dense, arch.mlp_widths[i], false, !last});
      }
      break;
    }
    case ArchKind::conv4:
    case ArchKind::conv6: {
      for (int b = 0; b < 4; ++b) {
        layers.push_back({K::conv3, 64, true, true});
        layers.push_back({K::pool, 0, false, false});
      }
      if (arch.kind == ArchKind::conv6) {
        layers.push_back({K::conv3, 64, true, true});
        layers.push_back({K::conv3, 64, true, true});
      }
      layers.push_back({K::flatten, 0, false, false});
      break;
    }
    case ArchKind::conv9: {
      for (std::int64_t f : {64, 128, 256, 512}) {
        layers.push_back({K::conv3, f, true, true});
        layers.push_back({K::conv3, f, true, true});
        layers.push_back({K::pool, 0, false, false});
      }
      layers.push_back({K::conv1, 2000, false, false});
      layers.push_back({K::gap, 0, false, false});
      break;
    }
  }
  return layers;
}

// Shape algebra over the layer list. Returns the flat feature dimension and
// rejects inputs whose spatial extents collapse before the final layer.
inline std::int64_t trace_embedding(const ArchSpec& arch) {
  if (arch.kind == ArchKind::mlp) {
    if (arch.input_shape.size() != 1 || arch.input_shape[0] != arch.mlp_widths.front()) {
      throw ConfigError("mlp input shape " + shape_str(arch.input_shape) +
                        " does not match first width " + std::to_string(arch.mlp_widths.front()));
    }
    return arch.mlp_widths.back();
  }
  std::int64_t c = arch.input_shape[0], h = arch.input_shape[1], w = arch.input_shape[2];
  if (c <= 0 || h <= 0 || w <= 0) {
    throw ConfigError("conv input shape " + shape_str(arch.input_shape) + " must be positive");
  }
  for (const auto& layer : embedding_layers(arch)) {
    using K = EmbeddingLayer::Kind;
    switch (layer.kind) {
      case K::conv3:
      case K::conv1:
        c = layer.width;  // same padding, spatial unchanged
        break;
      case K::pool: {
        const std::int64_t he = h - (h % 2), we = w - (w % 2);
        if (he < 2 || we < 2) {
          throw ConfigError(arch_kind_name(arch.kind) + ": spatial extent " + std::to_string(h) +
                            "x" + std::to_string(w) + " too small for 2x2 pooling on input " +
                            shape_str(arch.input_shape));
        }
        h = he / 2;
        w = we / 2;
        break;
      }
      case K::flatten:
        return c * h * w;
      case K::gap:
        return c;
      case K::dense:
        break;
    }
  }
  throw ConfigError("embedding layer list has no terminal layer");
}

}  // namespace detail_nets

inline std::int64_t ArchSpec::feature_dim() const { return detail_nets::trace_embedding(*this); }

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

template <typename T>
struct BnLayer {
  std::string name;
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormState<T> state;
};

// Parameters of the per-sample embedding F. Weight and batch-norm order
// follows the layer walk, which build and forward share.
template <typename T>
struct EmbeddingParams {
  ArchSpec arch;
  std::uint64_t seed = 0;
  std::vector<NamedTensor<T>> weights;
  std::vector<BnLayer<T>> bn;
};

namespace detail_nets {

template <typename T>
Tensor<T> he_normal(Shape shape, std::int64_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
BnLayer<T> make_bn(std::string name, std::int64_t channels) {
  BnLayer<T> bn;
  bn.name = std::move(name);
  bn.gamma = Tensor<T>::full({channels}, T(1));
  bn.beta = Tensor<T>({channels});
  bn.state = BatchNormState<T>::unit(channels);
  return bn;
}

}  // namespace detail_nets

// Deterministic initialization from the seed: He fan-in scaling for conv and
// dense weights, zero biases, unit batch-norm.
template <typename T>
EmbeddingParams<T> build_embedding(const ArchSpec& arch, std::uint64_t seed) {
  detail_nets::trace_embedding(arch);  // validates arch/input compatibility
  EmbeddingParams<T> params;
  params.arch = arch;
  params.seed = seed;
  std::mt19937_64 rng(seed);

  std::int64_t in_c = arch.kind == ArchKind::mlp ? arch.mlp_widths.front() : arch.input_shape[0];
  int index = 0;
  for (const auto& layer : detail_nets::embedding_layers(arch)) {
    using K = detail_nets::EmbeddingLayer::Kind;
    ++index;
    const std::string tag = std::to_string(index);
    switch (layer.kind) {
      case K::conv3:
      case K::conv1: {
        const std::int64_t k = layer.kind == K::conv3 ? 3 : 1;
        params.weights.push_back({"conv" + tag + ".kernel",
                                  detail_nets::he_normal<T>({layer.width, in_c, k, k},
                                                            in_c * k * k, rng)});
        if (layer.bn) params.bn.push_back(detail_nets::make_bn<T>("bn" + tag, layer.width));
        in_c = layer.width;
        break;
      }
      case K::dense: {
        params.weights.push_back(
            {"dense" + tag + ".weight", detail_nets::he_normal<T>({in_c, layer.width}, in_c, rng)});
        params.weights.push_back({"dense" + tag + ".bias", Tensor<T>({layer.width})});
        in_c = layer.width;
        break;
      }
      case K::pool:
      case K::flatten:
      case K::gap:
        break;
    }
  }
  return params;
}

template <typename T>
struct BoundEmbedding {
  EmbeddingParams<T>* params = nullptr;
  std::vector<Var> weights;                  // aligned with params->weights
  std::vector<std::pair<Var, Var>> bn;       // gamma, beta per bn layer
};

// Inserts every parameter tensor into the graph. Trainable binding makes
// them gradient leaves; otherwise they enter as constants.
template <typename T>
BoundEmbedding<T> bind_embedding(Graph<T>& g, EmbeddingParams<T>& params, bool trainable = true) {
  BoundEmbedding<T> bound;
  bound.params = &params;
  for (const auto& w : params.weights) {
    bound.weights.push_back(trainable ? g.param(w.value) : g.constant(w.value));
  }
  for (const auto& bn : params.bn) {
    Var gv = trainable ? g.param(bn.gamma) : g.constant(bn.gamma);
    Var bv = trainable ? g.param(bn.beta) : g.constant(bn.beta);
    bound.bn.emplace_back(gv, bv);
  }
  return bound;
}

// Forward pass of F over a batch node. Row i of the output depends only on
// sample i except for batch-norm coupling in train mode.
template <typename T>
Var embed_forward(Graph<T>& g, const BoundEmbedding<T>& bound, Var batch, BnMode mode) {
  const ArchSpec& arch = bound.params->arch;
  Shape expected = {g.value(batch).dim(0)};
  for (auto d : arch.input_shape) expected.push_back(d);
  if (g.value(batch).shape() != expected) {
    throw DimensionError("embed: batch shape " + shape_str(g.value(batch).shape()) +
                         " does not match architecture input " + shape_str(expected));
  }
  Var x = batch;
  std::size_t wi = 0, bi = 0;
  for (const auto& layer : detail_nets::embedding_layers(arch)) {
    using K = detail_nets::EmbeddingLayer::Kind;
    switch (layer.kind) {
      case K::conv3:
      case K::conv1:
        x = g.conv2d(x, bound.weights[wi++], 1, Padding::same);
        break;
      case K::dense: {
        Var w = bound.weights[wi++];
        Var b = bound.weights[wi++];
        x = g.dense(x, w, b);
        break;
      }
      case K::pool:
        x = g.max_pool2d(g.crop_even2d(x));
        break;
      case K::flatten: {
        const Tensor<T>& v = g.value(x);
        x = g.reshape(x, {v.dim(0), v.size() / v.dim(0)});
        break;
      }
      case K::gap:
        x = g.avg_pool_global(x);
        break;
    }
    if (layer.bn) {
      auto [gv, bv] = bound.bn[bi];
      x = g.batch_norm(x, gv, bv, bound.params->bn[bi].state, mode);
      ++bi;
    }
    if (layer.relu) x = g.relu(x);
  }
  return x;
}

// Convenience non-graph embedding of a raw batch.
template <typename T>
Tensor<T> embed(EmbeddingParams<T>& params, const Tensor<T>& batch, BnMode mode = BnMode::eval) {
  Graph<T> g;
  BoundEmbedding<T> bound = bind_embedding(g, params, false);
  Var out = embed_forward(g, bound, g.constant(batch), mode);
  return g.value(out);
}

// Class support embedding of Fig-3 shape: two per-point Conv1D(m,3) blocks
// with batch norm and relu, then a kernel-size-1 convolution that mixes the
// K*m stacked channel maps of one class into K output rows.
template <typename T>
struct ClassSupportParams {
  std::int64_t k_shots = 0;
  std::int64_t feature_dim = 0;
  std::int64_t channels = 0;  // m
  std::uint64_t seed = 0;
  Tensor<T> conv1;  // [m, 1, 3]
  BnLayer<T> bn1;
  Tensor<T> conv2;  // [m, m, 3]
  BnLayer<T> bn2;
  Tensor<T> conv3;  // [K, K*m, 1]
};

template <typename T>
ClassSupportParams<T> build_class_support(std::int64_t k_shots, std::int64_t feature_dim,
                                          std::int64_t channels, std::uint64_t seed) {
  if (k_shots < 1 || feature_dim < 1 || channels < 1) {
    throw ConfigError("class support: K, D and m must all be at least 1");
  }
  ClassSupportParams<T> p;
  p.k_shots = k_shots;
  p.feature_dim = feature_dim;
  p.channels = channels;
  p.seed = seed;
  std::mt19937_64 rng(seed);
  p.conv1 = detail_nets::he_normal<T>({channels, 1, 3}, 3, rng);
  p.bn1 = detail_nets::make_bn<T>("support.bn1", channels);
  p.conv2 = detail_nets::he_normal<T>({channels, channels, 3}, channels * 3, rng);
  p.bn2 = detail_nets::make_bn<T>("support.bn2", channels);
  p.conv3 = detail_nets::he_normal<T>({k_shots, k_shots * channels, 1}, k_shots * channels, rng);
  return p;
}

template <typename T>
struct BoundClassSupport {
  ClassSupportParams<T>* params = nullptr;
  Var conv1, conv2, conv3;
  Var gamma1, beta1, gamma2, beta2;
};

template <typename T>
BoundClassSupport<T> bind_class_support(Graph<T>& g, ClassSupportParams<T>& params,
                                        bool trainable = true) {
  auto wrap = [&](const Tensor<T>& t) { return trainable ? g.param(t) : g.constant(t); };
  BoundClassSupport<T> b;
  b.params = &params;
  b.conv1 = wrap(params.conv1);
  b.conv2 = wrap(params.conv2);
  b.conv3 = wrap(params.conv3);
  b.gamma1 = wrap(params.bn1.gamma);
  b.beta1 = wrap(params.bn1.beta);
  b.gamma2 = wrap(params.bn2.gamma);
  b.beta2 = wrap(params.bn2.beta);
  return b;
}

// Batched forward over class features [N,K,D] -> [N,K,D]. The first two
// layers see each of the N*K support points independently; layer 3 mixes
// channels within a class only.
template <typename T>
Var class_support_forward_batched(Graph<T>& g, const BoundClassSupport<T>& bound, Var feats,
                                  BnMode mode) {
  const ClassSupportParams<T>& p = *bound.params;
  const Tensor<T>& in = g.value(feats);
  if (in.rank() != 3 || in.dim(1) != p.k_shots || in.dim(2) != p.feature_dim) {
    throw DimensionError("class support: input shape " + shape_str(in.shape()) +
                         " does not match configured [N," + std::to_string(p.k_shots) + "," +
                         std::to_string(p.feature_dim) + "]");
  }
  const std::int64_t n = in.dim(0);
  Var x = g.reshape(feats, {n * p.k_shots, 1, p.feature_dim});
  x = g.conv1d(x, bound.conv1, 1, Padding::same);
  x = g.batch_norm(x, bound.gamma1, bound.beta1, bound.params->bn1.state, mode);
  x = g.relu(x);
  x = g.conv1d(x, bound.conv2, 1, Padding::same);
  x = g.batch_norm(x, bound.gamma2, bound.beta2, bound.params->bn2.state, mode);
  x = g.relu(x);
  x = g.reshape(x, {n, p.k_shots * p.channels, p.feature_dim});
  x = g.conv1d(x, bound.conv3, 1, Padding::valid);
  return x;  // [N, K, D]
}

// Spec-facing single-class forward: [K,D] -> [K,D].
template <typename T>
Tensor<T> class_support_forward(ClassSupportParams<T>& params, const Tensor<T>& class_feats,
                                BnMode mode = BnMode::eval) {
  if (class_feats.rank() != 2) {
    throw DimensionError("class support: expected a [K,D] matrix, got " +
                         shape_str(class_feats.shape()));
  }
  Graph<T> g;
  BoundClassSupport<T> bound = bind_class_support(g, params, false);
  Var in = g.constant(Tensor<T>({1, class_feats.dim(0), class_feats.dim(1)},
                                std::vector<T>(class_feats.values())));
  Var out = class_support_forward_batched(g, bound, in, mode);
  return Tensor<T>({class_feats.dim(0), class_feats.dim(1)},
                   std::vector<T>(g.value(out).values()));
}

// Identity stand-in for the ablation without the support embedding.
template <typename T>
Tensor<T> bypass_class_support(const Tensor<T>& class_feats) {
  return class_feats;
}

// Named traversal across embedding + class-support trainables, in a fixed
// order shared by the optimizer, checkpoints and parameter averaging.
template <typename T, typename Fn>
void for_each_embedding_tensor(EmbeddingParams<T>& p, Fn&& fn) {
  for (auto& w : p.weights) fn(w.name, w.value);
  for (auto& bn : p.bn) {
    fn(bn.name + ".gamma", bn.gamma);
    fn(bn.name + ".beta", bn.beta);
  }
}

template <typename T, typename Fn>
void for_each_class_support_tensor(ClassSupportParams<T>& p, Fn&& fn) {
  fn("support.conv1.kernel", p.conv1);
  fn("support.bn1.gamma", p.bn1.gamma);
  fn("support.bn1.beta", p.bn1.beta);
  fn("support.conv2.kernel", p.conv2);
  fn("support.bn2.gamma", p.bn2.gamma);
  fn("support.bn2.beta", p.bn2.beta);
  fn("support.conv3.kernel", p.conv3);
}

template <typename T, typename Fn>
void for_each_embedding_state(EmbeddingParams<T>& p, Fn&& fn) {
  for (auto& bn : p.bn) fn(bn.name, bn.state);
}

template <typename T, typename Fn>
void for_each_class_support_state(ClassSupportParams<T>& p, Fn&& fn) {
  fn("support.bn1", p.bn1.state);
  fn("support.bn2", p.bn2.state);
}

}  // namespace csn
