#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "csn/attention.hpp"
#include "csn/episodes.hpp"
#include "csn/error.hpp"
#include "csn/graph.hpp"
#include "csn/networks.hpp"
#include "csn/rng.hpp"
#include "csn/serialize.hpp"
#include "csn/tensor.hpp"

namespace csn {

// Theta = [theta, phi]: the embedding and the class support net, with their
// batch-norm running statistics.
template <typename T>
struct ModelParams {
  EmbeddingParams<T> embedding;
  ClassSupportParams<T> class_support;
};

template <typename T, typename Fn>
void for_each_model_tensor(ModelParams<T>& m, Fn&& fn) {
  for_each_embedding_tensor(m.embedding,
                            [&](const std::string& name, Tensor<T>& t) { fn("embed." + name, t); });
  for_each_class_support_tensor(m.class_support, fn);
}

template <typename T, typename Fn>
void for_each_model_state(ModelParams<T>& m, Fn&& fn) {
  for_each_embedding_state(m.embedding, [&](const std::string& name, BatchNormState<T>& s) {
    fn("embed." + name, s);
  });
  for_each_class_support_state(m.class_support, fn);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> named_trainables(ModelParams<T>& m) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for_each_model_tensor(m, [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, &t); });
  return out;
}

struct ModelConfig {
  ArchSpec arch;
  std::int64_t support_channels = 64;  // m of the class support net
};

template <typename T>
ModelParams<T> build_model(const ModelConfig& mc, std::int64_t k_shots, std::uint64_t seed) {
  ModelParams<T> m;
  m.embedding = build_embedding<T>(mc.arch, mix_seed(seed, seed_stream::model));
  m.class_support = build_class_support<T>(k_shots, mc.arch.feature_dim(), mc.support_channels,
                                           mix_seed(seed, seed_stream::support_net));
  return m;
}

// Variant switches shared by training and evaluation.
struct EvalVariant {
  HeadKind head = HeadKind::competitive;
  AttentionSign sign = AttentionSign::negative;
  bool bypass_class_support = false;
};

template <typename T>
struct EpisodeLossGraph {
  Var loss;
  std::vector<Var> params;  // canonical trainable order (for_each_model_tensor)
};

namespace detail_trainer {

// Canonical trainable node list, aligned with for_each_model_tensor.
template <typename T>
std::vector<Var> canonical_param_nodes(const BoundEmbedding<T>& be, const BoundClassSupport<T>& bs) {
  std::vector<Var> vars = be.weights;
  for (auto [gv, bv] : be.bn) {
    vars.push_back(gv);
    vars.push_back(bv);
  }
  vars.insert(vars.end(),
              {bs.conv1, bs.gamma1, bs.beta1, bs.conv2, bs.gamma2, bs.beta2, bs.conv3});
  return vars;
}

// Per-class winner distances for one query, built on forward values with the
// gradient flowing only through the winning rows (argmin gate).
template <typename T>
Var competitive_logits(Graph<T>& g, Var class_supports /*[N,K,D]*/, Var query /*[D]*/,
                       AttentionSign sign) {
  const Tensor<T>& all = g.value(class_supports);
  const std::int64_t n = all.dim(0), k = all.dim(1), d = all.dim(2);
  const Tensor<T>& q = g.value(query);
  std::vector<Var> dists;
  dists.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best = 0;
    T best_sq = std::numeric_limits<T>::infinity();
    for (std::int64_t j = 0; j < k; ++j) {
      T acc{};
      for (std::int64_t e = 0; e < d; ++e) {
        const T diff = all[(i * k + j) * d + e] - q[e];
        acc += diff * diff;
      }
      if (acc < best_sq) {
        best_sq = acc;
        best = j;
      }
    }
    Var cls = g.row(class_supports, i);
    dists.push_back(g.sqrt(g.squared_l2(g.row(cls, best), query)));
  }
  Var stacked = g.stack(dists);
  return g.scale(stacked, sign == AttentionSign::negative ? T(-1) : T(1));
}

template <typename T>
Tensor<T> combined_episode_batch(const Episode& ep, const Shape& input_shape) {
  std::vector<std::vector<float>> rows = ep.support;
  rows.insert(rows.end(), ep.query.begin(), ep.query.end());
  return rows_tensor<T>(rows, input_shape);
}

}  // namespace detail_trainer

// Appends one episode's loss subgraph: embeds support and queries as one
// batch (train-mode batch norm sees the combined episode), applies the class
// support net per class (or bypasses it), runs competitive attention per
// query and averages the NLL over all N*Q queries.
template <typename T>
Var episode_loss_subgraph(Graph<T>& g, const BoundEmbedding<T>& be, const BoundClassSupport<T>& bs,
                          const Episode& ep, const EvalVariant& variant, BnMode mode) {
  const std::int64_t n = ep.way, k = ep.shot, nq = static_cast<std::int64_t>(ep.query.size());
  const Shape& input_shape = be.params->arch.input_shape;
  Tensor<T> batch = detail_trainer::combined_episode_batch<T>(ep, input_shape);
  Var feats = embed_forward(g, be, g.constant(std::move(batch)), mode);
  const std::int64_t d = g.value(feats).dim(1);

  Var sup_feats = g.slice_rows(feats, 0, n * k);
  Var qry_feats = g.slice_rows(feats, n * k, nq);
  Var per_class = g.reshape(sup_feats, {n, k, d});
  Var supports = variant.bypass_class_support
                     ? per_class
                     : class_support_forward_batched(g, bs, per_class, mode);

  std::vector<Var> losses;
  losses.reserve(static_cast<std::size_t>(nq));
  for (std::int64_t q = 0; q < nq; ++q) {
    Var query = g.row(qry_feats, q);
    Var logits = detail_trainer::competitive_logits(g, supports, query, variant.sign);
    losses.push_back(g.nll_loss(g.softmax(logits), ep.query_labels[static_cast<std::size_t>(q)]));
  }
  return g.mean_of(losses);
}

template <typename T>
EpisodeLossGraph<T> episode_loss_graph(Graph<T>& g, ModelParams<T>& model, const Episode& ep,
                                       const EvalVariant& variant, BnMode mode = BnMode::train) {
  BoundEmbedding<T> be = bind_embedding(g, model.embedding, true);
  BoundClassSupport<T> bs = bind_class_support(g, model.class_support, true);
  EpisodeLossGraph<T> out;
  out.params = detail_trainer::canonical_param_nodes(be, bs);
  out.loss = episode_loss_subgraph(g, be, bs, ep, variant, mode);
  return out;
}

// Convenience scalar loss value.
template <typename T>
T episode_loss(ModelParams<T>& model, const Episode& ep, const EvalVariant& variant = {},
               BnMode mode = BnMode::train) {
  Graph<T> g;
  return g.value(episode_loss_graph(g, model, ep, variant, mode).loss).item();
}

// Fraction of correctly argmax-classified queries of one episode, eval-mode
// batch norm, pure-function attention heads.
template <typename T>
double episode_accuracy(ModelParams<T>& model, const Episode& ep, const EvalVariant& variant = {}) {
  Graph<T> g;
  BoundEmbedding<T> be = bind_embedding(g, model.embedding, false);
  const std::int64_t n = ep.way, k = ep.shot, nq = static_cast<std::int64_t>(ep.query.size());
  Tensor<T> batch = detail_trainer::combined_episode_batch<T>(ep, be.params->arch.input_shape);
  Var feats = embed_forward(g, be, g.constant(std::move(batch)), BnMode::eval);
  const Tensor<T>& fv = g.value(feats);
  const std::int64_t d = fv.dim(1);

  ClassSupports<T> supports;
  for (std::int64_t i = 0; i < n; ++i) {
    Tensor<T> cls({k, d});
    for (std::int64_t j = 0; j < k; ++j)
      for (std::int64_t e = 0; e < d; ++e) cls[j * d + e] = fv[(i * k + j) * d + e];
    if (!variant.bypass_class_support) cls = class_support_forward(model.class_support, cls);
    supports.per_class.push_back(std::move(cls));
  }

  std::vector<Tensor<T>> flat_vectors;
  std::vector<std::int64_t> flat_classes;
  if (variant.head == HeadKind::matching) {
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < k; ++j) {
        Tensor<T> v({d});
        for (std::int64_t e = 0; e < d; ++e) v[e] = supports.per_class[i][j * d + e];
        flat_vectors.push_back(std::move(v));
        flat_classes.push_back(i);
      }
  }

  std::int64_t correct = 0;
  for (std::int64_t q = 0; q < nq; ++q) {
    Tensor<T> query({d});
    for (std::int64_t e = 0; e < d; ++e) query[e] = fv[(n * k + q) * d + e];
    std::vector<T> dist;
    switch (variant.head) {
      case HeadKind::competitive:
        dist = competitive_head(supports, query, variant.sign).predicted;
        break;
      case HeadKind::matching:
        dist = matching_attention(flat_vectors, flat_classes, n, query);
        break;
      case HeadKind::prototype:
        dist = prototype_head(supports, query);
        break;
    }
    std::int64_t argmax = 0;
    for (std::int64_t i = 1; i < n; ++i) {
      if (dist[static_cast<std::size_t>(i)] > dist[static_cast<std::size_t>(argmax)]) argmax = i;
    }
    if (argmax == ep.query_labels[static_cast<std::size_t>(q)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(nq);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t step = 0;
};

template <typename T>
AdamState<T> init_adam_state(ModelParams<T>& model) {
  AdamState<T> s;
  for_each_model_tensor(model, [&](const std::string&, Tensor<T>& t) {
    s.m.emplace_back(t.shape());
    s.v.emplace_back(t.shape());
  });
  return s;
}

// Standard bias-corrected Adam step over the canonical trainable order. The
// update arithmetic runs in double regardless of the parameter precision.
template <typename T>
void adam_step(ModelParams<T>& model, const GradientMap<T>& grads,
               const std::vector<Var>& param_nodes, AdamState<T>& state, double lr,
               const AdamConfig& cfg = {}) {
  auto trainables = named_trainables(model);
  if (trainables.size() != param_nodes.size() || trainables.size() != state.m.size()) {
    throw ContractError("adam_step: " + std::to_string(param_nodes.size()) + " gradient nodes vs " +
                        std::to_string(trainables.size()) + " trainables");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < trainables.size(); ++i) {
    Tensor<T>& p = *trainables[i].second;
    const Tensor<T>& g = grads.at(param_nodes[i]);  // ContractError when missing
    if (!g.same_shape(p)) {
      throw ContractError("adam_step: gradient shape " + shape_str(g.shape()) +
                          " does not match parameter '" + trainables[i].first + "' " +
                          shape_str(p.shape()));
    }
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    for (std::int64_t e = 0; e < p.size(); ++e) {
      const double ge = static_cast<double>(g[e]);
      const double me = cfg.beta1 * static_cast<double>(m[e]) + (1.0 - cfg.beta1) * ge;
      const double ve = cfg.beta2 * static_cast<double>(v[e]) + (1.0 - cfg.beta2) * ge * ge;
      m[e] = static_cast<T>(me);
      v[e] = static_cast<T>(ve);
      const double mhat = me / bc1;
      const double vhat = ve / bc2;
      p[e] = static_cast<T>(static_cast<double>(p[e]) - lr * mhat / (std::sqrt(vhat) + cfg.epsilon));
    }
  }
}

struct TrainConfig {
  int way = 5;
  int shot = 1;
  int queries = 10;
  int episodes_per_batch = 1;
  std::int64_t total_episodes = 2000;
  double initial_lr = 1e-3;
  std::int64_t lr_halving_period = 50000;
  std::int64_t validation_period = 500;
  int validation_episodes = 200;
  AdamConfig adam;
  std::uint64_t seed = 0;
  AttentionSign sign = AttentionSign::negative;
  bool bypass_class_support = false;

  void validate() const {
    if (way < 1 || shot < 1 || queries < 1) throw ConfigError("train: way/shot/queries must be positive");
    if (episodes_per_batch < 1) throw ConfigError("train: episodes per batch must be positive");
    if (total_episodes < 0) throw ConfigError("train: total episodes must be >= 0");
    if (initial_lr <= 0) throw ConfigError("train: learning rate must be positive");
    if (lr_halving_period < 1) throw ConfigError("train: lr halving period must be positive");
    if (validation_period < 1) throw ConfigError("train: validation period must be positive");
    if (validation_episodes < 1) throw ConfigError("train: validation episodes must be positive");
    if (adam.beta1 <= 0 || adam.beta1 >= 1 || adam.beta2 <= 0 || adam.beta2 >= 1) {
      throw ConfigError("train: adam betas must lie in (0,1)");
    }
  }

  EvalVariant variant() const {
    EvalVariant v;
    v.sign = sign;
    v.bypass_class_support = bypass_class_support;
    return v;
  }
};

// lr = initial * 0.5^floor(counter / period)
inline double lr_at(std::int64_t episode_counter, const TrainConfig& cfg) {
  if (episode_counter < 0) throw ContractError("lr_at: negative episode counter");
  return cfg.initial_lr * std::pow(0.5, static_cast<double>(episode_counter / cfg.lr_halving_period));
}

struct TrainingRecord {
  std::int64_t episode = 0;
  std::optional<double> loss;
  double lr = 0;
  std::optional<double> val_acc;
  std::optional<std::string> checkpoint_id;
};

struct TrainingLog {
  std::vector<TrainingRecord> records;

  std::string to_csv() const {
    std::string out = "episode,loss,lr,val_acc,checkpoint_id\n";
    char buf[64];
    auto fmt = [&buf](double v) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      return std::string(buf);
    };
    for (const auto& r : records) {
      out += std::to_string(r.episode) + ",";
      if (r.loss) out += fmt(*r.loss);
      out += "," + fmt(r.lr) + ",";
      if (r.val_acc) out += fmt(*r.val_acc);
      out += ",";
      if (r.checkpoint_id) out += *r.checkpoint_id;
      out += "\n";
    }
    return out;
  }
};

// Model identity carried inside every checkpoint so it can be rebuilt.
struct ModelMeta {
  ArchSpec arch;
  std::int64_t k_shots = 1;
  std::int64_t support_channels = 64;
  std::uint64_t model_seed = 0;
  std::string precision = "f32";
  AttentionSign sign = AttentionSign::negative;
  bool bypass_class_support = false;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["arch"] = {{"kind", arch_kind_name(arch.kind)},
                 {"input_shape", arch.input_shape},
                 {"mlp_widths", arch.mlp_widths}};
    j["k_shots"] = k_shots;
    j["support_channels"] = support_channels;
    j["model_seed"] = model_seed;
    j["precision"] = precision;
    j["sign"] = attention_sign_name(sign);
    j["bypass_class_support"] = bypass_class_support;
    return j;
  }

  static ModelMeta from_json(const nlohmann::json& j) {
    ModelMeta m;
    m.arch.kind = arch_kind_from_name(j.at("arch").at("kind").get<std::string>());
    m.arch.input_shape = j.at("arch").at("input_shape").get<Shape>();
    m.arch.mlp_widths = j.at("arch").at("mlp_widths").get<std::vector<std::int64_t>>();
    m.k_shots = j.at("k_shots").get<std::int64_t>();
    m.support_channels = j.at("support_channels").get<std::int64_t>();
    m.model_seed = j.at("model_seed").get<std::uint64_t>();
    m.precision = j.at("precision").get<std::string>();
    m.sign = attention_sign_from_name(j.at("sign").get<std::string>());
    m.bypass_class_support = j.at("bypass_class_support").get<bool>();
    return m;
  }
};

template <typename T>
struct Checkpoint {
  ModelParams<T> model;
  AdamState<T> adam;
  ModelMeta meta;
  std::int64_t episode = 0;
  double val_acc = 0;
  std::int64_t timestamp = 0;
};

struct CheckpointInfo {
  std::string id;
  std::int64_t episode = 0;
  double val_acc = 0;
};

constexpr std::uint32_t kCheckpointVersion = 1;

// Directory of checkpoint files plus a JSON manifest (id, episode, val acc).
class CheckpointStore {
 public:
  explicit CheckpointStore(std::string dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
    const auto manifest = manifest_path();
    if (std::filesystem::exists(manifest)) {
      std::ifstream is(manifest);
      nlohmann::json j;
      is >> j;
      for (const auto& e : j.at("checkpoints")) {
        entries_.push_back({e.at("id").get<std::string>(), e.at("episode").get<std::int64_t>(),
                            e.at("val_acc").get<double>()});
      }
    }
  }

  const std::string& dir() const { return dir_; }
  const std::vector<CheckpointInfo>& manifest() const { return entries_; }

  std::string path_of(const std::string& id) const { return dir_ + "/" + id + ".ckpt"; }

  template <typename T>
  std::string save(ModelParams<T>& model, const AdamState<T>& adam, const ModelMeta& meta,
                   std::int64_t episode, double val_acc) {
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "ckpt-%010lld", static_cast<long long>(episode));
    const std::string id = idbuf;

    std::ofstream os(path_of(id), std::ios::binary);
    if (!os) throw SerializationError("cannot open checkpoint '" + path_of(id) + "' for writing");
    os.write("CSNC", 4);
    io::write_u32(os, kCheckpointVersion);
    io::write_string(os, meta.to_json().dump());
    io::write_i64(os, episode);
    io::write_f64(os, val_acc);
    io::write_i64(os, static_cast<std::int64_t>(std::time(nullptr)));

    std::vector<std::pair<std::string, const Tensor<T>*>> tensors;
    std::vector<Tensor<T>> extra;  // materialized state scalars
    extra.reserve(256);
    for_each_model_tensor(model, [&](const std::string& name, Tensor<T>& t) {
      tensors.emplace_back("model/" + name, &t);
    });
    for_each_model_state(model, [&](const std::string& name, BatchNormState<T>& s) {
      tensors.emplace_back("state/" + name + ".mean", &s.mean);
      tensors.emplace_back("state/" + name + ".var", &s.var);
      extra.push_back(Tensor<T>::scalar(s.initialized ? T(1) : T(0)));
      tensors.emplace_back("state/" + name + ".init", &extra.back());
    });
    auto names = named_trainables(model);
    for (std::size_t i = 0; i < adam.m.size(); ++i) {
      tensors.emplace_back("adam/" + names[i].first + ".m", &adam.m[i]);
      tensors.emplace_back("adam/" + names[i].first + ".v", &adam.v[i]);
    }
    extra.push_back(Tensor<T>::scalar(static_cast<T>(adam.step)));
    tensors.emplace_back("adam/step", &extra.back());
    save_named_tensors(os, tensors);
    if (!os) throw SerializationError("write failed for checkpoint '" + id + "'");

    entries_.push_back({id, episode, val_acc});
    write_manifest();
    return id;
  }

  template <typename T>
  Checkpoint<T> load(const std::string& id) const {
    std::ifstream is(path_of(id), std::ios::binary);
    if (!is) throw SerializationError("cannot open checkpoint '" + path_of(id) + "'");
    io::expect_magic(is, "CSNC");
    const std::uint32_t version = io::read_u32(is);
    if (version != kCheckpointVersion) {
      throw SerializationError("checkpoint version " + std::to_string(version) + " not supported");
    }
    Checkpoint<T> ck;
    ck.meta = ModelMeta::from_json(nlohmann::json::parse(io::read_string(is)));
    ck.episode = io::read_i64(is);
    ck.val_acc = io::read_f64(is);
    ck.timestamp = io::read_i64(is);
    if (ck.meta.precision != (sizeof(T) == 4 ? "f32" : "f64")) {
      throw SerializationError("checkpoint '" + id + "' stores precision " + ck.meta.precision);
    }

    ModelConfig mc{ck.meta.arch, ck.meta.support_channels};
    ck.model = build_model<T>(mc, ck.meta.k_shots, ck.meta.model_seed);
    ck.adam = init_adam_state(ck.model);

    auto loaded = load_named_tensors<T>(is);
    auto find = [&](const std::string& name) -> Tensor<T>& {
      for (auto& [n, t] : loaded) {
        if (n == name) return t;
      }
      throw SerializationError("checkpoint '" + id + "' missing tensor '" + name + "'");
    };
    auto assign = [&](const std::string& name, Tensor<T>& dst) {
      Tensor<T>& src = find(name);
      if (!src.same_shape(dst)) {
        throw SerializationError("checkpoint tensor '" + name + "' has shape " +
                                 shape_str(src.shape()) + ", expected " + shape_str(dst.shape()));
      }
      dst = src;
    };
    for_each_model_tensor(ck.model,
                          [&](const std::string& name, Tensor<T>& t) { assign("model/" + name, t); });
    for_each_model_state(ck.model, [&](const std::string& name, BatchNormState<T>& s) {
      assign("state/" + name + ".mean", s.mean);
      assign("state/" + name + ".var", s.var);
      s.initialized = find("state/" + name + ".init").item() != T(0);
    });
    auto names = named_trainables(ck.model);
    for (std::size_t i = 0; i < names.size(); ++i) {
      assign("adam/" + names[i].first + ".m", ck.adam.m[i]);
      assign("adam/" + names[i].first + ".v", ck.adam.v[i]);
    }
    ck.adam.step = static_cast<std::int64_t>(find("adam/step").item());
    return ck;
  }

 private:
  std::string manifest_path() const { return dir_ + "/manifest.json"; }

  void write_manifest() const {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["checkpoints"] = nlohmann::json::array();
    for (const auto& e : entries_) {
      j["checkpoints"].push_back({{"id", e.id}, {"episode", e.episode}, {"val_acc", e.val_acc}});
    }
    std::ofstream os(manifest_path());
    os << j.dump(2) << "\n";
  }

  std::string dir_;
  std::vector<CheckpointInfo> entries_;
};

// Deterministic evaluation over `episodes` validation draws from one seeded
// stream: pooled fraction of correctly classified queries.
template <typename T>
double validate(ModelParams<T>& model, const Dataset& ds, Split split, int way, int shot,
                int queries, int episodes, std::uint64_t seed, const EvalVariant& variant = {}) {
  if (episodes < 1) throw ConfigError("validate: needs at least one episode");
  std::mt19937_64 rng(seed);
  double correct_fraction = 0;
  for (int e = 0; e < episodes; ++e) {
    Episode ep = sample_episode_stream(ds, split, way, shot, queries, rng);
    correct_fraction += episode_accuracy(model, ep, variant);
  }
  return correct_fraction / episodes;
}

template <typename T>
struct TrainResult {
  TrainingLog log;
  ModelParams<T> model;  // final parameters
  ModelMeta meta;
};

// Episode training under the Eq-2 objective: sample -> loss -> backward ->
// Adam with the halving schedule; periodic validation persists checkpoints
// (including the initial model and the final one). Fully reproducible from
// the config seed.
template <typename T>
TrainResult<T> train(const TrainConfig& cfg, const ModelConfig& mc, const Dataset& ds,
                     CheckpointStore& store) {
  cfg.validate();
  ModelParams<T> model = build_model<T>(mc, cfg.shot, cfg.seed);
  AdamState<T> adam = init_adam_state(model);

  ModelMeta meta;
  meta.arch = mc.arch;
  meta.k_shots = cfg.shot;
  meta.support_channels = mc.support_channels;
  meta.model_seed = cfg.seed;
  meta.precision = sizeof(T) == 4 ? "f32" : "f64";
  meta.sign = cfg.sign;
  meta.bypass_class_support = cfg.bypass_class_support;

  const EvalVariant variant = cfg.variant();
  const std::uint64_t val_seed = mix_seed(cfg.seed, seed_stream::validation);
  std::mt19937_64 episode_rng(mix_seed(cfg.seed, seed_stream::train_episodes));

  TrainResult<T> result;
  result.meta = meta;

  auto run_validation = [&](std::int64_t episode) {
    const double acc = validate(model, ds, Split::val, cfg.way, cfg.shot, cfg.queries,
                                cfg.validation_episodes, val_seed, variant);
    const std::string id = store.save(model, adam, meta, episode, acc);
    TrainingRecord rec;
    rec.episode = episode;
    rec.lr = lr_at(episode, cfg);
    rec.val_acc = acc;
    rec.checkpoint_id = id;
    result.log.records.push_back(std::move(rec));
  };

  run_validation(0);

  std::int64_t done = 0;
  while (done < cfg.total_episodes) {
    const std::int64_t batch =
        std::min<std::int64_t>(cfg.episodes_per_batch, cfg.total_episodes - done);
    const double lr = lr_at(done, cfg);
    try {
      Graph<T> g;
      BoundEmbedding<T> be = bind_embedding(g, model.embedding, true);
      BoundClassSupport<T> bs = bind_class_support(g, model.class_support, true);
      std::vector<Var> params = detail_trainer::canonical_param_nodes(be, bs);
      std::vector<Var> losses;
      for (std::int64_t b = 0; b < batch; ++b) {
        Episode ep =
            sample_episode_stream(ds, Split::train, cfg.way, cfg.shot, cfg.queries, episode_rng);
        losses.push_back(episode_loss_subgraph(g, be, bs, ep, variant, BnMode::train));
      }
      Var loss = losses.size() == 1 ? losses.front() : g.mean_of(losses);
      GradientMap<T> grads = g.backward(loss, params);
      adam_step(model, grads, params, adam, lr, cfg.adam);

      done += batch;
      TrainingRecord rec;
      rec.episode = done;
      rec.loss = static_cast<double>(g.value(loss).item());
      rec.lr = lr;
      result.log.records.push_back(std::move(rec));
    } catch (const Error& e) {
      throw SamplingError("episode " + std::to_string(done) + ": " + e.what());
    }

    if (done % cfg.validation_period == 0 || done == cfg.total_episodes) {
      run_validation(done);
    }
  }

  result.model = std::move(model);
  return result;
}

}  // namespace csn
