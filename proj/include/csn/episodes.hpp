#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "csn/error.hpp"
#include "csn/tensor.hpp"

namespace csn {

enum class Split { train, val, test };

inline std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split '" + name + "'");
}

struct ClassRecord {
  std::int64_t global_id = 0;
  Split split = Split::train;
  std::vector<std::vector<float>> samples;  // flattened, canonical f32 storage
};

// Immutable after construction; splits partition classes, not samples.
struct Dataset {
  Shape sample_shape;
  std::vector<ClassRecord> classes;

  std::int64_t sample_size() const { return shape_size(sample_shape); }

  std::vector<std::int64_t> class_indices(Split split) const {
    std::vector<std::int64_t> out;
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i].split == split) out.push_back(static_cast<std::int64_t>(i));
    }
    return out;
  }
};

struct SynthFamilyConfig {
  std::int64_t dim = 2;
  double center_scale = 1.0;
  double within_scale = 0.25;
  std::int64_t train_classes = 64;
  std::int64_t val_classes = 16;
  std::int64_t test_classes = 20;
  std::int64_t samples_per_class = 25;
  std::uint64_t seed = 0;
};

// Isotropic Gaussian task family: one center per class drawn from
// N(0, center_scale^2 I), samples from N(center, within_scale^2 I). Fully
// deterministic from the seed.
inline Dataset synth_family(const SynthFamilyConfig& cfg) {
  if (cfg.dim < 1) throw ConfigError("synth family: dim must be positive");
  if (cfg.center_scale <= 0) throw ConfigError("synth family: center scale must be positive");
  if (cfg.within_scale < 0) throw ConfigError("synth family: within-class scale must be >= 0");
  if (cfg.train_classes < 1 || cfg.val_classes < 1 || cfg.test_classes < 1) {
    throw ConfigError("synth family: every split needs at least one class");
  }
  if (cfg.samples_per_class < 1) throw ConfigError("synth family: samples per class must be >= 1");

  Dataset ds;
  ds.sample_shape = {cfg.dim};
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> unit(0.0, 1.0);

  std::int64_t next_id = 0;
  auto emit_split = [&](Split split, std::int64_t count) {
    for (std::int64_t c = 0; c < count; ++c) {
      ClassRecord rec;
      rec.global_id = next_id++;
      rec.split = split;
      std::vector<double> center(static_cast<std::size_t>(cfg.dim));
      for (auto& v : center) v = cfg.center_scale * unit(rng);
      rec.samples.reserve(static_cast<std::size_t>(cfg.samples_per_class));
      for (std::int64_t s = 0; s < cfg.samples_per_class; ++s) {
        std::vector<float> sample(static_cast<std::size_t>(cfg.dim));
        for (std::int64_t d = 0; d < cfg.dim; ++d) {
          sample[static_cast<std::size_t>(d)] =
              static_cast<float>(center[static_cast<std::size_t>(d)] +
                                 cfg.within_scale * unit(rng));
        }
        rec.samples.push_back(std::move(sample));
      }
      ds.classes.push_back(std::move(rec));
    }
  };
  emit_split(Split::train, cfg.train_classes);
  emit_split(Split::val, cfg.val_classes);
  emit_split(Split::test, cfg.test_classes);
  return ds;
}

// One N-way K-shot task. Local labels are assigned by class draw order and
// the stream seed that produced the episode is recorded.
struct Episode {
  int way = 0;
  int shot = 0;
  int queries = 0;
  std::vector<std::vector<float>> support;  // way*shot rows, class-major
  std::vector<int> support_labels;
  std::vector<std::vector<float>> query;  // way*queries rows, class-major
  std::vector<int> query_labels;
  std::vector<std::int64_t> class_ids;  // local label -> global class id
  std::uint64_t seed = 0;
};

namespace detail_episodes {

// First `take` entries of a seeded partial Fisher-Yates shuffle.
inline std::vector<std::int64_t> draw_without_replacement(std::int64_t population,
                                                          std::int64_t take,
                                                          std::mt19937_64& rng) {
  std::vector<std::int64_t> pool(static_cast<std::size_t>(population));
  for (std::int64_t i = 0; i < population; ++i) pool[static_cast<std::size_t>(i)] = i;
  for (std::int64_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::int64_t> pick(i, population - 1);
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(pick(rng))]);
  }
  pool.resize(static_cast<std::size_t>(take));
  return pool;
}

}  // namespace detail_episodes

inline Episode sample_episode_stream(const Dataset& ds, Split split, int way, int shot, int queries,
                                     std::mt19937_64& rng) {
  if (way < 1 || shot < 1 || queries < 1) {
    throw SamplingError("episode: way, shot and queries must all be positive");
  }
  const std::vector<std::int64_t> split_classes = ds.class_indices(split);
  if (static_cast<std::int64_t>(split_classes.size()) < way) {
    throw SamplingError("episode: " + std::to_string(way) + "-way requires " + std::to_string(way) +
                        " classes, split '" + split_name(split) + "' has " +
                        std::to_string(split_classes.size()));
  }

  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.queries = queries;

  const auto chosen = detail_episodes::draw_without_replacement(
      static_cast<std::int64_t>(split_classes.size()), way, rng);
  for (int local = 0; local < way; ++local) {
    const ClassRecord& rec = ds.classes[static_cast<std::size_t>(
        split_classes[static_cast<std::size_t>(chosen[static_cast<std::size_t>(local)])])];
    const std::int64_t have = static_cast<std::int64_t>(rec.samples.size());
    const std::int64_t need = shot + queries;
    if (have < need) {
      throw SamplingError("episode: class " + std::to_string(rec.global_id) + " needs " +
                          std::to_string(need) + " samples, has " + std::to_string(have));
    }
    ep.class_ids.push_back(rec.global_id);
    const auto picks = detail_episodes::draw_without_replacement(have, need, rng);
    for (std::int64_t s = 0; s < need; ++s) {
      const auto& sample = rec.samples[static_cast<std::size_t>(picks[static_cast<std::size_t>(s)])];
      if (s < shot) {
        ep.support.push_back(sample);
        ep.support_labels.push_back(local);
      } else {
        ep.query.push_back(sample);
        ep.query_labels.push_back(local);
      }
    }
  }
  return ep;
}

inline Episode sample_episode(const Dataset& ds, Split split, int way, int shot, int queries,
                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Episode ep = sample_episode_stream(ds, split, way, shot, queries, rng);
  ep.seed = seed;
  return ep;
}

// `count` draws from one seeded stream; every episode records the stream seed.
inline std::vector<Episode> episode_batch(const Dataset& ds, Split split, int way, int shot,
                                          int queries, std::int64_t count, std::uint64_t seed) {
  if (count < 0) throw SamplingError("episode batch: count must be >= 0");
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(count));
  std::mt19937_64 rng(seed);
  for (std::int64_t i = 0; i < count; ++i) {
    Episode ep = sample_episode_stream(ds, split, way, shot, queries, rng);
    ep.seed = seed;
    out.push_back(std::move(ep));
  }
  return out;
}

// Episode rows stacked into a batch tensor of [rows] + sample_shape.
template <typename T>
Tensor<T> rows_tensor(const std::vector<std::vector<float>>& rows, const Shape& sample_shape) {
  if (rows.empty()) throw ContractError("rows_tensor: no rows");
  Shape shape = {static_cast<std::int64_t>(rows.size())};
  for (auto d : sample_shape) shape.push_back(d);
  Tensor<T> out(shape);
  const std::int64_t stride = shape_size(sample_shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<std::int64_t>(rows[r].size()) != stride) {
      throw DimensionError("rows_tensor: row " + std::to_string(r) + " has " +
                           std::to_string(rows[r].size()) + " values, sample shape " +
                           shape_str(sample_shape));
    }
    for (std::int64_t i = 0; i < stride; ++i) {
      out[static_cast<std::int64_t>(r) * stride + i] = static_cast<T>(rows[r][i]);
    }
  }
  return out;
}

template <typename T>
Tensor<T> support_tensor(const Episode& ep, const Shape& sample_shape) {
  return rows_tensor<T>(ep.support, sample_shape);
}

template <typename T>
Tensor<T> query_tensor(const Episode& ep, const Shape& sample_shape) {
  return rows_tensor<T>(ep.query, sample_shape);
}

}  // namespace csn
