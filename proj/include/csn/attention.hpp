#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "csn/error.hpp"
#include "csn/tensor.hpp"

namespace csn {

// Eq-3 sign convention. The printed equation exponentiates +distance, which
// favors the farthest class; `negative` (the default) softmaxes -distance,
// matching the nearest-neighbor reading. `literal` keeps the printed form.
enum class AttentionSign { negative, literal };

inline std::string attention_sign_name(AttentionSign s) {
  return s == AttentionSign::negative ? "negative" : "literal";
}

inline AttentionSign attention_sign_from_name(const std::string& name) {
  if (name == "negative") return AttentionSign::negative;
  if (name == "literal") return AttentionSign::literal;
  throw ConfigError("unknown attention sign '" + name + "'");
}

enum class HeadKind { competitive, matching, prototype };

inline std::string head_kind_name(HeadKind h) {
  switch (h) {
    case HeadKind::competitive: return "competitive";
    case HeadKind::matching: return "matching";
    case HeadKind::prototype: return "prototype";
  }
  return "?";
}

inline HeadKind head_kind_from_name(const std::string& name) {
  if (name == "competitive") return HeadKind::competitive;
  if (name == "matching") return HeadKind::matching;
  if (name == "prototype") return HeadKind::prototype;
  throw ConfigError("unknown head kind '" + name + "'");
}

// Per-class support matrices after the class support embedding (or bypass).
template <typename T>
struct ClassSupports {
  std::vector<Tensor<T>> per_class;  // each [K,D]

  std::int64_t way() const { return static_cast<std::int64_t>(per_class.size()); }
  std::int64_t shots() const { return per_class.empty() ? 0 : per_class.front().dim(0); }
  std::int64_t dim() const { return per_class.empty() ? 0 : per_class.front().dim(1); }

  void validate() const {
    if (per_class.empty()) throw ContractError("class supports: empty class list");
    for (const auto& m : per_class) {
      if (m.rank() != 2 || !m.same_shape(per_class.front())) {
        throw DimensionError("class supports: all classes must share [K,D], got " +
                             shape_str(m.shape()) + " vs " +
                             shape_str(per_class.front().shape()));
      }
    }
  }
};

template <typename T>
struct AttentionResult {
  std::vector<std::int64_t> winners;  // J*, one per class
  std::vector<T> winner_dists;
  std::vector<T> weights;    // distribution over classes
  std::vector<T> predicted;  // Eq-5 output; equals weights for one-hot labels
};

namespace detail_attn {

template <typename T>
T euclid(const T* a, const T* b, std::int64_t d) {
  T acc{};
  for (std::int64_t i = 0; i < d; ++i) {
    const T diff = a[i] - b[i];
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

template <typename T>
std::vector<T> stable_softmax(const std::vector<T>& logits) {
  T m = logits.front();
  for (T v : logits) m = std::max(m, v);
  std::vector<T> out(logits.size());
  T sum{};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

}  // namespace detail_attn

// Eq. 4: per class, the support point nearest to the query wins; ties break
// to the lowest shot index.
template <typename T>
std::pair<std::vector<std::int64_t>, std::vector<T>> select_winners(const ClassSupports<T>& supports,
                                                                    const Tensor<T>& query) {
  supports.validate();
  if (query.rank() != 1 || query.dim(0) != supports.dim()) {
    throw DimensionError("select_winners: query shape " + shape_str(query.shape()) +
                         " does not match support dim " + std::to_string(supports.dim()));
  }
  const std::int64_t n = supports.way(), k = supports.shots(), d = supports.dim();
  std::vector<std::int64_t> winners(n);
  std::vector<T> dists(n);
  for (std::int64_t i = 0; i < n; ++i) {
    const T* rows = supports.per_class[i].data();
    std::int64_t best = 0;
    T best_dist = detail_attn::euclid(rows, query.data(), d);
    for (std::int64_t j = 1; j < k; ++j) {
      const T dist = detail_attn::euclid(rows + j * d, query.data(), d);
      if (dist < best_dist) {
        best = j;
        best_dist = dist;
      }
    }
    winners[i] = best;
    dists[i] = best_dist;
  }
  return {std::move(winners), std::move(dists)};
}

// Eq. 3 over the winning distances.
template <typename T>
std::vector<T> competitive_weights(const std::vector<T>& winner_dists,
                                   AttentionSign sign = AttentionSign::negative) {
  if (winner_dists.empty()) throw ContractError("competitive_weights: empty distance list");
  std::vector<T> logits(winner_dists.size());
  for (std::size_t i = 0; i < winner_dists.size(); ++i) {
    logits[i] = sign == AttentionSign::negative ? -winner_dists[i] : winner_dists[i];
  }
  return detail_attn::stable_softmax(logits);
}

// Eq. 5: weighted sum of the label vectors.
template <typename T>
std::vector<T> predict(const std::vector<T>& weights, const std::vector<std::vector<T>>& labels) {
  if (labels.size() != weights.size()) {
    throw DimensionError("predict: " + std::to_string(weights.size()) + " weights vs " +
                         std::to_string(labels.size()) + " label vectors");
  }
  std::vector<T> out(labels.front().size(), T{});
  for (std::size_t i = 0; i < weights.size(); ++i) {
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += weights[i] * labels[i][c];
  }
  return out;
}

// Episode-local one-hot labels make Eq. 5 collapse to the weight vector.
template <typename T>
std::vector<T> predict(const std::vector<T>& weights) {
  return weights;
}

template <typename T>
AttentionResult<T> competitive_head(const ClassSupports<T>& supports, const Tensor<T>& query,
                                    AttentionSign sign = AttentionSign::negative) {
  AttentionResult<T> r;
  auto [winners, dists] = select_winners(supports, query);
  r.winners = std::move(winners);
  r.winner_dists = std::move(dists);
  r.weights = competitive_weights(r.winner_dists, sign);
  r.predicted = predict(r.weights);
  return r;
}

// Matching-style attention over the whole support set: softmax of -distance
// to every point, class mass = sum of its members' weights.
template <typename T>
std::vector<T> matching_attention(const std::vector<Tensor<T>>& support_vectors,
                                  const std::vector<std::int64_t>& support_classes,
                                  std::int64_t way, const Tensor<T>& query) {
  if (support_vectors.empty() || support_vectors.size() != support_classes.size()) {
    throw ContractError("matching_attention: empty or inconsistent support set");
  }
  const std::int64_t d = query.dim(0);
  std::vector<T> logits(support_vectors.size());
  for (std::size_t i = 0; i < support_vectors.size(); ++i) {
    if (support_vectors[i].size() != d) {
      throw DimensionError("matching_attention: support vector " + std::to_string(i) +
                           " has dim " + std::to_string(support_vectors[i].size()) +
                           ", query has " + std::to_string(d));
    }
    logits[i] = -detail_attn::euclid(support_vectors[i].data(), query.data(), d);
  }
  const std::vector<T> point_weights = detail_attn::stable_softmax(logits);
  std::vector<T> out(static_cast<std::size_t>(way), T{});
  for (std::size_t i = 0; i < point_weights.size(); ++i) {
    const std::int64_t c = support_classes[i];
    if (c < 0 || c >= way) {
      throw IndexError("matching_attention: class " + std::to_string(c) + " out of range for " +
                       std::to_string(way) + "-way");
    }
    out[static_cast<std::size_t>(c)] += point_weights[i];
  }
  return out;
}

// Prototypical baseline: mean support point per class, softmax over the
// negative squared distance (that model family's convention).
template <typename T>
std::vector<T> prototype_head(const ClassSupports<T>& supports, const Tensor<T>& query) {
  supports.validate();
  const std::int64_t n = supports.way(), k = supports.shots(), d = supports.dim();
  std::vector<T> logits(static_cast<std::size_t>(n));
  std::vector<T> proto(static_cast<std::size_t>(d));
  for (std::int64_t i = 0; i < n; ++i) {
    std::fill(proto.begin(), proto.end(), T{});
    const T* rows = supports.per_class[i].data();
    for (std::int64_t j = 0; j < k; ++j) {
      for (std::int64_t e = 0; e < d; ++e) proto[e] += rows[j * d + e];
    }
    T sq{};
    for (std::int64_t e = 0; e < d; ++e) {
      proto[e] /= static_cast<T>(k);
      const T diff = proto[e] - query[e];
      sq += diff * diff;
    }
    logits[static_cast<std::size_t>(i)] = -sq;
  }
  return detail_attn::stable_softmax(logits);
}

}  // namespace csn
