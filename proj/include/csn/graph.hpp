#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "csn/error.hpp"
#include "csn/tensor.hpp"

namespace csn {

// Handle to a node in a Graph. Plain value; only meaningful together with
// the graph that issued it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class Padding { same, valid };
enum class BnMode { train, eval };

// Per-channel running statistics for batch normalization. A default-built
// state is uninitialized; eval mode requires an initialized one.
template <typename T>
struct BatchNormState {
  Tensor<T> mean;
  Tensor<T> var;
  bool initialized = false;

  static BatchNormState unit(std::int64_t channels) {
    BatchNormState s;
    s.mean = Tensor<T>(Shape{channels});
    s.var = Tensor<T>::full(Shape{channels}, T(1));
    s.initialized = true;
    return s;
  }
};

template <typename T>
class GradientMap {
 public:
  void set(Var v, Tensor<T> g) { grads_[v.id] = std::move(g); }

  bool contains(Var v) const { return grads_.count(v.id) != 0; }

  const Tensor<T>& at(Var v) const {
    auto it = grads_.find(v.id);
    if (it == grads_.end()) {
      throw ContractError("gradient map: no entry for node " + std::to_string(v.id));
    }
    return it->second;
  }

  std::size_t size() const { return grads_.size(); }

  const std::unordered_map<int, Tensor<T>>& entries() const { return grads_; }

 private:
  std::unordered_map<int, Tensor<T>> grads_;
};

namespace detail {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

inline void fnv_mix(std::uint64_t& h, std::uint64_t v) {
  h ^= v;
  h *= kFnvPrime;
}

}  // namespace detail

// Define-by-run computation graph. Nodes are appended in execution order, so
// insertion order is a topological order. Construction and backward are
// single-threaded per instance; independent graphs may live on separate
// threads. The graph is rebuilt per episode; no caching across episodes.
template <typename T>
class Graph {
 public:
  // Leaf holding input data; receives no gradient.
  Var constant(Tensor<T> value) { return add_leaf(std::move(value), false); }

  // Leaf holding a trainable tensor; participates in backward.
  Var param(Tensor<T> value) { return add_leaf(std::move(value), true); }

  const Tensor<T>& value(Var v) const { return node(v).out; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Structure-and-routing hash: covers node kinds, wiring, slice indices,
  // relu sign patterns, pooling argmax choices. Two forward passes with the
  // same hash took identical nondifferentiable branches, which is what the
  // finite-difference kink-exclusion policy compares.
  std::uint64_t signature() const { return sig_; }

  // out[b,o] = sum_i x[b,i] * w[i,o] + bias[o]
  Var dense(Var xv, Var wv, Var bv) {
    const Tensor<T>& x = value(xv);
    const Tensor<T>& w = value(wv);
    const Tensor<T>& b = value(bv);
    require_rank(x, 2, "dense input");
    require_rank(w, 2, "dense weight");
    require_rank(b, 1, "dense bias");
    const std::int64_t B = x.dim(0), I = x.dim(1), O = w.dim(1);
    if (w.dim(0) != I) {
      throw DimensionError("dense: input inner extent " + std::to_string(I) +
                           " does not match weight rows " + std::to_string(w.dim(0)));
    }
    if (b.dim(0) != O) {
      throw DimensionError("dense: bias extent " + std::to_string(b.dim(0)) +
                           " does not match weight cols " + std::to_string(O));
    }
    Tensor<T> out(Shape{B, O});
    for (std::int64_t i = 0; i < B; ++i) {
      for (std::int64_t k = 0; k < I; ++k) {
        const T xi = x[i * I + k];
        for (std::int64_t j = 0; j < O; ++j) out[i * O + j] += xi * w[k * O + j];
      }
      for (std::int64_t j = 0; j < O; ++j) out[i * O + j] += b[j];
    }
    return add_node(OpKind::dense, {xv.id, wv.id, bv.id}, std::move(out),
                    [xv, wv, bv, B, I, O](const Graph& g, const Tensor<T>& go,
                                          std::vector<Tensor<T>>& grads) {
                      const Tensor<T>& x = g.value(xv);
                      const Tensor<T>& w = g.value(wv);
                      if (g.requires_grad(xv)) {
                        Tensor<T> gx(x.shape());
                        for (std::int64_t i = 0; i < B; ++i)
                          for (std::int64_t k = 0; k < I; ++k) {
                            T acc{};
                            for (std::int64_t j = 0; j < O; ++j) acc += go[i * O + j] * w[k * O + j];
                            gx[i * I + k] = acc;
                          }
                        g.accumulate(grads, xv, std::move(gx));
                      }
                      if (g.requires_grad(wv)) {
                        Tensor<T> gw(w.shape());
                        for (std::int64_t k = 0; k < I; ++k)
                          for (std::int64_t j = 0; j < O; ++j) {
                            T acc{};
                            for (std::int64_t i = 0; i < B; ++i) acc += x[i * I + k] * go[i * O + j];
                            gw[k * O + j] = acc;
                          }
                        g.accumulate(grads, wv, std::move(gw));
                      }
                      if (g.requires_grad(bv)) {
                        Tensor<T> gb(Shape{O});
                        for (std::int64_t i = 0; i < B; ++i)
                          for (std::int64_t j = 0; j < O; ++j) gb[j] += go[i * O + j];
                        g.accumulate(grads, bv, std::move(gb));
                      }
                    });
  }

  // Cross-correlation of x:[B,C,H,W] with k:[F,C,kh,kw]. No bias term.
  Var conv2d(Var xv, Var kv, std::int64_t stride, Padding pad) {
    const Tensor<T>& x = value(xv);
    const Tensor<T>& k = value(kv);
    require_rank(x, 4, "conv2d input");
    require_rank(k, 4, "conv2d kernel");
    if (x.dim(1) != k.dim(1)) {
      throw DimensionError("conv2d: input channels " + std::to_string(x.dim(1)) +
                           " do not match kernel channels " + std::to_string(k.dim(1)));
    }
    if (stride <= 0) throw ContractError("conv2d: stride must be positive");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t F = k.dim(0), KH = k.dim(2), KW = k.dim(3);
    auto [HO, pad_top] = conv_out(H, KH, stride, pad, "conv2d height");
    auto [WO, pad_left] = conv_out(W, KW, stride, pad, "conv2d width");

    Tensor<T> out(Shape{B, F, HO, WO});
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t f = 0; f < F; ++f)
        for (std::int64_t ho = 0; ho < HO; ++ho)
          for (std::int64_t wo = 0; wo < WO; ++wo) {
            T acc{};
            for (std::int64_t c = 0; c < C; ++c)
              for (std::int64_t kh = 0; kh < KH; ++kh) {
                const std::int64_t hi = ho * stride - pad_top + kh;
                if (hi < 0 || hi >= H) continue;
                for (std::int64_t kw = 0; kw < KW; ++kw) {
                  const std::int64_t wi = wo * stride - pad_left + kw;
                  if (wi < 0 || wi >= W) continue;
                  acc += x[((b * C + c) * H + hi) * W + wi] * k[((f * C + c) * KH + kh) * KW + kw];
                }
              }
            out[((b * F + f) * HO + ho) * WO + wo] = acc;
          }

    return add_node(
        OpKind::conv2d, {xv.id, kv.id}, std::move(out),
        [xv, kv, stride, pad_top, pad_left, B, C, H, W, F, KH, KW, HO, WO](
            const Graph& g, const Tensor<T>& go, std::vector<Tensor<T>>& grads) {
          const Tensor<T>& x = g.value(xv);
          const Tensor<T>& k = g.value(kv);
          const bool need_x = g.requires_grad(xv);
          const bool need_k = g.requires_grad(kv);
          Tensor<T> gx = need_x ? Tensor<T>(x.shape()) : Tensor<T>();
          Tensor<T> gk = need_k ? Tensor<T>(k.shape()) : Tensor<T>();
          if (!need_x && !need_k) return;
          for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t f = 0; f < F; ++f)
              for (std::int64_t ho = 0; ho < HO; ++ho)
                for (std::int64_t wo = 0; wo < WO; ++wo) {
                  const T go_v = go[((b * F + f) * HO + ho) * WO + wo];
                  if (go_v == T{}) continue;
                  for (std::int64_t c = 0; c < C; ++c)
                    for (std::int64_t kh = 0; kh < KH; ++kh) {
                      const std::int64_t hi = ho * stride - pad_top + kh;
                      if (hi < 0 || hi >= H) continue;
                      for (std::int64_t kw = 0; kw < KW; ++kw) {
                        const std::int64_t wi = wo * stride - pad_left + kw;
                        if (wi < 0 || wi >= W) continue;
                        const std::int64_t xi = ((b * C + c) * H + hi) * W + wi;
                        const std::int64_t ki = ((f * C + c) * KH + kh) * KW + kw;
                        if (need_x) gx[xi] += k[ki] * go_v;
                        if (need_k) gk[ki] += x[xi] * go_v;
                      }
                    }
                }
          if (need_x) g.accumulate(grads, xv, std::move(gx));
          if (need_k) g.accumulate(grads, kv, std::move(gk));
        },
        {stride, static_cast<std::int64_t>(pad)});
  }

  // 1-D analogue: x:[B,C,L], k:[F,C,kw].
  Var conv1d(Var xv, Var kv, std::int64_t stride, Padding pad) {
    const Tensor<T>& x = value(xv);
    const Tensor<T>& k = value(kv);
    require_rank(x, 3, "conv1d input");
    require_rank(k, 3, "conv1d kernel");
    if (x.dim(1) != k.dim(1)) {
      throw DimensionError("conv1d: input channels " + std::to_string(x.dim(1)) +
                           " do not match kernel channels " + std::to_string(k.dim(1)));
    }
    if (stride <= 0) throw ContractError("conv1d: stride must be positive");
    const std::int64_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
    const std::int64_t F = k.dim(0), KW = k.dim(2);
    auto [LO, pad_left] = conv_out(L, KW, stride, pad, "conv1d length");

    Tensor<T> out(Shape{B, F, LO});
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t f = 0; f < F; ++f)
        for (std::int64_t lo = 0; lo < LO; ++lo) {
          T acc{};
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t kw = 0; kw < KW; ++kw) {
              const std::int64_t li = lo * stride - pad_left + kw;
              if (li < 0 || li >= L) continue;
              acc += x[(b * C + c) * L + li] * k[(f * C + c) * KW + kw];
            }
          out[(b * F + f) * LO + lo] = acc;
        }

    return add_node(
        OpKind::conv1d, {xv.id, kv.id}, std::move(out),
        [xv, kv, stride, pad_left, B, C, L, F, KW, LO](const Graph& g, const Tensor<T>& go,
                                                       std::vector<Tensor<T>>& grads) {
          const Tensor<T>& x = g.value(xv);
          const Tensor<T>& k = g.value(kv);
          const bool need_x = g.requires_grad(xv);
          const bool need_k = g.requires_grad(kv);
          if (!need_x && !need_k) return;
          Tensor<T> gx = need_x ? Tensor<T>(x.shape()) : Tensor<T>();
          Tensor<T> gk = need_k ? Tensor<T>(k.shape()) : Tensor<T>();
          for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t f = 0; f < F; ++f)
              for (std::int64_t lo = 0; lo < LO; ++lo) {
                const T go_v = go[(b * F + f) * LO + lo];
                if (go_v == T{}) continue;
                for (std::int64_t c = 0; c < C; ++c)
                  for (std::int64_t kw = 0; kw < KW; ++kw) {
                    const std::int64_t li = lo * stride - pad_left + kw;
                    if (li < 0 || li >= L) continue;
                    const std::int64_t xi = (b * C + c) * L + li;
                    const std::int64_t ki = (f * C + c) * KW + kw;
                    if (need_x) gx[xi] += k[ki] * go_v;
                    if (need_k) gk[ki] += x[xi] * go_v;
                  }
              }
          if (need_x) g.accumulate(grads, xv, std::move(gx));
          if (need_k) g.accumulate(grads, kv, std::move(gk));
        },
        {stride, static_cast<std::int64_t>(pad)});
  }

  // Channel axis is axis 1 for ranks 3/4 and the feature axis for rank 2.
  // Train mode normalizes by batch statistics and folds them into `state`
  // (running = momentum * running + (1 - momentum) * batch). Eval mode uses
  // the stored statistics and fails on an uninitialized state.
  Var batch_norm(Var xv, Var gammav, Var betav, BatchNormState<T>& state, BnMode mode) {
    const Tensor<T>& x = value(xv);
    const Tensor<T>& gamma = value(gammav);
    const Tensor<T>& beta = value(betav);
    if (x.rank() < 2 || x.rank() > 4) {
      throw DimensionError("batch_norm: rank " + std::to_string(x.rank()) + " input not supported");
    }
    const std::int64_t C = x.dim(1);
    if (gamma.size() != C || beta.size() != C) {
      throw DimensionError("batch_norm: gamma/beta extents " + std::to_string(gamma.size()) + "/" +
                           std::to_string(beta.size()) + " do not match channel extent " +
                           std::to_string(C));
    }
    const std::int64_t spatial = x.size() / (x.dim(0) * C);
    const std::int64_t count = x.dim(0) * spatial;

    std::vector<T> mean(static_cast<std::size_t>(C), T{});
    std::vector<T> var(static_cast<std::size_t>(C), T{});
    if (mode == BnMode::train) {
      for (std::int64_t i = 0; i < x.size(); ++i) mean[channel_of(i, C, spatial)] += x[i];
      for (auto& m : mean) m /= static_cast<T>(count);
      for (std::int64_t i = 0; i < x.size(); ++i) {
        const std::size_t c = channel_of(i, C, spatial);
        const T d = x[i] - mean[c];
        var[c] += d * d;
      }
      for (auto& v : var) v /= static_cast<T>(count);
      if (!state.initialized) {
        state.mean = Tensor<T>(Shape{C});
        state.var = Tensor<T>::full(Shape{C}, T(1));
        state.initialized = true;
      }
      for (std::int64_t c = 0; c < C; ++c) {
        state.mean[c] = T(kBnMomentum) * state.mean[c] + T(1 - kBnMomentum) * mean[c];
        state.var[c] = T(kBnMomentum) * state.var[c] + T(1 - kBnMomentum) * var[c];
      }
    } else {
      if (!state.initialized) {
        throw StateError("batch_norm: eval mode requires initialized running statistics");
      }
      if (state.mean.size() != C) {
        throw DimensionError("batch_norm: running stats extent " + std::to_string(state.mean.size()) +
                             " does not match channel extent " + std::to_string(C));
      }
      for (std::int64_t c = 0; c < C; ++c) {
        mean[c] = state.mean[c];
        var[c] = state.var[c];
      }
    }

    std::vector<T> invstd(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c)
      invstd[c] = T(1) / std::sqrt(var[c] + T(kBnEpsilon));

    Tensor<T> out(x.shape());
    std::vector<T> xhat(static_cast<std::size_t>(x.size()));
    for (std::int64_t i = 0; i < x.size(); ++i) {
      const std::size_t c = channel_of(i, C, spatial);
      xhat[i] = (x[i] - mean[c]) * invstd[c];
      out[i] = xhat[i] * gamma[c] + beta[c];
    }

    const bool train = (mode == BnMode::train);
    return add_node(
        OpKind::batch_norm, {xv.id, gammav.id, betav.id}, std::move(out),
        [xv, gammav, betav, C, spatial, count, train, invstd = std::move(invstd),
         xhat = std::move(xhat)](const Graph& g, const Tensor<T>& go, std::vector<Tensor<T>>& grads) {
          const Tensor<T>& gamma = g.value(gammav);
          const std::int64_t n = go.size();
          std::vector<T> sum_dy(static_cast<std::size_t>(C), T{});
          std::vector<T> sum_dy_xhat(static_cast<std::size_t>(C), T{});
          for (std::int64_t i = 0; i < n; ++i) {
            const std::size_t c = channel_of(i, C, spatial);
            sum_dy[c] += go[i];
            sum_dy_xhat[c] += go[i] * xhat[i];
          }
          if (g.requires_grad(betav)) {
            g.accumulate(grads, betav, Tensor<T>(Shape{C}, std::vector<T>(sum_dy)));
          }
          if (g.requires_grad(gammav)) {
            g.accumulate(grads, gammav, Tensor<T>(Shape{C}, std::vector<T>(sum_dy_xhat)));
          }
          if (g.requires_grad(xv)) {
            Tensor<T> gx(g.value(xv).shape());
            if (train) {
              const T m = static_cast<T>(count);
              for (std::int64_t i = 0; i < n; ++i) {
                const std::size_t c = channel_of(i, C, spatial);
                gx[i] = gamma[c] * invstd[c] / m *
                        (m * go[i] - sum_dy[c] - xhat[i] * sum_dy_xhat[c]);
              }
            } else {
              for (std::int64_t i = 0; i < n; ++i) {
                const std::size_t c = channel_of(i, C, spatial);
                gx[i] = gamma[c] * invstd[c] * go[i];
              }
            }
            g.accumulate(grads, xv, std::move(gx));
          }
        },
        {train ? 1 : 0});
  }

  Var relu(Var xv) {
    const Tensor<T>& x = value(xv);
    Tensor<T> out(x.shape());
    std::uint64_t word = 0;
    for (std::int64_t i = 0; i < x.size(); ++i) {
      const bool pos = x[i] > T{};
      out[i] = pos ? x[i] : T{};
      word = (word << 1) | (pos ? 1u : 0u);
      if ((i & 63) == 63) {
        detail::fnv_mix(sig_, word);
        word = 0;
      }
    }
    detail::fnv_mix(sig_, word);
    return add_node(OpKind::relu, {xv.id}, std::move(out),
                    [xv](const Graph& g, const Tensor<T>& go, std::vector<Tensor<T>>& grads) {
                      if (!g.requires_grad(xv)) return;
                      const Tensor<T>& x = g.value(xv);
                      Tensor<T> gx(x.shape());
                      for (std::int64_t i = 0; i < x.size(); ++i)
                        gx[i] = x[i] > T{} ? go[i] : T{};
                      g.accumulate(grads, xv, std::move(gx));
                    });
  }

  // 2x2/stride-2 max pooling. Odd spatial extents are an error; networks
  // that need floor semantics crop explicitly first (crop_even2d). Gradient
  // routes to the argmax entry, ties to the lowest linear index.
  Var max_pool2d(Var xv) {
    const Tensor<T>& x = value(xv);
    require_rank(x, 4, "max_pool2d input");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 != 0 || W % 2 != 0) {
      throw DimensionError("max_pool2d: spatial extents " + std::to_string(H) + "x" +
                           std::to_string(W) + " must be even");
    }
    const std::int64_t HO = H / 2, WO = W / 2;
    Tensor<T> out(Shape{B, C, HO, WO});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.size()));
    std::int64_t oi = 0;
    std::uint64_t word = 0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t ho = 0; ho < HO; ++ho)
          for (std::int64_t wo = 0; wo < WO; ++wo) {
            T best = -std::numeric_limits<T>::infinity();
            std::int64_t best_flat = -1;
            int local = 0, best_local = 0;
            for (std::int64_t kh = 0; kh < 2; ++kh)
              for (std::int64_t kw = 0; kw < 2; ++kw, ++local) {
                const std::int64_t flat = ((b * C + c) * H + 2 * ho + kh) * W + 2 * wo + kw;
                if (x[flat] > best) {
                  best = x[flat];
                  best_flat = flat;
                  best_local = local;
                }
              }
            out[oi] = best;
            argmax[oi] = best_flat;
            word = (word << 2) | static_cast<unsigned>(best_local);
            if ((oi & 31) == 31) {
              detail::fnv_mix(sig_, word);
              word = 0;
            }
            ++oi;
          }
    detail::fnv_mix(sig_, word);
    return add_node(OpKind::max_pool2d, {xv.id}, std::move(out),
                    [xv, argmax = std::move(argmax)](const Graph& g, const Tensor<T>& go,
                                                     std::vector<Tensor<T>>& grads) {
                      if (!g.requires_grad(xv)) return;
                      Tensor<T> gx(g.value(xv).shape());
                      for (std::int64_t i = 0; i < go.size(); ++i) gx[argmax[i]] += go[i];
                      g.accumulate(grads, xv, std::move(gx));
                    });
  }

  // Mean over all spatial positions: [B,C,H,W] -> [B,C], [B,C,L] -> [B,C].
  Var avg_pool_global(Var xv) {
    const Tensor<T>& x = value(xv);
    if (x.rank() != 3 && x.rank() != 4) {
      throw DimensionError("avg_pool_global: rank " + std::to_string(x.rank()) +
                           " input not supported");
    }
    const std::int64_t B = x.dim(0), C = x.dim(1);
    const std::int64_t spatial = x.size() / (B * C);
    Tensor<T> out(Shape{B, C});
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
      T acc{};
      for (std::int64_t s = 0; s < spatial; ++s) acc += x[bc * spatial + s];
      out[bc] = acc / static_cast<T>(spatial);
    }
    return add_node(OpKind::avg_pool_global, {xv.id}, std::move(out),
                    [xv, spatial](const Graph& g, const Tensor<T>& go,
                                  std::vector<Tensor<T>>& grads) {
                      if (!g.requires_grad(xv)) return;
                      Tensor<T> gx(g.value(xv).shape());
                      const T inv = T(1) / static_cast<T>(spatial);
                      for (std::int64_t bc = 0; bc < go.size(); ++bc)
                        for (std::int64_t s = 0; s < spatial; ++s)
                          gx[bc * spatial + s] = go[bc] * inv;
                      g.accumulate(grads, xv, std::move(gx));
                    });
  }

  // Drops the last row/column of odd spatial extents so 2x2 pooling can run.
  Var crop_even2d(Var xv) {
    const Tensor<T>& x = value(xv);
    require_rank(x, 4, "crop_even2d input");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t HO = H - (H % 2), WO = W - (W % 2);
    if (HO == 0 || WO == 0) {
      throw DimensionError("crop_even2d: spatial extents " + std::to_string(H) + "x" +
                           std::to_string(W) + " too small to crop");
    }
    if (HO == H && WO == W) return xv;
    Tensor<T> out(Shape{B, C, HO, WO});
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t h = 0; h < HO; ++h)
          for (std::int64_t w = 0; w < WO; ++w)
            out[((b * C + c) * HO + h) * WO + w] = x[((b * C + c) * H + h) * W + w];
    return add_node(OpKind::crop_even2d, {xv.id}, std::move(out),
                    [xv, B, C, H, W, HO, WO](const Graph& g, const Tensor<T>& go,
                                             std::vector<Tensor<T>>& grads) {
                      if (!g.requires_grad(xv)) return;
                      Tensor<T> gx(g.value(xv).shape());
                      for (std::int64_t b = 0; b < B; ++b)
                        for (std::int64_t c = 0; c < C; ++c)
                          for (std::int64_t h = 0; h < HO; ++h)
                            for (std::int64_t w = 0; w < WO; ++w)
                              gx[((b * C + c) * H + h) * W + w] =
                                  go[((b * C + c) * HO + h) * WO + w];
                      g.accumulate(grads, xv, std::move(gx));
                    });
  }

  Var reshape(Var xv, Shape shape) {
    const Tensor<T>& x = value(xv);
    if (shape_size(shape) != x.size()) {
      throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                           shape_str(shape));
    }
    Tensor<T> out(shape, std::vector<T>(x.values()));
    std::vector<std::int64_t> attrs(shape.begin(), shape.end());
    return add_node(
        OpKind::reshape, {xv.id}, std::move(out),
        [xv](const Graph& g, const Tensor<T>& go, std::vector<Tensor<T>>& grads) {
          if (!g.requires_grad(xv)) return;
          g.accumulate(grads, xv, Tensor<T>(g.value(xv).shape(), std::vector<T>(go.values())));
        },
        attrs);
  }

  // Contiguous row-range slice along axis 0.
  Var slice_rows(Var xv, std::int64_t begin, std::int64_t count) {
    const Tensor<T>& x = value(xv);
    if (x.rank() < 1) throw DimensionError("slice_rows: scalar input");
    const std::int64_t R = x.dim(0);
    if (begin < 0 || count <= 0 || begin + count > R) {
      throw IndexError("slice_rows: range [" + std::to_string(begin) + "," +
                       std::to_string(begin + count) + ") out of extent " + std::to_string(R));
    }
    const std::int64_t row_size = x.size() / R;
    Shape out_shape = x.shape();
    out_shape[0] = count;
    Tensor<T> out(out_shape);
    std::copy(x.data() + begin * row_size, x.data() + (begin + count) * row_size, out.data());
    return add_node(
        OpKind::slice_rows, {xv.id}, std::move(out),
        [xv, begin, row_size](const Graph& g, const Tensor<T>& go, std::vector<Tensor<T>>& grads) {
          if (!g.requires_grad(xv)) return;
          Tensor<T> gx(g.value(xv).shape());
          std::copy(go.data(), go.data() + go.size(), gx.data() + begin * row_size);
          g.accumulate(grads, xv, std::move(gx));
        },
        {begin, count});
  }

  // Single row with the leading axis dropped: [R, rest...] -> [rest...].
  Var row(Var xv, std::int64_t r) {
    const Shape& full = value(xv).shape();
    Shape rest(full.begin() + 1, full.end());
    if (rest.empty()) rest = Shape{1};
    Var sliced = slice_rows(xv, r, 1);
    return reshape(sliced, std::move(rest));
  }

  Var add(Var av, Var bv) {
    const Tensor<T>& a = value(av);
    const Tensor<T>& b = value(bv);
    require_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return add_node(OpKind::add, {av.id, bv.id}, std::move(out),
                    [av, bv](const Graph& g, const Tensor<T>& go, std::vector<Tensor<T>>& grads) {
                      if (g.requires_grad(av)) g.accumulate(grads, av, go);
                      if (g.requires_grad(bv)) g.accumulate(grads, bv, go);
                    });
  }

  Var sub(Var av, Var bv) {
    const Tensor<T>& a = value(av);
    const Tensor<T>& b = value(bv);
    require_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return add_node(OpKind::sub, {av.id, bv.id}, std::move(out),
                    [av, bv](const Graph& g, const Tensor<T>& go, std::vector<Tensor<T>>& grads) {
                      if (g.requires_grad(av)) g.accumulate(grads, av, go);
                      if (g.requires_grad(bv)) {
                        Tensor<T> gb(go.shape());
                        for (std::int64_t i = 0; i < go.size(); ++i) gb[i] = -go[i];
                        g.accumulate(grads, bv, std::move(gb));
                      }
                    });
  }

  Var scale(Var xv, T c) {
    const Tensor<T>& x = value(xv);
    Tensor<T> out(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) out[i] = c * x[i];
    return add_node(OpKind::scale, {xv.id}, std::move(out),
                    [xv, c](const Graph& g, const Tensor<T>& go, std::vector<Tensor<T>>& grads) {
                      if (!g.requires_grad(xv)) return;
                      Tensor<T> gx(go.shape());
                      for (std::int64_t i = 0; i < go.size(); ++i) gx[i] = c * go[i];
                      g.accumulate(grads, xv, std::move(gx));
                    });
  }

  // N scalar nodes -> [N].
  Var stack(const std::vector<Var>& scalars) {
    if (scalars.empty()) throw ContractError("stack: empty input list");
    std::vector<int> ids;
    Tensor<T> out(Shape{static_cast<std::int64_t>(scalars.size())});
    for (std::size_t i = 0; i < scalars.size(); ++i) {
      const Tensor<T>& s = value(scalars[i]);
      if (s.size() != 1) {
        throw DimensionError("stack: input " + std::to_string(i) + " has shape " +
                             shape_str(s.shape()) + ", expected scalar");
      }
      out[static_cast<std::int64_t>(i)] = s[0];
      ids.push_back(scalars[i].id);
    }
    auto inputs = scalars;
    return add_node(OpKind::stack, std::move(ids), std::move(out),
                    [inputs](const Graph& g, const Tensor<T>& go, std::vector<Tensor<T>>& grads) {
                      for (std::size_t i = 0; i < inputs.size(); ++i) {
                        if (!g.requires_grad(inputs[i])) continue;
                        g.accumulate(grads, inputs[i],
                                     Tensor<T>(g.value(inputs[i]).shape(),
                                               {go[static_cast<std::int64_t>(i)]}));
                      }
                    });
  }

  Var sqrt(Var xv) {
    const Tensor<T>& x = value(xv);
    Tensor<T> out(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) out[i] = std::sqrt(x[i]);
    return add_node(OpKind::sqrt_op, {xv.id}, std::move(out),
                    [xv](const Graph& g, const Tensor<T>& go, std::vector<Tensor<T>>& grads) {
                      if (!g.requires_grad(xv)) return;
                      const Tensor<T>& x = g.value(xv);
                      Tensor<T> gx(x.shape());
                      for (std::int64_t i = 0; i < x.size(); ++i)
                        gx[i] = go[i] * T(0.5) / std::sqrt(x[i]);
                      g.accumulate(grads, xv, std::move(gx));
                    });
  }

  // sum_d (a_d - b_d)^2 as a scalar node.
  Var squared_l2(Var av, Var bv) {
    const Tensor<T>& a = value(av);
    const Tensor<T>& b = value(bv);
    require_same_shape(a, b, "squared_l2");
    T acc{};
    for (std::int64_t i = 0; i < a.size(); ++i) {
      const T d = a[i] - b[i];
      acc += d * d;
    }
    return add_node(OpKind::squared_l2, {av.id, bv.id}, Tensor<T>::scalar(acc),
                    [av, bv](const Graph& g, const Tensor<T>& go, std::vector<Tensor<T>>& grads) {
                      const Tensor<T>& a = g.value(av);
                      const Tensor<T>& b = g.value(bv);
                      const T go_v = go[0];
                      if (g.requires_grad(av)) {
                        Tensor<T> ga(a.shape());
                        for (std::int64_t i = 0; i < a.size(); ++i)
                          ga[i] = T(2) * (a[i] - b[i]) * go_v;
                        g.accumulate(grads, av, std::move(ga));
                      }
                      if (g.requires_grad(bv)) {
                        Tensor<T> gb(b.shape());
                        for (std::int64_t i = 0; i < b.size(); ++i)
                          gb[i] = T(-2) * (a[i] - b[i]) * go_v;
                        g.accumulate(grads, bv, std::move(gb));
                      }
                    });
  }

  // Numerically stabilized softmax over a 1-D tensor.
  Var softmax(Var xv) {
    const Tensor<T>& x = value(xv);
    require_rank(x, 1, "softmax input");
    T m = x[0];
    for (std::int64_t i = 1; i < x.size(); ++i) m = std::max(m, x[i]);
    Tensor<T> out(x.shape());
    T sum{};
    for (std::int64_t i = 0; i < x.size(); ++i) {
      out[i] = std::exp(x[i] - m);
      sum += out[i];
    }
    for (std::int64_t i = 0; i < x.size(); ++i) out[i] /= sum;
    return add_node(OpKind::softmax, {xv.id}, std::move(out),
                    [xv, self = next_id()](const Graph& g, const Tensor<T>& go,
                                           std::vector<Tensor<T>>& grads) {
                      if (!g.requires_grad(xv)) return;
                      const Tensor<T>& p = g.nodes_[static_cast<std::size_t>(self)].out;
                      T dot{};
                      for (std::int64_t i = 0; i < p.size(); ++i) dot += go[i] * p[i];
                      Tensor<T> gx(p.shape());
                      for (std::int64_t i = 0; i < p.size(); ++i) gx[i] = p[i] * (go[i] - dot);
                      g.accumulate(grads, xv, std::move(gx));
                    });
  }

  // -log(prob[label] + delta); the floor keeps degenerate distributions finite.
  Var nll_loss(Var probv, std::int64_t label) {
    const Tensor<T>& prob = value(probv);
    require_rank(prob, 1, "nll_loss prob");
    if (label < 0 || label >= prob.size()) {
      throw IndexError("nll_loss: label " + std::to_string(label) + " out of range for " +
                       std::to_string(prob.size()) + " classes");
    }
    const T v = -std::log(prob[label] + T(kNllFloor));
    return add_node(
        OpKind::nll, {probv.id}, Tensor<T>::scalar(v),
        [probv, label](const Graph& g, const Tensor<T>& go, std::vector<Tensor<T>>& grads) {
          if (!g.requires_grad(probv)) return;
          const Tensor<T>& prob = g.value(probv);
          Tensor<T> gp(prob.shape());
          gp[label] = -go[0] / (prob[label] + T(kNllFloor));
          g.accumulate(grads, probv, std::move(gp));
        },
        {label});
  }

  Var sum(Var xv) {
    const Tensor<T>& x = value(xv);
    T acc{};
    for (std::int64_t i = 0; i < x.size(); ++i) acc += x[i];
    return add_node(OpKind::sum_all, {xv.id}, Tensor<T>::scalar(acc),
                    [xv](const Graph& g, const Tensor<T>& go, std::vector<Tensor<T>>& grads) {
                      if (!g.requires_grad(xv)) return;
                      g.accumulate(grads, xv, Tensor<T>::full(g.value(xv).shape(), go[0]));
                    });
  }

  Var mean_of(const std::vector<Var>& scalars) {
    Var stacked = stack(scalars);
    Var total = sum(stacked);
    return scale(total, T(1) / static_cast<T>(scalars.size()));
  }

  // Exact reverse-mode gradients for every listed node. Nodes not reachable
  // from the loss map to zero tensors of their shape.
  GradientMap<T> backward(Var loss, const std::vector<Var>& wrt) const {
    const Node& ln = node(loss);
    if (ln.out.rank() != 0) {
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(ln.out.shape()));
    }
    for (Var v : wrt) node(v);  // range check

    std::vector<Tensor<T>> grads(nodes_.size());
    grads[loss.id] = Tensor<T>::scalar(T(1));
    for (int i = loss.id; i >= 0; --i) {
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || grads[i].size() == 0 || !n.back) continue;
      n.back(*this, grads[i], grads);
    }

    GradientMap<T> gm;
    for (Var v : wrt) {
      if (grads[v.id].size() == 0) {
        gm.set(v, Tensor<T>(node(v).out.shape()));
      } else {
        gm.set(v, std::move(grads[v.id]));
      }
    }
    return gm;
  }

  static constexpr double kBnEpsilon = 1e-5;
  static constexpr double kBnMomentum = 0.9;
  static constexpr double kNllFloor = 1e-12;

 private:
  enum class OpKind : int {
    leaf = 1,
    dense,
    conv2d,
    conv1d,
    batch_norm,
    relu,
    max_pool2d,
    avg_pool_global,
    crop_even2d,
    reshape,
    slice_rows,
    add,
    sub,
    scale,
    stack,
    sqrt_op,
    squared_l2,
    softmax,
    nll,
    sum_all,
  };

  using BackFn = std::function<void(const Graph&, const Tensor<T>&, std::vector<Tensor<T>>&)>;

  struct Node {
    OpKind kind;
    std::vector<int> inputs;
    Tensor<T> out;
    bool requires_grad = false;
    BackFn back;
  };

  static std::size_t channel_of(std::int64_t flat, std::int64_t channels, std::int64_t spatial) {
    return static_cast<std::size_t>((flat / spatial) % channels);
  }

  static void require_rank(const Tensor<T>& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
      throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                           ", got shape " + shape_str(t.shape()));
    }
  }

  static void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (!a.same_shape(b)) {
      throw DimensionError(std::string(what) + ": shape " + shape_str(a.shape()) +
                           " does not match " + shape_str(b.shape()));
    }
  }

  // Returns {output extent, leading pad} for one spatial axis.
  static std::pair<std::int64_t, std::int64_t> conv_out(std::int64_t extent, std::int64_t k,
                                                        std::int64_t stride, Padding pad,
                                                        const char* what) {
    if (pad == Padding::valid) {
      if (k > extent) {
        throw DimensionError(std::string(what) + ": kernel extent " + std::to_string(k) +
                             " exceeds input extent " + std::to_string(extent));
      }
      return {(extent - k) / stride + 1, 0};
    }
    const std::int64_t out = (extent + stride - 1) / stride;
    const std::int64_t total = std::max<std::int64_t>(0, (out - 1) * stride + k - extent);
    return {out, total / 2};
  }

  int next_id() const { return static_cast<int>(nodes_.size()); }

  Var add_leaf(Tensor<T> value, bool requires_grad) {
    detail::fnv_mix(sig_, static_cast<std::uint64_t>(OpKind::leaf));
    Node n;
    n.kind = OpKind::leaf;
    n.out = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{next_id() - 1};
  }

  Var add_node(OpKind kind, std::vector<int> inputs, Tensor<T> out, BackFn back,
               const std::vector<std::int64_t>& attrs = {}) {
    detail::fnv_mix(sig_, static_cast<std::uint64_t>(kind));
    bool requires_grad = false;
    for (int i : inputs) {
      detail::fnv_mix(sig_, static_cast<std::uint64_t>(i));
      requires_grad = requires_grad || nodes_[static_cast<std::size_t>(i)].requires_grad;
    }
    for (auto a : attrs) detail::fnv_mix(sig_, static_cast<std::uint64_t>(a));
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.out = std::move(out);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{next_id() - 1};
  }

  const Node& node(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
      throw ContractError("graph: node id " + std::to_string(v.id) + " out of range");
    }
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  void accumulate(std::vector<Tensor<T>>& grads, Var v, Tensor<T> g) const {
    Tensor<T>& slot = grads[static_cast<std::size_t>(v.id)];
    if (slot.size() == 0) {
      slot = std::move(g);
    } else {
      for (std::int64_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
    }
  }

  // Deque keeps value() references stable while the graph keeps growing.
  std::deque<Node> nodes_;
  std::uint64_t sig_ = detail::kFnvOffset;
};

}  // namespace csn
