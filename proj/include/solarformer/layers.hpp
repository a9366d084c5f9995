// Small parameterized building blocks shared by the encoder and decoder:
// linear, conv, norms, multi-head attention, feed-forward.
#pragma once

#include "solarformer/autodiff.hpp"
#include "solarformer/params.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace sf {

enum class Act { gelu, relu };

inline Act act_from_name(const std::string& s) {
  if (s == "gelu") return Act::gelu;
  if (s == "relu") return Act::relu;
  throw std::runtime_error("unknown activation: " + s);
}
inline const char* act_name(Act a) { return a == Act::gelu ? "gelu" : "relu"; }

template <typename T>
VarId apply_act(Tape<T>& t, Act a, VarId x) {
  return a == Act::gelu ? t.gelu(x) : t.relu(x);
}

template <typename T>
struct Linear {
  int w = -1, b = -1;
  Linear() = default;
  Linear(ParamStore<T>& ps, Rng& rng, const std::string& name, std::int64_t in, std::int64_t out) {
    w = ps.add(name + ".weight", init_linear<T>(rng, in, out));
    b = ps.add(name + ".bias", Tensor<T>({out}));
  }
  VarId operator()(Tape<T>& t, const ParamStore<T>& ps, VarId x) const {
    return t.linear(x, ps.node(w), ps.node(b));
  }
};

template <typename T>
struct Conv {
  int w = -1, b = -1;
  int stride = 1, pad = 0;
  Conv() = default;
  Conv(ParamStore<T>& ps, Rng& rng, const std::string& name, std::int64_t cin, std::int64_t cout,
       std::int64_t k, int stride_, int pad_)
      : stride(stride_), pad(pad_) {
    w = ps.add(name + ".weight", init_conv<T>(rng, cout, cin, k, k));
    b = ps.add(name + ".bias", Tensor<T>({cout}));
  }
  VarId operator()(Tape<T>& t, const ParamStore<T>& ps, VarId x) const {
    return t.conv2d(x, ps.node(w), ps.node(b), stride, pad);
  }
};

template <typename T>
struct LayerNorm {
  int gamma = -1, beta = -1;
  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, std::int64_t dim) {
    gamma = ps.add(name + ".gamma", Tensor<T>::full({dim}, T(1)));
    beta = ps.add(name + ".beta", Tensor<T>({dim}));
  }
  VarId operator()(Tape<T>& t, const ParamStore<T>& ps, VarId x) const {
    return t.layernorm_rows(x, ps.node(gamma), ps.node(beta));
  }
};

// Channel-wise normalization of [C,H,W] maps; stateless across batches.
template <typename T>
struct ChannelNorm {
  int gamma = -1, beta = -1;
  ChannelNorm() = default;
  ChannelNorm(ParamStore<T>& ps, const std::string& name, std::int64_t channels) {
    gamma = ps.add(name + ".gamma", Tensor<T>::full({channels}, T(1)));
    beta = ps.add(name + ".beta", Tensor<T>({channels}));
  }
  VarId operator()(Tape<T>& t, const ParamStore<T>& ps, VarId x) const {
    return t.channel_norm(x, ps.node(gamma), ps.node(beta));
  }
};

template <typename T>
struct MultiHeadAttention {
  Linear<T> wq, wk, wv, wo;
  int heads = 1;
  std::int64_t dim = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& ps, Rng& rng, const std::string& name, std::int64_t dim_,
                     int heads_)
      : heads(heads_), dim(dim_) {
    if (dim_ % heads_ != 0)
      throw std::runtime_error("embed dim " + std::to_string(dim_) +
                               " not divisible by head count " + std::to_string(heads_));
    wq = Linear<T>(ps, rng, name + ".q", dim_, dim_);
    wk = Linear<T>(ps, rng, name + ".k", dim_, dim_);
    wv = Linear<T>(ps, rng, name + ".v", dim_, dim_);
    wo = Linear<T>(ps, rng, name + ".out", dim_, dim_);
  }

  // bias: optional constant additive attention mask shared across heads.
  // weights_out: per-head post-softmax attention matrices.
  VarId operator()(Tape<T>& t, const ParamStore<T>& ps, VarId q_in, VarId k_in, VarId v_in,
                   const Tensor<T>* bias = nullptr,
                   std::vector<Tensor<T>>* weights_out = nullptr) const {
    VarId q = wq(t, ps, q_in);
    VarId k = wk(t, ps, k_in);
    VarId v = wv(t, ps, v_in);
    const std::int64_t dh = dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<VarId> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      VarId qh = t.slice_cols(q, h * dh, (h + 1) * dh);
      VarId kh = t.slice_cols(k, h * dh, (h + 1) * dh);
      VarId vh = t.slice_cols(v, h * dh, (h + 1) * dh);
      Tensor<T> wbuf;
      outs.push_back(t.attention(qh, kh, vh, bias, scale, weights_out ? &wbuf : nullptr));
      if (weights_out) weights_out->push_back(std::move(wbuf));
    }
    return wo(t, ps, heads == 1 ? outs[0] : t.concat_cols(outs));
  }
};

template <typename T>
struct FeedForward {
  Linear<T> fc1, fc2;
  Act act = Act::gelu;
  FeedForward() = default;
  FeedForward(ParamStore<T>& ps, Rng& rng, const std::string& name, std::int64_t dim,
              std::int64_t hidden, Act act_)
      : act(act_) {
    fc1 = Linear<T>(ps, rng, name + ".fc1", dim, hidden);
    fc2 = Linear<T>(ps, rng, name + ".fc2", hidden, dim);
  }
  VarId operator()(Tape<T>& t, const ParamStore<T>& ps, VarId x) const {
    return fc2(t, ps, apply_act(t, act, fc1(t, ps, x)));
  }
};

}  // namespace sf
