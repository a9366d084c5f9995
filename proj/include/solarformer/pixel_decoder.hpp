// Pixel decoder: flattens the feature pyramid into one token sequence with
// positional and level encodings, runs full self-attention encoder layers over
// it, restores the per-level maps, and upsamples the finest map into the
// per-pixel embedding.
#pragma once

#include "solarformer/backbone.hpp"
#include "solarformer/layers.hpp"

#include <array>
#include <cmath>
#include <vector>

namespace sf {

struct LevelDims {
  std::int64_t h = 0, w = 0;
  std::int64_t count() const { return h * w; }
};

// Flattened multi-level token set. Levels are stored in order 1..4
// (high to low resolution); boundaries[i] is the first token of level i.
struct TokenSequence {
  VarId tokens;  // [K, C_e]
  VarId pos;     // [K, C_e], P (sinusoidal + learned offset) plus per-level L
  std::array<LevelDims, 4> dims{};
  std::array<std::int64_t, 5> boundaries{};
  std::int64_t k() const { return boundaries[4]; }
};

struct EncodedPyramidIds {
  std::array<VarId, 4> d;  // d[0] = D1 (stride 4) .. d[3] = D4 (stride 32)
};

// Token bookkeeping for an arbitrary number of levels; boundaries[i] is the
// first flat token index of level i, boundaries.back() == K.
inline std::vector<std::int64_t> token_boundaries(const std::vector<LevelDims>& dims) {
  std::vector<std::int64_t> b(dims.size() + 1, 0);
  for (std::size_t i = 0; i < dims.size(); ++i) b[i + 1] = b[i] + dims[i].count();
  return b;
}

// Fixed 2-d sinusoidal encoding for one level: first half of the channels
// encodes y, second half x, sin/cos interleaved, coordinates normalized to
// [0, 2*pi]. Requires the channel count to be a multiple of 4.
template <typename T>
Tensor<T> sinusoidal_position_encoding(std::int64_t h, std::int64_t w, std::int64_t dim) {
  if (dim % 4 != 0)
    throw std::runtime_error("positional encoding needs C_e divisible by 4, got " +
                             std::to_string(dim));
  const std::int64_t half = dim / 2;
  const double two_pi = 6.283185307179586476925286766559;
  Tensor<T> pe({h * w, dim});
  for (std::int64_t y = 0; y < h; ++y) {
    const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(h) * two_pi;
    for (std::int64_t x = 0; x < w; ++x) {
      const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(w) * two_pi;
      T* row = pe.data() + (y * w + x) * dim;
      for (std::int64_t i = 0; i < half; ++i) {
        const double t = std::pow(10000.0, 2.0 * static_cast<double>(i / 2) /
                                               static_cast<double>(half));
        row[i] = static_cast<T>((i % 2 == 0) ? std::sin(py / t) : std::cos(py / t));
        row[half + i] = static_cast<T>((i % 2 == 0) ? std::sin(px / t) : std::cos(px / t));
      }
    }
  }
  return pe;
}

// Pre-norm transformer encoder layer; the positional terms are added to
// queries and keys only, never to the value path.
template <typename T>
struct EncoderLayer {
  LayerNorm<T> ln_attn, ln_ffn;
  MultiHeadAttention<T> attn;
  FeedForward<T> ffn;

  EncoderLayer() = default;
  EncoderLayer(ParamStore<T>& ps, Rng& rng, const std::string& name, std::int64_t dim, int heads,
               std::int64_t ffn_hidden, Act act) {
    ln_attn = LayerNorm<T>(ps, name + ".ln_attn", dim);
    attn = MultiHeadAttention<T>(ps, rng, name + ".attn", dim, heads);
    ln_ffn = LayerNorm<T>(ps, name + ".ln_ffn", dim);
    ffn = FeedForward<T>(ps, rng, name + ".ffn", dim, ffn_hidden, act);
  }

  VarId operator()(Tape<T>& t, const ParamStore<T>& ps, VarId x, VarId pos,
                   std::vector<Tensor<T>>* attn_weights = nullptr) const {
    VarId h = ln_attn(t, ps, x);
    VarId hp = t.add(h, pos);
    x = t.add(x, attn(t, ps, hp, hp, h, nullptr, attn_weights));
    x = t.add(x, ffn(t, ps, ln_ffn(t, ps, x)));
    return x;
  }
};

template <typename T>
struct PixelDecoder {
  std::int64_t c_e = 0;
  int n_enc = 0;
  Act act = Act::gelu;
  std::array<Linear<T>, 4> level_proj;  // C_Fi -> C_e
  int pos_offset = -1;                  // learned additive offset on P
  int level_embed = -1;                 // [4, C_e] learned level encodings L
  std::vector<EncoderLayer<T>> layers;
  Conv<T> up_conv1, up_conv2, out_proj;

  PixelDecoder() = default;
  PixelDecoder(ParamStore<T>& ps, Rng& rng, const BackboneConfig& bb, std::int64_t c_e_,
               int heads, int n_enc_, std::int64_t ffn_hidden, Act act_)
      : c_e(c_e_), n_enc(n_enc_), act(act_) {
    for (int i = 0; i < 4; ++i)
      level_proj[static_cast<std::size_t>(i)] =
          Linear<T>(ps, rng, "pixel_decoder.proj" + std::to_string(i + 1),
                    bb.channels[static_cast<std::size_t>(i)], c_e);
    pos_offset = ps.add("pixel_decoder.pos_offset", Tensor<T>({c_e}));
    level_embed = ps.add("pixel_decoder.level_embed", init_normal<T>(rng, {4, c_e}, 0.02));
    layers.reserve(static_cast<std::size_t>(n_enc));
    for (int l = 0; l < n_enc; ++l)
      layers.emplace_back(ps, rng, "pixel_decoder.enc" + std::to_string(l), c_e, heads,
                          ffn_hidden, act);
    up_conv1 = Conv<T>(ps, rng, "pixel_decoder.up1.conv", c_e, c_e, 3, 1, 1);
    up_conv2 = Conv<T>(ps, rng, "pixel_decoder.up2.conv", c_e, c_e, 3, 1, 1);
    out_proj = Conv<T>(ps, rng, "pixel_decoder.out_proj", c_e, c_e, 1, 1, 0);
  }

  // [C,H,W] map -> [H*W, C] rows in row-major (y, x) order.
  static VarId map_to_rows(Tape<T>& t, VarId m) {
    const auto& s = t.val(m).shape();
    return t.transpose2(t.reshape(m, {s[0], s[1] * s[2]}));
  }
  static VarId rows_to_map(Tape<T>& t, VarId rows, const LevelDims& d) {
    const auto& s = t.val(rows).shape();
    return t.reshape(t.transpose2(rows), {s[1], d.h, d.w});
  }

  TokenSequence flatten_and_project(Tape<T>& t, const ParamStore<T>& ps,
                                    const FeaturePyramidIds& pyr) const {
    const std::array<VarId, 4> maps{pyr.f1, pyr.f2, pyr.f3, pyr.f4};
    TokenSequence seq;
    std::vector<VarId> tok_parts, pos_parts, lvl_parts;
    seq.boundaries[0] = 0;
    for (int i = 0; i < 4; ++i) {
      const auto& s = t.val(maps[static_cast<std::size_t>(i)]).shape();
      const LevelDims d{s[1], s[2]};
      seq.dims[static_cast<std::size_t>(i)] = d;
      seq.boundaries[static_cast<std::size_t>(i) + 1] =
          seq.boundaries[static_cast<std::size_t>(i)] + d.count();
      tok_parts.push_back(level_proj[static_cast<std::size_t>(i)](
          t, ps, map_to_rows(t, maps[static_cast<std::size_t>(i)])));
      VarId sin_part = t.constant(sinusoidal_position_encoding<T>(d.h, d.w, c_e));
      pos_parts.push_back(t.add_row(sin_part, ps.node(pos_offset)));
      lvl_parts.push_back(
          t.broadcast_row(t.slice_rows(ps.node(level_embed), i, i + 1), d.count()));
    }
    seq.tokens = t.concat_rows(tok_parts);
    VarId p = t.concat_rows(pos_parts);
    VarId l = t.concat_rows(lvl_parts);
    seq.pos = t.add(p, l);
    return seq;
  }

  TokenSequence encode_tokens(Tape<T>& t, const ParamStore<T>& ps, TokenSequence seq,
                              std::vector<Tensor<T>>* attn_weights = nullptr) const {
    for (const auto& layer : layers)
      seq.tokens = layer(t, ps, seq.tokens, seq.pos, attn_weights);
    return seq;
  }

  EncodedPyramidIds unflatten(Tape<T>& t, const TokenSequence& seq) const {
    const auto& s = t.val(seq.tokens).shape();
    if (s[0] != seq.k())
      throw ShapeError("token count " + std::to_string(s[0]) + " does not match boundaries (" +
                       std::to_string(seq.k()) + ")");
    EncodedPyramidIds out;
    for (int i = 0; i < 4; ++i) {
      const auto d = seq.dims[static_cast<std::size_t>(i)];
      VarId rows = t.slice_rows(seq.tokens, seq.boundaries[static_cast<std::size_t>(i)],
                                seq.boundaries[static_cast<std::size_t>(i) + 1]);
      out.d[static_cast<std::size_t>(i)] = rows_to_map(t, rows, d);
    }
    return out;
  }

  // D1 -> E_pixel at the original (pre-padding) resolution.
  VarId per_pixel_embed(Tape<T>& t, const ParamStore<T>& ps, VarId d1, std::int64_t out_h,
                        std::int64_t out_w) const {
    const auto& s = t.val(d1).shape();
    VarId x = t.resize_bilinear(d1, s[1] * 2, s[2] * 2);
    x = apply_act(t, act, up_conv1(t, ps, x));
    x = t.resize_bilinear(x, s[1] * 4, s[2] * 4);
    x = apply_act(t, act, up_conv2(t, ps, x));
    x = out_proj(t, ps, x);
    const auto& xs = t.val(x).shape();
    if (xs[1] != out_h || xs[2] != out_w) x = t.crop2d(x, out_h, out_w);
    return x;
  }
};

}  // namespace sf
