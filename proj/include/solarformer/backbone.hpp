// Convolutional backbone producing the four-level feature pyramid at strides
// 4/8/16/32. A small residual network honoring the ResNet stride/channel
// contract; no pretrained weights, no cross-batch normalization state.
#pragma once

#include "solarformer/layers.hpp"

#include <array>
#include <string>

namespace sf {

struct BackboneConfig {
  std::array<std::int64_t, 4> channels{32, 64, 128, 256};
  std::array<int, 4> blocks{1, 1, 1, 1};
  std::string nonlinearity = "gelu";

  void validate() const {
    for (int i = 0; i < 4; ++i) {
      if (channels[static_cast<std::size_t>(i)] < 1) throw std::runtime_error("backbone channels must be positive");
      if (blocks[static_cast<std::size_t>(i)] < 0) throw std::runtime_error("backbone blocks must be non-negative");
    }
    for (int i = 0; i < 3; ++i)
      if (channels[static_cast<std::size_t>(i)] > channels[static_cast<std::size_t>(i) + 1])
        throw std::runtime_error("backbone channels must widen monotonically");
    act_from_name(nonlinearity);
  }
};

struct FeaturePyramidIds {
  VarId f1, f2, f3, f4;  // strides 4, 8, 16, 32
};

// Reflect-pads a [C,H,W] tensor at the bottom/right edges up to the next
// multiple of `multiple`. Top-left origin is preserved so later crops are
// plain top-left crops.
template <typename T>
Tensor<T> reflect_pad_to_multiple(const Tensor<T>& x, std::int64_t multiple) {
  const std::int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::int64_t Hp = (H + multiple - 1) / multiple * multiple;
  const std::int64_t Wp = (W + multiple - 1) / multiple * multiple;
  if (Hp == H && Wp == W) return x;
  if (Hp - H >= H || Wp - W >= W)
    throw ShapeError("input too small to reflect-pad to a multiple of " +
                     std::to_string(multiple));
  Tensor<T> out({C, Hp, Wp});
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t y = 0; y < Hp; ++y) {
      const std::int64_t sy = y < H ? y : 2 * H - 2 - y;
      for (std::int64_t x2 = 0; x2 < Wp; ++x2) {
        const std::int64_t sx = x2 < W ? x2 : 2 * W - 2 - x2;
        out.at3(c, y, x2) = x.at3(c, sy, sx);
      }
    }
  return out;
}

template <typename T>
struct ResidualBlock {
  ChannelNorm<T> n1, n2;
  Conv<T> c1, c2;
  Act act = Act::gelu;

  ResidualBlock() = default;
  ResidualBlock(ParamStore<T>& ps, Rng& rng, const std::string& name, std::int64_t channels,
                Act act_)
      : act(act_) {
    n1 = ChannelNorm<T>(ps, name + ".norm1", channels);
    c1 = Conv<T>(ps, rng, name + ".conv1", channels, channels, 3, 1, 1);
    n2 = ChannelNorm<T>(ps, name + ".norm2", channels);
    c2 = Conv<T>(ps, rng, name + ".conv2", channels, channels, 3, 1, 1);
  }

  VarId operator()(Tape<T>& t, const ParamStore<T>& ps, VarId x) const {
    VarId h = c1(t, ps, apply_act(t, act, n1(t, ps, x)));
    h = c2(t, ps, apply_act(t, act, n2(t, ps, h)));
    return t.add(x, h);
  }
};

template <typename T>
struct Backbone {
  BackboneConfig cfg;
  Act act = Act::gelu;
  Conv<T> stem1, stem2;
  ChannelNorm<T> stem_n1, stem_n2;
  std::array<Conv<T>, 3> down;        // stages 2..4 downsample convs
  std::array<ChannelNorm<T>, 3> down_n;
  std::array<std::vector<ResidualBlock<T>>, 4> stages;

  Backbone() = default;
  Backbone(ParamStore<T>& ps, Rng& rng, const BackboneConfig& cfg_) : cfg(cfg_) {
    cfg.validate();
    act = act_from_name(cfg.nonlinearity);
    const auto& ch = cfg.channels;
    stem1 = Conv<T>(ps, rng, "backbone.stem.conv1", 3, ch[0], 5, 2, 2);
    stem_n1 = ChannelNorm<T>(ps, "backbone.stem.norm1", ch[0]);
    stem2 = Conv<T>(ps, rng, "backbone.stem.conv2", ch[0], ch[0], 3, 2, 1);
    stem_n2 = ChannelNorm<T>(ps, "backbone.stem.norm2", ch[0]);
    for (int s = 0; s < 4; ++s) {
      if (s > 0) {
        const std::string dn = "backbone.stage" + std::to_string(s + 1) + ".down";
        down[static_cast<std::size_t>(s - 1)] =
            Conv<T>(ps, rng, dn + ".conv", ch[static_cast<std::size_t>(s - 1)],
                    ch[static_cast<std::size_t>(s)], 3, 2, 1);
        down_n[static_cast<std::size_t>(s - 1)] =
            ChannelNorm<T>(ps, dn + ".norm", ch[static_cast<std::size_t>(s)]);
      }
      for (int b = 0; b < cfg.blocks[static_cast<std::size_t>(s)]; ++b) {
        const std::string bn =
            "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
        stages[static_cast<std::size_t>(s)].emplace_back(ps, rng, bn,
                                                         ch[static_cast<std::size_t>(s)], act);
      }
    }
  }

  // image: [3,H,W] with H, W divisible by 32.
  FeaturePyramidIds operator()(Tape<T>& t, const ParamStore<T>& ps, VarId image) const {
    const auto& s = t.val(image).shape();
    if (s.size() != 3 || s[0] != 3) throw ShapeError("backbone expects a [3,H,W] input");
    if (s[1] % 32 != 0 || s[2] % 32 != 0)
      throw ShapeError("input " + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                       " not divisible by 32; pad to " + std::to_string((s[1] + 31) / 32 * 32) +
                       "x" + std::to_string((s[2] + 31) / 32 * 32) + " first");
    VarId x = apply_act(t, act, stem_n1(t, ps, stem1(t, ps, image)));
    x = apply_act(t, act, stem_n2(t, ps, stem2(t, ps, x)));
    FeaturePyramidIds out;
    std::array<VarId, 4> feats;
    for (int st = 0; st < 4; ++st) {
      if (st > 0)
        x = apply_act(t, act,
                      down_n[static_cast<std::size_t>(st - 1)](
                          t, ps, down[static_cast<std::size_t>(st - 1)](t, ps, x)));
      for (const auto& blk : stages[static_cast<std::size_t>(st)]) x = blk(t, ps, x);
      feats[static_cast<std::size_t>(st)] = x;
    }
    out.f1 = feats[0];
    out.f2 = feats[1];
    out.f3 = feats[2];
    out.f4 = feats[3];
    return out;
  }
};

}  // namespace sf
