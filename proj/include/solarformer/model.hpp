// Full model assembly: backbone -> pixel decoder -> mask decoder, with the
// pad-to-32/crop-back policy for inputs whose sides are not multiples of 32.
#pragma once

#include "solarformer/backbone.hpp"
#include "solarformer/mask_decoder.hpp"
#include "solarformer/pixel_decoder.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace sf {

struct ModelConfig {
  BackboneConfig backbone;
  std::int64_t c_e = 0;  // 0 binds C_e to the backbone's C_F1
  int heads = 4;
  int n_enc = 3;
  int num_queries = 20;
  int decoder_rounds = 1;
  int num_classes = 2;
  int ffn_mult = 4;
  std::string activation = "gelu";

  std::int64_t resolved_c_e() const { return c_e > 0 ? c_e : backbone.channels[0]; }

  void validate() const {
    backbone.validate();
    const std::int64_t ce = resolved_c_e();
    if (ce % heads != 0)
      throw std::runtime_error("C_e " + std::to_string(ce) + " not divisible by " +
                               std::to_string(heads) + " heads");
    if (ce % 4 != 0)
      throw std::runtime_error("C_e must be a multiple of 4 for the positional encoding");
    if (n_enc < 0 || num_queries < 1 || decoder_rounds < 0 || num_classes < 1 || ffn_mult < 1)
      throw std::runtime_error("invalid model size configuration");
    act_from_name(activation);
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"backbone_channels", c.backbone.channels},
                     {"backbone_blocks", c.backbone.blocks},
                     {"activation", c.activation},
                     {"c_e", c.c_e},
                     {"heads", c.heads},
                     {"n_enc", c.n_enc},
                     {"num_queries", c.num_queries},
                     {"decoder_rounds", c.decoder_rounds},
                     {"num_classes", c.num_classes},
                     {"ffn_mult", c.ffn_mult}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("backbone_channels")) j.at("backbone_channels").get_to(c.backbone.channels);
  if (j.contains("backbone_blocks")) j.at("backbone_blocks").get_to(c.backbone.blocks);
  if (j.contains("activation")) {
    j.at("activation").get_to(c.activation);
    c.backbone.nonlinearity = c.activation;
  }
  if (j.contains("c_e")) j.at("c_e").get_to(c.c_e);
  if (j.contains("heads")) j.at("heads").get_to(c.heads);
  if (j.contains("n_enc")) j.at("n_enc").get_to(c.n_enc);
  if (j.contains("num_queries")) j.at("num_queries").get_to(c.num_queries);
  if (j.contains("decoder_rounds")) j.at("decoder_rounds").get_to(c.decoder_rounds);
  if (j.contains("num_classes")) j.at("num_classes").get_to(c.num_classes);
  if (j.contains("ffn_mult")) j.at("ffn_mult").get_to(c.ffn_mult);
}

template <typename T>
struct SolarFormer {
  ModelConfig cfg;
  ParamStore<T> params;
  Backbone<T> backbone;
  PixelDecoder<T> pixel_decoder;
  MaskDecoder<T> mask_decoder;

  SolarFormer(ModelConfig config, std::uint64_t seed) : cfg(std::move(config)) {
    cfg.validate();
    cfg.backbone.nonlinearity = cfg.activation;
    Rng rng(seed);
    const std::int64_t ce = cfg.resolved_c_e();
    const std::int64_t ffn_hidden = ce * cfg.ffn_mult;
    const Act act = act_from_name(cfg.activation);
    backbone = Backbone<T>(params, rng, cfg.backbone);
    pixel_decoder =
        PixelDecoder<T>(params, rng, cfg.backbone, ce, cfg.heads, cfg.n_enc, ffn_hidden, act);
    mask_decoder = MaskDecoder<T>(params, rng, ce, cfg.heads, cfg.num_queries, cfg.decoder_rounds,
                                  cfg.num_classes, ffn_hidden, act);
  }

  void stage(Tape<T>& t) { params.stage(t); }

  struct ForwardResult {
    FeaturePyramidIds pyramid;
    TokenSequence tokens;  // encoded sequence
    EncodedPyramidIds encoded;
    VarId e_pixel;  // [C_e, H, W] at the original resolution
    DecodeResult<T> decode;
    std::int64_t orig_h = 0, orig_w = 0;
  };

  // Requires stage() on the same tape first. image is [3,H,W] in [0,1].
  ForwardResult forward(Tape<T>& t, const Tensor<T>& image,
                        std::vector<DecoderStepTrace<T>>* trace = nullptr) const {
    ForwardResult r;
    r.orig_h = image.dim(1);
    r.orig_w = image.dim(2);
    VarId img = t.leaf(reflect_pad_to_multiple(image, 32), false);
    r.pyramid = backbone(t, params, img);
    r.tokens = pixel_decoder.flatten_and_project(t, params, r.pyramid);
    r.tokens = pixel_decoder.encode_tokens(t, params, r.tokens);
    r.encoded = pixel_decoder.unflatten(t, r.tokens);
    r.e_pixel = pixel_decoder.per_pixel_embed(t, params, r.encoded.d[0], r.orig_h, r.orig_w);
    r.decode = mask_decoder.run(t, params, r.tokens, r.e_pixel, trace);
    return r;
  }

  // Inference helper on a fresh tape with gradient bookkeeping off.
  SemanticResult<T> predict(const ImagePatch& img,
                            std::vector<Tensor<T>>* step_probs = nullptr) {
    Tape<T> tape;
    NoGradGuard<T> guard(tape);
    stage(tape);
    ForwardResult r = forward(tape, img.to_chw<T>());
    if (step_probs) {
      for (VarId m : r.decode.step_mask_logits) {
        Tensor<T> probs = tape.val(m);
        for (std::int64_t i = 0; i < probs.numel(); ++i) {
          const T x = probs[i];
          probs[i] =
              x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
        }
        step_probs->push_back(std::move(probs));
      }
    }
    return semantic_inference(tape.val(r.decode.final_mask_logits()),
                              tape.val(r.decode.class_logits), MaskDecoder<T>::kPvClass);
  }
};

}  // namespace sf
