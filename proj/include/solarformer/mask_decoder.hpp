// Masked-attention transformer decoder: N learned per-segment queries are
// decoded against the encoded pyramid coarse-to-fine (D4 -> D1). Each step
// predicts masks against the per-pixel embedding; the previous step's mask,
// thresholded at 0.5, gates the cross-attention.
#pragma once

#include "solarformer/image.hpp"
#include "solarformer/pixel_decoder.hpp"

#include <limits>
#include <vector>

namespace sf {

template <typename T>
struct DecoderStepTrace {
  Tensor<T> attn_bias;                  // [N, Kd] additive mask actually applied
  std::vector<Tensor<T>> cross_weights; // per-head post-softmax [N, Kd]
  std::vector<bool> mask_disabled;      // all-masked fallback per query
};

template <typename T>
struct DecodeResult {
  std::vector<VarId> step_mask_logits;  // 4*rounds + 1 entries of [N,H,W]
  VarId class_logits;                   // [N, num_classes+1]
  VarId final_mask_logits() const { return step_mask_logits.back(); }
};

// Pre-norm decoder layer: masked cross-attention, query self-attention,
// feed-forward. Query positional embeddings go to queries/keys only.
template <typename T>
struct DecoderLayer {
  LayerNorm<T> ln_cross, ln_self, ln_ffn;
  MultiHeadAttention<T> cross, self;
  FeedForward<T> ffn;

  DecoderLayer() = default;
  DecoderLayer(ParamStore<T>& ps, Rng& rng, const std::string& name, std::int64_t dim, int heads,
               std::int64_t ffn_hidden, Act act) {
    ln_cross = LayerNorm<T>(ps, name + ".ln_cross", dim);
    cross = MultiHeadAttention<T>(ps, rng, name + ".cross", dim, heads);
    ln_self = LayerNorm<T>(ps, name + ".ln_self", dim);
    self = MultiHeadAttention<T>(ps, rng, name + ".self", dim, heads);
    ln_ffn = LayerNorm<T>(ps, name + ".ln_ffn", dim);
    ffn = FeedForward<T>(ps, rng, name + ".ffn", dim, ffn_hidden, act);
  }

  VarId operator()(Tape<T>& t, const ParamStore<T>& ps, VarId q, VarId qpos, VarId d_rows,
                   VarId d_pos, const Tensor<T>& attn_bias,
                   DecoderStepTrace<T>* trace = nullptr) const {
    VarId h = ln_cross(t, ps, q);
    VarId k = t.add(d_rows, d_pos);
    q = t.add(q, cross(t, ps, t.add(h, qpos), k, d_rows, &attn_bias,
                       trace ? &trace->cross_weights : nullptr));
    h = ln_self(t, ps, q);
    VarId hq = t.add(h, qpos);
    q = t.add(q, self(t, ps, hq, hq, h));
    q = t.add(q, ffn(t, ps, ln_ffn(t, ps, q)));
    return q;
  }
};

template <typename T>
struct MaskDecoder {
  std::int64_t c_e = 0;
  int num_queries = 0;
  int rounds = 1;
  int num_classes = 2;  // {PV, background}; a no-object slot is appended
  int query_feat = -1, query_pos = -1;
  Linear<T> mask_mlp1, mask_mlp2, mask_mlp3;
  Linear<T> class_head;
  Act act = Act::gelu;
  std::vector<DecoderLayer<T>> layers;

  static constexpr int kPvClass = 0;

  MaskDecoder() = default;
  MaskDecoder(ParamStore<T>& ps, Rng& rng, std::int64_t c_e_, int heads, int num_queries_,
              int rounds_, int num_classes_, std::int64_t ffn_hidden, Act act_)
      : c_e(c_e_), num_queries(num_queries_), rounds(rounds_), num_classes(num_classes_),
        act(act_) {
    if (num_queries_ < 1) throw std::runtime_error("need at least one query");
    if (rounds_ < 0) throw std::runtime_error("decoder rounds must be >= 0");
    query_feat = ps.add("mask_decoder.query_feat", init_normal<T>(rng, {num_queries_, c_e_}, 0.5));
    query_pos = ps.add("mask_decoder.query_pos", init_normal<T>(rng, {num_queries_, c_e_}, 0.5));
    mask_mlp1 = Linear<T>(ps, rng, "mask_decoder.mask_mlp1", c_e_, c_e_);
    mask_mlp2 = Linear<T>(ps, rng, "mask_decoder.mask_mlp2", c_e_, c_e_);
    mask_mlp3 = Linear<T>(ps, rng, "mask_decoder.mask_mlp3", c_e_, c_e_);
    class_head = Linear<T>(ps, rng, "mask_decoder.class_head", c_e_, num_classes_ + 1);
    const int n_layers = 4 * rounds_;
    layers.reserve(static_cast<std::size_t>(n_layers));
    for (int l = 0; l < n_layers; ++l)
      layers.emplace_back(ps, rng, "mask_decoder.layer" + std::to_string(l), c_e_, heads,
                          ffn_hidden, act_);
  }

  // Query state -> per-query mask logits against every pixel embedding.
  VarId predict_masks(Tape<T>& t, const ParamStore<T>& ps, VarId q, VarId e_pixel) const {
    VarId me = mask_mlp3(
        t, ps, apply_act(t, act, mask_mlp2(t, ps, apply_act(t, act, mask_mlp1(t, ps, q)))));
    const auto& es = t.val(e_pixel).shape();
    VarId ef = t.reshape(e_pixel, {es[0], es[1] * es[2]});
    return t.reshape(t.matmul(me, ef), {t.val(q).dim(0), es[1], es[2]});
  }

  // Builds the additive attention bias for one level from the previous mask
  // logits (values only; the thresholding is not differentiated). Probabilities
  // are interpolated to the level's size; positions < 0.5 get -inf. Queries
  // whose positions are all masked get their mask disabled for this layer.
  static Tensor<T> attention_bias(const Tensor<T>& mask_logits, const LevelDims& d,
                                  std::vector<bool>* disabled = nullptr) {
    const std::int64_t n = mask_logits.dim(0);
    const std::int64_t h = mask_logits.dim(1), w = mask_logits.dim(2);
    Tensor<T> probs(mask_logits.shape());
    for (std::int64_t i = 0; i < probs.numel(); ++i) {
      const T x = mask_logits[i];
      probs[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
    }
    Tensor<T> resized({n, d.h, d.w});
    Tape<T>::resample_bilinear(probs.data(), n, h, w, resized.data(), d.h, d.w, false);
    Tensor<T> bias({n, d.count()});
    const T ninf = -std::numeric_limits<T>::infinity();
    if (disabled) disabled->assign(static_cast<std::size_t>(n), false);
    for (std::int64_t q = 0; q < n; ++q) {
      std::int64_t open = 0;
      for (std::int64_t p = 0; p < d.count(); ++p) {
        const bool keep = resized[q * d.count() + p] >= T(0.5);
        bias.at2(q, p) = keep ? T(0) : ninf;
        open += keep;
      }
      if (open == 0) {
        for (std::int64_t p = 0; p < d.count(); ++p) bias.at2(q, p) = T(0);
        if (disabled) (*disabled)[static_cast<std::size_t>(q)] = true;
      }
    }
    return bias;
  }

  // Full decode: initial masks from the learned queries, then rounds x
  // (D4, D3, D2, D1) masked-attention steps, a mask prediction after each.
  DecodeResult<T> run(Tape<T>& t, const ParamStore<T>& ps, const TokenSequence& seq,
                      VarId e_pixel, std::vector<DecoderStepTrace<T>>* trace = nullptr) const {
    DecodeResult<T> out;
    VarId q = ps.node(query_feat);
    VarId qpos = ps.node(query_pos);
    out.step_mask_logits.push_back(predict_masks(t, ps, q, e_pixel));
    for (int r = 0; r < rounds; ++r) {
      for (int l = 0; l < 4; ++l) {
        const int level = 3 - l;  // D4 first, down to D1
        const auto& d = seq.dims[static_cast<std::size_t>(level)];
        VarId d_rows = t.slice_rows(seq.tokens, seq.boundaries[static_cast<std::size_t>(level)],
                                    seq.boundaries[static_cast<std::size_t>(level) + 1]);
        VarId d_pos = t.slice_rows(seq.pos, seq.boundaries[static_cast<std::size_t>(level)],
                                   seq.boundaries[static_cast<std::size_t>(level) + 1]);
        DecoderStepTrace<T>* step_trace = nullptr;
        if (trace) {
          trace->emplace_back();
          step_trace = &trace->back();
        }
        Tensor<T> bias = attention_bias(t.val(out.step_mask_logits.back()), d,
                                        step_trace ? &step_trace->mask_disabled : nullptr);
        if (step_trace) step_trace->attn_bias = bias;
        q = layers[static_cast<std::size_t>(r * 4 + l)](t, ps, q, qpos, d_rows, d_pos, bias,
                                                        step_trace);
        out.step_mask_logits.push_back(predict_masks(t, ps, q, e_pixel));
      }
    }
    out.class_logits = class_head(t, ps, q);
    return out;
  }
};

// Aggregates instance masks and class scores into the single H x W output:
// PV probability at a pixel is the class-weighted sum of mask probabilities,
// clamped to [0,1]; the binary mask thresholds at 0.5.
template <typename T>
struct SemanticResult {
  Tensor<T> pv_prob;  // [H, W]
  MaskPatch mask;
};

template <typename T>
SemanticResult<T> semantic_inference(const Tensor<T>& mask_logits, const Tensor<T>& class_logits,
                                     int pv_class = 0) {
  const std::int64_t n = mask_logits.dim(0), h = mask_logits.dim(1), w = mask_logits.dim(2);
  const std::int64_t nc = class_logits.dim(1);
  std::vector<T> pv_weight(static_cast<std::size_t>(n));
  for (std::int64_t q = 0; q < n; ++q) {
    T mx = class_logits.at2(q, 0);
    for (std::int64_t c = 1; c < nc; ++c) mx = std::max(mx, class_logits.at2(q, c));
    T den = 0;
    for (std::int64_t c = 0; c < nc; ++c) den += std::exp(class_logits.at2(q, c) - mx);
    pv_weight[static_cast<std::size_t>(q)] = std::exp(class_logits.at2(q, pv_class) - mx) / den;
  }
  SemanticResult<T> out;
  out.pv_prob = Tensor<T>({h, w});
  for (std::int64_t q = 0; q < n; ++q) {
    const T wq = pv_weight[static_cast<std::size_t>(q)];
    for (std::int64_t p = 0; p < h * w; ++p) {
      const T x = mask_logits[q * h * w + p];
      const T sig = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
      out.pv_prob[p] += wq * sig;
    }
  }
  out.mask.width = static_cast<int>(w);
  out.mask.height = static_cast<int>(h);
  out.mask.data.resize(static_cast<std::size_t>(h * w));
  for (std::int64_t p = 0; p < h * w; ++p) {
    if (out.pv_prob[p] > T(1)) out.pv_prob[p] = T(1);
    if (out.pv_prob[p] < T(0)) out.pv_prob[p] = T(0);
    out.mask.data[static_cast<std::size_t>(p)] = out.pv_prob[p] >= T(0.5) ? 1 : 0;
  }
  return out;
}

}  // namespace sf
