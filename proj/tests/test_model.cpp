#include "solarformer/model.hpp"

#include "gradcheck.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace sf;
using sf::testutil::fd_check_tensor;

namespace {

Tensor<double> randn(Rng& rng, Shape s, double stddev = 1.0) {
  Tensor<double> t(std::move(s));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

void set_identity(Tensor<double>& w) {
  const std::int64_t n = w.dim(0);
  w.zero();
  for (std::int64_t i = 0; i < n; ++i) w.at2(i, i) = 1.0;
}

// conv kernel acting as identity per channel
void set_conv_identity(Tensor<double>& w) {
  w.zero();
  const std::int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  for (std::int64_t c = 0; c < cout; ++c) w[((c * w.dim(1) + c) * kh + kh / 2) * kw + kw / 2] = 1.0;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.backbone.channels = {4, 4, 8, 8};
  cfg.backbone.blocks = {1, 1, 1, 1};
  cfg.c_e = 4;
  cfg.heads = 2;
  cfg.n_enc = 1;
  cfg.num_queries = 3;
  cfg.decoder_rounds = 1;
  cfg.ffn_mult = 2;
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------- backbone --

TEST_CASE("feature pyramid shape contract", "[backbone]") {
  Rng rng(5);
  ParamStore<double> ps;
  BackboneConfig cfg;
  cfg.channels = {4, 6, 8, 12};
  Backbone<double> bb(ps, rng, cfg);

  SECTION("64x64 gives 16/8/4/2") {
    Tape<double> tape;
    ps.stage(tape);
    auto pyr = bb(tape, ps, tape.leaf(randn(rng, {3, 64, 64}), false));
    CHECK(tape.val(pyr.f1).shape() == Shape{4, 16, 16});
    CHECK(tape.val(pyr.f2).shape() == Shape{6, 8, 8});
    CHECK(tape.val(pyr.f3).shape() == Shape{8, 4, 4});
    CHECK(tape.val(pyr.f4).shape() == Shape{12, 2, 2});
  }
  SECTION("random valid sizes") {
    Rng sizes(99);
    for (int trial = 0; trial < 4; ++trial) {
      const std::int64_t h = 32 * sizes.uniform_int(1, 3);
      const std::int64_t w = 32 * sizes.uniform_int(1, 3);
      Tape<double> tape;
      ps.stage(tape);
      auto pyr = bb(tape, ps, tape.leaf(randn(rng, {3, h, w}), false));
      CHECK(tape.val(pyr.f1).shape() == Shape{4, h / 4, w / 4});
      CHECK(tape.val(pyr.f4).shape() == Shape{12, h / 32, w / 32});
    }
  }
  SECTION("400x400 rejected with padding hint") {
    Tape<double> tape;
    ps.stage(tape);
    try {
      bb(tape, ps, tape.leaf(Tensor<double>({3, 400, 400}), false));
      FAIL("expected rejection");
    } catch (const ShapeError& e) {
      CHECK(std::string(e.what()).find("416") != std::string::npos);
    }
  }
  SECTION("non-monotone channels rejected") {
    BackboneConfig bad;
    bad.channels = {8, 4, 16, 32};
    CHECK_THROWS(bad.validate());
  }
}

TEST_CASE("all-zero input with zero biases gives all-zero F4", "[backbone]") {
  Rng rng(6);
  ParamStore<double> ps;
  BackboneConfig cfg;
  cfg.channels = {2, 2, 4, 4};
  Backbone<double> bb(ps, rng, cfg);
  Tape<double> tape;
  ps.stage(tape);
  auto pyr = bb(tape, ps, tape.leaf(Tensor<double>({3, 32, 32}), false));
  for (std::int64_t i = 0; i < tape.val(pyr.f4).numel(); ++i) CHECK(tape.val(pyr.f4)[i] == 0.0);
}

TEST_CASE("backbone input gradient matches finite differences", "[backbone]") {
  Rng rng(7);
  ParamStore<double> ps;
  BackboneConfig cfg;
  cfg.channels = {2, 2, 2, 2};
  Backbone<double> bb(ps, rng, cfg);
  Tensor<double> img = randn(rng, {3, 32, 32}, 0.5);
  const Tensor<double> probe = randn(rng, {2, 1, 1});

  auto eval = [&]() {
    Tape<double> tape;
    ps.stage(tape);
    auto pyr = bb(tape, ps, tape.leaf(img, false));
    return tape.val(tape.weighted_sum_const(tape.sigmoid(pyr.f4), probe))[0];
  };
  Tape<double> tape;
  ps.stage(tape);
  VarId in = tape.leaf(img, true);
  auto pyr = bb(tape, ps, in);
  tape.backward(tape.weighted_sum_const(tape.sigmoid(pyr.f4), probe));
  Tensor<double> analytic = tape.grad(in);

  Rng pick(123);
  std::vector<std::int64_t> idx;
  for (int i = 0; i < 40; ++i) idx.push_back(pick.uniform_int(0, img.numel() - 1));
  const double err = fd_check_tensor(img, analytic, eval, 1e-5, idx);
  CHECK(err < 1e-4);
}

// ------------------------------------------------------------ pixel decoder --

namespace {

struct PyramidFixture {
  ParamStore<double> ps;
  BackboneConfig bb_cfg;
  PixelDecoder<double> pd;
  std::array<Tensor<double>, 4> maps;

  PyramidFixture(std::int64_t c_e, int n_enc, std::int64_t h1, Rng& rng, Act act = Act::gelu) {
    bb_cfg.channels = {c_e, c_e, c_e, c_e};
    pd = PixelDecoder<double>(ps, rng, bb_cfg, c_e, 2, n_enc, c_e * 2, act);
    std::int64_t h = h1;
    for (int i = 0; i < 4; ++i) {
      maps[static_cast<std::size_t>(i)] = randn(rng, {c_e, h, h});
      h = std::max<std::int64_t>(h / 2, 1);
    }
  }

  void identity_projections() {
    for (int i = 0; i < 4; ++i) {
      set_identity(ps.value(pd.level_proj[static_cast<std::size_t>(i)].w));
      ps.value(pd.level_proj[static_cast<std::size_t>(i)].b).zero();
    }
  }

  FeaturePyramidIds stage_maps(Tape<double>& tape) {
    ps.stage(tape);
    FeaturePyramidIds pyr;
    pyr.f1 = tape.leaf(maps[0], false);
    pyr.f2 = tape.leaf(maps[1], false);
    pyr.f3 = tape.leaf(maps[2], false);
    pyr.f4 = tape.leaf(maps[3], false);
    return pyr;
  }
};

}  // namespace

TEST_CASE("token accounting", "[pixel_decoder]") {
  SECTION("64x64 pyramid gives K = 340") {
    const auto b = token_boundaries({{16, 16}, {8, 8}, {4, 4}, {2, 2}});
    CHECK(b == std::vector<std::int64_t>{0, 256, 320, 336, 340});
  }
  SECTION("single-level degenerate config") {
    const auto b = token_boundaries({{2, 2}});
    CHECK(b == std::vector<std::int64_t>{0, 4});
  }
  SECTION("boundaries close over random configs") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<LevelDims> dims;
      std::int64_t expect = 0;
      const int n = static_cast<int>(rng.uniform_int(1, 5));
      for (int i = 0; i < n; ++i) {
        dims.push_back({rng.uniform_int(1, 9), rng.uniform_int(1, 9)});
        expect += dims.back().count();
      }
      CHECK(token_boundaries(dims).back() == expect);
    }
  }
}

TEST_CASE("flatten and unflatten invert each other", "[pixel_decoder]") {
  Rng rng(17);
  PyramidFixture fix(4, 0, 8, rng);
  fix.identity_projections();
  Tape<double> tape;
  auto pyr = fix.stage_maps(tape);
  TokenSequence seq = fix.pd.flatten_and_project(tape, fix.ps, pyr);
  CHECK(seq.k() == 64 + 16 + 4 + 1);

  SECTION("tokens follow row-major indexing oracle") {
    const Tensor<double>& toks = tape.val(seq.tokens);
    for (std::int64_t c = 0; c < 4; ++c) {
      CHECK(toks.at2(0, c) == fix.maps[0].at3(c, 0, 0));
      CHECK(toks.at2(seq.boundaries[1], c) == fix.maps[1].at3(c, 0, 0));
    }
    for (int lvl = 0; lvl < 4; ++lvl) {
      const auto d = seq.dims[static_cast<std::size_t>(lvl)];
      for (std::int64_t y = 0; y < d.h; ++y)
        for (std::int64_t x = 0; x < d.w; ++x) {
          const std::int64_t flat = seq.boundaries[static_cast<std::size_t>(lvl)] + y * d.w + x;
          for (std::int64_t c = 0; c < 4; ++c)
            CHECK(toks.at2(flat, c) == fix.maps[static_cast<std::size_t>(lvl)].at3(c, y, x));
        }
    }
  }
  SECTION("unflatten restores the maps bit-exactly") {
    EncodedPyramidIds enc = fix.pd.unflatten(tape, seq);
    for (int i = 0; i < 4; ++i)
      CHECK(tensors_equal(tape.val(enc.d[static_cast<std::size_t>(i)]),
                          fix.maps[static_cast<std::size_t>(i)]));
  }
  SECTION("boundary mismatch rejected") {
    TokenSequence bad = seq;
    bad.boundaries[4] += 1;
    CHECK_THROWS_AS(fix.pd.unflatten(tape, bad), ShapeError);
  }
}

TEST_CASE("zero-layer encoder is the identity", "[pixel_decoder]") {
  Rng rng(19);
  PyramidFixture fix(4, 0, 4, rng);
  Tape<double> tape;
  auto pyr = fix.stage_maps(tape);
  TokenSequence seq = fix.pd.flatten_and_project(tape, fix.ps, pyr);
  TokenSequence out = fix.pd.encode_tokens(tape, fix.ps, seq);
  CHECK(out.tokens.idx == seq.tokens.idx);
  CHECK(tensors_equal(tape.val(out.tokens), tape.val(seq.tokens)));
}

TEST_CASE("hand-set single-head attention matches scalar softmax", "[pixel_decoder]") {
  ParamStore<double> ps;
  Rng rng(23);
  MultiHeadAttention<double> mha(ps, rng, "t", 2, 1);
  for (int h : {mha.wq.w, mha.wk.w, mha.wv.w, mha.wo.w}) set_identity(ps.value(h));
  for (int h : {mha.wq.b, mha.wk.b, mha.wv.b, mha.wo.b}) ps.value(h).zero();
  Tensor<double> x({3, 2}, {0.9, -0.3, 0.1, 0.7, -0.5, 0.2});
  Tape<double> tape;
  ps.stage(tape);
  VarId xn = tape.leaf(x, false);
  std::vector<Tensor<double>> w;
  VarId out = mha(tape, ps, xn, xn, xn, nullptr, &w);
  REQUIRE(w.size() == 1);
  const double scale = 1.0 / std::sqrt(2.0);
  for (int i = 0; i < 3; ++i) {
    double logits[3], mx = -1e30;
    for (int j = 0; j < 3; ++j) {
      logits[j] = scale * (x.at2(i, 0) * x.at2(j, 0) + x.at2(i, 1) * x.at2(j, 1));
      mx = std::max(mx, logits[j]);
    }
    double den = 0;
    for (double l : logits) den += std::exp(l - mx);
    double expect[2] = {0, 0};
    for (int j = 0; j < 3; ++j) {
      const double wij = std::exp(logits[j] - mx) / den;
      CHECK(std::abs(w[0].at2(i, j) - wij) < 1e-6);
      expect[0] += wij * x.at2(j, 0);
      expect[1] += wij * x.at2(j, 1);
    }
    CHECK(tape.val(out).at2(i, 0) == Catch::Approx(expect[0]).margin(1e-9));
    CHECK(tape.val(out).at2(i, 1) == Catch::Approx(expect[1]).margin(1e-9));
  }
}

TEST_CASE("encoder attention rows sum to one and permute with tokens", "[pixel_decoder]") {
  Rng rng(29);
  ParamStore<double> ps;
  EncoderLayer<double> layer(ps, rng, "enc", 4, 2, 8, Act::gelu);
  Tensor<double> x = randn(rng, {6, 4});
  Tensor<double> pos = randn(rng, {6, 4});

  Tape<double> tape;
  ps.stage(tape);
  std::vector<Tensor<double>> weights;
  VarId out = layer(tape, ps, tape.leaf(x, false), tape.leaf(pos, false), &weights);
  REQUIRE(weights.size() == 2);
  for (const auto& w : weights)
    for (std::int64_t r = 0; r < w.dim(0); ++r) {
      double sum = 0;
      for (std::int64_t j = 0; j < w.dim(1); ++j) sum += w.at2(r, j);
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }

  const std::vector<std::int64_t> perm{3, 0, 5, 1, 4, 2};
  Tensor<double> xp({6, 4}), posp({6, 4});
  for (std::int64_t r = 0; r < 6; ++r)
    for (std::int64_t c = 0; c < 4; ++c) {
      xp.at2(r, c) = x.at2(perm[static_cast<std::size_t>(r)], c);
      posp.at2(r, c) = pos.at2(perm[static_cast<std::size_t>(r)], c);
    }
  Tape<double> tape2;
  ps.stage(tape2);
  VarId out2 = layer(tape2, ps, tape2.leaf(xp, false), tape2.leaf(posp, false));
  for (std::int64_t r = 0; r < 6; ++r)
    for (std::int64_t c = 0; c < 4; ++c)
      CHECK(tape2.val(out2).at2(r, c) ==
            Catch::Approx(tape.val(out).at2(perm[static_cast<std::size_t>(r)], c)).margin(1e-12));
}

TEST_CASE("encoder layer gradients match finite differences", "[pixel_decoder]") {
  Rng rng(31);
  ParamStore<double> ps;
  EncoderLayer<double> layer(ps, rng, "enc", 4, 2, 8, Act::gelu);
  Tensor<double> x = randn(rng, {4, 4}, 0.7);
  Tensor<double> pos = randn(rng, {4, 4}, 0.7);
  const Tensor<double> probe = randn(rng, {4, 4});

  auto eval = [&]() {
    Tape<double> tape;
    ps.stage(tape);
    VarId out = layer(tape, ps, tape.leaf(x, false), tape.leaf(pos, false));
    return tape.val(tape.weighted_sum_const(out, probe))[0];
  };
  Tape<double> tape;
  ps.stage(tape);
  VarId xin = tape.leaf(x, true);
  VarId out = layer(tape, ps, xin, tape.leaf(pos, false));
  tape.backward(tape.weighted_sum_const(out, probe));

  double worst = fd_check_tensor(x, tape.grad(xin), eval);
  for (auto& e : ps.entries()) {
    const Tensor<double>& g = tape.grad(e.node);
    REQUIRE_FALSE(g.empty());
    worst = std::max(worst, fd_check_tensor(e.value, g, eval));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("per-pixel embedding upsampling", "[pixel_decoder]") {
  Rng rng(37);
  SECTION("shape: (C,8,8) -> (C,32,32)") {
    PyramidFixture fix(4, 0, 8, rng);
    Tape<double> tape;
    fix.ps.stage(tape);
    VarId d1 = tape.leaf(randn(rng, {4, 8, 8}), false);
    VarId e = fix.pd.per_pixel_embed(tape, fix.ps, d1, 32, 32);
    CHECK(tape.val(e).shape() == Shape{4, 32, 32});
  }
  SECTION("crop to original size") {
    PyramidFixture fix(4, 0, 8, rng);
    Tape<double> tape;
    fix.ps.stage(tape);
    VarId d1 = tape.leaf(randn(rng, {4, 8, 8}), false);
    VarId e = fix.pd.per_pixel_embed(tape, fix.ps, d1, 29, 27);
    CHECK(tape.val(e).shape() == Shape{4, 29, 27});
  }
  SECTION("constant D1 with identity convs stays spatially constant") {
    PyramidFixture fix(4, 0, 8, rng);
    set_conv_identity(fix.ps.value(fix.pd.up_conv1.w));
    fix.ps.value(fix.pd.up_conv1.b).zero();
    set_conv_identity(fix.ps.value(fix.pd.up_conv2.w));
    fix.ps.value(fix.pd.up_conv2.b).zero();
    set_conv_identity(fix.ps.value(fix.pd.out_proj.w));
    fix.ps.value(fix.pd.out_proj.b).zero();
    Tape<double> tape;
    fix.ps.stage(tape);
    VarId d1 = tape.leaf(Tensor<double>::full({4, 8, 8}, 0.7), false);
    VarId e = fix.pd.per_pixel_embed(tape, fix.ps, d1, 32, 32);
    const Tensor<double>& v = tape.val(e);
    for (std::int64_t c = 0; c < 4; ++c)
      for (std::int64_t i = 1; i < 32 * 32; ++i) CHECK(v[c * 32 * 32 + i] == v[c * 32 * 32]);
  }
  SECTION("gradients match finite differences") {
    PyramidFixture fix(4, 0, 4, rng);
    Tensor<double> d1v = randn(rng, {4, 4, 4}, 0.5);
    const Tensor<double> probe = randn(rng, {4, 16, 16});
    auto eval = [&]() {
      Tape<double> tape;
      fix.ps.stage(tape);
      VarId e = fix.pd.per_pixel_embed(tape, fix.ps, tape.leaf(d1v, false), 16, 16);
      return tape.val(tape.weighted_sum_const(e, probe))[0];
    };
    Tape<double> tape;
    fix.ps.stage(tape);
    VarId din = tape.leaf(d1v, true);
    VarId e = fix.pd.per_pixel_embed(tape, fix.ps, din, 16, 16);
    tape.backward(tape.weighted_sum_const(e, probe));
    double worst = fd_check_tensor(d1v, tape.grad(din), eval);
    for (int h : {fix.pd.up_conv1.w, fix.pd.up_conv1.b, fix.pd.up_conv2.w, fix.pd.up_conv2.b,
                  fix.pd.out_proj.w, fix.pd.out_proj.b})
      worst = std::max(worst, fd_check_tensor(fix.ps.value(h), tape.grad(fix.ps.node(h)), eval));
    CHECK(worst < 1e-4);
  }
}

// ------------------------------------------------------------ mask decoder --

namespace {

struct DecoderFixture {
  ParamStore<double> ps;
  MaskDecoder<double> md;
  DecoderFixture(std::int64_t c_e, int heads, int queries, int rounds, Act act = Act::relu) {
    Rng rng(41);
    md = MaskDecoder<double>(ps, rng, c_e, heads, queries, rounds, 2, c_e * 2, act);
  }
  void identity_mlp() {
    for (int h : {md.mask_mlp1.w, md.mask_mlp2.w, md.mask_mlp3.w}) set_identity(ps.value(h));
    for (int h : {md.mask_mlp1.b, md.mask_mlp2.b, md.mask_mlp3.b}) ps.value(h).zero();
  }
};

}  // namespace

TEST_CASE("mask prediction against pixel embeddings", "[mask_decoder]") {
  SECTION("one-hot pixel embedding picks out a channel") {
    DecoderFixture fix(3, 1, 2, 0);
    fix.identity_mlp();
    Tensor<double> e({3, 2, 2});
    e.at3(0, 0, 0) = 1;
    e.at3(1, 0, 1) = 1;
    e.at3(2, 1, 0) = 1;
    e.at3(1, 1, 1) = 1;
    Tensor<double> q({2, 3}, {0, 1, 0, 0, 0, 1});  // basis vectors e_1, e_2
    Tape<double> tape;
    fix.ps.stage(tape);
    VarId logits = fix.md.predict_masks(tape, fix.ps, tape.leaf(q, false), tape.leaf(e, false));
    const Tensor<double>& v = tape.val(logits);
    for (std::int64_t y = 0; y < 2; ++y)
      for (std::int64_t x = 0; x < 2; ++x) {
        CHECK(v.at3(0, y, x) == e.at3(1, y, x));
        CHECK(v.at3(1, y, x) == e.at3(2, y, x));
      }
  }
  SECTION("zero query gives logits 0 and probability one half") {
    DecoderFixture fix(3, 1, 1, 0);
    Tensor<double> q({1, 3});
    Rng rng(43);
    Tape<double> tape;
    fix.ps.stage(tape);
    VarId logits = fix.md.predict_masks(tape, fix.ps, tape.leaf(q, false),
                                        tape.leaf(randn(rng, {3, 2, 2}), false));
    VarId probs = tape.sigmoid(logits);
    for (std::int64_t i = 0; i < 4; ++i) {
      CHECK(tape.val(logits)[i] == 0.0);
      CHECK(tape.val(probs)[i] == 0.5);
    }
  }
  SECTION("random non-negative queries match the scalar dot oracle") {
    DecoderFixture fix(3, 1, 2, 0);
    fix.identity_mlp();
    Rng rng(47);
    Tensor<double> q({2, 3});
    for (std::int64_t i = 0; i < q.numel(); ++i) q[i] = rng.uniform();
    Tensor<double> e = randn(rng, {3, 2, 2});
    Tape<double> tape;
    fix.ps.stage(tape);
    VarId logits = fix.md.predict_masks(tape, fix.ps, tape.leaf(q, false), tape.leaf(e, false));
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t y = 0; y < 2; ++y)
        for (std::int64_t x = 0; x < 2; ++x) {
          double expect = 0;
          for (std::int64_t c = 0; c < 3; ++c) expect += q.at2(n, c) * e.at3(c, y, x);
          CHECK(tape.val(logits).at3(n, y, x) == Catch::Approx(expect).margin(1e-12));
        }
  }
}

TEST_CASE("attention bias semantics", "[mask_decoder]") {
  const double ninf = -std::numeric_limits<double>::infinity();
  SECTION("probabilities >= 0.5 leave everything open") {
    Tensor<double> logits = Tensor<double>::full({2, 2, 2}, 3.0);
    auto bias = MaskDecoder<double>::attention_bias(logits, {2, 2});
    for (std::int64_t i = 0; i < bias.numel(); ++i) CHECK(bias[i] == 0.0);
  }
  SECTION("all below 0.5 falls back to unmasked") {
    Tensor<double> logits = Tensor<double>::full({1, 2, 2}, -3.0);
    std::vector<bool> disabled;
    auto bias = MaskDecoder<double>::attention_bias(logits, {2, 2}, &disabled);
    for (std::int64_t i = 0; i < bias.numel(); ++i) CHECK(bias[i] == 0.0);
    CHECK(disabled[0]);
  }
  SECTION("mixed logits threshold per position") {
    Tensor<double> logits({1, 1, 2}, {4.0, -4.0});
    auto bias = MaskDecoder<double>::attention_bias(logits, {1, 2});
    CHECK(bias.at2(0, 0) == 0.0);
    CHECK(bias.at2(0, 1) == ninf);
  }
}

TEST_CASE("masked cross-attention semantics", "[mask_decoder]") {
  Rng rng(53);
  ParamStore<double> ps;
  DecoderLayer<double> layer(ps, rng, "dec", 4, 2, 8, Act::gelu);
  Tensor<double> q = randn(rng, {2, 4}, 0.6);
  Tensor<double> qpos = randn(rng, {2, 4}, 0.6);
  Tensor<double> d = randn(rng, {6, 4}, 0.6);
  Tensor<double> dpos = randn(rng, {6, 4}, 0.6);

  auto run = [&](const Tensor<double>& bias, DecoderStepTrace<double>* trace) {
    Tape<double> tape;
    ps.stage(tape);
    VarId out = layer(tape, ps, tape.leaf(q, false), tape.leaf(qpos, false), tape.leaf(d, false),
                      tape.leaf(dpos, false), bias, trace);
    return tape.val(out);
  };

  SECTION("open mask equals the zero-bias computation bit-for-bit") {
    Tensor<double> open = Tensor<double>::full({2, 6}, 0.0);
    Tensor<double> logits_high = Tensor<double>::full({2, 3, 2}, 5.0);
    Tensor<double> from_mask = MaskDecoder<double>::attention_bias(logits_high, {3, 2});
    CHECK(run(open, nullptr).vec() == run(from_mask, nullptr).vec());
    Tensor<double> logits_low = Tensor<double>::full({2, 3, 2}, -5.0);
    Tensor<double> fallback = MaskDecoder<double>::attention_bias(logits_low, {3, 2});
    CHECK(run(open, nullptr).vec() == run(fallback, nullptr).vec());
  }
  SECTION("single open position receives weight exactly 1") {
    Tensor<double> bias = Tensor<double>::full({2, 6}, -std::numeric_limits<double>::infinity());
    bias.at2(0, 2) = 0.0;
    bias.at2(1, 4) = 0.0;
    DecoderStepTrace<double> trace;
    run(bias, &trace);
    for (const auto& w : trace.cross_weights) {
      CHECK(w.at2(0, 2) == 1.0);
      CHECK(w.at2(1, 4) == 1.0);
      for (std::int64_t j = 0; j < 6; ++j) {
        if (j != 2) CHECK(w.at2(0, j) == 0.0);
        if (j != 4) CHECK(w.at2(1, j) == 0.0);
      }
    }
  }
  SECTION("masked weights are exactly zero, open rows sum to 1") {
    Tensor<double> bias({2, 6});
    const double ninf = -std::numeric_limits<double>::infinity();
    bias.fill(0.0);
    bias.at2(0, 1) = ninf;
    bias.at2(0, 3) = ninf;
    bias.at2(1, 0) = ninf;
    DecoderStepTrace<double> trace;
    run(bias, &trace);
    for (const auto& w : trace.cross_weights) {
      CHECK(w.at2(0, 1) == 0.0);
      CHECK(w.at2(0, 3) == 0.0);
      CHECK(w.at2(1, 0) == 0.0);
      for (std::int64_t r = 0; r < 2; ++r) {
        double sum = 0;
        for (std::int64_t j = 0; j < 6; ++j) sum += w.at2(r, j);
        CHECK(std::abs(sum - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("decoder step gradients match finite differences", "[mask_decoder]") {
  Rng rng(59);
  ParamStore<double> ps;
  DecoderLayer<double> layer(ps, rng, "dec", 4, 2, 8, Act::gelu);
  ParamStore<double> ps_md;
  MaskDecoder<double> md(ps_md, rng, 4, 2, 2, 0, 2, 8, Act::gelu);

  Tensor<double> q = randn(rng, {2, 4}, 0.5);
  Tensor<double> qpos = randn(rng, {2, 4}, 0.5);
  Tensor<double> d = randn(rng, {4, 4}, 0.5);
  Tensor<double> dpos = randn(rng, {4, 4}, 0.5);
  Tensor<double> epix = randn(rng, {4, 2, 2}, 0.5);
  // mask logits well away from the 0.5 probability threshold
  Tensor<double> prev({2, 2, 2}, {2.0, -2.0, 1.5, -1.5, -2.5, 2.5, 1.0, 3.0});
  const Tensor<double> bias = MaskDecoder<double>::attention_bias(prev, {2, 2});
  const Tensor<double> probe1 = randn(rng, {2, 4});
  const Tensor<double> probe2 = randn(rng, {2, 2, 2});

  auto build = [&](Tape<double>& tape, VarId qin, VarId din, VarId ein) {
    ps.stage(tape);
    ps_md.stage(tape);
    VarId qn = layer(tape, ps, qin, tape.leaf(qpos, false), din, tape.leaf(dpos, false), bias);
    VarId masks = md.predict_masks(tape, ps_md, qn, ein);
    return tape.weighted_sum_scalars({tape.weighted_sum_const(qn, probe1),
                                      tape.weighted_sum_const(tape.sigmoid(masks), probe2)},
                                     {1.0, 1.0});
  };
  auto eval = [&]() {
    Tape<double> tape;
    VarId qin = tape.leaf(q, false);
    VarId din = tape.leaf(d, false);
    VarId ein = tape.leaf(epix, false);
    return tape.val(build(tape, qin, din, ein))[0];
  };

  Tape<double> tape;
  VarId qin = tape.leaf(q, true);
  VarId din = tape.leaf(d, true);
  VarId ein = tape.leaf(epix, true);
  tape.backward(build(tape, qin, din, ein));

  double worst = fd_check_tensor(q, tape.grad(qin), eval);
  worst = std::max(worst, fd_check_tensor(d, tape.grad(din), eval));
  worst = std::max(worst, fd_check_tensor(epix, tape.grad(ein), eval));
  for (auto& e : ps.entries())
    worst = std::max(worst, fd_check_tensor(e.value, tape.grad(e.node), eval));
  for (int h : {md.mask_mlp1.w, md.mask_mlp1.b, md.mask_mlp2.w, md.mask_mlp2.b, md.mask_mlp3.w,
                md.mask_mlp3.b})
    worst = std::max(worst, fd_check_tensor(ps_md.value(h), tape.grad(ps_md.node(h)), eval));
  CHECK(worst < 1e-4);
}

TEST_CASE("full decode bookkeeping and equivariance", "[mask_decoder]") {
  Rng rng(61);
  ModelConfig cfg = tiny_config();
  SolarFormer<double> model(cfg, 7);
  Tensor<double> img(Shape{3, 32, 32});
  for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform();

  SECTION("per-step mask list has length 4R+1") {
    for (int rounds : {0, 1, 2}) {
      ModelConfig c2 = cfg;
      c2.decoder_rounds = rounds;
      SolarFormer<double> m(c2, 7);
      Tape<double> tape;
      m.stage(tape);
      auto fwd = m.forward(tape, img);
      CHECK(fwd.decode.step_mask_logits.size() == static_cast<std::size_t>(4 * rounds + 1));
      if (rounds == 0)
        CHECK(fwd.decode.final_mask_logits().idx == fwd.decode.step_mask_logits.front().idx);
    }
  }
  SECTION("permuting queries permutes masks and class logits") {
    const std::vector<std::int64_t> perm{2, 0, 1};
    SolarFormer<double> permuted(cfg, 7);
    for (std::size_t i = 0; i < model.params.count(); ++i)
      permuted.params.entries()[i].value = model.params.entries()[i].value;
    for (int h : {model.mask_decoder.query_feat, model.mask_decoder.query_pos}) {
      const Tensor<double>& src = model.params.value(h);
      Tensor<double>& dst = permuted.params.value(h);
      for (std::int64_t r = 0; r < 3; ++r)
        for (std::int64_t c = 0; c < src.dim(1); ++c)
          dst.at2(r, c) = src.at2(perm[static_cast<std::size_t>(r)], c);
    }
    Tape<double> ta, tb;
    model.stage(ta);
    permuted.stage(tb);
    auto fa = model.forward(ta, img);
    auto fb = permuted.forward(tb, img);
    const Tensor<double>& ma = ta.val(fa.decode.final_mask_logits());
    const Tensor<double>& mb = tb.val(fb.decode.final_mask_logits());
    const std::int64_t hw = ma.dim(1) * ma.dim(2);
    for (std::int64_t r = 0; r < 3; ++r)
      for (std::int64_t p = 0; p < hw; ++p)
        CHECK(mb[r * hw + p] ==
              Catch::Approx(ma[perm[static_cast<std::size_t>(r)] * hw + p]).margin(1e-9));
    const Tensor<double>& ca = ta.val(fa.decode.class_logits);
    const Tensor<double>& cb = tb.val(fb.decode.class_logits);
    for (std::int64_t r = 0; r < 3; ++r)
      for (std::int64_t c = 0; c < ca.dim(1); ++c)
        CHECK(cb.at2(r, c) ==
              Catch::Approx(ca.at2(perm[static_cast<std::size_t>(r)], c)).margin(1e-9));
  }
}

TEST_CASE("semantic inference aggregates class-weighted masks", "[mask_decoder]") {
  SECTION("single certain PV query covers everything") {
    Tensor<double> masks = Tensor<double>::full({1, 2, 2}, 50.0);
    Tensor<double> classes({1, 3}, {50.0, 0.0, 0.0});
    auto res = semantic_inference(masks, classes, 0);
    for (auto v : res.mask.data) CHECK(v == 1);
    for (std::int64_t i = 0; i < 4; ++i) CHECK(res.pv_prob[i] > 0.99);
  }
  SECTION("all queries certain no-object give background") {
    Tensor<double> masks = Tensor<double>::full({2, 2, 2}, 50.0);
    Tensor<double> classes({2, 3}, {0.0, 0.0, 50.0, 0.0, 0.0, 50.0});
    auto res = semantic_inference(masks, classes, 0);
    for (auto v : res.mask.data) CHECK(v == 0);
  }
  SECTION("N=2 hand values match the scalar formula") {
    Tensor<double> masks({2, 1, 2}, {0.3, -0.7, 1.2, 0.4});
    Tensor<double> classes({2, 3}, {0.6, -0.1, 0.2, -0.3, 0.8, 0.1});
    auto res = semantic_inference(masks, classes, 0);
    for (std::int64_t p = 0; p < 2; ++p) {
      double expect = 0;
      for (std::int64_t q = 0; q < 2; ++q) {
        double mx = std::max({classes.at2(q, 0), classes.at2(q, 1), classes.at2(q, 2)});
        double den = 0;
        for (int c = 0; c < 3; ++c) den += std::exp(classes.at2(q, c) - mx);
        const double pq = std::exp(classes.at2(q, 0) - mx) / den;
        expect += pq / (1.0 + std::exp(-masks[q * 2 + p]));
      }
      expect = std::min(expect, 1.0);
      CHECK(res.pv_prob[p] == Catch::Approx(expect).margin(1e-12));
    }
  }
}

TEST_CASE("shape pipeline end to end", "[mask_decoder][pixel_decoder][backbone]") {
  ModelConfig cfg = tiny_config();
  SolarFormer<double> model(cfg, 11);
  Rng rng(67);

  SECTION("64x64 input: K=340, E_pixel and M_final at full resolution") {
    Tensor<double> img(Shape{3, 64, 64});
    for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform();
    Tape<double> tape;
    model.stage(tape);
    auto fwd = model.forward(tape, img);
    CHECK(fwd.tokens.k() == 340);
    CHECK(tape.val(fwd.e_pixel).shape() == Shape{4, 64, 64});
    CHECK(tape.val(fwd.decode.final_mask_logits()).shape() == Shape{3, 64, 64});
    CHECK(tape.val(fwd.decode.class_logits).shape() == Shape{3, 3});
  }
  SECTION("100x100 input pads to 128 and crops back") {
    Tensor<double> img(Shape{3, 100, 100});
    for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform();
    Tape<double> tape;
    model.stage(tape);
    auto fwd = model.forward(tape, img);
    CHECK(tape.val(fwd.pyramid.f1).dim(1) == 32);  // 128/4
    CHECK(tape.val(fwd.e_pixel).shape() == Shape{4, 100, 100});
    CHECK(tape.val(fwd.decode.final_mask_logits()).shape() == Shape{3, 100, 100});
  }
}
