#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "tds/ops.hpp"
#include "tds/vit.hpp"

using namespace tds;
namespace op = tds::ops;

namespace {

// Independent attention-half oracle: LN, QKV, softmax(QK^T/sqrt(d))V, output
// projection, residual. Plain loops, single frame.
std::vector<double> attention_oracle(const std::vector<double>& x, int s, int c, int heads,
                                     const VitBlockParams& p) {
  const int dh = c / heads;
  // layer norm
  std::vector<double> ln(static_cast<std::size_t>(s) * c);
  for (int i = 0; i < s; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < c; ++j) mean += x[i * c + j];
    mean /= c;
    for (int j = 0; j < c; ++j) var += (x[i * c + j] - mean) * (x[i * c + j] - mean);
    var /= c;
    const double rstd = 1.0 / std::sqrt(var + 1e-5);
    for (int j = 0; j < c; ++j) {
      ln[i * c + j] = (x[i * c + j] - mean) * rstd * p.ln1_gamma.values()[j] +
                      p.ln1_beta.values()[j];
    }
  }
  // qkv
  std::vector<double> q(static_cast<std::size_t>(s) * c), k(q.size()), v(q.size());
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < 3 * c; ++j) {
      double acc = p.qkv_b.values()[j];
      for (int kk = 0; kk < c; ++kk) acc += ln[i * c + kk] * p.qkv_w.values()[kk * 3 * c + j];
      if (j < c) q[i * c + j] = acc;
      else if (j < 2 * c) k[i * c + (j - c)] = acc;
      else v[i * c + (j - 2 * c)] = acc;
    }
  }
  // attention per head
  std::vector<double> ctx(static_cast<std::size_t>(s) * c, 0.0);
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < s; ++i) {
      std::vector<double> scores(static_cast<std::size_t>(s));
      for (int j = 0; j < s; ++j) {
        double acc = 0.0;
        for (int d = 0; d < dh; ++d) acc += q[i * c + h * dh + d] * k[j * c + h * dh + d];
        scores[j] = acc / std::sqrt(static_cast<double>(dh));
      }
      double mx = scores[0];
      for (double sc : scores) mx = std::max(mx, sc);
      double denom = 0.0;
      for (double& sc : scores) {
        sc = std::exp(sc - mx);
        denom += sc;
      }
      for (int j = 0; j < s; ++j) {
        for (int d = 0; d < dh; ++d) {
          ctx[i * c + h * dh + d] += (scores[j] / denom) * v[j * c + h * dh + d];
        }
      }
    }
  }
  // output projection + residual
  std::vector<double> out(static_cast<std::size_t>(s) * c);
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < c; ++j) {
      double acc = p.proj_b.values()[j];
      for (int kk = 0; kk < c; ++kk) acc += ctx[i * c + kk] * p.proj_w.values()[kk * c + j];
      out[i * c + j] = x[i * c + j] + acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("patch_embed shape rule and zero-input bias rows") {
  Tensor w = oracle::leaf({6, 3, 8, 8}, 1);
  Tensor b = oracle::leaf({6}, 2);
  Tensor zero_frame = Tensor::zeros({3, 32, 32});
  Tensor rows = patch_embed(zero_frame, 8, w, b);
  CHECK(rows.shape() == Shape{16, 6});
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 6; ++c)
      CHECK(rows.values()[r * 6 + c] == doctest::Approx(b.values()[c]));

  CHECK_THROWS_AS(patch_embed(Tensor::zeros({3, 30, 32}), 8, w, b), std::invalid_argument);
}

TEST_CASE("patch_embed: single nonzero pixel touches exactly one row") {
  Tensor w = oracle::leaf({5, 3, 8, 8}, 3);
  Tensor b = oracle::leaf({5}, 4);
  std::vector<double> pix(3 * 32 * 32, 0.0);
  // patch grid position (row 1, col 2) covers y in [8,16), x in [16,24)
  const int y = 11, x = 19, ch = 1;
  pix[(ch * 32 + y) * 32 + x] = 2.5;
  Tensor frame = Tensor::from_data({3, 32, 32}, std::move(pix));
  Tensor rows = patch_embed(frame, 8, w, b);

  const int hot_row = 1 * 4 + 2;  // row-major patch order
  for (int r = 0; r < 16; ++r) {
    for (int c = 0; c < 5; ++c) {
      const double got = rows.values()[r * 5 + c];
      if (r == hot_row) {
        // direct patch-extraction oracle: w[c, ch, y%8, x%8] * value + bias
        const double expect =
            b.values()[c] + 2.5 * w.values()[((c * 3 + ch) * 8 + (y % 8)) * 8 + (x % 8)];
        CHECK(got == doctest::Approx(expect));
      } else {
        CHECK(got == doctest::Approx(b.values()[c]));
      }
    }
  }
}

TEST_CASE("build_frame_tokens composes cls, patches and positions") {
  Tensor patches = oracle::leaf({4, 3}, 5);
  Tensor cls = oracle::leaf({3}, 6);
  Tensor pos = oracle::leaf({5, 3}, 7);

  SUBCASE("zero positions give vertical concatenation") {
    Tensor out = build_frame_tokens(patches, cls, Tensor::zeros({5, 3}));
    for (int c = 0; c < 3; ++c) CHECK(out.values()[c] == cls.values()[c]);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 3; ++c)
        CHECK(out.values()[(r + 1) * 3 + c] == patches.values()[r * 3 + c]);
  }
  SUBCASE("zero content leaves positions") {
    Tensor out = build_frame_tokens(Tensor::zeros({4, 3}), Tensor::zeros({3}), pos);
    CHECK(oracle::max_abs_diff(out.values(), pos.values()) == 0.0);
  }
  SUBCASE("random case, element-wise") {
    Tensor out = build_frame_tokens(patches, cls, pos);
    for (int c = 0; c < 3; ++c)
      CHECK(out.values()[c] == doctest::Approx(cls.values()[c] + pos.values()[c]));
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 3; ++c)
        CHECK(out.values()[(r + 1) * 3 + c] ==
              doctest::Approx(patches.values()[r * 3 + c] + pos.values()[(r + 1) * 3 + c]));
  }
  SUBCASE("shape mismatch rejected") {
    CHECK_THROWS_AS(build_frame_tokens(patches, cls, Tensor::zeros({4, 3})),
                    std::invalid_argument);
  }
}

TEST_CASE("vit block with zero output projections is the identity") {
  ParamSet params;
  VitBlockParams block = make_vit_block(params, "b", 8, 2, true, 42);
  for (double& v : block.proj_w.mutable_values()) v = 0.0;
  for (double& v : block.fc2_w.mutable_values()) v = 0.0;
  Tensor x = oracle::leaf({2, 5, 8}, 8);
  Tensor y = vit_block_forward(x, block);
  CHECK(oracle::max_abs_diff(y.values(), x.values()) < 1e-15);
}

TEST_CASE("self-attention is permutation equivariant") {
  ParamSet params;
  VitBlockParams block = make_vit_block(params, "b", 8, 2, true, 43);
  Tensor x = oracle::leaf({1, 6, 8}, 9);
  Tensor y = vit_block_forward(x, block);

  // swap token rows 1 and 4 of the input
  std::vector<double> shuffled = x.values();
  for (int c = 0; c < 8; ++c) std::swap(shuffled[1 * 8 + c], shuffled[4 * 8 + c]);
  Tensor y2 = vit_block_forward(Tensor::from_data({1, 6, 8}, std::move(shuffled)), block);

  std::vector<double> expect = y.values();
  for (int c = 0; c < 8; ++c) std::swap(expect[1 * 8 + c], expect[4 * 8 + c]);
  CHECK(oracle::max_abs_diff(y2.values(), expect) < 1e-12);
}

TEST_CASE("attention half matches the hand-rolled oracle") {
  ParamSet params;
  const int c = 4, heads = 2, s = 2;
  VitBlockParams block = make_vit_block(params, "b", c, heads, true, 44);
  Tensor x = oracle::leaf({1, s, c}, 10);
  Tensor y = vit_block_attention(x, block);
  const auto expect = attention_oracle(x.values(), s, c, heads, block);
  CHECK(oracle::max_abs_diff(y.values(), expect) < 1e-12);

  // and on a larger case
  ParamSet params2;
  VitBlockParams block2 = make_vit_block(params2, "b", 8, 4, true, 45);
  Tensor x2 = oracle::leaf({1, 5, 8}, 11);
  const auto expect2 = attention_oracle(x2.values(), 5, 8, 4, block2);
  CHECK(oracle::max_abs_diff(vit_block_attention(x2, block2).values(), expect2) < 1e-12);
}

TEST_CASE("frozen encoder emits every layer and is frame-factorised") {
  ParamSet params;
  FrozenEncoder enc = make_frozen_encoder(params, 16, 16, 8, 12, 4, 2, 77);
  CHECK(params.trainable_count() == 0);

  Tensor video = oracle::leaf({3, 3, 16, 16}, 12, 0.0, 1.0, false);
  auto zs = frozen_forward(video, enc);
  REQUIRE(zs.size() == 4);
  for (const Tensor& z : zs) {
    CHECK(z.shape() == Shape{3, 5, 12});
    CHECK(z.node() == nullptr);  // nothing retained inside the frozen branch
  }

  SUBCASE("identical frames produce identical token matrices") {
    Tensor one = oracle::leaf({3, 1, 16, 16}, 13, 0.0, 1.0, false);
    std::vector<double> rep;
    for (int r = 0; r < 3; ++r) {
      for (int ch = 0; ch < 3; ++ch) {
        rep.insert(rep.end(), one.values().begin() + ch * 256,
                   one.values().begin() + (ch + 1) * 256);
      }
    }
    // build [3,3,16,16] with channel-major layout: channel ch, frame r
    std::vector<double> arranged(3 * 3 * 256);
    for (int ch = 0; ch < 3; ++ch)
      for (int r = 0; r < 3; ++r)
        std::copy(one.values().begin() + ch * 256, one.values().begin() + (ch + 1) * 256,
                  arranged.begin() + (ch * 3 + r) * 256);
    auto zs2 = frozen_forward(Tensor::from_data({3, 3, 16, 16}, std::move(arranged)), enc);
    for (const Tensor& z : zs2) {
      for (int f = 1; f < 3; ++f) {
        for (int i = 0; i < 5 * 12; ++i) {
          CHECK(z.values()[f * 60 + i] == doctest::Approx(z.values()[i]));
        }
      }
    }
  }

  SUBCASE("frame shuffle commutes with the frozen branch") {
    // reverse frame order
    std::vector<double> rev(video.numel());
    for (int ch = 0; ch < 3; ++ch)
      for (int f = 0; f < 3; ++f)
        std::copy(video.values().begin() + (ch * 3 + f) * 256,
                  video.values().begin() + (ch * 3 + f + 1) * 256,
                  rev.begin() + (ch * 3 + (2 - f)) * 256);
    auto zs_rev = frozen_forward(Tensor::from_data({3, 3, 16, 16}, std::move(rev)), enc);
    for (std::size_t l = 0; l < zs.size(); ++l) {
      for (int f = 0; f < 3; ++f) {
        for (int i = 0; i < 60; ++i) {
          CHECK(zs_rev[l].values()[(2 - f) * 60 + i] ==
                doctest::Approx(zs[l].values()[f * 60 + i]));
        }
      }
    }
  }
}
