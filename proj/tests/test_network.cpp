#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "tds/gradcheck.hpp"
#include "tds/network.hpp"
#include "tds/ops.hpp"

using namespace tds;
namespace op = tds::ops;

namespace {

ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.frames = 2;
  cfg.height = 16;
  cfg.width = 16;
  cfg.patch = 8;
  cfg.layers = 2;
  cfg.frozen_dim = 16;
  cfg.frozen_heads = 2;
  cfg.side_dim = 8;
  cfg.side_heads = 2;
  cfg.window = 1;
  cfg.reduction = 2;
  cfg.classes = 3;
  cfg.td_layers = {true, true};
  return cfg;
}

}  // namespace

TEST_CASE("fuse_frozen") {
  Tensor side = oracle::leaf({2, 3, 4}, 1, -1.0, 1.0, false);
  Tensor frozen = oracle::leaf({2, 3, 6}, 2, -1.0, 1.0, false);
  Tensor w = oracle::leaf({6, 4}, 3);
  Tensor b = oracle::leaf({4}, 4);

  SUBCASE("zero projection is the identity on the side stream") {
    Tensor out = fuse_frozen(side, frozen, Tensor::zeros({6, 4}), Tensor::zeros({4}));
    CHECK(oracle::max_abs_diff(out.values(), side.values()) == 0.0);
  }
  SUBCASE("zero side stream leaves the projected frozen features") {
    Tensor out = fuse_frozen(Tensor::zeros({2, 3, 4}), frozen, w, b);
    for (int f = 0; f < 2; ++f)
      for (int tok = 0; tok < 3; ++tok) {
        std::vector<double> row(frozen.values().begin() + (f * 3 + tok) * 6,
                                frozen.values().begin() + (f * 3 + tok + 1) * 6);
        const auto proj = oracle::matmul(row, w.values(), 1, 6, 4);
        for (int c = 0; c < 4; ++c)
          CHECK(out.values()[(f * 3 + tok) * 4 + c] ==
                doctest::Approx(proj[c] + b.values()[c]));
      }
  }
  SUBCASE("token-wise affine oracle on a random case") {
    Tensor out = fuse_frozen(side, frozen, w, b);
    for (int f = 0; f < 2; ++f)
      for (int tok = 0; tok < 3; ++tok) {
        std::vector<double> row(frozen.values().begin() + (f * 3 + tok) * 6,
                                frozen.values().begin() + (f * 3 + tok + 1) * 6);
        const auto proj = oracle::matmul(row, w.values(), 1, 6, 4);
        for (int c = 0; c < 4; ++c)
          CHECK(out.values()[(f * 3 + tok) * 4 + c] ==
                doctest::Approx(side.values()[(f * 3 + tok) * 4 + c] + proj[c] +
                                b.values()[c]));
      }
  }
  SUBCASE("token count mismatch") {
    CHECK_THROWS_AS(fuse_frozen(side, oracle::leaf({2, 4, 6}, 5), w, b),
                    std::invalid_argument);
  }
  SUBCASE("frozen input carries no backward graph") {
    Tensor recorded = op::scale(oracle::leaf({2, 3, 6}, 6), 1.0);
    REQUIRE(recorded.node() != nullptr);
    Tensor out = fuse_frozen(side, recorded, w, b);
    GradientMap grads = backward(op::sum_all(out));
    CHECK(grads.contains(w));
    CHECK_FALSE(grads.contains(recorded));
  }
}

TEST_CASE("network_forward produces finite class logits") {
  ModelConfig cfg = micro_config();
  TdsModel model = build_model(cfg, 123);
  Tensor video = oracle::leaf({3, 4, 16, 16}, 7, 0.0, 1.0, false);
  Tensor logits = network_forward(model, video);
  CHECK(logits.shape() == Shape{3});
  for (double v : logits.values()) CHECK(std::isfinite(v));
}

TEST_CASE("paper-default knobs stay finite on random input") {
  ModelConfig cfg = tiny_config();  // alpha=beta=1, n=2, k=3, smoothing=0.1
  cfg.frames = 4;
  TdsModel model = build_model(cfg, 321);
  Tensor video = oracle::leaf({3, 8, 32, 32}, 8, 0.0, 1.0, false);
  Tensor logits = network_forward(model, video);
  for (double v : logits.values()) CHECK(std::isfinite(v));
  CHECK(std::isfinite(ls_cross_entropy(logits, 1, 0.1).item()));
}

TEST_CASE("frame-factorised ablation is invariant to frame order") {
  ModelConfig cfg = micro_config();
  cfg.sme_mode = SmeMode::Off;
  cfg.td_layers = {false, false};
  cfg.baseline_op = BaselineOp::None;
  cfg.cls_shift_enabled = false;
  TdsModel model = build_model(cfg, 55);

  Tensor video = oracle::leaf({3, 2, 16, 16}, 9, 0.0, 1.0, false);
  Tensor logits = network_forward(model, video, {0, 1});

  // swap the two frames
  std::vector<double> sw(video.numel());
  for (int c = 0; c < 3; ++c) {
    std::copy(video.values().begin() + (c * 2 + 0) * 256,
              video.values().begin() + (c * 2 + 1) * 256, sw.begin() + (c * 2 + 1) * 256);
    std::copy(video.values().begin() + (c * 2 + 1) * 256,
              video.values().begin() + (c * 2 + 2) * 256, sw.begin() + (c * 2 + 0) * 256);
  }
  Tensor logits_sw =
      network_forward(model, Tensor::from_data({3, 2, 16, 16}, std::move(sw)), {0, 1});
  CHECK(oracle::max_abs_diff(logits.values(), logits_sw.values()) < 1e-10);
}

TEST_CASE("backward reaches exactly the trainable side set") {
  ModelConfig cfg = micro_config();
  TdsModel model = build_model(cfg, 77);
  Tensor video = oracle::leaf({3, 2, 16, 16}, 10, 0.0, 1.0, false);
  Tensor loss = ls_cross_entropy(network_forward(model, video, {0, 1}), 0, 0.1);
  GradientMap grads = backward(loss);

  for (const auto& [name, p] : model.params.items()) {
    if (p.requires_grad()) {
      CHECK_MESSAGE(grads.contains(p), "missing gradient for ", name);
      CHECK(grads.at(p).shape() == p.shape());
    } else {
      CHECK_MESSAGE(!grads.contains(p), "unexpected gradient for frozen ", name);
    }
  }
}

TEST_CASE("sme_mode routing variants run and differ") {
  ModelConfig cfg = micro_config();
  Tensor video = oracle::leaf({3, 4, 16, 16}, 11, 0.0, 1.0, false);
  std::vector<SmeMode> modes = {SmeMode::Temporal, SmeMode::Spatial, SmeMode::SpatialTemporal,
                                SmeMode::Cross,    SmeMode::Additional, SmeMode::Off};
  std::vector<std::vector<double>> outs;
  for (SmeMode mode : modes) {
    cfg.sme_mode = mode;
    TdsModel model = build_model(cfg, 99);
    Tensor logits = network_forward(model, video);
    for (double v : logits.values()) CHECK(std::isfinite(v));
    outs.push_back(logits.values());
  }
  // temporal differs from off (the motion term is active)
  CHECK(oracle::max_abs_diff(outs.front(), outs.back()) > 1e-9);
}

TEST_CASE("ls_cross_entropy") {
  SUBCASE("smoothing off reduces to standard cross-entropy") {
    Tensor logits = Tensor::from_data({3}, {3.0, -1.0, 0.5});
    const double got = ls_cross_entropy(logits, 0, 0.0).item();
    CHECK(got == doctest::Approx(oracle::ce_label_smoothing(logits.values(), 0, 0.0))
                     .epsilon(1e-12));
  }
  SUBCASE("uniform logits give ln(N) for any smoothing and label") {
    for (double a : {0.0, 0.1, 0.5}) {
      for (int y = 0; y < 4; ++y) {
        Tensor logits = Tensor::full({4}, 0.77);
        CHECK(ls_cross_entropy(logits, y, a).item() ==
              doctest::Approx(std::log(4.0)).epsilon(1e-12));
      }
    }
  }
  SUBCASE("documented four-class case matches direct summation") {
    Tensor logits = Tensor::from_data({4}, {2.0, 0.0, 0.0, 0.0});
    const double got = ls_cross_entropy(logits, 0, 0.1).item();
    const double expect = oracle::ce_label_smoothing(logits.values(), 0, 0.1);
    CHECK(std::abs(got - expect) < 1e-10);
  }
  SUBCASE("shift invariance") {
    Tensor logits = oracle::leaf({5}, 12, -3.0, 3.0, false);
    std::vector<double> shifted = logits.values();
    for (double& v : shifted) v += 11.5;
    const double a = ls_cross_entropy(logits, 3, 0.1).item();
    const double b = ls_cross_entropy(Tensor::from_data({5}, std::move(shifted)), 3, 0.1).item();
    CHECK(std::abs(a - b) < 1e-10);
  }
  SUBCASE("label range enforced") {
    Tensor logits = Tensor::zeros({4});
    CHECK_THROWS_AS(ls_cross_entropy(logits, 4, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(ls_cross_entropy(logits, -1, 0.1), std::invalid_argument);
  }
}

TEST_CASE("full micro network passes a sampled gradient check") {
  ModelConfig cfg = micro_config();
  TdsModel model = build_model(cfg, 2024);
  Tensor video = oracle::leaf({3, 2, 16, 16}, 13, 0.05, 0.95, false);
  // nudge away from any exact pooling ties
  {
    auto& v = const_cast<std::vector<double>&>(video.values());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += 1e-7 * static_cast<double>(i % 101);
  }

  auto fn = [&] {
    return ls_cross_entropy(network_forward(model, video, {0, 1}), 1,
                            cfg.label_smoothing);
  };
  GradCheckOptions opts;
  opts.eps = 1e-4;
  opts.max_samples_per_param = 3;
  opts.sample_seed = 9;
  CHECK(grad_check(fn, model.params.trainable(), opts) < 1e-4);
}

TEST_CASE("model config file round-trip and rejection") {
  ModelConfig cfg = tiny_config();
  cfg.side_dim = 48;
  cfg.side_heads = 6;
  cfg.td_layers = {true, false, true, false};
  cfg.sme_mode = SmeMode::Cross;
  const std::string text = serialize_model_config(cfg);
  ModelConfig back = parse_model_config(text);
  CHECK(back.side_dim == 48);
  CHECK(back.td_layers == std::vector<bool>{true, false, true, false});
  CHECK(back.sme_mode == SmeMode::Cross);
  CHECK(serialize_model_config(back) == text);

  CHECK_THROWS_WITH_AS(parse_model_config("bogus_key=3\n"), doctest::Contains("unknown key"),
                       std::invalid_argument);
  CHECK_THROWS_AS(parse_model_config("layers=0\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_model_config("frames\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_model_config("td_layers=10\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_model_config("sme_mode=bogus\n"), std::invalid_argument);

  ModelConfig commented = parse_model_config("# comment only\nside_dim=16 # inline\n");
  CHECK(commented.side_dim == 16);
}

TEST_CASE("mutually inconsistent config invariants are rejected") {
  ModelConfig cfg = tiny_config();
  cfg.label_smoothing = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.td_layers = {true};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.pool_kernel = 2;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.side_dim = 30;  // not divisible by heads=4
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
