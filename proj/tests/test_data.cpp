#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

#include "oracles.hpp"
#include "tds/data.hpp"
#include "tds/network.hpp"
#include "tds/ops.hpp"
#include "tds/train.hpp"

using namespace tds;
namespace op = tds::ops;

TEST_CASE("gen_clip determinism and geometry") {
  DatasetSpec spec;
  VideoClip a = gen_clip(2, 99, spec);
  VideoClip b = gen_clip(2, 99, spec);
  CHECK(a.frames.shape() == Shape{3, 16, 32, 32});
  CHECK(std::memcmp(a.frames.values().data(), b.frames.values().data(),
                    sizeof(double) * a.frames.numel()) == 0);
  CHECK(a.id == b.id);

  VideoClip c = gen_clip(2, 100, spec);
  CHECK(oracle::max_abs_diff(a.frames.values(), c.frames.values()) > 0.0);
  for (double v : a.frames.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("static class produces identical frames") {
  DatasetSpec spec;
  spec.classes = 5;
  spec.include_static = true;
  VideoClip clip = gen_clip(4, 7, spec);
  const auto& v = clip.frames.values();
  for (int c = 0; c < 3; ++c)
    for (int f = 1; f < 16; ++f)
      for (int i = 0; i < 32 * 32; ++i)
        CHECK(v[(c * 16 + f) * 1024 + i] == v[(c * 16 + 0) * 1024 + i]);
}

TEST_CASE("frame differences are nonzero exactly on the moving silhouette") {
  DatasetSpec spec;
  ClipMotion motion;
  VideoClip clip = gen_clip(0, 5, spec, &motion);  // drifting right
  REQUIRE(motion.dx != 0);

  Tensor win = local_window(clip.frames, 4, 1);  // frames 3,4,5
  Tensor d = frame_differences(win);             // diffs 4-3 and 5-4

  // mask oracle: union of sprite footprints in the two consecutive frames
  auto sprite_mask = [&](int frame, std::set<int>& cells) {
    const int ox = motion.start_x + frame * motion.dx;
    const int oy = motion.start_y + frame * motion.dy;
    for (int i = 0; i < spec.sprite; ++i)
      for (int j = 0; j < spec.sprite; ++j)
        cells.insert(((oy + i) % 32 + 32) % 32 * 32 + ((ox + j) % 32 + 32) % 32);
  };
  for (int pair = 0; pair < 2; ++pair) {
    std::set<int> mask;
    sprite_mask(3 + pair, mask);
    sprite_mask(4 + pair, mask);
    for (int c = 0; c < 3; ++c) {
      for (int cell = 0; cell < 1024; ++cell) {
        const double v = d.values()[(pair * 3 + c) * 1024 + cell];
        if (!mask.count(cell)) CHECK(v == 0.0);
      }
    }
    // and somewhere on the silhouette something moved
    double moved = 0.0;
    for (int c = 0; c < 3; ++c)
      for (int cell : mask) moved += std::abs(d.values()[(pair * 3 + c) * 1024 + cell]);
    CHECK(moved > 0.0);
  }
}

TEST_CASE("hflip swaps left/right labels and mirrors pixels") {
  DatasetSpec spec;
  CHECK(spec.hflip_label(0) == 1);
  CHECK(spec.hflip_label(1) == 0);
  CHECK(spec.hflip_label(2) == 2);
  CHECK(spec.hflip_label(3) == 3);

  VideoClip clip = gen_clip(0, 11, spec);
  VideoClip flip = hflip_clip(clip, spec);
  CHECK(flip.label == 1);
  VideoClip twice = hflip_clip(flip, spec);
  CHECK(twice.label == 0);
  CHECK(oracle::max_abs_diff(twice.frames.values(), clip.frames.values()) == 0.0);
  CHECK(flip.frames.values()[0] == clip.frames.values()[31]);
}

TEST_CASE("sparse_sample") {
  SUBCASE("segment centres for 16 over 8") {
    CHECK(sparse_sample(16, 8, false, 0) == std::vector<int>{1, 3, 5, 7, 9, 11, 13, 15});
  }
  SUBCASE("identity when T equals T_raw") {
    CHECK(sparse_sample(5, 5, false, 0) == std::vector<int>{0, 1, 2, 3, 4});
  }
  SUBCASE("jittered indices stay inside their segments and increase") {
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const auto idx = sparse_sample(23, 7, true, seed);
      int prev = -1;
      for (int i = 0; i < 7; ++i) {
        const int lo = (i * 23) / 7, hi = ((i + 1) * 23) / 7;
        CHECK(idx[i] >= lo);
        CHECK(idx[i] < hi);
        CHECK(idx[i] > prev);
        prev = idx[i];
      }
    }
  }
  CHECK_THROWS_AS(sparse_sample(4, 5, false, 0), std::invalid_argument);
}

TEST_CASE("dataset file round-trip") {
  DatasetSpec spec;
  spec.raw_frames = 4;
  spec.height = 8;
  spec.width = 8;
  spec.sprite = 3;
  auto clips = make_dataset(spec, 2, 31);
  const std::string path = "/tmp/tds_data_test.bin";
  write_dataset(path, clips);
  auto back = read_dataset(path);
  REQUIRE(back.size() == clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    CHECK(back[i].id == clips[i].id);
    CHECK(back[i].label == clips[i].label);
    CHECK(back[i].frames.shape() == clips[i].frames.shape());
    CHECK(std::memcmp(back[i].frames.values().data(), clips[i].frames.values().data(),
                      sizeof(double) * clips[i].frames.numel()) == 0);
  }

  SUBCASE("empty dataset is a valid file") {
    write_dataset(path, {});
    CHECK(read_dataset(path).empty());
  }
  SUBCASE("corrupted magic is reported") {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(0);
    f.put('Z');
    f.close();
    CHECK_THROWS_WITH_AS(read_dataset(path), doctest::Contains("magic"), std::runtime_error);
  }
  SUBCASE("truncation is reported") {
    write_dataset(path, clips);
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    CHECK_THROWS_WITH_AS(read_dataset(path), doctest::Contains("truncated"),
                         std::runtime_error);
  }
  std::remove(path.c_str());
}

TEST_CASE("single frames carry no label signal: frame-0 probe stays near chance") {
  DatasetSpec spec;
  auto train_clips = make_dataset(spec, 32, 404);
  auto val_clips = make_dataset(spec, 32, 505);

  // multinomial logistic regression on the flattened first frame
  const int d = 3 * 32 * 32;
  Tensor w = Tensor::from_data({d, 4}, std::vector<double>(static_cast<std::size_t>(d) * 4, 0.0));
  w.set_requires_grad(true);
  Tensor b = Tensor::zeros({4});
  b.set_requires_grad(true);

  auto frame0 = [&](const VideoClip& clip) {
    return op::reshape(op::slice(clip.frames.detach(), 1, 0, 1), {1, d});
  };
  std::vector<Tensor> params = {w, b};
  AdamState state = make_adam_state(params);
  for (int epoch = 0; epoch < 40; ++epoch) {
    GradientMap total;
    std::vector<double> acc_w(static_cast<std::size_t>(d) * 4, 0.0);
    std::vector<double> acc_b(4, 0.0);
    for (const VideoClip& clip : train_clips) {
      Tensor logits = op::reshape(op::add(op::matmul(frame0(clip), w), b), {4});
      GradientMap g = backward(op::cross_entropy_ls(logits, clip.label, 0.0));
      const auto& gw = g.at(w).values();
      const auto& gb = g.at(b).values();
      for (std::size_t i = 0; i < acc_w.size(); ++i) acc_w[i] += gw[i];
      for (std::size_t i = 0; i < acc_b.size(); ++i) acc_b[i] += gb[i];
    }
    const double inv = 1.0 / static_cast<double>(train_clips.size());
    for (double& v : acc_w) v *= inv;
    for (double& v : acc_b) v *= inv;
    total.grads.emplace(w.id(), Tensor::from_data({d, 4}, std::move(acc_w)));
    total.grads.emplace(b.id(), Tensor::from_data({4}, std::move(acc_b)));
    adamw_step(params, total, state, 0.05, 0.0, 0.9, 0.999);
  }

  int train_hits = 0, val_hits = 0;
  NoGradGuard no_grad;
  auto predict = [&](const VideoClip& clip) {
    Tensor logits = op::reshape(op::add(op::matmul(frame0(clip), w), b), {4});
    int best = 0;
    for (int i = 1; i < 4; ++i)
      if (logits.values()[i] > logits.values()[best]) best = i;
    return best;
  };
  for (const VideoClip& clip : train_clips) train_hits += predict(clip) == clip.label;
  for (const VideoClip& clip : val_clips) val_hits += predict(clip) == clip.label;
  const double val_acc = 100.0 * val_hits / static_cast<double>(val_clips.size());
  INFO("train fit ", train_hits, "/", train_clips.size(), " val ", val_acc, "%");
  CHECK(val_acc <= 35.0);  // chance (25%) + 10 points
}
