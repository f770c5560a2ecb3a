#include <doctest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "tds/checkpoint.hpp"
#include "tds/data.hpp"
#include "tds/network.hpp"
#include "tds/ops.hpp"
#include "tds/train.hpp"

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
  cfg.classes = 4;
  cfg.td_layers = {true, true};
  return cfg;
}

DatasetSpec micro_spec() {
  DatasetSpec spec;
  spec.raw_frames = 4;
  spec.height = 16;
  spec.width = 16;
  spec.sprite = 5;
  return spec;
}

}  // namespace

TEST_CASE("adamw zero gradient leaves parameters untouched") {
  Tensor p = oracle::leaf({3}, 1);
  std::vector<Tensor> params = {p};
  AdamState state = make_adam_state(params);
  const auto before = p.values();
  GradientMap empty;
  adamw_step(params, empty, state, 0.1, 0.0, 0.9, 0.999);
  adamw_step(params, empty, state, 0.1, 0.0, 0.9, 0.999);
  CHECK(p.values() == before);
}

TEST_CASE("adamw first step on a unit scalar lands near 0.9") {
  Tensor p = Tensor::scalar(1.0);
  p.set_requires_grad(true);
  std::vector<Tensor> params = {p};
  AdamState state = make_adam_state(params);
  GradientMap grads;
  grads.grads.emplace(p.id(), Tensor::scalar(1.0));
  adamw_step(params, grads, state, 0.1, 0.0, 0.9, 0.999);
  CHECK(p.values()[0] == doctest::Approx(0.9).epsilon(1e-7));
}

TEST_CASE("adamw trajectory matches the scalar recurrence oracle") {
  Tensor p = Tensor::scalar(0.7);
  p.set_requires_grad(true);
  std::vector<Tensor> params = {p};
  AdamState state = make_adam_state(params);
  oracle::AdamScalar ref;
  double expect = 0.7;
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  for (int step = 0; step < 25; ++step) {
    const double g = dist(gen);
    GradientMap grads;
    grads.grads.emplace(p.id(), Tensor::scalar(g));
    adamw_step(params, grads, state, 0.05, 0.02, 0.9, 0.999);
    expect = ref.step(expect, g, 0.05, 0.02, 0.9, 0.999, 1e-8);
    CHECK(p.values()[0] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("adamw decoupled decay shrinks multiplicatively under zero gradient") {
  Tensor p = Tensor::scalar(2.0);
  p.set_requires_grad(true);
  std::vector<Tensor> params = {p};
  AdamState state = make_adam_state(params);
  GradientMap empty;
  const double lr = 0.1, wd = 0.15;
  adamw_step(params, empty, state, lr, wd, 0.9, 0.999);
  CHECK(p.values()[0] == doctest::Approx(2.0 * (1.0 - lr * wd)).epsilon(1e-12));
  adamw_step(params, empty, state, lr, wd, 0.9, 0.999);
  CHECK(p.values()[0] == doctest::Approx(2.0 * (1.0 - lr * wd) * (1.0 - lr * wd))
                             .epsilon(1e-12));
}

TEST_CASE("lr schedule") {
  CHECK(lr_at(40, 100, 40, 1e-3) == doctest::Approx(1e-3));
  CHECK(std::abs(lr_at(100, 100, 40, 1e-3)) < 1e-12);
  CHECK(lr_at(70, 100, 40, 1e-3) == doctest::Approx(0.5e-3));  // exact mid-progress
  CHECK(lr_at(0, 100, 40, 1e-3) == 0.0);
  CHECK(lr_at(20, 100, 40, 1e-3) == doctest::Approx(0.5e-3));  // linear warmup
  CHECK_THROWS_AS(lr_at(0, 10, 10, 1e-3), std::invalid_argument);

  // monotone decay after warmup
  double prev = lr_at(40, 100, 40, 1e-3);
  for (long s = 41; s <= 100; ++s) {
    const double cur = lr_at(s, 100, 40, 1e-3);
    CHECK(cur <= prev + 1e-15);
    prev = cur;
  }
}

TEST_CASE("zero learning rate leaves every parameter bit-identical") {
  ModelConfig cfg = micro_config();
  DatasetSpec spec = micro_spec();
  TdsModel model = build_model(cfg, 7);
  auto clips = make_dataset(spec, 2, 11);

  const auto before = checkpoint_bytes(model.params);
  TrainConfig tc;
  tc.base_lr = 0.0;
  tc.weight_decay = 0.0;
  tc.epochs = 2;
  tc.warmup_epochs = 1;
  tc.batch_size = 4;
  tc.flip_prob = 0.0;
  tc.threads = 1;
  Metrics m = train(model, tc, clips, {}, spec, nullptr);
  CHECK(m.epochs.size() == 2);
  CHECK(checkpoint_bytes(model.params) == before);
}

TEST_CASE("train is deterministic across runs, including threaded batches") {
  ModelConfig cfg = micro_config();
  DatasetSpec spec = micro_spec();
  auto clips = make_dataset(spec, 3, 21);
  auto val = make_dataset(spec, 1, 22);

  auto run = [&](int threads) {
    TdsModel model = build_model(cfg, 9);
    TrainConfig tc;
    tc.base_lr = 5e-4;
    tc.weight_decay = 0.15;
    tc.epochs = 3;
    tc.warmup_epochs = 1;
    tc.batch_size = 4;
    tc.seed = 1024;
    tc.flip_prob = 0.5;
    tc.threads = threads;
    Metrics m = train(model, tc, clips, val, spec, nullptr);
    return std::make_pair(checkpoint_bytes(model.params), m.to_jsonl(false));
  };

  const auto a = run(2);
  const auto b = run(2);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  const auto c = run(1);  // thread count must not change the math
  CHECK(a.first == c.first);
  CHECK(a.second == c.second);
}

TEST_CASE("first-epoch loss at lr=0 equals the direct oracle mean") {
  ModelConfig cfg = micro_config();
  DatasetSpec spec = micro_spec();
  TdsModel model = build_model(cfg, 31);
  auto clips = make_dataset(spec, 2, 41);

  TrainConfig tc;
  tc.base_lr = 0.0;
  tc.weight_decay = 0.0;
  tc.epochs = 2;
  tc.warmup_epochs = 1;
  tc.batch_size = 4;
  tc.flip_prob = 0.0;
  tc.threads = 1;
  Metrics m = train(model, tc, clips, {}, spec, nullptr);

  double expect = 0.0;
  for (const VideoClip& clip : clips) {
    NoGradGuard no_grad;
    Tensor logits = network_forward(model, clip.frames);
    expect += oracle::ce_label_smoothing(logits.values(), clip.label, cfg.label_smoothing);
  }
  expect /= static_cast<double>(clips.size());
  CHECK(std::abs(m.epochs[0].loss - expect) < 1e-10);
}

TEST_CASE("frozen parameters survive training bit-exactly") {
  ModelConfig cfg = micro_config();
  DatasetSpec spec = micro_spec();
  TdsModel model = build_model(cfg, 13);
  auto clips = make_dataset(spec, 2, 51);
  const std::uint64_t frozen_before = model.params.checksum_frozen();

  TrainConfig tc;
  tc.base_lr = 1e-3;
  tc.epochs = 2;
  tc.warmup_epochs = 1;
  tc.batch_size = 4;
  tc.threads = 2;
  train(model, tc, clips, {}, spec, nullptr);
  CHECK(model.params.checksum_frozen() == frozen_before);
}

TEST_CASE("metrics stream emits one json object per epoch") {
  ModelConfig cfg = micro_config();
  DatasetSpec spec = micro_spec();
  TdsModel model = build_model(cfg, 17);
  auto clips = make_dataset(spec, 1, 61);

  TrainConfig tc;
  tc.base_lr = 1e-3;
  tc.epochs = 2;
  tc.warmup_epochs = 1;
  tc.batch_size = 4;
  tc.threads = 1;
  std::ostringstream stream;
  Metrics m = train(model, tc, clips, clips, spec, &stream);
  CHECK(m.epochs.size() == 2);
  CHECK(m.trainable_params > 0);
  CHECK(m.frozen_params > 0);

  int lines = 0;
  std::istringstream in(stream.str());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    CHECK(line.find("\"epoch\":") != std::string::npos);
    CHECK(line.find("\"loss\":") != std::string::npos);
    CHECK(line.find("\"top1\":") != std::string::npos);
    CHECK(line.find("\"top5\":") != std::string::npos);
    CHECK(line.find("\"lr\":") != std::string::npos);
    CHECK(line.find("\"seconds\":") != std::string::npos);
    ++lines;
  }
  CHECK(lines == 2);
  for (const EpochStats& e : m.epochs) CHECK(e.top5 >= e.top1);
}

TEST_CASE("evaluate") {
  ModelConfig cfg = micro_config();
  DatasetSpec spec = micro_spec();
  TdsModel model = build_model(cfg, 19);
  auto clips = make_dataset(spec, 8, 71);

  EvalResult r = evaluate(model, clips, 0.0, 2);
  CHECK(r.count == 32);
  CHECK(r.top5 == 100.0);  // four classes: top-5 always contains the label
  CHECK(r.top1 >= 0.0);
  CHECK(r.top1 <= 100.0);

  CHECK_THROWS_AS(evaluate(model, {}, 0.0, 1), std::invalid_argument);

  // a random 4-class model sits near chance on a large sample
  auto big = make_dataset(spec, 25, 81);
  EvalResult chance = evaluate(model, big, 0.0, 2);
  CHECK(chance.top1 >= 5.0);
  CHECK(chance.top1 <= 45.0);
}

TEST_CASE("train config validation") {
  TrainConfig tc;
  tc.epochs = 4;
  tc.warmup_epochs = 4;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc.warmup_epochs = 1;
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
}
