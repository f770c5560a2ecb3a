#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tds/data.hpp"
#include "tds/gradcheck.hpp"
#include "tds/network.hpp"
#include "tds/ops.hpp"
#include "tds/profiler.hpp"
#include "tds/rng.hpp"
#include "tds/train.hpp"

namespace fs = std::filesystem;
using namespace tds;

namespace {

std::uint64_t default_seed() {
  if (const char* env = std::getenv("TDS_SEED")) {
    return static_cast<std::uint64_t>(std::strtoull(env, nullptr, 10));
  }
  return 1024;
}

// Model flags shared by every subcommand; resolution order is
// preset -> --config file -> explicit flags.
struct ModelFlags {
  std::string preset = "tiny";
  std::string config_path;
  int frames = 0, height = 0, width = 0, patch = 0, layers = 0;
  int frozen_dim = 0, frozen_heads = 0, side_dim = 0, side_heads = 0;
  int window = 0, reduction = 0, pool_kernel = 0, classes = 0, shift_div = 0;
  double alpha = 0, beta = 0, label_smoothing = 0;
  std::string td_layers, baseline_op, td_op, sme_mode;
  int cls_shift = -1, fuse_before_shift = -1;
  std::map<std::string, CLI::Option*> set;

  void attach(CLI::App* cmd) {
    set["preset"] = cmd->add_option("--preset", preset, "Built-in preset: tiny | paper")
                        ->check(CLI::IsMember({"tiny", "paper"}));
    set["config"] = cmd->add_option("--config", config_path, "Model config file (key=value)");
    set["frames"] = cmd->add_option("--frames", frames, "Sampled frames T");
    set["height"] = cmd->add_option("--height", height, "Frame height");
    set["width"] = cmd->add_option("--width", width, "Frame width");
    set["patch"] = cmd->add_option("--patch", patch, "Patch size P");
    set["layers"] = cmd->add_option("--layers", layers, "Block count L");
    set["frozen-dim"] = cmd->add_option("--frozen-dim", frozen_dim, "Frozen channel width");
    set["frozen-heads"] = cmd->add_option("--frozen-heads", frozen_heads, "Frozen heads");
    set["side-dim"] = cmd->add_option("--side-dim", side_dim, "Side channel width");
    set["side-heads"] = cmd->add_option("--side-heads", side_heads, "Side heads");
    set["window"] = cmd->add_option("--window", window, "SME radius n (0 disables)");
    set["reduction"] = cmd->add_option("--reduction", reduction, "TD bottleneck rate r");
    set["pool-kernel"] = cmd->add_option("--pool-kernel", pool_kernel, "TD temporal kernel k");
    set["classes"] = cmd->add_option("--classes", classes, "Output classes");
    set["shift-div"] = cmd->add_option("--shift-div", shift_div, "CLS shift split divisor");
    set["alpha"] = cmd->add_option("--alpha", alpha, "SME motion weight");
    set["beta"] = cmd->add_option("--beta", beta, "SME appearance weight");
    set["label-smoothing"] =
        cmd->add_option("--label-smoothing", label_smoothing, "Smoothing intensity");
    set["td-layers"] = cmd->add_option("--td-layers", td_layers, "Per-layer TD mask, e.g. 1111");
    set["baseline-op"] = cmd->add_option("--baseline-op", baseline_op, "conv | none")
                             ->check(CLI::IsMember({"conv", "none"}));
    set["td-op"] = cmd->add_option("--td-op", td_op, "pool | conv")
                       ->check(CLI::IsMember({"pool", "conv"}));
    set["sme-mode"] = cmd->add_option(
        "--sme-mode", sme_mode,
        "temporal | spatial | spatial+temporal | cross | additional | off");
    set["cls-shift"] = cmd->add_option("--cls-shift", cls_shift, "Enable CLS shift (0/1)");
    set["fuse-before-shift"] = cmd->add_option("--fuse-before-shift", fuse_before_shift,
                                               "Fuse before the CLS shift (0/1)");
  }

  bool given(const std::string& key) const {
    auto it = set.find(key);
    return it != set.end() && it->second->count() > 0;
  }

  ModelConfig resolve() const {
    ModelConfig cfg = preset == "paper" ? paper_config() : tiny_config();
    if (given("config")) cfg = load_model_config(config_path, cfg);
    if (given("frames")) cfg.frames = frames;
    if (given("height")) cfg.height = height;
    if (given("width")) cfg.width = width;
    if (given("patch")) cfg.patch = patch;
    if (given("layers")) {
      cfg.layers = layers;
      cfg.td_layers.assign(static_cast<std::size_t>(layers), true);
    }
    if (given("frozen-dim")) cfg.frozen_dim = frozen_dim;
    if (given("frozen-heads")) cfg.frozen_heads = frozen_heads;
    if (given("side-dim")) cfg.side_dim = side_dim;
    if (given("side-heads")) cfg.side_heads = side_heads;
    if (given("window")) cfg.window = window;
    if (given("reduction")) cfg.reduction = reduction;
    if (given("pool-kernel")) cfg.pool_kernel = pool_kernel;
    if (given("classes")) cfg.classes = classes;
    if (given("shift-div")) cfg.shift_div = shift_div;
    if (given("alpha")) cfg.alpha = alpha;
    if (given("beta")) cfg.beta = beta;
    if (given("label-smoothing")) cfg.label_smoothing = label_smoothing;
    if (given("td-layers")) {
      cfg.td_layers.clear();
      for (char c : td_layers) {
        if (c == '1') cfg.td_layers.push_back(true);
        else if (c == '0') cfg.td_layers.push_back(false);
        else throw std::invalid_argument("--td-layers expects a 0/1 mask");
      }
    }
    if (given("baseline-op")) {
      cfg.baseline_op = baseline_op == "conv" ? BaselineOp::Conv : BaselineOp::None;
    }
    if (given("td-op")) cfg.td_use_conv = td_op == "conv";
    if (given("sme-mode")) cfg.sme_mode = sme_mode_from_string(sme_mode);
    if (given("cls-shift")) cfg.cls_shift_enabled = cls_shift != 0;
    if (given("fuse-before-shift")) cfg.fuse_before_shift = fuse_before_shift != 0;
    cfg.validate();
    return cfg;
  }
};

struct TrainFlags {
  TrainConfig cfg;
  int clips_per_class = 64, val_per_class = 16;
  std::string data_dir;

  void attach(CLI::App* cmd, std::uint64_t seed) {
    cfg.seed = seed;
    cmd->add_option("--lr", cfg.base_lr, "Base learning rate");
    cmd->add_option("--weight-decay", cfg.weight_decay, "Decoupled weight decay");
    cmd->add_option("--beta1", cfg.beta1, "Adam beta1");
    cmd->add_option("--beta2", cfg.beta2, "Adam beta2");
    cmd->add_option("--epochs", cfg.epochs, "Training epochs");
    cmd->add_option("--warmup-epochs", cfg.warmup_epochs, "Warmup epochs");
    cmd->add_option("--batch", cfg.batch_size, "Batch size");
    cmd->add_option("--flip", cfg.flip_prob, "Label-aware horizontal flip probability");
    cmd->add_flag("--jitter", cfg.jitter_sampling, "Jittered sparse sampling");
    cmd->add_option("--threads", cfg.threads, "Worker threads (0 = auto)");
    cmd->add_option("--stop-train-top1", cfg.stop_train_top1, "Early-stop train threshold");
    cmd->add_option("--stop-val-top1", cfg.stop_val_top1, "Early-stop val threshold");
    cmd->add_option("--clips-per-class", clips_per_class, "Synthetic train clips per class");
    cmd->add_option("--val-per-class", val_per_class, "Synthetic val clips per class");
    cmd->add_option("--data", data_dir, "Dataset directory with train.tdsd / val.tdsd");
  }
};

void print_config(const ModelConfig& cfg, std::uint64_t seed) {
  std::cout << "# resolved model config\n" << serialize_model_config(cfg) << "seed=" << seed
            << "\n";
}

DatasetSpec spec_for(const ModelConfig& cfg, int raw_frames) {
  DatasetSpec spec;
  spec.classes = cfg.classes;
  spec.raw_frames = raw_frames;
  spec.height = cfg.height;
  spec.width = cfg.width;
  return spec;
}

std::pair<std::vector<VideoClip>, std::vector<VideoClip>> load_or_make_data(
    const TrainFlags& tf, const ModelConfig& cfg, std::uint64_t seed, DatasetSpec& spec_out) {
  if (!tf.data_dir.empty()) {
    auto train_clips = read_dataset(tf.data_dir + "/train.tdsd");
    auto val_clips = read_dataset(tf.data_dir + "/val.tdsd");
    if (train_clips.empty()) throw std::invalid_argument("empty training dataset");
    spec_out = spec_for(cfg, train_clips.front().frames.dim(1));
    return {std::move(train_clips), std::move(val_clips)};
  }
  spec_out = spec_for(cfg, std::max(16, cfg.frames));
  auto train_clips = make_dataset(spec_out, tf.clips_per_class, seed);
  auto val_clips = make_dataset(spec_out, tf.val_per_class, mix_seed(seed, 0xEA1));
  return {std::move(train_clips), std::move(val_clips)};
}

void ensure_out(const std::string& out) {
  if (!out.empty()) fs::create_directories(out);
}

// Binary PPM (P6) with equal RGB channels.
void write_ppm(const std::string& path, const std::vector<double>& gray, int h, int w,
               int scale) {
  double mx = 1e-12;
  for (double v : gray) mx = std::max(mx, v);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P6\n" << w * scale << " " << h * scale << "\n255\n";
  for (int y = 0; y < h * scale; ++y) {
    for (int x = 0; x < w * scale; ++x) {
      const double v = gray[static_cast<std::size_t>(y / scale) * w + (x / scale)] / mx;
      const auto byte = static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
      out.put(static_cast<char>(byte));
      out.put(static_cast<char>(byte));
      out.put(static_cast<char>(byte));
    }
  }
}

std::vector<double> token_magnitude_grid(const Tensor& tokens, int frame, int grid_h,
                                         int grid_w) {
  const int s = tokens.dim(1), c = tokens.dim(2);
  std::vector<double> grid(static_cast<std::size_t>(grid_h) * grid_w, 0.0);
  for (int row = 0; row < s - 1; ++row) {
    double acc = 0.0;
    for (int ch = 0; ch < c; ++ch) {
      const double v = tokens.values()[(static_cast<std::size_t>(frame) * s + row + 1) * c + ch];
      acc += v * v;
    }
    grid[static_cast<std::size_t>(row)] = std::sqrt(acc);
  }
  (void)grid_w;
  return grid;
}

int run_train(const ModelFlags& mf, const TrainFlags& tf, const std::string& out,
              std::uint64_t seed) {
  ModelConfig cfg = mf.resolve();
  print_config(cfg, seed);
  ensure_out(out);

  DatasetSpec spec;
  auto [train_clips, val_clips] = load_or_make_data(tf, cfg, seed, spec);
  TdsModel model = build_model(cfg, seed);

  TrainConfig tc = tf.cfg;
  tc.seed = seed;
  if (!out.empty()) tc.checkpoint_path = out + "/checkpoint.tdsc";

  std::ofstream metrics_file;
  std::ostream* stream = &std::cout;
  if (!out.empty()) {
    metrics_file.open(out + "/metrics.jsonl", std::ios::trunc);
    stream = &metrics_file;
    std::ofstream cfg_file(out + "/config.txt", std::ios::trunc);
    cfg_file << serialize_model_config(cfg);
  }

  Metrics metrics = train(model, tc, train_clips, val_clips, spec, stream);
  if (!out.empty()) {
    // mirror the stream to stdout summary
    const EpochStats& last = metrics.epochs.back();
    std::cout << "epochs=" << metrics.epochs.size() << " loss=" << last.loss
              << " top1=" << last.top1 << " val_top1=" << last.val_top1
              << " trainable_params=" << metrics.trainable_params
              << " frozen_params=" << metrics.frozen_params
              << " seconds=" << metrics.total_seconds << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TDS side-network video classifier workbench"};
  app.require_subcommand(1);

  std::uint64_t seed = default_seed();
  app.add_option("--seed", seed, "Global seed (env TDS_SEED is the fallback)");

  std::string out_dir;
  app.add_option("--out", out_dir, "Output directory for artifacts");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic motion dataset");
  int gd_classes = 4, gd_clips = 64, gd_val = 16, gd_frames = 16, gd_h = 32, gd_w = 32,
      gd_sprite = 8, gd_speed = 2;
  bool gd_static = false;
  gen->add_option("--classes", gd_classes, "Motion classes");
  gen->add_option("--clips-per-class", gd_clips, "Training clips per class");
  gen->add_option("--val-per-class", gd_val, "Validation clips per class");
  gen->add_option("--raw-frames", gd_frames, "Frames per clip");
  gen->add_option("--height", gd_h, "Frame height");
  gen->add_option("--width", gd_w, "Frame width");
  gen->add_option("--sprite", gd_sprite, "Sprite edge length");
  gen->add_option("--speed", gd_speed, "Pixels per frame");
  gen->add_flag("--static-class", gd_static, "Reserve the last class for static clips");

  // train
  auto* tr = app.add_subcommand("train", "Train the side network");
  ModelFlags tr_model;
  tr_model.attach(tr);
  TrainFlags tr_flags;
  tr_flags.attach(tr, seed);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ModelFlags ev_model;
  ev_model.attach(ev);
  std::string ev_ckpt, ev_data;
  int ev_threads = 0;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset file (.tdsd)")->required();
  ev->add_option("--threads", ev_threads, "Worker threads (0 = auto)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full network");
  ModelFlags gc_model;
  gc_model.attach(gc);
  double gc_eps = 1e-4, gc_threshold = 1e-4;
  int gc_samples = 12;
  gc->add_option("--eps", gc_eps, "Central difference step");
  gc->add_option("--threshold", gc_threshold, "Pass threshold on max relative error");
  gc->add_option("--samples", gc_samples, "Sampled coordinates per parameter (0 = all)");

  // profile
  auto* pf = app.add_subcommand("profile", "FLOP count and backward-memory audit");
  ModelFlags pf_model;
  pf_model.attach(pf);
  std::string pf_topos = "side,inbackbone,full";
  bool pf_eval_mode = false;
  pf->add_option("--topology", pf_topos, "Comma list of side|inbackbone|full");
  pf->add_flag("--eval-mode", pf_eval_mode, "Audit an inference-only pass too");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Sweep one configuration axis");
  ModelFlags ab_model;
  ab_model.attach(ab);
  TrainFlags ab_flags;
  ab_flags.attach(ab, seed);
  std::string ab_axis, ab_values;
  ab->add_option("--axis", ab_axis,
                 "window | fusion | pool-kernel | dim | sme-mode | temporal-module")
      ->required();
  ab->add_option("--values", ab_values, "Comma-separated values for the axis")->required();

  // dump-activations
  auto* da = app.add_subcommand("dump-activations", "Patch-activation maps as PPM images");
  ModelFlags da_model;
  da_model.attach(da);
  std::string da_ckpt, da_data;
  int da_clip = 0, da_layer = 0, da_scale = 8, da_label = 0;
  std::uint64_t da_gen_seed = 7;
  da->add_option("--checkpoint", da_ckpt, "Optional checkpoint to load");
  da->add_option("--data", da_data, "Dataset file; omitted = generate one clip");
  da->add_option("--clip", da_clip, "Clip index within the dataset");
  da->add_option("--layer", da_layer, "0 = side input, l = after block l");
  da->add_option("--scale", da_scale, "Pixel scale per grid cell");
  da->add_option("--label", da_label, "Class of the generated clip");
  da->add_option("--gen-seed", da_gen_seed, "Seed of the generated clip");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      DatasetSpec spec;
      spec.classes = gd_classes;
      spec.raw_frames = gd_frames;
      spec.height = gd_h;
      spec.width = gd_w;
      spec.sprite = gd_sprite;
      spec.speed = gd_speed;
      spec.include_static = gd_static;
      std::cout << "# resolved dataset spec\nclasses=" << spec.classes
                << "\nraw_frames=" << spec.raw_frames << "\nheight=" << spec.height
                << "\nwidth=" << spec.width << "\nsprite=" << spec.sprite
                << "\nspeed=" << spec.speed << "\nstatic_class=" << spec.include_static
                << "\nseed=" << seed << "\n";
      ensure_out(out_dir.empty() ? "." : out_dir);
      const std::string base = out_dir.empty() ? "." : out_dir;
      write_dataset(base + "/train.tdsd", make_dataset(spec, gd_clips, seed));
      write_dataset(base + "/val.tdsd", make_dataset(spec, gd_val, mix_seed(seed, 0xEA1)));
      std::cout << "wrote " << base << "/train.tdsd and " << base << "/val.tdsd\n";
      return 0;
    }

    if (*tr) return run_train(tr_model, tr_flags, out_dir, seed);

    if (*ev) {
      ModelConfig cfg = ev_model.resolve();
      print_config(cfg, seed);
      TdsModel model = build_model(cfg, seed);
      load_checkpoint(ev_ckpt, model.params);
      auto clips = read_dataset(ev_data);
      EvalResult r = evaluate(model, clips, 0.0, ev_threads);
      nlohmann::json j{{"count", r.count}, {"top1", r.top1}, {"top5", r.top5},
                       {"mean_loss", r.mean_loss}};
      std::cout << j.dump() << "\n";
      return 0;
    }

    if (*gc) {
      ModelConfig cfg = gc_model.resolve();
      print_config(cfg, seed);
      TdsModel model = build_model(cfg, seed);
      const int t_raw = std::max(cfg.frames, 2 * cfg.frames);
      std::vector<double> vals =
          uniform_values(static_cast<std::size_t>(3) * t_raw * cfg.height * cfg.width, 0.05,
                         0.95, mix_seed(seed, 0x6C));
      // keep clear of pooling ties
      for (std::size_t i = 0; i < vals.size(); ++i) {
        vals[i] += 1e-7 * static_cast<double>(i % 97);
      }
      Tensor video = Tensor::from_data({3, t_raw, cfg.height, cfg.width}, std::move(vals));
      const std::vector<int> indices = sparse_sample(t_raw, cfg.frames, false, 0);
      auto fn = [&] {
        return ls_cross_entropy(network_forward(model, video, indices), 1,
                                cfg.label_smoothing);
      };
      GradCheckOptions opts;
      opts.eps = gc_eps;
      opts.max_samples_per_param = gc_samples;
      opts.sample_seed = mix_seed(seed, 0x9C);
      const double err = grad_check(fn, model.params.trainable(), opts);
      std::cout << "max_relative_error=" << err << " threshold=" << gc_threshold << "\n";
      return err < gc_threshold ? 0 : 1;
    }

    if (*pf) {
      ModelConfig cfg = pf_model.resolve();
      print_config(cfg, seed);
      std::vector<Topology> topologies;
      std::stringstream ss(pf_topos);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!item.empty()) topologies.push_back(topology_from_string(item));
      }
      FlopMemReport report = profile_model(cfg, topologies, seed);
      if (pf_eval_mode) {
        report.topologies.push_back(
            audit_backward_memory(cfg, Topology::Side, seed, /*eval_mode=*/true));
      }
      std::cout << report.to_table() << "\n" << report.to_json() << "\n";
      if (!out_dir.empty()) {
        ensure_out(out_dir);
        std::ofstream jf(out_dir + "/profile.json", std::ios::trunc);
        jf << report.to_json() << "\n";
        std::ofstream tf(out_dir + "/profile.txt", std::ios::trunc);
        tf << report.to_table();
      }
      return 0;
    }

    if (*ab) {
      if (out_dir.empty()) throw std::invalid_argument("ablate requires --out");
      ensure_out(out_dir);
      std::vector<std::string> values;
      std::stringstream ss(ab_values);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!item.empty()) values.push_back(item);
      }
      if (values.empty()) throw std::invalid_argument("ablate: empty --values");

      std::cout << "axis=" << ab_axis << " values=" << ab_values << " seed=" << seed << "\n";
      for (const std::string& value : values) {
        ModelConfig cfg = ab_model.resolve();
        if (ab_axis == "window") cfg.window = std::stoi(value);
        else if (ab_axis == "pool-kernel") cfg.pool_kernel = std::stoi(value);
        else if (ab_axis == "dim") cfg.side_dim = std::stoi(value);
        else if (ab_axis == "sme-mode") cfg.sme_mode = sme_mode_from_string(value);
        else if (ab_axis == "fusion") {
          const auto colon = value.find(':');
          if (colon == std::string::npos) {
            throw std::invalid_argument("fusion values look like alpha:beta, e.g. 1:1");
          }
          cfg.alpha = std::stod(value.substr(0, colon));
          cfg.beta = std::stod(value.substr(colon + 1));
        } else if (ab_axis == "temporal-module") {
          if (value == "td") {
            cfg.td_layers.assign(static_cast<std::size_t>(cfg.layers), true);
          } else if (value == "conv") {
            cfg.td_layers.assign(static_cast<std::size_t>(cfg.layers), false);
            cfg.baseline_op = BaselineOp::Conv;
          } else if (value == "none") {
            cfg.td_layers.assign(static_cast<std::size_t>(cfg.layers), false);
            cfg.baseline_op = BaselineOp::None;
          } else {
            throw std::invalid_argument("temporal-module values: td | conv | none");
          }
        } else {
          throw std::invalid_argument("unknown ablation axis '" + ab_axis + "'");
        }
        cfg.validate();

        DatasetSpec spec;
        auto [train_clips, val_clips] = load_or_make_data(ab_flags, cfg, seed, spec);
        TdsModel model = build_model(cfg, seed);
        TrainConfig tc = ab_flags.cfg;
        tc.seed = seed;
        std::string tag = ab_axis + "_" + value;
        for (char& ch : tag) {
          if (ch == ':' || ch == '+' || ch == '/') ch = '-';
        }
        tc.checkpoint_path = out_dir + "/" + tag + ".tdsc";
        std::ofstream metrics(out_dir + "/" + tag + ".jsonl", std::ios::trunc);
        Metrics m = train(model, tc, train_clips, val_clips, spec, &metrics);
        double best_val = 0.0;
        for (const EpochStats& e : m.epochs) best_val = std::max(best_val, e.val_top1);
        std::cout << tag << ": final_val_top1=" << m.epochs.back().val_top1
                  << " best_val_top1=" << best_val << " epochs=" << m.epochs.size() << "\n";
      }
      return 0;
    }

    if (*da) {
      ModelConfig cfg = da_model.resolve();
      print_config(cfg, seed);
      if (out_dir.empty()) throw std::invalid_argument("dump-activations requires --out");
      ensure_out(out_dir);
      TdsModel model = build_model(cfg, seed);
      if (!da_ckpt.empty()) load_checkpoint(da_ckpt, model.params);

      VideoClip clip;
      if (!da_data.empty()) {
        auto clips = read_dataset(da_data);
        if (da_clip < 0 || da_clip >= static_cast<int>(clips.size())) {
          throw std::invalid_argument("clip index out of range");
        }
        clip = clips[static_cast<std::size_t>(da_clip)];
      } else {
        DatasetSpec spec = spec_for(cfg, std::max(16, cfg.frames));
        clip = gen_clip(da_label, da_gen_seed, spec);
      }

      if (da_layer < 0 || da_layer > cfg.layers) {
        throw std::invalid_argument("layer must be in [0, " + std::to_string(cfg.layers) + "]");
      }

      TdsModel no_sme = model;  // shares parameters; only the routing changes
      no_sme.cfg.sme_mode = SmeMode::Off;

      const int t_raw = clip.frames.dim(1);
      const std::vector<int> indices = sparse_sample(t_raw, cfg.frames, false, 0);
      NoGradGuard no_grad;
      ForwardTrace with_trace, without_trace;
      network_forward(model, clip.frames, indices, nullptr, &with_trace);
      network_forward(no_sme, clip.frames, indices, nullptr, &without_trace);

      const Tensor with_tokens =
          da_layer == 0 ? with_trace.side_input
                        : with_trace.side_layers[static_cast<std::size_t>(da_layer - 1)];
      const Tensor without_tokens =
          da_layer == 0 ? without_trace.side_input
                        : without_trace.side_layers[static_cast<std::size_t>(da_layer - 1)];

      const int gh = cfg.grid_h(), gw = cfg.grid_w();
      for (int f = 0; f < cfg.frames; ++f) {
        auto a = token_magnitude_grid(with_tokens, f, gh, gw);
        auto b = token_magnitude_grid(without_tokens, f, gh, gw);
        std::vector<double> diff(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) diff[i] = std::abs(a[i] - b[i]);
        // side-by-side panels: with | without | difference, separated by a dark column
        std::vector<double> panel(static_cast<std::size_t>(gh) * (3 * gw + 2), 0.0);
        for (int y = 0; y < gh; ++y) {
          for (int x = 0; x < gw; ++x) {
            panel[y * (3 * gw + 2) + x] = a[y * gw + x];
            panel[y * (3 * gw + 2) + gw + 1 + x] = b[y * gw + x];
            panel[y * (3 * gw + 2) + 2 * gw + 2 + x] = diff[y * gw + x];
          }
        }
        std::ostringstream name;
        name << out_dir << "/activations_layer" << da_layer << "_frame" << f << ".ppm";
        write_ppm(name.str(), panel, gh, 3 * gw + 2, da_scale);
      }
      std::cout << "wrote " << cfg.frames << " activation maps to " << out_dir << "\n";
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
