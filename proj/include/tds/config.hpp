#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tds {

enum class SmeMode { Temporal, Spatial, SpatialTemporal, Cross, Additional, Off };
enum class BaselineOp { Conv, None };

std::string sme_mode_name(SmeMode mode);
SmeMode sme_mode_from_string(const std::string& name);

// Every architectural knob of the TDS network.
struct ModelConfig {
  int frames = 8;        // sampled frames T
  int height = 32, width = 32;
  int patch = 8;
  int layers = 4;
  int frozen_dim = 64;
  int frozen_heads = 4;
  int side_dim = 32;
  int side_heads = 4;
  int window = 2;        // SME radius n; 0 disables the motion term entirely
  int reduction = 2;     // TD bottleneck r
  int pool_kernel = 3;   // TD temporal kernel k
  double alpha = 1.0;
  double beta = 1.0;
  std::vector<bool> td_layers;  // defaults to all true, length = layers
  BaselineOp baseline_op = BaselineOp::Conv;  // non-TD layers: temporal conv or nothing
  bool td_use_conv = false;     // TD ablation: temporal conv replaces max-pool
  int classes = 4;
  double label_smoothing = 0.1;
  bool cls_shift_enabled = true;
  int shift_div = 4;
  bool fuse_before_shift = true;
  SmeMode sme_mode = SmeMode::Temporal;

  int tokens() const { return 1 + (height / patch) * (width / patch); }
  int grid_h() const { return height / patch; }
  int grid_w() const { return width / patch; }
  bool sme_enabled() const { return window > 0 && sme_mode != SmeMode::Off; }

  void validate() const;  // throws std::invalid_argument on broken invariants
};

ModelConfig tiny_config();
ModelConfig paper_config();

// Flat key=value text, one key per line; '#' starts a comment; unknown keys
// are rejected.
ModelConfig parse_model_config(const std::string& text, const ModelConfig& base = tiny_config());
ModelConfig load_model_config(const std::string& path, const ModelConfig& base = tiny_config());
std::string serialize_model_config(const ModelConfig& cfg);

}  // namespace tds
