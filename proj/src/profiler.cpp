#include "tds/profiler.hpp"

#include <deque>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "tds/network.hpp"
#include "tds/ops.hpp"
#include "tds/rng.hpp"
#include "tds/vit.hpp"

namespace tds {

std::string topology_name(Topology t) {
  switch (t) {
    case Topology::Side: return "side";
    case Topology::InBackbone: return "inbackbone";
    case Topology::FullFinetune: return "full";
  }
  return "side";
}

Topology topology_from_string(const std::string& name) {
  if (name == "side") return Topology::Side;
  if (name == "inbackbone") return Topology::InBackbone;
  if (name == "full") return Topology::FullFinetune;
  throw std::invalid_argument("unknown topology '" + name + "'");
}

namespace {

enum class Branch { Frozen, Side, Adapters };

Branch branch_of(const std::string& scope) {
  if (scope.rfind("frozen", 0) == 0) return Branch::Frozen;
  if (scope.find("adapter") != std::string::npos) return Branch::Adapters;
  return Branch::Side;
}

std::int64_t& bucket(BranchBytes& b, Branch br) {
  switch (br) {
    case Branch::Frozen: return b.frozen;
    case Branch::Adapters: return b.adapters;
    case Branch::Side: return b.side;
  }
  return b.side;
}

// MACs of one pre-norm block over S tokens at width C (FFN ratio 4).
std::int64_t block_macs(std::int64_t s, std::int64_t c) {
  return 12 * s * c * c + 2 * s * s * c;
}

}  // namespace

FlopReport count_flops(const ModelConfig& cfg) {
  cfg.validate();
  const std::int64_t t = cfg.frames;
  const std::int64_t n = cfg.grid_h() * cfg.grid_w();
  const std::int64_t s = n + 1;
  const std::int64_t cf = cfg.frozen_dim;
  const std::int64_t cs = cfg.side_dim;
  const std::int64_t p2 = static_cast<std::int64_t>(cfg.patch) * cfg.patch;

  FlopReport r;
  // Frozen branch: patch projection plus L blocks, per frame.
  std::int64_t frozen_macs = t * n * cf * 3 * p2 + t * cfg.layers * block_macs(s, cf);

  // Side branch: its own patch embedding, per-layer fusion, blocks, head.
  std::int64_t side_macs = t * n * cs * 3 * p2;
  side_macs += static_cast<std::int64_t>(cfg.layers) * t * s * cf * cs;
  side_macs += t * cfg.layers * block_macs(s, cs);
  side_macs += t * n * cs * cfg.classes;

  std::int64_t sme_macs = 0;
  if (cfg.sme_enabled()) {
    const std::int64_t diff_ch = 6 * cfg.window;  // 3 channels x 2n differences
    const bool side_sme = cfg.sme_mode != SmeMode::Spatial;
    const bool spatial_sme =
        cfg.sme_mode == SmeMode::Spatial || cfg.sme_mode == SmeMode::SpatialTemporal;
    if (side_sme) sme_macs += t * n * cs * diff_ch * p2;
    if (spatial_sme) sme_macs += t * n * cf * diff_ch * p2;
    if (cfg.sme_mode == SmeMode::Cross || cfg.sme_mode == SmeMode::Additional) {
      // These modes run the plain side embedding and SME's appearance term.
      side_macs += t * n * cs * 3 * p2;
    }
    if (cfg.sme_mode == SmeMode::Additional) side_macs += t * n * cs * cfg.classes;
  }

  std::int64_t td_macs = 0, baseline_macs = 0;
  for (int l = 0; l < cfg.layers; ++l) {
    if (cfg.td_layers[static_cast<std::size_t>(l)]) {
      td_macs += 2 * t * n * cs * (cs / cfg.reduction);
      if (cfg.td_use_conv) {
        td_macs += t * n * (cs / cfg.reduction) * (cs / cfg.reduction) * cfg.pool_kernel;
      }
    } else if (cfg.baseline_op == BaselineOp::Conv) {
      baseline_macs += t * n * cs * cs * cfg.pool_kernel;
    }
  }

  r.frozen = 2 * frozen_macs;
  r.side = 2 * side_macs;
  r.adapters_td = 2 * td_macs;
  r.adapters_sme = 2 * sme_macs;
  r.adapters_baseline = 2 * baseline_macs;
  r.adapters = r.adapters_td + r.adapters_sme + r.adapters_baseline;
  return r;
}

TopologyAudit census_graph(const Tensor& loss) {
  TopologyAudit audit;
  if (!loss.node()) return audit;

  std::unordered_set<const Node*> seen;
  std::deque<const Node*> queue;
  queue.push_back(loss.node().get());
  seen.insert(loss.node().get());

  std::unordered_set<const void*> counted;
  std::unordered_set<const void*> counted_frozen_internal;
  while (!queue.empty()) {
    const Node* node = queue.front();
    queue.pop_front();
    const Branch node_branch = branch_of(node->scope);
    bucket(audit.retained_nodes, node_branch) += 1;
    bucket(audit.aux_bytes, node_branch) += static_cast<std::int64_t>(node->aux_bytes);

    for (const Tensor& saved : node->saved) {
      if (!saved.defined() || saved.is_param()) continue;
      const Branch tensor_branch = branch_of(saved.scope());
      if (counted.insert(saved.storage_key()).second) {
        bucket(audit.retained_bytes, tensor_branch) +=
            static_cast<std::int64_t>(saved.storage_bytes());
        if (tensor_branch == Branch::Frozen && node_branch != Branch::Frozen) {
          audit.frozen_boundary_tensors += 1;
        }
      }
      if (node_branch == Branch::Frozen &&
          counted_frozen_internal.insert(saved.storage_key()).second) {
        audit.frozen_internal_bytes += static_cast<std::int64_t>(saved.storage_bytes());
      }
    }
    for (const Edge& e : node->edges) {
      if (e.producer && seen.insert(e.producer.get()).second) queue.push_back(e.producer.get());
    }
  }
  return audit;
}

namespace {

// Bottleneck spatio-temporal adapter threaded through the backbone
// (in-backbone reference topology): reduce 1x1x1, temporal conv, gelu,
// expand 1x1x1, residual.
struct StackAdapter {
  Tensor reduce_w, reduce_b;
  Tensor tconv_w, tconv_b;
  Tensor expand_w, expand_b;
};

StackAdapter make_stack_adapter(ParamSet& params, const std::string& prefix, int channels,
                                int bottleneck, std::uint64_t seed) {
  StackAdapter a;
  a.reduce_w = params.add(prefix + ".reduce.w", {bottleneck, channels, 1, 1, 1},
                          normal_values(static_cast<std::size_t>(bottleneck) * channels, 0.02,
                                        mix_seed(seed, 1)),
                          true);
  a.reduce_b = params.add(prefix + ".reduce.b", {bottleneck},
                          std::vector<double>(static_cast<std::size_t>(bottleneck), 0.0), true);
  a.tconv_w = params.add(
      prefix + ".tconv.w", {bottleneck, bottleneck, 3, 1, 1},
      normal_values(static_cast<std::size_t>(bottleneck) * bottleneck * 3, 0.02,
                    mix_seed(seed, 2)),
      true);
  a.tconv_b = params.add(prefix + ".tconv.b", {bottleneck},
                         std::vector<double>(static_cast<std::size_t>(bottleneck), 0.0), true);
  a.expand_w = params.add(prefix + ".expand.w", {channels, bottleneck, 1, 1, 1},
                          normal_values(static_cast<std::size_t>(channels) * bottleneck, 0.02,
                                        mix_seed(seed, 3)),
                          true);
  a.expand_b = params.add(prefix + ".expand.b", {channels},
                          std::vector<double>(static_cast<std::size_t>(channels), 0.0), true);
  return a;
}

Tensor stack_adapter_forward(const Tensor& tokens, const StackAdapter& a) {
  const int t = tokens.dim(0), s = tokens.dim(1), c = tokens.dim(2);
  Tensor vol = ops::reshape(ops::permute(tokens, {2, 0, 1}), {c, t, s, 1});
  Tensor reduced = ops::conv3d(vol, a.reduce_w, a.reduce_b, 0, 0, 0);
  Tensor temporal =
      ops::conv3d(reduced, a.tconv_w, a.tconv_b, 1, 0, 0, ops::PadMode::Replicate);
  Tensor act = ops::gelu(temporal);
  Tensor expanded = ops::conv3d(act, a.expand_w, a.expand_b, 0, 0, 0);
  Tensor rows = ops::reshape(ops::permute(ops::reshape(expanded, {c, t, s}), {1, 2, 0}),
                             {t, s, c});
  return ops::add(tokens, rows);
}

Tensor stack_head(const Tensor& tokens, const Tensor& head_w, const Tensor& head_b) {
  const int s = tokens.dim(1);
  Tensor patches = ops::slice(tokens, 1, 1, s - 1);
  return ops::reduce_mean(ops::add(ops::matmul(patches, head_w), head_b), {0, 1});
}

Tensor random_video(const ModelConfig& cfg, std::uint64_t seed) {
  return Tensor::from_data(
      {3, cfg.frames, cfg.height, cfg.width},
      uniform_values(static_cast<std::size_t>(3) * cfg.frames * cfg.height * cfg.width, 0.0, 1.0,
                     seed));
}

std::vector<int> identity_indices(int frames) {
  std::vector<int> idx(static_cast<std::size_t>(frames));
  for (int i = 0; i < frames; ++i) idx[static_cast<std::size_t>(i)] = i;
  return idx;
}

// Backbone-only topologies: the frozen (or fully trainable) encoder stack with
// optional in-block adapters, plus a trainable classification head.
Tensor backbone_loss(const ModelConfig& cfg, bool with_adapters, bool backbone_trainable,
                     std::uint64_t seed, ParamSet& params) {
  FrozenEncoder enc = make_frozen_encoder(params, cfg.height, cfg.width, cfg.patch,
                                          cfg.frozen_dim, cfg.layers, cfg.frozen_heads,
                                          mix_seed(seed, 0xF0), backbone_trainable);
  std::vector<StackAdapter> pre_attn, pre_ffn;
  if (with_adapters) {
    ScopeGuard scope("adapter");
    const int bottleneck = cfg.frozen_dim / 2;
    for (int l = 0; l < cfg.layers; ++l) {
      pre_attn.push_back(make_stack_adapter(params, "adapter" + std::to_string(l) + "a",
                                            cfg.frozen_dim, bottleneck, mix_seed(seed, 300 + l)));
      pre_ffn.push_back(make_stack_adapter(params, "adapter" + std::to_string(l) + "b",
                                           cfg.frozen_dim, bottleneck, mix_seed(seed, 400 + l)));
    }
  }
  Tensor head_w, head_b;
  {
    ScopeGuard scope("side");
    head_w = params.add("head.w", {cfg.frozen_dim, cfg.classes},
                        normal_values(static_cast<std::size_t>(cfg.frozen_dim) * cfg.classes,
                                      0.02, mix_seed(seed, 7)),
                        true);
    head_b = params.add("head.b", {cfg.classes},
                        std::vector<double>(static_cast<std::size_t>(cfg.classes), 0.0), true);
  }

  Tensor video = random_video(cfg, mix_seed(seed, 0x71DE0));
  Tensor x;
  {
    ScopeGuard scope("frozen");
    x = embed_video_tokens(video, enc);
  }
  for (int l = 0; l < cfg.layers; ++l) {
    if (with_adapters) {
      ScopeGuard scope("adapter");
      x = stack_adapter_forward(x, pre_attn[static_cast<std::size_t>(l)]);
    }
    {
      ScopeGuard scope("frozen");
      x = vit_block_attention(x, enc.blocks[static_cast<std::size_t>(l)]);
    }
    if (with_adapters) {
      ScopeGuard scope("adapter");
      x = stack_adapter_forward(x, pre_ffn[static_cast<std::size_t>(l)]);
    }
    {
      ScopeGuard scope("frozen");
      x = vit_block_ffn(x, enc.blocks[static_cast<std::size_t>(l)]);
    }
  }
  Tensor logits;
  {
    ScopeGuard scope("side");
    logits = stack_head(x, head_w, head_b);
  }
  return ops::cross_entropy_ls(logits, 0, cfg.label_smoothing);
}

}  // namespace

TopologyAudit audit_backward_memory(const ModelConfig& cfg, Topology topology,
                                    std::uint64_t seed, bool eval_mode) {
  cfg.validate();
  TopologyAudit audit;
  Tensor loss;
  ParamSet stack_params;

  std::optional<NoGradGuard> guard;
  if (eval_mode) guard.emplace();

  switch (topology) {
    case Topology::Side: {
      TdsModel model = build_model(cfg, seed);
      Tensor video = random_video(cfg, mix_seed(seed, 0x71DE0));
      Tensor logits =
          network_forward(model, video, identity_indices(cfg.frames), nullptr, nullptr);
      loss = ops::cross_entropy_ls(logits, 0, cfg.label_smoothing);
      audit = census_graph(loss);
      audit.trainable_params = model.params.trainable_count();
      audit.frozen_params = model.params.frozen_count();
      break;
    }
    case Topology::InBackbone: {
      loss = backbone_loss(cfg, /*with_adapters=*/true, /*backbone_trainable=*/false, seed,
                           stack_params);
      audit = census_graph(loss);
      audit.trainable_params = stack_params.trainable_count();
      audit.frozen_params = stack_params.frozen_count();
      break;
    }
    case Topology::FullFinetune: {
      loss = backbone_loss(cfg, /*with_adapters=*/false, /*backbone_trainable=*/true, seed,
                           stack_params);
      audit = census_graph(loss);
      audit.trainable_params = stack_params.trainable_count();
      audit.frozen_params = stack_params.frozen_count();
      break;
    }
  }
  audit.topology = topology_name(topology) + (eval_mode ? "(eval)" : "");
  return audit;
}

FlopMemReport profile_model(const ModelConfig& cfg, const std::vector<Topology>& topologies,
                            std::uint64_t seed) {
  FlopMemReport report;
  report.flops = count_flops(cfg);
  for (Topology t : topologies) {
    report.topologies.push_back(audit_backward_memory(cfg, t, seed));
  }
  return report;
}

std::string FlopMemReport::to_json() const {
  nlohmann::json j;
  j["flops"] = {{"frozen", flops.frozen},
                {"side", flops.side},
                {"adapters", flops.adapters},
                {"adapters_td", flops.adapters_td},
                {"adapters_sme", flops.adapters_sme},
                {"adapters_baseline", flops.adapters_baseline},
                {"total", flops.total()}};
  j["topologies"] = nlohmann::json::array();
  for (const TopologyAudit& a : topologies) {
    j["topologies"].push_back(
        {{"topology", a.topology},
         {"retained_bytes",
          {{"frozen", a.retained_bytes.frozen},
           {"side", a.retained_bytes.side},
           {"adapters", a.retained_bytes.adapters},
           {"total", a.retained_bytes.total()}}},
         {"retained_nodes",
          {{"frozen", a.retained_nodes.frozen},
           {"side", a.retained_nodes.side},
           {"adapters", a.retained_nodes.adapters},
           {"total", a.retained_nodes.total()}}},
         {"aux_bytes", a.aux_bytes.total()},
         {"frozen_internal_bytes", a.frozen_internal_bytes},
         {"frozen_boundary_tensors", a.frozen_boundary_tensors},
         {"retained_total", a.retained_total()},
         {"trainable_params", a.trainable_params},
         {"frozen_params", a.frozen_params}});
  }
  return j.dump(2);
}

std::string FlopMemReport::to_table() const {
  std::ostringstream os;
  os << "FLOPs per clip forward\n";
  os << std::left << std::setw(22) << "  branch" << std::right << std::setw(16) << "flops"
     << '\n';
  os << std::left << std::setw(22) << "  frozen" << std::right << std::setw(16) << flops.frozen
     << '\n';
  os << std::left << std::setw(22) << "  side" << std::right << std::setw(16) << flops.side
     << '\n';
  os << std::left << std::setw(22) << "  adapters" << std::right << std::setw(16)
     << flops.adapters << '\n';
  os << std::left << std::setw(22) << "  total" << std::right << std::setw(16) << flops.total()
     << "\n\n";
  if (!topologies.empty()) {
    os << "Backward retention census (bytes)\n";
    os << std::left << std::setw(18) << "  topology" << std::right << std::setw(14) << "frozen"
       << std::setw(14) << "side" << std::setw(14) << "adapters" << std::setw(12) << "aux"
       << std::setw(16) << "total" << std::setw(12) << "nodes" << std::setw(14) << "trainable"
       << '\n';
    for (const TopologyAudit& a : topologies) {
      os << std::left << std::setw(18) << ("  " + a.topology) << std::right << std::setw(14)
         << a.retained_bytes.frozen << std::setw(14) << a.retained_bytes.side << std::setw(14)
         << a.retained_bytes.adapters << std::setw(12) << a.aux_bytes.total() << std::setw(16)
         << a.retained_total() << std::setw(12) << a.retained_nodes.total() << std::setw(14)
         << a.trainable_params << '\n';
    }
  }
  return os.str();
}

}  // namespace tds
