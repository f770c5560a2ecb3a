#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tds/config.hpp"
#include "tds/tensor.hpp"

namespace tds {

enum class Topology { Side, InBackbone, FullFinetune };

std::string topology_name(Topology t);
Topology topology_from_string(const std::string& name);

// Analytic multiply-add counts (2*MAC), per branch, for one clip forward.
struct FlopReport {
  std::int64_t frozen = 0;
  std::int64_t side = 0;      // side embedding, fusion projections, blocks, head
  std::int64_t adapters = 0;  // SME conv + TD / baseline convs
  std::int64_t adapters_td = 0;
  std::int64_t adapters_sme = 0;
  std::int64_t adapters_baseline = 0;
  std::int64_t total() const { return frozen + side + adapters; }
};

FlopReport count_flops(const ModelConfig& cfg);

struct BranchBytes {
  std::int64_t frozen = 0, side = 0, adapters = 0;
  std::int64_t total() const { return frozen + side + adapters; }
};

// Census of what one recorded forward pass keeps alive for backward.
struct TopologyAudit {
  std::string topology;
  BranchBytes retained_bytes;    // unique non-parameter saved tensors, by creation branch
  BranchBytes retained_nodes;    // graph nodes, by node branch
  BranchBytes aux_bytes;         // non-tensor backward state (argmax indices)
  std::int64_t frozen_internal_bytes = 0;  // saved by nodes recorded inside the frozen branch
  std::int64_t frozen_boundary_tensors = 0;  // detached fusion inputs kept by side nodes
  std::int64_t trainable_params = 0;
  std::int64_t frozen_params = 0;
  std::int64_t retained_total() const { return retained_bytes.total() + aux_bytes.total(); }
};

TopologyAudit audit_backward_memory(const ModelConfig& cfg, Topology topology,
                                    std::uint64_t seed, bool eval_mode = false);

// Census over an already-built graph, from its output tensor.
TopologyAudit census_graph(const Tensor& loss);

struct FlopMemReport {
  FlopReport flops;
  std::vector<TopologyAudit> topologies;
  std::string to_json() const;
  std::string to_table() const;
};

FlopMemReport profile_model(const ModelConfig& cfg, const std::vector<Topology>& topologies,
                            std::uint64_t seed);

}  // namespace tds
