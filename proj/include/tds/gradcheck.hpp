#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "tds/tensor.hpp"

namespace tds {

struct GradCheckOptions {
  double eps = 1e-5;
  // 0 checks every element; otherwise at most this many per parameter,
  // sampled from a seeded stream.
  int max_samples_per_param = 0;
  std::uint64_t sample_seed = 7;
};

// Central-difference check of d f / d params against one reverse-mode pass.
// Returns the worst relative error max(|a-n|) / max(|a|,|n|,1e-8).
double grad_check(const std::function<Tensor()>& function, const std::vector<Tensor>& params,
                  const GradCheckOptions& opts = {});

}  // namespace tds
