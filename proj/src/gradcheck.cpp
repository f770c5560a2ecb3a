#include "tds/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "tds/rng.hpp"

namespace tds {

double grad_check(const std::function<Tensor()>& function, const std::vector<Tensor>& params,
                  const GradCheckOptions& opts) {
  if (opts.eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");

  Tensor loss = function();
  if (!std::isfinite(loss.item())) throw std::runtime_error("grad_check: non-finite loss");
  GradientMap grads = backward(loss);

  double worst = 0.0;
  std::mt19937_64 gen(opts.sample_seed);
  for (const Tensor& p : params) {
    if (!p.requires_grad()) {
      throw std::invalid_argument("grad_check: parameter without requires_grad");
    }
    const std::int64_t n = p.numel();
    std::vector<std::int64_t> picks;
    if (opts.max_samples_per_param <= 0 || opts.max_samples_per_param >= n) {
      picks.resize(static_cast<std::size_t>(n));
      std::iota(picks.begin(), picks.end(), 0);
    } else {
      std::uniform_int_distribution<std::int64_t> dist(0, n - 1);
      for (int i = 0; i < opts.max_samples_per_param; ++i) picks.push_back(dist(gen));
    }

    Tensor mutable_p = p;
    auto& data = mutable_p.mutable_values();
    const bool reached = grads.contains(p);
    for (std::int64_t idx : picks) {
      const double saved = data[static_cast<std::size_t>(idx)];
      data[static_cast<std::size_t>(idx)] = saved + opts.eps;
      double f_plus;
      {
        NoGradGuard no_grad;
        f_plus = function().item();
      }
      data[static_cast<std::size_t>(idx)] = saved - opts.eps;
      double f_minus;
      {
        NoGradGuard no_grad;
        f_minus = function().item();
      }
      data[static_cast<std::size_t>(idx)] = saved;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
        throw std::runtime_error("grad_check: non-finite loss during perturbation");
      }
      const double numeric = (f_plus - f_minus) / (2.0 * opts.eps);
      const double analytic = reached ? grads.at(p).value_at(idx) : 0.0;
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace tds
