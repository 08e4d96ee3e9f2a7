#pragma once
// Central finite-difference validation of analytic gradients, per op and for
// the full encoder -> planning tokens -> fusion -> waypoint-loss pipeline.

#include <functional>
#include <string>
#include <vector>

#include "minidrive/rng.hpp"
#include "minidrive/tensor.hpp"

namespace md::gradcheck {

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
  int samples = 0;
  bool pass = false;
};

// f rebuilds a scalar loss from the current leaf values on every call.
// Samples up to samples_per_leaf coordinates per leaf; h = 1e-5 central
// differences; rel err = |fd-an| / max(|fd|, |an|, 1e-6).
CheckResult check(const std::string& name, const std::function<Tensor()>& f,
                  const std::vector<Tensor>& leaves, int samples_per_leaf, Rng& rng,
                  double tol = 1e-4, double h = 1e-5);

// The full suite (every differentiable op, each loss kernel, a deformable
// attention block, and the tiny end-to-end pipeline).
std::vector<CheckResult> run_suite(std::uint64_t seed);
bool all_pass(const std::vector<CheckResult>& results);

}  // namespace md::gradcheck
