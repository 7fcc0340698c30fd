#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vx/tensor.hpp"

namespace vx {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> inputs;
  double worst = 0.0;

  bool passed(double tol) const { return worst < tol; }
};

// Compares reverse-mode gradients of the scalar function f against central
// finite differences with step h. Relative error per element is
// |a - n| / max(|a|, |n|, 1e-8); the report keeps the max per input.
// f must be deterministic in its inputs. Throws ContractError when f does
// not return a scalar.
GradCheckReport grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> inputs, double h = 1e-5,
    std::vector<std::string> names = {});

}  // namespace vx
