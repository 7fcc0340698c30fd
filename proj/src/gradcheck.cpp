#include "vx/gradcheck.hpp"

#include <cmath>

namespace vx {

GradCheckReport grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> inputs, double h, std::vector<std::string> names) {
  for (Tensor& t : inputs) t.set_requires_grad(true);

  std::vector<Tensor> analytic(inputs.size());
  {
    Tape tape;
    Tensor loss = f(inputs);
    if (loss.size() != 1) {
      throw ContractError("grad_check: function must return a scalar, got " +
                          shape_str(loss.shape()));
    }
    tape.backward(loss);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      analytic[i] = tape.has_grad(inputs[i]) ? tape.grad(inputs[i]).clone()
                                             : Tensor(inputs[i].shape(), 0.0);
    }
  }

  NoGradGuard eval;
  GradCheckReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    GradCheckEntry entry;
    entry.name = i < names.size() ? names[i] : "input" + std::to_string(i);
    double* p = inputs[i].data();
    const double* a = analytic[i].data();
    for (std::size_t j = 0, n = inputs[i].size(); j < n; ++j) {
      const double saved = p[j];
      p[j] = saved + h;
      const double up = f(inputs).item();
      p[j] = saved - h;
      const double dn = f(inputs).item();
      p[j] = saved;
      const double numeric = (up - dn) / (2.0 * h);
      const double denom = std::max({std::abs(a[j]), std::abs(numeric), 1e-8});
      const double rel = std::abs(a[j] - numeric) / denom;
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    report.worst = std::max(report.worst, entry.max_rel_err);
    report.inputs.push_back(std::move(entry));
  }
  return report;
}

}  // namespace vx
