#include "ulsa/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace ulsa {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().item();
}

}  // namespace

GradCheckResult check_gradients(const ScalarFn& f, const std::vector<Tensor>& inputs, double h, std::size_t max_entries,
                                const std::vector<std::string>& names) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    tape.backward(f(tape, vars));
    for (const auto& v : vars) analytic.push_back(v.grad());
  }

  GradCheckResult res;
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::size_t n = inputs[k].size();
    const std::size_t stride = (max_entries == 0 || n <= max_entries) ? 1 : n / max_entries;
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < n; i += stride) {
      const double x0 = inputs[k][i];
      probe[k][i] = x0 + h;
      const double fp = evaluate(f, probe);
      probe[k][i] = x0 - h;
      const double fm = evaluate(f, probe);
      probe[k][i] = x0;
      const double num = (fp - fm) / (2.0 * h);
      const double ana = analytic[k][i];
      diff2 += (ana - num) * (ana - num);
      a2 += ana * ana;
      n2 += num * num;
      res.max_abs_error = std::max(res.max_abs_error, std::abs(ana - num));
      ++res.checked;
    }
    const double denom = std::sqrt(a2) + std::sqrt(n2);
    const double rel = denom > 0.0 ? std::sqrt(diff2) / denom : 0.0;
    if (rel >= res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_input = k < names.size() ? names[k] : "input" + std::to_string(k);
    }
  }
  return res;
}

}  // namespace ulsa
