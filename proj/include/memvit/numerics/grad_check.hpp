#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "memvit/numerics/tensor.hpp"

namespace memvit {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "name[i]" of the worst element
  Index checked = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences, elementwise: |analytic - numeric| / max(1, |numeric|).
/// `f` must rebuild its graph from the current parameter values on every call.
template <typename Scalar>
GradCheckResult grad_check(const std::function<Tensor<Scalar>()>& f, const std::vector<Parameter<Scalar>*>& params,
                           Scalar eps = Scalar(1e-5)) {
  for (auto* p : params) p->tensor.zero_grad();
  Tensor<Scalar> out = f();
  if (out.size() != 1) throw ContractError("grad_check needs a scalar function, got " + shape_string(out.rows(), out.cols()));
  out.backward();
  std::vector<Matrix<Scalar>> analytic;
  for (auto* p : params) analytic.push_back(p->tensor.grad());

  GradCheckResult r;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& w = params[k]->tensor.mutable_value();
    for (Index i = 0; i < w.size(); ++i) {
      const Scalar saved = w.data()[i];
      w.data()[i] = saved + eps;
      const double up = static_cast<double>(f().item());
      w.data()[i] = saved - eps;
      const double down = static_cast<double>(f().item());
      w.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * static_cast<double>(eps));
      const double err = std::abs(static_cast<double>(analytic[k].data()[i]) - numeric) / std::max(1.0, std::abs(numeric));
      if (err > r.max_rel_error || r.checked == 0) {
        r.max_rel_error = std::max(r.max_rel_error, err);
        if (err >= r.max_rel_error) r.worst = params[k]->name + "[" + std::to_string(i) + "]";
      }
      ++r.checked;
    }
  }
  return r;
}

}  // namespace memvit
