#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "iac/diff/ops.hpp"

namespace iac::check {

using Builder = std::function<diff::Var(diff::Tape&, const std::vector<diff::Var>&)>;

struct GradCheck {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients of <f(inputs), R> (R fixed random) with central
/// differences. At most `max_per_input` entries of each input are probed.
inline GradCheck check_gradients(const Builder& f, const std::vector<Tensor>& inputs, std::uint64_t seed,
                                 double h = 1e-5, std::size_t max_per_input = 48) {
  Rng rng(seed);
  Tensor proj;
  auto eval = [&](const std::vector<Tensor>& in) {
    diff::Tape tape;
    std::vector<diff::Var> vs;
    for (const auto& x : in) vs.push_back(tape.constant(x));
    const Tensor& y = f(tape, vs).value();
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * proj[i];
    return s;
  };

  diff::Tape tape;
  std::vector<diff::Var> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
  diff::Var y = f(tape, leaves);
  proj = Tensor(y.shape());
  for (double& v : proj.values()) v = rng.uniform(-1.0, 1.0);
  diff::Var loss = diff::sum(y * tape.constant(proj));
  tape.backward(loss);

  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  GradCheck out;
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor& g = tape.grad(leaves[k]);
    std::vector<std::size_t> idx(inputs[k].size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > max_per_input) {
      for (std::size_t i = 0; i < max_per_input; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      idx.resize(max_per_input);
    }
    for (std::size_t i : idx) {
      const double x0 = inputs[k][i];
      probe[k][i] = x0 + h;
      const double fp = eval(probe);
      probe[k][i] = x0 - h;
      const double fm = eval(probe);
      probe[k][i] = x0;
      const double num = (fp - fm) / (2.0 * h);
      diff2 += (g[i] - num) * (g[i] - num);
      a2 += g[i] * g[i];
      n2 += num * num;
      ++out.checked;
    }
  }
  const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-300});
  out.rel_error = std::sqrt(diff2) / denom;
  return out;
}

inline Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace iac::check
