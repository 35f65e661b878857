#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "srnn/autodiff.hpp"

namespace srnn::test {

using TapeFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheck {
  double rel_error = 0.0;  // ||ad - fd|| / max(||fd||, 1e-12) over all inputs
  double fd_norm = 0.0;
};

// Reduces f's output to a scalar with a fixed random projection, then compares
// the reverse sweep against central differences on every input entry.
inline GradCheck check_gradient(const TapeFn& f, const std::vector<Tensor>& inputs, std::uint64_t seed = 7,
                                double step = 1e-6) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);

  Tensor proj;
  auto scalar = [&](const std::vector<Tensor>& xs, bool record, std::vector<Tensor>* grads) {
    Tape tape(record);
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(tape.leaf(x));
    const Var out = f(tape, vars);
    if (proj.empty()) {
      proj = Tensor(out.rows(), out.cols());
      for (double& v : proj.data) v = n(rng);
    }
    const Var loss = sum(mul(out, tape.constant(proj)));
    if (grads) {
      tape.backward(loss);
      for (const Var& v : vars) grads->push_back(tape.grad(v));
    }
    return loss.value().data[0];
  };

  std::vector<Tensor> ad;
  scalar(inputs, true, &ad);

  double diff2 = 0.0, fd2 = 0.0;
  std::vector<Tensor> xs = inputs;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (std::size_t i = 0; i < xs[k].size(); ++i) {
      const double x0 = xs[k].data[i];
      const double hh = step * std::max(1.0, std::abs(x0));
      xs[k].data[i] = x0 + hh;
      const double fp = scalar(xs, false, nullptr);
      xs[k].data[i] = x0 - hh;
      const double fm = scalar(xs, false, nullptr);
      xs[k].data[i] = x0;
      const double fd = (fp - fm) / (2.0 * hh);
      diff2 += (ad[k].data[i] - fd) * (ad[k].data[i] - fd);
      fd2 += fd * fd;
    }
  }
  return {std::sqrt(diff2) / std::max(std::sqrt(fd2), 1e-12), std::sqrt(fd2)};
}

inline Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0,
                            double offset = 0.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(r, c);
  for (double& v : t.data) v = offset + n(rng);
  return t;
}

}  // namespace srnn::test
