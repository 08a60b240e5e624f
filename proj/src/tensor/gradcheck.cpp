#include "vitpose/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vitpose/rng.hpp"

namespace vitpose {

namespace {

constexpr double kStepAgreement = 1e-5;
constexpr double kMinStepRatio = 1e-3;

GradCheckResult run_check(const std::function<Tensor()>& f, std::vector<Tensor>& params,
                          const std::vector<std::vector<std::size_t>>& coords, double eps, double abs_floor) {
  std::vector<std::vector<double>> analytic(params.size());
  {
    for (auto& p : params) {
      p.set_requires_grad(true);
      p.zero_grad();
    }
    Tape tape;
    Tensor loss;
    {
      TapeGuard guard(tape);
      loss = f();
    }
    if (loss.numel() != 1) throw DimensionError("grad_check needs a scalar function, got " + shape_str(loss.shape()));
    tape.backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto g = params[i].grad();
      analytic[i].assign(g.begin(), g.end());
    }
  }

  GradCheckResult result;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].mutable_values();
    for (std::size_t j : coords[i]) {
      const double orig = values[j];
      auto central = [&](double h) {
        values[j] = orig + h;
        const double fp = f().item();
        values[j] = orig - h;
        const double fm = f().item();
        values[j] = orig;
        return (fp - fm) / (2.0 * h);
      };
      // Steps h and h/2 disagree when the stencil straddles a kink (ReLU, max); shrink
      // until they agree. The analytic value plays no part in choosing the step.
      double numeric = central(eps);
      for (double h = eps; h >= eps * kMinStepRatio; h /= 10.0) {
        const double coarse = h == eps ? numeric : central(h), fine = central(h / 2);
        if (std::abs(coarse - fine) <= kStepAgreement * std::max({abs_floor, std::abs(coarse), std::abs(fine)})) {
          numeric = fine;
          break;
        }
      }
      const double a = analytic[i][j];
      const double err = std::abs(a - numeric) / std::max({abs_floor, std::abs(a), std::abs(numeric)});
      if (err > result.max_rel_error || (i == 0 && j == coords[0].front())) {
        result = {err, i, j, a, numeric};
      }
    }
  }
  return result;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps, double abs_floor) {
  std::vector<std::vector<std::size_t>> coords(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    coords[i].resize(params[i].numel());
    std::iota(coords[i].begin(), coords[i].end(), std::size_t{0});
  }
  return run_check(f, params, coords, eps, abs_floor);
}

GradCheckResult grad_check_sampled(const std::function<Tensor()>& f, std::vector<Tensor> params, std::size_t max_coords,
                                   std::uint64_t seed, double eps, double abs_floor) {
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> coords(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<std::size_t> all(params[i].numel());
    std::iota(all.begin(), all.end(), std::size_t{0});
    rng.shuffle(all);
    all.resize(std::min(all.size(), max_coords));
    std::sort(all.begin(), all.end());
    coords[i] = std::move(all);
  }
  return run_check(f, params, coords, eps, abs_floor);
}

}  // namespace vitpose
