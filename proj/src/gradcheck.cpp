#include "diffuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "diffuse/error.hpp"
#include "diffuse/rng.hpp"

namespace diffuse {

namespace {

double projected(const Tensor& out, const std::vector<double>& r) {
  double s = 0.0;
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) s += d[i] * r[i];
  return s;
}

}  // namespace

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo, double hi, bool requires_grad) {
  Rng rng(seed);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

GradCheckResult check_gradients(const GradFn& f, const std::vector<Tensor>& inputs,
                                std::uint64_t seed, double step, double floor) {
  for (const Tensor& t : inputs) t.node()->grad.clear();
  Tensor out = f(inputs);
  Rng rng(derive_seed(seed, "projection"));
  std::vector<double> r(out.size());
  for (double& x : r) x = rng.uniform() * 2.0 - 1.0;

  Tensor loss = out.size() == 1 && out.rank() == 0
                    ? out
                    : sum(mul(out, Tensor::from_data(out.shape(), r)));
  if (out.size() == 1 && out.rank() == 0) r.assign(1, 1.0);
  loss.backward();

  GradCheckResult res;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor in = inputs[i];
    if (!in.requires_grad()) continue;
    const std::vector<double> analytic = in.grad();
    auto data = in.mutable_data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double orig = data[j];
      double plus, minus;
      {
        NoGradGuard ng;
        data[j] = orig + step;
        plus = projected(f(inputs), r);
        data[j] = orig - step;
        minus = projected(f(inputs), r);
      }
      data[j] = orig;
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = analytic[j];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++res.checked;
      if (err > res.max_rel_error || res.worst.empty()) {
        if (err >= res.max_rel_error) {
          res.max_rel_error = err;
          res.worst = "input " + std::to_string(i) + ", element " + std::to_string(j);
        }
      }
    }
  }
  if (res.checked == 0) throw Error("usage", "check_gradients: no input requires grad");
  return res;
}

}  // namespace diffuse
