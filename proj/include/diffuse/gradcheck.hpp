#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "diffuse/tensor.hpp"

namespace diffuse {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "input i, element j" of the largest error
  std::size_t checked = 0;
};

using GradFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares reverse-mode gradients of `f` with central differences for every
/// element of every input. A non-scalar output is reduced to sum(out * R) with
/// a fixed random R drawn from `seed`. Relative error per element is
/// |a - n| / max(|a|, |n|, floor).
GradCheckResult check_gradients(const GradFn& f, const std::vector<Tensor>& inputs,
                                std::uint64_t seed, double step = 1e-5, double floor = 1e-3);

/// Leaf tensor with entries uniform on [lo, hi).
Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                     bool requires_grad = true);

}  // namespace diffuse
