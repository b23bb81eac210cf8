#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mnvton/rng.hpp"
#include "mnvton/tensor.hpp"

namespace mnvton {

// y = x W + b with W stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear normal(std::size_t in, std::size_t out, double stddev, Rng& rng);
  static Linear zeros(std::size_t in, std::size_t out);

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  Tensor operator()(const Tensor& x) const { return add_row(matmul(x, weight), bias); }
};

// Named handle to a trainable tensor. Order of a parameter list is the
// checkpoint order and the optimizer order.
struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

inline void push_linear(ParamList& out, const std::string& prefix, const Linear& l) {
  out.push_back({prefix + ".weight", l.weight});
  out.push_back({prefix + ".bias", l.bias});
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad = true);

}  // namespace mnvton
