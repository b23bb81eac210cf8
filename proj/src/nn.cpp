#include "mnvton/nn.hpp"

namespace mnvton {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

Linear Linear::normal(std::size_t in, std::size_t out, double stddev, Rng& rng) {
  return {normal_tensor({in, out}, stddev, rng), Tensor::zeros({out}, true)};
}

Linear Linear::zeros(std::size_t in, std::size_t out) {
  return {Tensor::zeros({in, out}, true), Tensor::zeros({out}, true)};
}

}  // namespace mnvton
