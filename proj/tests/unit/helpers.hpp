#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mnvton/blocks.hpp"
#include "mnvton/modality.hpp"
#include "mnvton/nn.hpp"
#include "mnvton/rng.hpp"
#include "mnvton/tensor.hpp"

namespace testing {

using namespace mnvton;

inline Tensor random_tensor(const Shape& shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(shape, std::move(v), requires_grad);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  const auto av = a.data();
  const auto bv = b.data();
  double m = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

inline void fill_normal(const Linear& l, Rng& rng, double stddev) {
  Tensor w = l.weight, b = l.bias;
  for (double& x : w.mutable_data()) x = rng.normal(0.0, stddev);
  for (double& x : b.mutable_data()) x = rng.normal(0.0, stddev);
}

// Gives every map (including the zero-initialized AdaLN maps) random weights.
inline void randomize_block(const DiTBlockParams& p, Rng& rng, double stddev = 0.3) {
  for (const Linear* l : {&p.wq, &p.wk, &p.wv, &p.wo, &p.mlp_in, &p.mlp_out}) fill_normal(*l, rng, stddev);
  for (const auto& g : p.adaln.groups) fill_normal(g, rng, stddev);
}

inline TokenStream random_stream(std::size_t text, std::size_t garment, std::size_t target, std::size_t d, Rng& rng,
                                 bool requires_grad = false) {
  TokenStream s;
  s.tokens = random_tensor({text + garment + target, d}, rng, 1.0, requires_grad);
  s.layout = ModalityLayout::from_counts(text, garment, target);
  return s;
}

}  // namespace testing
