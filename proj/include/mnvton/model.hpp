#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "mnvton/blocks.hpp"
#include "mnvton/modality.hpp"
#include "mnvton/nn.hpp"

namespace mnvton {

struct ModelConfig {
  BlockVariant variant = BlockVariant::MN_V3;
  std::size_t d = 24;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t patch = 2;
  std::size_t vocab = 3;  // {pad, upper, lower}
  GridShape garment_grid{1, 8, 8, 3};
  GridShape target_grid{1, 16, 16, 3};
  double init_std = 0.02;

  // Target tokens carry [noisy | agnostic | mask] per pixel.
  std::size_t target_in_channels() const { return 2 * target_grid.channels + 1; }
  std::size_t out_features() const { return patch * patch * target_grid.channels; }
  // Throws ConfigError on inconsistent dimensions.
  void validate() const;
};

// Stack of N blocks plus input embedding, timestep MLP and an AdaLN-zero
// modulated output projection. For DualNet the garment goes through `ref`.
struct Model {
  ModelConfig config;
  TokenEmbedder embed;
  Linear time_in, time_out;
  std::vector<DiTBlockParams> blocks;
  Linear final_adaln;  // cond -> (shift, scale)
  Linear final_out;    // d -> p*p*c
  std::optional<ReferenceNetParams> ref;

  // Every trainable tensor in a fixed order (checkpoint and optimizer order).
  ParamList parameters() const;
};

Model init_model(const ModelConfig& config, std::uint64_t seed);

struct ModelInput {
  std::vector<std::size_t> text_ids;
  Tensor garment;       // [1, hg, wg, c]
  Tensor target_input;  // [f, h, w, 2c+1]: noisy target | agnostic | mask
};

struct ForwardTrace {
  // Garment-segment features at every block output; empty rows once a
  // variant has dropped the garment tokens.
  std::vector<Tensor> garment_features;
  std::vector<BlockTrace> blocks;
  std::vector<BlockTrace> ref_blocks;
};

Tensor conditioning(const Model& model, double t);

// Predicted noise for the target tokens only, [L_target, p*p*c].
Tensor model_forward(const Model& model, const ModelInput& input, double t, ForwardTrace* trace = nullptr);

std::size_t count_params(const Model& model);

// Overwrites every parameter with N(0, stddev^2) draws, including the
// zero-initialized gates, so that all paths carry gradient.
void randomize_parameters(const Model& model, double stddev, std::uint64_t seed);

// Central-difference check of d(sum(w * output))/d(params) for a randomized
// model on a random input. Returns the max relative error.
double model_grad_check(const ModelConfig& config, std::uint64_t seed, double param_stddev = 0.3);

}  // namespace mnvton
