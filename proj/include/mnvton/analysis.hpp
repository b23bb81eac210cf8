#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mnvton/config.hpp"
#include "mnvton/model.hpp"
#include "mnvton/toytask.hpp"

#include <json.hpp>

namespace mnvton {

// ---- cost accounting -------------------------------------------------------------

struct SequenceLengths {
  std::size_t text = 0;
  std::size_t garment = 0;
  std::size_t target = 0;
};

// Multiply-adds spent in attention over a forward pass of N blocks. Per layer
// with L_q query tokens and L_kv key/value tokens:
//   Q and output projections  2 * L_q * d^2
//   K and V projections       2 * L_kv * d^2
//   scores and value mixing   2 * L_q * L_kv * d
// Heads split d and therefore do not change the total.
//   MN variants   L_q = L_kv = L_text + L_garment + L_target
//   NaiveSplit    first block L_q = L_text + L_target, L_kv = all tokens;
//                 later blocks see only the shrunken sequence
//   DualNet       main L_q = L_text + L_target, L_kv = L_q + L_garment;
//                 plus ReferenceNet self-attention over the garment tokens
// Worked example: L_text = 1, others 0, d = H = N = 1 gives 4 + 2 = 6
// multiply-adds.
std::uint64_t attention_macs(const SequenceLengths& lengths, std::size_t d, std::size_t heads, std::size_t blocks,
                             BlockVariant variant);
// Two FLOPs per multiply-add.
std::uint64_t attention_flops(const SequenceLengths& lengths, std::size_t d, std::size_t heads, std::size_t blocks,
                              BlockVariant variant);

// Largest per-layer activation footprint in scalars: attention probabilities
// H * L_q * L_kv, the MLP hidden layer 4d * L_q, Q/output rows 2d * L_q and
// K/V rows 2d * L_kv. For DualNet the reference layer adds its own.
std::uint64_t peak_activation_elements(const SequenceLengths& lengths, std::size_t d, std::size_t heads,
                                       std::size_t blocks, BlockVariant variant);

SequenceLengths sequence_lengths(const ModelConfig& config);

struct VariantCost {
  BlockVariant variant;
  std::size_t params = 0;
  std::uint64_t attention_flops = 0;
  std::uint64_t peak_activations = 0;
};

struct CostReport {
  std::size_t d = 0, heads = 0, blocks = 0;
  SequenceLengths lengths;
  std::vector<VariantCost> variants;  // one per BlockVariant
  double dual_single_ratio = 0.0;     // params(DualNet) / params(MN_V3)
};

// Builds every variant at the dimensions of `base` and counts it.
CostReport cost_report(const ModelConfig& base);
nlohmann::json to_json(const CostReport& r);

// ---- PCA ------------------------------------------------------------------------

struct PCAResult {
  std::size_t k = 0;
  std::vector<double> components;  // [d, k] row-major; columns orthonormal
  std::vector<double> eigenvalues; // all d, descending
  std::vector<double> explained;   // first k variance ratios
  Tensor scores;                   // [n, k]
};

// Per-feature-matrix PCA over rows of x ([n, d]) using the d x d covariance of
// the mean-centered rows. Each component is sign-fixed so its largest-magnitude
// loading is positive. ContractError unless 1 <= k <= min(n, d).
PCAResult pca(const Tensor& x, std::size_t k);

struct BlockProjection {
  std::size_t block = 0;
  bool has_garment = false;  // false once the variant dropped the garment tokens
  PCAResult pca;
  GridShape token_grid;      // garment patch grid, channels = 1
  double texture_score = 0.0;
};

// Garment-token features at each block output of one denoising forward pass
// (noisy target at timestep t, noise from noise_seed).
std::vector<BlockProjection> pca_project(const Model& model, const ToySample& sample, const DiffusionSchedule& schedule,
                                         std::size_t t, std::size_t k, std::uint64_t noise_seed);

// Component c of a projection as a [f, hp, wp, 1] grid scaled into [-1, 1].
Tensor component_heatmap(const BlockProjection& p, std::size_t component);

// Mean luminance of each garment patch, [f, hp, wp, 1].
Tensor patch_luminance(const Tensor& garment, std::size_t patch);

// |normalized cross-correlation| between two equally shaped grids; 0 when
// either is constant.
double abs_ncc(const Tensor& a, const Tensor& b);

// ---- ablation --------------------------------------------------------------------

struct AblationRow {
  BlockVariant variant;
  std::uint64_t seed = 0;
  std::string config_hash;
  EvalReport report;
  double final_loss = 0.0;
};

struct AblationTable {
  std::string budget_hash;
  std::vector<AblationRow> rows;

  // Mean of per-run mean SSIM for a variant; NaN when absent.
  double mean_ssim(BlockVariant v) const;
  const AblationRow* find(BlockVariant v, std::uint64_t seed) const;
};

// Called after each run trains, before it is evaluated.
using TrainedHook = std::function<void(const RunConfig&, const Model&)>;

// Trains and evaluates every config. ContractError when the configs do not
// share a budget (dims, schedule, steps, task, eval set).
AblationTable variant_ablation(const std::vector<RunConfig>& runs, std::size_t eval_threads = 1,
                               const TrainedHook& hook = {});
// The variants x seeds grid of base.ablation.
std::vector<RunConfig> ablation_runs(const RunConfig& base);

nlohmann::json to_json(const AblationTable& t);
// Fixed-width text table: one line per variant with per-seed and mean SSIM.
std::string render_table(const AblationTable& t);

}  // namespace mnvton
