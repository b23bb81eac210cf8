#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mnvton/config.hpp"
#include "mnvton/diffusion.hpp"
#include "mnvton/model.hpp"
#include "mnvton/tensor.hpp"

#include <json.hpp>

// Synthetic try-on: the label picks the upper or lower half of the target,
// the garment patch supplies the texture to paint there, and the agnostic
// target keeps everything outside the mask.
namespace mnvton {

enum class GarmentLabel : std::size_t { Upper = 1, Lower = 2 };  // values are text ids; 0 is padding
enum class TextureFamily { Stripes, Checker, Gradient };

std::string_view to_string(GarmentLabel label);
std::string_view to_string(TextureFamily family);
GarmentLabel swapped(GarmentLabel label);

// Pixel values live in [-1, 1]. Grids are [f, h, w, c]; the mask is [f, h, w, 1].
struct ToySample {
  Tensor target;
  Tensor agnostic;
  Tensor mask;
  Tensor garment;  // [1, g, g, c]
  GarmentLabel label = GarmentLabel::Upper;
  TextureFamily family = TextureFamily::Stripes;
  std::uint64_t seed = 0;

  InpaintingExample example() const;
  // Mask rows [begin, end) per frame.
  std::pair<std::size_t, std::size_t> mask_rows() const;
};

// Deterministic per seed. The label is the only thing label_override
// changes: texture, background and motion are drawn independently of it.
ToySample gen_sample(std::uint64_t seed, const TaskConfig& config,
                     std::optional<GarmentLabel> label_override = std::nullopt);

// ---- metrics -------------------------------------------------------------------
// Inputs are model-space grids; each metric maps them to [0, 1] with
// (v + 1) / 2 clamped, the dynamic range the constants below assume.

double to_unit(double v);

// Mean local SSIM: 11x11 Gaussian window (sigma 1.5, valid positions only),
// C1 = 0.01^2, C2 = 0.03^2. Averaged over channels, then frames.
double ssim(const Tensor& a, const Tensor& b);
// 10 log10(1 / MSE) on the unit range; +inf when MSE is 0.
double psnr(const Tensor& a, const Tensor& b);
// Mean squared error over mask-true pixels (all channels), unit range.
// ContractError when the mask is empty.
double masked_l2(const Tensor& a, const Tensor& b, const Tensor& mask);

struct SampleMetrics {
  std::uint64_t seed = 0;
  GarmentLabel label = GarmentLabel::Upper;
  double ssim = 0.0;
  double psnr = 0.0;
  double masked_l2 = 0.0;
};

struct EvalReport {
  std::string variant;
  std::string config_hash;
  std::vector<SampleMetrics> samples;
  double mean_ssim = 0.0;
  double mean_psnr = 0.0;  // over finite values; +inf when all are infinite
  std::size_t infinite_psnr = 0;
  double mean_masked_l2 = 0.0;

  void summarize();
};

nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);

// Any function producing a target grid for a sample.
using Generator = std::function<Tensor(const ToySample& sample)>;

// Evaluates samples seed_base .. seed_base + n - 1. Work is split across
// `threads` workers; results are identical to a sequential run.
EvalReport eval_with(const Generator& generate, const TaskConfig& task, std::size_t n_samples,
                     std::uint64_t seed_base, std::size_t threads = 1);

// DDIM-samples each evaluation instance with the model. ConfigError when the
// model was built for a different task geometry.
EvalReport eval_run(const Model& model, const RunConfig& config, std::size_t threads = 1);

// Seed of the sampler noise used for evaluation instance `sample_seed`.
std::uint64_t sampling_seed(std::uint64_t sample_seed);

// Reads MNVTON_THREADS (default 1).
std::size_t eval_threads_from_env();

// ---- training glue -------------------------------------------------------------

struct TrainedRun {
  Model model;
  std::vector<double> losses;
};

// Initializes from config.seed and trains on the infinite gen_sample stream.
TrainedRun train_run(const RunConfig& config, const MetricSink& sink = {});

// ---- image I/O -----------------------------------------------------------------

// One frame of a [f, h, w, c] grid as 8-bit binary PPM (P6). c = 1 is written
// as gray. Model-space values are mapped to [0, 255] via to_unit.
void write_ppm(const std::filesystem::path& path, const Tensor& grid, std::size_t frame = 0);
// [1, h, w, 3] grid in model space with values (k / 255) * 2 - 1.
Tensor read_ppm(const std::filesystem::path& path);

// Writes target/agnostic/mask/garment PPMs per frame plus a JSON sidecar.
void export_sample(const std::filesystem::path& dir, const ToySample& sample, const std::string& config_hash);

}  // namespace mnvton
