#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mnvton/model.hpp"
#include "mnvton/nn.hpp"
#include "mnvton/rng.hpp"
#include "mnvton/tensor.hpp"

namespace mnvton {

struct DiffusionSchedule {
  std::size_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
};

// Betas linearly spaced from beta_1 to beta_T; 0 < beta_1 <= beta_T < 1.
DiffusionSchedule linear_schedule(std::size_t T, double beta_1, double beta_T);

// sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps. IndexError for t >= T.
Tensor q_sample(const DiffusionSchedule& schedule, const Tensor& x0, std::size_t t, const Tensor& eps);
Tensor q_sample_at(double alpha_bar, const Tensor& x0, const Tensor& eps);

// One conditioned inpainting instance as the denoiser sees it.
struct InpaintingExample {
  std::vector<std::size_t> text_ids;
  Tensor garment;   // [1, hg, wg, c]
  Tensor agnostic;  // [f, h, w, c]
  Tensor mask;      // [f, h, w, 1]
  Tensor x0;        // [f, h, w, c]; may be undefined at sampling time
};

ModelInput make_model_input(const InpaintingExample& ex, const Tensor& noisy_target);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double max_grad_norm = 1.0;  // <= 0 disables clipping
};

class Adam {
 public:
  Adam(ParamList params, AdamConfig config);

  void zero_grad();
  // Clips the global grad norm, then applies one bias-corrected update.
  void step();
  double last_grad_norm() const { return last_grad_norm_; }
  std::size_t steps_taken() const { return t_; }

 private:
  ParamList params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
  double last_grad_norm_ = 0.0;
};

struct TrainConfig {
  AdamConfig adam;
  std::size_t steps = 2000;
  std::size_t batch = 4;
  std::uint64_t seed = 0;
  std::size_t log_interval = 50;
  void validate() const;
};

// Loss of one example at a fixed timestep and noise; no parameter update.
Tensor denoising_loss(const Model& model, const DiffusionSchedule& schedule, const InpaintingExample& ex,
                      std::size_t t, const Tensor& eps);

// MSE between predicted and true noise on target tokens, averaged over the
// batch, followed by one Adam update. NumericalError on a non-finite loss.
double train_step(const Model& model, std::span<const InpaintingExample> batch, Adam& optimizer,
                  const DiffusionSchedule& schedule, Rng& noise_rng);

struct MetricRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double wallclock_ms = 0.0;
};

using ExampleSource = std::function<InpaintingExample(std::uint64_t seed)>;
using MetricSink = std::function<void(const MetricRecord&)>;

// Full loop. Example seeds and noise streams derive from config.seed and the
// step index only, so equal configs give bit-identical parameters.
std::vector<double> train_model(Model& model, const TrainConfig& config, const DiffusionSchedule& schedule,
                                const ExampleSource& source, const MetricSink& sink = {});

// Descending timesteps visited by an S-step sampler: ((k+1)*T)/S - 1.
std::vector<std::size_t> ddim_timesteps(std::size_t T, std::size_t steps);

// eps prediction for a noisy grid at timestep t.
using EpsPredictor = std::function<Tensor(const Tensor& x_t, std::size_t t)>;

// DDIM from x_start at timesteps.front() down to a clean estimate. eta = 0 is
// deterministic; eta > 0 draws fresh noise from rng.
Tensor ddim_run(const EpsPredictor& predict, const Tensor& x_start, const DiffusionSchedule& schedule,
                std::span<const std::size_t> timesteps, double eta, Rng& rng);

// Samples a target grid for the conditioning in ex, starting from unit noise
// drawn from seed.
Tensor ddim_sample(const Model& model, const InpaintingExample& ex, const DiffusionSchedule& schedule,
                   std::size_t steps, std::uint64_t seed, double eta = 0.0);

}  // namespace mnvton
