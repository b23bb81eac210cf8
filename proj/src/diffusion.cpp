#include "mnvton/diffusion.hpp"

#include <chrono>
#include <cmath>
#include <sstream>
#include <string>

#include "mnvton/errors.hpp"
#include "mnvton/modality.hpp"

namespace mnvton {

DiffusionSchedule linear_schedule(std::size_t T, double beta_1, double beta_T) {
  if (T == 0) throw ConfigError("schedule needs T >= 1");
  if (!(beta_1 > 0.0 && beta_1 <= beta_T && beta_T < 1.0)) {
    throw ConfigError("schedule needs 0 < beta_1 <= beta_T < 1");
  }
  DiffusionSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(T - 1);
    s.beta[t] = beta_1 + (beta_T - beta_1) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

Tensor q_sample_at(double alpha_bar, const Tensor& x0, const Tensor& eps) {
  if (x0.shape() != eps.shape()) {
    throw DimensionError("q_sample: x0 " + shape_str(x0.shape()) + " and eps " + shape_str(eps.shape()) +
                         " differ");
  }
  const double a = std::sqrt(alpha_bar);
  const double b = std::sqrt(1.0 - alpha_bar);
  std::vector<double> out(x0.numel());
  const auto xv = x0.data();
  const auto ev = eps.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * xv[i] + b * ev[i];
  return Tensor::from(x0.shape(), std::move(out));
}

Tensor q_sample(const DiffusionSchedule& schedule, const Tensor& x0, std::size_t t, const Tensor& eps) {
  if (t >= schedule.T) {
    throw IndexError("timestep " + std::to_string(t) + " outside schedule of " + std::to_string(schedule.T));
  }
  return q_sample_at(schedule.alpha_bar[t], x0, eps);
}

ModelInput make_model_input(const InpaintingExample& ex, const Tensor& noisy_target) {
  const Tensor grids[] = {noisy_target, ex.agnostic, ex.mask};
  return {ex.text_ids, ex.garment, concat_channels(grids)};
}

// ---- optimizer -----------------------------------------------------------------

Adam::Adam(ParamList params, AdamConfig config) : params_(std::move(params)), config_(config) {
  if (!(config_.lr > 0.0)) throw ConfigError("learning rate must be positive");
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Adam::step() {
  double sq = 0.0;
  for (auto& p : params_) {
    for (double g : p.tensor.grad()) sq += g * g;
  }
  last_grad_norm_ = std::sqrt(sq);
  double clip = 1.0;
  if (config_.max_grad_norm > 0.0 && last_grad_norm_ > config_.max_grad_norm) {
    clip = config_.max_grad_norm / last_grad_norm_;
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].tensor.mutable_data();
    const auto g = params_[i].tensor.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * clip;
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

// ---- training ------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(adam.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (steps == 0) throw ConfigError("train.steps must be >= 1");
  if (batch == 0) throw ConfigError("train.batch must be >= 1");
  if (log_interval == 0) throw ConfigError("train.log_interval must be >= 1");
}

Tensor denoising_loss(const Model& model, const DiffusionSchedule& schedule, const InpaintingExample& ex,
                      std::size_t t, const Tensor& eps) {
  const Tensor x_t = q_sample(schedule, ex.x0, t, eps);
  const Tensor pred = model_forward(model, make_model_input(ex, x_t), static_cast<double>(t));
  return mse_loss(pred, patchify(eps, model.config.patch));
}

namespace {

Tensor unit_noise(const Shape& shape, Rng& rng) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor::from(shape, std::move(v));
}

}  // namespace

double train_step(const Model& model, std::span<const InpaintingExample> batch, Adam& optimizer,
                  const DiffusionSchedule& schedule, Rng& noise_rng) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  optimizer.zero_grad();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const InpaintingExample& ex : batch) {
    const auto t = static_cast<std::size_t>(noise_rng.below(schedule.T));
    const Tensor eps = unit_noise(ex.x0.shape(), noise_rng);
    const Tensor loss = denoising_loss(model, schedule, ex, t, eps);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      std::ostringstream os;
      os << "non-finite loss " << value << " at timestep " << t;
      throw NumericalError(os.str());
    }
    total += value;
    scale(loss, inv_b).backward();
  }
  optimizer.step();
  return total * inv_b;
}

std::vector<double> train_model(Model& model, const TrainConfig& config, const DiffusionSchedule& schedule,
                                const ExampleSource& source, const MetricSink& sink) {
  config.validate();
  Adam optimizer(model.parameters(), config.adam);
  std::vector<double> losses;
  losses.reserve(config.steps);
  const auto start = std::chrono::steady_clock::now();
  std::vector<InpaintingExample> batch(config.batch);
  for (std::size_t step = 0; step < config.steps; ++step) {
    for (std::size_t b = 0; b < config.batch; ++b) batch[b] = source(mix_seed(config.seed, step, b));
    Rng noise_rng(mix_seed(config.seed ^ 0x6E6F697365ULL, step));
    const double loss = train_step(model, batch, optimizer, schedule, noise_rng);
    losses.push_back(loss);
    if (sink && ((step + 1) % config.log_interval == 0 || step + 1 == config.steps)) {
      const auto now = std::chrono::steady_clock::now();
      sink({step + 1, loss, std::chrono::duration<double, std::milli>(now - start).count()});
    }
  }
  return losses;
}

// ---- sampling ------------------------------------------------------------------

std::vector<std::size_t> ddim_timesteps(std::size_t T, std::size_t steps) {
  if (steps == 0 || steps > T) throw ConfigError("DDIM steps must be in [1, T]");
  std::vector<std::size_t> ts;
  for (std::size_t k = steps; k-- > 0;) ts.push_back(((k + 1) * T) / steps - 1);
  return ts;
}

Tensor ddim_run(const EpsPredictor& predict, const Tensor& x_start, const DiffusionSchedule& schedule,
                std::span<const std::size_t> timesteps, double eta, Rng& rng) {
  std::vector<double> x = x_start.to_vector();
  const Shape shape = x_start.shape();
  for (std::size_t i = 0; i < timesteps.size(); ++i) {
    const std::size_t t = timesteps[i];
    if (t >= schedule.T) throw IndexError("DDIM timestep outside schedule");
    const double ab = schedule.alpha_bar[t];
    const double ab_prev = i + 1 < timesteps.size() ? schedule.alpha_bar[timesteps[i + 1]] : 1.0;
    const Tensor eps = predict(Tensor::from(shape, x), t);
    if (eps.numel() != x.size()) throw DimensionError("eps prediction does not match the sample shape");
    const auto e = eps.data();
    const double sigma =
        eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(std::max(0.0, 1.0 - ab / ab_prev));
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab), sp = std::sqrt(ab_prev);
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double x0_hat = (x[j] - sb * e[j]) / sa;
      double next = sp * x0_hat + dir * e[j];
      if (sigma > 0.0) next += sigma * rng.normal();
      x[j] = next;
    }
  }
  return Tensor::from(shape, std::move(x));
}

Tensor ddim_sample(const Model& model, const InpaintingExample& ex, const DiffusionSchedule& schedule,
                   std::size_t steps, std::uint64_t seed, double eta) {
  NoGradGuard no_grad;
  const GridShape target = grid_of(ex.agnostic);
  Rng rng(seed);
  const Tensor x_start = unit_noise(target.tensor_shape(), rng);
  const auto ts = ddim_timesteps(schedule.T, steps);
  const std::size_t patch = model.config.patch;
  EpsPredictor predict = [&](const Tensor& x_t, std::size_t t) {
    const Tensor tokens = model_forward(model, make_model_input(ex, x_t), static_cast<double>(t));
    return unpatchify(tokens, target, patch);
  };
  return ddim_run(predict, x_start, schedule, ts, eta, rng);
}

}  // namespace mnvton
