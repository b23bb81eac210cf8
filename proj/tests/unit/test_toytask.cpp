#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "mnvton/errors.hpp"
#include "mnvton/toytask.hpp"

using namespace mnvton;
using testing::bit_equal;
using testing::random_tensor;

namespace {

// Grid from unit-range values.
Tensor unit_grid(const Shape& shape, const std::vector<double>& unit) {
  std::vector<double> v(unit.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = unit[i] * 2.0 - 1.0;
  return Tensor::from(shape, v);
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("mnvton_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_SUITE("toytask") {

TEST_CASE("mask, agnostic and determinism") {
  TaskConfig task;
  const ToySample up = gen_sample(1, task, GarmentLabel::Upper);
  const auto m = up.mask.data();
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) CHECK(m[y * 16 + x] == (y < 8 ? 1.0 : 0.0));
  CHECK(up.mask_rows() == std::pair<std::size_t, std::size_t>{0, 8});

  for (std::uint64_t seed : {2u, 3u, 4u}) {
    const ToySample s = gen_sample(seed, task);
    const auto t = s.target.data(), a = s.agnostic.data(), mk = s.mask.data();
    for (std::size_t p = 0; p < mk.size(); ++p)
      for (std::size_t c = 0; c < 3; ++c) CHECK(a[p * 3 + c] == (mk[p] == 1.0 ? 0.0 : t[p * 3 + c]));
    const ToySample again = gen_sample(seed, task);
    CHECK(bit_equal(s.target, again.target));
    CHECK(bit_equal(s.garment, again.garment));
    CHECK(s.label == again.label);
  }
  CHECK_THROWS_AS(gen_sample(1, TaskConfig{15, 16, 1, 3, 8}), ConfigError);
}

TEST_CASE("texture inside the mask tiles the garment; swapping the label moves only the region") {
  TaskConfig task;
  for (std::uint64_t seed = 10; seed < 20; ++seed) {
    const ToySample s = gen_sample(seed, task);
    const ToySample w = gen_sample(seed, task, swapped(s.label));
    CHECK(w.label == swapped(s.label));
    CHECK(w.family == s.family);
    CHECK(bit_equal(w.garment, s.garment));
    const auto [b, e] = s.mask_rows();
    for (std::size_t p = 0; p < 256; ++p) CHECK(w.mask.data()[p] == 1.0 - s.mask.data()[p]);
    const auto t = s.target.data(), tw = w.target.data(), g = s.garment.data();
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          const std::size_t i = (y * 16 + x) * 3 + c;
          const bool inside = y >= b && y < e;
          if (inside) {
            CHECK(t[i] == g[((y % 8) * 8 + x % 8) * 3 + c]);
          } else {
            // outside s's mask, w paints the garment; inside w's mask s shows background
            CHECK(tw[i] == g[((y % 8) * 8 + x % 8) * 3 + c]);
          }
        }
  }
}

TEST_CASE("video samples translate the texture between frames") {
  TaskConfig task;
  task.frames = 5;
  std::size_t moving = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ToySample s = gen_sample(seed, task);
    CHECK(s.target.shape() == Shape{5, 16, 16, 3});
    const auto t = s.target.data();
    const std::size_t frame = 16 * 16 * 3;
    bool differs = false;
    for (std::size_t i = 0; i < frame; ++i) differs |= t[i] != t[4 * frame + i];
    moving += differs;
    // Frame 0 is the image sample.
    TaskConfig image = task;
    image.frames = 1;
    const ToySample still = gen_sample(seed, image);
    CHECK(s.label == still.label);
  }
  CHECK(moving > 0);
}

TEST_CASE("SSIM conformance") {
  Rng rng(1);
  const Tensor x = random_tensor({1, 16, 16, 3}, rng, 0.5);
  const Tensor y = random_tensor({1, 16, 16, 3}, rng, 0.5);
  CHECK(ssim(x, x) == 1.0);
  CHECK(std::abs(ssim(x, y) - ssim(y, x)) <= 1e-12);
  const double v = ssim(x, y);
  CHECK(v >= -1.0);
  CHECK(v <= 1.0);

  // Half-black / half-white image vs its inverse and a slight dimming.
  std::vector<double> half(16 * 16), inv(16 * 16), dim(16 * 16);
  for (std::size_t i = 0; i < half.size(); ++i) {
    half[i] = (i % 16) < 8 ? 0.0 : 1.0;
    inv[i] = 1.0 - half[i];
    dim[i] = half[i] * 0.99;
  }
  const Shape g{1, 16, 16, 1};
  CHECK(ssim(unit_grid(g, half), unit_grid(g, inv)) < ssim(unit_grid(g, half), unit_grid(g, dim)));

  // Constant patches: variance terms vanish, leaving the luminance term.
  constexpr double C1 = 0.01 * 0.01;
  const std::vector<double> c0(16 * 16, 0.3);
  CHECK(ssim(unit_grid(g, c0), unit_grid(g, c0)) == 1.0);
  const std::vector<double> zero(16 * 16, 0.0), one(16 * 16, 1.0);
  const double expected = C1 / (1.0 + C1);
  CHECK(std::abs(ssim(unit_grid(g, zero), unit_grid(g, one)) - expected) < 1e-9);
  const std::vector<double> c1(16 * 16, 0.8);
  const double expected2 = (2 * 0.3 * 0.8 + C1) / (0.09 + 0.64 + C1);
  CHECK(std::abs(ssim(unit_grid(g, c0), unit_grid(g, c1)) - expected2) < 1e-9);

  CHECK_THROWS_AS(ssim(x, Tensor::zeros({1, 16, 8, 3})), DimensionError);
}

TEST_CASE("PSNR and masked L2") {
  Rng rng(2);
  const Tensor x = random_tensor({1, 8, 8, 3}, rng, 0.5);
  CHECK(std::isinf(psnr(x, x)));
  CHECK(psnr(Tensor::full({1, 8, 8, 3}, -1.0), Tensor::full({1, 8, 8, 3}, 1.0)) == 0.0);
  // Quarter-range error everywhere: MSE = 1/16.
  CHECK(psnr(Tensor::full({1, 8, 8, 3}, 0.0), Tensor::full({1, 8, 8, 3}, 0.5)) ==
        doctest::Approx(10.0 * std::log10(16.0)).epsilon(1e-14));

  std::vector<double> mv(64, 0.0);
  for (std::size_t i = 0; i < 32; ++i) mv[i] = 1.0;
  const Tensor mask = Tensor::from({1, 8, 8, 1}, mv);
  std::vector<double> yv = x.to_vector();
  for (std::size_t i = 32 * 3; i < yv.size(); ++i) yv[i] += 0.3;  // error only outside
  const Tensor y = Tensor::from(x.shape(), yv);
  CHECK(masked_l2(x, x, mask) == 0.0);
  CHECK(masked_l2(x, y, mask) == 0.0);
  CHECK(masked_l2(Tensor::full({1, 8, 8, 3}, -1.0), Tensor::full({1, 8, 8, 3}, 1.0), mask) == 1.0);
  CHECK_THROWS_AS(masked_l2(x, y, Tensor::zeros({1, 8, 8, 1})), ContractError);
}

TEST_CASE("evaluation with oracle and untrained models") {
  TaskConfig task;
  const Generator truth = [](const ToySample& s) { return s.target; };
  const EvalReport perfect = eval_with(truth, task, 6, 500);
  CHECK(perfect.mean_ssim == 1.0);
  CHECK(perfect.mean_masked_l2 == 0.0);
  CHECK(perfect.infinite_psnr == 6);

  // Sampler driven by the true noise.
  RunConfig cfg;
  const DiffusionSchedule schedule = cfg.make_schedule();
  const auto ts = ddim_timesteps(100, 20);
  const Generator oracle = [&](const ToySample& s) {
    const EpsPredictor pred = [&](const Tensor& xt, std::size_t t) {
      std::vector<double> e(xt.numel());
      const double a = std::sqrt(schedule.alpha_bar[t]), b = std::sqrt(1.0 - schedule.alpha_bar[t]);
      for (std::size_t i = 0; i < e.size(); ++i) e[i] = (xt.data()[i] - a * s.target.data()[i]) / b;
      return Tensor::from(xt.shape(), e);
    };
    Rng rng(sampling_seed(s.seed));
    std::vector<double> noise(s.target.numel());
    for (double& v : noise) v = rng.normal();
    return ddim_run(pred, Tensor::from(s.target.shape(), noise), schedule, ts, 0.0, rng);
  };
  const EvalReport good = eval_with(oracle, task, 4, 600);
  CHECK(good.mean_ssim > 1.0 - 1e-9);
  CHECK(good.mean_masked_l2 < 1e-20);

  cfg.d = 8;
  cfg.heads = 2;
  cfg.eval.samples = 6;
  const Model untrained = init_model(cfg.model_config(), 1);
  const EvalReport floor = eval_run(untrained, cfg);
  MESSAGE("untrained model mean SSIM " << floor.mean_ssim);
  CHECK(floor.mean_ssim < 0.2);

  RunConfig other = cfg;
  other.task.height = 8;
  CHECK_THROWS_AS(eval_run(untrained, other), ConfigError);
}

TEST_CASE("threaded evaluation matches the sequential order") {
  TaskConfig task;
  const Generator blur = [](const ToySample& s) {
    std::vector<double> v = s.agnostic.to_vector();
    for (double& x : v) x *= 0.9;
    return Tensor::from(s.target.shape(), v);
  };
  const EvalReport a = eval_with(blur, task, 7, 100, 1);
  const EvalReport b = eval_with(blur, task, 7, 100, 3);
  CHECK(to_json(a).dump() == to_json(b).dump());
}

TEST_CASE("eval report JSON round trip") {
  TaskConfig task;
  const Generator half = [](const ToySample& s) { return s.agnostic; };
  EvalReport r = eval_with(half, task, 5, 42);
  r.variant = "MN_V3";
  r.config_hash = "0123456789abcdef";
  r.samples[0].psnr = std::numeric_limits<double>::infinity();
  const std::string text = to_json(r).dump(2);
  const EvalReport back = eval_report_from_json(nlohmann::json::parse(text));
  CHECK(to_json(back).dump(2) == text);
  CHECK(std::isinf(back.samples[0].psnr));
  CHECK(back.mean_ssim == r.mean_ssim);
}

TEST_CASE("PPM round trip and sample export") {
  const auto dir = scratch_dir("ppm");
  std::vector<double> v(4 * 6 * 3);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>((i * 37) % 256) / 255.0 * 2.0 - 1.0;
  const Tensor img = Tensor::from({1, 4, 6, 3}, v);
  write_ppm(dir / "a.ppm", img);
  const Tensor back = read_ppm(dir / "a.ppm");
  CHECK(back.shape() == Shape{1, 4, 6, 3});
  CHECK(bit_equal(back, img));
  CHECK_THROWS_AS(read_ppm(dir / "missing.ppm"), IoError);

  const ToySample s = gen_sample(9, TaskConfig{});
  export_sample(dir, s, "feedbeef00112233");
  CHECK(std::filesystem::exists(dir / "sample_9_target_f0.ppm"));
  CHECK(std::filesystem::exists(dir / "sample_9_garment.ppm"));
  std::ifstream in(dir / "sample_9.json");
  const auto side = nlohmann::json::parse(in);
  CHECK(side.at("config_hash") == "feedbeef00112233");
  CHECK(side.at("seed") == 9);
  CHECK(side.at("label") == std::string(to_string(s.label)));
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
