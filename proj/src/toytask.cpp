#include "mnvton/toytask.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <numbers>
#include <thread>

#include "mnvton/errors.hpp"
#include "mnvton/modality.hpp"
#include "mnvton/rng.hpp"

namespace mnvton {

using nlohmann::json;

std::string_view to_string(GarmentLabel label) { return label == GarmentLabel::Upper ? "upper" : "lower"; }

std::string_view to_string(TextureFamily family) {
  switch (family) {
    case TextureFamily::Stripes: return "stripes";
    case TextureFamily::Checker: return "checker";
    case TextureFamily::Gradient: return "gradient";
  }
  return "?";
}

GarmentLabel swapped(GarmentLabel label) {
  return label == GarmentLabel::Upper ? GarmentLabel::Lower : GarmentLabel::Upper;
}

InpaintingExample ToySample::example() const {
  return {{static_cast<std::size_t>(label)}, garment, agnostic, mask, target};
}

std::pair<std::size_t, std::size_t> ToySample::mask_rows() const {
  const std::size_t h = target.dim(1);
  return label == GarmentLabel::Upper ? std::pair{std::size_t{0}, h / 2} : std::pair{h / 2, h};
}

// ---- generation ------------------------------------------------------------------

namespace {

using Color = std::array<double, 3>;

Color random_color(Rng& rng, double lo, double hi) { return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)}; }

double distance(const Color& a, const Color& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < 3; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

struct Texture {
  TextureFamily family;
  Color a, b;
  std::size_t orient = 0, period = 2, phase = 0;  // stripes
  std::size_t cell = 1, phase_y = 0, phase_x = 0; // checker
  double angle = 0.0, wavelength = 4.0, offset = 0.0;  // gradient

  // Blend weight of color b at integer pixel (y, x).
  double weight(std::size_t y, std::size_t x) const {
    switch (family) {
      case TextureFamily::Stripes: {
        const std::size_t coord = orient == 0 ? y : orient == 1 ? x : x + y;
        return ((coord + phase) % period) * 2 < period ? 0.0 : 1.0;
      }
      case TextureFamily::Checker:
        return (((y + phase_y) / cell) + ((x + phase_x) / cell)) % 2 == 0 ? 0.0 : 1.0;
      case TextureFamily::Gradient: {
        const double s = std::cos(angle) * static_cast<double>(x) + std::sin(angle) * static_cast<double>(y);
        return 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * s / wavelength + offset);
      }
    }
    return 0.0;
  }
};

std::size_t wrap(long long v, std::size_t n) {
  const long long m = static_cast<long long>(n);
  return static_cast<std::size_t>(((v % m) + m) % m);
}

}  // namespace

ToySample gen_sample(std::uint64_t seed, const TaskConfig& config, std::optional<GarmentLabel> label_override) {
  config.validate();
  const std::size_t f = config.frames, h = config.height, w = config.width, c = config.channels;
  const std::size_t g = config.garment_size;
  Rng rng(seed);

  const GarmentLabel drawn = rng.below(2) == 0 ? GarmentLabel::Upper : GarmentLabel::Lower;
  Texture tex;
  tex.family = static_cast<TextureFamily>(rng.below(3));
  tex.a = random_color(rng, -0.9, 0.9);
  do {
    tex.b = random_color(rng, -0.9, 0.9);
  } while (distance(tex.a, tex.b) < 0.6);
  tex.orient = rng.below(3);
  tex.period = 2 + rng.below(5);
  tex.phase = rng.below(tex.period);
  tex.cell = 1 + rng.below(3);
  tex.phase_y = rng.below(2 * tex.cell);
  tex.phase_x = rng.below(2 * tex.cell);
  tex.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  tex.wavelength = rng.uniform(3.0, 8.0);
  tex.offset = rng.uniform(0.0, 2.0 * std::numbers::pi);

  const Color bg0 = random_color(rng, -0.8, 0.8);
  const Color bg1 = random_color(rng, -0.8, 0.8);
  const double bg_angle = rng.uniform(0.0, 2.0 * std::numbers::pi);

  std::vector<long long> oy(f, 0), ox(f, 0);
  for (std::size_t k = 1; k < f; ++k) {
    oy[k] = oy[k - 1] + static_cast<long long>(rng.below(3)) - 1;
    ox[k] = ox[k - 1] + static_cast<long long>(rng.below(3)) - 1;
  }

  ToySample s;
  s.seed = seed;
  s.label = label_override.value_or(drawn);
  s.family = tex.family;

  std::vector<double> garment(g * g * c);
  for (std::size_t y = 0; y < g; ++y)
    for (std::size_t x = 0; x < g; ++x) {
      const double wb = tex.weight(y, x);
      for (std::size_t ch = 0; ch < c; ++ch) {
        garment[(y * g + x) * c + ch] = (1.0 - wb) * tex.a[ch % 3] + wb * tex.b[ch % 3];
      }
    }

  // Background: linear ramp between two colors along a random direction.
  const double cx = std::cos(bg_angle) / static_cast<double>(std::max<std::size_t>(w - 1, 1));
  const double cy = std::sin(bg_angle) / static_cast<double>(std::max<std::size_t>(h - 1, 1));
  const std::array<double, 4> corners = {0.0, cx * static_cast<double>(w - 1), cy * static_cast<double>(h - 1),
                                         cx * static_cast<double>(w - 1) + cy * static_cast<double>(h - 1)};
  const double smin = *std::min_element(corners.begin(), corners.end());
  const double smax = *std::max_element(corners.begin(), corners.end());

  const std::size_t half = h / 2;
  const std::size_t row_begin = s.label == GarmentLabel::Upper ? 0 : half;
  const std::size_t row_end = s.label == GarmentLabel::Upper ? half : h;

  std::vector<double> target(f * h * w * c), agnostic(f * h * w * c), mask(f * h * w);
  for (std::size_t k = 0; k < f; ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const bool inside = y >= row_begin && y < row_end;
        const std::size_t pix = (k * h + y) * w + x;
        mask[pix] = inside ? 1.0 : 0.0;
        const double t = smax > smin ? (cx * static_cast<double>(x) + cy * static_cast<double>(y) - smin) / (smax - smin) : 0.0;
        const std::size_t gy = wrap(static_cast<long long>(y) + oy[k], g);
        const std::size_t gx = wrap(static_cast<long long>(x) + ox[k], g);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double background = bg0[ch % 3] + (bg1[ch % 3] - bg0[ch % 3]) * t;
          const double v = inside ? garment[(gy * g + gx) * c + ch] : background;
          target[pix * c + ch] = v;
          agnostic[pix * c + ch] = inside ? 0.0 : v;
        }
      }

  s.target = Tensor::from({f, h, w, c}, std::move(target));
  s.agnostic = Tensor::from({f, h, w, c}, std::move(agnostic));
  s.mask = Tensor::from({f, h, w, 1}, std::move(mask));
  s.garment = Tensor::from({1, g, g, c}, std::move(garment));
  return s;
}

// ---- metrics -------------------------------------------------------------------

double to_unit(double v) { return std::clamp((v + 1.0) * 0.5, 0.0, 1.0); }

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
}

std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> w1(size);
  const double center = static_cast<double>(size - 1) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - center;
    w1[i] = std::exp(-(d * d) / (2.0 * sigma * sigma));
    total += w1[i];
  }
  for (double& v : w1) v /= total;
  std::vector<double> w2(size * size);
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) w2[i * size + j] = w1[i] * w1[j];
  return w2;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
  require_same(a, b, "ssim");
  const GridShape g = grid_of(a);
  constexpr double C1 = 0.01 * 0.01;
  constexpr double C2 = 0.03 * 0.03;
  std::size_t win = std::min<std::size_t>({11, g.height, g.width});
  if (win % 2 == 0) --win;
  const auto window = gaussian_window(win, 1.5);
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t ny = g.height - win + 1, nx = g.width - win + 1;

  double frames_total = 0.0;
  for (std::size_t f = 0; f < g.frames; ++f) {
    double channels_total = 0.0;
    for (std::size_t ch = 0; ch < g.channels; ++ch) {
      auto px = [&](std::span<const double> v, std::size_t y, std::size_t x) {
        return to_unit(v[((f * g.height + y) * g.width + x) * g.channels + ch]);
      };
      double local_total = 0.0;
      for (std::size_t y0 = 0; y0 < ny; ++y0)
        for (std::size_t x0 = 0; x0 < nx; ++x0) {
          double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
          for (std::size_t i = 0; i < win; ++i)
            for (std::size_t j = 0; j < win; ++j) {
              const double wt = window[i * win + j];
              const double x = px(av, y0 + i, x0 + j);
              const double y = px(bv, y0 + i, x0 + j);
              mx += wt * x;
              my += wt * y;
              sxx += wt * x * x;
              syy += wt * y * y;
              sxy += wt * x * y;
            }
          const double vx = sxx - mx * mx;
          const double vy = syy - my * my;
          const double cov = sxy - mx * my;
          local_total += ((2.0 * mx * my + C1) * (2.0 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
        }
      channels_total += local_total / static_cast<double>(ny * nx);
    }
    frames_total += channels_total / static_cast<double>(g.channels);
  }
  return frames_total / static_cast<double>(g.frames);
}

double psnr(const Tensor& a, const Tensor& b) {
  require_same(a, b, "psnr");
  const auto av = a.data();
  const auto bv = b.data();
  double se = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = to_unit(av[i]) - to_unit(bv[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(av.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double masked_l2(const Tensor& a, const Tensor& b, const Tensor& mask) {
  require_same(a, b, "masked_l2");
  const GridShape g = grid_of(a);
  const GridShape gm = grid_of(mask);
  if (gm.frames != g.frames || gm.height != g.height || gm.width != g.width || gm.channels != 1) {
    throw DimensionError("masked_l2: mask " + shape_str(mask.shape()) + " does not match " + shape_str(a.shape()));
  }
  const auto av = a.data();
  const auto bv = b.data();
  const auto mv = mask.data();
  double se = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < mv.size(); ++p) {
    if (mv[p] == 0.0) continue;
    for (std::size_t ch = 0; ch < g.channels; ++ch) {
      const double d = to_unit(av[p * g.channels + ch]) - to_unit(bv[p * g.channels + ch]);
      se += d * d;
      ++count;
    }
  }
  if (count == 0) throw ContractError("masked_l2: mask selects no pixels");
  return se / static_cast<double>(count);
}

// ---- reports -------------------------------------------------------------------

void EvalReport::summarize() {
  mean_ssim = mean_psnr = mean_masked_l2 = 0.0;
  infinite_psnr = 0;
  if (samples.empty()) return;
  std::size_t finite = 0;
  for (const auto& s : samples) {
    mean_ssim += s.ssim;
    mean_masked_l2 += s.masked_l2;
    if (std::isinf(s.psnr)) {
      ++infinite_psnr;
    } else {
      mean_psnr += s.psnr;
      ++finite;
    }
  }
  const double n = static_cast<double>(samples.size());
  mean_ssim /= n;
  mean_masked_l2 /= n;
  mean_psnr = finite ? mean_psnr / static_cast<double>(finite) : std::numeric_limits<double>::infinity();
}

namespace {

json psnr_json(double v) { return std::isinf(v) ? json("inf") : json(v); }

double psnr_from(const json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() != "inf") throw ConfigError("psnr must be a number or \"inf\"");
    return std::numeric_limits<double>::infinity();
  }
  return j.get<double>();
}

}  // namespace

json to_json(const EvalReport& r) {
  json samples = json::array();
  for (const auto& s : r.samples) {
    samples.push_back({{"seed", s.seed},
                       {"label", std::string(to_string(s.label))},
                       {"ssim", s.ssim},
                       {"psnr", psnr_json(s.psnr)},
                       {"masked_l2", s.masked_l2}});
  }
  return {{"variant", r.variant},
          {"config_hash", r.config_hash},
          {"samples", samples},
          {"mean_ssim", r.mean_ssim},
          {"mean_psnr", psnr_json(r.mean_psnr)},
          {"infinite_psnr", r.infinite_psnr},
          {"mean_masked_l2", r.mean_masked_l2}};
}

EvalReport eval_report_from_json(const json& j) {
  try {
    EvalReport r;
    r.variant = j.at("variant").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& s : j.at("samples")) {
      SampleMetrics m;
      m.seed = s.at("seed").get<std::uint64_t>();
      m.label = s.at("label").get<std::string>() == "upper" ? GarmentLabel::Upper : GarmentLabel::Lower;
      m.ssim = s.at("ssim").get<double>();
      m.psnr = psnr_from(s.at("psnr"));
      m.masked_l2 = s.at("masked_l2").get<double>();
      r.samples.push_back(m);
    }
    r.mean_ssim = j.at("mean_ssim").get<double>();
    r.mean_psnr = psnr_from(j.at("mean_psnr"));
    r.infinite_psnr = j.at("infinite_psnr").get<std::size_t>();
    r.mean_masked_l2 = j.at("mean_masked_l2").get<double>();
    return r;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed eval report: ") + e.what());
  }
}

// ---- evaluation ----------------------------------------------------------------

EvalReport eval_with(const Generator& generate, const TaskConfig& task, std::size_t n_samples,
                     std::uint64_t seed_base, std::size_t threads) {
  EvalReport report;
  report.samples.resize(n_samples);
  auto work = [&](std::size_t i) {
    const ToySample sample = gen_sample(seed_base + i, task);
    const Tensor out = generate(sample);
    SampleMetrics& m = report.samples[i];
    m.seed = sample.seed;
    m.label = sample.label;
    m.ssim = ssim(out, sample.target);
    m.psnr = psnr(out, sample.target);
    m.masked_l2 = masked_l2(out, sample.target, sample.mask);
  };
  threads = std::max<std::size_t>(1, std::min(threads, n_samples));
  if (threads == 1) {
    for (std::size_t i = 0; i < n_samples; ++i) work(i);
  } else {
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n_samples; i += threads) work(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  report.summarize();
  return report;
}

std::uint64_t sampling_seed(std::uint64_t sample_seed) { return mix_seed(sample_seed, 0xD1D1); }

EvalReport eval_run(const Model& model, const RunConfig& config, std::size_t threads) {
  const ModelConfig expected = config.model_config();
  if (!(model.config.target_grid == expected.target_grid) || !(model.config.garment_grid == expected.garment_grid) ||
      model.config.patch != expected.patch || model.config.variant != expected.variant) {
    throw ConfigError("checkpoint does not match the evaluation config");
  }
  const DiffusionSchedule schedule = config.make_schedule();
  const std::size_t steps = config.schedule.ddim_steps;
  Generator gen = [&](const ToySample& s) {
    return ddim_sample(model, s.example(), schedule, steps, sampling_seed(s.seed));
  };
  EvalReport r = eval_with(gen, config.task, config.eval.samples, config.eval.seed_base, threads);
  r.variant = std::string(to_string(config.variant));
  r.config_hash = config_hash(config);
  return r;
}

std::size_t eval_threads_from_env() {
  const char* v = std::getenv("MNVTON_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const unsigned long n = std::strtoul(v, &end, 10);
  if (end == v || *end != '\0' || n == 0) throw ConfigError("MNVTON_THREADS must be a positive integer");
  return n;
}

TrainedRun train_run(const RunConfig& config, const MetricSink& sink) {
  config.validate();
  TrainedRun run{init_model(config.model_config(), mix_seed(config.seed, 0x1417)), {}};
  const TaskConfig task = config.task;
  ExampleSource source = [task](std::uint64_t seed) { return gen_sample(seed, task).example(); };
  run.losses = train_model(run.model, config.train_config(), config.make_schedule(), source, sink);
  return run;
}

// ---- PPM -----------------------------------------------------------------------

void write_ppm(const std::filesystem::path& path, const Tensor& grid, std::size_t frame) {
  const GridShape g = grid_of(grid);
  if (frame >= g.frames) throw IndexError("write_ppm: frame out of range");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << g.width << ' ' << g.height << "\n255\n";
  const auto v = grid.data();
  for (std::size_t y = 0; y < g.height; ++y)
    for (std::size_t x = 0; x < g.width; ++x) {
      const std::size_t base = ((frame * g.height + y) * g.width + x) * g.channels;
      for (std::size_t k = 0; k < 3; ++k) {
        const std::size_t ch = g.channels >= 3 ? k : 0;
        const auto byte = static_cast<unsigned char>(std::lround(to_unit(v[base + ch]) * 255.0));
        out.put(static_cast<char>(byte));
      }
    }
  if (!out) throw IoError("failed writing " + path.string());
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
      } else {
        t.push_back(ch);
      }
    }
    return t;
  };
  if (token() != "P6") throw IoError(path.string() + " is not a binary PPM");
  const std::size_t w = std::stoul(token());
  const std::size_t h = std::stoul(token());
  if (token() != "255") throw IoError(path.string() + ": only 8-bit PPM is supported");
  std::vector<double> v(h * w * 3);
  for (double& x : v) {
    char ch;
    if (!in.get(ch)) throw IoError(path.string() + ": truncated pixel data");
    x = static_cast<double>(static_cast<unsigned char>(ch)) / 255.0 * 2.0 - 1.0;
  }
  return Tensor::from({1, h, w, 3}, std::move(v));
}

void export_sample(const std::filesystem::path& dir, const ToySample& sample, const std::string& config_hash) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  const std::string stem = "sample_" + std::to_string(sample.seed);
  json files = json::array();
  const std::size_t frames = sample.target.dim(0);
  for (std::size_t f = 0; f < frames; ++f) {
    for (const auto& [name, grid] : {std::pair{"target", sample.target}, std::pair{"agnostic", sample.agnostic},
                                     std::pair{"mask", sample.mask}}) {
      const std::string file = stem + "_" + name + "_f" + std::to_string(f) + ".ppm";
      Tensor g = grid;
      if (std::string(name) == "mask") {
        // mask is {0, 1}; show it as black/white
        std::vector<double> v = g.to_vector();
        for (double& x : v) x = x * 2.0 - 1.0;
        g = Tensor::from(g.shape(), std::move(v));
      }
      write_ppm(dir / file, g, f);
      files.push_back(file);
    }
  }
  const std::string garment_file = stem + "_garment.ppm";
  write_ppm(dir / garment_file, sample.garment, 0);
  files.push_back(garment_file);
  const auto [row_begin, row_end] = sample.mask_rows();
  const json sidecar = {{"seed", sample.seed},
                        {"label", std::string(to_string(sample.label))},
                        {"texture", std::string(to_string(sample.family))},
                        {"mask", {{"rows", {row_begin, row_end}}, {"frames", frames}}},
                        {"config_hash", config_hash},
                        {"files", files}};
  std::ofstream out(dir / (stem + ".json"));
  if (!out) throw IoError("cannot write sidecar for " + stem);
  out << sidecar.dump(2) << '\n';
}

}  // namespace mnvton
