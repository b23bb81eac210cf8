#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "../unit/helpers.hpp"
#include "mnvton/analysis.hpp"
#include "mnvton/cli.hpp"
#include "mnvton/config.hpp"
#include "mnvton/diffusion.hpp"
#include "mnvton/model.hpp"
#include "mnvton/toytask.hpp"

#include <json.hpp>

using namespace mnvton;
using testing::bit_equal;
using testing::max_abs_diff;
using testing::random_stream;
using testing::random_tensor;
using testing::randomize_block;

namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kGradTol = 1e-4;
constexpr double kIdentityTol = 1e-12;
constexpr double kInvarianceTol = 1e-9;
constexpr double kRatioLo = 1.8, kRatioHi = 2.1;
constexpr std::size_t kAblationMinSteps = 2000;
constexpr std::size_t kAblationSeedsRequired = 4;
constexpr std::size_t kSwapSamples = 50;
constexpr double kSwapFraction = 0.8;
constexpr double kSymmetryTol = 1e-12;
constexpr double kClosedFormTol = 1e-9;

constexpr std::size_t kD = 8, kH = 2, kN = 2;
constexpr BlockVariant kAll[] = {BlockVariant::MN_V1, BlockVariant::MN_V2, BlockVariant::MN_V3,
                                 BlockVariant::DualNet, BlockVariant::NaiveSplit};
constexpr BlockVariant kMN[] = {BlockVariant::MN_V1, BlockVariant::MN_V2, BlockVariant::MN_V3};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

ModelConfig tiny_config(BlockVariant v) {
  ModelConfig c;
  c.variant = v;
  c.d = kD;
  c.heads = kH;
  c.blocks = kN;
  c.garment_grid = {1, 4, 4, 3};
  c.target_grid = {1, 8, 8, 3};
  return c;
}

DiTBlockParams block_for(std::size_t groups, Rng& rng) { return make_block(kD, kD, kH, groups, 0.02, rng); }

Outcome gradient_oracle() {
  Outcome o{true, ""};
  std::size_t L = 0;
  for (BlockVariant v : kAll) {
    const ModelConfig c = tiny_config(v);
    L = 1 + (4 / c.patch) * (4 / c.patch) + (8 / c.patch) * (8 / c.patch);
    const double err = model_grad_check(c, 11);
    o.pass = o.pass && err < kGradTol && L <= 24;
    o.detail += std::string(to_string(v)) + "=" + fmt("%.2e", err) + " ";
  }
  o.detail += "(L=" + std::to_string(L) + ", tol " + fmt("%.0e", kGradTol) + ")";
  return o;
}

Outcome identity_at_init() {
  Rng rng(21);
  const Tensor cond = random_tensor({1, kD}, rng);
  const TokenStream seq = random_stream(1, 4, 16, kD, rng);
  double worst = 0.0;
  for (BlockVariant v : kMN) {
    const DiTBlockParams p = block_for(norm_groups(v).size(), rng);
    worst = std::max(worst, max_abs_diff(mn_block_forward(seq, cond, p, v).tokens, seq.tokens));
  }
  const Tensor kept[] = {slice_rows(seq.tokens, 0, 1), slice_rows(seq.tokens, 5, 21)};
  const Tensor expected_naive = concat_rows(kept);
  const TokenStream naive = naive_split_forward(seq, cond, block_for(1, rng));
  worst = std::max(worst, max_abs_diff(naive.tokens, expected_naive));

  TokenStream main;
  main.tokens = expected_naive;
  main.layout = ModalityLayout::from_counts(1, 0, 16);
  TokenStream ref;
  ref.tokens = slice_rows(seq.tokens, 1, 5);
  ref.layout = ModalityLayout::from_counts(0, 4, 0);
  const DualLayerOutput d = dual_layer_forward(main, ref, cond, cond, block_for(norm_groups(BlockVariant::DualNet).size(), rng),
                                               block_for(reference_groups().size(), rng));
  worst = std::max({worst, max_abs_diff(d.main.tokens, main.tokens), max_abs_diff(d.ref.tokens, ref.tokens)});
  return {worst <= kIdentityTol, "max |out - in| = " + fmt("%.2e", worst) + " over 5 variants"};
}

Outcome group_invariance() {
  Rng rng(31);
  const Tensor cond = random_tensor({1, kD}, rng);
  double worst = 0.0;
  std::size_t checks = 0;
  for (BlockVariant v : kMN) {
    const DiTBlockParams p = block_for(norm_groups(v).size(), rng);
    randomize_block(p, rng);
    const TokenStream seq = random_stream(1, 4, 16, kD, rng);
    BlockTrace base;
    (void)mn_block_forward(seq, cond, p, v, &base);
    for (std::size_t s = 0; s < base.spans.size(); ++s) {
      for (double a : {0.1, 10.0}) {
        std::vector<double> x = seq.tokens.to_vector();
        for (std::size_t i = base.spans[s].range.begin; i < base.spans[s].range.end; ++i)
          for (std::size_t j = 0; j < kD; ++j) x[i * kD + j] *= a;
        TokenStream scaled = seq;
        scaled.tokens = Tensor::from(seq.tokens.shape(), std::move(x));
        BlockTrace t;
        (void)mn_block_forward(scaled, cond, p, v, &t);
        worst = std::max(worst, max_abs_diff(t.normed[s], base.normed[s]));
        ++checks;
      }
    }
  }
  return {worst < kInvarianceTol, "max change = " + fmt("%.2e", worst) + " over " + std::to_string(checks) + " group scalings"};
}

Outcome feature_shrinking() {
  Rng rng(41);
  const Tensor cond = random_tensor({1, kD}, rng);
  const DiTBlockParams p = block_for(1, rng);
  randomize_block(p, rng);
  const TokenStream seq = random_stream(1, 4, 16, kD, rng);
  BlockTrace naive, fused;
  const TokenStream out = naive_split_forward(seq, cond, p, &naive);
  const Grouping single = {{ModalityTag::Text, ModalityTag::Garment, ModalityTag::Target}};
  (void)fused_block_forward(seq, cond, p, single, &fused);
  const std::size_t main_len = seq.layout.count(ModalityTag::Text) + seq.layout.count(ModalityTag::Target);
  const std::size_t L = seq.tokens.rows();
  const bool kv_equal = bit_equal(naive.k, fused.k) && bit_equal(naive.v, fused.v);
  const bool pass = out.tokens.rows() == main_len && main_len < L && kv_equal;
  return {pass, "output " + std::to_string(out.tokens.rows()) + " tokens vs |main| " + std::to_string(main_len) +
                    ", L " + std::to_string(L) + ", K/V bit-equal " + (kv_equal ? "yes" : "no")};
}

Outcome parameter_overhead() {
  ModelConfig c;
  c.d = kD;
  c.heads = kH;
  c.blocks = kN;
  c.variant = BlockVariant::DualNet;
  const std::size_t dual = count_params(init_model(c, 0));
  c.variant = BlockVariant::MN_V3;
  const std::size_t mn = count_params(init_model(c, 0));
  const double ratio = static_cast<double>(dual) / static_cast<double>(mn);
  return {ratio >= kRatioLo && ratio <= kRatioHi, "DualNet " + std::to_string(dual) + " / MN_V3 " + std::to_string(mn) +
                                                      " = " + fmt("%.4f", ratio)};
}

struct AblationResult {
  Outcome ordering;
  std::optional<Model> v3_seed0;
  RunConfig config;
};

AblationResult ablation() {
  RunConfig base;
  base.ablation.variants = {BlockVariant::MN_V1, BlockVariant::MN_V2, BlockVariant::MN_V3};
  base.ablation.seeds = {0, 1, 2, 3, 4};
  base.eval.samples = kSwapSamples;
  AblationResult r;
  r.config = base;
  if (base.train.steps < kAblationMinSteps) {
    r.ordering = {false, "budget below " + std::to_string(kAblationMinSteps) + " steps"};
    return r;
  }
  const TrainedHook keep = [&](const RunConfig& run, const Model& model) {
    std::fprintf(stderr, "  trained %s seed %llu\n", std::string(to_string(run.variant)).c_str(),
                 static_cast<unsigned long long>(run.seed));
    if (run.variant == BlockVariant::MN_V3 && run.seed == 0) r.v3_seed0 = model;
  };
  const AblationTable table = variant_ablation(ablation_runs(base), eval_threads_from_env(), keep);
  std::fprintf(stderr, "%s", render_table(table).c_str());

  const double v1 = table.mean_ssim(BlockVariant::MN_V1);
  const double v2 = table.mean_ssim(BlockVariant::MN_V2);
  const double v3 = table.mean_ssim(BlockVariant::MN_V3);
  std::size_t wins = 0;
  for (std::uint64_t s : base.ablation.seeds) {
    const AblationRow* a = table.find(BlockVariant::MN_V3, s);
    const AblationRow* b = table.find(BlockVariant::MN_V1, s);
    if (a && b && a->report.mean_ssim > b->report.mean_ssim) ++wins;
  }
  const double gap = v3 - v1;
  const bool pass = v3 > v1 && std::abs(v3 - v2) < gap && wins >= kAblationSeedsRequired;
  r.ordering = {pass, "mean SSIM V1 " + fmt("%.4f", v1) + ", V2 " + fmt("%.4f", v2) + ", V3 " + fmt("%.4f", v3) +
                          "; V3>V1 on " + std::to_string(wins) + "/5 seeds; |V3-V2| " + fmt("%.4f", std::abs(v3 - v2)) +
                          " vs gap " + fmt("%.4f", gap) + " (" + std::to_string(base.train.steps) + " steps)"};
  return r;
}

Outcome text_causality(const std::optional<Model>& model, const RunConfig& config) {
  if (!model) return {false, "no trained MN_V3 model"};
  const DiffusionSchedule schedule = config.make_schedule();
  std::size_t relocated = 0;
  for (std::size_t i = 0; i < kSwapSamples; ++i) {
    const std::uint64_t seed = config.eval.seed_base + i;
    const ToySample original = gen_sample(seed, config.task);
    const ToySample swapped_sample = gen_sample(seed, config.task, swapped(original.label));
    const Tensor pred =
        ddim_sample(*model, swapped_sample.example(), schedule, config.schedule.ddim_steps, sampling_seed(seed));
    const double to_swapped = masked_l2(pred, swapped_sample.target, swapped_sample.mask);
    const double to_original = masked_l2(pred, original.target, swapped_sample.mask);
    if (to_swapped < to_original) ++relocated;
  }
  const double frac = static_cast<double>(relocated) / static_cast<double>(kSwapSamples);
  return {frac >= kSwapFraction, std::to_string(relocated) + "/" + std::to_string(kSwapSamples) +
                                     " label-swapped samples closer to the swapped ground truth"};
}

Outcome position_sharing() {
  const GridShape image{1, 16, 16, 3}, video{4, 16, 16, 3};
  const Tensor ei = build_pos_embed(image, 2, 24);
  const Tensor ev = build_pos_embed(video, 2, 24);
  const bool frame0 = bit_equal(ei, slice_rows(ev, 0, ei.rows()));
  const Tensor pi = padded_pos_embed(image, 2, kD);
  const Tensor pv = padded_pos_embed(video, 2, kD);
  const bool padded_frame0 = bit_equal(pi, slice_rows(pv, 0, pi.rows()));
  const bool identity = bit_equal(interpolate_pos_embed(ei, image, image, 2), ei) &&
                        bit_equal(interpolate_pos_embed(ev, video, video, 2), ev);
  return {frame0 && padded_frame0 && identity, std::string("frame 0 bit-equal ") + (frame0 && padded_frame0 ? "yes" : "no") +
                                                   ", same-grid interpolation identity " + (identity ? "yes" : "no")};
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<nlohmann::json> metrics_without_clock(const fs::path& p) {
  std::vector<nlohmann::json> lines;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    nlohmann::json j = nlohmann::json::parse(line);
    j.erase("wallclock_ms");
    lines.push_back(std::move(j));
  }
  return lines;
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / ("mnvton_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  nlohmann::json cfg = {{"train", {{"steps", 100}, {"log_interval", 10}}}, {"seed", 7}};
  {
    std::ofstream(root / "short.json") << cfg.dump(2);
  }
  std::ostringstream out, err;
  int codes[2];
  for (int k = 0; k < 2; ++k) {
    const std::string dir = (root / ("run" + std::to_string(k))).string();
    codes[k] = cli_main({"train", "--config", (root / "short.json").string(), "--out", dir}, out, err);
  }
  Outcome o;
  if (codes[0] != 0 || codes[1] != 0) {
    o = {false, "train exited " + std::to_string(codes[0]) + "/" + std::to_string(codes[1]) + ": " + err.str()};
  } else {
    const std::string c0 = read_bytes(root / "run0" / "checkpoint.bin");
    const std::string c1 = read_bytes(root / "run1" / "checkpoint.bin");
    const auto m0 = metrics_without_clock(root / "run0" / "metrics.jsonl");
    const auto m1 = metrics_without_clock(root / "run1" / "metrics.jsonl");
    const bool ckpt = !c0.empty() && c0 == c1;
    const bool metrics = !m0.empty() && m0 == m1;
    o = {ckpt && metrics, "checkpoints (" + std::to_string(c0.size()) + " bytes) identical " + (ckpt ? "yes" : "no") +
                              ", " + std::to_string(m0.size()) + " metric records identical " + (metrics ? "yes" : "no")};
  }
  fs::remove_all(root);
  return o;
}

Tensor unit_grid(const Shape& shape, const std::vector<double>& unit) {
  std::vector<double> v(unit.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = unit[i] * 2.0 - 1.0;
  return Tensor::from(shape, std::move(v));
}

Outcome metric_conformance() {
  Rng rng(101);
  const Tensor x = random_tensor({1, 16, 16, 3}, rng, 0.5);
  const Tensor y = random_tensor({1, 16, 16, 3}, rng, 0.5);
  const double self = ssim(x, x);
  const double asym = std::abs(ssim(x, y) - ssim(y, x));
  constexpr double C1 = 0.01 * 0.01;
  const Shape g{1, 16, 16, 1};
  double worst = 0.0;
  for (auto [a, b] : {std::pair{0.3, 0.8}, std::pair{0.0, 1.0}, std::pair{0.5, 0.5}, std::pair{0.9, 0.1}}) {
    const double expected = (2 * a * b + C1) / (a * a + b * b + C1);
    const double got = ssim(unit_grid(g, std::vector<double>(256, a)), unit_grid(g, std::vector<double>(256, b)));
    worst = std::max(worst, std::abs(got - expected));
  }
  const bool pass = self == 1.0 && asym <= kSymmetryTol && worst < kClosedFormTol;
  return {pass, "ssim(x,x) = " + fmt("%.17g", self) + ", asymmetry " + fmt("%.1e", asym) + ", closed-form error " +
                    fmt("%.1e", worst)};
}

struct Report {
  int failed = 0;

  void line(int id, const char* name, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failed;
    std::printf("%s criterion %d %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
};

}  // namespace

int main() {
  Report r;
  r.line(1, "gradient-oracle", gradient_oracle);
  r.line(2, "identity-at-init", identity_at_init);
  r.line(3, "group-invariance", group_invariance);
  r.line(4, "feature-shrinking", feature_shrinking);
  r.line(5, "parameter-overhead", parameter_overhead);
  r.line(8, "position-sharing", position_sharing);
  r.line(9, "determinism", determinism);
  r.line(10, "metric-conformance", metric_conformance);
  AblationResult abl;
  r.line(6, "ablation-ordering", [&] {
    abl = ablation();
    return abl.ordering;
  });
  r.line(7, "text-causality", [&] { return text_causality(abl.v3_seed0, abl.config); });
  std::printf("%d of 10 criteria failed\n", r.failed);
  return r.failed == 0 ? 0 : 1;
}
