#include "mnvton/analysis.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "mnvton/errors.hpp"
#include "mnvton/rng.hpp"

namespace mnvton {

using nlohmann::json;

// ---- cost accounting -------------------------------------------------------------

namespace {

struct LayerShape {
  std::uint64_t q = 0, kv = 0;
};

std::uint64_t layer_macs(LayerShape s, std::uint64_t d) {
  return 2 * s.q * d * d + 2 * s.kv * d * d + 2 * s.q * s.kv * d;
}

std::uint64_t layer_activations(LayerShape s, std::uint64_t d, std::uint64_t heads) {
  return heads * s.q * s.kv + 4 * d * s.q + 2 * d * s.q + 2 * d * s.kv;
}

// Attention shapes of the main stack, layer by layer; for DualNet the
// ReferenceNet layers are returned through `ref`.
std::vector<LayerShape> layer_shapes(const SequenceLengths& len, std::size_t blocks, BlockVariant v,
                                     std::vector<LayerShape>* ref = nullptr) {
  const std::uint64_t all = len.text + len.garment + len.target;
  const std::uint64_t main = len.text + len.target;
  std::vector<LayerShape> out;
  for (std::size_t l = 0; l < blocks; ++l) {
    switch (v) {
      case BlockVariant::MN_V1:
      case BlockVariant::MN_V2:
      case BlockVariant::MN_V3: out.push_back({all, all}); break;
      case BlockVariant::NaiveSplit: out.push_back(l == 0 ? LayerShape{main, all} : LayerShape{main, main}); break;
      case BlockVariant::DualNet:
        out.push_back({main, main + len.garment});
        if (ref) ref->push_back({len.garment, len.garment});
        break;
    }
  }
  return out;
}

void check_dims(std::size_t d, std::size_t heads, std::size_t blocks) {
  if (d == 0 || heads == 0 || blocks == 0) throw ConfigError("cost model needs positive d, heads and blocks");
}

}  // namespace

std::uint64_t attention_macs(const SequenceLengths& lengths, std::size_t d, std::size_t heads, std::size_t blocks,
                             BlockVariant variant) {
  check_dims(d, heads, blocks);
  std::vector<LayerShape> ref;
  std::uint64_t total = 0;
  for (const auto& s : layer_shapes(lengths, blocks, variant, &ref)) total += layer_macs(s, d);
  for (const auto& s : ref) total += layer_macs(s, d);
  return total;
}

std::uint64_t attention_flops(const SequenceLengths& lengths, std::size_t d, std::size_t heads, std::size_t blocks,
                              BlockVariant variant) {
  return 2 * attention_macs(lengths, d, heads, blocks, variant);
}

std::uint64_t peak_activation_elements(const SequenceLengths& lengths, std::size_t d, std::size_t heads,
                                       std::size_t blocks, BlockVariant variant) {
  check_dims(d, heads, blocks);
  std::vector<LayerShape> ref;
  const auto main = layer_shapes(lengths, blocks, variant, &ref);
  std::uint64_t peak = 0;
  for (std::size_t l = 0; l < main.size(); ++l) {
    std::uint64_t layer = layer_activations(main[l], d, heads);
    if (l < ref.size()) layer += layer_activations(ref[l], d, heads);
    peak = std::max(peak, layer);
  }
  return peak;
}

SequenceLengths sequence_lengths(const ModelConfig& config) {
  return {1, config.garment_grid.tokens(config.patch), config.target_grid.tokens(config.patch)};
}

CostReport cost_report(const ModelConfig& base) {
  base.validate();
  CostReport r;
  r.d = base.d;
  r.heads = base.heads;
  r.blocks = base.blocks;
  r.lengths = sequence_lengths(base);
  std::size_t dual = 0, single = 0;
  for (BlockVariant v : {BlockVariant::DualNet, BlockVariant::NaiveSplit, BlockVariant::MN_V1, BlockVariant::MN_V2,
                         BlockVariant::MN_V3}) {
    ModelConfig c = base;
    c.variant = v;
    VariantCost vc{v, count_params(init_model(c, 0)), attention_flops(r.lengths, c.d, c.heads, c.blocks, v),
                   peak_activation_elements(r.lengths, c.d, c.heads, c.blocks, v)};
    if (v == BlockVariant::DualNet) dual = vc.params;
    if (v == BlockVariant::MN_V3) single = vc.params;
    r.variants.push_back(vc);
  }
  r.dual_single_ratio = static_cast<double>(dual) / static_cast<double>(single);
  return r;
}

json to_json(const CostReport& r) {
  json variants = json::object();
  for (const auto& v : r.variants) {
    variants[std::string(to_string(v.variant))] = {{"params", v.params},
                                                   {"attention_flops", v.attention_flops},
                                                   {"peak_activations", v.peak_activations}};
  }
  return {{"model", {{"d", r.d}, {"heads", r.heads}, {"blocks", r.blocks}}},
          {"lengths", {{"text", r.lengths.text}, {"garment", r.lengths.garment}, {"target", r.lengths.target}}},
          {"flop_convention", "2 FLOPs per multiply-add"},
          {"variants", variants},
          {"dual_single_ratio", r.dual_single_ratio}};
}

// ---- PCA ------------------------------------------------------------------------

PCAResult pca(const Tensor& x, std::size_t k) {
  if (x.rank() != 2) throw DimensionError("pca expects [n, d] features, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (k == 0 || k > std::min(n, d)) {
    throw ContractError("pca: k = " + std::to_string(k) + " must lie in [1, min(n, d)] = [1, " +
                        std::to_string(std::min(n, d)) + "]");
  }
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat xc = Eigen::Map<const Mat>(x.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  xc.rowwise() -= xc.colwise().mean();
  const Eigen::MatrixXd cov = (xc.transpose() * xc) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericalError("pca: eigendecomposition failed");

  PCAResult r;
  r.k = k;
  const auto& vals = solver.eigenvalues();  // ascending
  const auto& vecs = solver.eigenvectors();
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double lambda = std::max(0.0, vals(static_cast<Eigen::Index>(d - 1 - i)));
    r.eigenvalues.push_back(lambda);
    trace += lambda;
  }
  Eigen::MatrixXd comps(d, k);
  for (std::size_t c = 0; c < k; ++c) {
    Eigen::VectorXd v = vecs.col(static_cast<Eigen::Index>(d - 1 - c));
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    comps.col(static_cast<Eigen::Index>(c)) = v;
    r.explained.push_back(trace > 0.0 ? r.eigenvalues[c] / trace : 0.0);
  }
  r.components.resize(d * k);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t c = 0; c < k; ++c) r.components[i * k + c] = comps(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));

  const Eigen::MatrixXd s = xc * comps;
  std::vector<double> scores(n * k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) scores[i * k + c] = s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
  r.scores = Tensor::from({n, k}, std::move(scores));
  return r;
}

Tensor patch_luminance(const Tensor& garment, std::size_t patch) {
  const GridShape g = grid_of(garment);
  const GridShape tg{g.frames, g.height / patch, g.width / patch, 1};
  (void)g.tokens(patch);
  std::vector<double> out(tg.frames * tg.height * tg.width, 0.0);
  const auto v = garment.data();
  const double norm = 1.0 / static_cast<double>(patch * patch * g.channels);
  for (std::size_t f = 0; f < g.frames; ++f)
    for (std::size_t y = 0; y < g.height; ++y)
      for (std::size_t x = 0; x < g.width; ++x)
        for (std::size_t c = 0; c < g.channels; ++c) {
          out[(f * tg.height + y / patch) * tg.width + x / patch] +=
              v[((f * g.height + y) * g.width + x) * g.channels + c] * norm;
        }
  return Tensor::from(tg.tensor_shape(), std::move(out));
}

double abs_ncc(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw DimensionError("abs_ncc: sizes differ");
  const auto av = a.data();
  const auto bv = b.data();
  auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  };
  if (av.empty() || constant(av) || constant(bv)) return 0.0;
  const double n = static_cast<double>(av.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    ma += av[i];
    mb += bv[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    sab += (av[i] - ma) * (bv[i] - mb);
    saa += (av[i] - ma) * (av[i] - ma);
    sbb += (bv[i] - mb) * (bv[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return std::abs(sab / std::sqrt(saa * sbb));
}

std::vector<BlockProjection> pca_project(const Model& model, const ToySample& sample, const DiffusionSchedule& schedule,
                                         std::size_t t, std::size_t k, std::uint64_t noise_seed) {
  NoGradGuard no_grad;
  const InpaintingExample ex = sample.example();
  Rng rng(noise_seed);
  std::vector<double> noise(ex.x0.numel());
  for (double& v : noise) v = rng.normal();
  const Tensor x_t = q_sample(schedule, ex.x0, t, Tensor::from(ex.x0.shape(), std::move(noise)));
  ForwardTrace trace;
  (void)model_forward(model, make_model_input(ex, x_t), static_cast<double>(t), &trace);

  const std::size_t patch = model.config.patch;
  const GridShape g = grid_of(sample.garment);
  const GridShape token_grid{g.frames, g.height / patch, g.width / patch, 1};
  const Tensor luminance = patch_luminance(sample.garment, patch);

  std::vector<BlockProjection> out;
  for (std::size_t b = 0; b < trace.garment_features.size(); ++b) {
    BlockProjection p;
    p.block = b;
    p.token_grid = token_grid;
    const Tensor& feats = trace.garment_features[b];
    if (feats.defined() && feats.rank() == 2 && feats.dim(0) > 0) {
      p.has_garment = true;
      p.pca = pca(feats, k);
      p.texture_score = abs_ncc(component_heatmap(p, 0), luminance);
    }
    out.push_back(std::move(p));
  }
  return out;
}

Tensor component_heatmap(const BlockProjection& p, std::size_t component) {
  if (!p.has_garment) throw ContractError("block " + std::to_string(p.block) + " carries no garment tokens");
  if (component >= p.pca.k) throw IndexError("component " + std::to_string(component) + " was not computed");
  const std::size_t n = p.pca.scores.dim(0);
  const auto s = p.pca.scores.data();
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) peak = std::max(peak, std::abs(s[i * p.pca.k + component]));
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = peak > 0.0 ? s[i * p.pca.k + component] / peak : 0.0;
  return Tensor::from(p.token_grid.tensor_shape(), std::move(v));
}

// ---- ablation --------------------------------------------------------------------

double AblationTable::mean_ssim(BlockVariant v) const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.variant != v) continue;
    total += r.report.mean_ssim;
    ++n;
  }
  return n ? total / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

const AblationRow* AblationTable::find(BlockVariant v, std::uint64_t seed) const {
  for (const auto& r : rows)
    if (r.variant == v && r.seed == seed) return &r;
  return nullptr;
}

std::vector<RunConfig> ablation_runs(const RunConfig& base) {
  std::vector<RunConfig> runs;
  for (BlockVariant v : base.ablation.variants)
    for (std::uint64_t s : base.ablation.seeds) {
      RunConfig c = base;
      c.variant = v;
      c.seed = s;
      runs.push_back(c);
    }
  return runs;
}

AblationTable variant_ablation(const std::vector<RunConfig>& runs, std::size_t eval_threads, const TrainedHook& hook) {
  AblationTable table;
  if (runs.empty()) return table;
  table.budget_hash = budget_hash(runs.front());
  for (const auto& c : runs) {
    if (budget_hash(c) != table.budget_hash) {
      throw ContractError("ablation runs do not share a budget: " + budget_hash(c) + " vs " + table.budget_hash);
    }
  }
  for (const auto& c : runs) {
    TrainedRun trained = train_run(c);
    if (hook) hook(c, trained.model);
    AblationRow row{c.variant, c.seed, config_hash(c), eval_run(trained.model, c, eval_threads),
                    trained.losses.empty() ? 0.0 : trained.losses.back()};
    table.rows.push_back(std::move(row));
  }
  return table;
}

json to_json(const AblationTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"variant", std::string(to_string(r.variant))},
                    {"seed", r.seed},
                    {"config_hash", r.config_hash},
                    {"final_loss", r.final_loss},
                    {"report", to_json(r.report)}});
  }
  json means = json::object();
  for (const auto& r : t.rows) {
    const std::string name(to_string(r.variant));
    if (!means.contains(name)) means[name] = t.mean_ssim(r.variant);
  }
  return {{"budget_hash", t.budget_hash}, {"rows", rows}, {"mean_ssim", means}};
}

std::string render_table(const AblationTable& t) {
  std::vector<BlockVariant> variants;
  std::vector<std::uint64_t> seeds;
  for (const auto& r : t.rows) {
    if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) variants.push_back(r.variant);
    if (std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end()) seeds.push_back(r.seed);
  }
  std::ostringstream os;
  os << std::left << std::setw(12) << "variant";
  for (auto s : seeds) os << std::right << std::setw(10) << ("seed " + std::to_string(s));
  os << std::setw(10) << "mean" << '\n';
  os << std::fixed << std::setprecision(4);
  for (BlockVariant v : variants) {
    os << std::left << std::setw(12) << to_string(v) << std::right;
    for (auto s : seeds) {
      const AblationRow* r = t.find(v, s);
      if (r) {
        os << std::setw(10) << r->report.mean_ssim;
      } else {
        os << std::setw(10) << "-";
      }
    }
    os << std::setw(10) << t.mean_ssim(v) << '\n';
  }
  os << "budget " << t.budget_hash << '\n';
  return os.str();
}

}  // namespace mnvton
