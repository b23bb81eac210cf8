#include "mnvton/model.hpp"

#include <string>

#include "mnvton/errors.hpp"

namespace mnvton {

void ModelConfig::validate() const {
  if (d == 0 || heads == 0 || d % heads != 0) {
    throw ConfigError("model width " + std::to_string(d) + " must be a positive multiple of heads (" +
                      std::to_string(heads) + ")");
  }
  if (d % 2 != 0) throw ConfigError("model width must be even for timestep features");
  if (blocks == 0) throw ConfigError("model needs at least one block");
  if (vocab < 3) throw ConfigError("vocabulary must hold pad, upper and lower");
  if (garment_grid.channels != target_grid.channels) {
    throw ConfigError("garment and target must have the same channel count");
  }
  (void)garment_grid.tokens(patch);
  (void)target_grid.tokens(patch);
}

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t d = config.d;
  const std::size_t p = config.patch;
  const double s = config.init_std;
  const std::size_t garment_features = p * p * config.garment_grid.channels;
  const bool dual = config.variant == BlockVariant::DualNet;

  Model m;
  m.config = config;
  m.embed.patch = p;
  m.embed.d = d;
  m.embed.text_table = normal_tensor({config.vocab, d}, s, rng);
  m.embed.segment = normal_tensor({3, d}, s, rng);
  if (!dual) m.embed.garment_in = Linear::normal(garment_features, d, s, rng);
  m.embed.target_in = Linear::normal(p * p * config.target_in_channels(), d, s, rng);
  m.embed.garment_base = config.garment_grid;
  m.embed.target_base = config.target_grid;
  m.embed.rebuild_pos_tables();

  m.time_in = Linear::normal(d, d, s, rng);
  m.time_out = Linear::normal(d, d, s, rng);
  const std::size_t groups = norm_groups(config.variant).size();
  for (std::size_t l = 0; l < config.blocks; ++l) m.blocks.push_back(make_block(d, d, config.heads, groups, s, rng));
  m.final_adaln = Linear::zeros(d, 2 * d);
  m.final_out = Linear::zeros(d, config.out_features());

  if (dual) {
    ReferenceNetParams r;
    r.garment_in = Linear::normal(garment_features, d, s, rng);
    r.time_in = Linear::normal(d, d, s, rng);
    r.time_out = Linear::normal(d, d, s, rng);
    const std::size_t ref_groups = reference_groups().size();
    for (std::size_t l = 0; l < config.blocks; ++l) {
      r.blocks.push_back(make_block(d, d, config.heads, ref_groups, s, rng));
    }
    m.ref = std::move(r);
  }
  return m;
}

ParamList Model::parameters() const {
  ParamList out;
  out.push_back({"embed.text_table", embed.text_table});
  out.push_back({"embed.segment", embed.segment});
  if (embed.garment_in.weight.defined()) push_linear(out, "embed.garment_in", embed.garment_in);
  push_linear(out, "embed.target_in", embed.target_in);
  push_linear(out, "time_in", time_in);
  push_linear(out, "time_out", time_out);
  for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].append_params(out, "block" + std::to_string(l));
  push_linear(out, "final_adaln", final_adaln);
  push_linear(out, "final_out", final_out);
  if (ref) ref->append_params(out, "ref");
  return out;
}

std::size_t count_params(const Model& model) {
  std::size_t n = 0;
  for (const auto& p : model.parameters()) n += p.tensor.numel();
  return n;
}

namespace {

Tensor time_mlp(const Linear& in, const Linear& out, double t, std::size_t d) {
  return out(silu(in(timestep_features(t, d))));
}

Tensor final_layer(const Model& m, const Tensor& target_tokens, const Tensor& cond) {
  const Tensor mod = m.final_adaln(silu(cond));
  const std::size_t d = m.config.d;
  const Tensor shift = slice_cols(mod, 0, d);
  const Tensor scl = slice_cols(mod, d, 2 * d);
  const Tensor h = add_row(mul_row(layer_norm(target_tokens, kLayerNormEps), add_scalar(scl, 1.0)), shift);
  return m.final_out(h);
}

Tensor segment(const Tensor& tokens, const ModalityLayout& layout, ModalityTag tag) {
  const TokenRange& r = layout.range(tag);
  return slice_rows(tokens, r.begin, r.end);
}

}  // namespace

Tensor conditioning(const Model& model, double t) {
  return time_mlp(model.time_in, model.time_out, t, model.config.d);
}

Tensor model_forward(const Model& model, const ModelInput& input, double t, ForwardTrace* trace) {
  const ModelConfig& cfg = model.config;
  const Tensor cond = conditioning(model, t);

  if (cfg.variant == BlockVariant::DualNet) {
    if (!model.ref || model.ref->blocks.size() != model.blocks.size()) {
      throw ConfigError("ReferenceNet depth must equal the main network depth");
    }
    const ReferenceNetParams& r = *model.ref;
    TokenEmbedder ref_embed = model.embed;
    ref_embed.garment_in = r.garment_in;

    TokenStream main;
    {
      const Tensor parts[] = {model.embed.embed_text(input.text_ids), model.embed.embed_target(input.target_input)};
      main.tokens = concat_rows(parts);
      main.layout = ModalityLayout::from_counts(parts[0].rows(), 0, parts[1].rows());
      main.target_grid = grid_of(input.target_input);
    }
    TokenStream ref;
    ref.tokens = ref_embed.embed_garment(input.garment);
    ref.layout = ModalityLayout::from_counts(0, ref.tokens.rows(), 0);
    ref.garment_grid = grid_of(input.garment);
    const Tensor ref_cond = time_mlp(r.time_in, r.time_out, t, cfg.d);

    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
      BlockTrace mt, rt;
      DualLayerOutput o = dual_layer_forward(main, ref, cond, ref_cond, model.blocks[l], r.blocks[l],
                                             trace ? &mt : nullptr, &rt);
      main = std::move(o.main);
      ref = std::move(o.ref);
      if (trace) {
        trace->blocks.push_back(std::move(mt));
        trace->ref_blocks.push_back(std::move(rt));
        trace->garment_features.push_back(ref.tokens);
      }
    }
    return final_layer(model, segment(main.tokens, main.layout, ModalityTag::Target), cond);
  }

  TokenStream seq = assemble_sequence(input.text_ids, input.garment, input.target_input, model.embed);
  for (const DiTBlockParams& block : model.blocks) {
    BlockTrace bt;
    BlockTrace* btp = trace ? &bt : nullptr;
    if (cfg.variant == BlockVariant::NaiveSplit) {
      seq = naive_split_forward(seq, cond, block, btp);
    } else {
      seq = mn_block_forward(seq, cond, block, cfg.variant, btp);
    }
    if (trace) {
      trace->blocks.push_back(std::move(bt));
      trace->garment_features.push_back(segment(seq.tokens, seq.layout, ModalityTag::Garment));
    }
  }
  return final_layer(model, segment(seq.tokens, seq.layout, ModalityTag::Target), cond);
}

void randomize_parameters(const Model& model, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& p : model.parameters()) {
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v = rng.normal(0.0, stddev);
  }
}

double model_grad_check(const ModelConfig& config, std::uint64_t seed, double param_stddev) {
  const Model model = init_model(config, seed);
  randomize_parameters(model, param_stddev, mix_seed(seed, 2));
  Rng rng(mix_seed(seed, 3));
  auto random_grid = [&rng](const GridShape& g) {
    std::vector<double> v(g.frames * g.height * g.width * g.channels);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor::from(g.tensor_shape(), std::move(v));
  };
  GridShape target_in = config.target_grid;
  target_in.channels = config.target_in_channels();
  const ModelInput input{{1 + rng.below(config.vocab - 1)}, random_grid(config.garment_grid), random_grid(target_in)};
  const double t = static_cast<double>(rng.below(100));
  const std::size_t rows = config.target_grid.tokens(config.patch);
  std::vector<double> w(rows * config.out_features());
  for (double& x : w) x = rng.normal();
  const Tensor weights = Tensor::from({rows, config.out_features()}, std::move(w));

  std::vector<Tensor> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);
  return grad_check([&] { return sum(mul(model_forward(model, input, t), weights)); }, params);
}

}  // namespace mnvton
