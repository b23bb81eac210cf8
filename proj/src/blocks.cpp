#include "mnvton/blocks.hpp"

#include <cmath>
#include <string>

#include "mnvton/errors.hpp"

namespace mnvton {

std::string_view to_string(BlockVariant v) {
  switch (v) {
    case BlockVariant::DualNet: return "DualNet";
    case BlockVariant::NaiveSplit: return "NaiveSplit";
    case BlockVariant::MN_V1: return "MN_V1";
    case BlockVariant::MN_V2: return "MN_V2";
    case BlockVariant::MN_V3: return "MN_V3";
  }
  return "?";
}

BlockVariant parse_variant(std::string_view name) {
  for (BlockVariant v : {BlockVariant::DualNet, BlockVariant::NaiveSplit, BlockVariant::MN_V1,
                         BlockVariant::MN_V2, BlockVariant::MN_V3}) {
    if (name == to_string(v)) return v;
  }
  throw ConfigError("unknown variant '" + std::string(name) +
                    "' (expected DualNet, NaiveSplit, MN_V1, MN_V2 or MN_V3)");
}

bool is_modality_normalized(BlockVariant v) {
  return v == BlockVariant::MN_V1 || v == BlockVariant::MN_V2 || v == BlockVariant::MN_V3;
}

Grouping norm_groups(BlockVariant v) {
  using M = ModalityTag;
  switch (v) {
    case BlockVariant::MN_V1: return {{M::Text, M::Garment}, {M::Target}};
    case BlockVariant::MN_V2: return {{M::Text}, {M::Garment}, {M::Target}};
    case BlockVariant::MN_V3: return {{M::Text}, {M::Garment, M::Target}};
    case BlockVariant::NaiveSplit: return {{M::Text, M::Garment, M::Target}};
    case BlockVariant::DualNet: return {{M::Text}, {M::Target}};
  }
  return {};
}

Grouping reference_groups() { return {{ModalityTag::Text}, {ModalityTag::Garment}}; }

std::vector<GroupSpan> group_spans(const ModalityLayout& layout, const Grouping& grouping) {
  std::vector<GroupSpan> spans;
  std::size_t covered = 0;
  for (std::size_t g = 0; g < grouping.size(); ++g) {
    bool first = true;
    TokenRange r;
    for (ModalityTag tag : grouping[g]) {
      const TokenRange& m = layout.range(tag);
      if (m.empty()) continue;
      if (first) {
        r = m;
        first = false;
      } else {
        if (m.begin != r.end) {
          throw ContractError("normalization group " + std::to_string(g) + " is not contiguous in the layout");
        }
        r.end = m.end;
      }
    }
    if (!first) {
      spans.push_back({r, g});
      covered += r.size();
    }
  }
  if (covered != layout.total()) {
    throw ContractError("grouping covers " + std::to_string(covered) + " of " + std::to_string(layout.total()) +
                        " tokens");
  }
  return spans;
}

Modulation AdaLNZeroParams::modulation(const Tensor& cond, std::size_t group) const {
  if (group >= groups.size()) {
    throw ContractError("normalization group " + std::to_string(group) + " not present (block has " +
                        std::to_string(groups.size()) + ")");
  }
  const Tensor m = groups[group](silu(cond));
  const std::size_t d = m.cols() / 6;
  auto part = [&](std::size_t i) { return slice_cols(m, i * d, (i + 1) * d); };
  return {part(0), part(1), part(2), part(3), part(4), part(5)};
}

void DiTBlockParams::append_params(ParamList& out, const std::string& prefix) const {
  push_linear(out, prefix + ".wq", wq);
  push_linear(out, prefix + ".wk", wk);
  push_linear(out, prefix + ".wv", wv);
  push_linear(out, prefix + ".wo", wo);
  push_linear(out, prefix + ".mlp_in", mlp_in);
  push_linear(out, prefix + ".mlp_out", mlp_out);
  for (std::size_t g = 0; g < adaln.groups.size(); ++g) {
    push_linear(out, prefix + ".adaln" + std::to_string(g), adaln.groups[g]);
  }
}

DiTBlockParams make_block(std::size_t d, std::size_t cond_dim, std::size_t heads, std::size_t groups,
                          double init_std, Rng& rng) {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  DiTBlockParams p;
  p.wq = Linear::normal(d, d, init_std, rng);
  p.wk = Linear::normal(d, d, init_std, rng);
  p.wv = Linear::normal(d, d, init_std, rng);
  p.wo = Linear::normal(d, d, init_std, rng);
  p.mlp_in = Linear::normal(d, 4 * d, init_std, rng);
  p.mlp_out = Linear::normal(4 * d, d, init_std, rng);
  for (std::size_t g = 0; g < groups; ++g) p.adaln.groups.push_back(Linear::zeros(cond_dim, 6 * d));
  p.heads = heads;
  return p;
}

void ReferenceNetParams::append_params(ParamList& out, const std::string& prefix) const {
  push_linear(out, prefix + ".garment_in", garment_in);
  push_linear(out, prefix + ".time_in", time_in);
  push_linear(out, prefix + ".time_out", time_out);
  for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].append_params(out, prefix + ".block" + std::to_string(l));
}

// ---- block pieces ------------------------------------------------------------

namespace {

Tensor modulate(const Tensor& normed, const Tensor& shift, const Tensor& scale) {
  return add_row(mul_row(normed, add_scalar(scale, 1.0)), shift);
}

Tensor gated(const Tensor& x, const Tensor& gate, const Tensor& branch) {
  return add(x, mul_row(branch, gate));
}

Tensor mlp(const Tensor& h, const DiTBlockParams& p) { return p.mlp_out(gelu(p.mlp_in(h))); }

// Slice a per-sequence tensor into the given spans, apply f to each span, and
// join the pieces back in order.
template <class F>
Tensor per_span(const std::vector<GroupSpan>& spans, const Tensor& x, F&& f) {
  std::vector<Tensor> parts;
  parts.reserve(spans.size());
  for (std::size_t i = 0; i < spans.size(); ++i) {
    parts.push_back(f(i, slice_rows(x, spans[i].range.begin, spans[i].range.end)));
  }
  return concat_rows(parts);
}

}  // namespace

ModulatedTokens adaln_modulate(const Tensor& x, const Tensor& cond, const DiTBlockParams& params,
                               std::size_t group) {
  const Modulation m = params.adaln.modulation(cond, group);
  const Tensor n = layer_norm(x, kLayerNormEps);
  return {modulate(n, m.shift_attn, m.scale_attn), n, m.gate_attn, m.gate_mlp};
}

Tensor attention(const Tensor& q_src, const Tensor& kv_src, const DiTBlockParams& params, BlockTrace* trace) {
  const std::size_t d = params.width();
  const std::size_t h = params.heads;
  const std::size_t dh = d / h;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor q = params.wq(q_src);
  const Tensor k = params.wk(kv_src);
  const Tensor v = params.wv(kv_src);
  if (trace) {
    trace->q = q;
    trace->k = k;
    trace->v = v;
  }
  std::vector<Tensor> heads;
  heads.reserve(h);
  for (std::size_t i = 0; i < h; ++i) {
    const Tensor qh = h == 1 ? q : slice_cols(q, i * dh, (i + 1) * dh);
    const Tensor kh = h == 1 ? k : slice_cols(k, i * dh, (i + 1) * dh);
    const Tensor vh = h == 1 ? v : slice_cols(v, i * dh, (i + 1) * dh);
    const Tensor probs = softmax_lastdim(scale(matmul_nt(qh, kh), inv_sqrt));
    heads.push_back(matmul(probs, vh));
  }
  const Tensor merged = h == 1 ? heads[0] : concat_cols(heads);
  return params.wo(merged);
}

TokenStream fused_block_forward(const TokenStream& seq, const Tensor& cond, const DiTBlockParams& params,
                                const Grouping& grouping, BlockTrace* trace) {
  if (grouping.size() != params.adaln.group_count()) {
    throw ContractError("grouping has " + std::to_string(grouping.size()) + " groups but the block carries " +
                        std::to_string(params.adaln.group_count()) + " AdaLN parameter sets");
  }
  const auto spans = group_spans(seq.layout, grouping);
  std::vector<Modulation> mods;
  mods.reserve(spans.size());
  for (const GroupSpan& s : spans) mods.push_back(params.adaln.modulation(cond, s.group));

  std::vector<Tensor> normed;
  const Tensor fused = per_span(spans, seq.tokens, [&](std::size_t i, const Tensor& xg) {
    const Tensor n = layer_norm(xg, kLayerNormEps);
    normed.push_back(n);
    return modulate(n, mods[i].shift_attn, mods[i].scale_attn);
  });
  if (trace) {
    trace->spans = spans;
    trace->normed = normed;
    trace->fused = fused;
  }
  const Tensor attn = attention(fused, fused, params, trace);

  std::vector<Tensor> mid_parts;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto& r = spans[i].range;
    mid_parts.push_back(gated(slice_rows(seq.tokens, r.begin, r.end), mods[i].gate_attn,
                              slice_rows(attn, r.begin, r.end)));
  }
  const Tensor mid = concat_rows(mid_parts);
  const Tensor h2 = per_span(spans, mid, [&](std::size_t i, const Tensor& xg) {
    return modulate(layer_norm(xg, kLayerNormEps), mods[i].shift_mlp, mods[i].scale_mlp);
  });
  const Tensor branch = mlp(h2, params);
  const Tensor out = per_span(spans, mid, [&](std::size_t i, const Tensor& xg) {
    const auto& r = spans[i].range;
    return gated(xg, mods[i].gate_mlp, slice_rows(branch, r.begin, r.end));
  });

  TokenStream next = seq;
  next.tokens = out;
  return next;
}

TokenStream mn_block_forward(const TokenStream& seq, const Tensor& cond, const DiTBlockParams& params,
                             BlockVariant variant, BlockTrace* trace) {
  if (!is_modality_normalized(variant)) {
    throw ContractError("mn_block_forward needs MN_V1, MN_V2 or MN_V3, got " + std::string(to_string(variant)));
  }
  return fused_block_forward(seq, cond, params, norm_groups(variant), trace);
}

TokenStream naive_split_forward(const TokenStream& seq, const Tensor& cond, const DiTBlockParams& params,
                                BlockTrace* trace) {
  if (params.adaln.group_count() != 1) {
    throw ContractError("naive split uses a single shared normalization");
  }
  const ModalityLayout& layout = seq.layout;
  const TokenRange text = layout.range(ModalityTag::Text);
  const TokenRange target = layout.range(ModalityTag::Target);
  const Modulation m = params.adaln.modulation(cond, 0);

  const Tensor normed = layer_norm(seq.tokens, kLayerNormEps);
  const Tensor fused = modulate(normed, m.shift_attn, m.scale_attn);
  auto query_rows = [&](const Tensor& x) {
    const Tensor parts[] = {slice_rows(x, text.begin, text.end), slice_rows(x, target.begin, target.end)};
    return concat_rows(parts);
  };
  if (trace) {
    trace->spans = {{TokenRange{0, layout.total()}, 0}};
    trace->normed = {normed};
    trace->fused = fused;
  }
  const Tensor attn = attention(query_rows(fused), fused, params, trace);
  const Tensor mid = gated(query_rows(seq.tokens), m.gate_attn, attn);
  const Tensor h2 = modulate(layer_norm(mid, kLayerNormEps), m.shift_mlp, m.scale_mlp);
  const Tensor out = gated(mid, m.gate_mlp, mlp(h2, params));

  TokenStream next;
  next.tokens = out;
  next.layout = ModalityLayout::from_counts(text.size(), 0, target.size());
  next.target_grid = seq.target_grid;
  return next;
}

TokenStream dual_main_forward(const TokenStream& main, const Tensor& ref_features, const Tensor& cond,
                              const DiTBlockParams& params, BlockTrace* trace) {
  if (!main.layout.range(ModalityTag::Garment).empty()) {
    throw ContractError("dual main stream must not carry garment tokens");
  }
  const Grouping grouping = norm_groups(BlockVariant::DualNet);
  if (grouping.size() != params.adaln.group_count()) {
    throw ContractError("dual main block needs " + std::to_string(grouping.size()) + " AdaLN groups");
  }
  const auto spans = group_spans(main.layout, grouping);
  std::vector<Modulation> mods;
  for (const GroupSpan& s : spans) mods.push_back(params.adaln.modulation(cond, s.group));

  std::vector<Tensor> normed;
  const Tensor fused = per_span(spans, main.tokens, [&](std::size_t i, const Tensor& xg) {
    const Tensor n = layer_norm(xg, kLayerNormEps);
    normed.push_back(n);
    return modulate(n, mods[i].shift_attn, mods[i].scale_attn);
  });
  if (trace) {
    trace->spans = spans;
    trace->normed = normed;
    trace->fused = fused;
  }
  const Tensor kv_parts[] = {fused, ref_features};
  const Tensor attn = attention(fused, concat_rows(kv_parts), params, trace);

  const Tensor mid = per_span(spans, main.tokens, [&](std::size_t i, const Tensor& xg) {
    const auto& r = spans[i].range;
    return gated(xg, mods[i].gate_attn, slice_rows(attn, r.begin, r.end));
  });
  const Tensor h2 = per_span(spans, mid, [&](std::size_t i, const Tensor& xg) {
    return modulate(layer_norm(xg, kLayerNormEps), mods[i].shift_mlp, mods[i].scale_mlp);
  });
  const Tensor branch = mlp(h2, params);
  const Tensor out = per_span(spans, mid, [&](std::size_t i, const Tensor& xg) {
    const auto& r = spans[i].range;
    return gated(xg, mods[i].gate_mlp, slice_rows(branch, r.begin, r.end));
  });
  TokenStream next = main;
  next.tokens = out;
  return next;
}

DualLayerOutput dual_layer_forward(const TokenStream& main, const TokenStream& ref, const Tensor& main_cond,
                                   const Tensor& ref_cond, const DiTBlockParams& main_params,
                                   const DiTBlockParams& ref_params, BlockTrace* main_trace,
                                   BlockTrace* ref_trace) {
  BlockTrace local;
  BlockTrace* rt = ref_trace ? ref_trace : &local;
  DualLayerOutput out;
  out.ref = fused_block_forward(ref, ref_cond, ref_params, reference_groups(), rt);
  out.main = dual_main_forward(main, rt->fused, main_cond, main_params, main_trace);
  return out;
}

Tensor timestep_features(double t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ConfigError("timestep feature width must be even");
  const std::size_t half = dim / 2;
  std::vector<double> v(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    v[i] = std::cos(t * freq);
    v[half + i] = std::sin(t * freq);
  }
  return Tensor::from({1, dim}, std::move(v));
}

}  // namespace mnvton
