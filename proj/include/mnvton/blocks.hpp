#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "mnvton/modality.hpp"
#include "mnvton/nn.hpp"
#include "mnvton/rng.hpp"
#include "mnvton/tensor.hpp"

namespace mnvton {

// Epsilon inside layer_norm. Small enough that rescaling a token by 0.1..10
// moves its normalized features by well under 1e-9.
inline constexpr double kLayerNormEps = 1e-12;

enum class BlockVariant { DualNet, NaiveSplit, MN_V1, MN_V2, MN_V3 };

std::string_view to_string(BlockVariant v);
BlockVariant parse_variant(std::string_view name);  // ConfigError on unknown names
bool is_modality_normalized(BlockVariant v);

// Modalities sharing one AdaLN-zero parameter set. Groups are contiguous in
// canonical order, so each one covers a single token range.
using Grouping = std::vector<std::vector<ModalityTag>>;

// Grouping of the main token stream:
//   MN_V1      {text, garment} {target}
//   MN_V2      {text} {garment} {target}
//   MN_V3      {text} {garment, target}
//   NaiveSplit {text, garment, target}   one shared normalization
//   DualNet    {text} {target}           garment lives in the ReferenceNet
Grouping norm_groups(BlockVariant v);
// ReferenceNet blocks mirror the main block layout; the garment stream uses
// the visual slot and the text slot idles.
Grouping reference_groups();

struct GroupSpan {
  TokenRange range;
  std::size_t group = 0;
};
// Non-empty token range of each group under the layout.
std::vector<GroupSpan> group_spans(const ModalityLayout& layout, const Grouping& grouping);

// Shift/scale/gate for the attention and MLP branches, each [1, d].
struct Modulation {
  Tensor shift_attn, scale_attn, gate_attn;
  Tensor shift_mlp, scale_mlp, gate_mlp;
};

// One cond -> 6d linear map per normalization group. All weights start at
// zero, so gates are zero and the block is the identity at initialization.
struct AdaLNZeroParams {
  std::vector<Linear> groups;

  std::size_t group_count() const { return groups.size(); }
  // cond is the raw conditioning row [1, d_c]; SiLU is applied here.
  Modulation modulation(const Tensor& cond, std::size_t group) const;
};

struct DiTBlockParams {
  Linear wq, wk, wv, wo;
  Linear mlp_in;   // d -> 4d
  Linear mlp_out;  // 4d -> d
  AdaLNZeroParams adaln;
  std::size_t heads = 1;

  std::size_t width() const { return wq.in_features(); }
  void append_params(ParamList& out, const std::string& prefix) const;
};

DiTBlockParams make_block(std::size_t d, std::size_t cond_dim, std::size_t heads, std::size_t groups,
                          double init_std, Rng& rng);

// Everything the main network would otherwise hand the garment: its own
// garment projection, timestep MLP and a block stack of the same depth.
struct ReferenceNetParams {
  Linear garment_in;
  Linear time_in, time_out;
  std::vector<DiTBlockParams> blocks;

  void append_params(ParamList& out, const std::string& prefix) const;
};

// Intermediates one block exposes for inspection and tests.
struct BlockTrace {
  std::vector<GroupSpan> spans;
  std::vector<Tensor> normed;  // post-layer_norm, pre-affine features per span (attention branch)
  Tensor fused;                // F': modulated features concatenated in canonical order
  Tensor q, k, v;
};

struct ModulatedTokens {
  Tensor pre_attn;  // (1 + scale) * layer_norm(x) + shift
  Tensor normed;    // layer_norm(x)
  Tensor gate_attn;
  Tensor gate_mlp;
};

// x must hold tokens of a single normalization group. ContractError when the
// group index does not exist in params.
ModulatedTokens adaln_modulate(const Tensor& x, const Tensor& cond, const DiTBlockParams& params,
                               std::size_t group);

// Multi-head scaled dot-product attention; queries from q_src, keys/values
// from kv_src, followed by the output projection.
Tensor attention(const Tensor& q_src, const Tensor& kv_src, const DiTBlockParams& params,
                 BlockTrace* trace = nullptr);

// Separate modulation per group, token-axis fusion, shared self-attention
// over the whole sequence, gated residuals. Layout is preserved.
TokenStream fused_block_forward(const TokenStream& seq, const Tensor& cond, const DiTBlockParams& params,
                                const Grouping& grouping, BlockTrace* trace = nullptr);

// variant must be one of MN_V1/MN_V2/MN_V3.
TokenStream mn_block_forward(const TokenStream& seq, const Tensor& cond, const DiTBlockParams& params,
                             BlockVariant variant, BlockTrace* trace = nullptr);

// Split-and-fusion: one shared normalization; queries from text+target only,
// keys/values from the full sequence. The garment rows are consumed, so the
// output is shorter than the input.
TokenStream naive_split_forward(const TokenStream& seq, const Tensor& cond, const DiTBlockParams& params,
                                BlockTrace* trace = nullptr);

// One main-network layer of the dual paradigm: queries from the main stream,
// keys/values from main features concatenated with ref_features.
TokenStream dual_main_forward(const TokenStream& main, const Tensor& ref_features, const Tensor& cond,
                              const DiTBlockParams& params, BlockTrace* trace = nullptr);

struct DualLayerOutput {
  TokenStream main;
  TokenStream ref;
};

// Runs ReferenceNet layer l on the garment stream, then the main layer with
// the ReferenceNet's modulated features as extra keys/values. Nothing flows
// from main back into the reference stream.
DualLayerOutput dual_layer_forward(const TokenStream& main, const TokenStream& ref, const Tensor& main_cond,
                                   const Tensor& ref_cond, const DiTBlockParams& main_params,
                                   const DiTBlockParams& ref_params, BlockTrace* main_trace = nullptr,
                                   BlockTrace* ref_trace = nullptr);

// Sinusoidal timestep features [1, dim] (cos half, then sin half).
Tensor timestep_features(double t, std::size_t dim);

}  // namespace mnvton
