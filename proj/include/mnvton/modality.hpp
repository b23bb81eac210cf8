#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "mnvton/nn.hpp"
#include "mnvton/tensor.hpp"

namespace mnvton {

// Canonical sequence order is Text < Garment < Target.
enum class ModalityTag : std::size_t { Text = 0, Garment = 1, Target = 2 };
inline constexpr std::array<ModalityTag, 3> kModalities = {ModalityTag::Text, ModalityTag::Garment,
                                                           ModalityTag::Target};
std::string_view to_string(ModalityTag tag);

struct GridShape {
  std::size_t frames = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  Shape tensor_shape() const { return {frames, height, width, channels}; }
  std::size_t numel() const { return frames * height * width * channels; }
  // Throws DimensionError when patch does not divide height and width.
  std::size_t tokens(std::size_t patch) const;
  std::size_t token_rows(std::size_t patch) const { return height / patch; }
  std::size_t token_cols(std::size_t patch) const { return width / patch; }
  bool operator==(const GridShape&) const = default;
};

GridShape grid_of(const Tensor& grid);

struct TokenRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool empty() const { return begin == end; }
  bool operator==(const TokenRange&) const = default;
};

// Contiguous per-modality token ranges partitioning [0, total).
class ModalityLayout {
 public:
  ModalityLayout() = default;
  static ModalityLayout from_counts(std::size_t text, std::size_t garment, std::size_t target);

  const TokenRange& range(ModalityTag tag) const { return ranges_[static_cast<std::size_t>(tag)]; }
  std::size_t count(ModalityTag tag) const { return range(tag).size(); }
  std::size_t total() const { return ranges_[2].end; }
  bool operator==(const ModalityLayout&) const = default;

 private:
  std::array<TokenRange, 3> ranges_{};
};

struct TokenStream {
  Tensor tokens;  // [L, d]
  ModalityLayout layout;
  std::optional<GridShape> garment_grid;
  std::optional<GridShape> target_grid;
};

// [f,h,w,c] -> [f*(h/p)*(w/p), p*p*c]; tokens frame-major then row-major,
// features ordered (patch row, patch col, channel). Differentiable.
Tensor patchify(const Tensor& grid, std::size_t patch);
Tensor unpatchify(const Tensor& tokens, const GridShape& grid, std::size_t patch);

// Factorized sin-cos embedding over (frame, row, col) patch coordinates.
// d splits into three equal axis bands, each [sin(pos*w_i) | cos(pos*w_i)]
// with w_i = 10000^(-i/(band/2)). Requires d % 6 == 0.
Tensor build_pos_embed(const GridShape& grid, std::size_t patch, std::size_t d);

// Corner-aligned resampling of a [tokens, d] embedding from src_grid's token
// lattice onto dst_grid's: bilinear within a frame, linear across frames.
// Returns a bit-identical copy when the lattices match.
Tensor interpolate_pos_embed(const Tensor& src, const GridShape& src_grid, const GridShape& dst_grid,
                             std::size_t patch);

// Learned token embedding for all three modalities.
struct TokenEmbedder {
  Tensor text_table;  // [vocab, d]
  Tensor segment;     // [3, d], one learned row per modality
  Linear garment_in;  // p*p*c_garment -> d
  Linear target_in;   // p*p*c_target -> d
  std::size_t patch = 2;
  std::size_t d = 0;
  // Reference lattices for the fixed position tables. Visual grids with a
  // different token lattice get an interpolated table.
  GridShape garment_base;
  GridShape target_base;
  Tensor garment_pos;
  Tensor target_pos;

  // Position tables are zero-padded to d when d is not a multiple of 6.
  void rebuild_pos_tables();

  std::size_t vocab() const { return text_table.dim(0); }
  Tensor embed_text(std::span<const std::size_t> ids) const;
  Tensor embed_garment(const Tensor& garment) const;
  Tensor embed_target(const Tensor& target) const;
};

// Sin-cos table for an arbitrary d: the largest multiple of 6 gets the
// factorized embedding, the remaining channels stay zero.
Tensor padded_pos_embed(const GridShape& grid, std::size_t patch, std::size_t d);

// [Text | Garment | Target] with the layout recorded. Position embeddings go
// to visual tokens only; every token gets its modality's segment row.
TokenStream assemble_sequence(std::span<const std::size_t> text_ids, const Tensor& garment,
                              const Tensor& target, const TokenEmbedder& embedder);

struct SequenceParts {
  Tensor text;
  Tensor garment;
  Tensor target;
};
// Throws IndexError when the layout does not fit the tensor.
SequenceParts split_sequence(const Tensor& tokens, const ModalityLayout& layout);
Tensor join_sequence(const SequenceParts& parts, ModalityLayout* layout_out = nullptr);

// Concatenate grids along the channel axis (no autograd; used for inputs).
Tensor concat_channels(std::span<const Tensor> grids);

}  // namespace mnvton
