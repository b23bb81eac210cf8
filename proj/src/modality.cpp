#include "mnvton/modality.hpp"

#include <cmath>
#include <string>

#include "mnvton/errors.hpp"

namespace mnvton {

std::string_view to_string(ModalityTag tag) {
  switch (tag) {
    case ModalityTag::Text: return "text";
    case ModalityTag::Garment: return "garment";
    case ModalityTag::Target: return "target";
  }
  return "?";
}

std::size_t GridShape::tokens(std::size_t patch) const {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw DimensionError("patch size " + std::to_string(patch) + " does not divide grid " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  return frames * (height / patch) * (width / patch);
}

GridShape grid_of(const Tensor& grid) {
  if (grid.rank() != 4) throw DimensionError("expected a [f,h,w,c] grid, got " + shape_str(grid.shape()));
  return {grid.dim(0), grid.dim(1), grid.dim(2), grid.dim(3)};
}

ModalityLayout ModalityLayout::from_counts(std::size_t text, std::size_t garment, std::size_t target) {
  ModalityLayout l;
  l.ranges_[0] = {0, text};
  l.ranges_[1] = {text, text + garment};
  l.ranges_[2] = {text + garment, text + garment + target};
  return l;
}

namespace {

std::vector<std::size_t> patch_index(const GridShape& g, std::size_t patch) {
  const std::size_t tr = g.token_rows(patch), tc = g.token_cols(patch);
  const std::size_t dim = patch * patch * g.channels;
  std::vector<std::size_t> index;
  index.reserve(g.numel());
  for (std::size_t f = 0; f < g.frames; ++f)
    for (std::size_t r = 0; r < tr; ++r)
      for (std::size_t c = 0; c < tc; ++c)
        for (std::size_t py = 0; py < patch; ++py)
          for (std::size_t px = 0; px < patch; ++px)
            for (std::size_t ch = 0; ch < g.channels; ++ch) {
              const std::size_t y = r * patch + py, x = c * patch + px;
              index.push_back(((f * g.height + y) * g.width + x) * g.channels + ch);
            }
  (void)dim;
  return index;
}

void axis_band(double pos, std::size_t band, double* out) {
  const std::size_t half = band / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double omega = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(pos * omega);
    out[half + i] = std::cos(pos * omega);
  }
}

double corner_coord(std::size_t j, std::size_t n_dst, std::size_t n_src) {
  if (n_dst <= 1 || n_src <= 1) return 0.0;
  return static_cast<double>(j * (n_src - 1)) / static_cast<double>(n_dst - 1);
}

struct Lerp {
  std::size_t lo, hi;
  double w;  // weight of hi
};

Lerp lerp_at(double coord, std::size_t n) {
  const auto lo = static_cast<std::size_t>(std::floor(coord));
  const std::size_t hi = std::min(lo + 1, n - 1);
  return {lo, hi, coord - static_cast<double>(lo)};
}

}  // namespace

Tensor patchify(const Tensor& grid, std::size_t patch) {
  const GridShape g = grid_of(grid);
  const std::size_t L = g.tokens(patch);
  const auto index = patch_index(g, patch);
  return gather(grid, index, {L, patch * patch * g.channels});
}

Tensor unpatchify(const Tensor& tokens, const GridShape& grid, std::size_t patch) {
  const std::size_t L = grid.tokens(patch);
  if (tokens.rank() != 2 || tokens.dim(0) != L || tokens.dim(1) != patch * patch * grid.channels) {
    throw DimensionError("unpatchify: tokens " + shape_str(tokens.shape()) + " do not match grid " +
                         shape_str(grid.tensor_shape()) + " at patch " + std::to_string(patch));
  }
  const auto forward = patch_index(grid, patch);
  std::vector<std::size_t> inverse(forward.size());
  for (std::size_t i = 0; i < forward.size(); ++i) inverse[forward[i]] = i;
  return gather(tokens, inverse, grid.tensor_shape());
}

Tensor build_pos_embed(const GridShape& grid, std::size_t patch, std::size_t d) {
  if (d == 0 || d % 6 != 0) {
    throw ConfigError("position embedding width " + std::to_string(d) +
                      " must be a positive multiple of 6 (3 axes x sin/cos)");
  }
  const std::size_t L = grid.tokens(patch);
  const std::size_t band = d / 3;
  const std::size_t tr = grid.token_rows(patch), tc = grid.token_cols(patch);
  std::vector<double> out(L * d);
  std::size_t t = 0;
  for (std::size_t f = 0; f < grid.frames; ++f)
    for (std::size_t r = 0; r < tr; ++r)
      for (std::size_t c = 0; c < tc; ++c, ++t) {
        double* row = out.data() + t * d;
        axis_band(static_cast<double>(f), band, row);
        axis_band(static_cast<double>(r), band, row + band);
        axis_band(static_cast<double>(c), band, row + 2 * band);
      }
  return Tensor::from({L, d}, std::move(out));
}

Tensor padded_pos_embed(const GridShape& grid, std::size_t patch, std::size_t d) {
  const std::size_t used = (d / 6) * 6;
  const std::size_t L = grid.tokens(patch);
  if (used == d) return build_pos_embed(grid, patch, d);
  std::vector<double> out(L * d, 0.0);
  if (used > 0) {
    const Tensor core = build_pos_embed(grid, patch, used);
    const auto src = core.data();
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t j = 0; j < used; ++j) out[t * d + j] = src[t * used + j];
  }
  return Tensor::from({L, d}, std::move(out));
}

Tensor interpolate_pos_embed(const Tensor& src, const GridShape& src_grid, const GridShape& dst_grid,
                             std::size_t patch) {
  const std::size_t Ls = src_grid.tokens(patch);
  const std::size_t Ld = dst_grid.tokens(patch);
  if (src.rank() != 2 || src.dim(0) != Ls) {
    throw DimensionError("interpolate_pos_embed: table " + shape_str(src.shape()) + " does not cover " +
                         std::to_string(Ls) + " source tokens");
  }
  const std::size_t d = src.dim(1);
  const std::size_t sf = src_grid.frames, sr = src_grid.token_rows(patch), sc = src_grid.token_cols(patch);
  const std::size_t df = dst_grid.frames, dr = dst_grid.token_rows(patch), dc = dst_grid.token_cols(patch);
  if (sf == df && sr == dr && sc == dc) return src.detach();

  const auto s = src.data();
  auto at = [&](std::size_t f, std::size_t r, std::size_t c) { return s.data() + ((f * sr + r) * sc + c) * d; };
  std::vector<double> out(Ld * d, 0.0);
  std::size_t t = 0;
  for (std::size_t f = 0; f < df; ++f) {
    const Lerp lf = lerp_at(corner_coord(f, df, sf), sf);
    for (std::size_t r = 0; r < dr; ++r) {
      const Lerp lr = lerp_at(corner_coord(r, dr, sr), sr);
      for (std::size_t c = 0; c < dc; ++c, ++t) {
        const Lerp lc = lerp_at(corner_coord(c, dc, sc), sc);
        double* o = out.data() + t * d;
        const std::array<std::pair<std::size_t, double>, 2> fw = {{{lf.lo, 1.0 - lf.w}, {lf.hi, lf.w}}};
        const std::array<std::pair<std::size_t, double>, 2> rw = {{{lr.lo, 1.0 - lr.w}, {lr.hi, lr.w}}};
        const std::array<std::pair<std::size_t, double>, 2> cw = {{{lc.lo, 1.0 - lc.w}, {lc.hi, lc.w}}};
        for (const auto& [fi, wf] : fw) {
          if (wf == 0.0) continue;
          for (const auto& [ri, wr] : rw) {
            if (wr == 0.0) continue;
            for (const auto& [ci, wc] : cw) {
              if (wc == 0.0) continue;
              const double w = wf * wr * wc;
              const double* v = at(fi, ri, ci);
              for (std::size_t j = 0; j < d; ++j) o[j] += w * v[j];
            }
          }
        }
      }
    }
  }
  return Tensor::from({Ld, d}, std::move(out));
}

// ---- embedding -----------------------------------------------------------------

void TokenEmbedder::rebuild_pos_tables() {
  garment_pos = padded_pos_embed(garment_base, patch, d);
  target_pos = padded_pos_embed(target_base, patch, d);
}

namespace {

// Frames beyond the base lattice get their own temporal code (frame 0 keeps
// the image code); a different spatial lattice is resampled from the base.
Tensor pos_for(const GridShape& grid, const GridShape& base, const Tensor& base_table, std::size_t patch) {
  const bool same_space =
      grid.token_rows(patch) == base.token_rows(patch) && grid.token_cols(patch) == base.token_cols(patch);
  if (same_space && grid.frames == base.frames) return base_table;
  GridShape lattice = base;
  lattice.frames = grid.frames;
  const Tensor table =
      grid.frames == base.frames ? base_table : padded_pos_embed(lattice, patch, base_table.dim(1));
  if (same_space) return table;
  return interpolate_pos_embed(table, lattice, grid, patch);
}

Tensor segment_row(const Tensor& segment, ModalityTag tag) {
  const auto i = static_cast<std::size_t>(tag);
  return slice_rows(segment, i, i + 1);
}

}  // namespace

Tensor TokenEmbedder::embed_text(std::span<const std::size_t> ids) const {
  for (std::size_t id : ids) {
    if (id >= vocab()) {
      throw VocabularyError("text id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(vocab()));
    }
  }
  if (ids.empty()) return Tensor::zeros({0, d});
  return add_row(gather_rows(text_table, ids), segment_row(segment, ModalityTag::Text));
}

Tensor TokenEmbedder::embed_garment(const Tensor& garment) const {
  const GridShape g = grid_of(garment);
  const Tensor x = garment_in(patchify(garment, patch));
  return add_row(add(x, pos_for(g, garment_base, garment_pos, patch)), segment_row(segment, ModalityTag::Garment));
}

Tensor TokenEmbedder::embed_target(const Tensor& target) const {
  const GridShape g = grid_of(target);
  const Tensor x = target_in(patchify(target, patch));
  return add_row(add(x, pos_for(g, target_base, target_pos, patch)), segment_row(segment, ModalityTag::Target));
}

TokenStream assemble_sequence(std::span<const std::size_t> text_ids, const Tensor& garment,
                              const Tensor& target, const TokenEmbedder& embedder) {
  SequenceParts parts{embedder.embed_text(text_ids), embedder.embed_garment(garment),
                      embedder.embed_target(target)};
  TokenStream s;
  s.tokens = join_sequence(parts, &s.layout);
  s.garment_grid = grid_of(garment);
  s.target_grid = grid_of(target);
  return s;
}

SequenceParts split_sequence(const Tensor& tokens, const ModalityLayout& layout) {
  if (tokens.rank() != 2 || layout.total() != tokens.dim(0)) {
    throw IndexError("layout of " + std::to_string(layout.total()) + " tokens does not fit tensor " +
                     shape_str(tokens.shape()));
  }
  auto part = [&](ModalityTag tag) {
    const TokenRange& r = layout.range(tag);
    return slice_rows(tokens, r.begin, r.end);
  };
  return {part(ModalityTag::Text), part(ModalityTag::Garment), part(ModalityTag::Target)};
}

Tensor join_sequence(const SequenceParts& parts, ModalityLayout* layout_out) {
  if (layout_out) *layout_out = ModalityLayout::from_counts(parts.text.rows(), parts.garment.rows(), parts.target.rows());
  const Tensor all[] = {parts.text, parts.garment, parts.target};
  return concat_rows(all);
}

Tensor concat_channels(std::span<const Tensor> grids) {
  if (grids.empty()) throw ContractError("concat_channels: no grids");
  const GridShape g0 = grid_of(grids[0]);
  std::size_t c_total = 0;
  for (const Tensor& g : grids) {
    const GridShape gs = grid_of(g);
    if (gs.frames != g0.frames || gs.height != g0.height || gs.width != g0.width) {
      throw DimensionError("concat_channels: grids " + shape_str(grids[0].shape()) + " and " +
                           shape_str(g.shape()) + " differ spatially");
    }
    c_total += gs.channels;
  }
  const std::size_t pixels = g0.frames * g0.height * g0.width;
  std::vector<double> out(pixels * c_total);
  std::size_t off = 0;
  for (const Tensor& g : grids) {
    const std::size_t c = g.dim(3);
    const auto src = g.data();
    for (std::size_t p = 0; p < pixels; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) out[p * c_total + off + ch] = src[p * c + ch];
    off += c;
  }
  return Tensor::from({g0.frames, g0.height, g0.width, c_total}, std::move(out));
}

}  // namespace mnvton
