#include <doctest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "mnvton/errors.hpp"
#include "mnvton/model.hpp"

using namespace mnvton;
using testing::bit_equal;
using testing::random_tensor;

TEST_SUITE("modality") {

TEST_CASE("patchify counts, order and round trip") {
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i);
  const Tensor g = Tensor::from({1, 4, 4, 1}, v);
  const Tensor t = patchify(g, 2);
  CHECK(t.shape() == Shape{4, 4});
  // First token is the top-left 2x2 patch, row-major inside the patch.
  CHECK(t.to_vector()[0] == 0.0);
  CHECK(t.to_vector()[1] == 1.0);
  CHECK(t.to_vector()[2] == 4.0);
  CHECK(t.to_vector()[3] == 5.0);
  CHECK(bit_equal(unpatchify(t, grid_of(g), 2), g));

  Rng rng(1);
  const Tensor video = random_tensor({2, 4, 4, 1}, rng);
  const Tensor vt = patchify(video, 2);
  CHECK(vt.shape() == Shape{8, 4});
  // Frame-major: tokens 4..7 come from frame 1.
  CHECK(vt.at(4, 0) == video.data()[16]);
  CHECK(bit_equal(unpatchify(vt, grid_of(video), 2), video));

  const Tensor three = Tensor::full({1, 4, 4, 3}, 3.0);
  for (double x : patchify(three, 2).to_vector()) CHECK(x == 3.0);
  CHECK_THROWS_AS((void)patchify(Tensor::zeros({1, 5, 4, 1}), 2), DimensionError);
}

TEST_CASE("patchify gradient passes the oracle") {
  Rng rng(2);
  Tensor g = random_tensor({2, 4, 4, 2}, rng, 1.0, true);
  const Tensor w = random_tensor({8, 8}, rng);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(patchify(x, 2), w)); }, g) < 1e-9);
}

TEST_CASE("sin-cos position embedding closed form") {
  const GridShape grid{2, 8, 8, 3};
  const std::size_t d = 12, band = 4;
  const Tensor e = build_pos_embed(grid, 2, d);
  CHECK(e.shape() == Shape{32, 12});
  // Position (0,0,0): sin half 0, cos half 1 in every band.
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < band / 2; ++i) {
      CHECK(e.at(0, b * band + i) == 0.0);
      CHECK(e.at(0, b * band + band / 2 + i) == 1.0);
    }
  }
  // Column axis band at column c: sin(c * w_i), w_i = 10000^(-i / (band/2)).
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < band / 2; ++i) {
      const double w = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(band / 2));
      CHECK(e.at(c, 2 * band + i) == doctest::Approx(std::sin(static_cast<double>(c) * w)).epsilon(1e-14));
      CHECK(e.at(c, 2 * band + band / 2 + i) == doctest::Approx(std::cos(static_cast<double>(c) * w)).epsilon(1e-14));
    }
  }
  CHECK_THROWS_AS((void)build_pos_embed(grid, 2, 8), ConfigError);
}

TEST_CASE("distinct positions get distinct embeddings") {
  const GridShape grid{4, 16, 16, 1};
  const Tensor e = build_pos_embed(grid, 2, 18);
  std::set<std::vector<double>> rows;
  for (std::size_t r = 0; r < e.dim(0); ++r) {
    std::vector<double> row(e.data().begin() + r * 18, e.data().begin() + (r + 1) * 18);
    rows.insert(row);
  }
  CHECK(rows.size() == e.dim(0));
}

TEST_CASE("axis band has the closed-form period") {
  // Band frequency i = 0 is w = 1, so the row axis repeats with period 2 pi.
  // Check sin(r + 2 pi) against the embedding formula by direct evaluation.
  const Tensor e = build_pos_embed({1, 16, 2, 1}, 2, 6);
  for (std::size_t r = 0; r < 8; ++r) {
    CHECK(e.at(r, 2) == doctest::Approx(std::sin(static_cast<double>(r) + 2.0 * std::numbers::pi)).epsilon(1e-12));
  }
}

TEST_CASE("interpolation: identity, corners, constants") {
  const GridShape small{1, 4, 4, 1}, large{1, 8, 8, 1};
  Rng rng(3);
  const Tensor src = random_tensor({4, 6}, rng);
  CHECK(bit_equal(interpolate_pos_embed(src, small, small, 2), src));
  const Tensor up = interpolate_pos_embed(src, small, large, 2);
  CHECK(up.shape() == Shape{16, 6});
  // Corners of the 2x2 lattice map to the corners of the 4x4 lattice.
  const std::pair<std::size_t, std::size_t> corners[] = {{0, 0}, {1, 3}, {2, 12}, {3, 15}};
  for (auto [s, d] : corners)
    for (std::size_t j = 0; j < 6; ++j) CHECK(up.at(d, j) == src.at(s, j));
  const Tensor constant = Tensor::full({4, 6}, 0.7);
  for (double v : interpolate_pos_embed(constant, small, large, 2).to_vector()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
  // Midpoint between two lattice columns along a row is their average.
  const Tensor row_mid = interpolate_pos_embed(src, small, GridShape{1, 4, 6, 1}, 2);
  for (std::size_t j = 0; j < 6; ++j)
    CHECK(row_mid.at(1, j) == doctest::Approx(0.5 * (src.at(0, j) + src.at(1, j))).epsilon(1e-14));
}

TEST_CASE("image embeddings equal frame 0 of the video grid") {
  const GridShape image{1, 16, 16, 3}, video{5, 16, 16, 3};
  const Tensor ei = build_pos_embed(image, 2, 24);
  const Tensor ev = build_pos_embed(video, 2, 24);
  CHECK(bit_equal(ei, slice_rows(ev, 0, ei.dim(0))));
  CHECK_FALSE(bit_equal(ei, slice_rows(ev, ei.dim(0), 2 * ei.dim(0))));

  // Through the embedder of a video-trained model, an image is frame 0.
  ModelConfig cfg;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.target_grid = video;
  const Model m = init_model(cfg, 4);
  Rng rng(5);
  const Tensor frame = random_tensor({1, 16, 16, 7}, rng);
  std::vector<double> vv;
  for (int f = 0; f < 5; ++f) vv.insert(vv.end(), frame.data().begin(), frame.data().end());
  const Tensor ti = m.embed.embed_target(frame);
  const Tensor tv = m.embed.embed_target(Tensor::from({5, 16, 16, 7}, vv));
  CHECK(bit_equal(ti, slice_rows(tv, 0, 64)));
}

TEST_CASE("assemble and split sequences") {
  TokenEmbedder e;
  Rng rng(6);
  e.d = 6;
  e.patch = 2;
  e.text_table = random_tensor({3, 6}, rng);
  e.segment = random_tensor({3, 6}, rng);
  e.garment_in = Linear::normal(4, 6, 0.1, rng);
  e.target_in = Linear::normal(4, 6, 0.1, rng);
  e.garment_base = {1, 4, 4, 1};
  e.target_base = {1, 8, 8, 1};
  e.rebuild_pos_tables();
  const std::size_t ids[] = {1, 2};
  const Tensor garment = random_tensor({1, 4, 4, 1}, rng);
  const Tensor target = random_tensor({1, 8, 8, 1}, rng);
  const TokenStream s = assemble_sequence(ids, garment, target, e);
  CHECK(s.layout.range(ModalityTag::Text) == TokenRange{0, 2});
  CHECK(s.layout.range(ModalityTag::Garment) == TokenRange{2, 6});
  CHECK(s.layout.range(ModalityTag::Target) == TokenRange{6, 22});
  CHECK(s.tokens.shape() == Shape{22, 6});

  const SequenceParts parts = split_sequence(s.tokens, s.layout);
  CHECK(bit_equal(parts.text, e.embed_text(ids)));
  CHECK(bit_equal(parts.garment, e.embed_garment(garment)));
  CHECK(bit_equal(parts.target, e.embed_target(target)));
  ModalityLayout rebuilt;
  CHECK(bit_equal(join_sequence(parts, &rebuilt), s.tokens));
  CHECK(rebuilt == s.layout);

  const TokenStream empty_text = assemble_sequence({}, garment, target, e);
  CHECK(empty_text.layout.range(ModalityTag::Text).empty());
  CHECK(empty_text.layout.total() == 20);

  const std::size_t bad[] = {3};
  CHECK_THROWS_AS((void)e.embed_text(bad), VocabularyError);
  CHECK_THROWS_AS((void)split_sequence(s.tokens, ModalityLayout::from_counts(2, 4, 17)), IndexError);
}

TEST_CASE("padded position table keeps the factorized block and zero tail") {
  const GridShape g{1, 4, 4, 1};
  const Tensor p = padded_pos_embed(g, 2, 8);
  const Tensor core = build_pos_embed(g, 2, 6);
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t j = 0; j < 6; ++j) CHECK(p.at(t, j) == core.at(t, j));
    CHECK(p.at(t, 6) == 0.0);
    CHECK(p.at(t, 7) == 0.0);
  }
}

}  // TEST_SUITE
