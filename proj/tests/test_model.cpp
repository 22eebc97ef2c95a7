#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "alignvlm/model.hpp"
#include "alignvlm/synth.hpp"
#include "alignvlm/train.hpp"
#include "test_support.hpp"

using namespace alignvlm;
using Catch::Approx;

namespace {

// Log-softmax cross-entropy of one logit row, in long double.
long double oracle_ce(std::span<const double> row, std::size_t target) {
  long double mx = row[0];
  for (double v : row) mx = std::max<long double>(mx, v);
  long double z = 0;
  for (double v : row) z += std::exp((long double)v - mx);
  return -((long double)row[target] - mx - std::log(z));
}

}  // namespace

TEST_CASE("embed_tokens examples", "[model]") {
  Rng rng(1);
  const auto table = rng.normal_tensor<double>({6, 3}, 1.0);
  Graph<double> g;
  auto t = g.constant(table);
  const auto first = embed_tokens(t, {0}).value();
  for (std::size_t j = 0; j < 3; ++j) CHECK(first(0, j) == table(0, j));

  const auto rep = embed_tokens(t, {4, 4}).value();
  for (std::size_t j = 0; j < 3; ++j) CHECK(rep(0, j) == rep(1, j));

  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  const auto permuted = embed_tokens(t, perm).value();
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(permuted(i, j) == table(perm[i], j));

  CHECK_THROWS_AS(embed_tokens(t, {6}), IndexError);
}

TEST_CASE("build_input examples", "[model]") {
  Rng rng(2);
  Graph<double> g;
  const auto vis = rng.normal_tensor<double>({3, 4}, 1.0);
  const auto txt = rng.normal_tensor<double>({2, 4}, 1.0);
  auto v = g.constant(vis), t = g.constant(txt);
  CHECK(build_input(v, g.constant(Tensor<double>({0, 4}))).value() == vis);
  CHECK(build_input(g.constant(Tensor<double>({0, 4})), t).value() == txt);
  const auto both = build_input(v, t).value();
  REQUIRE(both.rows() == 5);
  for (std::size_t j = 0; j < 4; ++j) {
    for (std::size_t i = 0; i < 3; ++i) CHECK(both(i, j) == vis(i, j));
    for (std::size_t i = 0; i < 2; ++i) CHECK(both(3 + i, j) == txt(i, j));
  }
  CHECK_THROWS_AS(build_input(v, g.constant(Tensor<double>::matrix(2, 5))), ShapeError);
}

TEST_CASE("synth_document examples", "[model]") {
  const auto a = synth_document(42, 10, 256);
  const auto b = synth_document(42, 10, 256);
  CHECK(a.image == b.image);
  CHECK(a.target == b.target);
  CHECK(a.target.size() == 10);
  for (auto id : a.target) {
    CHECK(id >= kFirstGlyphToken);
    CHECK(id < 256);
  }
  CHECK(synth_document(43, 10, 256).target != a.target);

  const auto blank = synth_document(7, 0, 256);
  CHECK(blank.target.empty());
  for (auto p : blank.image.pixels) CHECK(p == 0);

  CHECK_THROWS_AS(synth_document(1, 17, 256), InputError);
  CHECK_NOTHROW(synth_document(1, 16, 256));
}

TEST_CASE("glyph bitmaps are pairwise distinct", "[model]") {
  std::vector<std::vector<std::uint8_t>> bitmaps;
  for (std::size_t id = 0; id < 256; ++id) bitmaps.push_back(glyph_bitmap(id));
  for (std::size_t a = 0; a < bitmaps.size(); ++a)
    for (std::size_t b = a + 1; b < bitmaps.size(); ++b) {
      std::size_t differ = 0;
      for (std::size_t k = 0; k < bitmaps[a].size(); ++k) differ += bitmaps[a][k] != bitmaps[b][k];
      if (differ == 0) FAIL("glyphs " << a << " and " << b << " coincide");
    }
  std::set<std::vector<std::uint8_t>> all;
  for (std::size_t id = 0; id < kMaxGlyphVocab; ++id) all.insert(glyph_bitmap(id));
  CHECK(all.size() == kMaxGlyphVocab);
  CHECK_THROWS_AS(glyph_bitmap(kMaxGlyphVocab), InputError);
}

TEST_CASE("forward_loss: zero embeddings give ln V", "[model]") {
  Rng rng(3);
  auto dims = testing_support::tiny_dims();
  for (auto kind : kAllConnectors) {
    auto m = VlmModel<double>::create(dims, kind, 4);
    m.decoder.embed.weights = Tensor<double>::matrix(dims.vocab, dims.embed_dim);
    m.decoder.embed.refresh_bounds();
    const auto tiling = m.tiling;
    std::vector<Example<double>> batch{
        {prepare_patches<double>(testing_support::random_image(rng, 8, 8), tiling), {kBosToken}, {2, 3}},
        {prepare_patches<double>(testing_support::random_image(rng, 16, 8), tiling), {kQueryToken}, {6}}};
    CHECK(forward_loss(batch, m) == Approx(std::log(double(dims.vocab))).epsilon(1e-12));
  }
}

TEST_CASE("forward_loss: two-token case against log-softmax arithmetic", "[model]") {
  Rng rng(4);
  auto m = VlmModel<double>::create(testing_support::tiny_dims(), ConnectorKind::Mlp, 9);
  const Example<double> ex{prepare_patches<double>(testing_support::random_image(rng, 8, 8), m.tiling),
                           {kBosToken},
                           {5, 3}};
  // The decoder sees [BOS, 5]; row 0 predicts 5 and row 1 predicts 3.
  Graph<double> g;
  auto vis = vision_forward(g, m, ex.patches).connector.tokens;
  const auto logits = decode_logits(g, m.decoder, vis, {kBosToken, 5}).value();
  REQUIRE(logits.rows() == 2);
  const long double want = (oracle_ce(logits.row(0), 5) + oracle_ce(logits.row(1), 3)) / 2;
  CHECK(forward_loss<double>({ex}, m) == Approx(double(want)).epsilon(1e-12));
}

TEST_CASE("forward_loss: vision positions are not scored", "[model]") {
  Rng rng(5);
  auto m = VlmModel<double>::create(testing_support::tiny_dims(), ConnectorKind::Align, 2);
  const Example<double> ex{prepare_patches<double>(testing_support::random_image(rng, 8, 8), m.tiling),
                           {kBosToken},
                           {4}};
  Graph<double> g;
  auto vis = vision_forward(g, m, ex.patches).connector.tokens;
  const auto logits = decode_logits(g, m.decoder, vis, {kBosToken}).value();
  CHECK(logits.rows() == 1);
  CHECK(forward_loss<double>({ex}, m) == Approx(double(oracle_ce(logits.row(0), 4))).epsilon(1e-12));
}

TEST_CASE("forward_loss: degenerate inputs", "[model]") {
  Rng rng(6);
  auto m = VlmModel<double>::create(testing_support::tiny_dims(), ConnectorKind::Align, 2);
  const Example<double> empty{prepare_patches<double>(testing_support::random_image(rng, 8, 8), m.tiling),
                              {kBosToken},
                              {}};
  CHECK_THROWS_AS(forward_loss<double>({empty}, m), InputError);
  CHECK_THROWS_AS(forward_loss<double>({}, m), InputError);
  auto bad = empty;
  bad.target = {99};
  CHECK_THROWS_AS(forward_loss<double>({bad}, m), IndexError);
}

TEST_CASE("initial loss is close to ln V at default dimensions", "[model]") {
  const ModelDims dims;
  const auto docs = make_corpus(DocStyle::Page, 16, 11, dims.vocab);
  for (auto kind : kAllConnectors) {
    auto m = VlmModel<float>::create(dims, kind, 1);
    const auto loss = forward_loss(make_examples<float>(docs, m.tiling), m);
    INFO(connector_name(kind) << " loss " << loss);
    CHECK(std::abs(loss - std::log(256.0)) <= 0.5);
  }
}

TEST_CASE("untrained accuracy is near chance", "[model]") {
  const ModelDims dims;
  auto m = VlmModel<float>::create(dims, ConnectorKind::Align, 1);
  const auto docs = make_corpus(DocStyle::Page, 24, 12, dims.vocab);
  const auto metrics = evaluate(m, make_examples<float>(docs, m.tiling));
  CHECK(metrics.docs == 24);
  CHECK(metrics.token_accuracy < 0.05);
  CHECK_THROWS_AS(evaluate(m, std::vector<Example<float>>{}), InputError);
}

TEST_CASE("greedy decoding matches step-by-step generation", "[model]") {
  Rng rng(7);
  auto m = VlmModel<double>::create(testing_support::tiny_dims(), ConnectorKind::Vet, 8);
  const Example<double> ex{prepare_patches<double>(testing_support::random_image(rng, 16, 8), m.tiling),
                           {kQueryToken},
                           {2, 3, 4, 5, 6}};
  const auto [hyp, loss] = greedy_decode(m, ex);
  Graph<double> g;
  auto vis = vision_forward(g, m, ex.patches).connector.tokens.value();
  std::vector<std::size_t> input{kQueryToken};
  std::vector<std::size_t> naive;
  for (std::size_t k = 0; k < ex.target.size(); ++k) {
    Graph<double> step;
    const auto lv = decode_logits(step, m.decoder, step.constant(vis), input).value();
    const auto row = lv.row(lv.rows() - 1);
    const auto next = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    naive.push_back(next);
    input.push_back(next);
  }
  CHECK(hyp == naive);
  CHECK(loss / 5 == Approx(forward_loss<double>({ex}, m)).epsilon(1e-12));
}

TEST_CASE("the output head is the embedding table", "[model]") {
  Rng rng(9);
  auto m = VlmModel<double>::create(testing_support::tiny_dims(), ConnectorKind::Mlp, 8);
  const auto batch = prepare_patches<double>(testing_support::random_image(rng, 8, 8), m.tiling);
  Graph<double> g;
  auto vis = vision_forward(g, m, batch).connector.tokens;
  const auto before = decode_logits(g, m.decoder, vis, {kBosToken}).value();
  // Scaling only the rows of token 3 in the table scales its logit at a
  // position whose input does not involve token 3.
  for (std::size_t j = 0; j < m.dims.embed_dim; ++j) m.decoder.embed.weights(3, j) *= 2;
  Graph<double> g2;
  auto vis2 = vision_forward(g2, m, batch).connector.tokens;
  const auto after = decode_logits(g2, m.decoder, vis2, {kBosToken}).value();
  CHECK(after(0, 3) == Approx(2 * before(0, 3)).epsilon(1e-12));
  CHECK(after(0, 4) == Approx(before(0, 4)).epsilon(1e-12));
}

TEST_CASE("model dims validation", "[model]") {
  ModelDims d;
  d.embed_dim = 31;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  d = ModelDims{};
  d.vocab = 3;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  d = ModelDims{};
  d.tile_side = 50;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  d = ModelDims{};
  d.num_latents = 0;
  CHECK_THROWS_AS(VlmModel<float>::create(d, ConnectorKind::Perceiver, 1), ConfigError);
}

TEST_CASE("sequences longer than the decoder limit are rejected", "[model]") {
  auto dims = testing_support::tiny_dims();
  dims.max_positions = 10;
  auto m = VlmModel<double>::create(dims, ConnectorKind::Align, 1);
  Rng rng(10);
  const Example<double> ex{prepare_patches<double>(testing_support::random_image(rng, 8, 8), m.tiling),
                           {kBosToken},
                           {2}};
  CHECK_THROWS_AS(forward_loss<double>({ex}, m), ShapeError);
}
