#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "mast/model.hpp"
#include "mast/training.hpp"
#include "oracles.hpp"

using mast::BlockKind;
using mast::BlockSpec;
using mast::ModelParams;
using mast::Tensor;
using mast::TokenGrid;
using mast::TokenTensor;
using oracle::block_params;
using oracle::dense_attention;
using oracle::random_tensor;

namespace {

double weighted_sum(const Tensor<double>& y, const Tensor<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
  return s;
}

BlockSpec attn_spec(std::size_t dim, std::size_t heads) {
  return {BlockKind::Attn, dim, dim, heads, 1, 1, 4.0};
}

}  // namespace

TEST(PatchEmbed, MastAndAstGrids) {
  const Tensor<float> spec({128, 1024});
  auto mast_tokens = mast::patch_embed(spec, Tensor<float>({96, 1, 7, 7}), Tensor<float>({96}),
                                       Tensor<float>({96}), mast::PatchSpec{96, 7, 4, 3});
  EXPECT_EQ(mast_tokens.grid, (TokenGrid{32, 256, true}));
  EXPECT_EQ(mast_tokens.count(), 8193u);
  EXPECT_EQ(mast_tokens.dim(), 96u);
  auto ast_tokens = mast::patch_embed(spec, Tensor<float>({768, 1, 16, 16}), Tensor<float>({768}),
                                      Tensor<float>({768}), mast::PatchSpec{768, 16, 10, 0});
  EXPECT_EQ(ast_tokens.grid, (TokenGrid{12, 101, true}));
  EXPECT_EQ(ast_tokens.grid.grid_count(), 1212u);
}

TEST(PatchEmbed, ZeroInputKeepsClassToken) {
  std::mt19937_64 rng(1);
  auto w = random_tensor({4, 1, 7, 7}, rng), cls = random_tensor({4}, rng);
  auto t = mast::patch_embed(Tensor<double>({16, 32}), w, Tensor<double>({4}), cls,
                             mast::PatchSpec{4, 7, 4, 3});
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(t.tokens(0, c), cls[c]);
  for (std::size_t i = 1; i < t.count(); ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(t.tokens(i, c), 0.0);
}

TEST(PatchEmbed, FrequencyMajorOrder) {
  // With a centred delta kernel, output (f, t) reads input (4f, 4t).
  Tensor<double> w({1, 1, 7, 7});
  w[3 * 7 + 3] = 1.0;
  Tensor<double> spec({16, 32});
  spec(8, 20) = 1.0;
  auto t = mast::patch_embed(spec, w, Tensor<double>({1}), Tensor<double>({1}),
                             mast::PatchSpec{1, 7, 4, 3});
  ASSERT_EQ(t.grid, (TokenGrid{4, 8, true}));
  for (std::size_t i = 1; i < t.count(); ++i)
    EXPECT_EQ(t.tokens(i, 0), i == 1 + 2 * 8 + 5 ? 1.0 : 0.0);
}

TEST(PoolTokens, Table1Extents) {
  TokenTensor<float> x{Tensor<float>({32 * 256 + 1, 2}), TokenGrid{32, 256, true}};
  EXPECT_EQ(mast::pool_tokens(x, 2, 2).grid, (TokenGrid{16, 128, true}));
  TokenTensor<float> y{Tensor<float>({8 * 64 + 1, 2}), TokenGrid{8, 64, true}};
  EXPECT_EQ(mast::pool_tokens(y, 1, 2).grid, (TokenGrid{8, 32, true}));
}

TEST(PoolTokens, UnitStrideIsIdentity) {
  std::mt19937_64 rng(2);
  TokenTensor<double> x{random_tensor({13, 3}, rng), TokenGrid{3, 4, true}};
  auto y = mast::pool_tokens(x, 1, 1);
  EXPECT_EQ(y.tokens, x.tokens);
  EXPECT_EQ(y.grid, x.grid);
}

TEST(PoolTokens, MatchesBruteForceMean) {
  std::mt19937_64 rng(3);
  for (auto [F, T, sf, st] : std::vector<std::array<std::size_t, 4>>{
           {5, 7, 2, 2}, {4, 9, 1, 2}, {6, 6, 3, 2}, {3, 3, 2, 1}}) {
    TokenTensor<double> x{random_tensor({F * T + 1, 3}, rng), TokenGrid{F, T, true}};
    auto y = mast::pool_tokens(x, sf, st);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y.tokens(0, c), x.tokens(0, c));
    for (std::size_t fo = 0; fo < y.grid.freq; ++fo)
      for (std::size_t to = 0; to < y.grid.time; ++to)
        for (std::size_t c = 0; c < 3; ++c) {
          double s = 0;
          int n = 0;
          for (long a = -1; a <= 1; ++a)
            for (long b = -1; b <= 1; ++b) {
              const long f = static_cast<long>(fo * sf) + (sf > 1 ? a : 0);
              const long t = static_cast<long>(to * st) + (st > 1 ? b : 0);
              if ((sf == 1 && a != 0) || (st == 1 && b != 0)) continue;
              if (f < 0 || t < 0 || f >= static_cast<long>(F) || t >= static_cast<long>(T)) continue;
              s += x.tokens(1 + static_cast<std::size_t>(f) * T + static_cast<std::size_t>(t), c);
              ++n;
            }
          EXPECT_NEAR(y.tokens(1 + fo * y.grid.time + to, c), s / n, 1e-12);
        }
  }
}

TEST(PoolTokens, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  TokenGrid g{5, 6, true};
  auto x = random_tensor({g.count(), 2}, rng);
  auto out = mast::pool_tokens(TokenTensor<double>{x, g}, 2, 2);
  auto w = random_tensor(out.tokens.shape(), rng);
  auto dx = mast::pool_tokens_backward(w, g, 2, 2);
  auto n = mast::finite_diff_grad(
      [&](const Tensor<double>& v) { return weighted_sum(mast::pool_tokens(TokenTensor<double>{v, g}, 2, 2).tokens, w); }, x);
  for (std::size_t i = 0; i < dx.size(); ++i) EXPECT_LT(mast::relative_error(dx[i], n[i]), 1e-6);
}

TEST(RelPosBias, ZeroTablesGiveZeroBias) {
  std::mt19937_64 rng(5);
  TokenGrid g{2, 3, true};
  auto e = mast::rel_pos_bias(random_tensor({7, 4}, rng), Tensor<double>({5, 4}), Tensor<double>({3, 4}), g, g);
  for (double v : e.values()) EXPECT_EQ(v, 0.0);
}

TEST(RelPosBias, SingleTokenHandValue) {
  TokenGrid g{1, 1, false};
  Tensor<double> q({1, 3}, {0.5, -2.0, 4.0});
  auto e = mast::rel_pos_bias(q, Tensor<double>({1, 3}, 1.0), Tensor<double>({1, 3}, 1.0), g, g);
  EXPECT_DOUBLE_EQ(e[0], 2.0 * (0.5 - 2.0 + 4.0));
}

TEST(RelPosBias, DependsOnlyOnOffset) {
  std::mt19937_64 rng(6);
  TokenGrid g{1, 4, false};
  Tensor<double> q({4, 3});
  auto row = random_tensor({3}, rng);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) q(i, c) = row[c];
  auto e = mast::rel_pos_bias(q, random_tensor({7, 3}, rng), random_tensor({1, 3}, rng), g, g);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t i2 = 0; i2 < 4; ++i2)
        for (std::size_t j2 = 0; j2 < 4; ++j2)
          if (static_cast<long>(i) - static_cast<long>(j) == static_cast<long>(i2) - static_cast<long>(j2)) {
            EXPECT_DOUBLE_EQ(e(i, j), e(i2, j2));
          }
}

TEST(RelPosBias, ClassTokenRowsAndColumnsAreZero) {
  std::mt19937_64 rng(7);
  TokenGrid g{2, 2, true};
  auto e = mast::rel_pos_bias(random_tensor({5, 2}, rng), random_tensor({3, 2}, rng), random_tensor({3, 2}, rng), g, g);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(e(0, j), 0.0);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(e(i, 0), 0.0);
}

TEST(RelPosBias, CrossResolutionUsesIntegerRatios) {
  const mast::RelAxis ax(2, 4);  // queries at half resolution
  EXPECT_EQ(ax.rows, 7u);
  // offsets q*2 - k on the fine grid, shifted by k_extent - 1
  for (std::size_t q = 0; q < 2; ++q)
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_EQ(static_cast<long>(ax.index(q, k)), static_cast<long>(2 * q) - static_cast<long>(k) + 3);
      EXPECT_LT(ax.index(q, k), ax.rows);
    }
  const mast::RelAxis same(5, 5);
  EXPECT_EQ(same.index(0, 4), 0u);
  EXPECT_EQ(same.index(4, 0), 8u);
  EXPECT_THROW(mast::RelAxis(3, 4), mast::ConfigError);
}

TEST(MultiscaleAttention, SingleTokenDoubles) {
  BlockSpec spec = attn_spec(3, 1);
  ModelParams<double> p;
  p.tensors["blk.attn.q.weight"] = Tensor<double>::identity(3);
  p.tensors["blk.attn.k.weight"] = Tensor<double>::identity(3);
  p.tensors["blk.attn.v.weight"] = Tensor<double>::identity(3);
  p.tensors["blk.attn.proj.weight"] = Tensor<double>::identity(3);
  for (const char* b : {"q", "k", "v", "proj"}) p.tensors[std::string("blk.attn.") + b + ".bias"] = Tensor<double>({3});
  p.tensors["blk.attn.rel_pos_t"] = Tensor<double>({1, 3});
  p.tensors["blk.attn.rel_pos_f"] = Tensor<double>({1, 3});
  TokenTensor<double> x{Tensor<double>({1, 3}, {0.3, -1.2, 2.0}), TokenGrid{1, 1, false}};
  auto y = mast::multiscale_attention(x, mast::attention_weights(p, "blk."), spec);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(y.tokens[c], 2 * x.tokens[c]);
}

TEST(MultiscaleAttention, ZeroValueLeavesProjectedQuery) {
  std::mt19937_64 rng(8);
  BlockSpec spec{BlockKind::MMSA, 4, 8, 2, 2, 2, 4.0};
  TokenGrid g{4, 6, true};
  auto p = block_params(spec, mast::pooled_grid(g, 2, 2), rng);
  p.at("blk.attn.v.weight") = Tensor<double>({4, 8});
  p.at("blk.attn.v.bias") = Tensor<double>({8});
  TokenTensor<double> x{random_tensor({g.count(), 4}, rng), g};
  auto y = mast::multiscale_attention(x, mast::attention_weights(p, "blk."), spec);
  auto q = mast::pool_tokens(TokenTensor<double>{mast::linear(x.tokens, p.at("blk.attn.q.weight"), p.at("blk.attn.q.bias")), g}, 2, 2);
  auto expect = mast::linear(q.tokens, p.at("blk.attn.proj.weight"), p.at("blk.attn.proj.bias"));
  ASSERT_EQ(y.tokens.shape(), expect.shape());
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(y.tokens[i], expect[i], 1e-12);
}

TEST(MultiscaleAttention, MatchesDenseReference) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t F = 1 + rng() % 4, T = 2 + rng() % 5;
    const std::size_t heads = 1 + rng() % 3, dh = 2 + rng() % 3;
    BlockSpec spec = attn_spec(heads * dh, heads);
    TokenGrid g{F, T, (rng() & 1u) != 0};
    auto p = block_params(spec, g, rng);
    TokenTensor<double> x{random_tensor({g.count(), spec.dim_in}, rng), g};
    auto y = mast::multiscale_attention(x, mast::attention_weights(p, "blk."), spec);
    auto ref = dense_attention(x, p, spec);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.tokens[i], ref[i], 1e-9);
  }
}

TEST(MultiscaleAttention, PermutationEquivariantWithoutPositions) {
  std::mt19937_64 rng(10);
  BlockSpec spec = attn_spec(6, 2);
  TokenGrid g{1, 9, false};
  auto p = block_params(spec, g, rng);
  p.at("blk.attn.rel_pos_t") = Tensor<double>(p.at("blk.attn.rel_pos_t").shape());
  p.at("blk.attn.rel_pos_f") = Tensor<double>(p.at("blk.attn.rel_pos_f").shape());
  TokenTensor<double> x{random_tensor({9, 6}, rng), g};
  std::vector<std::size_t> perm(9);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  TokenTensor<double> xp{Tensor<double>({9, 6}), g};
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t c = 0; c < 6; ++c) xp.tokens(i, c) = x.tokens(perm[i], c);
  const auto w = mast::attention_weights(p, "blk.");
  auto y = mast::multiscale_attention(x, w, spec);
  auto yp = mast::multiscale_attention(xp, w, spec);
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(yp.tokens(i, c), y.tokens(perm[i], c), 1e-12);
}

TEST(MultiscaleAttention, HeadsMustDivideWidth) {
  std::mt19937_64 rng(11);
  BlockSpec spec = attn_spec(6, 2);
  TokenGrid g{2, 2, true};
  auto p = block_params(spec, g, rng);
  spec.heads = 4;
  TokenTensor<double> x{random_tensor({5, 6}, rng), g};
  EXPECT_THROW(mast::multiscale_attention(x, mast::attention_weights(p, "blk."), spec), mast::ConfigError);
}

TEST(TransformerBlock, ZeroWeightsPassInputThrough) {
  std::mt19937_64 rng(12);
  BlockSpec spec = attn_spec(4, 2);
  TokenGrid g{2, 3, true};
  auto p = block_params(spec, g, rng);
  for (const char* n : {"attn.proj.weight", "attn.proj.bias", "mlp.fc2.weight", "mlp.fc2.bias"})
    for (auto& v : p.at(std::string("blk.") + n).values()) v = 0;
  TokenTensor<double> x{random_tensor({g.count(), 4}, rng), g};
  auto y = mast::transformer_block(x, p, "blk.", spec);
  for (std::size_t i = 0; i < x.tokens.size(); ++i) EXPECT_NEAR(y.tokens[i], x.tokens[i], 1e-12);
}

TEST(TransformerBlock, MmsaAtPatchResolution) {
  const auto s = mast::make_schedule("mast-b");
  const BlockSpec& spec = s.blocks[2];
  auto p = mast::init_params<float>(s, 0);
  std::mt19937_64 rng(13);
  std::normal_distribution<float> n(0.f, 1.f);
  TokenTensor<float> x{Tensor<float>({32 * 256 + 1, 96}), TokenGrid{32, 256, true}};
  for (auto& v : x.tokens.values()) v = n(rng);
  auto y = mast::transformer_block(x, p, mast::block_prefix(2), spec);
  EXPECT_EQ(y.grid, (TokenGrid{16, 128, true}));
  EXPECT_EQ(y.dim(), 192u);
  EXPECT_TRUE(y.tokens.all_finite());
}

TEST(TransformerBlock, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(14);
  for (BlockSpec spec : {attn_spec(4, 2), BlockSpec{BlockKind::MMSA, 4, 8, 2, 1, 2, 4.0},
                         BlockSpec{BlockKind::MMSA, 2, 4, 1, 2, 2, 4.0}}) {
    TokenGrid g{3, 4, true};
    const TokenGrid go = mast::pooled_grid(g, spec.pool_stride_f, spec.pool_stride_t);
    auto p = block_params(spec, go, rng);
    auto x = random_tensor({g.count(), spec.dim_in}, rng);
    auto w = random_tensor({go.count(), spec.dim_out}, rng);

    mast::BlockCache<double> cache;
    mast::transformer_block(TokenTensor<double>{x, g}, p, "blk.", spec, &cache);
    auto grads = ModelParams<double>::zeros_like(p);
    auto dx = mast::transformer_block_backward(cache, p, "blk.", spec, w, grads);

    auto loss_x = [&](const Tensor<double>& v) {
      return weighted_sum(mast::transformer_block(TokenTensor<double>{v, g}, p, "blk.", spec).tokens, w);
    };
    auto nx = mast::finite_diff_grad(loss_x, x);
    for (std::size_t i = 0; i < dx.size(); ++i) EXPECT_LT(mast::relative_error(dx[i], nx[i]), 1e-4);

    for (auto& [name, t] : p.tensors) {
      auto loss_p = [&](const Tensor<double>& v) {
        ModelParams<double> q = p;
        q.at(name) = v;
        return weighted_sum(mast::transformer_block(TokenTensor<double>{x, g}, q, "blk.", spec).tokens, w);
      };
      auto np = mast::finite_diff_grad(loss_p, t);
      const auto& a = grads.at(name);
      for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_LT(mast::relative_error(a[i], np[i]), 1e-4) << name << "[" << i << "]";
    }
  }
}

TEST(Params, ShapesFollowSchedule) {
  const auto s = mast::make_schedule("mast-b");
  const auto p = mast::init_params<float>(s, 0);
  EXPECT_EQ(p.at("patch.weight").shape(), (mast::Shape{96, 1, 7, 7}));
  EXPECT_EQ(p.at("blocks.2.attn.q.weight").shape(), (mast::Shape{96, 192}));
  EXPECT_EQ(p.at("blocks.2.residual.weight").shape(), (mast::Shape{96, 192}));
  EXPECT_EQ(p.at("blocks.2.attn.rel_pos_t").shape(), (mast::Shape{255, 96}));
  EXPECT_EQ(p.at("blocks.2.attn.rel_pos_f").shape(), (mast::Shape{31, 96}));
  EXPECT_EQ(p.at("blocks.21.attn.rel_pos_t").shape(), (mast::Shape{63, 96}));
  EXPECT_EQ(p.at("heads.0.weight").shape(), (mast::Shape{768, 527}));
  EXPECT_EQ(p.tensors.count("blocks.3.residual.weight"), 0u);
}

TEST(Params, InitialisationRules) {
  const auto s = mast::make_schedule("mast-tiny");
  const auto p = mast::init_params<double>(s, 42);
  for (double v : p.at("blocks.0.norm1.weight").values()) EXPECT_EQ(v, 1.0);
  for (double v : p.at("blocks.0.attn.q.bias").values()) EXPECT_EQ(v, 0.0);
  double sq = 0;
  const auto& w = p.at("blocks.6.mlp.fc1.weight");
  for (double v : w.values()) {
    EXPECT_LE(std::abs(v), 0.04);
    sq += v * v;
  }
  EXPECT_NEAR(std::sqrt(sq / static_cast<double>(w.size())), 0.02 * 0.88, 0.002);
  EXPECT_EQ(mast::init_params<double>(s, 42).at("cls_token"), p.at("cls_token"));
  EXPECT_NE(mast::init_params<double>(s, 43).at("cls_token"), p.at("cls_token"));
}

TEST(Params, MismatchListsNames) {
  const auto ast = mast::init_params<float>(mast::make_schedule("gradcheck-tiny"), 0);
  try {
    mast::check_params_match(ast, mast::make_schedule("mast-tiny"));
    FAIL() << "expected CheckpointError";
  } catch (const mast::CheckpointError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("missing"), std::string::npos);
    EXPECT_NE(msg.find("blocks.2."), std::string::npos);
  }
}

TEST(Forward, TinyTraceAndDeterminism) {
  const auto s = mast::make_schedule("mast-tiny");
  const auto p = mast::init_params<float>(s, 3);
  std::mt19937_64 rng(15);
  std::normal_distribution<float> n(0.f, 1.f);
  Tensor<float> spec({32, 64});
  for (auto& v : spec.values()) v = n(rng);
  auto a = mast::forward(spec, p, s), b = mast::forward(spec, p, s);
  EXPECT_EQ(a.logits, b.logits);
  ASSERT_EQ(a.logits.size(), 1u);
  EXPECT_EQ(a.logits[0].size(), 4u);
  EXPECT_EQ(a.embedding.size(), 96u);
  const auto grids = s.grids();
  ASSERT_EQ(a.trace.size(), grids.size());
  for (std::size_t i = 0; i < grids.size(); ++i) {
    EXPECT_EQ(a.trace[i].grid, grids[i]);
    EXPECT_TRUE(a.trace[i].grid.has_class_token);
  }
}

TEST(Forward, TwoHeads) {
  auto s = mast::make_schedule("gradcheck-tiny");
  s.head_sizes = {97, 300};
  const auto p = mast::init_params<float>(s, 1);
  auto out = mast::forward(Tensor<float>({16, 32}, 0.5f), p, s);
  ASSERT_EQ(out.logits.size(), 2u);
  EXPECT_EQ(out.logits[0].size(), 97u);
  EXPECT_EQ(out.logits[1].size(), 300u);
}

TEST(Forward, EmbeddingIsClassTokenBeforeLastBlock) {
  const auto s = mast::make_schedule("gradcheck-tiny");
  const auto p = mast::init_params<double>(s, 2);
  Tensor<double> spec({16, 32}, 0.25);
  mast::ForwardCache<double> cache;
  auto out = mast::forward(spec, p, s, &cache);
  // the last block's first LN saw the embedding as its class-token row
  const auto& xhat = cache.blocks.back().ln1.xhat;
  double mean = 0;
  for (double v : out.embedding) mean += v;
  mean /= static_cast<double>(out.embedding.size());
  const double inv = cache.blocks.back().ln1.inv_std[0];
  for (std::size_t c = 0; c < out.embedding.size(); ++c)
    EXPECT_NEAR(xhat(0, c), (out.embedding[c] - mean) * inv, 1e-12);
}

TEST(Forward, WrongInputShapeIsDimensionError) {
  const auto s = mast::make_schedule("gradcheck-tiny");
  const auto p = mast::init_params<float>(s, 1);
  EXPECT_THROW(mast::forward(Tensor<float>({16, 33}), p, s), mast::DimensionError);
}

TEST(Backward, GradcheckTinyAcrossSeeds) {
  const auto s = mast::make_schedule("gradcheck-tiny");
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto r = mast::grad_check(s, seed);
    EXPECT_GE(r.coordinates, 200u);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  }
}
