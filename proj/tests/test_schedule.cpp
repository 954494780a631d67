#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "mast/schedule.hpp"

using mast::BlockKind;
using mast::StageSchedule;

TEST(PooledExtent, KernelThreePadOne) {
  EXPECT_EQ(mast::pooled_extent(32, 2), 16u);
  EXPECT_EQ(mast::pooled_extent(256, 2), 128u);
  EXPECT_EQ(mast::pooled_extent(64, 2), 32u);
  EXPECT_EQ(mast::pooled_extent(7, 2), 4u);
  EXPECT_EQ(mast::pooled_extent(1, 2), 1u);
  EXPECT_EQ(mast::pooled_extent(9, 3), 3u);
  EXPECT_EQ(mast::pooled_extent(5, 1), 5u);
}

TEST(Presets, MastBTransitions) {
  const auto s = mast::make_schedule("mast-b");
  ASSERT_EQ(s.blocks.size(), 24u);
  std::vector<std::size_t> mmsa;
  for (std::size_t i = 0; i < s.blocks.size(); ++i)
    if (s.blocks[i].kind == BlockKind::MMSA) mmsa.push_back(i);
  EXPECT_EQ(mmsa, (std::vector<std::size_t>{2, 5, 21}));
  EXPECT_EQ(s.blocks[2].pool_stride_f, 2u);
  EXPECT_EQ(s.blocks[2].pool_stride_t, 2u);
  EXPECT_EQ(s.blocks[21].pool_stride_f, 1u);
  EXPECT_EQ(s.blocks[21].pool_stride_t, 2u);
  EXPECT_EQ(s.blocks[21].dim_in, 384u);
  EXPECT_EQ(s.blocks[21].dim_out, 768u);
  EXPECT_EQ(s.final_dim(), 768u);
  EXPECT_EQ(s.head_sizes, (std::vector<std::size_t>{527}));
  for (const auto& b : s.blocks) EXPECT_EQ(b.heads, b.dim_out / 96);
}

TEST(Presets, MastBGrids) {
  const auto g = mast::make_schedule("mast-b").grids();
  EXPECT_EQ(g[0], (mast::TokenGrid{32, 256, true}));
  EXPECT_EQ(g[3], (mast::TokenGrid{16, 128, true}));
  EXPECT_EQ(g[6], (mast::TokenGrid{8, 64, true}));
  EXPECT_EQ(g[22], (mast::TokenGrid{8, 32, true}));
  EXPECT_EQ(g.back().grid_count(), 256u);
}

TEST(Presets, AstIsUniform) {
  const auto s = mast::make_schedule("ast");
  ASSERT_EQ(s.blocks.size(), 12u);
  for (const auto& b : s.blocks) {
    EXPECT_EQ(b.kind, BlockKind::Attn);
    EXPECT_EQ(b.dim_out, 768u);
  }
  EXPECT_EQ(s.patch_grid(), (mast::TokenGrid{12, 101, true}));
}

TEST(Presets, Ablations) {
  const auto none = mast::make_schedule("ablation-no-pool");
  for (const auto& b : none.blocks) {
    EXPECT_EQ(b.kind, BlockKind::Attn);
    EXPECT_EQ(b.dim_out, 96u);
  }
  const auto first = mast::make_schedule("ablation-first-pool-only");
  EXPECT_EQ(first.blocks[2].kind, BlockKind::MMSA);
  EXPECT_EQ(first.blocks[5].kind, BlockKind::Attn);
  EXPECT_EQ(first.final_dim(), 192u);
  const auto two = mast::make_schedule("ablation-two-pools");
  EXPECT_EQ(two.blocks[21].kind, BlockKind::Attn);
  EXPECT_EQ(two.final_dim(), 384u);
  const auto twod = mast::make_schedule("ablation-2d-at-21");
  EXPECT_EQ(twod.blocks[21].pool_stride_f, 2u);
  EXPECT_EQ(twod.blocks[21].pool_stride_t, 2u);
  EXPECT_EQ(twod.grids().back(), (mast::TokenGrid{4, 32, true}));
}

TEST(Presets, TinyMirrorsMastBPattern) {
  const auto s = mast::make_schedule("mast-tiny");
  ASSERT_EQ(s.blocks.size(), 7u);
  EXPECT_EQ(s.patch.dim, 96u / 8);
  EXPECT_EQ(s.final_dim(), 768u / 8);
  EXPECT_EQ(s.blocks[1].pool_stride_f, 2u);
  EXPECT_EQ(s.blocks[3].pool_stride_f, 2u);
  EXPECT_EQ(s.blocks[5].pool_stride_f, 1u);
  EXPECT_EQ(s.blocks[5].pool_stride_t, 2u);
}

TEST(Presets, UnknownNameListsKnownOnes) {
  try {
    mast::make_schedule("nonsense");
    FAIL() << "expected ConfigError";
  } catch (const mast::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("mast-b"), std::string::npos);
  }
  EXPECT_THROW(mast::load_schedule("nonsense"), mast::ConfigError);
}

TEST(Validate, AttnMustKeepWidthAndStride) {
  auto s = mast::make_schedule("gradcheck-tiny");
  s.blocks[1].pool_stride_t = 2;
  EXPECT_THROW(s.validate(), mast::ConfigError);
  s = mast::make_schedule("gradcheck-tiny");
  s.blocks[1].dim_out = 16;
  EXPECT_THROW(s.validate(), mast::ConfigError);
}

TEST(Validate, MmsaMustDoubleAndPool) {
  auto s = mast::make_schedule("gradcheck-tiny");
  s.blocks[0].pool_stride_f = s.blocks[0].pool_stride_t = 1;
  EXPECT_THROW(s.validate(), mast::ConfigError);
  s = mast::make_schedule("gradcheck-tiny");
  s.blocks[0].dim_out = 12;
  EXPECT_THROW(s.validate(), mast::ConfigError);
}

TEST(Validate, HeadsMustDivideWidth) {
  auto s = mast::make_schedule("gradcheck-tiny");
  s.blocks[1].heads = 3;
  EXPECT_THROW(s.validate(), mast::ConfigError);
}

TEST(Validate, BrokenDimChain) {
  auto s = mast::make_schedule("mast-tiny");
  s.blocks[2].dim_in = 12;
  s.blocks[2].dim_out = 12;
  EXPECT_THROW(s.validate(), mast::ConfigError);
}

TEST(Json, RoundTripsEveryPreset) {
  for (const auto& name : mast::preset_names()) {
    const auto s = mast::make_schedule(name);
    nlohmann::json j = s;
    EXPECT_EQ(j.get<StageSchedule>(), s) << name;
  }
}

TEST(Json, LoadFromFile) {
  auto path = std::filesystem::temp_directory_path() / "mast_schedule_test.json";
  auto s = mast::make_schedule("gradcheck-tiny");
  s.name = "from-file";
  s.head_sizes = {5, 7};
  std::ofstream(path) << nlohmann::json(s).dump(2);
  EXPECT_EQ(mast::load_schedule(path.string()), s);

  std::ofstream(path) << "{\"name\": \"broken\"}";
  EXPECT_THROW(mast::load_schedule(path.string()), mast::ConfigError);
}

TEST(Shrink, DividesWidthsKeepsPattern) {
  const auto base = mast::make_schedule("mast-b");
  const auto s = mast::shrink_schedule(base, 24, 32, 64, {5});
  ASSERT_EQ(s.blocks.size(), base.blocks.size());
  EXPECT_EQ(s.patch.dim, 4u);
  EXPECT_EQ(s.final_dim(), 32u);
  for (std::size_t i = 0; i < s.blocks.size(); ++i) {
    EXPECT_EQ(s.blocks[i].kind, base.blocks[i].kind);
    EXPECT_EQ(s.blocks[i].pool_stride_t, base.blocks[i].pool_stride_t);
  }
  EXPECT_THROW(mast::shrink_schedule(base, 7, 32, 64, {5}), mast::ConfigError);
}
