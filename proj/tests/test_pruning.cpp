#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <tuple>
#include <vector>

#include "ltx/pruning.hpp"
#include "test_support.hpp"

using namespace ltx;
using ltx::testing::Sample;
using ltx::testing::TempDir;

namespace {

// A model whose prunable weights are replaced by `values` (conv1 first) so
// the ranking can be checked against hand-built inputs.
Model model_with_conv_weights(const std::vector<double>& conv1, const std::vector<double>& conv2) {
  Model m = init_params(0, 2);
  auto& w1 = m.params.at(kConv1Weight);
  auto& w2 = m.params.at(kConv2Weight);
  for (std::size_t i = 0; i < w1.size(); ++i) w1[i] = i < conv1.size() ? conv1[i] : 0.0;
  for (std::size_t i = 0; i < w2.size(); ++i) w2[i] = i < conv2.size() ? conv2[i] : 0.0;
  return m;
}

// Mask keeping only the first `n1` conv1 weights and `n2` conv2 weights.
PruneMask leading_mask(const Model& m, std::size_t n1, std::size_t n2) {
  PruneMask mask = full_mask(m);
  auto& e = mask.entries();
  for (std::size_t i = 0; i < e[0].bits.size(); ++i) e[0].bits[i] = i < n1;
  for (std::size_t i = 0; i < e[1].bits.size(); ++i) e[1].bits[i] = i < n2;
  return mask;
}

struct Candidate {
  double mag;
  std::size_t layer, index;
};

// Brute force: sort every survivor by (|w|, layer, index) and drop the head.
PruneMask brute_force_mask(const Model& m, const PruneMask& prev, double fraction) {
  std::vector<Candidate> all;
  for (std::size_t l = 0; l < prev.entries().size(); ++l) {
    const auto& e = prev.entries()[l];
    const Tensor& p = m.params.at(e.name);
    for (std::size_t i = 0; i < e.bits.size(); ++i)
      if (e.bits[i]) all.push_back({std::abs(p[i]), l, i});
  }
  std::sort(all.begin(), all.end(), [](const Candidate& a, const Candidate& b) {
    return std::tie(a.mag, a.layer, a.index) < std::tie(b.mag, b.layer, b.index);
  });
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(all.size())));
  PruneMask out = prev;
  for (std::size_t i = 0; i < k; ++i) out.entries()[all[i].layer].bits[all[i].index] = 0;
  return out;
}

std::vector<Sample> tiny_set(std::uint64_t seed, std::size_t n) { return ltx::testing::separable_set(seed, n); }

}  // namespace

TEST(MagnitudeMask, FractionZeroIsNoOp) {
  const Model m = init_params(3, 4);
  const PruneMask prev = full_mask(m);
  EXPECT_EQ(magnitude_mask(m, prev, 0.0), prev);
}

TEST(MagnitudeMask, KeepsLargestOfFour) {
  const Model m = model_with_conv_weights({0.5, -0.1, 0.3, 0.05}, {});
  const PruneMask prev = leading_mask(m, 4, 0);
  const PruneMask next = magnitude_mask(m, prev, 0.5);
  const auto& bits = next.entries()[0].bits;
  EXPECT_EQ(bits[0], 1);
  EXPECT_EQ(bits[1], 0);
  EXPECT_EQ(bits[2], 1);
  EXPECT_EQ(bits[3], 0);
  EXPECT_EQ(next.remaining(), 2u);
  EXPECT_EQ(next, brute_force_mask(m, prev, 0.5));
}

TEST(MagnitudeMask, TiesBrokenByLayerThenIndex) {
  const Model m = model_with_conv_weights({0.2, 0.2}, {0.2, 0.2});
  const PruneMask prev = leading_mask(m, 2, 2);
  const PruneMask next = magnitude_mask(m, prev, 0.75);  // floor(3) pruned
  EXPECT_EQ(next.entries()[0].bits[0], 0);
  EXPECT_EQ(next.entries()[0].bits[1], 0);
  EXPECT_EQ(next.entries()[1].bits[0], 0);
  EXPECT_EQ(next.entries()[1].bits[1], 1);
}

TEST(MagnitudeMask, RejectsFractionOutOfRange) {
  const Model m = init_params(1, 2);
  for (double f : {-0.1, 1.0, 1.5, std::nan("")}) {
    try {
      magnitude_mask(m, full_mask(m), f);
      FAIL() << f;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::InvalidArgument);
    }
  }
}

TEST(MagnitudeMask, GlobalRankingMatchesBruteForce) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    Model m = init_params(seed, 3);
    PruneMask mask = full_mask(m);
    const double fraction = rng.uniform(0.05, 0.6);
    for (int round = 0; round < 4; ++round) {
      // Perturb weights between rounds so surviving magnitudes reorder.
      for (auto name : {kConv1Weight, kConv2Weight})
        for (double& v : m.params.at(name).data()) v += 0.01 * rng.normal();
      apply_mask(m, mask);
      const PruneMask next = magnitude_mask(m, mask, fraction);
      ASSERT_EQ(next, brute_force_mask(m, mask, fraction)) << "seed " << seed << " round " << round;

      // No survivor is smaller than anything pruned this round.
      double max_pruned = -1.0, min_kept = 1e300;
      for (std::size_t l = 0; l < next.entries().size(); ++l) {
        const Tensor& p = m.params.at(next.entries()[l].name);
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (mask.entries()[l].bits[i] && !next.entries()[l].bits[i]) max_pruned = std::max(max_pruned, std::abs(p[i]));
          if (next.entries()[l].bits[i]) min_kept = std::min(min_kept, std::abs(p[i]));
        }
      }
      EXPECT_LE(max_pruned, min_kept);
      mask = next;
    }
  }
}

TEST(MagnitudeMask, CountExactnessAndNesting) {
  Model m = init_params(9, 4);
  PruneMask mask = full_mask(m);
  Rng rng(1);
  for (int round = 0; round < 14; ++round) {
    const std::size_t surviving = mask.remaining();
    const PruneMask next = magnitude_mask(m, mask, 0.1);
    EXPECT_EQ(surviving - next.remaining(), static_cast<std::size_t>(std::floor(0.1 * surviving)));
    EXPECT_TRUE(next.nested_in(mask));
    mask = next;
    for (double& v : m.params.at(kConv2Weight).data()) v += 0.05 * rng.normal();
  }
}

TEST(MagnitudeMask, PerLayerRankingPrunesEachLayer) {
  const Model m = init_params(2, 3);
  const PruneMask next = magnitude_mask(m, full_mask(m), 0.5, Ranking::PerLayer);
  EXPECT_EQ(next.entries()[0].remaining(), 108u);
  EXPECT_EQ(next.entries()[1].remaining(), 576u);
}

TEST(MagnitudeMask, HeadScopeIncludesHeadWeights) {
  const Model m = init_params(2, 3);
  const PruneMask mask = full_mask(m, PruneScope::ConvAndHead);
  EXPECT_EQ(mask.total(), 216u + 1152u + 48u);
  EXPECT_EQ(full_mask(m).total(), 216u + 1152u);
  EXPECT_EQ(mask.find(kConv1Bias), nullptr);
}

TEST(Rewind, AllOnesMaskGivesInit) {
  const Model init = init_params(4, 4);
  Model trained = init;
  for (auto& [name, t] : trained.params)
    for (double& v : t.data()) v += 0.1;
  EXPECT_EQ(rewind(trained, init, full_mask(init)), init);
}

TEST(Rewind, AllZeroMaskKeepsBiases) {
  const Model init = init_params(4, 4);
  PruneMask zero = full_mask(init);
  for (auto& e : zero.entries()) std::fill(e.bits.begin(), e.bits.end(), 0);
  Model trained = init;
  for (auto& [name, t] : trained.params)
    for (double& v : t.data()) v += 0.1;
  const Model r = rewind(trained, init, zero);
  for (auto name : {kConv1Weight, kConv2Weight})
    for (double v : r.params.at(name).data()) EXPECT_EQ(v, 0.0);
  for (auto name : {kConv1Bias, kConv2Bias, kHeadWeight, kHeadBias})
    EXPECT_EQ(r.params.at(name), init.params.at(name));
}

TEST(Rewind, SurvivorsBitwiseEqualInit) {
  const Model init = init_params(5, 3);
  Model trained = init;
  Rng rng(2);
  for (auto& [name, t] : trained.params)
    for (double& v : t.data()) v += rng.normal();
  const PruneMask mask = magnitude_mask(trained, full_mask(trained), 0.3);
  const Model r = rewind(trained, init, mask);
  for (const auto& e : mask.entries()) {
    const Tensor& a = r.params.at(e.name);
    const Tensor& b = init.params.at(e.name);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (e.bits[i]) {
        EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i]), std::bit_cast<std::uint64_t>(b[i]));
      } else {
        EXPECT_EQ(a[i], 0.0);
      }
    }
  }
}

TEST(Rewind, ForwardMatchesIndependentReconstruction) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Model init = init_params(seed, 3);
    Model trained = init;
    Rng rng(seed + 7);
    for (auto& [name, t] : trained.params)
      for (double& v : t.data()) v += 0.2 * rng.normal();
    const PruneMask mask = magnitude_mask(trained, full_mask(trained), 0.4);
    const Model r = rewind(trained, init, mask);

    Model fresh = init_params(seed, 3);
    for (const auto& e : mask.entries()) {
      Tensor& p = fresh.params.at(e.name);
      for (std::size_t i = 0; i < p.size(); ++i) p[i] *= e.bits[i];
    }
    const Tensor x = ltx::testing::random_image(rng);
    const Tensor a = forward(r, x, &mask), b = forward(fresh, x);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
  }
}

TEST(Rewind, FromCheckpointAndArchitectureMismatch) {
  TempDir dir("rewind");
  const Model init = init_params(4, 4);
  save_checkpoint(init, dir.path() / "init.ltxc");
  EXPECT_EQ(rewind(init, dir.path() / "init.ltxc", full_mask(init)), init);
  const Model other = init_params(4, 5);
  try {
    rewind(other, dir.path() / "init.ltxc", full_mask(other));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ArchitectureMismatch);
  }
}

TEST(MaskFile, RoundTrip) {
  TempDir dir("mask");
  const Model m = init_params(6, 2);
  const PruneMask mask = magnitude_mask(m, full_mask(m, PruneScope::ConvAndHead), 0.37);
  save_mask(mask, dir.path() / "mask.ltxm");
  EXPECT_EQ(load_mask(dir.path() / "mask.ltxm"), mask);
  const std::string a = read_file_bytes(dir.path() / "mask.ltxm");
  save_mask(load_mask(dir.path() / "mask.ltxm"), dir.path() / "again.ltxm");
  EXPECT_EQ(a, read_file_bytes(dir.path() / "again.ltxm"));
}

TEST(MaskFile, NonBinaryEntryRejected) {
  try {
    PruneMask bad({MaskTensor{"conv1.weight", {2}, {1, 2}}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidArgument);
  }
}

TEST(Schedule, Validation) {
  PruneSchedule s;
  s.fraction = 1.0;
  EXPECT_THROW(s.validate(), Error);
  s = {};
  s.rounds = 0;
  EXPECT_THROW(s.validate(), Error);
  s = {};
  s.train_iters = 0;
  EXPECT_THROW(s.validate(), Error);
  EXPECT_NO_THROW(PruneSchedule{}.validate());
}

TEST(Schedule, SingleRoundIsUnprunedBaseline) {
  const auto train = tiny_set(1, 16), test = tiny_set(2, 8);
  PruneSchedule sched;
  sched.rounds = 1;
  sched.train_iters = 3;
  LotteryState state = LotteryState::start(init_params(1, 2), sched, TrainConfig{0.01, 4}, 5);
  const auto results = run_schedule(state, train, test);
  ASSERT_EQ(results.size(), 1u);
  EXPECT_EQ(results[0].record.round, 1u);
  EXPECT_EQ(results[0].record.pct_weights_remaining, 100.0);
  EXPECT_EQ(results[0].record.remaining_weights, 1368u);
}

TEST(Schedule, SecondRecordShowsNinetyPercent) {
  const auto train = tiny_set(1, 16), test = tiny_set(2, 8);
  PruneSchedule sched;
  sched.rounds = 2;
  sched.train_iters = 2;
  LotteryState state = LotteryState::start(init_params(1, 2), sched, TrainConfig{0.01, 4}, 5);
  const auto results = run_schedule(state, train, test);
  // 1368 - floor(136.8) = 1232 survivors, within one weight of 0.9 * 1368.
  EXPECT_EQ(results[1].record.remaining_weights, 1232u);
  EXPECT_LE(std::abs(1232.0 - 0.9 * 1368.0), 1.0);
  EXPECT_NEAR(results[1].record.pct_weights_remaining, 90.0, 100.0 / 1368.0);
}

TEST(Schedule, FifteenRoundsFollowClosedForm) {
  const auto train = tiny_set(3, 8), test = tiny_set(4, 4);
  PruneSchedule sched;
  sched.train_iters = 1;
  LotteryState state = LotteryState::start(init_params(2, 2), sched, TrainConfig{0.01, 2}, 1);
  const auto results = run_schedule(state, train, test);
  ASSERT_EQ(results.size(), 15u);
  const double total = 1368.0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i].record;
    const double target = std::pow(0.9, static_cast<double>(i)) * total;
    // Flooring each round keeps at least the exact target and drifts by
    // less than one weight per pruning round.
    EXPECT_GE(static_cast<double>(r.remaining_weights), std::floor(target)) << "round " << r.round;
    EXPECT_LE(static_cast<double>(r.remaining_weights) - target, static_cast<double>(i)) << "round " << r.round;
    if (i > 0) {
      EXPECT_TRUE(results[i].mask.nested_in(results[i - 1].mask));
      EXPECT_LT(r.pct_weights_remaining, results[i - 1].record.pct_weights_remaining);
    }
  }
  EXPECT_NEAR(results.back().record.pct_weights_remaining, 100.0 * std::pow(0.9, 14), 14 * 100.0 / total);
  EXPECT_NEAR(results[3].record.pct_weights_remaining, 72.9, 3 * 100.0 / total);
}

TEST(Schedule, SameSeedSameRecords) {
  const auto train = tiny_set(1, 16), test = tiny_set(2, 8);
  PruneSchedule sched;
  sched.rounds = 3;
  sched.train_iters = 3;
  auto run = [&] {
    LotteryState s = LotteryState::start(init_params(7, 2), sched, TrainConfig{0.05, 4}, 11);
    return run_schedule(s, train, test);
  };
  const auto a = run(), b = run();
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].record, b[i].record);
    EXPECT_EQ(a[i].model, b[i].model);
    EXPECT_EQ(a[i].mask, b[i].mask);
  }
}

TEST(Schedule, RewindDisabledDiffersFromInit) {
  const auto train = tiny_set(1, 16), test = tiny_set(2, 8);
  PruneSchedule sched;
  sched.rounds = 2;
  sched.train_iters = 3;
  sched.rewind = false;
  const Model init = init_params(7, 2);
  LotteryState state = LotteryState::start(init, sched, TrainConfig{0.05, 4}, 11);
  std::vector<Model> at_start;
  run_schedule(state, train, test, 1, std::nullopt,
               [&](std::size_t, const Model& m, const PruneMask&) { at_start.push_back(m); });
  ASSERT_EQ(at_start.size(), 2u);
  // Round 2 starts from round 1's trained survivors, not from theta_0.
  const Tensor& w = at_start[1].params.at(kConv1Weight);
  const Tensor& w0 = init.params.at(kConv1Weight);
  std::size_t differing = 0;
  for (std::size_t i = 0; i < w.size(); ++i) differing += w[i] != 0.0 && w[i] != w0[i];
  EXPECT_GT(differing, 0u);
  EXPECT_FALSE(state.schedule.rewind);
}

TEST(Schedule, RewindEnabledStartsEachRoundAtInit) {
  const auto train = tiny_set(1, 16), test = tiny_set(2, 8);
  PruneSchedule sched;
  sched.rounds = 3;
  sched.train_iters = 3;
  const Model init = init_params(7, 2);
  LotteryState state = LotteryState::start(init, sched, TrainConfig{0.05, 4}, 11);
  run_schedule(state, train, test, 1, std::nullopt, [&](std::size_t, const Model& m, const PruneMask& mask) {
    Model expected = init;
    apply_mask(expected, mask);
    EXPECT_EQ(m, expected);
  });
}

TEST(Schedule, WritesRoundArtifacts) {
  TempDir dir("sched");
  const auto train = tiny_set(1, 8), test = tiny_set(2, 4);
  PruneSchedule sched;
  sched.rounds = 2;
  sched.train_iters = 1;
  LotteryState state = LotteryState::start(init_params(7, 2), sched, TrainConfig{0.05, 4}, 11);
  const auto results = run_schedule(state, train, test, 1, dir.path());
  for (const auto& r : results) {
    const auto rd = round_directory(dir.path(), r.record.round);
    EXPECT_EQ(load_checkpoint(rd / "model.ltxc"), r.model);
    EXPECT_EQ(load_mask(rd / "mask.ltxm"), r.mask);
    const auto j = nlohmann::json::parse(read_file_bytes(rd / "record.json"));
    EXPECT_EQ(RoundRecord::from_json(j), r.record);
  }
}
