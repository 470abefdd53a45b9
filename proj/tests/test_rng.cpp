#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "langevin/rng.hpp"

using namespace langevin;

TEST(Philox, KnownAnswerZero) {
  const auto out = Philox4x32::generate({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(out, (Philox4x32::counter_type{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
}

TEST(Philox, KnownAnswerAllOnes) {
  const std::uint32_t f = 0xffffffffu;
  const auto out = Philox4x32::generate({f, f, f, f}, {f, f});
  EXPECT_EQ(out, (Philox4x32::counter_type{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
}

TEST(Philox, KnownAnswerPi) {
  const auto out = Philox4x32::generate({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                                        {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(out, (Philox4x32::counter_type{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(RngStream, SameKeySameSequence) {
  RngStream a(42, 7), b(42, 7);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(RngStream, DistinctKeysDiffer) {
  std::set<std::uint64_t> first;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    for (std::uint64_t id = 0; id < 64; ++id) first.insert(RngStream(seed, id).next_u64());
  }
  EXPECT_EQ(first.size(), 4u * 64u);
}

TEST(RngStream, CopyForksIdenticalSequence) {
  RngStream a(1, 2);
  a.discard(17);
  RngStream b = a;
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a.normal(), b.normal());
}

TEST(RngStream, CounterCountsDraws) {
  RngStream s(3, 4);
  EXPECT_EQ(s.counter(), 0u);
  s.next_u64();
  s.uniform();
  EXPECT_EQ(s.counter(), 2u);
  s.discard(10);
  EXPECT_EQ(s.counter(), 12u);
  EXPECT_EQ(s.master_seed(), 3u);
  EXPECT_EQ(s.stream_id(), 4u);
}

TEST(RngStream, UniformInHalfOpenUnitInterval) {
  RngStream s(5, 0);
  double lo = 1.0, hi = 0.0, sum = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = s.uniform();
    ASSERT_GT(u, 0.0);
    ASSERT_LE(u, 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    sum += u;
  }
  EXPECT_NEAR(sum / n, 0.5, 5.0 * std::sqrt(1.0 / 12.0 / n));
  EXPECT_LT(lo, 1e-4);
  EXPECT_GT(hi, 1 - 1e-4);
}

TEST(RngStream, NormalMoments) {
  RngStream s(11, 3);
  const int n = 1000000;
  double m1 = 0, m2 = 0, m4 = 0;
  int above2 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = s.normal();
    m1 += z;
    m2 += z * z;
    m4 += z * z * z * z;
    above2 += z > 2.0;
  }
  m1 /= n, m2 /= n, m4 /= n;
  EXPECT_NEAR(m1, 0.0, 5.0 / std::sqrt(n));
  EXPECT_NEAR(m2, 1.0, 5.0 * std::sqrt(2.0 / n));
  EXPECT_NEAR(m4, 3.0, 5.0 * std::sqrt(96.0 / n));
  const double p = 0.022750131948179195;
  EXPECT_NEAR(static_cast<double>(above2) / n, p, 5.0 * std::sqrt(p * (1 - p) / n));
}

TEST(RngStream, NormalTailIsReached) {
  RngStream s(2, 9);
  int tail = 0;
  for (int i = 0; i < 2000000; ++i) tail += std::abs(s.normal()) > detail::ZigguratTables::kR;
  // P(|Z| > 3.654) ~ 2.58e-4
  EXPECT_NEAR(tail / 2e6, 2.58e-4, 6e-5);
}

TEST(RngStream, BelowIsUniform) {
  RngStream s(8, 8);
  std::vector<int> counts(7, 0);
  const int n = 70000;
  for (int i = 0; i < n; ++i) ++counts[s.below(7)];
  for (int c : counts) EXPECT_NEAR(c, n / 7.0, 5.0 * std::sqrt(n / 7.0));
}

TEST(RngStream, ScaledDraws) {
  RngStream s(1, 1);
  for (int i = 0; i < 1000; ++i) {
    const double u = s.uniform(0.2, 1.8);
    ASSERT_GT(u, 0.2);
    ASSERT_LE(u, 1.8);
  }
  RngStream a(1, 5), b(1, 5);
  EXPECT_DOUBLE_EQ(a.normal(3.0, 2.0), 3.0 + 2.0 * b.normal());
}

TEST(TrajectoryStreams, LayoutSeparatesChannels) {
  EXPECT_EQ(trajectory_stream_id(0, Channel::noise), 0u);
  EXPECT_EQ(trajectory_stream_id(0, Channel::omega), 1u);
  EXPECT_EQ(trajectory_stream_id(3, Channel::noise), 3u * kChannels);
  auto a = trajectory_stream(9, 3, Channel::noise);
  auto b = derive_stream(9, 3 * kChannels);
  EXPECT_EQ(a.next_u64(), b.next_u64());
  auto c = trajectory_stream(9, 3, Channel::omega);
  EXPECT_NE(trajectory_stream(9, 3, Channel::noise).next_u64(), c.next_u64());
}
