#include <gtest/gtest.h>

#include <array>

#include "modex/quantizers.hpp"
#include "modex/rng.hpp"
#include "oracles.hpp"

using namespace modex;

namespace {

Tensor col(std::initializer_list<double> v) {
  Tensor t(v.size(), 1);
  std::size_t i = 0;
  for (double x : v) t(i++, 0) = x;
  return t;
}

Tensor row(std::initializer_list<double> v) {
  Tensor t(1, v.size());
  std::size_t i = 0;
  for (double x : v) t(0, i++) = x;
  return t;
}

std::vector<int> codes_of(const QuantizedTensor& q) {
  std::vector<int> out;
  for (std::size_t r = 0; r < q.rows(); ++r)
    for (std::size_t c = 0; c < q.cols(); ++c) out.push_back(q.code(r, c));
  return out;
}

}  // namespace

TEST(Int4Sym, RoundHalfEvenChannel) {
  const auto q = quantize_int4_sym_per_channel(col({0, 3.5, -7}));
  EXPECT_EQ(q.scales()[0], 1.0);
  EXPECT_EQ(codes_of(q), (std::vector<int>{0, 4, -7}));
  EXPECT_EQ(dequantize(q), col({0, 4, -7}));
}

TEST(Int4Sym, ZeroChannel) {
  const auto q = quantize_int4_sym_per_channel(col({0, 0, 0}));
  EXPECT_EQ(q.scales()[0], 1.0);
  EXPECT_EQ(codes_of(q), (std::vector<int>{0, 0, 0}));
  EXPECT_EQ(dequantize(q), col({0, 0, 0}));
}

TEST(Int4Sym, GridPointsRoundTrip) {
  const auto q = quantize_int4_sym_per_channel(col({7, -7}));
  EXPECT_EQ(codes_of(q), (std::vector<int>{7, -7}));
  EXPECT_EQ(dequantize(q), col({7, -7}));
}

TEST(Int4Sym, ChannelsAreColumns) {
  const Tensor w = Tensor::from_rows({{1, 14}, {-7, 2}});
  const auto q = quantize_int4_sym_per_channel(w);
  ASSERT_EQ(q.scales().size(), 2u);
  EXPECT_EQ(q.scales()[0], 1.0);
  EXPECT_EQ(q.scales()[1], 2.0);
  EXPECT_EQ(dequantize(q), w);
}

TEST(Int4Sym, DequantizeDefinition) {
  QuantizedTensor q(1, 1, QuantScheme::int4_sym());
  q.set_code(0, 0, 7);
  q.scales()[0] = 2.0;
  EXPECT_EQ(dequantize(q)(0, 0), 14.0);
}

TEST(Int4Sym, NegationSymmetry) {
  Rng rng(1);
  const Tensor w = random_normal(64, 8, rng);
  const auto qp = quantize_int4_sym_per_channel(w);
  const auto qn = quantize_int4_sym_per_channel(-1.0 * w);
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) {
      const double u = w(r, c) / qp.scales()[c];
      if (std::abs(u - std::floor(u) - 0.5) < 1e-12) continue;
      if (qp.code(r, c) == -8) continue;
      EXPECT_EQ(qn.code(r, c), -qp.code(r, c));
    }
}

TEST(Int4Asym, GridEndpoints) {
  const auto q = quantize_int4_asym_per_token(row({0, 15}));
  EXPECT_EQ(q.scales()[0], 1.0);
  EXPECT_EQ(q.zero_points()[0], 0);
  EXPECT_EQ(codes_of(q), (std::vector<int>{0, 15}));
  EXPECT_EQ(dequantize(q), row({0, 15}));
}

TEST(Int4Asym, ConstantRowIsExact) {
  for (double c : {3.25, -2.5, 0.0, 1e-7}) {
    const auto q = quantize_int4_asym_per_token(row({c, c, c, c}));
    EXPECT_EQ(dequantize(q), row({c, c, c, c})) << c;
  }
}

TEST(Int4Asym, ErrorWithinHalfStep) {
  const Tensor x = row({-1, 0, 2});
  const auto q = quantize_int4_asym_per_token(x);
  // Scales are held at binary32 precision.
  EXPECT_EQ(q.scales()[0], static_cast<double>(0.2f));
  EXPECT_LE(max_abs(dequantize(q) - x), q.scales()[0] / 2);
  EXPECT_FLOAT_EQ(max_rounding_error(q), 0.1);
}

TEST(Int4Asym, TokensAreRows) {
  const Tensor x = Tensor::from_rows({{0, 15}, {0, 30}});
  const auto q = quantize_int4_asym_per_token(x);
  ASSERT_EQ(q.scales().size(), 2u);
  EXPECT_EQ(q.scales()[1], 2.0);
}

TEST(Mxfp4, MaxSixIsExact) {
  Tensor t(1, 32);
  t(0, 0) = 6.0;
  t(0, 1) = -1.5;
  const auto q = quantize_mxfp4(t, GroupAxis::cols);
  EXPECT_EQ(q.exponents()[0], 127);
  EXPECT_EQ(dequantize(q), t);
}

TEST(Mxfp4, ZeroGroup) {
  const auto q = quantize_mxfp4(Tensor(1, 32), GroupAxis::cols);
  EXPECT_EQ(q.exponents()[0], 127);
  EXPECT_EQ(dequantize(q), Tensor(1, 32));
}

TEST(Mxfp4, TieAtFiveSelectsFour) {
  Tensor t(1, 32);
  t(0, 0) = 5.0;
  t(0, 1) = 6.0;  // pins the group exponent to 0
  const auto q = quantize_mxfp4(t, GroupAxis::cols);
  EXPECT_EQ(q.exponents()[0], 127);
  EXPECT_EQ(dequantize(q)(0, 0), 4.0);
  EXPECT_EQ(e2m1_encode(5.0), 6);
  EXPECT_EQ(e2m1_encode(-5.0), 14);
}

TEST(Mxfp4, EncodeMatchesExhaustiveOracle) {
  Rng rng(2);
  for (int i = 0; i < 20000; ++i) {
    const double v = rng.uniform(-6.0, 6.0);
    ASSERT_EQ(int(e2m1_encode(v)), oracle::e2m1_nearest_code(v)) << v;
  }
  // Every midpoint.
  for (std::size_t i = 0; i + 1 < e2m1_magnitudes.size(); ++i) {
    const double mid = 0.5 * (e2m1_magnitudes[i] + e2m1_magnitudes[i + 1]);
    EXPECT_EQ(int(e2m1_encode(mid)), oracle::e2m1_nearest_code(mid)) << mid;
    EXPECT_EQ(int(e2m1_encode(-mid)), oracle::e2m1_nearest_code(-mid)) << -mid;
  }
}

TEST(Mxfp4, ExhaustiveCodeRoundTrip) {
  for (int c = 0; c < 16; ++c) {
    const auto code = static_cast<std::uint8_t>(c);
    const double v = e2m1_value(code);
    // −0 encodes as +0.
    EXPECT_EQ(int(e2m1_encode(v)), c == 8 ? 0 : c);
  }
}

TEST(Mxfp4, DequantizeDefinition) {
  QuantizedTensor q(1, 1, QuantScheme::mxfp4(GroupAxis::cols));
  q.set_code(0, 0, e2m1_encode(-1.5));
  q.exponents()[0] = 128;
  EXPECT_EQ(dequantize(q)(0, 0), -3.0);
}

TEST(Mxfp4, GroupLayoutBothAxes) {
  Rng rng(3);
  const Tensor t = random_normal(70, 5, rng);
  const auto qr = quantize_mxfp4(t, GroupAxis::rows);
  EXPECT_EQ(qr.group_count(), 3u * 5u);
  const auto qc = quantize_mxfp4(transpose(t), GroupAxis::cols);
  EXPECT_EQ(qc.group_count(), 5u * 3u);
  EXPECT_EQ(dequantize(qr), transpose(dequantize(qc)));
}

TEST(Mxfp4, ScaleEquivariance) {
  Rng rng(4);
  for (int i = 0; i < 2000; ++i) {
    Tensor t = random_normal(1, 32, rng, std::exp(rng.uniform(-5.0, 5.0)));
    const auto a = quantize_mxfp4(t, GroupAxis::cols);
    const auto b = quantize_mxfp4(2.0 * t, GroupAxis::cols);
    ASSERT_EQ(codes_of(a), codes_of(b));
    ASSERT_EQ(int(b.exponents()[0]), int(a.exponents()[0]) + 1);
  }
}

TEST(Mxfp4, RejectsNonFinite) {
  Tensor t(1, 32);
  t(0, 3) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(quantize_mxfp4(t), numeric_error);
  t(0, 3) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(quantize_int4_sym_per_channel(t), numeric_error);
}

TEST(RoundTrip, FixedPointForAllSchemes) {
  Rng rng(5);
  const Tensor t = random_student_t(48, 40, rng);
  for (const auto& s : {QuantScheme::int4_sym(), QuantScheme::int4_asym(),
                        QuantScheme::mxfp4(GroupAxis::rows), QuantScheme::mxfp4(GroupAxis::cols)}) {
    const auto q1 = quantize(t, s);
    const auto q2 = quantize(dequantize(q1), s);
    EXPECT_EQ(codes_of(q1), codes_of(q2)) << to_string(s.kind);
    EXPECT_EQ(dequantize(q1), dequantize(q2)) << to_string(s.kind);
    const auto sc1 = q1.scales();
    const auto sc2 = q2.scales();
    EXPECT_TRUE(std::equal(sc1.begin(), sc1.end(), sc2.begin(), sc2.end()));
    const auto e1 = q1.exponents();
    const auto e2 = q2.exponents();
    EXPECT_TRUE(std::equal(e1.begin(), e1.end(), e2.begin(), e2.end()));
  }
}

TEST(Delta, Examples) {
  QuantizedTensor sym(1, 2, QuantScheme::int4_sym());
  sym.scales()[0] = 1.0;
  sym.scales()[1] = 2.0;
  EXPECT_EQ(max_rounding_error(sym), 1.0);

  QuantizedTensor mx(1, 32, QuantScheme::mxfp4(GroupAxis::cols));
  mx.exponents()[0] = 127;
  EXPECT_EQ(max_rounding_error(mx), 1.0);
  EXPECT_EQ(max_saturating_error(mx), 2.0);

  QuantizedTensor asym(1, 4, QuantScheme::int4_asym());
  asym.scales()[0] = 0.1;
  EXPECT_NEAR(max_rounding_error(asym), 0.05, 1e-17);
  EXPECT_EQ(max_saturating_error(asym), max_rounding_error(asym));
}

TEST(Delta, RoundTripErrorWithinDelta) {
  Rng rng(6);
  const Tensor t = random_normal(1000, 100, rng);  // 10⁵ values
  // INT4: every input is inside the range its scale was fitted to.
  for (const auto& s : {QuantScheme::int4_sym(), QuantScheme::int4_asym()}) {
    const auto q = quantize(t, s);
    const Tensor d = dequantize(q);
    for (std::size_t r = 0; r < t.rows(); ++r)
      for (std::size_t c = 0; c < t.cols(); ++c)
        ASSERT_LE(std::abs(t(r, c) - d(r, c)), q.step_scale(r, c) / 2 * (1 + 1e-12));
    EXPECT_LE(max_abs(t - d), max_rounding_error(q) * (1 + 1e-12));
  }
  // MXFP4: in-range means |x| ≤ 6·scale; beyond that the saturating bound applies.
  const auto q = quantize_mxfp4(t, GroupAxis::rows);
  const Tensor d = dequantize(q);
  std::size_t in_range = 0;
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) {
      const double s = q.step_scale(r, c);
      const double err = std::abs(t(r, c) - d(r, c));
      if (std::abs(t(r, c)) <= 6.0 * s) {
        ++in_range;
        ASSERT_LE(err, 1.0 * s);
      }
      ASSERT_LE(err, 2.0 * s);
    }
  EXPECT_GT(in_range, t.size() / 2);
  EXPECT_LE(max_abs(t - d), max_saturating_error(q));
}

TEST(Packing, AllCodesRoundTrip) {
  std::vector<std::uint8_t> codes;
  for (int i = 0; i < 16; ++i) codes.push_back(static_cast<std::uint8_t>(i));
  for (int i = 15; i >= 0; --i) codes.push_back(static_cast<std::uint8_t>(i));
  codes.push_back(9);  // odd length
  const auto packed = pack_nibbles(codes);
  EXPECT_EQ(packed.size(), (codes.size() + 1) / 2);
  EXPECT_EQ(packed[0], 0x10);  // low nibble = even index
  EXPECT_EQ(unpack_nibbles(packed, codes.size()), codes);
}

TEST(Packing, SignedInt4Codes) {
  QuantizedTensor q(1, 16, QuantScheme::int4_sym());
  for (int c = -8; c <= 7; ++c) q.set_code(0, static_cast<std::size_t>(c + 8), c);
  for (int c = -8; c <= 7; ++c) EXPECT_EQ(q.code(0, static_cast<std::size_t>(c + 8)), c);
}

TEST(Validate, RejectsCorruptMetadata) {
  QuantizedTensor q(2, 2, QuantScheme::int4_asym());
  q.zero_points()[0] = 16;
  EXPECT_THROW(dequantize(q), numeric_error);
  QuantizedTensor s(2, 2, QuantScheme::int4_sym());
  s.scales()[1] = 0.0;
  EXPECT_THROW(dequantize(s), numeric_error);
  QuantizedTensor m(1, 32, QuantScheme::mxfp4(GroupAxis::cols));
  m.exponents()[0] = 0xFF;
  EXPECT_THROW(dequantize(m), numeric_error);
}

TEST(Volume, Examples) {
  const std::array<VolumeEntry, 1> empty{VolumeEntry{0, QuantScheme::int4_sym(), 0, 0}};
  EXPECT_EQ(volume_bits(empty), 0u);
  const std::array<VolumeEntry, 1> mx{VolumeEntry{64, QuantScheme::mxfp4(), 0, 0}};
  EXPECT_EQ(volume_bits(mx), 272u);
  const std::array<VolumeEntry, 1> bf{VolumeEntry{10, std::nullopt, 0, 0}};
  EXPECT_EQ(volume_bits(bf), 160u);
  const std::array<VolumeEntry, 1> sym{VolumeEntry{64, QuantScheme::int4_sym(), 8, 0}};
  EXPECT_EQ(volume_bits(sym), 64u * 4 + 8 * 16);
  const std::array<VolumeEntry, 1> asym{VolumeEntry{64, QuantScheme::int4_asym(), 0, 0}};
  EXPECT_EQ(volume_bits(asym), 256u);
}

TEST(Volume, ExpandedFourBitVersusBf16) {
  // 1.05 units at 4 bits against 1.0 unit at 16 bits.
  const std::uint64_t base = 1'000'000;
  const std::array<VolumeEntry, 1> q{VolumeEntry{base * 105 / 100, QuantScheme::int4_asym(), 0, 0}};
  const double ratio = volume_ratio(static_cast<double>(base), static_cast<double>(volume_bits(q)));
  EXPECT_NEAR(ratio, 16.0 / (1.05 * 4.0), 1e-12);
  EXPECT_GE(ratio, 3.8);
}
