#include <gtest/gtest.h>

#include <cmath>

#include "mbrain/signal.hpp"
#include "test_util.hpp"

using namespace mbrain;
using mbrain::testing::TempDir;

namespace {

Recording random_recording(std::size_t len, std::size_t ch, Rng& rng) {
  return make_recording(mbrain::testing::random_matrix(len, ch, rng), 250.0);
}

}  // namespace

TEST(Recording, CsvWithFourRowsLoads) {
  TempDir dir("csv");
  const auto path = dir.path / "rec.csv";
  std::ofstream(path) << "a,b\n1,2\n3,4\n5,6\n7,8\n";
  const Recording rec = load_recording(path, RecordingFormat::csv);
  EXPECT_EQ(rec.length(), 4u);
  EXPECT_EQ(rec.channels(), 2u);
  EXPECT_EQ(rec.samples(2, 1), 6.0);
  EXPECT_EQ(rec.point_labels.count(), 0u);
}

TEST(Recording, LabelFileMarksHalfOpenRange) {
  TempDir dir("labels");
  const auto path = dir.path / "rec.csv";
  std::ofstream(path) << "a,b\n0,0\n0,0\n0,0\n0,0\n";
  std::ofstream(label_path_for(path)) << "channel_name,start_index,end_index\na,2,4\n";
  const Recording rec = load_recording(path, RecordingFormat::csv);
  BinaryMatrix want(4, 2);
  want(2, 0) = want(3, 0) = 1;
  EXPECT_EQ(rec.point_labels, want);
}

TEST(Recording, MbrnRoundTripIsBitwise) {
  TempDir dir("mbrn");
  Rng rng(3);
  Recording rec = random_recording(37, 3, rng);
  for (double& v : rec.samples.data) v = static_cast<float>(v);  // format stores float32
  rec.point_labels(5, 1) = 1;
  save_recording(rec, dir.path / "x.mbrn", RecordingFormat::mbrn);
  const Recording back = load_recording(dir.path / "x.mbrn", RecordingFormat::mbrn);
  EXPECT_EQ(back.samples.data, rec.samples.data);
  EXPECT_EQ(back.point_labels, rec.point_labels);
  EXPECT_EQ(back.sample_rate_hz, 250.0);
}

TEST(Recording, CsvRoundTripKeepsLabels) {
  TempDir dir("csvrt");
  Rng rng(4);
  Recording rec = random_recording(12, 2, rng);
  rec.point_labels(3, 1) = rec.point_labels(4, 1) = 1;
  save_recording(rec, dir.path / "r.csv", RecordingFormat::csv);
  const Recording back = load_recording(dir.path / "r.csv", RecordingFormat::csv, 250.0);
  EXPECT_EQ(back.samples.data, rec.samples.data);
  EXPECT_EQ(back.point_labels, rec.point_labels);
}

TEST(Recording, ParseErrorsNameRowAndColumn) {
  try {
    parse_recording_csv("a,b\n1,2\n3,x\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.row(), 3u);
    EXPECT_EQ(e.column(), 2u);
  }
  EXPECT_THROW(parse_recording_csv("a,b\n1,2,3\n"), ParseError);
  EXPECT_THROW(parse_recording_csv("a,a\n1,2\n"), ParseError);
  EXPECT_THROW(parse_recording_csv(""), ParseError);
  Recording rec = parse_recording_csv("a,b\n1,2\n3,4\n");
  EXPECT_THROW(apply_label_csv(rec, "a,0,3\n"), ParseError);  // past the end
  EXPECT_THROW(apply_label_csv(rec, "zz,0,1\n"), ParseError);
}

TEST(Recording, TruncatedMbrnIsRejected) {
  Rng rng(5);
  const std::string bytes = encode_mbrn(random_recording(10, 2, rng));
  EXPECT_THROW(decode_mbrn(bytes.substr(0, bytes.size() - 1)), ParseError);
  EXPECT_THROW(decode_mbrn(bytes.substr(0, 10)), ParseError);
  EXPECT_THROW(decode_mbrn("XXXX" + bytes.substr(4)), ParseError);
}

TEST(Normalize, TwoPointChannelUsesPopulationStd) {
  Recording rec = make_recording(Matrix(2, 2, {1.0, 0.0, 3.0, 4.0}), 1.0);
  auto [out, stats] = normalize_channels(rec);
  EXPECT_DOUBLE_EQ(out.samples(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(out.samples(1, 0), 1.0);
  EXPECT_DOUBLE_EQ(stats.per_channel_mean[0], 2.0);
  EXPECT_DOUBLE_EQ(stats.per_channel_std[0], 1.0);
}

TEST(Normalize, ConstantChannelMapsToZerosWithWarning) {
  Recording rec = make_recording(Matrix(3, 2, {5, 1, 5, 2, 5, 3}), 1.0);
  auto [out, stats] = normalize_channels(rec);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(out.samples(l, 0), 0.0);
  ASSERT_EQ(stats.warnings.size(), 1u);
  EXPECT_GT(stats.per_channel_std[0], 0.0);
}

TEST(Normalize, MeanZeroStdOneAndInverse) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Recording rec = random_recording(50 + trial, 3, rng);
    for (double& v : rec.samples.data) v = v * 7.0 + 3.0;
    auto [out, stats] = normalize_channels(rec);
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0, s = 0;
      for (std::size_t l = 0; l < out.length(); ++l) m += out.samples(l, c);
      m /= static_cast<double>(out.length());
      for (std::size_t l = 0; l < out.length(); ++l) s += (out.samples(l, c) - m) * (out.samples(l, c) - m);
      EXPECT_NEAR(m, 0.0, 1e-6);
      EXPECT_NEAR(std::sqrt(s / static_cast<double>(out.length())), 1.0, 1e-6);
    }
    const Recording back = denormalize_channels(out, stats);
    for (std::size_t k = 0; k < rec.samples.size(); ++k)
      EXPECT_NEAR(back.samples.data[k], rec.samples.data[k], 1e-5 * std::max(1.0, std::abs(rec.samples.data[k])));
  }
}

TEST(Normalize, StandardizedInputIsAFixedPoint) {
  Rng rng(7);
  auto [once, s1] = normalize_channels(random_recording(200, 2, rng));
  auto [twice, s2] = normalize_channels(once);
  for (std::size_t k = 0; k < once.samples.size(); ++k) EXPECT_NEAR(twice.samples.data[k], once.samples.data[k], 1e-6);
}

TEST(Segment, FloorCountAndTrailingDrop) {
  Rng rng(8);
  const auto s = segment_recording(random_recording(10, 2, rng), 3);
  EXPECT_EQ(s.size(), 3u);
  const auto t = segment_recording(random_recording(8, 2, rng), 4);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t.segments[0].rows, 4u);
  EXPECT_EQ(t.segments[0].cols, 2u);
  EXPECT_THROW(segment_recording(random_recording(3, 2, rng), 4), InvalidWindowError);
  EXPECT_THROW(segment_recording(random_recording(3, 2, rng), 0), InvalidWindowError);
}

TEST(Segment, ConcatenationReproducesRawRows) {
  Rng rng(9);
  for (std::size_t w : {1u, 3u, 7u}) {
    const Recording rec = random_recording(23, 3, rng);
    const auto s = segment_recording(rec, w);
    std::vector<double> joined;
    for (const auto& seg : s.segments) joined.insert(joined.end(), seg.data.begin(), seg.data.end());
    const std::vector<double> head(rec.samples.data.begin(), rec.samples.data.begin() + static_cast<std::ptrdiff_t>(s.size() * w * 3));
    EXPECT_EQ(joined, head);
  }
}

TEST(SegmentLabels, MaxRule) {
  BinaryMatrix a(4, 1), b(4, 1);
  a(2, 0) = 1;
  EXPECT_EQ(derive_segment_labels(a, 4)(0, 0), 1);
  EXPECT_EQ(derive_segment_labels(b, 4)(0, 0), 0);
}

TEST(SegmentLabels, MatchesPerWindowOracle) {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    BinaryMatrix p(20, 3);
    for (auto& v : p.data) v = rng.uniform() < 0.1 ? 1 : 0;
    const auto got = derive_segment_labels(p, 5);
    ASSERT_EQ(got.rows, 4u);
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t c = 0; c < 3; ++c) {
        bool any = false;
        for (std::size_t w = 0; w < 5; ++w) any = any || p(t * 5 + w, c) == 1;
        EXPECT_EQ(got(t, c), any ? 1 : 0);
      }
  }
}

TEST(SegmentLabels, MonotoneUnderPointFlips) {
  Rng rng(11);
  BinaryMatrix p(30, 2);
  for (auto& v : p.data) v = rng.uniform() < 0.05 ? 1 : 0;
  for (int flip = 0; flip < 40; ++flip) {
    const auto before = derive_segment_labels(p, 6);
    p.data[rng.index(p.data.size())] = 1;
    const auto after = derive_segment_labels(p, 6);
    for (std::size_t k = 0; k < before.data.size(); ++k) EXPECT_GE(after.data[k], before.data[k]);
  }
}
