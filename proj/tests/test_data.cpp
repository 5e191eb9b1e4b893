#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>

#include "nowcast/data.hpp"
#include "nowcast/error.hpp"
#include "test_support.hpp"

using namespace nowcast;
using nowcast::testing::TempDir;

namespace {

data::RadarSequence ramp_sequence(std::int64_t t, std::int64_t h = 4, std::int64_t w = 4) {
  data::RadarSequence s;
  s.length = t;
  s.height = h;
  s.width = w;
  s.frames.resize(static_cast<std::size_t>(t * h * w));
  for (std::size_t i = 0; i < s.frames.size(); ++i) {
    s.frames[i] = static_cast<float>(i % 97) / 97.0f;
  }
  return s;
}

data::NowcastSample sample_with_target(std::vector<float> target) {
  data::NowcastSample s;
  s.in_frames = 1;
  s.height = 1;
  s.width = static_cast<std::int64_t>(target.size());
  s.input.assign(target.size(), 0.0f);
  s.target = std::move(target);
  return s;
}

std::int64_t argmax_column(const data::RadarSequence& s, std::int64_t t) {
  const float* f = s.frame(t);
  const auto it = std::max_element(f, f + s.frame_size());
  return (it - f) % s.width;
}

}  // namespace

// ---- generator ----

TEST(Generate, NoCellsGiveZeroFrames) {
  data::GeneratorConfig c;
  c.n_cells = 0;
  c.length = 20;
  const auto s = data::generate(c);
  EXPECT_EQ(s.frames.size(), static_cast<std::size_t>(20 * 64 * 64));
  for (float v : s.frames) EXPECT_EQ(v, 0.0f);
}

TEST(Generate, SingleCellAdvectsByVelocity) {
  data::GeneratorConfig c;
  c.height = 32;
  c.width = 48;
  c.length = 40;
  c.cells = {data::Cell{.x = 40, .y = 16, .vx = 1, .vy = 0, .amplitude = 1, .sigma = 3}};
  const auto s = data::generate(c);
  for (std::int64_t t : {0, 5, 17, 30}) {
    EXPECT_EQ(argmax_column(s, t + 6), (argmax_column(s, t) + 6) % c.width) << t;
  }
}

TEST(Generate, DeterministicAndInUnitRange) {
  data::GeneratorConfig c;
  c.seed = 1234;
  c.length = 30;
  const auto a = data::generate(c);
  const auto b = data::generate(c);
  EXPECT_EQ(0, std::memcmp(a.frames.data(), b.frames.data(), a.frames.size() * sizeof(float)));
  EXPECT_GT(a.normalization_max, 0.0f);
  float mx = 0;
  for (float v : a.frames) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
    mx = std::max(mx, v);
  }
  EXPECT_EQ(mx, 1.0f);
  c.seed = 1235;
  EXPECT_NE(data::generate(c).frames, a.frames);
}

TEST(Generate, InvalidConfigRejected) {
  data::GeneratorConfig c;
  c.sigma_min = 0;
  EXPECT_THROW(data::generate(c), ConfigError);
}

// ---- windowing ----

TEST(Window, SampleCounts) {
  EXPECT_EQ(data::window(ramp_sequence(18), 12, 6).size(), 1u);
  EXPECT_EQ(data::window(ramp_sequence(24), 12, 6).size(), 7u);
  EXPECT_EQ(data::window(ramp_sequence(17), 12, 6).size(), 0u);
  for (std::int64_t t : {18, 25, 40}) {
    for (std::int64_t in : {1, 4, 12}) {
      for (std::int64_t lead : {1, 3, 6}) {
        const auto expected = std::max<std::int64_t>(0, t - in - lead + 1);
        EXPECT_EQ(static_cast<std::int64_t>(data::window(ramp_sequence(t), in, lead).size()),
                  expected);
      }
    }
  }
}

TEST(Window, LeadAndInputMustBePositive) {
  EXPECT_THROW(data::window(ramp_sequence(30), 12, 0), ConfigError);
  EXPECT_THROW(data::window(ramp_sequence(30), 0, 6), ConfigError);
}

TEST(Window, TargetIsLeadStepsAfterLastInput) {
  const auto seq = ramp_sequence(30);
  const auto samples = data::window(seq, 12, 6);
  const std::int64_t fs = seq.frame_size();
  for (std::size_t start = 0; start < samples.size(); ++start) {
    const auto& s = samples[start];
    for (std::int64_t i = 0; i < 12; ++i) {
      EXPECT_TRUE(std::equal(s.input_frame(i), s.input_frame(i) + fs,
                             seq.frame(static_cast<std::int64_t>(start) + i)));
    }
    const std::int64_t last = static_cast<std::int64_t>(start) + 11;
    EXPECT_TRUE(std::equal(s.target.begin(), s.target.end(), seq.frame(last + 6)));
  }
}

// ---- NL-50 ----

TEST(Nl50, Examples) {
  EXPECT_FALSE(data::nl50_filter(sample_with_target({0, 0, 0, 0}), 0.5));
  EXPECT_TRUE(data::nl50_filter(sample_with_target({0.5f, 0.9f, 0.1f, 0.0f}), 0.5));
  EXPECT_FALSE(data::nl50_filter(sample_with_target({0.5f, 0.4f, 0.1f, 0.0f}), 0.5));
  EXPECT_TRUE(data::nl50_filter(sample_with_target({1, 1, 1, 1}), 0.5));
  EXPECT_THROW(data::nl50_filter(sample_with_target({1}), 1.0), ConfigError);
  EXPECT_DOUBLE_EQ(data::rain_fraction(sample_with_target({0.5f, 0.9f, 0.1f, 0.0f}), 0.5), 0.5);
}

TEST(Nl50, MonotoneInRainyPixels) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> t(15);
    for (auto& v : t) v = static_cast<float>(rng.uniform());
    auto s = sample_with_target(t);
    bool before = data::nl50_filter(s, 0.5);
    for (auto& v : s.target) {
      if (v < 0.5f) {
        v = 0.75f;
        const bool after = data::nl50_filter(s, 0.5);
        EXPECT_FALSE(before && !after);
        before = after;
      }
    }
    EXPECT_TRUE(before);
  }
}

// ---- .rseq ----

TEST(Rseq, RoundTripIsBitwise) {
  TempDir dir("rseq");
  data::GeneratorConfig c;
  c.length = 25;
  c.cadence_minutes = 4.9999995f;
  auto s = data::generate(c);
  data::write_rseq(dir / "a.rseq", s);
  const auto back = data::read_rseq(dir / "a.rseq");
  EXPECT_EQ(back.length, s.length);
  EXPECT_EQ(back.height, s.height);
  EXPECT_EQ(back.width, s.width);
  EXPECT_EQ(back.cadence_minutes, 4.9999995f);
  EXPECT_EQ(back.normalization_max, s.normalization_max);
  EXPECT_EQ(0, std::memcmp(back.frames.data(), s.frames.data(), s.frames.size() * 4));
}

TEST(Rseq, HeaderLayout) {
  TempDir dir("rseqlayout");
  data::write_rseq(dir / "a.rseq", ramp_sequence(5, 3, 2));
  std::ifstream in(dir / "a.rseq", std::ios::binary);
  const std::string bytes(std::istreambuf_iterator<char>(in), {});
  ASSERT_EQ(bytes.size(), 28u + 5 * 3 * 2 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "RSEQ");
  std::uint32_t fields[4];
  std::memcpy(fields, bytes.data() + 4, 16);
  EXPECT_EQ(fields[0], 1u);
  EXPECT_EQ(fields[1], 5u);
  EXPECT_EQ(fields[2], 3u);
  EXPECT_EQ(fields[3], 2u);
}

TEST(Rseq, MalformedFilesAreFormatErrors) {
  TempDir dir("rseqbad");
  data::write_rseq(dir / "a.rseq", ramp_sequence(5));
  std::ifstream in(dir / "a.rseq", std::ios::binary);
  std::string bytes(std::istreambuf_iterator<char>(in), {});

  std::string more = bytes;
  const std::uint32_t t = 9;
  std::memcpy(more.data() + 8, &t, 4);  // header claims 9 frames, payload holds 5
  std::ofstream(dir / "more.rseq", std::ios::binary) << more;
  EXPECT_THROW(data::read_rseq(dir / "more.rseq"), FormatError);

  std::string magic = bytes;
  magic[1] = 'Z';
  std::ofstream(dir / "magic.rseq", std::ios::binary) << magic;
  EXPECT_THROW(data::read_rseq(dir / "magic.rseq"), FormatError);

  std::ofstream(dir / "short.rseq", std::ios::binary) << bytes.substr(0, 10);
  EXPECT_THROW(data::read_rseq(dir / "short.rseq"), FormatError);
  EXPECT_THROW(data::read_rseq(dir / "absent.rseq"), IoError);
}

// ---- splits and batches ----

TEST(Splits, ContiguousBlocksWithoutStraddling) {
  const auto seq = ramp_sequence(100);
  data::SplitConfig cfg;
  cfg.in_frames = 4;
  cfg.lead_steps = 2;
  cfg.apply_nl50 = false;
  const auto s = data::make_splits({seq, seq}, cfg);
  // Blocks of 70 / 15 / 15 frames, each windowed on its own.
  EXPECT_EQ(s.train.size(), 2u * (70 - 6 + 1));
  EXPECT_EQ(s.val.size(), 2u * (15 - 6 + 1));
  EXPECT_EQ(s.test.size(), 2u * (15 - 6 + 1));
  const auto& last_train = s.train[64];
  EXPECT_TRUE(std::equal(last_train.target.begin(), last_train.target.end(), seq.frame(69)));
  const auto& first_val = s.val.front();
  EXPECT_TRUE(std::equal(first_val.input.begin(), first_val.input.begin() + seq.frame_size(),
                         seq.frame(70)));
}

TEST(Splits, Nl50KeepsOnlyRainyTargets) {
  data::GeneratorConfig g;
  g.length = 120;
  data::SplitConfig cfg;
  const auto s = data::make_splits({data::generate(g)}, cfg);
  for (const auto* part : {&s.train, &s.val, &s.test}) {
    for (const auto& x : *part) EXPECT_TRUE(data::nl50_filter(x, 0.5));
  }
}

TEST(Batch, PacksSamples) {
  const auto samples = data::window(ramp_sequence(20, 4, 5), 3, 2);
  const auto [x, y] = data::make_batch<float>(samples, {2, 0});
  EXPECT_EQ(x.shape(), (Shape{2, 3, 4, 5}));
  EXPECT_EQ(y.shape(), (Shape{2, 1, 4, 5}));
  EXPECT_TRUE(std::equal(samples[2].input.begin(), samples[2].input.end(), x.data().begin()));
  EXPECT_TRUE(std::equal(samples[0].target.begin(), samples[0].target.end(),
                         y.data().begin() + 20));
  EXPECT_THROW(data::make_batch<float>(samples, {}), UsageError);
}
