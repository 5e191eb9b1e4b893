#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "nowcast/checkpoint.hpp"
#include "nowcast/error.hpp"
#include "nowcast/model.hpp"
#include "test_support.hpp"

using namespace nowcast;
using nowcast::testing::check_gradients;
using nowcast::testing::random_tensor;
using nowcast::testing::TempDir;
using nowcast::testing::to_vector;

namespace {

ModelConfig config_for(Variant v, std::int64_t size = 64) {
  ModelConfig c;
  c.variant = v;
  c.input_size = size;
  return c;
}

ModelConfig tiny(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.in_frames = 2;
  c.input_size = 32;
  c.base_width = 16;
  c.vq.codebook_size = 8;
  c.seed = 5;
  return c;
}

Tensor<float> random_input(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> x(s);
  for (auto& v : x.mutable_data()) v = static_cast<float>(rng.uniform());
  return x;
}

std::set<std::string> names(const Registry<float>& r) {
  std::set<std::string> out;
  for (const auto& e : r) out.insert(e.name);
  return out;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes;
}

}  // namespace

// ---- configuration and structure ----

TEST(ModelConfig, RejectsBadGeometry) {
  ModelConfig c;
  c.input_size = 100;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(UNet<float>{c}, ConfigError);
  EXPECT_THROW(parse_variant("smaat"), ConfigError);
  EXPECT_EQ(parse_variant("qmix"), Variant::QMix);
  EXPECT_EQ((ModelConfig{}.widths()), (std::array<std::int64_t, 5>{64, 128, 256, 512, 512}));
  EXPECT_EQ(ModelConfig{}.bottleneck_size(), 18);
}

TEST(Model, BaselineHasNoMixConvAndNoCodebook) {
  UNet<float> m(config_for(Variant::Baseline));
  EXPECT_FALSE(m.has_vq());
  for (int i = 0; i < 5; ++i) EXPECT_EQ(m.encoder_block(i).kind(), nn::BlockKind::DoubleDSC);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(m.decoder_block(i).kind(), nn::BlockKind::DoubleDSC);
}

TEST(Model, MixConvSitsAtDeepEncoderLevelsAndFirstDecoderStage) {
  for (Variant v : {Variant::Mix, Variant::QMix}) {
    UNet<float> m(config_for(v));
    for (int i = 0; i < 5; ++i) {
      EXPECT_EQ(m.encoder_block(i).kind(),
                i >= 3 ? nn::BlockKind::DoubleMixConv : nn::BlockKind::DoubleDSC);
    }
    for (int i = 0; i < 4; ++i) {
      EXPECT_EQ(m.decoder_block(i).kind(),
                i == 0 ? nn::BlockKind::DoubleMixConv : nn::BlockKind::DoubleDSC);
    }
  }
}

TEST(Model, QMixCodebookIs32By512) {
  UNet<float> m(config_for(Variant::QMix));
  ASSERT_TRUE(m.has_vq());
  EXPECT_EQ(m.codebook().size(), 32);
  EXPECT_EQ(m.codebook().dim(), 512);
}

TEST(Model, MixDiffersFromBaselineOnlyAtMixConvSites) {
  const auto a = names(UNet<float>(config_for(Variant::Baseline)).registry());
  const auto b = names(UNet<float>(config_for(Variant::Mix)).registry());
  std::set<std::string> diff;
  std::set_symmetric_difference(a.begin(), a.end(), b.begin(), b.end(),
                                std::inserter(diff, diff.end()));
  EXPECT_FALSE(diff.empty());
  for (const auto& n : diff) {
    EXPECT_TRUE(n.rfind("enc4.block.", 0) == 0 || n.rfind("enc5.block.", 0) == 0 ||
                n.rfind("dec1.block.", 0) == 0)
        << n;
  }
}

TEST(Model, RegistryNamesAreUniqueAndDeterministic) {
  UNet<float> a(config_for(Variant::QMix)), b(config_for(Variant::QMix));
  const auto ra = a.registry(), rb = b.registry();
  ASSERT_EQ(ra.size(), rb.size());
  EXPECT_EQ(names(ra).size(), ra.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].name, rb[i].name);
    EXPECT_EQ(to_vector(ra[i].tensor), to_vector(rb[i].tensor)) << ra[i].name;
  }
}

// ---- forward ----

TEST(Model, DeskScaleShapes) {
  UNet<float> m(config_for(Variant::QMix));
  Trace<float> trace;
  const auto out = m.forward(random_input(Shape{2, 12, 64, 64}, 1), Mode::Train, &trace);
  EXPECT_EQ(out.prediction.shape(), (Shape{2, 1, 64, 64}));
  EXPECT_EQ(trace.bottleneck.shape(), (Shape{2, 512, 4, 4}));
  EXPECT_TRUE(out.vq_loss.defined());
  EXPECT_EQ(out.vq_indices.size(), 2u * 4 * 4);
}

TEST(Model, FullScaleBottleneckIs18By18) {
  UNet<float> m(config_for(Variant::Baseline, 288));
  Trace<float> trace;
  const auto out = m.forward(random_input(Shape{1, 12, 288, 288}, 2), Mode::Eval, &trace);
  EXPECT_EQ(trace.encoder_cbam[4].shape(), (Shape{1, 512, 18, 18}));
  EXPECT_EQ(out.prediction.shape(), (Shape{1, 1, 288, 288}));
  EXPECT_FALSE(out.vq_loss.defined());
}

TEST(Model, ZeroInputGivesFiniteOutput) {
  for (Variant v : kAllVariants) {
    UNet<float> m(config_for(v));
    const auto out = m.forward(Tensor<float>(Shape{2, 12, 64, 64}), Mode::Train);
    for (float p : out.prediction.data()) ASSERT_TRUE(std::isfinite(p));
  }
}

TEST(Model, WrongInputShapeIsShapeError) {
  UNet<float> m(tiny(Variant::Baseline));
  EXPECT_THROW(m.forward(Tensor<float>(Shape{1, 3, 32, 32}), Mode::Eval), ShapeError);
  EXPECT_THROW(m.forward(Tensor<float>(Shape{1, 2, 16, 16}), Mode::Eval), ShapeError);
}

TEST(Model, EvalForwardIsPure) {
  UNet<float> m(tiny(Variant::QMix));
  m.forward(random_input(Shape{2, 2, 32, 32}, 3), Mode::Train);  // non-trivial BN stats
  std::vector<std::vector<float>> before;
  for (const auto& e : m.registry()) before.push_back(to_vector(e.tensor));
  const auto x = random_input(Shape{2, 2, 32, 32}, 4);
  const auto a = to_vector(m.forward(x, Mode::Eval).prediction);
  const auto b = to_vector(m.forward(x, Mode::Eval).prediction);
  EXPECT_EQ(a, b);
  const auto reg = m.registry();
  for (std::size_t i = 0; i < reg.size(); ++i) EXPECT_EQ(to_vector(reg[i].tensor), before[i]);
}

TEST(Model, GradientsMatchFiniteDifferences) {
  for (Variant v : {Variant::Baseline, Variant::Mix}) {
    UNet<double> m(tiny(v));
    Rng rng(7);
    auto x = random_tensor(Shape{2, 2, 32, 32}, rng, true, 0.0, 1.0);
    const auto target = random_tensor(Shape{2, 1, 32, 32}, rng, false, 0.0, 1.0);
    std::vector<Tensor<double>> leaves = m.parameters();
    leaves.push_back(x);
    auto loss = [&] { return ops::mse(m.forward(x, Mode::Train).prediction, target); };
    // ReLU and max-pool kinks sit within 1e-6 of some probes; 1e-7 steps stay on one piece.
    const auto r = check_gradients(loss, leaves, 3, 1e-7);
    EXPECT_LT(r.max_rel_error, 1e-4) << variant_name(v) << ": " << r.worst;
  }
}

// Upstream of the quantizer the tape carries the straight-through surrogate,
// which finite differences of the true loss cannot reproduce. Only leaves
// the quantized tensor feeds into are probed; the estimator itself is pinned
// down op by op in test_vq.
TEST(Model, VqGradientsMatchFiniteDifferencesDownstream) {
  for (Variant v : {Variant::Q, Variant::QMix}) {
    UNet<double> m(tiny(v));
    Rng rng(7);
    const auto x = random_tensor(Shape{2, 2, 32, 32}, rng, false, 0.0, 1.0);
    const auto target = random_tensor(Shape{2, 1, 32, 32}, rng, false, 0.0, 1.0);
    std::vector<Tensor<double>> downstream, upstream;
    for (const auto& e : m.registry()) {
      if (!e.trainable || e.name.rfind("vq.", 0) == 0) continue;
      const bool after = e.name.rfind("dec", 0) == 0 || e.name.rfind("head", 0) == 0;
      (after ? downstream : upstream).push_back(e.tensor);
    }
    ASSERT_FALSE(downstream.empty());
    auto loss = [&] {
      const auto out = m.forward(x, Mode::Train);
      return ops::add(ops::mse(out.prediction, target), out.vq_loss);
    };
    const auto r = check_gradients(loss, downstream, 3, 1e-7);
    EXPECT_LT(r.max_rel_error, 1e-4) << variant_name(v) << ": " << r.worst;
    bool upstream_signal = false;
    for (const auto& t : upstream) {
      for (double g : t.grad()) {
        ASSERT_TRUE(std::isfinite(g));
        upstream_signal |= g != 0.0;
      }
    }
    EXPECT_TRUE(upstream_signal) << variant_name(v);
  }
}

// ---- parameter audit ----

TEST(ParameterCount, ReferenceTotals) {
  EXPECT_EQ(count_parameters(config_for(Variant::Baseline)).total, 4033527);
  EXPECT_EQ(count_parameters(config_for(Variant::Q)).total, 4049911);
  EXPECT_EQ(count_parameters(config_for(Variant::Mix)).total, 2454007);
  EXPECT_EQ(count_parameters(config_for(Variant::QMix)).total, 2470391);
}

TEST(ParameterCount, AuditBandAndRelations) {
  const double base = count_parameters(config_for(Variant::Baseline)).total;
  const double qmix = count_parameters(config_for(Variant::QMix)).total;
  EXPECT_GE(base, 3.5e6);
  EXPECT_LE(base, 4.5e6);
  const double reduction = 1.0 - qmix / base;
  EXPECT_GE(reduction, 0.34);
  EXPECT_LE(reduction, 0.41);

  const std::int64_t kd = 32 * 512;
  const auto c = [](Variant v) { return count_parameters(config_for(v)).total; };
  EXPECT_EQ(c(Variant::Mix), c(Variant::QMix) - kd);
  EXPECT_EQ(c(Variant::Baseline), c(Variant::Q) - kd);
  EXPECT_LT(c(Variant::Mix), c(Variant::Baseline));
  EXPECT_LT(c(Variant::QMix), c(Variant::Q));
}

TEST(ParameterCount, ModelAndConfigAgreeAndHeadIs65) {
  UNet<float> m(config_for(Variant::QMix));
  const auto from_model = count_parameters(m);
  const auto from_config = count_parameters(config_for(Variant::QMix));
  EXPECT_EQ(from_model.total, from_config.total);
  EXPECT_EQ(from_model.per_module, from_config.per_module);
  EXPECT_EQ(from_model.per_module.at("head"), 65);
  EXPECT_EQ(from_model.per_module.at("vq"), 32 * 512);
  std::int64_t sum = 0;
  for (const auto& [name, n] : from_model.per_module) sum += n;
  EXPECT_EQ(sum, from_model.total);
  EXPECT_EQ(count_trainable(m.registry()), from_model.total);
}

// ---- checkpoints ----

TEST(Checkpoint, RoundTripIsBitwise) {
  TempDir dir("ckpt");
  UNet<float> a(tiny(Variant::QMix));
  a.forward(random_input(Shape{2, 2, 32, 32}, 8), Mode::Train);  // move BN stats and usage
  save_checkpoint(dir / "m.ckpt", a);

  ModelConfig other = tiny(Variant::QMix);
  other.seed = 99;
  UNet<float> b(other);
  load_checkpoint(dir / "m.ckpt", b);
  const auto ra = a.registry(), rb = b.registry();
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(to_vector(ra[i].tensor), to_vector(rb[i].tensor)) << ra[i].name;
  }
  const auto x = random_input(Shape{2, 2, 32, 32}, 9);
  EXPECT_EQ(to_vector(a.forward(x, Mode::Eval).prediction),
            to_vector(b.forward(x, Mode::Eval).prediction));
}

TEST(Checkpoint, LayoutHeaderAndSortedNames) {
  TempDir dir("ckptlayout");
  UNet<float> m(tiny(Variant::Q));
  save_checkpoint(dir / "m.ckpt", m);
  const std::string bytes = read_bytes(dir / "m.ckpt");
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(bytes.substr(0, 4), "SQMU");
  std::uint32_t version, count;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&count, bytes.data() + 8, 4);
  EXPECT_EQ(version, 1u);
  EXPECT_EQ(count, m.registry().size());
  const auto entries = read_checkpoint(dir / "m.ckpt");
  for (std::size_t i = 1; i < entries.size(); ++i) EXPECT_LT(entries[i - 1].name, entries[i].name);
}

TEST(Checkpoint, CorruptFilesFailWithoutTouchingTheModel) {
  TempDir dir("ckptbad");
  UNet<float> src(tiny(Variant::Mix));
  save_checkpoint(dir / "m.ckpt", src);
  const std::string good = read_bytes(dir / "m.ckpt");

  ModelConfig cfg = tiny(Variant::Mix);
  cfg.seed = 42;
  UNet<float> dst(cfg);
  const auto snapshot = to_vector(dst.registry().back().tensor);

  write_bytes(dir / "trunc.ckpt", good.substr(0, good.size() - 10));
  EXPECT_THROW(load_checkpoint(dir / "trunc.ckpt", dst), FormatError);
  std::string magic = good;
  magic[0] = 'X';
  write_bytes(dir / "magic.ckpt", magic);
  EXPECT_THROW(load_checkpoint(dir / "magic.ckpt", dst), FormatError);
  std::string version = good;
  version[4] = 7;
  write_bytes(dir / "version.ckpt", version);
  EXPECT_THROW(load_checkpoint(dir / "version.ckpt", dst), FormatError);
  write_bytes(dir / "trailing.ckpt", good + "x");
  EXPECT_THROW(load_checkpoint(dir / "trailing.ckpt", dst), FormatError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt", dst), IoError);

  EXPECT_EQ(to_vector(dst.registry().back().tensor), snapshot);
}

TEST(Checkpoint, WrongVariantIsRejected) {
  TempDir dir("ckptvariant");
  UNet<float> q(tiny(Variant::Q));
  save_checkpoint(dir / "q.ckpt", q);
  UNet<float> mix(tiny(Variant::Mix));
  const auto snapshot = to_vector(mix.registry().front().tensor);
  EXPECT_THROW(load_checkpoint(dir / "q.ckpt", mix), VariantMismatchError);
  EXPECT_THROW(load_checkpoint(dir / "q.ckpt", mix), FormatError);
  // The registry-level loader reports the name mismatch itself.
  EXPECT_THROW(load_checkpoint(dir / "q.ckpt", mix.registry()), FormatError);
  EXPECT_EQ(to_vector(mix.registry().front().tensor), snapshot);
}

TEST(Checkpoint, SameVariantDifferentWidthIsRegistryMismatch) {
  TempDir dir("ckptwidth");
  UNet<float> a(tiny(Variant::Baseline));
  save_checkpoint(dir / "a.ckpt", a);
  ModelConfig wide = tiny(Variant::Baseline);
  wide.base_width = 32;
  UNet<float> b(wide);
  try {
    load_checkpoint(dir / "a.ckpt", b);
    FAIL() << "expected FormatError";
  } catch (const VariantMismatchError&) {
    FAIL() << "width change is not a variant change";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("registry mismatch"), std::string::npos);
  }
}

TEST(Checkpoint, VariantInference) {
  TempDir dir("ckptinfer");
  for (Variant v : kAllVariants) {
    UNet<float> m(tiny(v));
    save_checkpoint(dir / "m.ckpt", m);
    const auto found = infer_variant(read_checkpoint(dir / "m.ckpt"));
    ASSERT_TRUE(found.has_value());
    EXPECT_EQ(*found, v);
  }
  EXPECT_FALSE(infer_variant({}).has_value());
}
