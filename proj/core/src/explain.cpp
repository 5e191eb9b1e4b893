#include "nowcast/explain.hpp"

#include <algorithm>

#include "nowcast/error.hpp"
#include "nowcast/image.hpp"
#include "nowcast/ops.hpp"

namespace nowcast::explain {

std::vector<LayerId> all_layers() {
  std::vector<LayerId> out;
  for (int l = 1; l <= 5; ++l) out.push_back({Site::EncoderBlock, l});
  for (int l = 1; l <= 5; ++l) out.push_back({Site::EncoderCbam, l});
  for (int l = 1; l <= 4; ++l) out.push_back({Site::DecoderBlock, l});
  return out;
}

namespace {

void check_layer(LayerId id) {
  const int top = id.site == Site::DecoderBlock ? 4 : 5;
  if (id.level < 1 || id.level > top) {
    throw ConfigError("invalid Grad-CAM layer level " + std::to_string(id.level));
  }
}

template <class T>
const Tensor<T>& pick(const Trace<T>& trace, LayerId id) {
  switch (id.site) {
    case Site::EncoderBlock:
      return trace.encoder_block[id.level - 1];
    case Site::EncoderCbam:
      return trace.encoder_cbam[id.level - 1];
    case Site::DecoderBlock:
      break;
  }
  return trace.decoder_block[id.level - 1];
}

template <class T>
SaliencyMap describe(const UNet<T>& model, LayerId id) {
  SaliencyMap m;
  m.layer = id;
  const bool dec = id.site == Site::DecoderBlock;
  m.level = (dec ? "dec" : "enc") + std::to_string(id.level);
  if (id.site == Site::EncoderCbam) {
    m.block = "cbam";
  } else {
    const auto& block = dec ? model.decoder_block(id.level - 1) : model.encoder_block(id.level - 1);
    m.block = std::string(nn::block_kind_name(block.kind()));
  }
  return m;
}

// Forward in eval mode plus backward of the target scalar on a private tape
// that never touches leaf gradients.
template <class T>
Trace<T> capture(UNet<T>& model, const Tensor<T>& input, const Target& target, Tape<T>& tape) {
  if (input.shape().n != 1) throw ShapeError("Grad-CAM expects a single sample, got " + input.shape().str());
  Trace<T> trace;
  TapeScope<T> scope(tape);
  const auto out = model.forward(input, Mode::Eval, &trace);
  Tensor<T> y;
  if (target.kind == Target::Kind::PredictionMean) {
    y = ops::mean(out.prediction);
  } else {
    const Shape& s = out.prediction.shape();
    if (static_cast<std::int64_t>(target.mask.size()) != s.plane()) {
      throw ShapeError("Grad-CAM mask must match the prediction plane");
    }
    Tensor<T> mask(s);
    std::int64_t inside = 0;
    auto md = mask.mutable_data();
    for (std::size_t i = 0; i < target.mask.size(); ++i) {
      md[i] = target.mask[i] ? T(1) : T(0);
      inside += target.mask[i] ? 1 : 0;
    }
    // An empty mask gives a zero target, hence zero gradients and blank maps.
    y = ops::scale(ops::sum(ops::mul(out.prediction, mask)),
                   inside > 0 ? T(1) / static_cast<T>(inside) : T(0));
  }
  tape.backward(y);
  return trace;
}

}  // namespace

template <class T>
std::vector<double> class_activation_map(const Tensor<T>& activation, std::span<const T> gradient,
                                         std::int64_t out_h, std::int64_t out_w) {
  const Shape& s = activation.shape();
  const std::int64_t plane = s.plane();
  const auto a = activation.data();
  if (!gradient.empty() && gradient.size() != a.size()) {
    throw ShapeError("Grad-CAM gradient does not match its activation");
  }
  std::vector<double> cam(static_cast<std::size_t>(plane), 0.0);
  if (!gradient.empty()) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      double alpha = 0.0;
      for (std::int64_t p = 0; p < plane; ++p) alpha += static_cast<double>(gradient[c * plane + p]);
      alpha /= static_cast<double>(plane);
      if (alpha == 0.0) continue;
      for (std::int64_t p = 0; p < plane; ++p) cam[p] += alpha * static_cast<double>(a[c * plane + p]);
    }
  }
  for (double& v : cam) v = std::max(v, 0.0);
  const auto [lo, hi] = std::minmax_element(cam.begin(), cam.end());
  const double low = *lo, range = *hi - *lo;
  for (double& v : cam) v = range > 0.0 ? (v - low) / range : 0.0;

  std::int64_t h = s.h, w = s.w;
  if (h == out_h && w == out_w) return cam;
  Tensor<double> grid(Shape{1, 1, h, w}, std::move(cam));
  NoGradScope<double> no_grad;
  while (h < out_h || w < out_w) {
    grid = ops::upsample_bilinear2(grid);
    h *= 2;
    w *= 2;
  }
  if (h != out_h || w != out_w) {
    throw ShapeError("Grad-CAM output size is not a power-of-two multiple of the layer size");
  }
  return std::vector<double>(grid.data().begin(), grid.data().end());
}

template <class T>
SaliencyMap gradcam(UNet<T>& model, const Tensor<T>& input, LayerId layer, const Target& target) {
  check_layer(layer);
  Tape<T> tape({.leaf_gradients = false});
  const Trace<T> trace = capture(model, input, target, tape);
  SaliencyMap m = describe(model, layer);
  const Tensor<T>& a = pick(trace, layer);
  m.height = input.shape().h;
  m.width = input.shape().w;
  m.values = class_activation_map(a, a.grad(), m.height, m.width);
  return m;
}

template <class T>
std::vector<SaliencyMap> gradcam_sweep(UNet<T>& model, const Tensor<T>& input,
                                       const Target& target) {
  Tape<T> tape({.leaf_gradients = false});
  const Trace<T> trace = capture(model, input, target, tape);
  std::vector<SaliencyMap> maps;
  for (LayerId id : all_layers()) {
    SaliencyMap m = describe(model, id);
    const Tensor<T>& a = pick(trace, id);
    m.height = input.shape().h;
    m.width = input.shape().w;
    m.values = class_activation_map(a, a.grad(), m.height, m.width);
    maps.push_back(std::move(m));
  }
  return maps;
}

std::vector<std::filesystem::path> write_gradcam(const std::filesystem::path& dir,
                                                 std::string_view variant,
                                                 const std::vector<SaliencyMap>& maps) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  const std::string v(variant);
  for (const auto& m : maps) {
    const std::string stem = "gradcam_" + v + "_" + m.level + "_" + m.block;
    written.push_back(dir / (stem + ".pgm"));
    image::write_pgm(written.back(), m.height, m.width, m.values);
    written.push_back(dir / (stem + ".png"));
    image::write_png_heatmap(written.back(), m.height, m.width, m.values);
  }
  if (maps.empty()) return written;

  // Contact sheet: row 0 encoder blocks, row 1 encoder CBAM, row 2 decoder.
  const std::int64_t tile_h = maps.front().height, tile_w = maps.front().width, gap = 2;
  const std::int64_t cols = 5, rows = 3;
  const std::int64_t H = rows * tile_h + (rows + 1) * gap;
  const std::int64_t W = cols * tile_w + (cols + 1) * gap;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(H * W * 3), 255);
  for (const auto& m : maps) {
    if (m.height != tile_h || m.width != tile_w) throw ShapeError("contact sheet needs equal map sizes");
    const std::int64_t row = m.layer.site == Site::EncoderBlock  ? 0
                             : m.layer.site == Site::EncoderCbam ? 1
                                                                 : 2;
    const std::int64_t col = m.layer.level - 1;
    const std::int64_t y0 = gap + row * (tile_h + gap), x0 = gap + col * (tile_w + gap);
    for (std::int64_t r = 0; r < tile_h; ++r) {
      for (std::int64_t c = 0; c < tile_w; ++c) {
        const auto px = image::colormap(m.values[static_cast<std::size_t>(r * tile_w + c)]);
        std::copy(px.begin(), px.end(), rgb.begin() + ((y0 + r) * W + x0 + c) * 3);
      }
    }
  }
  written.push_back(dir / ("gradcam_sheet_" + v + ".png"));
  image::write_png_rgb(written.back(), H, W, rgb);
  return written;
}

template <class T>
EmbeddingExport export_embedding_inputs(UNet<T>& model, const Tensor<T>& batch,
                                        const std::filesystem::path& dir) {
  if (!model.has_vq()) {
    throw ConfigError("variant " + std::string(variant_name(model.config().variant)) +
                      " has no VQ bottleneck to export");
  }
  Trace<T> trace;
  {
    NoGradScope<T> no_grad;
    model.forward(batch, Mode::Eval, &trace);
  }
  const auto assigned = vq::inference_quantize(trace.bottleneck, model.codebook());
  std::filesystem::create_directories(dir);
  EmbeddingExport e;
  e.codebook_csv = dir / "codebook.csv";
  e.assignments_csv = dir / "assignments.csv";
  vq::write_codebook_csv(e.codebook_csv, model.codebook());
  vq::write_assignments_csv<T>(e.assignments_csv, trace.bottleneck, assigned.indices);
  e.vector_rows = static_cast<std::int64_t>(assigned.indices.size());
  e.codeword_rows = model.codebook().size();
  return e;
}

#define NOWCAST_INSTANTIATE_EXPLAIN(T)                                                        \
  template std::vector<double> class_activation_map(const Tensor<T>&, std::span<const T>,     \
                                                    std::int64_t, std::int64_t);              \
  template SaliencyMap gradcam(UNet<T>&, const Tensor<T>&, LayerId, const Target&);           \
  template std::vector<SaliencyMap> gradcam_sweep(UNet<T>&, const Tensor<T>&, const Target&); \
  template EmbeddingExport export_embedding_inputs(UNet<T>&, const Tensor<T>&,                \
                                                   const std::filesystem::path&);

NOWCAST_INSTANTIATE_EXPLAIN(float)
NOWCAST_INSTANTIATE_EXPLAIN(double)

}  // namespace nowcast::explain
