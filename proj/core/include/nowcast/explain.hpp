#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nowcast/model.hpp"

namespace nowcast::explain {

enum class Site { EncoderBlock, EncoderCbam, DecoderBlock };

struct LayerId {
  Site site = Site::EncoderBlock;
  int level = 1;  // 1..5 for encoder sites, 1..4 for decoder stages
};

/// The 14 hook points in sweep order: encoder blocks 1-5, encoder CBAM 1-5,
/// decoder blocks 1-4.
std::vector<LayerId> all_layers();

struct Target {
  enum class Kind { PredictionMean, MaskMean };
  Kind kind = Kind::PredictionMean;
  /// (H, W) mask at input resolution, used by MaskMean; nonzero = inside.
  std::vector<std::uint8_t> mask;
};

struct SaliencyMap {
  LayerId layer;
  std::string level;  // "enc3", "dec1", ...
  std::string block;  // "dsc", "mixconv" or "cbam"
  std::int64_t height = 0, width = 0;
  std::vector<double> values;  // row-major, in [0, 1]
};

/// Core Grad-CAM arithmetic on sample 0 of an activation/gradient pair:
/// alpha_c = spatial mean of the gradient, ReLU(sum_c alpha_c A_c), min-max
/// normalisation (a flat map becomes all zeros), bilinear x2 steps up to
/// (out_h, out_w). An empty gradient span counts as zero.
template <class T>
std::vector<double> class_activation_map(const Tensor<T>& activation, std::span<const T> gradient,
                                         std::int64_t out_h, std::int64_t out_w);

/// input must be (1, in_frames, S, S). ConfigError on an invalid layer id.
/// Model weights, buffers and gradients are left untouched.
template <class T>
SaliencyMap gradcam(UNet<T>& model, const Tensor<T>& input, LayerId layer,
                    const Target& target = {});

template <class T>
std::vector<SaliencyMap> gradcam_sweep(UNet<T>& model, const Tensor<T>& input,
                                       const Target& target = {});

/// gradcam_<variant>_<level>_<block>.pgm/.png per map plus
/// gradcam_sheet_<variant>.png. Returns the files written.
std::vector<std::filesystem::path> write_gradcam(const std::filesystem::path& dir,
                                                 std::string_view variant,
                                                 const std::vector<SaliencyMap>& maps);

struct EmbeddingExport {
  std::filesystem::path codebook_csv;
  std::filesystem::path assignments_csv;
  std::int64_t vector_rows = 0;
  std::int64_t codeword_rows = 0;
};

/// Pre-quantization bottleneck vectors with their codeword index, plus the
/// codebook. ConfigError for variants without VQ.
template <class T>
EmbeddingExport export_embedding_inputs(UNet<T>& model, const Tensor<T>& batch,
                                        const std::filesystem::path& dir);

}  // namespace nowcast::explain
