#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace nowcast::image {

/// 8-bit binary PGM (P5). Values are clamped to [0, 1] and scaled to 0..255.
void write_pgm(const std::filesystem::path& path, std::int64_t height, std::int64_t width,
               std::span<const double> values);

/// Viridis-like ramp, t clamped to [0, 1].
std::array<std::uint8_t, 3> colormap(double t);

/// Interleaved 8-bit RGB, written through libpng.
void write_png_rgb(const std::filesystem::path& path, std::int64_t height, std::int64_t width,
                   std::span<const std::uint8_t> rgb);

/// Colormapped heatmap PNG of a [0, 1] field.
void write_png_heatmap(const std::filesystem::path& path, std::int64_t height,
                       std::int64_t width, std::span<const double> values);

/// Reads back an 8-bit P5 file; used by tests and tools.
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::int64_t& height,
                                   std::int64_t& width);

}  // namespace nowcast::image
