#include "nowcast/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>

#include "nowcast/error.hpp"

namespace nowcast::image {

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void check_size(std::int64_t h, std::int64_t w, std::size_t n, std::size_t channels) {
  if (h < 1 || w < 1 || n != static_cast<std::size_t>(h * w) * channels) {
    throw ShapeError("image buffer does not match " + std::to_string(h) + "x" + std::to_string(w));
  }
}

}  // namespace

void write_pgm(const std::filesystem::path& path, std::int64_t height, std::int64_t width,
               std::span<const double> values) {
  check_size(height, width, values.size(), 1);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "P5\n" << width << ' ' << height << "\n255\n";
  std::vector<char> bytes(values.size());
  std::transform(values.begin(), values.end(), bytes.begin(),
                 [](double v) { return static_cast<char>(to_byte(v)); });
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::int64_t& height,
                                   std::int64_t& width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string magic;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P5" || maxval != 255 || width < 1 || height < 1) {
    throw FormatError("unsupported PGM header in '" + path.string() + "'");
  }
  in.get();
  std::vector<std::uint8_t> px(static_cast<std::size_t>(width * height));
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (in.gcount() != static_cast<std::streamsize>(px.size())) {
    throw FormatError("PGM payload truncated");
  }
  return px;
}

std::array<std::uint8_t, 3> colormap(double t) {
  // Anchor colours sampled from viridis at t = 0, 0.25, 0.5, 0.75, 1.
  static constexpr double anchors[5][3] = {
      {0.267, 0.005, 0.329}, {0.229, 0.322, 0.546}, {0.128, 0.567, 0.551},
      {0.369, 0.789, 0.383}, {0.993, 0.906, 0.144},
  };
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
  const double pos = t * 4.0;
  const int i = std::min(3, static_cast<int>(pos));
  const double f = pos - i;
  std::array<std::uint8_t, 3> rgb{};
  for (int k = 0; k < 3; ++k) rgb[k] = to_byte(anchors[i][k] + f * (anchors[i + 1][k] - anchors[i][k]));
  return rgb;
}

void write_png_rgb(const std::filesystem::path& path, std::int64_t height, std::int64_t width,
                   std::span<const std::uint8_t> rgb) {
  check_size(height, width, rgb.size(), 3);
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed while writing '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::int64_t r = 0; r < height; ++r) {
    png_write_row(png, const_cast<png_bytep>(rgb.data() + r * width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_png_heatmap(const std::filesystem::path& path, std::int64_t height,
                       std::int64_t width, std::span<const double> values) {
  check_size(height, width, values.size(), 1);
  std::vector<std::uint8_t> rgb;
  rgb.reserve(values.size() * 3);
  for (double v : values) {
    const auto c = colormap(v);
    rgb.insert(rgb.end(), c.begin(), c.end());
  }
  write_png_rgb(path, height, width, rgb);
}

}  // namespace nowcast::image
