#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace mseg {

using Index = Eigen::Index;

template <typename Scalar>
using Image = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using ImageF = Image<float>;
using ImageD = Image<double>;
/// Binary label plane, values 0/1.
using Mask = Image<std::uint8_t>;

/// Decoded file contents before any preprocessing: raw integer samples per channel.
struct RawImage {
  int bit_depth = 8;
  std::vector<Image<std::uint16_t>> channels;

  int height() const { return channels.empty() ? 0 : static_cast<int>(channels[0].rows()); }
  int width() const { return channels.empty() ? 0 : static_cast<int>(channels[0].cols()); }
  double max_value() const { return static_cast<double>((1u << bit_depth) - 1u); }
};

/// Reads 8/16-bit PNG or TIFF (by extension). Alpha channels are dropped.
RawImage read_image(const std::string& path);

/// Reads only the header to obtain (height, width).
std::pair<int, int> read_image_size(const std::string& path);

void write_png(const std::string& path, const Image<std::uint8_t>& gray);
void write_png_rgb(const std::string& path, const Image<std::uint8_t>& r, const Image<std::uint8_t>& g,
                   const Image<std::uint8_t>& b);
/// Writes a mask with foreground 255 and background 0.
void write_mask_png(const std::string& path, const Mask& mask);
/// Quantizes a [0,1] image to 8 bits.
void write_gray_png(const std::string& path, const ImageF& image);

/// Multi-page 32-bit float TIFF, one page per plane.
void write_float_tiff(const std::string& path, const std::vector<ImageF>& pages);
std::vector<ImageF> read_float_tiff(const std::string& path);

}  // namespace mseg
