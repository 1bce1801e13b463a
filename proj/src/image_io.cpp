#include <cctype>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>

#include <png.h>
#include <tiffio.h>

#include "mseg/errors.hpp"
#include "mseg/image.hpp"

namespace mseg {
namespace {

namespace fs = std::filesystem;

bool has_tiff_extension(const std::string& path) {
  auto ext = fs::path(path).extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return ext == ".tif" || ext == ".tiff";
}

[[noreturn]] void unreadable(const std::string& path, const std::string& why) {
  throw DataError(DataErrorKind::unreadable_image, "cannot read image " + path + ": " + why);
}

void require_exists(const std::string& path) {
  if (!fs::exists(path)) throw DataError(DataErrorKind::missing_file, "file not found: " + path);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Drops alpha: 2 -> 1 channel, 4 -> 3 channels.
void strip_alpha(RawImage& img) {
  if (img.channels.size() == 2 || img.channels.size() == 4) img.channels.pop_back();
}

RawImage read_png(const std::string& path, bool header_only) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) unreadable(path, "open failed");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) unreadable(path, "not a PNG");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    unreadable(path, "libpng init failed");
  }
  RawImage out;
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    unreadable(path, "corrupt PNG data");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_uint_32 width = png_get_image_width(png, info);
  const png_uint_32 height = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  depth = png_get_bit_depth(png, info);
  const int channels = png_get_channels(png, info);

  out.bit_depth = depth;
  if (header_only) {
    out.channels.assign(1, Image<std::uint16_t>(height, width));
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
  }
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * height);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  out.channels.assign(static_cast<std::size_t>(channels), Image<std::uint16_t>(height, width));
  const int bytes_per_sample = depth == 16 ? 2 : 1;
  for (png_uint_32 y = 0; y < height; ++y)
    for (png_uint_32 x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c) {
        const png_byte* s = rows[y] + (x * channels + c) * bytes_per_sample;
        out.channels[static_cast<std::size_t>(c)](y, x) =
            depth == 16 ? static_cast<std::uint16_t>((s[0] << 8) | s[1]) : s[0];
      }
  strip_alpha(out);
  return out;
}

struct TiffCloser {
  void operator()(TIFF* t) const {
    if (t) TIFFClose(t);
  }
};
using TiffPtr = std::unique_ptr<TIFF, TiffCloser>;

RawImage read_tiff(const std::string& path, bool header_only) {
  TIFFSetWarningHandler(nullptr);
  TiffPtr tif(TIFFOpen(path.c_str(), "r"));
  if (!tif) unreadable(path, "not a TIFF");
  std::uint32_t width = 0, height = 0;
  std::uint16_t bits = 8, spp = 1, planar = PLANARCONFIG_CONTIG, format = SAMPLEFORMAT_UINT;
  TIFFGetField(tif.get(), TIFFTAG_IMAGEWIDTH, &width);
  TIFFGetField(tif.get(), TIFFTAG_IMAGELENGTH, &height);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_BITSPERSAMPLE, &bits);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLESPERPIXEL, &spp);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_PLANARCONFIG, &planar);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLEFORMAT, &format);
  if ((bits != 8 && bits != 16) || format != SAMPLEFORMAT_UINT)
    unreadable(path, "only 8/16-bit unsigned TIFF is supported");
  if (planar != PLANARCONFIG_CONTIG) unreadable(path, "planar TIFF layouts are not supported");

  RawImage out;
  out.bit_depth = bits;
  if (header_only) {
    out.channels.assign(1, Image<std::uint16_t>(height, width));
    return out;
  }
  out.channels.assign(spp, Image<std::uint16_t>(height, width));
  std::vector<std::uint8_t> line(static_cast<std::size_t>(TIFFScanlineSize(tif.get())));
  for (std::uint32_t y = 0; y < height; ++y) {
    if (TIFFReadScanline(tif.get(), line.data(), y) < 0) unreadable(path, "scanline read failed");
    for (std::uint32_t x = 0; x < width; ++x)
      for (std::uint16_t c = 0; c < spp; ++c) {
        const std::size_t i = static_cast<std::size_t>(x) * spp + c;
        std::uint16_t v;
        if (bits == 16) std::memcpy(&v, line.data() + 2 * i, 2);
        else v = line[i];
        out.channels[c](y, x) = v;
      }
  }
  strip_alpha(out);
  return out;
}

void write_png_channels(const std::string& path, const std::vector<const Image<std::uint8_t>*>& planes) {
  const auto h = static_cast<png_uint_32>(planes[0]->rows());
  const auto w = static_cast<png_uint_32>(planes[0]->cols());
  const int nc = static_cast<int>(planes.size());
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng init failed for " + path);
  }
  std::vector<png_byte> row(static_cast<std::size_t>(w) * nc);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("PNG encoding failed for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, w, h, 8, nc == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (png_uint_32 y = 0; y < h; ++y) {
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < nc; ++c) row[x * nc + c] = (*planes[static_cast<std::size_t>(c)])(y, x);
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

RawImage read_image(const std::string& path) {
  require_exists(path);
  return has_tiff_extension(path) ? read_tiff(path, false) : read_png(path, false);
}

std::pair<int, int> read_image_size(const std::string& path) {
  require_exists(path);
  RawImage hdr = has_tiff_extension(path) ? read_tiff(path, true) : read_png(path, true);
  return {hdr.height(), hdr.width()};
}

void write_png(const std::string& path, const Image<std::uint8_t>& gray) {
  write_png_channels(path, {&gray});
}

void write_png_rgb(const std::string& path, const Image<std::uint8_t>& r, const Image<std::uint8_t>& g,
                   const Image<std::uint8_t>& b) {
  write_png_channels(path, {&r, &g, &b});
}

void write_mask_png(const std::string& path, const Mask& mask) {
  const Image<std::uint8_t> scaled = (mask != 0).select(Image<std::uint8_t>::Constant(mask.rows(), mask.cols(), 255),
                                                        Image<std::uint8_t>::Zero(mask.rows(), mask.cols()));
  write_png(path, scaled);
}

void write_gray_png(const std::string& path, const ImageF& image) {
  const Image<std::uint8_t> q =
      (image.cwiseMax(0.0f).cwiseMin(1.0f) * 255.0f + 0.5f).floor().cast<std::uint8_t>();
  write_png(path, q);
}

void write_float_tiff(const std::string& path, const std::vector<ImageF>& pages) {
  TiffPtr tif(TIFFOpen(path.c_str(), "w"));
  if (!tif) throw std::runtime_error("cannot open " + path + " for writing");
  for (std::size_t p = 0; p < pages.size(); ++p) {
    const ImageF& img = pages[p];
    TIFFSetField(tif.get(), TIFFTAG_IMAGEWIDTH, static_cast<std::uint32_t>(img.cols()));
    TIFFSetField(tif.get(), TIFFTAG_IMAGELENGTH, static_cast<std::uint32_t>(img.rows()));
    TIFFSetField(tif.get(), TIFFTAG_BITSPERSAMPLE, 32);
    TIFFSetField(tif.get(), TIFFTAG_SAMPLESPERPIXEL, 1);
    TIFFSetField(tif.get(), TIFFTAG_SAMPLEFORMAT, SAMPLEFORMAT_IEEEFP);
    TIFFSetField(tif.get(), TIFFTAG_PLANARCONFIG, PLANARCONFIG_CONTIG);
    TIFFSetField(tif.get(), TIFFTAG_PHOTOMETRIC, PHOTOMETRIC_MINISBLACK);
    TIFFSetField(tif.get(), TIFFTAG_ROWSPERSTRIP, 1);
    TIFFSetField(tif.get(), TIFFTAG_SUBFILETYPE, FILETYPE_PAGE);
    TIFFSetField(tif.get(), TIFFTAG_PAGENUMBER, static_cast<std::uint16_t>(p),
                 static_cast<std::uint16_t>(pages.size()));
    std::vector<float> row(static_cast<std::size_t>(img.cols()));
    for (Eigen::Index y = 0; y < img.rows(); ++y) {
      for (Eigen::Index x = 0; x < img.cols(); ++x) row[static_cast<std::size_t>(x)] = img(y, x);
      if (TIFFWriteScanline(tif.get(), row.data(), static_cast<std::uint32_t>(y), 0) < 0)
        throw std::runtime_error("TIFF write failed for " + path);
    }
    TIFFWriteDirectory(tif.get());
  }
}

std::vector<ImageF> read_float_tiff(const std::string& path) {
  require_exists(path);
  TIFFSetWarningHandler(nullptr);
  TiffPtr tif(TIFFOpen(path.c_str(), "r"));
  if (!tif) unreadable(path, "not a TIFF");
  std::vector<ImageF> pages;
  do {
    std::uint32_t width = 0, height = 0;
    std::uint16_t bits = 0, format = 0;
    TIFFGetField(tif.get(), TIFFTAG_IMAGEWIDTH, &width);
    TIFFGetField(tif.get(), TIFFTAG_IMAGELENGTH, &height);
    TIFFGetFieldDefaulted(tif.get(), TIFFTAG_BITSPERSAMPLE, &bits);
    TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLEFORMAT, &format);
    if (bits != 32 || format != SAMPLEFORMAT_IEEEFP) unreadable(path, "not a 32-bit float TIFF");
    ImageF img(height, width);
    std::vector<float> row(width);
    for (std::uint32_t y = 0; y < height; ++y) {
      if (TIFFReadScanline(tif.get(), row.data(), y) < 0) unreadable(path, "scanline read failed");
      for (std::uint32_t x = 0; x < width; ++x) img(y, x) = row[x];
    }
    pages.push_back(std::move(img));
  } while (TIFFReadDirectory(tif.get()));
  return pages;
}

}  // namespace mseg
