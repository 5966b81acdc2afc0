#include "kgan/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include <png.h>

#include "kgan/error.hpp"

namespace kgan {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

ImageU8 read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw SourceError("cannot open " + path.string());

  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw SourceError("not a PNG file: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw SourceError("libpng initialisation failed");
  }
  ImageU8 image;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw SourceError("corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_read_update_info(png, info);

  image.height = static_cast<int>(png_get_image_height(png, info));
  image.width = static_cast<int>(png_get_image_width(png, info));
  image.channels = png_get_channels(png, info);
  image.data.resize(static_cast<std::size_t>(image.height) * image.width * image.channels);
  rows.resize(image.height);
  for (int y = 0; y < image.height; ++y)
    rows[y] = image.data.data() + static_cast<std::size_t>(y) * image.width * image.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

void write_png(const std::filesystem::path& path, const ImageU8& image) {
  int color_type;
  switch (image.channels) {
    case 1: color_type = PNG_COLOR_TYPE_GRAY; break;
    case 2: color_type = PNG_COLOR_TYPE_GRAY_ALPHA; break;
    case 3: color_type = PNG_COLOR_TYPE_RGB; break;
    case 4: color_type = PNG_COLOR_TYPE_RGB_ALPHA; break;
    default: throw ShapeError("write_png: unsupported channel count");
  }
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw Error("cannot write " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng initialisation failed");
  }
  std::vector<png_bytep> rows(image.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, image.width, image.height, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y)
    rows[y] = const_cast<png_bytep>(image.data.data() +
                                    static_cast<std::size_t>(y) * image.width * image.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

ImageU8 resize_bilinear(const ImageU8& src, int height, int width) {
  if (src.empty() || height <= 0 || width <= 0) throw ShapeError("resize_bilinear: empty image");
  ImageU8 dst(height, width, src.channels);
  const double sy = static_cast<double>(src.height) / height;
  const double sx = static_cast<double>(src.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        const double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
        const double bot = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
        dst.at(y, x, c) = static_cast<std::uint8_t>(std::lround(top * (1 - wy) + bot * wy));
      }
    }
  }
  return dst;
}

ImageU8 resize_area(const ImageU8& src, int height, int width) {
  if (src.empty() || height <= 0 || width <= 0) throw ShapeError("resize_area: empty image");
  ImageU8 dst(height, width, src.channels);
  const double sy = static_cast<double>(src.height) / height;
  const double sx = static_cast<double>(src.width) / width;
  std::vector<double> acc(src.channels);
  for (int y = 0; y < height; ++y) {
    const double y_lo = y * sy, y_hi = (y + 1) * sy;
    for (int x = 0; x < width; ++x) {
      const double x_lo = x * sx, x_hi = (x + 1) * sx;
      std::fill(acc.begin(), acc.end(), 0.0);
      double total = 0;
      for (int iy = static_cast<int>(y_lo); iy < std::min<double>(std::ceil(y_hi), src.height); ++iy) {
        const double wy = std::min<double>(iy + 1, y_hi) - std::max<double>(iy, y_lo);
        if (wy <= 0) continue;
        for (int ix = static_cast<int>(x_lo); ix < std::min<double>(std::ceil(x_hi), src.width); ++ix) {
          const double wx = std::min<double>(ix + 1, x_hi) - std::max<double>(ix, x_lo);
          if (wx <= 0) continue;
          for (int c = 0; c < src.channels; ++c) acc[c] += wy * wx * src.at(iy, ix, c);
          total += wy * wx;
        }
      }
      for (int c = 0; c < src.channels; ++c)
        dst.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(acc[c] / total, 0.0, 255.0)));
    }
  }
  return dst;
}

ImageU8 crop(const ImageU8& src, int y, int x, int height, int width) {
  if (y < 0 || x < 0 || y + height > src.height || x + width > src.width)
    throw ShapeError("crop window outside image");
  ImageU8 dst(height, width, src.channels);
  for (int r = 0; r < height; ++r)
    std::copy_n(&src.data[(static_cast<std::size_t>(y + r) * src.width + x) * src.channels],
                static_cast<std::size_t>(width) * src.channels,
                &dst.data[static_cast<std::size_t>(r) * width * src.channels]);
  return dst;
}

ImageU8 center_crop(const ImageU8& src, int height, int width) {
  return crop(src, (src.height - height) / 2, (src.width - width) / 2, height, width);
}

ImageU8 to_rgb(const ImageU8& src) {
  if (src.channels == 3) return src;
  ImageU8 dst(src.height, src.width, 3);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x)
      for (int c = 0; c < 3; ++c)
        dst.at(y, x, c) = src.channels < 3 ? src.at(y, x, 0) : src.at(y, x, c);
  return dst;
}

torch::Tensor to_tensor(const ImageU8& image) {
  auto hwc = torch::from_blob(const_cast<std::uint8_t*>(image.data.data()),
                              {image.height, image.width, image.channels}, torch::kUInt8);
  return hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

torch::Tensor to_batch_tensor(std::span<const ImageU8* const> images) {
  std::vector<torch::Tensor> parts;
  parts.reserve(images.size());
  for (const auto* im : images) parts.push_back(to_tensor(*im));
  return torch::stack(parts);
}

ImageU8 from_tensor(const torch::Tensor& chw) {
  if (chw.dim() != 3) throw ShapeError("from_tensor expects [C,H,W]");
  auto hwc = chw.detach().to(torch::kCPU, torch::kFloat32).clamp(0, 1).mul(255.0).round()
                 .to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  ImageU8 out(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)),
              static_cast<int>(hwc.size(2)));
  std::copy_n(hwc.data_ptr<std::uint8_t>(), out.data.size(), out.data.begin());
  return out;
}

ImageU8 tile(std::span<const ImageU8> images, int columns, int padding, std::uint8_t pad_value) {
  if (images.empty()) return {};
  const int h = images[0].height, w = images[0].width, c = images[0].channels;
  columns = std::max(1, std::min<int>(columns, static_cast<int>(images.size())));
  const int rows = (static_cast<int>(images.size()) + columns - 1) / columns;
  ImageU8 out(rows * h + (rows + 1) * padding, columns * w + (columns + 1) * padding, c, pad_value);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& im = images[i];
    if (im.height != h || im.width != w || im.channels != c) throw ShapeError("tile: mixed sizes");
    const int oy = padding + static_cast<int>(i) / columns * (h + padding);
    const int ox = padding + static_cast<int>(i) % columns * (w + padding);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch) out.at(oy + y, ox + x, ch) = im.at(y, x, ch);
  }
  return out;
}

}  // namespace kgan
