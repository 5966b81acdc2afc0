#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <torch/torch.h>

namespace kgan {

/// Interleaved 8-bit image, row-major, `channels` values per pixel.
struct ImageU8 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;

  ImageU8() = default;
  ImageU8(int h, int w, int c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  std::uint8_t& at(int y, int x, int ch = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + ch];
  }
  std::uint8_t at(int y, int x, int ch = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + ch];
  }
  bool empty() const { return data.empty(); }
  bool operator==(const ImageU8&) const = default;
};

ImageU8 read_png(const std::filesystem::path& path);

/// Writes 1 (gray), 3 (RGB) or 4 (RGBA) channel images.
void write_png(const std::filesystem::path& path, const ImageU8& image);

/// Bilinear resampling with pixel-center alignment.
ImageU8 resize_bilinear(const ImageU8& src, int height, int width);

/// Box-filter (area-average) resampling; exact for integer downscale factors.
ImageU8 resize_area(const ImageU8& src, int height, int width);

ImageU8 center_crop(const ImageU8& src, int height, int width);

ImageU8 crop(const ImageU8& src, int y, int x, int height, int width);

/// Drops/duplicates channels: gray->RGB by replication, RGBA->RGB by dropping alpha.
ImageU8 to_rgb(const ImageU8& src);

/// [C,H,W] float tensor in [0,1].
torch::Tensor to_tensor(const ImageU8& image);

/// Stacks RGB images into [N,3,H,W] float in [0,1].
torch::Tensor to_batch_tensor(std::span<const ImageU8* const> images);

/// Inverse of to_tensor; values are clamped to [0,1] and rounded.
ImageU8 from_tensor(const torch::Tensor& chw);

/// Tiles equally sized images into a grid with `columns` columns.
ImageU8 tile(std::span<const ImageU8> images, int columns, int padding = 2,
             std::uint8_t pad_value = 255);

}  // namespace kgan
