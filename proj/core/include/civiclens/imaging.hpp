#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "civiclens/types.hpp"

namespace civiclens::imaging {

enum class ValueDomain { Byte, Unit };

/// Row-major, channel-interleaved raster. Byte-domain images hold integral
/// values in [0, 255]; unit-domain images hold reals in [0, 1].
struct RasterImage {
  int width = 0;
  int height = 0;
  int channels = 3;
  ValueDomain domain = ValueDomain::Unit;
  std::vector<double> pixels;

  RasterImage() = default;
  RasterImage(int w, int h, int c, ValueDomain d, double fill = 0.0);

  std::size_t index(int x, int y, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& at(int x, int y, int c) noexcept { return pixels[index(x, y, c)]; }
  double at(int x, int y, int c) const noexcept { return pixels[index(x, y, c)]; }

  bool empty() const noexcept { return width <= 0 || height <= 0; }
  double mean() const noexcept;

  /// Throws Error(InvalidImage) if the length or value-domain invariant fails.
  void validate() const;

  friend bool operator==(const RasterImage&, const RasterImage&) = default;
};

/// Rotation by quarter turns (clockwise), flips, then a centered zoom-in.
struct AugmentSpec {
  int quarter_turns = 0;
  bool flip_horizontal = false;
  bool flip_vertical = false;
  double zoom_factor = 1.0;

  bool is_identity() const noexcept {
    return quarter_turns % 4 == 0 && !flip_horizontal && !flip_vertical && zoom_factor == 1.0;
  }
};

inline constexpr int kStandardSize = 256;

/// Center-crop to the largest centered square, then bilinear resample
/// (half-pixel centers, edge clamped) to target x target.
RasterImage resize_to_standard(const RasterImage& img, int target = kStandardSize);

/// Bilinear resample to an arbitrary size without cropping.
RasterImage resample_bilinear(const RasterImage& img, int out_width, int out_height);

/// Byte -> unit (v / 255). Unit input is returned unchanged with a warning.
RasterImage normalize(const RasterImage& img);

/// Unit -> byte, rounding to nearest.
RasterImage denormalize(const RasterImage& img);

/// Discrete Gaussian of radius ceil(3 sigma), renormalized to unit sum.
std::vector<double> gaussian_kernel(double sigma);

/// Separable Gaussian blur with edge replication; unit-domain input only.
RasterImage gaussian_blur(const RasterImage& img, double sigma);

std::pair<RasterImage, std::vector<GroundTruthRegion>> augment(
    const RasterImage& img, const AugmentSpec& spec,
    std::span<const GroundTruthRegion> truth);

/// Box mapping applied by augment; nullopt when zoom crops the box away.
std::optional<BoundingBox> augment_box(const BoundingBox& box, int size, const AugmentSpec& spec);

/// (x, y, r, g, b) per pixel in row-major order; RGB only.
std::vector<double> encode_pixel_tuples(const RasterImage& img);

/// Rec. 601 luma; grayscale input is returned as-is.
RasterImage to_grayscale(const RasterImage& img);

/// Copies the pixels inside box. Throws Error(InvalidParameter) if box does not fit.
RasterImage crop(const RasterImage& img, const BoundingBox& box);

/// Standard training/serving preprocessing: normalize (if byte), standardize,
/// then blur with the given sigma (skipped when sigma <= 0).
RasterImage preprocess(const RasterImage& img, int target = kStandardSize, double blur_sigma = 1.0);

/// Gray-world exposure correction: scales all channels so the median luma
/// lands on target_median, with the gain clamped to [1/max_gain, max_gain].
/// Unit domain in and out; black frames come back unchanged.
RasterImage equalize_exposure(const RasterImage& img, double target_median = 0.5, double max_gain = 4.0);

// ---- Netpbm interchange (P6 RGB / P5 gray, 8-bit) ----

RasterImage decode_pnm(std::span<const std::uint8_t> bytes);
RasterImage read_pnm(const std::filesystem::path& path);

/// Unit-domain images are quantized with denormalize().
std::vector<std::uint8_t> encode_pnm(const RasterImage& img);
void write_pnm(const std::filesystem::path& path, const RasterImage& img);

}  // namespace civiclens::imaging
