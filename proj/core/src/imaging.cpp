#include "civiclens/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <spdlog/spdlog.h>

#include "civiclens/error.hpp"

namespace civiclens::imaging {

namespace {

void require_nonempty(const RasterImage& img, const char* op) {
  if (img.empty() || img.channels < 1) {
    throw Error(ErrorCode::InvalidImage,
                std::string(op) + ": zero-dimension image (" + std::to_string(img.width) + "x" +
                    std::to_string(img.height) + ")");
  }
}

double quantize_if_byte(double v, ValueDomain d) {
  return d == ValueDomain::Byte ? std::clamp(std::round(v), 0.0, 255.0) : v;
}

}  // namespace

RasterImage::RasterImage(int w, int h, int c, ValueDomain d, double fill)
    : width(w), height(h), channels(c), domain(d),
      pixels(static_cast<std::size_t>(std::max(w, 0)) * std::max(h, 0) * std::max(c, 0), fill) {}

double RasterImage::mean() const noexcept {
  if (pixels.empty()) return 0.0;
  return std::accumulate(pixels.begin(), pixels.end(), 0.0) / static_cast<double>(pixels.size());
}

void RasterImage::validate() const {
  if (width <= 0 || height <= 0) throw Error(ErrorCode::InvalidImage, "image has zero dimension");
  if (channels != 1 && channels != 3) {
    throw Error(ErrorCode::InvalidImage, "channels must be 1 or 3, got " + std::to_string(channels));
  }
  if (pixels.size() != static_cast<std::size_t>(width) * height * channels) {
    throw Error(ErrorCode::InvalidImage, "pixel buffer length " + std::to_string(pixels.size()) +
                                             " does not match " + std::to_string(width) + "x" +
                                             std::to_string(height) + "x" + std::to_string(channels));
  }
  for (double v : pixels) {
    const bool ok = domain == ValueDomain::Unit
                        ? (v >= 0.0 && v <= 1.0)
                        : (v >= 0.0 && v <= 255.0 && v == std::floor(v));
    if (!ok) {
      throw Error(ErrorCode::InvalidImage, "pixel value " + std::to_string(v) +
                                               " outside the declared value domain");
    }
  }
}

RasterImage resample_bilinear(const RasterImage& img, int out_width, int out_height) {
  require_nonempty(img, "resample");
  if (out_width < 1 || out_height < 1) {
    throw Error(ErrorCode::InvalidParameter, "resample target must be >= 1");
  }
  RasterImage out(out_width, out_height, img.channels, img.domain);
  const double sx = static_cast<double>(img.width) / out_width;
  const double sy = static_cast<double>(img.height) / out_height;

  // Precompute the horizontal taps once per column.
  std::vector<int> x0s(out_width), x1s(out_width);
  std::vector<double> txs(out_width);
  for (int ox = 0; ox < out_width; ++ox) {
    double s = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
    x0s[ox] = static_cast<int>(std::floor(s));
    x1s[ox] = std::min(x0s[ox] + 1, img.width - 1);
    txs[ox] = s - x0s[ox];
  }
  for (int oy = 0; oy < out_height; ++oy) {
    double s = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const int y0 = static_cast<int>(std::floor(s));
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double ty = s - y0;
    for (int ox = 0; ox < out_width; ++ox) {
      const double tx = txs[ox];
      for (int c = 0; c < img.channels; ++c) {
        const double top = img.at(x0s[ox], y0, c) * (1.0 - tx) + img.at(x1s[ox], y0, c) * tx;
        const double bot = img.at(x0s[ox], y1, c) * (1.0 - tx) + img.at(x1s[ox], y1, c) * tx;
        out.at(ox, oy, c) = quantize_if_byte(top * (1.0 - ty) + bot * ty, img.domain);
      }
    }
  }
  return out;
}

RasterImage resize_to_standard(const RasterImage& img, int target) {
  require_nonempty(img, "resize_to_standard");
  if (target < 1) throw Error(ErrorCode::InvalidParameter, "resize target must be >= 1");
  const int side = std::min(img.width, img.height);
  const BoundingBox square{(img.width - side) / 2, (img.height - side) / 2, side, side};
  if (side == target && img.width == img.height) return img;
  return resample_bilinear(side == img.width && side == img.height ? img : crop(img, square), target,
                           target);
}

RasterImage normalize(const RasterImage& img) {
  if (img.domain == ValueDomain::Unit) {
    spdlog::warn("normalize: image already in unit domain; returning it unchanged");
    return img;
  }
  RasterImage out = img;
  out.domain = ValueDomain::Unit;
  for (double& v : out.pixels) v /= 255.0;
  return out;
}

RasterImage denormalize(const RasterImage& img) {
  if (img.domain == ValueDomain::Byte) return img;
  RasterImage out = img;
  out.domain = ValueDomain::Byte;
  for (double& v : out.pixels) v = std::clamp(std::round(v * 255.0), 0.0, 255.0);
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw Error(ErrorCode::InvalidParameter, "gaussian sigma must be > 0");
  }
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
  }
  const double sum = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& w : k) w /= sum;
  return k;
}

RasterImage gaussian_blur(const RasterImage& img, double sigma) {
  const std::vector<double> k = gaussian_kernel(sigma);
  require_nonempty(img, "gaussian_blur");
  if (img.domain != ValueDomain::Unit) {
    throw Error(ErrorCode::Precondition, "gaussian_blur expects a unit-domain image");
  }
  const int r = static_cast<int>(k.size() / 2);
  const int w = img.width, h = img.height, ch = img.channels;

  RasterImage tmp(w, h, ch, ValueDomain::Unit);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) {
          acc += k[i + r] * img.at(std::clamp(x + i, 0, w - 1), y, c);
        }
        tmp.at(x, y, c) = acc;
      }
    }
  }
  RasterImage out(w, h, ch, ValueDomain::Unit);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) {
          acc += k[i + r] * tmp.at(x, std::clamp(y + i, 0, h - 1), c);
        }
        // Rounding can push a saturated pixel a few ulps past 1.
        out.at(x, y, c) = std::clamp(acc, 0.0, 1.0);
      }
    }
  }
  return out;
}

namespace {

RasterImage rotate_quarter_cw(const RasterImage& img) {
  // Square input: destination (x', y') takes source (y', S-1-x').
  const int s = img.width;
  RasterImage out(s, s, img.channels, img.domain);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(y, s - 1 - x, c);
    }
  }
  return out;
}

RasterImage flip(const RasterImage& img, bool horizontal) {
  RasterImage out(img.width, img.height, img.channels, img.domain);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const int sx = horizontal ? img.width - 1 - x : x;
      const int sy = horizontal ? y : img.height - 1 - y;
      for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(sx, sy, c);
    }
  }
  return out;
}

int zoom_crop_side(int size, double zoom) {
  return std::clamp(static_cast<int>(std::lround(size / zoom)), 1, size);
}

}  // namespace

std::optional<BoundingBox> augment_box(const BoundingBox& box, int size, const AugmentSpec& spec) {
  BoundingBox b = box;
  const int turns = ((spec.quarter_turns % 4) + 4) % 4;
  for (int t = 0; t < turns; ++t) b = BoundingBox{size - b.y - b.h, b.x, b.h, b.w};
  if (spec.flip_horizontal) b.x = size - b.x - b.w;
  if (spec.flip_vertical) b.y = size - b.y - b.h;
  if (spec.zoom_factor == 1.0) return b;

  const int side = zoom_crop_side(size, spec.zoom_factor);
  const int off = (size - side) / 2;
  const int ix0 = std::max(b.x, off), iy0 = std::max(b.y, off);
  const int ix1 = std::min(b.x + b.w, off + side), iy1 = std::min(b.y + b.h, off + side);
  if (ix1 <= ix0 || iy1 <= iy0) return std::nullopt;
  const double f = static_cast<double>(size) / side;
  const int x0 = std::clamp(static_cast<int>(std::floor((ix0 - off) * f)), 0, size - 1);
  const int y0 = std::clamp(static_cast<int>(std::floor((iy0 - off) * f)), 0, size - 1);
  const int x1 = std::clamp(static_cast<int>(std::ceil((ix1 - off) * f)), x0 + 1, size);
  const int y1 = std::clamp(static_cast<int>(std::ceil((iy1 - off) * f)), y0 + 1, size);
  return BoundingBox{x0, y0, x1 - x0, y1 - y0};
}

std::pair<RasterImage, std::vector<GroundTruthRegion>> augment(
    const RasterImage& img, const AugmentSpec& spec, std::span<const GroundTruthRegion> truth) {
  require_nonempty(img, "augment");
  if (img.width != img.height) {
    throw Error(ErrorCode::InvalidImage, "augment expects a square (standardized) image");
  }
  if (!(spec.zoom_factor >= 1.0 && spec.zoom_factor <= 2.0)) {
    throw Error(ErrorCode::InvalidParameter, "zoom_factor must lie in [1, 2]");
  }
  const int size = img.width;
  for (const auto& r : truth) {
    if (!r.bbox.fits(size, size)) {
      throw Error(ErrorCode::InvalidParameter, "ground-truth box lies outside the image");
    }
  }

  RasterImage out = img;
  const int turns = ((spec.quarter_turns % 4) + 4) % 4;
  for (int t = 0; t < turns; ++t) out = rotate_quarter_cw(out);
  if (spec.flip_horizontal) out = flip(out, true);
  if (spec.flip_vertical) out = flip(out, false);
  if (spec.zoom_factor != 1.0) {
    const int side = zoom_crop_side(size, spec.zoom_factor);
    const int off = (size - side) / 2;
    out = resize_to_standard(crop(out, BoundingBox{off, off, side, side}), size);
  }

  std::vector<GroundTruthRegion> boxes;
  boxes.reserve(truth.size());
  for (const auto& r : truth) {
    if (auto b = augment_box(r.bbox, size, spec)) boxes.push_back({*b, r.cls});
  }
  return {std::move(out), std::move(boxes)};
}

std::vector<double> encode_pixel_tuples(const RasterImage& img) {
  require_nonempty(img, "encode_pixel_tuples");
  if (img.channels != 3) {
    throw Error(ErrorCode::UnsupportedEncoding, "pixel-tuple encoding needs an RGB image");
  }
  std::vector<double> seq;
  seq.reserve(static_cast<std::size_t>(img.width) * img.height * 5);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      seq.push_back(x);
      seq.push_back(y);
      for (int c = 0; c < 3; ++c) seq.push_back(img.at(x, y, c));
    }
  }
  return seq;
}

RasterImage to_grayscale(const RasterImage& img) {
  if (img.channels == 1) return img;
  RasterImage out(img.width, img.height, 1, img.domain);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double v = 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
      out.at(x, y, 0) = quantize_if_byte(v, img.domain);
    }
  }
  return out;
}

RasterImage crop(const RasterImage& img, const BoundingBox& box) {
  if (!box.fits(img.width, img.height)) {
    throw Error(ErrorCode::InvalidParameter, "crop box does not fit inside the image");
  }
  RasterImage out(box.w, box.h, img.channels, img.domain);
  const std::size_t row = static_cast<std::size_t>(box.w) * img.channels;
  for (int y = 0; y < box.h; ++y) {
    const auto src = img.pixels.begin() + static_cast<std::ptrdiff_t>(img.index(box.x, box.y + y, 0));
    std::copy(src, src + static_cast<std::ptrdiff_t>(row),
              out.pixels.begin() + static_cast<std::ptrdiff_t>(y * row));
  }
  return out;
}

RasterImage preprocess(const RasterImage& img, int target, double blur_sigma) {
  RasterImage unit = img.domain == ValueDomain::Byte ? normalize(img) : img;
  RasterImage std_img = resize_to_standard(unit, target);
  return blur_sigma > 0.0 ? gaussian_blur(std_img, blur_sigma) : std_img;
}

RasterImage equalize_exposure(const RasterImage& img, double target_median, double max_gain) {
  if (img.domain != ValueDomain::Unit) throw Error(ErrorCode::Precondition, "equalize_exposure expects unit domain");
  if (!(target_median > 0.0 && target_median <= 1.0) || !(max_gain >= 1.0)) {
    throw Error(ErrorCode::InvalidParameter, "equalize_exposure: target in (0, 1], max_gain >= 1");
  }
  auto luma = to_grayscale(img).pixels;
  if (luma.empty()) return img;
  auto mid = luma.begin() + static_cast<std::ptrdiff_t>(luma.size() / 2);
  std::nth_element(luma.begin(), mid, luma.end());
  if (*mid <= 0.0) return img;
  const double gain = std::clamp(target_median / *mid, 1.0 / max_gain, max_gain);
  RasterImage out = img;
  for (double& v : out.pixels) v = std::min(1.0, v * gain);
  return out;
}

// ---------------------------------------------------------------------------
// Netpbm

namespace {

class PnmCursor {
 public:
  explicit PnmCursor(std::span<const std::uint8_t> b) : bytes_(b) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = static_cast<char>(bytes_[pos_]);
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  int read_uint(const char* what) {
    skip_space_and_comments();
    long value = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1'000'000) throw Error(ErrorCode::InvalidImage, std::string("pnm: ") + what + " too large");
      ++pos_;
      ++digits;
    }
    if (digits == 0) throw Error(ErrorCode::InvalidImage, std::string("pnm: missing ") + what);
    return static_cast<int>(value);
  }

  std::size_t pos_ = 0;
  std::span<const std::uint8_t> bytes_;
};

}  // namespace

RasterImage decode_pnm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P') {
    throw Error(ErrorCode::UnsupportedEncoding, "not a Netpbm file (expected P5 or P6 magic)");
  }
  int channels = 0;
  if (bytes[1] == '6') {
    channels = 3;
  } else if (bytes[1] == '5') {
    channels = 1;
  } else {
    throw Error(ErrorCode::UnsupportedEncoding,
                std::string("unsupported Netpbm magic 'P") + static_cast<char>(bytes[1]) +
                    "'; only binary P5/P6 are accepted");
  }
  PnmCursor cur(bytes);
  cur.pos_ = 2;
  const int w = cur.read_uint("width");
  const int h = cur.read_uint("height");
  const int maxval = cur.read_uint("maxval");
  if (w < 1 || h < 1) throw Error(ErrorCode::InvalidImage, "pnm: zero dimension");
  if (maxval < 1 || maxval > 255) {
    throw Error(ErrorCode::UnsupportedEncoding, "pnm: only 8-bit rasters (maxval <= 255) are supported");
  }
  if (cur.pos_ >= bytes.size() || !std::isspace(bytes[cur.pos_])) {
    throw Error(ErrorCode::InvalidImage, "pnm: malformed header");
  }
  ++cur.pos_;
  const std::size_t n = static_cast<std::size_t>(w) * h * channels;
  if (bytes.size() - cur.pos_ < n) throw Error(ErrorCode::InvalidImage, "pnm: truncated raster");

  RasterImage img(w, h, channels, ValueDomain::Byte);
  for (std::size_t i = 0; i < n; ++i) {
    const int v = bytes[cur.pos_ + i];
    img.pixels[i] = maxval == 255 ? v : std::round(std::min(v, maxval) * 255.0 / maxval);
  }
  return img;
}

RasterImage read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), {});
  return decode_pnm(bytes);
}

std::vector<std::uint8_t> encode_pnm(const RasterImage& img) {
  require_nonempty(img, "encode_pnm");
  if (img.channels != 1 && img.channels != 3) {
    throw Error(ErrorCode::UnsupportedEncoding, "pnm supports 1 or 3 channels");
  }
  const RasterImage bytes_img = denormalize(img);
  const std::string header = std::string(img.channels == 3 ? "P6" : "P5") + "\n" +
                             std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + bytes_img.pixels.size());
  for (double v : bytes_img.pixels) out.push_back(static_cast<std::uint8_t>(v));
  return out;
}

void write_pnm(const std::filesystem::path& path, const RasterImage& img) {
  const auto bytes = encode_pnm(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write image " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

}  // namespace civiclens::imaging
