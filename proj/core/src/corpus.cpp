#include "civiclens/corpus.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <mutex>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "civiclens/error.hpp"
#include "civiclens/rng.hpp"

namespace civiclens::corpus {

using imaging::RasterImage;
using imaging::ValueDomain;
using json = nlohmann::json;

std::string_view token(Lighting v) noexcept { return v == Lighting::Daylight ? "daylight" : "low_light"; }
std::string_view token(Weather v) noexcept { return v == Weather::Clear ? "clear" : "adverse"; }
std::string_view token(Clutter v) noexcept { return v == Clutter::Simple ? "simple" : "cluttered"; }
std::string_view token(Season v) noexcept {
  switch (v) {
    case Season::Spring: return "spring";
    case Season::Summer: return "summer";
    case Season::Autumn: return "autumn";
    case Season::Winter: return "winter";
  }
  return "?";
}

void CorpusConfig::validate() const {
  std::vector<std::string> bad;
  if (n_images < 0) bad.push_back("n_images (" + std::to_string(n_images) + " < 0)");
  double mix_sum = 0.0;
  bool mix_negative = false;
  for (double m : class_mix) {
    mix_sum += m;
    mix_negative |= !(m >= 0.0);
  }
  if (mix_negative || std::abs(mix_sum - 1.0) > 1e-9) {
    bad.push_back("class_mix (sums to " + std::to_string(mix_sum) + ", expected 1)");
  }
  auto rate = [&](const char* name, double r) {
    if (!(r >= 0.0 && r <= 1.0)) bad.push_back(std::string(name) + " (" + std::to_string(r) + " not in [0,1])");
  };
  rate("low_light_rate", low_light_rate);
  rate("adverse_weather_rate", adverse_weather_rate);
  rate("clutter_rate", clutter_rate);
  if (image_size < 64) bad.push_back("image_size (" + std::to_string(image_size) + " < 64)");
  if (!(bounds.lat_min < bounds.lat_max) || !(bounds.lon_min < bounds.lon_max)) bad.push_back("bounds (inverted)");
  if (!bad.empty()) {
    std::string msg = "invalid corpus config:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw Error(ErrorCode::Validation, msg);
  }
}

// ---------------------------------------------------------------------------
// Scene rendering

namespace {

struct Rgb {
  double r, g, b;
};

Rgb season_tint(Season s) {
  switch (s) {
    case Season::Spring: return {0.97, 1.03, 0.97};
    case Season::Summer: return {1.04, 1.01, 0.95};
    case Season::Autumn: return {1.06, 0.98, 0.90};
    case Season::Winter: return {0.95, 0.99, 1.07};
  }
  return {1, 1, 1};
}

class Canvas {
 public:
  Canvas(int size) : img_(size, size, 3, ValueDomain::Unit) {}

  int size() const { return img_.width; }
  RasterImage& image() { return img_; }

  void set(int x, int y, Rgb c) {
    img_.at(x, y, 0) = std::clamp(c.r, 0.0, 1.0);
    img_.at(x, y, 1) = std::clamp(c.g, 0.0, 1.0);
    img_.at(x, y, 2) = std::clamp(c.b, 0.0, 1.0);
  }
  Rgb get(int x, int y) const { return {img_.at(x, y, 0), img_.at(x, y, 1), img_.at(x, y, 2)}; }

  // Paints every pixel of the clipped window for which inside(x, y) holds and
  // returns the bounding box of the painted pixels (w == 0 when none).
  template <typename Inside, typename Shade>
  BoundingBox paint(int x0, int y0, int x1, int y1, Inside inside, Shade shade) {
    x0 = std::max(x0, 0);
    y0 = std::max(y0, 0);
    x1 = std::min(x1, size() - 1);
    y1 = std::min(y1, size() - 1);
    int bx0 = size(), by0 = size(), bx1 = -1, by1 = -1;
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (!inside(x, y)) continue;
        set(x, y, shade(x, y, get(x, y)));
        bx0 = std::min(bx0, x);
        by0 = std::min(by0, y);
        bx1 = std::max(bx1, x);
        by1 = std::max(by1, y);
      }
    }
    if (bx1 < 0) return BoundingBox{0, 0, 0, 0};
    return BoundingBox{bx0, by0, bx1 - bx0 + 1, by1 - by0 + 1};
  }

 private:
  RasterImage img_;
};

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

bool overlaps(const BoundingBox& a, const BoundingBox& b, int margin) {
  return a.x - margin < b.x + b.w && b.x - margin < a.x + a.w && a.y - margin < b.y + b.h &&
         b.y - margin < a.y + a.h;
}

bool clear_of(const BoundingBox& box, const std::vector<BoundingBox>& taken, int margin) {
  return std::none_of(taken.begin(), taken.end(), [&](const BoundingBox& t) { return overlaps(box, t, margin); });
}

void render_background(Canvas& cv, Rng& rng, double base_gray, Rgb tint) {
  const int s = cv.size();
  const double fx = uniform(rng, 0.02, 0.06), fy = uniform(rng, 0.02, 0.06);
  const double px = uniform(rng, 0, 6.28), py = uniform(rng, 0, 6.28);
  std::uniform_real_distribution<double> grain(-0.025, 0.025);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double g = base_gray + 0.02 * std::sin(fx * x + px) * std::sin(fy * y + py) + grain(rng);
      cv.set(x, y, {g * tint.r, g * tint.g, g * tint.b});
    }
  }
  // Faded dashed lane marking.
  if (uniform(rng, 0, 1) < 0.7) {
    const double u = s / 256.0;
    const bool horizontal = uniform(rng, 0, 1) < 0.5;
    const int pos = uniform_int(rng, s / 8, s - s / 8);
    const int width = std::max(2, static_cast<int>(std::lround(uniform(rng, 3, 5) * u)));
    const int dash = std::max(4, static_cast<int>(20 * u)), gap = std::max(3, static_cast<int>(12 * u));
    const int phase = uniform_int(rng, 0, dash + gap);
    for (int a = 0; a < s; ++a) {
      if ((a + phase) % (dash + gap) >= dash) continue;
      for (int b = pos; b < std::min(s, pos + width); ++b) {
        const int x = horizontal ? a : b, y = horizontal ? b : a;
        Rgb c = cv.get(x, y);
        cv.set(x, y, {c.r + 0.07, c.g + 0.07, c.b + 0.06});
      }
    }
  }
}

BoundingBox draw_pothole(Canvas& cv, Rng& rng, double cx, double cy, double rx, double ry) {
  const double theta = uniform(rng, 0, std::numbers::pi);
  const double amp = uniform(rng, 0.08, 0.18);
  const int lobes = uniform_int(rng, 3, 5);
  const double phase = uniform(rng, 0, 6.28);
  const double lum = uniform(rng, 0.08, 0.16);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double reach = std::max(rx, ry) * (1.0 + amp) + 1.0;
  std::uniform_real_distribution<double> grain(-0.02, 0.02);
  auto inside = [&](int x, int y) {
    const double dx = x - cx, dy = y - cy;
    const double u = (dx * ct + dy * st) / rx, v = (-dx * st + dy * ct) / ry;
    const double edge = 1.0 + amp * std::sin(lobes * std::atan2(v, u) + phase);
    return u * u + v * v <= edge * edge;
  };
  auto shade = [&](int, int, Rgb) {
    const double l = lum + grain(rng);
    return Rgb{l * 1.05, l, l * 0.9};
  };
  return cv.paint(static_cast<int>(cx - reach), static_cast<int>(cy - reach), static_cast<int>(cx + reach),
                  static_cast<int>(cy + reach), inside, shade);
}

BoundingBox draw_litter_cluster(Canvas& cv, Rng& rng, double cx, double cy, double u) {
  static constexpr Rgb kPalette[] = {
      {0.95, 0.95, 0.95}, {0.70, 0.85, 1.00}, {1.00, 0.92, 0.40}, {0.65, 0.95, 0.60}, {1.00, 0.75, 0.80}};
  const int pieces = uniform_int(rng, 3, 6);
  BoundingBox total{0, 0, 0, 0};
  for (int p = 0; p < pieces; ++p) {
    // The first piece anchors the cluster; the rest overlap it.
    const double ang = uniform(rng, 0, 2 * std::numbers::pi);
    const double dist = p == 0 ? 0.0 : uniform(rng, 0, 5 * u);
    const double pcx = cx + dist * std::cos(ang), pcy = cy + dist * std::sin(ang);
    const double rad = p == 0 ? uniform(rng, 7 * u, 9 * u) : uniform(rng, 5 * u, 8 * u);
    const int verts = p == 0 ? uniform_int(rng, 4, 5) : uniform_int(rng, 3, 4);
    std::vector<double> angles(verts);
    if (p == 0) {
      // A bag: evenly spread, jittered corners, never a sliver.
      const double step = 2 * std::numbers::pi / verts, start = uniform(rng, 0, step);
      for (int k = 0; k < verts; ++k) angles[k] = start + k * step + uniform(rng, -0.2, 0.2) * step;
    } else {
      for (double& a : angles) a = uniform(rng, 0, 2 * std::numbers::pi);
      std::sort(angles.begin(), angles.end());
    }
    std::vector<std::pair<double, double>> poly;
    for (double a : angles) poly.emplace_back(pcx + rad * std::cos(a), pcy + rad * std::sin(a));
    const Rgb base = kPalette[uniform_int(rng, 0, 4)];
    const double bright = uniform(rng, 0.9, 1.0);
    auto inside = [&](int x, int y) {
      // Convex polygon with counter-clockwise (screen) vertex order.
      for (std::size_t i = 0; i < poly.size(); ++i) {
        const auto [ax, ay] = poly[i];
        const auto [bx, by] = poly[(i + 1) % poly.size()];
        if ((bx - ax) * (y - ay) - (by - ay) * (x - ax) < 0) return false;
      }
      return true;
    };
    auto shade = [&](int, int, Rgb) { return Rgb{base.r * bright, base.g * bright, base.b * bright}; };
    const BoundingBox b = cv.paint(static_cast<int>(pcx - rad - 1), static_cast<int>(pcy - rad - 1),
                                   static_cast<int>(pcx + rad + 1), static_cast<int>(pcy + rad + 1), inside, shade);
    if (b.w == 0) continue;
    if (total.w == 0) {
      total = b;
    } else {
      const int x0 = std::min(total.x, b.x), y0 = std::min(total.y, b.y);
      const int x1 = std::max(total.x + total.w, b.x + b.w), y1 = std::max(total.y + total.h, b.y + b.h);
      total = {x0, y0, x1 - x0, y1 - y0};
    }
  }
  return total;
}

BoundingBox draw_vehicle(Canvas& cv, Rng& rng, const BoundingBox& body) {
  // Saturated paints whose luma sits well away from the asphalt (dark or
  // bright), so the car reads as one region in grayscale too.
  static constexpr Rgb kPaint[] = {{0.55, 0.02, 0.02}, {0.05, 0.08, 0.62}, {0.30, 0.04, 0.42},
                                   {1.00, 0.88, 0.10}, {0.60, 1.00, 0.20}, {0.40, 0.95, 1.00}};
  const Rgb paint = kPaint[uniform_int(rng, 0, 5)];

  // Faded hatched no-parking zone partially under the car.
  const int hw = static_cast<int>(body.w * 1.4), hh = static_cast<int>(body.h * 1.4);
  const int hx = body.x - uniform_int(rng, 0, std::max(1, hw - body.w));
  const int hy = body.y - uniform_int(rng, 0, std::max(1, hh - body.h));
  const int period = std::max(4, cv.size() / 40);
  cv.paint(
      hx, hy, hx + hw - 1, hy + hh - 1, [&](int x, int y) { return ((x + y) / period) % 2 == 0; },
      [](int, int, Rgb c) {
        constexpr double a = 0.12;
        return Rgb{c.r * (1 - a) + 0.85 * a, c.g * (1 - a) + 0.80 * a, c.b * (1 - a) + 0.30 * a};
      });

  return cv.paint(
      body.x, body.y, body.x + body.w - 1, body.y + body.h - 1, [](int, int) { return true; },
      [&](int, int, Rgb) { return paint; });
}

void draw_distractors(Canvas& cv, Rng& rng, double base_gray, Rgb tint, std::vector<BoundingBox>& taken) {
  const int s = cv.size();
  const double u = s / 256.0;
  const int count = uniform_int(rng, 3, 6);
  for (int i = 0; i < count; ++i) {
    // Desaturated gray boxes and poles: never dark enough to be a pothole,
    // bright enough to be litter, or saturated like a vehicle.
    const bool pole = uniform(rng, 0, 1) < 0.4;
    const int w = pole ? std::max(2, static_cast<int>(2 * u)) : static_cast<int>(uniform(rng, 8, 20) * u);
    const int h = pole ? static_cast<int>(uniform(rng, 20, 50) * u) : static_cast<int>(uniform(rng, 8, 20) * u);
    const double offset = uniform(rng, 0, 1) < 0.5 ? uniform(rng, 0.12, 0.22) : -uniform(rng, 0.10, 0.15);
    for (int attempt = 0; attempt < 20; ++attempt) {
      const BoundingBox box{uniform_int(rng, 0, s - w - 1), uniform_int(rng, 0, s - h - 1), w, h};
      if (!clear_of(box, taken, static_cast<int>(6 * u))) continue;
      const double g = base_gray + offset;
      cv.paint(
          box.x, box.y, box.x + w - 1, box.y + h - 1, [](int, int) { return true; },
          [&](int, int, Rgb) { return Rgb{g * tint.r, g * tint.g, g * tint.b}; });
      taken.push_back(box);
      break;
    }
  }
}

void apply_weather(Canvas& cv, Rng& rng) {
  const int s = cv.size();
  const double u = s / 256.0;
  const int streaks = static_cast<int>(60 * u * u);
  const double slope = uniform(rng, -0.3, 0.3);
  for (int i = 0; i < streaks; ++i) {
    const double x0 = uniform(rng, 0, s), y0 = uniform(rng, 0, s);
    const int len = static_cast<int>(uniform(rng, 8, 20) * u);
    for (int t = 0; t < len; ++t) {
      const int x = static_cast<int>(x0 + slope * t), y = static_cast<int>(y0) + t;
      if (x < 0 || x >= s || y < 0 || y >= s) continue;
      const Rgb c = cv.get(x, y);
      constexpr double a = 0.3;
      cv.set(x, y, {c.r * (1 - a) + 0.85 * a, c.g * (1 - a) + 0.85 * a, c.b * (1 - a) + 0.90 * a});
    }
  }
  std::normal_distribution<double> noise(0.0, kWeatherNoiseStd);
  for (double& v : cv.image().pixels) v = std::clamp(v + noise(rng), 0.0, 1.0);
}

}  // namespace

std::pair<RasterImage, std::vector<GroundTruthRegion>> render_scene(IssueClass cls,
                                                                   const SceneConditions& conditions,
                                                                   int size, std::uint64_t seed) {
  if (size < 64) {
    throw Error(ErrorCode::InvalidParameter, "render_scene: size " + std::to_string(size) + " < 64");
  }
  const double u = size / 256.0;
  Rng bg_rng(derive_seed(seed, 1));
  Rng prim_rng(derive_seed(seed, 2 + static_cast<std::uint64_t>(class_index(cls))));
  Rng clutter_rng(derive_seed(seed, 7));
  Rng weather_rng(derive_seed(seed, 8));

  Canvas cv(size);
  const double base_gray = uniform(bg_rng, 0.42, 0.52);
  const Rgb tint = season_tint(conditions.season);
  render_background(cv, bg_rng, base_gray, tint);

  std::vector<GroundTruthRegion> regions;
  std::vector<BoundingBox> taken;
  const int margin = static_cast<int>(10 * u);

  switch (cls) {
    case IssueClass::InfrastructureDamage: {
      const int wanted = uniform_int(prim_rng, 1, 3);
      for (int i = 0; i < wanted; ++i) {
        for (int attempt = 0; attempt < 30; ++attempt) {
          const double rx = uniform(prim_rng, 9, 20) * u, ry = uniform(prim_rng, 7, 16) * u;
          const double reach = std::max(rx, ry) * 1.2 + 2;
          const double cx = uniform(prim_rng, reach + 4 * u, size - reach - 4 * u);
          const double cy = uniform(prim_rng, reach + 4 * u, size - reach - 4 * u);
          const BoundingBox hull{static_cast<int>(cx - reach), static_cast<int>(cy - reach),
                                 static_cast<int>(2 * reach), static_cast<int>(2 * reach)};
          if (!clear_of(hull, taken, margin)) continue;
          const BoundingBox b = draw_pothole(cv, prim_rng, cx, cy, rx, ry);
          if (b.w > 0) {
            regions.push_back({b, cls});
            taken.push_back(hull);
          }
          break;
        }
      }
      break;
    }
    case IssueClass::WasteDisposal: {
      const int wanted = uniform_int(prim_rng, 1, 4);
      for (int i = 0; i < wanted; ++i) {
        for (int attempt = 0; attempt < 30; ++attempt) {
          const double reach = 16 * u + 2;
          const double cx = uniform(prim_rng, reach, size - reach), cy = uniform(prim_rng, reach, size - reach);
          const BoundingBox hull{static_cast<int>(cx - reach), static_cast<int>(cy - reach),
                                 static_cast<int>(2 * reach), static_cast<int>(2 * reach)};
          if (!clear_of(hull, taken, margin)) continue;
          const BoundingBox b = draw_litter_cluster(cv, prim_rng, cx, cy, u);
          if (b.w > 0) {
            regions.push_back({b, cls});
            taken.push_back(hull);
          }
          break;
        }
      }
      break;
    }
    case IssueClass::IllegalParkingMisc: {
      const bool vertical = uniform(prim_rng, 0, 1) < 0.5;
      int len = static_cast<int>(uniform(prim_rng, 44, 68) * u);
      int wid = static_cast<int>(uniform(prim_rng, 24, 34) * u);
      const int w = vertical ? wid : len, h = vertical ? len : wid;
      const int pad = static_cast<int>(8 * u);
      const BoundingBox body{uniform_int(prim_rng, pad, size - w - pad), uniform_int(prim_rng, pad, size - h - pad), w, h};
      const BoundingBox b = draw_vehicle(cv, prim_rng, body);
      regions.push_back({b, cls});
      taken.push_back({std::max(0, body.x - w / 2), std::max(0, body.y - h / 2), w * 2, h * 2});
      break;
    }
  }

  if (conditions.clutter == Clutter::Cluttered) draw_distractors(cv, clutter_rng, base_gray, tint, taken);
  if (conditions.lighting == Lighting::LowLight) {
    for (double& v : cv.image().pixels) v *= kLowLightScale;
  }
  if (conditions.weather == Weather::Adverse) apply_weather(cv, weather_rng);

  return {std::move(cv.image()), std::move(regions)};
}

// ---------------------------------------------------------------------------
// Corpus generation and splitting

std::vector<int> apportion(int total, std::span<const double> shares) {
  const std::size_t k = shares.size();
  std::vector<int> counts(k, 0);
  if (k == 0 || total <= 0) return counts;
  double sum = 0.0;
  for (double s : shares) sum += s;
  if (!(sum > 0.0)) throw Error(ErrorCode::InvalidParameter, "apportion: shares must have a positive sum");
  std::vector<double> frac(k);
  int assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double quota = total * shares[i] / sum;
    counts[i] = static_cast<int>(std::floor(quota + 1e-9));
    frac[i] = quota - counts[i];
    assigned += counts[i];
  }
  std::vector<std::size_t> order(k);
  for (std::size_t i = 0; i < k; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; assigned < total; i = (i + 1) % k, ++assigned) ++counts[order[i]];
  return counts;
}

namespace {

std::vector<bool> exact_rate_flags(int n, double rate, std::uint64_t seed) {
  const int k = static_cast<int>(std::lround(rate * n));
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<bool> flags(n, false);
  for (int i = 0; i < k; ++i) flags[idx[i]] = true;
  return flags;
}

std::string image_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "images/%06d.ppm", index);
  return buf;
}

}  // namespace

DatasetManifest generate_corpus(const CorpusConfig& config, const std::filesystem::path& output_dir) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(output_dir / "images", ec);
  if (ec) throw Error(ErrorCode::Io, "cannot create " + (output_dir / "images").string() + ": " + ec.message());

  const int n = config.n_images;
  const auto class_counts = apportion(n, config.class_mix);
  std::vector<int> labels;
  labels.reserve(n);
  for (int c = 0; c < kNumClasses; ++c) labels.insert(labels.end(), class_counts[c], c);
  {
    Rng rng(derive_seed(config.seed, 1));
    std::shuffle(labels.begin(), labels.end(), rng);
  }
  const auto low = exact_rate_flags(n, config.low_light_rate, derive_seed(config.seed, 2));
  const auto adverse = exact_rate_flags(n, config.adverse_weather_rate, derive_seed(config.seed, 3));
  const auto clutter = exact_rate_flags(n, config.clutter_rate, derive_seed(config.seed, 4));
  std::vector<int> seasons;
  {
    const std::array<double, 4> even = {0.25, 0.25, 0.25, 0.25};
    const auto sc = apportion(n, even);
    for (int s = 0; s < 4; ++s) seasons.insert(seasons.end(), sc[s], s);
    Rng rng(derive_seed(config.seed, 5));
    std::shuffle(seasons.begin(), seasons.end(), rng);
  }

  DatasetManifest manifest;
  manifest.root = output_dir;
  manifest.records.resize(n);
  Rng geo(derive_seed(config.seed, 6));
  for (int i = 0; i < n; ++i) {
    ManifestRecord& r = manifest.records[i];
    r.image_path = image_name(i);
    r.cls = class_from_index(labels[i]);
    r.conditions = {low[i] ? Lighting::LowLight : Lighting::Daylight, adverse[i] ? Weather::Adverse : Weather::Clear,
                    clutter[i] ? Clutter::Cluttered : Clutter::Simple, static_cast<Season>(seasons[i])};
    r.lat = uniform(geo, config.bounds.lat_min, config.bounds.lat_max);
    r.lon = uniform(geo, config.bounds.lon_min, config.bounds.lon_max);
    r.seed_used = derive_seed(config.seed, 1000 + static_cast<std::uint64_t>(i));
  }

  // Rendering fans out; each record depends only on its own seed.
  std::atomic<int> next{0};
  std::atomic<bool> failed{false};
  std::string failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (int i = next++; i < n && !failed; i = next++) {
      ManifestRecord& r = manifest.records[i];
      try {
        auto [img, regions] = render_scene(r.cls, r.conditions, config.image_size, r.seed_used);
        r.regions = std::move(regions);
        imaging::write_pnm(output_dir / r.image_path, img);
      } catch (const std::exception& e) {
        std::lock_guard lock(failure_mu);
        failed = true;
        failure = e.what();
      }
    }
  };
  const unsigned threads = std::max(1u, std::min(std::thread::hardware_concurrency(), 16u));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failed) throw Error(ErrorCode::Io, "corpus generation failed: " + failure);

  save_manifest(manifest, output_dir / kManifestFile);
  return manifest;
}

std::pair<DatasetManifest, DatasetManifest> split_train_val(const DatasetManifest& manifest, double train_fraction,
                                                            std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw Error(ErrorCode::InvalidParameter, "train_fraction must lie in (0, 1)");
  }
  const std::size_t n = manifest.size();
  if (n == 0) throw Error(ErrorCode::EmptyManifest, "cannot split an empty manifest");
  const int val_total = static_cast<int>(std::floor((1.0 - train_fraction) * static_cast<double>(n) + 1e-9));

  std::array<std::vector<std::size_t>, kNumClasses> by_class;
  for (std::size_t i = 0; i < n; ++i) by_class[class_index(manifest.records[i].cls)].push_back(i);
  std::array<double, kNumClasses> shares{};
  for (int c = 0; c < kNumClasses; ++c) shares[c] = static_cast<double>(by_class[c].size());
  const auto quotas = apportion(val_total, shares);

  std::vector<bool> in_val(n, false);
  for (int c = 0; c < kNumClasses; ++c) {
    auto idx = by_class[c];
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int i = 0; i < quotas[c]; ++i) in_val[idx[i]] = true;
  }
  DatasetManifest train{manifest.root, {}}, val{manifest.root, {}};
  for (std::size_t i = 0; i < n; ++i) (in_val[i] ? val : train).records.push_back(manifest.records[i]);
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// Manifest I/O

std::string record_to_json_line(const ManifestRecord& r) {
  json regions = json::array();
  for (const auto& g : r.regions) {
    regions.push_back({{"x", g.bbox.x}, {"y", g.bbox.y}, {"w", g.bbox.w}, {"h", g.bbox.h},
                       {"class", std::string(class_token(g.cls))}});
  }
  json j = {{"image", r.image_path},
            {"class", std::string(class_token(r.cls))},
            {"lighting", std::string(token(r.conditions.lighting))},
            {"weather", std::string(token(r.conditions.weather))},
            {"clutter", std::string(token(r.conditions.clutter))},
            {"season", std::string(token(r.conditions.season))},
            {"lat", r.lat},
            {"lon", r.lon},
            {"regions", std::move(regions)},
            {"seed", r.seed_used}};
  return j.dump();
}

namespace {

template <typename Enum, std::size_t N>
Enum parse_enum(const json& j, const char* field, const std::array<Enum, N>& values) {
  const std::string tok = j.at(field).get<std::string>();
  for (Enum v : values) {
    if (token(v) == tok) return v;
  }
  throw Error(ErrorCode::Parse, std::string("unknown ") + field + " token '" + tok + "'");
}

IssueClass parse_class(const json& j) {
  const std::string tok = j.at("class").get<std::string>();
  if (auto c = parse_class_token(tok)) return *c;
  throw Error(ErrorCode::Parse, "unknown class token '" + tok + "'");
}

}  // namespace

ManifestRecord record_from_json_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("malformed JSON: ") + e.what());
  }
  try {
    ManifestRecord r;
    r.image_path = j.at("image").get<std::string>();
    r.cls = parse_class(j);
    r.conditions.lighting =
        parse_enum(j, "lighting", std::array{Lighting::Daylight, Lighting::LowLight});
    r.conditions.weather = parse_enum(j, "weather", std::array{Weather::Clear, Weather::Adverse});
    r.conditions.clutter = parse_enum(j, "clutter", std::array{Clutter::Simple, Clutter::Cluttered});
    r.conditions.season = parse_enum(
        j, "season", std::array{Season::Spring, Season::Summer, Season::Autumn, Season::Winter});
    r.lat = j.at("lat").get<double>();
    r.lon = j.at("lon").get<double>();
    r.seed_used = j.at("seed").get<std::uint64_t>();
    for (const auto& g : j.at("regions")) {
      r.regions.push_back({{g.at("x").get<int>(), g.at("y").get<int>(), g.at("w").get<int>(), g.at("h").get<int>()},
                           parse_class(g)});
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("bad record: ") + e.what());
  }
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write manifest " + path.string());
  for (const auto& r : manifest.records) out << record_to_json_line(r) << '\n';
  if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

namespace {

// Reads only the Netpbm header to learn the raster size.
std::pair<int, int> pnm_dimensions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::vector<std::uint8_t> head(64);
  in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(in.gcount()));
  std::string text(head.begin(), head.end());
  std::istringstream ss(text);
  std::string magic;
  int w = 0, h = 0;
  ss >> magic >> w >> h;
  if (magic != "P6" && magic != "P5") throw Error(ErrorCode::UnsupportedEncoding, path.string() + ": not P5/P6");
  return {w, h};
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path, bool check_images) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open manifest " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(line_no) + ": ";
    ManifestRecord r;
    try {
      r = record_from_json_line(line);
    } catch (const Error& e) {
      throw Error(ErrorCode::Parse, where + e.what());
    }
    if (r.regions.empty()) throw Error(ErrorCode::Parse, where + "record has no regions");
    for (const auto& g : r.regions) {
      if (!g.bbox.valid()) throw Error(ErrorCode::Parse, where + "region with non-positive size or negative origin");
    }
    if (!(r.lat >= -90 && r.lat <= 90 && r.lon >= -180 && r.lon <= 180)) {
      throw Error(ErrorCode::Parse, where + "location out of range");
    }
    if (check_images) {
      const auto file = m.root / r.image_path;
      if (!std::filesystem::exists(file)) {
        throw Error(ErrorCode::DanglingReference, where + "missing image file " + file.string());
      }
      const auto [w, h] = pnm_dimensions(file);
      for (const auto& g : r.regions) {
        if (!g.bbox.fits(w, h)) throw Error(ErrorCode::Parse, where + "region outside image bounds");
      }
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

CorpusStats compute_stats(const DatasetManifest& manifest) {
  CorpusStats s;
  s.total = manifest.size();
  for (const auto& r : manifest.records) {
    ++s.per_class[class_index(r.cls)];
    s.low_light += r.conditions.lighting == Lighting::LowLight;
    s.adverse_weather += r.conditions.weather == Weather::Adverse;
    s.cluttered += r.conditions.clutter == Clutter::Cluttered;
    ++s.per_season[static_cast<int>(r.conditions.season)];
    s.regions += r.regions.size();
  }
  return s;
}

std::string format_stats(const CorpusStats& s) {
  std::ostringstream os;
  auto pct = [&](std::size_t v) { return s.total ? 100.0 * static_cast<double>(v) / static_cast<double>(s.total) : 0.0; };
  os.setf(std::ios::fixed);
  os.precision(1);
  os << "images           " << s.total << "\n";
  for (IssueClass c : kAllClasses) {
    os << "  " << class_token(c) << std::string(22 - class_token(c).size(), ' ') << s.per_class[class_index(c)]
       << " (" << pct(s.per_class[class_index(c)]) << "%)\n";
  }
  os << "low_light        " << s.low_light << " (" << pct(s.low_light) << "%)\n";
  os << "adverse_weather  " << s.adverse_weather << " (" << pct(s.adverse_weather) << "%)\n";
  os << "cluttered        " << s.cluttered << " (" << pct(s.cluttered) << "%)\n";
  const char* names[] = {"spring", "summer", "autumn", "winter"};
  for (int i = 0; i < 4; ++i) os << "  " << names[i] << std::string(15 - std::strlen(names[i]), ' ') << s.per_season[i] << "\n";
  os << "regions          " << s.regions << "\n";
  return os.str();
}

}  // namespace civiclens::corpus
