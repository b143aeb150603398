#include "civiclens/regions.hpp"

#include <algorithm>
#include <cmath>

#include "civiclens/error.hpp"

namespace civiclens::regions {

using imaging::RasterImage;

double iou(const BoundingBox& a, const BoundingBox& b) noexcept {
  const long long ix = std::max(0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const long long iy = std::max(0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const long long inter = ix * iy;
  const long long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

namespace {

bool ranks_before(const RegionProposal& a, const RegionProposal& b) {
  if (a.objectness != b.objectness) return a.objectness > b.objectness;
  if (a.bbox.x != b.bbox.x) return a.bbox.x < b.bbox.x;
  return a.bbox.y < b.bbox.y;
}

}  // namespace

std::vector<RegionProposal> non_max_suppress(std::span<const RegionProposal> proposals, double iou_threshold) {
  if (!(iou_threshold >= 0.0 && iou_threshold <= 1.0)) {
    throw Error(ErrorCode::InvalidParameter, "nms iou threshold must lie in [0, 1]");
  }
  std::vector<RegionProposal> sorted(proposals.begin(), proposals.end());
  std::stable_sort(sorted.begin(), sorted.end(), ranks_before);
  std::vector<RegionProposal> kept;
  for (const auto& p : sorted) {
    const bool conflict = std::any_of(kept.begin(), kept.end(),
                                      [&](const RegionProposal& k) { return iou(k.bbox, p.bbox) > iou_threshold; });
    if (!conflict) kept.push_back(p);
  }
  return kept;
}

std::vector<double> saliency_map(const RasterImage& img, int window) {
  const RasterImage gray = imaging::to_grayscale(img);
  const int w = gray.width, h = gray.height;
  const int r = window / 2;
  // Summed-area table with a zero border row/column.
  std::vector<double> sat(static_cast<std::size_t>(w + 1) * (h + 1), 0.0);
  auto S = [&](int x, int y) -> double& { return sat[static_cast<std::size_t>(y) * (w + 1) + x]; };
  for (int y = 0; y < h; ++y) {
    double row = 0.0;
    for (int x = 0; x < w; ++x) {
      row += gray.pixels[static_cast<std::size_t>(y) * w + x];
      S(x + 1, y + 1) = S(x + 1, y) + row;
    }
  }
  std::vector<double> sal(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y) {
    const int y0 = std::max(0, y - r), y1 = std::min(h, y + r + 1);
    for (int x = 0; x < w; ++x) {
      const int x0 = std::max(0, x - r), x1 = std::min(w, x + r + 1);
      const double sum = S(x1, y1) - S(x0, y1) - S(x1, y0) + S(x0, y0);
      const double mean = sum / static_cast<double>((x1 - x0) * (y1 - y0));
      sal[static_cast<std::size_t>(y) * w + x] = std::abs(gray.pixels[static_cast<std::size_t>(y) * w + x] - mean);
    }
  }
  return sal;
}

std::vector<RegionProposal> propose_regions(const RasterImage& img, const ProposerSettings& settings) {
  if (img.empty() || img.width != img.height || img.domain != imaging::ValueDomain::Unit ||
      (settings.standard_size > 0 && img.width != settings.standard_size)) {
    throw Error(ErrorCode::Precondition, "propose_regions expects a standardized unit-domain square image");
  }
  const int w = img.width, h = img.height;
  const auto sal = saliency_map(img, settings.background_window);
  const long long max_area = static_cast<long long>(settings.max_area_fraction * w * h);

  std::vector<int> label(sal.size(), -1);
  std::vector<int> stack;
  std::vector<RegionProposal> candidates;
  for (int start = 0; start < w * h; ++start) {
    if (label[start] >= 0 || !(sal[start] > settings.saliency_threshold)) continue;
    const int id = static_cast<int>(candidates.size());
    int x0 = w, y0 = h, x1 = -1, y1 = -1;
    stack.assign(1, start);
    label[start] = id;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int px = p % w, py = p / w;
      x0 = std::min(x0, px);
      x1 = std::max(x1, px);
      y0 = std::min(y0, py);
      y1 = std::max(y1, py);
      const int nbr[4][2] = {{px - 1, py}, {px + 1, py}, {px, py - 1}, {px, py + 1}};
      for (const auto& n : nbr) {
        if (n[0] < 0 || n[0] >= w || n[1] < 0 || n[1] >= h) continue;
        const int q = n[1] * w + n[0];
        if (label[q] < 0 && sal[q] > settings.saliency_threshold) {
          label[q] = id;
          stack.push_back(q);
        }
      }
    }
    RegionProposal prop{{x0, y0, x1 - x0 + 1, y1 - y0 + 1}, 0.0};
    candidates.push_back(prop);  // keep ids aligned with labels; filtered below
  }

  std::vector<RegionProposal> kept;
  for (auto& c : candidates) {
    const long long area = c.bbox.area();
    if (area < settings.min_area || area > max_area) continue;
    double sum = 0.0;
    for (int y = c.bbox.y; y < c.bbox.y + c.bbox.h; ++y) {
      for (int x = c.bbox.x; x < c.bbox.x + c.bbox.w; ++x) sum += sal[static_cast<std::size_t>(y) * w + x];
    }
    c.objectness = std::clamp(sum / static_cast<double>(area), 0.0, 1.0);
    kept.push_back(c);
  }
  auto out = non_max_suppress(kept, settings.nms_iou);
  if (settings.max_proposals >= 0 && out.size() > static_cast<std::size_t>(settings.max_proposals)) {
    out.resize(static_cast<std::size_t>(settings.max_proposals));
  }
  return out;
}

}  // namespace civiclens::regions
