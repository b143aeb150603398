#pragma once

#include <span>
#include <vector>

#include "civiclens/imaging.hpp"
#include "civiclens/types.hpp"

namespace civiclens::regions {

struct RegionProposal {
  BoundingBox bbox;
  double objectness = 0.0;  // in [0, 1]
  friend bool operator==(const RegionProposal&, const RegionProposal&) = default;
};

struct ProposerSettings {
  double saliency_threshold = 0.12;
  int background_window = 33;       // odd side of the box-filtered background estimate
  long long min_area = 64;          // px^2
  double max_area_fraction = 0.40;  // of the image area
  double nms_iou = 0.3;
  int max_proposals = 16;
  int standard_size = imaging::kStandardSize;  // 0 accepts any square size
};

/// Intersection over union; 0 for disjoint boxes.
double iou(const BoundingBox& a, const BoundingBox& b) noexcept;

/// Absolute deviation of luma from its local box-filtered mean.
std::vector<double> saliency_map(const imaging::RasterImage& img, int window);

/// Saliency -> threshold -> 4-connected components -> area filter ->
/// mean-saliency objectness -> NMS -> top-k by objectness.
std::vector<RegionProposal> propose_regions(const imaging::RasterImage& img,
                                            const ProposerSettings& settings = {});

/// Greedy suppression, highest objectness first (ties: smaller x, then y).
std::vector<RegionProposal> non_max_suppress(std::span<const RegionProposal> proposals,
                                             double iou_threshold);

}  // namespace civiclens::regions
