#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace civiclens {

enum class IssueClass : std::uint8_t {
  InfrastructureDamage = 0,
  WasteDisposal = 1,
  IllegalParkingMisc = 2,
};

inline constexpr int kNumClasses = 3;
inline constexpr std::array<IssueClass, kNumClasses> kAllClasses = {
    IssueClass::InfrastructureDamage, IssueClass::WasteDisposal,
    IssueClass::IllegalParkingMisc};

inline constexpr int class_index(IssueClass c) noexcept { return static_cast<int>(c); }

/// Throws Error(InvalidLabel) when index is outside [0, 3).
IssueClass class_from_index(int index);

/// Token used in manifests, rule tables and the HTTP API ("InfrastructureDamage").
std::string_view class_token(IssueClass c) noexcept;
std::optional<IssueClass> parse_class_token(std::string_view token) noexcept;

/// Lower-case wording for citizen-facing text.
std::string_view class_plain_name(IssueClass c) noexcept;

/// Axis-aligned pixel box; (x, y) is the top-left corner.
struct BoundingBox {
  int x = 0;
  int y = 0;
  int w = 1;
  int h = 1;

  long long area() const noexcept { return static_cast<long long>(w) * h; }
  bool valid() const noexcept { return x >= 0 && y >= 0 && w >= 1 && h >= 1; }
  bool fits(int width, int height) const noexcept {
    return valid() && x + w <= width && y + h <= height;
  }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct GroundTruthRegion {
  BoundingBox bbox;
  IssueClass cls = IssueClass::InfrastructureDamage;
  friend bool operator==(const GroundTruthRegion&, const GroundTruthRegion&) = default;
};

}  // namespace civiclens
