#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "civiclens/imaging.hpp"
#include "civiclens/types.hpp"

namespace civiclens::corpus {

enum class Lighting { Daylight, LowLight };
enum class Weather { Clear, Adverse };
enum class Clutter { Simple, Cluttered };
enum class Season { Spring, Summer, Autumn, Winter };

struct SceneConditions {
  Lighting lighting = Lighting::Daylight;
  Weather weather = Weather::Clear;
  Clutter clutter = Clutter::Simple;
  Season season = Season::Summer;

  static SceneConditions easy() { return {}; }
  friend bool operator==(const SceneConditions&, const SceneConditions&) = default;
};

std::string_view token(Lighting v) noexcept;
std::string_view token(Weather v) noexcept;
std::string_view token(Clutter v) noexcept;
std::string_view token(Season v) noexcept;

struct GeoBounds {
  double lat_min = 44.35;
  double lat_max = 44.55;
  double lon_min = 26.00;
  double lon_max = 26.20;
};

struct CorpusConfig {
  int n_images = 5712;
  std::array<double, kNumClasses> class_mix = {0.45, 0.30, 0.25};
  double low_light_rate = 0.35;
  double adverse_weather_rate = 0.20;
  double clutter_rate = 0.25;
  int image_size = 256;
  std::uint64_t seed = 2022;
  GeoBounds bounds;

  /// Throws Error(Validation) listing every offending field.
  void validate() const;
};

struct ManifestRecord {
  std::string image_path;  // relative to the manifest directory
  IssueClass cls = IssueClass::InfrastructureDamage;
  SceneConditions conditions;
  std::vector<GroundTruthRegion> regions;
  double lat = 0.0;
  double lon = 0.0;
  std::uint64_t seed_used = 0;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory image paths resolve against
  std::vector<ManifestRecord> records;

  std::size_t size() const noexcept { return records.size(); }
  bool empty() const noexcept { return records.empty(); }
  std::filesystem::path image_file(const ManifestRecord& r) const { return root / r.image_path; }
};

inline constexpr double kLowLightScale = 0.35;
inline constexpr double kWeatherNoiseStd = 0.08;

/// Procedural urban scene. Deterministic in (cls, conditions, size, seed);
/// geometry depends only on (cls, size, seed), so condition variants of the
/// same seed share layout. Returns a unit-domain RGB raster and the exact
/// boxes of the class primitives.
std::pair<imaging::RasterImage, std::vector<GroundTruthRegion>> render_scene(
    IssueClass cls, const SceneConditions& conditions, int size, std::uint64_t seed);

/// Largest-remainder apportionment of total over the given shares.
std::vector<int> apportion(int total, std::span<const double> shares);

DatasetManifest generate_corpus(const CorpusConfig& config, const std::filesystem::path& output_dir);

std::pair<DatasetManifest, DatasetManifest> split_train_val(const DatasetManifest& manifest,
                                                            double train_fraction = 0.8,
                                                            std::uint64_t seed = 0);

inline constexpr const char* kManifestFile = "manifest.jsonl";

/// One JSON object per line.
std::string record_to_json_line(const ManifestRecord& record);
ManifestRecord record_from_json_line(const std::string& line);

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Parses and validates a manifest; image paths are checked when check_images.
DatasetManifest load_manifest(const std::filesystem::path& path, bool check_images = true);

struct CorpusStats {
  std::size_t total = 0;
  std::array<std::size_t, kNumClasses> per_class{};
  std::size_t low_light = 0;
  std::size_t adverse_weather = 0;
  std::size_t cluttered = 0;
  std::array<std::size_t, 4> per_season{};
  std::size_t regions = 0;
};

CorpusStats compute_stats(const DatasetManifest& manifest);
std::string format_stats(const CorpusStats& stats);

}  // namespace civiclens::corpus
