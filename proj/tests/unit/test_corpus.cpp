#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "civiclens/corpus.hpp"
#include "test_support.hpp"

using namespace civiclens;
using namespace civiclens::corpus;
using civiclens::testing::TempDir;

namespace {

double luma(const imaging::RasterImage& img, int x, int y) {
  return 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Straight largest-remainder: floor everything, hand leftovers to the
// largest fractional parts (earlier index wins ties).
std::vector<int> apportion_oracle(int total, const std::vector<double>& shares) {
  double sum = 0;
  for (double s : shares) sum += s;
  std::vector<int> out;
  std::vector<std::pair<double, int>> rema;
  int used = 0;
  for (std::size_t i = 0; i < shares.size(); ++i) {
    const double q = total * shares[i] / sum;
    out.push_back(static_cast<int>(std::floor(q + 1e-9)));
    used += out.back();
    rema.push_back({q - out.back(), static_cast<int>(i)});
  }
  std::stable_sort(rema.begin(), rema.end(), [](auto a, auto b) { return a.first > b.first; });
  for (int i = 0; i < total - used; ++i) ++out[rema[i].second];
  return out;
}

DatasetManifest synthetic_manifest(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  DatasetManifest m;
  for (std::size_t i = 0; i < n; ++i) {
    ManifestRecord r;
    r.image_path = "images/" + std::to_string(i) + ".ppm";
    r.cls = class_from_index(static_cast<int>(rng() % 3));
    r.regions = {{{1, 1, 4, 4}, r.cls}};
    r.seed_used = i;
    m.records.push_back(r);
  }
  return m;
}

}  // namespace

TEST(RenderScene, Deterministic) {
  for (IssueClass c : kAllClasses) {
    SceneConditions cond{Lighting::LowLight, Weather::Adverse, Clutter::Cluttered, Season::Winter};
    const auto a = render_scene(c, cond, 128, 99);
    const auto b = render_scene(c, cond, 128, 99);
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
    EXPECT_FALSE(a.second.empty());
  }
}

TEST(RenderScene, PotholesAreDarkerThanBackground) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto [img, regions] = render_scene(IssueClass::InfrastructureDamage, SceneConditions::easy(), 256, seed);
    ASSERT_FALSE(regions.empty());
    std::vector<char> covered(256 * 256, 0);
    for (const auto& g : regions)
      for (int y = g.bbox.y; y < g.bbox.y + g.bbox.h; ++y)
        for (int x = g.bbox.x; x < g.bbox.x + g.bbox.w; ++x) covered[y * 256 + x] = 1;
    double bg = 0;
    int nbg = 0;
    for (int y = 0; y < 256; ++y)
      for (int x = 0; x < 256; ++x)
        if (!covered[y * 256 + x]) bg += luma(img, x, y), ++nbg;
    bg /= nbg;
    for (const auto& g : regions) {
      double s = 0;
      for (int y = g.bbox.y; y < g.bbox.y + g.bbox.h; ++y)
        for (int x = g.bbox.x; x < g.bbox.x + g.bbox.w; ++x) s += luma(img, x, y);
      EXPECT_LT(s / g.bbox.area(), bg) << "seed " << seed;
      EXPECT_EQ(g.cls, IssueClass::InfrastructureDamage);
    }
  }
}

TEST(RenderScene, LowLightScalesMean) {
  for (IssueClass c : kAllClasses) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      SceneConditions day{}, dark{};
      dark.lighting = Lighting::LowLight;
      day.clutter = dark.clutter = Clutter::Cluttered;
      const auto d = render_scene(c, day, 128, seed);
      const auto n = render_scene(c, dark, 128, seed);
      EXPECT_NEAR(n.first.mean(), 0.35 * d.first.mean(), 1e-6);
      EXPECT_EQ(n.second, d.second);
    }
  }
}

TEST(RenderScene, BoxesInsideImageAndSizeGuard) {
  for (IssueClass c : kAllClasses)
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      SceneConditions cond{};
      cond.clutter = seed % 2 ? Clutter::Cluttered : Clutter::Simple;
      for (const auto& g : render_scene(c, cond, 64 + static_cast<int>(seed % 3) * 64, seed).second) {
        EXPECT_TRUE(g.bbox.fits(64 + static_cast<int>(seed % 3) * 64, 64 + static_cast<int>(seed % 3) * 64));
      }
    }
  EXPECT_ERROR_CODE(render_scene(IssueClass::WasteDisposal, {}, 63, 0), ErrorCode::InvalidParameter);
}

TEST(Apportion, PaperCorpusCounts) {
  const std::array<double, 3> mix = {0.45, 0.30, 0.25};
  EXPECT_EQ(apportion(5712, mix), (std::vector<int>{2570, 1714, 1428}));
}

TEST(Apportion, MatchesOracleAndSumsExactly) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> shares(1 + rng() % 5);
    for (auto& s : shares) s = 0.01 + (rng() % 1000) / 1000.0;
    const int total = static_cast<int>(rng() % 10000);
    const auto got = apportion(total, shares);
    EXPECT_EQ(got, apportion_oracle(total, shares));
    int sum = 0;
    double share_sum = 0;
    for (double s : shares) share_sum += s;
    for (std::size_t i = 0; i < got.size(); ++i) {
      sum += got[i];
      EXPECT_LT(std::abs(got[i] - total * shares[i] / share_sum), 1.0);
    }
    EXPECT_EQ(sum, total);
  }
}

TEST(CorpusConfig, ValidationListsFields) {
  CorpusConfig cfg;
  cfg.class_mix = {0.5, 0.5, 0.5};
  cfg.low_light_rate = 1.5;
  try {
    cfg.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Validation);
    EXPECT_NE(std::string(e.what()).find("class_mix"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("low_light_rate"), std::string::npos);
  }
}

TEST(GenerateCorpus, EmptyCorpus) {
  TempDir dir("corpus0");
  CorpusConfig cfg;
  cfg.n_images = 0;
  const auto m = generate_corpus(cfg, dir.path());
  EXPECT_TRUE(m.empty());
  EXPECT_TRUE(std::filesystem::exists(dir / kManifestFile));
  const bool no_images = !std::filesystem::exists(dir / "images") || std::filesystem::is_empty(dir / "images");
  EXPECT_TRUE(no_images);
}

TEST(GenerateCorpus, DeterministicTreeAndRoundTrip) {
  TempDir a("corpusA"), b("corpusB");
  CorpusConfig cfg;
  cfg.n_images = 40;
  cfg.image_size = 64;
  cfg.seed = 17;
  const auto ma = generate_corpus(cfg, a.path());
  const auto mb = generate_corpus(cfg, b.path());
  ASSERT_EQ(ma.size(), 40u);
  EXPECT_EQ(ma.records, mb.records);
  EXPECT_EQ(read_file(a / kManifestFile), read_file(b / kManifestFile));
  for (const auto& r : ma.records) {
    EXPECT_EQ(read_file(ma.image_file(r)), read_file(mb.image_file(r))) << r.image_path;
    EXPECT_FALSE(r.regions.empty());
  }
  const auto loaded = load_manifest(a / kManifestFile);
  EXPECT_EQ(loaded.records, ma.records);
}

TEST(GenerateCorpus, PaperSizedRatesAndCounts) {
  TempDir dir("corpusFull");
  CorpusConfig cfg;
  cfg.image_size = 64;  // rates and counts do not depend on resolution
  const auto m = generate_corpus(cfg, dir.path());
  const auto s = compute_stats(m);
  EXPECT_EQ(s.total, 5712u);
  EXPECT_EQ(s.per_class[0], 2570u);
  EXPECT_EQ(s.per_class[1], 1714u);
  EXPECT_EQ(s.per_class[2], 1428u);
  EXPECT_GE(s.low_light, 1885u);
  EXPECT_LE(s.low_light, 2114u);
  EXPECT_NEAR(static_cast<double>(s.adverse_weather) / 5712, 0.20, 0.02);
  EXPECT_NEAR(static_cast<double>(s.cluttered) / 5712, 0.25, 0.02);
  for (const auto& r : m.records) {
    EXPECT_GE(r.lat, cfg.bounds.lat_min);
    EXPECT_LE(r.lat, cfg.bounds.lat_max);
    EXPECT_GE(r.lon, cfg.bounds.lon_min);
    EXPECT_LE(r.lon, cfg.bounds.lon_max);
    for (const auto& g : r.regions) EXPECT_TRUE(g.bbox.fits(64, 64));
  }
}

TEST(Split, PaperSizes) {
  const auto m = synthetic_manifest(5712, 1);
  const auto [train, val] = split_train_val(m, 0.8, 3);
  EXPECT_EQ(train.size(), 4570u);
  EXPECT_EQ(val.size(), 1142u);
  const auto [t10, v10] = split_train_val(synthetic_manifest(10, 2), 0.8, 0);
  EXPECT_EQ(t10.size(), 8u);
  EXPECT_EQ(v10.size(), 2u);
}

TEST(Split, DisjointExhaustiveAndStratified) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 300;
    const auto m = synthetic_manifest(n, rng());
    const double frac = 0.5 + (rng() % 45) / 100.0;
    const auto [train, val] = split_train_val(m, frac, rng());
    std::multiset<std::uint64_t> all, parts;
    for (const auto& r : m.records) all.insert(r.seed_used);
    std::set<std::uint64_t> tr;
    for (const auto& r : train.records) parts.insert(r.seed_used), tr.insert(r.seed_used);
    for (const auto& r : val.records) {
      parts.insert(r.seed_used);
      EXPECT_EQ(tr.count(r.seed_used), 0u);
    }
    EXPECT_EQ(all, parts);
    EXPECT_EQ(val.size(), static_cast<std::size_t>(std::floor((1 - frac) * n + 1e-9)));
    std::array<int, 3> total{}, in_val{};
    for (const auto& r : m.records) ++total[class_index(r.cls)];
    for (const auto& r : val.records) ++in_val[class_index(r.cls)];
    for (int c = 0; c < 3; ++c)
      EXPECT_LE(std::abs(in_val[c] - static_cast<double>(val.size()) * total[c] / n), 1.0);
  }
}

TEST(Split, Errors) {
  EXPECT_ERROR_CODE(split_train_val(DatasetManifest{}, 0.8, 0), ErrorCode::EmptyManifest);
  EXPECT_ERROR_CODE(split_train_val(synthetic_manifest(4, 0), 1.0, 0), ErrorCode::InvalidParameter);
}

TEST(Manifest, ParseErrorsAndEmptyFile) {
  TempDir dir("manifest");
  std::ofstream(dir / "empty.jsonl").close();
  EXPECT_TRUE(load_manifest(dir / "empty.jsonl").empty());

  ManifestRecord r;
  r.image_path = "x.ppm";
  r.regions = {{{0, 0, 2, 2}, IssueClass::WasteDisposal}};
  std::string line = record_to_json_line(r);
  EXPECT_EQ(record_from_json_line(line), r);

  std::string bad = line;
  bad.replace(bad.find("InfrastructureDamage"), 20, "Graffiti");
  std::ofstream(dir / "bad.jsonl") << line << "\n" << bad << "\n";
  try {
    load_manifest(dir / "bad.jsonl", false);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Parse);
    EXPECT_NE(std::string(e.what()).find("Graffiti"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("2"), std::string::npos);
  }

  std::ofstream(dir / "dangling.jsonl") << line << "\n";
  try {
    load_manifest(dir / "dangling.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DanglingReference);
    EXPECT_NE(std::string(e.what()).find("x.ppm"), std::string::npos);
  }
}
