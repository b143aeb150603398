#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "civiclens/error.hpp"
#include "civiclens/imaging.hpp"

namespace civiclens::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("civiclens-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline imaging::RasterImage random_unit_image(int w, int h, int c, std::uint64_t seed) {
  imaging::RasterImage img(w, h, c, imaging::ValueDomain::Unit);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

inline imaging::RasterImage random_byte_image(int w, int h, int c, std::uint64_t seed) {
  imaging::RasterImage img(w, h, c, imaging::ValueDomain::Byte);
  std::mt19937_64 rng(seed);
  for (auto& v : img.pixels) v = static_cast<double>(rng() % 256);
  return img;
}

}  // namespace civiclens::testing

// Asserts that `stmt` throws civiclens::Error carrying `expected_code`.
#define EXPECT_ERROR_CODE(stmt, expected_code)                                        \
  do {                                                                                \
    try {                                                                             \
      stmt;                                                                           \
      ADD_FAILURE() << "expected " #expected_code " from " #stmt;                     \
    } catch (const ::civiclens::Error& e_) {                                          \
      EXPECT_EQ(e_.code(), expected_code) << e_.what();                               \
    } catch (const std::exception& e_) {                                              \
      ADD_FAILURE() << "unexpected exception type from " #stmt ": " << e_.what();     \
    }                                                                                 \
  } while (0)
