#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include <unistd.h>

#include "cvc/common.hpp"
#include "cvc/raster.hpp"

namespace testing_support {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("cvc_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline cvc::BinaryMask random_mask(int w, int h, double density, std::uint64_t seed) {
  cvc::Rng rng(seed);
  cvc::BinaryMask m(w, h);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.bernoulli(density) ? 1 : 0;
  return m;
}

inline cvc::ProbMap random_map(int w, int h, std::uint64_t seed) {
  cvc::Rng rng(seed);
  cvc::ProbMap m(w, h);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform();
  return m;
}

}  // namespace testing_support
