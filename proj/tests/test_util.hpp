#pragma once

#include <filesystem>
#include <string>

#include "ulsa/image.hpp"
#include "ulsa/rng.hpp"
#include "ulsa/tensor.hpp"

namespace ulsa::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

inline Image random_image(std::size_t h, std::size_t w, Rng& rng, double lo = 0.0, double hi = 1.0) {
  return Image(random_tensor({h, w, 3}, rng, lo, hi));
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("ulsa_test_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
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

}  // namespace ulsa::testing
