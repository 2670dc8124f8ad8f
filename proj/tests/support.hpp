// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

// Shared generators and fixtures for the test binaries.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "lorafuse/adapter.hpp"
#include "lorafuse/matrix.hpp"

namespace lorafuse::testing {

#ifndef LORAFUSE_DATA_DIR
#define LORAFUSE_DATA_DIR "data"
#endif

inline std::filesystem::path data_dir() { return LORAFUSE_DATA_DIR; }

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (double& x : m.data()) x = dist(rng);
  return m;
}

inline std::size_t uniform_size(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline double uniform_real(std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Random adapter over `modules` q/k/v modules of a d_out x d_in base.
inline LoraAdapter random_adapter(std::mt19937_64& rng, std::size_t d_out, std::size_t d_in, int rank,
                                  double alpha, std::size_t layers = 1, std::string name = "random") {
  LoraAdapter a{std::move(name), {}};
  const auto r = static_cast<std::size_t>(rank);
  for (std::size_t l = 0; l < layers; ++l)
    for (Projection p : {Projection::q, Projection::k, Projection::v})
      a.layers.emplace(module_id(l, p), LoraLayer{random_matrix(rng, d_out, r), random_matrix(rng, r, d_in), rank, alpha});
  return a;
}

/// Fresh per-test directory under the system temp dir, removed on exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("lorafuse-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace lorafuse::testing
