#pragma once

#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "moelab/model.hpp"
#include "moelab/rng.hpp"

namespace testsupport {

// Self-deleting temp directory under the system temp root.
struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& stem) {
    auto base = std::filesystem::temp_directory_path();
    for (int i = 0; i < 10000; ++i) {
      auto cand = base / (stem + "_" + std::to_string(::getpid()) + "_" + std::to_string(i));
      std::error_code ec;
      if (std::filesystem::create_directory(cand, ec)) {
        path = cand;
        return;
      }
    }
    std::fprintf(stderr, "TempDir: could not create a directory under %s\n", base.c_str());
    std::abort();
  }

  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }

  std::string str() const { return path.string(); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

inline moelab::ModelConfig tiny_config() {
  moelab::ModelConfig cfg;
  cfg.vocab_size = 20;
  cfg.width = 16;
  cfg.blocks = 2;
  cfg.experts_per_layer = 6;
  cfg.active_experts = 2;
  cfg.shared_experts = 0;
  cfg.expert_hidden = 24;
  cfg.max_context = 24;
  return cfg;
}

inline moelab::Params tiny_params(uint64_t seed = 7,
                                  moelab::ModelConfig cfg = tiny_config()) {
  moelab::Rng rng(seed);
  return moelab::init_params<float>(cfg, rng);
}

inline std::vector<int> random_tokens(moelab::Rng& rng, int len, int vocab) {
  std::vector<int> toks(static_cast<size_t>(len));
  for (auto& t : toks) t = static_cast<int>(rng.uniform_below(static_cast<uint64_t>(vocab)));
  return toks;
}

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline bool files_identical(const std::string& a, const std::string& b) {
  return slurp(a) == slurp(b);
}

}  // namespace testsupport
