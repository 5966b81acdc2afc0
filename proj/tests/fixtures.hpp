#pragma once

// Small models and datasets shared by the tests.

#include <unistd.h>

#include <filesystem>
#include <string>

#include "kgan/datasets.hpp"
#include "kgan/models.hpp"
#include "kgan/training.hpp"

namespace fixtures {

inline kgan::ModelConfig tiny_model(int k = 3) {
  kgan::ModelConfig c;
  c.K = k;
  c.generator_channels = 32;
  c.discriminator_channels = 8;
  return c;
}

inline kgan::TrainConfig tiny_train(std::uint64_t seed = 0) {
  kgan::TrainConfig t;
  t.batch_size = 4;
  t.total_steps = 4;
  t.checkpoint_every = 2;
  t.log_every = 1;
  t.fid_samples = 16;
  t.seed = seed;
  t.threads = 1;
  return t;
}

inline const kgan::ProceduralDigitCorpus& digits() {
  static kgan::ProceduralDigitCorpus corpus(20, 99);
  return corpus;
}

inline kgan::DatasetBundle small_bundle(kgan::Variant v = kgan::Variant::independent_mm, std::int64_t train = 24,
                                        std::int64_t holdout = 16, std::int64_t test = 8, std::uint64_t seed = 0) {
  return kgan::build_multi_mnist(kgan::SceneSpec::defaults(v, seed), kgan::SplitCounts{train, holdout, test},
                                 digits());
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("kgan-test-" + tag + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace fixtures
