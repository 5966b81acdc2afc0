#pragma once

// Segmentation by inversion: generator components become pixel labels, a
// segmenter learns them under a permutation-matched loss, ARI scores it on
// real scenes.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string_view>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "kgan/composition.hpp"
#include "kgan/datasets.hpp"
#include "kgan/models.hpp"

namespace kgan {

struct LabelMap {
  torch::Tensor labels;  // [B,H,W] int64; 0 = background, 1..K = components
  torch::Tensor ignore;  // [B,H,W] bool; excluded from losses and scores
};

enum class LabelMode { threshold, alpha_weights };

std::string_view to_string(LabelMode m);
LabelMode parse_label_mode(std::string_view s);

/// threshold: the component of highest intensity among those above 0.1, else
/// background; pixels claimed by two or more components are also ignored.
/// alpha_weights: argmax over the K+1 composite weights (background -> 0).
LabelMap extract_labels(const std::vector<ComponentImage>& components, LabelMode mode);

/// Checks that `mode` suits the generator's compose mode first.
LabelMap extract_labels(const GeneratorOutput& out, ComposeMode compose, LabelMode mode);

struct MatchResult {
  torch::Tensor loss;        // scalar, mean over the batch of per-sample minima
  torch::Tensor per_sample;  // [B]
  /// permutations[b][j] = object channel (0-based) that predicts label j+1.
  std::vector<std::vector<int>> permutations;
};

inline constexpr int kMaxMatchedComponents = 6;

/// Per sample, the smallest ignore-masked mean cross-entropy over all K!
/// orderings of the object channels of `logits` [B,K+1,H,W]. Channel 0 is the
/// background and never moves. Gradients reach only the winning ordering.
MatchResult permutation_matched_loss(const torch::Tensor& logits, const LabelMap& target);

class SegmenterImpl : public torch::nn::Module {
 public:
  SegmenterImpl(int components, std::int64_t width = 32);

  /// [B,3,H,W] -> [B,K+1,H,W] logits. H and W must be multiples of 16.
  torch::Tensor forward(const torch::Tensor& images);
  /// Argmax labels [B,H,W], inference mode.
  torch::Tensor predict(const torch::Tensor& images);

  int components() const { return components_; }
  std::int64_t width() const { return width_; }

 private:
  int components_;
  std::int64_t width_;
  std::vector<torch::nn::Sequential> down_;
  std::vector<torch::nn::Sequential> up_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(Segmenter);

void save_segmenter(const std::filesystem::path& path, Segmenter net);
Segmenter load_segmenter(const std::filesystem::path& path);

/// Yields `n` (images [n,3,H,W], labels) pairs per call.
using LabelSource = std::function<std::pair<torch::Tensor, LabelMap>(std::int64_t n)>;

/// Fresh generator samples on every call. Rejects compose/label mode pairs
/// that extract_labels cannot handle.
LabelSource generator_label_source(StructuredGenerator generator, LabelMode mode, std::uint64_t seed);

/// Ground-truth labels of a dataset split, overlap pixels ignored.
LabelSource dataset_label_source(const DatasetBundle& bundle, Split split, std::uint64_t seed);

/// Materializes `n` generated pairs as a train-only dataset tagged `variant`.
/// Ignored pixels carry the overlap flag.
DatasetBundle generated_bundle(StructuredGenerator generator, LabelMode mode, std::int64_t n,
                               std::uint64_t seed, Variant variant = Variant::independent_mm);

struct SegmenterTrainConfig {
  std::int64_t steps = 5'000;
  std::int64_t batch_size = 32;
  double learning_rate = 1e-3;
  std::int64_t width = 32;
  std::uint64_t seed = 0;
};

struct SegmenterTrainResult {
  Segmenter net{nullptr};
  std::vector<double> losses;  // one per step
};

SegmenterTrainResult train_segmenter(const LabelSource& source, int components,
                                     const SegmenterTrainConfig& cfg,
                                     const std::function<void(std::int64_t, double)>& on_step = {});

/// Adjusted Rand index over the pixels where `mask` is set; maps are [H,W].
/// When both partitions put every pixel in one cluster the index is 1.
double ari_score(const torch::Tensor& predicted, const torch::Tensor& truth, const torch::Tensor& mask);

/// Digit pixels of the ground truth, minus overlap pixels for the additive
/// variants. [H,W] bool.
torch::Tensor eval_mask(const LabeledScene& scene, Variant variant);

/// Ground-truth instance ids [H,W] int64.
torch::Tensor truth_labels(const LabeledScene& scene);

struct SegmentationReport {
  std::vector<std::pair<std::int64_t, double>> per_image;  // (scene id, ARI)
  double mean = 0;
  double stddev = 0;
  std::int64_t skipped = 0;  // scenes with an empty evaluation mask
};

/// Scores the first `n` scenes of `split` (all when n <= 0).
SegmentationReport evaluate_segmenter(Segmenter net, const DatasetBundle& bundle, Split split,
                                      std::int64_t n = 0);

}  // namespace kgan
