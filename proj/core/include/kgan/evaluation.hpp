#pragma once

// FID with a pluggable embedder, latent traversal and per-component dumps.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "kgan/datasets.hpp"
#include "kgan/image.hpp"
#include "kgan/models.hpp"

namespace kgan {

struct EmbeddingStats {
  torch::Tensor mean;        // [D], float64
  torch::Tensor covariance;  // [D,D], float64, unbiased
  std::int64_t count = 0;

  std::int64_t dim() const { return mean.size(0); }
  /// Fewer samples than dimensions leaves the covariance rank deficient.
  bool well_conditioned() const { return count >= dim(); }
};

/// Sample mean and unbiased (N-1) covariance of [N,D] features. N >= 2.
EmbeddingStats gaussian_stats(const torch::Tensor& features);

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}). The trace of the root
/// is taken from the eigenvalues of S_a^{1/2} S_b S_a^{1/2}, negatives clamped.
double frechet_distance(const EmbeddingStats& a, const EmbeddingStats& b);

// --- embedders -------------------------------------------------------------------

class Embedder {
 public:
  virtual ~Embedder() = default;
  /// [N,3,H,W] in [0,1] -> [N,D] features.
  virtual torch::Tensor embed(const torch::Tensor& images) = 0;
  virtual std::int64_t dim() const = 0;
  virtual std::string name() const = 0;
};

/// Small convolutional digit classifier; its globally pooled penultimate
/// activations serve as features. Fully convolutional, so it embeds whole
/// scenes after being trained on single-object crops.
class ConvClassifierImpl : public torch::nn::Module {
 public:
  explicit ConvClassifierImpl(std::int64_t classes = 10, std::int64_t width = 32);

  torch::Tensor features(const torch::Tensor& images);
  torch::Tensor forward(const torch::Tensor& images);

  std::int64_t feature_dim() const { return 2 * width_; }

 private:
  std::int64_t width_;
  torch::nn::Sequential trunk{nullptr};
  torch::nn::Linear classifier{nullptr};
};
TORCH_MODULE(ConvClassifier);

struct EmbedderTrainConfig {
  std::int64_t steps = 600;
  std::int64_t batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

class BuiltinEmbedder final : public Embedder {
 public:
  explicit BuiltinEmbedder(ConvClassifier net, bool trained);

  /// Trains on crops around each object's box from the train split. Datasets
  /// without object metadata get the seeded, untrained network.
  static std::shared_ptr<BuiltinEmbedder> train(const DatasetBundle& bundle,
                                                const EmbedderTrainConfig& cfg);
  static std::shared_ptr<BuiltinEmbedder> load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  torch::Tensor embed(const torch::Tensor& images) override;
  std::int64_t dim() const override { return net_->feature_dim(); }
  std::string name() const override { return trained_ ? "builtin" : "builtin-untrained"; }

  /// Classification accuracy on crops from `split` (diagnostic).
  double crop_accuracy(const DatasetBundle& bundle, Split split);

 private:
  ConvClassifier net_;
  bool trained_;
};

/// TorchScript module mapping [N,3,H,W] images to [N,D] features, e.g. an
/// exported Inception network for paper-comparable numbers.
class ScriptedEmbedder final : public Embedder {
 public:
  explicit ScriptedEmbedder(const std::filesystem::path& path);
  ~ScriptedEmbedder() override;

  torch::Tensor embed(const torch::Tensor& images) override;
  std::int64_t dim() const override;
  std::string name() const override { return "script"; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// "builtin" (train on `bundle`), "builtin:PATH" (load), "script:PATH".
std::shared_ptr<Embedder> make_embedder(const std::string& spec, const DatasetBundle& bundle,
                                        const EmbedderTrainConfig& cfg = {});

// --- FID ---------------------------------------------------------------------------

/// Produces `n` images [n,3,H,W] in [0,1]; called repeatedly in batches.
using ImageSampler = std::function<torch::Tensor(std::int64_t n)>;

/// Samples from the generator in inference mode with its own seeded stream.
ImageSampler generator_sampler(StructuredGenerator generator, std::uint64_t seed);

/// Uniform draws with replacement from a dataset split.
ImageSampler dataset_sampler(const DatasetBundle& bundle, Split split, std::uint64_t seed);

EmbeddingStats embed_stats(Embedder& embedder, const ImageSampler& sampler, std::int64_t n,
                           std::int64_t batch_size = 250);

/// Stats of the `n` reference scenes with the smallest ids in `split` (all of
/// them, with a warning, when the split is smaller).
EmbeddingStats reference_stats(Embedder& embedder, const DatasetBundle& bundle, std::int64_t n,
                               Split split = Split::holdout);

double compute_fid(const ImageSampler& sampler, const DatasetBundle& bundle, Embedder& embedder,
                   std::int64_t n_samples, Split reference = Split::holdout);

// --- traversal and dumps -------------------------------------------------------------

struct TraversalSpec {
  int component = 0;  // 0..K-1, or kBackgroundComponent
  torch::Tensor direction;  // [D], nonzero
  std::vector<double> increments;

  static constexpr int kBackgroundComponent = -1;
  /// Eight evenly spaced increments from -1 to +1.
  static std::vector<double> default_increments();
};

/// For each increment t: z_c <- z_c + t * direction, everything else fixed.
std::vector<GeneratorOutput> traverse_latent_outputs(StructuredGenerator generator,
                                                     const LatentSet& base,
                                                     const TraversalSpec& spec);

/// Composite images [B,3,H,W] in increment order.
std::vector<torch::Tensor> traverse_latent(StructuredGenerator generator, const LatentSet& base,
                                           const TraversalSpec& spec);

/// Layer images for one sample: background (if any) as RGB, each object as
/// RGBA composited on white so zero alpha shows white, then the composite.
std::vector<ImageU8> render_layers(const GeneratorOutput& out, std::int64_t sample);

}  // namespace kgan
