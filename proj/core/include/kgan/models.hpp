#pragma once

// Latent prior, DCGAN-style object/background generators, the structured
// generator that ties them together, and the spectrally normalized
// discriminator.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "kgan/composition.hpp"
#include "kgan/relational.hpp"

namespace kgan {

enum class ComposeMode { sum_clip, threshold_alpha, learned_alpha };

std::string_view to_string(ComposeMode m);
ComposeMode parse_compose_mode(std::string_view s);

struct ModelConfig {
  int K = 3;
  int image_size = 64;
  ComposeMode compose_mode = ComposeMode::sum_clip;
  RelationalConfig relational;
  bool use_background = false;
  std::int64_t latent_dim = 64;
  std::int64_t generator_channels = 512;     // width of the 4x4 map, halved per stage
  std::int64_t discriminator_channels = 64;  // width of the first stage, doubled per stage

  std::vector<std::string> violations() const;
  void validate() const;
  /// Stride-2 stages between 4x4 and the output resolution (4 at 64px, 5 at 128px).
  int stages() const;
  /// Paper-style run tag, e.g. "3-GAN ind.", "5-GAN rel. bg.", or "GAN".
  std::string tag() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LatentSet {
  torch::Tensor objects;                    // [B,K,D], entries in [-1,1]
  std::optional<torch::Tensor> background;  // [B,D]

  std::int64_t batch() const { return objects.size(0); }
  LatentSet clone() const;
};

/// K iid UNIFORM(-1,1) latents per sample, plus a background latent iff the
/// config has a background generator.
LatentSet sample_latents(const ModelConfig& cfg, std::int64_t batch, torch::Generator& gen);

/// Initial bias of the object generator's output layer. Objects start faint
/// (sigmoid(-2) ~ 0.12): with zero bias three layers sum to ~1.5, every pixel
/// sits on the clip and the generator receives no gradient at all.
inline constexpr double kObjectOutputBias = -2.0;

/// Latent -> 4x4xC projection, stride-2 transposed convolutions halving the
/// width (batch-norm + ReLU between), sigmoid head.
class DcganDecoderImpl : public torch::nn::Module {
 public:
  DcganDecoderImpl(std::int64_t latent_dim, std::int64_t out_channels, int image_size,
                   std::int64_t base_channels, double output_bias = 0.0);

  torch::Tensor forward(const torch::Tensor& z);

 private:
  std::int64_t base_channels_;
  torch::nn::Linear project{nullptr};
  torch::nn::BatchNorm2d project_norm{nullptr};
  torch::nn::Sequential body{nullptr};
};
TORCH_MODULE(DcganDecoder);

struct GeneratorOutput {
  CompositeResult composite;
  std::vector<ComponentImage> components;  // front-most first
  std::optional<ComponentImage> background;
  torch::Tensor object_latents;  // after the relational stage, [B,K,D]
};

class StructuredGeneratorImpl : public torch::nn::Module {
 public:
  explicit StructuredGeneratorImpl(const ModelConfig& cfg);

  GeneratorOutput forward(const LatentSet& latents);

  const ModelConfig& config() const { return cfg_; }

  DcganDecoder object_generator{nullptr};
  DcganDecoder background_generator{nullptr};
  RelationalStage relational{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(StructuredGenerator);

// --- spectral normalization ---------------------------------------------------

struct SpectralNormState {
  torch::Tensor u;  // left singular vector estimate, unit norm
  std::int64_t iterations = 0;
};

struct SpectralNormResult {
  torch::Tensor weight;  // W / sigma
  torch::Tensor sigma;   // u^T W v, floored at 1e-12
};

inline constexpr double kSigmaFloor = 1e-12;

/// Runs `steps` power iterations on the [out,in] matrix, updating state.u,
/// and returns the normalized matrix. Gradients flow through W (and sigma),
/// not through the singular-vector estimates.
SpectralNormResult spectral_normalize(const torch::Tensor& weight, SpectralNormState& state,
                                      int steps = 1);

/// Convolution or linear map whose weight may be spectrally normalized. The
/// power-iteration vector is a buffer and only advances in training mode.
class NormalizedLayerImpl : public torch::nn::Module {
 public:
  enum class Kind { conv, linear };

  NormalizedLayerImpl(Kind kind, std::int64_t in, std::int64_t out, bool spectral,
                      std::int64_t kernel = 4, std::int64_t stride = 2, std::int64_t padding = 1);

  torch::Tensor forward(const torch::Tensor& x);

  /// Weight actually applied, reshaped to [out, in*k*k]. Does not advance u.
  torch::Tensor effective_matrix();
  void power_iterate(int steps);

  torch::Tensor weight, bias, u;

 private:
  torch::Tensor normalized_weight(bool advance);

  Kind kind_;
  bool spectral_;
  std::int64_t stride_, padding_;
};
TORCH_MODULE(NormalizedLayer);

/// DCGAN discriminator: stride-2 convolutions doubling the width down to 4x4,
/// leaky ReLU (0.2), batch-norm only without spectral norm, linear score head.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  DiscriminatorImpl(const ModelConfig& cfg, bool spectral_norm);

  /// [B,3,S,S] -> [B] scores (logits or critic values).
  torch::Tensor forward(const torch::Tensor& images);

  std::vector<torch::Tensor> effective_matrices();
  void power_iterate(int steps);
  bool spectral_norm() const { return spectral_; }

 private:
  int image_size_;
  bool spectral_;
  std::vector<NormalizedLayer> convs_;
  std::vector<torch::nn::BatchNorm2d> norms_;
  NormalizedLayer head_{nullptr};
};
TORCH_MODULE(Discriminator);

std::int64_t parameter_count(const torch::nn::Module& module);

}  // namespace kgan
