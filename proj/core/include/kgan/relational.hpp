#pragma once

// Relational stage: self-attention blocks that update every object latent as a
// function of all others before decoding. Latents are batched [B,N,D].

#include <optional>
#include <utility>

#include <torch/torch.h>

namespace kgan {

struct RelationalConfig {
  int n_blocks = 0;  // 0: the stage is the identity
  int n_heads = 1;
  bool share_across_blocks = false;
  bool include_background = false;

  void validate() const;
  bool enabled() const { return n_blocks > 0; }
  bool operator==(const RelationalConfig&) const = default;
};

inline constexpr std::int64_t kAttentionKeyDim = 32;
inline constexpr std::int64_t kAttentionHiddenDim = 64;
inline constexpr double kLayerNormEps = 1e-5;

struct AttentionOutput {
  torch::Tensor values;   // [B,N,d]
  torch::Tensor weights;  // [B,N,N], rows sum to one
};

/// softmax(Q K^T / sqrt(d)) V with d the value width. Max-subtracted softmax.
AttentionOutput scaled_dot_product_attention(const torch::Tensor& queries, const torch::Tensor& keys,
                                             const torch::Tensor& values);

/// One head: q/k/v = LayerNorm(ReLU(Linear(z))) each 32 wide; attention; then
/// the update MLP (32 -> 64 -> D, ReLU after both layers). Returns the update
/// vectors before the residual.
class AttentionHeadImpl : public torch::nn::Module {
 public:
  explicit AttentionHeadImpl(std::int64_t latent_dim);

  torch::Tensor forward(const torch::Tensor& latents);
  AttentionOutput attend(const torch::Tensor& latents);

  torch::nn::Linear query{nullptr}, key{nullptr}, value{nullptr};
  torch::nn::LayerNorm query_norm{nullptr}, key_norm{nullptr}, value_norm{nullptr};
  torch::nn::Linear update_hidden{nullptr}, update_out{nullptr};
};
TORCH_MODULE(AttentionHead);

/// z_hat = LayerNorm(u + z). With several heads, u = LayerNorm(ReLU(Linear(concat heads))).
class AttentionBlockImpl : public torch::nn::Module {
 public:
  AttentionBlockImpl(std::int64_t latent_dim, int n_heads);

  torch::Tensor forward(const torch::Tensor& latents);

  torch::nn::ModuleList heads;
  torch::nn::Linear combiner{nullptr};
  torch::nn::LayerNorm combiner_norm{nullptr};
  torch::nn::LayerNorm output_norm{nullptr};
};
TORCH_MODULE(AttentionBlock);

class RelationalStageImpl : public torch::nn::Module {
 public:
  RelationalStageImpl(const RelationalConfig& cfg, std::int64_t latent_dim);

  /// objects [B,K,D]; background [B,D] (optional). The background latent is
  /// appended as row K of the attention input iff include_background, else it
  /// is returned untouched.
  std::pair<torch::Tensor, std::optional<torch::Tensor>> forward(
      const torch::Tensor& objects, const std::optional<torch::Tensor>& background = std::nullopt);

  /// The block applied at position `i` (the same object for every i when shared).
  AttentionBlock block(int i) const;

  const RelationalConfig& config() const { return cfg_; }

 private:
  RelationalConfig cfg_;
  std::vector<AttentionBlock> blocks_;
};
TORCH_MODULE(RelationalStage);

}  // namespace kgan
