#include "kgan/relational.hpp"

#include <cmath>

#include "kgan/error.hpp"

namespace kgan {

void RelationalConfig::validate() const {
  if (n_blocks < 0 || n_blocks > 2) throw ValidationError("relational.n_blocks must be in 0..2");
  if (n_heads < 1 || n_heads > 2) throw ValidationError("relational.n_heads must be in 1..2");
}

AttentionOutput scaled_dot_product_attention(const torch::Tensor& queries, const torch::Tensor& keys,
                                             const torch::Tensor& values) {
  if (queries.dim() != 3 || keys.sizes() != queries.sizes() || values.dim() != 3 ||
      values.size(1) != keys.size(1))
    throw ShapeError("attention expects [B,N,d] queries/keys/values");
  const double scale = 1.0 / std::sqrt(static_cast<double>(values.size(2)));
  auto logits = torch::bmm(queries, keys.transpose(1, 2)) * scale;
  logits = logits - std::get<0>(logits.max(-1, true)).detach();
  auto e = logits.exp();
  auto weights = e / e.sum(-1, true);
  return {torch::bmm(weights, values), weights};
}

namespace {

torch::nn::LayerNorm layer_norm(std::int64_t width) {
  return torch::nn::LayerNorm(torch::nn::LayerNormOptions({width}).eps(kLayerNormEps));
}

void check_latents(const torch::Tensor& z) {
  if (z.dim() != 3 || z.size(1) < 1) throw ShapeError("latents must be [B,N,D] with N >= 1");
  if (!torch::isfinite(z).all().item<bool>()) throw ValidationError("non-finite latents");
}

}  // namespace

AttentionHeadImpl::AttentionHeadImpl(std::int64_t latent_dim) {
  query = register_module("query", torch::nn::Linear(latent_dim, kAttentionKeyDim));
  key = register_module("key", torch::nn::Linear(latent_dim, kAttentionKeyDim));
  value = register_module("value", torch::nn::Linear(latent_dim, kAttentionKeyDim));
  query_norm = register_module("query_norm", layer_norm(kAttentionKeyDim));
  key_norm = register_module("key_norm", layer_norm(kAttentionKeyDim));
  value_norm = register_module("value_norm", layer_norm(kAttentionKeyDim));
  update_hidden = register_module("update_hidden", torch::nn::Linear(kAttentionKeyDim, kAttentionHiddenDim));
  update_out = register_module("update_out", torch::nn::Linear(kAttentionHiddenDim, latent_dim));
  // Small final layer: the residual path dominates at initialisation.
  torch::NoGradGuard no_grad;
  update_out->weight.mul_(0.1);
  update_out->bias.mul_(0.1);
}

AttentionOutput AttentionHeadImpl::attend(const torch::Tensor& latents) {
  check_latents(latents);
  auto q = query_norm(torch::relu(query(latents)));
  auto k = key_norm(torch::relu(key(latents)));
  auto v = value_norm(torch::relu(value(latents)));
  return kgan::scaled_dot_product_attention(q, k, v);
}

torch::Tensor AttentionHeadImpl::forward(const torch::Tensor& latents) {
  auto a = attend(latents).values;
  return torch::relu(update_out(torch::relu(update_hidden(a))));
}

AttentionBlockImpl::AttentionBlockImpl(std::int64_t latent_dim, int n_heads) {
  if (n_heads < 1) throw ValidationError("attention block needs at least one head");
  heads = register_module("heads", torch::nn::ModuleList());
  for (int h = 0; h < n_heads; ++h) heads->push_back(AttentionHead(latent_dim));
  if (n_heads > 1) {
    combiner = register_module("combiner", torch::nn::Linear(n_heads * latent_dim, latent_dim));
    combiner_norm = register_module("combiner_norm", layer_norm(latent_dim));
  }
  output_norm = register_module("output_norm", layer_norm(latent_dim));
}

torch::Tensor AttentionBlockImpl::forward(const torch::Tensor& latents) {
  torch::Tensor update;
  if (heads->size() == 1) {
    update = heads->ptr<AttentionHeadImpl>(0)->forward(latents);
  } else {
    std::vector<torch::Tensor> outs;
    for (std::size_t h = 0; h < heads->size(); ++h)
      outs.push_back(heads->ptr<AttentionHeadImpl>(h)->forward(latents));
    update = combiner_norm(torch::relu(combiner(torch::cat(outs, -1))));
  }
  return output_norm(update + latents);
}

RelationalStageImpl::RelationalStageImpl(const RelationalConfig& cfg, std::int64_t latent_dim)
    : cfg_(cfg) {
  cfg_.validate();
  const int unique = cfg_.n_blocks == 0 ? 0 : (cfg_.share_across_blocks ? 1 : cfg_.n_blocks);
  for (int b = 0; b < unique; ++b)
    blocks_.push_back(register_module("block" + std::to_string(b), AttentionBlock(latent_dim, cfg_.n_heads)));
}

AttentionBlock RelationalStageImpl::block(int i) const {
  if (i < 0 || i >= cfg_.n_blocks) throw ValidationError("block index out of range");
  return cfg_.share_across_blocks ? blocks_.front() : blocks_[i];
}

std::pair<torch::Tensor, std::optional<torch::Tensor>> RelationalStageImpl::forward(
    const torch::Tensor& objects, const std::optional<torch::Tensor>& background) {
  if (objects.dim() != 3) throw ShapeError("object latents must be [B,K,D]");
  if (!cfg_.enabled()) return {objects, background};

  const bool joint = cfg_.include_background && background.has_value();
  if (cfg_.include_background && !background)
    throw ValidationError("relational stage expects a background latent");
  auto z = joint ? torch::cat({objects, background->unsqueeze(1)}, 1) : objects;
  for (int b = 0; b < cfg_.n_blocks; ++b) z = block(b)->forward(z);

  const auto k = objects.size(1);
  if (joint) return {z.narrow(1, 0, k), z.select(1, k)};
  return {z, background};
}

}  // namespace kgan
