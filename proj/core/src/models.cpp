#include "kgan/models.hpp"

#include <bit>

#include "kgan/error.hpp"

namespace kgan {

std::string_view to_string(ComposeMode m) {
  switch (m) {
    case ComposeMode::sum_clip: return "sum_clip";
    case ComposeMode::threshold_alpha: return "threshold_alpha";
    case ComposeMode::learned_alpha: return "learned_alpha";
  }
  return "?";
}

ComposeMode parse_compose_mode(std::string_view s) {
  for (auto m : {ComposeMode::sum_clip, ComposeMode::threshold_alpha, ComposeMode::learned_alpha})
    if (to_string(m) == s) return m;
  throw ValidationError("unknown compose mode '" + std::string(s) + "'");
}

std::vector<std::string> ModelConfig::violations() const {
  std::vector<std::string> v;
  if (K < 1) v.push_back("model.K must be >= 1");
  if (image_size != 64 && image_size != 128) v.push_back("model.image_size must be 64 or 128");
  if (use_background && compose_mode == ComposeMode::sum_clip)
    v.push_back("a background generator requires an alpha compose mode");
  if (latent_dim < 1) v.push_back("model.latent_dim must be positive");
  if ((image_size == 64 || image_size == 128) && generator_channels < (std::int64_t{1} << (stages() - 1)))
    v.push_back("model.generator_channels too small for the number of stages");
  if (discriminator_channels < 1) v.push_back("model.discriminator_channels must be positive");
  if (relational.n_blocks < 0 || relational.n_blocks > 2) v.push_back("relational.n_blocks must be in 0..2");
  if (relational.n_heads < 1 || relational.n_heads > 2) v.push_back("relational.n_heads must be in 1..2");
  if (relational.include_background && !use_background)
    v.push_back("relational.include_background needs a background generator");
  return v;
}

void ModelConfig::validate() const { throw_if_any(violations()); }

int ModelConfig::stages() const { return std::countr_zero(static_cast<unsigned>(image_size / 4)); }

std::string ModelConfig::tag() const {
  if (K == 1 && !relational.enabled() && !use_background) return "GAN";
  std::string t = std::to_string(K) + "-GAN " + (relational.enabled() ? "rel." : "ind.");
  if (use_background) t += " bg.";
  return t;
}

LatentSet LatentSet::clone() const {
  LatentSet c{objects.clone(), std::nullopt};
  if (background) c.background = background->clone();
  return c;
}

LatentSet sample_latents(const ModelConfig& cfg, std::int64_t batch, torch::Generator& gen) {
  cfg.validate();
  LatentSet z;
  z.objects = torch::rand({batch, cfg.K, cfg.latent_dim}, gen) * 2 - 1;
  if (cfg.use_background) z.background = torch::rand({batch, cfg.latent_dim}, gen) * 2 - 1;
  return z;
}

// --- generators ------------------------------------------------------------------

DcganDecoderImpl::DcganDecoderImpl(std::int64_t latent_dim, std::int64_t out_channels,
                                   int image_size, std::int64_t base_channels, double output_bias)
    : base_channels_(base_channels) {
  project = register_module("project", torch::nn::Linear(latent_dim, 16 * base_channels));
  project_norm = register_module("project_norm", torch::nn::BatchNorm2d(base_channels));
  body = register_module("body", torch::nn::Sequential());
  const int stages = std::countr_zero(static_cast<unsigned>(image_size / 4));
  std::int64_t ch = base_channels;
  for (int s = 0; s < stages; ++s) {
    const bool last = s == stages - 1;
    const std::int64_t next = last ? out_channels : ch / 2;
    torch::nn::ConvTranspose2d conv(torch::nn::ConvTranspose2dOptions(ch, next, 4).stride(2).padding(1).bias(last));
    if (last) torch::nn::init::constant_(conv->bias, output_bias);
    body->push_back(conv);
    if (!last) {
      body->push_back(torch::nn::BatchNorm2d(next));
      body->push_back(torch::nn::ReLU());
    }
    ch = next;
  }
  body->push_back(torch::nn::Sigmoid());
}

torch::Tensor DcganDecoderImpl::forward(const torch::Tensor& z) {
  auto h = project(z).view({z.size(0), base_channels_, 4, 4});
  return body->forward(torch::relu(project_norm(h)));
}

StructuredGeneratorImpl::StructuredGeneratorImpl(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::int64_t out = cfg_.compose_mode == ComposeMode::learned_alpha ? 4 : 3;
  object_generator = register_module(
      "object_generator",
      DcganDecoder(cfg_.latent_dim, out, cfg_.image_size, cfg_.generator_channels, kObjectOutputBias));
  if (cfg_.use_background)
    background_generator = register_module(
        "background_generator",
        DcganDecoder(cfg_.latent_dim, 3, cfg_.image_size, cfg_.generator_channels));
  relational = register_module("relational", RelationalStage(cfg_.relational, cfg_.latent_dim));
}

GeneratorOutput StructuredGeneratorImpl::forward(const LatentSet& latents) {
  const auto& z = latents.objects;
  if (z.dim() != 3 || z.size(1) != cfg_.K || z.size(2) != cfg_.latent_dim)
    throw ShapeError("object latents must be [B," + std::to_string(cfg_.K) + "," +
                     std::to_string(cfg_.latent_dim) + "]");
  if (cfg_.use_background != latents.background.has_value())
    throw ValidationError("background latent presence does not match the model config");
  if (latents.background &&
      (latents.background->dim() != 2 || latents.background->size(0) != z.size(0) ||
       latents.background->size(1) != cfg_.latent_dim))
    throw ShapeError("background latent must be [B,D]");

  const auto B = z.size(0);
  const auto K = z.size(1);
  auto [objects, background] = relational->forward(z, latents.background);

  auto decoded = object_generator->forward(objects.reshape({B * K, cfg_.latent_dim}));
  decoded = decoded.view({B, K, decoded.size(1), decoded.size(2), decoded.size(3)});

  GeneratorOutput out;
  out.object_latents = objects;
  for (std::int64_t i = 0; i < K; ++i) {
    auto layer = decoded.select(1, i);
    ComponentImage c{layer.narrow(1, 0, 3), std::nullopt};
    if (cfg_.compose_mode == ComposeMode::learned_alpha) {
      c.alpha = layer.narrow(1, 3, 1);
    } else if (cfg_.compose_mode == ComposeMode::threshold_alpha) {
      // Hard mask; gradient reaches the generator through the color term only.
      c.alpha = intensity(c.color).gt(kIntensityThreshold).to(c.color.scalar_type()).detach();
    }
    out.components.push_back(std::move(c));
  }

  if (cfg_.compose_mode == ComposeMode::sum_clip) {
    out.composite = compose_sum(out.components);
    return out;
  }
  ComponentImage bg;
  if (cfg_.use_background) {
    bg.color = background_generator->forward(*background);
  } else {
    bg.color = torch::zeros_like(out.components.front().color);
  }
  out.composite = alpha_composite(out.components, bg);
  out.background = std::move(bg);
  return out;
}

// --- spectral normalization ---------------------------------------------------------

namespace {

bool normalize_into(torch::Tensor& dst, const torch::Tensor& src) {
  const double n = src.norm().item<double>();
  if (!(n > kSigmaFloor)) return false;
  dst = src / n;
  return true;
}

}  // namespace

SpectralNormResult spectral_normalize(const torch::Tensor& weight, SpectralNormState& state, int steps) {
  if (weight.dim() != 2) throw ShapeError("spectral_normalize expects a 2-D weight");
  const auto rows = weight.size(0);
  if (!state.u.defined() || state.u.numel() != rows) {
    auto init = torch::randn({rows}, weight.options().requires_grad(false));
    state.u = init / init.norm();
  }
  torch::Tensor v;
  {
    torch::NoGradGuard no_grad;
    const auto w = weight.detach();
    v = torch::zeros({weight.size(1)}, w.options());
    normalize_into(v, torch::mv(w.t(), state.u));
    for (int s = 0; s < steps; ++s) {
      normalize_into(v, torch::mv(w.t(), state.u));
      normalize_into(state.u, torch::mv(w, v));
      ++state.iterations;
    }
  }
  auto sigma = torch::dot(state.u, torch::mv(weight, v)).clamp_min(kSigmaFloor);
  return {weight / sigma, sigma};
}

NormalizedLayerImpl::NormalizedLayerImpl(Kind kind, std::int64_t in, std::int64_t out, bool spectral,
                                         std::int64_t kernel, std::int64_t stride, std::int64_t padding)
    : kind_(kind), spectral_(spectral), stride_(stride), padding_(padding) {
  // Same initialisation as torch's Conv2d/Linear (fan-in scaled uniform).
  torch::Tensor w = kind == Kind::conv ? torch::empty({out, in, kernel, kernel}) : torch::empty({out, in});
  torch::nn::init::kaiming_uniform_(w, std::sqrt(5.0));
  const double fan_in = static_cast<double>(w.numel() / out);
  weight = register_parameter("weight", w);
  bias = register_parameter("bias", torch::empty({out}).uniform_(-1 / std::sqrt(fan_in), 1 / std::sqrt(fan_in)));
  if (spectral_) {
    auto u0 = torch::randn({out});
    u = register_buffer("u", u0 / u0.norm());
  }
}

torch::Tensor NormalizedLayerImpl::normalized_weight(bool advance) {
  if (!spectral_) return weight;
  auto matrix = weight.view({weight.size(0), -1});
  SpectralNormState st{u.clone(), 0};
  auto res = spectral_normalize(matrix, st, advance ? 1 : 0);
  if (advance) {
    torch::NoGradGuard no_grad;
    u.copy_(st.u);
  }
  return res.weight.view(weight.sizes());
}

torch::Tensor NormalizedLayerImpl::forward(const torch::Tensor& x) {
  auto w = normalized_weight(is_training());
  if (kind_ == Kind::conv) return torch::conv2d(x, w, bias, stride_, padding_);
  return torch::nn::functional::linear(x, w, bias);
}

torch::Tensor NormalizedLayerImpl::effective_matrix() {
  torch::NoGradGuard no_grad;
  return normalized_weight(false).reshape({weight.size(0), -1});
}

void NormalizedLayerImpl::power_iterate(int steps) {
  if (!spectral_) return;
  torch::NoGradGuard no_grad;
  SpectralNormState st{u.clone(), 0};
  spectral_normalize(weight.view({weight.size(0), -1}), st, steps);
  u.copy_(st.u);
}

DiscriminatorImpl::DiscriminatorImpl(const ModelConfig& cfg, bool spectral_norm)
    : image_size_(cfg.image_size), spectral_(spectral_norm) {
  cfg.validate();
  std::int64_t in = 3, ch = cfg.discriminator_channels;
  for (int s = 0; s < cfg.stages(); ++s) {
    convs_.push_back(register_module(
        "conv" + std::to_string(s),
        NormalizedLayer(NormalizedLayerImpl::Kind::conv, in, ch, spectral_norm)));
    if (s > 0 && !spectral_norm)
      norms_.push_back(register_module("norm" + std::to_string(s), torch::nn::BatchNorm2d(ch)));
    in = ch;
    ch *= 2;
  }
  head_ = register_module("head", NormalizedLayer(NormalizedLayerImpl::Kind::linear, in * 16, 1, spectral_norm));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != image_size_ ||
      images.size(3) != image_size_)
    throw ShapeError("discriminator expects [B,3," + std::to_string(image_size_) + "," +
                     std::to_string(image_size_) + "] images");
  auto h = images;
  for (std::size_t s = 0; s < convs_.size(); ++s) {
    h = convs_[s]->forward(h);
    if (s > 0 && !spectral_) h = norms_[s - 1]->forward(h);
    h = torch::leaky_relu(h, 0.2);
  }
  return head_->forward(h.flatten(1)).squeeze(1);
}

std::vector<torch::Tensor> DiscriminatorImpl::effective_matrices() {
  std::vector<torch::Tensor> out;
  for (auto& c : convs_) out.push_back(c->effective_matrix());
  out.push_back(head_->effective_matrix());
  return out;
}

void DiscriminatorImpl::power_iterate(int steps) {
  for (auto& c : convs_) c->power_iterate(steps);
  head_->power_iterate(steps);
}

std::int64_t parameter_count(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace kgan
