#include "kgan/composition.hpp"

#include "kgan/error.hpp"

namespace kgan {

namespace {

void check_color(const torch::Tensor& c, const torch::Tensor& ref) {
  if (c.dim() != 4 || c.sizes() != ref.sizes())
    throw ShapeError("component colors must share one [B,C,H,W] shape");
}

void check_components(const std::vector<ComponentImage>& components, bool need_alpha) {
  if (components.empty()) throw ValidationError("composition needs at least one component");
  const auto& ref = components.front().color;
  for (const auto& c : components) {
    check_color(c.color, ref);
    if (need_alpha) {
      if (!c.alpha) throw ValidationError("alpha compositing requires an alpha map per component");
      const auto& a = *c.alpha;
      if (a.dim() != 4 || a.size(0) != ref.size(0) || a.size(1) != 1 || a.size(2) != ref.size(2) ||
          a.size(3) != ref.size(3))
        throw ShapeError("alpha map must be [B,1,H,W] matching its color map");
    }
  }
}

}  // namespace

torch::Tensor intensity(const torch::Tensor& color) {
  return std::get<0>(color.max(/*dim=*/1, /*keepdim=*/true));
}

CompositeResult compose_sum(const std::vector<ComponentImage>& components) {
  check_components(components, false);
  auto total = components.front().color;
  for (std::size_t i = 1; i < components.size(); ++i) total = total + components[i].color;

  auto image = torch::clamp(total, 0.0, 1.0);

  std::vector<torch::Tensor> masks;
  for (const auto& c : components)
    masks.push_back(intensity(c.color.detach()).gt(kIntensityThreshold).to(total.scalar_type()));
  auto any = torch::cat(masks, 1).amax(1, true);
  masks.push_back(1 - any);
  return {image, torch::cat(masks, 1)};
}

torch::Tensor composite_weights(const std::vector<ComponentImage>& components,
                                const ComponentImage& background) {
  check_components(components, true);
  check_color(background.color, components.front().color);
  std::vector<torch::Tensor> layers;
  layers.reserve(components.size() + 1);
  torch::Tensor transmittance = torch::ones_like(*components.front().alpha);
  for (const auto& c : components) {
    layers.push_back(*c.alpha * transmittance);
    transmittance = transmittance * (1 - *c.alpha);
  }
  layers.push_back(transmittance);
  return torch::cat(layers, 1);
}

CompositeResult alpha_composite(const std::vector<ComponentImage>& components,
                                const ComponentImage& background) {
  auto weights = composite_weights(components, background);
  const auto k = static_cast<std::int64_t>(components.size());
  auto image = background.color * weights.narrow(1, k, 1);
  for (std::int64_t i = 0; i < k; ++i) image = image + components[i].color * weights.narrow(1, i, 1);
  return {image, weights};
}

}  // namespace kgan
