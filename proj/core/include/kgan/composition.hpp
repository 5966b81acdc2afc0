#pragma once

// Image composition operators. All tensors are batched NCHW:
//   color  [B,3,H,W] in [0,1]
//   alpha  [B,1,H,W] in [0,1]
// Everything is built from differentiable tensor ops, so autograd supplies the
// gradients w.r.t. colors, alphas and the background.

#include <optional>
#include <vector>

#include <torch/torch.h>

namespace kgan {

struct ComponentImage {
  torch::Tensor color;
  std::optional<torch::Tensor> alpha;
};

struct CompositeResult {
  torch::Tensor image;          // [B,3,H,W]
  torch::Tensor layer_weights;  // [B,K+1,H,W]; layer K is the background
};

/// Threshold shared by sum-mode contribution masks, threshold alphas and
/// threshold label extraction.
inline constexpr double kIntensityThreshold = 0.1;

/// Per-pixel intensity of a color map: max over channels. [B,3,H,W] -> [B,1,H,W].
torch::Tensor intensity(const torch::Tensor& color);

/// image = clip(sum_i color_i, 0, 1). Layer weights are contribution masks
/// (intensity > 0.1) for the K components plus a background mask covering
/// pixels no component claims.
CompositeResult compose_sum(const std::vector<ComponentImage>& components);

/// Fixed-order alpha compositing over an opaque background. Component 0 is
/// front-most.
CompositeResult alpha_composite(const std::vector<ComponentImage>& components,
                                const ComponentImage& background);

/// w_i = alpha_i * prod_{j<i} (1 - alpha_j), w_bg = prod_i (1 - alpha_i).
/// Shape [B,K+1,H,W]; sums to one at every pixel.
torch::Tensor composite_weights(const std::vector<ComponentImage>& components,
                                const ComponentImage& background);

}  // namespace kgan
