#include "kgan/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include <Eigen/Dense>
#include <torch/script.h>

#include "kgan/checkpoint.hpp"
#include "kgan/error.hpp"

namespace kgan {

namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix to_matrix(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  return Eigen::Map<const Matrix>(c.data_ptr<double>(), c.size(0), c.dim() > 1 ? c.size(1) : 1);
}

Matrix psd_sqrt(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (m + m.transpose()));
  const Eigen::VectorXd roots = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * roots.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

EmbeddingStats gaussian_stats(const torch::Tensor& features) {
  if (features.dim() != 2) throw ShapeError("gaussian_stats expects [N,D] features");
  const auto n = features.size(0);
  if (n < 2) throw ValidationError("gaussian_stats needs at least 2 samples");
  auto x = features.detach().to(torch::kCPU, torch::kFloat64);
  auto mean = x.mean(0);
  auto centered = x - mean;
  auto cov = centered.t().matmul(centered) / static_cast<double>(n - 1);
  cov = 0.5 * (cov + cov.t());
  EmbeddingStats s{mean, cov, n};
  if (!s.well_conditioned())
    std::cerr << "warning: " << n << " samples for " << s.dim()
              << "-dimensional features; covariance is rank deficient\n";
  return s;
}

double frechet_distance(const EmbeddingStats& a, const EmbeddingStats& b) {
  if (a.dim() != b.dim()) throw ShapeError("frechet_distance: feature dimensions differ");
  const Matrix mu_a = to_matrix(a.mean), mu_b = to_matrix(b.mean);
  const Matrix cov_a = to_matrix(a.covariance), cov_b = to_matrix(b.covariance);
  if (!mu_a.allFinite() || !mu_b.allFinite() || !cov_a.allFinite() || !cov_b.allFinite())
    throw NumericalError("frechet_distance: non-finite statistics");

  const double mean_term = (mu_a - mu_b).squaredNorm();
  const Matrix root_a = psd_sqrt(cov_a);
  const Matrix inner = root_a * cov_b * root_a;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double trace_root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * trace_root;
  if (!std::isfinite(d)) throw NumericalError("frechet_distance: non-finite result");
  return std::max(d, 0.0);
}

// --- built-in embedder -----------------------------------------------------------

ConvClassifierImpl::ConvClassifierImpl(std::int64_t classes, std::int64_t width) : width_(width) {
  using namespace torch::nn;
  trunk = register_module(
      "trunk", Sequential(Conv2d(Conv2dOptions(3, width, 3).padding(1)), ReLU(),
                          Conv2d(Conv2dOptions(width, width, 4).stride(2).padding(1)), ReLU(),
                          Conv2d(Conv2dOptions(width, 2 * width, 4).stride(2).padding(1)), ReLU(),
                          Conv2d(Conv2dOptions(2 * width, 2 * width, 3).padding(1)), ReLU()));
  classifier = register_module("classifier", Linear(2 * width, classes));
}

torch::Tensor ConvClassifierImpl::features(const torch::Tensor& images) {
  return trunk->forward(images).mean({2, 3});
}

torch::Tensor ConvClassifierImpl::forward(const torch::Tensor& images) {
  return classifier(features(images));
}

namespace {

constexpr int kCropSide = 32;

struct CropSet {
  torch::Tensor images;  // [N,3,32,32]
  torch::Tensor labels;  // [N]
};

CropSet object_crops(const DatasetBundle& bundle, Split split, std::size_t limit) {
  std::vector<ImageU8> crops;
  std::vector<std::int64_t> labels;
  for (const auto& scene : bundle.split(split)) {
    for (const auto& o : scene.objects) {
      if (o.box.width <= 0 || o.box.height <= 0) continue;
      const int side = std::min({std::max(o.box.width, o.box.height) + 4, scene.image.height, scene.image.width});
      const int cy = o.box.y + o.box.height / 2, cx = o.box.x + o.box.width / 2;
      const int y = std::clamp(cy - side / 2, 0, scene.image.height - side);
      const int x = std::clamp(cx - side / 2, 0, scene.image.width - side);
      crops.push_back(resize_bilinear(crop(scene.image, y, x, side, side), kCropSide, kCropSide));
      labels.push_back(o.class_id);
      if (crops.size() >= limit) break;
    }
    if (crops.size() >= limit) break;
  }
  CropSet set;
  if (crops.empty()) return set;
  std::vector<const ImageU8*> ptrs;
  for (const auto& c : crops) ptrs.push_back(&c);
  set.images = to_batch_tensor(ptrs);
  set.labels = torch::tensor(labels, torch::kInt64);
  return set;
}

}  // namespace

BuiltinEmbedder::BuiltinEmbedder(ConvClassifier net, bool trained) : net_(std::move(net)), trained_(trained) {
  net_->eval();
}

std::shared_ptr<BuiltinEmbedder> BuiltinEmbedder::train(const DatasetBundle& bundle,
                                                        const EmbedderTrainConfig& cfg) {
  torch::manual_seed(cfg.seed);
  ConvClassifier net;
  auto crops = object_crops(bundle, Split::train, 60000);
  if (!crops.images.defined() || cfg.steps <= 0) return std::make_shared<BuiltinEmbedder>(net, false);

  torch::Generator gen = at::make_generator<at::CPUGeneratorImpl>(cfg.seed);
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  net->train();
  const auto n = crops.images.size(0);
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    auto idx = torch::randint(n, {std::min(cfg.batch_size, n)}, gen, torch::kInt64);
    auto loss = torch::nn::functional::cross_entropy(net->forward(crops.images.index_select(0, idx)),
                                                     crops.labels.index_select(0, idx));
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  return std::make_shared<BuiltinEmbedder>(net, true);
}

std::shared_ptr<BuiltinEmbedder> BuiltinEmbedder::load(const std::filesystem::path& path) {
  auto ckpt = read_checkpoint(path);
  if (ckpt.config.value("kind", "") != "builtin-embedder")
    throw VersionError("not a built-in embedder checkpoint: " + path.string());
  ConvClassifier net;
  import_module(*net, "net.", ckpt.arrays);
  return std::make_shared<BuiltinEmbedder>(net, ckpt.config.value("trained", false));
}

void BuiltinEmbedder::save(const std::filesystem::path& path) const {
  Checkpoint ckpt;
  ckpt.config = {{"kind", "builtin-embedder"}, {"trained", trained_}};
  export_module(*net_, "net.", ckpt.arrays);
  write_checkpoint(path, ckpt);
}

torch::Tensor BuiltinEmbedder::embed(const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  net_->eval();
  return net_->features(images.to(torch::kFloat32));
}

double BuiltinEmbedder::crop_accuracy(const DatasetBundle& bundle, Split split) {
  auto crops = object_crops(bundle, split, 20000);
  if (!crops.images.defined()) return 0.0;
  torch::NoGradGuard no_grad;
  net_->eval();
  auto pred = net_->forward(crops.images).argmax(1);
  return pred.eq(crops.labels).to(torch::kFloat64).mean().item<double>();
}

struct ScriptedEmbedder::Impl {
  torch::jit::script::Module module;
  std::int64_t dim = -1;
};

ScriptedEmbedder::ScriptedEmbedder(const std::filesystem::path& path) : impl_(std::make_unique<Impl>()) {
  try {
    impl_->module = torch::jit::load(path.string());
  } catch (const c10::Error& e) {
    throw SourceError("cannot load TorchScript embedder " + path.string() + ": " + e.what_without_backtrace());
  }
  impl_->module.eval();
}

ScriptedEmbedder::~ScriptedEmbedder() = default;

torch::Tensor ScriptedEmbedder::embed(const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  auto out = impl_->module.forward({images.to(torch::kFloat32)}).toTensor();
  out = out.reshape({out.size(0), -1});
  impl_->dim = out.size(1);
  return out;
}

std::int64_t ScriptedEmbedder::dim() const {
  if (impl_->dim < 0) const_cast<ScriptedEmbedder*>(this)->embed(torch::zeros({1, 3, 64, 64}));
  return impl_->dim;
}

std::shared_ptr<Embedder> make_embedder(const std::string& spec, const DatasetBundle& bundle,
                                        const EmbedderTrainConfig& cfg) {
  if (spec == "builtin") return BuiltinEmbedder::train(bundle, cfg);
  if (spec.rfind("builtin:", 0) == 0) return BuiltinEmbedder::load(spec.substr(8));
  if (spec.rfind("script:", 0) == 0) return std::make_shared<ScriptedEmbedder>(spec.substr(7));
  throw ValidationError("unknown embedder '" + spec + "' (builtin, builtin:PATH, script:PATH)");
}

// --- FID ---------------------------------------------------------------------------

ImageSampler generator_sampler(StructuredGenerator generator, std::uint64_t seed) {
  auto gen = std::make_shared<torch::Generator>(at::make_generator<at::CPUGeneratorImpl>(seed));
  return [generator, gen](std::int64_t n) mutable {
    torch::NoGradGuard no_grad;
    const bool was_training = generator->is_training();
    generator->eval();
    auto z = sample_latents(generator->config(), n, *gen);
    auto img = generator->forward(z).composite.image;
    generator->train(was_training);
    return img;
  };
}

ImageSampler dataset_sampler(const DatasetBundle& bundle, Split split, std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [&bundle, split, rng](std::int64_t n) {
    auto batch = sample_batch(bundle, split, n, *rng);
    std::vector<const ImageU8*> imgs;
    for (const auto* s : batch) imgs.push_back(&s->image);
    return to_batch_tensor(imgs);
  };
}

EmbeddingStats embed_stats(Embedder& embedder, const ImageSampler& sampler, std::int64_t n,
                           std::int64_t batch_size) {
  if (n <= 0) throw ValidationError("FID needs a positive sample count");
  std::vector<torch::Tensor> feats;
  for (std::int64_t done = 0; done < n; done += batch_size)
    feats.push_back(embedder.embed(sampler(std::min(batch_size, n - done))));
  return gaussian_stats(torch::cat(feats, 0));
}

EmbeddingStats reference_stats(Embedder& embedder, const DatasetBundle& bundle, std::int64_t n,
                               Split split) {
  if (n <= 0) throw ValidationError("FID needs a positive sample count");
  std::vector<const LabeledScene*> scenes;
  for (const auto& s : bundle.split(split)) scenes.push_back(&s);
  if (scenes.empty()) throw ValidationError("reference split is empty");
  if (static_cast<std::int64_t>(scenes.size()) < n) {
    std::cerr << "warning: " << to_string(split) << " split has " << scenes.size()
              << " scenes, fewer than the " << n << " requested; using all of them\n";
    n = static_cast<std::int64_t>(scenes.size());
  }
  std::partial_sort(scenes.begin(), scenes.begin() + n, scenes.end(),
                    [](const auto* a, const auto* b) { return a->id < b->id; });
  std::vector<torch::Tensor> feats;
  constexpr std::int64_t kBatch = 250;
  for (std::int64_t i = 0; i < n; i += kBatch) {
    std::vector<const ImageU8*> imgs;
    for (std::int64_t j = i; j < std::min(n, i + kBatch); ++j) imgs.push_back(&scenes[j]->image);
    feats.push_back(embedder.embed(to_batch_tensor(imgs)));
  }
  return gaussian_stats(torch::cat(feats, 0));
}

double compute_fid(const ImageSampler& sampler, const DatasetBundle& bundle, Embedder& embedder,
                   std::int64_t n_samples, Split reference) {
  if (n_samples <= 0) throw ValidationError("FID needs a positive sample count");
  auto ref = reference_stats(embedder, bundle, n_samples, reference);
  auto gen = embed_stats(embedder, sampler, n_samples);
  return frechet_distance(gen, ref);
}

// --- traversal -----------------------------------------------------------------------

std::vector<double> TraversalSpec::default_increments() {
  std::vector<double> t(8);
  for (int i = 0; i < 8; ++i) t[i] = -1.0 + 2.0 * i / 7.0;
  return t;
}

std::vector<GeneratorOutput> traverse_latent_outputs(StructuredGenerator generator, const LatentSet& base,
                                                     const TraversalSpec& spec) {
  const auto& cfg = generator->config();
  if (spec.component == TraversalSpec::kBackgroundComponent) {
    if (!base.background) throw ValidationError("traversal: model has no background latent");
  } else if (spec.component < 0 || spec.component >= cfg.K) {
    throw ValidationError("traversal: component index " + std::to_string(spec.component) +
                          " out of range for K=" + std::to_string(cfg.K));
  }
  if (!spec.direction.defined() || spec.direction.numel() != cfg.latent_dim)
    throw ShapeError("traversal direction must have the latent dimension");
  if (spec.direction.abs().max().item<double>() == 0.0)
    throw ValidationError("traversal direction must be nonzero");
  for (double t : spec.increments)
    if (!std::isfinite(t)) throw ValidationError("traversal increments must be finite");

  torch::NoGradGuard no_grad;
  const bool was_training = generator->is_training();
  generator->eval();
  std::vector<GeneratorOutput> outs;
  for (double t : spec.increments) {
    auto z = base.clone();
    auto delta = spec.direction.to(z.objects.dtype()) * t;
    if (spec.component == TraversalSpec::kBackgroundComponent)
      *z.background += delta;
    else
      z.objects.select(1, spec.component).add_(delta);
    outs.push_back(generator->forward(z));
  }
  generator->train(was_training);
  return outs;
}

std::vector<torch::Tensor> traverse_latent(StructuredGenerator generator, const LatentSet& base,
                                           const TraversalSpec& spec) {
  std::vector<torch::Tensor> images;
  for (auto& o : traverse_latent_outputs(std::move(generator), base, spec))
    images.push_back(o.composite.image);
  return images;
}

std::vector<ImageU8> render_layers(const GeneratorOutput& out, std::int64_t sample) {
  std::vector<ImageU8> layers;
  if (out.background) layers.push_back(from_tensor(out.background->color[sample]));
  for (const auto& c : out.components) {
    auto color = c.color[sample].detach().to(torch::kFloat32);
    auto alpha = c.alpha ? c.alpha->operator[](sample).detach().to(torch::kFloat32)
                         : torch::ones({1, color.size(1), color.size(2)});
    auto rgb = color * alpha + (1 - alpha);
    layers.push_back(from_tensor(torch::cat({rgb, alpha}, 0)));
  }
  layers.push_back(from_tensor(out.composite.image[sample]));
  return layers;
}

}  // namespace kgan
