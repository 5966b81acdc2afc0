#include "kgan/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>

#include "kgan/checkpoint.hpp"
#include "kgan/error.hpp"
#include "kgan/rng.hpp"

namespace kgan {

namespace fs = std::filesystem;
using torch::indexing::Slice;

std::string_view to_string(LabelMode m) { return m == LabelMode::threshold ? "threshold" : "alpha_weights"; }

LabelMode parse_label_mode(std::string_view s) {
  if (s == "threshold") return LabelMode::threshold;
  if (s == "alpha_weights") return LabelMode::alpha_weights;
  throw ValidationError("unknown label mode '" + std::string(s) + "'");
}

namespace {

LabelMap labels_from_weights(const torch::Tensor& weights) {
  const auto k = weights.size(1) - 1;
  auto idx = weights.detach().argmax(1);
  auto labels = torch::where(idx == k, torch::zeros_like(idx), idx + 1);
  return {labels, torch::zeros_like(labels, torch::kBool)};
}

void check_modes(ComposeMode compose, LabelMode mode) {
  if (mode == LabelMode::threshold && compose == ComposeMode::learned_alpha)
    throw ValidationError("threshold labels need components without learned alphas");
  if (mode == LabelMode::alpha_weights && compose == ComposeMode::sum_clip)
    throw ValidationError("alpha_weights labels need an alpha compose mode");
}

}  // namespace

LabelMap extract_labels(const std::vector<ComponentImage>& components, LabelMode mode) {
  if (components.empty()) throw ValidationError("extract_labels: no components");
  if (mode == LabelMode::alpha_weights) {
    ComponentImage bg{torch::zeros_like(components.front().color), std::nullopt};
    return labels_from_weights(composite_weights(components, bg));
  }
  std::vector<torch::Tensor> layers;
  for (const auto& c : components) layers.push_back(intensity(c.color.detach()));
  auto in = torch::cat(layers, 1);  // [B,K,H,W]
  auto above = in > kIntensityThreshold;
  auto count = above.sum(1);
  auto idx = torch::where(above, in, torch::full_like(in, -1.0)).argmax(1);
  auto labels = torch::where(count > 0, idx + 1, torch::zeros_like(idx));
  return {labels, count >= 2};
}

LabelMap extract_labels(const GeneratorOutput& out, ComposeMode compose, LabelMode mode) {
  check_modes(compose, mode);
  if (mode == LabelMode::alpha_weights) return labels_from_weights(out.composite.layer_weights);
  return extract_labels(out.components, mode);
}

MatchResult permutation_matched_loss(const torch::Tensor& logits, const LabelMap& target) {
  if (logits.dim() != 4) throw ShapeError("logits must be [B,K+1,H,W]");
  const auto B = logits.size(0), C = logits.size(1);
  const int K = static_cast<int>(C - 1);
  if (K < 1) throw ShapeError("logits need a background and at least one object channel");
  if (K > kMaxMatchedComponents)
    throw ValidationError("permutation matching supports at most " + std::to_string(kMaxMatchedComponents) +
                          " components, got " + std::to_string(K));
  const auto& labels = target.labels;
  if (labels.dim() != 3 || labels.size(0) != B || labels.size(1) != logits.size(2) ||
      labels.size(2) != logits.size(3))
    throw ShapeError("label map does not match the logits");
  if (labels.numel() > 0 && (labels.min().item<std::int64_t>() < 0 || labels.max().item<std::int64_t>() > K))
    throw ValidationError("labels must lie in [0, K]");

  auto valid = target.ignore.defined() ? target.ignore.logical_not() : torch::ones_like(labels, torch::kBool);
  auto logp = torch::log_softmax(logits, 1);
  auto onehot = torch::one_hot(labels, C).to(logp.scalar_type()) * valid.unsqueeze(-1).to(logp.scalar_type());
  // cost[b,l,c]: summed -log p_c over pixels labelled l
  auto cost = -torch::einsum("bhwl,bchw->blc", {onehot, logp});
  auto pixels = valid.flatten(1).sum(1).clamp_min(1).to(logp.scalar_type());

  std::vector<int> perm(K);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<std::vector<int>> perms;
  std::vector<std::int64_t> cols;
  do {
    perms.push_back(perm);
    cols.push_back(0);
    for (int p : perm) cols.push_back(p + 1);
  } while (std::next_permutation(perm.begin(), perm.end()));
  const auto P = static_cast<std::int64_t>(perms.size());
  auto col_idx = torch::tensor(cols, torch::kInt64).view({P, C});
  auto row_idx = torch::arange(C, torch::kInt64).expand({P, C});
  auto totals = cost.index({Slice(), row_idx, col_idx}).sum(-1) / pixels.unsqueeze(1);  // [B,P]

  auto [best, which] = totals.min(1);
  MatchResult r;
  r.per_sample = best;
  r.loss = best.mean();
  auto w = which.accessor<std::int64_t, 1>();
  for (std::int64_t b = 0; b < B; ++b) r.permutations.push_back(perms[w[b]]);
  return r;
}

// --- segmenter ------------------------------------------------------------------

SegmenterImpl::SegmenterImpl(int components, std::int64_t width) : components_(components), width_(width) {
  if (components < 1) throw ValidationError("segmenter needs at least one component");
  if (width < 1) throw ValidationError("segmenter width must be positive");
  namespace nn = torch::nn;
  std::int64_t in = 3;
  for (int s = 0; s < 4; ++s) {
    const auto out = width << s;
    down_.push_back(register_module(
        "down" + std::to_string(s),
        nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 4).stride(2).padding(1).bias(false)),
                       nn::BatchNorm2d(out), nn::ReLU())));
    in = out;
  }
  // Decoder input at level s is the previous upsample concatenated with down[s-1].
  for (int s = 3; s >= 0; --s) {
    const auto out = s == 0 ? width : width << (s - 1);
    const auto cin = s == 3 ? in : 2 * (width << s);
    up_.push_back(register_module(
        "up" + std::to_string(s),
        nn::Sequential(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(cin, out, 4).stride(2).padding(1).bias(false)),
                       nn::BatchNorm2d(out), nn::ReLU())));
  }
  head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(width, components + 1, 3).padding(1)));
}

torch::Tensor SegmenterImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) % 16 != 0 || images.size(3) % 16 != 0)
    throw ShapeError("segmenter expects [B,3,H,W] with H and W multiples of 16");
  std::vector<torch::Tensor> skips;
  auto h = images;
  for (auto& d : down_) {
    h = d->forward(h);
    skips.push_back(h);
  }
  for (std::size_t i = 0; i < up_.size(); ++i) {
    if (i > 0) h = torch::cat({h, skips[skips.size() - 1 - i]}, 1);
    h = up_[i]->forward(h);
  }
  return head_->forward(h);
}

torch::Tensor SegmenterImpl::predict(const torch::Tensor& images) {
  const bool was_training = is_training();
  eval();
  torch::NoGradGuard no_grad;
  auto labels = forward(images).argmax(1);
  train(was_training);
  return labels;
}

void save_segmenter(const fs::path& path, Segmenter net) {
  Checkpoint ckpt;
  ckpt.config = {{"kind", "segmenter"}, {"components", net->components()}, {"width", net->width()}};
  export_module(*net, "segmenter.", ckpt.arrays);
  write_checkpoint(path, ckpt);
}

Segmenter load_segmenter(const fs::path& path) {
  auto ckpt = read_checkpoint(path);
  if (ckpt.config.value("kind", "") != "segmenter") throw VersionError(path.string() + " is not a segmenter");
  Segmenter net(ckpt.config.at("components").get<int>(), ckpt.config.at("width").get<std::int64_t>());
  import_module(*net, "segmenter.", ckpt.arrays);
  net->eval();
  return net;
}

// --- label sources -----------------------------------------------------------------

LabelSource generator_label_source(StructuredGenerator generator, LabelMode mode, std::uint64_t seed) {
  const auto cfg = generator->config();
  check_modes(cfg.compose_mode, mode);
  generator->eval();
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return [generator, mode, cfg, gen](std::int64_t n) mutable {
    torch::NoGradGuard no_grad;
    auto out = generator->forward(sample_latents(cfg, n, gen));
    return std::make_pair(out.composite.image, extract_labels(out, cfg.compose_mode, mode));
  };
}

torch::Tensor truth_labels(const LabeledScene& scene) {
  if (!scene.has_labels()) throw ValidationError("scene " + std::to_string(scene.id) + " has no label map");
  auto raw = torch::from_blob(const_cast<std::uint8_t*>(scene.labels.data.data()),
                              {scene.labels.height, scene.labels.width}, torch::kUInt8);
  return raw.bitwise_and(kInstanceMask).to(torch::kInt64);
}

namespace {

torch::Tensor overlap_mask(const LabeledScene& scene) {
  auto raw = torch::from_blob(const_cast<std::uint8_t*>(scene.labels.data.data()),
                              {scene.labels.height, scene.labels.width}, torch::kUInt8);
  return raw.bitwise_and(kOverlapFlag).ne(0);
}

}  // namespace

LabelSource dataset_label_source(const DatasetBundle& bundle, Split split, std::uint64_t seed) {
  if (bundle.split(split).empty()) throw ValidationError("label source split is empty");
  if (!bundle.split(split).front().has_labels()) throw ValidationError("dataset has no label maps");
  auto rng = std::make_shared<Rng>(seed);
  return [&bundle, split, rng](std::int64_t n) {
    auto batch = sample_batch(bundle, split, n, *rng);
    std::vector<const ImageU8*> images;
    std::vector<torch::Tensor> labels, ignore;
    for (const auto* s : batch) {
      images.push_back(&s->image);
      labels.push_back(truth_labels(*s));
      ignore.push_back(overlap_mask(*s));
    }
    return std::make_pair(to_batch_tensor(images), LabelMap{torch::stack(labels), torch::stack(ignore)});
  };
}

DatasetBundle generated_bundle(StructuredGenerator generator, LabelMode mode, std::int64_t n,
                               std::uint64_t seed, Variant variant) {
  if (n < 1) throw ValidationError("generated_bundle needs n >= 1");
  const auto cfg = generator->config();
  auto source = generator_label_source(generator, mode, seed);
  DatasetBundle b;
  b.spec.variant = variant;
  b.spec.height = b.spec.width = cfg.image_size;
  b.spec.objects_per_scene = cfg.K;
  b.spec.seed = seed;
  b.counts.train = n;
  Fnv1a h;
  h.update(std::string("generated"));
  h.update(seed);
  h.update(std::string(to_string(mode)));
  b.fingerprint = h.hex();

  for (std::int64_t done = 0; done < n;) {
    const auto m = std::min<std::int64_t>(64, n - done);
    auto [images, lm] = source(m);
    auto packed = (lm.labels + lm.ignore.to(torch::kInt64) * kOverlapFlag).to(torch::kUInt8).contiguous();
    for (std::int64_t i = 0; i < m; ++i, ++done) {
      LabeledScene s;
      s.id = done;
      s.image = from_tensor(images[i]);
      s.labels = ImageU8{cfg.image_size, cfg.image_size, 1, {}};
      auto plane = packed[i];
      s.labels.data.assign(plane.data_ptr<std::uint8_t>(), plane.data_ptr<std::uint8_t>() + plane.numel());
      auto lab = lm.labels[i];
      for (int k = 1; k <= cfg.K; ++k) {
        auto where = (lab == k).nonzero();
        if (where.size(0) == 0) continue;
        auto lo = std::get<0>(where.min(0)), hi = std::get<0>(where.max(0));
        ObjectMeta o;
        o.instance_id = k;
        o.class_id = -1;
        o.box = {static_cast<int>(lo[1].item<std::int64_t>()), static_cast<int>(lo[0].item<std::int64_t>()),
                 static_cast<int>(hi[1].item<std::int64_t>() - lo[1].item<std::int64_t>() + 1),
                 static_cast<int>(hi[0].item<std::int64_t>() - lo[0].item<std::int64_t>() + 1)};
        s.objects.push_back(o);
      }
      b.train.push_back(std::move(s));
    }
  }
  return b;
}

SegmenterTrainResult train_segmenter(const LabelSource& source, int components, const SegmenterTrainConfig& cfg,
                                     const std::function<void(std::int64_t, double)>& on_step) {
  if (cfg.steps < 0) throw ValidationError("segmenter steps must be >= 0");
  if (cfg.batch_size < 1) throw ValidationError("segmenter batch_size must be >= 1");
  torch::manual_seed(cfg.seed);
  SegmenterTrainResult r;
  r.net = Segmenter(components, cfg.width);
  torch::optim::Adam opt(r.net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  r.net->train();
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    auto [images, target] = source(cfg.batch_size);
    auto match = permutation_matched_loss(r.net->forward(images), target);
    opt.zero_grad();
    match.loss.backward();
    opt.step();
    const double loss = match.loss.item<double>();
    if (!std::isfinite(loss)) throw NumericalError("non-finite segmenter loss at step " + std::to_string(step));
    r.losses.push_back(loss);
    if (on_step) on_step(step, loss);
  }
  r.net->eval();
  return r;
}

// --- ARI -----------------------------------------------------------------------------

double ari_score(const torch::Tensor& predicted, const torch::Tensor& truth, const torch::Tensor& mask) {
  if (predicted.sizes() != truth.sizes() || mask.sizes() != truth.sizes())
    throw ShapeError("ari_score: predicted, truth and mask shapes differ");
  auto m = mask.to(torch::kBool);
  auto p = predicted.masked_select(m).to(torch::kInt64).contiguous();
  auto t = truth.masked_select(m).to(torch::kInt64).contiguous();
  const auto n = p.numel();
  if (n == 0) throw ValidationError("ari_score: empty evaluation mask");

  std::unordered_map<std::int64_t, std::int64_t> rows, cols;
  std::map<std::pair<std::int64_t, std::int64_t>, std::int64_t> cells;
  const auto* pp = p.data_ptr<std::int64_t>();
  const auto* tp = t.data_ptr<std::int64_t>();
  for (std::int64_t i = 0; i < n; ++i) {
    ++rows[tp[i]];
    ++cols[pp[i]];
    ++cells[{tp[i], pp[i]}];
  }
  auto pairs = [](std::int64_t c) { return 0.5 * static_cast<double>(c) * static_cast<double>(c - 1); };
  double index = 0, a = 0, b = 0;
  for (const auto& [_, c] : cells) index += pairs(c);
  for (const auto& [_, c] : rows) a += pairs(c);
  for (const auto& [_, c] : cols) b += pairs(c);
  const double total = pairs(n);
  if (total == 0) return 1.0;
  const double expected = a * b / total;
  const double max_index = 0.5 * (a + b);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

torch::Tensor eval_mask(const LabeledScene& scene, Variant variant) {
  auto mask = truth_labels(scene) > 0;
  if (variant == Variant::independent_mm || variant == Variant::triplet_mm)
    mask = mask.logical_and(overlap_mask(scene).logical_not());
  return mask;
}

SegmentationReport evaluate_segmenter(Segmenter net, const DatasetBundle& bundle, Split split, std::int64_t n) {
  const auto& scenes = bundle.split(split);
  const auto count = n <= 0 ? static_cast<std::int64_t>(scenes.size())
                            : std::min<std::int64_t>(n, static_cast<std::int64_t>(scenes.size()));
  if (count == 0) throw ValidationError("no scenes to evaluate");
  SegmentationReport rep;
  for (std::int64_t start = 0; start < count; start += 64) {
    const auto end = std::min<std::int64_t>(count, start + 64);
    std::vector<const ImageU8*> images;
    for (auto i = start; i < end; ++i) images.push_back(&scenes[i].image);
    auto pred = net->predict(to_batch_tensor(images));
    for (auto i = start; i < end; ++i) {
      auto mask = eval_mask(scenes[i], bundle.spec.variant);
      if (!mask.any().item<bool>()) {
        ++rep.skipped;
        continue;
      }
      rep.per_image.emplace_back(scenes[i].id, ari_score(pred[i - start], truth_labels(scenes[i]), mask));
    }
  }
  if (rep.per_image.empty()) throw ValidationError("every evaluated scene has an empty mask");
  double sum = 0;
  for (const auto& [_, v] : rep.per_image) sum += v;
  rep.mean = sum / static_cast<double>(rep.per_image.size());
  if (rep.per_image.size() > 1) {
    double sq = 0;
    for (const auto& [_, v] : rep.per_image) sq += (v - rep.mean) * (v - rep.mean);
    rep.stddev = std::sqrt(sq / static_cast<double>(rep.per_image.size() - 1));
  }
  return rep;
}

}  // namespace kgan
