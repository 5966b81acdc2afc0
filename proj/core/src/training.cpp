#include "kgan/training.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json_util.hpp"
#include "kgan/checkpoint.hpp"
#include "kgan/error.hpp"

namespace kgan {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(LossKind k) { return k == LossKind::ns_gan ? "ns_gan" : "wgan"; }

LossKind parse_loss_kind(std::string_view s) {
  if (s == "ns_gan") return LossKind::ns_gan;
  if (s == "wgan") return LossKind::wgan;
  throw ValidationError("unknown loss kind '" + std::string(s) + "'");
}

std::string_view to_string(Penalty p) { return p == Penalty::none ? "none" : "wgan_gp"; }

Penalty parse_penalty(std::string_view s) {
  if (s == "none") return Penalty::none;
  if (s == "wgan_gp") return Penalty::wgan_gp;
  throw ValidationError("unknown penalty '" + std::string(s) + "'");
}

TrainConfig TrainConfig::full() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.total_steps = 50'000;
  c.checkpoint_every = 1'000;
  c.fid_samples = 2'000;
  return c;
}

std::vector<std::string> TrainConfig::violations() const {
  std::vector<std::string> v;
  if (penalty == Penalty::wgan_gp && penalty_lambda != 1.0 && penalty_lambda != 10.0)
    v.push_back("train.penalty_lambda must be 1 or 10 with the WGAN gradient penalty");
  if (batch_size < 2) v.push_back("train.batch_size must be >= 2");
  if (total_steps < 0) v.push_back("train.total_steps must be >= 0");
  if (disc_steps_per_gen < 1) v.push_back("train.disc_steps_per_gen must be >= 1");
  if (checkpoint_every < 1) v.push_back("train.checkpoint_every must be >= 1");
  if (log_every < 1) v.push_back("train.log_every must be >= 1");
  if (fid_samples < 2) v.push_back("train.fid_samples must be >= 2");
  if (!(adam.learning_rate > 0)) v.push_back("train.adam.learning_rate must be positive");
  if (adam.beta1 < 0 || adam.beta1 >= 1 || adam.beta2 < 0 || adam.beta2 >= 1)
    v.push_back("train.adam betas must lie in [0, 1)");
  if (threads < 0) v.push_back("train.threads must be >= 0");
  return v;
}

void TrainConfig::validate() const { throw_if_any(violations()); }

Losses adversarial_losses(LossKind kind, const torch::Tensor& scores_real, const torch::Tensor& scores_fake) {
  if (scores_real.numel() == 0 || scores_fake.numel() == 0) throw ValidationError("empty score batch");
  if (scores_real.numel() != scores_fake.numel()) throw ShapeError("score batches differ in length");
  if (kind == LossKind::ns_gan) {
    namespace F = torch::nn::functional;
    return {F::softplus(-scores_real).mean() + F::softplus(scores_fake).mean(),
            F::softplus(-scores_fake).mean()};
  }
  return {scores_fake.mean() - scores_real.mean(), -scores_fake.mean()};
}

torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& real, const torch::Tensor& fake,
                               double lambda, const torch::Tensor& eps) {
  if (real.sizes() != fake.sizes()) throw ShapeError("gradient_penalty: real/fake shapes differ");
  if (real.size(0) < 1) throw ValidationError("gradient_penalty: empty batch");
  std::vector<std::int64_t> shape(real.dim(), 1);
  shape[0] = real.size(0);
  auto e = eps.to(real.dtype()).reshape(shape);
  auto mixed = (e * real.detach() + (1 - e) * fake.detach()).requires_grad_(true);
  auto scores = critic(mixed);
  torch::Tensor grad;
  if (scores.requires_grad())
    grad = torch::autograd::grad({scores.sum()}, {mixed}, /*grad_outputs=*/{}, /*retain_graph=*/true,
                                 /*create_graph=*/true, /*allow_unused=*/true)[0];
  if (!grad.defined()) grad = torch::zeros_like(mixed);  // constant critic
  if (!torch::isfinite(grad).all().item<bool>())
    throw NumericalError("gradient_penalty: non-finite critic gradients");
  auto norms = grad.flatten(1).norm(2, 1);
  return lambda * (norms - 1).pow(2).mean();
}

torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& real, const torch::Tensor& fake,
                               double lambda, torch::Generator& gen) {
  auto eps = torch::rand({real.size(0)}, gen, torch::TensorOptions().dtype(real.dtype()));
  return gradient_penalty(critic, real, fake, lambda, eps);
}

json MetricsRow::to_json() const {
  json j = {{"step", step},
            {"discriminator_loss", discriminator_loss},
            {"generator_loss", generator_loss},
            {"penalty", penalty},
            {"wall_clock", wall_clock}};
  if (fid) j["fid"] = *fid;
  return j;
}

MetricsRow MetricsRow::from_json(const json& j) {
  MetricsRow r;
  r.step = j.at("step").get<std::int64_t>();
  r.discriminator_loss = j.value("discriminator_loss", 0.0);
  r.generator_loss = j.value("generator_loss", 0.0);
  r.penalty = j.value("penalty", 0.0);
  r.wall_clock = j.value("wall_clock", 0.0);
  if (j.contains("fid")) r.fid = j.at("fid").get<double>();
  return r;
}

std::vector<MetricsRow> read_metrics(const fs::path& path) {
  std::vector<MetricsRow> rows;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(MetricsRow::from_json(json::parse(line)));
  return rows;
}

// --- config serialization -------------------------------------------------------------

json model_config_json(const ModelConfig& c) {
  return {{"K", c.K},
          {"image_size", c.image_size},
          {"compose_mode", std::string(to_string(c.compose_mode))},
          {"use_background", c.use_background},
          {"latent_dim", c.latent_dim},
          {"generator_channels", c.generator_channels},
          {"discriminator_channels", c.discriminator_channels},
          {"relational",
           {{"n_blocks", c.relational.n_blocks},
            {"n_heads", c.relational.n_heads},
            {"share_across_blocks", c.relational.share_across_blocks},
            {"include_background", c.relational.include_background}}}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  detail::StrictReader r(j, "model");
  std::string mode(to_string(c.compose_mode));
  r.read("K", c.K);
  r.read("image_size", c.image_size);
  r.read("compose_mode", mode);
  r.read("use_background", c.use_background);
  r.read("latent_dim", c.latent_dim);
  r.read("generator_channels", c.generator_channels);
  r.read("discriminator_channels", c.discriminator_channels);
  if (r.has("relational")) {
    detail::StrictReader rr(r.at("relational"), "model.relational");
    rr.read("n_blocks", c.relational.n_blocks);
    rr.read("n_heads", c.relational.n_heads);
    rr.read("share_across_blocks", c.relational.share_across_blocks);
    rr.read("include_background", c.relational.include_background);
    rr.finish();
  }
  r.finish();
  c.compose_mode = parse_compose_mode(mode);
  return c;
}

json train_config_json(const TrainConfig& c) {
  return {{"loss", std::string(to_string(c.loss))},
          {"penalty", std::string(to_string(c.penalty))},
          {"penalty_lambda", c.penalty_lambda},
          {"spectral_norm", c.spectral_norm},
          {"adam", {{"learning_rate", c.adam.learning_rate}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}}},
          {"batch_size", c.batch_size},
          {"total_steps", c.total_steps},
          {"disc_steps_per_gen", c.disc_steps_per_gen},
          {"checkpoint_every", c.checkpoint_every},
          {"log_every", c.log_every},
          {"fid_samples", c.fid_samples},
          {"seed", c.seed},
          {"threads", c.threads}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  detail::StrictReader r(j, "train");
  std::string loss(to_string(c.loss)), penalty(to_string(c.penalty));
  r.read("loss", loss);
  r.read("penalty", penalty);
  r.read("penalty_lambda", c.penalty_lambda);
  r.read("spectral_norm", c.spectral_norm);
  if (r.has("adam")) {
    detail::StrictReader ar(r.at("adam"), "train.adam");
    ar.read("learning_rate", c.adam.learning_rate);
    ar.read("beta1", c.adam.beta1);
    ar.read("beta2", c.adam.beta2);
    ar.finish();
  }
  r.read("batch_size", c.batch_size);
  r.read("total_steps", c.total_steps);
  r.read("disc_steps_per_gen", c.disc_steps_per_gen);
  r.read("checkpoint_every", c.checkpoint_every);
  r.read("log_every", c.log_every);
  r.read("fid_samples", c.fid_samples);
  r.read("seed", c.seed);
  r.read("threads", c.threads);
  r.finish();
  c.loss = parse_loss_kind(loss);
  c.penalty = parse_penalty(penalty);
  return c;
}

// --- generator checkpoints --------------------------------------------------------------

void save_generator(const fs::path& path, StructuredGenerator generator, std::int64_t step) {
  Checkpoint ckpt;
  ckpt.step = step;
  ckpt.config = {{"kind", "generator"}, {"model", model_config_json(generator->config())}};
  export_module(*generator, "generator.", ckpt.arrays);
  write_checkpoint(path, ckpt);
}

StructuredGenerator load_generator(const fs::path& path) {
  auto ckpt = read_checkpoint(path);
  const auto kind = ckpt.config.value("kind", "");
  if (kind != "generator" && kind != "training")
    throw VersionError(path.string() + " does not hold a generator");
  StructuredGenerator g(model_config_from_json(ckpt.config.at("model")));
  import_module(*g, "generator.", ckpt.arrays);
  g->eval();
  return g;
}

StructuredGenerator load_generator(const fs::path& path, const ModelConfig& expected) {
  auto ckpt = read_checkpoint(path);
  if (!ckpt.config.contains("model") || model_config_from_json(ckpt.config.at("model")) != expected)
    throw VersionError("checkpoint model config does not match the requested config: " + path.string());
  StructuredGenerator g(expected);
  import_module(*g, "generator.", ckpt.arrays);
  g->eval();
  return g;
}

// --- trainer -----------------------------------------------------------------------------

namespace {

void export_adam(torch::optim::Adam& opt, const std::string& prefix, std::map<std::string, torch::Tensor>& out) {
  const auto& params = opt.param_groups().at(0).params();
  auto& state = opt.state();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto it = state.find(params[i].unsafeGetTensorImpl());
    if (it == state.end()) continue;
    auto& s = static_cast<torch::optim::AdamParamState&>(*it->second);
    const auto key = prefix + std::to_string(i) + ".";
    out[key + "step"] = torch::tensor({s.step()}, torch::kInt64);
    out[key + "exp_avg"] = s.exp_avg().detach().clone();
    out[key + "exp_avg_sq"] = s.exp_avg_sq().detach().clone();
  }
}

void import_adam(torch::optim::Adam& opt, const std::string& prefix,
                 const std::map<std::string, torch::Tensor>& arrays) {
  const auto& params = opt.param_groups().at(0).params();
  auto& state = opt.state();
  state.clear();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto key = prefix + std::to_string(i) + ".";
    auto it = arrays.find(key + "step");
    if (it == arrays.end()) continue;
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(it->second.item<std::int64_t>());
    s->exp_avg(arrays.at(key + "exp_avg").clone().to(params[i].dtype()));
    s->exp_avg_sq(arrays.at(key + "exp_avg_sq").clone().to(params[i].dtype()));
    state[params[i].unsafeGetTensorImpl()] = std::move(s);
  }
}

torch::Tensor string_tensor(const std::string& s) {
  auto t = torch::empty({static_cast<std::int64_t>(s.size())}, torch::kUInt8);
  std::memcpy(t.data_ptr(), s.data(), s.size());
  return t;
}

std::string tensor_string(const torch::Tensor& t) {
  auto c = t.contiguous();
  return std::string(static_cast<const char*>(c.data_ptr()), c.numel());
}

bool same_except_length(TrainConfig a, TrainConfig b) {
  a.total_steps = b.total_steps;
  return a == b;
}

}  // namespace

Trainer::Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const DatasetBundle& data)
    : model_cfg_(model_cfg),
      train_cfg_(train_cfg),
      data_(data),
      data_rng_(derive_seed(train_cfg.seed, 1)),
      noise_(at::make_generator<at::CPUGeneratorImpl>(derive_seed(train_cfg.seed, 2))) {
  model_cfg_.validate();
  train_cfg_.validate();
  if (data_.spec.height != model_cfg_.image_size || data_.spec.width != model_cfg_.image_size)
    throw ValidationError("dataset images are " + std::to_string(data_.spec.height) + "x" +
                          std::to_string(data_.spec.width) + " but the model generates " +
                          std::to_string(model_cfg_.image_size) + "px images");
  if (train_cfg_.threads > 0) torch::set_num_threads(train_cfg_.threads);

  torch::manual_seed(train_cfg_.seed);
  generator_ = StructuredGenerator(model_cfg_);
  discriminator_ = Discriminator(model_cfg_, train_cfg_.spectral_norm);
  auto opts = [&] {
    return torch::optim::AdamOptions(train_cfg_.adam.learning_rate)
        .betas({train_cfg_.adam.beta1, train_cfg_.adam.beta2});
  };
  gen_opt_ = std::make_unique<torch::optim::Adam>(generator_->parameters(), opts());
  disc_opt_ = std::make_unique<torch::optim::Adam>(discriminator_->parameters(), opts());
}

torch::Tensor Trainer::real_batch() {
  auto batch = sample_batch(data_, Split::train, train_cfg_.batch_size, data_rng_);
  std::vector<const ImageU8*> images;
  images.reserve(batch.size());
  for (const auto* s : batch) images.push_back(&s->image);
  return to_batch_tensor(images);
}

StepLosses Trainer::train_cycle() {
  generator_->train();
  discriminator_->train();
  const auto B = train_cfg_.batch_size;
  StepLosses out;

  for (int d = 0; d < train_cfg_.disc_steps_per_gen; ++d) {
    auto real = real_batch();
    torch::Tensor fake;
    {
      torch::NoGradGuard no_grad;
      fake = generator_->forward(sample_latents(model_cfg_, B, noise_)).composite.image;
    }
    auto losses = adversarial_losses(train_cfg_.loss, discriminator_->forward(real), discriminator_->forward(fake));
    auto total = losses.discriminator;
    torch::Tensor penalty;
    if (train_cfg_.penalty == Penalty::wgan_gp) {
      penalty = gradient_penalty([this](const torch::Tensor& x) { return discriminator_->forward(x); }, real, fake,
                                 train_cfg_.penalty_lambda, noise_);
      total = total + penalty;
    }
    disc_opt_->zero_grad();
    total.backward();
    out.discriminator = losses.discriminator.item<double>();
    out.penalty = penalty.defined() ? penalty.item<double>() : 0.0;
    if (!std::isfinite(total.item<double>()))
      throw NumericalError("non-finite discriminator loss at step " + std::to_string(step_));
    disc_opt_->step();
  }

  auto fake = generator_->forward(sample_latents(model_cfg_, B, noise_)).composite.image;
  auto scores = discriminator_->forward(fake);
  auto g_loss = adversarial_losses(train_cfg_.loss, scores.detach(), scores).generator;
  gen_opt_->zero_grad();
  g_loss.backward();
  out.generator = g_loss.item<double>();
  if (!std::isfinite(out.generator))
    throw NumericalError("non-finite generator loss at step " + std::to_string(step_));
  gen_opt_->step();
  disc_opt_->zero_grad();
  ++step_;
  return out;
}

void Trainer::save(const fs::path& path) const {
  Checkpoint ckpt;
  ckpt.step = step_;
  ckpt.config = {{"kind", "training"},
                 {"model", model_config_json(model_cfg_)},
                 {"train", train_config_json(train_cfg_)},
                 {"data_fingerprint", data_.fingerprint}};
  export_module(*generator_, "generator.", ckpt.arrays);
  export_module(*discriminator_, "discriminator.", ckpt.arrays);
  export_adam(*gen_opt_, "opt_generator.", ckpt.arrays);
  export_adam(*disc_opt_, "opt_discriminator.", ckpt.arrays);
  ckpt.arrays["rng.data"] = string_tensor(data_rng_.state());
  ckpt.arrays["rng.noise"] = noise_.get_state();
  write_checkpoint(path, ckpt);
}

void Trainer::load(const fs::path& path) {
  auto ckpt = read_checkpoint(path);
  if (ckpt.config.value("kind", "") != "training") throw VersionError(path.string() + " is not a training checkpoint");
  if (model_config_from_json(ckpt.config.at("model")) != model_cfg_)
    throw VersionError("checkpoint model config does not match: " + path.string());
  if (!same_except_length(train_config_from_json(ckpt.config.at("train")), train_cfg_))
    throw VersionError("checkpoint training config does not match: " + path.string());
  import_module(*generator_, "generator.", ckpt.arrays);
  import_module(*discriminator_, "discriminator.", ckpt.arrays);
  import_adam(*gen_opt_, "opt_generator.", ckpt.arrays);
  import_adam(*disc_opt_, "opt_discriminator.", ckpt.arrays);
  data_rng_.set_state(tensor_string(ckpt.arrays.at("rng.data")));
  noise_.set_state(ckpt.arrays.at("rng.noise"));
  step_ = ckpt.step;
}

fs::path Trainer::checkpoint_path(const fs::path& out_dir, std::int64_t step) {
  std::ostringstream name;
  name << "step_" << std::setw(8) << std::setfill('0') << step << ".ckpt";
  return out_dir / "checkpoints" / name.str();
}

std::optional<fs::path> Trainer::latest_checkpoint(const fs::path& out_dir) {
  const auto dir = out_dir / "checkpoints";
  if (!fs::is_directory(dir)) return std::nullopt;
  std::optional<fs::path> best;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("step_", 0) != 0 || e.path().extension() != ".ckpt") continue;
    if (!best || name > best->filename().string()) best = e.path();
  }
  return best;
}

void Trainer::run(const fs::path& out_dir, std::shared_ptr<Embedder> embedder,
                  const std::function<void(const MetricsRow&)>& on_row) {
  fs::create_directories(out_dir / "checkpoints");
  const auto metrics_path = out_dir / "metrics.jsonl";

  if (auto latest = latest_checkpoint(out_dir)) {
    load(*latest);
    // Rows past the checkpoint belong to work that is about to be redone.
    auto rows = read_metrics(metrics_path);
    std::ofstream rewrite(metrics_path, std::ios::trunc);
    for (const auto& r : rows)
      if (r.step <= step_) rewrite << r.to_json().dump() << "\n";
  } else {
    save(checkpoint_path(out_dir, 0));
    std::ofstream(metrics_path, std::ios::trunc);
  }

  std::ofstream metrics(metrics_path, std::ios::app);
  const auto start = std::chrono::steady_clock::now();
  while (step_ < train_cfg_.total_steps) {
    const auto losses = train_cycle();
    const bool checkpoint = step_ % train_cfg_.checkpoint_every == 0 || step_ == train_cfg_.total_steps;
    if (!checkpoint && step_ % train_cfg_.log_every != 0) continue;

    MetricsRow row{step_, losses.discriminator, losses.generator, losses.penalty, std::nullopt, 0.0};
    if (checkpoint && embedder) {
      auto sampler = generator_sampler(generator_, derive_seed(train_cfg_.seed, 1000 + static_cast<std::uint64_t>(step_)));
      row.fid = compute_fid(sampler, data_, *embedder, train_cfg_.fid_samples);
    }
    row.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    metrics << row.to_json().dump() << "\n" << std::flush;
    if (on_row) on_row(row);
    if (checkpoint) save(checkpoint_path(out_dir, step_));
  }
}

}  // namespace kgan
