#pragma once

// Adversarial optimization: NS-GAN / WGAN losses, WGAN gradient penalty, the
// alternating update schedule, checkpoints and metric rows.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "kgan/datasets.hpp"
#include "kgan/evaluation.hpp"
#include "kgan/models.hpp"

namespace kgan {

enum class LossKind { ns_gan, wgan };
enum class Penalty { none, wgan_gp };

std::string_view to_string(LossKind k);
LossKind parse_loss_kind(std::string_view s);
std::string_view to_string(Penalty p);
Penalty parse_penalty(std::string_view s);

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  bool operator==(const AdamConfig&) const = default;
};

struct TrainConfig {
  LossKind loss = LossKind::ns_gan;
  Penalty penalty = Penalty::none;
  double penalty_lambda = 10.0;
  bool spectral_norm = false;
  AdamConfig adam;
  std::int64_t batch_size = 64;
  std::int64_t total_steps = 1'000'000;  // generator updates
  int disc_steps_per_gen = 5;
  std::int64_t checkpoint_every = 20'000;
  std::int64_t log_every = 100;
  std::int64_t fid_samples = 10'000;
  std::uint64_t seed = 0;
  int threads = 0;  // 0 keeps the torch default

  /// 1M steps, FID on 10k samples every 20k steps.
  static TrainConfig full();
  /// 50k steps, FID on 2k samples every 1k steps.
  static TrainConfig desk();

  std::vector<std::string> violations() const;
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct Losses {
  torch::Tensor discriminator;
  torch::Tensor generator;
};

/// ns_gan: L_D = mean softplus(-s_real) + mean softplus(s_fake), L_G = mean softplus(-s_fake).
/// wgan:   L_D = mean s_fake - mean s_real,                    L_G = -mean s_fake.
Losses adversarial_losses(LossKind kind, const torch::Tensor& scores_real,
                          const torch::Tensor& scores_fake);

using Critic = std::function<torch::Tensor(const torch::Tensor&)>;

/// lambda * mean (||grad_x D(x_hat)||_2 - 1)^2 with x_hat = eps*real + (1-eps)*fake.
/// `eps` holds one value per sample. The graph is kept so the result can be
/// back-propagated into the critic's parameters.
torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& real,
                               const torch::Tensor& fake, double lambda, const torch::Tensor& eps);

/// Same, with eps ~ UNIFORM(0,1) per sample drawn from `gen`.
torch::Tensor gradient_penalty(const Critic& critic, const torch::Tensor& real,
                               const torch::Tensor& fake, double lambda, torch::Generator& gen);

struct MetricsRow {
  std::int64_t step = 0;
  double discriminator_loss = 0;
  double generator_loss = 0;
  double penalty = 0;
  std::optional<double> fid;
  double wall_clock = 0;

  nlohmann::json to_json() const;
  static MetricsRow from_json(const nlohmann::json& j);
};

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

// --- generator checkpoints ------------------------------------------------------------

nlohmann::json model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Generator-only checkpoint (inference mode state included).
void save_generator(const std::filesystem::path& path, StructuredGenerator generator, std::int64_t step = 0);

/// Rebuilds the generator from the config stored in the file.
StructuredGenerator load_generator(const std::filesystem::path& path);

/// Loads only if the stored model config equals `expected`; VersionError otherwise.
StructuredGenerator load_generator(const std::filesystem::path& path, const ModelConfig& expected);

// --- trainer ---------------------------------------------------------------------------

struct StepLosses {
  double discriminator = 0;
  double generator = 0;
  double penalty = 0;
};

/// Owns both networks, both optimizers and every random stream of a run.
/// Checkpoints capture all of them, so a resumed run continues bit-exactly.
class Trainer {
 public:
  Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const DatasetBundle& data);

  /// One cycle: disc_steps_per_gen discriminator updates then one generator update.
  StepLosses train_cycle();

  /// Runs until total_steps, writing checkpoints/metrics under `out_dir`.
  /// Resumes from the newest checkpoint found there. The initial (step 0)
  /// checkpoint is always present. NaN losses abort with NumericalError; the
  /// last good checkpoint stays on disk.
  void run(const std::filesystem::path& out_dir, std::shared_ptr<Embedder> embedder,
           const std::function<void(const MetricsRow&)>& on_row = {});

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

  std::int64_t step() const { return step_; }
  StructuredGenerator generator() const { return generator_; }
  Discriminator discriminator() const { return discriminator_; }
  const ModelConfig& model_config() const { return model_cfg_; }
  const TrainConfig& train_config() const { return train_cfg_; }

  static std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::int64_t step);
  /// Highest-step checkpoint in out_dir/checkpoints, if any.
  static std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& out_dir);

 private:
  torch::Tensor real_batch();

  ModelConfig model_cfg_;
  TrainConfig train_cfg_;
  const DatasetBundle& data_;
  StructuredGenerator generator_{nullptr};
  Discriminator discriminator_{nullptr};
  std::unique_ptr<torch::optim::Adam> gen_opt_;
  std::unique_ptr<torch::optim::Adam> disc_opt_;
  Rng data_rng_;
  torch::Generator noise_;
  std::int64_t step_ = 0;
};

}  // namespace kgan
