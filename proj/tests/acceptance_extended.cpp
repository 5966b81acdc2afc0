// Acceptance check 9: the desk-scale end-to-end run. Hours of compute at the
// default scale, so it is not part of the default test run.
//
// Environment overrides (defaults in brackets):
//   KGAN_E2E_ROOT      work directory                       [kgan-e2e under the temp dir]
//   KGAN_E2E_MNIST     directory with MNIST idx files       [procedural digits]
//   KGAN_E2E_SEEDS     number of seeds                      [5]
//   KGAN_E2E_STEPS     generator updates per run            [50000]
//   KGAN_E2E_EVERY     FID cadence                          [1000]
//   KGAN_E2E_FID_N     FID sample count                     [2000]
//   KGAN_E2E_BATCH     batch size                           [64]
//   KGAN_E2E_WIDTH     generator base channels              [512]
//   KGAN_E2E_TRAIN     train scenes                         [50000]
//   KGAN_E2E_SEG_STEPS segmenter updates                    [5000]
//   KGAN_E2E_TEST      held-out real scenes scored by ARI   [1000]

#include <cstdio>
#include <cstdlib>
#include <memory>
#include <string>

#include "kgan/datasets.hpp"
#include "kgan/orchestration.hpp"
#include "kgan/segmentation.hpp"

using namespace kgan;
namespace fs = std::filesystem;

namespace {

std::int64_t env_int(const char* name, std::int64_t fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::stoll(v) : fallback;
}

std::string env_str(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}

}  // namespace

int main() {
  const fs::path root = env_str("KGAN_E2E_ROOT", (fs::temp_directory_path() / "kgan-e2e").string());
  const auto seeds = env_int("KGAN_E2E_SEEDS", 5);
  const auto steps = env_int("KGAN_E2E_STEPS", 50'000);
  const auto every = env_int("KGAN_E2E_EVERY", 1'000);
  const auto n_test = env_int("KGAN_E2E_TEST", 1'000);

  const fs::path data_dir = root / "data";
  if (!fs::exists(data_dir / "manifest.txt")) {
    std::unique_ptr<DigitCorpus> digits;
    const auto mnist = env_str("KGAN_E2E_MNIST", "");
    if (!mnist.empty())
      digits = std::make_unique<MnistCorpus>(mnist);
    else
      digits = std::make_unique<ProceduralDigitCorpus>(600, 1);
    SplitCounts counts{env_int("KGAN_E2E_TRAIN", 50'000), 10'000, n_test};
    build_multi_mnist(SceneSpec::defaults(Variant::independent_mm, 0), counts, *digits, 4).save(data_dir);
    std::printf("built dataset (%s digits) in %s\n", mnist.empty() ? "procedural" : "MNIST", data_dir.c_str());
  }
  const auto data = DatasetBundle::load(data_dir);

  ExperimentConfig base;
  base.name = "e2e";
  base.data_dir = data_dir;
  base.output_root = root / "runs";
  base.model.generator_channels = env_int("KGAN_E2E_WIDTH", 512);
  base.train = TrainConfig::desk();
  base.train.total_steps = steps;
  base.train.checkpoint_every = every;
  base.train.log_every = std::max<std::int64_t>(1, every / 10);
  base.train.fid_samples = env_int("KGAN_E2E_FID_N", 2'000);
  base.train.batch_size = env_int("KGAN_E2E_BATCH", 64);

  int improved = 0;
  std::optional<RunResult> first;
  for (std::int64_t s = 0; s < seeds; ++s) {
    auto cfg = base;
    cfg.name = "e2e-s" + std::to_string(s + 1);
    cfg.train.seed = static_cast<std::uint64_t>(s + 1);
    auto res = run_experiment(cfg);
    auto rows = read_metrics(res.dir / "metrics.jsonl");
    std::optional<double> early, last;
    for (const auto& r : rows) {
      if (r.step == std::min(every, steps) && r.fid) early = r.fid;
      if (r.step == steps && r.fid) last = r.fid;
    }
    const bool better = early && last && *last < *early;
    improved += better;
    std::printf("seed %lld: FID(%lld)=%.3f FID(%lld)=%.3f %s\n", static_cast<long long>(s + 1),
                static_cast<long long>(std::min(every, steps)), early.value_or(NAN), static_cast<long long>(steps),
                last.value_or(NAN), better ? "improved" : "not improved");
    if (!first) first = res;
  }
  const bool pass_a = seeds > 0 && improved * 5 >= seeds * 4;
  std::printf("%s 9a FID improves for %d/%lld seeds (need 4/5)\n", pass_a ? "PASS" : "FAIL", improved,
              static_cast<long long>(seeds));

  bool pass_b = false;
  if (first) {
    auto gen = load_generator(Trainer::checkpoint_path(first->dir, steps));
    SegmenterTrainConfig sc;
    sc.steps = env_int("KGAN_E2E_SEG_STEPS", 5'000);
    auto seg = train_segmenter(generator_label_source(gen, LabelMode::threshold, 17), gen->config().K, sc);
    save_segmenter(first->dir / "segmenter.ckpt", seg.net);
    auto report = evaluate_segmenter(seg.net, data, Split::test, n_test);
    pass_b = report.mean >= 0.5;
    std::printf("%s 9b segmentation ARI %.3f +- %.3f on %zu held-out scenes (need >= 0.5)\n",
                pass_b ? "PASS" : "FAIL", report.mean, report.stddev, report.per_image.size());
  } else {
    std::printf("FAIL 9b no run to segment with\n");
  }
  return pass_a && pass_b ? 0 : 1;
}
