// kgan command-line tool. Exit codes: 0 success, 1 invalid input, 2 runtime failure.

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>

#include "CLI11.hpp"
#include "json.hpp"
#include "kgan/datasets.hpp"
#include "kgan/error.hpp"
#include "kgan/evaluation.hpp"
#include "kgan/orchestration.hpp"
#include "kgan/segmentation.hpp"
#include "kgan/training.hpp"

namespace fs = std::filesystem;
using namespace kgan;

namespace {

// A run directory resolves to its best checkpoint, else its newest one.
fs::path resolve_checkpoint(const fs::path& p) {
  if (!fs::is_directory(p)) return p;
  std::ifstream best(p / "best.json");
  if (best) return p / nlohmann::json::parse(best).at("checkpoint").get<std::string>();
  if (auto latest = Trainer::latest_checkpoint(p)) return *latest;
  throw ValidationError("no checkpoint found in " + p.string());
}

std::unique_ptr<DigitCorpus> open_digits(const std::string& mnist_dir, std::uint64_t seed) {
  if (!mnist_dir.empty()) return std::make_unique<MnistCorpus>(mnist_dir);
  std::cerr << "note: no --mnist directory given, using the procedural digit corpus\n";
  return std::make_unique<ProceduralDigitCorpus>(600, derive_seed(seed, 77));
}

std::unique_ptr<BackgroundCorpus> open_backgrounds(const std::string& cifar_dir, std::uint64_t seed) {
  if (!cifar_dir.empty()) return std::make_unique<CifarCorpus>(cifar_dir);
  std::cerr << "note: no --cifar directory given, using the procedural texture corpus\n";
  return std::make_unique<ProceduralTextureCorpus>(5000, derive_seed(seed, 78));
}

void print_warnings(const DatasetBundle& b) {
  for (const auto& w : b.warnings) std::cerr << "warning: " << w << "\n";
}

int run_cells_parallel(const std::vector<fs::path>& configs, int parallel) {
  int failures = 0, running = 0;
  auto reap = [&] {
    int status = 0;
    if (::wait(&status) > 0) {
      --running;
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) ++failures;
    }
  };
  for (const auto& cfg : configs) {
    while (running >= parallel) reap();
    const pid_t pid = ::fork();
    if (pid < 0) throw Error("fork failed");
    if (pid == 0) {
      const std::string path = cfg.string();
      ::execl("/proc/self/exe", "kgan", "train", "--config", path.c_str(), static_cast<char*>(nullptr));
      std::_Exit(2);
    }
    ++running;
  }
  while (running > 0) reap();
  return failures;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compositional GAN toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("kgan ") + KGAN_VERSION);

  // data
  auto* data = app.add_subcommand("data", "Build or ingest datasets");
  data->require_subcommand(1);
  auto* build = data->add_subcommand("build", "Render a Multi-MNIST variant");
  std::string variant = "independent_mm", out_dir, mnist_dir, cifar_dir;
  SplitCounts counts{50'000, 10'000, 10'000};
  std::uint64_t seed = 0;
  int threads = 1;
  build->add_option("--variant", variant, "independent_mm, triplet_mm, rgb_occluded_mm, cifar10_mm")
      ->capture_default_str();
  build->add_option("--out", out_dir, "Output directory")->required();
  build->add_option("--mnist", mnist_dir, "Directory with MNIST idx files");
  build->add_option("--cifar", cifar_dir, "Directory with CIFAR-10 binary batches");
  build->add_option("--train", counts.train)->capture_default_str();
  build->add_option("--holdout", counts.holdout)->capture_default_str();
  build->add_option("--test", counts.test)->capture_default_str();
  build->add_option("--seed", seed)->capture_default_str();
  build->add_option("--threads", threads)->capture_default_str();

  auto* clevr = data->add_subcommand("ingest-clevr", "Preprocess CLEVR renders");
  std::string clevr_src;
  SplitCounts clevr_counts{0, 0, 0};
  clevr->add_option("--src", clevr_src, "Directory of CLEVR PNG images")->required();
  clevr->add_option("--out", out_dir, "Output directory")->required();
  clevr->add_option("--holdout", clevr_counts.holdout)->capture_default_str();
  clevr->add_option("--test", clevr_counts.test)->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Train (or resume) one experiment");
  std::string config_path, data_override, out_override;
  std::int64_t steps_override = -1;
  train->add_option("--config", config_path, "Experiment config (JSON)")->required();
  train->add_option("--data", data_override, "Override data_dir");
  train->add_option("--out", out_override, "Override output_root (also KGAN_OUTPUT_ROOT)");
  train->add_option("--steps", steps_override, "Override train.total_steps");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate generators");
  eval->require_subcommand(1);
  auto* fid = eval->add_subcommand("fid", "FID of a checkpoint against a dataset split");
  std::string ckpt, embedder_spec = "builtin", fid_split = "holdout";
  std::int64_t n = 10'000, embedder_steps = 600;
  fid->add_option("--ckpt", ckpt, "Checkpoint file or run directory")->required();
  fid->add_option("--data", data_override, "Dataset directory")->required();
  fid->add_option("--n", n, "Number of samples")->capture_default_str();
  fid->add_option("--embedder", embedder_spec, "builtin, builtin:PATH or script:PATH")->capture_default_str();
  fid->add_option("--embedder-steps", embedder_steps)->capture_default_str();
  fid->add_option("--split", fid_split, "Reference split")->capture_default_str();
  fid->add_option("--seed", seed)->capture_default_str();

  // traverse
  auto* traverse = app.add_subcommand("traverse", "Latent traversal grid");
  int component = 0, dim = -1, samples = 4, increments = 8;
  double span = 1.0;
  std::string out_png;
  traverse->add_option("--ckpt", ckpt)->required();
  traverse->add_option("--component", component, "Object index, or -1 for the background")->capture_default_str();
  traverse->add_option("--dim", dim, "Latent coordinate to move (default: random direction)");
  traverse->add_option("--samples", samples)->capture_default_str();
  traverse->add_option("--steps", increments, "Evenly spaced increments from -span to +span")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  traverse->add_option("--span", span)->capture_default_str();
  traverse->add_option("--seed", seed)->capture_default_str();
  traverse->add_option("--out", out_png, "Output PNG")->required();

  // dump
  auto* dump = app.add_subcommand("dump", "Debug dumps");
  dump->require_subcommand(1);
  auto* dump_components = dump->add_subcommand("components", "Write every layer of generated samples");
  std::int64_t dump_n = 4;
  dump_components->add_option("--ckpt", ckpt)->required();
  dump_components->add_option("--out", out_dir)->required();
  dump_components->add_option("--n", dump_n)->capture_default_str();
  dump_components->add_option("--seed", seed)->capture_default_str();

  // segment
  auto* segment = app.add_subcommand("segment", "Segmentation by inversion");
  segment->require_subcommand(1);
  std::string label_mode = "threshold";
  auto* extract = segment->add_subcommand("extract", "Write generated image/label pairs as a dataset");
  extract->add_option("--ckpt", ckpt)->required();
  extract->add_option("--n", n)->required();
  extract->add_option("--out", out_dir)->required();
  extract->add_option("--mode", label_mode, "threshold or alpha_weights")->capture_default_str();
  extract->add_option("--seed", seed)->capture_default_str();

  auto* seg_train = segment->add_subcommand("train", "Train a segmenter on generated or dataset labels");
  SegmenterTrainConfig seg_cfg;
  std::string seg_out;
  int seg_components = 3;
  auto* seg_data_opt = seg_train->add_option("--data", data_override, "Dataset with label maps");
  auto* seg_ckpt_opt = seg_train->add_option("--ckpt", ckpt, "Generator checkpoint or run directory");
  seg_data_opt->excludes(seg_ckpt_opt);
  seg_train->add_option("--components", seg_components, "K when training from --data")->capture_default_str();
  seg_train->add_option("--mode", label_mode)->capture_default_str();
  seg_train->add_option("--steps", seg_cfg.steps)->capture_default_str();
  seg_train->add_option("--batch", seg_cfg.batch_size)->capture_default_str();
  seg_train->add_option("--lr", seg_cfg.learning_rate)->capture_default_str();
  seg_train->add_option("--width", seg_cfg.width)->capture_default_str();
  seg_train->add_option("--seed", seg_cfg.seed)->capture_default_str();
  seg_train->add_option("--out", seg_out, "Segmenter checkpoint path")->required();

  auto* seg_eval = segment->add_subcommand("eval", "ARI of a segmenter on real scenes");
  std::string segmenter_path, report_path;
  std::int64_t eval_n = 0;
  std::string seg_split = "test";
  seg_eval->add_option("--segmenter", segmenter_path)->required();
  seg_eval->add_option("--data", data_override)->required();
  seg_eval->add_option("--split", seg_split)->capture_default_str();
  seg_eval->add_option("--n", eval_n, "Scenes to score (0 = all)")->capture_default_str();
  seg_eval->add_option("--report", report_path, "Per-image report file")->required();

  // grid
  auto* grid = app.add_subcommand("grid", "Enumerate and run a hyper-parameter grid");
  std::string preset, grid_spec_path, base_path;
  int n_seeds = 0, parallel = 1;
  bool dry_run = false;
  grid->add_option("--preset", preset, "baseline or structured");
  grid->add_option("--spec", grid_spec_path, "Grid spec (JSON)");
  grid->add_option("--base", base_path, "Base experiment config for presets");
  grid->add_option("--seeds", n_seeds, "Seeds 0..N-1 per cell (0 keeps the base seed)");
  grid->add_option("--parallel", parallel, "Cells run as separate processes")->capture_default_str();
  grid->add_flag("--dry-run", dry_run, "Only list the cells");

  // report
  auto* report = app.add_subcommand("report", "Summarize best FIDs of finished runs");
  std::string report_root;
  report->add_option("--root", report_root, "Directory holding run directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*build) {
      auto spec = SceneSpec::defaults(parse_variant(variant), seed);
      if (spec.variant == Variant::clevr) throw ValidationError("use 'data ingest-clevr' for CLEVR");
      auto digits = open_digits(mnist_dir, seed);
      DatasetBundle b;
      if (spec.variant == Variant::cifar10_mm) {
        auto bgs = open_backgrounds(cifar_dir, seed);
        b = build_cifar_mm(spec, counts, *digits, *bgs, threads);
      } else {
        b = build_multi_mnist(spec, counts, *digits, threads);
      }
      print_warnings(b);
      b.save(out_dir);
      std::cout << "wrote " << b.counts.total() << " scenes to " << out_dir << " (fingerprint " << b.fingerprint
                << ")\n";
    } else if (*clevr) {
      auto b = ingest_clevr(clevr_src, clevr_counts);
      print_warnings(b);
      b.save(out_dir);
      std::cout << "wrote " << b.counts.total() << " scenes to " << out_dir << "\n";
    } else if (*train) {
      auto cfg = ExperimentConfig::load(config_path);
      if (!data_override.empty()) cfg.data_dir = data_override;
      if (const char* env = std::getenv("KGAN_OUTPUT_ROOT"); env && *env) cfg.output_root = env;
      if (!out_override.empty()) cfg.output_root = out_override;
      if (steps_override >= 0) cfg.train.total_steps = steps_override;
      std::cout << "run " << cfg.name << " [" << cfg.model.tag() << "] -> " << cfg.run_dir() << "\n";
      RunOptions opts;
      opts.on_row = [](const MetricsRow& r) {
        std::cout << "step " << r.step << " d=" << r.discriminator_loss << " g=" << r.generator_loss;
        if (r.fid) std::cout << " fid=" << *r.fid;
        std::cout << std::endl;
      };
      auto res = run_experiment(cfg, opts);
      if (res.best) std::cout << "best step " << res.best->step << " fid " << res.best->fid << "\n";
    } else if (*fid) {
      auto gen = load_generator(resolve_checkpoint(ckpt));
      auto bundle = DatasetBundle::load(data_override);
      EmbedderTrainConfig ec;
      ec.steps = embedder_steps;
      ec.seed = seed;
      auto emb = make_embedder(embedder_spec, bundle, ec);
      const double value = compute_fid(generator_sampler(gen, seed), bundle, *emb, n, parse_split(fid_split));
      std::cout << "fid " << value << " (embedder " << emb->name() << ", n=" << n << ")\n";
    } else if (*traverse) {
      auto gen = load_generator(resolve_checkpoint(ckpt));
      const auto& cfg = gen->config();
      auto noise = at::make_generator<at::CPUGeneratorImpl>(seed);
      auto base = sample_latents(cfg, samples, noise);
      TraversalSpec spec;
      spec.component = component;
      for (int i = 0; i < increments; ++i)
        spec.increments.push_back(increments == 1 ? 0.0 : span * (-1.0 + 2.0 * i / (increments - 1)));
      if (dim >= 0) {
        if (dim >= cfg.latent_dim) throw ValidationError("--dim exceeds the latent size");
        spec.direction = torch::zeros({cfg.latent_dim});
        spec.direction[dim] = 1.0;
      } else {
        spec.direction = torch::randn({cfg.latent_dim}, noise);
        spec.direction /= spec.direction.norm();
      }
      auto frames = traverse_latent(gen, base, spec);
      std::vector<ImageU8> cells;
      for (int b = 0; b < samples; ++b)
        for (const auto& f : frames) cells.push_back(from_tensor(f[b]));
      write_png(out_png, tile(cells, static_cast<int>(frames.size())));
      std::cout << "wrote " << out_png << "\n";
    } else if (*dump_components) {
      auto gen = load_generator(resolve_checkpoint(ckpt));
      auto noise = at::make_generator<at::CPUGeneratorImpl>(seed);
      torch::NoGradGuard no_grad;
      auto out = gen->forward(sample_latents(gen->config(), dump_n, noise));
      for (std::int64_t i = 0; i < dump_n; ++i) {
        const auto dir = fs::path(out_dir) / ("sample_" + std::to_string(i));
        fs::create_directories(dir);
        auto layers = render_layers(out, i);
        std::size_t next = 0;
        if (out.background) write_png(dir / "background.png", layers[next++]);
        for (std::size_t k = 0; k < out.components.size(); ++k)
          write_png(dir / ("object_" + std::to_string(k) + ".png"), layers[next++]);
        write_png(dir / "composite.png", layers[next]);
      }
      std::cout << "wrote " << dump_n << " samples to " << out_dir << "\n";
    } else if (*extract) {
      auto gen = load_generator(resolve_checkpoint(ckpt));
      auto b = generated_bundle(gen, parse_label_mode(label_mode), n, seed);
      b.save(out_dir);
      std::cout << "wrote " << n << " generated pairs to " << out_dir << "\n";
    } else if (*seg_train) {
      LabelSource source;
      std::unique_ptr<DatasetBundle> bundle;
      int K = seg_components;
      if (!ckpt.empty()) {
        auto gen = load_generator(resolve_checkpoint(ckpt));
        K = gen->config().K;
        source = generator_label_source(gen, parse_label_mode(label_mode), derive_seed(seg_cfg.seed, 1));
      } else if (!data_override.empty()) {
        bundle = std::make_unique<DatasetBundle>(DatasetBundle::load(data_override));
        source = dataset_label_source(*bundle, Split::train, derive_seed(seg_cfg.seed, 1));
      } else {
        throw ValidationError("segment train needs --data or --ckpt");
      }
      auto res = train_segmenter(source, K, seg_cfg, [](std::int64_t step, double loss) {
        if ((step + 1) % 100 == 0) std::cout << "step " << step + 1 << " loss " << loss << std::endl;
      });
      save_segmenter(seg_out, res.net);
      std::cout << "wrote " << seg_out << "\n";
    } else if (*seg_eval) {
      auto net = load_segmenter(segmenter_path);
      auto bundle = DatasetBundle::load(data_override);
      auto rep = evaluate_segmenter(net, bundle, parse_split(seg_split), eval_n);
      std::ofstream out(report_path);
      for (const auto& [id, ari] : rep.per_image) out << id << " " << ari << "\n";
      out << "# mean " << rep.mean << " std " << rep.stddev << " n " << rep.per_image.size() << " skipped "
          << rep.skipped << "\n";
      std::cout << "ARI " << rep.mean << " +- " << rep.stddev << " over " << rep.per_image.size() << " scenes\n";
    } else if (*grid) {
      if (preset.empty() == grid_spec_path.empty()) throw ValidationError("grid needs exactly one of --preset, --spec");
      GridSpec spec;
      if (!grid_spec_path.empty()) {
        std::ifstream in(grid_spec_path);
        if (!in) throw ValidationError("cannot open " + grid_spec_path);
        spec = GridSpec::from_json(nlohmann::json::parse(in));
      } else {
        ExperimentConfig base;
        if (!base_path.empty()) base = ExperimentConfig::load(base_path);
        spec = GridSpec::preset(preset, base);
      }
      if (n_seeds > 0) {
        spec.seeds.clear();
        for (int s = 0; s < n_seeds; ++s) spec.seeds.push_back(static_cast<std::uint64_t>(s));
      }
      if (const char* env = std::getenv("KGAN_OUTPUT_ROOT"); env && *env) spec.base.output_root = env;
      std::cout << "grid: " << spec.size() << " runs\n";
      auto cells = enumerate_grid(spec);
      if (dry_run) {
        for (const auto& c : cells) std::cout << c.name << " [" << c.model.tag() << "]\n";
        return 0;
      }
      if (parallel < 1) throw ValidationError("--parallel must be >= 1");
      const auto cell_dir = spec.base.output_root / "grid-configs";
      std::vector<fs::path> paths;
      for (const auto& c : cells) {
        c.validate();
        paths.push_back(cell_dir / (c.name + ".json"));
        c.save(paths.back());
      }
      int failures = 0;
      if (parallel == 1) {
        for (const auto& c : cells) {
          std::cout << "== " << c.name << " [" << c.model.tag() << "]" << std::endl;
          try {
            run_experiment(c);
          } catch (const std::exception& e) {
            std::cerr << c.name << ": " << e.what() << "\n";
            ++failures;
          }
        }
      } else {
        failures = run_cells_parallel(paths, parallel);
      }
      std::cout << cells.size() - failures << "/" << cells.size() << " runs finished\n";
      if (failures > 0) return 2;
    } else if (*report) {
      auto rows = collect_report(report_root);
      std::printf("%-32s %-18s %6s %12s %10s\n", "cell", "tag", "seeds", "fid_mean", "fid_std");
      for (const auto& r : rows)
        std::printf("%-32s %-18s %6lld %12.4f %10.4f\n", r.cell.c_str(), r.tag.c_str(),
                    static_cast<long long>(r.summary.seeds), r.summary.mean, r.summary.stddev);
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
