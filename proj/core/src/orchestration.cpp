#include "kgan/orchestration.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "json_util.hpp"
#include "kgan/error.hpp"
#include "kgan/evaluation.hpp"

namespace kgan {

namespace fs = std::filesystem;
using nlohmann::json;

// --- experiment config ----------------------------------------------------------------

json ExperimentConfig::to_json() const {
  return {{"version", version},
          {"name", name},
          {"data_dir", data_dir.string()},
          {"output_root", output_root.string()},
          {"model", model_config_json(model)},
          {"train", train_config_json(train)},
          {"eval", {{"embedder", eval.embedder}, {"embedder_train_steps", eval.embedder_train_steps}}}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  detail::StrictReader r(j, "config");
  c.version = 0;
  r.read("version", c.version);
  if (c.version != kConfigVersion)
    throw ValidationError("config version " + std::to_string(c.version) + " unsupported (expected " +
                          std::to_string(kConfigVersion) + ")");
  std::string data_dir, output_root = c.output_root.string();
  r.read("name", c.name);
  r.read("data_dir", data_dir);
  r.read("output_root", output_root);
  c.data_dir = data_dir;
  c.output_root = output_root;
  if (r.has("model")) c.model = model_config_from_json(r.at("model"));
  if (r.has("train")) c.train = train_config_from_json(r.at("train"));
  if (r.has("eval")) {
    detail::StrictReader er(r.at("eval"), "config.eval");
    er.read("embedder", c.eval.embedder);
    er.read("embedder_train_steps", c.eval.embedder_train_steps);
    er.finish();
  }
  r.finish();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

void ExperimentConfig::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream(path) << to_json().dump(2) << "\n";
}

std::vector<std::string> ExperimentConfig::violations() const {
  std::vector<std::string> v;
  if (version != kConfigVersion) v.push_back("version must be " + std::to_string(kConfigVersion));
  if (name.empty() || name.find('/') != std::string::npos || name == "." || name == "..")
    v.push_back("name must be a non-empty single path component");
  for (auto& m : model.violations()) v.push_back(std::move(m));
  for (auto& m : train.violations()) v.push_back(std::move(m));
  const auto& e = eval.embedder;
  if (e != "builtin" && e != "none" && e.rfind("builtin:", 0) != 0 && e.rfind("script:", 0) != 0)
    v.push_back("eval.embedder must be builtin, builtin:PATH, script:PATH or none");
  if (eval.embedder_train_steps < 0) v.push_back("eval.embedder_train_steps must be >= 0");
  return v;
}

void ExperimentConfig::validate() const { throw_if_any(violations()); }

// --- grid --------------------------------------------------------------------------------

std::int64_t GridSpec::size() const {
  std::int64_t n = 1;
  for (const auto& a : axes) n *= static_cast<std::int64_t>(a.values.size());
  return n * std::max<std::int64_t>(1, static_cast<std::int64_t>(seeds.size()));
}

json GridSpec::to_json() const {
  json axes_j = json::array();
  for (const auto& a : axes) axes_j.push_back({{"path", a.path}, {"values", a.values}});
  return {{"version", kConfigVersion}, {"base", base.to_json()}, {"axes", axes_j}, {"seeds", seeds}};
}

GridSpec GridSpec::from_json(const json& j) {
  GridSpec g;
  detail::StrictReader r(j, "grid");
  int version = 0;
  r.read("version", version);
  if (version != kConfigVersion) throw ValidationError("grid version " + std::to_string(version) + " unsupported");
  std::string preset;
  r.read("preset", preset);
  if (r.has("base")) g.base = ExperimentConfig::from_json(r.at("base"));
  if (!preset.empty()) {
    auto p = GridSpec::preset(preset, g.base);
    g.axes = std::move(p.axes);
  }
  if (r.has("axes")) {
    for (const auto& a : r.at("axes")) {
      detail::StrictReader ar(a, "grid.axes[]");
      GridAxis axis;
      ar.read("path", axis.path);
      ar.read("values", axis.values);
      ar.finish();
      g.axes.push_back(std::move(axis));
    }
  }
  r.read("seeds", g.seeds);
  r.finish();
  return g;
}

GridSpec GridSpec::baseline(const ExperimentConfig& base) {
  GridSpec g;
  g.base = base;
  g.base.model.K = 1;
  g.base.model.relational = {};
  g.base.model.use_background = false;
  g.base.model.compose_mode = ComposeMode::sum_clip;
  g.axes = {
      {"/train/loss", {"ns_gan", "wgan"}},
      {"/train/penalty", {"none", "wgan_gp"}},
      {"/train/penalty_lambda", {1.0, 10.0}},
      {"/train/spectral_norm", {false, true}},
      {"/train/adam",
       {json{{"beta1", 0.5}, {"beta2", 0.9}}, json{{"beta1", 0.5}, {"beta2", 0.999}},
        json{{"beta1", 0.9}, {"beta2", 0.999}}}},
  };
  return g;
}

GridSpec GridSpec::structured(const ExperimentConfig& base) {
  GridSpec g;
  g.base = base;
  g.base.train.loss = LossKind::ns_gan;
  g.base.train.penalty = Penalty::wgan_gp;
  g.base.train.penalty_lambda = 1.0;
  g.base.train.adam.beta1 = 0.9;
  g.base.train.adam.beta2 = 0.999;
  auto rel = [](int blocks, bool share, int heads) {
    return json{{"n_blocks", blocks}, {"share_across_blocks", share}, {"n_heads", heads}};
  };
  g.axes = {
      {"/train/spectral_norm", {false, true}},
      {"/model/K", {3, 4, 5}},
      {"/model/relational",
       {rel(0, false, 1), rel(1, false, 1), rel(1, false, 2), rel(2, false, 1), rel(2, true, 1), rel(2, false, 2),
        rel(2, true, 2)}},
  };
  return g;
}

GridSpec GridSpec::preset(const std::string& name, const ExperimentConfig& base) {
  if (name == "baseline") return baseline(base);
  if (name == "structured") return structured(base);
  throw ValidationError("unknown grid preset '" + name + "' (baseline, structured)");
}

std::vector<ExperimentConfig> enumerate_grid(const GridSpec& spec) {
  for (const auto& a : spec.axes) {
    if (a.values.empty()) throw ValidationError("grid axis " + a.path + " has no values");
    if (a.path == "/version" || a.path == "/name" || a.path == "/train/seed")
      throw ValidationError("grid axis " + a.path + " is managed by the grid itself");
  }
  const json base = spec.base.to_json();
  std::vector<std::uint64_t> seeds = spec.seeds;
  const bool seeded = !seeds.empty();
  if (!seeded) seeds.push_back(spec.base.train.seed);

  std::vector<ExperimentConfig> out;
  std::vector<std::size_t> idx(spec.axes.size(), 0);
  for (std::int64_t cell = 0;; ++cell) {
    json j = base;
    for (std::size_t a = 0; a < spec.axes.size(); ++a) {
      const json::json_pointer ptr(spec.axes[a].path);
      const auto& value = spec.axes[a].values[idx[a]];
      if (!j.contains(ptr)) throw ValidationError("grid axis " + spec.axes[a].path + " names no config field");
      if (value.is_object()) j[ptr].merge_patch(value);
      else j[ptr] = value;
    }
    for (auto seed : seeds) {
      char suffix[64];
      std::snprintf(suffix, sizeof suffix, "-c%03lld", static_cast<long long>(cell));
      std::string name = spec.base.name + suffix;
      if (seeded) name += "-s" + std::to_string(seed);
      j["name"] = name;
      j["train"]["seed"] = seed;
      ExperimentConfig cfg;
      try {
        cfg = ExperimentConfig::from_json(j);
      } catch (const ValidationError& e) {
        throw ValidationError("grid cell " + name + ": " + e.what());
      }
      auto v = cfg.violations();
      if (!v.empty()) {
        std::string msg = "grid cell " + name + " is inconsistent:";
        for (const auto& m : v) msg += "\n  " + m;
        throw ValidationError(msg);
      }
      out.push_back(std::move(cfg));
    }
    // odometer, last axis fastest
    std::size_t a = spec.axes.size();
    while (a > 0) {
      --a;
      if (++idx[a] < spec.axes[a].values.size()) break;
      idx[a] = 0;
      if (a == 0) return out;
    }
    if (spec.axes.empty()) return out;
  }
}

// --- selection ------------------------------------------------------------------------

BestCheckpoint select_best(const std::vector<MetricsRow>& rows) {
  std::optional<BestCheckpoint> best;
  for (const auto& r : rows) {
    if (!r.fid) continue;
    if (!best || *r.fid < best->fid || (*r.fid == best->fid && r.step < best->step)) best = {r.step, *r.fid};
  }
  if (!best) throw ValidationError("no metrics row carries an FID");
  return *best;
}

SeedSummary summarize_seeds(const std::vector<double>& best_fids) {
  SeedSummary s;
  s.seeds = static_cast<std::int64_t>(best_fids.size());
  if (best_fids.empty()) return s;
  for (double f : best_fids) s.mean += f;
  s.mean /= static_cast<double>(best_fids.size());
  if (best_fids.size() > 1) {
    double sq = 0;
    for (double f : best_fids) sq += (f - s.mean) * (f - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(best_fids.size() - 1));
  }
  return s;
}

// --- runs -------------------------------------------------------------------------------

namespace {

json comparable(json j) {
  j.erase("name");
  j.erase("output_root");
  j["train"].erase("total_steps");
  j["train"].erase("threads");
  return j;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  // grids are enumerated without data; a run cannot be
  if (cfg.data_dir.empty()) throw ValidationError("data_dir is required to run an experiment");
  RunResult result{cfg.run_dir(), std::nullopt};
  const auto& dir = result.dir;

  const auto stored = dir / "config.json";
  if (fs::exists(stored)) {
    auto previous = ExperimentConfig::load(stored);
    if (comparable(previous.to_json()) != comparable(cfg.to_json()))
      throw ValidationError("run directory " + dir.string() + " holds a different experiment");
  }

  auto data = DatasetBundle::load(cfg.data_dir);
  {
    std::vector<std::string> v;
    if (data.spec.height != cfg.model.image_size || data.spec.width != cfg.model.image_size)
      v.push_back("dataset images are " + std::to_string(data.spec.height) + "x" + std::to_string(data.spec.width) +
                  " but model.image_size is " + std::to_string(cfg.model.image_size));
    if (data.train.empty()) v.push_back("dataset has no train split");
    if (cfg.eval.embedder != "none" && data.holdout.empty()) v.push_back("FID needs a holdout split");
    throw_if_any(v);
  }

  fs::create_directories(dir);
  cfg.save(stored);
  std::ofstream(dir / "VERSION") << "kgan " << KGAN_VERSION << "\n";
  std::ofstream(dir / "tag.txt") << cfg.model.tag() << "\n";

  std::shared_ptr<Embedder> embedder;
  if (cfg.eval.embedder == "builtin") {
    const auto path = dir / "embedder.ckpt";
    if (fs::exists(path)) {
      embedder = BuiltinEmbedder::load(path);
    } else {
      EmbedderTrainConfig ec;
      ec.steps = cfg.eval.embedder_train_steps;
      ec.seed = derive_seed(cfg.train.seed, 3);
      auto e = BuiltinEmbedder::train(data, ec);
      e->save(path);
      embedder = e;
    }
  } else if (cfg.eval.embedder != "none") {
    embedder = make_embedder(cfg.eval.embedder, data);
  }

  Trainer trainer(cfg.model, cfg.train, data);
  trainer.run(dir, embedder, opts.on_row);

  const auto rows = read_metrics(dir / "metrics.jsonl");
  if (std::any_of(rows.begin(), rows.end(), [](const MetricsRow& r) { return r.fid.has_value(); })) {
    result.best = select_best(rows);
    json b = {{"step", result.best->step},
              {"fid", result.best->fid},
              {"checkpoint", fs::relative(Trainer::checkpoint_path(dir, result.best->step), dir).string()}};
    std::ofstream(dir / "best.json") << b.dump(2) << "\n";
  }
  return result;
}

std::vector<ReportRow> collect_report(const fs::path& root) {
  if (!fs::is_directory(root)) throw ValidationError("no such run root: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "config.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());

  std::map<std::string, std::size_t> index;
  std::vector<ReportRow> rows;
  std::vector<std::vector<double>> fids;
  for (const auto& d : dirs) {
    auto cfg = ExperimentConfig::load(d / "config.json");
    auto key = comparable(cfg.to_json());
    key["train"].erase("seed");
    const auto k = key.dump();
    auto [it, inserted] = index.emplace(k, rows.size());
    if (inserted) {
      rows.push_back({cfg.name, cfg.model.tag(), {}, {}});
      fids.emplace_back();
    }
    rows[it->second].runs.push_back(cfg.name);
    std::ifstream best(d / "best.json");
    if (best) fids[it->second].push_back(json::parse(best).at("fid").get<double>());
  }
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].summary = summarize_seeds(fids[i]);
  return rows;
}

}  // namespace kgan
