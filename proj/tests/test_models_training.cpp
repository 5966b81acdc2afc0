#include <fstream>
#include <iterator>

#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

#include "kgan/checkpoint.hpp"
#include "kgan/error.hpp"
#include "kgan/models.hpp"
#include "kgan/training.hpp"

using namespace kgan;
using fixtures::tiny_model;

TEST_CASE("latent prior") {
  auto cfg = tiny_model();
  auto g1 = at::make_generator<at::CPUGeneratorImpl>(5);
  auto g2 = at::make_generator<at::CPUGeneratorImpl>(5);
  auto a = sample_latents(cfg, 2, g1);
  auto b = sample_latents(cfg, 2, g2);
  CHECK(a.objects.sizes() == torch::IntArrayRef{2, 3, 64});
  CHECK_FALSE(a.background.has_value());
  CHECK(torch::equal(a.objects, b.objects));
  CHECK(a.objects.abs().max().item<double>() <= 1.0);

  auto one = tiny_model(1);
  auto many = sample_latents(one, 100'000, g1);
  CHECK(many.objects.mean(0).abs().max().item<double>() < 0.01);

  cfg.use_background = true;
  cfg.compose_mode = ComposeMode::learned_alpha;
  CHECK(sample_latents(cfg, 2, g1).background->sizes() == torch::IntArrayRef{2, 64});
}

TEST_CASE("model config validation lists every problem") {
  ModelConfig c;
  c.K = 0;
  c.image_size = 48;
  c.use_background = true;
  auto v = c.violations();
  CHECK(v.size() == 3);
  CHECK_THROWS_AS(c.validate(), ValidationError);
  CHECK(ModelConfig{}.tag() == "3-GAN ind.");
  CHECK(tiny_model(1).tag() == "GAN");
}

TEST_CASE("independent components do not interact") {
  torch::manual_seed(1);
  StructuredGenerator gen(tiny_model());
  gen->eval();
  auto g = at::make_generator<at::CPUGeneratorImpl>(2);
  auto z = sample_latents(gen->config(), 2, g);
  auto moved = z.clone();
  moved.objects.select(1, 1).add_(0.3);
  torch::NoGradGuard ng;
  auto a = gen->forward(z), b = gen->forward(moved);
  CHECK(torch::equal(a.components[0].color, b.components[0].color));
  CHECK(torch::equal(a.components[2].color, b.components[2].color));
  CHECK_FALSE(torch::equal(a.components[1].color, b.components[1].color));

  auto same = z.clone();
  same.objects.select(1, 2).copy_(same.objects.select(1, 0));
  auto c = gen->forward(same);
  CHECK(torch::equal(c.components[0].color, c.components[2].color));
}

TEST_CASE("five layers with background and learned alpha") {
  auto cfg = tiny_model(5);
  cfg.compose_mode = ComposeMode::learned_alpha;
  cfg.use_background = true;
  StructuredGenerator gen(cfg);
  auto g = at::make_generator<at::CPUGeneratorImpl>(0);
  auto out = gen->forward(sample_latents(cfg, 2, g));
  CHECK(out.composite.image.sizes() == torch::IntArrayRef{2, 3, 64, 64});
  CHECK(out.composite.image.min().item<double>() >= 0.0);
  CHECK(out.composite.image.max().item<double>() <= 1.0);
  CHECK(out.composite.layer_weights.size(1) == 6);
  CHECK((out.composite.layer_weights.sum(1) - 1).abs().max().item<double>() < 1e-6);

  // gradient reaches every object latent
  auto z = sample_latents(cfg, 1, g);
  z.objects.requires_grad_(true);
  gen->forward(z).composite.image.sum().backward();
  CHECK((z.objects.grad().abs().sum(-1) > 0).all().item<bool>());
}

TEST_CASE("an untrained summing generator is not stuck on the clip") {
  torch::manual_seed(0);
  ModelConfig cfg;  // full width
  StructuredGenerator gen(cfg);
  auto g = at::make_generator<at::CPUGeneratorImpl>(0);
  auto out = gen->forward(sample_latents(cfg, 4, g));
  // most pixels below the clip, so most pixels pass gradient
  CHECK((out.composite.image < 1).to(torch::kFloat).mean().item<double>() > 0.5);
  out.composite.image.sum().backward();
  CHECK(gen->object_generator->parameters().front().grad().abs().sum().item<double>() > 0);
}

TEST_CASE("object generator size does not depend on K") {
  CHECK(parameter_count(*StructuredGenerator(tiny_model(3))) == parameter_count(*StructuredGenerator(tiny_model(5))));
}

TEST_CASE("generator rejects mismatched latents") {
  StructuredGenerator gen(tiny_model());
  CHECK_THROWS_AS(gen->forward({torch::zeros({1, 2, 64}), std::nullopt}), ShapeError);
  CHECK_THROWS_AS(gen->forward({torch::zeros({1, 3, 64}), torch::zeros({1, 64})}), ValidationError);
}

TEST_CASE("discriminator shapes") {
  for (bool sn : {false, true}) {
    Discriminator d(tiny_model(), sn);
    d->eval();
    auto x = torch::rand({4, 3, 64, 64});
    x[3].copy_(x[0]);
    auto s = d->forward(x);
    CHECK(s.sizes() == torch::IntArrayRef{4});
    CHECK(s[0].item<float>() == s[3].item<float>());
    CHECK_THROWS_AS(d->forward(torch::rand({1, 3, 32, 32})), ShapeError);
  }
}

// --- spectral normalization ------------------------------------------------------

TEST_CASE("spectral normalization of simple matrices") {
  SpectralNormState st;
  auto diag = torch::diag(torch::tensor({3.0, 1.0}, torch::kFloat64));
  auto r = spectral_normalize(diag, st, 30);
  CHECK(r.sigma.item<double>() == doctest::Approx(3.0).epsilon(1e-6));
  CHECK(oracle::top_singular_value(r.weight) == doctest::Approx(1.0).epsilon(1e-6));

  auto q = std::get<0>(torch::linalg_qr(torch::randn({6, 6}, torch::kFloat64)));
  SpectralNormState sq;
  CHECK((spectral_normalize(q, sq, 20).weight - q).abs().max().item<double>() < 1e-3);

  SpectralNormState sz;
  auto zero = spectral_normalize(torch::zeros({4, 3}), sz, 5);
  CHECK(zero.weight.abs().sum().item<double>() == 0.0);
  CHECK(zero.sigma.item<double>() == doctest::Approx(kSigmaFloor));
  CHECK(sz.u.norm().item<double>() == doctest::Approx(1.0));
}

TEST_CASE("power iteration converges to the SVD") {
  torch::manual_seed(7);
  auto w = torch::randn({64, 32}, torch::kFloat64);
  SpectralNormState st;
  auto r = spectral_normalize(w, st, 50);
  CHECK(std::abs(r.sigma.item<double>() / oracle::top_singular_value(w) - 1) < 0.01);
  CHECK(st.iterations == 50);
  CHECK(st.u.norm().item<double>() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("spectrally normalized discriminator layers") {
  torch::manual_seed(9);
  Discriminator d(tiny_model(), true);
  d->power_iterate(50);
  for (const auto& m : d->effective_matrices())
    CHECK(std::abs(oracle::top_singular_value(m) - 1) < 1e-2);

  // u only moves in training mode
  auto before = d->named_buffers()["conv0.u"].clone();
  d->eval();
  d->forward(torch::rand({2, 3, 64, 64}));
  CHECK(torch::equal(before, d->named_buffers()["conv0.u"]));
  d->train();
  d->forward(torch::rand({2, 3, 64, 64}));
  CHECK_FALSE(torch::equal(before, d->named_buffers()["conv0.u"]));
}

// --- losses ----------------------------------------------------------------------

TEST_CASE("adversarial loss values") {
  auto w = adversarial_losses(LossKind::wgan, torch::tensor({1.0}), torch::tensor({0.2}));
  CHECK(w.discriminator.item<double>() == doctest::Approx(-0.8));
  CHECK(w.generator.item<double>() == doctest::Approx(-0.2));

  auto z = torch::zeros({4});
  auto ns = adversarial_losses(LossKind::ns_gan, z, z);
  CHECK(ns.discriminator.item<double>() == doctest::Approx(2 * std::log(2.0)));
  CHECK(ns.generator.item<double>() == doctest::Approx(std::log(2.0)));

  auto s = torch::randn({8});
  CHECK(adversarial_losses(LossKind::wgan, s, s).discriminator.item<double>() == 0.0);
  auto shifted = adversarial_losses(LossKind::wgan, s + 5, s.flip(0) + 5).discriminator.item<double>();
  CHECK(shifted == doctest::Approx(adversarial_losses(LossKind::wgan, s, s.flip(0)).discriminator.item<double>()));
  CHECK(adversarial_losses(LossKind::ns_gan, s + 1, s).discriminator.item<double>() <
        adversarial_losses(LossKind::ns_gan, s, s).discriminator.item<double>());

  CHECK_THROWS_AS(adversarial_losses(LossKind::wgan, torch::zeros({0}), torch::zeros({0})), ValidationError);
}

TEST_CASE("gradient penalty closed forms") {
  auto real = torch::rand({5, 1}, torch::kFloat64);
  auto fake = torch::rand({5, 1}, torch::kFloat64);
  auto g = at::make_generator<at::CPUGeneratorImpl>(0);
  Critic sum = [](const torch::Tensor& x) { return x.flatten(1).sum(1); };
  Critic twice = [](const torch::Tensor& x) { return 2 * x.flatten(1).sum(1); };
  Critic flat = [](const torch::Tensor& x) { return torch::zeros({x.size(0)}, x.options()); };
  CHECK(gradient_penalty(sum, real, fake, 10, g).item<double>() == doctest::Approx(0.0));
  CHECK(gradient_penalty(twice, real, fake, 10, g).item<double>() == doctest::Approx(10.0));
  CHECK(gradient_penalty(flat, real, fake, 1, g).item<double>() == doctest::Approx(1.0));

  // swapping real/fake with eps -> 1 - eps leaves the penalty unchanged
  Critic quad = [](const torch::Tensor& x) { return (x * x).flatten(1).sum(1) * 3; };
  auto r4 = torch::rand({4, 3, 2, 2}, torch::kFloat64), f4 = torch::rand({4, 3, 2, 2}, torch::kFloat64);
  auto eps = torch::rand({4}, torch::kFloat64);
  CHECK(gradient_penalty(quad, r4, f4, 10, eps).item<double>() ==
        doctest::Approx(gradient_penalty(quad, f4, r4, 10, 1 - eps).item<double>()).epsilon(1e-12));
}

namespace {

// two-layer critic in float64
struct TinyCritic {
  torch::nn::Linear l1{nullptr}, l2{nullptr};
  TinyCritic() {
    torch::manual_seed(5);
    l1 = torch::nn::Linear(12, 6);
    l2 = torch::nn::Linear(6, 1);
    l1->to(torch::kFloat64);
    l2->to(torch::kFloat64);
  }
  torch::Tensor operator()(const torch::Tensor& x) { return l2(torch::tanh(l1(x.flatten(1)))).squeeze(1); }
  std::vector<torch::Tensor> params() {
    auto p = l1->parameters();
    for (auto& q : l2->parameters()) p.push_back(q);
    return p;
  }
};

void check_param_gradients(TinyCritic& critic, const std::function<torch::Tensor()>& loss) {
  for (auto& p : critic.params()) p.mutable_grad() = torch::Tensor();
  loss().backward();
  for (auto& p : critic.params()) {
    auto analytic = p.grad().defined() ? p.grad().clone() : torch::zeros_like(p);
    auto saved = p.detach().clone();
    auto numeric = oracle::numeric_gradient(
        [&](const torch::Tensor& x) {
          {
            torch::NoGradGuard g;
            p.copy_(x);
          }
          return loss().item<double>();
        },
        saved);
    {
      torch::NoGradGuard g;
      p.copy_(saved);
    }
    CHECK(oracle::relative_error(analytic, numeric) < 1e-4);
  }
}

}  // namespace

TEST_CASE("loss and penalty gradients match finite differences") {
  TinyCritic critic;
  auto real = torch::rand({4, 3, 2, 2}, torch::kFloat64);
  auto fake = torch::rand({4, 3, 2, 2}, torch::kFloat64);
  auto eps = torch::rand({4}, torch::kFloat64);
  for (auto kind : {LossKind::ns_gan, LossKind::wgan}) {
    check_param_gradients(critic, [&] { return adversarial_losses(kind, critic(real), critic(fake)).discriminator; });
    check_param_gradients(critic, [&] { return adversarial_losses(kind, critic(real), critic(fake)).generator; });
  }
  check_param_gradients(critic, [&] {
    return gradient_penalty([&](const torch::Tensor& x) { return critic(x); }, real, fake, 10, eps);
  });
}

// --- checkpoints and configs ---------------------------------------------------------

TEST_CASE("config json roundtrip and strictness") {
  auto m = tiny_model(4);
  m.relational = {2, 2, true, false};
  CHECK(model_config_from_json(model_config_json(m)) == m);
  auto t = fixtures::tiny_train(3);
  t.loss = LossKind::wgan;
  t.penalty = Penalty::wgan_gp;
  CHECK(train_config_from_json(train_config_json(t)) == t);

  auto j = model_config_json(m);
  j["kay"] = 3;
  CHECK_THROWS_AS(model_config_from_json(j), ValidationError);
  auto jt = train_config_json(t);
  jt["adam"]["lr"] = 1;
  CHECK_THROWS_AS(train_config_from_json(jt), ValidationError);
  jt = train_config_json(t);
  jt["loss"] = "hinge";
  CHECK_THROWS_AS(train_config_from_json(jt), ValidationError);

  t.penalty_lambda = 5;
  CHECK_THROWS_AS(t.validate(), ValidationError);
}

TEST_CASE("generator checkpoint roundtrip") {
  fixtures::TempDir dir("gen-ckpt");
  torch::manual_seed(3);
  StructuredGenerator gen(tiny_model());
  gen->eval();
  auto g = at::make_generator<at::CPUGeneratorImpl>(1);
  auto z = sample_latents(gen->config(), 2, g);
  const auto path = dir.path / "g.ckpt";
  save_generator(path, gen, 17);

  auto back = load_generator(path);
  torch::NoGradGuard ng;
  CHECK(torch::equal(gen->forward(z).composite.image, back->forward(z).composite.image));
  for (const auto& item : gen->named_parameters())
    CHECK(torch::equal(item.value(), back->named_parameters()[item.key()]));
  CHECK(read_checkpoint(path).step == 17);

  CHECK_THROWS_AS(load_generator(path, tiny_model(4)), VersionError);

  // edit the stored config without updating its hash
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  const auto at = bytes.find("\"K\":3");
  REQUIRE(at != std::string::npos);
  bytes[at + 4] = '4';
  std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
  CHECK_THROWS_AS(read_checkpoint(path), VersionError);
}

// --- trainer -----------------------------------------------------------------------

TEST_CASE("trainer runs are reproducible and resumable") {
  auto data = fixtures::small_bundle();
  auto train = fixtures::tiny_train(4);
  fixtures::TempDir a("run-a"), b("run-b"), c("run-c");

  Trainer full(tiny_model(), train, data);
  full.run(a.path, nullptr);
  auto rows_a = read_metrics(a.path / "metrics.jsonl");
  REQUIRE(rows_a.size() == 4);
  CHECK(rows_a.back().step == 4);

  Trainer again(tiny_model(), train, data);
  again.run(b.path, nullptr);
  auto rows_b = read_metrics(b.path / "metrics.jsonl");
  for (std::size_t i = 0; i < rows_a.size(); ++i) {
    CHECK(rows_a[i].discriminator_loss == rows_b[i].discriminator_loss);
    CHECK(rows_a[i].generator_loss == rows_b[i].generator_loss);
  }

  // interrupted after two steps, then resumed in a fresh trainer
  auto half = train;
  half.total_steps = 2;
  Trainer first(tiny_model(), half, data);
  first.run(c.path, nullptr);
  {
    // a stale row past the checkpoint must be dropped on resume
    std::ofstream(c.path / "metrics.jsonl", std::ios::app) << R"({"step":3,"discriminator_loss":9})" << "\n";
  }
  Trainer resumed(tiny_model(), train, data);
  resumed.run(c.path, nullptr);
  CHECK(resumed.step() == 4);
  auto rows_c = read_metrics(c.path / "metrics.jsonl");
  REQUIRE(rows_c.size() == rows_a.size());
  for (std::size_t i = 0; i < rows_a.size(); ++i) {
    CHECK(rows_c[i].step == rows_a[i].step);
    CHECK(rows_c[i].discriminator_loss == rows_a[i].discriminator_loss);
    CHECK(rows_c[i].generator_loss == rows_a[i].generator_loss);
  }
  for (const auto& item : full.generator()->named_parameters())
    CHECK(torch::equal(item.value(), resumed.generator()->named_parameters()[item.key()]));
  for (const auto& item : full.discriminator()->named_buffers())
    CHECK(torch::equal(item.value(), resumed.discriminator()->named_buffers()[item.key()]));
}

TEST_CASE("zero-step run leaves only the initial checkpoint") {
  auto data = fixtures::small_bundle();
  auto train = fixtures::tiny_train();
  train.total_steps = 0;
  fixtures::TempDir dir("zero");
  Trainer t(tiny_model(), train, data);
  t.run(dir.path, nullptr);
  CHECK(std::filesystem::exists(Trainer::checkpoint_path(dir.path, 0)));
  CHECK(read_metrics(dir.path / "metrics.jsonl").empty());
  CHECK(*Trainer::latest_checkpoint(dir.path) == Trainer::checkpoint_path(dir.path, 0));
}

TEST_CASE("trainer refuses mismatched data and checkpoints") {
  auto data = fixtures::small_bundle();
  auto m = tiny_model();
  m.image_size = 128;
  CHECK_THROWS_AS(Trainer(m, fixtures::tiny_train(), data), ValidationError);

  fixtures::TempDir dir("mismatch");
  Trainer t(tiny_model(), fixtures::tiny_train(), data);
  t.save(dir.path / "x.ckpt");
  Trainer other(tiny_model(4), fixtures::tiny_train(), data);
  CHECK_THROWS_AS(other.load(dir.path / "x.ckpt"), VersionError);
}

TEST_CASE("discriminator steps leave the generator alone") {
  auto data = fixtures::small_bundle();
  auto train = fixtures::tiny_train();
  train.penalty = Penalty::wgan_gp;
  train.penalty_lambda = 10;
  Trainer t(tiny_model(), train, data);
  auto before = t.generator()->parameters()[0].clone();
  auto losses = t.train_cycle();
  CHECK(std::isfinite(losses.penalty));
  CHECK(losses.penalty > 0);
  CHECK_FALSE(torch::equal(before, t.generator()->parameters()[0]));
  // generator gradients from the last update are its own; discriminator grads are cleared
  for (const auto& p : t.discriminator()->parameters())
    CHECK((!p.grad().defined() || p.grad().abs().sum().item<double>() == 0.0));
}
