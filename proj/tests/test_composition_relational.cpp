#include "doctest.h"
#include "oracles.hpp"

#include "kgan/composition.hpp"
#include "kgan/error.hpp"
#include "kgan/relational.hpp"

using namespace kgan;

namespace {

torch::Tensor scalar_image(double v) { return torch::full({1, 1, 1, 1}, v, torch::kFloat64); }

std::vector<ComponentImage> random_layers(int k, int h, int w, torch::Generator& gen) {
  std::vector<ComponentImage> out;
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  for (int i = 0; i < k; ++i)
    out.push_back({torch::rand({2, 3, h, w}, gen, opts), torch::rand({2, 1, h, w}, gen, opts)});
  return out;
}

}  // namespace

TEST_CASE("alpha compositing of a single pixel") {
  std::vector<ComponentImage> layers{{scalar_image(0.8), scalar_image(0.5)}, {scalar_image(0.4), scalar_image(0.5)}};
  auto r = alpha_composite(layers, {scalar_image(0.2), std::nullopt});
  CHECK(r.image.item<double>() == doctest::Approx(0.55).epsilon(1e-12));
  CHECK(r.layer_weights.sum().item<double>() == doctest::Approx(1.0));
}

TEST_CASE("alpha compositing degenerate layers") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
  auto x1 = torch::rand({1, 3, 4, 4}, gen, torch::kFloat64);
  auto bg = torch::rand({1, 3, 4, 4}, gen, torch::kFloat64);

  auto opaque = alpha_composite({{x1, torch::ones({1, 1, 4, 4}, torch::kFloat64)}}, {bg, std::nullopt});
  CHECK(torch::equal(opaque.image, x1));

  auto clear = alpha_composite({{x1, torch::zeros({1, 1, 4, 4}, torch::kFloat64)},
                                {x1 * 0.5, torch::zeros({1, 1, 4, 4}, torch::kFloat64)}},
                               {bg, std::nullopt});
  CHECK(torch::equal(clear.image, bg));
  CHECK(torch::equal(clear.layer_weights.select(1, 2), torch::ones({1, 4, 4}, torch::kFloat64)));
}

TEST_CASE("composite weights agree with a per-pixel oracle") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(11);
  auto layers = random_layers(3, 5, 5, gen);
  auto w = composite_weights(layers, {torch::zeros({2, 3, 5, 5}, torch::kFloat64), std::nullopt});
  auto wa = w.accessor<double, 4>();
  for (int b = 0; b < 2; ++b)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) {
        std::vector<double> alphas;
        for (const auto& l : layers) alphas.push_back(l.alpha->index({b, 0, y, x}).item<double>());
        auto ref = oracle::pixel_weights(alphas);
        for (int k = 0; k < 4; ++k) CHECK(wa[b][k][y][x] == doctest::Approx(ref[k]).epsilon(1e-12));
      }
}

TEST_CASE("alpha compositing is order sensitive and convex") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(5);
  auto layers = random_layers(2, 4, 4, gen);
  ComponentImage bg{torch::rand({2, 3, 4, 4}, gen, torch::kFloat64), std::nullopt};
  auto a = alpha_composite(layers, bg).image;
  auto b = alpha_composite({layers[1], layers[0]}, bg).image;
  CHECK_FALSE(torch::allclose(a, b));
  auto lo = torch::minimum(torch::minimum(layers[0].color, layers[1].color), bg.color);
  auto hi = torch::maximum(torch::maximum(layers[0].color, layers[1].color), bg.color);
  CHECK((a >= lo - 1e-12).all().item<bool>());
  CHECK((a <= hi + 1e-12).all().item<bool>());
}

TEST_CASE("sum composition clips") {
  auto c = torch::full({1, 3, 2, 2}, 0.6);
  auto r = compose_sum({{c, std::nullopt}, {c, std::nullopt}});
  CHECK(torch::equal(r.image, torch::ones_like(c)));
  CHECK(torch::equal(compose_sum({{c, std::nullopt}}).image, c));
  CHECK(compose_sum({{torch::zeros_like(c), std::nullopt}}).image.abs().sum().item<double>() == 0.0);
  // nothing above threshold: the background claims every pixel
  CHECK(compose_sum({{torch::zeros_like(c), std::nullopt}}).layer_weights.select(1, 1).min().item<double>() == 1.0);
}

TEST_CASE("composition rejects bad inputs") {
  auto c = torch::zeros({1, 3, 4, 4});
  CHECK_THROWS_AS(compose_sum({}), ValidationError);
  CHECK_THROWS_AS(compose_sum({{c, std::nullopt}, {torch::zeros({1, 3, 4, 5}), std::nullopt}}), ShapeError);
  CHECK_THROWS_AS(alpha_composite({{c, std::nullopt}}, {c, std::nullopt}), ValidationError);
  CHECK_THROWS_AS(alpha_composite({{c, torch::zeros({1, 1, 2, 2})}}, {c, std::nullopt}), ShapeError);
}

TEST_CASE("alpha compositing gradients match finite differences") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(21);
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  std::vector<torch::Tensor> inputs;
  for (int i = 0; i < 2; ++i) {
    inputs.push_back(torch::rand({1, 3, 4, 4}, gen, opts));
    inputs.push_back(torch::rand({1, 1, 4, 4}, gen, opts));
  }
  inputs.push_back(torch::rand({1, 3, 4, 4}, gen, opts));
  auto probe = torch::rand({1, 3, 4, 4}, gen, opts);

  auto objective = [&](const std::vector<torch::Tensor>& in) {
    auto r = alpha_composite({{in[0], in[1]}, {in[2], in[3]}}, {in[4], std::nullopt});
    return (r.image * probe).sum();
  };
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    auto leaf = inputs;
    leaf[which] = inputs[which].clone().requires_grad_(true);
    objective(leaf).backward();
    auto numeric = oracle::numeric_gradient(
        [&](const torch::Tensor& x) {
          auto in = inputs;
          in[which] = x;
          return objective(in).item<double>();
        },
        inputs[which]);
    CHECK(oracle::relative_error(leaf[which].grad(), numeric) < 1e-4);
  }
}

// --- attention -----------------------------------------------------------------------

TEST_CASE("two-token toy attention") {
  auto q = torch::tensor({1.0, 0.0}, torch::kFloat64).view({1, 2, 1});
  auto v = torch::tensor({2.0, -2.0}, torch::kFloat64).view({1, 2, 1});
  auto out = kgan::scaled_dot_product_attention(q, q, v);
  const double w = 1.0 / (1.0 + std::exp(-1.0));
  CHECK(out.values[0][0][0].item<double>() == doctest::Approx(w * 2 - (1 - w) * 2).epsilon(1e-12));
  CHECK(out.values[0][0][0].item<double>() == doctest::Approx(0.924).epsilon(1e-3));
}

TEST_CASE("attention weights: rows stochastic, singleton, uniform for equal tokens") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
  auto q = torch::randn({3, 5, 32}, gen, torch::kFloat64) * 4;
  auto k = torch::randn({3, 5, 32}, gen, torch::kFloat64) * 4;
  auto v = torch::randn({3, 5, 32}, gen, torch::kFloat64);
  auto out = kgan::scaled_dot_product_attention(q, k, v);
  CHECK((out.weights.sum(-1) - 1).abs().max().item<double>() < 1e-12);

  auto one = kgan::scaled_dot_product_attention(q.narrow(1, 0, 1), k.narrow(1, 0, 1), v.narrow(1, 0, 1));
  CHECK(torch::equal(one.values, v.narrow(1, 0, 1)));

  auto same = q.narrow(1, 0, 1).expand({3, 5, 32}).contiguous();
  auto uni = kgan::scaled_dot_product_attention(same, same, v);
  CHECK((uni.weights - 0.2).abs().max().item<double>() < 1e-12);
}

TEST_CASE("attention block matches the dense reference") {
  torch::manual_seed(4);
  for (int heads : {1, 2}) {
    AttentionBlock block(64, heads);
    block->to(torch::kFloat64);
    auto z = torch::rand({1, 3, 64}, torch::kFloat64) * 2 - 1;
    auto got = block->forward(z)[0];
    auto ref = oracle::from_mat(oracle::attention_block(*block, oracle::to_mat(z[0])));
    CHECK((got - ref).abs().max().item<double>() < 1e-6);
  }
}

TEST_CASE("attention block is permutation equivariant and normalized") {
  torch::manual_seed(8);
  AttentionBlock block(64, 2);
  auto z = torch::rand({2, 4, 64}) * 2 - 1;
  auto perm = torch::tensor({2, 0, 3, 1}, torch::kInt64);
  auto a = block->forward(z).index_select(1, perm);
  auto b = block->forward(z.index_select(1, perm));
  CHECK((a - b).abs().max().item<double>() < 1e-5);

  // with default LayerNorm affine parameters rows are standardized
  auto out = block->forward(z);
  CHECK(out.mean(-1).abs().max().item<double>() < 1e-5);
  CHECK((out.var(-1, false) - 1).abs().max().item<double>() < 1e-3);
}

TEST_CASE("zero update weights leave only the residual path") {
  torch::manual_seed(2);
  AttentionBlock block(64, 1);
  {
    torch::NoGradGuard g;
    auto* head = block->heads->ptr<AttentionHeadImpl>(0).get();
    head->update_out->weight.zero_();
    head->update_out->bias.zero_();
  }
  auto z = torch::rand({1, 3, 64}) * 2 - 1;
  auto expect = torch::layer_norm(z, {64}, {}, {}, kLayerNormEps);
  CHECK((block->forward(z) - expect).abs().max().item<double>() < 1e-6);
}

TEST_CASE("attention block gradients match finite differences") {
  torch::manual_seed(12);
  AttentionBlock block(8, 2);
  block->to(torch::kFloat64);
  auto z = torch::rand({1, 3, 8}, torch::kFloat64) * 2 - 1;
  auto probe = torch::randn({1, 3, 8}, torch::kFloat64);

  auto zl = z.clone().requires_grad_(true);
  (block->forward(zl) * probe).sum().backward();
  auto numeric = oracle::numeric_gradient(
      [&](const torch::Tensor& x) { return (block->forward(x) * probe).sum().item<double>(); }, z);
  CHECK(oracle::relative_error(zl.grad(), numeric) < 1e-4);

  for (auto& p : block->named_parameters()) {
    auto& param = p.value();
    auto analytic = param.grad().clone();
    auto saved = param.detach().clone();
    auto numeric_p = oracle::numeric_gradient(
        [&](const torch::Tensor& x) {
          torch::NoGradGuard g;
          param.copy_(x);
          return (block->forward(z) * probe).sum().item<double>();
        },
        saved);
    {
      torch::NoGradGuard g;
      param.copy_(saved);
    }
    INFO(p.key());
    CHECK(oracle::relative_error(analytic, numeric_p) < 1e-4);
  }
}

TEST_CASE("relational stage wiring") {
  torch::manual_seed(3);
  auto z = torch::rand({2, 3, 64}) * 2 - 1;
  auto bg = torch::rand({2, 64}) * 2 - 1;

  RelationalStage identity(RelationalConfig{}, 64);
  auto [o0, b0] = identity->forward(z, bg);
  CHECK(torch::equal(o0, z));
  CHECK(torch::equal(*b0, bg));

  RelationalStage shared(RelationalConfig{2, 1, true, false}, 64);
  CHECK(shared->block(0).get() == shared->block(1).get());
  auto [o1, b1] = shared->forward(z, bg);
  auto twice = shared->block(0)->forward(shared->block(0)->forward(z));
  CHECK(torch::equal(o1, twice));
  CHECK(torch::equal(*b1, bg));

  RelationalStage separate(RelationalConfig{2, 2, false, false}, 64);
  CHECK(separate->block(0).get() != separate->block(1).get());

  RelationalStage joint(RelationalConfig{1, 1, false, true}, 64);
  auto [o2, b2] = joint->forward(z, bg);
  auto full = joint->block(0)->forward(torch::cat({z, bg.unsqueeze(1)}, 1));
  CHECK(torch::equal(o2, full.narrow(1, 0, 3)));
  CHECK(torch::equal(*b2, full.select(1, 3)));
  CHECK_THROWS_AS(joint->forward(z), ValidationError);

  CHECK_THROWS_AS(RelationalStage(RelationalConfig{3, 1, false, false}, 64), ValidationError);
  CHECK_THROWS_AS(shared->forward(torch::full({1, 3, 64}, NAN)), ValidationError);
}
