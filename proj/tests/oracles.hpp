#pragma once

// Independent reference computations used by the unit and acceptance tests.
// Everything here is written with explicit loops over doubles and shares no
// code with the library beyond reading module parameters.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include <torch/torch.h>

#include "kgan/relational.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous();
  Mat m(c.size(0), std::vector<double>(c.size(1)));
  auto a = c.accessor<double, 2>();
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) m[i][j] = a[i][j];
  return m;
}

inline std::vector<double> to_vec(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous().flatten();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

inline torch::Tensor from_mat(const Mat& m) {
  auto t = torch::empty({static_cast<long>(m.size()), static_cast<long>(m[0].size())}, torch::kFloat64);
  auto a = t.accessor<double, 2>();
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) a[i][j] = m[i][j];
  return t;
}

// y = W x + b for one row
inline std::vector<double> affine(const torch::nn::Linear& l, const std::vector<double>& x) {
  auto W = to_mat(l->weight);
  auto b = to_vec(l->bias);
  std::vector<double> y(W.size());
  for (std::size_t o = 0; o < W.size(); ++o) {
    double s = b[o];
    for (std::size_t i = 0; i < x.size(); ++i) s += W[o][i] * x[i];
    y[o] = s;
  }
  return y;
}

inline std::vector<double> relu(std::vector<double> x) {
  for (auto& v : x) v = std::max(v, 0.0);
  return x;
}

inline std::vector<double> layer_norm(const torch::nn::LayerNorm& ln, const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  double mean = 0, var = 0;
  for (double v : x) mean += v;
  mean /= n;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  auto g = to_vec(ln->weight), b = to_vec(ln->bias);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + kgan::kLayerNormEps) * g[i] + b[i];
  return y;
}

/// softmax(q k^T / sqrt(d)) v, row by row.
inline Mat attention(const Mat& q, const Mat& k, const Mat& v, Mat* weights = nullptr) {
  const std::size_t n = q.size(), d = v[0].size();
  Mat out(n, std::vector<double>(d, 0.0));
  if (weights) weights->assign(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logit(n);
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < q[i].size(); ++c) s += q[i][c] * k[j][c];
      logit[j] = s / std::sqrt(static_cast<double>(d));
    }
    double denom = 0;
    for (double l : logit) denom += std::exp(l);
    for (std::size_t j = 0; j < n; ++j) {
      const double w = std::exp(logit[j]) / denom;
      if (weights) (*weights)[i][j] = w;
      for (std::size_t c = 0; c < d; ++c) out[i][c] += w * v[j][c];
    }
  }
  return out;
}

inline Mat head_update(kgan::AttentionHeadImpl& h, const Mat& z) {
  Mat q, k, v;
  for (const auto& row : z) {
    q.push_back(layer_norm(h.query_norm, relu(affine(h.query, row))));
    k.push_back(layer_norm(h.key_norm, relu(affine(h.key, row))));
    v.push_back(layer_norm(h.value_norm, relu(affine(h.value, row))));
  }
  auto a = attention(q, k, v);
  Mat u;
  for (const auto& row : a) u.push_back(relu(affine(h.update_out, relu(affine(h.update_hidden, row)))));
  return u;
}

/// One attention block on latents [N,D] (no batch dimension).
inline Mat attention_block(kgan::AttentionBlockImpl& block, const Mat& z) {
  std::vector<Mat> per_head;
  for (std::size_t i = 0; i < block.heads->size(); ++i)
    per_head.push_back(head_update(*block.heads->ptr<kgan::AttentionHeadImpl>(i), z));
  Mat out;
  for (std::size_t n = 0; n < z.size(); ++n) {
    std::vector<double> u;
    if (per_head.size() == 1) {
      u = per_head[0][n];
    } else {
      std::vector<double> cat;
      for (const auto& h : per_head) cat.insert(cat.end(), h[n].begin(), h[n].end());
      u = layer_norm(block.combiner_norm, relu(affine(block.combiner, cat)));
    }
    for (std::size_t c = 0; c < u.size(); ++c) u[c] += z[n][c];
    out.push_back(layer_norm(block.output_norm, u));
  }
  return out;
}

/// Central differences of scalar f at x (float64); returns the numeric gradient.
inline torch::Tensor numeric_gradient(const std::function<double(const torch::Tensor&)>& f, const torch::Tensor& x,
                                      double h = 1e-6) {
  auto base = x.detach().to(torch::kFloat64).clone().contiguous();
  auto grad = torch::zeros_like(base);
  auto* p = base.data_ptr<double>();
  auto* g = grad.data_ptr<double>();
  for (std::int64_t i = 0; i < base.numel(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = f(base);
    p[i] = keep - h;
    const double down = f(base);
    p[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return grad;
}

/// ||a - n|| / max(||a||, ||n||, 1e-4). The floor keeps structurally zero
/// gradients (e.g. a bias every softmax logit shares) from comparing
/// finite-difference roundoff against itself.
inline double relative_error(const torch::Tensor& analytic, const torch::Tensor& numeric) {
  const double scale = std::max({analytic.norm().item<double>(), numeric.norm().item<double>(), 1e-4});
  return (analytic.to(torch::kFloat64) - numeric).norm().item<double>() / scale;
}

struct Matched {
  double loss = 0;
  std::vector<int> perm;
};

/// Per-sample minimum over explicit permutations, pixel loop with a hand
/// written log-softmax. logits [C,H,W], labels [H,W], ignore [H,W].
inline Matched brute_force_match(const torch::Tensor& logits, const torch::Tensor& labels,
                                 const torch::Tensor& ignore) {
  auto lg = logits.detach().to(torch::kFloat64).contiguous();
  auto lb = labels.to(torch::kInt64).contiguous();
  auto ig = ignore.to(torch::kBool).contiguous();
  const auto C = lg.size(0), H = lg.size(1), W = lg.size(2);
  auto L = lg.accessor<double, 3>();
  auto T = lb.accessor<std::int64_t, 2>();
  auto I = ig.accessor<bool, 2>();
  std::vector<int> perm(C - 1);
  std::iota(perm.begin(), perm.end(), 0);
  Matched best{INFINITY, {}};
  do {
    double total = 0;
    std::int64_t count = 0;
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        if (I[y][x]) continue;
        double mx = -INFINITY;
        for (std::int64_t c = 0; c < C; ++c) mx = std::max(mx, L[c][y][x]);
        double z = 0;
        for (std::int64_t c = 0; c < C; ++c) z += std::exp(L[c][y][x] - mx);
        const auto t = T[y][x];
        const std::int64_t channel = t == 0 ? 0 : 1 + perm[t - 1];
        total += -(L[channel][y][x] - mx - std::log(z));
        ++count;
      }
    const double loss = total / static_cast<double>(std::max<std::int64_t>(count, 1));
    if (loss < best.loss) best = {loss, perm};
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// Closed form for diagonal covariances.
inline double diagonal_frechet(const std::vector<double>& mu_a, const std::vector<double>& var_a,
                               const std::vector<double>& mu_b, const std::vector<double>& var_b) {
  double d = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    d += (mu_a[i] - mu_b[i]) * (mu_a[i] - mu_b[i]);
    d += var_a[i] + var_b[i] - 2 * std::sqrt(var_a[i] * var_b[i]);
  }
  return d;
}

/// Largest singular value from LAPACK.
inline double top_singular_value(const torch::Tensor& m) {
  return torch::linalg_svdvals(m.detach().to(torch::kFloat64)).max().item<double>();
}

/// ARI from explicit pair counting, O(n^2).
inline double pair_counting_ari(const std::vector<long>& a, const std::vector<long>& b) {
  const std::size_t n = a.size();
  double both = 0, only_a = 0, only_b = 0, pairs = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      both += sa && sb;
      only_a += sa;
      only_b += sb;
      pairs += 1;
    }
  const double expected = only_a * only_b / pairs;
  const double max_index = 0.5 * (only_a + only_b);
  if (max_index == expected) return 1.0;
  return (both - expected) / (max_index - expected);
}

/// Per-pixel front-to-back weights for scalar alphas [K] -> [K+1].
inline std::vector<double> pixel_weights(const std::vector<double>& alphas) {
  std::vector<double> w;
  double remaining = 1.0;
  for (double a : alphas) {
    w.push_back(a * remaining);
    remaining *= 1.0 - a;
  }
  w.push_back(remaining);
  return w;
}

}  // namespace oracle
