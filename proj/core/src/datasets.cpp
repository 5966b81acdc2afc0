#include "kgan/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <sstream>
#include <thread>

#include "kgan/error.hpp"

namespace kgan {

namespace fs = std::filesystem;

namespace {

constexpr int kDigitSize = 28;
constexpr int kDigitCrop = 20;  // MNIST digits live in the central 20x20 box
constexpr int kManifestVersion = 1;

std::string scene_name(std::int64_t id) {
  std::ostringstream os;
  os << std::setw(7) << std::setfill('0') << id;
  return os.str();
}

}  // namespace

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::independent_mm: return "independent_mm";
    case Variant::triplet_mm: return "triplet_mm";
    case Variant::rgb_occluded_mm: return "rgb_occluded_mm";
    case Variant::cifar10_mm: return "cifar10_mm";
    case Variant::clevr: return "clevr";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  for (auto v : {Variant::independent_mm, Variant::triplet_mm, Variant::rgb_occluded_mm,
                 Variant::cifar10_mm, Variant::clevr})
    if (to_string(v) == s) return v;
  throw ValidationError("unknown dataset variant '" + std::string(s) + "'");
}

bool is_multi_mnist(Variant v) {
  return v == Variant::independent_mm || v == Variant::triplet_mm ||
         v == Variant::rgb_occluded_mm;
}

std::string_view to_string(ColorTag c) {
  switch (c) {
    case ColorTag::none: return "none";
    case ColorTag::red: return "red";
    case ColorTag::green: return "green";
    case ColorTag::blue: return "blue";
  }
  return "?";
}

ColorTag parse_color_tag(std::string_view s) {
  for (auto c : {ColorTag::none, ColorTag::red, ColorTag::green, ColorTag::blue})
    if (to_string(c) == s) return c;
  throw ValidationError("unknown color tag '" + std::string(s) + "'");
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::holdout: return "holdout";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  for (auto v : {Split::train, Split::holdout, Split::test})
    if (to_string(v) == s) return v;
  throw ValidationError("unknown split '" + std::string(s) + "'");
}

SceneSpec SceneSpec::defaults(Variant v, std::uint64_t seed) {
  SceneSpec s;
  s.variant = v;
  s.seed = seed;
  if (v == Variant::clevr) {
    s.height = s.width = 128;
    s.objects_per_scene = 0;
  }
  return s;
}

void SceneSpec::validate() const {
  if (variant == Variant::clevr) {
    if (height != 128 || width != 128) throw ValidationError("clevr canvas must be 128x128");
    return;
  }
  if (height != 64 || width != 64) throw ValidationError("Multi-MNIST canvas must be 64x64");
  if (objects_per_scene != 3) throw ValidationError("Multi-MNIST scenes hold exactly 3 digits");
  if (!(min_scale > 0) || min_scale > max_scale)
    throw ValidationError("digit scale range must satisfy 0 < min <= max");
  if (static_cast<int>(std::lround(kDigitCrop * max_scale)) > std::min(height, width))
    throw ValidationError("digit scale exceeds canvas");
}

const std::vector<LabeledScene>& DatasetBundle::split(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::holdout: return holdout;
    case Split::test: return test;
  }
  return train;
}

std::vector<LabeledScene>& DatasetBundle::split(Split s) {
  return const_cast<std::vector<LabeledScene>&>(std::as_const(*this).split(s));
}

// --- corpora -------------------------------------------------------------------

namespace {

std::uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw SourceError("truncated idx header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         b[3];
}

std::string corpus_fingerprint(const std::vector<ImageU8>& images, const std::vector<int>& labels) {
  Fnv1a h;
  for (const auto& im : images) h.update(im.data.data(), im.data.size());
  for (int l : labels) h.update(static_cast<std::uint64_t>(l));
  return h.hex();
}

}  // namespace

MnistCorpus::MnistCorpus(const fs::path& dir)
    : MnistCorpus(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte") {}

MnistCorpus::MnistCorpus(const fs::path& images_file, const fs::path& labels_file) {
  std::ifstream img(images_file, std::ios::binary);
  std::ifstream lab(labels_file, std::ios::binary);
  if (!img) throw SourceError("digit corpus missing: " + images_file.string());
  if (!lab) throw SourceError("digit corpus missing: " + labels_file.string());
  if (read_be32(img) != 0x00000803) throw SourceError("bad idx3 magic in " + images_file.string());
  const auto n = read_be32(img);
  const auto rows = read_be32(img);
  const auto cols = read_be32(img);
  if (rows != kDigitSize || cols != kDigitSize) throw SourceError("expected 28x28 digits");
  if (read_be32(lab) != 0x00000801) throw SourceError("bad idx1 magic in " + labels_file.string());
  if (read_be32(lab) != n) throw SourceError("image/label count mismatch");

  digits_.reserve(n);
  labels_.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    ImageU8 d(kDigitSize, kDigitSize, 1);
    if (!img.read(reinterpret_cast<char*>(d.data.data()), d.data.size()))
      throw SourceError("truncated idx3 data");
    char l;
    if (!lab.get(l)) throw SourceError("truncated idx1 data");
    digits_.push_back(std::move(d));
    labels_.push_back(static_cast<unsigned char>(l));
  }
  fingerprint_ = corpus_fingerprint(digits_, labels_);
}

namespace {

struct Point {
  double x, y;
};
using Stroke = std::vector<Point>;

std::vector<Stroke> ellipse(double cx, double cy, double rx, double ry, int segments = 16) {
  Stroke s;
  for (int i = 0; i <= segments; ++i) {
    const double t = 2 * std::numbers::pi * i / segments;
    s.push_back({cx + rx * std::sin(t), cy - ry * std::cos(t)});
  }
  return {s};
}

// Glyph skeletons in the unit box, y pointing down.
std::vector<Stroke> glyph(int digit) {
  switch (digit) {
    case 0: return ellipse(0.5, 0.5, 0.32, 0.48);
    case 1: return {{{0.3, 0.2}, {0.55, 0.0}, {0.55, 1.0}}};
    case 2: return {{{0.15, 0.25}, {0.35, 0.03}, {0.65, 0.0}, {0.85, 0.22}, {0.75, 0.48},
                     {0.15, 1.0}, {0.9, 1.0}}};
    case 3: return {{{0.15, 0.08}, {0.8, 0.08}, {0.45, 0.45}, {0.8, 0.62}, {0.82, 0.85},
                     {0.5, 1.0}, {0.15, 0.9}}};
    case 4: return {{{0.68, 1.0}, {0.68, 0.0}, {0.1, 0.65}, {0.92, 0.65}}};
    case 5: return {{{0.85, 0.0}, {0.25, 0.0}, {0.18, 0.45}, {0.62, 0.4}, {0.86, 0.68},
                     {0.65, 0.97}, {0.15, 0.9}}};
    case 6: return {{{0.75, 0.03}, {0.35, 0.28}, {0.17, 0.68}, {0.4, 1.0}, {0.78, 0.88},
                     {0.78, 0.6}, {0.45, 0.5}, {0.2, 0.62}}};
    case 7: return {{{0.1, 0.0}, {0.9, 0.0}, {0.38, 1.0}}};
    case 8: {
      auto top = ellipse(0.5, 0.24, 0.28, 0.24);
      auto bottom = ellipse(0.5, 0.72, 0.34, 0.28);
      top.push_back(bottom.front());
      return top;
    }
    case 9: {
      auto loop = ellipse(0.5, 0.3, 0.3, 0.28);
      loop.push_back({{0.8, 0.3}, {0.62, 1.0}});
      return loop;
    }
  }
  return {};
}

double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * dx), p.y - (a.y + t * dy));
}

ImageU8 render_glyph(int digit, Rng& rng) {
  const double angle = rng.uniform(-0.25, 0.25);
  const double shear = rng.uniform(-0.2, 0.2);
  const double sx = rng.uniform(0.75, 1.0) * 14.0;  // glyph box roughly 14x20 like MNIST
  const double sy = rng.uniform(0.9, 1.0) * 19.0;
  const double thickness = rng.uniform(1.1, 1.9);
  const double ox = rng.uniform(-0.8, 0.8), oy = rng.uniform(-0.8, 0.8);
  const double ca = std::cos(angle), sa = std::sin(angle);

  std::vector<std::pair<Point, Point>> segments;
  for (const auto& stroke : glyph(digit)) {
    std::vector<Point> pts;
    for (auto p : stroke) {
      const double jx = p.x + rng.uniform(-0.03, 0.03), jy = p.y + rng.uniform(-0.03, 0.03);
      double x = (jx - 0.5) * sx + shear * (jy - 0.5) * sy;
      double y = (jy - 0.5) * sy;
      pts.push_back({14.0 + ox + ca * x - sa * y, 14.0 + oy + sa * x + ca * y});
    }
    for (std::size_t i = 1; i < pts.size(); ++i) segments.emplace_back(pts[i - 1], pts[i]);
  }

  ImageU8 out(kDigitSize, kDigitSize, 1);
  for (int y = 0; y < kDigitSize; ++y)
    for (int x = 0; x < kDigitSize; ++x) {
      double d = 1e9;
      for (const auto& [a, b] : segments) d = std::min(d, segment_distance({x + 0.5, y + 0.5}, a, b));
      const double v = std::clamp(thickness - d + 0.5, 0.0, 1.0);
      out.at(y, x) = static_cast<std::uint8_t>(std::lround(255 * v));
    }
  return out;
}

}  // namespace

ProceduralDigitCorpus::ProceduralDigitCorpus(std::size_t per_class, std::uint64_t seed) {
  digits_.reserve(per_class * 10);
  for (std::size_t i = 0; i < per_class; ++i)
    for (int d = 0; d < 10; ++d) {
      Rng rng(derive_seed(seed, i * 10 + d));
      digits_.push_back(render_glyph(d, rng));
      labels_.push_back(d);
    }
  fingerprint_ = corpus_fingerprint(digits_, labels_);
}

CifarCorpus::CifarCorpus(const fs::path& dir) {
  std::vector<fs::path> files;
  if (fs::is_directory(dir))
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".bin" && e.path().filename().string().find("batch") != std::string::npos)
        files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw SourceError("background corpus missing: no CIFAR-10 batches in " + dir.string());

  constexpr int kSide = 32, kPlane = kSide * kSide;
  std::vector<unsigned char> record(1 + 3 * kPlane);
  std::vector<int> labels;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    while (in.read(reinterpret_cast<char*>(record.data()), record.size())) {
      ImageU8 im(kSide, kSide, 3);
      for (int c = 0; c < 3; ++c)
        for (int p = 0; p < kPlane; ++p) im.data[p * 3 + c] = record[1 + c * kPlane + p];
      images_.push_back(std::move(im));
      labels.push_back(record[0]);
    }
  }
  if (images_.empty()) throw SourceError("background corpus is empty: " + dir.string());
  fingerprint_ = corpus_fingerprint(images_, labels);
}

ProceduralTextureCorpus::ProceduralTextureCorpus(std::size_t count, std::uint64_t seed) {
  constexpr int kSide = 32;
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, i));
    std::array<std::array<double, 3>, 4> corner{};
    for (auto& c : corner)
      for (auto& v : c) v = rng.uniform(0.05, 0.95);
    const double fx = rng.uniform(0.1, 0.6), fy = rng.uniform(0.1, 0.6), phase = rng.uniform(0, 6.28);
    ImageU8 im(kSide, kSide, 3);
    for (int y = 0; y < kSide; ++y)
      for (int x = 0; x < kSide; ++x) {
        const double u = x / (kSide - 1.0), v = y / (kSide - 1.0);
        const double ripple = 0.08 * std::sin(fx * x + fy * y + phase);
        for (int c = 0; c < 3; ++c) {
          const double val = (1 - u) * (1 - v) * corner[0][c] + u * (1 - v) * corner[1][c] +
                             (1 - u) * v * corner[2][c] + u * v * corner[3][c] + ripple;
          im.at(y, x, c) = static_cast<std::uint8_t>(std::lround(255 * std::clamp(val, 0.0, 1.0)));
        }
      }
    images_.push_back(std::move(im));
  }
  fingerprint_ = corpus_fingerprint(images_, {});
}

// --- scene rendering -------------------------------------------------------------

namespace {

DrawRecord place_digit(const SceneSpec& spec, const ImageU8& digit, int instance_id, Rng& rng) {
  const double scale = rng.uniform(spec.min_scale, spec.max_scale);
  const int side = static_cast<int>(std::lround(kDigitCrop * scale));
  const int off = (kDigitSize - kDigitCrop) / 2;
  DrawRecord rec;
  rec.instance_id = instance_id;
  rec.coverage = resize_bilinear(crop(digit, off, off, kDigitCrop, kDigitCrop), side, side);
  rec.y = static_cast<int>(rng.below(spec.height - side + 1));
  rec.x = static_cast<int>(rng.below(spec.width - side + 1));
  return rec;
}

BoundingBox tight_box(const DrawRecord& rec) {
  int y0 = rec.coverage.height, y1 = -1, x0 = rec.coverage.width, x1 = -1;
  for (int y = 0; y < rec.coverage.height; ++y)
    for (int x = 0; x < rec.coverage.width; ++x)
      if (rec.coverage.at(y, x) > 0) {
        y0 = std::min(y0, y), y1 = std::max(y1, y);
        x0 = std::min(x0, x), x1 = std::max(x1, x);
      }
  if (y1 < 0) return {rec.x, rec.y, 0, 0};
  return {rec.x + x0, rec.y + y0, x1 - x0 + 1, y1 - y0 + 1};
}

int color_channel(ColorTag c) {
  return c == ColorTag::red ? 0 : c == ColorTag::green ? 1 : 2;
}

}  // namespace

RenderedScene render_scene(const SceneSpec& spec, std::int64_t index, const DigitCorpus& digits,
                           const BackgroundCorpus* backgrounds) {
  if (!is_multi_mnist(spec.variant) && spec.variant != Variant::cifar10_mm)
    throw ValidationError("render_scene: variant has no renderer");
  if (digits.size() == 0) throw SourceError("digit corpus is empty");
  if (spec.variant == Variant::cifar10_mm && (!backgrounds || backgrounds->size() == 0))
    throw SourceError("background corpus unavailable");

  Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(index)));
  const int n = spec.objects_per_scene;
  const int H = spec.height, W = spec.width;

  std::vector<std::size_t> chosen(n);
  if (spec.variant == Variant::triplet_mm) {
    // Class drawn via a uniformly chosen exemplar, then same-class exemplars by rejection.
    const int cls = digits.label(rng.below(digits.size()));
    for (auto& c : chosen) {
      std::size_t tries = 0;
      do {
        c = rng.below(digits.size());
        if (++tries > 100 * digits.size() + 1000) throw SourceError("triplet: class sampling failed");
      } while (digits.label(c) != cls);
    }
  } else {
    for (auto& c : chosen) c = rng.below(digits.size());
  }

  std::vector<ColorTag> colors(n, ColorTag::none);
  const bool colored = spec.variant == Variant::rgb_occluded_mm || spec.variant == Variant::cifar10_mm;
  if (colored) {
    std::vector<ColorTag> palette{ColorTag::red, ColorTag::green, ColorTag::blue};
    for (int i = static_cast<int>(palette.size()) - 1; i > 0; --i)
      std::swap(palette[i], palette[rng.below(i + 1)]);
    for (int i = 0; i < n; ++i) colors[i] = palette[i % 3];
  }

  RenderedScene out;
  auto& scene = out.scene;
  scene.id = index;
  scene.image = ImageU8(H, W, 3);
  scene.labels = ImageU8(H, W, 1);

  if (spec.variant == Variant::cifar10_mm) {
    const auto& bg = backgrounds->image(rng.below(backgrounds->size()));
    scene.image = resize_bilinear(to_rgb(bg), H, W);
  }

  for (int i = 0; i < n; ++i) {
    out.draws.push_back(place_digit(spec, digits.digit(chosen[i]), i + 1, rng));
    scene.objects.push_back({i + 1, digits.label(chosen[i]), colors[i], tight_box(out.draws.back())});
  }

  if (!colored) {
    // Additive white digits; overlapping pixels keep the brightest owner.
    std::vector<int> sum(static_cast<std::size_t>(H) * W, 0), best(sum.size(), 0), owner(sum.size(), 0),
        covering(sum.size(), 0);
    for (const auto& d : out.draws)
      for (int y = 0; y < d.coverage.height; ++y)
        for (int x = 0; x < d.coverage.width; ++x) {
          const int q = d.coverage.at(y, x);
          if (q == 0) continue;
          const std::size_t p = static_cast<std::size_t>(d.y + y) * W + (d.x + x);
          sum[p] += q;
          ++covering[p];
          if (q >= best[p]) best[p] = q, owner[p] = d.instance_id;
        }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * W + x;
        const auto v = static_cast<std::uint8_t>(std::min(255, sum[p]));
        for (int c = 0; c < 3; ++c) scene.image.at(y, x, c) = v;
        std::uint8_t l = static_cast<std::uint8_t>(owner[p]);
        if (covering[p] >= 2) l |= kOverlapFlag;
        scene.labels.at(y, x) = l;
      }
  } else {
    // Later digits are drawn over earlier ones with alpha = sprite intensity.
    for (const auto& d : out.draws) {
      const int ch = color_channel(colors[d.instance_id - 1]);
      for (int y = 0; y < d.coverage.height; ++y)
        for (int x = 0; x < d.coverage.width; ++x) {
          const int q = d.coverage.at(y, x);
          if (q == 0) continue;
          for (int c = 0; c < 3; ++c) {
            auto& px = scene.image.at(d.y + y, d.x + x, c);
            const int fg = c == ch ? 255 : 0;
            px = static_cast<std::uint8_t>((fg * q + px * (255 - q) + 127) / 255);
          }
          scene.labels.at(d.y + y, d.x + x) = static_cast<std::uint8_t>(d.instance_id);
        }
    }
  }
  return out;
}

namespace {

DatasetBundle build_scenes(const SceneSpec& spec, SplitCounts counts, const DigitCorpus& digits,
                           const BackgroundCorpus* backgrounds, int threads) {
  spec.validate();
  if (counts.train < 0 || counts.holdout < 0 || counts.test < 0)
    throw ValidationError("split counts must be non-negative");

  DatasetBundle bundle;
  bundle.spec = spec;
  bundle.counts = counts;
  Fnv1a h;
  h.update(std::string(to_string(spec.variant)));
  h.update(spec.seed);
  h.update(static_cast<std::uint64_t>(std::llround(spec.min_scale * 1e6)));
  h.update(static_cast<std::uint64_t>(std::llround(spec.max_scale * 1e6)));
  h.update(digits.fingerprint());
  if (backgrounds) h.update(backgrounds->fingerprint());
  bundle.fingerprint = h.hex();

  const std::int64_t total = counts.total();
  if (total == 0) {
    bundle.warnings.push_back("requested scene count is zero; bundle is empty");
    std::cerr << "warning: " << bundle.warnings.back() << "\n";
    return bundle;
  }
  if (digits.size() == 0) throw SourceError("digit corpus is empty");

  std::vector<LabeledScene> scenes(total);
  threads = std::max(1, threads);
  auto work = [&](int t) {
    for (std::int64_t i = t; i < total; i += threads)
      scenes[i] = render_scene(spec, i, digits, backgrounds).scene;
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work, t);
  }

  auto take = [&](std::int64_t from, std::int64_t n) {
    return std::vector<LabeledScene>(std::make_move_iterator(scenes.begin() + from),
                                     std::make_move_iterator(scenes.begin() + from + n));
  };
  bundle.train = take(0, counts.train);
  bundle.holdout = take(counts.train, counts.holdout);
  bundle.test = take(counts.train + counts.holdout, counts.test);
  return bundle;
}

}  // namespace

DatasetBundle build_multi_mnist(const SceneSpec& spec, SplitCounts counts, const DigitCorpus& digits,
                                int threads) {
  if (!is_multi_mnist(spec.variant))
    throw ValidationError("build_multi_mnist requires a Multi-MNIST variant");
  return build_scenes(spec, counts, digits, nullptr, threads);
}

DatasetBundle build_multi_mnist(const SceneSpec& spec, std::int64_t count, const DigitCorpus& digits) {
  return build_multi_mnist(spec, SplitCounts{std::max<std::int64_t>(count, 0), 0, 0}, digits);
}

DatasetBundle build_cifar_mm(const SceneSpec& spec, SplitCounts counts, const DigitCorpus& digits,
                             const BackgroundCorpus& backgrounds, int threads) {
  if (spec.variant != Variant::cifar10_mm) throw ValidationError("build_cifar_mm requires cifar10_mm");
  if (backgrounds.size() == 0) throw SourceError("background corpus unavailable");
  return build_scenes(spec, counts, digits, &backgrounds, threads);
}

DatasetBundle build_cifar_mm(const SceneSpec& spec, std::int64_t count, const DigitCorpus& digits,
                             const BackgroundCorpus& backgrounds) {
  return build_cifar_mm(spec, SplitCounts{std::max<std::int64_t>(count, 0), 0, 0}, digits, backgrounds);
}

// --- CLEVR -------------------------------------------------------------------------

ImageU8 preprocess_clevr(const ImageU8& source) {
  constexpr int kDownH = 160, kDownW = 240, kCrop = 128;
  if (source.height < kDownH || source.width < kDownW)
    throw ShapeError("clevr source " + std::to_string(source.height) + "x" +
                     std::to_string(source.width) + " is smaller than 160x240; already preprocessed?");
  return center_crop(resize_area(to_rgb(source), kDownH, kDownW), kCrop, kCrop);
}

DatasetBundle ingest_clevr(const fs::path& source_dir, SplitCounts counts) {
  if (!fs::is_directory(source_dir)) throw SourceError("not a directory: " + source_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(source_dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw SourceError("no CLEVR images in " + source_dir.string());

  DatasetBundle bundle;
  bundle.spec = SceneSpec::defaults(Variant::clevr);
  Fnv1a h;
  h.update(std::string("clevr"));
  std::vector<LabeledScene> scenes;
  for (const auto& f : files) {
    ImageU8 src;
    try {
      src = read_png(f);
    } catch (const SourceError& e) {
      bundle.warnings.push_back(std::string("skipping unreadable image: ") + e.what());
      std::cerr << "warning: " << bundle.warnings.back() << "\n";
      continue;
    }
    LabeledScene s;
    s.id = static_cast<std::int64_t>(scenes.size());
    s.image = preprocess_clevr(src);
    h.update(s.image.data.data(), s.image.data.size());
    scenes.push_back(std::move(s));
  }
  if (scenes.empty()) throw SourceError("no readable CLEVR images in " + source_dir.string());
  bundle.fingerprint = h.hex();

  const auto n = static_cast<std::int64_t>(scenes.size());
  if (counts.holdout + counts.test > n) throw ValidationError("holdout+test exceed available images");
  counts.train = n - counts.holdout - counts.test;
  bundle.counts = counts;
  auto it = std::make_move_iterator(scenes.begin());
  bundle.train.assign(it, it + counts.train);
  bundle.holdout.assign(it + counts.train, it + counts.train + counts.holdout);
  bundle.test.assign(it + counts.train + counts.holdout, std::make_move_iterator(scenes.end()));
  return bundle;
}

// --- persistence ---------------------------------------------------------------------

void DatasetBundle::save(const fs::path& dir) const {
  fs::create_directories(dir / "images");
  const bool labelled = spec.variant != Variant::clevr;
  if (labelled) fs::create_directories(dir / "labels");

  {
    std::ofstream sp(dir / "spec.txt");
    sp << "variant=" << to_string(spec.variant) << "\n"
       << "height=" << spec.height << "\nwidth=" << spec.width << "\n"
       << "objects_per_scene=" << spec.objects_per_scene << "\n"
       << "seed=" << spec.seed << "\n"
       << std::setprecision(17) << "min_scale=" << spec.min_scale << "\nmax_scale=" << spec.max_scale << "\n"
       << "digit_crop=" << kDigitCrop << "\n"
       << "train=" << counts.train << "\nholdout=" << counts.holdout << "\ntest=" << counts.test << "\n";
  }

  std::ofstream man(dir / "manifest.txt");
  man << "kgan-manifest " << kManifestVersion << "\n"
      << "variant " << to_string(spec.variant) << "\n"
      << "fingerprint " << fingerprint << "\n"
      << "counts " << counts.train << " " << counts.holdout << " " << counts.test << "\n";
  for (auto s : {Split::train, Split::holdout, Split::test}) {
    for (const auto& scene : split(s)) {
      const auto name = scene_name(scene.id);
      write_png(dir / "images" / (name + ".png"), scene.image);
      if (scene.has_labels()) write_png(dir / "labels" / (name + ".png"), scene.labels);
      man << "scene " << name << " " << to_string(s) << " " << scene.objects.size();
      for (const auto& o : scene.objects)
        man << " " << o.instance_id << ":" << o.class_id << ":" << to_string(o.color) << ":" << o.box.x
            << "," << o.box.y << "," << o.box.width << "," << o.box.height;
      man << "\n";
    }
  }
  if (!man) throw Error("failed writing manifest in " + dir.string());
}

DatasetBundle DatasetBundle::load(const fs::path& dir) {
  std::ifstream man(dir / "manifest.txt");
  if (!man) throw SourceError("no manifest.txt in " + dir.string());
  DatasetBundle b;
  std::string tag;
  int version = 0;
  man >> tag >> version;
  if (tag != "kgan-manifest") throw VersionError("not a dataset manifest: " + dir.string());
  if (version != kManifestVersion)
    throw VersionError("manifest version " + std::to_string(version) + " unsupported");

  std::ifstream sp(dir / "spec.txt");
  std::string line;
  while (std::getline(sp, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "variant") b.spec.variant = parse_variant(val);
    else if (key == "height") b.spec.height = std::stoi(val);
    else if (key == "width") b.spec.width = std::stoi(val);
    else if (key == "objects_per_scene") b.spec.objects_per_scene = std::stoi(val);
    else if (key == "seed") b.spec.seed = std::stoull(val);
    else if (key == "min_scale") b.spec.min_scale = std::stod(val);
    else if (key == "max_scale") b.spec.max_scale = std::stod(val);
  }

  std::string variant;
  man >> tag >> variant;
  if (tag != "variant" || parse_variant(variant) != b.spec.variant)
    throw VersionError("manifest/spec variant mismatch in " + dir.string());
  man >> tag >> b.fingerprint;
  man >> tag >> b.counts.train >> b.counts.holdout >> b.counts.test;
  std::getline(man, line);
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, split_name;
    std::size_t n_obj = 0;
    ls >> tag >> name >> split_name >> n_obj;
    if (tag != "scene") throw VersionError("malformed manifest line: " + line);
    LabeledScene s;
    s.id = std::stoll(name);
    s.image = read_png(dir / "images" / (name + ".png"));
    const auto label_path = dir / "labels" / (name + ".png");
    if (fs::exists(label_path)) s.labels = read_png(label_path);
    for (std::size_t i = 0; i < n_obj; ++i) {
      std::string rec;
      ls >> rec;
      ObjectMeta o;
      char color[16] = {};
      if (std::sscanf(rec.c_str(), "%d:%d:%15[a-z]:%d,%d,%d,%d", &o.instance_id, &o.class_id, color,
                      &o.box.x, &o.box.y, &o.box.width, &o.box.height) != 7)
        throw VersionError("malformed object record: " + rec);
      o.color = parse_color_tag(color);
      s.objects.push_back(o);
    }
    b.split(parse_split(split_name)).push_back(std::move(s));
  }
  if (static_cast<std::int64_t>(b.train.size()) != b.counts.train ||
      static_cast<std::int64_t>(b.holdout.size()) != b.counts.holdout ||
      static_cast<std::int64_t>(b.test.size()) != b.counts.test)
    throw VersionError("manifest counts do not match scene records in " + dir.string());
  return b;
}

std::vector<const LabeledScene*> sample_batch(const DatasetBundle& bundle, Split split,
                                              std::int64_t batch_size, Rng& rng) {
  const auto& scenes = bundle.split(split);
  if (scenes.empty()) throw ValidationError("cannot sample from empty split '" + std::string(to_string(split)) + "'");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  std::vector<const LabeledScene*> batch;
  batch.reserve(batch_size);
  for (std::int64_t i = 0; i < batch_size; ++i) batch.push_back(&scenes[rng.below(scenes.size())]);
  return batch;
}

}  // namespace kgan
