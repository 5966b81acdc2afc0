#pragma once

// Multi-object datasets with ground-truth instance masks: the three
// Multi-MNIST variants, CIFAR10 + MM, and CLEVR ingestion.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "kgan/image.hpp"
#include "kgan/rng.hpp"

namespace kgan {

enum class Variant { independent_mm, triplet_mm, rgb_occluded_mm, cifar10_mm, clevr };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);
bool is_multi_mnist(Variant v);

enum class ColorTag { none, red, green, blue };

std::string_view to_string(ColorTag c);
ColorTag parse_color_tag(std::string_view s);

struct BoundingBox {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
  bool operator==(const BoundingBox&) const = default;
};

struct ObjectMeta {
  int instance_id = 0;  // 1-based, equals draw order
  int class_id = 0;
  ColorTag color = ColorTag::none;
  BoundingBox box;  // tight box of the drawn sprite in canvas coordinates
  bool operator==(const ObjectMeta&) const = default;
};

struct SceneSpec {
  Variant variant = Variant::independent_mm;
  int height = 64;
  int width = 64;
  int objects_per_scene = 3;
  std::uint64_t seed = 0;
  double min_scale = 0.8;
  double max_scale = 1.2;

  static SceneSpec defaults(Variant v, std::uint64_t seed = 0);
  void validate() const;
  bool operator==(const SceneSpec&) const = default;
};

/// Label maps store the instance id in the low 7 bits; this bit marks a pixel
/// covered by two or more digits in the additive (Independent/Triplet) variants.
inline constexpr std::uint8_t kOverlapFlag = 0x80;
inline constexpr std::uint8_t kInstanceMask = 0x7f;

struct LabeledScene {
  std::int64_t id = 0;
  ImageU8 image;   // H x W x 3
  ImageU8 labels;  // H x W x 1; empty when the dataset has no masks
  std::vector<ObjectMeta> objects;

  int label_at(int y, int x) const { return labels.at(y, x) & kInstanceMask; }
  bool overlap_at(int y, int x) const { return (labels.at(y, x) & kOverlapFlag) != 0; }
  bool has_labels() const { return !labels.empty(); }
};

enum class Split { train, holdout, test };

std::string_view to_string(Split s);
Split parse_split(std::string_view s);

struct SplitCounts {
  std::int64_t train = 0;
  std::int64_t holdout = 0;
  std::int64_t test = 0;
  std::int64_t total() const { return train + holdout + test; }
  bool operator==(const SplitCounts&) const = default;
};

struct DatasetBundle {
  SceneSpec spec;
  SplitCounts counts;
  std::string fingerprint;  // hash of corpus fingerprints + build spec
  std::vector<LabeledScene> train;
  std::vector<LabeledScene> holdout;
  std::vector<LabeledScene> test;
  std::vector<std::string> warnings;

  const std::vector<LabeledScene>& split(Split s) const;
  std::vector<LabeledScene>& split(Split s);
  bool empty() const { return counts.total() == 0; }

  /// Writes images/NNNNNNN.png, labels/NNNNNNN.png, manifest.txt, spec.txt.
  void save(const std::filesystem::path& dir) const;
  static DatasetBundle load(const std::filesystem::path& dir);
};

// --- source corpora ---------------------------------------------------------

/// 28x28 single-channel digit images with class labels.
class DigitCorpus {
 public:
  virtual ~DigitCorpus() = default;
  virtual std::size_t size() const = 0;
  virtual int label(std::size_t i) const = 0;
  virtual const ImageU8& digit(std::size_t i) const = 0;
  virtual std::string fingerprint() const = 0;
};

/// Reads MNIST idx files (train-images-idx3-ubyte / train-labels-idx1-ubyte).
class MnistCorpus final : public DigitCorpus {
 public:
  explicit MnistCorpus(const std::filesystem::path& dir);
  MnistCorpus(const std::filesystem::path& images_file, const std::filesystem::path& labels_file);

  std::size_t size() const override { return digits_.size(); }
  int label(std::size_t i) const override { return labels_[i]; }
  const ImageU8& digit(std::size_t i) const override { return digits_[i]; }
  std::string fingerprint() const override { return fingerprint_; }

 private:
  std::vector<ImageU8> digits_;
  std::vector<int> labels_;
  std::string fingerprint_;
};

/// Stroke-rendered handwriting-like digits with per-exemplar jitter. Stands in
/// for MNIST where the real corpus is not available.
class ProceduralDigitCorpus final : public DigitCorpus {
 public:
  ProceduralDigitCorpus(std::size_t per_class, std::uint64_t seed);

  std::size_t size() const override { return digits_.size(); }
  int label(std::size_t i) const override { return labels_[i]; }
  const ImageU8& digit(std::size_t i) const override { return digits_[i]; }
  std::string fingerprint() const override { return fingerprint_; }

 private:
  std::vector<ImageU8> digits_;
  std::vector<int> labels_;
  std::string fingerprint_;
};

/// 32x32 RGB natural images.
class BackgroundCorpus {
 public:
  virtual ~BackgroundCorpus() = default;
  virtual std::size_t size() const = 0;
  virtual const ImageU8& image(std::size_t i) const = 0;
  virtual std::string fingerprint() const = 0;
};

/// Reads CIFAR-10 binary batches (data_batch_*.bin / test_batch.bin) from a directory.
class CifarCorpus final : public BackgroundCorpus {
 public:
  explicit CifarCorpus(const std::filesystem::path& dir);

  std::size_t size() const override { return images_.size(); }
  const ImageU8& image(std::size_t i) const override { return images_[i]; }
  std::string fingerprint() const override { return fingerprint_; }

 private:
  std::vector<ImageU8> images_;
  std::string fingerprint_;
};

/// Smooth random color fields; stand-in background source for tests.
class ProceduralTextureCorpus final : public BackgroundCorpus {
 public:
  ProceduralTextureCorpus(std::size_t count, std::uint64_t seed);

  std::size_t size() const override { return images_.size(); }
  const ImageU8& image(std::size_t i) const override { return images_[i]; }
  std::string fingerprint() const override { return fingerprint_; }

 private:
  std::vector<ImageU8> images_;
  std::string fingerprint_;
};

// --- scene construction ------------------------------------------------------

/// Where and what the renderer drew for one instance.
struct DrawRecord {
  int instance_id = 0;
  int y = 0;
  int x = 0;
  ImageU8 coverage;  // resampled 8-bit sprite, 1 channel
};

struct RenderedScene {
  LabeledScene scene;
  std::vector<DrawRecord> draws;  // in draw order
};

/// Renders scene `index` of a bundle. The scene's random stream is derived from
/// (spec.seed, index) only, so scenes can be built in any order.
RenderedScene render_scene(const SceneSpec& spec, std::int64_t index, const DigitCorpus& digits,
                           const BackgroundCorpus* backgrounds = nullptr);

DatasetBundle build_multi_mnist(const SceneSpec& spec, SplitCounts counts,
                                const DigitCorpus& digits, int threads = 1);
DatasetBundle build_multi_mnist(const SceneSpec& spec, std::int64_t count,
                                const DigitCorpus& digits);

DatasetBundle build_cifar_mm(const SceneSpec& spec, SplitCounts counts, const DigitCorpus& digits,
                             const BackgroundCorpus& backgrounds, int threads = 1);
DatasetBundle build_cifar_mm(const SceneSpec& spec, std::int64_t count, const DigitCorpus& digits,
                             const BackgroundCorpus& backgrounds);

/// Downsample to 160x240 (HxW) then center-crop 128x128.
ImageU8 preprocess_clevr(const ImageU8& source);

DatasetBundle ingest_clevr(const std::filesystem::path& source_dir, SplitCounts counts = {});

/// Uniform sampling with replacement.
std::vector<const LabeledScene*> sample_batch(const DatasetBundle& bundle, Split split,
                                              std::int64_t batch_size, Rng& rng);

}  // namespace kgan
