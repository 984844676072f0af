#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dra/archive.hpp"
#include "dra/rng.hpp"
#include "dra/tensor.hpp"

namespace dra::data {

enum class Source : std::uint8_t { kReal = 0, kSynthetic = 1 };
enum class Split { kTrain, kTest };

std::string to_string(Split s);

// Images in [0,1] with labels; the unit of training and evaluation.
struct LabeledImageBatch {
  Tensor images;  // [n, C, H, W]
  std::vector<int> labels;
  std::vector<Source> sources;
  int num_classes = 0;

  int size() const { return static_cast<int>(labels.size()); }
  int channels() const { return images.dim(1); }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }

  // Throws ArgumentError when a pixel leaves [0,1], a label is out of range,
  // or the arrays disagree in length.
  void validate() const;
  LabeledImageBatch select(std::span<const int> indices) const;
  std::vector<int> class_histogram() const;
};

LabeledImageBatch concat(const LabeledImageBatch& a, const LabeledImageBatch& b);

// Quantized storage: U8 images (round(255 x)) plus I64 labels.
TensorArchive to_archive(const LabeledImageBatch& batch);
LabeledImageBatch from_archive(const TensorArchive& archive, Source source, const std::string& origin);

// Built-in procedural dataset: two classes of oriented low-frequency gratings
// on a shaded background with pixel noise.
struct ToyConfig {
  std::vector<int> train_counts{1000, 1000};
  std::vector<int> test_counts{500, 500};
  int image_size = 16;
  std::uint64_t generator_seed = 20240611;
  double amplitude_min = 0.03;
  double amplitude_max = 0.18;
  double cycles_min = 1.0;
  double cycles_max = 2.5;
  double angle_jitter_deg = 20.0;
  double pixel_noise = 0.05;
  double background_slope = 0.1;

  nlohmann::json to_json() const;
  static ToyConfig from_json(const nlohmann::json& j);
};

LabeledImageBatch generate_toy(const ToyConfig& config, Split split);

struct DatasetOptions {
  // Where generated caches are written and benchmark files are looked up.
  std::filesystem::path cache_dir = "dataset-cache";
  std::filesystem::path benchmark_root;
  ToyConfig toy;
};

// A registered dataset split with a seed-determined example order.
struct Dataset {
  std::string id;
  Split split = Split::kTrain;
  LabeledImageBatch examples;
  std::filesystem::path origin;
};

// Registered ids: "toy-2class" (generated and cached on first use) and
// "cifar10" (binary batches under benchmark_root). Throws ConfigError for an
// unknown id and IngestionError naming the offending file otherwise.
Dataset load_dataset(const std::string& id, Split split, std::uint64_t seed, const DatasetOptions& options);
std::vector<std::string> registered_datasets();

// Endless epoch-shuffled cursor over a fixed example set.
class ExampleStream {
 public:
  ExampleStream(const LabeledImageBatch& source, std::uint64_t seed);

  LabeledImageBatch take(int n);
  long epoch() const { return epoch_; }
  int source_size() const { return source_->size(); }

 private:
  void reshuffle();

  const LabeledImageBatch* source_;
  std::uint64_t seed_;
  long epoch_ = 0;
  int cursor_ = 0;
  std::vector<int> order_;
};

// Exact rational used for the real/synthetic split so floor() is exact.
struct Fraction {
  long num = 0;
  long den = 1;

  static Fraction from_double(double x);
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  long floor_times(long n) const { return (num * n) / den; }
};

struct MixSpec {
  Fraction real_fraction{3, 10};
  int batch_size = 64;
  std::uint64_t seed = 0;

  int real_count() const { return static_cast<int>(real_fraction.floor_times(batch_size)); }
  int synthetic_count() const { return batch_size - real_count(); }
};

// Exactly real_count() examples from `real` followed by synthetic_count()
// from `pool`. `pool` may be null only when real_fraction == 1.
LabeledImageBatch sample_mixed_batch(ExampleStream& real, ExampleStream* pool, const MixSpec& spec);

struct SyntheticPool {
  std::filesystem::path archive_path;
  int count = 0;
  std::vector<int> class_histogram;
  std::string generator_checkpoint_id;

  LabeledImageBatch load() const;
  static SyntheticPool open(const std::filesystem::path& path);
};

}  // namespace dra::data
