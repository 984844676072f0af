#include "dra/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "dra/errors.hpp"

namespace dra::data {

std::string to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

void LabeledImageBatch::validate() const {
  const int n = size();
  if (images.rank() != 4 || images.dim(0) != n) {
    throw ArgumentError("batch images " + shape_string(images.shape()) + " do not match " + std::to_string(n) + " labels");
  }
  if (static_cast<int>(sources.size()) != n) throw ArgumentError("batch source flags do not match labels");
  for (double v : images.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ArgumentError("pixel value outside [0,1]: " + std::to_string(v));
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw ArgumentError("label " + std::to_string(y) + " outside [0, num_classes)");
  }
}

LabeledImageBatch LabeledImageBatch::select(std::span<const int> indices) const {
  LabeledImageBatch out;
  out.num_classes = num_classes;
  out.images = images.gather_rows(indices);
  out.labels.reserve(indices.size());
  out.sources.reserve(indices.size());
  for (int i : indices) {
    out.labels.push_back(labels[i]);
    out.sources.push_back(sources[i]);
  }
  return out;
}

std::vector<int> LabeledImageBatch::class_histogram() const {
  std::vector<int> h(num_classes, 0);
  for (int y : labels) ++h[y];
  return h;
}

LabeledImageBatch concat(const LabeledImageBatch& a, const LabeledImageBatch& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  if (a.num_classes != b.num_classes) throw ArgumentError("concat: batches disagree on num_classes");
  LabeledImageBatch out;
  out.num_classes = a.num_classes;
  const Tensor parts[] = {a.images, b.images};
  out.images = concat_rows(parts);
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.sources = a.sources;
  out.sources.insert(out.sources.end(), b.sources.begin(), b.sources.end());
  return out;
}

TensorArchive to_archive(const LabeledImageBatch& batch) {
  TensorArchive ar;
  std::vector<std::uint8_t> px(batch.images.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(batch.images[i], 0.0, 1.0) * 255.0));
  }
  ar.put_u8("images", batch.images.shape(), std::move(px));
  ar.put_i64("labels", {batch.size()}, std::vector<std::int64_t>(batch.labels.begin(), batch.labels.end()));
  ar.meta()["num_classes"] = batch.num_classes;
  return ar;
}

LabeledImageBatch from_archive(const TensorArchive& ar, Source source, const std::string& origin) {
  try {
    LabeledImageBatch b;
    const ArchiveArray& img = ar.array("images");
    if (img.dtype != DType::kU8 || img.shape.size() != 4) throw IngestionError(origin + ": 'images' must be a rank-4 U8 array");
    b.images = Tensor(img.shape);
    for (std::size_t i = 0; i < b.images.size(); ++i) b.images[i] = img.bytes[i] / 255.0;
    const auto labels = ar.get_i64("labels");
    if (static_cast<int>(labels.size()) != img.shape[0]) throw IngestionError(origin + ": label count does not match image count");
    b.labels.assign(labels.begin(), labels.end());
    b.sources.assign(labels.size(), source);
    b.num_classes = ar.meta().at("num_classes").get<int>();
    b.validate();
    return b;
  } catch (const IngestionError&) {
    throw;
  } catch (const std::exception& e) {
    throw IngestionError(origin + ": " + e.what());
  }
}

nlohmann::json ToyConfig::to_json() const {
  return {{"train_counts", train_counts},         {"test_counts", test_counts},
          {"image_size", image_size},             {"generator_seed", generator_seed},
          {"amplitude_min", amplitude_min},       {"amplitude_max", amplitude_max},
          {"cycles_min", cycles_min},             {"cycles_max", cycles_max},
          {"angle_jitter_deg", angle_jitter_deg}, {"pixel_noise", pixel_noise},
          {"background_slope", background_slope}};
}

ToyConfig ToyConfig::from_json(const nlohmann::json& j) {
  ToyConfig c;
  c.train_counts = j.value("train_counts", c.train_counts);
  c.test_counts = j.value("test_counts", c.test_counts);
  c.image_size = j.value("image_size", c.image_size);
  c.generator_seed = j.value("generator_seed", c.generator_seed);
  c.amplitude_min = j.value("amplitude_min", c.amplitude_min);
  c.amplitude_max = j.value("amplitude_max", c.amplitude_max);
  c.cycles_min = j.value("cycles_min", c.cycles_min);
  c.cycles_max = j.value("cycles_max", c.cycles_max);
  c.angle_jitter_deg = j.value("angle_jitter_deg", c.angle_jitter_deg);
  c.pixel_noise = j.value("pixel_noise", c.pixel_noise);
  c.background_slope = j.value("background_slope", c.background_slope);
  return c;
}

LabeledImageBatch generate_toy(const ToyConfig& cfg, Split split) {
  const auto& counts = split == Split::kTrain ? cfg.train_counts : cfg.test_counts;
  if (counts.size() != 2) throw ConfigError("toy-2class needs exactly two per-class counts");
  const int n = std::accumulate(counts.begin(), counts.end(), 0);
  const int s = cfg.image_size;
  LabeledImageBatch b;
  b.num_classes = 2;
  b.images = Tensor({n, 1, s, s});
  b.labels.reserve(n);
  b.sources.assign(n, Source::kReal);
  Rng rng(stream_seed(cfg.generator_seed, Stream::kData, split == Split::kTrain ? 0 : 1));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  constexpr double pi = std::numbers::pi;
  int idx = 0;
  for (int cls = 0; cls < 2; ++cls) {
    for (int k = 0; k < counts[cls]; ++k, ++idx) {
      const double base_angle = cls == 0 ? 0.0 : pi / 2.0;
      const double angle = base_angle + (2.0 * unif(rng) - 1.0) * cfg.angle_jitter_deg * pi / 180.0;
      const double amp = cfg.amplitude_min + (cfg.amplitude_max - cfg.amplitude_min) * unif(rng);
      const double cycles = cfg.cycles_min + (cfg.cycles_max - cfg.cycles_min) * unif(rng);
      const double phase = 2.0 * pi * unif(rng);
      const double gx = (2.0 * unif(rng) - 1.0) * cfg.background_slope;
      const double gy = (2.0 * unif(rng) - 1.0) * cfg.background_slope;
      const double level = 0.35 + 0.3 * unif(rng);
      double* img = b.images.data() + static_cast<std::size_t>(idx) * s * s;
      for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
          const double u = (x + 0.5) / s - 0.5, v = (y + 0.5) / s - 0.5;
          // Class 0 stripes vary along y (horizontal bands), class 1 along x.
          const double coord = u * std::sin(angle) + v * std::cos(angle);
          double val = level + gx * u + gy * v + amp * std::sin(2.0 * pi * cycles * coord + phase);
          val += cfg.pixel_noise * gauss(rng);
          img[y * s + x] = std::clamp(val, 0.0, 1.0);
        }
      }
      b.labels.push_back(cls);
    }
  }
  // Quantize exactly as the cache stores it, so cached and fresh copies agree.
  for (auto& v : b.images.values()) v = std::lround(v * 255.0) / 255.0;
  return b;
}

namespace {

Dataset shuffled(Dataset d, std::uint64_t seed) {
  std::vector<int> order(d.examples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(stream_seed(seed, Stream::kShuffle));
  std::shuffle(order.begin(), order.end(), rng);
  d.examples = d.examples.select(order);
  return d;
}

Dataset load_toy(Split split, const DatasetOptions& opt) {
  const std::string tag = sha256_hex(opt.toy.to_json().dump()).substr(0, 12);
  const auto path = opt.cache_dir / ("toy-2class_" + to_string(split) + "_" + tag + ".dra");
  if (!std::filesystem::exists(path)) {
    TensorArchive ar = to_archive(generate_toy(opt.toy, split));
    ar.meta()["dataset"] = "toy-2class";
    ar.meta()["split"] = to_string(split);
    ar.meta()["generator"] = opt.toy.to_json();
    ar.save(path);
  }
  Dataset d;
  d.id = "toy-2class";
  d.split = split;
  d.origin = path;
  d.examples = from_archive(TensorArchive::load(path), Source::kReal, path.string());
  return d;
}

// CIFAR-10 binary layout: per record one label byte then 3072 pixel bytes
// (1024 R, 1024 G, 1024 B, row-major 32x32).
Dataset load_cifar10(Split split, const DatasetOptions& opt) {
  std::vector<std::string> files;
  if (split == Split::kTrain) {
    for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
  } else {
    files.push_back("test_batch.bin");
  }
  constexpr int kRecord = 1 + 3 * 32 * 32;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
  for (const auto& f : files) {
    const auto path = opt.benchmark_root / f;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IngestionError(path.string() + ": cannot open CIFAR-10 batch file");
    std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.empty() || buf.size() % kRecord != 0) {
      throw IngestionError(path.string() + ": size is not a multiple of the 3073-byte record length");
    }
    for (std::size_t r = 0; r < buf.size() / kRecord; ++r) {
      const auto label = static_cast<unsigned char>(buf[r * kRecord]);
      if (label > 9) throw IngestionError(path.string() + ": label byte " + std::to_string(label) + " out of range");
      labels.push_back(label);
      pixels.insert(pixels.end(), buf.begin() + r * kRecord + 1, buf.begin() + (r + 1) * kRecord);
    }
  }
  Dataset d;
  d.id = "cifar10";
  d.split = split;
  d.origin = opt.benchmark_root;
  const int n = static_cast<int>(labels.size());
  d.examples.num_classes = 10;
  d.examples.images = Tensor({n, 3, 32, 32});
  for (std::size_t i = 0; i < pixels.size(); ++i) d.examples.images[i] = pixels[i] / 255.0;
  d.examples.labels = std::move(labels);
  d.examples.sources.assign(n, Source::kReal);
  return d;
}

using Loader = std::function<Dataset(Split, const DatasetOptions&)>;

const std::map<std::string, Loader>& registry() {
  static const std::map<std::string, Loader> r = {{"toy-2class", load_toy}, {"cifar10", load_cifar10}};
  return r;
}

}  // namespace

Dataset load_dataset(const std::string& id, Split split, std::uint64_t seed, const DatasetOptions& options) {
  auto it = registry().find(id);
  if (it == registry().end()) throw ConfigError("unknown dataset id '" + id + "'");
  Dataset d = it->second(split, options);
  d.examples.validate();
  return shuffled(std::move(d), seed);
}

std::vector<std::string> registered_datasets() {
  std::vector<std::string> out;
  for (const auto& [k, v] : registry()) out.push_back(k);
  return out;
}

ExampleStream::ExampleStream(const LabeledImageBatch& source, std::uint64_t seed) : source_(&source), seed_(seed) {
  if (source.size() == 0) throw ArgumentError("ExampleStream over an empty example set");
  reshuffle();
}

void ExampleStream::reshuffle() {
  order_.resize(source_->size());
  std::iota(order_.begin(), order_.end(), 0);
  Rng rng(stream_seed(seed_, Stream::kShuffle, static_cast<std::uint64_t>(epoch_)));
  std::shuffle(order_.begin(), order_.end(), rng);
  cursor_ = 0;
}

LabeledImageBatch ExampleStream::take(int n) {
  std::vector<int> idx;
  idx.reserve(n);
  while (static_cast<int>(idx.size()) < n) {
    if (cursor_ == static_cast<int>(order_.size())) {
      ++epoch_;
      reshuffle();
    }
    idx.push_back(order_[cursor_++]);
  }
  return source_->select(idx);
}

Fraction Fraction::from_double(double x) {
  if (!(x >= 0.0 && x <= 1.0)) throw ArgumentError("fraction must lie in [0,1]");
  constexpr long kDen = 1000000000L;
  long num = std::lround(x * kDen);
  const long g = std::gcd(num, kDen);
  return {num / g, kDen / g};
}

LabeledImageBatch sample_mixed_batch(ExampleStream& real, ExampleStream* pool, const MixSpec& spec) {
  if (spec.batch_size <= 0) throw ArgumentError("batch_size must be positive");
  const int nr = spec.real_count();
  const int ns = spec.synthetic_count();
  if (ns > 0 && pool == nullptr) throw ConfigError("real_fraction < 1 requires a nonempty synthetic pool");
  LabeledImageBatch out = real.take(nr);
  if (ns > 0) {
    LabeledImageBatch syn = pool->take(ns);
    syn.sources.assign(ns, Source::kSynthetic);
    out = concat(out, syn);
  }
  for (int i = 0; i < nr; ++i) out.sources[i] = Source::kReal;
  return out;
}

LabeledImageBatch SyntheticPool::load() const {
  return from_archive(TensorArchive::load(archive_path), Source::kSynthetic, archive_path.string());
}

SyntheticPool SyntheticPool::open(const std::filesystem::path& path) {
  const TensorArchive ar = TensorArchive::load(path);
  SyntheticPool p;
  p.archive_path = path;
  try {
    p.count = ar.meta().at("count").get<int>();
    p.class_histogram = ar.meta().at("class_histogram").get<std::vector<int>>();
    p.generator_checkpoint_id = ar.meta().at("generator_checkpoint_id").get<std::string>();
  } catch (const std::exception& e) {
    throw IngestionError(path.string() + ": pool metadata incomplete (" + e.what() + ")");
  }
  return p;
}

}  // namespace dra::data
