#include "dra/synthetic_pool.hpp"

#include <cmath>

#include "dra/errors.hpp"

namespace dra::data {

SyntheticPool build_synthetic_pool(const diffusion::DiffusionModel& model, int n, bool class_balanced,
                                   std::uint64_t seed, const std::filesystem::path& path) {
  if (n <= 0) throw ArgumentError("synthetic pool size must be positive");
  const int k = model.num_classes();
  std::vector<int> counts(k, 0);
  if (class_balanced) {
    for (int c = 0; c < k; ++c) counts[c] = n / k + (c < n % k ? 1 : 0);
  } else {
    Rng rng(stream_seed(seed, Stream::kSynthetic));
    std::uniform_int_distribution<int> pick(0, k - 1);
    for (int i = 0; i < n; ++i) ++counts[pick(rng)];
  }

  LabeledImageBatch pool;
  pool.num_classes = k;
  std::vector<Tensor> parts;
  for (int c = 0; c < k; ++c) {
    if (counts[c] == 0) continue;
    parts.push_back(diffusion::sample_images(model, counts[c], c, stream_seed(seed, Stream::kSampler, c)));
    pool.labels.insert(pool.labels.end(), counts[c], c);
  }
  pool.images = concat_rows(parts);
  pool.sources.assign(n, Source::kSynthetic);
  // Same rounding as the archive so the in-memory pool matches what is stored.
  for (auto& v : pool.images.values()) v = std::round(v * 255.0) / 255.0;
  pool.validate();

  TensorArchive ar = to_archive(pool);
  SyntheticPool info;
  info.archive_path = path;
  info.count = n;
  info.class_histogram = counts;
  info.generator_checkpoint_id = model.checkpoint_id();
  ar.meta()["kind"] = "synthetic-pool";
  ar.meta()["count"] = n;
  ar.meta()["class_histogram"] = counts;
  ar.meta()["generator_checkpoint_id"] = info.generator_checkpoint_id;
  ar.meta()["class_balanced"] = class_balanced;
  ar.meta()["seed"] = seed;
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  ar.save(path);
  return info;
}

}  // namespace dra::data
