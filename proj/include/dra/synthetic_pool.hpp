#pragma once

#include <cstdint>
#include <filesystem>

#include "dra/data.hpp"
#include "dra/diffusion.hpp"

namespace dra::data {

// Samples n images from a class-conditional diffusion model and writes them
// as a quantized archive at `path`. With class_balanced, class c receives
// n / K + (c < n % K) images; otherwise classes are drawn uniformly at random.
// Throws ArgumentError for n <= 0 and GenerationError on sampler divergence.
SyntheticPool build_synthetic_pool(const diffusion::DiffusionModel& model, int n, bool class_balanced,
                                   std::uint64_t seed, const std::filesystem::path& path);

}  // namespace dra::data
