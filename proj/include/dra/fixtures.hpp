#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dra/archive.hpp"

namespace dra::report {

struct AccuracyRow {
  std::string dataset;
  std::string model;
  std::string method;
  double clean = 0.0;
  double robust = 0.0;
  std::string synthetic;  // pool size, "-" for none
};

struct DimensionRow {
  std::string method;
  int cls95 = 0;
  int cls99 = 0;
  int robust_dim = 0;
};

struct ReferenceFixture {
  std::string table_id;
  std::string caption;
  std::vector<AccuracyRow> accuracy_rows;
  std::vector<DimensionRow> dimension_rows;

  nlohmann::json to_json() const;
};

// Published reference values, shipped read-only.
const ReferenceFixture& table1();
const ReferenceFixture& table2();
const ReferenceFixture& table3();
const std::vector<const ReferenceFixture*>& all_fixtures();
const ReferenceFixture& fixture_by_id(const std::string& id);

// Scalar reference values quoted alongside the direction checks.
struct ScalarReferences {
  double eot_before = 46.0;
  double eot_after = 17.3;
  double ablation_diffusion_target = 64.12;
  double ablation_noisy_target = 62.62;
  std::vector<int> outlier_channels{1053, 259};
  double finetune_clean = 87.77;
  double finetune_robust = 55.76;
};
const ScalarReferences& scalar_references();

}  // namespace dra::report
