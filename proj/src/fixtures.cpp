#include "dra/fixtures.hpp"

#include "dra/errors.hpp"

namespace dra::report {

nlohmann::json ReferenceFixture::to_json() const {
  nlohmann::json j = {{"table_id", table_id}, {"caption", caption}};
  j["accuracy_rows"] = nlohmann::json::array();
  for (const auto& r : accuracy_rows) {
    j["accuracy_rows"].push_back({{"dataset", r.dataset}, {"model", r.model}, {"method", r.method},
                                  {"clean", r.clean}, {"robust", r.robust}, {"synthetic", r.synthetic}});
  }
  j["dimension_rows"] = nlohmann::json::array();
  for (const auto& r : dimension_rows) {
    j["dimension_rows"].push_back({{"method", r.method}, {"cls95", r.cls95}, {"cls99", r.cls99}, {"robust_dim", r.robust_dim}});
  }
  return j;
}

const ReferenceFixture& table1() {
  static const ReferenceFixture t{
      "table1",
      "Clean / AutoAttack accuracy with and without DRA on CIFAR-10, CIFAR-100 and ImageNet",
      {
          {"CIFAR-10", "WRN-28-10", "DM-AT", 92.44, 67.31, "20M"},
          {"CIFAR-10", "WRN-28-10", "DM-AT+DRA", 93.14, 67.83, "20M"},
          {"CIFAR-10", "ViT-B/2", "DM-AT", 94.35, 71.31, "50M"},
          {"CIFAR-10", "ViT-B/2", "DM-AT+DRA", 95.22, 71.77, "50M"},
          {"CIFAR-100", "WRN-28-10", "DM-AT", 68.34, 35.72, "1M"},
          {"CIFAR-100", "WRN-28-10", "DM-AT+DRA", 69.85, 36.27, "1M"},
          {"CIFAR-100", "ViT-B/2", "DM-AT", 68.53, 36.52, "1M"},
          {"CIFAR-100", "ViT-B/2", "DM-AT+DRA", 69.95, 37.43, "1M"},
          {"ImageNet", "ConvNext-B", "DM-AT", 74.49, 54.44, "4M"},
          {"ImageNet", "ConvNext-B", "DM-AT+DRA", 76.03, 56.07, "4M"},
          {"ImageNet", "ViT-B/16", "DM-AT", 74.62, 54.64, "4M"},
          {"ImageNet", "ViT-B/16", "DM-AT+DRA", 76.87, 55.16, "4M"},
      },
      {}};
  return t;
}

const ReferenceFixture& table2() {
  static const ReferenceFixture t{
      "table2",
      "CIFAR-10 comparison across synthetic-pool sizes",
      {
          {"CIFAR-10", "WRN-34-10", "AT", 84.33, 55.25, "-"},
          {"CIFAR-10", "WRN-34-10", "AT+ADR", 86.11, 55.26, "-"},
          {"CIFAR-10", "WRN-34-10", "AT+IKL", 84.80, 57.09, "-"},
          {"CIFAR-10", "WRN-34-10", "AT+DRA", 88.54, 57.29, "-"},
          {"CIFAR-10 1M", "WRN-28-10", "DM-AT", 91.12, 63.35, "1M"},
          {"CIFAR-10 1M", "WRN-28-10", "DM-AT (1024/800)", 91.43, 63.96, "1M"},
          {"CIFAR-10 1M", "WRN-28-10", "DM-AT+DRA", 92.36, 64.12, "1M"},
          {"CIFAR-10 20M", "WRN-28-10", "DM-AT", 92.44, 67.31, "20M"},
          {"CIFAR-10 20M", "WRN-28-10", "DM-AT+IKL", 92.16, 67.75, "20M"},
          {"CIFAR-10 20M", "WRN-28-10", "DM-AT+DRA", 93.14, 67.83, "20M"},
          {"CIFAR-10 20M", "ViT-B/2", "DM-AT", 92.27, 66.47, "20M"},
          {"CIFAR-10 20M", "ViT-B/2", "DM-AT+DRA", 93.36, 67.74, "20M"},
          {"CIFAR-10 50M", "WRN-70-16", "DM-AT", 93.25, 70.69, "50M"},
          {"CIFAR-10 50M", "RaWRN-70-16", "DM-AT+RA", 93.27, 71.07, "50M"},
          {"CIFAR-10 50M", "ViT-B/2", "DM-AT", 94.35, 71.31, "50M"},
          {"CIFAR-10 50M", "ViT-B/2", "DM-AT+DRA", 95.22, 71.77, "50M"},
      },
      {}};
  return t;
}

const ReferenceFixture& table3() {
  static const ReferenceFixture t{"table3",
                                  "Classification dimension on CIFAR-10 with WRN-28-10",
                                  {},
                                  {
                                      {"AT", 9, 14, 9},
                                      {"AT+DRA", 15, 42, 22},
                                      {"DM-AT", 10, 11, 11},
                                      {"DM-AT+DRA", 12, 15, 23},
                                  }};
  return t;
}

const std::vector<const ReferenceFixture*>& all_fixtures() {
  static const std::vector<const ReferenceFixture*> all{&table1(), &table2(), &table3()};
  return all;
}

const ReferenceFixture& fixture_by_id(const std::string& id) {
  for (const auto* f : all_fixtures())
    if (f->table_id == id) return *f;
  throw ConfigError("unknown reference fixture '" + id + "'");
}

const ScalarReferences& scalar_references() {
  static const ScalarReferences s;
  return s;
}

}  // namespace dra::report
