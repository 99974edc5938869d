#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpsplit/common.hpp"
#include "dpsplit/rng.hpp"
#include "dpsplit/tensor.hpp"

namespace dpsplit {

// The four benchmark datasets plus a procedurally generated corpus that
// stands in for them when the real archives are not on disk.
enum class DatasetName { kSvhn, kGtsrb, kStl10, kCifar10, kSynthetic };

inline std::string to_string(DatasetName n) {
  switch (n) {
    case DatasetName::kSvhn: return "svhn";
    case DatasetName::kGtsrb: return "gtsrb";
    case DatasetName::kStl10: return "stl10";
    case DatasetName::kCifar10: return "cifar10";
    case DatasetName::kSynthetic: return "synthetic";
  }
  throw ConfigError("unknown dataset enum value");
}

inline DatasetName dataset_from_string(const std::string& s) {
  if (s == "svhn") return DatasetName::kSvhn;
  if (s == "gtsrb") return DatasetName::kGtsrb;
  if (s == "stl10") return DatasetName::kStl10;
  if (s == "cifar10") return DatasetName::kCifar10;
  if (s == "synthetic") return DatasetName::kSynthetic;
  throw ConfigError("unknown dataset name: " + s);
}

struct DatasetSpec {
  DatasetName name = DatasetName::kSynthetic;
  int train_size = 0;
  int test_size = 0;
  int n_classes = 10;
  int channels = 3;
  int height = 32;
  int width = 32;
  std::optional<std::vector<int>> class_filter;  // source class ids (gtsrb subset override)
  std::uint64_t seed = 0;

  // Full-scale sizes per dataset; the synthetic corpus gets sizes chosen for
  // CPU-friendly experimentation.
  static DatasetSpec defaults(DatasetName name) {
    DatasetSpec s;
    s.name = name;
    switch (name) {
      case DatasetName::kSvhn: s.train_size = 73200; s.test_size = 26000; break;
      case DatasetName::kGtsrb: s.train_size = 14600; s.test_size = 4800; break;
      case DatasetName::kStl10: s.train_size = 10000; s.test_size = 3000; break;
      case DatasetName::kCifar10: s.train_size = 50000; s.test_size = 10000; break;
      case DatasetName::kSynthetic: s.train_size = 15000; s.test_size = 3000; break;
    }
    return s;
  }

  void validate() const {
    check(train_size >= 0 && test_size >= 0, "dataset sizes must be non-negative");
    check(n_classes > 1, "dataset needs at least two classes");
    check(channels == 3 && height > 0 && width > 0, "images must be 3-channel");
  }

  nlohmann::json to_json() const {
    nlohmann::json j = {{"name", to_string(name)},   {"train_size", train_size},
                        {"test_size", test_size},    {"n_classes", n_classes},
                        {"channels", channels},      {"height", height},
                        {"width", width},            {"seed", seed}};
    if (class_filter) j["class_filter"] = *class_filter;
    return j;
  }

  static DatasetSpec from_json(const nlohmann::json& j) {
    DatasetSpec s;
    try {
      s.name = dataset_from_string(j.at("name").get<std::string>());
      s.train_size = j.at("train_size").get<int>();
      s.test_size = j.at("test_size").get<int>();
      s.n_classes = j.at("n_classes").get<int>();
      s.channels = j.at("channels").get<int>();
      s.height = j.at("height").get<int>();
      s.width = j.at("width").get<int>();
      s.seed = j.at("seed").get<std::uint64_t>();
      if (j.contains("class_filter")) s.class_filter = j.at("class_filter").get<std::vector<int>>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("dataset json: ") + e.what());
    }
    s.validate();
    return s;
  }
};

// One image with its label and a provenance string naming where it came from
// (archive member, record index). Pixels live on the [0, 255] scale.
struct LabeledExample {
  Tensor<float> image;  // (c, h, w)
  int label = 0;
  std::string source_id;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> test;
};

// Deterministic disjoint train/test draw without replacement.
inline std::pair<std::vector<LabeledExample>, std::vector<LabeledExample>> partition(
    const std::vector<LabeledExample>& examples, int train_n, int test_n, std::uint64_t seed) {
  check(train_n >= 0 && test_n >= 0, "partition sizes must be non-negative");
  if (static_cast<std::int64_t>(train_n) + test_n > static_cast<std::int64_t>(examples.size()))
    throw ConfigError("partition needs " + std::to_string(train_n + test_n) + " examples, have " +
                      std::to_string(examples.size()));
  std::vector<std::size_t> idx(examples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(derive_seed(seed, "partition"));
  rng.shuffle(idx);
  std::pair<std::vector<LabeledExample>, std::vector<LabeledExample>> out;
  out.first.reserve(static_cast<std::size_t>(train_n));
  out.second.reserve(static_cast<std::size_t>(test_n));
  for (int i = 0; i < train_n; ++i) out.first.push_back(examples[idx[static_cast<std::size_t>(i)]]);
  for (int i = 0; i < test_n; ++i)
    out.second.push_back(examples[idx[static_cast<std::size_t>(train_n + i)]]);
  return out;
}

// Applies a desk-scale fraction to a full-scale size; any positive full size
// keeps at least one example.
inline int scaled_size(int full, double fraction) {
  check(fraction > 0.0 && fraction <= 1.0, "desk-scale fraction must lie in (0, 1]");
  if (full == 0) return 0;
  return std::max(1, static_cast<int>(std::llround(full * fraction)));
}

// Packs the chosen examples into an (n, c, h, w) batch with parallel labels.
template <typename T>
void fill_batch(const std::vector<LabeledExample>& examples, const std::vector<std::size_t>& which,
                Tensor<T>& batch, std::vector<int>& labels) {
  check(!which.empty(), "batch must contain at least one example");
  const auto& first = examples.at(which[0]).image;
  const int c = first.dim(0), h = first.dim(1), w = first.dim(2);
  const std::vector<int> want{static_cast<int>(which.size()), c, h, w};
  if (batch.shape() != want) batch = Tensor<T>(want);
  labels.resize(which.size());
  const std::int64_t per = static_cast<std::int64_t>(c) * h * w;
  for (std::size_t i = 0; i < which.size(); ++i) {
    const LabeledExample& ex = examples.at(which[i]);
    require_shape(ex.image, {c, h, w}, "batch example");
    const float* src = ex.image.data();
    T* dst = batch.data() + static_cast<std::int64_t>(i) * per;
    for (std::int64_t j = 0; j < per; ++j) dst[j] = static_cast<T>(src[j]);
    labels[i] = ex.label;
  }
}

}  // namespace dpsplit
