#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dpsplit/common.hpp"
#include "dpsplit/rng.hpp"
#include "dpsplit/tensor.hpp"

namespace dpsplit {

// Laplace mechanism parameters for feature-map release. The clipping bound B
// caps the infinity norm of the released feature map, so one input can move
// any coordinate by at most 2B; that makes 2B the sensitivity and 2B/epsilon
// the noise scale. epsilon = +inf is the sentinel for the unprotected
// baseline: perturb() becomes the identity.
struct PrivacyParams {
  double epsilon = std::numeric_limits<double>::infinity();
  double bound = 1.0;

  bool enabled() const { return std::isfinite(epsilon); }
  double sensitivity() const { return 2.0 * bound; }
  double noise_scale() const { return enabled() ? sensitivity() / epsilon : 0.0; }

  void validate() const {
    check(epsilon > 0.0, "epsilon must be positive");
    check(bound > 0.0 && std::isfinite(bound), "clipping bound must be positive and finite");
  }
};

struct BoundEstimate {
  double bound = 0.0;
  int sample_count = 0;
  std::vector<double> norms;  // per-sample infinity norms, ascending
};

// Median of the per-example feature-map infinity norms. An even count takes
// the mean of the two central order statistics.
template <typename T>
BoundEstimate estimate_bound(const std::vector<Tensor<T>>& feature_maps) {
  check(!feature_maps.empty(), "bound estimation needs at least one feature map");
  BoundEstimate est;
  est.norms.reserve(feature_maps.size());
  for (const auto& fm : feature_maps) {
    const double n = fm.infinity_norm();
    check(std::isfinite(n), "non-finite feature map during bound estimation");
    est.norms.push_back(n);
  }
  std::sort(est.norms.begin(), est.norms.end());
  est.sample_count = static_cast<int>(est.norms.size());
  const std::size_t m = est.norms.size();
  est.bound = (m % 2 == 1) ? est.norms[m / 2] : 0.5 * (est.norms[m / 2 - 1] + est.norms[m / 2]);
  check(est.bound > 0.0, "estimated bound is not positive; features look degenerate");
  return est;
}

// Batched form: features is (n, c, h, w), one norm per leading index.
template <typename T>
BoundEstimate estimate_bound_batch(const Tensor<T>& features) {
  check(features.rank() == 4, "batched bound estimation expects rank 4");
  const int n = features.dim(0);
  const std::int64_t per = features.numel() / n;
  std::vector<Tensor<T>> maps;
  maps.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tensor<T> one({features.dim(1), features.dim(2), features.dim(3)});
    std::copy(features.data() + static_cast<std::int64_t>(i) * per,
              features.data() + static_cast<std::int64_t>(i + 1) * per, one.data());
    maps.push_back(std::move(one));
  }
  return estimate_bound(maps);
}

// Scales the tensor so its infinity norm is at most `bound` via the factor
// 1 / max(1, ||x||_inf / bound). Inputs already inside the bound are returned
// untouched, which makes clipping bit-exactly idempotent. Rounding in the
// scaled branch can leave the norm a few ulp above the bound, so the factor
// is reapplied until the bound holds.
template <typename T>
Tensor<T> clip(const Tensor<T>& x, double bound) {
  check(bound > 0.0 && std::isfinite(bound), "clipping bound must be positive and finite");
  const double d = x.infinity_norm();
  check(std::isfinite(d), "cannot clip a non-finite tensor");
  if (d <= bound) return x;
  Tensor<T> out = x;
  double cur = d;
  while (cur > bound) {
    const T f = static_cast<T>(bound / cur);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] * f;
    cur = out.infinity_norm();
  }
  return out;
}

// Element-wise Laplace noise with the given scale. scale == 0 yields zeros.
template <typename T>
Tensor<T> laplace_noise(const std::vector<int>& shape, double scale, Rng& rng) {
  check(scale >= 0.0 && std::isfinite(scale), "noise scale must be finite and non-negative");
  Tensor<T> out(shape);
  if (scale == 0.0) {
    out.fill(T{0});
    return out;
  }
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(rng.laplace(scale));
  return out;
}

// The release mechanism: clip to the bound, then add Laplace(2B/epsilon)
// noise element-wise. With epsilon = +inf the input passes through unchanged.
template <typename T>
Tensor<T> perturb(const Tensor<T>& x, const PrivacyParams& params, Rng& rng) {
  if (!params.enabled()) return x;
  params.validate();
  Tensor<T> out = clip(x, params.bound);
  const double scale = params.noise_scale();
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = static_cast<T>(out[i] + static_cast<T>(rng.laplace(scale)));
  return out;
}

// Zeroes exactly round(rate * numel) distinct elements, chosen uniformly via
// a partial Fisher-Yates pass over the index range. Returns how many were
// zeroed.
template <typename T>
std::int64_t nullify(Tensor<T>& x, double rate, Rng& rng) {
  check(rate >= 0.0 && rate <= 1.0, "nullification rate must lie in [0, 1]");
  const std::int64_t n = x.numel();
  const std::int64_t k = static_cast<std::int64_t>(std::llround(rate * static_cast<double>(n)));
  if (k == 0) return 0;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (std::int64_t i = 0; i < k; ++i) {
    const std::uint64_t j = i + rng.uniform_index(static_cast<std::uint64_t>(n - i));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    x[idx[static_cast<std::size_t>(i)]] = T{0};
  }
  return k;
}

// ---------------------------------------------------------------------------
// Published clipping bounds for the real datasets, used to cross-check local
// estimates. File format: '#' comments, then `dataset<TAB>case<TAB>bound`
// lines. Bounds depend on the pretrained local weights, so locally estimated
// values are expected to differ; the file records the reference operating
// points.
using BoundTable = std::map<std::pair<std::string, int>, double>;

inline BoundTable load_reference_bounds(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open reference bounds file: " + path);
  BoundTable table;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::string dataset;
    int split_case = 0;
    double bound = 0.0;
    if (!(ss >> dataset)) continue;
    if (!(ss >> split_case >> bound))
      throw InputError("reference bounds line " + std::to_string(lineno) + " is malformed");
    std::string extra;
    if (ss >> extra)
      throw InputError("reference bounds line " + std::to_string(lineno) + " has trailing fields");
    if (bound <= 0.0)
      throw InputError("reference bounds line " + std::to_string(lineno) + " has a non-positive bound");
    const auto key = std::make_pair(dataset, split_case);
    if (!table.emplace(key, bound).second)
      throw InputError("reference bounds line " + std::to_string(lineno) + " repeats an entry");
  }
  return table;
}

}  // namespace dpsplit
