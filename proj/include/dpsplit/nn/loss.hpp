#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dpsplit/common.hpp"
#include "dpsplit/tensor.hpp"

namespace dpsplit::nn {

// Mean softmax cross-entropy over a batch of logits (n, k, 1, 1) against
// integer labels in [0, k). The gradient is (softmax - onehot) / n, i.e. the
// gradient of the mean-reduced loss. Log-sum-exp is stabilized by the row
// maximum.
template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels,
                             Tensor<T>* grad = nullptr) {
  check(logits.rank() == 4 && logits.dim(2) == 1 && logits.dim(3) == 1,
        "logits must be (n, k, 1, 1)");
  const int n = logits.dim(0), k = logits.dim(1);
  check(static_cast<int>(labels.size()) == n, "label count must match batch size");
  if (grad && grad->shape() != logits.shape()) *grad = Tensor<T>(logits.shape());

  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const T* row = logits.data() + static_cast<std::int64_t>(i) * k;
    const int y = labels[static_cast<std::size_t>(i)];
    check(y >= 0 && y < k, "label out of range");
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    const double logz = std::log(z) + mx;
    total += logz - static_cast<double>(row[y]);
    if (grad) {
      T* grow = grad->data() + static_cast<std::int64_t>(i) * k;
      for (int j = 0; j < k; ++j) {
        const double p = std::exp(static_cast<double>(row[j]) - logz);
        grow[j] = static_cast<T>((p - (j == y ? 1.0 : 0.0)) / n);
      }
    }
  }
  return total / n;
}

// Index of the largest logit per row; ties resolve to the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  check(logits.rank() == 4 && logits.dim(2) == 1 && logits.dim(3) == 1,
        "logits must be (n, k, 1, 1)");
  const int n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const T* row = logits.data() + static_cast<std::int64_t>(i) * k;
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

}  // namespace dpsplit::nn
