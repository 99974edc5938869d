#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpsplit/common.hpp"
#include "dpsplit/metrics.hpp"
#include "dpsplit/privacy.hpp"
#include "dpsplit/rng.hpp"
#include "dpsplit/splitnet.hpp"
#include "dpsplit/tensor.hpp"

namespace dpsplit {

enum class AttackInit { kUniformRandom, kZeros, kConstantHalf };

inline std::string to_string(AttackInit mode) {
  switch (mode) {
    case AttackInit::kUniformRandom: return "uniform_random";
    case AttackInit::kZeros: return "zeros";
    case AttackInit::kConstantHalf: return "constant_half";
  }
  throw ConfigError("unknown attack init mode");
}

inline AttackInit attack_init_from_string(const std::string& s) {
  if (s == "uniform_random") return AttackInit::kUniformRandom;
  if (s == "zeros") return AttackInit::kZeros;
  if (s == "constant_half") return AttackInit::kConstantHalf;
  throw ConfigError("unknown attack init mode: " + s);
}

struct AttackConfig {
  int max_iters = 5000;
  double step_size = 0.01;
  double tv_weight = 0.02;
  AttackInit init_mode = AttackInit::kUniformRandom;
  std::uint64_t seed = 0;
  bool project = true;
  double pixel_low = 0.0;
  double pixel_high = 255.0;

  void validate() const {
    check(max_iters >= 0, "attack iteration count must be non-negative");
    check(step_size > 0.0 && std::isfinite(step_size), "attack step size must be positive");
    check(tv_weight >= 0.0 && std::isfinite(tv_weight), "tv weight must be non-negative");
    check(pixel_low < pixel_high, "pixel range must be non-empty");
  }

  nlohmann::json to_json() const {
    return {{"max_iters", max_iters},
            {"step_size", step_size},
            {"tv_weight", tv_weight},
            {"init_mode", to_string(init_mode)},
            {"seed", seed},
            {"project", project},
            {"pixel_low", pixel_low},
            {"pixel_high", pixel_high}};
  }

  static AttackConfig from_json(const nlohmann::json& j) {
    AttackConfig c;
    c.max_iters = j.value("max_iters", c.max_iters);
    c.step_size = j.value("step_size", c.step_size);
    c.tv_weight = j.value("tv_weight", c.tv_weight);
    if (j.contains("init_mode")) c.init_mode = attack_init_from_string(j.at("init_mode"));
    c.seed = j.value("seed", c.seed);
    c.project = j.value("project", c.project);
    c.pixel_low = j.value("pixel_low", c.pixel_low);
    c.pixel_high = j.value("pixel_high", c.pixel_high);
    c.validate();
    return c;
  }
};

template <typename T>
struct ReconstructionResult {
  Tensor<T> reconstructed;
  double final_loss = 0.0;
  std::vector<double> loss_trace;  // loss at x^(0) .. x^(T-1)
  int iterations_run = 0;
};

// Anisotropic total variation: sum of absolute forward differences along
// height and width within each channel.
template <typename T>
double total_variation_raw(const T* x, int c, int h, int w) {
  double tv = 0.0;
  for (int ch = 0; ch < c; ++ch) {
    const T* p = x + static_cast<std::int64_t>(ch) * h * w;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double v = p[static_cast<std::int64_t>(i) * w + j];
        if (i + 1 < h) tv += std::abs(p[static_cast<std::int64_t>(i + 1) * w + j] - v);
        if (j + 1 < w) tv += std::abs(p[static_cast<std::int64_t>(i) * w + j + 1] - v);
      }
  }
  return tv;
}

template <typename T>
double total_variation(const Tensor<T>& x) {
  check(x.rank() == 3, "total variation expects (c, h, w)");
  return total_variation_raw(x.data(), x.dim(0), x.dim(1), x.dim(2));
}

// Subgradient of total_variation accumulated into grad (scaled by weight).
// Zero differences contribute zero (sign(0) = 0), keeping descent
// deterministic at kinks.
template <typename T>
void add_tv_subgradient(const T* x, int c, int h, int w, double weight, T* grad) {
  const auto sgn = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
  for (int ch = 0; ch < c; ++ch) {
    const T* p = x + static_cast<std::int64_t>(ch) * h * w;
    T* g = grad + static_cast<std::int64_t>(ch) * h * w;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const std::int64_t at = static_cast<std::int64_t>(i) * w + j;
        if (i + 1 < h) {
          const double s = sgn(static_cast<double>(p[at + w]) - static_cast<double>(p[at]));
          g[at + w] += static_cast<T>(weight * s);
          g[at] -= static_cast<T>(weight * s);
        }
        if (j + 1 < w) {
          const double s = sgn(static_cast<double>(p[at + 1]) - static_cast<double>(p[at]));
          g[at + 1] += static_cast<T>(weight * s);
          g[at] -= static_cast<T>(weight * s);
        }
      }
  }
}

// Attack objective for one candidate image: squared Euclidean distance
// between the local features of x and the intercepted target, plus weighted
// total variation.
template <typename T>
double attack_loss(const SplitModel<T>& model, const Tensor<T>& x, const Tensor<T>& target,
                   double tv_weight) {
  check(x.rank() == 3, "attack candidate must be (c, h, w)");
  Tensor<T> batch({1, x.dim(0), x.dim(1), x.dim(2)});
  std::copy(x.data(), x.data() + x.numel(), batch.data());
  nn::NetCache<T> cache;
  const Tensor<T>& fm = model.forward_local(batch, cache);
  check(fm.numel() == target.numel(), "target does not match the local feature shape");
  double dist = 0.0;
  for (std::int64_t i = 0; i < fm.numel(); ++i) {
    const double d = static_cast<double>(fm[i]) - static_cast<double>(target[i]);
    dist += d * d;
  }
  return dist + tv_weight * total_variation(x);
}

namespace detail {

template <typename T>
struct BatchAttackOut {
  Tensor<T> images;                          // (n, c, h, w) final iterates
  std::vector<double> final_losses;          // per image
  std::vector<std::vector<double>> traces;   // per image, length iterations
  std::vector<int> failed_at;                // -1, or iteration where values went non-finite
};

// Batched plain gradient descent. Images are independent: the local part is
// evaluated in eval mode, so there is no cross-image coupling, and the loop
// matches per-image descent exactly. An image whose loss or gradient turns
// non-finite is frozen at its last finite iterate and flagged.
template <typename T>
BatchAttackOut<T> run_attack(const SplitModel<T>& model, const Tensor<T>& targets,
                             const AttackConfig& config) {
  config.validate();
  check(targets.rank() == 4, "targets must be (n, cf, hf, wf)");
  const auto in = model.local.input_shape();
  const int n = targets.dim(0), c = in[0], h = in[1], w = in[2];
  const std::int64_t per = static_cast<std::int64_t>(c) * h * w;

  BatchAttackOut<T> out;
  out.images = Tensor<T>({n, c, h, w});
  out.final_losses.assign(static_cast<std::size_t>(n), 0.0);
  out.traces.assign(static_cast<std::size_t>(n), {});
  out.failed_at.assign(static_cast<std::size_t>(n), -1);

  for (int i = 0; i < n; ++i) {
    T* img = out.images.data() + static_cast<std::int64_t>(i) * per;
    switch (config.init_mode) {
      case AttackInit::kUniformRandom: {
        Rng rng(derive_seed(config.seed, "attack-init", static_cast<std::uint64_t>(i)));
        for (std::int64_t j = 0; j < per; ++j)
          img[j] = static_cast<T>(rng.uniform(config.pixel_low, config.pixel_high));
        break;
      }
      case AttackInit::kZeros:
        std::fill(img, img + per, T{0});
        break;
      case AttackInit::kConstantHalf:
        std::fill(img, img + per, static_cast<T>(0.5 * (config.pixel_low + config.pixel_high)));
        break;
    }
    out.traces[static_cast<std::size_t>(i)].reserve(static_cast<std::size_t>(config.max_iters));
  }

  nn::NetCache<T> cache;
  Tensor<T> gy;
  Tensor<T> gx;
  Tensor<T> frozen;  // last finite iterate of failed images
  std::vector<double> losses(static_cast<std::size_t>(n), 0.0);

  auto eval_losses = [&](bool want_grad) {
    const Tensor<T>& fm = model.local.forward(out.images, cache, /*train=*/false);
    const std::int64_t fper = fm.numel() / n;
    check(fper == targets.numel() / n, "target does not match the local feature shape");
    if (want_grad && gy.shape() != fm.shape()) gy = Tensor<T>(fm.shape());
    for (int i = 0; i < n; ++i) {
      const T* pf = fm.data() + static_cast<std::int64_t>(i) * fper;
      const T* pt = targets.data() + static_cast<std::int64_t>(i) * fper;
      double dist = 0.0;
      for (std::int64_t j = 0; j < fper; ++j) {
        const double d = static_cast<double>(pf[j]) - static_cast<double>(pt[j]);
        dist += d * d;
        if (want_grad) gy.data()[static_cast<std::int64_t>(i) * fper + j] = static_cast<T>(2.0 * d);
      }
      losses[static_cast<std::size_t>(i)] =
          dist + config.tv_weight *
                     total_variation_raw(out.images.data() + static_cast<std::int64_t>(i) * per, c, h, w);
    }
    if (want_grad) {
      model.local.backward(gy, cache, /*grads=*/nullptr, &gx);
      for (int i = 0; i < n; ++i)
        add_tv_subgradient(out.images.data() + static_cast<std::int64_t>(i) * per, c, h, w,
                           config.tv_weight, gx.data() + static_cast<std::int64_t>(i) * per);
    }
  };

  bool any_frozen = false;
  for (int t = 0; t < config.max_iters; ++t) {
    eval_losses(/*want_grad=*/true);
    for (int i = 0; i < n; ++i) {
      if (out.failed_at[static_cast<std::size_t>(i)] >= 0) continue;
      bool finite = std::isfinite(losses[static_cast<std::size_t>(i)]);
      const T* pg = gx.data() + static_cast<std::int64_t>(i) * per;
      for (std::int64_t j = 0; finite && j < per; ++j)
        if (!std::isfinite(static_cast<double>(pg[j]))) finite = false;
      if (!finite) {
        out.failed_at[static_cast<std::size_t>(i)] = t;
        if (!any_frozen) {
          frozen = out.images;
          any_frozen = true;
        } else {
          std::copy(out.images.data() + static_cast<std::int64_t>(i) * per,
                    out.images.data() + static_cast<std::int64_t>(i + 1) * per,
                    frozen.data() + static_cast<std::int64_t>(i) * per);
        }
        continue;
      }
      out.traces[static_cast<std::size_t>(i)].push_back(losses[static_cast<std::size_t>(i)]);
      T* img = out.images.data() + static_cast<std::int64_t>(i) * per;
      for (std::int64_t j = 0; j < per; ++j) {
        double v = static_cast<double>(img[j]) - config.step_size * static_cast<double>(pg[j]);
        if (config.project) v = std::clamp(v, config.pixel_low, config.pixel_high);
        img[j] = static_cast<T>(v);
      }
    }
  }

  eval_losses(/*want_grad=*/false);
  for (int i = 0; i < n; ++i) {
    if (out.failed_at[static_cast<std::size_t>(i)] >= 0) {
      std::copy(frozen.data() + static_cast<std::int64_t>(i) * per,
                frozen.data() + static_cast<std::int64_t>(i + 1) * per,
                out.images.data() + static_cast<std::int64_t>(i) * per);
      out.final_losses[static_cast<std::size_t>(i)] =
          out.traces[static_cast<std::size_t>(i)].empty()
              ? std::numeric_limits<double>::quiet_NaN()
              : out.traces[static_cast<std::size_t>(i)].back();
    } else {
      out.final_losses[static_cast<std::size_t>(i)] = losses[static_cast<std::size_t>(i)];
    }
  }
  return out;
}

}  // namespace detail

// Runs exactly config.max_iters plain gradient-descent steps from the
// configured initialization and returns the last iterate. The loss trace
// holds the objective at each pre-step iterate. Non-finite values abort with
// the iteration index.
template <typename T>
ReconstructionResult<T> reconstruct(const SplitModel<T>& model, const Tensor<T>& target,
                                    const AttackConfig& config) {
  check(target.rank() == 3, "target must be (cf, hf, wf)");
  Tensor<T> batch({1, target.dim(0), target.dim(1), target.dim(2)});
  std::copy(target.data(), target.data() + target.numel(), batch.data());
  auto out = detail::run_attack(model, batch, config);
  if (out.failed_at[0] >= 0)
    throw NumericError("attack diverged to non-finite values at iteration " +
                       std::to_string(out.failed_at[0]));
  ReconstructionResult<T> r;
  const auto in = model.local.input_shape();
  r.reconstructed = Tensor<T>({in[0], in[1], in[2]});
  std::copy(out.images.data(), out.images.data() + r.reconstructed.numel(), r.reconstructed.data());
  r.final_loss = out.final_losses[0];
  r.loss_trace = std::move(out.traces[0]);
  r.iterations_run = config.max_iters;
  return r;
}

template <typename T>
struct AttackBatchItem {
  Tensor<T> original;
  Tensor<T> reconstructed;
  MetricsRecord metrics;
  bool ok = true;
  std::string error;
};

// Attacks each image's intercepted feature map and scores the result against
// the original. With privacy given, the target is the clipped-and-perturbed
// feature map, i.e. exactly what the remote host would receive; without it
// the raw features are targeted. Per-image noise and initialization are
// derived from config.seed and the image index, and a diverging image is
// flagged rather than aborting the batch.
template <typename T>
std::vector<AttackBatchItem<T>> attack_batch(const SplitModel<T>& model,
                                             const std::vector<Tensor<T>>& images,
                                             const PrivacyParams* privacy,
                                             const AttackConfig& config) {
  const auto in = model.local.input_shape();
  const int n = static_cast<int>(images.size());
  std::vector<AttackBatchItem<T>> items(static_cast<std::size_t>(n));
  if (n == 0) return items;

  Tensor<T> batch({n, in[0], in[1], in[2]});
  for (int i = 0; i < n; ++i) {
    require_shape(images[static_cast<std::size_t>(i)], {in[0], in[1], in[2]}, "attack image");
    std::copy(images[static_cast<std::size_t>(i)].data(),
              images[static_cast<std::size_t>(i)].data() + images[static_cast<std::size_t>(i)].numel(),
              batch.data() + static_cast<std::int64_t>(i) * in[0] * in[1] * in[2]);
  }

  nn::NetCache<T> cache;
  Tensor<T> targets = model.forward_local(batch, cache);
  const auto fs = model.feature_shape();
  const std::int64_t fper = static_cast<std::int64_t>(fs[0]) * fs[1] * fs[2];
  if (privacy) {
    for (int i = 0; i < n; ++i) {
      Tensor<T> one({fs[0], fs[1], fs[2]});
      std::copy(targets.data() + static_cast<std::int64_t>(i) * fper,
                targets.data() + static_cast<std::int64_t>(i + 1) * fper, one.data());
      Rng rng(derive_seed(config.seed, "target-noise", static_cast<std::uint64_t>(i)));
      Tensor<T> released = perturb(one, *privacy, rng);
      std::copy(released.data(), released.data() + fper,
                targets.data() + static_cast<std::int64_t>(i) * fper);
    }
  }

  auto out = detail::run_attack(model, targets, config);
  const std::int64_t per = static_cast<std::int64_t>(in[0]) * in[1] * in[2];
  for (int i = 0; i < n; ++i) {
    auto& item = items[static_cast<std::size_t>(i)];
    item.original = images[static_cast<std::size_t>(i)];
    item.reconstructed = Tensor<T>({in[0], in[1], in[2]});
    std::copy(out.images.data() + static_cast<std::int64_t>(i) * per,
              out.images.data() + static_cast<std::int64_t>(i + 1) * per,
              item.reconstructed.data());
    if (out.failed_at[static_cast<std::size_t>(i)] >= 0) {
      item.ok = false;
      item.error = "diverged to non-finite values at iteration " +
                   std::to_string(out.failed_at[static_cast<std::size_t>(i)]);
      continue;
    }
    item.metrics = compute_metrics(item.original, item.reconstructed);
  }
  return items;
}

}  // namespace dpsplit
