#pragma once

#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpsplit/common.hpp"
#include "dpsplit/data/dataset.hpp"
#include "dpsplit/nn/adam.hpp"
#include "dpsplit/nn/loss.hpp"
#include "dpsplit/privacy.hpp"
#include "dpsplit/rng.hpp"
#include "dpsplit/splitnet.hpp"

namespace dpsplit {

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 100;
  int epochs = 1;
  std::uint64_t seed = 0;
  bool noisy = false;
  PrivacyParams noise_params;        // used when noisy
  double plain_loss_weight = 1.0;
  double noisy_loss_weight = 1.0;
  std::string log_path;              // empty disables curve logging

  void validate() const {
    check(learning_rate > 0.0, "learning rate must be positive");
    check(batch_size > 0, "batch size must be positive");
    check(epochs >= 0, "epoch count must be non-negative");
    check(plain_loss_weight >= 0.0 && noisy_loss_weight >= 0.0,
          "loss weights must be non-negative");
    check(plain_loss_weight + noisy_loss_weight > 0.0, "at least one loss weight must be positive");
    if (noisy) noise_params.validate();
  }

  // Published full-scale hyperparameters per dataset; the synthetic corpus
  // uses settings sized for CPU runs. epoch_fraction scales the schedule for
  // desk-scale work (full-scale counts: svhn 40, gtsrb 100, stl10 500,
  // cifar10 100).
  static TrainConfig defaults(DatasetName name, double epoch_fraction = 1.0) {
    check(epoch_fraction > 0.0 && epoch_fraction <= 1.0, "epoch fraction must lie in (0, 1]");
    TrainConfig c;
    switch (name) {
      case DatasetName::kSvhn: c.learning_rate = 1e-5; c.batch_size = 300; c.epochs = 40; break;
      case DatasetName::kGtsrb: c.learning_rate = 2e-6; c.batch_size = 200; c.epochs = 100; break;
      case DatasetName::kStl10: c.learning_rate = 2.7e-6; c.batch_size = 200; c.epochs = 500; break;
      case DatasetName::kCifar10: c.learning_rate = 1e-5; c.batch_size = 100; c.epochs = 100; break;
      case DatasetName::kSynthetic: c.learning_rate = 1e-3; c.batch_size = 100; c.epochs = 40; break;
    }
    c.epochs = std::max(1, static_cast<int>(std::llround(c.epochs * epoch_fraction)));
    return c;
  }

  // epsilon travels as a string because the no-noise sentinel is infinity,
  // which JSON numbers cannot represent.
  nlohmann::json to_json() const {
    return {{"learning_rate", learning_rate},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"seed", seed},
            {"noisy", noisy},
            {"epsilon", format_value(noise_params.epsilon)},
            {"bound", noise_params.bound},
            {"plain_loss_weight", plain_loss_weight},
            {"noisy_loss_weight", noisy_loss_weight}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.noisy = j.value("noisy", c.noisy);
    if (j.contains("epsilon")) {
      const auto& e = j.at("epsilon");
      c.noise_params.epsilon = e.is_string() ? parse_value(e.get<std::string>()) : e.get<double>();
    }
    c.noise_params.bound = j.value("bound", c.noise_params.bound);
    c.plain_loss_weight = j.value("plain_loss_weight", c.plain_loss_weight);
    c.noisy_loss_weight = j.value("noisy_loss_weight", c.noisy_loss_weight);
    c.validate();
    return c;
  }
};

struct AccuracyReport {
  double accuracy = 0.0;  // percentage, mean of per_run
  int n_correct = 0;      // from the last run
  int n_total = 0;
  int runs = 0;
  std::vector<double> per_run;
};

namespace training_detail {

// Clips and noises each example's feature map in place. Clipping uses the
// per-example infinity norm; noise draws come sequentially from `rng`.
template <typename T>
void perturb_batch(Tensor<T>& features, const PrivacyParams& params, Rng& rng) {
  if (!params.enabled()) return;
  const int n = features.dim(0);
  const std::int64_t per = features.numel() / n;
  Tensor<T> one({features.dim(1), features.dim(2), features.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::copy(features.data() + static_cast<std::int64_t>(i) * per,
              features.data() + static_cast<std::int64_t>(i + 1) * per, one.data());
    Tensor<T> released = perturb(one, params, rng);
    std::copy(released.data(), released.data() + per,
              features.data() + static_cast<std::int64_t>(i) * per);
  }
}

template <typename T>
double run_epoch(SplitModel<T>& model, const std::vector<LabeledExample>& train_set,
                 const TrainConfig& config, nn::Adam<T>& opt, int epoch, bool use_noisy_branch) {
  const std::size_t n = train_set.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(derive_seed(config.seed, "order", static_cast<std::uint64_t>(epoch)));
  shuffle_rng.shuffle(order);

  const auto params = model.remote.parameters();
  nn::NetGrads<T> grads = model.remote.make_grads();
  nn::NetCache<T> local_cache, remote_cache;
  Tensor<T> batch;
  Tensor<T> logit_grad;
  std::vector<int> labels;
  std::vector<std::size_t> chunk;

  double loss_sum = 0.0;
  std::int64_t seen = 0;
  int batch_index = 0;
  for (std::size_t at = 0; at < n; at += static_cast<std::size_t>(config.batch_size), ++batch_index) {
    const std::size_t take = std::min(static_cast<std::size_t>(config.batch_size), n - at);
    chunk.assign(order.begin() + static_cast<std::ptrdiff_t>(at),
                 order.begin() + static_cast<std::ptrdiff_t>(at + take));
    fill_batch(train_set, chunk, batch, labels);

    const Tensor<T>& features = model.forward_local(batch, local_cache);
    grads.zero();
    double batch_loss = 0.0;

    const double clean_w = use_noisy_branch ? config.plain_loss_weight : 1.0;
    if (clean_w > 0.0) {
      const Tensor<T>& logits = model.forward_remote(features, remote_cache, /*train=*/true);
      batch_loss += clean_w * nn::softmax_cross_entropy(logits, labels, &logit_grad);
      if (clean_w != 1.0)
        for (std::int64_t i = 0; i < logit_grad.numel(); ++i)
          logit_grad[i] = static_cast<T>(logit_grad[i] * clean_w);
      model.remote.backward(logit_grad, remote_cache, &grads);
      model.remote.commit_norm_stats(remote_cache);
    }
    if (use_noisy_branch && config.noisy_loss_weight > 0.0) {
      Tensor<T> noisy = features;
      Rng noise_rng(derive_seed(config.seed, "batch-noise", static_cast<std::uint64_t>(epoch),
                                static_cast<std::uint64_t>(batch_index)));
      perturb_batch(noisy, config.noise_params, noise_rng);
      const Tensor<T>& logits = model.forward_remote(noisy, remote_cache, /*train=*/true);
      batch_loss += config.noisy_loss_weight * nn::softmax_cross_entropy(logits, labels, &logit_grad);
      if (config.noisy_loss_weight != 1.0)
        for (std::int64_t i = 0; i < logit_grad.numel(); ++i)
          logit_grad[i] = static_cast<T>(logit_grad[i] * config.noisy_loss_weight);
      model.remote.backward(logit_grad, remote_cache, &grads);
      model.remote.commit_norm_stats(remote_cache);
    }

    opt.step(params, nn::Network<T>::grad_pointers(grads));
    check(std::isfinite(batch_loss), "training loss went non-finite");
    loss_sum += batch_loss * static_cast<double>(take);
    seen += static_cast<std::int64_t>(take);
  }
  return seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0;
}

}  // namespace training_detail

// Accuracy of the split pipeline. With privacy given, every test feature map
// is clipped and noised (fresh noise per run) before the remote pass; without
// it the pipeline is deterministic and all runs agree.
template <typename T>
AccuracyReport evaluate(const SplitModel<T>& model, const std::vector<LabeledExample>& test_set,
                        const PrivacyParams* privacy, int runs, std::uint64_t seed) {
  check(runs >= 1, "evaluation needs at least one run");
  check(!test_set.empty(), "evaluation needs a non-empty test set");
  AccuracyReport report;
  report.runs = runs;
  report.n_total = static_cast<int>(test_set.size());

  nn::NetCache<T> local_cache, remote_cache;
  Tensor<T> batch;
  std::vector<int> labels;
  std::vector<std::size_t> chunk;
  const std::size_t bs = 200;

  for (int r = 0; r < runs; ++r) {
    Rng noise_rng(derive_seed(seed, "eval-noise", static_cast<std::uint64_t>(r)));
    int correct = 0;
    for (std::size_t at = 0; at < test_set.size(); at += bs) {
      const std::size_t take = std::min(bs, test_set.size() - at);
      chunk.resize(take);
      std::iota(chunk.begin(), chunk.end(), at);
      fill_batch(test_set, chunk, batch, labels);
      Tensor<T> features = model.forward_local(batch, local_cache);
      if (privacy) training_detail::perturb_batch(features, *privacy, noise_rng);
      const Tensor<T>& logits = model.forward_remote(features, remote_cache, /*train=*/false);
      const std::vector<int> pred = nn::argmax_rows(logits);
      for (std::size_t i = 0; i < take; ++i)
        if (pred[i] == labels[i]) ++correct;
    }
    report.per_run.push_back(100.0 * correct / static_cast<double>(report.n_total));
    report.n_correct = correct;
  }
  report.accuracy =
      std::accumulate(report.per_run.begin(), report.per_run.end(), 0.0) / report.per_run.size();
  return report;
}

namespace training_detail {

template <typename T>
SplitModel<T> train_remote(const SplitModel<T>& model, const std::vector<LabeledExample>& train_set,
                           const TrainConfig& config, bool use_noisy_branch,
                           const std::vector<LabeledExample>* curve_set) {
  config.validate();
  check(!train_set.empty() || config.epochs == 0, "training needs examples");
  SplitModel<T> out = model;  // local layers copied untouched; only remote changes
  nn::Adam<T> opt(config.learning_rate);
  std::ofstream log;
  if (!config.log_path.empty()) {
    log.open(config.log_path, std::ios::app);
    if (!log) throw IoError("cannot open training log: " + config.log_path);
  }
  for (int e = 0; e < config.epochs; ++e) {
    const double loss = run_epoch(out, train_set, config, opt, e, use_noisy_branch);
    if (log.is_open()) {
      log << e << "\t" << loss;
      if (curve_set && !curve_set->empty()) {
        const AccuracyReport val = evaluate(out, *curve_set, nullptr, 1, config.seed);
        log << "\t" << val.accuracy;
      }
      log << "\n";
      log.flush();
    }
  }
  return out;
}

}  // namespace training_detail

// Trains the remote classifier on clean feature maps with plain
// cross-entropy. The local extractor is copied through frozen.
template <typename T>
SplitModel<T> train_baseline(const SplitModel<T>& model, const std::vector<LabeledExample>& train_set,
                             const TrainConfig& config,
                             const std::vector<LabeledExample>* curve_set = nullptr) {
  check(!config.noisy, "baseline training must have noisy = false");
  return training_detail::train_remote(model, train_set, config, /*use_noisy_branch=*/false,
                                       curve_set);
}

// Fine-tunes the remote classifier on a weighted sum of the clean-feature
// loss and the perturbed-feature loss, drawing fresh noise every batch.
// Typically started from the trained baseline. A zero noisy weight skips the
// perturbed branch entirely, so with unit plain weight the trajectory
// matches train_baseline exactly.
template <typename T>
SplitModel<T> noisy_finetune(const SplitModel<T>& model, const std::vector<LabeledExample>& train_set,
                             const TrainConfig& config,
                             const std::vector<LabeledExample>* curve_set = nullptr) {
  check(config.noisy, "noisy fine-tuning must have noisy = true");
  return training_detail::train_remote(model, train_set, config, /*use_noisy_branch=*/true,
                                       curve_set);
}

// Local feature maps of `count` seeded-random training examples, the input
// to clipping-bound estimation.
template <typename T>
std::vector<Tensor<T>> sample_local_features(const SplitModel<T>& model,
                                             const std::vector<LabeledExample>& train_set,
                                             int count, std::uint64_t seed) {
  check(count > 0, "need a positive sample count");
  check(train_set.size() >= static_cast<std::size_t>(count),
        "not enough training examples for bound estimation");
  std::vector<std::size_t> idx(train_set.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "bound-sample"));
  rng.shuffle(idx);
  idx.resize(static_cast<std::size_t>(count));

  Tensor<T> batch;
  std::vector<int> labels;
  fill_batch(train_set, idx, batch, labels);
  nn::NetCache<T> cache;
  const Tensor<T>& features = model.forward_local(batch, cache);
  const auto fs = model.feature_shape();
  const std::int64_t per = static_cast<std::int64_t>(fs[0]) * fs[1] * fs[2];
  std::vector<Tensor<T>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Tensor<T> one({fs[0], fs[1], fs[2]});
    std::copy(features.data() + static_cast<std::int64_t>(i) * per,
              features.data() + static_cast<std::int64_t>(i + 1) * per, one.data());
    out.push_back(std::move(one));
  }
  return out;
}

// Full-network training used to pretrain the backbone that donates the
// frozen local layers. All parameters update; plain cross-entropy.
template <typename T>
void train_backbone(nn::Network<T>& net, const std::vector<LabeledExample>& train_set,
                    const TrainConfig& config) {
  config.validate();
  nn::Adam<T> opt(config.learning_rate);
  const auto params = net.parameters();
  nn::NetGrads<T> grads = net.make_grads();
  nn::NetCache<T> cache;
  Tensor<T> batch;
  Tensor<T> logit_grad;
  std::vector<int> labels;
  std::vector<std::size_t> chunk;

  const std::size_t n = train_set.size();
  for (int e = 0; e < config.epochs; ++e) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(config.seed, "order", static_cast<std::uint64_t>(e)));
    shuffle_rng.shuffle(order);
    for (std::size_t at = 0; at < n; at += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t take = std::min(static_cast<std::size_t>(config.batch_size), n - at);
      chunk.assign(order.begin() + static_cast<std::ptrdiff_t>(at),
                   order.begin() + static_cast<std::ptrdiff_t>(at + take));
      fill_batch(train_set, chunk, batch, labels);
      const Tensor<T>& logits = net.forward(batch, cache, /*train=*/true);
      grads.zero();
      const double loss = nn::softmax_cross_entropy(logits, labels, &logit_grad);
      check(std::isfinite(loss), "pretraining loss went non-finite");
      net.backward(logit_grad, cache, &grads);
      net.commit_norm_stats(cache);
      opt.step(params, nn::Network<T>::grad_pointers(grads));
    }
  }
}

}  // namespace dpsplit
