#pragma once

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpsplit/common.hpp"
#include "dpsplit/nn/layer.hpp"
#include "dpsplit/nn/network.hpp"
#include "dpsplit/rng.hpp"
#include "dpsplit/tensor.hpp"

namespace dpsplit {

// Shape of the convolutional classifier that gets split between the local
// device and the remote host. A "block" is conv(k x k, stride 1, same pad)
// -> batchnorm -> relu, optionally followed by 2x2 max pooling.
struct ArchitectureSpec {
  std::vector<int> conv_channels{64, 64, 128, 128, 256, 256};
  int kernel = 3;
  std::vector<int> pool_after{2, 4, 6};  // 1-based block indices
  int in_channels = 3;
  int in_height = 32;
  int in_width = 32;
  int num_classes = 10;
  double input_scale = 1.0 / 255.0;

  int blocks() const { return static_cast<int>(conv_channels.size()); }

  bool pools(int block) const {
    return std::find(pool_after.begin(), pool_after.end(), block) != pool_after.end();
  }

  void validate() const {
    check(!conv_channels.empty(), "architecture needs at least one conv block");
    for (int c : conv_channels) check(c > 0, "conv channel counts must be positive");
    check(kernel > 0 && kernel % 2 == 1, "kernel must be odd for same padding");
    for (int b : pool_after)
      check(b >= 1 && b <= blocks(), "pool_after index out of range");
    check(in_channels > 0 && in_height > 0 && in_width > 0, "bad input shape");
    check(num_classes > 1, "need at least two classes");
    check(input_scale > 0.0, "input scale must be positive");
  }

  nlohmann::json to_json() const {
    return {{"conv_channels", conv_channels}, {"kernel", kernel},     {"pool_after", pool_after},
            {"in_channels", in_channels},     {"in_height", in_height}, {"in_width", in_width},
            {"num_classes", num_classes},     {"input_scale", input_scale}};
  }

  static ArchitectureSpec from_json(const nlohmann::json& j) {
    ArchitectureSpec s;
    try {
      s.conv_channels = j.at("conv_channels").get<std::vector<int>>();
      s.kernel = j.at("kernel").get<int>();
      s.pool_after = j.at("pool_after").get<std::vector<int>>();
      s.in_channels = j.at("in_channels").get<int>();
      s.in_height = j.at("in_height").get<int>();
      s.in_width = j.at("in_width").get<int>();
      s.num_classes = j.at("num_classes").get<int>();
      s.input_scale = j.at("input_scale").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("architecture json: ") + e.what());
    }
    s.validate();
    return s;
  }
};

inline ArchitectureSpec default_architecture() { return {}; }

// Builds the full (unsplit) classifier with `classes` output units. Weights
// are He-initialized from `seed`; the same spec and seed always produce the
// same parameters.
template <typename T>
nn::Network<T> build_network(const ArchitectureSpec& spec, int classes, std::uint64_t seed) {
  spec.validate();
  check(classes > 1, "need at least two classes");
  nn::Network<T> net;
  net.set_input_shape({spec.in_channels, spec.in_height, spec.in_width});
  net.add(std::make_unique<nn::InputScale<T>>(static_cast<T>(spec.input_scale)));
  Rng rng(derive_seed(seed, "model-init"));
  int in_c = spec.in_channels;
  for (int b = 1; b <= spec.blocks(); ++b) {
    const int out_c = spec.conv_channels[static_cast<std::size_t>(b - 1)];
    auto conv = std::make_unique<nn::Conv2d<T>>(in_c, out_c, spec.kernel);
    conv->init_he(rng);
    net.add(std::move(conv));
    net.add(std::make_unique<nn::BatchNorm2d<T>>(out_c));
    net.add(std::make_unique<nn::ReLU<T>>());
    if (spec.pools(b)) net.add(std::make_unique<nn::MaxPool2<T>>());
    in_c = out_c;
  }
  net.add(std::make_unique<nn::Flatten<T>>());
  const nn::Shape3 flat = net.output_shape();
  auto head = std::make_unique<nn::Linear<T>>(flat[0], classes);
  head->init_he(rng);
  net.add(std::move(head));
  return net;
}

// Number of layers (InputScale included) that belong to the local part when
// splitting after conv block `split_case`.
inline std::size_t local_layer_count(const ArchitectureSpec& spec, int split_case) {
  check(split_case >= 1 && split_case <= spec.blocks(), "split case out of range");
  std::size_t n = 1;  // InputScale
  for (int b = 1; b <= split_case; ++b) n += spec.pools(b) ? 4u : 3u;
  return n;
}

// The split model: a frozen local feature extractor and a trainable remote
// classifier. Feeding forward_local's output into forward_remote reproduces
// the full network exactly.
template <typename T>
struct SplitModel {
  ArchitectureSpec spec;
  int split_case = 1;
  nn::Network<T> local;
  nn::Network<T> remote;

  nn::Shape3 feature_shape() const { return local.output_shape(); }

  const Tensor<T>& forward_local(const Tensor<T>& x, nn::NetCache<T>& cache) const {
    return local.forward(x, cache, /*train=*/false);
  }

  const Tensor<T>& forward_remote(const Tensor<T>& fm, nn::NetCache<T>& cache, bool train) const {
    return remote.forward(fm, cache, train);
  }

  // End-to-end (no perturbation) pass, eval mode on both halves.
  Tensor<T> forward(const Tensor<T>& x) const {
    nn::NetCache<T> c1, c2;
    forward_local(x, c1);
    return forward_remote(c1.acts.back(), c2, /*train=*/false);
  }
};

// Assembles a split model for `split_case`. The local part is cloned from
// the leading layers of `backbone` (typically pretrained on a disjoint
// surrogate task and kept frozen); the remote part is built fresh with
// He-initialized weights derived from `seed`, with a spec.num_classes head.
// Backbones sharing the same weights yield byte-identical local parts across
// cases up to the shallower prefix.
template <typename T>
SplitModel<T> make_split_model(const nn::Network<T>& backbone, const ArchitectureSpec& spec,
                               int split_case, std::uint64_t seed) {
  spec.validate();
  const std::size_t cut = local_layer_count(spec, split_case);
  check(backbone.size() >= cut, "backbone shallower than requested split");

  SplitModel<T> m;
  m.spec = spec;
  m.split_case = split_case;
  m.local.set_input_shape({spec.in_channels, spec.in_height, spec.in_width});
  for (std::size_t i = 0; i < cut; ++i) m.local.add(backbone.layer(i).clone());

  nn::Network<T> fresh = build_network<T>(spec, spec.num_classes, derive_seed(seed, "remote-init"));
  m.remote.set_input_shape(m.local.output_shape());
  for (std::size_t i = cut; i < fresh.size(); ++i) m.remote.add(fresh.layer(i).clone());
  return m;
}

}  // namespace dpsplit
