#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "dpsplit/common.hpp"
#include "dpsplit/nn/layer.hpp"
#include "dpsplit/tensor.hpp"

namespace dpsplit::nn {

// Activations and per-layer state for one forward pass through a Network.
// acts[0] is the network input, acts[i+1] the output of layer i.
template <typename T>
struct NetCache {
  std::vector<Tensor<T>> acts;
  std::vector<LayerCache<T>> layers;
  bool train = false;
};

// Parameter gradients aligned with Network layer/param order.
template <typename T>
struct NetGrads {
  std::vector<LayerGrads<T>> layers;

  void zero() {
    for (auto& lg : layers)
      for (auto& t : lg.g) t.fill(T{0});
  }
};

// A plain sequential stack. Layers are owned; forward is const so one model
// can serve concurrent passes, each with its own NetCache.
template <typename T>
class Network {
 public:
  Network() = default;

  Network(const Network& other) : in_shape_(other.in_shape_) {
    layers_.reserve(other.layers_.size());
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  Network& operator=(const Network& other) {
    if (this != &other) {
      Network tmp(other);
      *this = std::move(tmp);
    }
    return *this;
  }
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  void set_input_shape(const Shape3& s) { in_shape_ = s; }
  const Shape3& input_shape() const { return in_shape_; }

  void add(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }

  std::size_t size() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }

  Shape3 output_shape() const {
    Shape3 s = in_shape_;
    for (const auto& l : layers_) s = l->out_shape(s);
    return s;
  }

  // x is (n, c, h, w) matching input_shape. Returns the final activation;
  // the cache keeps every intermediate for backward.
  const Tensor<T>& forward(const Tensor<T>& x, NetCache<T>& cache, bool train = false) const {
    check(x.rank() == 4, "network input must be rank 4");
    check(x.dim(1) == in_shape_[0] && x.dim(2) == in_shape_[1] && x.dim(3) == in_shape_[2],
          "network input shape mismatch");
    const int n = x.dim(0);
    cache.train = train;
    cache.acts.resize(layers_.size() + 1);
    cache.layers.resize(layers_.size());
    cache.acts[0] = x;
    Shape3 s = in_shape_;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      s = layers_[i]->out_shape(s);
      Tensor<T>& y = cache.acts[i + 1];
      const std::vector<int> want{n, s[0], s[1], s[2]};
      if (y.shape() != want) y = Tensor<T>(want);
      layers_[i]->forward(cache.acts[i], y, cache.layers[i], train);
    }
    return cache.acts.back();
  }

  // gy is dLoss/d(output). Parameter gradients accumulate into grads (when
  // non-null, pre-sized via make_grads). When gx is non-null it receives
  // dLoss/d(input); otherwise the chain stops at the first layer.
  void backward(const Tensor<T>& gy, const NetCache<T>& cache, NetGrads<T>* grads,
                Tensor<T>* gx = nullptr) const {
    check(cache.acts.size() == layers_.size() + 1, "cache does not match network");
    Tensor<T> cur = gy;
    Tensor<T> prev;
    for (std::size_t ri = layers_.size(); ri-- > 0;) {
      LayerGrads<T>* lg = grads ? &grads->layers[ri] : nullptr;
      const bool need_gx = ri > 0 || gx != nullptr;
      Tensor<T>* out = nullptr;
      if (need_gx) {
        prev = Tensor<T>(cache.acts[ri].shape());
        out = &prev;
      }
      layers_[ri]->backward(cur, cache.acts[ri], cache.acts[ri + 1], cache.layers[ri], out, lg);
      if (need_gx) cur = std::move(prev);
    }
    if (gx) *gx = std::move(cur);
  }

  NetGrads<T> make_grads() const {
    NetGrads<T> g;
    g.layers.resize(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i)
      for (const Tensor<T>* p : layers_[i]->params())
        g.layers[i].g.emplace_back(p->shape());
    g.zero();
    return g;
  }

  // Folds the batch statistics recorded in a train-mode cache into the
  // normalization layers' running statistics. Called once per optimizer step
  // by the single writer that owns the model.
  void commit_norm_stats(const NetCache<T>& cache) {
    check(cache.layers.size() == layers_.size(), "cache does not match network");
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (auto* bn = dynamic_cast<BatchNorm2d<T>*>(layers_[i].get())) bn->fold_batch_stats(cache.layers[i]);
  }

  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& l : layers_)
      for (Tensor<T>* p : l->params()) out.push_back(p);
    return out;
  }
  std::vector<const Tensor<T>*> parameters() const {
    std::vector<const Tensor<T>*> out;
    for (const auto& l : layers_)
      for (const Tensor<T>* p : l->params()) out.push_back(p);
    return out;
  }
  std::vector<Tensor<T>*> state_tensors() {
    std::vector<Tensor<T>*> out;
    for (auto& l : layers_)
      for (Tensor<T>* p : l->state()) out.push_back(p);
    return out;
  }
  std::vector<const Tensor<T>*> state_tensors() const {
    std::vector<const Tensor<T>*> out;
    for (const auto& l : layers_)
      for (const Tensor<T>* p : l->state()) out.push_back(p);
    return out;
  }

  // Flattened view of a NetGrads aligned with parameters() order.
  static std::vector<const Tensor<T>*> grad_pointers(const NetGrads<T>& grads) {
    std::vector<const Tensor<T>*> out;
    for (const auto& lg : grads.layers)
      for (const auto& t : lg.g) out.push_back(&t);
    return out;
  }

 private:
  Shape3 in_shape_{0, 0, 0};
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

}  // namespace dpsplit::nn
