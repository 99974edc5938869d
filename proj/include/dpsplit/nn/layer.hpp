#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dpsplit/common.hpp"
#include "dpsplit/rng.hpp"
#include "dpsplit/tensor.hpp"

namespace dpsplit::nn {

using Shape3 = std::array<int, 3>;  // (channels, height, width)

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Per-layer state captured during a forward pass and consumed by backward.
// Kept outside the layers so models stay immutable and shareable between
// concurrent forward/gradient invocations.
template <typename T>
struct LayerCache {
  Tensor<T> stat_a;            // batchnorm: per-channel mean used in this pass
  Tensor<T> stat_b;            // batchnorm: per-channel variance used in this pass
  std::vector<std::int32_t> idx;  // maxpool: flat argmax per output element
  bool train = false;
};

template <typename T>
struct LayerGrads {
  std::vector<Tensor<T>> g;  // aligned with Layer::params() order
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string kind() const = 0;
  virtual Shape3 out_shape(const Shape3& in) const = 0;

  // x is (n, c, h, w); y is resized by the caller to the mapped shape.
  // train=true makes normalization layers use batch statistics (recorded in
  // the cache; see Network::commit_norm_stats).
  virtual void forward(const Tensor<T>& x, Tensor<T>& y, LayerCache<T>& cache, bool train) const = 0;

  // gy is dLoss/dy. x/y are the activations saved by the enclosing network.
  // gx (when non-null) receives dLoss/dx; grads (when non-null) accumulates
  // parameter gradients in params() order.
  virtual void backward(const Tensor<T>& gy, const Tensor<T>& x, const Tensor<T>& y,
                        const LayerCache<T>& cache, Tensor<T>* gx, LayerGrads<T>* grads) const = 0;

  virtual std::vector<Tensor<T>*> params() { return {}; }
  virtual std::vector<const Tensor<T>*> params() const { return {}; }
  // Non-trainable persistent state (batchnorm running statistics).
  virtual std::vector<Tensor<T>*> state() { return {}; }
  virtual std::vector<const Tensor<T>*> state() const { return {}; }

  virtual std::unique_ptr<Layer<T>> clone() const = 0;
};

// ---------------------------------------------------------------------------
// InputScale: multiplies by a fixed constant. Placed first in the local part
// so images flow through the public API in the [0, 255] domain while the
// convolution stack sees [0, 1].
template <typename T>
class InputScale final : public Layer<T> {
 public:
  explicit InputScale(T factor) : factor_(factor) {}

  std::string kind() const override { return "input_scale"; }
  Shape3 out_shape(const Shape3& in) const override { return in; }

  void forward(const Tensor<T>& x, Tensor<T>& y, LayerCache<T>&, bool) const override {
    const T* px = x.data();
    T* py = y.data();
    for (std::int64_t i = 0; i < x.numel(); ++i) py[i] = px[i] * factor_;
  }

  void backward(const Tensor<T>& gy, const Tensor<T>&, const Tensor<T>&, const LayerCache<T>&,
                Tensor<T>* gx, LayerGrads<T>*) const override {
    if (!gx) return;
    const T* pg = gy.data();
    T* po = gx->data();
    for (std::int64_t i = 0; i < gy.numel(); ++i) po[i] = pg[i] * factor_;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<InputScale<T>>(factor_); }

  T factor() const { return factor_; }

 private:
  T factor_;
};

// ---------------------------------------------------------------------------
// Conv2d: square kernel, configurable stride/padding, bias. Forward and both
// backward products are im2col + GEMM, one image at a time so the column
// buffer stays cache-sized and the output writes straight into the (c, h, w)
// planes.
template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride = 1, int pad = -1)
      : in_c_(in_channels), out_c_(out_channels), k_(kernel), stride_(stride),
        pad_(pad >= 0 ? pad : kernel / 2),
        weight_({out_channels, in_channels, kernel, kernel}), bias_({out_channels}) {
    check(in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0, "bad conv dimensions");
  }

  void init_he(Rng& rng) {
    const double fan_in = static_cast<double>(in_c_) * k_ * k_;
    const double std_dev = std::sqrt(2.0 / fan_in);
    for (std::int64_t i = 0; i < weight_.numel(); ++i)
      weight_[i] = static_cast<T>(rng.normal() * std_dev);
    bias_.fill(T{0});
  }

  std::string kind() const override { return "conv2d"; }

  Shape3 out_shape(const Shape3& in) const override {
    check(in[0] == in_c_, "conv input channel mismatch");
    const int ho = (in[1] + 2 * pad_ - k_) / stride_ + 1;
    const int wo = (in[2] + 2 * pad_ - k_) / stride_ + 1;
    check(ho > 0 && wo > 0, "conv output collapses to zero size");
    return {out_c_, ho, wo};
  }

  void forward(const Tensor<T>& x, Tensor<T>& y, LayerCache<T>&, bool) const override {
    const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const Shape3 os = out_shape({x.dim(1), h, w});
    const int ho = os[1], wo = os[2];
    const std::int64_t patch = static_cast<std::int64_t>(in_c_) * k_ * k_;
    const std::int64_t cols = static_cast<std::int64_t>(ho) * wo;

    RowMat<T> colbuf(patch, cols);
    Eigen::Map<const RowMat<T>> wmap(weight_.data(), out_c_, patch);
    for (int i = 0; i < n; ++i) {
      im2col(x.data() + image_offset(x, i), h, w, ho, wo, colbuf);
      Eigen::Map<RowMat<T>> ymap(y.data() + image_offset(y, i), out_c_, cols);
      ymap.noalias() = wmap * colbuf;
      for (int oc = 0; oc < out_c_; ++oc) ymap.row(oc).array() += bias_[oc];
    }
  }

  void backward(const Tensor<T>& gy, const Tensor<T>& x, const Tensor<T>&, const LayerCache<T>&,
                Tensor<T>* gx, LayerGrads<T>* grads) const override {
    const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const int ho = gy.dim(2), wo = gy.dim(3);
    const std::int64_t patch = static_cast<std::int64_t>(in_c_) * k_ * k_;
    const std::int64_t cols = static_cast<std::int64_t>(ho) * wo;

    RowMat<T> colbuf(patch, cols);
    RowMat<T> colgrad;
    if (gx) {
      colgrad.resize(patch, cols);
      gx->fill(T{0});
    }
    Eigen::Map<const RowMat<T>> wmap(weight_.data(), out_c_, patch);

    for (int i = 0; i < n; ++i) {
      Eigen::Map<const RowMat<T>> gymap(gy.data() + image_offset(gy, i), out_c_, cols);
      if (grads) {
        im2col(x.data() + image_offset(x, i), h, w, ho, wo, colbuf);
        Eigen::Map<RowMat<T>> gw(grads->g[0].data(), out_c_, patch);
        gw.noalias() += gymap * colbuf.transpose();
        for (int oc = 0; oc < out_c_; ++oc) grads->g[1][oc] += gymap.row(oc).sum();
      }
      if (gx) {
        colgrad.noalias() = wmap.transpose() * gymap;
        col2im(colgrad, h, w, ho, wo, gx->data() + image_offset(*gx, i));
      }
    }
  }

  std::vector<Tensor<T>*> params() override { return {&weight_, &bias_}; }
  std::vector<const Tensor<T>*> params() const override { return {&weight_, &bias_}; }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d<T>>(*this); }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  int kernel() const { return k_; }
  int in_channels() const { return in_c_; }
  int out_channels() const { return out_c_; }

 private:
  static std::int64_t image_offset(const Tensor<T>& t, int i) {
    return static_cast<std::int64_t>(i) * t.dim(1) * t.dim(2) * t.dim(3);
  }

  // col is (in_c*k*k) x (ho*wo), row-major; row r covers one (ic, ky, kx)
  // tap swept over output positions.
  void im2col(const T* img, int h, int w, int ho, int wo, RowMat<T>& col) const {
    for (int ic = 0; ic < in_c_; ++ic) {
      const T* plane = img + static_cast<std::int64_t>(ic) * h * w;
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          T* row = col.data() + static_cast<std::int64_t>((ic * k_ + ky) * k_ + kx) * (static_cast<std::int64_t>(ho) * wo);
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            T* dst = row + static_cast<std::int64_t>(oy) * wo;
            if (iy < 0 || iy >= h) {
              std::fill(dst, dst + wo, T{0});
              continue;
            }
            const T* src = plane + static_cast<std::int64_t>(iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T{0};
            }
          }
        }
      }
    }
  }

  void col2im(const RowMat<T>& col, int h, int w, int ho, int wo, T* img) const {
    for (int ic = 0; ic < in_c_; ++ic) {
      T* plane = img + static_cast<std::int64_t>(ic) * h * w;
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const T* row = col.data() + static_cast<std::int64_t>((ic * k_ + ky) * k_ + kx) * (static_cast<std::int64_t>(ho) * wo);
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h) continue;
            T* dst = plane + static_cast<std::int64_t>(iy) * w;
            const T* src = row + static_cast<std::int64_t>(oy) * wo;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < w) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }

  int in_c_, out_c_, k_, stride_, pad_;
  Tensor<T> weight_;  // (out_c, in_c, k, k)
  Tensor<T> bias_;    // (out_c)
};

// ---------------------------------------------------------------------------
// BatchNorm2d. Train-mode forward normalizes with biased batch statistics and
// records them in the cache; the owning network folds them into the running
// statistics via commit_norm_stats. Eval mode uses the running statistics,
// which makes the layer a per-channel affine map.
template <typename T>
class BatchNorm2d final : public Layer<T> {
 public:
  explicit BatchNorm2d(int channels, double eps = 1e-5, double momentum = 0.1)
      : c_(channels), eps_(static_cast<T>(eps)), momentum_(static_cast<T>(momentum)),
        gamma_({channels}), beta_({channels}), run_mean_({channels}), run_var_({channels}) {
    gamma_.fill(T{1});
    beta_.fill(T{0});
    run_mean_.fill(T{0});
    run_var_.fill(T{1});
  }

  std::string kind() const override { return "batchnorm2d"; }
  Shape3 out_shape(const Shape3& in) const override {
    check(in[0] == c_, "batchnorm channel mismatch");
    return in;
  }

  void forward(const Tensor<T>& x, Tensor<T>& y, LayerCache<T>& cache, bool train) const override {
    const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    cache.train = train;
    cache.stat_a = Tensor<T>({c_});
    cache.stat_b = Tensor<T>({c_});
    if (train) {
      const double count = static_cast<double>(n) * plane;
      for (int c = 0; c < c_; ++c) {
        double sum = 0.0, sq = 0.0;
        for (int i = 0; i < n; ++i) {
          const T* p = x.data() + ((static_cast<std::int64_t>(i) * c_ + c) * plane);
          for (std::int64_t j = 0; j < plane; ++j) {
            sum += p[j];
            sq += static_cast<double>(p[j]) * p[j];
          }
        }
        const double mean = sum / count;
        cache.stat_a[c] = static_cast<T>(mean);
        cache.stat_b[c] = static_cast<T>(std::max(0.0, sq / count - mean * mean));
      }
    } else {
      cache.stat_a = run_mean_;
      cache.stat_b = run_var_;
    }
    for (int c = 0; c < c_; ++c) {
      const T inv = T{1} / std::sqrt(cache.stat_b[c] + eps_);
      const T scale = gamma_[c] * inv;
      const T shift = beta_[c] - cache.stat_a[c] * scale;
      for (int i = 0; i < n; ++i) {
        const T* px = x.data() + ((static_cast<std::int64_t>(i) * c_ + c) * plane);
        T* py = y.data() + ((static_cast<std::int64_t>(i) * c_ + c) * plane);
        for (std::int64_t j = 0; j < plane; ++j) py[j] = px[j] * scale + shift;
      }
    }
  }

  void backward(const Tensor<T>& gy, const Tensor<T>& x, const Tensor<T>&, const LayerCache<T>& cache,
                Tensor<T>* gx, LayerGrads<T>* grads) const override {
    const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    const double count = static_cast<double>(n) * plane;
    for (int c = 0; c < c_; ++c) {
      const double mean = cache.stat_a[c];
      const double inv = 1.0 / std::sqrt(static_cast<double>(cache.stat_b[c]) + static_cast<double>(eps_));
      double sum_gy = 0.0, sum_gy_xhat = 0.0;
      for (int i = 0; i < n; ++i) {
        const T* pg = gy.data() + ((static_cast<std::int64_t>(i) * c_ + c) * plane);
        const T* px = x.data() + ((static_cast<std::int64_t>(i) * c_ + c) * plane);
        for (std::int64_t j = 0; j < plane; ++j) {
          sum_gy += pg[j];
          sum_gy_xhat += pg[j] * (px[j] - mean) * inv;
        }
      }
      if (grads) {
        grads->g[0][c] += static_cast<T>(sum_gy_xhat);
        grads->g[1][c] += static_cast<T>(sum_gy);
      }
      if (gx) {
        const double g = gamma_[c];
        if (cache.train) {
          for (int i = 0; i < n; ++i) {
            const T* pg = gy.data() + ((static_cast<std::int64_t>(i) * c_ + c) * plane);
            const T* px = x.data() + ((static_cast<std::int64_t>(i) * c_ + c) * plane);
            T* po = gx->data() + ((static_cast<std::int64_t>(i) * c_ + c) * plane);
            for (std::int64_t j = 0; j < plane; ++j) {
              const double xhat = (px[j] - mean) * inv;
              po[j] = static_cast<T>(g * inv * (pg[j] - sum_gy / count - xhat * sum_gy_xhat / count));
            }
          }
        } else {
          const T scale = static_cast<T>(g * inv);
          for (int i = 0; i < n; ++i) {
            const T* pg = gy.data() + ((static_cast<std::int64_t>(i) * c_ + c) * plane);
            T* po = gx->data() + ((static_cast<std::int64_t>(i) * c_ + c) * plane);
            for (std::int64_t j = 0; j < plane; ++j) po[j] = pg[j] * scale;
          }
        }
      }
    }
  }

  void fold_batch_stats(const LayerCache<T>& cache) {
    if (!cache.train) return;
    for (int c = 0; c < c_; ++c) {
      run_mean_[c] = (T{1} - momentum_) * run_mean_[c] + momentum_ * cache.stat_a[c];
      run_var_[c] = (T{1} - momentum_) * run_var_[c] + momentum_ * cache.stat_b[c];
    }
  }

  std::vector<Tensor<T>*> params() override { return {&gamma_, &beta_}; }
  std::vector<const Tensor<T>*> params() const override { return {&gamma_, &beta_}; }
  std::vector<Tensor<T>*> state() override { return {&run_mean_, &run_var_}; }
  std::vector<const Tensor<T>*> state() const override { return {&run_mean_, &run_var_}; }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNorm2d<T>>(*this); }

 private:
  int c_;
  T eps_, momentum_;
  Tensor<T> gamma_, beta_, run_mean_, run_var_;
};

// ---------------------------------------------------------------------------
template <typename T>
class ReLU final : public Layer<T> {
 public:
  std::string kind() const override { return "relu"; }
  Shape3 out_shape(const Shape3& in) const override { return in; }

  void forward(const Tensor<T>& x, Tensor<T>& y, LayerCache<T>&, bool) const override {
    const T* px = x.data();
    T* py = y.data();
    for (std::int64_t i = 0; i < x.numel(); ++i) py[i] = px[i] > T{0} ? px[i] : T{0};
  }

  // Subgradient 0 at the kink (x == 0 contributes nothing).
  void backward(const Tensor<T>& gy, const Tensor<T>& x, const Tensor<T>&, const LayerCache<T>&,
                Tensor<T>* gx, LayerGrads<T>*) const override {
    if (!gx) return;
    const T* pg = gy.data();
    const T* px = x.data();
    T* po = gx->data();
    for (std::int64_t i = 0; i < gy.numel(); ++i) po[i] = px[i] > T{0} ? pg[i] : T{0};
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ReLU<T>>(*this); }
};

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2. Ties route the gradient to the first maximum in
// scan order so backward is deterministic.
template <typename T>
class MaxPool2 final : public Layer<T> {
 public:
  std::string kind() const override { return "maxpool2"; }
  Shape3 out_shape(const Shape3& in) const override {
    check(in[1] >= 2 && in[2] >= 2, "maxpool input too small");
    return {in[0], in[1] / 2, in[2] / 2};
  }

  void forward(const Tensor<T>& x, Tensor<T>& y, LayerCache<T>& cache, bool) const override {
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int ho = h / 2, wo = w / 2;
    cache.idx.assign(static_cast<std::size_t>(y.numel()), 0);
    std::int64_t o = 0;
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        const T* plane = x.data() + ((static_cast<std::int64_t>(i) * c + ch) * h * w);
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox, ++o) {
            const int iy = oy * 2, ix = ox * 2;
            std::int64_t best = static_cast<std::int64_t>(iy) * w + ix;
            T bv = plane[best];
            const std::int64_t cand[3] = {static_cast<std::int64_t>(iy) * w + ix + 1,
                                          (static_cast<std::int64_t>(iy) + 1) * w + ix,
                                          (static_cast<std::int64_t>(iy) + 1) * w + ix + 1};
            for (std::int64_t ci : cand) {
              if (plane[ci] > bv) {
                bv = plane[ci];
                best = ci;
              }
            }
            y[o] = bv;
            cache.idx[static_cast<std::size_t>(o)] = static_cast<std::int32_t>(best);
          }
        }
      }
    }
  }

  void backward(const Tensor<T>& gy, const Tensor<T>& x, const Tensor<T>&, const LayerCache<T>& cache,
                Tensor<T>* gx, LayerGrads<T>*) const override {
    if (!gx) return;
    gx->fill(T{0});
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int ho = h / 2, wo = w / 2;
    std::int64_t o = 0;
    for (int i = 0; i < n; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        T* plane = gx->data() + ((static_cast<std::int64_t>(i) * c + ch) * h * w);
        for (std::int64_t p = 0; p < static_cast<std::int64_t>(ho) * wo; ++p, ++o)
          plane[cache.idx[static_cast<std::size_t>(o)]] += gy[o];
      }
    }
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool2<T>>(*this); }
};

// ---------------------------------------------------------------------------
template <typename T>
class Flatten final : public Layer<T> {
 public:
  std::string kind() const override { return "flatten"; }
  Shape3 out_shape(const Shape3& in) const override { return {in[0] * in[1] * in[2], 1, 1}; }

  void forward(const Tensor<T>& x, Tensor<T>& y, LayerCache<T>&, bool) const override {
    std::copy(x.data(), x.data() + x.numel(), y.data());
  }

  void backward(const Tensor<T>& gy, const Tensor<T>&, const Tensor<T>&, const LayerCache<T>&,
                Tensor<T>* gx, LayerGrads<T>*) const override {
    if (!gx) return;
    std::copy(gy.data(), gy.data() + gy.numel(), gx->data());
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Flatten<T>>(*this); }
};

// ---------------------------------------------------------------------------
template <typename T>
class Linear final : public Layer<T> {
 public:
  Linear(int in_dim, int out_dim)
      : in_(in_dim), out_(out_dim), weight_({out_dim, in_dim}), bias_({out_dim}) {}

  void init_he(Rng& rng) {
    const double std_dev = std::sqrt(2.0 / in_);
    for (std::int64_t i = 0; i < weight_.numel(); ++i)
      weight_[i] = static_cast<T>(rng.normal() * std_dev);
    bias_.fill(T{0});
  }

  std::string kind() const override { return "linear"; }
  Shape3 out_shape(const Shape3& in) const override {
    check(in[0] * in[1] * in[2] == in_, "linear input size mismatch");
    return {out_, 1, 1};
  }

  void forward(const Tensor<T>& x, Tensor<T>& y, LayerCache<T>&, bool) const override {
    const int n = x.dim(0);
    Eigen::Map<const RowMat<T>> xm(x.data(), n, in_);
    Eigen::Map<const RowMat<T>> wm(weight_.data(), out_, in_);
    Eigen::Map<RowMat<T>> ym(y.data(), n, out_);
    ym.noalias() = xm * wm.transpose();
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bm(bias_.data(), out_);
    ym.rowwise() += bm.transpose();
  }

  void backward(const Tensor<T>& gy, const Tensor<T>& x, const Tensor<T>&, const LayerCache<T>&,
                Tensor<T>* gx, LayerGrads<T>* grads) const override {
    const int n = x.dim(0);
    Eigen::Map<const RowMat<T>> gym(gy.data(), n, out_);
    Eigen::Map<const RowMat<T>> xm(x.data(), n, in_);
    Eigen::Map<const RowMat<T>> wm(weight_.data(), out_, in_);
    if (grads) {
      Eigen::Map<RowMat<T>> gw(grads->g[0].data(), out_, in_);
      gw.noalias() += gym.transpose() * xm;
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gb(grads->g[1].data(), out_);
      gb.noalias() += gym.colwise().sum().transpose();
    }
    if (gx) {
      Eigen::Map<RowMat<T>> gxm(gx->data(), n, in_);
      gxm.noalias() = gym * wm;
    }
  }

  std::vector<Tensor<T>*> params() override { return {&weight_, &bias_}; }
  std::vector<const Tensor<T>*> params() const override { return {&weight_, &bias_}; }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Linear<T>>(*this); }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  int in_, out_;
  Tensor<T> weight_;  // (out, in)
  Tensor<T> bias_;    // (out)
};

}  // namespace dpsplit::nn
