#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dpsplit/common.hpp"
#include "dpsplit/data/dataset.hpp"
#include "dpsplit/rng.hpp"
#include "dpsplit/tensor.hpp"

namespace dpsplit {

// Procedurally generated 10-class image corpus used when no real dataset is
// available: each class pairs a distinct glyph shape with a distinct base
// color, drawn over a smooth background with position/size/color jitter and
// pixel noise. Classes 10..19 (used for the disjoint pretraining task) reuse
// the shapes at doubled miniature scale with rotated color channels, so the
// two label spaces share low-level statistics but not classes.
namespace synthetic {

struct Palette {
  float r, g, b;
};

inline const Palette& class_color(int cls) {
  static const Palette kColors[10] = {
      {220.f, 60.f, 60.f},  {60.f, 200.f, 80.f},   {70.f, 90.f, 220.f},  {230.f, 200.f, 50.f},
      {200.f, 70.f, 200.f}, {70.f, 210.f, 210.f},  {240.f, 140.f, 40.f}, {140.f, 230.f, 140.f},
      {150.f, 110.f, 240.f}, {240.f, 240.f, 240.f}};
  return kColors[cls % 10];
}

// Glyph membership test in coordinates centered on the glyph, extent r.
inline bool in_glyph(int shape, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  const double rad = std::sqrt(dx * dx + dy * dy);
  const auto stripe = [](double v, double period) {
    const double m = std::fmod(std::fmod(v, period) + period, period);
    return m < period / 2.0;
  };
  switch (shape) {
    case 0: return rad <= r;
    case 1: return rad <= r && rad >= r * 0.55;
    case 2: return ax <= r && ay <= r && stripe(dy + r, r * 0.7);
    case 3: return ax <= r && ay <= r && stripe(dx + r, r * 0.7);
    case 4: return (ax <= r * 0.35 && ay <= r) || (ay <= r * 0.35 && ax <= r);
    case 5: return std::max(ax, ay) <= r && std::abs(ax - ay) <= r * 0.35;
    case 6: return dy >= -r && dy <= r && ax <= (dy + r) * 0.55;
    case 7: return std::max(ax, ay) <= r && (stripe(dx + r, r) == stripe(dy + r, r));
    case 8: return std::max(ax, ay) <= r && std::max(ax, ay) >= r * 0.55;
    case 9: return std::max(ax, ay) <= r && stripe(dx + dy + 2 * r, r * 0.8);
    default: return false;
  }
}

inline Tensor<float> render(int cls, int h, int w, Rng& rng) {
  Tensor<float> img({3, h, w});

  const float bg_a = static_cast<float>(rng.uniform(30.0, 110.0));
  const float bg_b = static_cast<float>(rng.uniform(30.0, 110.0));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float t = 0.5f * (static_cast<float>(y) / h + static_cast<float>(x) / w);
      const float v = bg_a + (bg_b - bg_a) * t;
      for (int c = 0; c < 3; ++c) img.at3(c, y, x) = v;
    }

  const int shape = cls % 10;
  const bool mini = cls >= 10;
  Palette fg = class_color(cls);
  if (mini) fg = {fg.g, fg.b, fg.r};
  float col[3] = {fg.r, fg.g, fg.b};
  for (float& v : col)
    v = std::clamp(v + static_cast<float>(rng.uniform(-30.0, 30.0)), 0.0f, 255.0f);

  const double cx = w / 2.0 + rng.uniform(-4.0, 4.0);
  const double cy = h / 2.0 + rng.uniform(-4.0, 4.0);
  const double r = (mini ? 0.14 : 0.32) * std::min(h, w) * rng.uniform(0.85, 1.15);
  // Miniature classes draw the motif twice along the main diagonal.
  const int copies = mini ? 2 : 1;
  const double off = mini ? 0.19 * std::min(h, w) : 0.0;

  for (int rep = 0; rep < copies; ++rep) {
    const double gx = cx + (rep == 0 ? -off : off);
    const double gy = cy + (rep == 0 ? -off : off);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (in_glyph(shape, x - gx, y - gy, r))
          for (int c = 0; c < 3; ++c) img.at3(c, y, x) = col[c];
  }

  for (std::int64_t i = 0; i < img.numel(); ++i) {
    const double v = img[i] + 8.0 * rng.normal();
    img[i] = static_cast<float>(std::clamp(v, 0.0, 255.0));
  }
  return img;
}

inline LabeledExample make_example(const DatasetSpec& spec, const std::string& split, int index) {
  Rng rng(derive_seed(spec.seed, "synthetic", split, static_cast<std::uint64_t>(index)));
  LabeledExample ex;
  ex.label = index % spec.n_classes;
  ex.image = render(ex.label, spec.height, spec.width, rng);
  ex.source_id = "synthetic/" + split + "/" + std::to_string(index);
  return ex;
}

}  // namespace synthetic

// Generates the corpus at the spec's sizes scaled by desk_scale. Example i
// depends only on (seed, split, i), so prefixes agree across sizes.
inline Dataset generate_synthetic(const DatasetSpec& spec, double desk_scale = 1.0) {
  spec.validate();
  check(spec.name == DatasetName::kSynthetic, "generator only serves the synthetic dataset");
  Dataset ds;
  ds.spec = spec;
  const int ntr = scaled_size(spec.train_size, desk_scale);
  const int nte = scaled_size(spec.test_size, desk_scale);
  ds.train.reserve(static_cast<std::size_t>(ntr));
  ds.test.reserve(static_cast<std::size_t>(nte));
  for (int i = 0; i < ntr; ++i) ds.train.push_back(synthetic::make_example(spec, "train", i));
  for (int i = 0; i < nte; ++i) ds.test.push_back(synthetic::make_example(spec, "test", i));
  return ds;
}

}  // namespace dpsplit
