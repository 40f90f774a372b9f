// SPDX-License-Identifier: Apache-2.0
//
// Synthetic texture classification. Each class owns a few colored sinusoidal
// gratings (frequency, orientation, phase and per-channel amplitude); samples
// are the class texture plus Gaussian pixel noise, optionally with random
// phase and amplitude jitter. A related task perturbs every class signature,
// which gives pretrain-on-A / fine-tune-on-B transfer problems.
#pragma once

#include <cmath>
#include <numbers>

#include "spu/data/dataset.hpp"
#include "spu/random.hpp"

namespace spu {

struct Grating {
  double fy = 0, fx = 0;  // cycles per image
  double phase = 0;
  std::array<double, 3> amp{};
};

struct SynthTask {
  int classes = 0;
  std::size_t image = 16;
  std::vector<std::vector<Grating>> signatures;  // [class][component]
};

struct SynthSampling {
  double noise = 0.5;         // pixel noise standard deviation
  double phase_jitter = 0.0;  // uniform in [-j, j] radians per sample
  double amp_jitter = 0.0;    // amplitude scale uniform in [1 - a, 1 + a]
};

inline SynthTask make_synth_task(int classes, std::size_t image, std::uint64_t seed, int components = 2) {
  require(classes >= 2, "synthetic task: classes must be >= 2");
  require(image >= 4, "synthetic task: image must be >= 4");
  Rng rng(substream_seed(seed, "synth-task"));
  SynthTask t;
  t.classes = classes;
  t.image = image;
  const double fmax = static_cast<double>(image) / 4.0;
  for (int c = 0; c < classes; ++c) {
    std::vector<Grating> sig;
    for (int k = 0; k < components; ++k) {
      Grating g;
      const double f = rng.uniform(1.0, fmax);
      const double theta = rng.uniform(0.0, std::numbers::pi);
      g.fy = f * std::sin(theta);
      g.fx = f * std::cos(theta);
      g.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      for (auto& a : g.amp) a = rng.uniform(-1.0, 1.0);
      sig.push_back(g);
    }
    t.signatures.push_back(std::move(sig));
  }
  return t;
}

/// Same classes with every grating perturbed; `shift` = 0 reproduces `a`.
inline SynthTask related_task(const SynthTask& a, double shift, std::uint64_t seed) {
  Rng rng(substream_seed(seed, "synth-related"));
  SynthTask b = a;
  const double fmax = static_cast<double>(a.image) / 4.0;
  for (auto& sig : b.signatures)
    for (auto& g : sig) {
      g.fy = std::clamp(g.fy + shift * fmax * 0.5 * rng.normal(), -fmax, fmax);
      g.fx = std::clamp(g.fx + shift * fmax * 0.5 * rng.normal(), -fmax, fmax);
      g.phase += shift * std::numbers::pi * rng.normal();
      for (auto& v : g.amp) v = (1.0 - shift) * v + shift * rng.uniform(-1.0, 1.0);
    }
  return b;
}

/// Noise-free class texture at the given phase offset and amplitude scale.
inline void render_texture(const SynthTask& t, int cls, double dphase, double scale, std::vector<double>& out) {
  const std::size_t s = t.image;
  out.assign(s * s * 3, 0.0);
  for (const auto& g : t.signatures[static_cast<std::size_t>(cls)])
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const double arg = 2.0 * std::numbers::pi * (g.fy * static_cast<double>(y) + g.fx * static_cast<double>(x)) /
                               static_cast<double>(s) +
                           g.phase + dphase;
        const double v = scale * std::sin(arg);
        for (std::size_t c = 0; c < 3; ++c) out[(y * s + x) * 3 + c] += g.amp[c] * v;
      }
}

/// n samples with labels cycling through the classes, then shuffled.
template <typename T = float>
Dataset<T> synth_dataset(const SynthTask& t, std::size_t n, std::uint64_t seed, const SynthSampling& smp = {}) {
  Rng rng(substream_seed(seed, "synth-data"));
  Dataset<T> d;
  d.height = d.width = t.image;
  d.channels = 3;
  d.num_classes = t.classes;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % static_cast<std::size_t>(t.classes));
  rng.shuffle(labels);
  std::vector<double> tex;
  std::vector<T> img(t.image * t.image * 3);
  for (int label : labels) {
    const double dphase = smp.phase_jitter > 0 ? rng.uniform(-smp.phase_jitter, smp.phase_jitter) : 0.0;
    const double scale = smp.amp_jitter > 0 ? rng.uniform(1.0 - smp.amp_jitter, 1.0 + smp.amp_jitter) : 1.0;
    render_texture(t, label, dphase, scale, tex);
    for (std::size_t i = 0; i < img.size(); ++i)
      img[i] = static_cast<T>(tex[i] + (smp.noise > 0 ? smp.noise * rng.normal() : 0.0));
    d.push_back(img, label);
  }
  return d;
}

/// Convenience: task from (classes, seed) at 16x16 and n samples.
template <typename T = float>
Dataset<T> synth_dataset(int classes, std::size_t n, std::uint64_t seed, const SynthSampling& smp = {}) {
  return synth_dataset<T>(make_synth_task(classes, 16, seed), n, seed, smp);
}

}  // namespace spu
