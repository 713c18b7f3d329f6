#pragma once

// Synthetic multiscale task. Each image is a sum of Gaussian blobs plus
// noise; a blob of width sigma belongs to level l (1-based) when
// sigma lies in [2^l, 2^(l+1)) base pixels. The target at level l is the
// heatmap of the blobs assigned to l, sampled at that level's resolution.
// Separating blobs by scale needs information from several levels.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "ifpn/array.hpp"
#include "ifpn/harness/config.hpp"

namespace ifpn::harness {

struct Blob {
  double cy;  // center, base-pixel coordinates
  double cx;
  double sigma;
  double amplitude;
};

/// 1-based level whose scale band contains sigma, or 0 if none does.
inline std::size_t blob_level(double sigma, std::size_t levels) {
  for (std::size_t l = 1; l <= levels; ++l) {
    const double lo = std::ldexp(1.0, static_cast<int>(l));
    if (sigma >= lo && sigma < 2.0 * lo) return l;
  }
  return 0;
}

/// Heatmap of `blobs` sampled on the grid of level l (stride 2^(l-1)).
inline Array4 blob_heatmap(const std::vector<Blob>& blobs, std::size_t h, std::size_t w, std::size_t level) {
  const double stride = std::ldexp(1.0, static_cast<int>(level) - 1);
  const std::size_t lh = h / static_cast<std::size_t>(stride);
  const std::size_t lw = w / static_cast<std::size_t>(stride);
  Array4 out(Shape4{1, 1, lh, lw});
  for (std::size_t y = 0; y < lh; ++y) {
    for (std::size_t x = 0; x < lw; ++x) {
      const double py = (static_cast<double>(y) + 0.5) * stride - 0.5;
      const double px = (static_cast<double>(x) + 0.5) * stride - 0.5;
      double v = 0.0;
      for (const Blob& b : blobs) {
        const double d2 = (py - b.cy) * (py - b.cy) + (px - b.cx) * (px - b.cx);
        v += b.amplitude * std::exp(-d2 / (2.0 * b.sigma * b.sigma));
      }
      out(0, 0, y, x) = v;
    }
  }
  return out;
}

struct Sample {
  Array4 image;    // (1, 1, H, W)
  Pyramid target;  // levels of shape (1, 1, H_l, W_l)
  std::vector<Blob> blobs;
};

/// Builds image and targets from explicit blobs (noise added from rng).
inline Sample render_sample(const SyntheticTaskSpec& spec, std::vector<Blob> blobs, std::mt19937_64& rng) {
  Sample s;
  s.image = blob_heatmap(blobs, spec.height, spec.width, 1);
  std::normal_distribution<double> nd(0.0, 1.0);
  if (spec.noise > 0.0) {
    for (std::size_t i = 0; i < s.image.size(); ++i) s.image[i] += spec.noise * nd(rng);
  }
  std::vector<Array4> levels;
  for (std::size_t l = 1; l <= spec.levels; ++l) {
    std::vector<Blob> mine;
    for (const Blob& b : blobs)
      if (blob_level(b.sigma, spec.levels) == l) mine.push_back(b);
    levels.push_back(blob_heatmap(mine, spec.height, spec.width, l));
  }
  s.target = Pyramid(std::move(levels));
  s.blobs = std::move(blobs);
  return s;
}

inline std::vector<Blob> random_blobs(const SyntheticTaskSpec& spec, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> count(spec.blobs_min, spec.blobs_max);
  std::uniform_int_distribution<std::size_t> level(1, spec.levels);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Blob> blobs(count(rng));
  for (Blob& b : blobs) {
    const double lo = std::ldexp(1.0, static_cast<int>(level(rng)));
    b.sigma = lo * std::pow(2.0, 0.999 * unit(rng));  // log-uniform inside the band
    b.cy = unit(rng) * static_cast<double>(spec.height);
    b.cx = unit(rng) * static_cast<double>(spec.width);
    b.amplitude = 0.5 + unit(rng);
  }
  return blobs;
}

inline std::vector<Sample> make_dataset(const SyntheticTaskSpec& spec, std::size_t count, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(render_sample(spec, random_blobs(spec, rng), rng));
  return out;
}

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> holdout;
};

inline Dataset make_task(const SyntheticTaskSpec& spec) {
  const std::uint64_t seed = spec.seed;
  return {make_dataset(spec, spec.samples, seed), make_dataset(spec, spec.holdout, seed ^ 0xa5a5a5a5a5a5a5a5ULL)};
}

/// Stacks samples into one batch: images (N, 1, H, W), targets per level (N, 1, H_l, W_l).
inline std::pair<Array4, Pyramid> stack(const std::vector<const Sample*>& batch) {
  const Shape4 is = batch.front()->image.shape();
  Array4 images(Shape4{batch.size(), 1, is.h, is.w});
  std::vector<Array4> levels;
  for (std::size_t l = 0; l < batch.front()->target.num_levels(); ++l) {
    const Shape4 ts = batch.front()->target[l].shape();
    levels.emplace_back(Shape4{batch.size(), 1, ts.h, ts.w});
  }
  for (std::size_t n = 0; n < batch.size(); ++n) {
    std::copy(batch[n]->image.vec().begin(), batch[n]->image.vec().end(), images.plane(n, 0));
    for (std::size_t l = 0; l < levels.size(); ++l) {
      const auto& src = batch[n]->target[l].vec();
      std::copy(src.begin(), src.end(), levels[l].plane(n, 0));
    }
  }
  return {std::move(images), Pyramid(std::move(levels))};
}

}  // namespace ifpn::harness
