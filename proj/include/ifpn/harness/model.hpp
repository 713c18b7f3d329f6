#pragma once

// Trainable pieces around the implicit pyramid: a shallow image-pyramid
// encoder that produces the backbone pyramid B, and a per-level 1x1 conv
// head scored by mean squared error.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ifpn/array.hpp"
#include "ifpn/tape.hpp"

namespace ifpn::harness {

namespace detail {

inline void fill_uniform(Array4& a, std::mt19937_64& rng, double gain = 1.0) {
  const Shape4& s = a.shape();
  const double bound = gain / std::sqrt(static_cast<double>(s.c * s.h * s.w));
  std::uniform_real_distribution<double> ud(-bound, bound);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = ud(rng);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder: B_l = GN(conv3x3(x_l)) with one group, where x_1 is the image
// and x_l is x_(l-1) average-pooled by 2. Each level only sees a 3x3
// window at its own resolution, so information about other scales has to
// come from the transform. Normalizing keeps B near unit scale, where the
// contractive initialization of the transform was calibrated.

inline ParamSet init_encoder(std::size_t levels, std::size_t channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamSet p;
  for (std::size_t l = 1; l <= levels; ++l) {
    Array4 w(Shape4{channels, 1, 3, 3});
    detail::fill_uniform(w, rng);
    p.add("encoder.conv" + std::to_string(l) + ".w", std::move(w));
    p.add("encoder.conv" + std::to_string(l) + ".b", Array4(channel_vector_shape(channels)));
    p.add("encoder.norm" + std::to_string(l) + ".gamma", Array4(channel_vector_shape(channels), 1.0));
    p.add("encoder.norm" + std::to_string(l) + ".beta", Array4(channel_vector_shape(channels)));
  }
  return p;
}

inline Array4 avg_pool2(const Array4& x) {
  const Shape4& s = x.shape();
  Array4 out(Shape4{s.n, s.c, s.h / 2, s.w / 2});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < s.h / 2; ++y)
        for (std::size_t xx = 0; xx < s.w / 2; ++xx) {
          out(n, c, y, xx) = 0.25 * (x(n, c, 2 * y, 2 * xx) + x(n, c, 2 * y, 2 * xx + 1) +
                                     x(n, c, 2 * y + 1, 2 * xx) + x(n, c, 2 * y + 1, 2 * xx + 1));
        }
  return out;
}

struct EncoderRecord {
  Tape tape;
  std::vector<Var> params;
  std::vector<Var> outputs;
};

inline std::size_t encoder_levels(const ParamSet& p) { return p.num_segments() / 4; }

inline EncoderRecord encoder_record(const ParamSet& p, const Array4& images) {
  const std::size_t levels = encoder_levels(p);
  const std::size_t div = std::size_t{1} << (levels - 1);
  if (images.shape().c != 1 || images.shape().h % div != 0 || images.shape().w % div != 0) {
    throw ShapeError("encode: image " + images.shape().str() + " must be single-channel with dims divisible by " +
                     std::to_string(div));
  }
  EncoderRecord r;
  for (std::size_t s = 0; s < p.num_segments(); ++s) r.params.push_back(r.tape.leaf(p.at(s)));
  Array4 x = images;
  for (std::size_t l = 0; l < levels; ++l) {
    if (l > 0) x = avg_pool2(x);
    Var h = r.tape.conv2d(r.tape.leaf(x), r.params[4 * l], r.params[4 * l + 1], 1);
    r.outputs.push_back(r.tape.group_norm(h, 1, r.params[4 * l + 2], r.params[4 * l + 3]));
  }
  return r;
}

inline Pyramid encoder_output(const EncoderRecord& r) {
  std::vector<Array4> ls;
  for (Var v : r.outputs) ls.push_back(r.tape.value(v));
  return Pyramid(std::move(ls));
}

inline Pyramid encode(const ParamSet& p, const Array4& images) { return encoder_output(encoder_record(p, images)); }

/// dL/d(encoder params) from dL/dB.
inline ParamSet encoder_backward(const ParamSet& p, const EncoderRecord& r, const Pyramid& d_b) {
  std::vector<std::pair<Var, Array4>> seeds;
  for (std::size_t l = 0; l < r.outputs.size(); ++l) seeds.emplace_back(r.outputs[l], d_b[l]);
  auto grads = r.tape.backward(seeds);
  ParamSet g = ParamSet::zeros_like(p);
  for (std::size_t s = 0; s < r.params.size(); ++s) {
    if (grads[r.params[s].id].size() != 0) g.at(s) = std::move(grads[r.params[s].id]);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Head: per-level 1x1 conv to one channel, MSE averaged over levels and elements.

inline ParamSet init_head(std::size_t levels, std::size_t channels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamSet p;
  for (std::size_t l = 1; l <= levels; ++l) {
    Array4 w(Shape4{1, channels, 1, 1});
    detail::fill_uniform(w, rng);
    p.add("head.level" + std::to_string(l) + ".w", std::move(w));
    p.add("head.level" + std::to_string(l) + ".b", Array4(channel_vector_shape(1)));
  }
  return p;
}

inline Pyramid head_predict(const ParamSet& head, const Pyramid& p) {
  std::vector<Array4> ls;
  for (std::size_t l = 0; l < p.num_levels(); ++l) {
    ls.push_back(conv2d(p[l], head.at(2 * l), head.at(2 * l + 1), 1));
  }
  return Pyramid(std::move(ls));
}

struct HeadLoss {
  double loss = 0.0;
  Pyramid d_p;     // dL/dP*
  ParamSet d_head;
};

inline HeadLoss head_and_loss(const ParamSet& head, const Pyramid& p, const Pyramid& target) {
  if (head.num_segments() != 2 * p.num_levels()) throw ShapeError("head_and_loss: head/pyramid level mismatch");
  if (target.num_levels() != p.num_levels()) throw ShapeError("head_and_loss: target level mismatch");
  HeadLoss out{0.0, {}, ParamSet::zeros_like(head)};
  std::vector<Array4> dps;
  const double nl = static_cast<double>(p.num_levels());
  for (std::size_t l = 0; l < p.num_levels(); ++l) {
    Array4 pred = conv2d(p[l], head.at(2 * l), head.at(2 * l + 1), 1);
    require_same_shape(pred.shape(), target[l].shape(), "head_and_loss target");
    const double ne = static_cast<double>(pred.size());
    Array4 dpred(pred.shape());
    double level_loss = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double r = pred[i] - target[l][i];
      level_loss += r * r;
      dpred[i] = 2.0 * r / (ne * nl);
    }
    out.loss += level_loss / (ne * nl);
    auto g = conv2d_vjp(p[l], head.at(2 * l), 1, dpred);
    dps.push_back(std::move(g.dx));
    out.d_head.at(2 * l) = std::move(g.dw);
    out.d_head.at(2 * l + 1) = std::move(g.db);
  }
  out.d_p = Pyramid(std::move(dps));
  return out;
}

}  // namespace ifpn::harness
