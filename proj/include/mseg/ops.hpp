#pragma once

// Layer kernels and their adjoints for the segmentation network. Every
// forward is a pure function of its inputs; every backward takes the forward
// inputs again instead of relying on hidden state.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mseg/tensor.hpp"

namespace mseg {

template <typename Scalar>
struct LayerParams {
  Tensor<Scalar> weights;  // (C_out, C_in, kH, kW)
  Tensor<Scalar> bias;     // (C_out)
  Index stride = 1;
  Index padding = 0;
  Scalar negative_slope = Scalar(0.01);
  Scalar epsilon = Scalar(1e-5);
};

template <typename Scalar>
struct Conv2dGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weights;
  Tensor<Scalar> bias;
};

namespace detail {

inline Index conv_out_extent(Index in, Index k, Index stride, Index pad) {
  return (in + 2 * pad - k) / stride + 1;
}

template <typename Scalar>
void im2col(const Scalar* in, Index channels, Index h, Index w, Index kh, Index kw, Index stride,
            Index pad, Index ho, Index wo, RowMatrix<Scalar>& cols) {
  cols.resize(channels * kh * kw, ho * wo);
  for (Index c = 0; c < channels; ++c) {
    const Scalar* src = in + c * h * w;
    for (Index ky = 0; ky < kh; ++ky) {
      for (Index kx = 0; kx < kw; ++kx) {
        Scalar* dst = cols.data() + ((c * kh + ky) * kw + kx) * ho * wo;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride - pad + ky;
          Scalar* row = dst + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(row, row + wo, Scalar(0));
            continue;
          }
          const Scalar* srow = src + iy * w;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride - pad + kx;
            row[ox] = (ix >= 0 && ix < w) ? srow[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& cols, Index channels, Index h, Index w, Index kh, Index kw,
                Index stride, Index pad, Index ho, Index wo, Scalar* out) {
  for (Index c = 0; c < channels; ++c) {
    Scalar* dst = out + c * h * w;
    for (Index ky = 0; ky < kh; ++ky) {
      for (Index kx = 0; kx < kw; ++kx) {
        const Scalar* src = cols.data() + ((c * kh + ky) * kw + kx) * ho * wo;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const Scalar* row = src + oy * wo;
          Scalar* drow = dst + iy * w;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) drow[ix] += row[ox];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void check_conv_shapes(const Tensor<Scalar>& input, const LayerParams<Scalar>& p, const char* what) {
  require_rank4(input, what);
  if (p.weights.rank() != 4)
    throw ContractViolation(std::string(what) + ": weights must be (C_out,C_in,kH,kW), got " +
                            shape_str(p.weights.shape()));
  if (p.bias.rank() != 1 || p.bias.dim(0) != p.weights.dim(0))
    throw ContractViolation(std::string(what) + ": bias shape " + shape_str(p.bias.shape()) +
                            " does not match weights " + shape_str(p.weights.shape()));
  if (input.channels() != p.weights.dim(1))
    throw ContractViolation(std::string(what) + ": input " + shape_str(input.shape()) +
                            " has wrong channel count for weights " + shape_str(p.weights.shape()));
  if (p.stride < 1 || p.padding < 0)
    throw ContractViolation(std::string(what) + ": stride must be >= 1 and padding >= 0");
  if (input.height() + 2 * p.padding < p.weights.dim(2) ||
      input.width() + 2 * p.padding < p.weights.dim(3))
    throw ContractViolation(std::string(what) + ": padded input " + shape_str(input.shape()) +
                            " smaller than kernel " + shape_str(p.weights.shape()));
}

template <typename Scalar>
bool is_pointwise(const LayerParams<Scalar>& p) {
  return p.weights.dim(2) == 1 && p.weights.dim(3) == 1 && p.stride == 1 && p.padding == 0;
}

}  // namespace detail

/// 2-D cross-correlation plus bias, computed as im2col followed by one GEMM per batch item.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const LayerParams<Scalar>& p) {
  detail::check_conv_shapes(input, p, "conv2d");
  const Index n = input.batch(), cin = input.channels(), h = input.height(), w = input.width();
  const Index cout = p.weights.dim(0), kh = p.weights.dim(2), kw = p.weights.dim(3);
  const Index ho = detail::conv_out_extent(h, kh, p.stride, p.padding);
  const Index wo = detail::conv_out_extent(w, kw, p.stride, p.padding);

  Tensor<Scalar> out({n, cout, ho, wo});
  ConstPlaneMap<Scalar> wm(p.weights.ptr(), cout, cin * kh * kw);
  RowMatrix<Scalar> cols;
  for (Index b = 0; b < n; ++b) {
    auto dst = out.item(b);
    if (detail::is_pointwise(p)) {
      dst.noalias() = wm * input.item(b);
    } else {
      detail::im2col(input.ptr() + b * cin * h * w, cin, h, w, kh, kw, p.stride, p.padding, ho, wo,
                     cols);
      dst.noalias() = wm * cols;
    }
    dst.colwise() += p.bias.data();
  }
  return out;
}

template <typename Scalar>
Conv2dGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input, const LayerParams<Scalar>& p,
                                    const Tensor<Scalar>& grad_out) {
  detail::check_conv_shapes(input, p, "conv2d_backward");
  const Index n = input.batch(), cin = input.channels(), h = input.height(), w = input.width();
  const Index cout = p.weights.dim(0), kh = p.weights.dim(2), kw = p.weights.dim(3);
  const Index ho = detail::conv_out_extent(h, kh, p.stride, p.padding);
  const Index wo = detail::conv_out_extent(w, kw, p.stride, p.padding);
  const Shape expected{n, cout, ho, wo};
  if (grad_out.shape() != expected)
    throw ContractViolation("conv2d_backward: grad_out shape " + shape_str(grad_out.shape()) +
                            " does not match output shape " + shape_str(expected));

  Conv2dGrads<Scalar> g{Tensor<Scalar>(input.shape()), Tensor<Scalar>(p.weights.shape()),
                        Tensor<Scalar>(p.bias.shape())};
  ConstPlaneMap<Scalar> wm(p.weights.ptr(), cout, cin * kh * kw);
  PlaneMap<Scalar> gw(g.weights.ptr(), cout, cin * kh * kw);
  RowMatrix<Scalar> cols, gcols;
  for (Index b = 0; b < n; ++b) {
    auto go = grad_out.item(b);
    g.bias.data() += go.rowwise().sum();
    if (detail::is_pointwise(p)) {
      gw.noalias() += go * input.item(b).transpose();
      g.input.item(b).noalias() = wm.transpose() * go;
    } else {
      detail::im2col(input.ptr() + b * cin * h * w, cin, h, w, kh, kw, p.stride, p.padding, ho, wo,
                     cols);
      gw.noalias() += go * cols.transpose();
      gcols.noalias() = wm.transpose() * go;
      detail::col2im_add(gcols, cin, h, w, kh, kw, p.stride, p.padding, ho, wo,
                         g.input.ptr() + b * cin * h * w);
    }
  }
  return g;
}

/// Nearest-neighbour 2x upsampling.
template <typename Scalar>
Tensor<Scalar> upsample2x(const Tensor<Scalar>& input) {
  require_rank4(input, "upsample2x");
  if (input.height() < 1 || input.width() < 1)
    throw ContractViolation("upsample2x: empty spatial extent " + shape_str(input.shape()));
  const Index n = input.batch(), c = input.channels(), h = input.height(), w = input.width();
  Tensor<Scalar> out({n, c, 2 * h, 2 * w});
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch) {
      auto src = input.plane(b, ch);
      auto dst = out.plane(b, ch);
      for (Index y = 0; y < 2 * h; ++y)
        for (Index x = 0; x < 2 * w; ++x) dst(y, x) = src(y / 2, x / 2);
    }
  return out;
}

template <typename Scalar>
Tensor<Scalar> upsample2x_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& grad_out) {
  require_rank4(input, "upsample2x_backward");
  const Index n = input.batch(), c = input.channels(), h = input.height(), w = input.width();
  if (grad_out.shape() != Shape{n, c, 2 * h, 2 * w})
    throw ContractViolation("upsample2x_backward: grad_out shape " + shape_str(grad_out.shape()) +
                            " incompatible with input " + shape_str(input.shape()));
  Tensor<Scalar> g(input.shape());
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch) {
      auto go = grad_out.plane(b, ch);
      auto gi = g.plane(b, ch);
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x)
          gi(y, x) = go(2 * y, 2 * x) + go(2 * y, 2 * x + 1) + go(2 * y + 1, 2 * x) +
                     go(2 * y + 1, 2 * x + 1);
    }
  return g;
}

namespace detail {

// Offset (0..3) of the first maximum of a 2x2 window, scanning row-major.
template <typename Plane>
int argmax2x2(const Plane& src, Index y, Index x) {
  int best = 0;
  auto v = src(2 * y, 2 * x);
  const std::array<std::pair<Index, Index>, 3> rest{{{0, 1}, {1, 0}, {1, 1}}};
  for (int k = 0; k < 3; ++k) {
    const auto cand = src(2 * y + rest[k].first, 2 * x + rest[k].second);
    if (cand > v) {
      v = cand;
      best = k + 1;
    }
  }
  return best;
}

}  // namespace detail

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
template <typename Scalar>
Tensor<Scalar> maxpool2x(const Tensor<Scalar>& input) {
  require_rank4(input, "maxpool2x");
  const Index n = input.batch(), c = input.channels(), ho = input.height() / 2,
              wo = input.width() / 2;
  if (ho < 1 || wo < 1)
    throw ContractViolation("maxpool2x: spatial extent too small " + shape_str(input.shape()));
  Tensor<Scalar> out({n, c, ho, wo});
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch) {
      auto src = input.plane(b, ch);
      auto dst = out.plane(b, ch);
      for (Index y = 0; y < ho; ++y)
        for (Index x = 0; x < wo; ++x) {
          const int k = detail::argmax2x2(src, y, x);
          dst(y, x) = src(2 * y + k / 2, 2 * x + k % 2);
        }
    }
  return out;
}

template <typename Scalar>
Tensor<Scalar> maxpool2x_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& grad_out) {
  require_rank4(input, "maxpool2x_backward");
  const Index n = input.batch(), c = input.channels(), ho = input.height() / 2,
              wo = input.width() / 2;
  if (grad_out.shape() != Shape{n, c, ho, wo})
    throw ContractViolation("maxpool2x_backward: grad_out shape " + shape_str(grad_out.shape()) +
                            " incompatible with input " + shape_str(input.shape()));
  Tensor<Scalar> g(input.shape());
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch) {
      auto src = input.plane(b, ch);
      auto go = grad_out.plane(b, ch);
      auto gi = g.plane(b, ch);
      for (Index y = 0; y < ho; ++y)
        for (Index x = 0; x < wo; ++x) {
          const int k = detail::argmax2x2(src, y, x);
          gi(2 * y + k / 2, 2 * x + k % 2) += go(y, x);
        }
    }
  return g;
}

template <typename Scalar>
Tensor<Scalar> leaky_relu(const Tensor<Scalar>& input, Scalar slope) {
  Tensor<Scalar> out(input.shape());
  out.data() = input.data().unaryExpr([slope](Scalar v) { return v > Scalar(0) ? v : slope * v; });
  return out;
}

template <typename Scalar>
Tensor<Scalar> leaky_relu_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& grad_out,
                                   Scalar slope) {
  require_same_shape(input, grad_out, "leaky_relu_backward");
  Tensor<Scalar> g(input.shape());
  g.data() = (input.data().array() > Scalar(0))
                 .select(grad_out.data().array(), slope * grad_out.data().array())
                 .matrix();
  return g;
}

namespace detail {

template <typename Scalar>
void check_norm_input(const Tensor<Scalar>& input, const char* what) {
  require_rank4(input, what);
  if (input.height() * input.width() < 2)
    throw ContractViolation(std::string(what) + ": instance normalization needs at least 2 pixels "
                            "per plane, got " + shape_str(input.shape()));
}

}  // namespace detail

/// Normalizes every (n, c) plane to zero mean and unit (population) variance.
template <typename Scalar>
Tensor<Scalar> instance_norm(const Tensor<Scalar>& input, Scalar epsilon) {
  detail::check_norm_input(input, "instance_norm");
  Tensor<Scalar> out(input.shape());
  const Index hw = input.height() * input.width();
  for (Index b = 0; b < input.batch(); ++b)
    for (Index ch = 0; ch < input.channels(); ++ch) {
      const auto x = input.data().segment((b * input.channels() + ch) * hw, hw).array();
      const Scalar mean = x.mean();
      const Scalar var = (x - mean).square().mean();
      const Scalar inv = Scalar(1) / std::sqrt(var + epsilon);
      out.data().segment((b * input.channels() + ch) * hw, hw).array() = (x - mean) * inv;
    }
  return out;
}

template <typename Scalar>
Tensor<Scalar> instance_norm_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& grad_out,
                                      Scalar epsilon) {
  detail::check_norm_input(input, "instance_norm_backward");
  require_same_shape(input, grad_out, "instance_norm_backward");
  Tensor<Scalar> g(input.shape());
  const Index hw = input.height() * input.width();
  for (Index b = 0; b < input.batch(); ++b)
    for (Index ch = 0; ch < input.channels(); ++ch) {
      const Index off = (b * input.channels() + ch) * hw;
      const auto x = input.data().segment(off, hw).array();
      const auto dy = grad_out.data().segment(off, hw).array();
      const Scalar mean = x.mean();
      const Scalar var = (x - mean).square().mean();
      const Scalar inv = Scalar(1) / std::sqrt(var + epsilon);
      const auto xhat = (x - mean) * inv;
      const Scalar dy_mean = dy.mean();
      const Scalar dyx_mean = (dy * xhat).mean();
      g.data().segment(off, hw).array() = inv * (dy - dy_mean - xhat * dyx_mean);
    }
  return g;
}

/// Per-channel scale and shift: y = gamma[c] * x + beta[c].
template <typename Scalar>
Tensor<Scalar> channel_affine(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma,
                              const Tensor<Scalar>& beta) {
  require_rank4(input, "channel_affine");
  if (gamma.size() != input.channels() || beta.size() != input.channels())
    throw ContractViolation("channel_affine: gamma/beta length must equal channel count of " +
                            shape_str(input.shape()));
  Tensor<Scalar> out(input.shape());
  for (Index b = 0; b < input.batch(); ++b)
    out.item(b) = (input.item(b).array().colwise() * gamma.data().array()).colwise() +
                  beta.data().array();
  return out;
}

template <typename Scalar>
struct AffineGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
};

template <typename Scalar>
AffineGrads<Scalar> channel_affine_backward(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma,
                                            const Tensor<Scalar>& grad_out) {
  require_same_shape(input, grad_out, "channel_affine_backward");
  AffineGrads<Scalar> g{Tensor<Scalar>(input.shape()), Tensor<Scalar>(gamma.shape()),
                        Tensor<Scalar>(gamma.shape())};
  for (Index b = 0; b < input.batch(); ++b) {
    auto go = grad_out.item(b);
    g.input.item(b) = go.array().colwise() * gamma.data().array();
    g.gamma.data() += (go.array() * input.item(b).array()).rowwise().sum().matrix();
    g.beta.data() += go.rowwise().sum();
  }
  return g;
}

/// Concatenates two (N, C, H, W) tensors along the channel axis.
template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_rank4(a, "concat_channels");
  require_rank4(b, "concat_channels");
  if (a.batch() != b.batch() || a.height() != b.height() || a.width() != b.width())
    throw ContractViolation("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                            shape_str(b.shape()));
  Tensor<Scalar> out({a.batch(), a.channels() + b.channels(), a.height(), a.width()});
  for (Index n = 0; n < a.batch(); ++n) {
    out.item(n).topRows(a.channels()) = a.item(n);
    out.item(n).bottomRows(b.channels()) = b.item(n);
  }
  return out;
}

/// Splits a channel-concatenated gradient back into its two parts.
template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> split_channels(const Tensor<Scalar>& g, Index first) {
  require_rank4(g, "split_channels");
  Tensor<Scalar> a({g.batch(), first, g.height(), g.width()});
  Tensor<Scalar> b({g.batch(), g.channels() - first, g.height(), g.width()});
  for (Index n = 0; n < g.batch(); ++n) {
    a.item(n) = g.item(n).topRows(first);
    b.item(n) = g.item(n).bottomRows(g.channels() - first);
  }
  return {std::move(a), std::move(b)};
}

/// Softmax over the channel axis of (N, C, H, W) logits.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits) {
  require_rank4(logits, "softmax");
  Tensor<Scalar> out(logits.shape());
  for (Index n = 0; n < logits.batch(); ++n) {
    auto z = logits.item(n);
    auto p = out.item(n);
    const Eigen::Array<Scalar, 1, Eigen::Dynamic> zmax = z.colwise().maxCoeff().array();
    p.array() = (z.array().rowwise() - zmax).exp();
    const Eigen::Array<Scalar, 1, Eigen::Dynamic> denom = p.colwise().sum().array();
    p.array().rowwise() /= denom;
  }
  return out;
}

inline constexpr int kNumClasses = 3;  // background, axon, myelin

template <typename Scalar>
struct LossResult {
  Scalar loss;
  Scalar cross_entropy;
  Scalar soft_dice;  // mean over foreground classes
  Tensor<Scalar> grad_logits;
};

/// Equally weighted sum of softmax cross-entropy and (1 - soft Dice) over the two
/// foreground classes. Dice sums run over the whole batch.
template <typename Scalar>
LossResult<Scalar> dice_ce_loss(const Tensor<Scalar>& logits, const Tensor<Scalar>& target,
                                const std::array<Scalar, kNumClasses>& class_weights = {1, 1, 1},
                                Scalar smooth = Scalar(1e-5)) {
  require_rank4(logits, "dice_ce_loss");
  require_same_shape(logits, target, "dice_ce_loss");
  if (logits.channels() != kNumClasses)
    throw ContractViolation("dice_ce_loss: expected 3 classes, got logits " +
                            shape_str(logits.shape()));
  const Index n = logits.batch(), hw = logits.height() * logits.width();

  std::vector<int> label(static_cast<std::size_t>(n * hw));
  for (Index b = 0; b < n; ++b) {
    auto t = target.item(b);
    for (Index i = 0; i < hw; ++i) {
      int hot = -1, ones = 0;
      bool binary = true;
      for (int c = 0; c < kNumClasses; ++c) {
        const Scalar v = t(c, i);
        if (v == Scalar(1)) {
          ++ones;
          hot = c;
        } else if (v != Scalar(0)) {
          binary = false;
        }
      }
      if (!binary || ones != 1) hot = -1;
      if (hot < 0)
        throw ContractViolation("dice_ce_loss: target is not one-hot at item " + std::to_string(b) +
                                ", pixel " + std::to_string(i));
      label[static_cast<std::size_t>(b * hw + i)] = hot;
    }
  }

  const Tensor<Scalar> prob = softmax(logits);

  double wsum = 0, ce = 0;
  std::array<double, kNumClasses> inter{}, psum{}, tsum{};
  for (Index b = 0; b < n; ++b) {
    auto z = logits.item(b);
    auto p = prob.item(b);
    for (Index i = 0; i < hw; ++i) {
      const int y = label[static_cast<std::size_t>(b * hw + i)];
      const double w = class_weights[static_cast<std::size_t>(y)];
      const double zmax = z.col(i).maxCoeff();
      double lse = 0;
      for (int c = 0; c < kNumClasses; ++c) lse += std::exp(double(z(c, i)) - zmax);
      ce += w * (zmax + std::log(lse) - double(z(y, i)));
      wsum += w;
      for (int c = 1; c < kNumClasses; ++c) {
        psum[c] += p(c, i);
        if (y == c) {
          inter[c] += p(c, i);
          tsum[c] += 1;
        }
      }
    }
  }
  if (wsum <= 0) throw ContractViolation("dice_ce_loss: class weights sum to zero over target");
  ce /= wsum;

  std::array<double, kNumClasses> dice{}, denom{};
  double dice_mean = 0;
  for (int c = 1; c < kNumClasses; ++c) {
    denom[c] = psum[c] + tsum[c] + smooth;
    dice[c] = (2 * inter[c] + smooth) / denom[c];
    dice_mean += dice[c] / (kNumClasses - 1);
  }

  Tensor<Scalar> grad(logits.shape());
  for (Index b = 0; b < n; ++b) {
    auto p = prob.item(b);
    auto g = grad.item(b);
    for (Index i = 0; i < hw; ++i) {
      const int y = label[static_cast<std::size_t>(b * hw + i)];
      const double w = class_weights[static_cast<std::size_t>(y)] / wsum;
      // dL/dp for the Dice term (background does not enter).
      std::array<double, kNumClasses> gp{};
      for (int c = 1; c < kNumClasses; ++c) {
        const double t = (y == c) ? 1.0 : 0.0;
        const double dd = (2 * t * denom[c] - (2 * inter[c] + smooth)) / (denom[c] * denom[c]);
        gp[c] = -dd / (kNumClasses - 1);
      }
      double dot = 0;
      for (int c = 0; c < kNumClasses; ++c) dot += gp[c] * p(c, i);
      for (int c = 0; c < kNumClasses; ++c) {
        const double pc = p(c, i);
        const double g_ce = w * (pc - (y == c ? 1.0 : 0.0));
        g(c, i) = static_cast<Scalar>(g_ce + pc * (gp[c] - dot));
      }
    }
  }
  return {static_cast<Scalar>(ce + 1.0 - dice_mean), static_cast<Scalar>(ce),
          static_cast<Scalar>(dice_mean), std::move(grad)};
}

/// A trainable tensor plus the name of the layer it belongs to.
template <typename Scalar>
struct ParamRef {
  std::string name;
  Tensor<Scalar>* tensor;
};

template <typename Scalar>
struct SgdState {
  std::vector<VectorX<Scalar>> velocity;
};

/// Heavy-ball momentum SGD: v <- momentum * v + grad; p <- p - lr * v.
/// Gradients are read from each tensor's grad slot; missing slots count as zero.
template <typename Scalar>
void sgd_step(std::span<const ParamRef<Scalar>> params, Scalar lr, Scalar momentum,
              SgdState<Scalar>& state) {
  if (!(lr > Scalar(0))) throw ContractViolation("sgd_step: learning rate must be > 0");
  if (!(momentum >= Scalar(0) && momentum < Scalar(1)))
    throw ContractViolation("sgd_step: momentum must lie in [0, 1)");
  for (const auto& p : params)
    if (p.tensor->has_grad() && !p.tensor->grad().allFinite())
      throw NumericError("sgd_step: non-finite gradient in layer '" + p.name + "'");
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (const auto& p : params) state.velocity.push_back(VectorX<Scalar>::Zero(p.tensor->size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<Scalar>& t = *params[i].tensor;
    auto& v = state.velocity[i];
    if (v.size() != t.size())
      throw ContractViolation("sgd_step: optimizer state does not match layer '" + params[i].name +
                              "'");
    if (t.has_grad()) v = momentum * v + t.grad();
    else v *= momentum;
    t.data() -= lr * v;
  }
}

}  // namespace mseg
