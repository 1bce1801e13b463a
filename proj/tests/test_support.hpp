#pragma once

// Independent oracles shared by the unit and acceptance suites.

#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "mseg/image.hpp"
#include "mseg/ops.hpp"

namespace mseg::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

/// Direct quadruple-loop cross-correlation.
inline Tensor<double> naive_conv2d(const Tensor<double>& in, const LayerParams<double>& p) {
  const Index n = in.batch(), cin = in.channels(), h = in.height(), w = in.width();
  const Index cout = p.weights.dim(0), kh = p.weights.dim(2), kw = p.weights.dim(3);
  const Index ho = (h + 2 * p.padding - kh) / p.stride + 1;
  const Index wo = (w + 2 * p.padding - kw) / p.stride + 1;
  Tensor<double> out({n, cout, ho, wo});
  for (Index b = 0; b < n; ++b)
    for (Index co = 0; co < cout; ++co)
      for (Index oy = 0; oy < ho; ++oy)
        for (Index ox = 0; ox < wo; ++ox) {
          double acc = p.bias[co];
          for (Index ci = 0; ci < cin; ++ci)
            for (Index ky = 0; ky < kh; ++ky)
              for (Index kx = 0; kx < kw; ++kx) {
                const Index iy = oy * p.stride - p.padding + ky;
                const Index ix = ox * p.stride - p.padding + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += p.weights.at(co, ci, ky, kx) * in.at(b, ci, iy, ix);
              }
          out.at(b, co, oy, ox) = acc;
        }
  return out;
}

inline double rel_err(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / scale;
}

/// Max relative error between `analytic` and central differences of `loss`
/// with respect to every entry of `x` (perturbed in place, then restored).
inline double finite_difference_error(Tensor<double>& x, const VectorX<double>& analytic,
                                      const std::function<double()>& loss, double eps = 1e-5) {
  double worst = 0;
  for (Index i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double up = loss();
    x[i] = orig - eps;
    const double down = loss();
    x[i] = orig;
    worst = std::max(worst, rel_err(analytic[i], (up - down) / (2 * eps)));
  }
  return worst;
}

/// Scalar probe <r, f(x)> used to turn a tensor-valued op into a loss.
inline double probe(const Tensor<double>& out, const Tensor<double>& r) {
  return out.data().dot(r.data());
}

/// Dice by explicit pixel counting; empty-empty is 1.
inline double brute_force_dice(const Mask& pred, const Mask& gt) {
  long inter = 0, np = 0, ng = 0;
  for (Index y = 0; y < pred.rows(); ++y)
    for (Index x = 0; x < pred.cols(); ++x) {
      np += pred(y, x) != 0;
      ng += gt(y, x) != 0;
      inter += pred(y, x) && gt(y, x);
    }
  return np + ng == 0 ? 1.0 : 2.0 * inter / static_cast<double>(np + ng);
}

/// Per-myelin-pixel owner by exhaustive search: nearest axon pixel, ties to the lowest label.
inline Image<std::int32_t> brute_force_owner(const Image<std::int32_t>& axon_labels, const Mask& myelin) {
  const Index H = myelin.rows(), W = myelin.cols();
  Image<std::int32_t> owner = Image<std::int32_t>::Zero(H, W);
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      if (!myelin(y, x)) continue;
      long best = std::numeric_limits<long>::max();
      int label = 0;
      for (Index v = 0; v < H; ++v)
        for (Index u = 0; u < W; ++u) {
          const int l = axon_labels(v, u);
          if (!l) continue;
          const long d = (v - y) * (v - y) + (u - x) * (u - x);
          if (d < best || (d == best && l < label)) {
            best = d;
            label = l;
          }
        }
      owner(y, x) = label;
    }
  return owner;
}

}  // namespace mseg::testing
