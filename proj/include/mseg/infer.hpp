#pragma once

#include <memory>
#include <span>
#include <vector>

#include "mseg/image.hpp"
#include "mseg/unet.hpp"

namespace mseg {

enum class BlendMode { uniform, gaussian };

struct TilingPlan {
  int tile_h = 128;
  int tile_w = 128;
  double overlap = 0.5;  // fraction of the tile shared with the next one
  BlendMode blend = BlendMode::gaussian;
  double sigma_fraction = 1.0 / 8.0;  // gaussian sigma relative to the tile size
  int threads = 1;

  /// Throws ConfigError when tiles are not multiples of `size_divisor` or overlap is outside [0, 1).
  void validate(int size_divisor) const;
};

/// Anything mapping a (N, 1, h, w) batch to (N, C, h, w) logits.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual Tensor<float> logits(const Tensor<float>& x) const = 0;
  virtual int size_divisor() const = 0;
  virtual int num_classes() const { return kNumClasses; }
};

class UNetPredictor final : public Predictor {
 public:
  explicit UNetPredictor(UNet<float> net) : net_(std::move(net)) {}
  explicit UNetPredictor(const ModelCheckpoint& ck) : net_(model_from_checkpoint<float>(ck)) {}
  Tensor<float> logits(const Tensor<float>& x) const override { return net_.forward(x); }
  int size_divisor() const override { return net_.size_divisor(); }
  int num_classes() const override { return net_.config().out_classes; }

 private:
  UNet<float> net_;
};

/// Per-class probability planes, each the size of the input image.
using ProbMaps = std::vector<ImageF>;

/// Tile origins along one axis of length n (after padding to at least `tile`).
std::vector<int> tile_positions(int n, int tile, double overlap);

/// Blend weights for one tile, peak 1.
ImageD blend_weights(const TilingPlan& plan);

/// Sliding-window softmax probabilities. Output dims equal input dims; no resampling.
ProbMaps predict_tiled(const Predictor& model, const ImageF& image, const TilingPlan& plan);

/// Arithmetic mean of member probability maps.
ProbMaps ensemble_predict(std::span<const Predictor* const> members, const ImageF& image, const TilingPlan& plan);
ProbMaps ensemble_predict(std::span<const ModelCheckpoint> checkpoints, const ImageF& image, const TilingPlan& plan);

struct SegmentationMasks {
  Mask axon, myelin;
};

/// Per-pixel argmax; ties go to the lower class index.
SegmentationMasks argmax_masks(const ProbMaps& probs);

}  // namespace mseg
