#include "mseg/infer.hpp"

#include <cmath>
#include <thread>

#include "mseg/pipeline.hpp"

namespace mseg {

void TilingPlan::validate(int d) const {
  if (tile_h < d || tile_w < d || tile_h % d != 0 || tile_w % d != 0)
    throw ConfigError("tiling: tile " + std::to_string(tile_h) + "x" + std::to_string(tile_w) +
                      " must be a positive multiple of the network size unit " + std::to_string(d));
  if (!(overlap >= 0 && overlap < 1)) throw ConfigError("tiling: overlap must lie in [0, 1)");
  if (blend == BlendMode::gaussian && !(sigma_fraction > 0)) throw ConfigError("tiling: sigma fraction must be > 0");
  if (threads < 1) throw ConfigError("tiling: threads must be >= 1");
}

std::vector<int> tile_positions(int n, int tile, double overlap) {
  if (n <= tile) return {0};
  const int step = std::max(1, static_cast<int>(std::floor(tile * (1.0 - overlap))));
  const int count = (n - tile + step - 1) / step + 1;
  std::vector<int> pos(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    pos[static_cast<std::size_t>(i)] =
        static_cast<int>(std::lround(static_cast<double>(i) * (n - tile) / (count - 1)));
  return pos;
}

ImageD blend_weights(const TilingPlan& plan) {
  if (plan.blend == BlendMode::uniform) return ImageD::Ones(plan.tile_h, plan.tile_w);
  const double sy = plan.tile_h * plan.sigma_fraction, sx = plan.tile_w * plan.sigma_fraction;
  const double cy = (plan.tile_h - 1) / 2.0, cx = (plan.tile_w - 1) / 2.0;
  ImageD w(plan.tile_h, plan.tile_w);
  for (int y = 0; y < plan.tile_h; ++y)
    for (int x = 0; x < plan.tile_w; ++x) {
      const double dy = (y - cy) / sy, dx = (x - cx) / sx;
      w(y, x) = std::exp(-0.5 * (dy * dy + dx * dx));
    }
  return w / w.maxCoeff();
}

ProbMaps predict_tiled(const Predictor& model, const ImageF& image, const TilingPlan& plan) {
  plan.validate(model.size_divisor());
  const int H = static_cast<int>(image.rows()), W = static_cast<int>(image.cols());
  if (H < 1 || W < 1) throw ContractViolation("predict_tiled: empty image");
  const int th = plan.tile_h, tw = plan.tile_w;
  const int PH = std::max(H, th), PW = std::max(W, tw);
  const int C = model.num_classes();

  ImageF padded(PH, PW);
  for (int y = 0; y < PH; ++y)
    for (int x = 0; x < PW; ++x) padded(y, x) = image(reflect_index(y, H), reflect_index(x, W));

  std::vector<std::pair<int, int>> tiles;
  for (int y : tile_positions(PH, th, plan.overlap))
    for (int x : tile_positions(PW, tw, plan.overlap)) tiles.emplace_back(y, x);

  const ImageD weight = blend_weights(plan);
  std::vector<ImageD> acc(static_cast<std::size_t>(C), ImageD::Zero(PH, PW));
  ImageD wsum = ImageD::Zero(PH, PW);

  auto run_tile = [&](std::size_t t) {
    const auto [y, x] = tiles[t];
    return softmax(model.logits(image_tensor(padded.block(y, x, th, tw))));
  };

  // tiles run in parallel chunks; accumulation follows tile order so results do not
  // depend on the thread count
  const std::size_t chunk = static_cast<std::size_t>(plan.threads);
  std::vector<Tensor<float>> out(chunk);
  for (std::size_t start = 0; start < tiles.size(); start += chunk) {
    const std::size_t n = std::min(chunk, tiles.size() - start);
    if (n == 1) {
      out[0] = run_tile(start);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(n);
      for (std::size_t k = 0; k < n; ++k)
        pool.emplace_back([&, k] {
          try {
            out[k] = run_tile(start + k);
          } catch (...) {
            errors[k] = std::current_exception();
          }
        });
      for (auto& t : pool) t.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    }
    for (std::size_t k = 0; k < n; ++k) {
      const auto [y, x] = tiles[start + k];
      const Tensor<float>& p = out[k];
      if (p.channels() != C || p.height() != th || p.width() != tw)
        throw ContractViolation("predict_tiled: model returned " + shape_str(p.shape()));
      for (int c = 0; c < C; ++c)
        acc[static_cast<std::size_t>(c)].block(y, x, th, tw) += p.plane(0, c).array().cast<double>() * weight;
      wsum.block(y, x, th, tw) += weight;
    }
  }

  ProbMaps result;
  for (int c = 0; c < C; ++c)
    result.push_back((acc[static_cast<std::size_t>(c)] / wsum).block(0, 0, H, W).cast<float>());
  return result;
}

ProbMaps ensemble_predict(std::span<const Predictor* const> members, const ImageF& image, const TilingPlan& plan) {
  if (members.empty()) throw ContractViolation("ensemble_predict: no models given");
  const int C = members[0]->num_classes();
  std::vector<ImageD> acc;
  for (const Predictor* m : members) {
    if (m->num_classes() != C) throw ContractViolation("ensemble_predict: members disagree on class count");
    const ProbMaps p = predict_tiled(*m, image, plan);
    if (acc.empty())
      for (const auto& plane : p) acc.push_back(plane.cast<double>());
    else
      for (int c = 0; c < C; ++c) acc[static_cast<std::size_t>(c)] += p[static_cast<std::size_t>(c)].cast<double>();
  }
  ProbMaps out;
  for (const auto& a : acc) out.push_back((a / static_cast<double>(members.size())).cast<float>());
  return out;
}

ProbMaps ensemble_predict(std::span<const ModelCheckpoint> checkpoints, const ImageF& image, const TilingPlan& plan) {
  if (checkpoints.empty()) throw ContractViolation("ensemble_predict: no checkpoints given");
  std::vector<std::unique_ptr<Predictor>> owned;
  std::vector<const Predictor*> members;
  for (const auto& ck : checkpoints) {
    owned.push_back(std::make_unique<UNetPredictor>(ck));
    members.push_back(owned.back().get());
  }
  return ensemble_predict(std::span<const Predictor* const>(members), image, plan);
}

SegmentationMasks argmax_masks(const ProbMaps& probs) {
  if (probs.size() != static_cast<std::size_t>(kNumClasses))
    throw ContractViolation("argmax_masks: expected 3 probability planes, got " + std::to_string(probs.size()));
  const Index H = probs[0].rows(), W = probs[0].cols();
  SegmentationMasks m{Mask::Zero(H, W), Mask::Zero(H, W)};
  for (Index i = 0; i < H * W; ++i) {
    int best = 0;
    for (int c = 1; c < kNumClasses; ++c)
      if (probs[static_cast<std::size_t>(c)](i) > probs[static_cast<std::size_t>(best)](i)) best = c;
    if (best == kAxon) m.axon(i) = 1;
    if (best == kMyelin) m.myelin(i) = 1;
  }
  return m;
}

}  // namespace mseg
