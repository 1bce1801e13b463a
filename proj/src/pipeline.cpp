#include "mseg/pipeline.hpp"

#include <algorithm>

namespace mseg {

ImageD to_grayscale(const std::vector<ImageD>& ch) {
  if (ch.size() == 1) return ch[0];
  if (ch.size() == 3) {
    if (ch[1].rows() != ch[0].rows() || ch[2].rows() != ch[0].rows() || ch[1].cols() != ch[0].cols() ||
        ch[2].cols() != ch[0].cols())
      throw ContractViolation("to_grayscale: channel planes differ in size");
    // 0.299 r + 0.587 g + 0.114 b, arranged so that r = g = b maps to itself exactly
    return ch[0] + 0.587 * (ch[1] - ch[0]) + 0.114 * (ch[2] - ch[0]);
  }
  throw ContractViolation("to_grayscale: expected 1 or 3 channels, got " + std::to_string(ch.size()));
}

ImageD to_grayscale(const RawImage& raw) {
  std::vector<ImageD> ch;
  ch.reserve(raw.channels.size());
  const double scale = raw.max_value();
  for (const auto& c : raw.channels) ch.push_back(c.cast<double>() / scale);
  return to_grayscale(ch);
}

ImageD normalize(const ImageD& image) {
  if (image.size() == 0) return image;
  const double lo = image.minCoeff(), hi = image.maxCoeff();
  if (!(hi > lo)) return ImageD::Zero(image.rows(), image.cols());
  return (image - lo) / (hi - lo);
}

ImageF load_preprocessed(const std::string& path) {
  return normalize(to_grayscale(read_image(path))).cast<float>();
}

Mask read_mask(const std::string& path) {
  RawImage raw = read_image(path);
  return (raw.channels.at(0) != 0).cast<std::uint8_t>();
}

Image<std::uint8_t> label_map(const Mask& axon, const Mask& myelin) {
  if (axon.rows() != myelin.rows() || axon.cols() != myelin.cols())
    throw ContractViolation("label_map: axon and myelin masks differ in size");
  Image<std::uint8_t> labels = Image<std::uint8_t>::Zero(axon.rows(), axon.cols());
  for (Index i = 0; i < labels.size(); ++i)
    labels(i) = axon(i) ? kAxon : (myelin(i) ? kMyelin : kBackground);
  return labels;
}

LabeledImage load_labeled(const Sample& sample) {
  if (!sample.labeled()) throw DataError(DataErrorKind::bad_manifest, "sample " + sample.sample_id + " has no masks");
  LabeledImage out;
  out.sample_id = sample.sample_id;
  out.image = load_preprocessed(sample.image_path);
  out.labels = label_map(read_mask(sample.axon_mask_path), read_mask(sample.myelin_mask_path));
  if (out.labels.rows() != out.image.rows() || out.labels.cols() != out.image.cols())
    throw DataError(DataErrorKind::dimension_mismatch, "sample " + sample.sample_id + ": masks differ from image size");
  return out;
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

Patch sample_patch(const LabeledImage& src, int ph, int pw, std::mt19937_64& rng, double foreground_prob) {
  if (ph < 1 || pw < 1) throw ContractViolation("sample_patch: patch dims must be positive");
  const int H = static_cast<int>(src.image.rows()), W = static_cast<int>(src.image.cols());
  if (H < 1 || W < 1) throw ContractViolation("sample_patch: empty image");

  // smaller images are centered in the patch
  auto range = [](int n, int p) { return n >= p ? std::pair{0, n - p} : std::pair{-(p - n) / 2, -(p - n) / 2}; };
  const auto [top_lo, top_hi] = range(H, ph);
  const auto [left_lo, left_hi] = range(W, pw);

  int top, left;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  bool centered = false;
  if (foreground_prob > 0 && unit(rng) < foreground_prob) {
    std::vector<Index> fg;
    for (Index i = 0; i < src.labels.size(); ++i)
      if (src.labels(i) != kBackground) fg.push_back(i);
    if (!fg.empty()) {
      const Index pick = fg[std::uniform_int_distribution<std::size_t>(0, fg.size() - 1)(rng)];
      const int cy = static_cast<int>(pick / W), cx = static_cast<int>(pick % W);
      top = std::clamp(cy - ph / 2, top_lo, top_hi);
      left = std::clamp(cx - pw / 2, left_lo, left_hi);
      centered = true;
    }
  }
  if (!centered) {
    top = std::uniform_int_distribution<int>(top_lo, top_hi)(rng);
    left = std::uniform_int_distribution<int>(left_lo, left_hi)(rng);
  }

  Patch p;
  p.sample_id = src.sample_id;
  p.top = top;
  p.left = left;
  p.image.resize(ph, pw);
  p.labels.resize(ph, pw);
  for (int y = 0; y < ph; ++y)
    for (int x = 0; x < pw; ++x) {
      const int sy = top + y, sx = left + x;
      const bool inside = sy >= 0 && sy < H && sx >= 0 && sx < W;
      p.image(y, x) = src.image(reflect_index(sy, H), reflect_index(sx, W));
      p.labels(y, x) = inside ? src.labels(sy, sx) : kBackground;
    }
  return p;
}

void hflip(Patch& p) {
  p.image = p.image.rowwise().reverse().eval();
  p.labels = p.labels.rowwise().reverse().eval();
}

void vflip(Patch& p) {
  p.image = p.image.colwise().reverse().eval();
  p.labels = p.labels.colwise().reverse().eval();
}

void rot90(Patch& p, int k) {
  k = ((k % 4) + 4) % 4;
  for (int i = 0; i < k; ++i) {
    // counter-clockwise quarter turn: transpose then flip rows
    p.image = p.image.transpose().colwise().reverse().eval();
    p.labels = p.labels.transpose().colwise().reverse().eval();
  }
}

void augment(Patch& p, const AugmentConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) < cfg.p_hflip) hflip(p);
  if (unit(rng) < cfg.p_vflip) vflip(p);
  if (unit(rng) < cfg.p_rot90) {
    const bool square = p.image.rows() == p.image.cols();
    const int k = square ? std::uniform_int_distribution<int>(1, 3)(rng) : 2;
    rot90(p, k);
  }
  if (unit(rng) < cfg.p_intensity) {
    const double scale = cfg.scale_min + unit(rng) * (cfg.scale_max - cfg.scale_min);
    const double shift = (2 * unit(rng) - 1) * cfg.shift_max;
    p.image = (p.image * static_cast<float>(scale) + static_cast<float>(shift)).cwiseMax(0.0f).cwiseMin(1.0f);
  }
}

PatchBatch make_batch(const std::vector<Patch>& patches) {
  if (patches.empty()) throw ContractViolation("make_batch: no patches");
  const Index N = static_cast<Index>(patches.size());
  const Index h = patches[0].image.rows(), w = patches[0].image.cols();
  PatchBatch b;
  b.images = Tensor<float>({N, 1, h, w});
  b.targets = Tensor<float>({N, 3, h, w});
  for (Index n = 0; n < N; ++n) {
    const Patch& p = patches[static_cast<std::size_t>(n)];
    if (p.image.rows() != h || p.image.cols() != w)
      throw ContractViolation("make_batch: patches differ in size");
    b.images.plane(n, 0) = p.image.matrix();
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) b.targets.at(n, p.labels(y, x), y, x) = 1.0f;
    b.sample_ids.push_back(p.sample_id);
  }
  return b;
}

Tensor<float> image_tensor(const ImageF& image) {
  Tensor<float> t({1, 1, image.rows(), image.cols()});
  t.plane(0, 0) = image.matrix();
  return t;
}

}  // namespace mseg
