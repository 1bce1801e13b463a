#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mseg/ops.hpp"

namespace mseg {

enum class NormKind : std::uint8_t { instance = 0, none = 1 };

/// Encoder-decoder layout. Channels double per level up to `max_channels`.
struct UNetConfig {
  int depth = 4;
  int base_channels = 16;
  int max_channels = 256;
  int in_channels = 1;
  int out_classes = 3;
  double leaky_slope = 0.01;
  NormKind norm = NormKind::instance;
  std::uint64_t seed = 0;

  int channels_at(int level) const {
    long c = static_cast<long>(base_channels) << level;
    return static_cast<int>(std::min<long>(c, max_channels));
  }
  /// Input spatial extents must be multiples of this.
  int size_divisor() const { return 1 << (depth - 1); }

  void validate() const {
    if (depth < 2) throw ConfigError("unet: depth must be >= 2, got " + std::to_string(depth));
    if (depth > 12) throw ConfigError("unet: depth " + std::to_string(depth) + " is unreasonably deep");
    if (base_channels < 1 || max_channels < base_channels)
      throw ConfigError("unet: need 1 <= base_channels <= max_channels");
    if (in_channels != 1) throw ConfigError("unet: input must be single-channel grayscale");
    if (out_classes != kNumClasses)
      throw ConfigError("unet: out_classes must be 3 (background, axon, myelin)");
    if (!(leaky_slope >= 0 && leaky_slope < 1)) throw ConfigError("unet: leaky slope must lie in [0,1)");
  }

  /// Throws ConfigError unless a patch of the given extents fits the network.
  void check_patch(Index height, Index width) const {
    const int d = size_divisor();
    if (height % d != 0 || width % d != 0)
      throw ConfigError("unet: patch " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible by " + std::to_string(d) + " (depth " +
                        std::to_string(depth) + ")");
  }

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

/// conv3x3 -> [instance norm -> per-channel affine] -> leaky relu
template <typename Scalar>
struct ConvBlock {
  std::string name;
  LayerParams<Scalar> conv;
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  bool normalized = true;

  struct Cache {
    Tensor<Scalar> input, conv_out, norm_out, pre_act;
  };

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Cache* cache) const {
    Tensor<Scalar> c = conv2d(x, conv);
    Tensor<Scalar> pre;
    Tensor<Scalar> n;
    if (normalized) {
      n = instance_norm(c, conv.epsilon);
      pre = channel_affine(n, gamma, beta);
    } else {
      pre = c;
    }
    Tensor<Scalar> y = leaky_relu(pre, conv.negative_slope);
    if (cache) *cache = Cache{x, std::move(c), std::move(n), std::move(pre)};
    return y;
  }

  Tensor<Scalar> backward(const Cache& cache, const Tensor<Scalar>& grad_out) {
    Tensor<Scalar> g = leaky_relu_backward(cache.pre_act, grad_out, conv.negative_slope);
    if (normalized) {
      auto ag = channel_affine_backward(cache.norm_out, gamma, g);
      gamma.grad() += ag.gamma.data();
      beta.grad() += ag.beta.data();
      g = instance_norm_backward(cache.conv_out, ag.input, conv.epsilon);
    }
    auto cg = conv2d_backward(cache.input, conv, g);
    conv.weights.grad() += cg.weights.data();
    conv.bias.grad() += cg.bias.data();
    return std::move(cg.input);
  }

  void collect(std::vector<ParamRef<Scalar>>& out) {
    out.push_back({name + ".conv.weight", &conv.weights});
    out.push_back({name + ".conv.bias", &conv.bias});
    if (normalized) {
      out.push_back({name + ".norm.gamma", &gamma});
      out.push_back({name + ".norm.beta", &beta});
    }
  }
};

/// U-Net with same-padded convolutions: output spatial size equals input size.
template <typename Scalar>
class UNet {
 public:
  struct Cache {
    std::vector<typename ConvBlock<Scalar>::Cache> enc, dec;
    std::vector<Tensor<Scalar>> enc_out, dec_out;
    Tensor<Scalar> head_input;
  };

  explicit UNet(const UNetConfig& config) : config_(config) {
    config_.validate();
    build_layers();
    initialize();
  }

  const UNetConfig& config() const { return config_; }
  int size_divisor() const { return config_.size_divisor(); }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const { return run(x, nullptr); }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Cache& cache) const { return run(x, &cache); }

  /// Accumulates parameter gradients; returns the gradient with respect to the input.
  Tensor<Scalar> backward(const Cache& cache, const Tensor<Scalar>& grad_logits) {
    const int depth = config_.depth;
    auto hg = conv2d_backward(cache.head_input, head_, grad_logits);
    head_.weights.grad() += hg.weights.data();
    head_.bias.grad() += hg.bias.data();

    std::vector<Tensor<Scalar>> g_enc(static_cast<std::size_t>(depth));
    Tensor<Scalar> g_dec = std::move(hg.input);
    for (int l = 0; l < depth - 1; ++l) {
      Tensor<Scalar> g = dec_block(l, 1).backward(dec_cache(cache, l, 1), g_dec);
      g = dec_block(l, 0).backward(dec_cache(cache, l, 0), g);
      auto [g_skip, g_up] = split_channels(g, config_.channels_at(l));
      accumulate(g_enc[static_cast<std::size_t>(l)], g_skip);
      const Tensor<Scalar>& prev = (l + 1 == depth - 1) ? cache.enc_out.back()
                                                        : cache.dec_out[static_cast<std::size_t>(l + 1)];
      Tensor<Scalar> g_prev = upsample2x_backward(prev, g_up);
      if (l + 1 == depth - 1) accumulate(g_enc[static_cast<std::size_t>(depth - 1)], g_prev);
      else g_dec = std::move(g_prev);
    }

    Tensor<Scalar> g_in;
    for (int l = depth - 1; l >= 0; --l) {
      Tensor<Scalar> g = enc_block(l, 1).backward(enc_cache(cache, l, 1), g_enc[static_cast<std::size_t>(l)]);
      g_in = enc_block(l, 0).backward(enc_cache(cache, l, 0), g);
      if (l > 0)
        accumulate(g_enc[static_cast<std::size_t>(l - 1)],
                   maxpool2x_backward(cache.enc_out[static_cast<std::size_t>(l - 1)], g_in));
    }
    return g_in;
  }

  /// Trainable tensors in serialization order.
  std::vector<ParamRef<Scalar>> parameters() {
    std::vector<ParamRef<Scalar>> out;
    for (auto& b : enc_) b.collect(out);
    for (auto& b : dec_) b.collect(out);
    out.push_back({"head.conv.weight", &head_.weights});
    out.push_back({"head.conv.bias", &head_.bias});
    return out;
  }

  std::vector<const Tensor<Scalar>*> parameters() const {
    std::vector<const Tensor<Scalar>*> out;
    for (auto& p : const_cast<UNet*>(this)->parameters()) out.push_back(p.tensor);
    return out;
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto* t : parameters()) n += t->size();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor->drop_grad();
  }

  template <typename Other>
  UNet<Other> cast() const {
    UNet<Other> out(config_);
    auto src = parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i].tensor->data() = src[i]->data().template cast<Other>();
    return out;
  }

 private:
  Tensor<Scalar> run(const Tensor<Scalar>& x, Cache* cache) const {
    require_rank4(x, "unet.forward");
    if (x.channels() != config_.in_channels)
      throw ContractViolation("unet.forward: expected " + std::to_string(config_.in_channels) +
                              " input channel(s), got " + shape_str(x.shape()));
    const int d = size_divisor();
    if (x.height() % d != 0 || x.width() % d != 0)
      throw ContractViolation("unet.forward: input " + shape_str(x.shape()) +
                              " must have height and width divisible by " + std::to_string(d) +
                              "; pad the input to the next multiple");
    const int depth = config_.depth;
    if (cache) {
      cache->enc.assign(static_cast<std::size_t>(2 * depth), {});
      cache->dec.assign(static_cast<std::size_t>(2 * (depth - 1)), {});
      cache->enc_out.assign(static_cast<std::size_t>(depth), {});
      cache->dec_out.assign(static_cast<std::size_t>(depth - 1), {});
    }
    auto c_of = [&](std::vector<typename ConvBlock<Scalar>::Cache>& v, std::size_t i) {
      return cache ? &v[i] : nullptr;
    };

    std::vector<Tensor<Scalar>> skips(static_cast<std::size_t>(depth));
    Tensor<Scalar> h = x;
    for (int l = 0; l < depth; ++l) {
      if (l > 0) h = maxpool2x(skips[static_cast<std::size_t>(l - 1)]);
      const auto i = static_cast<std::size_t>(2 * l);
      h = enc_[i].forward(h, cache ? c_of(cache->enc, i) : nullptr);
      h = enc_[i + 1].forward(h, cache ? c_of(cache->enc, i + 1) : nullptr);
      skips[static_cast<std::size_t>(l)] = h;
    }
    for (int l = depth - 2; l >= 0; --l) {
      h = concat_channels(skips[static_cast<std::size_t>(l)], upsample2x(h));
      const auto i = static_cast<std::size_t>(2 * l);
      h = dec_[i].forward(h, cache ? c_of(cache->dec, i) : nullptr);
      h = dec_[i + 1].forward(h, cache ? c_of(cache->dec, i + 1) : nullptr);
      if (cache) cache->dec_out[static_cast<std::size_t>(l)] = h;
    }
    if (cache) {
      cache->enc_out = skips;
      cache->head_input = h;
    }
    return conv2d(h, head_);
  }

  static void accumulate(Tensor<Scalar>& acc, const Tensor<Scalar>& g) {
    if (acc.size() == 0) acc = g;
    else acc.data() += g.data();
  }

  ConvBlock<Scalar>& enc_block(int l, int k) { return enc_[static_cast<std::size_t>(2 * l + k)]; }
  ConvBlock<Scalar>& dec_block(int l, int k) { return dec_[static_cast<std::size_t>(2 * l + k)]; }
  static const typename ConvBlock<Scalar>::Cache& enc_cache(const Cache& c, int l, int k) {
    return c.enc[static_cast<std::size_t>(2 * l + k)];
  }
  static const typename ConvBlock<Scalar>::Cache& dec_cache(const Cache& c, int l, int k) {
    return c.dec[static_cast<std::size_t>(2 * l + k)];
  }

  ConvBlock<Scalar> make_block(std::string name, int cin, int cout) const {
    ConvBlock<Scalar> b;
    b.name = std::move(name);
    b.conv.weights = Tensor<Scalar>({cout, cin, 3, 3});
    b.conv.bias = Tensor<Scalar>({cout});
    b.conv.stride = 1;
    b.conv.padding = 1;
    b.conv.negative_slope = static_cast<Scalar>(config_.leaky_slope);
    b.conv.epsilon = Scalar(1e-5);
    b.normalized = config_.norm == NormKind::instance;
    if (b.normalized) {
      b.gamma = Tensor<Scalar>({cout}, Scalar(1));
      b.beta = Tensor<Scalar>({cout}, Scalar(0));
    }
    return b;
  }

  void build_layers() {
    const int depth = config_.depth;
    for (int l = 0; l < depth; ++l) {
      const int cin = l == 0 ? config_.in_channels : config_.channels_at(l - 1);
      const int c = config_.channels_at(l);
      enc_.push_back(make_block("enc" + std::to_string(l) + ".0", cin, c));
      enc_.push_back(make_block("enc" + std::to_string(l) + ".1", c, c));
    }
    for (int l = 0; l < depth - 1; ++l) {
      const int c = config_.channels_at(l);
      dec_.push_back(make_block("dec" + std::to_string(l) + ".0", c + config_.channels_at(l + 1), c));
      dec_.push_back(make_block("dec" + std::to_string(l) + ".1", c, c));
    }
    head_.weights = Tensor<Scalar>({config_.out_classes, config_.channels_at(0), 1, 1});
    head_.bias = Tensor<Scalar>({config_.out_classes});
  }

  // He-normal with leaky-slope correction; drawn in double so every scalar type
  // built from one seed starts from the same weights.
  void initialize() {
    std::mt19937_64 rng(config_.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double a = config_.leaky_slope;
    auto fill = [&](Tensor<Scalar>& w) {
      const double fan_in = static_cast<double>(w.dim(1) * w.dim(2) * w.dim(3));
      const double std = std::sqrt(2.0 / ((1.0 + a * a) * fan_in));
      for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(std * normal(rng));
    };
    for (auto& b : enc_) fill(b.conv.weights);
    for (auto& b : dec_) fill(b.conv.weights);
    fill(head_.weights);
  }

  UNetConfig config_;
  std::vector<ConvBlock<Scalar>> enc_, dec_;
  LayerParams<Scalar> head_;
};

/// Where a checkpoint's weights came from.
struct Provenance {
  std::vector<std::string> sources;    // dataset ids
  int fold = -1;
  std::uint64_t training_seed = 0;
  std::vector<std::string> train_ids;  // sample ids seen during training

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct ModelCheckpoint {
  UNetConfig config;
  std::vector<Tensor<float>> weights;  // UNet::parameters() order
  int epoch = 0;
  double best_val_metric = 0.0;
  Provenance provenance;
};

template <typename Scalar>
ModelCheckpoint make_checkpoint(const UNet<Scalar>& model, int epoch, double best_val_metric,
                                Provenance provenance) {
  ModelCheckpoint ck;
  ck.config = model.config();
  for (const auto* t : model.parameters()) ck.weights.push_back(t->template cast<float>());
  ck.epoch = epoch;
  ck.best_val_metric = best_val_metric;
  ck.provenance = std::move(provenance);
  return ck;
}

template <typename Scalar>
UNet<Scalar> model_from_checkpoint(const ModelCheckpoint& ck) {
  UNet<Scalar> model(ck.config);
  auto params = model.parameters();
  if (params.size() != ck.weights.size())
    throw CheckpointError(CheckpointErrorKind::malformed,
                          "checkpoint holds " + std::to_string(ck.weights.size()) +
                              " tensors, config expects " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].tensor->shape() != ck.weights[i].shape())
      throw CheckpointError(CheckpointErrorKind::malformed,
                            "checkpoint tensor '" + params[i].name + "' has shape " +
                                shape_str(ck.weights[i].shape()) + ", expected " +
                                shape_str(params[i].tensor->shape()));
    params[i].tensor->data() = ck.weights[i].data().template cast<Scalar>();
  }
  return model;
}

inline constexpr char kCheckpointMagic[4] = {'A', 'X', 'F', '1'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize(const ModelCheckpoint& ck);
ModelCheckpoint deserialize(std::span<const std::uint8_t> bytes);
void save_checkpoint(const ModelCheckpoint& ck, const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);

}  // namespace mseg
