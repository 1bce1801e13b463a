#pragma once

#include <random>
#include <string>
#include <vector>

#include "mseg/datahub.hpp"
#include "mseg/image.hpp"
#include "mseg/tensor.hpp"

namespace mseg {

// Label map values.
inline constexpr std::uint8_t kBackground = 0, kAxon = 1, kMyelin = 2;

/// Scales each channel by its dtype maximum, then reduces 3 channels with luma weights.
ImageD to_grayscale(const RawImage& raw);
/// Channels already scaled to [0, 1]; accepts 1 or 3 channels.
ImageD to_grayscale(const std::vector<ImageD>& channels);

/// Per-image min-max scaling to [0, 1]; constant images map to zeros.
ImageD normalize(const ImageD& image);

/// Reads, converts to grayscale and normalizes an image file.
ImageF load_preprocessed(const std::string& path);

/// Binary mask file (nonzero = foreground) as a 0/1 plane.
Mask read_mask(const std::string& path);

/// Combines binary masks into a label map (background 0, axon 1, myelin 2).
Image<std::uint8_t> label_map(const Mask& axon, const Mask& myelin);

struct LabeledImage {
  std::string sample_id;
  ImageF image;                // preprocessed, [0, 1]
  Image<std::uint8_t> labels;  // kBackground / kAxon / kMyelin
};

/// Loads a labeled sample. Never consults the domain pixel size.
LabeledImage load_labeled(const Sample& sample);

struct Patch {
  std::string sample_id;
  ImageF image;
  Image<std::uint8_t> labels;
  int top = 0, left = 0;  // top-left in source coordinates, negative when padded
};

/// Reflect index into [0, n) without repeating the edge sample.
int reflect_index(int i, int n);

/// Draws one patch. The top-left is uniform over valid positions, except that with
/// probability `foreground_prob` the patch is centered on a random foreground pixel.
/// Images smaller than the patch are padded: reflected for the image, background for labels.
Patch sample_patch(const LabeledImage& src, int patch_h, int patch_w, std::mt19937_64& rng,
                   double foreground_prob = 0.5);

struct AugmentConfig {
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  double p_rot90 = 0.5;  // odd quarter turns only on square patches
  double p_intensity = 0.3;
  double scale_min = 0.9, scale_max = 1.1;
  double shift_max = 0.1;

  static AugmentConfig none() { return {0, 0, 0, 0}; }
};

void hflip(Patch& p);
void vflip(Patch& p);
/// Rotates by k quarter turns counter-clockwise.
void rot90(Patch& p, int k);

void augment(Patch& p, const AugmentConfig& cfg, std::mt19937_64& rng);

struct PatchBatch {
  Tensor<float> images;   // (N, 1, h, w)
  Tensor<float> targets;  // (N, 3, h, w), one-hot
  std::vector<std::string> sample_ids;
};

/// Stacks equally sized patches.
PatchBatch make_batch(const std::vector<Patch>& patches);

/// (1, 1, H, W) tensor of a single image.
Tensor<float> image_tensor(const ImageF& image);

}  // namespace mseg
