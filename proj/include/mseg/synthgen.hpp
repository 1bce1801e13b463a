#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mseg/datahub.hpp"
#include "mseg/image.hpp"

namespace mseg {

enum class Polarity { axon_bright, axon_dark };

const char* to_string(Polarity p);

/// Parameters of one synthetic imaging domain. Lengths are in pixels.
struct SynthDomainSpec {
  std::string id;
  Polarity polarity = Polarity::axon_bright;
  double radius_min = 4, radius_max = 8;  // inner (axon) radius before eccentricity
  int count_min = 6, count_max = 12;
  double thickness_min = 0.3, thickness_max = 0.45;  // myelin fraction of the outer radius
  double max_axis_ratio = 1.3;
  double noise_sigma = 0.04;
  double texture_scale = 48;  // wavelength of the background modulation
  double texture_amplitude = 0.08;
  // intensities for the axon-bright rendering; axon-dark renders 1 - value
  double background_level = 0.55, axon_level = 0.85, myelin_level = 0.15;
  int height = 128, width = 128;
  double pixel_size_um = 0.1;
  std::uint64_t seed = 0;
  int gap_px = 2;
  int max_attempts = 2000;  // per object

  /// Throws ConfigError on an invalid spec.
  void validate() const;
};

/// One myelinated fiber: an elliptical axon of semi-axes (a, b), rotated by theta, inside a
/// concentric ellipse scaled by 1 / (1 - thickness_fraction).
struct SynthObject {
  double cx = 0, cy = 0;
  double a = 0, b = 0;
  double theta = 0;
  double thickness_fraction = 0;

  double outer_scale() const { return 1.0 / (1.0 - thickness_fraction); }
  double bounding_radius() const { return std::max(a, b) * outer_scale(); }
  /// Whether pixel center (x, y) lies in the ellipse scaled by `scale`.
  bool contains(double x, double y, double scale = 1.0) const;
  double analytic_axon_area() const;
  /// Inner over outer equivalent diameter of the continuous geometry.
  double analytic_g_ratio() const { return 1.0 - thickness_fraction; }
};

struct SynthImage {
  ImageF image;  // values in [0, 1]
  Mask axon, myelin;
  std::vector<SynthObject> objects;
};

/// Pure function of (spec, index). Throws DataError(infeasible_packing) if the drawn count
/// cannot be placed without overlap.
SynthImage generate_image(const SynthDomainSpec& spec, int index);

/// Renders the given geometry with the spec's texture and noise for `index`.
SynthImage render(const SynthDomainSpec& spec, int index, std::vector<SynthObject> objects);

/// Writes n images plus masks and `manifest.json` into out_dir; returns the ingested dataset.
Dataset generate(const SynthDomainSpec& spec, int n_images, const std::filesystem::path& out_dir);

/// SYN-BF (axon-bright), SYN-EM (axon-dark, same geometry statistics), SYN-BIG (large axons).
std::vector<SynthDomainSpec> domain_presets();
SynthDomainSpec preset(const std::string& id);

}  // namespace mseg
