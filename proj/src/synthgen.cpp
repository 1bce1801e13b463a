#include "mseg/synthgen.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace mseg {

namespace fs = std::filesystem;

const char* to_string(Polarity p) { return p == Polarity::axon_bright ? "axon-bright" : "axon-dark"; }

void SynthDomainSpec::validate() const {
  auto fail = [&](const std::string& msg) { throw ConfigError("synth spec '" + id + "': " + msg); };
  if (id.empty()) fail("id must be non-empty");
  if (height < 16 || width < 16) fail("image must be at least 16x16");
  const double limit = std::min(height, width) / 4.0;
  if (!(radius_min >= 3 && radius_min <= radius_max && radius_max <= limit))
    fail("radius range must lie within [3, min(H, W)/4 = " + std::to_string(limit) + "]");
  if (!(count_min >= 0 && count_min <= count_max)) fail("count range must satisfy 0 <= min <= max");
  if (!(thickness_min > 0 && thickness_min <= thickness_max && thickness_max < 1))
    fail("thickness fraction range must lie in (0, 1)");
  if (!(max_axis_ratio >= 1)) fail("max axis ratio must be >= 1");
  if (!(noise_sigma >= 0) || !(texture_amplitude >= 0) || !(texture_scale > 0))
    fail("noise and texture parameters must be non-negative");
  if (!(pixel_size_um > 0)) fail("pixel_size_um must be > 0");
  if (gap_px < 0 || max_attempts < 1) fail("gap must be >= 0 and attempts >= 1");
}

bool SynthObject::contains(double x, double y, double scale) const {
  const double dx = x - cx, dy = y - cy;
  const double c = std::cos(theta), s = std::sin(theta);
  const double u = (dx * c + dy * s) / (a * scale);
  const double v = (-dx * s + dy * c) / (b * scale);
  return u * u + v * v <= 1.0;
}

double SynthObject::analytic_axon_area() const { return std::numbers::pi * a * b; }

namespace {

std::mt19937_64 stream(const SynthDomainSpec& spec, int index, std::uint32_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(index), purpose};
  return std::mt19937_64(seq);
}

std::vector<SynthObject> place_objects(const SynthDomainSpec& spec, int index) {
  auto rng = stream(spec, index, 0);
  std::uniform_int_distribution<int> count_dist(spec.count_min, spec.count_max);
  std::uniform_real_distribution<double> radius(spec.radius_min, spec.radius_max);
  std::uniform_real_distribution<double> thickness(spec.thickness_min, spec.thickness_max);
  std::uniform_real_distribution<double> ratio(1.0, spec.max_axis_ratio);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const int count = count_dist(rng);
  std::vector<SynthObject> placed;
  for (int k = 0; k < count; ++k) {
    SynthObject o;
    const double r = radius(rng);
    const double e = ratio(rng);
    o.a = r * std::sqrt(e);  // area-preserving eccentricity
    o.b = r / std::sqrt(e);
    o.theta = angle(rng);
    o.thickness_fraction = thickness(rng);
    const double R = o.bounding_radius();
    const double lo = R + 1, hi_x = spec.width - 2 - R, hi_y = spec.height - 2 - R;
    bool ok = false;
    for (int attempt = 0; attempt < spec.max_attempts && !ok && hi_x > lo && hi_y > lo; ++attempt) {
      o.cx = lo + unit(rng) * (hi_x - lo);
      o.cy = lo + unit(rng) * (hi_y - lo);
      ok = std::all_of(placed.begin(), placed.end(), [&](const SynthObject& p) {
        return std::hypot(p.cx - o.cx, p.cy - o.cy) >= R + p.bounding_radius() + spec.gap_px;
      });
    }
    if (!ok)
      throw DataError(DataErrorKind::infeasible_packing,
                      "synth spec '" + spec.id + "', image " + std::to_string(index) + ": could not place object " +
                          std::to_string(k + 1) + " of " + std::to_string(count) + " after " +
                          std::to_string(spec.max_attempts) + " attempts");
    placed.push_back(o);
  }
  return placed;
}

}  // namespace

SynthImage render(const SynthDomainSpec& spec, int index, std::vector<SynthObject> objects) {
  const int H = spec.height, W = spec.width;
  SynthImage out;
  out.axon = Mask::Zero(H, W);
  out.myelin = Mask::Zero(H, W);
  for (const SynthObject& o : objects) {
    const double R = o.bounding_radius();
    const int y0 = std::max(0, static_cast<int>(std::floor(o.cy - R))), y1 = std::min(H - 1, static_cast<int>(std::ceil(o.cy + R)));
    const int x0 = std::max(0, static_cast<int>(std::floor(o.cx - R))), x1 = std::min(W - 1, static_cast<int>(std::ceil(o.cx + R)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        if (o.contains(x, y))
          out.axon(y, x) = 1;
        else if (o.contains(x, y, o.outer_scale()))
          out.myelin(y, x) = 1;
      }
  }

  // low-frequency background: a few random plane waves of the given wavelength
  auto rng = stream(spec, index, 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  struct Wave {
    double kx, ky, phase;
  };
  std::vector<Wave> waves(3);
  for (auto& w : waves) {
    const double dir = unit(rng) * 2 * std::numbers::pi;
    const double k = 2 * std::numbers::pi / (spec.texture_scale * (0.75 + 0.5 * unit(rng)));
    w = {k * std::cos(dir), k * std::sin(dir), unit(rng) * 2 * std::numbers::pi};
  }

  out.image.resize(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double v;
      if (out.axon(y, x))
        v = spec.axon_level;
      else if (out.myelin(y, x))
        v = spec.myelin_level;
      else {
        double t = 0;
        for (const auto& w : waves) t += std::sin(w.kx * x + w.ky * y + w.phase);
        v = spec.background_level + spec.texture_amplitude * t / static_cast<double>(waves.size());
      }
      if (spec.noise_sigma > 0) v += noise(rng);
      v = std::clamp(v, 0.0, 1.0);
      if (spec.polarity == Polarity::axon_dark) v = 1.0 - v;
      out.image(y, x) = static_cast<float>(v);
    }
  out.objects = std::move(objects);
  return out;
}

SynthImage generate_image(const SynthDomainSpec& spec, int index) {
  spec.validate();
  return render(spec, index, place_objects(spec, index));
}

Dataset generate(const SynthDomainSpec& spec, int n_images, const fs::path& out_dir) {
  spec.validate();
  if (n_images < 1) throw ConfigError("synth: n_images must be >= 1");
  fs::create_directories(out_dir);
  Dataset ds;
  ds.descriptor.id = spec.id;
  ds.descriptor.modality = Modality::SYNTH;
  ds.descriptor.species = "synthetic";
  ds.descriptor.pathology = "none";
  ds.descriptor.organ = "synthetic";
  ds.descriptor.pixel_size_um = spec.pixel_size_um;
  for (int i = 0; i < n_images; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "img_%03d", i);
    const SynthImage s = generate_image(spec, i);
    Sample sample;
    sample.sample_id = namespaced_id(spec.id, stem);
    sample.domain_id = spec.id;
    sample.image_path = (out_dir / (std::string(stem) + ".png")).string();
    sample.axon_mask_path = (out_dir / (std::string(stem) + "_seg-axon.png")).string();
    sample.myelin_mask_path = (out_dir / (std::string(stem) + "_seg-myelin.png")).string();
    sample.height = spec.height;
    sample.width = spec.width;
    write_gray_png(sample.image_path, s.image);
    write_mask_png(sample.axon_mask_path, s.axon);
    write_mask_png(sample.myelin_mask_path, s.myelin);
    ds.samples.push_back(std::move(sample));
  }
  write_manifest(ds, out_dir / "manifest.json");
  return ingest(out_dir / "manifest.json");
}

std::vector<SynthDomainSpec> domain_presets() {
  SynthDomainSpec bf;
  bf.id = "SYN-BF";
  bf.polarity = Polarity::axon_bright;
  bf.pixel_size_um = 0.1;
  bf.seed = 101;

  // same geometry statistics, inverted contrast
  SynthDomainSpec em = bf;
  em.id = "SYN-EM";
  em.polarity = Polarity::axon_dark;
  em.pixel_size_um = 0.01;
  em.seed = 202;

  SynthDomainSpec big;
  big.id = "SYN-BIG";
  big.polarity = Polarity::axon_bright;
  big.height = big.width = 192;
  big.radius_min = 14;
  big.radius_max = 22;
  big.count_min = 2;
  big.count_max = 3;
  big.thickness_min = 0.3;
  big.thickness_max = 0.4;
  big.texture_scale = 96;
  big.pixel_size_um = 0.02;
  big.seed = 303;
  return {bf, em, big};
}

SynthDomainSpec preset(const std::string& id) {
  for (auto& s : domain_presets())
    if (s.id == id) return s;
  throw ConfigError("unknown synth preset '" + id + "' (known: SYN-BF, SYN-EM, SYN-BIG)");
}

}  // namespace mseg
