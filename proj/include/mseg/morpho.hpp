#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "mseg/image.hpp"

namespace mseg {

struct MorphoOptions {
  double orphan_radius_px = 3.0;  // myelin regions farther than this from every axon are orphans
  int low_confidence_px = 5;      // axons smaller than this are flagged
  int rays = 36;
  double ray_step_px = 0.1;
};

struct AxonInstance {
  int id = 0;                       // 1-based, raster order of the first axon pixel
  std::vector<Index> axon_pixels;   // linear indices y * width + x, ascending
  std::vector<Index> myelin_pixels;
  double centroid_x = 0, centroid_y = 0;  // of the axon pixels
  bool touches_border = false;
};

struct InstanceSet {
  int height = 0, width = 0;
  std::vector<AxonInstance> instances;
  std::vector<std::vector<Index>> orphans;  // unassigned myelin regions
  Image<std::int32_t> axon_labels;    // instance id per axon pixel, 0 elsewhere
  Image<std::int32_t> myelin_labels;  // owning instance id, -1 for orphans, 0 elsewhere
};

/// Squared Euclidean distance from each pixel to the nearest foreground pixel (inf if none).
ImageD squared_distance_transform(const Mask& foreground);

/// 8-connected component labels in raster order of first pixel; returns the count.
int label_components(const Mask& mask, Image<std::int32_t>& labels);

/// Axon instances from 8-connected axon components; each myelin pixel goes to the instance
/// owning the Euclidean-nearest axon pixel (ties to the lowest id).
InstanceSet extract_instances(const Mask& axon, const Mask& myelin, const MorphoOptions& opt = {});

struct MorphometricRecord {
  int instance_id = 0;
  double centroid_x_px = 0, centroid_y_px = 0;
  double axon_area_um2 = 0;
  double equiv_diameter_um = 0;
  double outer_diameter_um = 0;
  double myelin_thickness_um = 0;
  std::optional<double> g_ratio;  // undefined without myelin
  bool touches_border = false;
  bool low_confidence = false;
};

std::vector<MorphometricRecord> compute_morphometrics(const InstanceSet& set, double pixel_size_um,
                                                      const MorphoOptions& opt = {});

void export_records(std::span<const MorphometricRecord> records, const std::filesystem::path& path);
std::vector<MorphometricRecord> read_records(const std::filesystem::path& path);

}  // namespace mseg
