#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mseg/errors.hpp"

namespace mseg {

enum class Modality { TEM, SEM, BF, CARS, SYNTH };

const char* to_string(Modality m);
Modality modality_from_string(const std::string& s);

/// Dataset-level metadata: acquisition modality, subject and pixel size.
struct DomainDescriptor {
  std::string id;
  Modality modality = Modality::SYNTH;
  std::string species;
  std::string pathology;
  std::string organ;
  double pixel_size_um = 1.0;
  bool annotated = true;
  bool is_public = true;
};

/// One image and its optional axon / myelin masks. Paths are absolute after ingest.
struct Sample {
  std::string sample_id;  // "<domain-id>/<stem>"
  std::string image_path;
  std::string axon_mask_path;
  std::string myelin_mask_path;
  std::string domain_id;
  int height = 0;
  int width = 0;

  bool labeled() const { return !axon_mask_path.empty() && !myelin_mask_path.empty(); }
};

struct Dataset {
  DomainDescriptor descriptor;
  std::vector<Sample> samples;

  const Sample& sample(const std::string& id) const;
};

/// Datasets keyed by domain id; ids are unique.
class Registry {
 public:
  void add(Dataset dataset);
  const Dataset& get(const std::string& id) const;
  bool contains(const std::string& id) const { return datasets_.count(id) != 0; }
  std::vector<std::string> ids() const;
  /// Finds the sample across all datasets.
  const Sample& sample(const std::string& sample_id) const;

 private:
  std::map<std::string, Dataset> datasets_;
};

/// Namespaced sample id: "<domain-id>/<stem>".
std::string namespaced_id(const std::string& domain_id, const std::string& stem);

/// Parses and validates a manifest: every image exists, masks match the image size,
/// are binary (0/255) and do not overlap.
Dataset ingest(const std::filesystem::path& manifest_path);

/// Writes a manifest whose paths are relative to the manifest's directory.
void write_manifest(const Dataset& dataset, const std::filesystem::path& manifest_path);

struct SplitRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct SplitEntry {
  std::string sample_id;
  std::string domain_id;

  friend bool operator==(const SplitEntry&, const SplitEntry&) = default;
};

struct SplitSet {
  std::string source;
  std::vector<SplitEntry> train, val, test;
  std::uint64_t seed = 0;
  SplitRatios ratios;

  std::size_t size() const { return train.size() + val.size() + test.size(); }
};

/// Split sizes for n items: largest-remainder rounding, every split non-empty when n >= 3.
std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& ratios);

/// Deterministic shuffled partition of the dataset's samples.
SplitSet split(const Dataset& dataset, const SplitRatios& ratios, std::uint64_t seed);
SplitSet split(const std::string& source, std::vector<SplitEntry> items, const SplitRatios& ratios,
               std::uint64_t seed);

struct AggregatedDataset {
  std::vector<std::string> sources;
  std::vector<SplitEntry> train, val, test;
};

/// Combines per-source splits: test and train are exact unions, and every source's own
/// validation split is carried over wholesale so each source is represented in validation.
AggregatedDataset aggregate(std::span<const SplitSet> sources);

struct LeakageFinding {
  std::string sample_id;
  std::vector<std::string> splits;  // names of the splits containing the id
};

struct LeakageReport {
  std::vector<LeakageFinding> findings;
  bool clean() const { return findings.empty(); }
};

LeakageReport verify_no_leakage(const AggregatedDataset& aggregated);

void save_split(const SplitSet& split, const std::filesystem::path& path);
SplitSet load_split(const std::filesystem::path& path);

}  // namespace mseg
