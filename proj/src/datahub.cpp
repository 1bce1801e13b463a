#include "mseg/datahub.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "json.hpp"
#include "mseg/image.hpp"

namespace mseg {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(DataErrorKind kind) {
  switch (kind) {
    case DataErrorKind::missing_file: return "missing_file";
    case DataErrorKind::dimension_mismatch: return "dimension_mismatch";
    case DataErrorKind::non_binary_mask: return "non_binary_mask";
    case DataErrorKind::overlapping_masks: return "overlapping_masks";
    case DataErrorKind::bad_manifest: return "bad_manifest";
    case DataErrorKind::duplicate_id: return "duplicate_id";
    case DataErrorKind::too_small: return "too_small";
    case DataErrorKind::empty_val_pool: return "empty_val_pool";
    case DataErrorKind::unreadable_image: return "unreadable_image";
    case DataErrorKind::infeasible_packing: return "infeasible_packing";
  }
  return "unknown";
}

const char* to_string(Modality m) {
  switch (m) {
    case Modality::TEM: return "TEM";
    case Modality::SEM: return "SEM";
    case Modality::BF: return "BF";
    case Modality::CARS: return "CARS";
    case Modality::SYNTH: return "SYNTH";
  }
  return "SYNTH";
}

Modality modality_from_string(const std::string& s) {
  for (Modality m : {Modality::TEM, Modality::SEM, Modality::BF, Modality::CARS, Modality::SYNTH})
    if (s == to_string(m)) return m;
  throw DataError(DataErrorKind::bad_manifest, "unknown modality '" + s + "'");
}

std::string namespaced_id(const std::string& domain_id, const std::string& stem) {
  return domain_id + "/" + stem;
}

const Sample& Dataset::sample(const std::string& id) const {
  for (const auto& s : samples)
    if (s.sample_id == id) return s;
  throw DataError(DataErrorKind::bad_manifest, "no sample '" + id + "' in dataset " + descriptor.id);
}

void Registry::add(Dataset dataset) {
  const std::string id = dataset.descriptor.id;
  if (datasets_.count(id))
    throw DataError(DataErrorKind::duplicate_id, "dataset id '" + id + "' already registered");
  datasets_.emplace(id, std::move(dataset));
}

const Dataset& Registry::get(const std::string& id) const {
  auto it = datasets_.find(id);
  if (it == datasets_.end()) throw DataError(DataErrorKind::bad_manifest, "unknown dataset '" + id + "'");
  return it->second;
}

std::vector<std::string> Registry::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, _] : datasets_) out.push_back(id);
  return out;
}

const Sample& Registry::sample(const std::string& sample_id) const {
  const auto slash = sample_id.find('/');
  if (slash == std::string::npos)
    throw DataError(DataErrorKind::bad_manifest, "sample id '" + sample_id + "' is not namespaced");
  return get(sample_id.substr(0, slash)).sample(sample_id);
}

namespace {

template <typename T>
T require_field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key))
    throw DataError(DataErrorKind::bad_manifest, where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw DataError(DataErrorKind::bad_manifest, where + ": bad field '" + key + "': " + e.what());
  }
}

// Masks must be 8-bit with values in {0, 255}; returns the 0/1 plane.
Mask load_binary_mask(const std::string& path, const std::string& sample_id, int height, int width) {
  RawImage raw = read_image(path);
  if (raw.height() != height || raw.width() != width)
    throw DataError(DataErrorKind::dimension_mismatch,
                    "sample " + sample_id + ": mask " + path + " is " + std::to_string(raw.height()) +
                        "x" + std::to_string(raw.width()) + " but image is " + std::to_string(height) +
                        "x" + std::to_string(width));
  const auto& plane = raw.channels[0];
  const bool binary = raw.channels.size() == 1 && raw.bit_depth == 8 &&
                      ((plane == 0) || (plane == 255)).all();
  if (!binary)
    throw DataError(DataErrorKind::non_binary_mask,
                    "sample " + sample_id + ": mask " + path + " is not binary (expected 0/255)");
  return (plane == 255).cast<std::uint8_t>();
}

}  // namespace

Dataset ingest(const fs::path& manifest_path) {
  if (!fs::exists(manifest_path))
    throw DataError(DataErrorKind::missing_file, "manifest not found: " + manifest_path.string());
  json j;
  try {
    std::ifstream in(manifest_path);
    in >> j;
  } catch (const json::exception& e) {
    throw DataError(DataErrorKind::bad_manifest,
                    "manifest " + manifest_path.string() + " is not valid JSON: " + e.what());
  }
  const std::string where = manifest_path.string();
  if (!j.contains("descriptor") || !j.contains("samples") || !j["samples"].is_array())
    throw DataError(DataErrorKind::bad_manifest, where + ": needs a 'descriptor' block and a 'samples' array");

  Dataset ds;
  const json& d = j["descriptor"];
  DomainDescriptor& desc = ds.descriptor;
  desc.id = require_field<std::string>(d, "id", where);
  desc.modality = modality_from_string(require_field<std::string>(d, "modality", where));
  desc.species = d.value("species", "");
  desc.pathology = d.value("pathology", "");
  desc.organ = d.value("organ", "");
  desc.pixel_size_um = require_field<double>(d, "pixel_size_um", where);
  desc.annotated = d.value("annotated", true);
  desc.is_public = d.value("public", true);
  if (desc.id.empty() || desc.id.find('/') != std::string::npos)
    throw DataError(DataErrorKind::bad_manifest, where + ": dataset id must be non-empty without '/'");
  if (!(desc.pixel_size_um > 0))
    throw DataError(DataErrorKind::bad_manifest, where + ": pixel_size_um must be > 0");

  const fs::path root = manifest_path.parent_path();
  std::set<std::string> seen;
  for (const json& s : j["samples"]) {
    Sample sample;
    const std::string stem = require_field<std::string>(s, "id", where);
    sample.sample_id = namespaced_id(desc.id, stem);
    sample.domain_id = desc.id;
    if (!seen.insert(sample.sample_id).second)
      throw DataError(DataErrorKind::duplicate_id, where + ": duplicate sample id '" + stem + "'");
    sample.image_path = (root / require_field<std::string>(s, "image", where)).string();
    if (!fs::exists(sample.image_path))
      throw DataError(DataErrorKind::missing_file,
                      "sample " + sample.sample_id + ": image not found: " + sample.image_path);
    std::tie(sample.height, sample.width) = read_image_size(sample.image_path);

    const bool has_axon = s.contains("axon_mask") && !s["axon_mask"].is_null();
    const bool has_myelin = s.contains("myelin_mask") && !s["myelin_mask"].is_null();
    if (has_axon != has_myelin)
      throw DataError(DataErrorKind::bad_manifest,
                      "sample " + sample.sample_id + ": axon and myelin masks must come together");
    if (has_axon) {
      sample.axon_mask_path = (root / s["axon_mask"].get<std::string>()).string();
      sample.myelin_mask_path = (root / s["myelin_mask"].get<std::string>()).string();
      for (const auto& p : {sample.axon_mask_path, sample.myelin_mask_path})
        if (!fs::exists(p))
          throw DataError(DataErrorKind::missing_file, "sample " + sample.sample_id + ": mask not found: " + p);
      const Mask axon = load_binary_mask(sample.axon_mask_path, sample.sample_id, sample.height, sample.width);
      const Mask myelin =
          load_binary_mask(sample.myelin_mask_path, sample.sample_id, sample.height, sample.width);
      if (((axon != 0) && (myelin != 0)).any())
        throw DataError(DataErrorKind::overlapping_masks,
                        "sample " + sample.sample_id + ": axon and myelin masks overlap");
    }
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

void write_manifest(const Dataset& dataset, const fs::path& manifest_path) {
  const DomainDescriptor& d = dataset.descriptor;
  json j;
  j["descriptor"] = {{"id", d.id},
                     {"modality", to_string(d.modality)},
                     {"species", d.species},
                     {"pathology", d.pathology},
                     {"organ", d.organ},
                     {"pixel_size_um", d.pixel_size_um},
                     {"annotated", d.annotated},
                     {"public", d.is_public}};
  const fs::path root = manifest_path.parent_path();
  auto rel = [&](const std::string& p) { return fs::path(p).lexically_relative(root).generic_string(); };
  j["samples"] = json::array();
  for (const auto& s : dataset.samples) {
    const std::string prefix = d.id + "/";
    std::string stem = s.sample_id.rfind(prefix, 0) == 0 ? s.sample_id.substr(prefix.size()) : s.sample_id;
    json e = {{"id", stem}, {"image", rel(s.image_path)}};
    if (s.labeled()) {
      e["axon_mask"] = rel(s.axon_mask_path);
      e["myelin_mask"] = rel(s.myelin_mask_path);
    }
    j["samples"].push_back(std::move(e));
  }
  std::ofstream out(manifest_path);
  if (!out) throw std::runtime_error("cannot write manifest " + manifest_path.string());
  out << j.dump(2) << '\n';
}

std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& r) {
  const std::array<double, 3> ratio{r.train, r.val, r.test};
  double total = 0;
  for (double v : ratio) {
    if (!(v > 0)) throw ContractViolation("split ratios must all be positive");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-6) throw ContractViolation("split ratios must sum to 1");

  std::array<std::size_t, 3> size{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = ratio[i] * static_cast<double>(n);
    size[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    frac[i] = exact - static_cast<double>(size[i]);
    assigned += size[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++size[order[k % 3]];
  // keep every split populated when possible
  for (std::size_t i = 0; i < 3 && n >= 3; ++i) {
    if (size[i] > 0) continue;
    auto donor = std::max_element(size.begin(), size.end());
    --*donor;
    ++size[i];
  }
  return size;
}

SplitSet split(const std::string& source, std::vector<SplitEntry> items, const SplitRatios& ratios,
               std::uint64_t seed) {
  if (items.size() < 3)
    throw DataError(DataErrorKind::too_small, "dataset " + source + " has " + std::to_string(items.size()) +
                                                  " samples; at least 3 are needed for a train/val/test split");
  const auto sizes = split_sizes(items.size(), ratios);
  std::sort(items.begin(), items.end(),
            [](const SplitEntry& a, const SplitEntry& b) { return a.sample_id < b.sample_id; });
  std::mt19937_64 rng(seed);
  std::shuffle(items.begin(), items.end(), rng);

  SplitSet out;
  out.source = source;
  out.seed = seed;
  out.ratios = ratios;
  auto it = items.begin();
  out.train.assign(it, it + static_cast<std::ptrdiff_t>(sizes[0]));
  it += static_cast<std::ptrdiff_t>(sizes[0]);
  out.val.assign(it, it + static_cast<std::ptrdiff_t>(sizes[1]));
  it += static_cast<std::ptrdiff_t>(sizes[1]);
  out.test.assign(it, items.end());
  return out;
}

SplitSet split(const Dataset& dataset, const SplitRatios& ratios, std::uint64_t seed) {
  std::vector<SplitEntry> items;
  for (const auto& s : dataset.samples) items.push_back({s.sample_id, s.domain_id});
  return split(dataset.descriptor.id, std::move(items), ratios, seed);
}

AggregatedDataset aggregate(std::span<const SplitSet> sources) {
  if (sources.size() < 2)
    throw ContractViolation("aggregate: need at least two source datasets, got " +
                            std::to_string(sources.size()));
  AggregatedDataset agg;
  std::map<std::string, std::string> owner;
  for (const SplitSet& s : sources) {
    for (const auto* part : {&s.train, &s.val, &s.test})
      for (const SplitEntry& e : *part) {
        auto [it, fresh] = owner.emplace(e.sample_id, s.source);
        if (!fresh)
          throw DataError(DataErrorKind::duplicate_id, "aggregate: sample id '" + e.sample_id +
                                                           "' appears in sources " + it->second +
                                                           " and " + s.source);
      }
    if (s.val.empty())
      throw DataError(DataErrorKind::empty_val_pool,
                      "aggregate: source " + s.source +
                          " has no validation samples, but samples from every source must be "
                          "included in the aggregated validation set");
    agg.sources.push_back(s.source);
    agg.train.insert(agg.train.end(), s.train.begin(), s.train.end());
    agg.val.insert(agg.val.end(), s.val.begin(), s.val.end());
    agg.test.insert(agg.test.end(), s.test.begin(), s.test.end());
  }
  return agg;
}

LeakageReport verify_no_leakage(const AggregatedDataset& agg) {
  std::map<std::string, std::vector<std::string>> where;
  const std::pair<const char*, const std::vector<SplitEntry>*> parts[] = {
      {"train", &agg.train}, {"val", &agg.val}, {"test", &agg.test}};
  for (const auto& [name, entries] : parts)
    for (const SplitEntry& e : *entries) {
      auto& v = where[e.sample_id];
      if (std::find(v.begin(), v.end(), name) == v.end()) v.push_back(name);
    }
  LeakageReport report;
  for (auto& [id, splits] : where)
    if (splits.size() > 1) report.findings.push_back({id, splits});
  return report;
}

namespace {

json entries_to_json(const std::vector<SplitEntry>& v) {
  json a = json::array();
  for (const auto& e : v) a.push_back({{"id", e.sample_id}, {"domain", e.domain_id}});
  return a;
}

std::vector<SplitEntry> entries_from_json(const json& a) {
  std::vector<SplitEntry> v;
  for (const auto& e : a) v.push_back({e.at("id").get<std::string>(), e.at("domain").get<std::string>()});
  return v;
}

}  // namespace

void save_split(const SplitSet& s, const fs::path& path) {
  json j = {{"source", s.source},
            {"seed", s.seed},
            {"ratios", {s.ratios.train, s.ratios.val, s.ratios.test}},
            {"train", entries_to_json(s.train)},
            {"val", entries_to_json(s.val)},
            {"test", entries_to_json(s.test)}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

SplitSet load_split(const fs::path& path) {
  if (!fs::exists(path)) throw DataError(DataErrorKind::missing_file, "split file not found: " + path.string());
  try {
    json j;
    std::ifstream(path) >> j;
    SplitSet s;
    s.source = j.at("source").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    const auto r = j.at("ratios").get<std::vector<double>>();
    if (r.size() != 3) throw DataError(DataErrorKind::bad_manifest, "split ratios must have 3 entries");
    s.ratios = {r[0], r[1], r[2]};
    s.train = entries_from_json(j.at("train"));
    s.val = entries_from_json(j.at("val"));
    s.test = entries_from_json(j.at("test"));
    return s;
  } catch (const json::exception& e) {
    throw DataError(DataErrorKind::bad_manifest, "malformed split file " + path.string() + ": " + e.what());
  }
}

}  // namespace mseg
