#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "json.hpp"
#include "mseg/datahub.hpp"
#include "mseg/image.hpp"

using namespace mseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("mseg_datahub_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Writes an image plus masks for `stem`; the axon mask is a 2x2 square at the top-left.
void write_sample(const fs::path& dir, const std::string& stem, int h, int w) {
  Image<std::uint8_t> img = Image<std::uint8_t>::Constant(h, w, 100);
  write_png((dir / (stem + ".png")).string(), img);
  Mask axon = Mask::Zero(h, w), myelin = Mask::Zero(h, w);
  axon.block(0, 0, 2, 2).setOnes();
  myelin.block(h - 2, w - 2, 2, 2).setOnes();
  write_mask_png((dir / (stem + "_seg-axon.png")).string(), axon);
  write_mask_png((dir / (stem + "_seg-myelin.png")).string(), myelin);
}

nlohmann::json manifest_json(const std::string& id, const std::vector<std::string>& stems) {
  nlohmann::json j;
  j["descriptor"] = {{"id", id},          {"modality", "BF"},        {"species", "rat"},
                     {"pathology", "none"}, {"organ", "spinal cord"}, {"pixel_size_um", 0.1},
                     {"annotated", true},   {"public", true}};
  j["samples"] = nlohmann::json::array();
  for (const auto& s : stems)
    j["samples"].push_back(
        {{"id", s}, {"image", s + ".png"}, {"axon_mask", s + "_seg-axon.png"}, {"myelin_mask", s + "_seg-myelin.png"}});
  return j;
}

fs::path write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream(p) << j.dump(2);
  return p;
}

DataErrorKind ingest_error(const fs::path& manifest) {
  try {
    ingest(manifest);
  } catch (const DataError& e) {
    return e.kind();
  }
  FAIL("ingest did not throw");
  return DataErrorKind::bad_manifest;
}

std::vector<SplitEntry> entries(const std::string& domain, int n) {
  std::vector<SplitEntry> v;
  for (int i = 0; i < n; ++i) v.push_back({namespaced_id(domain, "s" + std::to_string(i)), domain});
  return v;
}

std::set<std::string> ids_of(const std::vector<SplitEntry>& v) {
  std::set<std::string> s;
  for (const auto& e : v) s.insert(e.sample_id);
  return s;
}

}  // namespace

TEST_CASE("ingest: three valid samples") {
  TempDir tmp("ok");
  for (auto s : {"a", "b", "c"}) write_sample(tmp.path, s, 12, 10);
  auto m = write_json(tmp.path / "manifest.json", manifest_json("BF1", {"a", "b", "c"}));
  Dataset ds = ingest(m);
  CHECK(ds.samples.size() == 3);
  CHECK(ds.descriptor.modality == Modality::BF);
  CHECK(ds.samples[1].sample_id == "BF1/b");
  CHECK(ds.samples[1].height == 12);
  CHECK(ds.samples[1].width == 10);
  CHECK(ds.samples[0].labeled());

  // round trip through write_manifest
  write_manifest(ds, tmp.path / "copy.json");
  Dataset again = ingest(tmp.path / "copy.json");
  REQUIRE(again.samples.size() == 3);
  CHECK(again.samples[2].image_path == ds.samples[2].image_path);
}

TEST_CASE("ingest: error paths are distinct and name the sample") {
  TempDir tmp("err");
  write_sample(tmp.path, "a", 12, 10);

  SUBCASE("dimension mismatch") {
    write_mask_png((tmp.path / "a_seg-axon.png").string(), Mask::Zero(10, 10));
    auto m = write_json(tmp.path / "m.json", manifest_json("D", {"a"}));
    CHECK(ingest_error(m) == DataErrorKind::dimension_mismatch);
    try {
      ingest(m);
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("D/a") != std::string::npos);
    }
  }
  SUBCASE("non-binary mask") {
    Image<std::uint8_t> bad = Image<std::uint8_t>::Zero(12, 10);
    bad(3, 3) = 3;
    write_png((tmp.path / "a_seg-myelin.png").string(), bad);
    CHECK(ingest_error(write_json(tmp.path / "m.json", manifest_json("D", {"a"}))) ==
          DataErrorKind::non_binary_mask);
  }
  SUBCASE("overlap") {
    Mask m = Mask::Zero(12, 10);
    m(0, 0) = 1;
    write_mask_png((tmp.path / "a_seg-myelin.png").string(), m);
    CHECK(ingest_error(write_json(tmp.path / "m.json", manifest_json("D", {"a"}))) ==
          DataErrorKind::overlapping_masks);
  }
  SUBCASE("missing image") {
    fs::remove(tmp.path / "a.png");
    CHECK(ingest_error(write_json(tmp.path / "m.json", manifest_json("D", {"a"}))) == DataErrorKind::missing_file);
  }
  SUBCASE("bad pixel size") {
    auto j = manifest_json("D", {"a"});
    j["descriptor"]["pixel_size_um"] = 0.0;
    CHECK(ingest_error(write_json(tmp.path / "m.json", j)) == DataErrorKind::bad_manifest);
  }
  SUBCASE("missing descriptor field") {
    auto j = manifest_json("D", {"a"});
    j["descriptor"].erase("modality");
    CHECK(ingest_error(write_json(tmp.path / "m.json", j)) == DataErrorKind::bad_manifest);
  }
}

TEST_CASE("registry ids are unique") {
  Registry r;
  Dataset d;
  d.descriptor.id = "X";
  r.add(d);
  CHECK(r.contains("X"));
  CHECK_THROWS_AS(r.add(d), DataError);
}

TEST_CASE("split sizes") {
  using A = std::array<std::size_t, 3>;
  CHECK(split_sizes(10, {0.6, 0.2, 0.2}) == A{6, 2, 2});
  CHECK(split_sizes(25, {0.6, 0.2, 0.2}) == A{15, 5, 5});
  CHECK(split_sizes(10, {0.7, 0.1, 0.2}) == A{7, 1, 2});
  CHECK(split_sizes(3, {0.8, 0.1, 0.1}) == A{1, 1, 1});
  for (std::size_t n = 3; n < 60; ++n) {
    auto s = split_sizes(n, {});
    CHECK(s[0] + s[1] + s[2] == n);
    CHECK(s[0] > 0);
    CHECK(s[1] > 0);
    CHECK(s[2] > 0);
  }
  CHECK_THROWS_AS(split_sizes(10, {0.5, 0.5, 0.5}), ContractViolation);
  CHECK_THROWS_AS(split_sizes(10, {1.0, 0.0, 0.0}), ContractViolation);
}

TEST_CASE("split: determinism, disjointness, seed sensitivity") {
  const auto items = entries("D", 10);
  SplitSet a = split("D", items, {0.6, 0.2, 0.2}, 7);
  SplitSet b = split("D", items, {0.6, 0.2, 0.2}, 7);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.test == b.test);
  CHECK(a.train.size() == 6);
  CHECK(a.val.size() == 2);
  CHECK(a.test.size() == 2);

  std::set<std::string> all;
  for (const auto* p : {&a.train, &a.val, &a.test})
    for (const auto& e : *p) all.insert(e.sample_id);
  CHECK(all == ids_of(items));

  // input order must not matter
  auto reversed = items;
  std::reverse(reversed.begin(), reversed.end());
  CHECK(split("D", reversed, {0.6, 0.2, 0.2}, 7).train == a.train);

  std::set<std::vector<std::string>> partitions;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SplitSet s = split("D", items, {0.6, 0.2, 0.2}, seed);
    std::vector<std::string> key;
    for (const auto* p : {&s.train, &s.val, &s.test}) {
      auto ids = ids_of(*p);
      key.insert(key.end(), ids.begin(), ids.end());
      key.push_back("|");
    }
    partitions.insert(key);
  }
  CHECK(partitions.size() >= 18);

  CHECK_THROWS_AS(split("D", entries("D", 2), {}, 0), DataError);
}

TEST_CASE("aggregate: unions and validation coverage") {
  // test sizes 3 and 5 with (0.6, 0.2, 0.2): n = 15 and n = 25
  SplitSet s1 = split("A", entries("A", 15), {0.6, 0.2, 0.2}, 1);
  SplitSet s2 = split("B", entries("B", 25), {0.6, 0.2, 0.2}, 2);
  REQUIRE(s1.test.size() == 3);
  REQUIRE(s2.test.size() == 5);
  SplitSet s3 = split("C", entries("C", 4), {0.6, 0.2, 0.2}, 3);
  std::vector<SplitSet> two{s1, s2};
  AggregatedDataset agg = aggregate(two);
  CHECK(agg.test.size() == 8);
  auto expect = ids_of(s1.test);
  for (const auto& id : ids_of(s2.test)) expect.insert(id);
  CHECK(ids_of(agg.test) == expect);

  std::vector<SplitSet> three{s1, s2, s3};
  AggregatedDataset agg3 = aggregate(three);
  for (const std::string d : {"A", "B", "C"}) {
    const auto n = std::count_if(agg3.val.begin(), agg3.val.end(), [&](const SplitEntry& e) { return e.domain_id == d; });
    CHECK(n >= 1);
  }
  CHECK(agg3.sources == std::vector<std::string>{"A", "B", "C"});

  std::vector<SplitSet> self{s1, s1};
  try {
    aggregate(self);
    FAIL("expected duplicate error");
  } catch (const DataError& e) {
    CHECK(e.kind() == DataErrorKind::duplicate_id);
  }

  SplitSet empty_val = s2;
  empty_val.train.insert(empty_val.train.end(), empty_val.val.begin(), empty_val.val.end());
  empty_val.val.clear();
  std::vector<SplitSet> bad{s1, empty_val};
  try {
    aggregate(bad);
    FAIL("expected empty val error");
  } catch (const DataError& e) {
    CHECK(e.kind() == DataErrorKind::empty_val_pool);
    CHECK(std::string(e.what()).find("every source") != std::string::npos);
  }

  std::vector<SplitSet> one{s1};
  CHECK_THROWS_AS(aggregate(one), ContractViolation);
}

TEST_CASE("leakage: injected duplicate and randomized property") {
  std::vector<SplitSet> ss{split("A", entries("A", 10), {}, 4), split("B", entries("B", 10), {}, 5)};
  AggregatedDataset agg = aggregate(ss);
  CHECK(verify_no_leakage(agg).clean());

  agg.test.push_back(agg.train.front());
  LeakageReport r = verify_no_leakage(agg);
  REQUIRE(r.findings.size() == 1);
  CHECK(r.findings[0].sample_id == agg.train.front().sample_id);
  CHECK(r.findings[0].splits == std::vector<std::string>{"train", "test"});

  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<SplitSet> parts;
    const int k = 2 + static_cast<int>(rng() % 3);
    for (int i = 0; i < k; ++i) {
      const std::string d = "D" + std::to_string(i);
      parts.push_back(split(d, entries(d, 5 + static_cast<int>(rng() % 20)), {}, rng()));
    }
    CHECK(verify_no_leakage(aggregate(parts)).clean());
  }
}

TEST_CASE("split files round trip") {
  TempDir tmp("split");
  SplitSet s = split("A", entries("A", 9), {}, 11);
  save_split(s, tmp.path / "s.json");
  SplitSet t = load_split(tmp.path / "s.json");
  CHECK(t.source == s.source);
  CHECK(t.seed == s.seed);
  CHECK(t.train == s.train);
  CHECK(t.val == s.val);
  CHECK(t.test == s.test);
  CHECK_THROWS_AS(load_split(tmp.path / "nope.json"), DataError);
}
