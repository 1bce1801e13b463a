#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

#include "mseg/synthgen.hpp"
#include "mseg/trainer.hpp"

using namespace mseg;
namespace fs = std::filesystem;

namespace {

std::vector<SplitEntry> pool_of(const std::string& domain, int n) {
  std::vector<SplitEntry> p;
  for (int i = 0; i < n; ++i) p.push_back({namespaced_id(domain, "s" + std::to_string(i)), domain});
  return p;
}

// Fills the store with small synthetic images and returns one split per preset.
std::vector<SplitSet> synth_splits(SampleStore& store, int n, int size) {
  std::vector<SplitSet> out;
  for (SynthDomainSpec spec : domain_presets()) {
    spec.height = spec.width = size;
    if (spec.id == "SYN-BIG") spec.radius_min = 8, spec.radius_max = 10, spec.count_min = 1, spec.count_max = 1;
    else spec.count_min = 1, spec.count_max = 3;
    std::vector<SplitEntry> items;
    for (int i = 0; i < n; ++i) {
      const SynthImage s = generate_image(spec, i);
      LabeledImage li{namespaced_id(spec.id, "img" + std::to_string(i)), s.image, label_map(s.axon, s.myelin)};
      items.push_back({li.sample_id, spec.id});
      store.add(std::move(li));
    }
    out.push_back(split(spec.id, items, {0.6, 0.2, 0.2}, 5));
  }
  return out;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs = 2;
  c.steps_per_epoch = 2;
  c.batch_size = 2;
  c.patch_h = c.patch_w = 32;
  c.folds = 2;
  c.net.depth = 2;
  c.net.base_channels = 4;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("poly learning rate") {
  CHECK(poly_lr(0.01, 0, 100, 0.9) == 0.01);
  CHECK(poly_lr(0.01, 50, 100, 0.9) == doctest::Approx(0.01 * std::pow(0.5, 0.9)));
  CHECK(poly_lr(0.01, 100, 100, 0.9) == 0.0);
  CHECK(poly_lr(0.01, 30, 100, 0.0) == 0.01);
}

TEST_CASE("config validation") {
  TrainConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.folds = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.patch_h = 31;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("folds: 10 samples, k = 5") {
  const auto pool = pool_of("A", 10);
  const auto folds = make_folds(pool, 5, 1);
  REQUIRE(folds.size() == 5);
  std::multiset<std::string> seen;
  for (const Fold& f : folds) {
    CHECK(f.val.size() == 2);
    CHECK(f.train.size() == 8);
    for (const auto& e : f.val) seen.insert(e.sample_id);
  }
  CHECK(seen.size() == 10);
  CHECK(std::set<std::string>(seen.begin(), seen.end()).size() == 10);
}

TEST_CASE("folds: stratified by domain") {
  auto pool = pool_of("A", 5);
  const auto b = pool_of("B", 5);
  pool.insert(pool.end(), b.begin(), b.end());
  for (const Fold& f : make_folds(pool, 5, 9)) {
    REQUIRE(f.val.size() == 2);
    CHECK(f.val[0].domain_id != f.val[1].domain_id);
  }
  CHECK_THROWS_AS(make_folds(pool, 11, 0), ContractViolation);
  CHECK_THROWS_AS(make_folds(pool, 1, 0), ConfigError);
}

TEST_CASE("folds: partition, balance and determinism over random pools") {
  std::mt19937_64 rng(17);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    std::vector<SplitEntry> pool;
    std::map<std::string, int> per_domain;
    const int domains = 1 + static_cast<int>(rng() % 4);
    for (int d = 0; d < domains; ++d) {
      const std::string id = "D" + std::to_string(d);
      const int n = 1 + static_cast<int>(rng() % 12);
      auto p = pool_of(id, n);
      pool.insert(pool.end(), p.begin(), p.end());
      per_domain[id] = n;
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    const int k = 2 + static_cast<int>(rng() % std::min<std::size_t>(5, pool.size() - 1));
    if (static_cast<std::size_t>(k) > pool.size()) continue;
    const auto folds = make_folds(pool, k, seed);
    REQUIRE(folds.size() == static_cast<std::size_t>(k));

    std::set<std::string> all;
    std::size_t lo = pool.size(), hi = 0;
    for (const Fold& f : folds) {
      lo = std::min(lo, f.val.size());
      hi = std::max(hi, f.val.size());
      CHECK(f.train.size() + f.val.size() == pool.size());
      std::set<std::string> train_ids;
      for (const auto& e : f.train) train_ids.insert(e.sample_id);
      for (const auto& e : f.val) {
        CHECK(all.insert(e.sample_id).second);
        CHECK(train_ids.count(e.sample_id) == 0);
      }
      // domain share within one sample of the pool's proportion
      for (const auto& [id, n] : per_domain) {
        const double expect = static_cast<double>(n) * f.val.size() / pool.size();
        const auto got = std::count_if(f.val.begin(), f.val.end(), [&](const SplitEntry& e) { return e.domain_id == id; });
        CHECK(std::abs(got - expect) <= 1.0 + 1e-12);
      }
    }
    CHECK(all.size() == pool.size());
    CHECK(hi - lo <= 1);

    auto shuffled = pool;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto again = make_folds(shuffled, k, seed);
    for (int i = 0; i < k; ++i) CHECK(again[i].val == folds[i].val);
  }
}

TEST_CASE("train_fold: single epoch and selection contract") {
  SampleStore store;
  const auto splits = synth_splits(store, 5, 64);
  const SplitSet& s = splits[0];
  std::vector<SplitEntry> pool = s.train;
  pool.insert(pool.end(), s.val.begin(), s.val.end());
  const auto folds = make_folds(pool, 2, 0);

  TrainConfig c = tiny_config();
  c.epochs = 1;
  const FoldResult one = train_fold(c, folds[0], store, {s.source});
  CHECK(one.checkpoint.epoch == 1);
  REQUIRE(one.log.size() == 1);
  CHECK(one.checkpoint.best_val_metric == one.log[0].val_dice_mean);

  c.epochs = 4;
  const FoldResult r = train_fold(c, folds[1], store, {s.source});
  REQUIRE(r.log.size() == 4);
  double best = -1;
  int best_epoch = 0;
  for (const EpochLog& e : r.log) {
    CHECK(e.val_dice_mean == doctest::Approx(0.5 * (e.val_dice_axon + e.val_dice_myelin)));
    if (e.val_dice_mean > best) best = e.val_dice_mean, best_epoch = e.epoch;
  }
  CHECK(r.checkpoint.best_val_metric == best);
  CHECK(r.checkpoint.epoch == best_epoch);
  CHECK(r.checkpoint.provenance.fold == 1);
  CHECK(r.checkpoint.provenance.sources == std::vector<std::string>{s.source});
  CHECK(r.checkpoint.provenance.train_ids.size() == folds[1].train.size());

  // same seed, same result
  const FoldResult r2 = train_fold(c, folds[1], store, {s.source});
  CHECK(r2.checkpoint.weights.back().data() == r.checkpoint.weights.back().data());
}

TEST_CASE("train_fold: non-finite loss aborts with context") {
  SampleStore store;
  const auto splits = synth_splits(store, 5, 64);
  LabeledImage bad = store.get(splits[0].train[0].sample_id);
  bad.image.setConstant(std::numeric_limits<float>::quiet_NaN());
  store.add(bad);
  Fold f{0, {splits[0].train[0]}, {splits[0].val[0]}};
  try {
    train_fold(tiny_config(), f, store, {"x"});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch 1") != std::string::npos);
    CHECK(msg.find("step 1") != std::string::npos);
  }
}

TEST_CASE("toy overfit: one image, 200 steps") {
  const SynthImage s = generate_image(preset("SYN-BF"), 0);
  SampleStore store;
  store.add({"SYN-BF/img0", s.image, label_map(s.axon, s.myelin)});
  const SplitEntry e{"SYN-BF/img0", "SYN-BF"};
  TrainConfig c;
  c.epochs = 10;
  c.steps_per_epoch = 20;
  c.batch_size = 4;
  c.patch_h = c.patch_w = 64;
  c.net.depth = 3;
  c.net.base_channels = 8;
  c.seed = 1;
  const FoldResult r = train_fold(c, Fold{0, {e}, {e}}, store, {"SYN-BF"});
  const UNetPredictor model(r.checkpoint);
  const auto [ax, my] = mean_dice(model, {&store.get(e.sample_id)}, c.validation_plan());
  MESSAGE("train dice axon " << ax << " myelin " << my);
  CHECK(0.5 * (ax + my) >= 0.95);
}

TEST_CASE("run_experiment: checkpoint counts and provenance") {
  SampleStore store;
  const auto splits = synth_splits(store, 6, 64);
  const fs::path dir = fs::temp_directory_path() / "mseg_trainer_run";
  fs::remove_all(dir);

  TrainConfig c = tiny_config();
  c.epochs = 1;
  c.steps_per_epoch = 1;
  c.folds = 3;
  const auto ded = run_experiment({splits, TrainMode::dedicated, c}, store, dir);
  REQUIRE(ded.size() == 3);
  std::size_t n = 0;
  for (const TrainedModel& m : ded) {
    n += m.folds.size();
    CHECK(m.sources.size() == 1);
    CHECK(m.name == m.sources[0]);
    for (int k = 0; k < c.folds; ++k) {
      const auto& ck = m.folds[k];
      CHECK(ck.provenance.sources == m.sources);
      CHECK(ck.provenance.fold == k);
      CHECK(fs::exists(dir / m.name / ("fold" + std::to_string(k) + ".ckpt")));
      CHECK(fs::exists(dir / m.name / ("fold" + std::to_string(k) + "_log.csv")));
    }
  }
  CHECK(n == 9);

  const auto gen = run_experiment({splits, TrainMode::generalist, c}, store, dir);
  REQUIRE(gen.size() == 1);
  CHECK(gen[0].name == "generalist");
  REQUIRE(gen[0].folds.size() == 3);
  for (const auto& ck : gen[0].folds) {
    CHECK(ck.provenance.sources.size() == 3);
    for (const auto& tid : ck.provenance.train_ids)
      for (const SplitSet& s : splits)
        for (const auto& t : s.test) CHECK(tid != t.sample_id);
  }
  const ModelCheckpoint back = load_checkpoint((dir / "generalist" / "fold2.ckpt").string());
  CHECK(back.provenance == gen[0].folds[2].provenance);

  std::ifstream log(dir / "generalist" / "fold0_log.csv");
  std::string header;
  std::getline(log, header);
  CHECK(header == "epoch,mean_train_loss,val_dice_axon,val_dice_myelin,val_dice_mean");
  fs::remove_all(dir);
}
