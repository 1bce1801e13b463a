#include "mseg/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>

#include "mseg/metrics.hpp"

namespace mseg {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (steps_per_epoch < 1) throw ConfigError("train: steps per epoch must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
  if (folds < 2) throw ConfigError("train: folds must be >= 2");
  if (!(lr > 0)) throw ConfigError("train: learning rate must be > 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train: momentum must lie in [0, 1)");
  if (!(poly_power >= 0)) throw ConfigError("train: poly power must be >= 0");
  if (!(grad_clip >= 0)) throw ConfigError("train: grad clip must be >= 0");
  net.validate();
  net.check_patch(patch_h, patch_w);
  validation_plan().validate(net.size_divisor());
}

TilingPlan TrainConfig::validation_plan() const {
  TilingPlan p = val_plan;
  if (p.tile_h == 0) p.tile_h = patch_h;
  if (p.tile_w == 0) p.tile_w = patch_w;
  return p;
}

double poly_lr(double lr, int step, int total_steps, double power) {
  return lr * std::pow(1.0 - static_cast<double>(step) / total_steps, power);
}

std::vector<Fold> make_folds(const std::vector<SplitEntry>& pool, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("make_folds: k must be >= 2");
  if (static_cast<std::size_t>(k) > pool.size())
    throw ContractViolation("make_folds: k = " + std::to_string(k) + " exceeds the pool size " +
                            std::to_string(pool.size()));
  std::map<std::string, std::vector<SplitEntry>> by_domain;
  for (const auto& e : pool) by_domain[e.domain_id].push_back(e);

  std::vector<Fold> folds(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) folds[static_cast<std::size_t>(i)].index = i;
  std::mt19937_64 rng(seed);
  // round-robin per domain; the running offset keeps overall fold sizes within one
  std::size_t offset = 0;
  for (auto& [domain, items] : by_domain) {
    std::sort(items.begin(), items.end(),
              [](const SplitEntry& a, const SplitEntry& b) { return a.sample_id < b.sample_id; });
    std::shuffle(items.begin(), items.end(), rng);
    for (const auto& e : items) folds[offset++ % static_cast<std::size_t>(k)].val.push_back(e);
  }
  for (auto& f : folds)
    for (const auto& other : folds)
      if (other.index != f.index) f.train.insert(f.train.end(), other.val.begin(), other.val.end());
  return folds;
}

void SampleStore::add(LabeledImage image) {
  const std::string id = image.sample_id;
  images_.insert_or_assign(id, std::move(image));
}

void SampleStore::load(const Registry& registry) {
  for (const auto& id : registry.ids())
    for (const Sample& s : registry.get(id).samples)
      if (s.labeled()) add(load_labeled(s));
}

const LabeledImage& SampleStore::get(const std::string& sample_id) const {
  auto it = images_.find(sample_id);
  if (it == images_.end()) throw DataError(DataErrorKind::bad_manifest, "sample store has no image " + sample_id);
  return it->second;
}

namespace {

class NetView final : public Predictor {
 public:
  explicit NetView(const UNet<float>& net) : net_(net) {}
  Tensor<float> logits(const Tensor<float>& x) const override { return net_.forward(x); }
  int size_divisor() const override { return net_.size_divisor(); }

 private:
  const UNet<float>& net_;
};

std::uint64_t derive_seed(std::uint64_t seed, int fold, std::uint32_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fold), purpose};
  std::array<std::uint32_t, 2> out;
  seq.generate(out.begin(), out.end());
  return (std::uint64_t(out[0]) << 32) | out[1];
}

void clip_gradients(const std::vector<ParamRef<float>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    if (p.tensor->has_grad()) sq += p.tensor->grad().cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (!(norm > max_norm)) return;
  const float scale = static_cast<float>(max_norm / norm);
  for (const auto& p : params)
    if (p.tensor->has_grad()) p.tensor->grad() *= scale;
}

}  // namespace

std::pair<double, double> mean_dice(const Predictor& model, const std::vector<const LabeledImage*>& images,
                                    const TilingPlan& plan) {
  if (images.empty()) throw ContractViolation("mean_dice: no images");
  double ax = 0, my = 0;
  for (const LabeledImage* li : images) {
    const SegmentationMasks m = argmax_masks(predict_tiled(model, li->image, plan));
    ax += dice(m.axon, (li->labels == kAxon).cast<std::uint8_t>());
    my += dice(m.myelin, (li->labels == kMyelin).cast<std::uint8_t>());
  }
  const double n = static_cast<double>(images.size());
  return {ax / n, my / n};
}

FoldResult train_fold(const TrainConfig& cfg, const Fold& fold, const SampleStore& store,
                      const std::vector<std::string>& sources, const ProgressFn& progress) {
  cfg.validate();
  if (fold.train.empty() || fold.val.empty())
    throw ContractViolation("train_fold: fold " + std::to_string(fold.index) + " needs train and val samples");

  // per-step sampling: a domain uniformly, then a sample within it
  std::map<std::string, std::vector<const LabeledImage*>> by_domain;
  for (const auto& e : fold.train) by_domain[e.domain_id].push_back(&store.get(e.sample_id));
  std::vector<const std::vector<const LabeledImage*>*> domains;
  for (const auto& [_, v] : by_domain) domains.push_back(&v);
  std::vector<const LabeledImage*> val;
  for (const auto& e : fold.val) val.push_back(&store.get(e.sample_id));

  UNetConfig net_cfg = cfg.net;
  net_cfg.seed = derive_seed(cfg.seed, fold.index, 1);
  UNet<float> net(net_cfg);
  std::mt19937_64 rng(derive_seed(cfg.seed, fold.index, 2));
  SgdState<float> opt;
  const auto params = net.parameters();
  const TilingPlan plan = cfg.validation_plan();
  const int total = cfg.epochs * cfg.steps_per_epoch;

  Provenance prov;
  prov.sources = sources;
  prov.fold = fold.index;
  prov.training_seed = cfg.seed;
  for (const auto& e : fold.train) prov.train_ids.push_back(e.sample_id);

  FoldResult result;
  double best = -1;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      const int step = (epoch - 1) * cfg.steps_per_epoch + s;
      std::vector<Patch> patches;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const auto& pool = *domains[std::uniform_int_distribution<std::size_t>(0, domains.size() - 1)(rng)];
        const LabeledImage& img = *pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
        Patch p = sample_patch(img, cfg.patch_h, cfg.patch_w, rng, cfg.foreground_prob);
        augment(p, cfg.augment, rng);
        patches.push_back(std::move(p));
      }
      const PatchBatch batch = make_batch(patches);
      UNet<float>::Cache cache;
      const auto loss = dice_ce_loss(net.forward(batch.images, cache), batch.targets);
      if (!std::isfinite(loss.loss))
        throw NumericError("train_fold: non-finite loss at fold " + std::to_string(fold.index) + ", epoch " +
                           std::to_string(epoch) + ", step " + std::to_string(s + 1));
      net.zero_grad();
      net.backward(cache, loss.grad_logits);
      if (cfg.grad_clip > 0) clip_gradients(params, cfg.grad_clip);
      sgd_step<float>(params, static_cast<float>(std::max(poly_lr(cfg.lr, step, total, cfg.poly_power), 1e-12)),
                      static_cast<float>(cfg.momentum), opt);
      loss_sum += loss.loss;
    }
    EpochLog log;
    log.epoch = epoch;
    log.mean_train_loss = loss_sum / cfg.steps_per_epoch;
    std::tie(log.val_dice_axon, log.val_dice_myelin) = mean_dice(NetView(net), val, plan);
    log.val_dice_mean = 0.5 * (log.val_dice_axon + log.val_dice_myelin);
    result.log.push_back(log);
    if (progress) progress("fold" + std::to_string(fold.index), log);
    if (log.val_dice_mean > best) {
      best = log.val_dice_mean;
      result.checkpoint = make_checkpoint(net, epoch, best, prov);
    }
  }
  return result;
}

void write_training_log(const std::vector<EpochLog>& log, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,mean_train_loss,val_dice_axon,val_dice_myelin,val_dice_mean\n" << std::setprecision(10);
  for (const auto& e : log)
    out << e.epoch << ',' << e.mean_train_loss << ',' << e.val_dice_axon << ',' << e.val_dice_myelin << ','
        << e.val_dice_mean << '\n';
}

std::vector<TrainedModel> run_experiment(const ExperimentPlan& plan, const SampleStore& store,
                                         const fs::path& out_dir, const ProgressFn& progress) {
  plan.config.validate();
  if (plan.splits.empty()) throw ContractViolation("run_experiment: no source datasets");

  struct Job {
    std::string name;
    std::vector<std::string> sources;
    std::vector<SplitEntry> pool;
  };
  std::vector<Job> jobs;
  auto pool_of = [](const std::vector<SplitEntry>& train, const std::vector<SplitEntry>& val) {
    std::vector<SplitEntry> p = train;
    p.insert(p.end(), val.begin(), val.end());
    return p;
  };
  if (plan.mode == TrainMode::dedicated) {
    for (const SplitSet& s : plan.splits) jobs.push_back({s.source, {s.source}, pool_of(s.train, s.val)});
  } else {
    const AggregatedDataset agg = aggregate(plan.splits);
    if (!verify_no_leakage(agg).clean()) throw ContractViolation("run_experiment: aggregated splits leak samples");
    jobs.push_back({"generalist", agg.sources, pool_of(agg.train, agg.val)});
  }

  std::vector<TrainedModel> out;
  for (const Job& job : jobs) {
    TrainedModel m;
    m.name = job.name;
    m.sources = job.sources;
    const auto folds = make_folds(job.pool, plan.config.folds, plan.config.seed);
    for (const Fold& f : folds) {
      const ProgressFn tagged = progress ? ProgressFn([&](const std::string& tag, const EpochLog& e) {
        progress(job.name + "/" + tag, e);
      })
                                         : ProgressFn{};
      FoldResult r = train_fold(plan.config, f, store, job.sources, tagged);
      if (!out_dir.empty()) {
        const fs::path dir = out_dir / job.name;
        fs::create_directories(dir);
        save_checkpoint(r.checkpoint, (dir / ("fold" + std::to_string(f.index) + ".ckpt")).string());
        write_training_log(r.log, dir / ("fold" + std::to_string(f.index) + "_log.csv"));
      }
      m.folds.push_back(std::move(r.checkpoint));
      m.logs.push_back(std::move(r.log));
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace mseg
