#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mseg/datahub.hpp"
#include "mseg/infer.hpp"
#include "mseg/pipeline.hpp"
#include "mseg/unet.hpp"

namespace mseg {

struct TrainConfig {
  int epochs = 30;
  int steps_per_epoch = 50;
  int batch_size = 4;
  int patch_h = 256, patch_w = 256;
  double lr = 0.01;
  double poly_power = 0.9;
  double momentum = 0.99;
  double grad_clip = 12.0;  // global L2 norm; 0 disables
  int folds = 5;
  std::uint64_t seed = 0;
  double foreground_prob = 0.5;
  AugmentConfig augment;
  UNetConfig net;
  TilingPlan val_plan{0, 0};  // tile dims of 0 follow the patch size

  /// Throws ConfigError.
  void validate() const;
  TilingPlan validation_plan() const;
};

/// Polynomial decay: lr * (1 - step / total)^power.
double poly_lr(double lr, int step, int total_steps, double power);

struct Fold {
  int index = 0;
  std::vector<SplitEntry> train, val;
};

/// k disjoint validation folds over the pool, stratified by domain; each fold trains on the rest.
std::vector<Fold> make_folds(const std::vector<SplitEntry>& pool, int k, std::uint64_t seed);

/// Preprocessed labeled images keyed by sample id.
class SampleStore {
 public:
  void add(LabeledImage image);
  /// Loads every sample of the registry that has masks.
  void load(const Registry& registry);
  const LabeledImage& get(const std::string& sample_id) const;
  bool contains(const std::string& sample_id) const { return images_.count(sample_id) != 0; }

 private:
  std::map<std::string, LabeledImage> images_;
};

struct EpochLog {
  int epoch = 0;
  double mean_train_loss = 0;
  double val_dice_axon = 0, val_dice_myelin = 0, val_dice_mean = 0;
};

struct FoldResult {
  ModelCheckpoint checkpoint;  // best validation epoch
  std::vector<EpochLog> log;
};

/// Per-image mean Dice of a model on labeled images: (axon, myelin).
std::pair<double, double> mean_dice(const Predictor& model, const std::vector<const LabeledImage*>& images,
                                    const TilingPlan& plan);

using ProgressFn = std::function<void(const std::string& tag, const EpochLog&)>;

/// Patch-sampled SGD on the fold's train ids, validated after every epoch; returns the best epoch
/// (earliest on ties). `sources` becomes the checkpoint provenance.
FoldResult train_fold(const TrainConfig& cfg, const Fold& fold, const SampleStore& store,
                      const std::vector<std::string>& sources, const ProgressFn& progress = {});

void write_training_log(const std::vector<EpochLog>& log, const std::filesystem::path& path);

enum class TrainMode { dedicated, generalist };

struct ExperimentPlan {
  std::vector<SplitSet> splits;  // one per source dataset
  TrainMode mode = TrainMode::dedicated;
  TrainConfig config;
};

struct TrainedModel {
  std::string name;                   // source id, or "generalist"
  std::vector<std::string> sources;
  std::vector<ModelCheckpoint> folds;
  std::vector<std::vector<EpochLog>> logs;
};

/// Dedicated: k folds per source over its train+val pool. Generalist: aggregates all sources and
/// trains k folds once. Writes `<name>/fold<k>.ckpt` and `<name>/fold<k>_log.csv` under out_dir
/// when it is non-empty.
std::vector<TrainedModel> run_experiment(const ExperimentPlan& plan, const SampleStore& store,
                                         const std::filesystem::path& out_dir = {},
                                         const ProgressFn& progress = {});

}  // namespace mseg
