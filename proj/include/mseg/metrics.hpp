#pragma once

#include <filesystem>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mseg/datahub.hpp"
#include "mseg/infer.hpp"

namespace mseg {

/// 2|P and G| / (|P| + |G|); two empty masks score 1.
double dice(const Mask& pred, const Mask& gt);

/// Regularized incomplete beta I_x(a, b), continued-fraction evaluation.
double incomplete_beta(double a, double b, double x);

/// Two-sided tail probability P(|T| >= |t|) of Student's t with `df` degrees of freedom.
double student_t_two_sided_p(double t, double df);

struct TTestResult {
  double t = 0;
  double df = 0;
  double p = 1;
  double mean_diff = 0;
  int n = 0;
  bool degenerate = false;  // zero-variance nonzero differences: t is infinite, p the limit 0
};

/// Paired Student's t-test on a - b.
TTestResult paired_ttest(std::span<const double> a, std::span<const double> b);

struct DiceCell {
  bool available = false;
  double axon_mean = 0, axon_std = 0;
  double myelin_mean = 0, myelin_std = 0;
  int n_images = 0;

  double foreground_mean() const { return 0.5 * (axon_mean + myelin_mean); }
};

/// A source model column: an ensemble of predictors plus the ids it was trained on.
struct ModelEntry {
  std::string name;
  std::vector<std::shared_ptr<const Predictor>> members;
  std::set<std::string> train_ids;
};

ModelEntry model_entry(const std::string& name, std::span<const ModelCheckpoint> checkpoints);

/// A target row: a dataset's test samples.
struct TargetSet {
  std::string id;
  std::vector<Sample> samples;
};

struct EvaluationMatrix {
  std::vector<std::string> targets;           // rows
  std::vector<std::string> sources;           // columns
  std::vector<std::vector<DiceCell>> cells;   // [row][column]

  const DiceCell& at(const std::string& target, const std::string& source) const;
};

/// Per-image mean Dice of each model's ensembled prediction on each target's samples.
/// Targets without ground truth are marked unavailable. Throws ContractViolation when a
/// target sample appears in a model's training ids.
EvaluationMatrix evaluate_matrix(std::span<const ModelEntry> models, std::span<const TargetSet> targets,
                                 const TilingPlan& plan);

/// Columns: target_dataset, source_model, class, dice_mean, dice_std, n_images.
/// One row per (target, source, class); unavailable cells carry NA.
void write_heatmap_csv(const EvaluationMatrix& m, const std::filesystem::path& path);
EvaluationMatrix read_heatmap_csv(const std::filesystem::path& path);

/// Self-contained SVG with one color-mapped grid per class.
std::string heatmap_svg(const EvaluationMatrix& m);
void write_heatmap_svg(const EvaluationMatrix& m, const std::filesystem::path& path);

}  // namespace mseg
