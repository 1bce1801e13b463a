#include <glob.h>

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <memory>
#include <string>
#include <vector>

#include "json_config.hpp"
#include "mseg/datahub.hpp"
#include "mseg/infer.hpp"
#include "mseg/metrics.hpp"
#include "mseg/morpho.hpp"
#include "mseg/pipeline.hpp"
#include "mseg/synthgen.hpp"
#include "mseg/trainer.hpp"
#include "run_manifest.hpp"

#ifndef MSEG_VERSION
#define MSEG_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace mseg::cli {

// Missing or unreadable command inputs; reported with exit code 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string out;
  std::uint64_t seed = 0;
  int threads = 1;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  auto* out = cmd->add_option("--out", c.out, "Output directory");
  if (out_required) out->required();
  cmd->add_option("--seed", c.seed, "Seed for every stochastic component")->capture_default_str();
  cmd->add_option("--threads", c.threads, "Worker cap")->capture_default_str()->check(CLI::PositiveNumber);
}

std::vector<std::string> expand_globs(const std::vector<std::string>& patterns) {
  std::vector<std::string> out;
  for (const auto& p : patterns) {
    if (p.find_first_of("*?[") == std::string::npos) {
      if (!fs::exists(p)) throw InputError("no such file: " + p);
      out.push_back(p);
      continue;
    }
    glob_t g{};
    const int rc = ::glob(p.c_str(), 0, nullptr, &g);
    if (rc == 0)
      for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
    globfree(&g);
    if (rc != 0) throw InputError("pattern matched nothing: " + p);
  }
  return out;
}

std::vector<ModelCheckpoint> load_models(const std::vector<std::string>& patterns) {
  std::vector<ModelCheckpoint> out;
  for (const auto& path : expand_globs(patterns)) out.push_back(load_checkpoint(path));
  if (out.empty()) throw InputError("no checkpoints given");
  return out;
}

struct TilingOptions {
  int tile = 128;
  double overlap = 0.5;
  std::string blend = "gaussian";

  void add(CLI::App* cmd) {
    cmd->add_option("--tile", tile, "Square tile size in pixels")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--overlap", overlap, "Tile overlap fraction")->capture_default_str()->check(CLI::Range(0.0, 0.95));
    cmd->add_option("--blend", blend, "Tile blending")
        ->capture_default_str()
        ->check(CLI::IsMember({"gaussian", "uniform"}));
  }
  TilingPlan plan(int threads) const {
    TilingPlan p;
    p.tile_h = p.tile_w = tile;
    p.overlap = overlap;
    p.blend = blend == "uniform" ? BlendMode::uniform : BlendMode::gaussian;
    p.threads = threads;
    return p;
  }
};

// Output of `ingest`: manifests plus frozen splits, consumed by train/evaluate/report.
struct Workspace {
  Registry registry;
  std::vector<SplitSet> splits;
  std::vector<std::string> manifests;
};

Workspace load_workspace(const fs::path& dir) {
  const fs::path index = dir / "workspace.json";
  std::ifstream in(index);
  if (!in) throw InputError("not an ingest output directory (missing " + index.string() + ")");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InputError(index.string() + ": " + e.what());
  }
  Workspace ws;
  for (const auto& d : j.at("datasets")) {
    const std::string manifest = d.at("manifest").get<std::string>();
    ws.registry.add(ingest(manifest));
    ws.manifests.push_back(manifest);
    ws.splits.push_back(load_split(dir / d.at("split").get<std::string>()));
  }
  return ws;
}

std::string strip_suffix(std::string s, const std::string& suffix) {
  if (s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0)
    s.resize(s.size() - suffix.size());
  return s;
}

// ---- synth ----

struct SynthCmd {
  Common common;
  std::string preset = "all";
  int n = 12;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("synth", "Generate synthetic annotated datasets");
    add_common(c, common);
    c->add_option("--preset", preset, "Preset id or 'all'")->capture_default_str();
    c->add_option("--n", n, "Images per dataset")->capture_default_str()->check(CLI::PositiveNumber);
  }

  void run(RunManifest& rm) const {
    std::vector<SynthDomainSpec> specs;
    if (preset == "all") specs = domain_presets();
    else specs.push_back(mseg::preset(preset));
    for (SynthDomainSpec spec : specs) {
      spec.seed += common.seed;
      const fs::path dir = fs::path(common.out) / spec.id;
      const Dataset d = generate(spec, n, dir);
      rm.outputs.push_back((dir / "manifest.json").string());
      std::cout << spec.id << ": " << d.samples.size() << " images -> " << dir.string() << '\n';
    }
  }
};

// ---- ingest ----

struct IngestCmd {
  Common common;
  std::vector<std::string> manifests;
  std::vector<double> ratios{0.6, 0.2, 0.2};

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("ingest", "Validate manifests and freeze train/val/test splits");
    add_common(c, common);
    c->add_option("--manifest", manifests, "Dataset manifest (repeatable)")->required();
    c->add_option("--ratios", ratios, "train val test fractions")->expected(3)->capture_default_str();
  }

  void run(RunManifest& rm) const {
    const fs::path out(common.out);
    fs::create_directories(out / "splits");
    Registry reg;
    json index{{"datasets", json::array()}};
    for (const auto& m : manifests) {
      if (!fs::exists(m)) throw InputError("no such manifest: " + m);
      Dataset d = ingest(m);
      const SplitSet s = split(d, {ratios[0], ratios[1], ratios[2]}, common.seed);
      const std::string rel = "splits/" + d.descriptor.id + ".json";
      save_split(s, out / rel);
      index["datasets"].push_back({{"id", d.descriptor.id}, {"manifest", fs::absolute(m).string()}, {"split", rel}});
      std::cout << d.descriptor.id << ": " << s.train.size() << " train, " << s.val.size() << " val, "
                << s.test.size() << " test\n";
      reg.add(std::move(d));  // rejects duplicate dataset ids
      rm.inputs.push_back(m);
      rm.outputs.push_back((out / rel).string());
    }
    std::ofstream(out / "workspace.json") << index.dump(2) << '\n';
    rm.outputs.push_back((out / "workspace.json").string());
  }
};

// ---- train ----

struct TrainCmd {
  Common common;
  std::string data;
  std::string mode = "both";
  TrainConfig cfg;
  std::vector<int> patch{256, 256};
  bool quiet = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("train", "Cross-validated training of dedicated and/or generalist models");
    add_common(c, common);
    c->add_option("--data", data, "Ingest output directory")->required();
    c->add_option("--mode", mode, "dedicated, generalist or both")
        ->capture_default_str()
        ->check(CLI::IsMember({"dedicated", "generalist", "both"}));
    c->add_option("--epochs", cfg.epochs)->capture_default_str();
    c->add_option("--steps-per-epoch", cfg.steps_per_epoch)->capture_default_str();
    c->add_option("--batch-size", cfg.batch_size)->capture_default_str();
    c->add_option("--patch", patch, "Patch size: N or H W")->expected(1, 2)->capture_default_str();
    c->add_option("--folds", cfg.folds)->capture_default_str();
    c->add_option("--lr", cfg.lr, "Initial learning rate")->capture_default_str();
    c->add_option("--poly-power", cfg.poly_power)->capture_default_str();
    c->add_option("--momentum", cfg.momentum)->capture_default_str();
    c->add_option("--grad-clip", cfg.grad_clip, "Gradient norm cap, 0 = off")->capture_default_str();
    c->add_option("--depth", cfg.net.depth, "Resolution levels")->capture_default_str();
    c->add_option("--base-channels", cfg.net.base_channels)->capture_default_str();
    c->add_option("--max-channels", cfg.net.max_channels)->capture_default_str();
    c->add_flag("--quiet", quiet, "No per-epoch progress");
  }

  void run(RunManifest& rm) {
    cfg.patch_h = patch[0];
    cfg.patch_w = patch.size() > 1 ? patch[1] : patch[0];
    cfg.seed = common.seed;
    cfg.val_plan.threads = common.threads;
    cfg.validate();

    const Workspace ws = load_workspace(data);
    rm.inputs = ws.manifests;
    SampleStore store;
    store.load(ws.registry);
    const ProgressFn progress = quiet ? ProgressFn{} : ProgressFn([](const std::string& tag, const EpochLog& e) {
      std::cerr << tag << " epoch " << e.epoch << " loss " << e.mean_train_loss << " val dice " << e.val_dice_mean
                << '\n';
    });
    std::vector<TrainMode> modes;
    if (mode != "generalist") modes.push_back(TrainMode::dedicated);
    if (mode != "dedicated") modes.push_back(TrainMode::generalist);
    for (TrainMode m : modes) {
      for (const TrainedModel& tm : run_experiment({ws.splits, m, cfg}, store, common.out, progress)) {
        for (std::size_t k = 0; k < tm.folds.size(); ++k) {
          rm.outputs.push_back((fs::path(common.out) / tm.name / ("fold" + std::to_string(k) + ".ckpt")).string());
          std::cout << tm.name << " fold " << k << ": epoch " << tm.folds[k].epoch << ", val dice "
                    << tm.folds[k].best_val_metric << '\n';
        }
      }
    }
  }
};

// ---- predict ----

struct PredictCmd {
  Common common;
  std::vector<std::string> models, images;
  TilingOptions tiling;
  bool probs = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("predict", "Segment images; several checkpoints are ensembled");
    add_common(c, common);
    c->add_option("--model", models, "Checkpoint paths or globs")->required();
    c->add_option("--image", images, "Input images")->required();
    tiling.add(c);
    c->add_flag("--probs", probs, "Also write float TIFF probability maps");
  }

  void run(RunManifest& rm) const {
    const auto cks = load_models(models);
    std::vector<std::unique_ptr<Predictor>> owned;
    std::vector<const Predictor*> members;
    for (const auto& ck : cks) {
      owned.push_back(std::make_unique<UNetPredictor>(ck));
      members.push_back(owned.back().get());
    }
    const TilingPlan plan = tiling.plan(common.threads);
    const fs::path out(common.out);
    fs::create_directories(out);
    rm.inputs = expand_globs(models);
    for (const auto& path : images) {
      if (!fs::exists(path)) throw InputError("no such image: " + path);
      const ImageF img = load_preprocessed(path);
      const ProbMaps p = ensemble_predict(members, img, plan);
      const SegmentationMasks m = argmax_masks(p);
      const std::string stem = fs::path(path).stem().string();
      write_mask_png((out / (stem + "_seg-axon.png")).string(), m.axon);
      write_mask_png((out / (stem + "_seg-myelin.png")).string(), m.myelin);
      rm.inputs.push_back(path);
      rm.outputs.push_back((out / (stem + "_seg-axon.png")).string());
      rm.outputs.push_back((out / (stem + "_seg-myelin.png")).string());
      if (probs) {
        write_float_tiff((out / (stem + "_probs.tif")).string(), p);
        rm.outputs.push_back((out / (stem + "_probs.tif")).string());
      }
    }
    std::cout << images.size() << " image(s) segmented with " << cks.size() << " model(s)\n";
  }
};

// ---- evaluate ----

std::vector<ModelEntry> collect_models(const std::string& run_dir, const std::vector<std::string>& named,
                                       std::vector<std::string>& inputs) {
  std::vector<ModelEntry> out;
  auto add = [&](const std::string& name, const std::vector<std::string>& patterns) {
    const auto paths = expand_globs(patterns);
    std::vector<ModelCheckpoint> cks;
    for (const auto& p : paths) cks.push_back(load_checkpoint(p));
    inputs.insert(inputs.end(), paths.begin(), paths.end());
    out.push_back(model_entry(name, cks));
  };
  if (!run_dir.empty()) {
    if (!fs::is_directory(run_dir)) throw InputError("no such run directory: " + run_dir);
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(run_dir))
      if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      bool any = false;
      for (const auto& f : fs::directory_iterator(d)) any |= f.path().extension() == ".ckpt";
      if (any) add(d.filename().string(), {(d / "*.ckpt").string()});
    }
  }
  for (const auto& spec : named) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--model expects NAME=GLOB, got '" + spec + "'");
    add(spec.substr(0, eq), {spec.substr(eq + 1)});
  }
  if (out.empty()) throw InputError("no models found; give --run or --model NAME=GLOB");
  return out;
}

struct EvaluateCmd {
  Common common;
  std::string data, run_dir;
  std::vector<std::string> named;
  TilingOptions tiling;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("evaluate", "Dice matrix of every model on every dataset's test split");
    add_common(c, common);
    c->add_option("--data", data, "Ingest output directory")->required();
    c->add_option("--run", run_dir, "Training output; each subdirectory of checkpoints is one model");
    c->add_option("--model", named, "NAME=GLOB model column (repeatable)");
    tiling.add(c);
  }

  void run(RunManifest& rm) const {
    const Workspace ws = load_workspace(data);
    rm.inputs = ws.manifests;
    const auto models = collect_models(run_dir, named, rm.inputs);
    std::vector<TargetSet> targets;
    for (const SplitSet& s : ws.splits) {
      TargetSet t{s.source, {}};
      for (const auto& e : s.test) t.samples.push_back(ws.registry.sample(e.sample_id));
      targets.push_back(std::move(t));
    }
    const EvaluationMatrix m = evaluate_matrix(models, targets, tiling.plan(common.threads));
    const fs::path out(common.out);
    fs::create_directories(out);
    write_heatmap_csv(m, out / "heatmap.csv");
    write_heatmap_svg(m, out / "heatmap.svg");
    rm.outputs = {(out / "heatmap.csv").string(), (out / "heatmap.svg").string()};

    for (std::size_t r = 0; r < m.targets.size(); ++r)
      for (std::size_t c = 0; c < m.sources.size(); ++c) {
        const DiceCell& cell = m.cells[r][c];
        std::cout << m.targets[r] << " <- " << m.sources[c] << ": ";
        if (cell.available) std::cout << "axon " << cell.axon_mean << ", myelin " << cell.myelin_mean << '\n';
        else std::cout << "n/a\n";
      }

    // generalist vs dedicated on each dataset's own test split, per class
    const bool has_gen = std::find(m.sources.begin(), m.sources.end(), "generalist") != m.sources.end();
    std::vector<double> gen, ded;
    for (const auto& t : m.targets) {
      if (!has_gen || std::find(m.sources.begin(), m.sources.end(), t) == m.sources.end()) continue;
      const DiceCell &g = m.at(t, "generalist"), &d = m.at(t, t);
      if (!g.available || !d.available) continue;
      gen.insert(gen.end(), {g.axon_mean, g.myelin_mean});
      ded.insert(ded.end(), {d.axon_mean, d.myelin_mean});
    }
    if (gen.size() >= 2) {
      const TTestResult tt = paired_ttest(gen, ded);
      json j{{"pairs", tt.n}, {"t", tt.t}, {"df", tt.df}, {"p", tt.p}, {"mean_diff", tt.mean_diff},
             {"degenerate", tt.degenerate}};
      std::ofstream(out / "ttest.json") << j.dump(2) << '\n';
      rm.outputs.push_back((out / "ttest.json").string());
      std::cout << "generalist vs dedicated (in-domain): t = " << tt.t << ", df = " << tt.df << ", p = " << tt.p
                << '\n';
    }
  }
};

// ---- morphometrics ----

struct MorphoCmd {
  Common common;
  std::vector<std::string> axon, myelin;
  double pixel_size_um = 0;
  MorphoOptions opt;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("morphometrics", "Per-fiber measurements from axon and myelin masks");
    add_common(c, common);
    c->add_option("--axon", axon, "Axon mask(s)")->required();
    c->add_option("--myelin", myelin, "Myelin mask(s), same order")->required();
    c->add_option("--pixel-size", pixel_size_um, "Micrometers per pixel")->required()->check(CLI::PositiveNumber);
    c->add_option("--orphan-radius", opt.orphan_radius_px, "Max myelin-to-axon distance (px)")->capture_default_str();
  }

  void run(RunManifest& rm) const {
    if (axon.size() != myelin.size()) throw ConfigError("--axon and --myelin must be given the same number of times");
    const fs::path out(common.out);
    fs::create_directories(out);
    for (std::size_t i = 0; i < axon.size(); ++i) {
      for (const auto& p : {axon[i], myelin[i]})
        if (!fs::exists(p)) throw InputError("no such mask: " + p);
      const Mask a = read_mask(axon[i]), m = read_mask(myelin[i]);
      if (a.rows() != m.rows() || a.cols() != m.cols())
        throw DataError(DataErrorKind::dimension_mismatch, axon[i] + " and " + myelin[i] + " differ in size");
      const auto records = compute_morphometrics(extract_instances(a, m, opt), pixel_size_um, opt);
      const std::string stem = strip_suffix(fs::path(axon[i]).stem().string(), "_seg-axon");
      const fs::path csv = out / (stem + "_morphometrics.csv");
      export_records(records, csv);
      rm.inputs.insert(rm.inputs.end(), {axon[i], myelin[i]});
      rm.outputs.push_back(csv.string());
      std::cout << stem << ": " << records.size() << " fibers\n";
    }
  }
};

// ---- report ----

struct Rgb {
  Image<std::uint8_t> r, g, b;
  Rgb(Index h, Index w) : r(Image<std::uint8_t>::Constant(h, w, 255)), g(r), b(r) {}
};

void paste_gray(Rgb& s, const ImageF& img, Index top, Index left) {
  const Image<std::uint8_t> v = (img.cwiseMax(0.f).cwiseMin(1.f) * 255.f + 0.5f).cast<std::uint8_t>();
  s.r.block(top, left, v.rows(), v.cols()) = v;
  s.g.block(top, left, v.rows(), v.cols()) = v;
  s.b.block(top, left, v.rows(), v.cols()) = v;
}

// background black, axon yellow, myelin blue
void paste_labels(Rgb& s, const Image<std::uint8_t>& labels, Index top, Index left) {
  static constexpr std::uint8_t lut[3][3] = {{0, 0, 0}, {255, 210, 0}, {30, 110, 255}};
  for (Index y = 0; y < labels.rows(); ++y)
    for (Index x = 0; x < labels.cols(); ++x) {
      const auto* c = lut[std::min<int>(labels(y, x), 2)];
      s.r(top + y, left + x) = c[0];
      s.g(top + y, left + x) = c[1];
      s.b(top + y, left + x) = c[2];
    }
}

struct ReportCmd {
  Common common;
  std::string data, dataset;
  std::vector<std::string> models;
  int n = 4;
  TilingOptions tiling;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("report", "Contact sheets: image | ground truth | prediction");
    add_common(c, common);
    c->add_option("--data", data, "Ingest output directory")->required();
    c->add_option("--model", models, "Checkpoint paths or globs")->required();
    c->add_option("--dataset", dataset, "Restrict to one dataset id");
    c->add_option("--n", n, "Test images per sheet")->capture_default_str()->check(CLI::PositiveNumber);
    tiling.add(c);
  }

  void run(RunManifest& rm) const {
    const Workspace ws = load_workspace(data);
    const auto cks = load_models(models);
    rm.inputs = expand_globs(models);
    const TilingPlan plan = tiling.plan(common.threads);
    const fs::path out(common.out);
    fs::create_directories(out);
    constexpr Index gap = 4;
    for (const SplitSet& s : ws.splits) {
      if (!dataset.empty() && s.source != dataset) continue;
      std::vector<LabeledImage> rows;
      for (const auto& e : s.test) {
        if (static_cast<int>(rows.size()) == n) break;
        const Sample& sample = ws.registry.sample(e.sample_id);
        if (sample.labeled()) rows.push_back(load_labeled(sample));
      }
      if (rows.empty()) continue;
      Index cell_h = 0, cell_w = 0;
      for (const auto& li : rows) cell_h = std::max(cell_h, li.image.rows()), cell_w = std::max(cell_w, li.image.cols());
      Rgb sheet(rows.size() * (cell_h + gap) + gap, 3 * (cell_w + gap) + gap);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        const LabeledImage& li = rows[i];
        const SegmentationMasks m = argmax_masks(ensemble_predict(cks, li.image, plan));
        const Image<std::uint8_t> pred = label_map(m.axon, m.myelin);
        const Index top = gap + static_cast<Index>(i) * (cell_h + gap);
        paste_gray(sheet, li.image, top, gap);
        paste_labels(sheet, li.labels, top, gap + (cell_w + gap));
        paste_labels(sheet, pred, top, gap + 2 * (cell_w + gap));
      }
      const fs::path png = out / (s.source + "_report.png");
      write_png_rgb(png.string(), sheet.r, sheet.g, sheet.b);
      rm.outputs.push_back(png.string());
      std::cout << s.source << ": " << rows.size() << " row(s) -> " << png.string() << '\n';
    }
    if (rm.outputs.empty()) throw InputError("no labeled test images to report on");
  }
};

}  // namespace mseg::cli

int main(int argc, char** argv) {
  using namespace mseg::cli;
  CLI::App app{"Axon and myelin segmentation toolkit", "mseg"};
  app.set_version_flag("--version", MSEG_VERSION);
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON config; explicit flags take precedence");
  app.allow_config_extras(CLI::config_extras_mode::ignore);
  app.require_subcommand(1);

  SynthCmd synth;
  IngestCmd ingest_cmd;
  TrainCmd train;
  PredictCmd predict;
  EvaluateCmd evaluate;
  MorphoCmd morpho;
  ReportCmd report;
  synth.add(app);
  ingest_cmd.add(app);
  train.add(app);
  predict.add(app);
  evaluate.add(app);
  morpho.add(app);
  report.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "mseg: " << e.what() << " (see --help)\n";
    return 1;
  }

  const CLI::App* cmd = app.get_subcommands().front();
  const std::string name = cmd->get_name();
  RunManifest rm;
  rm.command = name;
  rm.tool_version = MSEG_VERSION;
  rm.config = JsonConfig::snapshot(&app, true);
  Stopwatch clock;
  Common* common = nullptr;
  try {
    if (name == "synth") common = &synth.common, synth.run(rm);
    else if (name == "ingest") common = &ingest_cmd.common, ingest_cmd.run(rm);
    else if (name == "train") common = &train.common, train.run(rm);
    else if (name == "predict") common = &predict.common, predict.run(rm);
    else if (name == "evaluate") common = &evaluate.common, evaluate.run(rm);
    else if (name == "morphometrics") common = &morpho.common, morpho.run(rm);
    else if (name == "report") common = &report.common, report.run(rm);
    rm.seed = common->seed;
    rm.wall_clock_s = clock.seconds();
    rm.write(common->out);
  } catch (const mseg::ConfigError& e) {
    std::cerr << "mseg " << name << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "mseg " << name << ": " << e.what() << '\n';
    return 2;
  }
  return 0;
}
