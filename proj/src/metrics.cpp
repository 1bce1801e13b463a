#include "mseg/metrics.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "mseg/pipeline.hpp"

namespace mseg {

double dice(const Mask& pred, const Mask& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols())
    throw ContractViolation("dice: mask sizes differ (" + std::to_string(pred.rows()) + "x" +
                            std::to_string(pred.cols()) + " vs " + std::to_string(gt.rows()) + "x" +
                            std::to_string(gt.cols()) + ")");
  if ((pred > 1).any() || (gt > 1).any()) throw ContractViolation("dice: masks must be binary (0/1)");
  const long p = pred.cast<long>().sum(), g = gt.cast<long>().sum();
  if (p + g == 0) return 1.0;
  const long both = (pred.cast<long>() * gt.cast<long>()).sum();
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

namespace {

// Modified Lentz evaluation of the continued fraction for I_x(a, b).
double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300, eps = 1e-16;
  const double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1, d = 1 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1 / d;
  double h = d;
  for (int m = 1; m <= 500; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1) < eps) return h;
  }
  throw NumericError("incomplete_beta: continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0 && b > 0)) throw ContractViolation("incomplete_beta: a and b must be positive");
  if (!(x >= 0 && x <= 1)) throw ContractViolation("incomplete_beta: x must lie in [0, 1]");
  if (x == 0 || x == 1) return x;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  if (x < (a + 1) / (a + b + 2)) return std::exp(log_front) * beta_continued_fraction(a, b, x) / a;
  return 1 - std::exp(log_front) * beta_continued_fraction(b, a, 1 - x) / b;
}

double student_t_two_sided_p(double t, double df) {
  if (!(df > 0)) throw ContractViolation("student_t: df must be positive");
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(df / 2, 0.5, df / (df + t * t));
}

TTestResult paired_ttest(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ContractViolation("paired_ttest: lengths differ (" + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()) + ")");
  if (a.size() < 2) throw ContractViolation("paired_ttest: need at least 2 pairs");
  const std::size_t n = a.size();
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = (a[i] - b[i]) - mean;
    ss += e * e;
  }
  TTestResult r;
  r.n = static_cast<int>(n);
  r.df = static_cast<double>(n - 1);
  r.mean_diff = mean;
  const double sd = std::sqrt(ss / r.df);
  if (sd == 0) {
    if (mean == 0) return r;
    r.t = std::copysign(std::numeric_limits<double>::infinity(), mean);
    r.p = 0;
    r.degenerate = true;
    return r;
  }
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

ModelEntry model_entry(const std::string& name, std::span<const ModelCheckpoint> checkpoints) {
  if (checkpoints.empty()) throw ContractViolation("model_entry: no checkpoints for " + name);
  ModelEntry e;
  e.name = name;
  for (const auto& ck : checkpoints) {
    e.members.push_back(std::make_shared<UNetPredictor>(ck));
    e.train_ids.insert(ck.provenance.train_ids.begin(), ck.provenance.train_ids.end());
  }
  return e;
}

const DiceCell& EvaluationMatrix::at(const std::string& target, const std::string& source) const {
  for (std::size_t r = 0; r < targets.size(); ++r)
    if (targets[r] == target)
      for (std::size_t c = 0; c < sources.size(); ++c)
        if (sources[c] == source) return cells[r][c];
  throw ContractViolation("evaluation matrix has no cell (" + target + ", " + source + ")");
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace

EvaluationMatrix evaluate_matrix(std::span<const ModelEntry> models, std::span<const TargetSet> targets,
                                 const TilingPlan& plan) {
  for (const ModelEntry& m : models) {
    if (m.members.empty()) throw ContractViolation("evaluate_matrix: model " + m.name + " has no members");
    for (const TargetSet& t : targets)
      for (const Sample& s : t.samples)
        if (m.train_ids.count(s.sample_id))
          throw ContractViolation("evaluate_matrix: sample " + s.sample_id + " of target " + t.id +
                                  " was used to train model " + m.name);
  }

  EvaluationMatrix out;
  for (const auto& m : models) out.sources.push_back(m.name);
  for (const TargetSet& t : targets) {
    out.targets.push_back(t.id);
    std::vector<DiceCell> row(models.size());
    const bool labeled =
        !t.samples.empty() && std::all_of(t.samples.begin(), t.samples.end(), [](const Sample& s) { return s.labeled(); });
    if (labeled) {
      std::vector<LabeledImage> images;
      for (const Sample& s : t.samples) images.push_back(load_labeled(s));
      for (std::size_t c = 0; c < models.size(); ++c) {
        std::vector<const Predictor*> members;
        for (const auto& p : models[c].members) members.push_back(p.get());
        std::vector<double> axon, myelin;
        for (const LabeledImage& li : images) {
          const SegmentationMasks pred = argmax_masks(ensemble_predict(members, li.image, plan));
          axon.push_back(dice(pred.axon, (li.labels == kAxon).cast<std::uint8_t>()));
          myelin.push_back(dice(pred.myelin, (li.labels == kMyelin).cast<std::uint8_t>()));
        }
        DiceCell& cell = row[c];
        cell.available = true;
        cell.n_images = static_cast<int>(images.size());
        std::tie(cell.axon_mean, cell.axon_std) = mean_std(axon);
        std::tie(cell.myelin_mean, cell.myelin_std) = mean_std(myelin);
      }
    }
    out.cells.push_back(std::move(row));
  }
  return out;
}

void write_heatmap_csv(const EvaluationMatrix& m, const std::filesystem::path& path) {
  for (const auto* names : {&m.targets, &m.sources})
    for (const auto& s : *names)
      if (s.find_first_of(",\"\n") != std::string::npos)
        throw ContractViolation("heatmap csv: name '" + s + "' contains a delimiter");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "target_dataset,source_model,class,dice_mean,dice_std,n_images\n";
  out << std::setprecision(17);
  for (std::size_t r = 0; r < m.targets.size(); ++r)
    for (std::size_t c = 0; c < m.sources.size(); ++c) {
      const DiceCell& cell = m.cells[r][c];
      for (int k = 0; k < 2; ++k) {
        out << m.targets[r] << ',' << m.sources[c] << ',' << (k == 0 ? "axon" : "myelin") << ',';
        if (cell.available)
          out << (k == 0 ? cell.axon_mean : cell.myelin_mean) << ',' << (k == 0 ? cell.axon_std : cell.myelin_std);
        else
          out << "NA,NA";
        out << ',' << cell.n_images << '\n';
      }
    }
}

EvaluationMatrix read_heatmap_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(DataErrorKind::missing_file, "heatmap csv not found: " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "target_dataset,source_model,class,dice_mean,dice_std,n_images")
    throw DataError(DataErrorKind::bad_manifest, "heatmap csv: unexpected header in " + path.string());
  EvaluationMatrix m;
  auto index_of = [](std::vector<std::string>& v, const std::string& s) {
    auto it = std::find(v.begin(), v.end(), s);
    if (it != v.end()) return static_cast<std::size_t>(it - v.begin());
    v.push_back(s);
    return v.size() - 1;
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 6) throw DataError(DataErrorKind::bad_manifest, "heatmap csv: bad row '" + line + "'");
    const std::size_t r = index_of(m.targets, f[0]), c = index_of(m.sources, f[1]);
    if (m.cells.size() <= r) m.cells.resize(r + 1);
    for (auto& row : m.cells) row.resize(m.sources.size());
    DiceCell& cell = m.cells[r][c];
    cell.n_images = std::stoi(f[5]);
    if (f[3] == "NA") continue;
    cell.available = true;
    (f[2] == "axon" ? cell.axon_mean : cell.myelin_mean) = std::stod(f[3]);
    (f[2] == "axon" ? cell.axon_std : cell.myelin_std) = std::stod(f[4]);
  }
  return m;
}

namespace {

std::string color_for(double v) {
  // piecewise-linear viridis approximation
  static const std::array<std::array<double, 3>, 5> stops{{{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}}};
  v = std::clamp(v, 0.0, 1.0) * 4;
  const int i = std::min(3, static_cast<int>(v));
  const double f = v - i;
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(std::lround(stops[i][0] + f * (stops[i + 1][0] - stops[i][0]))),
                static_cast<int>(std::lround(stops[i][1] + f * (stops[i + 1][1] - stops[i][1]))),
                static_cast<int>(std::lround(stops[i][2] + f * (stops[i + 1][2] - stops[i][2]))));
  return buf;
}

std::string escape(const std::string& s) {
  std::string o;
  for (char ch : s) {
    if (ch == '<') o += "&lt;";
    else if (ch == '>') o += "&gt;";
    else if (ch == '&') o += "&amp;";
    else o += ch;
  }
  return o;
}

}  // namespace

std::string heatmap_svg(const EvaluationMatrix& m) {
  const int cell = 72, label_w = 110, label_h = 40, gap = 40;
  const int grid_w = cell * static_cast<int>(m.sources.size()), grid_h = cell * static_cast<int>(m.targets.size());
  const int panel_w = label_w + grid_w;
  const int width = 2 * panel_w + gap + 10, height = label_h + 24 + grid_h + 10;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<defs><pattern id=\"na\" width=\"8\" height=\"8\" patternUnits=\"userSpaceOnUse\">"
    << "<rect width=\"8\" height=\"8\" fill=\"#e0e0e0\"/><path d=\"M0,8 L8,0\" stroke=\"#9e9e9e\" stroke-width=\"1\"/>"
    << "</pattern></defs>\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int k = 0; k < 2; ++k) {
    const int ox = k * (panel_w + gap);
    s << "<text x=\"" << ox + label_w + grid_w / 2 << "\" y=\"16\" text-anchor=\"middle\" font-weight=\"bold\">"
      << (k == 0 ? "axon Dice" : "myelin Dice") << "</text>\n";
    for (std::size_t c = 0; c < m.sources.size(); ++c)
      s << "<text x=\"" << ox + label_w + static_cast<int>(c) * cell + cell / 2 << "\" y=\"" << label_h + 14
        << "\" text-anchor=\"middle\">" << escape(m.sources[c]) << "</text>\n";
    for (std::size_t r = 0; r < m.targets.size(); ++r) {
      const int y = label_h + 24 + static_cast<int>(r) * cell;
      s << "<text x=\"" << ox + label_w - 6 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"end\">"
        << escape(m.targets[r]) << "</text>\n";
      for (std::size_t c = 0; c < m.sources.size(); ++c) {
        const DiceCell& d = m.cells[r][c];
        const int x = ox + label_w + static_cast<int>(c) * cell;
        const double v = k == 0 ? d.axon_mean : d.myelin_mean;
        s << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\""
          << (d.available ? color_for(v) : "url(#na)") << "\" stroke=\"white\"/>\n";
        std::ostringstream label;
        if (d.available)
          label << std::fixed << std::setprecision(3) << v;
        else
          label << "n/a";
        s << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"middle\" fill=\""
          << (d.available && v > 0.6 ? "black" : (d.available ? "white" : "#424242")) << "\">" << label.str()
          << "</text>\n";
      }
    }
  }
  s << "</svg>\n";
  return s.str();
}

void write_heatmap_svg(const EvaluationMatrix& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << heatmap_svg(m);
}

}  // namespace mseg
