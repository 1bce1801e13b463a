#include <doctest.h>

#include <boost/math/distributions/students_t.hpp>
#include <filesystem>
#include <fstream>
#include <random>

#include "mseg/metrics.hpp"
#include "mseg/pipeline.hpp"

using namespace mseg;
namespace fs = std::filesystem;

namespace {

Mask random_mask(int h, int w, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution b(p);
  return Mask::NullaryExpr(h, w, [&] { return static_cast<std::uint8_t>(b(rng)); });
}

// Reads the class straight from an image whose gray levels encode labels as 0, 0.5, 1.
class OracleStub final : public Predictor {
 public:
  Tensor<float> logits(const Tensor<float>& x) const override {
    Tensor<float> out({x.batch(), 3, x.height(), x.width()});
    for (Index n = 0; n < x.batch(); ++n)
      for (Index c = 0; c < 3; ++c)
        out.plane(n, c) = (-100.0f * (x.plane(n, 0).array() - 0.5f * static_cast<float>(c)).abs()).matrix();
    return out;
  }
  int size_divisor() const override { return 4; }
};

class BackgroundStub final : public Predictor {
 public:
  Tensor<float> logits(const Tensor<float>& x) const override {
    Tensor<float> out({x.batch(), 3, x.height(), x.width()});
    for (Index n = 0; n < x.batch(); ++n) out.plane(n, 0).setConstant(5.0f);
    return out;
  }
  int size_divisor() const override { return 4; }
};

std::vector<Sample> write_targets(const fs::path& dir, const std::string& domain, int n, std::mt19937_64& rng) {
  fs::create_directories(dir);
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) {
    Image<std::uint8_t> labels = Image<std::uint8_t>::NullaryExpr(20, 24, [&] { return static_cast<std::uint8_t>(rng() % 3); });
    labels(0, 0) = 0;
    labels(0, 1) = 1;
    labels(0, 2) = 2;
    const std::string stem = "t" + std::to_string(i);
    Sample s;
    s.sample_id = namespaced_id(domain, stem);
    s.domain_id = domain;
    s.image_path = (dir / (stem + ".png")).string();
    s.axon_mask_path = (dir / (stem + "_seg-axon.png")).string();
    s.myelin_mask_path = (dir / (stem + "_seg-myelin.png")).string();
    s.height = 20;
    s.width = 24;
    write_png(s.image_path, (labels * 127).cast<std::uint8_t>());
    write_mask_png(s.axon_mask_path, (labels == 1).cast<std::uint8_t>());
    write_mask_png(s.myelin_mask_path, (labels == 2).cast<std::uint8_t>());
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST_CASE("dice examples and brute-force oracle") {
  Mask a = Mask::Zero(10, 10);
  a.block(0, 0, 10, 5).setOnes();
  CHECK(dice(a, a) == 1.0);
  Mask b = Mask::Zero(10, 10);
  b.block(0, 5, 10, 5).setOnes();
  CHECK(dice(a, b) == 0.0);
  Mask gt = Mask::Zero(10, 10);
  gt.setOnes();  // 100 px
  Mask half = Mask::Zero(10, 10);
  half.block(0, 0, 5, 10).setOnes();  // 50 px subset
  CHECK(dice(half, gt) == doctest::Approx(100.0 / 150.0).epsilon(1e-15));
  CHECK(dice(Mask::Zero(4, 4), Mask::Zero(4, 4)) == 1.0);
  CHECK_THROWS_AS(dice(Mask::Zero(4, 4), Mask::Zero(4, 5)), ContractViolation);

  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    const int h = 1 + static_cast<int>(rng() % 30), w = 1 + static_cast<int>(rng() % 30);
    const Mask p = random_mask(h, w, (rng() % 100) / 100.0, rng), g = random_mask(h, w, (rng() % 100) / 100.0, rng);
    long inter = 0, np = 0, ng = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        np += p(y, x);
        ng += g(y, x);
        inter += p(y, x) && g(y, x);
      }
    const double ref = np + ng == 0 ? 1.0 : 2.0 * inter / static_cast<double>(np + ng);
    REQUIRE(dice(p, g) == ref);
    REQUIRE(dice(g, p) == dice(p, g));
  }
}

TEST_CASE("incomplete beta matches frozen reference values") {
  CHECK(std::abs(incomplete_beta(0.5, 0.5, 0.3) - 0.36901011956554536) < 1e-13);
  CHECK(std::abs(incomplete_beta(2, 3, 0.4) - 0.5247999999999999) < 1e-13);
  CHECK(std::abs(incomplete_beta(10, 0.5, 0.9) - 0.15164090963470994) < 1e-13);
  CHECK(std::abs(incomplete_beta(50, 50, 0.5) - 0.5) < 1e-13);
  CHECK(std::abs(incomplete_beta(1.5, 20, 0.01) - 0.06120371478345902) < 1e-13);
}

TEST_CASE("t distribution tail vs reference implementations") {
  struct Ref {
    double t, df, p;
  };
  // values frozen from a standard scientific Python stack
  const Ref refs[] = {{0.5, 3, 0.651447964848151},       {2.0, 7, 0.08561932856297597},
                      {4.5, 2, 0.04600190799427602},     {10.0, 30, 4.5752514082296097e-11},
                      {1.0, 1, 0.49999999999999956},     {0.01, 100, 0.9920412102344285},
                      {7.0, 5, 0.0009167475143984045}};
  for (const Ref& r : refs) CHECK(std::abs(student_t_two_sided_p(r.t, r.df) - r.p) < 1e-12);

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> tdist(-12, 12);
  for (int i = 0; i < 500; ++i) {
    const double df = 1 + static_cast<double>(rng() % 60), t = tdist(rng);
    boost::math::students_t dist(df);
    const double ref = 2 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    REQUIRE(std::abs(student_t_two_sided_p(t, df) - ref) < 1e-9);
  }
}

TEST_CASE("paired t-test") {
  const std::vector<double> a{0.81, 0.77, 0.69, 0.85, 0.72, 0.66, 0.79, 0.74};
  const std::vector<double> b{0.78, 0.75, 0.61, 0.83, 0.70, 0.60, 0.80, 0.69};
  TTestResult r = paired_ttest(a, b);
  CHECK(r.n == 8);
  CHECK(r.df == 7);
  CHECK(std::abs(r.t - 3.378773058752296) < 1e-9);
  CHECK(std::abs(r.p - 0.011778397715329932) < 1e-9);

  const std::vector<double> a2{0.9, 0.8, 0.7}, b2{0.1, 0.2, 0.35};
  CHECK(std::abs(paired_ttest(a2, b2).p - 0.04636046678160372) < 1e-9);
  const std::vector<double> a3{1.0, 2.0, 3.0, 4.0, 5.5}, b3{1.1, 1.9, 3.3, 3.9, 5.0};
  CHECK(std::abs(paired_ttest(a3, b3).p - 0.6745184997325249) < 1e-9);

  TTestResult same = paired_ttest(a, a);
  CHECK(same.t == 0);
  CHECK(same.p == 1);
  CHECK_FALSE(same.degenerate);

  const std::vector<double> d{1, -1, 1, -1}, zero(4, 0.0);
  TTestResult sym = paired_ttest(d, zero);
  CHECK(sym.t == 0);
  CHECK(sym.p == doctest::Approx(1.0).epsilon(1e-15));

  const std::vector<double> shifted{1.5, 2.5, 3.5}, base{1.0, 2.0, 3.0};
  TTestResult deg = paired_ttest(shifted, base);
  CHECK(deg.degenerate);
  CHECK(deg.p == 0);
  CHECK(std::isinf(deg.t));

  // antisymmetry and shift invariance
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0.7, 0.1);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> x(6), y(6);
    for (int i = 0; i < 6; ++i) {
      x[i] = g(rng);
      y[i] = g(rng);
    }
    const TTestResult fwd = paired_ttest(x, y), rev = paired_ttest(y, x);
    CHECK(fwd.t == -rev.t);
    CHECK(fwd.p == rev.p);
    const double k = 0.25 * (t + 1);
    std::vector<double> xs = x, ys = y;
    for (int i = 0; i < 6; ++i) {
      xs[i] += k;
      ys[i] += k;
    }
    const TTestResult sh = paired_ttest(xs, ys);
    CHECK(std::abs(sh.t - fwd.t) < 1e-8 * std::max(1.0, std::abs(fwd.t)));
    CHECK(std::abs(sh.p - fwd.p) < 1e-9);
  }

  CHECK_THROWS_AS(paired_ttest(std::vector<double>{1.0}, std::vector<double>{2.0}), ContractViolation);
  CHECK_THROWS_AS(paired_ttest(a, a2), ContractViolation);
}

TEST_CASE("evaluation matrix: oracle model, unavailable targets, leakage guard") {
  const fs::path dir = fs::temp_directory_path() / "mseg_metrics_eval";
  fs::remove_all(dir);
  std::mt19937_64 rng(4);
  TargetSet t1{"A", write_targets(dir / "A", "A", 3, rng)};
  TargetSet t2{"B", write_targets(dir / "B", "B", 2, rng)};
  TargetSet unlabeled{"U", write_targets(dir / "U", "U", 1, rng)};
  unlabeled.samples[0].axon_mask_path.clear();
  unlabeled.samples[0].myelin_mask_path.clear();

  ModelEntry oracle{"oracle", {std::make_shared<OracleStub>()}, {}};
  ModelEntry bg{"bg", {std::make_shared<BackgroundStub>()}, {}};
  const std::vector<ModelEntry> models{oracle, bg};
  const std::vector<TargetSet> targets{t1, t2, unlabeled};
  const TilingPlan plan{16, 16, 0.5, BlendMode::gaussian};
  EvaluationMatrix m = evaluate_matrix(models, targets, plan);
  CHECK(m.targets == std::vector<std::string>{"A", "B", "U"});
  CHECK(m.at("A", "oracle").available);
  CHECK(m.at("A", "oracle").axon_mean == 1.0);
  CHECK(m.at("B", "oracle").myelin_mean == 1.0);
  CHECK(m.at("B", "oracle").n_images == 2);
  CHECK(m.at("A", "bg").axon_mean == 0.0);
  CHECK_FALSE(m.at("U", "oracle").available);

  // bit-exact reproducibility
  EvaluationMatrix again = evaluate_matrix(models, targets, plan);
  CHECK(again.at("A", "oracle").axon_std == m.at("A", "oracle").axon_std);

  ModelEntry leaky{"leaky", {std::make_shared<OracleStub>()}, {"B/t1"}};
  const std::vector<ModelEntry> bad{leaky};
  CHECK_THROWS_AS(evaluate_matrix(bad, targets, plan), ContractViolation);

  // CSV round trip and SVG rendering
  write_heatmap_csv(m, dir / "h.csv");
  EvaluationMatrix back = read_heatmap_csv(dir / "h.csv");
  CHECK(back.targets == m.targets);
  CHECK(back.sources == m.sources);
  for (std::size_t r = 0; r < m.targets.size(); ++r)
    for (std::size_t c = 0; c < m.sources.size(); ++c) {
      const DiceCell &x = m.cells[r][c], &y = back.cells[r][c];
      CHECK(x.available == y.available);
      CHECK(x.axon_mean == y.axon_mean);
      CHECK(x.myelin_std == y.myelin_std);
      CHECK(x.n_images == y.n_images);
    }
  const std::string svg = heatmap_svg(m);
  CHECK(svg.find("url(#na)") != std::string::npos);
  CHECK(svg.find("n/a") != std::string::npos);
  CHECK(svg.find("0.000") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("heatmap csv for a 1x1 matrix") {
  EvaluationMatrix m;
  m.targets = {"A"};
  m.sources = {"A"};
  m.cells = {{DiceCell{true, 0.9, 0.01, 0.8, 0.02, 4}}};
  const fs::path p = fs::temp_directory_path() / "mseg_1x1.csv";
  write_heatmap_csv(m, p);
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  // header plus one row per foreground class of the single cell
  REQUIRE(lines.size() == 3);
  CHECK(lines[1].rfind("A,A,axon,", 0) == 0);
  for (const auto& l : lines) CHECK(std::count(l.begin(), l.end(), ',') == 5);
  fs::remove(p);
}
