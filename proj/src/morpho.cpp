#include "mseg/morpho.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>

#include "mseg/errors.hpp"

namespace mseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas (Felzenszwalb and Huttenlocher), in place over f.
void distance_1d(std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  int k = 0;
  int first = -1;
  for (int q = 0; q < n; ++q)
    if (f[static_cast<std::size_t>(q)] < kInf) {
      first = q;
      break;
    }
  if (first < 0) return;  // whole line stays infinite
  v[0] = first;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = first + 1; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] == kInf) continue;
    double s;
    while (true) {
      const int p = v[static_cast<std::size_t>(k)];
      s = ((f[static_cast<std::size_t>(q)] + double(q) * q) - (f[static_cast<std::size_t>(p)] + double(p) * p)) /
          (2.0 * (q - p));
      if (s <= z[static_cast<std::size_t>(k)] && k > 0)
        --k;
      else
        break;
    }
    if (s <= z[static_cast<std::size_t>(k)]) {  // k == 0
      v[0] = q;
      z[1] = kInf;
      continue;
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k) + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(k) + 1] < q) ++k;
    const int p = v[static_cast<std::size_t>(k)];
    d[static_cast<std::size_t>(q)] = double(q - p) * (q - p) + f[static_cast<std::size_t>(p)];
  }
  f.swap(d);
}

}  // namespace

ImageD squared_distance_transform(const Mask& fg) {
  const Index H = fg.rows(), W = fg.cols();
  ImageD dist(H, W);
  for (Index i = 0; i < H * W; ++i) dist(i) = fg(i) ? 0.0 : kInf;
  const std::size_t n = static_cast<std::size_t>(std::max(H, W));
  std::vector<double> f, d(n);
  std::vector<int> v(n);
  std::vector<double> z(n + 1);
  for (Index x = 0; x < W; ++x) {
    f.assign(static_cast<std::size_t>(H), 0);
    for (Index y = 0; y < H; ++y) f[static_cast<std::size_t>(y)] = dist(y, x);
    d.resize(f.size());
    distance_1d(f, d, v, z);
    for (Index y = 0; y < H; ++y) dist(y, x) = f[static_cast<std::size_t>(y)];
  }
  for (Index y = 0; y < H; ++y) {
    f.assign(static_cast<std::size_t>(W), 0);
    for (Index x = 0; x < W; ++x) f[static_cast<std::size_t>(x)] = dist(y, x);
    d.resize(f.size());
    distance_1d(f, d, v, z);
    for (Index x = 0; x < W; ++x) dist(y, x) = f[static_cast<std::size_t>(x)];
  }
  return dist;
}

int label_components(const Mask& mask, Image<std::int32_t>& labels) {
  const Index H = mask.rows(), W = mask.cols();
  labels = Image<std::int32_t>::Zero(H, W);
  int next = 0;
  std::vector<Index> stack;
  for (Index start = 0; start < H * W; ++start) {
    if (!mask(start) || labels(start)) continue;
    labels(start) = ++next;
    stack.push_back(start);
    while (!stack.empty()) {
      const Index i = stack.back();
      stack.pop_back();
      const Index y = i / W, x = i % W;
      for (Index dy = -1; dy <= 1; ++dy)
        for (Index dx = -1; dx <= 1; ++dx) {
          const Index ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
          const Index j = ny * W + nx;
          if (mask(j) && !labels(j)) {
            labels(j) = next;
            stack.push_back(j);
          }
        }
    }
  }
  return next;
}

InstanceSet extract_instances(const Mask& axon, const Mask& myelin, const MorphoOptions& opt) {
  if (axon.rows() != myelin.rows() || axon.cols() != myelin.cols())
    throw ContractViolation("extract_instances: axon and myelin masks differ in size");
  if (((axon != 0) && (myelin != 0)).any()) throw ContractViolation("extract_instances: masks overlap");
  const int H = static_cast<int>(axon.rows()), W = static_cast<int>(axon.cols());

  InstanceSet set;
  set.height = H;
  set.width = W;
  const int n_axons = label_components(axon, set.axon_labels);
  set.instances.resize(static_cast<std::size_t>(n_axons));
  for (int k = 0; k < n_axons; ++k) set.instances[static_cast<std::size_t>(k)].id = k + 1;
  for (Index i = 0; i < axon.size(); ++i)
    if (const int l = set.axon_labels(i)) set.instances[static_cast<std::size_t>(l - 1)].axon_pixels.push_back(i);

  // nearest axon pixels lie on the lattice circle of radius^2 = D around the myelin pixel
  const ImageD dist2 = squared_distance_transform(axon);
  auto nearest_label = [&](int y, int x) {
    const long D = std::lround(dist2(y, x));
    int best = std::numeric_limits<int>::max();
    const int r = static_cast<int>(std::floor(std::sqrt(static_cast<double>(D))));
    for (int dy = -r; dy <= r; ++dy) {
      const long rem = D - long(dy) * dy;
      long dx = std::lround(std::sqrt(static_cast<double>(rem)));
      if (dx * dx != rem) continue;
      for (long sx : {-dx, dx}) {
        const int ny = y + dy, nx = x + static_cast<int>(sx);
        if (ny >= 0 && ny < H && nx >= 0 && nx < W && set.axon_labels(ny, nx)) best = std::min(best, set.axon_labels(ny, nx));
        if (dx == 0) break;
      }
    }
    return best;
  };

  Image<std::int32_t> regions;
  const int n_regions = label_components(myelin, regions);
  std::vector<std::vector<Index>> region_pixels(static_cast<std::size_t>(n_regions));
  for (Index i = 0; i < myelin.size(); ++i)
    if (regions(i)) region_pixels[static_cast<std::size_t>(regions(i) - 1)].push_back(i);

  set.myelin_labels = Image<std::int32_t>::Zero(H, W);
  const double orphan2 = opt.orphan_radius_px * opt.orphan_radius_px;
  for (const auto& px : region_pixels) {
    double closest = kInf;
    for (Index i : px) closest = std::min(closest, dist2(i));
    if (closest > orphan2) {
      for (Index i : px) set.myelin_labels(i) = -1;
      set.orphans.push_back(px);
      continue;
    }
    for (Index i : px) set.myelin_labels(i) = nearest_label(static_cast<int>(i / W), static_cast<int>(i % W));
  }
  for (Index i = 0; i < myelin.size(); ++i)
    if (set.myelin_labels(i) > 0) set.instances[static_cast<std::size_t>(set.myelin_labels(i) - 1)].myelin_pixels.push_back(i);

  for (AxonInstance& inst : set.instances) {
    double sx = 0, sy = 0;
    auto on_border = [&](Index i) {
      const Index y = i / W, x = i % W;
      return y == 0 || x == 0 || y == H - 1 || x == W - 1;
    };
    for (Index i : inst.axon_pixels) {
      sy += static_cast<double>(i / W);
      sx += static_cast<double>(i % W);
      inst.touches_border = inst.touches_border || on_border(i);
    }
    for (Index i : inst.myelin_pixels) inst.touches_border = inst.touches_border || on_border(i);
    inst.centroid_x = sx / static_cast<double>(inst.axon_pixels.size());
    inst.centroid_y = sy / static_cast<double>(inst.axon_pixels.size());
  }
  return set;
}

std::vector<MorphometricRecord> compute_morphometrics(const InstanceSet& set, double ps, const MorphoOptions& opt) {
  if (!(ps > 0)) throw ContractViolation("compute_morphometrics: pixel_size_um must be > 0");
  if (opt.rays < 1 || !(opt.ray_step_px > 0)) throw ContractViolation("compute_morphometrics: bad ray settings");
  const int H = set.height, W = set.width;
  auto owner = [&](double y, double x, bool with_myelin, int id) {
    const long iy = std::lround(y), ix = std::lround(x);
    if (iy < 0 || iy >= H || ix < 0 || ix >= W) return false;
    return set.axon_labels(iy, ix) == id || (with_myelin && set.myelin_labels(iy, ix) == id);
  };

  std::vector<MorphometricRecord> out;
  for (const AxonInstance& inst : set.instances) {
    MorphometricRecord r;
    r.instance_id = inst.id;
    r.centroid_x_px = inst.centroid_x;
    r.centroid_y_px = inst.centroid_y;
    const double a_in = static_cast<double>(inst.axon_pixels.size());
    const double a_out = a_in + static_cast<double>(inst.myelin_pixels.size());
    r.axon_area_um2 = a_in * ps * ps;
    r.equiv_diameter_um = 2 * std::sqrt(a_in / std::numbers::pi) * ps;
    r.outer_diameter_um = 2 * std::sqrt(a_out / std::numbers::pi) * ps;
    r.touches_border = inst.touches_border;
    r.low_confidence = static_cast<int>(inst.axon_pixels.size()) < opt.low_confidence_px;
    if (!inst.myelin_pixels.empty()) {
      r.g_ratio = r.equiv_diameter_um / r.outer_diameter_um;
      const double limit = std::hypot(H, W);
      double total = 0;
      for (int k = 0; k < opt.rays; ++k) {
        const double th = 2 * std::numbers::pi * k / opt.rays;
        const double dy = std::sin(th), dx = std::cos(th);
        double t = 0;
        while (t < limit && owner(inst.centroid_y + t * dy, inst.centroid_x + t * dx, false, inst.id)) t += opt.ray_step_px;
        const double inner = t;
        while (t < limit && owner(inst.centroid_y + t * dy, inst.centroid_x + t * dx, true, inst.id)) t += opt.ray_step_px;
        total += t - inner;
      }
      r.myelin_thickness_um = total / opt.rays * ps;
    }
    out.push_back(r);
  }
  return out;
}

namespace {
constexpr const char* kHeader =
    "instance_id,centroid_x_px,centroid_y_px,axon_area_um2,equiv_diameter_um,outer_diameter_um,"
    "myelin_thickness_um,g_ratio,touches_border,low_confidence";
}

void export_records(std::span<const MorphometricRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kHeader << '\n' << std::setprecision(17);
  for (const auto& r : records) {
    out << r.instance_id << ',' << r.centroid_x_px << ',' << r.centroid_y_px << ',' << r.axon_area_um2 << ','
        << r.equiv_diameter_um << ',' << r.outer_diameter_um << ',' << r.myelin_thickness_um << ',';
    if (r.g_ratio)
      out << *r.g_ratio;
    else
      out << "NA";
    out << ',' << int(r.touches_border) << ',' << int(r.low_confidence) << '\n';
  }
}

std::vector<MorphometricRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(DataErrorKind::missing_file, "morphometrics csv not found: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kHeader)
    throw DataError(DataErrorKind::bad_manifest, "morphometrics csv: unexpected header in " + path.string());
  std::vector<MorphometricRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) f.push_back(c);
    if (f.size() != 10) throw DataError(DataErrorKind::bad_manifest, "morphometrics csv: bad row '" + line + "'");
    MorphometricRecord r;
    r.instance_id = std::stoi(f[0]);
    r.centroid_x_px = std::stod(f[1]);
    r.centroid_y_px = std::stod(f[2]);
    r.axon_area_um2 = std::stod(f[3]);
    r.equiv_diameter_um = std::stod(f[4]);
    r.outer_diameter_um = std::stod(f[5]);
    r.myelin_thickness_um = std::stod(f[6]);
    if (f[7] != "NA") r.g_ratio = std::stod(f[7]);
    r.touches_border = f[8] == "1";
    r.low_confidence = f[9] == "1";
    out.push_back(r);
  }
  return out;
}

}  // namespace mseg
