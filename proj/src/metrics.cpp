#include "voxattention/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "voxattention/rng.hpp"

namespace vox {

double miou(std::span<const float> pred, std::span<const float> gt, double threshold) {
  require(pred.size() == gt.size(), ErrorKind::dimension, "miou: resolution mismatch");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] > threshold;
    const bool g = gt[i] > threshold;
    inter += p && g;
    uni += p || g;
  }
  if (uni == 0) return 1.0;  // empty vs empty
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double symmetry_score(std::span<const float> occupancy, int resolution, double threshold) {
  const int64_t R = resolution;
  require(static_cast<int64_t>(occupancy.size()) == R * R * R, ErrorKind::dimension,
          "symmetry_score: buffer does not match resolution");
  require(R % 2 == 0, ErrorKind::config, "symmetry_score: resolution must be even");
  int64_t occupied = 0, matched = 0;
  for (int64_t x = 0; x < R; ++x)
    for (int64_t y = 0; y < R; ++y)
      for (int64_t z = 0; z < R; ++z) {
        if (occupancy[static_cast<size_t>((x * R + y) * R + z)] <= threshold) continue;
        ++occupied;
        const int64_t mx = R - 1 - x;
        if (occupancy[static_cast<size_t>((mx * R + y) * R + z)] > threshold) ++matched;
      }
  if (occupied == 0) return 1.0;
  return static_cast<double>(matched) / static_cast<double>(occupied);
}

PointCloud sample_points(std::span<const float> occupancy, int resolution, int count,
                         uint64_t seed, double threshold) {
  const int64_t R = resolution;
  std::vector<int64_t> occupied;
  for (int64_t i = 0; i < static_cast<int64_t>(occupancy.size()); ++i)
    if (occupancy[static_cast<size_t>(i)] > threshold) occupied.push_back(i);
  require(!occupied.empty(), ErrorKind::state, "sample_points: empty occupancy grid");
  Rng rng(seed);
  PointCloud cloud;
  cloud.reserve(static_cast<size_t>(count));
  for (int k = 0; k < count; ++k) {
    const int64_t idx = occupied[static_cast<size_t>(rng.next_below(occupied.size()))];
    const int64_t x = idx / (R * R), y = (idx / R) % R, z = idx % R;
    cloud.push_back({(static_cast<double>(x) + 0.5) / static_cast<double>(R),
                     (static_cast<double>(y) + 0.5) / static_cast<double>(R),
                     (static_cast<double>(z) + 0.5) / static_cast<double>(R)});
  }
  return cloud;
}

namespace {

double sq_dist(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

double min_sq_dist_to(const Point3& p, const PointCloud& cloud) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& q : cloud) best = std::min(best, sq_dist(p, q));
  return best;
}

}  // namespace

double chamfer(const PointCloud& a, const PointCloud& b) {
  require(!a.empty() && !b.empty(), ErrorKind::dimension, "chamfer: empty point cloud");
  double sum_ab = 0.0;
  for (const auto& p : a) sum_ab += min_sq_dist_to(p, b);
  double sum_ba = 0.0;
  for (const auto& q : b) sum_ba += min_sq_dist_to(q, a);
  return sum_ab / static_cast<double>(a.size()) + sum_ba / static_cast<double>(b.size());
}

double emd(const PointCloud& a, const PointCloud& b) {
  require(a.size() == b.size(), ErrorKind::dimension, "emd: clouds must have equal size");
  require(!a.empty(), ErrorKind::dimension, "emd: empty point cloud");
  require(a.size() <= 256, ErrorKind::config, "emd: exact assignment capped at 256 points");
  const int n = static_cast<int>(a.size());
  std::vector<double> cost(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      cost[static_cast<size_t>(i) * n + j] = std::sqrt(sq_dist(a[static_cast<size_t>(i)], b[static_cast<size_t>(j)]));

  // Hungarian algorithm with potentials, O(n^3)
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
  std::vector<int> match(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n) + 1, inf);
    std::vector<char> used(static_cast<size_t>(n) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = match[static_cast<size_t>(j0)];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = cost[static_cast<size_t>(i0 - 1) * n + (j - 1)] -
                           u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(match[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      match[static_cast<size_t>(j0)] = match[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  double total = 0.0;
  for (int j = 1; j <= n; ++j)
    total += cost[static_cast<size_t>(match[static_cast<size_t>(j)] - 1) * n + (j - 1)];
  return total / static_cast<double>(n);
}

namespace {

std::vector<double> point_histogram(const std::vector<PointCloud>& set, int grid) {
  std::vector<double> hist(static_cast<size_t>(grid) * grid * grid, 0.0);
  double total = 0.0;
  for (const auto& cloud : set)
    for (const auto& p : cloud) {
      int idx[3];
      for (int a = 0; a < 3; ++a) {
        const int i = static_cast<int>(std::floor(p[static_cast<size_t>(a)] * grid));
        idx[a] = std::clamp(i, 0, grid - 1);
      }
      hist[static_cast<size_t>((idx[0] * grid + idx[1]) * grid + idx[2])] += 1.0;
      total += 1.0;
    }
  if (total > 0)
    for (auto& h : hist) h /= total;
  return hist;
}

}  // namespace

double jsd(const std::vector<PointCloud>& set_a, const std::vector<PointCloud>& set_b, int grid) {
  require(!set_a.empty() && !set_b.empty(), ErrorKind::dimension, "jsd: empty shape set");
  const std::vector<double> p = point_histogram(set_a, grid);
  const std::vector<double> q = point_histogram(set_b, grid);
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) acc += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0) acc += 0.5 * q[i] * std::log(q[i] / m);
  }
  return acc;
}

std::pair<double, double> mmd_cov(const std::vector<PointCloud>& generated,
                                  const std::vector<PointCloud>& reference,
                                  SetDistance distance) {
  require(!generated.empty() && !reference.empty(), ErrorKind::dimension,
          "mmd_cov: empty shape set");
  const size_t ng = generated.size(), nr = reference.size();
  std::vector<double> d(ng * nr);
  for (size_t g = 0; g < ng; ++g)
    for (size_t r = 0; r < nr; ++r)
      d[g * nr + r] = distance == SetDistance::chamfer ? chamfer(generated[g], reference[r])
                                                       : emd(generated[g], reference[r]);
  double mmd = 0.0;
  for (size_t r = 0; r < nr; ++r) {
    double best = std::numeric_limits<double>::infinity();
    for (size_t g = 0; g < ng; ++g) best = std::min(best, d[g * nr + r]);
    mmd += best;
  }
  mmd /= static_cast<double>(nr);

  std::vector<char> covered(nr, 0);
  for (size_t g = 0; g < ng; ++g) {
    size_t best_r = 0;
    double best = d[g * nr];
    for (size_t r = 1; r < nr; ++r)
      if (d[g * nr + r] < best) {  // strict: first minimum wins ties
        best = d[g * nr + r];
        best_r = r;
      }
    covered[best_r] = 1;
  }
  int64_t n_cov = 0;
  for (char c : covered) n_cov += c;
  return {mmd, static_cast<double>(n_cov) / static_cast<double>(nr)};
}

namespace {

std::string fmt_f(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

std::string MetricReport::csv_header() const {
  std::ostringstream os;
  os << "item_count";
  for (int p = 1; p <= n_parts; ++p) os << ",part" << p << "_miou";
  os << ",mean_part_miou,shape_miou,transform_mse";
  for (int p = 1; p <= n_parts; ++p) os << ",part" << p << "_sym";
  os << ",shape_symmetry,jsd,mmd_cd,mmd_emd,cov_cd,cov_emd";
  return os.str();
}

std::string MetricReport::csv_row() const {
  std::ostringstream os;
  os << item_count;
  for (int p = 0; p < n_parts; ++p) {
    os << ',';
    if (part_available[static_cast<size_t>(p)]) os << fmt_f(per_part_miou[static_cast<size_t>(p)]);
  }
  os << ',' << fmt_f(mean_part_miou) << ',' << fmt_f(shape_miou) << ',' << fmt_f(transform_mse);
  for (int p = 0; p < n_parts; ++p) {
    os << ',';
    if (part_available[static_cast<size_t>(p)])
      os << fmt_f(per_part_symmetry[static_cast<size_t>(p)]);
  }
  os << ',' << fmt_f(shape_symmetry);
  if (has_set_metrics)
    os << ',' << fmt_f(jsd_value) << ',' << fmt_f(mmd_cd) << ',' << fmt_f(mmd_emd) << ','
       << fmt_f(cov_cd) << ',' << fmt_f(cov_emd);
  else
    os << ",,,,,";
  return os.str();
}

std::string MetricReport::pretty() const {
  std::ostringstream os;
  os << "items evaluated: " << item_count << '\n';
  os << "part mIoU:";
  for (int p = 0; p < n_parts; ++p) {
    os << "  part" << (p + 1) << "=";
    if (part_available[static_cast<size_t>(p)])
      os << fmt_f(per_part_miou[static_cast<size_t>(p)]);
    else
      os << "n/a";
  }
  os << "  mean=" << fmt_f(mean_part_miou) << '\n';
  os << "shape mIoU: " << fmt_f(shape_miou) << '\n';
  os << "transform MSE: " << fmt_f(transform_mse) << '\n';
  os << "symmetry:";
  for (int p = 0; p < n_parts; ++p) {
    os << "  part" << (p + 1) << "=";
    if (part_available[static_cast<size_t>(p)])
      os << fmt_f(per_part_symmetry[static_cast<size_t>(p)]);
    else
      os << "n/a";
  }
  os << "  shape=" << fmt_f(shape_symmetry) << '\n';
  if (has_set_metrics) {
    os << "JSD: " << fmt_f(jsd_value) << "  MMD-CD: " << fmt_f(mmd_cd)
       << "  MMD-EMD: " << fmt_f(mmd_emd) << "  COV-CD: " << fmt_f(cov_cd)
       << "  COV-EMD: " << fmt_f(cov_emd) << '\n';
  }
  return os.str();
}

}  // namespace vox
