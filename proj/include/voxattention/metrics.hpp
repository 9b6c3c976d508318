#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "voxattention/error.hpp"

namespace vox {

using Point3 = std::array<double, 3>;
using PointCloud = std::vector<Point3>;

// Occupancy grids are binarized at `threshold` (strictly greater). The
// union of two empty grids scores 1.0 so correctly-empty predictions for
// absent parts count as perfect.
double miou(std::span<const float> pred, std::span<const float> gt, double threshold = 0.5);

// Fraction of occupied voxels whose mirror image across the x mid-plane is
// occupied; empty grids score 1.0.
double symmetry_score(std::span<const float> occupancy, int resolution, double threshold = 0.5);

// Uniform sampling with replacement over occupied voxel centers, normalized
// to [0,1]^3. Raises on an empty grid.
PointCloud sample_points(std::span<const float> occupancy, int resolution, int count,
                         uint64_t seed, double threshold = 0.5);

// Symmetric sum of mean squared nearest-neighbor distances.
double chamfer(const PointCloud& a, const PointCloud& b);

// Exact optimal-assignment mean Euclidean distance (Hungarian algorithm);
// clouds must have equal size, at most 256 points.
double emd(const PointCloud& a, const PointCloud& b);

// Jensen-Shannon divergence (natural log) between the occupancy histograms
// of two shape sets accumulated on a grid^3 lattice over [0,1]^3.
double jsd(const std::vector<PointCloud>& set_a, const std::vector<PointCloud>& set_b,
           int grid = 28);

enum class SetDistance { chamfer, emd };

// MMD: mean over reference items of the minimum distance to any generated
// item. COV: fraction of reference items that are the nearest reference of
// at least one generated item.
std::pair<double, double> mmd_cov(const std::vector<PointCloud>& generated,
                                  const std::vector<PointCloud>& reference, SetDistance distance);

// Accumulates per-(item,part) IoUs; absent parts are skipped entirely. The
// overall mean is the micro-average over all present instances, not the
// mean of the per-part columns.
class PartIouAccumulator {
 public:
  explicit PartIouAccumulator(int n_parts) : sum_(n_parts, 0.0), count_(n_parts, 0) {}

  void add(int part_index, double iou) {  // 0-based part index
    sum_[static_cast<size_t>(part_index)] += iou;
    count_[static_cast<size_t>(part_index)] += 1;
  }

  bool available(int part_index) const { return count_[static_cast<size_t>(part_index)] > 0; }
  double per_part(int part_index) const {
    return available(part_index)
               ? sum_[static_cast<size_t>(part_index)] / static_cast<double>(count_[static_cast<size_t>(part_index)])
               : 0.0;
  }
  double micro_mean() const {
    double s = 0.0;
    int64_t n = 0;
    for (size_t i = 0; i < sum_.size(); ++i) {
      s += sum_[i];
      n += count_[i];
    }
    require(n > 0, ErrorKind::state, "part mIoU: no present part instances");
    return s / static_cast<double>(n);
  }
  int64_t instance_count() const {
    int64_t n = 0;
    for (int64_t c : count_) n += c;
    return n;
  }

 private:
  std::vector<double> sum_;
  std::vector<int64_t> count_;
};

struct MetricReport {
  int n_parts = 0;
  int item_count = 0;
  std::vector<double> per_part_miou;
  std::vector<uint8_t> part_available;
  double mean_part_miou = 0.0;
  double shape_miou = 0.0;
  double transform_mse = 0.0;
  std::vector<double> per_part_symmetry;
  double shape_symmetry = 0.0;
  bool has_set_metrics = false;
  double jsd_value = 0.0;
  double mmd_cd = 0.0;
  double mmd_emd = 0.0;
  double cov_cd = 0.0;
  double cov_emd = 0.0;

  // CSV columns: item_count, part1_miou..partN_miou (empty when the part
  // never occurs), mean_part_miou, shape_miou, transform_mse,
  // part1_sym..partN_sym, shape_symmetry, jsd, mmd_cd, mmd_emd, cov_cd,
  // cov_emd (set columns empty unless computed)
  std::string csv_header() const;
  std::string csv_row() const;
  std::string pretty() const;
};

}  // namespace vox
