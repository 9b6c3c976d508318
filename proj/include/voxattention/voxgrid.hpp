#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "voxattention/error.hpp"

namespace vox {

// Per-voxel semantic labels, 0 = empty, 1..n_parts. Linear index is
// x*R^2 + y*R + z with x slowest.
struct LabeledVoxelGrid {
  int resolution = 32;
  int n_parts = 0;
  std::string category;
  std::string item_id;
  std::vector<uint8_t> labels;

  int64_t voxel_count() const {
    return static_cast<int64_t>(resolution) * resolution * resolution;
  }
  uint8_t at(int64_t x, int64_t y, int64_t z) const {
    return labels[static_cast<size_t>((x * resolution + y) * resolution + z)];
  }
  uint8_t& at(int64_t x, int64_t y, int64_t z) {
    return labels[static_cast<size_t>((x * resolution + y) * resolution + z)];
  }
};

// One part resampled so its bounding box fills the full grid.
struct PartCanonical {
  int part_index = 0;
  bool present = false;
  std::vector<float> occupancy;  // R^3 in [0,1], binary for ground truth
};

// Scale/translation placing a canonical part back into the shape, in the
// normalized frame where the grid spans [0,1] per axis. For a bbox [lo,hi)
// in voxels: s = (hi-lo)/R, t = (lo+hi)/(2R) - 0.5. Absent parts carry the
// placeholder (1,1,1,0,0,0).
struct PartTransform {
  std::array<double, 3> scale{1.0, 1.0, 1.0};
  std::array<double, 3> translation{0.0, 0.0, 0.0};
};

// ---- VXP serialization -------------------------------------------------------
// Little-endian layout: magic "VXP1", u8 version=1, u32 resolution,
// u8 n_parts, u8 category length + UTF-8 bytes, then R^3 label bytes.

LabeledVoxelGrid read_vxp(const std::string& path);
void write_vxp(const LabeledVoxelGrid& grid, const std::string& path);

std::vector<uint8_t> encode_vxp(const LabeledVoxelGrid& grid);
LabeledVoxelGrid decode_vxp(const std::vector<uint8_t>& bytes, const std::string& origin);

// ---- occupancy helpers -------------------------------------------------------

std::vector<float> part_occupancy(const LabeledVoxelGrid& grid, int part_index);
std::vector<float> full_occupancy(const LabeledVoxelGrid& grid);

// ---- canonicalization --------------------------------------------------------

std::pair<PartCanonical, PartTransform> canonicalize_part(const LabeledVoxelGrid& grid,
                                                          int part_index);

// Nearest-neighbor placement of one canonical part by its transform.
std::vector<float> place_part_nn(const PartCanonical& part, const PartTransform& transform, int R);

// Voxelwise union (max) of all placed parts.
std::vector<float> reassemble_gt(const std::vector<PartCanonical>& parts,
                                 const std::vector<PartTransform>& transforms, int R);

// ---- synthetic shapes --------------------------------------------------------

// Procedural shapes for desk-scale runs; a pure function of
// (category, seed, resolution). Chairs are labeled 1=back, 2=seat, 3=leg,
// 4=armrest and are mirror-symmetric about the x mid-plane; about 30% have
// no armrests. Tables are 1=top, 2=leg.
LabeledVoxelGrid generate_synthetic(const std::string& category, uint64_t seed, int resolution = 32);

int category_part_count(const std::string& category);

// ---- dataset manifest --------------------------------------------------------

struct ManifestItem {
  std::string item_id;
  std::string split;  // "train" or "test"
};

struct DatasetManifest {
  std::string category;
  int n_parts = 0;
  int resolution = 32;
  uint64_t seed = 0;
  std::vector<ManifestItem> items;

  std::vector<std::string> ids_of(const std::string& split) const;
};

DatasetManifest read_manifest(const std::string& path);
void write_manifest(const DatasetManifest& manifest, const std::string& path);

// Deterministic shuffle by seed, first `ratio` of the items become train.
void split_dataset(DatasetManifest& manifest, double ratio, uint64_t seed);

}  // namespace vox
