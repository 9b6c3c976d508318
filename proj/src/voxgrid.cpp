#include "voxattention/voxgrid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "voxattention/rng.hpp"

namespace vox {

namespace {

void put_u32_le(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

[[noreturn]] void format_fail(const std::string& origin, size_t offset, const std::string& what) {
  fail(ErrorKind::format, origin + ": " + what + " at offset " + std::to_string(offset));
}

}  // namespace

std::vector<uint8_t> encode_vxp(const LabeledVoxelGrid& grid) {
  require(grid.resolution >= 1, ErrorKind::config, "vxp: non-positive resolution");
  require(grid.n_parts >= 0 && grid.n_parts <= 255, ErrorKind::config, "vxp: bad part count");
  require(grid.category.size() <= 255, ErrorKind::config, "vxp: category name too long");
  require(static_cast<int64_t>(grid.labels.size()) == grid.voxel_count(), ErrorKind::config,
          "vxp: label buffer does not match resolution");
  std::vector<uint8_t> out;
  out.reserve(11 + grid.category.size() + grid.labels.size());
  out.insert(out.end(), {'V', 'X', 'P', '1'});
  out.push_back(1);  // version
  put_u32_le(out, static_cast<uint32_t>(grid.resolution));
  out.push_back(static_cast<uint8_t>(grid.n_parts));
  out.push_back(static_cast<uint8_t>(grid.category.size()));
  out.insert(out.end(), grid.category.begin(), grid.category.end());
  out.insert(out.end(), grid.labels.begin(), grid.labels.end());
  return out;
}

LabeledVoxelGrid decode_vxp(const std::vector<uint8_t>& bytes, const std::string& origin) {
  size_t pos = 0;
  auto need = [&](size_t n, const char* what) {
    if (pos + n > bytes.size()) format_fail(origin, pos, std::string("truncated ") + what);
  };
  need(4, "magic");
  if (std::memcmp(bytes.data(), "VXP1", 4) != 0) format_fail(origin, 0, "bad magic");
  pos = 4;
  need(1, "version");
  if (bytes[pos] != 1)
    format_fail(origin, pos, "unsupported version " + std::to_string(bytes[pos]));
  pos += 1;
  need(4, "resolution");
  const uint32_t r = static_cast<uint32_t>(bytes[pos]) |
                     (static_cast<uint32_t>(bytes[pos + 1]) << 8) |
                     (static_cast<uint32_t>(bytes[pos + 2]) << 16) |
                     (static_cast<uint32_t>(bytes[pos + 3]) << 24);
  if (r == 0 || r > 1024) format_fail(origin, pos, "implausible resolution " + std::to_string(r));
  pos += 4;
  need(1, "part count");
  const uint8_t n_parts = bytes[pos];
  pos += 1;
  need(1, "category length");
  const uint8_t cat_len = bytes[pos];
  pos += 1;
  need(cat_len, "category");
  LabeledVoxelGrid grid;
  grid.resolution = static_cast<int>(r);
  grid.n_parts = n_parts;
  grid.category.assign(bytes.begin() + static_cast<ptrdiff_t>(pos),
                       bytes.begin() + static_cast<ptrdiff_t>(pos + cat_len));
  pos += cat_len;
  const size_t n_voxels = static_cast<size_t>(grid.voxel_count());
  need(n_voxels, "label payload");
  for (size_t i = 0; i < n_voxels; ++i) {
    const uint8_t label = bytes[pos + i];
    if (label > n_parts)
      format_fail(origin, pos + i,
                  "label " + std::to_string(label) + " exceeds part count " +
                      std::to_string(n_parts));
  }
  grid.labels.assign(bytes.begin() + static_cast<ptrdiff_t>(pos),
                     bytes.begin() + static_cast<ptrdiff_t>(pos + n_voxels));
  pos += n_voxels;
  if (pos != bytes.size()) format_fail(origin, pos, "trailing bytes");
  return grid;
}

LabeledVoxelGrid read_vxp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::io, "cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  LabeledVoxelGrid grid = decode_vxp(bytes, path);
  // item id defaults to the file stem
  const size_t slash = path.find_last_of("/\\");
  std::string stem = slash == std::string::npos ? path : path.substr(slash + 1);
  if (stem.size() > 4 && stem.substr(stem.size() - 4) == ".vxp") stem.resize(stem.size() - 4);
  grid.item_id = stem;
  return grid;
}

void write_vxp(const LabeledVoxelGrid& grid, const std::string& path) {
  const std::vector<uint8_t> bytes = encode_vxp(grid);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::io, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorKind::io, "short write to " + path);
}

std::vector<float> part_occupancy(const LabeledVoxelGrid& grid, int part_index) {
  std::vector<float> occ(static_cast<size_t>(grid.voxel_count()), 0.0f);
  for (size_t i = 0; i < occ.size(); ++i)
    if (grid.labels[i] == part_index) occ[i] = 1.0f;
  return occ;
}

std::vector<float> full_occupancy(const LabeledVoxelGrid& grid) {
  std::vector<float> occ(static_cast<size_t>(grid.voxel_count()), 0.0f);
  for (size_t i = 0; i < occ.size(); ++i)
    if (grid.labels[i] > 0) occ[i] = 1.0f;
  return occ;
}

std::pair<PartCanonical, PartTransform> canonicalize_part(const LabeledVoxelGrid& grid,
                                                          int part_index) {
  require(part_index >= 1 && part_index <= grid.n_parts, ErrorKind::dimension,
          "canonicalize_part: part index out of range");
  const int64_t R = grid.resolution;
  PartCanonical canonical;
  canonical.part_index = part_index;
  canonical.occupancy.assign(static_cast<size_t>(grid.voxel_count()), 0.0f);
  PartTransform transform;

  int64_t lo[3] = {R, R, R}, hi[3] = {0, 0, 0};
  for (int64_t x = 0; x < R; ++x)
    for (int64_t y = 0; y < R; ++y)
      for (int64_t z = 0; z < R; ++z)
        if (grid.at(x, y, z) == part_index) {
          const int64_t v[3] = {x, y, z};
          for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], v[a]);
            hi[a] = std::max(hi[a], v[a] + 1);
          }
        }
  if (hi[0] == 0) return {canonical, transform};  // empty part, placeholder transform

  canonical.present = true;
  int64_t extent[3];
  for (int a = 0; a < 3; ++a) {
    extent[a] = hi[a] - lo[a];
    transform.scale[static_cast<size_t>(a)] =
        static_cast<double>(extent[a]) / static_cast<double>(R);
    transform.translation[static_cast<size_t>(a)] =
        static_cast<double>(lo[a] + hi[a]) / (2.0 * static_cast<double>(R)) - 0.5;
  }
  // nearest-neighbor upsample: canonical voxel centers map into the bbox;
  // integer arithmetic keeps boundary cases exact
  std::vector<int64_t> src_idx[3];
  for (int a = 0; a < 3; ++a) {
    src_idx[a].resize(static_cast<size_t>(R));
    for (int64_t c = 0; c < R; ++c)
      src_idx[a][static_cast<size_t>(c)] = lo[a] + ((2 * c + 1) * extent[a]) / (2 * R);
  }
  for (int64_t x = 0; x < R; ++x)
    for (int64_t y = 0; y < R; ++y)
      for (int64_t z = 0; z < R; ++z) {
        const int64_t sx = src_idx[0][static_cast<size_t>(x)];
        const int64_t sy = src_idx[1][static_cast<size_t>(y)];
        const int64_t sz = src_idx[2][static_cast<size_t>(z)];
        if (grid.at(sx, sy, sz) == part_index)
          canonical.occupancy[static_cast<size_t>((x * R + y) * R + z)] = 1.0f;
      }
  return {canonical, transform};
}

std::vector<float> place_part_nn(const PartCanonical& part, const PartTransform& transform,
                                 int R) {
  std::vector<float> placed(static_cast<size_t>(R) * R * R, 0.0f);
  if (!part.present) return placed;
  const int64_t Ri = R;
  int64_t lo[3], extent[3];
  for (int a = 0; a < 3; ++a) {
    extent[a] = std::llround(transform.scale[static_cast<size_t>(a)] * R);
    require(extent[a] >= 1, ErrorKind::config, "place_part_nn: non-positive scale");
    lo[a] = std::llround((transform.translation[static_cast<size_t>(a)] + 0.5) * R -
                         static_cast<double>(extent[a]) / 2.0);
  }
  for (int64_t x = std::max<int64_t>(0, lo[0]); x < std::min(Ri, lo[0] + extent[0]); ++x)
    for (int64_t y = std::max<int64_t>(0, lo[1]); y < std::min(Ri, lo[1] + extent[1]); ++y)
      for (int64_t z = std::max<int64_t>(0, lo[2]); z < std::min(Ri, lo[2] + extent[2]); ++z) {
        const int64_t cx = ((2 * (x - lo[0]) + 1) * Ri) / (2 * extent[0]);
        const int64_t cy = ((2 * (y - lo[1]) + 1) * Ri) / (2 * extent[1]);
        const int64_t cz = ((2 * (z - lo[2]) + 1) * Ri) / (2 * extent[2]);
        placed[static_cast<size_t>((x * Ri + y) * Ri + z)] =
            part.occupancy[static_cast<size_t>((cx * Ri + cy) * Ri + cz)];
      }
  return placed;
}

std::vector<float> reassemble_gt(const std::vector<PartCanonical>& parts,
                                 const std::vector<PartTransform>& transforms, int R) {
  require(parts.size() == transforms.size(), ErrorKind::dimension,
          "reassemble_gt: parts/transforms length mismatch");
  std::vector<float> out(static_cast<size_t>(R) * R * R, 0.0f);
  for (size_t p = 0; p < parts.size(); ++p) {
    const std::vector<float> placed = place_part_nn(parts[p], transforms[p], R);
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], placed[i]);
  }
  return out;
}

namespace {

struct Box {
  int64_t x0, x1, y0, y1, z0, z1;  // half-open
};

void fill_box(LabeledVoxelGrid& grid, const Box& b, uint8_t label) {
  for (int64_t x = b.x0; x < b.x1; ++x)
    for (int64_t y = b.y0; y < b.y1; ++y)
      for (int64_t z = b.z0; z < b.z1; ++z) grid.at(x, y, z) = label;
}

// symmetric pair of boxes about the x mid-plane
void fill_box_mirrored(LabeledVoxelGrid& grid, const Box& b, uint8_t label) {
  fill_box(grid, b, label);
  const int64_t R = grid.resolution;
  fill_box(grid, {R - b.x1, R - b.x0, b.y0, b.y1, b.z0, b.z1}, label);
}

LabeledVoxelGrid generate_chair(Rng& rng, int R) {
  LabeledVoxelGrid grid;
  grid.resolution = R;
  grid.category = "chair";
  grid.n_parts = 4;
  grid.labels.assign(static_cast<size_t>(grid.voxel_count()), 0);

  // the 32-unit design scaled to R
  auto u = [R](int64_t v) { return std::max<int64_t>(1, (v * R) / 32); };

  const int64_t side = u(2) + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(u(3))));
  const int64_t seat_y = u(11) + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(u(5))));
  const int64_t seat_th = u(2) + static_cast<int64_t>(rng.next_below(2));
  const int64_t z_front = u(2) + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(u(3))));
  const int64_t z_back =
      R - u(2) - static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(u(2))));
  const int64_t back_th = u(2) + static_cast<int64_t>(rng.next_below(2));
  const int64_t back_top =
      u(24) + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(u(7))));
  const int64_t leg_w = u(2) + static_cast<int64_t>(rng.next_below(2));
  const bool has_arms = rng.next_double() >= 0.3;
  const int64_t arm_h = u(3) + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(u(3))));
  const int64_t arm_w = u(2);

  // seat (label 2): full-width slab
  fill_box(grid, {side, R - side, seat_y, seat_y + seat_th, z_front, z_back}, 2);
  // back (label 1): rear vertical slab above the seat
  fill_box(grid,
           {side, R - side, seat_y + seat_th, std::min<int64_t>(back_top, R), z_back - back_th,
            z_back},
           1);
  // legs (label 3): four posts under the seat corners
  fill_box_mirrored(grid, {side, side + leg_w, 0, seat_y, z_front, z_front + leg_w}, 3);
  fill_box_mirrored(grid, {side, side + leg_w, 0, seat_y, z_back - leg_w, z_back}, 3);
  // armrests (label 4): side bars on the seat, ending before the back
  if (has_arms) {
    const int64_t az0 = z_front + u(1);
    const int64_t az1 = z_back - back_th - u(2);
    if (az1 > az0)
      fill_box_mirrored(
          grid, {side, side + arm_w, seat_y + seat_th, seat_y + seat_th + arm_h, az0, az1}, 4);
  }
  return grid;
}

LabeledVoxelGrid generate_table(Rng& rng, int R) {
  LabeledVoxelGrid grid;
  grid.resolution = R;
  grid.category = "table";
  grid.n_parts = 2;
  grid.labels.assign(static_cast<size_t>(grid.voxel_count()), 0);

  auto u = [R](int64_t v) { return std::max<int64_t>(1, (v * R) / 32); };
  const int64_t side = u(2) + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(u(3))));
  const int64_t top_y = u(16) + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(u(8))));
  const int64_t top_th = u(2) + static_cast<int64_t>(rng.next_below(2));
  const int64_t z_front = side;
  const int64_t z_back = R - side;
  const int64_t leg_w = u(2) + static_cast<int64_t>(rng.next_below(2));
  const int64_t inset = u(1);

  fill_box(grid, {side, R - side, top_y, top_y + top_th, z_front, z_back}, 1);
  fill_box_mirrored(
      grid, {side + inset, side + inset + leg_w, 0, top_y, z_front + inset, z_front + inset + leg_w},
      2);
  fill_box_mirrored(
      grid, {side + inset, side + inset + leg_w, 0, top_y, z_back - inset - leg_w, z_back - inset},
      2);
  return grid;
}

}  // namespace

int category_part_count(const std::string& category) {
  if (category == "chair") return 4;
  if (category == "table") return 2;
  fail(ErrorKind::config, "unknown category: " + category);
}

LabeledVoxelGrid generate_synthetic(const std::string& category, uint64_t seed, int resolution) {
  require(resolution >= 16, ErrorKind::config, "generate_synthetic: resolution must be >= 16");
  Rng rng(Rng::derive(seed, Rng::hash_str(category), static_cast<uint64_t>(resolution)));
  LabeledVoxelGrid grid;
  if (category == "chair")
    grid = generate_chair(rng, resolution);
  else if (category == "table")
    grid = generate_table(rng, resolution);
  else
    fail(ErrorKind::config, "unknown category: " + category);
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%s_%06llu", category.c_str(),
                static_cast<unsigned long long>(seed));
  grid.item_id = buf;
  return grid;
}

std::vector<std::string> DatasetManifest::ids_of(const std::string& split) const {
  std::vector<std::string> out;
  for (const auto& item : items)
    if (item.split == split) out.push_back(item.item_id);
  return out;
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::io, "cannot open " + path);
  DatasetManifest m;
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::format, path + ": empty manifest");
  {
    std::istringstream header(line);
    std::string np, res, seed;
    require(static_cast<bool>(std::getline(header, m.category, '\t')) &&
                static_cast<bool>(std::getline(header, np, '\t')) &&
                static_cast<bool>(std::getline(header, res, '\t')) &&
                static_cast<bool>(std::getline(header, seed, '\t')),
            ErrorKind::format, path + ": malformed manifest header");
    m.n_parts = std::stoi(np);
    m.resolution = std::stoi(res);
    m.seed = std::stoull(seed);
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    require(tab != std::string::npos, ErrorKind::format,
            path + ": malformed manifest row: " + line);
    ManifestItem item{line.substr(0, tab), line.substr(tab + 1)};
    require(item.split == "train" || item.split == "test", ErrorKind::format,
            path + ": unknown split tag: " + item.split);
    m.items.push_back(std::move(item));
  }
  return m;
}

void write_manifest(const DatasetManifest& manifest, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), ErrorKind::io, "cannot write " + path);
  out << manifest.category << '\t' << manifest.n_parts << '\t' << manifest.resolution << '\t'
      << manifest.seed << '\n';
  for (const auto& item : manifest.items) out << item.item_id << '\t' << item.split << '\n';
  require(out.good(), ErrorKind::io, "short write to " + path);
}

void split_dataset(DatasetManifest& manifest, double ratio, uint64_t seed) {
  require(manifest.items.size() >= 2, ErrorKind::config, "split_dataset: need at least 2 items");
  require(ratio >= 0.0 && ratio <= 1.0, ErrorKind::config, "split_dataset: ratio must be in [0,1]");
  std::sort(manifest.items.begin(), manifest.items.end(),
            [](const ManifestItem& a, const ManifestItem& b) { return a.item_id < b.item_id; });
  Rng rng(Rng::derive(seed, Rng::hash_str("split")));
  for (size_t i = manifest.items.size() - 1; i > 0; --i) {
    const size_t j = static_cast<size_t>(rng.next_below(i + 1));
    std::swap(manifest.items[i], manifest.items[j]);
  }
  const auto n_train =
      static_cast<size_t>(std::llround(ratio * static_cast<double>(manifest.items.size())));
  for (size_t i = 0; i < manifest.items.size(); ++i)
    manifest.items[i].split = i < n_train ? "train" : "test";
}

}  // namespace vox
