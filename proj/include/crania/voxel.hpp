#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "crania/errors.hpp"

namespace crania {

/// Dense binary occupancy volume. Data is stored x-fastest, then y, then z:
/// index(x,y,z) = x + nx*(y + ny*z). Grids are treated as immutable once
/// shared; operations return new grids.
class VoxelGrid {
 public:
  VoxelGrid() = default;

  VoxelGrid(int nx, int ny, int nz,
            std::array<double, 3> spacing = {1.0, 1.0, 1.0})
      : dims_{nx, ny, nz}, spacing_(spacing) {
    if (nx <= 0 || ny <= 0 || nz <= 0)
      throw numeric_error("VoxelGrid: dimensions must be positive");
    if (spacing[0] <= 0 || spacing[1] <= 0 || spacing[2] <= 0)
      throw numeric_error("VoxelGrid: spacing must be positive");
    data_.assign(static_cast<std::size_t>(nx) * ny * nz, 0);
  }

  int nx() const { return dims_[0]; }
  int ny() const { return dims_[1]; }
  int nz() const { return dims_[2]; }
  std::array<int, 3> dims() const { return dims_; }
  const std::array<double, 3>& spacing() const { return spacing_; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims_[0]) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(dims_[1]) * static_cast<std::size_t>(z));
  }

  bool in_bounds(int x, int y, int z) const {
    return x >= 0 && x < dims_[0] && y >= 0 && y < dims_[1] && z >= 0 &&
           z < dims_[2];
  }

  std::uint8_t at(int x, int y, int z) const { return data_[index(x, y, z)]; }

  /// Out-of-bounds reads count as background.
  std::uint8_t at_or_zero(int x, int y, int z) const {
    return in_bounds(x, y, z) ? data_[index(x, y, z)] : std::uint8_t{0};
  }

  void set(int x, int y, int z, bool value) {
    data_[index(x, y, z)] = value ? 1 : 0;
  }

  const std::vector<std::uint8_t>& data() const { return data_; }
  std::vector<std::uint8_t>& data() { return data_; }

  std::int64_t occupancy() const {
    std::int64_t n = 0;
    for (std::uint8_t v : data_) n += v;
    return n;
  }

  bool empty_mask() const { return occupancy() == 0; }

  bool same_dims(const VoxelGrid& other) const { return dims_ == other.dims_; }

  friend bool operator==(const VoxelGrid& a, const VoxelGrid& b) {
    return a.dims_ == b.dims_ && a.spacing_ == b.spacing_ && a.data_ == b.data_;
  }

 private:
  std::array<int, 3> dims_{0, 0, 0};
  std::array<double, 3> spacing_{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> data_;
};

/// 2D binary mask, x-fastest.
class Mask2D {
 public:
  Mask2D() = default;
  Mask2D(int nx, int ny) : nx_(nx), ny_(ny) {
    if (nx <= 0 || ny <= 0)
      throw numeric_error("Mask2D: dimensions must be positive");
    data_.assign(static_cast<std::size_t>(nx) * ny, 0);
  }

  int nx() const { return nx_; }
  int ny() const { return ny_; }
  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx_) * static_cast<std::size_t>(y);
  }
  std::uint8_t at(int x, int y) const { return data_[index(x, y)]; }
  void set(int x, int y, bool value) { data_[index(x, y)] = value ? 1 : 0; }
  const std::vector<std::uint8_t>& data() const { return data_; }
  std::vector<std::uint8_t>& data() { return data_; }

  std::int64_t occupancy() const {
    std::int64_t n = 0;
    for (std::uint8_t v : data_) n += v;
    return n;
  }

  friend bool operator==(const Mask2D& a, const Mask2D& b) {
    return a.nx_ == b.nx_ && a.ny_ == b.ny_ && a.data_ == b.data_;
  }

 private:
  int nx_ = 0, ny_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Depth correspondence between the low-resolution working scale and the
/// original scale along z.
struct SliceMap {
  int low_depth = 0;   // L
  int high_depth = 0;  // H
  double ratio = 0.0;  // H / L

  SliceMap(int low, int high)
      : low_depth(low), high_depth(high),
        ratio(static_cast<double>(high) / static_cast<double>(low)) {
    if (low < 1 || high <= low)
      throw numeric_error("SliceMap: requires high_depth > low_depth >= 1");
  }
};

/// Low slice i covers original-scale slices floor(i*H/L) + {0,1,2}.
inline std::array<int, 3> low_to_high_indices(int i, const SliceMap& map) {
  if (i < 0 || i >= map.low_depth)
    throw numeric_error("low_to_high_indices: low index out of range");
  std::int64_t m0 = static_cast<std::int64_t>(i) * map.high_depth / map.low_depth;
  if (m0 + 2 >= map.high_depth)
    throw numeric_error("low_to_high_indices: mapped index exceeds high depth");
  int m = static_cast<int>(m0);
  return {m, m + 1, m + 2};
}

/// Original-scale slice m falls inside low slice floor(m*L/H).
inline int high_to_low_index(int m, const SliceMap& map) {
  if (m < 0 || m >= map.high_depth)
    throw numeric_error("high_to_low_index: high index out of range");
  return static_cast<int>(static_cast<std::int64_t>(m) * map.low_depth /
                          map.high_depth);
}

enum class ResampleMode { nearest, majority };

inline ResampleMode parse_resample_mode(const std::string& s) {
  if (s == "nearest") return ResampleMode::nearest;
  if (s == "majority") return ResampleMode::majority;
  throw config_error("unknown resample mode '" + s +
                     "' (expected nearest or majority)");
}

namespace detail {

// Preimage of destination cell i along one axis: [lo, hi).
inline void cell_bounds(int i, int n_dst, int n_src, int& lo, int& hi) {
  lo = static_cast<int>(static_cast<std::int64_t>(i) * n_src / n_dst);
  hi = static_cast<int>(static_cast<std::int64_t>(i + 1) * n_src / n_dst);
  if (hi <= lo) hi = lo + 1;
}

// Half-pixel centered nearest source index.
inline int nearest_src(int i, int n_dst, int n_src) {
  // floor((i + 0.5) * n_src / n_dst) without floating point.
  return static_cast<int>((2 * static_cast<std::int64_t>(i) + 1) * n_src /
                          (2 * static_cast<std::int64_t>(n_dst)));
}

}  // namespace detail

/// Fractional downsampling. Nearest mode copies the half-pixel centered
/// source voxel; majority mode sets a voxel when at least half of its source
/// cell is occupied. Both preserve binarity.
inline VoxelGrid downsample(const VoxelGrid& g, std::array<int, 3> target,
                            ResampleMode mode) {
  for (int a = 0; a < 3; ++a) {
    if (target[a] <= 0) throw numeric_error("downsample: zero target dimension");
    if (target[a] > g.dims()[a])
      throw numeric_error("downsample: target dimension exceeds source");
  }
  std::array<double, 3> sp = g.spacing();
  for (int a = 0; a < 3; ++a)
    sp[a] = sp[a] * g.dims()[a] / target[a];
  VoxelGrid out(target[0], target[1], target[2], sp);
  if (mode == ResampleMode::nearest) {
    for (int z = 0; z < target[2]; ++z) {
      int sz = detail::nearest_src(z, target[2], g.nz());
      for (int y = 0; y < target[1]; ++y) {
        int sy = detail::nearest_src(y, target[1], g.ny());
        for (int x = 0; x < target[0]; ++x) {
          int sx = detail::nearest_src(x, target[0], g.nx());
          out.set(x, y, z, g.at(sx, sy, sz) != 0);
        }
      }
    }
  } else {
    for (int z = 0; z < target[2]; ++z) {
      int z0, z1;
      detail::cell_bounds(z, target[2], g.nz(), z0, z1);
      for (int y = 0; y < target[1]; ++y) {
        int y0, y1;
        detail::cell_bounds(y, target[1], g.ny(), y0, y1);
        for (int x = 0; x < target[0]; ++x) {
          int x0, x1;
          detail::cell_bounds(x, target[0], g.nx(), x0, x1);
          std::int64_t count = 0;
          for (int sz = z0; sz < z1; ++sz)
            for (int sy = y0; sy < y1; ++sy)
              for (int sx = x0; sx < x1; ++sx) count += g.at(sx, sy, sz);
          std::int64_t volume = static_cast<std::int64_t>(z1 - z0) * (y1 - y0) *
                                (x1 - x0);
          out.set(x, y, z, 2 * count >= volume);
        }
      }
    }
  }
  return out;
}

/// 2D analogue of downsample.
inline Mask2D downsample_slice(const Mask2D& m, std::array<int, 2> target,
                               ResampleMode mode) {
  for (int a = 0; a < 2; ++a) {
    if (target[a] <= 0)
      throw numeric_error("downsample_slice: zero target dimension");
    int src = a == 0 ? m.nx() : m.ny();
    if (target[a] > src)
      throw numeric_error("downsample_slice: target dimension exceeds source");
  }
  Mask2D out(target[0], target[1]);
  if (mode == ResampleMode::nearest) {
    for (int y = 0; y < target[1]; ++y) {
      int sy = detail::nearest_src(y, target[1], m.ny());
      for (int x = 0; x < target[0]; ++x) {
        int sx = detail::nearest_src(x, target[0], m.nx());
        out.set(x, y, m.at(sx, sy) != 0);
      }
    }
  } else {
    for (int y = 0; y < target[1]; ++y) {
      int y0, y1;
      detail::cell_bounds(y, target[1], m.ny(), y0, y1);
      for (int x = 0; x < target[0]; ++x) {
        int x0, x1;
        detail::cell_bounds(x, target[0], m.nx(), x0, x1);
        std::int64_t count = 0;
        for (int sy = y0; sy < y1; ++sy)
          for (int sx = x0; sx < x1; ++sx) count += m.at(sx, sy);
        std::int64_t volume = static_cast<std::int64_t>(y1 - y0) * (x1 - x0);
        out.set(x, y, 2 * count >= volume);
      }
    }
  }
  return out;
}

/// Appends empty z-slices up to target_nz; existing slices are untouched.
inline VoxelGrid pad_z(const VoxelGrid& g, int target_nz) {
  if (target_nz < g.nz())
    throw numeric_error("pad_z: target depth smaller than source");
  if (target_nz == g.nz()) return g;
  VoxelGrid out(g.nx(), g.ny(), target_nz, g.spacing());
  std::memcpy(out.data().data(), g.data().data(), g.data().size());
  return out;
}

inline Mask2D extract_slice(const VoxelGrid& g, int z) {
  if (z < 0 || z >= g.nz())
    throw numeric_error("extract_slice: z index out of range");
  Mask2D out(g.nx(), g.ny());
  std::size_t plane = static_cast<std::size_t>(g.nx()) * g.ny();
  std::memcpy(out.data().data(),
              g.data().data() + plane * static_cast<std::size_t>(z), plane);
  return out;
}

/// Voxel-wise a AND NOT b.
inline VoxelGrid set_difference(const VoxelGrid& a, const VoxelGrid& b) {
  if (!a.same_dims(b)) throw numeric_error("set_difference: dims mismatch");
  VoxelGrid out(a.nx(), a.ny(), a.nz(), a.spacing());
  const auto& da = a.data();
  const auto& db = b.data();
  auto& dout = out.data();
  for (std::size_t i = 0; i < da.size(); ++i)
    dout[i] = static_cast<std::uint8_t>(da[i] & static_cast<std::uint8_t>(~db[i] & 1));
  return out;
}

inline VoxelGrid logical_and(const VoxelGrid& a, const VoxelGrid& b) {
  if (!a.same_dims(b)) throw numeric_error("logical_and: dims mismatch");
  VoxelGrid out(a.nx(), a.ny(), a.nz(), a.spacing());
  for (std::size_t i = 0; i < a.data().size(); ++i)
    out.data()[i] = a.data()[i] & b.data()[i];
  return out;
}

inline VoxelGrid logical_or(const VoxelGrid& a, const VoxelGrid& b) {
  if (!a.same_dims(b)) throw numeric_error("logical_or: dims mismatch");
  VoxelGrid out(a.nx(), a.ny(), a.nz(), a.spacing());
  for (std::size_t i = 0; i < a.data().size(); ++i)
    out.data()[i] = a.data()[i] | b.data()[i];
  return out;
}

/// One training/evaluation case: the defective skull, the complete skull,
/// and their difference (the ground-truth implant).
struct VolumePair {
  VoxelGrid defective;
  VoxelGrid complete;
  VoxelGrid implant;
  std::string case_id;

  void validate() const {
    if (!defective.same_dims(complete) || !defective.same_dims(implant))
      throw numeric_error("VolumePair: grids must share dims (" + case_id + ")");
    if (defective.spacing() != complete.spacing() ||
        defective.spacing() != implant.spacing())
      throw numeric_error("VolumePair: grids must share spacing (" + case_id +
                          ")");
    for (std::size_t i = 0; i < defective.data().size(); ++i) {
      std::uint8_t d = defective.data()[i];
      std::uint8_t c = complete.data()[i];
      std::uint8_t m = implant.data()[i];
      if ((m & d) != 0)
        throw numeric_error("VolumePair: implant overlaps defective (" +
                            case_id + ")");
      if ((m | d) != c)
        throw numeric_error(
            "VolumePair: implant OR defective differs from complete (" +
            case_id + ")");
    }
  }
};

// ---------------------------------------------------------------------------
// VXL file format.
//
// Line 1 (ASCII, newline-terminated):  VXL1 nx ny nz sx sy sz
// followed by exactly nx*ny*nz bytes, one voxel each (0x00 or 0x01),
// x-fastest, then y, then z.
// ---------------------------------------------------------------------------

inline std::string vxl_header(const VoxelGrid& g) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "VXL1 %d %d %d %.17g %.17g %.17g\n", g.nx(),
                g.ny(), g.nz(), g.spacing()[0], g.spacing()[1], g.spacing()[2]);
  return buf;
}

inline void save_grid(const VoxelGrid& g, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("save_grid: cannot open '" + path.string() + "'");
  std::string header = vxl_header(g);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(g.data().data()),
            static_cast<std::streamsize>(g.data().size()));
  if (!out) throw io_error("save_grid: write failed for '" + path.string() + "'");
}

inline VoxelGrid load_grid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("load_grid: cannot open '" + path.string() + "'");
  std::string header;
  if (!std::getline(in, header))
    throw io_error("load_grid: missing header in '" + path.string() + "'");
  std::istringstream hs(header);
  std::string magic;
  long long nx = 0, ny = 0, nz = 0;
  double sx = 0, sy = 0, sz = 0;
  if (!(hs >> magic >> nx >> ny >> nz >> sx >> sy >> sz) || magic != "VXL1")
    throw io_error("load_grid: malformed header in '" + path.string() + "'");
  std::string trailing;
  if (hs >> trailing)
    throw io_error("load_grid: malformed header in '" + path.string() + "'");
  if (nx <= 0 || ny <= 0 || nz <= 0 || sx <= 0 || sy <= 0 || sz <= 0)
    throw io_error("load_grid: non-positive dims or spacing in '" +
                   path.string() + "'");
  VoxelGrid g(static_cast<int>(nx), static_cast<int>(ny), static_cast<int>(nz),
              {sx, sy, sz});
  in.read(reinterpret_cast<char*>(g.data().data()),
          static_cast<std::streamsize>(g.data().size()));
  if (static_cast<std::size_t>(in.gcount()) != g.data().size())
    throw io_error("load_grid: payload shorter than header dims in '" +
                   path.string() + "'");
  char extra;
  if (in.read(&extra, 1); in.gcount() != 0)
    throw io_error("load_grid: payload longer than header dims in '" +
                   path.string() + "'");
  for (std::uint8_t v : g.data())
    if (v > 1)
      throw io_error("load_grid: non-binary voxel in '" + path.string() + "'");
  return g;
}

// ---------------------------------------------------------------------------
// Dataset manifest: one record per case.
//   case_id split defective_path complete_path implant_path
// Paths are relative to the manifest's directory; '#' starts a comment.
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string case_id;
  std::string split;  // "train" or "val"
  std::string defective_path;
  std::string complete_path;
  std::string implant_path;
};

inline void save_manifest(const std::vector<ManifestEntry>& entries,
                          const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw io_error("save_manifest: cannot open '" + path.string() + "'");
  out << "# case_id split defective complete implant\n";
  for (const auto& e : entries)
    out << e.case_id << ' ' << e.split << ' ' << e.defective_path << ' '
        << e.complete_path << ' ' << e.implant_path << '\n';
  if (!out) throw io_error("save_manifest: write failed");
}

inline std::vector<ManifestEntry> load_manifest(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("load_manifest: cannot open '" + path.string() + "'");
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!(ls >> e.case_id >> e.split >> e.defective_path >> e.complete_path >>
          e.implant_path))
      throw io_error("load_manifest: malformed record '" + line + "'");
    if (e.split != "train" && e.split != "val")
      throw io_error("load_manifest: unknown split '" + e.split + "'");
    entries.push_back(std::move(e));
  }
  return entries;
}

/// Loads the three grids of a manifest entry and validates the pair.
inline VolumePair load_pair(const ManifestEntry& e,
                            const std::filesystem::path& manifest_dir) {
  VolumePair pair;
  pair.case_id = e.case_id;
  pair.defective = load_grid(manifest_dir / e.defective_path);
  pair.complete = load_grid(manifest_dir / e.complete_path);
  pair.implant = load_grid(manifest_dir / e.implant_path);
  pair.validate();
  return pair;
}

}  // namespace crania
