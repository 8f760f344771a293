#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "crania/morphology.hpp"
#include "crania/rng.hpp"
#include "crania/voxel.hpp"

namespace crania {

/// Randomized ellipsoidal skull shell. Semi-axes are fractions of the grid
/// dimensions; the cavity sits `thickness` voxels inside the outer surface.
struct SkullSpec {
  std::array<int, 3> dims{64, 64, 64};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::array<double, 3> outer_frac{0.42, 0.46, 0.44};
  double thickness = 5.0;      // voxels; >= the outer semi-axes makes it solid
  double center_jitter = 0.02; // center offset bound, fraction of each dim
  double axis_jitter = 0.05;   // semi-axis scale bound, relative

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 8)
        throw config_error("SkullSpec: dims must be at least 8 voxels");
      if (spacing[a] <= 0.0)
        throw config_error("SkullSpec: spacing must be positive");
      if (outer_frac[a] <= 0.0 || outer_frac[a] > 0.5)
        throw config_error("SkullSpec: outer_frac must lie in (0, 0.5]");
    }
    if (thickness <= 0.0)
      throw config_error("SkullSpec: thickness must be positive");
    if (center_jitter < 0.0 || center_jitter > 0.2)
      throw config_error("SkullSpec: center_jitter must lie in [0, 0.2]");
    if (axis_jitter < 0.0 || axis_jitter > 0.5)
      throw config_error("SkullSpec: axis_jitter must lie in [0, 0.5]");
  }
};

inline VoxelGrid generate_skull(const SkullSpec& spec, Rng& rng) {
  spec.validate();
  std::array<double, 3> center, outer, inner;
  for (int a = 0; a < 3; ++a)
    center[a] = 0.5 * spec.dims[a] +
                rng.uniform(-spec.center_jitter, spec.center_jitter) *
                    spec.dims[a];
  bool solid = false;
  for (int a = 0; a < 3; ++a) {
    const double scale = 1.0 + rng.uniform(-spec.axis_jitter, spec.axis_jitter);
    outer[a] = spec.outer_frac[a] * spec.dims[a] * scale;
    inner[a] = outer[a] - spec.thickness;
    if (inner[a] < 0.5) solid = true;  // cavity thinner than a voxel
  }

  VoxelGrid g(spec.dims[0], spec.dims[1], spec.dims[2], spec.spacing);
  for (int z = 0; z < g.nz(); ++z)
    for (int y = 0; y < g.ny(); ++y)
      for (int x = 0; x < g.nx(); ++x) {
        const double px = x + 0.5 - center[0];
        const double py = y + 0.5 - center[1];
        const double pz = z + 0.5 - center[2];
        auto inside = [&](const std::array<double, 3>& s) {
          const double qx = px / s[0], qy = py / s[1], qz = pz / s[2];
          return qx * qx + qy * qy + qz * qz <= 1.0;
        };
        if (inside(outer) && (solid || !inside(inner))) g.set(x, y, z, true);
      }

  if (g.empty_mask())
    throw numeric_error("generate_skull: spec produced an empty shell");
  if (connected_components(g, Connectivity::twentysix).count() != 1)
    throw numeric_error("generate_skull: shell is not connected");
  return g;
}

/// Defect carved out of the shell: a sphere or box centered on a randomly
/// chosen shell voxel inside the configured z band, resampled until the
/// removed piece is non-empty and connected.
struct DefectSpec {
  enum class Shape { sphere, box };
  Shape shape = Shape::sphere;
  double size_lo = 0.12;  // radius / half-extent, fraction of the min dim
  double size_hi = 0.20;
  double band_lo = 0.55;  // z band for the defect center, fraction of nz
  double band_hi = 0.90;
  int max_retries = 64;

  void validate() const {
    if (size_lo <= 0.0 || size_hi < size_lo || size_hi > 0.5)
      throw config_error("DefectSpec: need 0 < size_lo <= size_hi <= 0.5");
    if (band_lo < 0.0 || band_hi <= band_lo || band_hi > 1.0)
      throw config_error("DefectSpec: need 0 <= band_lo < band_hi <= 1");
    if (max_retries < 1)
      throw config_error("DefectSpec: max_retries must be at least 1");
  }
};

inline DefectSpec::Shape parse_defect_shape(const std::string& s) {
  if (s == "sphere") return DefectSpec::Shape::sphere;
  if (s == "box") return DefectSpec::Shape::box;
  throw config_error("unknown defect shape '" + s +
                     "' (expected sphere or box)");
}

inline const char* defect_shape_name(DefectSpec::Shape s) {
  return s == DefectSpec::Shape::sphere ? "sphere" : "box";
}

inline VolumePair inject_defect(const VoxelGrid& skull, const DefectSpec& spec,
                                Rng& rng, std::string case_id) {
  spec.validate();
  const int z_lo = static_cast<int>(spec.band_lo * skull.nz());
  const int z_hi = static_cast<int>(spec.band_hi * skull.nz());
  std::vector<std::array<int, 3>> band;
  for (int z = z_lo; z < z_hi; ++z)
    for (int y = 0; y < skull.ny(); ++y)
      for (int x = 0; x < skull.nx(); ++x)
        if (skull.at(x, y, z)) band.push_back({x, y, z});
  if (band.empty())
    throw numeric_error("inject_defect: no shell voxels in the z band (" +
                        case_id + ")");

  const int min_dim = std::min({skull.nx(), skull.ny(), skull.nz()});
  for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
    const auto center =
        band[static_cast<std::size_t>(rng.uniform_int(
            0, static_cast<int>(band.size()) - 1))];
    const double r = rng.uniform(spec.size_lo, spec.size_hi) * min_dim;

    VoxelGrid implant(skull.nx(), skull.ny(), skull.nz(), skull.spacing());
    const int reach = static_cast<int>(r) + 1;
    for (int z = std::max(0, center[2] - reach);
         z <= std::min(skull.nz() - 1, center[2] + reach); ++z)
      for (int y = std::max(0, center[1] - reach);
           y <= std::min(skull.ny() - 1, center[1] + reach); ++y)
        for (int x = std::max(0, center[0] - reach);
             x <= std::min(skull.nx() - 1, center[0] + reach); ++x) {
          if (!skull.at(x, y, z)) continue;
          const double dx = x - center[0], dy = y - center[1],
                       dz = z - center[2];
          const bool in_region =
              spec.shape == DefectSpec::Shape::sphere
                  ? dx * dx + dy * dy + dz * dz <= r * r
                  : std::abs(dx) <= r && std::abs(dy) <= r && std::abs(dz) <= r;
          if (in_region) implant.set(x, y, z, true);
        }

    if (implant.empty_mask()) continue;
    if (connected_components(implant, Connectivity::twentysix).count() != 1)
      continue;
    VolumePair pair;
    pair.case_id = std::move(case_id);
    pair.complete = skull;
    pair.implant = std::move(implant);
    pair.defective = set_difference(skull, pair.implant);
    if (pair.defective.empty_mask()) {
      case_id = std::move(pair.case_id);
      continue;
    }
    pair.validate();
    return pair;
  }
  throw numeric_error("inject_defect: no valid defect after " +
                      std::to_string(spec.max_retries) + " attempts (" +
                      case_id + ")");
}

/// Whole-dataset recipe: per-case seeds are base_seed + index, so any case —
/// and the whole set — regenerates bit-identically from these fields alone.
struct DatasetSpec {
  int count = 6;
  std::uint64_t seed = 1;
  SkullSpec skull;
  DefectSpec defect;

  void validate() const {
    if (count < 1) throw config_error("DatasetSpec: count must be at least 1");
    skull.validate();
    defect.validate();
  }
};

inline std::string dataset_case_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case_%03d", index);
  return buf;
}

inline VolumePair generate_case(const DatasetSpec& spec, int index) {
  Rng rng(stream_seed(spec.seed + static_cast<std::uint64_t>(index), "case"));
  const VoxelGrid skull = generate_skull(spec.skull, rng);
  return inject_defect(skull, spec.defect, rng, dataset_case_id(index));
}

struct DatasetPaths {
  std::filesystem::path manifest;
  std::filesystem::path params;
};

/// Writes <case>_{defective,complete,implant}.vxl per case plus a manifest
/// and a sidecar echoing every generator parameter. The last sixth of the
/// cases (rounded down) form the validation split.
inline DatasetPaths generate_dataset(const DatasetSpec& spec,
                                     const std::filesystem::path& out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir);
  const int n_val = spec.count / 6;
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < spec.count; ++i) {
    const VolumePair pair = generate_case(spec, i);
    ManifestEntry e;
    e.case_id = pair.case_id;
    e.split = (i >= spec.count - n_val) ? "val" : "train";
    e.defective_path = pair.case_id + "_defective.vxl";
    e.complete_path = pair.case_id + "_complete.vxl";
    e.implant_path = pair.case_id + "_implant.vxl";
    save_grid(pair.defective, out_dir / e.defective_path);
    save_grid(pair.complete, out_dir / e.complete_path);
    save_grid(pair.implant, out_dir / e.implant_path);
    entries.push_back(std::move(e));
  }
  DatasetPaths paths;
  paths.manifest = out_dir / "manifest.txt";
  save_manifest(entries, paths.manifest);

  paths.params = out_dir / "gen_params.txt";
  std::ofstream side(paths.params);
  if (!side)
    throw io_error("generate_dataset: cannot open '" + paths.params.string() +
                   "'");
  side << "count = " << spec.count << '\n'
       << "seed = " << spec.seed << '\n'
       << "dims = " << spec.skull.dims[0] << ' ' << spec.skull.dims[1] << ' '
       << spec.skull.dims[2] << '\n'
       << "spacing = " << spec.skull.spacing[0] << ' ' << spec.skull.spacing[1]
       << ' ' << spec.skull.spacing[2] << '\n'
       << "outer_frac = " << spec.skull.outer_frac[0] << ' '
       << spec.skull.outer_frac[1] << ' ' << spec.skull.outer_frac[2] << '\n'
       << "thickness = " << spec.skull.thickness << '\n'
       << "center_jitter = " << spec.skull.center_jitter << '\n'
       << "axis_jitter = " << spec.skull.axis_jitter << '\n'
       << "defect_shape = " << defect_shape_name(spec.defect.shape) << '\n'
       << "defect_size = " << spec.defect.size_lo << ' ' << spec.defect.size_hi
       << '\n'
       << "defect_band = " << spec.defect.band_lo << ' ' << spec.defect.band_hi
       << '\n'
       << "max_retries = " << spec.defect.max_retries << '\n';
  if (!side) throw io_error("generate_dataset: sidecar write failed");
  return paths;
}

}  // namespace crania
