#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <queue>
#include <string>
#include <vector>

#include "crania/voxel.hpp"

namespace crania {

/// Set of integer offsets forming a digital ball: all v with ‖v‖₂ ≤ radius.
struct StructuringElement {
  double radius = 0.0;
  std::vector<std::array<int, 3>> offsets;
};

inline StructuringElement ball_element(double radius) {
  if (radius < 0.0)
    throw config_error("ball_element: radius must be non-negative");
  StructuringElement elem;
  elem.radius = radius;
  const int r = static_cast<int>(radius);
  const double r2 = radius * radius;
  for (int dz = -r; dz <= r; ++dz)
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx)
        if (dx * dx + dy * dy + dz * dz <= r2)
          elem.offsets.push_back({dx, dy, dz});
  return elem;
}

enum class Connectivity { six = 6, eighteen = 18, twentysix = 26 };

inline Connectivity parse_connectivity(const std::string& s) {
  if (s == "6") return Connectivity::six;
  if (s == "18") return Connectivity::eighteen;
  if (s == "26") return Connectivity::twentysix;
  throw config_error("unknown connectivity '" + s + "' (expected 6, 18, or 26)");
}

inline const std::vector<std::array<int, 3>>& neighbor_offsets(
    Connectivity conn) {
  static const auto make = [](int max_l1) {
    std::vector<std::array<int, 3>> out;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int d = std::abs(dx) + std::abs(dy) + std::abs(dz);
          if (d > 0 && d <= max_l1) out.push_back({dx, dy, dz});
        }
    return out;
  };
  static const std::vector<std::array<int, 3>> six = make(1);
  static const std::vector<std::array<int, 3>> eighteen = make(2);
  static const std::vector<std::array<int, 3>> twentysix = make(3);
  switch (conn) {
    case Connectivity::six: return six;
    case Connectivity::eighteen: return eighteen;
    default: return twentysix;
  }
}

/// Out-of-grid voxels count as background (0) for both erosion and dilation.
inline VoxelGrid erode(const VoxelGrid& g, const StructuringElement& elem) {
  VoxelGrid out(g.nx(), g.ny(), g.nz(), g.spacing());
  for (int z = 0; z < g.nz(); ++z)
    for (int y = 0; y < g.ny(); ++y)
      for (int x = 0; x < g.nx(); ++x) {
        bool all = true;
        for (const auto& o : elem.offsets)
          if (!g.at_or_zero(x + o[0], y + o[1], z + o[2])) {
            all = false;
            break;
          }
        if (all) out.set(x, y, z, true);
      }
  return out;
}

inline VoxelGrid dilate(const VoxelGrid& g, const StructuringElement& elem) {
  VoxelGrid out(g.nx(), g.ny(), g.nz(), g.spacing());
  for (int z = 0; z < g.nz(); ++z)
    for (int y = 0; y < g.ny(); ++y)
      for (int x = 0; x < g.nx(); ++x) {
        for (const auto& o : elem.offsets)
          if (g.at_or_zero(x + o[0], y + o[1], z + o[2])) {
            out.set(x, y, z, true);
            break;
          }
      }
  return out;
}

inline VoxelGrid opening(const VoxelGrid& g, const StructuringElement& elem) {
  return dilate(erode(g, elem), elem);
}

/// Label field from connected-component analysis: labels 1..K assigned in
/// scan order (x fastest, then y, then z) of each component's first voxel;
/// background stays 0.
struct ComponentLabels {
  int nx = 0, ny = 0, nz = 0;
  std::vector<std::int32_t> labels;
  std::vector<std::int64_t> sizes;  // sizes[k-1] = voxel count of label k

  std::int32_t at(int x, int y, int z) const {
    return labels[static_cast<std::size_t>(x) +
                  static_cast<std::size_t>(nx) *
                      (static_cast<std::size_t>(y) +
                       static_cast<std::size_t>(ny) * static_cast<std::size_t>(z))];
  }
  std::int32_t count() const { return static_cast<std::int32_t>(sizes.size()); }
};

inline ComponentLabels connected_components(const VoxelGrid& g,
                                            Connectivity conn) {
  ComponentLabels out;
  out.nx = g.nx();
  out.ny = g.ny();
  out.nz = g.nz();
  out.labels.assign(g.data().size(), 0);
  const auto& neigh = neighbor_offsets(conn);
  std::int32_t next = 0;
  std::queue<std::array<int, 3>> frontier;
  for (int z = 0; z < g.nz(); ++z)
    for (int y = 0; y < g.ny(); ++y)
      for (int x = 0; x < g.nx(); ++x) {
        const std::size_t idx = g.index(x, y, z);
        if (!g.data()[idx] || out.labels[idx] != 0) continue;
        ++next;
        out.sizes.push_back(0);
        out.labels[idx] = next;
        frontier.push({x, y, z});
        while (!frontier.empty()) {
          const auto [cx, cy, cz] = frontier.front();
          frontier.pop();
          ++out.sizes.back();
          for (const auto& o : neigh) {
            const int qx = cx + o[0], qy = cy + o[1], qz = cz + o[2];
            if (!g.in_bounds(qx, qy, qz)) continue;
            const std::size_t qi = g.index(qx, qy, qz);
            if (g.data()[qi] && out.labels[qi] == 0) {
              out.labels[qi] = next;
              frontier.push({qx, qy, qz});
            }
          }
        }
      }
  return out;
}

/// Keeps only the largest component; a size tie goes to the lowest label,
/// which is the component whose first voxel comes earliest in scan order.
inline VoxelGrid largest_component(const VoxelGrid& g, Connectivity conn) {
  VoxelGrid out(g.nx(), g.ny(), g.nz(), g.spacing());
  const ComponentLabels cc = connected_components(g, conn);
  if (cc.sizes.empty()) return out;
  std::int32_t best = 1;
  for (std::int32_t k = 2; k <= cc.count(); ++k)
    if (cc.sizes[static_cast<std::size_t>(k - 1)] >
        cc.sizes[static_cast<std::size_t>(best - 1)])
      best = k;
  for (std::size_t i = 0; i < cc.labels.size(); ++i)
    if (cc.labels[i] == best) out.data()[i] = 1;
  return out;
}

/// Implant cleanup: opening with a radius-2 ball removes speckle noise, then
/// the largest connected component drops any detached fragments.
inline VoxelGrid postprocess(const VoxelGrid& g,
                             Connectivity conn = Connectivity::twentysix) {
  return largest_component(opening(g, ball_element(2.0)), conn);
}

}  // namespace crania
