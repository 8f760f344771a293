#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "crania/voxel.hpp"

#include "json.hpp"

namespace crania {

/// Dice overlap 2|A∩B| / (|A|+|B|); two empty masks overlap perfectly.
inline double dice(const VoxelGrid& a, const VoxelGrid& b) {
  if (!a.same_dims(b)) throw numeric_error("dice: dimension mismatch");
  std::int64_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    na += a.data()[i];
    nb += b.data()[i];
    inter += a.data()[i] & b.data()[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

/// Occupied voxels with at least one empty face neighbor; neighbors outside
/// the grid count as empty, so voxels on the grid boundary are surface.
inline std::vector<std::array<int, 3>> surface_voxels(const VoxelGrid& g) {
  std::vector<std::array<int, 3>> out;
  for (int z = 0; z < g.nz(); ++z)
    for (int y = 0; y < g.ny(); ++y)
      for (int x = 0; x < g.nx(); ++x) {
        if (!g.at(x, y, z)) continue;
        if (!g.at_or_zero(x - 1, y, z) || !g.at_or_zero(x + 1, y, z) ||
            !g.at_or_zero(x, y - 1, z) || !g.at_or_zero(x, y + 1, z) ||
            !g.at_or_zero(x, y, z - 1) || !g.at_or_zero(x, y, z + 1))
          out.push_back({x, y, z});
      }
  return out;
}

namespace detail_edt {

constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;

/// Parabola-interval boundary; den > 0, or the -infinity sentinel (den == 0).
struct Boundary {
  std::int64_t num = 0;
  std::int64_t den = 0;  // 0 marks -infinity
};

inline bool boundary_le(const Boundary& a, const Boundary& b) {
  if (a.den == 0) return true;
  if (b.den == 0) return false;
  return static_cast<__int128>(a.num) * b.den <=
         static_cast<__int128>(b.num) * a.den;
}

/// Exact 1D squared-distance transform (lower envelope of parabolas):
/// d[j] = min over i with finite f[i] of (j-i)² + f[i]. All interval
/// boundaries are kept as exact rationals so the result is integer-exact.
inline void dt1d(const std::int64_t* f, int n, std::int64_t* d,
                 std::vector<int>& v, std::vector<Boundary>& z) {
  v.clear();
  z.clear();
  for (int q = 0; q < n; ++q) {
    if (f[q] >= kInf) continue;
    const std::int64_t fq =
        f[q] + static_cast<std::int64_t>(q) * static_cast<std::int64_t>(q);
    Boundary s{0, 0};
    while (!v.empty()) {
      const int p = v.back();
      const std::int64_t fp =
          f[p] + static_cast<std::int64_t>(p) * static_cast<std::int64_t>(p);
      s = Boundary{fq - fp, 2 * static_cast<std::int64_t>(q - p)};
      if (boundary_le(s, z.back())) {
        v.pop_back();
        z.pop_back();
      } else {
        break;
      }
    }
    if (v.empty()) s = Boundary{0, 0};
    v.push_back(q);
    z.push_back(s);
  }
  if (v.empty()) {
    for (int j = 0; j < n; ++j) d[j] = kInf;
    return;
  }
  std::size_t k = 0;
  for (int j = 0; j < n; ++j) {
    while (k + 1 < v.size() && boundary_le(z[k + 1], Boundary{j, 1})) ++k;
    const std::int64_t dj = j - v[k];
    d[j] = dj * dj + f[v[k]];
  }
}

}  // namespace detail_edt

/// Exact squared Euclidean distance (in voxel units) from every grid cell to
/// the nearest point in `points`, via separable 1D transforms per axis.
inline std::vector<std::int64_t> squared_distance_field(
    std::array<int, 3> dims, const std::vector<std::array<int, 3>>& points) {
  const int nx = dims[0], ny = dims[1], nz = dims[2];
  const std::size_t total = static_cast<std::size_t>(nx) * ny * nz;
  std::vector<std::int64_t> field(total, detail_edt::kInf);
  auto idx = [&](int x, int y, int z) {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(ny) * static_cast<std::size_t>(z));
  };
  for (const auto& p : points) field[idx(p[0], p[1], p[2])] = 0;

  std::vector<int> v;
  std::vector<detail_edt::Boundary> z;
  const int max_dim = std::max({nx, ny, nz});
  std::vector<std::int64_t> line(static_cast<std::size_t>(max_dim));
  std::vector<std::int64_t> dist(static_cast<std::size_t>(max_dim));

  for (int zz = 0; zz < nz; ++zz)  // along x
    for (int y = 0; y < ny; ++y) {
      std::int64_t* row = field.data() + idx(0, y, zz);
      detail_edt::dt1d(row, nx, dist.data(), v, z);
      std::copy(dist.begin(), dist.begin() + nx, row);
    }
  for (int zz = 0; zz < nz; ++zz)  // along y
    for (int x = 0; x < nx; ++x) {
      for (int y = 0; y < ny; ++y) line[static_cast<std::size_t>(y)] = field[idx(x, y, zz)];
      detail_edt::dt1d(line.data(), ny, dist.data(), v, z);
      for (int y = 0; y < ny; ++y) field[idx(x, y, zz)] = dist[static_cast<std::size_t>(y)];
    }
  for (int y = 0; y < ny; ++y)  // along z
    for (int x = 0; x < nx; ++x) {
      for (int zz = 0; zz < nz; ++zz) line[static_cast<std::size_t>(zz)] = field[idx(x, y, zz)];
      detail_edt::dt1d(line.data(), nz, dist.data(), v, z);
      for (int zz = 0; zz < nz; ++zz) field[idx(x, y, zz)] = dist[static_cast<std::size_t>(zz)];
    }
  return field;
}

/// Symmetric surface-to-surface distances: for every surface voxel of each
/// mask, the Euclidean distance (scaled by voxel spacing) to the nearest
/// surface voxel of the other mask, pooled into one list.
struct SurfaceDistances {
  std::vector<double> pooled;
  double max = 0.0;
};

inline SurfaceDistances surface_distances(const VoxelGrid& a,
                                          const VoxelGrid& b) {
  if (!a.same_dims(b))
    throw numeric_error("surface_distances: dimension mismatch");
  if (a.spacing() != b.spacing())
    throw numeric_error("surface_distances: spacing mismatch");
  if (a.empty_mask() || b.empty_mask())
    throw numeric_error("Hausdorff distance is undefined for an empty mask");
  const auto sa = surface_voxels(a);
  const auto sb = surface_voxels(b);
  const auto [sx, sy, sz] = a.spacing();
  SurfaceDistances out;
  out.pooled.reserve(sa.size() + sb.size());
  const bool isotropic = (sx == sy && sy == sz);
  if (isotropic) {
    // Exact integer squared distances, scaled once at the end.
    const auto da = squared_distance_field(a.dims(), sb);
    const auto db = squared_distance_field(a.dims(), sa);
    auto idx = [&](const std::array<int, 3>& p) {
      return a.index(p[0], p[1], p[2]);
    };
    for (const auto& p : sa)
      out.pooled.push_back(sx * std::sqrt(static_cast<double>(da[idx(p)])));
    for (const auto& q : sb)
      out.pooled.push_back(sx * std::sqrt(static_cast<double>(db[idx(q)])));
  } else {
    auto directed = [&](const std::vector<std::array<int, 3>>& from,
                        const std::vector<std::array<int, 3>>& to) {
      for (const auto& p : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to) {
          const double dx = (p[0] - q[0]) * sx;
          const double dy = (p[1] - q[1]) * sy;
          const double dz = (p[2] - q[2]) * sz;
          best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        out.pooled.push_back(std::sqrt(best));
      }
    };
    directed(sa, sb);
    directed(sb, sa);
  }
  out.max = *std::max_element(out.pooled.begin(), out.pooled.end());
  return out;
}

inline double hausdorff(const VoxelGrid& a, const VoxelGrid& b) {
  return surface_distances(a, b).max;
}

/// Nearest-rank 95th percentile of the pooled surface distances; by
/// construction never exceeds the maximum (the Hausdorff distance).
inline double hd95(const VoxelGrid& a, const VoxelGrid& b) {
  SurfaceDistances sd = surface_distances(a, b);
  std::sort(sd.pooled.begin(), sd.pooled.end());
  const std::size_t n = sd.pooled.size();
  const std::size_t rank = static_cast<std::size_t>(
      std::ceil(0.95 * static_cast<double>(n)));
  return sd.pooled[std::max<std::size_t>(rank, 1) - 1];
}

/// Per-case scores. Distance metrics are undefined (and flagged) when either
/// mask is empty; dice is always defined.
struct CaseRecord {
  std::string case_id;
  double dice = 0.0;
  bool hd_defined = false;
  double hausdorff = 0.0;
  double hd95 = 0.0;
  bool pred_empty = false;

  friend bool operator==(const CaseRecord&, const CaseRecord&) = default;
};

inline CaseRecord evaluate_case(const std::string& case_id,
                                const VoxelGrid& pred,
                                const VoxelGrid& truth) {
  CaseRecord rec;
  rec.case_id = case_id;
  rec.dice = dice(pred, truth);
  rec.pred_empty = pred.empty_mask();
  if (!pred.empty_mask() && !truth.empty_mask()) {
    SurfaceDistances sd = surface_distances(pred, truth);
    rec.hausdorff = sd.max;
    std::sort(sd.pooled.begin(), sd.pooled.end());
    const std::size_t n = sd.pooled.size();
    const std::size_t rank = static_cast<std::size_t>(
        std::ceil(0.95 * static_cast<double>(n)));
    rec.hd95 = sd.pooled[std::max<std::size_t>(rank, 1) - 1];
    rec.hd_defined = true;
  }
  return rec;
}

struct MetricSummary {
  std::int64_t count = 0;
  double mean = 0.0, median = 0.0, min = 0.0, max = 0.0;

  friend bool operator==(const MetricSummary&, const MetricSummary&) = default;
};

inline MetricSummary summarize(std::vector<double> values) {
  MetricSummary s;
  s.count = static_cast<std::int64_t>(values.size());
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  double total = 0.0;
  for (double v : values) total += v;
  s.mean = total / static_cast<double>(values.size());
  const std::size_t n = values.size();
  s.median = (n % 2 == 1) ? values[n / 2]
                          : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  s.min = values.front();
  s.max = values.back();
  return s;
}

struct EvalReport {
  std::vector<CaseRecord> cases;
  MetricSummary dice;
  MetricSummary hausdorff;  // over cases with defined distances
  MetricSummary hd95;
  std::int64_t undefined_hd_count = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

inline EvalReport build_report(std::vector<CaseRecord> cases) {
  EvalReport rep;
  std::vector<double> dices, hds, hd95s;
  for (const auto& c : cases) {
    dices.push_back(c.dice);
    if (c.hd_defined) {
      hds.push_back(c.hausdorff);
      hd95s.push_back(c.hd95);
    } else {
      ++rep.undefined_hd_count;
    }
  }
  rep.cases = std::move(cases);
  rep.dice = summarize(std::move(dices));
  rep.hausdorff = summarize(std::move(hds));
  rep.hd95 = summarize(std::move(hd95s));
  return rep;
}

inline std::string report_to_text(const EvalReport& rep) {
  std::ostringstream out;
  out.precision(4);
  out << std::fixed;
  out << "case                     dice   hausdorff        hd95\n";
  for (const auto& c : rep.cases) {
    out << c.case_id;
    for (std::size_t i = c.case_id.size(); i < 22; ++i) out << ' ';
    out << ' ' << c.dice;
    if (c.hd_defined) {
      out << "  " << c.hausdorff << "  " << c.hd95;
    } else {
      out << "   undefined   undefined";
    }
    if (c.pred_empty) out << "  [empty prediction]";
    out << '\n';
  }
  auto line = [&](const char* name, const MetricSummary& s) {
    out << name << ": ";
    if (s.count == 0) {
      out << "no defined cases\n";
      return;
    }
    out << "mean " << s.mean << "  median " << s.median << "  min " << s.min
        << "  max " << s.max << "  (n=" << s.count << ")\n";
  };
  out << '\n';
  line("dice     ", rep.dice);
  line("hausdorff", rep.hausdorff);
  line("hd95     ", rep.hd95);
  if (rep.undefined_hd_count > 0)
    out << "cases with undefined distances: " << rep.undefined_hd_count << '\n';
  return out.str();
}

namespace detail_report {

inline nlohmann::json summary_to_json(const MetricSummary& s) {
  return {{"count", s.count}, {"mean", s.mean},  {"median", s.median},
          {"min", s.min},     {"max", s.max}};
}

inline MetricSummary summary_from_json(const nlohmann::json& j) {
  MetricSummary s;
  s.count = j.at("count").get<std::int64_t>();
  s.mean = j.at("mean").get<double>();
  s.median = j.at("median").get<double>();
  s.min = j.at("min").get<double>();
  s.max = j.at("max").get<double>();
  return s;
}

}  // namespace detail_report

inline std::string report_to_json(const EvalReport& rep) {
  nlohmann::json j;
  j["cases"] = nlohmann::json::array();
  for (const auto& c : rep.cases) {
    nlohmann::json jc{{"case_id", c.case_id},
                      {"dice", c.dice},
                      {"hd_defined", c.hd_defined},
                      {"pred_empty", c.pred_empty}};
    if (c.hd_defined) {
      jc["hausdorff"] = c.hausdorff;
      jc["hd95"] = c.hd95;
    }
    j["cases"].push_back(std::move(jc));
  }
  j["dice"] = detail_report::summary_to_json(rep.dice);
  j["hausdorff"] = detail_report::summary_to_json(rep.hausdorff);
  j["hd95"] = detail_report::summary_to_json(rep.hd95);
  j["undefined_hd_count"] = rep.undefined_hd_count;
  return j.dump(2);
}

inline EvalReport report_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw io_error(std::string("report parse failure: ") + e.what());
  }
  try {
    EvalReport rep;
    for (const auto& jc : j.at("cases")) {
      CaseRecord c;
      c.case_id = jc.at("case_id").get<std::string>();
      c.dice = jc.at("dice").get<double>();
      c.hd_defined = jc.at("hd_defined").get<bool>();
      c.pred_empty = jc.at("pred_empty").get<bool>();
      if (c.hd_defined) {
        c.hausdorff = jc.at("hausdorff").get<double>();
        c.hd95 = jc.at("hd95").get<double>();
      }
      rep.cases.push_back(std::move(c));
    }
    rep.dice = detail_report::summary_from_json(j.at("dice"));
    rep.hausdorff = detail_report::summary_from_json(j.at("hausdorff"));
    rep.hd95 = detail_report::summary_from_json(j.at("hd95"));
    rep.undefined_hd_count = j.at("undefined_hd_count").get<std::int64_t>();
    return rep;
  } catch (const nlohmann::json::exception& e) {
    throw io_error(std::string("report parse failure: ") + e.what());
  }
}

}  // namespace crania
