#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "crania/morphology.hpp"
#include "crania/pipeline.hpp"
#include "crania/synthdata.hpp"

namespace crania {

namespace detail_cfg {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

template <typename T>
T parse_one(const std::string& key, const std::string& value);

template <>
inline double parse_one<double>(const std::string& key,
                                const std::string& value) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    throw config_error("config key '" + key + "': expected a number, got '" +
                       value + "'");
  }
  if (pos != value.size())
    throw config_error("config key '" + key + "': trailing characters in '" +
                       value + "'");
  return v;
}

template <>
inline std::int64_t parse_one<std::int64_t>(const std::string& key,
                                            const std::string& value) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(value, &pos);
  } catch (const std::exception&) {
    throw config_error("config key '" + key + "': expected an integer, got '" +
                       value + "'");
  }
  if (pos != value.size())
    throw config_error("config key '" + key + "': trailing characters in '" +
                       value + "'");
  return v;
}

template <>
inline std::uint64_t parse_one<std::uint64_t>(const std::string& key,
                                              const std::string& value) {
  const std::int64_t v = parse_one<std::int64_t>(key, value);
  if (v < 0)
    throw config_error("config key '" + key + "': must be non-negative");
  return static_cast<std::uint64_t>(v);
}

template <>
inline int parse_one<int>(const std::string& key, const std::string& value) {
  return static_cast<int>(parse_one<std::int64_t>(key, value));
}

/// Parses "a" (broadcast) or "a b c" into a 3-element array.
template <typename T>
std::array<T, 3> parse_triple(const std::string& key,
                              const std::string& value) {
  const auto toks = split_ws(value);
  if (toks.size() == 1) {
    const T v = parse_one<T>(key, toks[0]);
    return {v, v, v};
  }
  if (toks.size() == 3)
    return {parse_one<T>(key, toks[0]), parse_one<T>(key, toks[1]),
            parse_one<T>(key, toks[2])};
  throw config_error("config key '" + key + "': expected 1 or 3 values");
}

template <typename T>
std::array<T, 2> parse_pair(const std::string& key, const std::string& value) {
  const auto toks = split_ws(value);
  if (toks.size() != 2)
    throw config_error("config key '" + key + "': expected 2 values");
  return {parse_one<T>(key, toks[0]), parse_one<T>(key, toks[1])};
}

}  // namespace detail_cfg

/// Every tunable of the tool in one bag: training, inference, and data
/// generation settings. Populated from `key = value` lines and/or
/// command-line overrides, then validated as a whole.
struct RunConfig {
  std::uint64_t seed = 17;
  std::string precision = "f32";  // f32 | f64
  TrainConfig train;
  DatasetSpec data;
  double threshold = 0.5;
  Connectivity connectivity = Connectivity::twentysix;

  /// Applies one setting; throws config_error naming the key on any problem.
  void apply(const std::string& key, const std::string& value) {
    using namespace detail_cfg;
    if (key == "seed") {
      seed = parse_one<std::uint64_t>(key, value);
      train.seed = seed;
      data.seed = seed;
    } else if (key == "precision") {
      if (value != "f32" && value != "f64")
        throw config_error("config key 'precision': expected f32 or f64");
      precision = value;
    } else if (key == "channels") {
      train.net.c = parse_one<std::int64_t>(key, value);
    } else if (key == "low_res") {
      train.net.L = parse_one<std::int64_t>(key, value);
    } else if (key == "high_res") {
      train.net.H = parse_one<std::int64_t>(key, value);
    } else if (key == "variant") {
      train.net.variant = parse_variant(value);
    } else if (key == "se_ratio") {
      train.net.se_ratio = parse_one<std::int64_t>(key, value);
    } else if (key == "lr") {
      train.lr = parse_one<double>(key, value);
    } else if (key == "slices_per_step") {
      train.slices_per_step = parse_one<int>(key, value);
    } else if (key == "steps") {
      train.steps = parse_one<std::int64_t>(key, value);
    } else if (key == "reduction") {
      train.reduction = parse_reduction(value);
    } else if (key == "resample") {
      train.resample = parse_resample_mode(value);
    } else if (key == "checkpoint_every") {
      train.checkpoint_every = parse_one<std::int64_t>(key, value);
    } else if (key == "threshold") {
      threshold = parse_one<double>(key, value);
      if (threshold <= 0.0 || threshold >= 1.0)
        throw config_error("config key 'threshold': must lie in (0, 1)");
    } else if (key == "connectivity") {
      connectivity = parse_connectivity(value);
    } else if (key == "gen_count") {
      data.count = parse_one<int>(key, value);
    } else if (key == "gen_dims") {
      data.skull.dims = parse_triple<int>(key, value);
    } else if (key == "gen_spacing") {
      data.skull.spacing = parse_triple<double>(key, value);
    } else if (key == "gen_outer_frac") {
      data.skull.outer_frac = parse_triple<double>(key, value);
    } else if (key == "gen_thickness") {
      data.skull.thickness = parse_one<double>(key, value);
    } else if (key == "gen_center_jitter") {
      data.skull.center_jitter = parse_one<double>(key, value);
    } else if (key == "gen_axis_jitter") {
      data.skull.axis_jitter = parse_one<double>(key, value);
    } else if (key == "defect_shape") {
      data.defect.shape = parse_defect_shape(value);
    } else if (key == "defect_size") {
      const auto p = detail_cfg::parse_pair<double>(key, value);
      data.defect.size_lo = p[0];
      data.defect.size_hi = p[1];
    } else if (key == "defect_band") {
      const auto p = detail_cfg::parse_pair<double>(key, value);
      data.defect.band_lo = p[0];
      data.defect.band_hi = p[1];
    } else if (key == "gen_max_retries") {
      data.defect.max_retries = parse_one<int>(key, value);
    } else {
      throw config_error("unknown config key '" + key + "'");
    }
  }

  void validate() const {
    train.validate();
    data.validate();
  }
};

/// Reads `key = value` lines; '#' starts a comment, blank lines are ignored.
inline void load_config_file(RunConfig& cfg,
                             const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw io_error("config file '" + path.string() + "' cannot be opened");
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail_cfg::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error("config file line " + std::to_string(lineno) +
                         ": expected 'key = value', got '" + line + "'");
    const std::string key = detail_cfg::trim(line.substr(0, eq));
    const std::string value = detail_cfg::trim(line.substr(eq + 1));
    if (key.empty())
      throw config_error("config file line " + std::to_string(lineno) +
                         ": empty key");
    cfg.apply(key, value);
  }
}

/// Applies `key=value` strings from the command line on top of file settings.
inline void apply_overrides(RunConfig& cfg,
                            const std::vector<std::string>& overrides) {
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw config_error("override '" + kv + "': expected key=value");
    cfg.apply(detail_cfg::trim(kv.substr(0, eq)),
              detail_cfg::trim(kv.substr(eq + 1)));
  }
}

}  // namespace crania
