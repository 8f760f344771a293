#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "crania/metrics.hpp"
#include "crania/synthdata.hpp"

using namespace crania;

namespace {

std::filesystem::path temp_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / ("crania_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

}  // namespace

TEST_CASE("skull shells are closed, connected, and hollow") {
  SkullSpec spec;
  spec.dims = {32, 32, 32};
  spec.thickness = 3.0;
  Rng rng(41);
  const VoxelGrid shell = generate_skull(spec, rng);

  CHECK_FALSE(shell.empty_mask());
  CHECK(connected_components(shell, Connectivity::twentysix).count() == 1);
  // Hollow: the center voxel sits in the cavity.
  CHECK(shell.at(16, 16, 16) == 0);
  // The shell occupies a band, not the whole ellipsoid.
  const double fill = static_cast<double>(shell.occupancy()) /
                      static_cast<double>(shell.size());
  CHECK(fill > 0.02);
  CHECK(fill < 0.5);
}

TEST_CASE("a thickness at least the semi-axes yields a solid ellipsoid") {
  SkullSpec spec;
  spec.dims = {24, 24, 24};
  spec.thickness = 20.0;  // exceeds every semi-axis
  spec.center_jitter = 0.0;
  spec.axis_jitter = 0.0;
  Rng rng(42);
  const VoxelGrid solid = generate_skull(spec, rng);
  CHECK(solid.at(12, 12, 12) == 1);  // no cavity
  // Every voxel inside the outer surface is set: no second component and no
  // enclosed holes means the complement stays one piece.
  VoxelGrid inverse(24, 24, 24);
  for (std::size_t i = 0; i < solid.data().size(); ++i)
    inverse.data()[i] = solid.data()[i] ? 0 : 1;
  CHECK(connected_components(inverse, Connectivity::six).count() == 1);
}

TEST_CASE("skull generation is deterministic in the seed") {
  SkullSpec spec;
  spec.dims = {20, 20, 20};
  Rng a(7), b(7), c(8);
  const VoxelGrid ga = generate_skull(spec, a);
  const VoxelGrid gb = generate_skull(spec, b);
  const VoxelGrid gc = generate_skull(spec, c);
  CHECK(ga == gb);
  CHECK_FALSE(ga == gc);
}

TEST_CASE("defect specs and skull specs reject bad values") {
  SkullSpec skull;
  skull.dims = {4, 32, 32};
  CHECK_THROWS_AS(skull.validate(), config_error);
  skull = SkullSpec{};
  skull.outer_frac = {0.6, 0.4, 0.4};
  CHECK_THROWS_AS(skull.validate(), config_error);
  skull = SkullSpec{};
  skull.thickness = 0.0;
  CHECK_THROWS_AS(skull.validate(), config_error);

  DefectSpec defect;
  defect.size_lo = 0.3;
  defect.size_hi = 0.2;
  CHECK_THROWS_AS(defect.validate(), config_error);
  defect = DefectSpec{};
  defect.band_lo = 0.9;
  defect.band_hi = 0.5;
  CHECK_THROWS_AS(defect.validate(), config_error);
  defect = DefectSpec{};
  defect.max_retries = 0;
  CHECK_THROWS_AS(defect.validate(), config_error);
  CHECK_THROWS_AS(parse_defect_shape("cylinder"), config_error);
}

TEST_CASE("injected defects satisfy every pair invariant") {
  SkullSpec skull;
  skull.dims = {32, 32, 32};
  for (auto shape : {DefectSpec::Shape::sphere, DefectSpec::Shape::box}) {
    DefectSpec defect;
    defect.shape = shape;
    Rng rng(55);
    const VoxelGrid shell = generate_skull(skull, rng);
    const VolumePair pair = inject_defect(shell, defect, rng, "inv");

    CHECK_FALSE(pair.implant.empty_mask());
    CHECK_FALSE(pair.defective.empty_mask());
    CHECK(pair.complete == shell);
    CHECK(connected_components(pair.implant, Connectivity::twentysix).count() ==
          1);
    CHECK(logical_and(pair.implant, pair.defective).empty_mask());
    CHECK(logical_or(pair.implant, pair.defective) == pair.complete);
    // The defect sits in the configured upper band.
    bool below_band = false;
    for (int z = 0; z < static_cast<int>(0.4 * 32); ++z)
      for (int y = 0; y < 32 && !below_band; ++y)
        for (int x = 0; x < 32; ++x)
          if (pair.implant.at(x, y, z)) {
            below_band = true;
            break;
          }
    CHECK_FALSE(below_band);
  }
}

TEST_CASE("dataset generation writes loadable, splittable cases") {
  const auto dir = temp_dir("dataset");
  DatasetSpec spec;
  spec.count = 6;
  spec.seed = 100;
  spec.skull.dims = {24, 24, 24};
  spec.skull.thickness = 3.0;
  const DatasetPaths paths = generate_dataset(spec, dir);

  const auto entries = load_manifest(paths.manifest);
  REQUIRE(entries.size() == 6);
  int train_n = 0, val_n = 0;
  for (const auto& e : entries) (e.split == "train" ? train_n : val_n) += 1;
  CHECK(train_n == 5);
  CHECK(val_n == 1);
  CHECK(entries.back().split == "val");

  for (const auto& e : entries) {
    const VolumePair pair = load_pair(e, dir);  // validates internally
    CHECK(pair.case_id == e.case_id);
    CHECK(pair.complete.nx() == 24);
  }

  const std::string sidecar = slurp(paths.params);
  for (const char* key :
       {"count", "seed", "dims", "outer_frac", "thickness", "defect_shape",
        "defect_size", "defect_band", "max_retries"})
    CHECK(sidecar.find(key) != std::string::npos);
}

TEST_CASE("datasets regenerate bit-identically from their spec") {
  DatasetSpec spec;
  spec.count = 3;
  spec.seed = 200;
  spec.skull.dims = {20, 20, 20};
  spec.skull.thickness = 3.0;

  const auto dir1 = temp_dir("regen1");
  const auto dir2 = temp_dir("regen2");
  generate_dataset(spec, dir1);
  generate_dataset(spec, dir2);
  for (const auto& e : load_manifest(dir1 / "manifest.txt")) {
    for (const auto member :
         {&ManifestEntry::defective_path, &ManifestEntry::complete_path,
          &ManifestEntry::implant_path})
      CHECK(slurp(dir1 / (e.*member)) == slurp(dir2 / (e.*member)));
  }

  // A single case regenerates independently of the rest of the set.
  const VolumePair direct = generate_case(spec, 1);
  const VolumePair loaded =
      load_pair(load_manifest(dir1 / "manifest.txt")[1], dir1);
  CHECK(direct.defective == loaded.defective);
  CHECK(direct.complete == loaded.complete);
  CHECK(direct.implant == loaded.implant);

  // A different base seed changes the data.
  DatasetSpec other = spec;
  other.seed = 201;
  CHECK_FALSE(generate_case(other, 1).complete == direct.complete);
}

TEST_CASE("small datasets put every case in the training split") {
  const auto dir = temp_dir("small_split");
  DatasetSpec spec;
  spec.count = 4;
  spec.seed = 300;
  spec.skull.dims = {20, 20, 20};
  spec.skull.thickness = 3.0;
  generate_dataset(spec, dir);
  for (const auto& e : load_manifest(dir / "manifest.txt"))
    CHECK(e.split == "train");
}
