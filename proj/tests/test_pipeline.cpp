#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "crania/checkpoint.hpp"
#include "crania/pipeline.hpp"
#include "crania/synthdata.hpp"

using namespace crania;

namespace {

NetConfig tiny_net() {
  NetConfig cfg;
  cfg.c = 4;
  cfg.L = 8;
  cfg.H = 16;
  cfg.se_ratio = 2;
  return cfg;
}

TrainConfig tiny_train() {
  TrainConfig cfg;
  cfg.net = tiny_net();
  cfg.lr = 1e-3;
  cfg.slices_per_step = 2;
  cfg.steps = 4;
  cfg.seed = 5;
  return cfg;
}

VolumePair tiny_pair(std::uint64_t seed, const std::string& id) {
  SkullSpec skull;
  skull.dims = {16, 16, 16};
  skull.thickness = 2.5;
  DefectSpec defect;
  defect.size_lo = 0.15;
  defect.size_hi = 0.25;
  Rng rng(seed);
  return inject_defect(generate_skull(skull, rng), defect, rng, id);
}

std::filesystem::path temp_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / ("crania_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <typename T>
std::vector<T> snapshot_params(Models<T>& m) {
  std::vector<T> out;
  for (auto* p : m.parameters())
    out.insert(out.end(), p->value.values().begin(), p->value.values().end());
  for (auto& [name, t] : m.buffers())
    out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

}  // namespace

TEST_CASE("grids map onto tensors with depth, row, column order") {
  VoxelGrid g(3, 4, 5);  // nx=3, ny=4, nz=5
  g.set(1, 2, 3, true);
  const Tensor<float> t = grid_to_tensor<float>(g);
  REQUIRE(t.shape() == std::vector<std::int64_t>({1, 1, 5, 4, 3}));
  // [n, c, z, y, x] with x fastest
  CHECK(t.values()[static_cast<std::size_t>((3 * 4 + 2) * 3 + 1)] == 1.0f);
  CHECK(t.values()[0] == 0.0f);

  Mask2D m(3, 4);
  m.set(2, 1, true);
  const Tensor<float> mt = mask_to_tensor<float>(m);
  REQUIRE(mt.shape() == std::vector<std::int64_t>({1, 1, 4, 3}));
  CHECK(mt.values()[static_cast<std::size_t>(1 * 3 + 2)] == 1.0f);
}

TEST_CASE("case preparation resamples, pads, and counts usable slices") {
  const NetConfig net = tiny_net();
  const VolumePair pair = tiny_pair(11, "prep");
  const auto pc = prepare_case<float>(pair, net, ResampleMode::majority);

  CHECK(pc.input3d.shape() == std::vector<std::int64_t>({1, 1, 8, 8, 8}));
  CHECK(pc.target3d.shape() == std::vector<std::int64_t>({1, 1, 8, 8, 8}));
  CHECK(pc.z_low == 8);  // 16 * 8 / 16
  // low slice i maps to original slices 2i + {0,1,2}; 2i+2 < 16 leaves i < 7
  CHECK(pc.valid_low == 7);
  for (float v : pc.input3d.values()) CHECK((v == 0.0f || v == 1.0f));

  // The downsampled defective tensor is the downsample of the original.
  const VoxelGrid manual =
      pad_z(downsample(pair.defective, {8, 8, 8}, ResampleMode::majority), 8);
  const Tensor<float> expect = grid_to_tensor<float>(manual);
  CHECK(pc.input3d.values() == expect.values());

  VolumePair wrong = pair;
  wrong.defective = VoxelGrid(8, 8, 8);
  wrong.complete = VoxelGrid(8, 8, 8);
  wrong.implant = VoxelGrid(8, 8, 8);
  CHECK_THROWS_AS(prepare_case<float>(wrong, net, ResampleMode::majority),
                  numeric_error);
}

TEST_CASE("working depth follows the resolution ratio") {
  NetConfig net = tiny_net();  // L=8, H=16
  CHECK(low_depth_for(16, net) == 8);
  CHECK(low_depth_for(12, net) == 6);
  CHECK(low_depth_for(15, net) == 8);  // rounds
  NetConfig desk;
  desk.L = 24;
  desk.H = 64;
  CHECK(low_depth_for(64, desk) == 24);
  CHECK(low_depth_for(48, desk) == 18);
}

TEST_CASE("a training step reports the exact sum of its two losses") {
  const TrainConfig cfg = tiny_train();
  Models<float> models(cfg.net, 3);
  const auto pc = prepare_case<float>(tiny_pair(12, "sum"), cfg.net,
                                      ResampleMode::majority);
  Rng slice_rng(stream_seed(cfg.seed, "slices", 0));
  const StepLosses losses = training_step(models, pc, cfg, slice_rng);

  CHECK(std::isfinite(losses.ltotal));
  CHECK(losses.l3d > 0.0);
  CHECK(losses.l2d > 0.0);
  // The combined objective is literally one addition of the two parts.
  CHECK(losses.ltotal ==
        static_cast<double>(static_cast<float>(losses.l3d) +
                            static_cast<float>(losses.l2d)));
}

TEST_CASE("oversized slice batches are rejected") {
  TrainConfig cfg = tiny_train();
  cfg.slices_per_step = 100;
  Models<float> models(cfg.net, 3);
  const auto pc = prepare_case<float>(tiny_pair(13, "batch"), cfg.net,
                                      ResampleMode::majority);
  Rng slice_rng(1);
  CHECK_THROWS_AS(training_step(models, pc, cfg, slice_rng), config_error);
}

TEST_CASE("epoch order is a deterministic permutation") {
  const auto a = epoch_order(9, 4, 6);
  const auto b = epoch_order(9, 4, 6);
  CHECK(a == b);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<int>({0, 1, 2, 3, 4, 5}));
  CHECK(epoch_order(9, 5, 6) != a);  // new epoch, new order (overwhelmingly)
}

TEST_CASE("identical seeds reproduce the loss log bit for bit") {
  const TrainConfig cfg = tiny_train();
  std::vector<PreparedCase<float>> cases;
  cases.push_back(prepare_case<float>(tiny_pair(21, "case_a"), cfg.net,
                                      ResampleMode::majority));
  cases.push_back(prepare_case<float>(tiny_pair(22, "case_b"), cfg.net,
                                      ResampleMode::majority));

  Models<float> m1(cfg.net, cfg.seed);
  Models<float> m2(cfg.net, cfg.seed);
  const auto r1 = train(m1, cases, cfg, "");
  const auto r2 = train(m2, cases, cfg, "");

  REQUIRE(r1.log.size() == r2.log.size());
  for (std::size_t i = 0; i < r1.log.size(); ++i) {
    CHECK(r1.log[i].step == r2.log[i].step);
    CHECK(r1.log[i].case_id == r2.log[i].case_id);
    CHECK(r1.log[i].l3d == r2.log[i].l3d);
    CHECK(r1.log[i].l2d == r2.log[i].l2d);
    CHECK(r1.log[i].ltotal == r2.log[i].ltotal);
    CHECK(r1.log[i].ltotal ==
          static_cast<double>(static_cast<float>(r1.log[i].l3d) +
                              static_cast<float>(r1.log[i].l2d)));
  }
  CHECK(snapshot_params(m1) == snapshot_params(m2));
}

TEST_CASE("checkpoints restore parameters, moments, and buffers exactly") {
  const TrainConfig cfg = tiny_train();
  const auto dir = temp_dir("ckpt");
  std::vector<PreparedCase<float>> cases;
  cases.push_back(prepare_case<float>(tiny_pair(31, "case_a"), cfg.net,
                                      ResampleMode::majority));

  Models<float> source(cfg.net, 7);
  train(source, cases, cfg, "");  // make state non-trivial
  save_checkpoint(dir / "state.ckpt", 42, source.parameters(),
                  source.buffers());

  Models<float> target(cfg.net, 99);  // different init
  CHECK(snapshot_params(target) != snapshot_params(source));
  const std::int64_t step =
      load_checkpoint(dir / "state.ckpt", target.parameters(),
                      target.buffers());
  CHECK(step == 42);
  CHECK(snapshot_params(target) == snapshot_params(source));
  auto src_params = source.parameters();
  auto dst_params = target.parameters();
  REQUIRE(src_params.size() == dst_params.size());
  for (std::size_t i = 0; i < src_params.size(); ++i) {
    CHECK(dst_params[i]->adam_m == src_params[i]->adam_m);
    CHECK(dst_params[i]->adam_v == src_params[i]->adam_v);
    CHECK(dst_params[i]->step_count == src_params[i]->step_count);
  }
}

TEST_CASE("corrupt or mismatched checkpoints are refused") {
  const auto dir = temp_dir("ckpt_bad");
  const NetConfig net = tiny_net();
  Models<float> m(net, 1);
  save_checkpoint(dir / "ok.ckpt", 1, m.parameters(), m.buffers());

  SECTION("bad magic") {
    std::ofstream out(dir / "bad.ckpt");
    out << "NOPE\n";
    out.close();
    CHECK_THROWS_AS(
        load_checkpoint(dir / "bad.ckpt", m.parameters(), m.buffers()),
        io_error);
  }
  SECTION("missing file") {
    CHECK_THROWS_AS(
        load_checkpoint(dir / "absent.ckpt", m.parameters(), m.buffers()),
        io_error);
  }
  SECTION("architecture mismatch") {
    NetConfig wider = net;
    wider.c = 8;
    wider.se_ratio = 4;
    Models<float> other(wider, 1);
    CHECK_THROWS_AS(
        load_checkpoint(dir / "ok.ckpt", other.parameters(), other.buffers()),
        io_error);
  }
}

TEST_CASE("resuming from a checkpoint continues the exact run") {
  TrainConfig cfg = tiny_train();
  cfg.steps = 6;
  std::vector<PreparedCase<float>> cases;
  cases.push_back(prepare_case<float>(tiny_pair(41, "case_a"), cfg.net,
                                      ResampleMode::majority));
  cases.push_back(prepare_case<float>(tiny_pair(42, "case_b"), cfg.net,
                                      ResampleMode::majority));

  // Straight run.
  Models<float> straight(cfg.net, cfg.seed);
  const auto full = train(straight, cases, cfg, "");

  // Interrupted run: 3 steps, checkpoint, reload into fresh models, resume.
  const auto dir = temp_dir("resume");
  TrainConfig first_half = cfg;
  first_half.steps = 3;
  Models<float> interrupted(cfg.net, cfg.seed);
  train(interrupted, cases, first_half, dir);

  Models<float> resumed(cfg.net, 1234);  // init is irrelevant, load overwrites
  const std::int64_t at = load_checkpoint(dir / "ckpt_final.ckpt",
                                          resumed.parameters(),
                                          resumed.buffers());
  REQUIRE(at == 3);
  const auto tail = train(resumed, cases, cfg, "", at);

  REQUIRE(tail.log.size() == 3);
  for (std::size_t i = 0; i < tail.log.size(); ++i) {
    const auto& want = full.log[3 + i];
    CHECK(tail.log[i].step == want.step);
    CHECK(tail.log[i].case_id == want.case_id);
    CHECK(tail.log[i].l3d == want.l3d);
    CHECK(tail.log[i].l2d == want.l2d);
    CHECK(tail.log[i].ltotal == want.ltotal);
  }
  CHECK(snapshot_params(resumed) == snapshot_params(straight));
}

TEST_CASE("training writes a parseable loss log") {
  const auto dir = temp_dir("losslog");
  TrainConfig cfg = tiny_train();
  cfg.steps = 3;
  std::vector<PreparedCase<float>> cases;
  cases.push_back(prepare_case<float>(tiny_pair(51, "case_a"), cfg.net,
                                      ResampleMode::majority));
  Models<float> m(cfg.net, cfg.seed);
  const auto result = train(m, cases, cfg, dir);

  std::ifstream log(dir / "loss_log.txt");
  REQUIRE(log.good());
  std::string line;
  std::size_t rows = 0;
  while (std::getline(log, line)) {
    std::istringstream ls(line);
    std::int64_t step = -1;
    std::string case_id;
    double l3d = 0, l2d = 0, ltotal = 0, wall = -1;
    REQUIRE((ls >> step >> case_id >> l3d >> l2d >> ltotal >> wall));
    CHECK(step == static_cast<std::int64_t>(rows));
    CHECK(case_id == "case_a");
    // The printed precision round-trips the in-memory doubles exactly.
    CHECK(l3d == result.log[rows].l3d);
    CHECK(l2d == result.log[rows].l2d);
    CHECK(ltotal == result.log[rows].ltotal);
    CHECK(wall >= 0.0);
    ++rows;
  }
  CHECK(rows == 3);
  CHECK(std::filesystem::exists(dir / "ckpt_final.ckpt"));
}

TEST_CASE("periodic checkpoints appear at the configured cadence") {
  const auto dir = temp_dir("periodic");
  TrainConfig cfg = tiny_train();
  cfg.steps = 5;
  cfg.checkpoint_every = 2;
  std::vector<PreparedCase<float>> cases;
  cases.push_back(prepare_case<float>(tiny_pair(61, "case_a"), cfg.net,
                                      ResampleMode::majority));
  Models<float> m(cfg.net, cfg.seed);
  train(m, cases, cfg, dir);
  CHECK(std::filesystem::exists(dir / "ckpt_step2.ckpt"));
  CHECK(std::filesystem::exists(dir / "ckpt_step4.ckpt"));
  CHECK(std::filesystem::exists(dir / "ckpt_final.ckpt"));
}

TEST_CASE("inference produces a cube of the working resolution") {
  const NetConfig net = tiny_net();
  Models<float> m(net, 77);
  const VolumePair pair = tiny_pair(71, "infer");
  const VoxelGrid completed = infer_complete(m, pair.defective);
  CHECK(completed.nx() == 16);
  CHECK(completed.ny() == 16);
  CHECK(completed.nz() == 16);
  for (std::uint8_t v : completed.data()) CHECK((v == 0 || v == 1));

  CHECK_THROWS_AS(infer_complete(m, VoxelGrid(8, 8, 8)), numeric_error);
}

TEST_CASE("predicted implants never reuse defective voxels") {
  const NetConfig net = tiny_net();
  // Untrained nets at several seeds: the guarantee is structural, not learned.
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    Models<float> m(net, seed);
    const VolumePair pair = tiny_pair(80 + seed, "disjoint");
    const VoxelGrid implant = predict_implant(m, pair.defective);
    const VoxelGrid padded = pad_z(pair.defective, 16);
    CHECK(logical_and(implant, padded).empty_mask());
  }
}
