#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "crania/checkpoint.hpp"
#include "crania/morphology.hpp"
#include "crania/nets.hpp"
#include "crania/optim.hpp"
#include "crania/rng.hpp"
#include "crania/voxel.hpp"

namespace crania {

// ---------------------------------------------------------------------------
// Tensor <-> grid bridging. Volumes map to [1,1,D,H,W] with D along z, H
// along y, W along x; both layouts are x-fastest so the copy is linear.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> grid_to_tensor(const VoxelGrid& g) {
  Tensor<T> t({1, 1, g.nz(), g.ny(), g.nx()});
  auto& v = t.values();
  const auto& d = g.data();
  for (std::size_t i = 0; i < d.size(); ++i) v[i] = static_cast<T>(d[i]);
  return t;
}

template <typename T>
Tensor<T> mask_to_tensor(const Mask2D& m) {
  Tensor<T> t({1, 1, m.ny(), m.nx()});
  auto& v = t.values();
  const auto& d = m.data();
  for (std::size_t i = 0; i < d.size(); ++i) v[i] = static_cast<T>(d[i]);
  return t;
}

/// Both networks plus their shared initialization stream. Construction order
/// is fixed (volume net first), so a seed pins every weight.
template <typename T>
struct Models {
  NetConfig cfg;

 private:
  Rng init_rng_;

 public:
  ShapeCompletionNet3D<T> net3;
  UpsamplerNet2D<T> net2;

  Models(const NetConfig& c, std::uint64_t seed)
      : cfg(c),
        init_rng_(stream_seed(seed, "init")),
        net3(c, init_rng_),
        net2(c, init_rng_) {}

  std::vector<Parameter<T>*> parameters() {
    auto out = net3.parameters();
    for (auto* p : net2.parameters()) out.push_back(p);
    return out;
  }

  std::vector<NamedBuffer<T>> buffers() {
    auto out = net3.buffers();
    for (auto& b : net2.buffers()) out.push_back(std::move(b));
    return out;
  }
};

struct TrainConfig {
  NetConfig net;
  double lr = 1e-4;
  int slices_per_step = 10;    // distinct low-resolution slices per step
  std::int64_t steps = 100;    // total optimizer steps (no early stopping)
  std::uint64_t seed = 1;
  Reduction reduction = Reduction::sum;
  ResampleMode resample = ResampleMode::majority;
  std::int64_t checkpoint_every = 0;  // extra checkpoints; 0 = final only

  void validate() const {
    net.validate();
    if (!(lr > 0.0)) throw config_error("TrainConfig: lr must be positive");
    if (slices_per_step < 1)
      throw config_error("TrainConfig: slices_per_step must be at least 1");
    if (steps < 1) throw config_error("TrainConfig: steps must be at least 1");
    if (checkpoint_every < 0)
      throw config_error("TrainConfig: checkpoint_every must be >= 0");
  }
};

/// A volume pair resampled once into network-ready tensors.
template <typename T>
struct PreparedCase {
  VolumePair original;   // grids at the source scale
  Tensor<T> input3d;     // [1,1,L,L,L] downsampled defective, z-padded
  Tensor<T> target3d;    // [1,1,L,L,L] downsampled complete, z-padded
  int z_low = 0;         // populated low-resolution depth before padding
  int valid_low = 0;     // low slices whose mapped triplet stays in range
};

/// Working z-depth of a source grid at the low resolution.
inline int low_depth_for(int source_nz, const NetConfig& net) {
  return static_cast<int>(std::llround(static_cast<double>(source_nz) *
                                       net.L / net.H));
}

template <typename T>
PreparedCase<T> prepare_case(VolumePair pair, const NetConfig& net,
                             ResampleMode mode) {
  pair.validate();
  const int L = static_cast<int>(net.L);
  const int H = static_cast<int>(net.H);
  if (pair.defective.nx() != H || pair.defective.ny() != H)
    throw numeric_error("prepare_case: in-plane dims must equal the high "
                        "resolution (" + pair.case_id + ")");
  if (pair.defective.nz() > H)
    throw numeric_error("prepare_case: depth exceeds the high resolution (" +
                        pair.case_id + ")");
  const int source_nz = pair.defective.nz();
  const int z_low = low_depth_for(source_nz, net);
  if (z_low < 1)
    throw numeric_error("prepare_case: source too shallow to resample (" +
                        pair.case_id + ")");

  PreparedCase<T> pc;
  pc.z_low = z_low;
  pc.input3d = grid_to_tensor<T>(
      pad_z(downsample(pair.defective, {L, L, z_low}, mode), L));
  pc.target3d = grid_to_tensor<T>(
      pad_z(downsample(pair.complete, {L, L, z_low}, mode), L));
  const SliceMap map(L, H);
  const int limit = std::min(H, source_nz);
  int valid = 0;
  for (int i = 0; i < L; ++i) {
    const std::int64_t m0 =
        static_cast<std::int64_t>(i) * map.high_depth / map.low_depth;
    if (m0 + 2 < limit) ++valid;
  }
  pc.valid_low = valid;
  pc.original = std::move(pair);
  return pc;
}

struct StepLosses {
  double l3d = 0.0;
  double l2d = 0.0;
  double ltotal = 0.0;
};

struct LossRecord {
  std::int64_t step = 0;  // 0-based global step
  std::string case_id;
  double l3d = 0.0;
  double l2d = 0.0;
  double ltotal = 0.0;
  double wall_ms = 0.0;
};

/// One joint optimization step on a single case: the volume loss plus the
/// slice loss over a fresh random slice batch, one backward pass, one
/// optimizer update. The returned total is the exact sum of the two parts.
template <typename T>
StepLosses training_step(Models<T>& models, const PreparedCase<T>& pc,
                         const TrainConfig& cfg, Rng& slice_rng) {
  if (pc.valid_low < cfg.slices_per_step)
    throw config_error(
        "training_step: slices_per_step exceeds the usable slice count (" +
        std::to_string(pc.valid_low) + " available)");

  Tape<T> tape;
  const Tensor<T> pred3 = models.net3.forward(&tape, pc.input3d, true);
  const Tensor<T> l3d = l1_loss(&tape, pred3, pc.target3d, cfg.reduction);

  const int L = static_cast<int>(models.cfg.L);
  const int H = static_cast<int>(models.cfg.H);
  const SliceMap map(L, H);
  const auto lows =
      slice_rng.sample_without_replacement(pc.valid_low, cfg.slices_per_step);

  std::vector<Tensor<T>> rows, targets;
  for (const int i : lows) {
    const Tensor<T> low_slice = slice_depth(&tape, pred3, i);  // [1,1,L,L]
    for (const int m : low_to_high_indices(i, map)) {
      const Tensor<T> guide = mask_to_tensor<T>(downsample_slice(
          extract_slice(pc.original.defective, m), {L, L}, cfg.resample));
      rows.push_back(concat(&tape, {low_slice, guide}, 1));  // [1,2,L,L]
      targets.push_back(
          mask_to_tensor<T>(extract_slice(pc.original.complete, m)));
    }
  }
  const Tensor<T> batch = concat(&tape, rows, 0);        // [3N,2,L,L]
  const Tensor<T> target2 = concat<T>(nullptr, targets, 0);
  const Tensor<T> pred2 = models.net2.forward(&tape, batch, true);
  const Tensor<T> l2d = l1_loss(&tape, pred2, target2, cfg.reduction);
  const Tensor<T> ltotal = add(&tape, l3d, l2d);

  tape.backward(ltotal);
  const auto params = models.parameters();
  adam_step(params, static_cast<T>(cfg.lr));

  StepLosses out;
  out.l3d = static_cast<double>(l3d.item());
  out.l2d = static_cast<double>(l2d.item());
  out.ltotal = static_cast<double>(ltotal.item());
  return out;
}

/// Case visiting order for one epoch: a seeded shuffle, pure in (seed, epoch).
inline std::vector<int> epoch_order(std::uint64_t seed, std::int64_t epoch,
                                    int n_cases) {
  std::vector<int> order(static_cast<std::size_t>(n_cases));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(stream_seed(seed, "epoch", static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order);
  return order;
}

template <typename T>
struct TrainResult {
  std::vector<LossRecord> log;
  std::int64_t final_step = 0;  // total steps completed
};

/// Runs the fixed-step training loop: cases visited in per-epoch shuffled
/// order, a fresh slice batch each step, loss log appended per step, and
/// checkpoints written into out_dir (pass empty to skip files). All random
/// draws are pure functions of (seed, step), so resuming from a checkpoint
/// continues the exact run.
template <typename T>
TrainResult<T> train(Models<T>& models, std::vector<PreparedCase<T>>& cases,
                     const TrainConfig& cfg,
                     const std::filesystem::path& out_dir,
                     std::int64_t start_step = 0,
                     const std::function<void(const LossRecord&)>& on_step = {}) {
  cfg.validate();
  if (cases.empty()) throw config_error("train: no training cases");
  if (start_step < 0 || start_step > cfg.steps)
    throw config_error("train: start step outside the configured range");

  std::ofstream log_file;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    log_file.open(out_dir / "loss_log.txt", std::ios::app);
    if (!log_file) throw io_error("train: cannot open loss log");
  }

  const int n = static_cast<int>(cases.size());
  TrainResult<T> result;
  for (std::int64_t g = start_step; g < cfg.steps; ++g) {
    const std::int64_t epoch = g / n;
    const int pos = static_cast<int>(g % n);
    const int case_index = epoch_order(cfg.seed, epoch, n)[static_cast<std::size_t>(pos)];
    Rng slice_rng(stream_seed(cfg.seed, "slices", static_cast<std::uint64_t>(g)));

    const auto t0 = std::chrono::steady_clock::now();
    const StepLosses losses =
        training_step(models, cases[static_cast<std::size_t>(case_index)], cfg,
                      slice_rng);
    const auto t1 = std::chrono::steady_clock::now();

    LossRecord rec;
    rec.step = g;
    rec.case_id = cases[static_cast<std::size_t>(case_index)].original.case_id;
    rec.l3d = losses.l3d;
    rec.l2d = losses.l2d;
    rec.ltotal = losses.ltotal;
    rec.wall_ms =
        std::chrono::duration<double, std::milli>(t1 - t0).count();
    if (!std::isfinite(rec.ltotal))
      throw numeric_error("train: loss diverged at step " +
                          std::to_string(g));
    if (log_file) {
      char line[256];
      std::snprintf(line, sizeof(line), "%lld %s %.17g %.17g %.17g %.3f\n",
                    static_cast<long long>(rec.step), rec.case_id.c_str(),
                    rec.l3d, rec.l2d, rec.ltotal, rec.wall_ms);
      log_file << line;
    }
    if (on_step) on_step(rec);
    result.log.push_back(std::move(rec));

    if (!out_dir.empty() && cfg.checkpoint_every > 0 &&
        (g + 1) % cfg.checkpoint_every == 0 && (g + 1) < cfg.steps) {
      save_checkpoint(out_dir / ("ckpt_step" + std::to_string(g + 1) + ".ckpt"),
                      g + 1, models.parameters(), models.buffers());
    }
  }
  result.final_step = cfg.steps;
  if (!out_dir.empty())
    save_checkpoint(out_dir / "ckpt_final.ckpt", cfg.steps,
                    models.parameters(), models.buffers());
  return result;
}

// ---------------------------------------------------------------------------
// Inference.
// ---------------------------------------------------------------------------

/// Completes a defective volume at the original scale: the volume net fills
/// the downsampled shape, then the slice net restores each original-scale
/// slice one by one, conditioned on its defective counterpart. Output dims
/// are (H, H, H); the input is zero-padded along z to H first.
template <typename T>
VoxelGrid infer_complete(Models<T>& models, const VoxelGrid& defective,
                         ResampleMode mode = ResampleMode::majority,
                         double threshold = 0.5) {
  const int L = static_cast<int>(models.cfg.L);
  const int H = static_cast<int>(models.cfg.H);
  if (defective.nx() != H || defective.ny() != H)
    throw numeric_error(
        "infer_complete: in-plane dims must equal the high resolution");
  if (defective.nz() > H)
    throw numeric_error("infer_complete: depth exceeds the high resolution");
  const int z_low = low_depth_for(defective.nz(), models.cfg);
  if (z_low < 1)
    throw numeric_error("infer_complete: source too shallow to resample");

  const VoxelGrid padded = pad_z(defective, H);
  const Tensor<T> input3d = grid_to_tensor<T>(
      pad_z(downsample(defective, {L, L, z_low}, mode), L));
  const Tensor<T> pred3 = models.net3.forward(nullptr, input3d, false);

  const SliceMap map(L, H);
  VoxelGrid out(H, H, H, defective.spacing());
  const std::size_t plane = static_cast<std::size_t>(H) * H;
  for (int m = 0; m < H; ++m) {
    const int low = high_to_low_index(m, map);
    const Tensor<T> low_slice = slice_depth<T>(nullptr, pred3, low);
    const Tensor<T> guide = mask_to_tensor<T>(
        downsample_slice(extract_slice(padded, m), {L, L}, mode));
    const Tensor<T> row = concat<T>(nullptr, {low_slice, guide}, 1);
    const Tensor<T> pred2 = models.net2.forward(nullptr, row, false);
    const T* p = pred2.values().data();
    std::uint8_t* dst = out.data().data() + plane * static_cast<std::size_t>(m);
    for (std::size_t i = 0; i < plane; ++i)
      dst[i] = (static_cast<double>(p[i]) >= threshold) ? 1 : 0;
  }
  return out;
}

/// Implant extraction from a completed volume: the set difference against the
/// (z-padded) defective input, cleaned by morphological opening and reduced
/// to its largest connected component. The result never overlaps the
/// defective input.
inline VoxelGrid implant_from_completed(
    const VoxelGrid& completed, const VoxelGrid& defective,
    Connectivity conn = Connectivity::twentysix) {
  const VoxelGrid padded = pad_z(defective, completed.nz());
  return postprocess(set_difference(completed, padded), conn);
}

template <typename T>
VoxelGrid predict_implant(Models<T>& models, const VoxelGrid& defective,
                          ResampleMode mode = ResampleMode::majority,
                          double threshold = 0.5,
                          Connectivity conn = Connectivity::twentysix) {
  return implant_from_completed(
      infer_complete(models, defective, mode, threshold), defective, conn);
}

}  // namespace crania
