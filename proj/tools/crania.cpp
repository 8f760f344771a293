// Command-line front end: dataset generation, training, inference,
// evaluation, gradient self-checks, and configuration info.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "crania/config.hpp"
#include "crania/gradcheck.hpp"
#include "crania/metrics.hpp"
#include "crania/pipeline.hpp"
#include "crania/synthdata.hpp"

namespace fs = std::filesystem;
using namespace crania;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

/// Config sources for one subcommand: optional file, generic key=value
/// overrides, plus dedicated flags that funnel through the same keys.
struct ConfigCli {
  std::string config_file;
  std::vector<std::string> overrides;
  std::vector<std::pair<std::string, std::string>> flags;  // key -> raw value

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file,
                    "Settings file with `key = value` lines");
    cmd->add_option("--set", overrides,
                    "Extra key=value settings (repeatable, win over the file)");
    add_flag(cmd, "--seed", "seed", "Run seed");
    add_flag(cmd, "--precision", "precision", "Float width: f32 or f64");
    add_flag(cmd, "--channels", "channels", "Channel width of both nets");
    add_flag(cmd, "--low-res", "low_res", "Completion-stage resolution");
    add_flag(cmd, "--high-res", "high_res", "Output resolution");
    add_flag(cmd, "--variant", "variant", "Upsampler variant: nn or transposed");
    add_flag(cmd, "--lr", "lr", "Learning rate");
    add_flag(cmd, "--steps", "steps", "Total optimizer steps");
    add_flag(cmd, "--slices-per-step", "slices_per_step",
             "Distinct low slices per step");
    add_flag(cmd, "--count", "gen_count", "Cases to generate");
  }

  void add_flag(CLI::App* cmd, const std::string& flag, const std::string& key,
                const std::string& help) {
    auto slot = std::make_shared<std::string>();
    CLI::Option* opt = cmd->add_option(flag, *slot, help);
    hooks_.push_back([this, slot, opt, key] {
      if (opt->count() > 0) flags.emplace_back(key, *slot);
    });
  }

  RunConfig build() {
    for (const auto& h : hooks_) h();
    RunConfig cfg;
    if (!config_file.empty()) load_config_file(cfg, config_file);
    apply_overrides(cfg, overrides);
    for (const auto& [key, value] : flags) cfg.apply(key, value);
    return cfg;
  }

 private:
  std::vector<std::function<void()>> hooks_;
};

template <typename Fn>
int with_precision(const std::string& precision, Fn&& fn) {
  if (precision == "f64") return fn(double{});
  return fn(float{});
}

VoxelGrid pad_to_depth(const VoxelGrid& g, int nz) { return pad_z(g, nz); }

struct SplitScores {
  double completed_dice = 0.0;
  double implant_dice = 0.0;
  int cases = 0;
};

template <typename T>
SplitScores score_split(Models<T>& models, const std::vector<VolumePair>& pairs,
                        const RunConfig& cfg) {
  SplitScores s;
  const int H = static_cast<int>(cfg.train.net.H);
  for (const auto& pair : pairs) {
    const VoxelGrid completed =
        infer_complete(models, pair.defective, cfg.train.resample,
                       cfg.threshold);
    const VoxelGrid implant =
        implant_from_completed(completed, pair.defective, cfg.connectivity);
    s.completed_dice += dice(completed, pad_to_depth(pair.complete, H));
    s.implant_dice += dice(implant, pad_to_depth(pair.implant, H));
    ++s.cases;
  }
  if (s.cases > 0) {
    s.completed_dice /= s.cases;
    s.implant_dice /= s.cases;
  }
  return s;
}

int cmd_gen_data(ConfigCli& cc, const std::string& out_dir) {
  RunConfig cfg = cc.build();
  cfg.data.validate();
  const DatasetPaths paths = generate_dataset(cfg.data, out_dir);
  const auto entries = load_manifest(paths.manifest);
  int train_n = 0, val_n = 0;
  for (const auto& e : entries) (e.split == "train" ? train_n : val_n) += 1;
  std::printf("wrote %d cases (%d train, %d val) under %s\n",
              static_cast<int>(entries.size()), train_n, val_n,
              out_dir.c_str());
  std::printf("manifest: %s\n", paths.manifest.string().c_str());
  std::printf("generator parameters: %s\n", paths.params.string().c_str());
  return kExitOk;
}

int cmd_train(ConfigCli& cc, const std::string& manifest_path,
              const std::string& out_dir, const std::string& resume) {
  RunConfig cfg = cc.build();
  cfg.validate();

  const fs::path manifest(manifest_path);
  const auto entries = load_manifest(manifest);
  std::vector<VolumePair> train_pairs, val_pairs;
  for (const auto& e : entries)
    (e.split == "train" ? train_pairs : val_pairs)
        .push_back(load_pair(e, manifest.parent_path()));
  if (train_pairs.empty())
    throw config_error("train: the manifest has no training cases");

  return with_precision(cfg.precision, [&](auto zero) {
    using T = decltype(zero);
    std::vector<PreparedCase<T>> cases;
    for (const auto& pair : train_pairs)
      cases.push_back(prepare_case<T>(pair, cfg.train.net, cfg.train.resample));

    Models<T> models(cfg.train.net, cfg.train.seed);
    std::int64_t start_step = 0;
    if (!resume.empty()) {
      start_step =
          load_checkpoint<T>(resume, models.parameters(), models.buffers());
      std::printf("resumed from %s at step %lld\n", resume.c_str(),
                  static_cast<long long>(start_step));
    }

    std::printf("training %s upsampler for %lld steps on %d cases (%lld "
                "parameters)\n",
                variant_name(cfg.train.net.variant).c_str(),
                static_cast<long long>(cfg.train.steps),
                static_cast<int>(cases.size()),
                static_cast<long long>(parameter_count(models.net3) +
                                       parameter_count(models.net2)));
    const std::int64_t report_every =
        std::max<std::int64_t>(1, cfg.train.steps / 20);
    const auto t0 = std::chrono::steady_clock::now();
    train(models, cases, cfg.train, out_dir, start_step,
          [&](const LossRecord& rec) {
            if ((rec.step + 1) % report_every == 0 ||
                rec.step + 1 == cfg.train.steps)
              std::printf("step %lld  %s  loss %.6g (volume %.6g, slices "
                          "%.6g)  %.0f ms\n",
                          static_cast<long long>(rec.step + 1),
                          rec.case_id.c_str(), rec.ltotal, rec.l3d, rec.l2d,
                          rec.wall_ms);
          });
    const double train_s = std::chrono::duration<double>(
                               std::chrono::steady_clock::now() - t0)
                               .count();
    std::printf("training finished in %.1f s; checkpoint: %s\n", train_s,
                (fs::path(out_dir) / "ckpt_final.ckpt").string().c_str());

    const SplitScores train_scores = score_split(models, train_pairs, cfg);
    std::printf("train dice: completed %.4f, implant %.4f (%d cases)\n",
                train_scores.completed_dice, train_scores.implant_dice,
                train_scores.cases);
    if (!val_pairs.empty()) {
      const SplitScores val_scores = score_split(models, val_pairs, cfg);
      std::printf("val dice:   completed %.4f, implant %.4f (%d cases)\n",
                  val_scores.completed_dice, val_scores.implant_dice,
                  val_scores.cases);
    } else {
      std::printf("val dice:   (no validation cases)\n");
    }
    return kExitOk;
  });
}

int cmd_infer(ConfigCli& cc, const std::string& checkpoint,
              const std::string& input, const std::string& out_dir,
              std::string case_id) {
  RunConfig cfg = cc.build();
  cfg.train.net.validate();
  const VoxelGrid defective = load_grid(input);

  if (case_id.empty()) {
    case_id = fs::path(input).stem().string();
    const std::string suffix = "_defective";
    if (case_id.size() > suffix.size() &&
        case_id.compare(case_id.size() - suffix.size(), suffix.size(),
                        suffix) == 0)
      case_id.resize(case_id.size() - suffix.size());
  }

  return with_precision(cfg.precision, [&](auto zero) {
    using T = decltype(zero);
    Models<T> models(cfg.train.net, cfg.train.seed);
    load_checkpoint<T>(checkpoint, models.parameters(), models.buffers());

    const VoxelGrid completed =
        infer_complete(models, defective, cfg.train.resample, cfg.threshold);
    const VoxelGrid implant =
        implant_from_completed(completed, defective, cfg.connectivity);
    const VoxelGrid padded = pad_to_depth(defective, completed.nz());
    if (!logical_and(implant, padded).empty_mask())
      throw numeric_error("infer: implant overlaps the defective input");

    fs::create_directories(out_dir);
    const fs::path completed_path =
        fs::path(out_dir) / (case_id + "_completed.vxl");
    const fs::path implant_path =
        fs::path(out_dir) / (case_id + "_implant.vxl");
    save_grid(completed, completed_path);
    save_grid(implant, implant_path);
    std::printf("completed: %s (%lld voxels)\n",
                completed_path.string().c_str(),
                static_cast<long long>(completed.occupancy()));
    std::printf("implant:   %s (%lld voxels)\n", implant_path.string().c_str(),
                static_cast<long long>(implant.occupancy()));
    return kExitOk;
  });
}

int cmd_evaluate(const std::string& manifest_path, const std::string& pred_dir,
                 const std::string& out_prefix) {
  const fs::path manifest(manifest_path);
  const auto entries = load_manifest(manifest);
  if (entries.empty()) throw io_error("evaluate: the manifest has no cases");

  std::vector<CaseRecord> records;
  std::vector<std::string> missing;
  for (const auto& e : entries) {
    const fs::path pred_path = fs::path(pred_dir) / (e.case_id + "_implant.vxl");
    if (!fs::exists(pred_path)) {
      missing.push_back(e.case_id);
      std::printf("MISSING prediction for %s (expected %s)\n",
                  e.case_id.c_str(), pred_path.string().c_str());
      continue;
    }
    VoxelGrid pred = load_grid(pred_path);
    VoxelGrid truth = load_grid(manifest.parent_path() / e.implant_path);
    // Predictions at the padded working depth compare against z-padded truth.
    if (pred.nz() > truth.nz() && pred.nx() == truth.nx() &&
        pred.ny() == truth.ny())
      truth = pad_to_depth(truth, pred.nz());
    records.push_back(evaluate_case(e.case_id, pred, truth));
  }

  const EvalReport report = build_report(std::move(records));
  const std::string text = report_to_text(report);
  std::fputs(text.c_str(), stdout);

  const fs::path text_path = out_prefix + ".txt";
  const fs::path json_path = out_prefix + ".json";
  if (!text_path.parent_path().empty())
    fs::create_directories(text_path.parent_path());
  std::ofstream text_out(text_path);
  text_out << text;
  if (!missing.empty()) {
    text_out << "missing predictions:";
    for (const auto& id : missing) text_out << ' ' << id;
    text_out << '\n';
  }
  if (!text_out) throw io_error("evaluate: cannot write " + text_path.string());
  std::ofstream json_out(json_path);
  json_out << report_to_json(report) << '\n';
  if (!json_out) throw io_error("evaluate: cannot write " + json_path.string());
  std::printf("report: %s / %s\n", text_path.string().c_str(),
              json_path.string().c_str());

  if (!missing.empty()) {
    std::printf("%d case(s) had no prediction\n",
                static_cast<int>(missing.size()));
    return kExitIo;
  }
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cases = run_gradient_suite(seed);
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  bool all_ok = true;
  std::printf("%-28s %-12s %s\n", "operation", "max rel err", "status");
  for (const auto& c : cases) {
    std::printf("%-28s %-12.3g %s\n", c.name.c_str(), c.max_rel_err,
                c.passed ? "ok" : "FAIL");
    all_ok = all_ok && c.passed;
  }
  std::printf("%d operations checked in %.1f s (tolerance %g)\n",
              static_cast<int>(cases.size()), elapsed, kGradTolerance);
  if (!all_ok) {
    std::printf("gradient check FAILED\n");
    return kExitNumeric;
  }
  return kExitOk;
}

int cmd_info(ConfigCli& cc) {
  RunConfig cfg = cc.build();
  cfg.train.net.validate();
  const auto& net = cfg.train.net;

  std::printf("configuration\n");
  std::printf("  precision        %s\n", cfg.precision.c_str());
  std::printf("  seed             %llu\n",
              static_cast<unsigned long long>(cfg.seed));
  std::printf("  channels         %lld\n", static_cast<long long>(net.c));
  std::printf("  low resolution   %lld\n", static_cast<long long>(net.L));
  std::printf("  high resolution  %lld\n", static_cast<long long>(net.H));
  std::printf("  upsampler        %s\n", variant_name(net.variant).c_str());
  std::printf("  se ratio         %lld\n",
              static_cast<long long>(net.se_ratio));

  std::printf("volume net z-extents: %lld", static_cast<long long>(net.L));
  std::int64_t d = net.L;
  d = detail::conv_out_extent(d, 3, 1, 1);
  std::printf(" -> %lld", static_cast<long long>(d));
  d = detail::conv_out_extent(d, 3, 2, 1);
  std::printf(" -> %lld", static_cast<long long>(d));
  d = detail::conv_out_extent(d, 3, 2, 1);
  std::printf(" -> %lld", static_cast<long long>(d));
  d = detail::tconv_out_extent(d, 4, 2, 1);
  std::printf(" -> %lld", static_cast<long long>(d));
  d = detail::tconv_out_extent(d, 4, 2, 1);
  std::printf(" -> %lld\n", static_cast<long long>(d));

  if (net.variant == UpsamplerVariant::nn) {
    std::printf("slice net extents: %lld -> %lld -> %lld\n",
                static_cast<long long>(net.L),
                static_cast<long long>(net.nn_mid()),
                static_cast<long long>(net.H));
  } else {
    std::printf("slice net extents: %lld -> %lld -> %lld -> %lld\n",
                static_cast<long long>(net.L),
                static_cast<long long>(2 * net.L),
                static_cast<long long>(4 * net.L),
                static_cast<long long>(net.H));
  }

  Models<float> models(net, cfg.train.seed);
  std::printf("parameters: volume net %lld, slice net %lld, total %lld\n",
              static_cast<long long>(parameter_count(models.net3)),
              static_cast<long long>(parameter_count(models.net2)),
              static_cast<long long>(parameter_count(models.net3) +
                                     parameter_count(models.net2)));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage skull completion: a volume net fills the defect at "
               "low resolution, a slice net restores the original scale"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  ConfigCli gen_cc;
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen_cc.attach(gen);

  // train
  auto* tr = app.add_subcommand("train", "Train both networks jointly");
  ConfigCli tr_cc;
  std::string tr_manifest, tr_out, tr_resume;
  tr->add_option("--data", tr_manifest, "Dataset manifest")->required();
  tr->add_option("--out", tr_out, "Run directory for logs and checkpoints")
      ->required();
  tr->add_option("--resume", tr_resume, "Checkpoint to continue from");
  tr_cc.attach(tr);

  // infer
  auto* in = app.add_subcommand("infer",
                                "Complete a defective volume and extract the "
                                "implant");
  ConfigCli in_cc;
  std::string in_ckpt, in_input, in_out, in_case;
  in->add_option("--checkpoint", in_ckpt, "Trained checkpoint")->required();
  in->add_option("--input", in_input, "Defective volume (.vxl)")->required();
  in->add_option("--out", in_out, "Output directory")->required();
  in->add_option("--case-id", in_case, "Output name (default: input stem)");
  in_cc.attach(in);

  // evaluate
  auto* ev = app.add_subcommand("evaluate",
                                "Score predicted implants against a manifest");
  std::string ev_manifest, ev_pred, ev_out = "report";
  ev->add_option("--data", ev_manifest, "Dataset manifest")->required();
  ev->add_option("--pred", ev_pred, "Directory of predicted implants")
      ->required();
  ev->add_option("--out", ev_out, "Report path prefix");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck",
                                "Check every op against finite differences");
  std::uint64_t gc_seed = 17;
  gc->add_option("--seed", gc_seed, "Probe seed");

  // info
  auto* inf = app.add_subcommand("info", "Print the effective configuration");
  ConfigCli inf_cc;
  inf_cc.attach(inf);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_cc, gen_out);
    if (tr->parsed()) return cmd_train(tr_cc, tr_manifest, tr_out, tr_resume);
    if (in->parsed())
      return cmd_infer(in_cc, in_ckpt, in_input, in_out, in_case);
    if (ev->parsed()) return cmd_evaluate(ev_manifest, ev_pred, ev_out);
    if (gc->parsed()) return cmd_gradcheck(gc_seed);
    if (inf->parsed()) return cmd_info(inf_cc);
  } catch (const config_error& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kExitConfig;
  } catch (const io_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitOther;
  }
  return kExitOther;
}
