// End-to-end tests of the command-line binary: exit codes, the
// generate -> train -> infer -> evaluate flow, and config error reporting.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int code = -1;
  std::string out;
};

fs::path scratch_root() {
  static const fs::path root = [] {
    fs::path p = fs::temp_directory_path() /
                 ("crania_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

CmdResult run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path log = scratch_root() / ("out_" + std::to_string(counter++));
  const std::string cmd = std::string(CRANIA_BIN) + " " + args + " > " +
                          log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  CmdResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::ostringstream buf;
  buf << in.rdbuf();
  r.out = buf.str();
  return r;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  REQUIRE(out.good());
}

const std::string kTinyConfig =
    "channels = 4\n"
    "low_res = 8\n"
    "high_res = 16\n"
    "se_ratio = 2\n"
    "lr = 1e-3\n"
    "steps = 3\n"
    "slices_per_step = 2\n"
    "seed = 9\n"
    "gen_count = 3\n"
    "gen_dims = 16\n";

}  // namespace

TEST_CASE("info prints the effective configuration") {
  const CmdResult r = run_cli("info --channels 4 --variant transposed");
  CAPTURE(r.out);
  CHECK(r.code == 0);
  CHECK(r.out.find("channels         4") != std::string::npos);
  CHECK(r.out.find("transposed") != std::string::npos);
  CHECK(r.out.find("parameters") != std::string::npos);
}

TEST_CASE("config problems exit with the config code and name the key") {
  SECTION("unknown key via --set") {
    const CmdResult r = run_cli("info --set mystery_knob=1");
    CAPTURE(r.out);
    CHECK(r.code == 2);
    CHECK(r.out.find("mystery_knob") != std::string::npos);
  }
  SECTION("bad value via flag") {
    const CmdResult r = run_cli("info --set steps=soon");
    CAPTURE(r.out);
    CHECK(r.code == 2);
    CHECK(r.out.find("steps") != std::string::npos);
  }
  SECTION("out-of-range threshold") {
    const CmdResult r = run_cli("info --set threshold=1.5");
    CAPTURE(r.out);
    CHECK(r.code == 2);
    CHECK(r.out.find("threshold") != std::string::npos);
  }
  SECTION("malformed config file names the line") {
    const fs::path cfg = scratch_root() / "broken.cfg";
    write_file(cfg, "seed = 1\nthis line has no equals\n");
    const CmdResult r = run_cli("info --config " + cfg.string());
    CAPTURE(r.out);
    CHECK(r.code == 2);
    CHECK(r.out.find("line 2") != std::string::npos);
  }
  SECTION("missing subcommand") {
    const CmdResult r = run_cli("");
    CHECK(r.code == 2);
  }
}

TEST_CASE("missing files exit with the io code") {
  const CmdResult r =
      run_cli("train --data /no/such/manifest.txt --out " +
              (scratch_root() / "never").string());
  CAPTURE(r.out);
  CHECK(r.code == 3);
  CHECK(r.out.find("io error") != std::string::npos);

  const CmdResult r2 = run_cli("info --config /no/such/file.cfg");
  CHECK(r2.code == 3);
}

TEST_CASE("gradcheck passes and reports every operation") {
  const CmdResult r = run_cli("gradcheck --seed 3");
  CAPTURE(r.out);
  CHECK(r.code == 0);
  CHECK(r.out.find("FAIL") == std::string::npos);
  CHECK(r.out.find("operations checked") != std::string::npos);
}

TEST_CASE("generate, train, infer, evaluate round trip") {
  const fs::path root = scratch_root() / "flow";
  const fs::path cfg = root / "tiny.cfg";
  const fs::path data = root / "data";
  const fs::path run = root / "run";
  const fs::path pred = root / "pred";
  fs::create_directories(root);
  write_file(cfg, kTinyConfig);

  const CmdResult gen =
      run_cli("gen-data --config " + cfg.string() + " --out " + data.string());
  CAPTURE(gen.out);
  REQUIRE(gen.code == 0);
  REQUIRE(fs::exists(data / "manifest.txt"));

  const CmdResult train = run_cli("train --config " + cfg.string() +
                                  " --data " + (data / "manifest.txt").string() +
                                  " --out " + run.string());
  CAPTURE(train.out);
  REQUIRE(train.code == 0);
  REQUIRE(fs::exists(run / "ckpt_final.ckpt"));
  REQUIRE(fs::exists(run / "loss_log.txt"));
  CHECK(train.out.find("train dice") != std::string::npos);

  // Predict only one case: evaluation must flag the others and exit nonzero.
  const CmdResult infer1 = run_cli(
      "infer --config " + cfg.string() + " --checkpoint " +
      (run / "ckpt_final.ckpt").string() + " --input " +
      (data / "case_001_defective.vxl").string() + " --out " + pred.string());
  CAPTURE(infer1.out);
  REQUIRE(infer1.code == 0);
  REQUIRE(fs::exists(pred / "case_001_implant.vxl"));
  REQUIRE(fs::exists(pred / "case_001_completed.vxl"));

  const CmdResult partial = run_cli(
      "evaluate --data " + (data / "manifest.txt").string() + " --pred " +
      pred.string() + " --out " + (root / "partial").string());
  CAPTURE(partial.out);
  CHECK(partial.code == 3);
  CHECK(partial.out.find("MISSING") != std::string::npos);
  CHECK(partial.out.find("case_000") != std::string::npos);
  CHECK(fs::exists(root / "partial.txt"));
  CHECK(fs::exists(root / "partial.json"));

  for (const std::string id : {"case_000", "case_002"}) {
    const CmdResult r = run_cli(
        "infer --config " + cfg.string() + " --checkpoint " +
        (run / "ckpt_final.ckpt").string() + " --input " +
        (data / (id + "_defective.vxl")).string() + " --out " + pred.string());
    CAPTURE(r.out);
    REQUIRE(r.code == 0);
  }

  const CmdResult full = run_cli(
      "evaluate --data " + (data / "manifest.txt").string() + " --pred " +
      pred.string() + " --out " + (root / "full").string());
  CAPTURE(full.out);
  CHECK(full.code == 0);
  CHECK(full.out.find("MISSING") == std::string::npos);
  CHECK(full.out.find("dice") != std::string::npos);
  REQUIRE(fs::exists(root / "full.json"));

  // Wrong-architecture checkpoint load is an io failure, not a crash.
  const CmdResult mismatch = run_cli(
      "infer --checkpoint " + (run / "ckpt_final.ckpt").string() +
      " --input " + (data / "case_001_defective.vxl").string() + " --out " +
      (root / "nope").string());
  CAPTURE(mismatch.out);
  CHECK(mismatch.code == 3);
}

TEST_CASE("training resumes from a checkpoint") {
  const fs::path root = scratch_root() / "resume";
  const fs::path cfg = root / "tiny.cfg";
  const fs::path data = root / "data";
  fs::create_directories(root);
  write_file(cfg, kTinyConfig);

  REQUIRE(run_cli("gen-data --config " + cfg.string() + " --out " +
                  data.string())
              .code == 0);
  const std::string manifest = (data / "manifest.txt").string();

  const CmdResult first = run_cli("train --config " + cfg.string() +
                                  " --data " + manifest + " --out " +
                                  (root / "a").string() + " --set steps=2");
  CAPTURE(first.out);
  REQUIRE(first.code == 0);

  const CmdResult second = run_cli(
      "train --config " + cfg.string() + " --data " + manifest + " --out " +
      (root / "b").string() + " --resume " +
      (root / "a" / "ckpt_final.ckpt").string());
  CAPTURE(second.out);
  REQUIRE(second.code == 0);
  CHECK(second.out.find("resumed") != std::string::npos);
  CHECK(second.out.find("step 2") != std::string::npos);
}
