// Copyright 2026 The vgsg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Drives the installed command-line binary as a subprocess and checks the
// documented contract: flag handling, exit codes, output artifacts, and
// determinism.  VGSG_CLI_PATH is injected by the build.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using doctest::Contains;

namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("vgsg_cli_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

struct CmdResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr interleaved
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Runs the binary through the shell so tests see exactly what a script
// would: the real exit status and the combined output streams.
CmdResult run_cli(const std::string& args, const std::string& env = "") {
  static int counter = 0;
  std::string capture =
      (fs::temp_directory_path() / ("vgsg_cli_out_" + std::to_string(counter++))).string();
  std::string cmd = env + (env.empty() ? "" : " ") + VGSG_CLI_PATH + " " + args + " > " + capture +
                    " 2>&1";
  int status = std::system(cmd.c_str());
  CmdResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = read_file(capture);
  fs::remove(capture);
  return r;
}

// Verification-scale configuration shared by every run in this suite.
const char* kMicroConfig =
    "enc.channels 8\n"
    "enc.text_channels 8\n"
    "enc.input_h 8\n"
    "enc.input_w 8\n"
    "enc.max_tokens 12\n"
    "enc.vocab_size 32\n"
    "enc.text_layers 1\n"
    "enc.heads 2\n"
    "enc.mlp_ratio 2\n"
    "enc.stripes 2\n"
    "train.epochs 2\n"
    "train.decay_epoch 1\n"
    "train.batch_size 4\n"
    "train.per_identity 2\n"
    "train.base_lr 0.001\n"
    "data.parts 2\n"
    "data.image_h 8\n"
    "data.image_w 8\n"
    "data.train_identities 6\n"
    "data.test_identities 3\n"
    "data.samples_per_identity 2\n"
    "data.noise_level 0.05\n";

std::string write_micro_config(const TempDir& dir) {
  std::string path = dir.file("micro.cfg");
  std::ofstream out(path);
  out << kMicroConfig;
  return path;
}

// Generates the shared dataset and returns its directory.
std::string gen_dataset(const TempDir& dir, const std::string& cfg) {
  std::string data = dir.file("data");
  CmdResult r = run_cli("gen --config " + cfg + " --out " + data + " --seed 7");
  REQUIRE(r.exit_code == 0);
  return data;
}

std::map<std::string, std::string> dir_contents(const std::string& dir) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) out[entry.path().filename().string()] = read_file(entry.path());
  }
  return out;
}

int count_lines_with(const std::string& text, const std::string& needle) {
  int n = 0;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find(needle) != std::string::npos) ++n;
  }
  return n;
}

std::uint32_t read_u32le(const std::string& bytes, std::size_t at) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 3])) << 24;
}

}  // namespace

TEST_CASE("cli: gen writes a stamped dataset deterministically") {
  TempDir dir;
  std::string cfg = write_micro_config(dir);

  CmdResult a = run_cli("gen --config " + cfg + " --out " + dir.file("d1") + " --seed 7");
  CHECK(a.exit_code == 0);
  CHECK_MESSAGE(a.output.find("wrote") != std::string::npos, a.output);
  CHECK(a.output.find("samples=18") != std::string::npos);
  CHECK(a.output.find("config_hash=") != std::string::npos);

  CmdResult b = run_cli("gen --config " + cfg + " --out " + dir.file("d2") + " --seed 7");
  REQUIRE(b.exit_code == 0);
  auto c1 = dir_contents(dir.file("d1"));
  auto c2 = dir_contents(dir.file("d2"));
  CHECK(c1.size() == 3);  // manifest, samples, run.cfg
  CHECK(c1 == c2);

  // The stamp is the first line of the config snapshot.
  REQUIRE(c1.count("run.cfg") == 1);
  CHECK(c1["run.cfg"].rfind("# config_hash ", 0) == 0);
}

TEST_CASE("cli: gen rejects unusable invocations") {
  TempDir dir;
  std::string cfg = write_micro_config(dir);

  CmdResult missing_out = run_cli("gen");
  CHECK(missing_out.exit_code == 2);
  CHECK_MESSAGE(missing_out.output.find("Usage") != std::string::npos, missing_out.output);

  CmdResult one_identity =
      run_cli("gen --config " + cfg + " --out " + dir.file("x") + " --identities 1");
  CHECK(one_identity.exit_code == 2);
  CHECK(one_identity.output.find("need >= 2 identities") != std::string::npos);

  std::ofstream(dir.file("bad.cfg")) << "no.such.key 3\n";
  CmdResult bad_key = run_cli("gen --config " + dir.file("bad.cfg") + " --out " + dir.file("x"));
  CHECK(bad_key.exit_code == 2);
  CHECK(bad_key.output.find("unknown config key") != std::string::npos);

  CmdResult no_cfg = run_cli("gen --config " + dir.file("absent.cfg") + " --out " + dir.file("x"));
  CHECK(no_cfg.exit_code == 3);
}

TEST_CASE("cli: train writes checkpoints, a stamped log, and echoes epochs") {
  TempDir dir;
  std::string cfg = write_micro_config(dir);
  std::string data = gen_dataset(dir, cfg);
  std::string out = dir.file("run");

  CmdResult r = run_cli("train --config " + cfg + " --data " + data + " --out " + out);
  REQUIRE_MESSAGE(r.exit_code == 0, r.output);
  CHECK(count_lines_with(r.output, "epoch=") == 2);
  CHECK(r.output.find("training complete") != std::string::npos);

  for (const char* name : {"run.cfg", "train.log", "last.ckpt", "best.ckpt", "final.ckpt"}) {
    CHECK_MESSAGE(fs::exists(fs::path(out) / name), name);
  }
  std::string log = read_file(out + "/train.log");
  CHECK(log.rfind("# config_hash ", 0) == 0);
  CHECK(count_lines_with(log, "epoch=") == 2);

  // The console copy of each epoch record matches the log bytes.
  std::istringstream in(log);
  std::string line;
  std::getline(in, line);  // stamp
  while (std::getline(in, line)) CHECK(r.output.find(line) != std::string::npos);
}

TEST_CASE("cli: flags override the config file and --set overrides flags") {
  TempDir dir;
  std::string cfg = write_micro_config(dir);
  std::string data = gen_dataset(dir, cfg);

  // Config says two epochs; the flag wins with one.
  CmdResult flag = run_cli("train --config " + cfg + " --data " + data + " --out " +
                           dir.file("r1") + " --epochs 1 --decay-epoch 0");
  REQUIRE_MESSAGE(flag.exit_code == 0, flag.output);
  CHECK(count_lines_with(flag.output, "epoch=") == 1);

  // --set has the last word over the flag.
  CmdResult set = run_cli("train --config " + cfg + " --data " + data + " --out " +
                          dir.file("r2") + " --epochs 1 --decay-epoch 0 --set train.epochs=0");
  REQUIRE_MESSAGE(set.exit_code == 0, set.output);
  CHECK(count_lines_with(set.output, "epoch=") == 0);
  CHECK(fs::exists(dir.path() / "r2" / "final.ckpt"));  // initial state, still a valid run
}

TEST_CASE("cli: training abort reports the offending loss term and exits 4") {
  TempDir dir;
  std::string cfg = write_micro_config(dir);
  std::string data = gen_dataset(dir, cfg);

  CmdResult r = run_cli("train --config " + cfg + " --data " + data + " --out " + dir.file("d") +
                        " --epochs 1 --decay-epoch 0 --set train.base_lr=inf");
  CHECK(r.exit_code == 4);
  CHECK_MESSAGE(r.output.find("loss is not finite") != std::string::npos, r.output);
}

TEST_CASE("cli: eval reports both directions and enforces the config stamp") {
  TempDir dir;
  std::string cfg = write_micro_config(dir);
  std::string data = gen_dataset(dir, cfg);
  std::string run = dir.file("run");
  REQUIRE(run_cli("train --config " + cfg + " --data " + data + " --out " + run).exit_code == 0);

  // Default config is the run.cfg beside the checkpoint.
  CmdResult r = run_cli("eval --checkpoint " + run + "/final.ckpt --data " + data + " --out " +
                        dir.file("ev"));
  REQUIRE_MESSAGE(r.exit_code == 0, r.output);
  CHECK(r.output.find("text-to-image rank1=") != std::string::npos);
  CHECK(r.output.find("image-to-text rank1=") != std::string::npos);
  std::string metrics = read_file(dir.file("ev") + "/metrics.txt");
  CHECK(metrics.rfind("# config_hash ", 0) == 0);
  CHECK(count_lines_with(metrics, "rank1=") == 2);

  // A config differing in any serialized value no longer matches the
  // checkpoint stamp.
  std::string tampered = read_file(run + "/run.cfg");
  std::size_t at = tampered.find("loss.lambda1 4");
  REQUIRE(at != std::string::npos);
  tampered.replace(at, 14, "loss.lambda1 2");
  std::ofstream(dir.file("tampered.cfg")) << tampered;
  std::string base = "eval --checkpoint " + run + "/final.ckpt --data " + data + " --config " +
                     dir.file("tampered.cfg");
  CmdResult mismatch = run_cli(base);
  CHECK(mismatch.exit_code == 5);
  CHECK(mismatch.output.find("different configuration") != std::string::npos);
  CHECK(run_cli(base + " --force").exit_code == 0);
}

TEST_CASE("cli: embedding export writes the documented binary layout") {
  TempDir dir;
  std::string cfg = write_micro_config(dir);
  std::string data = gen_dataset(dir, cfg);
  std::string run = dir.file("run");
  REQUIRE(run_cli("train --config " + cfg + " --data " + data + " --out " + run +
                  " --set train.epochs=0")
              .exit_code == 0);

  CmdResult r = run_cli("eval --checkpoint " + run + "/final.ckpt --data " + data +
                        " --export-embeddings " + dir.file("emb"));
  REQUIRE_MESSAGE(r.exit_code == 0, r.output);
  for (const char* name : {"emb.text.bin", "emb.image.bin"}) {
    std::string bytes = read_file(dir.file(name));
    REQUIRE(bytes.size() > 20);
    CHECK(bytes.substr(0, 8) == "VGSGEMB1");
    std::uint32_t count = read_u32le(bytes, 8);
    std::uint32_t dim = read_u32le(bytes, 12);
    std::uint32_t k = read_u32le(bytes, 16);
    CHECK(count == 6);  // 3 held-out identities, 2 samples each
    CHECK(k == 2);
    CHECK(dim == 8 * 3);  // global plus two locals, 8 channels each
    CHECK(bytes.size() == 20 + std::size_t(count) * dim * 4);
  }
}

TEST_CASE("cli: gradcheck passes clean and catches an injected backward bug") {
  TempDir dir;
  CmdResult clean = run_cli("gradcheck --items baseline");
  CHECK(clean.exit_code == 0);
  CHECK(clean.output.find("== step-loss baseline") != std::string::npos);
  CHECK(clean.output.find("max_rel_err") != std::string::npos);
  CHECK(clean.output.find("gradcheck passed") != std::string::npos);
  CHECK(clean.output.find("FAIL") == std::string::npos);

  CmdResult broken = run_cli("gradcheck --items baseline --inject-backward-bug");
  CHECK(broken.exit_code == 6);
  CHECK_MESSAGE(broken.output.find("gradcheck FAILED: step-loss baseline") != std::string::npos,
                broken.output);

  CHECK(run_cli("gradcheck --items no_such_item").exit_code == 2);
}

TEST_CASE("cli: ablate writes ranked tables for both suites") {
  TempDir dir;
  std::string cfg = write_micro_config(dir);
  std::string data = gen_dataset(dir, cfg);

  std::string common = " --config " + cfg + " --data " + data + " --seeds 1 --jobs 2 --epochs 1" +
                       " --set train.decay_epoch=0";
  CmdResult comp = run_cli("ablate --suite components --out " + dir.file("ab") + common);
  REQUIRE_MESSAGE(comp.exit_code == 0, comp.output);
  CHECK(comp.output.find("baseline") != std::string::npos);
  CHECK(comp.output.find("full") != std::string::npos);

  std::string csv = read_file(dir.file("ab") + "/ablation.csv");
  CHECK(csv.rfind("variant,direction,rank1,rank5,rank10,map,seed_median\n", 0) == 0);
  CHECK(count_lines_with(csv, ",") == 11);  // header plus five variants in two directions
  CHECK(csv.find("# config_hash ") != std::string::npos);
  CHECK(read_file(dir.file("ab") + "/ablation.txt").rfind("# config_hash ", 0) == 0);

  CmdResult vgkt = run_cli("ablate --suite vgkt --out " + dir.file("abv") + common);
  REQUIRE_MESSAGE(vgkt.exit_code == 0, vgkt.output);
  std::string vcsv = read_file(dir.file("abv") + "/ablation.csv");
  for (const char* label : {"\nnone,", "\nfeature,", "\nst,", "\ncpt,", "\nboth,"}) {
    CHECK_MESSAGE(vcsv.find(label) != std::string::npos, label);
  }

  CHECK(run_cli("ablate --suite bogus --data " + data).exit_code == 2);
}

TEST_CASE("cli: relative outputs resolve under the output root variable") {
  TempDir dir;
  std::string cfg = write_micro_config(dir);
  CmdResult r = run_cli("gen --config " + cfg + " --out nested/set --seed 7",
                        "VGSG_OUT_ROOT=" + dir.path().string());
  REQUIRE_MESSAGE(r.exit_code == 0, r.output);
  CHECK(fs::exists(dir.path() / "nested" / "set" / "manifest.txt"));
  CHECK(fs::exists(dir.path() / "nested" / "set" / "run.cfg"));
}
