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

// Command-line front end.  Subcommands: gen, train, eval, gradcheck,
// ablate.  Configuration layers in documented precedence order: built-in
// defaults, then --config file, then dedicated flags, then --set pairs.
// Exit codes are fixed for scripting: 0 ok, 2 usage or configuration,
// 3 ingestion, 4 training abort, 5 integrity, 6 verification.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <streambuf>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "runconfig.hpp"
#include "vgsg/error.hpp"
#include "vgsg/evaluator.hpp"
#include "vgsg/gradcheck_suite.hpp"
#include "vgsg/model.hpp"
#include "vgsg/synthdata.hpp"
#include "vgsg/trainer.hpp"

namespace {

namespace fs = std::filesystem;
using vgsg::cli::RunConfig;

// Mirrors every character into two buffers so epoch records reach the
// console and the run log with identical bytes.
class TeeBuf final : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 protected:
  int overflow(int c) override {
    if (c != traits_type::eof()) {
      a_->sputc(traits_type::to_char_type(c));
      b_->sputc(traits_type::to_char_type(c));
    }
    return c;
  }
  int sync() override {
    a_->pubsync();
    b_->pubsync();
    return 0;
  }

 private:
  std::streambuf* a_;
  std::streambuf* b_;
};

// Relative output paths land under $VGSG_OUT_ROOT when it is set; inputs
// are always taken as given.
std::string out_path(const std::string& path) {
  const char* root = std::getenv("VGSG_OUT_ROOT");
  if (path.empty() || root == nullptr || *root == '\0') return path;
  fs::path p(path);
  if (p.is_absolute()) return path;
  return (fs::path(root) / p).string();
}

std::string hash_hex(std::uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_stamp(const RunConfig& rc) { return "# config_hash " + hash_hex(rc.hash()); }

void write_text_file(const fs::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw vgsg::IngestionError("cannot write " + path.string());
  out << body;
}

// Stamped copy of the exact configuration the run used.
void write_run_config(const fs::path& dir, const RunConfig& rc) {
  write_text_file(dir / "run.cfg", config_stamp(rc) + "\n" + rc.serialize());
}

// The --config value must apply before CLI11 binds the remaining flags,
// so it is pulled straight from argv ahead of the real parse.
std::string config_path_from_argv(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return argv[i + 1];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return "";
}

void apply_set_pairs(RunConfig& rc, const std::vector<std::string>& pairs) {
  for (const std::string& pair : pairs) {
    std::size_t eq = pair.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw vgsg::ConfigError("--set expects key=value, got '" + pair + "'");
    }
    vgsg::cli::apply_key(rc, pair.substr(0, eq), pair.substr(eq + 1));
  }
}

int cmd_gen(const RunConfig& rc, const std::string& out_dir, std::uint64_t seed) {
  if (rc.data.train_identities < 2) throw vgsg::ConfigError("need >= 2 identities");
  vgsg::Dataset ds = vgsg::generate_dataset(seed, rc.data);
  std::string dir = out_path(out_dir);
  vgsg::save_dataset(ds, dir);
  fs::create_directories(dir);
  write_run_config(dir, rc);
  std::printf("wrote %s: identities=%d train + %d test, samples=%zu, vocab=%d, config_hash=%s\n",
              dir.c_str(), ds.cfg.train_identities, ds.cfg.test_identities, ds.samples.size(),
              ds.vocab.size(), hash_hex(rc.hash()).c_str());
  return 0;
}

int cmd_train(const RunConfig& rc, const std::string& data_dir, const std::string& out_dir) {
  vgsg::Dataset ds = vgsg::load_dataset(data_dir);
  vgsg::Trainer trainer(rc.enc, rc.train, ds, rc.hash());
  std::string dir = out_path(out_dir);
  fs::create_directories(dir);
  write_run_config(dir, rc);

  std::ofstream log_file(fs::path(dir) / "train.log", std::ios::binary);
  if (!log_file) throw vgsg::IngestionError("cannot write train.log under " + dir);
  log_file << config_stamp(rc) << "\n";
  TeeBuf tee(std::cout.rdbuf(), log_file.rdbuf());
  std::ostream log(&tee);

  trainer.run(0, &log, dir);
  std::printf("training complete: %d epochs, checkpoint %s\n", rc.train.epochs,
              (fs::path(dir) / "final.ckpt").string().c_str());
  return 0;
}

int cmd_eval(RunConfig rc, bool config_given, const std::string& ckpt, const std::string& data_dir,
             const std::string& out_dir, const std::string& split_name,
             const std::string& export_prefix, bool force) {
  // Without an explicit --config the run.cfg next to the checkpoint is
  // the authority, which is where train leaves it.
  if (!config_given) {
    vgsg::cli::load_config_file(rc, (fs::path(ckpt).parent_path() / "run.cfg").string());
  }
  vgsg::Dataset ds = vgsg::load_dataset(data_dir);
  vgsg::Trainer trainer(rc.enc, rc.train, ds, rc.hash());
  trainer.load_checkpoint(ckpt, force);

  vgsg::Split split = split_name == "train" ? vgsg::Split::kTrain : vgsg::Split::kTest;
  vgsg::RetrievalIndex index = vgsg::build_index(trainer.model(), ds, split);
  std::vector<vgsg::MetricsReport> reports = vgsg::evaluate_index(index);
  std::string lines;
  for (const vgsg::MetricsReport& r : reports) lines += r.line() + "\n";
  std::fputs(lines.c_str(), stdout);

  if (!out_dir.empty()) {
    std::string dir = out_path(out_dir);
    fs::create_directories(dir);
    write_text_file(fs::path(dir) / "metrics.txt", config_stamp(rc) + "\n" + lines);
  }
  if (!export_prefix.empty()) vgsg::export_embeddings(index, out_path(export_prefix));
  return 0;
}

int cmd_gradcheck(double step, double tol, const std::vector<std::string>& items, bool inject) {
  vgsg::SuiteOptions opt;
  opt.step = step;
  opt.tol = tol;
  opt.only = items;
  opt.flip_gelu_backward = inject;
  std::vector<vgsg::SuiteItem> suite = vgsg::run_gradcheck_suite(opt);
  if (suite.empty()) throw vgsg::ConfigError("no gradcheck items match the --items filters");

  for (const vgsg::SuiteItem& item : suite) {
    std::printf("== %s\n", item.name.c_str());
    std::fputs(item.report.summary().c_str(), stdout);
    std::printf("\n");
  }
  std::vector<std::string> failures = vgsg::suite_failures(suite);
  if (!failures.empty()) {
    std::string joined;
    for (const std::string& name : failures) joined += (joined.empty() ? "" : ", ") + name;
    std::fprintf(stderr, "gradcheck FAILED: %s\n", joined.c_str());
    return 6;
  }
  std::printf("gradcheck passed: %zu items within tolerance %g\n", suite.size(), tol);
  return 0;
}

int cmd_ablate(const RunConfig& rc, const std::string& data_dir, const std::string& out_dir,
               const std::string& suite, int seed_count, int jobs) {
  std::vector<vgsg::AblationSpec> specs;
  if (suite == "components") {
    for (const std::string& name : vgsg::variant_names()) {
      specs.push_back({name, vgsg::variant_options(name)});
    }
  } else {  // vgkt: the no-teacher row, then every transfer surface
    specs.push_back({"none", vgsg::variant_options("sgtl")});
    for (vgsg::TransferMode mode :
         {vgsg::TransferMode::kFeature, vgsg::TransferMode::kSimilarity,
          vgsg::TransferMode::kClassProb, vgsg::TransferMode::kBoth}) {
      vgsg::ModelOptions opts = vgsg::variant_options("full");
      opts.transfer = mode;
      specs.push_back({vgsg::transfer_mode_name(mode), opts});
    }
  }
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(seed_count));
  std::iota(seeds.begin(), seeds.end(), std::uint64_t{0});

  vgsg::Dataset ds = vgsg::load_dataset(data_dir);
  vgsg::AblationReport report = vgsg::ablation_report(rc.enc, rc.train, ds, specs, seeds, jobs);

  std::string grid = report.grid();
  std::fputs(grid.c_str(), stdout);
  if (!out_dir.empty()) {
    std::string dir = out_path(out_dir);
    fs::create_directories(dir);
    // The hash rides at the end of the CSV so the pinned header stays the
    // first line.
    write_text_file(fs::path(dir) / "ablation.csv", report.csv() + config_stamp(rc) + "\n");
    write_text_file(fs::path(dir) / "ablation.txt", config_stamp(rc) + "\n" + grid);
  }
  for (const vgsg::AblationRow& row : report.rows) {
    if (!row.failed) return 0;
  }
  throw vgsg::TrainingDivergenceError("every ablation variant failed to train");
}

int run(int argc, char** argv) {
  RunConfig rc;
  std::string config_path = config_path_from_argv(argc, argv);
  bool config_given = !config_path.empty();
  if (config_given) vgsg::cli::load_config_file(rc, config_path);

  CLI::App app{"Synthetic cross-modal retrieval workbench"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  std::string config_dummy;  // consumed by the pre-parse scan above
  std::vector<std::string> set_pairs;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_dummy, "Config file applied before flags");
    cmd->add_option("--set", set_pairs, "key=value override, applied after flags");
  };

  CLI::App* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  std::string gen_out;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Generation seed");
  gen->add_option("--identities", rc.data.train_identities, "Training identities");
  gen->add_option("--test-identities", rc.data.test_identities, "Held-out identities");
  gen->add_option("--samples-per-identity", rc.data.samples_per_identity, "Images per identity");
  gen->add_option("--parts", rc.data.k, "Attribute parts per identity");
  gen->add_option("--noise", rc.data.noise_level, "Pixel noise level");
  gen->add_option("--image-h", rc.data.image_h, "Image height");
  gen->add_option("--image-w", rc.data.image_w, "Image width");
  add_common(gen);

  CLI::App* train = app.add_subcommand("train", "Train a model on a generated dataset");
  std::string train_data, train_out, ablation_name, transfer_name;
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Run output directory")->required();
  train->add_option("--ablation", ablation_name, "Variant preset")
      ->check(CLI::IsMember(vgsg::variant_names()));
  train->add_option("--transfer", transfer_name, "Teacher transfer mode")
      ->check(CLI::IsMember({"none", "feature", "st", "cpt", "both"}));
  train->add_option("--epochs", rc.train.epochs, "Training epochs");
  train->add_option("--batch", rc.train.batch_size, "Batch size");
  train->add_option("--per-identity", rc.train.per_identity, "Samples per identity per batch");
  train->add_option("--lr", rc.train.base_lr, "Base learning rate");
  train->add_option("--text-lr", rc.train.text_lr, "Text branch learning rate");
  train->add_option("--decay-epoch", rc.train.decay_epoch, "Epoch the decay applies from");
  train->add_option("--lr-decay-factor", rc.train.lr_decay_factor, "Decay multiplier");
  train->add_option("--lambda1", rc.train.weights.lambda1, "Similarity transfer weight");
  train->add_option("--lambda2", rc.train.weights.lambda2, "Class transfer weight");
  train->add_option("--tau", rc.train.tau, "Relation matrix temperature");
  train->add_option("--grad-clip", rc.train.grad_clip_norm, "Gradient norm clip, <= 0 off");
  train->add_option("--seed", rc.train.seed, "Training seed");
  train->add_flag("--all-pairs", rc.train.all_pairs_negatives, "Sum all negative pairs");
  train->add_flag("--check-stop-gradient", rc.train.check_stop_gradient,
                  "Verify teacher gradients stay zero every step");
  add_common(train);

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_out, eval_split = "test", export_prefix;
  bool force = false;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--out", eval_out, "Directory for metrics.txt");
  eval->add_option("--split", eval_split, "Evaluation split")
      ->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--export-embeddings", export_prefix, "Prefix for .text.bin/.image.bin");
  eval->add_flag("--force", force, "Ignore config hash mismatch");
  eval->add_option("--config", config_dummy,
                   "Config file; defaults to run.cfg beside the checkpoint");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference verification suite");
  std::vector<std::string> gc_items;
  double gc_step = 1e-5, gc_tol = 1e-4;
  bool gc_inject = false;
  gradcheck->add_option("--items", gc_items, "Substring filters selecting suite items");
  gradcheck->add_option("--step", gc_step, "Central difference step");
  gradcheck->add_option("--tol", gc_tol, "Relative error tolerance");
  gradcheck->add_flag("--inject-backward-bug", gc_inject,
                      "Negate one activation backward rule as a negative control");

  CLI::App* ablate = app.add_subcommand("ablate", "Train and compare a variant suite");
  std::string ab_data, ab_out, ab_suite = "components";
  int ab_seeds = 3, ab_jobs = 1;
  ablate->add_option("--data", ab_data, "Dataset directory")->required();
  ablate->add_option("--out", ab_out, "Directory for ablation.csv/ablation.txt");
  ablate->add_option("--suite", ab_suite, "Variant suite")
      ->check(CLI::IsMember({"components", "vgkt"}));
  ablate->add_option("--seeds", ab_seeds, "Seed count, runs use seeds 0..N-1")
      ->check(CLI::PositiveNumber);
  ablate->add_option("--jobs", ab_jobs, "Parallel variant workers")->check(CLI::PositiveNumber);
  ablate->add_option("--epochs", rc.train.epochs, "Training epochs per run");
  ablate->add_option("--batch", rc.train.batch_size, "Batch size");
  ablate->add_option("--per-identity", rc.train.per_identity, "Samples per identity per batch");
  ablate->add_option("--lr", rc.train.base_lr, "Base learning rate");
  add_common(ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  apply_set_pairs(rc, set_pairs);
  if (train->parsed()) {
    if (!ablation_name.empty()) rc.train.model = vgsg::variant_options(ablation_name);
    if (!transfer_name.empty()) {
      rc.train.model.transfer = vgsg::transfer_mode_from_name(transfer_name);
    }
  }

  if (gen->parsed()) return cmd_gen(rc, gen_out, gen_seed);
  if (train->parsed()) return cmd_train(rc, train_data, train_out);
  if (eval->parsed()) {
    return cmd_eval(rc, config_given, eval_ckpt, eval_data, eval_out, eval_split, export_prefix,
                    force);
  }
  if (gradcheck->parsed()) return cmd_gradcheck(gc_step, gc_tol, gc_items, gc_inject);
  return cmd_ablate(rc, ab_data, ab_out, ab_suite, ab_seeds, ab_jobs);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const vgsg::VerificationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 6;
  } catch (const vgsg::IntegrityError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 5;
  } catch (const vgsg::ProtocolError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 5;
  } catch (const vgsg::TrainingDivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const vgsg::IngestionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const vgsg::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const vgsg::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const vgsg::SamplingError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const vgsg::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
