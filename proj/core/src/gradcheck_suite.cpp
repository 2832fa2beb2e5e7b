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

#include "vgsg/gradcheck_suite.hpp"

#include <utility>

#include "vgsg/synthdata.hpp"
#include "vgsg/trainer.hpp"

namespace vgsg {

namespace {

// Verification scale: small enough that exhaustive per-coordinate central
// differences over all variants finish in well under a minute.
EncoderConfig suite_encoder() {
  EncoderConfig cfg;
  cfg.C = 8;
  cfg.C_T = 8;
  cfg.input_h = 8;
  cfg.input_w = 8;
  cfg.L_max = 12;
  cfg.vocab_size = 32;
  cfg.text_layers = 1;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.drop_path_rate = 0.1;
  cfg.K = 2;
  return cfg;
}

DatasetConfig suite_data() {
  DatasetConfig dc;
  dc.k = 2;
  dc.image_h = 8;
  dc.image_w = 8;
  dc.train_identities = 4;
  dc.test_identities = 2;
  dc.samples_per_identity = 2;
  dc.noise_level = 0.05;
  return dc;
}

struct ItemSpec {
  std::string name;
  ModelOptions options;
};

std::vector<ItemSpec> item_specs() {
  std::vector<ItemSpec> specs;
  for (const std::string& name : variant_names()) {
    specs.push_back({"step-loss " + name, variant_options(name)});
  }
  ModelOptions feature = variant_options("full");
  feature.transfer = TransferMode::kFeature;
  specs.push_back({"step-loss full feature-transfer", feature});
  return specs;
}

class FlipGuard {
 public:
  explicit FlipGuard(bool enable) : saved_(debug::flip_gelu_backward) {
    if (enable) debug::flip_gelu_backward = true;
  }
  ~FlipGuard() { debug::flip_gelu_backward = saved_; }

 private:
  bool saved_;
};

bool selected(const std::string& name, const std::vector<std::string>& only) {
  if (only.empty()) return true;
  for (const std::string& needle : only) {
    if (name.find(needle) != std::string::npos) return true;
  }
  return false;
}

}  // namespace

std::vector<std::string> gradcheck_suite_names() {
  std::vector<std::string> names;
  for (const ItemSpec& spec : item_specs()) names.push_back(spec.name);
  return names;
}

std::vector<SuiteItem> run_gradcheck_suite(const SuiteOptions& options) {
  FlipGuard flip(options.flip_gelu_backward);
  Dataset ds = generate_dataset(101, suite_data());

  std::vector<SuiteItem> items;
  for (const ItemSpec& spec : item_specs()) {
    if (!selected(spec.name, options.only)) continue;
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.decay_epoch = 0;
    cfg.batch_size = 4;
    cfg.per_identity = 2;
    cfg.seed = 5;
    cfg.model = spec.options;
    Trainer trainer(suite_encoder(), cfg, ds, 0);
    Rng rng(7);
    Batch batch = sample_batch(ds, rng, cfg.batch_size, cfg.per_identity);
    // The transfer targets are constants of the loss by contract, so they
    // are frozen at the base point before differencing.
    TransferTargets targets = trainer.capture_transfer_targets(batch);
    LossFn loss = [&trainer, &batch, &targets](bool backprop) {
      return trainer.eval_loss(batch, backprop, &targets);
    };
    SuiteItem item;
    item.name = spec.name;
    item.report = grad_check(loss, trainer.model().parameters(), options.step, options.tol);
    items.push_back(std::move(item));
  }
  return items;
}

bool suite_passed(const std::vector<SuiteItem>& items) {
  for (const SuiteItem& item : items) {
    if (!item.report.passed()) return false;
  }
  return true;
}

std::vector<std::string> suite_failures(const std::vector<SuiteItem>& items) {
  std::vector<std::string> out;
  for (const SuiteItem& item : items) {
    if (!item.report.passed()) out.push_back(item.name);
  }
  return out;
}

}  // namespace vgsg
