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

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "vgsg/losses.hpp"
#include "vgsg/model.hpp"
#include "vgsg/synthdata.hpp"

namespace vgsg {

// Optimization schedule and batch shape.  The learning rate steps down
// once: lr(epoch) = base_lr * decay_factor^[epoch >= decay_epoch].  The
// text encoder can run at its own rate (text_lr < 0 follows base_lr).
struct TrainConfig {
  int epochs = 30;
  double base_lr = 3.5e-4;
  double text_lr = -1.0;
  double lr_decay_factor = 0.1;
  int decay_epoch = 24;
  int batch_size = 32;
  int per_identity = 4;
  double grad_clip_norm = 5.0;  // <= 0 turns clipping off
  double tau = 4.0;             // relation matrix temperature
  bool all_pairs_negatives = false;
  // Re-runs backward over the distillation terms alone each step and
  // verifies every teacher-tagged gradient is exactly zero.
  bool check_stop_gradient = false;
  std::uint64_t seed = 0;
  LossWeights weights;
  ModelOptions model;

  double lr_at(int epoch) const;
  double text_lr_at(int epoch) const;
  void validate() const;  // ConfigError naming the offending field
};

// Loss parts averaged per step; lr is the rate the step used.
struct StepStats {
  double id = 0.0;
  double contrast = 0.0;
  double similarity_transfer = 0.0;
  double class_transfer = 0.0;
  double feature_transfer = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

struct EpochStats {
  int epoch = 0;
  StepStats mean;
  long steps = 0;
  double wall_seconds = 0.0;

  // One line-delimited log record, key=value pairs.
  std::string line() const;
};

// Teacher-side transfer targets copied out as plain values at one point
// in parameter space.  Empty for variants without a teacher.
struct TransferTargets {
  Tensor sv;                                        // teacher pair similarities
  std::vector<Tensor> teacher_probs;                // per stripe
  std::vector<std::vector<Tensor>> teacher_locals;  // per sample, per stripe
};

// Adaptive-moment update state, one slot pair per parameter.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

// Deterministic training loop.  All randomness flows through two streams
// derived from the config seed (batch sampling and stochastic depth), both
// captured by checkpoints so a resumed run replays the uninterrupted one
// bit for bit.
class Trainer {
 public:
  // Validates both configs and checks the dataset fits them (image shape,
  // vocabulary capacity); ConfigError otherwise.
  Trainer(const EncoderConfig& enc, const TrainConfig& cfg, const Dataset& ds,
          std::uint64_t config_hash);

  // One optimization step at the given epoch's learning rate.
  StepStats step(const Batch& batch, int epoch);

  // The step loss in evaluation mode (no dropout-path draws, frozen batch
  // statistics), without touching the optimizer.  Deterministic in the
  // parameter values, which makes it a valid finite-difference target;
  // backprop additionally leaves gradients in the parameters.
  //
  // The transfer losses treat the teacher side as a constant.  A frozen
  // target set makes that contract explicit: finite differences over the
  // frozen loss see exactly the dependence the analytic gradient keeps.
  double eval_loss(const Batch& batch, bool backprop,
                   const TransferTargets* frozen = nullptr);
  TransferTargets capture_transfer_targets(const Batch& batch);

  // Epochs [start_epoch, epochs).  Writes one log record per epoch to the
  // stream when given; writes last/best/final checkpoints under
  // checkpoint_dir when nonempty.  A nonnegative stop_epoch ends the loop
  // early without writing final.ckpt, as an interrupted run would.
  std::vector<EpochStats> run(int start_epoch = 0, std::ostream* log = nullptr,
                              const std::string& checkpoint_dir = "", int stop_epoch = -1);

  void save_checkpoint(const std::string& path, int next_epoch) const;
  // Restores parameters, moments and RNG streams; returns the next epoch.
  // IntegrityError on malformed files or config-hash mismatch (the latter
  // suppressed by ignore_hash).
  int load_checkpoint(const std::string& path, bool ignore_hash = false);

  Model& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  const Dataset& dataset() const { return ds_; }
  std::uint64_t config_hash() const { return config_hash_; }
  long steps_per_epoch() const;

 private:
  Var build_step(Graph& g, const Batch& batch, bool training, LossParts& parts,
                 const TransferTargets* fixed = nullptr, TransferTargets* captured = nullptr);
  StepStats step_impl(const Batch& batch, int epoch);
  void apply_update(int epoch);

  TrainConfig cfg_;
  const Dataset& ds_;
  std::uint64_t config_hash_;
  Model model_;
  std::vector<Parameter*> params_;
  AdamState adam_;
  Rng sample_rng_;
  Rng droppath_rng_;
  double best_loss_ = 0.0;
  bool has_best_ = false;
};

// Stable 64-bit FNV-1a of a text, used to stamp configs into artifacts.
std::uint64_t fnv1a64(const std::string& text);

}  // namespace vgsg
