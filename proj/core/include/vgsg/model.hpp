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
#include <memory>
#include <string>
#include <vector>

#include "vgsg/encoders.hpp"
#include "vgsg/graph.hpp"
#include "vgsg/rng.hpp"
#include "vgsg/sgtl.hpp"
#include "vgsg/vgkt.hpp"

namespace vgsg {

// Which distillation signal flows from the teacher branch to the
// semantic-group branch.
enum class TransferMode { kNone, kFeature, kSimilarity, kClassProb, kBoth };

const char* transfer_mode_name(TransferMode mode);
TransferMode transfer_mode_from_name(const std::string& name);  // ConfigError on unknown

// Structural switches selecting the model variant.  The local branch is
// either the plain per-group linear text head (use_local_conv) or the
// semantic-group block (use_sgtl); the teacher requires one of them since
// its similarity compares against the local visual features.
struct ModelOptions {
  bool use_local_conv = false;
  bool use_sgtl = true;
  bool use_vgkt = true;
  TransferMode transfer = TransferMode::kBoth;
  SgtlOptions sgtl;

  bool has_local_branch() const { return use_local_conv || use_sgtl; }
  void validate() const;  // ConfigError on contradictory switches
};

// Named presets: baseline (global only), local (conv-style text head),
// sgtl (semantic-group head), local+vgkt, full (sgtl + teacher).
ModelOptions variant_options(const std::string& name);  // ConfigError on unknown
std::vector<std::string> variant_names();

// One encoded image: the pixel-major feature rows plus the pooled global
// and per-stripe embeddings, all length C.
struct ImageEmbedding {
  Var pixel_rows;  // (H*W) x C
  Var global_feat;
  std::vector<Var> locals;  // K entries when the local branch exists
};

// One encoded caption: token features plus global and per-group local
// embeddings.  Locals are filled by attach_text_locals, not encode_text,
// because the grouped projection normalizes over the whole batch.
struct TextEmbedding {
  TextFeatureSequence seq;
  Var global_feat;
  std::vector<Var> locals;
};

// Full retrieval model: both encoders, the pooling heads, the optional
// local text branch, the optional teacher, and the identity classifiers.
// Construction is a pure function of (config, options, classes, seed); the
// per-module RNG streams are derived so shared modules initialize
// identically across variants.
class Model {
 public:
  Model(const EncoderConfig& cfg, const ModelOptions& opts, int num_classes, std::uint64_t seed);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  ImageEmbedding encode_image(Graph& g, const Tensor& image, AttentionProbe* probe = nullptr);
  TextEmbedding encode_text(Graph& g, const std::vector<int>& tokens, bool training,
                            Rng* droppath_rng, AttentionProbe* probe = nullptr);

  // Computes the local text features for every embedding in the batch in
  // one pass.  No-op for the global-only variant.
  void attach_text_locals(Graph& g, std::vector<TextEmbedding>& batch, bool training,
                          AttentionProbe* probe = nullptr);

  // Identity logits over a B x C feature matrix.
  Var classify_global(Graph& g, Var feats);
  Var classify_local(Graph& g, int k, Var feats);
  Var classify_teacher(Graph& g, int k, Var feats);  // ConfigError without teacher

  VisionGuidedTeacher* teacher() { return teacher_.get(); }
  SemanticGroupModule* sgtl() { return sgtl_.get(); }

  const EncoderConfig& config() const { return cfg_; }
  const ModelOptions& options() const { return opts_; }
  int num_classes() const { return num_classes_; }

  // Every parameter in a stable order (teacher-tagged ones included).
  std::vector<Parameter*> parameters();
  Parameter* find(const std::string& name);  // nullptr when absent

  long image_passes() const { return image_passes_; }
  long text_passes() const { return text_passes_; }
  void reset_pass_counters();

 private:
  EncoderConfig cfg_;
  ModelOptions opts_;
  int num_classes_;

  std::unique_ptr<VisualEncoder> visual_;
  std::unique_ptr<TextEncoder> text_;
  std::unique_ptr<AttentionPool> global_pool_;
  std::vector<AttentionPool> stripe_pools_;
  std::unique_ptr<SemanticGroupModule> sgtl_;
  std::unique_ptr<LocalConvText> local_text_;
  std::unique_ptr<VisionGuidedTeacher> teacher_;

  struct Classifier {
    Parameter w, b;  // w: N x C
  };
  Classifier cls_global_;
  std::vector<Classifier> cls_local_;
  std::vector<Classifier> cls_teacher_;

  long image_passes_ = 0;
  long text_passes_ = 0;
};

// Stacks C-vectors into a rows x C matrix (batch assembly helper).
Var stack_features(Graph& g, const std::vector<Var>& feats);

// Concatenates each sample's K local features into one row and stacks the
// rows; requires a nonempty equal-length list per sample.
Var stack_local_rows(Graph& g, const std::vector<std::vector<Var>>& locals);

}  // namespace vgsg
