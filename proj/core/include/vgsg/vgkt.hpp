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

#include <string>
#include <vector>

#include "vgsg/encoders.hpp"
#include "vgsg/graph.hpp"
#include "vgsg/rng.hpp"

namespace vgsg {

// Output of the pixel-to-word attention: one aggregated text-space row per
// pixel, plus the per-stripe pooled vectors used for the teacher-side local
// similarity.  Every per_pixel row is a convex combination of valid word
// features.
struct VisionGuidedTextFeatures {
  Var per_pixel;                       // (H*W) x C_T
  std::vector<Var> per_stripe_pooled;  // K vectors of length C_T
};

// Teacher branch: lets image pixels pick out the words that describe them
// and aggregates those words into vision-guided text features.  The branch
// is trained only by its own identity and contrastive losses; the transfer
// losses below detach it, so both parameters here carry the stop-gradient
// tag and every invocation is counted so the evaluator can prove the
// teacher never runs at inference.
class VisionGuidedTeacher {
 public:
  VisionGuidedTeacher(const EncoderConfig& cfg, const std::string& prefix, Rng& rng);

  // For each pixel row, attention over the valid words of the sequence
  // followed by weighted aggregation of their features.  Stripe pooling
  // averages the aggregated rows over each horizontal stripe's pixels.
  VisionGuidedTextFeatures attend(Graph& g, Var pixel_rows, const TextFeatureSequence& words,
                                  AttentionProbe* probe = nullptr);

  // Maps one pooled text-space vector into the visual feature space so the
  // teacher similarity compares like dimensions.
  Var project(Graph& g, Var pooled);

  // Cosine over the concatenation of the K stripe vectors, with the pooled
  // text side projected through this module.
  Var teacher_similarity(Graph& g, const std::vector<Var>& visual_locals,
                         const VisionGuidedTextFeatures& vt);

  void collect(std::vector<Parameter*>& out);
  long attention_calls() const { return attention_calls_; }
  void reset_attention_calls() { attention_calls_ = 0; }

 private:
  EncoderConfig cfg_;
  Parameter attn_w_;  // C_T x C, right-multiplies word features
  Parameter out_w_;   // C x C_T
  long attention_calls_ = 0;
};

// Row-wise softmax of similarities / tau over a square batch matrix.
Var relation_matrix(Var similarities, double tau);

// Mean over rows of KL(teacher || student).  The teacher matrix is detached
// here, at the loss boundary, so its branch never receives distillation
// gradient.
Var similarity_transfer_loss(Var student, Var teacher);

// Sum over groups of the row-averaged KL(teacher || student) between class
// probability matrices; teachers detached as above.
Var class_probability_transfer_loss(const std::vector<Var>& student,
                                    const std::vector<Var>& teacher);

// Mean squared distance between student features and detached teacher
// features, over the concatenation of all groups.
Var feature_transfer_loss(const std::vector<Var>& student, const std::vector<Var>& teacher);

}  // namespace vgsg
