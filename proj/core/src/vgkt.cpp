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

#include "vgsg/vgkt.hpp"

#include <string>
#include <vector>

#include "vgsg/error.hpp"
#include "vgsg/init.hpp"
#include "vgsg/sgtl.hpp"

namespace vgsg {

VisionGuidedTeacher::VisionGuidedTeacher(const EncoderConfig& cfg, const std::string& prefix,
                                         Rng& rng)
    : cfg_(cfg),
      attn_w_(prefix + ".attn.w", Tensor({cfg.C_T, cfg.C})),
      out_w_(prefix + ".out.w", Tensor({cfg.C, cfg.C_T})) {
  cfg.validate();
  init_xavier(attn_w_.value, rng, cfg.C_T, cfg.C);
  init_xavier(out_w_.value, rng, cfg.C_T, cfg.C);
  attn_w_.stop_gradient_tag = true;
  out_w_.stop_gradient_tag = true;
}

VisionGuidedTextFeatures VisionGuidedTeacher::attend(Graph& g, Var pixel_rows,
                                                     const TextFeatureSequence& words,
                                                     AttentionProbe* probe) {
  const Tensor& px = pixel_rows.val();
  int P = cfg_.feature_h() * cfg_.feature_w();
  if (px.rank() != 2 || px.rows() != P || px.cols() != cfg_.C) {
    throw DimensionError("vision-guided attention expects " + std::to_string(P) + " x " +
                         std::to_string(cfg_.C) + " pixel rows");
  }
  int valid = words.valid_count();
  if (valid <= 0) throw DegenerateInputError("vision-guided attention over no valid words");

  ++attention_calls_;
  Var word_rows = row_slice(words.features, 0, valid);
  Var scores = matmul_nt(pixel_rows, matmul(word_rows, g.leaf(attn_w_)));
  Var alpha = softmax_rows(scores);
  if (probe != nullptr) probe->distributions.push_back(alpha.val());

  VisionGuidedTextFeatures vt;
  vt.per_pixel = matmul(alpha, word_rows);
  for (Var stripe :
       partition_stripe_rows(vt.per_pixel, cfg_.feature_h(), cfg_.feature_w(), cfg_.K)) {
    vt.per_stripe_pooled.push_back(mean_rows(stripe));
  }
  return vt;
}

Var VisionGuidedTeacher::project(Graph& g, Var pooled) {
  return reshape(matmul_nt(reshape(pooled, {1, cfg_.C_T}), g.leaf(out_w_)), {cfg_.C});
}

Var VisionGuidedTeacher::teacher_similarity(Graph& g, const std::vector<Var>& visual_locals,
                                            const VisionGuidedTextFeatures& vt) {
  std::vector<Var> projected;
  projected.reserve(vt.per_stripe_pooled.size());
  for (Var pooled : vt.per_stripe_pooled) projected.push_back(project(g, pooled));
  return local_similarity(visual_locals, projected);
}

void VisionGuidedTeacher::collect(std::vector<Parameter*>& out) {
  out.push_back(&attn_w_);
  out.push_back(&out_w_);
}

Var relation_matrix(Var similarities, double tau) {
  if (tau <= 0.0) throw ConfigError("relation temperature must be positive");
  const Tensor& s = similarities.val();
  if (s.rank() != 2 || s.rows() != s.cols()) {
    throw DimensionError("relation matrix needs a square similarity matrix");
  }
  return softmax_rows(scale(similarities, 1.0 / tau));
}

Var similarity_transfer_loss(Var student, Var teacher) {
  const Tensor& ts = student.val();
  if (ts.rank() != 2 || ts.rows() != ts.cols()) {
    throw DimensionError("similarity transfer needs square relation matrices");
  }
  return kl_div_rows(detach(teacher), student);
}

Var class_probability_transfer_loss(const std::vector<Var>& student,
                                    const std::vector<Var>& teacher) {
  if (student.empty() || student.size() != teacher.size()) {
    throw ValidationError("class probability transfer needs matching group counts");
  }
  Var total = kl_div_rows(detach(teacher[0]), student[0]);
  for (std::size_t k = 1; k < student.size(); ++k) {
    total = add(total, kl_div_rows(detach(teacher[k]), student[k]));
  }
  return total;
}

Var feature_transfer_loss(const std::vector<Var>& student, const std::vector<Var>& teacher) {
  if (student.empty() || student.size() != teacher.size()) {
    throw ValidationError("feature transfer needs matching group counts");
  }
  return mse(concat_vec(student), detach(concat_vec(teacher)));
}

}  // namespace vgsg
