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

// Wiring switches for the semantic-group branch.  Each one maps to an
// ablation axis: depth of the refinement stack, EOS conditioning of the
// queries, channel projection/grouping, and the normalization used inside
// the projection.
struct SgtlOptions {
  int layers = 2;
  bool use_text_query = true;     // queries = word query + EOS condition
  bool use_channel_group = true;  // project C_T -> K*C_T and split; off = shared rows
  bool eos_per_group = true;      // condition on group k's slice of the projected EOS
  bool use_batch_norm = true;     // projection norm over the batch; off = per-row norm
};

// Semantic-group local textual branch: channel projection with K-way
// grouping, one learned word query per group conditioned on the EOS
// feature, and a shared n-layer self+cross attention stack that distills
// each group into a C-dimensional local feature.
class SemanticGroupModule {
 public:
  SemanticGroupModule(const EncoderConfig& cfg, const SgtlOptions& opts,
                      const std::string& prefix, Rng& rng);

  // Linear C_T -> K*C_T over token rows followed by normalization.  In
  // training mode the batch-norm statistics come from these rows and fold
  // into the running ones, so a training caller must pass the whole
  // step's token rows in one call.
  Var project_channels(Graph& g, Var token_rows, bool training);

  // Channel split of a projected matrix into the K width-C_T groups.
  std::vector<Var> split_groups(Var projected) const;

  // Conditioned query for group k.  eos_source is the projected EOS row
  // (1 x K*C_T) when grouping with per-group conditioning, the raw EOS row
  // (1 x C_T) otherwise; ignored when EOS conditioning is off.
  Var build_query(Graph& g, int k, Var eos_source);

  // n-layer refinement of group k: self-attention over the query,
  // cross-attention into the group rows, MLP, all residual; then the
  // per-group C_T -> C output projection.  mask empty = every row valid.
  Var refine_group(Graph& g, int k, Var query, Var group_rows,
                   const std::vector<char>& mask, AttentionProbe* probe = nullptr);

  // Whole pipeline for one encoded sequence; returns the K local features.
  // Only the valid prefix of the sequence participates.
  std::vector<Var> forward(Graph& g, const TextFeatureSequence& seq, bool training,
                           AttentionProbe* probe = nullptr);

  // Same pipeline over a whole batch, with every sequence's valid rows
  // stacked into a single projection call so batch-norm statistics cover
  // the full step.  Returns one K-vector list per sequence, in order.
  std::vector<std::vector<Var>> forward_batch(Graph& g,
                                              const std::vector<const TextFeatureSequence*>& seqs,
                                              bool training, AttentionProbe* probe = nullptr);

  void collect(std::vector<Parameter*>& out);
  const SgtlOptions& options() const { return opts_; }
  BatchNormState& bn_state() { return bn_; }

 private:
  struct BlockLayer {
    Parameter ln1_g, ln1_b;
    MultiHeadAttention self_attn;
    Parameter ln2_g, ln2_b;
    MultiHeadAttention cross_attn;
    Parameter ln3_g, ln3_b;
    Parameter fc1_w, fc1_b, fc2_w, fc2_b;

    BlockLayer(const std::string& prefix, const EncoderConfig& cfg, Rng& rng);
  };

  EncoderConfig cfg_;
  SgtlOptions opts_;
  Parameter proj_w_, proj_b_, norm_g_, norm_b_;  // channel projection (when grouped)
  BatchNormState bn_;
  Parameter word_queries_;  // K x C_T
  std::vector<BlockLayer> layers_;
  std::vector<Parameter> out_proj_;  // per group, C x C_T
};

// Plain local text branch used by the conv-style ablation: a per-group
// pointwise linear map followed by the mean over valid token rows.
class LocalConvText {
 public:
  LocalConvText(const EncoderConfig& cfg, const std::string& prefix, Rng& rng);

  std::vector<Var> forward(Graph& g, const TextFeatureSequence& seq);
  void collect(std::vector<Parameter*>& out);

 private:
  struct G {
    Parameter w, b;
  };
  EncoderConfig cfg_;
  std::vector<G> groups_;
};

// Cosine similarity of the channel concatenations of two matching local
// feature lists (the K-group local similarity).
Var local_similarity(const std::vector<Var>& v_locals, const std::vector<Var>& t_locals);

}  // namespace vgsg
