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

#include <vector>

#include "vgsg/graph.hpp"

namespace vgsg {

// Scalar knobs of the objective.  alpha/beta are the positive and negative
// similarity margins, tau_p/tau_n their slopes, lambda1/lambda2 the
// transfer-loss weights, eps the label-smoothing mass.
struct LossWeights {
  double lambda1 = 4.0;
  double lambda2 = 0.25;
  double tau_p = 10.0;
  double tau_n = 40.0;
  double alpha = 0.6;
  double beta = 0.4;
  double eps = 0.1;

  void validate() const;  // all positive, alpha > beta
};

// Cross entropy against label-smoothed targets.
Var id_loss(Var logits, const std::vector<int>& labels, double eps);

// Margin contrastive loss over already-mined per-anchor similarity pairs:
// the mean over anchors of softplus(-tau_p (S+ - alpha)) +
// softplus(tau_n (S- - beta)).
Var contrastive_loss(Graph& g, const std::vector<Var>& positives,
                     const std::vector<Var>& negatives, const LossWeights& w);

// Mines pairs from a square similarity matrix whose row i and column i hold
// the matched image/text sample of the same identity: the positive of
// anchor i is entry (i, i); negatives are the entries whose column identity
// differs.  With all_pairs false only the hardest (largest) negative per
// anchor contributes; with all_pairs true every cross-identity entry adds
// its own negative term.
Var contrastive_from_matrix(Graph& g, Var similarities, const std::vector<int>& identities,
                            const LossWeights& w, bool all_pairs = false);

// Named summands of the training objective.  id and contrast are required;
// the transfer terms may be left invalid when their branch is disabled.
// feature_transfer shares lambda1 with similarity_transfer since it
// replaces it in the corresponding ablation.
struct LossParts {
  Var id;
  Var contrast;
  Var similarity_transfer;
  Var class_transfer;
  Var feature_transfer;
};

// id + contrast + lambda1 * (similarity or feature transfer) +
// lambda2 * class transfer.  A non-finite part aborts training with an
// error naming the term.
Var total_loss(const LossParts& parts, const LossWeights& w);

}  // namespace vgsg
