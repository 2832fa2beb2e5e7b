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

#include "vgsg/losses.hpp"

#include <cmath>
#include <string>

#include "vgsg/error.hpp"

namespace vgsg {

void LossWeights::validate() const {
  if (lambda1 <= 0.0 || lambda2 <= 0.0 || tau_p <= 0.0 || tau_n <= 0.0 || alpha <= 0.0 ||
      beta <= 0.0 || eps <= 0.0) {
    throw ConfigError("loss weights must all be positive");
  }
  if (alpha <= beta) throw ConfigError("positive margin alpha must exceed negative margin beta");
}

Var id_loss(Var logits, const std::vector<int>& labels, double eps) {
  return softmax_cross_entropy(logits, labels, eps);
}

namespace {

Var positive_term(Var s, const LossWeights& w) {
  return softplus(scale(add_scalar(s, -w.alpha), -w.tau_p));
}

Var negative_term(Var s, const LossWeights& w) {
  return softplus(scale(add_scalar(s, -w.beta), w.tau_n));
}

}  // namespace

Var contrastive_loss(Graph& g, const std::vector<Var>& positives,
                     const std::vector<Var>& negatives, const LossWeights& w) {
  if (positives.empty() || positives.size() != negatives.size()) {
    throw ValidationError("contrastive loss needs one positive and one negative per anchor");
  }
  Var total = g.constant(Tensor::scalar(0.0));
  for (std::size_t i = 0; i < positives.size(); ++i) {
    Var pos = reshape(positives[i], {1});
    Var neg = reshape(negatives[i], {1});
    total = add(total, add(positive_term(pos, w), negative_term(neg, w)));
  }
  return scale(total, 1.0 / static_cast<double>(positives.size()));
}

Var contrastive_from_matrix(Graph& g, Var similarities, const std::vector<int>& identities,
                            const LossWeights& w, bool all_pairs) {
  // Copied, not referenced: adding nodes below may reallocate the tape this
  // value lives on.
  Tensor s = similarities.val();
  if (s.rank() != 2 || s.rows() != s.cols()) {
    throw DimensionError("contrastive mining needs a square similarity matrix");
  }
  int B = s.rows();
  if (B == 0) throw ValidationError("contrastive loss over an empty batch");
  if (static_cast<int>(identities.size()) != B) {
    throw ValidationError("identity labels must cover every batch row");
  }

  Var total = g.constant(Tensor::scalar(0.0));
  for (int i = 0; i < B; ++i) {
    Var pos = gather_entries(similarities, {{i, i}});
    Var anchor = positive_term(pos, w);

    if (all_pairs) {
      bool any = false;
      for (int j = 0; j < B; ++j) {
        if (identities[static_cast<std::size_t>(j)] == identities[static_cast<std::size_t>(i)])
          continue;
        any = true;
        Var neg = gather_entries(similarities, {{i, j}});
        anchor = add(anchor, negative_term(neg, w));
      }
      if (!any) {
        throw ValidationError("anchor " + std::to_string(i) + " has no cross-identity negative");
      }
    } else {
      int hardest = -1;
      for (int j = 0; j < B; ++j) {
        if (identities[static_cast<std::size_t>(j)] == identities[static_cast<std::size_t>(i)])
          continue;
        if (hardest < 0 || s.at(i, j) > s.at(i, hardest)) hardest = j;
      }
      if (hardest < 0) {
        throw ValidationError("anchor " + std::to_string(i) + " has no cross-identity negative");
      }
      Var neg = gather_entries(similarities, {{i, hardest}});
      anchor = add(anchor, negative_term(neg, w));
    }
    total = add(total, anchor);
  }
  return scale(total, 1.0 / static_cast<double>(B));
}

namespace {

void require_finite(Var part, const char* name) {
  if (!part.valid()) return;
  double v = scalar_of(part);
  if (!std::isfinite(v)) {
    throw TrainingDivergenceError(std::string(name) + " loss is not finite");
  }
}

}  // namespace

Var total_loss(const LossParts& parts, const LossWeights& w) {
  if (!parts.id.valid() || !parts.contrast.valid()) {
    throw ValidationError("total loss needs the identity and contrastive parts");
  }
  require_finite(parts.id, "identity");
  require_finite(parts.contrast, "contrastive");
  require_finite(parts.similarity_transfer, "similarity-transfer");
  require_finite(parts.class_transfer, "class-probability-transfer");
  require_finite(parts.feature_transfer, "feature-transfer");

  Var total = add(reshape(parts.id, {1}), reshape(parts.contrast, {1}));
  if (parts.similarity_transfer.valid()) {
    total = add(total, scale(reshape(parts.similarity_transfer, {1}), w.lambda1));
  }
  if (parts.feature_transfer.valid()) {
    total = add(total, scale(reshape(parts.feature_transfer, {1}), w.lambda1));
  }
  if (parts.class_transfer.valid()) {
    total = add(total, scale(reshape(parts.class_transfer, {1}), w.lambda2));
  }
  return total;
}

}  // namespace vgsg
