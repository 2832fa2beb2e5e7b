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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "vgsg/error.hpp"
#include "vgsg/losses.hpp"
#include "vgsg/vgkt.hpp"

using namespace vgsg;
using vgsg_test::check_grads;
using vgsg_test::rand_tensor;

TEST_CASE("loss weights reject non-positive or inverted margins") {
  LossWeights w;
  w.validate();
  CHECK(w.lambda1 == 4.0);
  CHECK(w.lambda2 == 0.25);
  CHECK(w.tau_p == 10.0);
  CHECK(w.tau_n == 40.0);
  CHECK(w.alpha == 0.6);
  CHECK(w.beta == 0.4);

  LossWeights bad = w;
  bad.lambda1 = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = w;
  bad.tau_n = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = w;
  bad.alpha = 0.4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = w;
  bad.alpha = 0.3;
  bad.beta = 0.4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("identity loss: uniform logits give ln N regardless of smoothing") {
  Graph g;
  for (int N : {2, 5, 11}) {
    Tensor logits = Tensor::full({3, N}, 0.7);
    for (double eps : {0.0, 0.1, 0.4}) {
      double got = scalar_of(id_loss(g.constant(logits), {0, 1, N - 1}, eps));
      CHECK(std::abs(got - std::log(static_cast<double>(N))) <= 1e-12);
    }
  }

  // Hand oracle: two classes, smoothing 0.1, probabilities (0.75, 0.25).
  Tensor l2({1, 2});
  l2.at(0, 0) = std::log(3.0);
  double oracle = -(0.9 * std::log(0.75) + 0.1 * std::log(0.25));
  CHECK(std::abs(scalar_of(id_loss(g.constant(l2), {0}, 0.1)) - oracle) <= 1e-12);

  // Confident correct prediction without smoothing drives the loss to 0.
  Tensor sharp({1, 2});
  sharp.at(0, 0) = 40.0;
  CHECK(scalar_of(id_loss(g.constant(sharp), {0}, 0.0)) <= 1e-12);

  CHECK_THROWS_AS(id_loss(g.constant(l2), {2}, 0.1), ValidationError);
}

TEST_CASE("contrastive loss hits the margin and saturation oracles") {
  Graph g;
  LossWeights w;

  // At the positive margin the positive term is exactly ln 2; same for the
  // negative margin, so this pair costs 2 ln 2.
  double got = scalar_of(contrastive_loss(g, {g.constant(Tensor::scalar(0.6))},
                                          {g.constant(Tensor::scalar(0.4))}, w));
  CHECK(std::abs(got - 2.0 * std::log(2.0)) <= 1e-12);

  // A well-separated pair: softplus(-10 * 0.4) + softplus(-40 * 1.4).
  double oracle = std::log1p(std::exp(-4.0)) + std::log1p(std::exp(-56.0));
  double got2 = scalar_of(contrastive_loss(g, {g.constant(Tensor::scalar(1.0))},
                                           {g.constant(Tensor::scalar(-1.0))}, w));
  CHECK(std::abs(got2 - oracle) <= 1e-12);

  // Mean over anchors.
  double got3 = scalar_of(contrastive_loss(
      g, {g.constant(Tensor::scalar(0.6)), g.constant(Tensor::scalar(1.0))},
      {g.constant(Tensor::scalar(0.4)), g.constant(Tensor::scalar(-1.0))}, w));
  CHECK(std::abs(got3 - 0.5 * (2.0 * std::log(2.0) + oracle)) <= 1e-12);

  CHECK_THROWS_AS(contrastive_loss(g, {}, {}, w), ValidationError);
  CHECK_THROWS_AS(
      contrastive_loss(g, {g.constant(Tensor::scalar(0.5))}, {}, w), ValidationError);

  // Monotone: raising a positive similarity lowers the loss, raising a
  // negative similarity raises it.
  for (double d : {0.05, 0.3}) {
    double base = scalar_of(contrastive_loss(g, {g.constant(Tensor::scalar(0.2))},
                                             {g.constant(Tensor::scalar(0.1))}, w));
    double pos_up = scalar_of(contrastive_loss(g, {g.constant(Tensor::scalar(0.2 + d))},
                                               {g.constant(Tensor::scalar(0.1))}, w));
    double neg_up = scalar_of(contrastive_loss(g, {g.constant(Tensor::scalar(0.2))},
                                               {g.constant(Tensor::scalar(0.1 + d))}, w));
    CHECK(pos_up < base);
    CHECK(neg_up > base);
  }
}

TEST_CASE("matrix mining picks the diagonal positive and hardest negative") {
  Graph g;
  LossWeights w;
  Rng rng(3);
  Tensor s = rand_tensor({4, 4}, rng);
  std::vector<int> ids = {0, 0, 1, 1};

  auto pos_term = [&](double v) { return std::log1p(std::exp(-w.tau_p * (v - w.alpha))); };
  auto neg_term = [&](double v) { return std::log1p(std::exp(w.tau_n * (v - w.beta))); };

  double hardest_oracle = 0.0, all_oracle = 0.0;
  for (int i = 0; i < 4; ++i) {
    hardest_oracle += pos_term(s.at(i, i));
    all_oracle += pos_term(s.at(i, i));
    double best = -1e300;
    for (int j = 0; j < 4; ++j) {
      if (ids[static_cast<std::size_t>(j)] == ids[static_cast<std::size_t>(i)]) continue;
      best = std::max(best, s.at(i, j));
      all_oracle += neg_term(s.at(i, j));
    }
    hardest_oracle += neg_term(best);
  }
  hardest_oracle /= 4.0;
  all_oracle /= 4.0;

  CHECK(std::abs(scalar_of(contrastive_from_matrix(g, g.constant(s), ids, w, false)) -
                 hardest_oracle) <= 1e-12);
  CHECK(std::abs(scalar_of(contrastive_from_matrix(g, g.constant(s), ids, w, true)) -
                 all_oracle) <= 1e-12);

  // Gradient flows only through the mined entries: the diagonal, the
  // hardest negatives, and nothing else.
  Parameter sims("s", s);
  sims.zero_grad();
  Graph g2;
  g2.backward(contrastive_from_matrix(g2, g2.leaf(sims), ids, w, false));
  for (int i = 0; i < 4; ++i) {
    int hardest = -1;
    for (int j = 0; j < 4; ++j) {
      if (ids[static_cast<std::size_t>(j)] == ids[static_cast<std::size_t>(i)]) continue;
      if (hardest < 0 || s.at(i, j) > s.at(i, hardest)) hardest = j;
    }
    for (int j = 0; j < 4; ++j) {
      bool mined = (j == i) || (j == hardest);
      if (mined) {
        CHECK(sims.grad.at(i, j) != 0.0);
      } else {
        CHECK(sims.grad.at(i, j) == 0.0);
      }
    }
  }

  CHECK_THROWS_AS(contrastive_from_matrix(g, g.constant(s), {0, 0, 0, 0}, w, false),
                  ValidationError);
  CHECK_THROWS_AS(contrastive_from_matrix(g, g.constant(s), {0, 1}, w, false), ValidationError);
  CHECK_THROWS_AS(contrastive_from_matrix(g, g.constant(rand_tensor({2, 3}, rng)), {0, 1}, w,
                                          false),
                  DimensionError);
}

TEST_CASE("total loss weights its parts and names a diverged term") {
  Graph g;
  LossWeights w;
  LossParts parts;
  parts.id = g.constant(Tensor::scalar(1.0));
  parts.contrast = g.constant(Tensor::scalar(2.0));
  parts.similarity_transfer = g.constant(Tensor::scalar(0.5));
  parts.class_transfer = g.constant(Tensor::scalar(0.8));
  CHECK(std::abs(scalar_of(total_loss(parts, w)) - 5.2) <= 1e-12);

  // Disabled transfer branches leave the baseline objective.
  LossParts base;
  base.id = parts.id;
  base.contrast = parts.contrast;
  CHECK(scalar_of(total_loss(base, w)) == 3.0);

  // Feature transfer substitutes for similarity transfer at the same
  // weight.
  LossParts ft;
  ft.id = parts.id;
  ft.contrast = parts.contrast;
  ft.feature_transfer = g.constant(Tensor::scalar(0.5));
  CHECK(std::abs(scalar_of(total_loss(ft, w)) - 5.0) <= 1e-12);

  LossParts missing;
  missing.id = parts.id;
  CHECK_THROWS_AS(total_loss(missing, w), ValidationError);

  LossParts diverged = parts;
  diverged.contrast = g.constant(Tensor::scalar(std::nan("")));
  CHECK_THROWS_WITH_AS(total_loss(diverged, w),
                       doctest::Contains("contrastive"), TrainingDivergenceError);
  LossParts inf_part = parts;
  inf_part.class_transfer = g.constant(Tensor::scalar(INFINITY));
  CHECK_THROWS_WITH_AS(total_loss(inf_part, w),
                       doctest::Contains("class-probability"), TrainingDivergenceError);
}

TEST_CASE("loss gradients pass the finite-difference oracle") {
  Rng rng(7);
  LossWeights w;
  Parameter logits("logits", rand_tensor({3, 4}, rng));
  Parameter sims("sims", rand_tensor({3, 3}, rng, -0.9, 0.9));
  Parameter srel("srel", rand_tensor({3, 3}, rng));
  Tensor trel = rand_tensor({3, 3}, rng);
  Tensor tprob_logits = rand_tensor({3, 4}, rng);
  Parameter sfeat("sfeat", rand_tensor({6}, rng));
  Tensor tfeat = rand_tensor({6}, rng);
  std::vector<int> labels = {0, 2, 3};
  std::vector<int> ids = {0, 1, 2};

  auto loss_fn = [&](bool all_pairs) {
    return [&, all_pairs](bool bp) {
      Graph g;
      LossParts parts;
      parts.id = id_loss(g.leaf(logits), labels, 0.1);
      parts.contrast = contrastive_from_matrix(g, g.leaf(sims), ids, w, all_pairs);
      parts.similarity_transfer =
          similarity_transfer_loss(softmax_rows(g.leaf(srel)), softmax_rows(g.constant(trel)));
      parts.class_transfer =
          kl_div_rows(detach(softmax_rows(g.constant(tprob_logits))), softmax_rows(g.leaf(logits)));
      parts.feature_transfer = mse(g.leaf(sfeat), g.constant(tfeat));
      Var l = total_loss(parts, w);
      if (bp) g.backward(l);
      return scalar_of(l);
    };
  };

  std::vector<Parameter*> ps = {&logits, &sims, &srel, &sfeat};
  check_grads(loss_fn(false), ps);
  check_grads(loss_fn(true), ps);
}
