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

#include <map>
#include <set>
#include <string>
#include <vector>

#include "test_util.hpp"
#include "vgsg/error.hpp"
#include "vgsg/model.hpp"

using namespace vgsg;
using vgsg_test::max_abs_diff;
using vgsg_test::rand_tensor;

namespace {

EncoderConfig small_config() {
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
  cfg.drop_path_rate = 0.0;
  cfg.K = 2;
  return cfg;
}

bool any_with_prefix(const std::vector<Parameter*>& params, const std::string& prefix) {
  for (const Parameter* p : params) {
    if (p->name.rfind(prefix, 0) == 0) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("variant presets expose exactly the advertised parameter groups") {
  EncoderConfig cfg = small_config();
  struct Expect {
    const char* variant;
    bool stripes, sgtl, localtext, teacher;
  };
  const Expect table[] = {
      {"baseline", false, false, false, false},
      {"local", true, false, true, false},
      {"sgtl", true, true, false, false},
      {"local+vgkt", true, false, true, true},
      {"full", true, true, false, true},
  };
  for (const Expect& e : table) {
    CAPTURE(e.variant);
    Model m(cfg, variant_options(e.variant), 6, 3);
    std::vector<Parameter*> params = m.parameters();
    CHECK(any_with_prefix(params, "visual."));
    CHECK(any_with_prefix(params, "text."));
    CHECK(any_with_prefix(params, "pool.global."));
    CHECK(any_with_prefix(params, "cls.global"));
    CHECK(any_with_prefix(params, "pool.stripe") == e.stripes);
    CHECK(any_with_prefix(params, "cls.local") == e.stripes);
    CHECK(any_with_prefix(params, "sgtl.") == e.sgtl);
    CHECK(any_with_prefix(params, "localtext.") == e.localtext);
    CHECK(any_with_prefix(params, "teacher.") == e.teacher);
    CHECK(any_with_prefix(params, "cls.teacher") == e.teacher);

    // The stop-gradient tag marks the teacher branch and nothing else.
    for (const Parameter* p : params) {
      bool teacher_side =
          p->name.rfind("teacher.", 0) == 0 || p->name.rfind("cls.teacher", 0) == 0;
      CHECK(p->stop_gradient_tag == teacher_side);
    }

    // Names are unique.
    std::set<std::string> names;
    for (const Parameter* p : params) CHECK(names.insert(p->name).second);
  }

  CHECK_THROWS_AS(variant_options("vgkt"), ConfigError);
  CHECK(variant_names().size() == 5);
}

TEST_CASE("option validation rejects contradictory wiring") {
  ModelOptions o;
  o.use_local_conv = true;
  o.use_sgtl = true;
  CHECK_THROWS_AS(o.validate(), ConfigError);

  o = ModelOptions{};
  o.use_sgtl = false;
  o.use_local_conv = false;
  o.use_vgkt = true;
  CHECK_THROWS_AS(o.validate(), ConfigError);

  o = ModelOptions{};
  o.use_vgkt = false;
  o.transfer = TransferMode::kBoth;
  CHECK_THROWS_AS(o.validate(), ConfigError);

  CHECK(transfer_mode_from_name("st") == TransferMode::kSimilarity);
  CHECK(transfer_mode_from_name("cpt") == TransferMode::kClassProb);
  for (TransferMode m : {TransferMode::kNone, TransferMode::kFeature, TransferMode::kSimilarity,
                         TransferMode::kClassProb, TransferMode::kBoth}) {
    CHECK(transfer_mode_from_name(transfer_mode_name(m)) == m);
  }
  CHECK_THROWS_AS(transfer_mode_from_name("distill"), ConfigError);
}

TEST_CASE("shared modules initialize identically across variants") {
  EncoderConfig cfg = small_config();
  Model baseline(cfg, variant_options("baseline"), 6, 11);
  Model full(cfg, variant_options("full"), 6, 11);

  std::map<std::string, Parameter*> base_params;
  for (Parameter* p : baseline.parameters()) base_params[p->name] = p;
  int shared = 0;
  for (Parameter* p : full.parameters()) {
    auto it = base_params.find(p->name);
    if (it == base_params.end()) continue;
    ++shared;
    CHECK(max_abs_diff(p->value, it->second->value) == 0.0);
  }
  CHECK(shared > 0);
}

TEST_CASE("encoding produces the documented shapes and counts passes") {
  EncoderConfig cfg = small_config();
  Model m(cfg, variant_options("full"), 6, 7);
  Graph g;
  Rng rng(5);
  Tensor image = rand_tensor({3, cfg.input_h, cfg.input_w}, rng, 0.0, 1.0);

  ImageEmbedding ie = m.encode_image(g, image);
  CHECK(ie.pixel_rows.val().dim(0) == cfg.feature_h() * cfg.feature_w());
  CHECK(ie.pixel_rows.val().dim(1) == cfg.C);
  CHECK(ie.global_feat.val().size() == cfg.C);
  REQUIRE(ie.locals.size() == static_cast<std::size_t>(cfg.K));
  for (const Var& v : ie.locals) CHECK(v.val().size() == cfg.C);

  std::vector<TextEmbedding> texts;
  texts.push_back(m.encode_text(g, {2, 3, 4}, false, nullptr));
  texts.push_back(m.encode_text(g, {5, 6}, false, nullptr));
  m.attach_text_locals(g, texts, false);
  for (const TextEmbedding& t : texts) {
    CHECK(t.global_feat.val().size() == cfg.C);
    REQUIRE(t.locals.size() == static_cast<std::size_t>(cfg.K));
    for (const Var& v : t.locals) CHECK(v.val().size() == cfg.C);
  }

  CHECK(m.image_passes() == 1);
  CHECK(m.text_passes() == 2);
  m.reset_pass_counters();
  CHECK(m.image_passes() == 0);
  CHECK(m.text_passes() == 0);

  // Baseline leaves locals empty and skips the batch pass entirely.
  Model b(cfg, variant_options("baseline"), 6, 7);
  Graph g2;
  ImageEmbedding be = b.encode_image(g2, image);
  CHECK(be.locals.empty());
  std::vector<TextEmbedding> bt;
  bt.push_back(b.encode_text(g2, {2, 3}, false, nullptr));
  b.attach_text_locals(g2, bt, false);
  CHECK(bt[0].locals.empty());
}

TEST_CASE("classifier heads map stacked features to one logit row per sample") {
  EncoderConfig cfg = small_config();
  const int N = 6;
  Model m(cfg, variant_options("full"), N, 9);
  Graph g;
  Rng rng(2);
  Var feats = g.constant(rand_tensor({3, cfg.C}, rng));

  for (Var logits : {m.classify_global(g, feats), m.classify_local(g, 1, feats),
                     m.classify_teacher(g, 0, feats)}) {
    CHECK(logits.val().dim(0) == 3);
    CHECK(logits.val().dim(1) == N);
  }
  CHECK_THROWS_AS(m.classify_local(g, cfg.K, feats), ConfigError);
  CHECK_THROWS_AS(m.classify_teacher(g, -1, feats), ConfigError);

  Model baseline(cfg, variant_options("baseline"), N, 9);
  CHECK_THROWS_AS(baseline.classify_teacher(g, 0, feats), ConfigError);
  CHECK_THROWS_AS(baseline.classify_local(g, 0, feats), ConfigError);
}

TEST_CASE("feature stacking helpers match manual assembly") {
  Graph g;
  Rng rng(4);
  Tensor a = rand_tensor({5}, rng), b = rand_tensor({5}, rng);
  Var m = stack_features(g, {g.constant(a), g.constant(b)});
  REQUIRE(m.val().dim(0) == 2);
  REQUIRE(m.val().dim(1) == 5);
  for (int c = 0; c < 5; ++c) {
    CHECK(m.val()[c] == a[c]);
    CHECK(m.val()[5 + c] == b[c]);
  }

  Tensor p = rand_tensor({3}, rng), q = rand_tensor({3}, rng);
  Var rows = stack_local_rows(g, {{g.constant(a), g.constant(p)}, {g.constant(b), g.constant(q)}});
  REQUIRE(rows.val().dim(0) == 2);
  REQUIRE(rows.val().dim(1) == 8);
  CHECK(rows.val()[5] == p[0]);
  CHECK(rows.val()[8 + 4] == b[4]);
  CHECK(rows.val()[8 + 7] == q[2]);

  CHECK_THROWS_AS(stack_features(g, {}), ValidationError);
  CHECK_THROWS_AS(stack_local_rows(g, {{g.constant(a)}, {g.constant(b), g.constant(q)}}),
                  ValidationError);
}

TEST_CASE("construction rejects bad class counts") {
  EncoderConfig cfg = small_config();
  CHECK_THROWS_AS(Model(cfg, variant_options("baseline"), 1, 0), ConfigError);
}
