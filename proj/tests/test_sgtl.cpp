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
#include <string>
#include <vector>

#include "test_util.hpp"
#include "vgsg/encoders.hpp"
#include "vgsg/error.hpp"
#include "vgsg/sgtl.hpp"

using namespace vgsg;
using vgsg_test::check_grads;
using vgsg_test::max_abs_diff;
using vgsg_test::rand_tensor;
using vgsg_test::weighted;

namespace {

EncoderConfig small_config() {
  EncoderConfig cfg;
  cfg.C = 8;
  cfg.C_T = 8;
  cfg.input_h = 8;
  cfg.input_w = 8;
  cfg.L_max = 8;
  cfg.vocab_size = 16;
  cfg.text_layers = 1;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.drop_path_rate = 0.0;
  cfg.K = 2;
  return cfg;
}

Parameter* find_param(std::vector<Parameter*>& ps, const std::string& needle) {
  for (Parameter* p : ps) {
    if (p->name.find(needle) != std::string::npos) return p;
  }
  return nullptr;
}

// Hand-built sequence wrapper around an existing features Var.
TextFeatureSequence make_seq(Var features, int valid) {
  TextFeatureSequence seq;
  seq.features = features;
  seq.mask.assign(static_cast<std::size_t>(features.val().rows()), 0);
  for (int i = 0; i < valid; ++i) seq.mask[static_cast<std::size_t>(i)] = 1;
  seq.eos_index = valid - 1;
  return seq;
}

}  // namespace

TEST_CASE("channel projection and group split round trip") {
  EncoderConfig cfg = small_config();
  Rng rng(1);
  SemanticGroupModule mod(cfg, SgtlOptions{}, "sgtl", rng);

  Tensor rows = rand_tensor({5, cfg.C_T}, rng);
  Graph g;
  Var projected = mod.project_channels(g, g.constant(rows), true);
  CHECK(projected.val().rows() == 5);
  CHECK(projected.val().cols() == cfg.K * cfg.C_T);

  std::vector<Var> groups = mod.split_groups(projected);
  REQUIRE(static_cast<int>(groups.size()) == cfg.K);
  for (const Var& grp : groups) CHECK(grp.val().cols() == cfg.C_T);
  Var packed = concat_cols(groups);
  CHECK(max_abs_diff(packed.val(), projected.val()) == 0.0);

  EncoderConfig one = cfg;
  one.K = 1;
  Rng rng2(2);
  SemanticGroupModule single(one, SgtlOptions{}, "sgtl", rng2);
  Graph g2;
  Var p1 = single.project_channels(g2, g2.constant(rows), true);
  std::vector<Var> g1 = single.split_groups(p1);
  REQUIRE(g1.size() == 1);
  CHECK(max_abs_diff(g1[0].val(), p1.val()) == 0.0);

  SgtlOptions off;
  off.use_channel_group = false;
  Rng rng3(3);
  SemanticGroupModule flat(cfg, off, "sgtl", rng3);
  Graph g3;
  CHECK_THROWS_AS(flat.project_channels(g3, g3.constant(rows), true), ConfigError);
  CHECK_THROWS_AS(flat.split_groups(g3.constant(rows)), ConfigError);
}

TEST_CASE("projection batch norm standardizes in training and replays in eval") {
  EncoderConfig cfg = small_config();
  Rng rng(7);
  SemanticGroupModule mod(cfg, SgtlOptions{}, "sgtl", rng);

  Tensor rows = rand_tensor({12, cfg.C_T}, rng);
  Graph g;
  Tensor train_out = mod.project_channels(g, g.constant(rows), true).val();
  int W = cfg.K * cfg.C_T;
  for (int c = 0; c < W; ++c) {
    double m = 0.0, v = 0.0;
    for (int r = 0; r < 12; ++r) m += train_out.at(r, c);
    m /= 12.0;
    for (int r = 0; r < 12; ++r) {
      double d = train_out.at(r, c) - m;
      v += d * d;
    }
    v /= 12.0;
    CHECK(std::abs(m) <= 1e-9);
    CHECK(std::abs(v - 1.0) <= 1e-3);
  }

  // The first training batch seeds the running statistics, so eval mode on
  // the same rows reproduces the training output exactly.
  Graph g2;
  Tensor eval_out = mod.project_channels(g2, g2.constant(rows), false).val();
  CHECK(max_abs_diff(train_out, eval_out) == 0.0);

  // Per-row normalization fallback: rows standardized individually.
  SgtlOptions ln;
  ln.use_batch_norm = false;
  Rng rng2(8);
  SemanticGroupModule lnmod(cfg, ln, "sgtl", rng2);
  Graph g3;
  Tensor ln_out = lnmod.project_channels(g3, g3.constant(rows), true).val();
  for (int r = 0; r < 12; ++r) {
    double m = 0.0;
    for (int c = 0; c < W; ++c) m += ln_out.at(r, c);
    CHECK(std::abs(m / W) <= 1e-9);
  }
}

TEST_CASE("text queries compose word query and EOS condition") {
  EncoderConfig cfg = small_config();
  Rng rng(11);
  SemanticGroupModule mod(cfg, SgtlOptions{}, "sgtl", rng);
  std::vector<Parameter*> ps;
  mod.collect(ps);
  Parameter* wq = find_param(ps, ".wq");
  REQUIRE(wq != nullptr);

  Tensor eos_row = rand_tensor({1, cfg.K * cfg.C_T}, rng);

  // Zero word queries: the query is exactly the group slice of the EOS row.
  Tensor saved = wq->value;
  wq->value.fill(0.0);
  Graph g;
  Var q1 = mod.build_query(g, 1, g.constant(eos_row));
  for (int c = 0; c < cfg.C_T; ++c) CHECK(q1.val()[c] == eos_row[cfg.C_T + c]);

  // Zero EOS feature: the query is exactly the word query row.
  wq->value = saved;
  Graph g2;
  Var q2 = mod.build_query(g2, 0, g2.constant(Tensor({1, cfg.K * cfg.C_T})));
  for (int c = 0; c < cfg.C_T; ++c) CHECK(q2.val()[c] == wq->value.at(0, c));

  // Additivity: doubling both doubles the query.
  Graph g3;
  Var base = mod.build_query(g3, 0, g3.constant(eos_row));
  for (std::int64_t i = 0; i < wq->value.size(); ++i) wq->value[i] *= 2.0;
  Tensor doubled_eos = eos_row;
  for (std::int64_t i = 0; i < doubled_eos.size(); ++i) doubled_eos[i] *= 2.0;
  Graph g4;
  Var twice = mod.build_query(g4, 0, g4.constant(doubled_eos));
  for (int c = 0; c < cfg.C_T; ++c) {
    CHECK(std::abs(twice.val()[c] - 2.0 * base.val()[c]) <= 1e-12);
  }
  wq->value = saved;

  // Word-query-only wiring ignores the EOS source entirely.
  SgtlOptions wq_only;
  wq_only.use_text_query = false;
  Rng rng2(12);
  SemanticGroupModule plain(cfg, wq_only, "sgtl", rng2);
  std::vector<Parameter*> ps2;
  plain.collect(ps2);
  Parameter* wq2 = find_param(ps2, ".wq");
  Graph g5;
  Var q5 = plain.build_query(g5, 1, Var{});
  for (int c = 0; c < cfg.C_T; ++c) CHECK(q5.val()[c] == wq2->value.at(1, c));

  // Broadcast conditioning uses the raw EOS row for every group.
  SgtlOptions bc;
  bc.eos_per_group = false;
  Rng rng3(13);
  SemanticGroupModule broad(cfg, bc, "sgtl", rng3);
  std::vector<Parameter*> ps3;
  broad.collect(ps3);
  Parameter* wq3 = find_param(ps3, ".wq");
  Tensor raw = rand_tensor({1, cfg.C_T}, rng);
  Graph g6;
  Var qa = broad.build_query(g6, 0, g6.constant(raw));
  Var qb = broad.build_query(g6, 1, g6.constant(raw));
  for (int c = 0; c < cfg.C_T; ++c) {
    CHECK(qa.val()[c] == wq3->value.at(0, c) + raw[c]);
    CHECK(qb.val()[c] == wq3->value.at(1, c) + raw[c]);
  }
}

TEST_CASE("group refinement ignores masked rows entirely") {
  EncoderConfig cfg = small_config();
  Rng rng(21);
  SgtlOptions opts;
  opts.layers = 1;
  SemanticGroupModule mod(cfg, opts, "sgtl", rng);

  Tensor rows = rand_tensor({6, cfg.C_T}, rng);
  Tensor query = rand_tensor({1, cfg.C_T}, rng);
  std::vector<char> mask = {1, 0, 1, 0, 1, 0};

  AttentionProbe probe;
  Graph g;
  Tensor out1 =
      mod.refine_group(g, 0, g.constant(query), g.constant(rows), mask, &probe).val();
  CHECK(out1.shape() == std::vector<int>{cfg.C});
  // Probe holds self then cross distributions per layer and head; the self
  // ones are singleton rows equal to exactly 1.
  bool saw_singleton = false, saw_masked = false;
  for (const Tensor& dist : probe.distributions) {
    if (dist.cols() == 1) {
      CHECK(dist[0] == 1.0);
      saw_singleton = true;
      continue;
    }
    saw_masked = true;
    for (int r = 0; r < dist.rows(); ++r) {
      double s = 0.0;
      for (int c = 0; c < dist.cols(); ++c) {
        if (!mask[static_cast<std::size_t>(c)]) CHECK(dist.at(r, c) == 0.0);
        s += dist.at(r, c);
      }
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
  }
  CHECK(saw_singleton);
  CHECK(saw_masked);

  // Rewriting the masked rows cannot move the output.
  Tensor scrambled = rows;
  for (int c = 0; c < cfg.C_T; ++c) {
    scrambled.at(1, c) = 1000.0 + c;
    scrambled.at(3, c) = -77.0 * c;
    scrambled.at(5, c) = 3.14 * (c + 1);
  }
  Graph g2;
  Tensor out2 = mod.refine_group(g2, 0, g2.constant(query), g2.constant(scrambled), mask).val();
  CHECK(max_abs_diff(out1, out2) == 0.0);

  // A single valid key receives all the attention exactly.
  std::vector<char> lone = {0, 0, 1, 0, 0, 0};
  AttentionProbe probe2;
  Graph g3;
  mod.refine_group(g3, 0, g3.constant(query), g3.constant(rows), lone, &probe2);
  for (const Tensor& dist : probe2.distributions) {
    if (dist.cols() != 6) continue;
    for (int c = 0; c < 6; ++c) CHECK(dist.at(0, c) == (c == 2 ? 1.0 : 0.0));
  }

  Graph g4;
  std::vector<char> none(6, 0);
  CHECK_THROWS_AS(mod.refine_group(g4, 0, g4.constant(query), g4.constant(rows), none),
                  DegenerateInputError);
}

TEST_CASE("zero refinement layers reduce to the projected query") {
  EncoderConfig cfg = small_config();
  Rng rng(31);
  SgtlOptions opts;
  opts.layers = 0;
  SemanticGroupModule mod(cfg, opts, "sgtl", rng);
  std::vector<Parameter*> ps;
  mod.collect(ps);
  Parameter* out1 = find_param(ps, ".out1.w");
  REQUIRE(out1 != nullptr);

  Tensor query = rand_tensor({1, cfg.C_T}, rng);
  Tensor rows = rand_tensor({4, cfg.C_T}, rng);
  Graph g;
  Tensor got = mod.refine_group(g, 1, g.constant(query), g.constant(rows), {}).val();
  Graph g2;
  Tensor expect =
      reshape(matmul_nt(g2.constant(query), g2.constant(out1->value)), {cfg.C}).val();
  CHECK(max_abs_diff(got, expect) == 0.0);
}

TEST_CASE("local similarity equals the flat dot-product oracle") {
  Rng rng(41);
  std::vector<Tensor> v, t;
  for (int k = 0; k < 3; ++k) {
    v.push_back(rand_tensor({5}, rng));
    t.push_back(rand_tensor({5}, rng));
  }
  double dot = 0.0, nv = 0.0, nt = 0.0;
  for (int k = 0; k < 3; ++k) {
    for (int i = 0; i < 5; ++i) {
      dot += v[k][i] * t[k][i];
      nv += v[k][i] * v[k][i];
      nt += t[k][i] * t[k][i];
    }
  }
  double expect = dot / (std::sqrt(nv) * std::sqrt(nt));

  Graph g;
  std::vector<Var> vv, tv;
  for (int k = 0; k < 3; ++k) {
    vv.push_back(g.constant(v[k]));
    tv.push_back(g.constant(t[k]));
  }
  CHECK(std::abs(scalar_of(local_similarity(vv, tv)) - expect) <= 1e-12);

  // Identical and antipodal concatenations hit the cosine extremes.
  CHECK(std::abs(scalar_of(local_similarity(vv, vv)) - 1.0) <= 1e-12);
  std::vector<Var> nvv;
  for (int k = 0; k < 3; ++k) nvv.push_back(scale(vv[k], -1.0));
  CHECK(std::abs(scalar_of(local_similarity(vv, nvv)) + 1.0) <= 1e-12);

  CHECK_THROWS_AS(local_similarity(vv, {tv[0]}), ValidationError);
  std::vector<Var> zeros = {g.constant(Tensor({5})), g.constant(Tensor({5})),
                            g.constant(Tensor({5}))};
  CHECK_THROWS_AS(local_similarity(vv, zeros), DegenerateInputError);
}

TEST_CASE("module forward: shapes, determinism, ablation parameter sets") {
  EncoderConfig cfg = small_config();
  Rng rng(51);
  TextEncoder enc(cfg, "text", rng);
  SemanticGroupModule mod(cfg, SgtlOptions{}, "sgtl", rng);

  Graph g;
  TextFeatureSequence seq = enc.encode(g, {3, 7, 2}, false, nullptr);
  AttentionProbe probe;
  std::vector<Var> locals = mod.forward(g, seq, false, &probe);
  REQUIRE(static_cast<int>(locals.size()) == cfg.K);
  for (const Var& l : locals) CHECK(l.val().shape() == std::vector<int>{cfg.C});
  for (const Tensor& dist : probe.distributions) {
    for (int r = 0; r < dist.rows(); ++r) {
      double s = 0.0;
      for (int c = 0; c < dist.cols(); ++c) s += dist.at(r, c);
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
  }

  Graph g2;
  TextFeatureSequence seq2 = enc.encode(g2, {3, 7, 2}, false, nullptr);
  std::vector<Var> locals2 = mod.forward(g2, seq2, false, nullptr);
  for (int k = 0; k < cfg.K; ++k) {
    CHECK(max_abs_diff(locals[static_cast<std::size_t>(k)].val(),
                       locals2[static_cast<std::size_t>(k)].val()) == 0.0);
  }

  // Channel-group ablation drops the projection parameters and nothing else
  // it shouldn't.
  std::vector<Parameter*> grouped;
  mod.collect(grouped);
  CHECK(find_param(grouped, ".proj.") != nullptr);
  SgtlOptions flat;
  flat.use_channel_group = false;
  Rng rng2(52);
  SemanticGroupModule flatmod(cfg, flat, "sgtl", rng2);
  std::vector<Parameter*> flatps;
  flatmod.collect(flatps);
  CHECK(find_param(flatps, ".proj.") == nullptr);
  CHECK(find_param(flatps, ".wq") != nullptr);
  Graph g3;
  std::vector<Var> flocals = flatmod.forward(g3, enc.encode(g3, {3, 7, 2}, false, nullptr), false);
  REQUIRE(static_cast<int>(flocals.size()) == cfg.K);
  for (const Var& l : flocals) CHECK(l.val().shape() == std::vector<int>{cfg.C});
}

TEST_CASE("local conv branch takes masked means of pointwise maps") {
  EncoderConfig cfg = small_config();
  Rng rng(61);
  LocalConvText conv(cfg, "localconv", rng);
  std::vector<Parameter*> ps;
  conv.collect(ps);
  Parameter* w0 = find_param(ps, ".g0.w");
  Parameter* b0 = find_param(ps, ".g0.b");
  REQUIRE(w0 != nullptr);

  Tensor feats = rand_tensor({6, cfg.C_T}, rng);
  Graph g;
  TextFeatureSequence seq = make_seq(g.constant(feats), 4);
  std::vector<Var> locals = conv.forward(g, seq);
  REQUIRE(static_cast<int>(locals.size()) == cfg.K);

  // Oracle: mean over the 4 valid rows of feats * W0^T + b0.
  for (int c = 0; c < cfg.C; ++c) {
    double acc = 0.0;
    for (int r = 0; r < 4; ++r) {
      double row = 0.0;
      for (int j = 0; j < cfg.C_T; ++j) row += feats.at(r, j) * w0->value.at(c, j);
      acc += row + b0->value[c];
    }
    acc /= 4.0;
    CHECK(std::abs(locals[0].val()[c] - acc) <= 1e-12);
  }

  // Rows past the valid prefix never contribute.
  Tensor scrambled = feats;
  for (int c = 0; c < cfg.C_T; ++c) scrambled.at(5, c) = 999.0;
  Graph g2;
  TextFeatureSequence seq2 = make_seq(g2.constant(scrambled), 4);
  std::vector<Var> locals2 = conv.forward(g2, seq2);
  CHECK(max_abs_diff(locals[0].val(), locals2[0].val()) == 0.0);
}

TEST_CASE("sgtl gradients pass the finite-difference oracle") {
  EncoderConfig cfg = small_config();
  Rng rng(71);

  // Shared fixtures: token rows as a parameter so input gradients are
  // checked too, and a fixed visual-side target for the similarity path.
  Parameter rows("rows", rand_tensor({4, cfg.C_T}, rng));
  std::vector<Tensor> vside;
  for (int k = 0; k < cfg.K; ++k) vside.push_back(rand_tensor({cfg.C}, rng));
  std::vector<Tensor> wk;
  for (int k = 0; k < cfg.K; ++k) wk.push_back(rand_tensor({cfg.C}, rng));

  auto module_loss = [&](SemanticGroupModule& mod, bool training) {
    return [&mod, &rows, &vside, &wk, training](bool bp) {
      Graph g;
      TextFeatureSequence seq = make_seq(g.leaf(rows), 4);
      std::vector<Var> locals = mod.forward(g, seq, training);
      Var l = weighted(g, locals[0], wk[0]);
      for (std::size_t k = 1; k < locals.size(); ++k) {
        l = add(l, weighted(g, locals[k], wk[k]));
      }
      std::vector<Var> vv;
      for (const Tensor& t : vside) vv.push_back(g.constant(t));
      l = add(l, local_similarity(vv, locals));
      if (bp) g.backward(l);
      return scalar_of(l);
    };
  };

  SgtlOptions opts;
  opts.layers = 1;
  SemanticGroupModule full(cfg, opts, "sgtl", rng);
  std::vector<Parameter*> ps;
  full.collect(ps);
  ps.push_back(&rows);
  check_grads(module_loss(full, true), ps);

  // Eval-mode batch norm: freeze statistics once, then differentiate with
  // them held constant.
  {
    Graph g;
    full.project_channels(g, g.leaf(rows), true);
  }
  check_grads(module_loss(full, false), ps);

  SgtlOptions ln = opts;
  ln.use_batch_norm = false;
  Rng rng2(72);
  SemanticGroupModule lnmod(cfg, ln, "sgtl", rng2);
  std::vector<Parameter*> lnps;
  lnmod.collect(lnps);
  lnps.push_back(&rows);
  check_grads(module_loss(lnmod, true), lnps);

  SgtlOptions flat = opts;
  flat.use_channel_group = false;
  Rng rng3(73);
  SemanticGroupModule flatmod(cfg, flat, "sgtl", rng3);
  std::vector<Parameter*> fps;
  flatmod.collect(fps);
  fps.push_back(&rows);
  check_grads(module_loss(flatmod, true), fps);

  Rng rng4(74);
  LocalConvText conv(cfg, "localconv", rng4);
  std::vector<Parameter*> cps;
  conv.collect(cps);
  cps.push_back(&rows);
  auto conv_loss = [&](bool bp) {
    Graph g;
    TextFeatureSequence seq = make_seq(g.leaf(rows), 4);
    std::vector<Var> locals = conv.forward(g, seq);
    Var l = weighted(g, locals[0], wk[0]);
    for (std::size_t k = 1; k < locals.size(); ++k) l = add(l, weighted(g, locals[k], wk[k]));
    if (bp) g.backward(l);
    return scalar_of(l);
  };
  check_grads(conv_loss, cps);
}
