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

#include "vgsg/sgtl.hpp"

#include "vgsg/error.hpp"
#include "vgsg/init.hpp"

namespace vgsg {

namespace {

Tensor xavier(std::vector<int> shape, Rng& rng, int fan_in, int fan_out) {
  Tensor t(std::move(shape));
  init_xavier(t, rng, fan_in, fan_out);
  return t;
}

}  // namespace

SemanticGroupModule::BlockLayer::BlockLayer(const std::string& prefix,
                                            const EncoderConfig& cfg, Rng& rng)
    : ln1_g(prefix + ".ln1.g", Tensor::full({cfg.C_T}, 1.0)),
      ln1_b(prefix + ".ln1.b", Tensor({cfg.C_T})),
      self_attn(prefix + ".self", cfg.C_T, cfg.heads, rng),
      ln2_g(prefix + ".ln2.g", Tensor::full({cfg.C_T}, 1.0)),
      ln2_b(prefix + ".ln2.b", Tensor({cfg.C_T})),
      cross_attn(prefix + ".cross", cfg.C_T, cfg.heads, rng),
      ln3_g(prefix + ".ln3.g", Tensor::full({cfg.C_T}, 1.0)),
      ln3_b(prefix + ".ln3.b", Tensor({cfg.C_T})),
      fc1_w(prefix + ".fc1.w",
            xavier({cfg.mlp_ratio * cfg.C_T, cfg.C_T}, rng, cfg.C_T, cfg.mlp_ratio * cfg.C_T)),
      fc1_b(prefix + ".fc1.b", Tensor({cfg.mlp_ratio * cfg.C_T})),
      fc2_w(prefix + ".fc2.w",
            xavier({cfg.C_T, cfg.mlp_ratio * cfg.C_T}, rng, cfg.mlp_ratio * cfg.C_T, cfg.C_T)),
      fc2_b(prefix + ".fc2.b", Tensor({cfg.C_T})) {}

SemanticGroupModule::SemanticGroupModule(const EncoderConfig& cfg, const SgtlOptions& opts,
                                         const std::string& prefix, Rng& rng)
    : cfg_(cfg), opts_(opts), bn_(opts.use_channel_group ? cfg.K * cfg.C_T : 1) {
  cfg_.validate();
  if (opts_.layers < 0) throw ConfigError("sgtl layer count must be nonnegative");
  int wide = cfg_.K * cfg_.C_T;
  if (opts_.use_channel_group) {
    proj_w_ = Parameter(prefix + ".proj.w", xavier({wide, cfg_.C_T}, rng, cfg_.C_T, wide));
    proj_b_ = Parameter(prefix + ".proj.b", Tensor({wide}));
    norm_g_ = Parameter(prefix + ".proj.norm.g", Tensor::full({wide}, 1.0));
    norm_b_ = Parameter(prefix + ".proj.norm.b", Tensor({wide}));
  }
  Tensor wq({cfg_.K, cfg_.C_T});
  init_normal(wq, rng, 0.02);
  word_queries_ = Parameter(prefix + ".wq", std::move(wq));
  for (int l = 0; l < opts_.layers; ++l) {
    layers_.emplace_back(prefix + ".layer" + std::to_string(l), cfg_, rng);
  }
  out_proj_.reserve(static_cast<std::size_t>(cfg_.K));
  for (int k = 0; k < cfg_.K; ++k) {
    out_proj_.emplace_back(prefix + ".out" + std::to_string(k) + ".w",
                           xavier({cfg_.C, cfg_.C_T}, rng, cfg_.C_T, cfg_.C));
  }
}

Var SemanticGroupModule::project_channels(Graph& g, Var token_rows, bool training) {
  if (!opts_.use_channel_group) {
    throw ConfigError("channel projection requested with channel grouping disabled");
  }
  Var lin = add_rows(matmul_nt(token_rows, g.leaf(proj_w_)), g.leaf(proj_b_));
  if (opts_.use_batch_norm) {
    return batch_norm_cols(lin, g.leaf(norm_g_), g.leaf(norm_b_), bn_, training, kLnEps);
  }
  return layer_norm_rows(lin, g.leaf(norm_g_), g.leaf(norm_b_), kLnEps);
}

std::vector<Var> SemanticGroupModule::split_groups(Var projected) const {
  if (!opts_.use_channel_group) {
    throw ConfigError("group split requested with channel grouping disabled");
  }
  const Tensor& t = projected.val();
  if (t.cols() != cfg_.K * cfg_.C_T) {
    throw DimensionError("projected width " + std::to_string(t.cols()) + ", expected " +
                         std::to_string(cfg_.K * cfg_.C_T));
  }
  std::vector<Var> out;
  out.reserve(static_cast<std::size_t>(cfg_.K));
  for (int k = 0; k < cfg_.K; ++k) {
    out.push_back(col_slice(projected, k * cfg_.C_T, (k + 1) * cfg_.C_T));
  }
  return out;
}

Var SemanticGroupModule::build_query(Graph& g, int k, Var eos_source) {
  if (k < 0 || k >= cfg_.K) {
    throw DimensionError("group index " + std::to_string(k) + " outside K = " +
                         std::to_string(cfg_.K));
  }
  Var w = row_slice(g.leaf(word_queries_), k, k + 1);
  if (!opts_.use_text_query) return w;
  Var eos = (opts_.use_channel_group && opts_.eos_per_group)
                ? col_slice(eos_source, k * cfg_.C_T, (k + 1) * cfg_.C_T)
                : eos_source;
  return add(w, eos);
}

Var SemanticGroupModule::refine_group(Graph& g, int k, Var query, Var group_rows,
                                      const std::vector<char>& mask, AttentionProbe* probe) {
  if (k < 0 || k >= cfg_.K) {
    throw DimensionError("group index " + std::to_string(k) + " outside K = " +
                         std::to_string(cfg_.K));
  }
  Var q = query;
  for (BlockLayer& layer : layers_) {
    Var nq = layer_norm_rows(q, g.leaf(layer.ln1_g), g.leaf(layer.ln1_b), kLnEps);
    q = add(q, layer.self_attn.forward(g, nq, nq, nq, {}, probe));
    Var nq2 = layer_norm_rows(q, g.leaf(layer.ln2_g), g.leaf(layer.ln2_b), kLnEps);
    // Keys and values are the raw group rows; only the query side is
    // normalized before the cross attention.
    q = add(q, layer.cross_attn.forward(g, nq2, group_rows, group_rows, mask, probe));
    Var nm = layer_norm_rows(q, g.leaf(layer.ln3_g), g.leaf(layer.ln3_b), kLnEps);
    Var h = gelu(add_rows(matmul_nt(nm, g.leaf(layer.fc1_w)), g.leaf(layer.fc1_b)));
    q = add(q, add_rows(matmul_nt(h, g.leaf(layer.fc2_w)), g.leaf(layer.fc2_b)));
  }
  return reshape(matmul_nt(q, g.leaf(out_proj_[static_cast<std::size_t>(k)])), {cfg_.C});
}

std::vector<Var> SemanticGroupModule::forward(Graph& g, const TextFeatureSequence& seq,
                                              bool training, AttentionProbe* probe) {
  int valid = seq.valid_count();
  Var rows = valid == seq.length() ? seq.features : row_slice(seq.features, 0, valid);
  if (seq.eos_index < 0 || seq.eos_index >= valid) {
    throw ValidationError("sequence EOS index " + std::to_string(seq.eos_index) +
                          " outside the valid prefix");
  }
  std::vector<Var> locals;
  locals.reserve(static_cast<std::size_t>(cfg_.K));
  if (opts_.use_channel_group) {
    Var projected = project_channels(g, rows, training);
    std::vector<Var> groups = split_groups(projected);
    Var eos_source = opts_.eos_per_group
                         ? row_slice(projected, seq.eos_index, seq.eos_index + 1)
                         : row_slice(rows, seq.eos_index, seq.eos_index + 1);
    for (int k = 0; k < cfg_.K; ++k) {
      Var q = build_query(g, k, eos_source);
      locals.push_back(refine_group(g, k, q, groups[static_cast<std::size_t>(k)], {}, probe));
    }
  } else {
    Var eos_source = row_slice(rows, seq.eos_index, seq.eos_index + 1);
    for (int k = 0; k < cfg_.K; ++k) {
      Var q = build_query(g, k, eos_source);
      locals.push_back(refine_group(g, k, q, rows, {}, probe));
    }
  }
  return locals;
}

std::vector<std::vector<Var>> SemanticGroupModule::forward_batch(
    Graph& g, const std::vector<const TextFeatureSequence*>& seqs, bool training,
    AttentionProbe* probe) {
  if (seqs.empty()) throw ValidationError("forward_batch needs at least one sequence");
  std::vector<std::vector<Var>> out;
  out.reserve(seqs.size());
  if (!opts_.use_channel_group) {
    for (const TextFeatureSequence* s : seqs) out.push_back(forward(g, *s, training, probe));
    return out;
  }

  std::vector<Var> prefixes;
  std::vector<int> offsets;
  int total = 0;
  for (const TextFeatureSequence* s : seqs) {
    int valid = s->valid_count();
    if (s->eos_index < 0 || s->eos_index >= valid) {
      throw ValidationError("sequence EOS index " + std::to_string(s->eos_index) +
                            " outside the valid prefix");
    }
    prefixes.push_back(valid == s->length() ? s->features : row_slice(s->features, 0, valid));
    offsets.push_back(total);
    total += valid;
  }
  Var projected_all =
      project_channels(g, prefixes.size() == 1 ? prefixes[0] : concat_rows(prefixes), training);

  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const TextFeatureSequence& seq = *seqs[i];
    int valid = seq.valid_count();
    Var projected = row_slice(projected_all, offsets[i], offsets[i] + valid);
    Var eos_source = opts_.eos_per_group
                         ? row_slice(projected, seq.eos_index, seq.eos_index + 1)
                         : row_slice(prefixes[i], seq.eos_index, seq.eos_index + 1);
    std::vector<Var> groups = split_groups(projected);
    std::vector<Var> locals;
    locals.reserve(static_cast<std::size_t>(cfg_.K));
    for (int k = 0; k < cfg_.K; ++k) {
      Var q = build_query(g, k, eos_source);
      locals.push_back(refine_group(g, k, q, groups[static_cast<std::size_t>(k)], {}, probe));
    }
    out.push_back(std::move(locals));
  }
  return out;
}

void SemanticGroupModule::collect(std::vector<Parameter*>& out) {
  if (opts_.use_channel_group) {
    for (Parameter* p : {&proj_w_, &proj_b_, &norm_g_, &norm_b_}) out.push_back(p);
  }
  out.push_back(&word_queries_);
  for (BlockLayer& layer : layers_) {
    out.push_back(&layer.ln1_g);
    out.push_back(&layer.ln1_b);
    layer.self_attn.collect(out);
    out.push_back(&layer.ln2_g);
    out.push_back(&layer.ln2_b);
    layer.cross_attn.collect(out);
    out.push_back(&layer.ln3_g);
    out.push_back(&layer.ln3_b);
    for (Parameter* p : {&layer.fc1_w, &layer.fc1_b, &layer.fc2_w, &layer.fc2_b}) {
      out.push_back(p);
    }
  }
  for (Parameter& p : out_proj_) out.push_back(&p);
}

LocalConvText::LocalConvText(const EncoderConfig& cfg, const std::string& prefix, Rng& rng)
    : cfg_(cfg) {
  cfg_.validate();
  groups_.reserve(static_cast<std::size_t>(cfg_.K));
  for (int k = 0; k < cfg_.K; ++k) {
    G grp;
    grp.w = Parameter(prefix + ".g" + std::to_string(k) + ".w",
                      xavier({cfg_.C, cfg_.C_T}, rng, cfg_.C_T, cfg_.C));
    grp.b = Parameter(prefix + ".g" + std::to_string(k) + ".b", Tensor({cfg_.C}));
    groups_.push_back(std::move(grp));
  }
}

std::vector<Var> LocalConvText::forward(Graph& g, const TextFeatureSequence& seq) {
  int valid = seq.valid_count();
  Var rows = valid == seq.length() ? seq.features : row_slice(seq.features, 0, valid);
  std::vector<Var> out;
  out.reserve(groups_.size());
  for (G& grp : groups_) {
    out.push_back(mean_rows(add_rows(matmul_nt(rows, g.leaf(grp.w)), g.leaf(grp.b))));
  }
  return out;
}

void LocalConvText::collect(std::vector<Parameter*>& out) {
  for (G& grp : groups_) {
    out.push_back(&grp.w);
    out.push_back(&grp.b);
  }
}

Var local_similarity(const std::vector<Var>& v_locals, const std::vector<Var>& t_locals) {
  if (v_locals.empty() || v_locals.size() != t_locals.size()) {
    throw ValidationError("local similarity needs matching nonempty lists, got " +
                          std::to_string(v_locals.size()) + " and " +
                          std::to_string(t_locals.size()));
  }
  return cosine(concat_vec(v_locals), concat_vec(t_locals));
}

}  // namespace vgsg
