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

#include "vgsg/model.hpp"

#include <utility>

#include "vgsg/error.hpp"
#include "vgsg/init.hpp"

namespace vgsg {

const char* transfer_mode_name(TransferMode mode) {
  switch (mode) {
    case TransferMode::kNone:
      return "none";
    case TransferMode::kFeature:
      return "feature";
    case TransferMode::kSimilarity:
      return "st";
    case TransferMode::kClassProb:
      return "cpt";
    case TransferMode::kBoth:
      return "both";
  }
  throw ConfigError("unknown transfer mode value");
}

TransferMode transfer_mode_from_name(const std::string& name) {
  if (name == "none") return TransferMode::kNone;
  if (name == "feature") return TransferMode::kFeature;
  if (name == "st") return TransferMode::kSimilarity;
  if (name == "cpt") return TransferMode::kClassProb;
  if (name == "both") return TransferMode::kBoth;
  throw ConfigError("unknown transfer mode '" + name +
                    "' (expected none, feature, st, cpt or both)");
}

void ModelOptions::validate() const {
  if (use_local_conv && use_sgtl) {
    throw ConfigError("use_local_conv and use_sgtl are alternative local text branches");
  }
  if (use_vgkt && !has_local_branch()) {
    throw ConfigError("the teacher needs a local branch to compare against");
  }
  if (!use_vgkt && transfer != TransferMode::kNone) {
    throw ConfigError("transfer mode without the teacher branch");
  }
}

ModelOptions variant_options(const std::string& name) {
  ModelOptions o;
  o.use_local_conv = false;
  o.use_sgtl = false;
  o.use_vgkt = false;
  o.transfer = TransferMode::kNone;
  if (name == "baseline") return o;
  if (name == "local") {
    o.use_local_conv = true;
    return o;
  }
  if (name == "sgtl") {
    o.use_sgtl = true;
    return o;
  }
  if (name == "local+vgkt") {
    o.use_local_conv = true;
    o.use_vgkt = true;
    o.transfer = TransferMode::kBoth;
    return o;
  }
  if (name == "full") {
    o.use_sgtl = true;
    o.use_vgkt = true;
    o.transfer = TransferMode::kBoth;
    return o;
  }
  throw ConfigError("unknown model variant '" + name +
                    "' (expected baseline, local, sgtl, local+vgkt or full)");
}

std::vector<std::string> variant_names() {
  return {"baseline", "local", "sgtl", "local+vgkt", "full"};
}

Model::Model(const EncoderConfig& cfg, const ModelOptions& opts, int num_classes,
             std::uint64_t seed)
    : cfg_(cfg), opts_(opts), num_classes_(num_classes) {
  cfg_.validate();
  opts_.validate();
  if (num_classes_ < 2) throw ConfigError("identity classifier needs at least 2 classes");

  // Derived streams keep shared modules bit-identical across variants.
  Rng root(seed);
  Rng vis = root.derive(1);
  Rng txt = root.derive(2);
  Rng pool = root.derive(3);
  Rng loc = root.derive(4);
  Rng tch = root.derive(5);
  Rng cls = root.derive(6);

  visual_ = std::make_unique<VisualEncoder>(cfg_, "visual.", vis);
  text_ = std::make_unique<TextEncoder>(cfg_, "text.", txt);
  global_pool_ = std::make_unique<AttentionPool>("pool.global.", cfg_.C, pool);
  if (opts_.has_local_branch()) {
    for (int k = 0; k < cfg_.K; ++k) {
      stripe_pools_.emplace_back("pool.stripe" + std::to_string(k) + ".", cfg_.C, pool);
    }
    if (opts_.use_sgtl) {
      sgtl_ = std::make_unique<SemanticGroupModule>(cfg_, opts_.sgtl, "sgtl.", loc);
    } else {
      local_text_ = std::make_unique<LocalConvText>(cfg_, "localtext.", loc);
    }
  }
  if (opts_.use_vgkt) {
    teacher_ = std::make_unique<VisionGuidedTeacher>(cfg_, "teacher.", tch);
  }

  auto make_classifier = [&](const std::string& name, bool teacher_tagged) {
    Classifier c;
    c.w = Parameter(name + ".w", Tensor({num_classes_, cfg_.C}));
    c.b = Parameter(name + ".b", Tensor({num_classes_}));
    init_xavier(c.w.value, cls, cfg_.C, num_classes_);
    c.w.stop_gradient_tag = teacher_tagged;
    c.b.stop_gradient_tag = teacher_tagged;
    return c;
  };
  cls_global_ = make_classifier("cls.global", false);
  if (opts_.has_local_branch()) {
    for (int k = 0; k < cfg_.K; ++k) {
      cls_local_.push_back(make_classifier("cls.local" + std::to_string(k), false));
    }
  }
  if (opts_.use_vgkt) {
    for (int k = 0; k < cfg_.K; ++k) {
      cls_teacher_.push_back(make_classifier("cls.teacher" + std::to_string(k), true));
    }
  }
}

ImageEmbedding Model::encode_image(Graph& g, const Tensor& image, AttentionProbe* probe) {
  ++image_passes_;
  ImageEmbedding out;
  out.pixel_rows = chw_to_pxc(visual_->encode(g, image));
  out.global_feat = global_pool_->forward(g, out.pixel_rows, {}, probe);
  if (opts_.has_local_branch()) {
    std::vector<Var> stripes =
        partition_stripe_rows(out.pixel_rows, cfg_.feature_h(), cfg_.feature_w(), cfg_.K);
    out.locals.reserve(static_cast<std::size_t>(cfg_.K));
    for (int k = 0; k < cfg_.K; ++k) {
      out.locals.push_back(
          stripe_pools_[static_cast<std::size_t>(k)].forward(g, stripes[static_cast<std::size_t>(k)], {}, probe));
    }
  }
  return out;
}

TextEmbedding Model::encode_text(Graph& g, const std::vector<int>& tokens, bool training,
                                 Rng* droppath_rng, AttentionProbe* probe) {
  ++text_passes_;
  TextEmbedding out;
  out.seq = text_->encode(g, tokens, training, droppath_rng, probe);
  out.global_feat = text_->project_eos(g, out.seq);
  return out;
}

void Model::attach_text_locals(Graph& g, std::vector<TextEmbedding>& batch, bool training,
                               AttentionProbe* probe) {
  if (!opts_.has_local_branch()) return;
  if (opts_.use_sgtl) {
    std::vector<const TextFeatureSequence*> seqs;
    seqs.reserve(batch.size());
    for (const TextEmbedding& e : batch) seqs.push_back(&e.seq);
    std::vector<std::vector<Var>> locals = sgtl_->forward_batch(g, seqs, training, probe);
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i].locals = std::move(locals[i]);
  } else {
    for (TextEmbedding& e : batch) e.locals = local_text_->forward(g, e.seq);
  }
}

namespace {

Var classifier_logits(Graph& g, Var feats, Parameter& w, Parameter& b) {
  return add_rows(matmul_nt(feats, g.leaf(w)), g.leaf(b));
}

}  // namespace

Var Model::classify_global(Graph& g, Var feats) {
  return classifier_logits(g, feats, cls_global_.w, cls_global_.b);
}

Var Model::classify_local(Graph& g, int k, Var feats) {
  if (k < 0 || k >= static_cast<int>(cls_local_.size())) {
    throw ConfigError("local classifier index " + std::to_string(k) + " out of range");
  }
  Classifier& c = cls_local_[static_cast<std::size_t>(k)];
  return classifier_logits(g, feats, c.w, c.b);
}

Var Model::classify_teacher(Graph& g, int k, Var feats) {
  if (k < 0 || k >= static_cast<int>(cls_teacher_.size())) {
    throw ConfigError("teacher classifier index " + std::to_string(k) + " out of range");
  }
  Classifier& c = cls_teacher_[static_cast<std::size_t>(k)];
  return classifier_logits(g, feats, c.w, c.b);
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  visual_->collect(out);
  text_->collect(out);
  global_pool_->collect(out);
  for (AttentionPool& p : stripe_pools_) p.collect(out);
  if (sgtl_) sgtl_->collect(out);
  if (local_text_) local_text_->collect(out);
  if (teacher_) teacher_->collect(out);
  auto push = [&](Classifier& c) {
    out.push_back(&c.w);
    out.push_back(&c.b);
  };
  push(cls_global_);
  for (Classifier& c : cls_local_) push(c);
  for (Classifier& c : cls_teacher_) push(c);
  return out;
}

Parameter* Model::find(const std::string& name) {
  for (Parameter* p : parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

void Model::reset_pass_counters() {
  image_passes_ = 0;
  text_passes_ = 0;
}

Var stack_features(Graph& g, const std::vector<Var>& feats) {
  (void)g;
  if (feats.empty()) throw ValidationError("cannot stack an empty feature list");
  std::vector<Var> rows;
  rows.reserve(feats.size());
  for (Var f : feats) {
    rows.push_back(reshape(f, {1, static_cast<int>(f.val().size())}));
  }
  return rows.size() == 1 ? rows[0] : concat_rows(rows);
}

Var stack_local_rows(Graph& g, const std::vector<std::vector<Var>>& locals) {
  if (locals.empty()) throw ValidationError("cannot stack an empty local feature list");
  std::vector<Var> rows;
  rows.reserve(locals.size());
  for (const std::vector<Var>& sample : locals) {
    if (sample.empty() || sample.size() != locals.front().size()) {
      throw ValidationError("local feature lists must be nonempty and equally sized");
    }
    Var flat = concat_vec(sample);
    rows.push_back(reshape(flat, {1, static_cast<int>(flat.val().size())}));
  }
  (void)g;
  return rows.size() == 1 ? rows[0] : concat_rows(rows);
}

}  // namespace vgsg
