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

#include "vgsg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <utility>

#include "vgsg/error.hpp"
#include "vgsg/vgkt.hpp"

namespace vgsg {

double TrainConfig::lr_at(int epoch) const {
  return epoch >= decay_epoch ? base_lr * lr_decay_factor : base_lr;
}

double TrainConfig::text_lr_at(int epoch) const {
  double base = text_lr < 0.0 ? base_lr : text_lr;
  return epoch >= decay_epoch ? base * lr_decay_factor : base;
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be nonnegative");
  // A zero rate is allowed: it freezes the parameters, which the tests use
  // to separate the update rule from the forward pass.
  if (base_lr < 0.0) throw ConfigError("base_lr must not be negative");
  if (lr_decay_factor <= 0.0) throw ConfigError("lr_decay_factor must be positive");
  if (epochs > 0 && (decay_epoch < 0 || decay_epoch >= epochs)) {
    throw ConfigError("decay_epoch must lie in [0, epochs)");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (per_identity < 1) throw ConfigError("per_identity must be positive");
  if (batch_size % per_identity != 0) {
    throw ConfigError("batch_size must be a multiple of per_identity");
  }
  if (tau <= 0.0) throw ConfigError("relation temperature tau must be positive");
  weights.validate();
  model.validate();
}

std::string EpochStats::line() const {
  char buf[320];
  std::snprintf(buf, sizeof buf,
                "epoch=%d id=%.9g contrast=%.9g st=%.9g cpt=%.9g ft=%.9g total=%.9g "
                "lr=%.9g steps=%ld wall=%.3f",
                epoch, mean.id, mean.contrast, mean.similarity_transfer, mean.class_transfer,
                mean.feature_transfer, mean.total, mean.lr, steps, wall_seconds);
  return std::string(buf);
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace {

const EncoderConfig& checked_configs(const EncoderConfig& enc, const TrainConfig& cfg,
                                     const Dataset& ds) {
  enc.validate();
  cfg.validate();
  if (enc.input_h != ds.cfg.image_h || enc.input_w != ds.cfg.image_w) {
    throw ConfigError("encoder input size " + std::to_string(enc.input_h) + "x" +
                      std::to_string(enc.input_w) + " does not match dataset images " +
                      std::to_string(ds.cfg.image_h) + "x" + std::to_string(ds.cfg.image_w));
  }
  if (enc.vocab_size < ds.vocab.size()) {
    throw ConfigError("encoder vocab capacity " + std::to_string(enc.vocab_size) +
                      " below dataset vocabulary of " + std::to_string(ds.vocab.size()));
  }
  return enc;
}

}  // namespace

Trainer::Trainer(const EncoderConfig& enc, const TrainConfig& cfg, const Dataset& ds,
                 std::uint64_t config_hash)
    : cfg_(cfg),
      ds_(ds),
      config_hash_(config_hash),
      model_(checked_configs(enc, cfg, ds), cfg.model, ds.cfg.train_identities, cfg.seed),
      sample_rng_(Rng(cfg.seed).derive(100)),
      droppath_rng_(Rng(cfg.seed).derive(101)) {
  params_ = model_.parameters();
  adam_.m.reserve(params_.size());
  adam_.v.reserve(params_.size());
  for (Parameter* p : params_) {
    adam_.m.emplace_back(p->value.shape());
    adam_.v.emplace_back(p->value.shape());
  }
}

long Trainer::steps_per_epoch() const {
  long train = static_cast<long>(ds_.sample_indices(Split::kTrain).size());
  long spe = train / cfg_.batch_size;
  return spe > 0 ? spe : 1;
}

StepStats Trainer::step(const Batch& batch, int epoch) {
  try {
    return step_impl(batch, epoch);
  } catch (const TrainingDivergenceError& e) {
    std::ostringstream os;
    os << e.what() << "; batch sample indices:";
    for (long idx : batch.sample_indices) os << " " << idx;
    throw TrainingDivergenceError(os.str());
  }
}

Var Trainer::build_step(Graph& g, const Batch& batch, bool training, LossParts& parts,
                        const TransferTargets* fixed, TransferTargets* captured) {
  const int B = static_cast<int>(batch.sample_indices.size());
  const std::vector<int>& labels = batch.identities;
  const double eps = cfg_.weights.eps;
  const bool local = cfg_.model.has_local_branch();
  VisionGuidedTeacher* teacher = model_.teacher();

  std::vector<ImageEmbedding> imgs;
  std::vector<TextEmbedding> txts;
  imgs.reserve(static_cast<std::size_t>(B));
  txts.reserve(static_cast<std::size_t>(B));
  for (long idx : batch.sample_indices) {
    const SynthSample& s = ds_.samples[static_cast<std::size_t>(idx)];
    imgs.push_back(model_.encode_image(g, s.image));
    std::vector<int> tokens;
    tokens.reserve(s.caption.size());
    for (const std::string& w : s.caption) tokens.push_back(ds_.vocab.id_of(w));
    txts.push_back(model_.encode_text(g, tokens, training, training ? &droppath_rng_ : nullptr));
  }
  model_.attach_text_locals(g, txts, training);

  std::vector<Var> vg, tg;
  for (int i = 0; i < B; ++i) {
    vg.push_back(imgs[static_cast<std::size_t>(i)].global_feat);
    tg.push_back(txts[static_cast<std::size_t>(i)].global_feat);
  }
  Var vg_m = stack_features(g, vg);
  Var tg_m = stack_features(g, tg);

  Var id_acc = add(id_loss(model_.classify_global(g, vg_m), labels, eps),
                   id_loss(model_.classify_global(g, tg_m), labels, eps));

  std::vector<Var> student_text_logits;
  Var sl;
  if (local) {
    const int K = model_.config().K;
    for (int k = 0; k < K; ++k) {
      std::vector<Var> vk, tk;
      for (int i = 0; i < B; ++i) {
        vk.push_back(imgs[static_cast<std::size_t>(i)].locals[static_cast<std::size_t>(k)]);
        tk.push_back(txts[static_cast<std::size_t>(i)].locals[static_cast<std::size_t>(k)]);
      }
      id_acc = add(id_acc, id_loss(model_.classify_local(g, k, stack_features(g, vk)), labels, eps));
      Var t_logits = model_.classify_local(g, k, stack_features(g, tk));
      student_text_logits.push_back(t_logits);
      id_acc = add(id_acc, id_loss(t_logits, labels, eps));
    }
    std::vector<std::vector<Var>> v_locals, t_locals;
    for (int i = 0; i < B; ++i) {
      v_locals.push_back(imgs[static_cast<std::size_t>(i)].locals);
      t_locals.push_back(txts[static_cast<std::size_t>(i)].locals);
    }
    sl = matmul_nt(l2_normalize_rows(stack_local_rows(g, v_locals)),
                   l2_normalize_rows(stack_local_rows(g, t_locals)));
  }

  Var sg = matmul_nt(l2_normalize_rows(vg_m), l2_normalize_rows(tg_m));
  Var contrast_acc =
      contrastive_from_matrix(g, sg, labels, cfg_.weights, cfg_.all_pairs_negatives);
  if (local) {
    contrast_acc = add(contrast_acc, contrastive_from_matrix(g, sl, labels, cfg_.weights,
                                                             cfg_.all_pairs_negatives));
  }

  std::vector<Var> teacher_logits;
  std::vector<std::vector<Var>> teacher_diag;
  Var sv;
  if (teacher != nullptr) {
    const int K = model_.config().K;
    teacher_diag.resize(static_cast<std::size_t>(B));
    std::vector<Var> sims;
    sims.reserve(static_cast<std::size_t>(B) * static_cast<std::size_t>(B));
    for (int i = 0; i < B; ++i) {
      for (int j = 0; j < B; ++j) {
        VisionGuidedTextFeatures vt =
            teacher->attend(g, imgs[static_cast<std::size_t>(i)].pixel_rows,
                            txts[static_cast<std::size_t>(j)].seq);
        if (i == j) {
          for (int k = 0; k < K; ++k) {
            teacher_diag[static_cast<std::size_t>(i)].push_back(
                teacher->project(g, vt.per_stripe_pooled[static_cast<std::size_t>(k)]));
          }
        }
        sims.push_back(
            teacher->teacher_similarity(g, imgs[static_cast<std::size_t>(i)].locals, vt));
      }
    }
    sv = stack_scalars(sims, B, B);
    contrast_acc = add(contrast_acc, contrastive_from_matrix(g, sv, labels, cfg_.weights,
                                                             cfg_.all_pairs_negatives));
    for (int k = 0; k < K; ++k) {
      std::vector<Var> tk;
      for (int i = 0; i < B; ++i) {
        tk.push_back(teacher_diag[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]);
      }
      Var logits = model_.classify_teacher(g, k, stack_features(g, tk));
      teacher_logits.push_back(logits);
      id_acc = add(id_acc, id_loss(logits, labels, eps));
    }
  }

  parts = LossParts{};
  parts.id = id_acc;
  parts.contrast = contrast_acc;
  const TransferMode tm = cfg_.model.transfer;
  if (teacher != nullptr && tm != TransferMode::kNone) {
    if (tm == TransferMode::kSimilarity || tm == TransferMode::kBoth) {
      Var target_sim = fixed != nullptr ? g.constant(fixed->sv) : sv;
      if (captured != nullptr) captured->sv = Tensor(sv.val());
      parts.similarity_transfer = similarity_transfer_loss(relation_matrix(sl, cfg_.tau),
                                                           relation_matrix(target_sim, cfg_.tau));
    }
    if (tm == TransferMode::kClassProb || tm == TransferMode::kBoth) {
      std::vector<Var> sp, tp;
      for (std::size_t k = 0; k < student_text_logits.size(); ++k) {
        sp.push_back(softmax_rows(student_text_logits[k]));
        Var teacher_prob = fixed != nullptr ? g.constant(fixed->teacher_probs[k])
                                            : softmax_rows(teacher_logits[k]);
        if (captured != nullptr) captured->teacher_probs.push_back(Tensor(teacher_prob.val()));
        tp.push_back(teacher_prob);
      }
      parts.class_transfer = class_probability_transfer_loss(sp, tp);
    }
    if (tm == TransferMode::kFeature) {
      std::vector<Var> student_flat, teacher_flat;
      if (captured != nullptr) {
        captured->teacher_locals.resize(static_cast<std::size_t>(B));
      }
      for (int i = 0; i < B; ++i) {
        for (Var f : txts[static_cast<std::size_t>(i)].locals) student_flat.push_back(f);
        const std::vector<Var>& diag = teacher_diag[static_cast<std::size_t>(i)];
        for (std::size_t k = 0; k < diag.size(); ++k) {
          Var tf = fixed != nullptr
                       ? g.constant(fixed->teacher_locals[static_cast<std::size_t>(i)][k])
                       : diag[k];
          if (captured != nullptr) {
            captured->teacher_locals[static_cast<std::size_t>(i)].push_back(Tensor(diag[k].val()));
          }
          teacher_flat.push_back(tf);
        }
      }
      parts.feature_transfer = feature_transfer_loss(student_flat, teacher_flat);
    }
  }

  return total_loss(parts, cfg_.weights);
}

StepStats Trainer::step_impl(const Batch& batch, int epoch) {
  Graph g;
  LossParts parts;
  Var total = build_step(g, batch, true, parts);

  auto zero_all = [&] {
    for (Parameter* p : params_) p->zero_grad();
  };

  if (cfg_.check_stop_gradient &&
      (parts.similarity_transfer.valid() || parts.class_transfer.valid() ||
       parts.feature_transfer.valid())) {
    Var distill;
    if (parts.similarity_transfer.valid()) {
      distill = scale(parts.similarity_transfer, cfg_.weights.lambda1);
    }
    if (parts.feature_transfer.valid()) {
      Var term = scale(parts.feature_transfer, cfg_.weights.lambda1);
      distill = distill.valid() ? add(distill, term) : term;
    }
    if (parts.class_transfer.valid()) {
      Var term = scale(parts.class_transfer, cfg_.weights.lambda2);
      distill = distill.valid() ? add(distill, term) : term;
    }
    zero_all();
    g.backward(distill);
    for (Parameter* p : params_) {
      if (p->stop_gradient_tag && p->grad_abs_max() != 0.0) {
        throw VerificationError("distillation gradient leaked into teacher parameter " +
                                p->name);
      }
    }
  }

  zero_all();
  g.backward(total);
  apply_update(epoch);

  StepStats stats;
  stats.id = scalar_of(parts.id);
  stats.contrast = scalar_of(parts.contrast);
  if (parts.similarity_transfer.valid()) {
    stats.similarity_transfer = scalar_of(parts.similarity_transfer);
  }
  if (parts.class_transfer.valid()) stats.class_transfer = scalar_of(parts.class_transfer);
  if (parts.feature_transfer.valid()) stats.feature_transfer = scalar_of(parts.feature_transfer);
  stats.total = scalar_of(total);
  stats.lr = cfg_.lr_at(epoch);
  return stats;
}

double Trainer::eval_loss(const Batch& batch, bool backprop, const TransferTargets* frozen) {
  Graph g;
  LossParts parts;
  Var total = build_step(g, batch, false, parts, frozen);
  if (backprop) {
    for (Parameter* p : params_) p->zero_grad();
    g.backward(total);
  }
  return scalar_of(total);
}

TransferTargets Trainer::capture_transfer_targets(const Batch& batch) {
  Graph g;
  LossParts parts;
  TransferTargets targets;
  build_step(g, batch, false, parts, nullptr, &targets);
  return targets;
}

void Trainer::apply_update(int epoch) {
  if (cfg_.grad_clip_norm > 0.0) {
    double sq = 0.0;
    for (Parameter* p : params_) {
      if (!p->trainable) continue;
      for (std::int64_t i = 0; i < p->grad.size(); ++i) sq += p->grad[i] * p->grad[i];
    }
    double norm = std::sqrt(sq);
    if (norm > cfg_.grad_clip_norm) {
      double s = cfg_.grad_clip_norm / norm;
      for (Parameter* p : params_) {
        if (!p->trainable) continue;
        for (std::int64_t i = 0; i < p->grad.size(); ++i) p->grad[i] *= s;
      }
    }
  }

  ++adam_.step;
  const double bc1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(adam_.step));
  const double bc2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(adam_.step));
  const double lr = cfg_.lr_at(epoch);
  const double tlr = cfg_.text_lr_at(epoch);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter* p = params_[i];
    if (!p->trainable) continue;
    const double rate = p->name.rfind("text.", 0) == 0 ? tlr : lr;
    Tensor& m = adam_.m[i];
    Tensor& v = adam_.v[i];
    for (std::int64_t e = 0; e < p->value.size(); ++e) {
      const double grad = p->grad[e];
      m[e] = adam_.beta1 * m[e] + (1.0 - adam_.beta1) * grad;
      v[e] = adam_.beta2 * v[e] + (1.0 - adam_.beta2) * grad * grad;
      p->value[e] -= rate * (m[e] / bc1) / (std::sqrt(v[e] / bc2) + adam_.eps);
    }
  }
}

std::vector<EpochStats> Trainer::run(int start_epoch, std::ostream* log,
                                     const std::string& checkpoint_dir, int stop_epoch) {
  namespace fs = std::filesystem;
  std::vector<EpochStats> out;
  const int end_epoch = stop_epoch >= 0 ? std::min(stop_epoch, cfg_.epochs) : cfg_.epochs;
  const long spe = steps_per_epoch();
  for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    StepStats sum;
    for (long s = 0; s < spe; ++s) {
      Batch batch = sample_batch(ds_, sample_rng_, cfg_.batch_size, cfg_.per_identity);
      StepStats st = step(batch, epoch);
      sum.id += st.id;
      sum.contrast += st.contrast;
      sum.similarity_transfer += st.similarity_transfer;
      sum.class_transfer += st.class_transfer;
      sum.feature_transfer += st.feature_transfer;
      sum.total += st.total;
      sum.lr = st.lr;
    }
    EpochStats es;
    es.epoch = epoch;
    es.steps = spe;
    const double inv = 1.0 / static_cast<double>(spe);
    es.mean.id = sum.id * inv;
    es.mean.contrast = sum.contrast * inv;
    es.mean.similarity_transfer = sum.similarity_transfer * inv;
    es.mean.class_transfer = sum.class_transfer * inv;
    es.mean.feature_transfer = sum.feature_transfer * inv;
    es.mean.total = sum.total * inv;
    es.mean.lr = sum.lr;
    es.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(es);
    if (log != nullptr) {
      *log << es.line() << "\n";
      log->flush();
    }
    if (!checkpoint_dir.empty()) {
      save_checkpoint((fs::path(checkpoint_dir) / "last.ckpt").string(), epoch + 1);
      if (!has_best_ || es.mean.total < best_loss_) {
        best_loss_ = es.mean.total;
        has_best_ = true;
        save_checkpoint((fs::path(checkpoint_dir) / "best.ckpt").string(), epoch + 1);
      }
    }
  }
  if (!checkpoint_dir.empty() && end_epoch == cfg_.epochs) {
    save_checkpoint((fs::path(checkpoint_dir) / "final.ckpt").string(), cfg_.epochs);
  }
  return out;
}

namespace {

constexpr char kCkptMagic[8] = {'V', 'G', 'S', 'G', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(os, v);
}

void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void put_tensor(std::ostream& os, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int d = 0; d < t.rank(); ++d) put_u32(os, static_cast<std::uint32_t>(t.dim(d)));
  for (std::int64_t i = 0; i < t.size(); ++i) put_f64(os, t[i]);
}

[[noreturn]] void truncated(const std::string& path) {
  throw IntegrityError("checkpoint " + path + " is truncated or corrupt");
}

std::uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) truncated(path);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is, const std::string& path) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) truncated(path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& is, const std::string& path) {
  std::uint64_t v = get_u64(is, path);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

std::string get_string(std::istream& is, const std::string& path) {
  std::uint32_t n = get_u32(is, path);
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), n)) truncated(path);
  return s;
}

Tensor get_tensor(std::istream& is, const std::string& path) {
  std::uint32_t rank = get_u32(is, path);
  if (rank > 8) truncated(path);
  std::vector<int> shape;
  for (std::uint32_t d = 0; d < rank; ++d) {
    shape.push_back(static_cast<int>(get_u32(is, path)));
  }
  Tensor t(shape);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = get_f64(is, path);
  return t;
}

}  // namespace

void Trainer::save_checkpoint(const std::string& path, int next_epoch) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IngestionError("cannot write checkpoint " + path);
  os.write(kCkptMagic, 8);
  put_u32(os, kCkptVersion);
  put_u64(os, config_hash_);
  put_u32(os, static_cast<std::uint32_t>(next_epoch));
  put_u64(os, static_cast<std::uint64_t>(adam_.step));
  put_f64(os, best_loss_);
  put_u32(os, has_best_ ? 1 : 0);
  put_string(os, sample_rng_.serialize_state());
  put_string(os, droppath_rng_.serialize_state());

  SemanticGroupModule* sg = const_cast<Model&>(model_).sgtl();
  put_u32(os, sg != nullptr ? 1 : 0);
  if (sg != nullptr) {
    BatchNormState& bn = sg->bn_state();
    put_tensor(os, bn.running_mean);
    put_tensor(os, bn.running_var);
    put_tensor(os, bn.count);
  }

  put_u32(os, static_cast<std::uint32_t>(params_.size()));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    put_string(os, params_[i]->name);
    put_tensor(os, params_[i]->value);
    put_tensor(os, adam_.m[i]);
    put_tensor(os, adam_.v[i]);
  }
  os.flush();
  if (!os) throw IngestionError("cannot write checkpoint " + path);
}

int Trainer::load_checkpoint(const std::string& path, bool ignore_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("cannot open checkpoint " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0) {
    throw IntegrityError(path + " is not a checkpoint file");
  }
  std::uint32_t version = get_u32(is, path);
  if (version != kCkptVersion) {
    throw IntegrityError("checkpoint " + path + " has unsupported version " +
                         std::to_string(version));
  }
  std::uint64_t hash = get_u64(is, path);
  if (hash != config_hash_ && !ignore_hash) {
    throw IntegrityError("checkpoint " + path + " was written under a different configuration");
  }
  int next_epoch = static_cast<int>(get_u32(is, path));
  adam_.step = static_cast<long>(get_u64(is, path));
  best_loss_ = get_f64(is, path);
  has_best_ = get_u32(is, path) != 0;
  sample_rng_.restore_state(get_string(is, path));
  droppath_rng_.restore_state(get_string(is, path));

  std::uint32_t has_bn = get_u32(is, path);
  SemanticGroupModule* sg = model_.sgtl();
  if ((has_bn != 0) != (sg != nullptr)) {
    throw IntegrityError("checkpoint " + path + " does not match the model's text branch");
  }
  if (sg != nullptr) {
    BatchNormState& bn = sg->bn_state();
    bn.running_mean = get_tensor(is, path);
    bn.running_var = get_tensor(is, path);
    bn.count = get_tensor(is, path);
  }

  std::uint32_t count = get_u32(is, path);
  if (count != params_.size()) {
    throw IntegrityError("checkpoint " + path + " holds " + std::to_string(count) +
                         " parameters, model has " + std::to_string(params_.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_string(is, path);
    Tensor value = get_tensor(is, path);
    Tensor m = get_tensor(is, path);
    Tensor v = get_tensor(is, path);
    Parameter* p = model_.find(name);
    if (p == nullptr) {
      throw IntegrityError("checkpoint " + path + " names unknown parameter " + name);
    }
    if (p->value.shape() != value.shape()) {
      throw IntegrityError("checkpoint " + path + " has a shape mismatch on " + name);
    }
    p->value = std::move(value);
    std::size_t slot = 0;
    while (slot < params_.size() && params_[slot] != p) ++slot;
    adam_.m[slot] = std::move(m);
    adam_.v[slot] = std::move(v);
  }
  return next_epoch;
}

}  // namespace vgsg
