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

#include "vgsg/encoders.hpp"

#include <cmath>
#include <sstream>

#include "vgsg/error.hpp"
#include "vgsg/init.hpp"

namespace vgsg {

namespace {

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError("config field " + field + ": " + why);
}

Tensor xavier(std::vector<int> shape, Rng& rng, int fan_in, int fan_out) {
  Tensor t(std::move(shape));
  init_xavier(t, rng, fan_in, fan_out);
  return t;
}

Tensor normal_init(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  init_normal(t, rng, stddev);
  return t;
}

// Residual branch under stochastic depth.  Eval mode and rate 0 pass the
// branch through; in training the branch is dropped with probability
// `rate` and scaled by 1/(1-rate) otherwise, so the expectation matches
// eval behaviour.
Var drop_path(Var branch, double rate, bool training, Rng* rng) {
  if (!training || rate <= 0.0) return branch;
  if (rng == nullptr) {
    throw ConfigError("drop_path: training mode with a positive rate needs an RNG");
  }
  if (rng->uniform() < rate) return scale(branch, 0.0);
  return scale(branch, 1.0 / (1.0 - rate));
}

}  // namespace

void EncoderConfig::validate() const {
  require(C > 0, "C", "must be positive");
  require(C_T > 0, "C_T", "must be positive");
  require(C % 4 == 0, "C", "must be divisible by 4 (conv widths C/4, C/2, C)");
  require(heads > 0, "heads", "must be positive");
  require(C_T % heads == 0, "C_T", "must be divisible by the head count");
  require(input_h > 0 && input_h % stride_product() == 0, "input_h",
          "must be a positive multiple of the total stride " +
              std::to_string(stride_product()));
  require(input_w > 0 && input_w % stride_product() == 0, "input_w",
          "must be a positive multiple of the total stride " +
              std::to_string(stride_product()));
  require(L_max >= 3, "L_max", "needs room for SOS, one token, and EOS");
  require(vocab_size > Vocabulary::kEos, "vocab_size", "must cover the reserved markers");
  require(text_layers >= 0, "text_layers", "must be nonnegative");
  require(mlp_ratio >= 1, "mlp_ratio", "must be at least 1");
  require(drop_path_rate >= 0.0 && drop_path_rate < 1.0, "drop_path_rate",
          "must lie in [0, 1)");
  require(K >= 1, "K", "must be at least 1");
  require(feature_h() % K == 0, "K",
          "must divide the feature height " + std::to_string(feature_h()));
}

Vocabulary::Vocabulary() {
  add_word("<sos>");
  add_word("<eos>");
}

int Vocabulary::add_word(const std::string& w) {
  auto it = index_.find(w);
  if (it != index_.end()) return it->second;
  int id = static_cast<int>(words_.size());
  words_.push_back(w);
  index_.emplace(w, id);
  return id;
}

bool Vocabulary::contains(const std::string& w) const { return index_.count(w) != 0; }

int Vocabulary::id_of(const std::string& w) const {
  auto it = index_.find(w);
  if (it == index_.end()) throw VocabularyError("unknown word '" + w + "'");
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) {
    throw VocabularyError("word id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(size()));
  }
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode_caption(const std::string& text) const {
  std::vector<int> ids;
  std::istringstream in(text);
  std::string w;
  while (in >> w) ids.push_back(id_of(w));
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  if (words.size() < 2 || words[0] != "<sos>" || words[1] != "<eos>") {
    throw VocabularyError("word list must start with the reserved <sos> <eos> markers");
  }
  Vocabulary v;
  for (std::size_t i = 2; i < words.size(); ++i) {
    int before = v.size();
    int id = v.add_word(words[i]);
    if (id != before) throw VocabularyError("duplicate word '" + words[i] + "' in list");
  }
  return v;
}

int TextFeatureSequence::valid_count() const {
  int n = 0;
  for (char m : mask) n += (m != 0);
  return n;
}

MultiHeadAttention::MultiHeadAttention(const std::string& prefix, int dim, int heads,
                                       Rng& rng)
    : dim_(dim), heads_(heads) {
  if (heads <= 0 || dim % heads != 0) {
    throw ConfigError("attention at " + prefix + ": head count " + std::to_string(heads) +
                      " must divide width " + std::to_string(dim));
  }
  wq_ = Parameter(prefix + ".wq", xavier({dim, dim}, rng, dim, dim));
  bq_ = Parameter(prefix + ".bq", Tensor({dim}));
  wk_ = Parameter(prefix + ".wk", xavier({dim, dim}, rng, dim, dim));
  bk_ = Parameter(prefix + ".bk", Tensor({dim}));
  wv_ = Parameter(prefix + ".wv", xavier({dim, dim}, rng, dim, dim));
  bv_ = Parameter(prefix + ".bv", Tensor({dim}));
  wo_ = Parameter(prefix + ".wo", xavier({dim, dim}, rng, dim, dim));
  bo_ = Parameter(prefix + ".bo", Tensor({dim}));
}

Var MultiHeadAttention::forward(Graph& g, Var query, Var keys, Var values,
                                const std::vector<char>& key_mask, AttentionProbe* probe) {
  const Tensor& kv = keys.val();
  if (!key_mask.empty() && static_cast<int>(key_mask.size()) != kv.rows()) {
    throw DimensionError("attention mask length " + std::to_string(key_mask.size()) +
                         " vs " + std::to_string(kv.rows()) + " keys");
  }
  Var q = add_rows(matmul_nt(query, g.leaf(wq_)), g.leaf(bq_));
  Var k = add_rows(matmul_nt(keys, g.leaf(wk_)), g.leaf(bk_));
  Var v = add_rows(matmul_nt(values, g.leaf(wv_)), g.leaf(bv_));

  int dk = dim_ / heads_;
  double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Var> head_out;
  head_out.reserve(static_cast<std::size_t>(heads_));
  for (int h = 0; h < heads_; ++h) {
    Var qh = col_slice(q, h * dk, (h + 1) * dk);
    Var kh = col_slice(k, h * dk, (h + 1) * dk);
    Var vh = col_slice(v, h * dk, (h + 1) * dk);
    Var scores = scale(matmul_nt(qh, kh), inv_sqrt_dk);
    Var attn = key_mask.empty() ? softmax_rows(scores)
                                : masked_softmax_rows(scores, key_mask);
    if (probe) probe->distributions.push_back(attn.val());
    head_out.push_back(matmul(attn, vh));
  }
  Var merged = heads_ == 1 ? head_out[0] : concat_cols(head_out);
  return add_rows(matmul_nt(merged, g.leaf(wo_)), g.leaf(bo_));
}

void MultiHeadAttention::collect(std::vector<Parameter*>& out) {
  for (Parameter* p : {&wq_, &bq_, &wk_, &bk_, &wv_, &bv_, &wo_, &bo_}) out.push_back(p);
}

AttentionPool::AttentionPool(const std::string& prefix, int dim, Rng& rng) : dim_(dim) {
  wk_ = Parameter(prefix + ".wk", xavier({dim, dim}, rng, dim, dim));
  bk_ = Parameter(prefix + ".bk", Tensor({dim}));
  query_ = Parameter(prefix + ".q", normal_init({dim}, rng, 0.02));
}

Var AttentionPool::forward(Graph& g, Var rows, const std::vector<char>& mask,
                           AttentionProbe* probe) {
  const Tensor& x = rows.val();
  int P = x.rows();
  if (x.cols() != dim_) {
    throw DimensionError("pool width " + std::to_string(x.cols()) + " vs configured " +
                         std::to_string(dim_));
  }
  if (!mask.empty() && static_cast<int>(mask.size()) != P) {
    throw DimensionError("pool mask length " + std::to_string(mask.size()) + " vs " +
                         std::to_string(P) + " positions");
  }
  Var keys = add_rows(matmul_nt(rows, g.leaf(wk_)), g.leaf(bk_));
  Var logits = scale(matmul_nt(keys, reshape(g.leaf(query_), {1, dim_})),
                     1.0 / std::sqrt(static_cast<double>(dim_)));
  Var logits_row = reshape(logits, {1, P});
  Var weights = mask.empty() ? softmax_rows(logits_row)
                             : masked_softmax_rows(logits_row, mask);
  if (probe) probe->distributions.push_back(weights.val());
  return reshape(matmul(weights, rows), {dim_});
}

void AttentionPool::collect(std::vector<Parameter*>& out) {
  for (Parameter* p : {&wk_, &bk_, &query_}) out.push_back(p);
}

VisualEncoder::VisualEncoder(const EncoderConfig& cfg, const std::string& prefix, Rng& rng)
    : cfg_(cfg) {
  cfg_.validate();
  int widths[3] = {cfg_.C / 4, cfg_.C / 2, cfg_.C};
  int cin = 3;
  for (int b = 0; b < 3; ++b) {
    int cout = widths[b];
    Block blk;
    std::string base = prefix + ".block" + std::to_string(b);
    blk.conv_w = Parameter(base + ".conv.w",
                           xavier({cout, cin, 3, 3}, rng, cin * 9, cout * 9));
    blk.conv_b = Parameter(base + ".conv.b", Tensor({cout}));
    blk.ln_g = Parameter(base + ".ln.g", Tensor::full({cout}, 1.0));
    blk.ln_b = Parameter(base + ".ln.b", Tensor({cout}));
    blk.pool = b < 2;
    blocks_.push_back(std::move(blk));
    cin = cout;
  }
}

Var VisualEncoder::encode(Graph& g, const Tensor& image) {
  std::vector<int> want = {3, cfg_.input_h, cfg_.input_w};
  if (image.shape() != want) {
    throw DimensionError("image shape " + image.shape_str() + ", expected " +
                         shape_to_string(want));
  }
  if (!image.all_finite()) throw ValidationError("image contains non-finite values");
  Var x = g.constant(image);
  for (Block& blk : blocks_) {
    x = conv2d_3x3(x, g.leaf(blk.conv_w), g.leaf(blk.conv_b));
    x = layer_norm_channels(x, g.leaf(blk.ln_g), g.leaf(blk.ln_b), kLnEps);
    x = gelu(x);
    if (blk.pool) x = avg_pool_2x2(x);
  }
  return x;
}

void VisualEncoder::collect(std::vector<Parameter*>& out) {
  for (Block& blk : blocks_) {
    for (Parameter* p : {&blk.conv_w, &blk.conv_b, &blk.ln_g, &blk.ln_b}) out.push_back(p);
  }
}

TextEncoder::Layer::Layer(const std::string& prefix, const EncoderConfig& cfg, Rng& rng)
    : ln1_g(prefix + ".ln1.g", Tensor::full({cfg.C_T}, 1.0)),
      ln1_b(prefix + ".ln1.b", Tensor({cfg.C_T})),
      attn(prefix + ".attn", cfg.C_T, cfg.heads, rng),
      ln2_g(prefix + ".ln2.g", Tensor::full({cfg.C_T}, 1.0)),
      ln2_b(prefix + ".ln2.b", Tensor({cfg.C_T})),
      fc1_w(prefix + ".fc1.w",
            xavier({cfg.mlp_ratio * cfg.C_T, cfg.C_T}, rng, cfg.C_T, cfg.mlp_ratio * cfg.C_T)),
      fc1_b(prefix + ".fc1.b", Tensor({cfg.mlp_ratio * cfg.C_T})),
      fc2_w(prefix + ".fc2.w",
            xavier({cfg.C_T, cfg.mlp_ratio * cfg.C_T}, rng, cfg.mlp_ratio * cfg.C_T, cfg.C_T)),
      fc2_b(prefix + ".fc2.b", Tensor({cfg.C_T})) {}

TextEncoder::TextEncoder(const EncoderConfig& cfg, const std::string& prefix, Rng& rng)
    : cfg_(cfg) {
  cfg_.validate();
  tok_embed_ = Parameter(prefix + ".tok_embed",
                         normal_init({cfg_.vocab_size, cfg_.C_T}, rng, 0.02));
  pos_embed_ = Parameter(prefix + ".pos_embed", normal_init({cfg_.L_max, cfg_.C_T}, rng, 0.01));
  for (int l = 0; l < cfg_.text_layers; ++l) {
    layers_.emplace_back(prefix + ".layer" + std::to_string(l), cfg_, rng);
  }
  lnf_g_ = Parameter(prefix + ".lnf.g", Tensor::full({cfg_.C_T}, 1.0));
  lnf_b_ = Parameter(prefix + ".lnf.b", Tensor({cfg_.C_T}));
  proj_ = Parameter(prefix + ".proj", xavier({cfg_.C, cfg_.C_T}, rng, cfg_.C_T, cfg_.C));
}

TextFeatureSequence TextEncoder::encode(Graph& g, const std::vector<int>& tokens,
                                        bool training, Rng* droppath_rng,
                                        AttentionProbe* probe) {
  if (tokens.empty()) throw ValidationError("text encoding needs at least one token");
  for (int t : tokens) {
    if (t < 0 || t >= cfg_.vocab_size) {
      throw VocabularyError("token id " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(cfg_.vocab_size));
    }
  }

  TextFeatureSequence out;
  int capacity = cfg_.L_max - 2;
  std::vector<int> body(tokens);
  if (static_cast<int>(body.size()) > capacity) {
    body.resize(static_cast<std::size_t>(capacity));
    out.truncated = true;
  }

  std::vector<int> ids;
  ids.push_back(Vocabulary::kSos);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(Vocabulary::kEos);
  int valid = static_cast<int>(ids.size());
  int L = cfg_.pad_sequences ? cfg_.L_max : valid;
  // Pad rows reuse the EOS embedding; the mask keeps them out of every
  // attention, so their content never reaches a valid row.
  ids.resize(static_cast<std::size_t>(L), Vocabulary::kEos);

  out.mask.assign(static_cast<std::size_t>(L), 0);
  for (int i = 0; i < valid; ++i) out.mask[static_cast<std::size_t>(i)] = 1;
  out.eos_index = valid - 1;

  Var x = add(embedding_rows(g.leaf(tok_embed_), ids), row_slice(g.leaf(pos_embed_), 0, L));
  for (Layer& layer : layers_) {
    Var normed = layer_norm_rows(x, g.leaf(layer.ln1_g), g.leaf(layer.ln1_b), kLnEps);
    Var attended = layer.attn.forward(g, normed, normed, normed, out.mask, probe);
    x = add(x, drop_path(attended, cfg_.drop_path_rate, training, droppath_rng));

    Var normed2 = layer_norm_rows(x, g.leaf(layer.ln2_g), g.leaf(layer.ln2_b), kLnEps);
    Var hidden = gelu(add_rows(matmul_nt(normed2, g.leaf(layer.fc1_w)), g.leaf(layer.fc1_b)));
    Var mlp = add_rows(matmul_nt(hidden, g.leaf(layer.fc2_w)), g.leaf(layer.fc2_b));
    x = add(x, drop_path(mlp, cfg_.drop_path_rate, training, droppath_rng));
  }
  out.features = layer_norm_rows(x, g.leaf(lnf_g_), g.leaf(lnf_b_), kLnEps);
  return out;
}

Var TextEncoder::project_eos(Graph& g, const TextFeatureSequence& seq) {
  if (seq.eos_index < 0 || seq.eos_index >= seq.length()) {
    throw ValidationError("sequence EOS index " + std::to_string(seq.eos_index) +
                          " out of range");
  }
  Var row = row_slice(seq.features, seq.eos_index, seq.eos_index + 1);
  return reshape(matmul_nt(row, g.leaf(proj_)), {cfg_.C});
}

void TextEncoder::collect(std::vector<Parameter*>& out) {
  out.push_back(&tok_embed_);
  out.push_back(&pos_embed_);
  for (Layer& layer : layers_) {
    out.push_back(&layer.ln1_g);
    out.push_back(&layer.ln1_b);
    layer.attn.collect(out);
    out.push_back(&layer.ln2_g);
    out.push_back(&layer.ln2_b);
    for (Parameter* p : {&layer.fc1_w, &layer.fc1_b, &layer.fc2_w, &layer.fc2_b}) {
      out.push_back(p);
    }
  }
  out.push_back(&lnf_g_);
  out.push_back(&lnf_b_);
  out.push_back(&proj_);
}

std::vector<Tensor> partition_stripes(const Tensor& chw, int K) {
  if (chw.rank() != 3) {
    throw DimensionError("stripe partition expects a rank-3 map, got " + chw.shape_str());
  }
  int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  if (K < 1 || H % K != 0) {
    throw ConfigError("stripe count " + std::to_string(K) + " must divide height " +
                      std::to_string(H));
  }
  int S = H / K;
  std::vector<Tensor> out;
  out.reserve(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    Tensor stripe({C, S, W});
    for (int c = 0; c < C; ++c) {
      for (int s = 0; s < S; ++s) {
        const double* src = chw.data() + (static_cast<std::int64_t>(c) * H + k * S + s) * W;
        double* dst = stripe.data() + (static_cast<std::int64_t>(c) * S + s) * W;
        std::copy(src, src + W, dst);
      }
    }
    out.push_back(std::move(stripe));
  }
  return out;
}

std::vector<Var> partition_stripe_rows(Var pixel_rows, int H, int W, int K) {
  const Tensor& m = pixel_rows.val();
  if (m.rank() != 2 || m.rows() != H * W) {
    throw DimensionError("pixel rows " + m.shape_str() + " do not match H*W = " +
                         std::to_string(H * W));
  }
  if (K < 1 || H % K != 0) {
    throw ConfigError("stripe count " + std::to_string(K) + " must divide height " +
                      std::to_string(H));
  }
  int per = (H / K) * W;
  std::vector<Var> out;
  out.reserve(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) out.push_back(row_slice(pixel_rows, k * per, (k + 1) * per));
  return out;
}

}  // namespace vgsg
