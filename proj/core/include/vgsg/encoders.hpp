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
#include <unordered_map>
#include <vector>

#include "vgsg/graph.hpp"
#include "vgsg/rng.hpp"

namespace vgsg {

// Shared shape configuration for both encoders and everything downstream.
// input_h/input_w are raw image dimensions; the visual encoder downsamples
// by 4 in each direction, so the feature map is C x (input_h/4) x (input_w/4).
struct EncoderConfig {
  int C = 64;    // visual feature channels
  int C_T = 64;  // text feature channels
  int input_h = 32;
  int input_w = 16;
  int L_max = 32;  // token capacity including SOS and EOS
  int vocab_size = 128;
  int text_layers = 2;
  int heads = 4;
  int mlp_ratio = 2;
  double drop_path_rate = 0.1;
  int K = 4;  // stripe / semantic group count
  // When set, every encoded sequence is padded to L_max with masked rows.
  // Off by default: unpadded sequences skip dead rows entirely.
  bool pad_sequences = false;

  int stride_product() const { return 4; }
  int feature_h() const { return input_h / stride_product(); }
  int feature_w() const { return input_w / stride_product(); }

  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Whitespace tokenizer vocabulary.  Ids 0 and 1 are reserved for the SOS
// and EOS markers; caption words start at 2.
class Vocabulary {
 public:
  static constexpr int kSos = 0;
  static constexpr int kEos = 1;

  Vocabulary();

  // Adds a word if absent; returns its id either way.
  int add_word(const std::string& w);
  bool contains(const std::string& w) const;
  int id_of(const std::string& w) const;  // VocabularyError on unknown word
  const std::string& word(int id) const;  // VocabularyError on bad id
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  // Splits on whitespace and maps every word; VocabularyError on unknowns.
  std::vector<int> encode_caption(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

  // Rebuilds from an ordered word list (manifest round trip).  The first
  // two entries must be the reserved markers.
  static Vocabulary from_words(const std::vector<std::string>& words);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

// Collects attention distributions (values only) when passed to a forward
// call; used by normalization-invariant tests, never by the training path.
struct AttentionProbe {
  std::vector<Tensor> distributions;
};

// Encoded token sequence: per-token features plus the mask and EOS
// bookkeeping every attention consumer needs.
struct TextFeatureSequence {
  Var features;            // L x C_T
  std::vector<char> mask;  // length L; nonzero marks a real token
  int eos_index = -1;
  bool truncated = false;  // input exceeded L_max - 2 and was cut

  int length() const { return static_cast<int>(mask.size()); }
  int valid_count() const;
};

// Standard multi-head attention: three input projections, scaled dot
// product per head with an optional key mask, column concat, output
// projection.
class MultiHeadAttention {
 public:
  MultiHeadAttention(const std::string& prefix, int dim, int heads, Rng& rng);

  // query: Lq x dim, keys/values: Lk x dim.  key_mask empty = all valid.
  Var forward(Graph& g, Var query, Var keys, Var values,
              const std::vector<char>& key_mask, AttentionProbe* probe = nullptr);

  void collect(std::vector<Parameter*>& out);
  int dim() const { return dim_; }

 private:
  int dim_;
  int heads_;
  Parameter wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
};

// Learned-query attention pooling over a set of position features.  The
// weights are softmax((X Wk^T + bk) q / sqrt(dim)); the output is the
// weighted sum of the raw inputs, so a single position pools to itself
// exactly and a zero query pools to the arithmetic mean.
class AttentionPool {
 public:
  AttentionPool(const std::string& prefix, int dim, Rng& rng);

  // rows: P x dim.  mask empty = all valid; all-masked input throws
  // DegenerateInputError.
  Var forward(Graph& g, Var rows, const std::vector<char>& mask,
              AttentionProbe* probe = nullptr);

  void collect(std::vector<Parameter*>& out);

 private:
  int dim_;
  Parameter wk_, bk_, query_;
};

// Three-block convolutional encoder: 3x3 conv, channel layer norm, GELU,
// then 2x spatial average pooling for the first two blocks; the last block
// keeps stride 1.  Widths run C/4, C/2, C.
class VisualEncoder {
 public:
  VisualEncoder(const EncoderConfig& cfg, const std::string& prefix, Rng& rng);

  // image: 3 x input_h x input_w.  Returns the C x H x W map.
  Var encode(Graph& g, const Tensor& image);

  void collect(std::vector<Parameter*>& out);
  const EncoderConfig& config() const { return cfg_; }

 private:
  struct Block {
    Parameter conv_w, conv_b, ln_g, ln_b;
    bool pool = false;
  };
  EncoderConfig cfg_;
  std::vector<Block> blocks_;
};

// Pre-norm transformer text encoder with learned token and position
// embeddings.  Stochastic depth (inverted scaling) applies per residual
// branch in training mode, driven by the caller's RNG so runs replay
// exactly.  The EOS row times a learned C_T -> C projection is the global
// text embedding.
class TextEncoder {
 public:
  TextEncoder(const EncoderConfig& cfg, const std::string& prefix, Rng& rng);

  // tokens: caption word ids, without SOS/EOS framing.  Overlong input is
  // truncated to capacity with the `truncated` flag set.
  TextFeatureSequence encode(Graph& g, const std::vector<int>& tokens, bool training,
                             Rng* droppath_rng, AttentionProbe* probe = nullptr);

  // EOS row -> C-vector global embedding.
  Var project_eos(Graph& g, const TextFeatureSequence& seq);

  void collect(std::vector<Parameter*>& out);
  const EncoderConfig& config() const { return cfg_; }

 private:
  struct Layer {
    Parameter ln1_g, ln1_b;
    MultiHeadAttention attn;
    Parameter ln2_g, ln2_b;
    Parameter fc1_w, fc1_b, fc2_w, fc2_b;

    Layer(const std::string& prefix, const EncoderConfig& cfg, Rng& rng);
  };

  EncoderConfig cfg_;
  Parameter tok_embed_, pos_embed_;
  std::vector<Layer> layers_;
  Parameter lnf_g_, lnf_b_;
  Parameter proj_;  // C x C_T, applied as row * proj^T
};

// Uniform horizontal split of a C x H x W map into K stripes of shape
// C x (H/K) x W, top to bottom.  Throws ConfigError when K does not divide
// H.
std::vector<Tensor> partition_stripes(const Tensor& chw, int K);

// Same split on the graph side, operating on the pixel-major (H*W) x C row
// matrix produced by chw_to_pxc: stripe k covers pixel rows
// [k*(H/K)*W, (k+1)*(H/K)*W).  Concatenating the results reproduces the
// input rows exactly.
std::vector<Var> partition_stripe_rows(Var pixel_rows, int H, int W, int K);

// Layer-norm epsilon used across all encoder and block normalizations.
inline constexpr double kLnEps = 1e-5;

}  // namespace vgsg
