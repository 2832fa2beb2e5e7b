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

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vgsg/encoders.hpp"
#include "vgsg/rng.hpp"
#include "vgsg/tensor.hpp"

namespace vgsg {

enum class Split { kTrain, kVal, kTest };

std::string split_name(Split s);
Split split_from_name(const std::string& name);  // unknown name -> ingestion error

struct DatasetConfig {
  int k = 4;
  int image_h = 32;
  int image_w = 16;
  int train_identities = 200;
  int test_identities = 50;
  int samples_per_identity = 4;
  double noise_level = 0.05;

  void validate() const;
  int total_identities() const { return train_identities + test_identities; }
};

struct SynthSample {
  int identity = 0;
  Split split = Split::kTrain;
  std::vector<std::string> caption;
  Tensor image;  // 3 x image_h x image_w, float-quantized
};

// A generated or loaded dataset.  Identity ids are dense: train identities
// occupy [0, train) and test identities [train, train + test), so a train
// identity id doubles as its classifier label.
struct Dataset {
  std::uint64_t seed = 0;
  DatasetConfig cfg;
  Vocabulary vocab;
  std::vector<SynthSample> samples;
  std::vector<std::vector<int>> part_attributes;  // per identity, k values

  std::vector<int> sample_indices(Split s) const;
};

// Color palette the band images draw from; color_word/color_synonym are
// the two caption spellings of each palette entry.
inline constexpr int kPaletteSize = 8;
const std::array<std::array<double, 3>, kPaletteSize>& band_palette();
const std::string& color_word(int value);
const std::string& color_synonym(int value);
const std::string& part_noun(int part);  // top-to-bottom region names

// The noise-free stacked-band rendering of an attribute vector.
Tensor render_identity_image(const DatasetConfig& cfg, const std::vector<int>& attributes);

// Pure function of (seed, cfg): identity attribute vectors are sampled
// without collision, then every identity renders its samples from a derived
// per-identity stream.  noise_level 0 switches off the photometric noise
// and the geometric augmentations so images equal their clean renders.
Dataset generate_dataset(std::uint64_t seed, const DatasetConfig& cfg);

// Directory layout: manifest.txt (key value lines) plus samples.txt (one
// checksummed record per sample).
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

struct Batch {
  std::vector<int> sample_indices;  // size B
  std::vector<int> identities;      // matching identity label per entry
};

// B / per_identity distinct train identities with per_identity samples
// each, so every anchor sees an in-batch positive and negative.
Batch sample_batch(const Dataset& ds, Rng& rng, int batch_size, int per_identity);

}  // namespace vgsg
