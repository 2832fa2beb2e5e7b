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

#include <cstdint>
#include <string>
#include <vector>

#include "vgsg/model.hpp"
#include "vgsg/synthdata.hpp"
#include "vgsg/tensor.hpp"
#include "vgsg/trainer.hpp"

namespace vgsg {

// Frozen retrieval embeddings: queries are captions, gallery entries are
// images, both carrying one global vector and (when the local branch
// exists) K local vectors per sample.  Building the index touches each
// sample exactly once per side and never runs the teacher.
struct RetrievalIndex {
  int K = 0;  // 0 = global-only variant
  std::vector<Tensor> query_global;
  std::vector<std::vector<Tensor>> query_locals;
  std::vector<int> query_identity;
  std::vector<Tensor> gallery_global;
  std::vector<std::vector<Tensor>> gallery_locals;
  std::vector<int> gallery_identity;
};

// Encodes every sample of the split in evaluation mode.  ValidationError
// on an empty split.
RetrievalIndex build_index(Model& model, const Dataset& ds, Split split);

// Nq x Ng matrix of global-cosine plus local-cosine (when locals exist).
// DegenerateInputError names the offending sample on a zero-norm
// embedding.
Tensor similarity_matrix(const RetrievalIndex& index);

// Percentage of queries whose top-k gallery entries (ties broken by
// gallery order) contain a matching identity.  ProtocolError when a query
// has no correct gallery entry at all.
double rank_k(const Tensor& sim, const std::vector<int>& query_ids,
              const std::vector<int>& gallery_ids, int k);

// Percentage mean average precision over the full ranked gallery.
double mean_average_precision(const Tensor& sim, const std::vector<int>& query_ids,
                              const std::vector<int>& gallery_ids);

struct MetricsReport {
  std::string direction;
  double rank1 = 0.0;
  double rank5 = 0.0;
  double rank10 = 0.0;
  double map = 0.0;
  std::vector<int> per_query_ranks;  // 1-based rank of the first correct entry

  std::string line() const;
};

MetricsReport evaluate_direction(const Tensor& sim, const std::vector<int>& query_ids,
                                 const std::vector<int>& gallery_ids,
                                 const std::string& direction);

// Both retrieval directions from one similarity matrix: text-to-image as
// built, image-to-text through its transpose.
std::vector<MetricsReport> evaluate_index(const RetrievalIndex& index);

// Writes <prefix>.text.bin (caption side) and <prefix>.image.bin (image
// side).  Each file: magic "VGSGEMB1", little-endian u32 row count, u32
// row width, u32 K, then row-major 32-bit floats; rows are the global
// vector followed by the K local vectors.
void export_embeddings(const RetrievalIndex& index, const std::string& prefix);

struct AblationRow {
  std::string variant;
  std::string direction;
  double rank1 = 0.0;
  double rank5 = 0.0;
  double rank10 = 0.0;
  double map = 0.0;
  double seed_median = 0.0;  // median Rank-1, the headline column
  bool failed = false;
  std::string error;
};

struct AblationReport {
  std::vector<AblationRow> rows;

  std::string csv() const;   // fixed header, one row per variant and direction
  std::string grid() const;  // aligned plain-text table with failure notes
};

// A labeled model configuration for one comparison row pair.
struct AblationSpec {
  std::string label;
  ModelOptions options;
};

// Trains and evaluates each spec once per seed; metric columns are
// medians over the seeds.  A spec whose training throws is reported as a
// failed row instead of aborting the whole report.  Specs are independent
// runs, so jobs > 1 distributes them over that many threads; the report
// is assembled in spec order either way.
AblationReport ablation_report(const EncoderConfig& enc, const TrainConfig& base,
                               const Dataset& ds, const std::vector<AblationSpec>& specs,
                               const std::vector<std::uint64_t>& seeds, int jobs = 1);

// Convenience overload mapping preset variant names to their options.
AblationReport ablation_report(const EncoderConfig& enc, const TrainConfig& base,
                               const Dataset& ds, const std::vector<std::string>& variants,
                               const std::vector<std::uint64_t>& seeds);

}  // namespace vgsg
