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

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "test_util.hpp"
#include "vgsg/error.hpp"
#include "vgsg/evaluator.hpp"
#include "vgsg/synthdata.hpp"

using namespace vgsg;
using doctest::Contains;
using vgsg_test::max_abs_diff;
using vgsg_test::rand_tensor;

namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("vgsg_eval_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

Tensor matrix_from(std::vector<int> shape, const std::vector<double>& values) {
  Tensor t(std::move(shape));
  REQUIRE(t.size() == static_cast<std::int64_t>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) t[static_cast<std::int64_t>(i)] = values[i];
  return t;
}

// Reference ranking built the slow way: materialize the full descending
// order with gallery position as the tie key, then scan it.
std::vector<int> reference_order(const Tensor& sim, int q) {
  const int ng = sim.dim(1);
  std::vector<std::pair<double, int>> entries;
  for (int j = 0; j < ng; ++j) entries.emplace_back(sim[q * ng + j], j);
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<int> order;
  for (const auto& e : entries) order.push_back(e.second);
  return order;
}

double reference_rank_k(const Tensor& sim, const std::vector<int>& qids,
                        const std::vector<int>& gids, int k) {
  const int nq = sim.dim(0);
  int hits = 0;
  for (int q = 0; q < nq; ++q) {
    std::vector<int> order = reference_order(sim, q);
    const int top = std::min<int>(k, static_cast<int>(order.size()));
    for (int r = 0; r < top; ++r) {
      if (gids[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] ==
          qids[static_cast<std::size_t>(q)]) {
        ++hits;
        break;
      }
    }
  }
  return 100.0 * hits / nq;
}

double reference_map(const Tensor& sim, const std::vector<int>& qids,
                     const std::vector<int>& gids) {
  const int nq = sim.dim(0);
  double total = 0.0;
  for (int q = 0; q < nq; ++q) {
    std::vector<int> order = reference_order(sim, q);
    int hits = 0;
    double ap = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (gids[static_cast<std::size_t>(order[r])] == qids[static_cast<std::size_t>(q)]) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(r + 1);
      }
    }
    total += ap / hits;
  }
  return 100.0 * total / nq;
}

double cosine_of(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> flatten_entry(const Tensor& global, const std::vector<Tensor>& locals,
                                  bool with_locals) {
  std::vector<double> out;
  if (!with_locals) {
    for (std::int64_t i = 0; i < global.size(); ++i) out.push_back(global[i]);
    return out;
  }
  for (const Tensor& l : locals) {
    for (std::int64_t i = 0; i < l.size(); ++i) out.push_back(l[i]);
  }
  return out;
}

RetrievalIndex random_index(int nq, int ng, int k, int c, Rng& rng) {
  RetrievalIndex index;
  index.K = k;
  for (int i = 0; i < nq; ++i) {
    index.query_global.push_back(rand_tensor({c}, rng));
    std::vector<Tensor> locals;
    for (int j = 0; j < k; ++j) locals.push_back(rand_tensor({c}, rng));
    index.query_locals.push_back(std::move(locals));
    index.query_identity.push_back(i);
  }
  for (int i = 0; i < ng; ++i) {
    index.gallery_global.push_back(rand_tensor({c}, rng));
    std::vector<Tensor> locals;
    for (int j = 0; j < k; ++j) locals.push_back(rand_tensor({c}, rng));
    index.gallery_locals.push_back(std::move(locals));
    index.gallery_identity.push_back(i);
  }
  return index;
}

EncoderConfig small_encoder() {
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
  cfg.drop_path_rate = 0.1;
  cfg.K = 2;
  return cfg;
}

Dataset small_dataset() {
  DatasetConfig dc;
  dc.k = 2;
  dc.image_h = 8;
  dc.image_w = 8;
  dc.train_identities = 6;
  dc.test_identities = 3;
  dc.samples_per_identity = 2;
  dc.noise_level = 0.05;
  return generate_dataset(77, dc);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  REQUIRE(static_cast<bool>(is.read(reinterpret_cast<char*>(b), 4)));
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

float read_f32(std::istream& is) {
  std::uint32_t v = read_u32(is);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace

TEST_CASE("a diagonal similarity matrix scores perfectly") {
  std::vector<double> values(25, 0.0);
  for (int i = 0; i < 5; ++i) values[static_cast<std::size_t>(i * 5 + i)] = 1.0;
  Tensor sim = matrix_from({5, 5}, values);
  std::vector<int> ids = {0, 1, 2, 3, 4};
  CHECK(rank_k(sim, ids, ids, 1) == 100.0);
  CHECK(rank_k(sim, ids, ids, 5) == 100.0);
  CHECK(mean_average_precision(sim, ids, ids) == 100.0);
}

TEST_CASE("a match buried at position six fails top-5 and passes top-10") {
  std::vector<double> row;
  for (int j = 0; j < 10; ++j) row.push_back(1.0 - 0.1 * j);
  Tensor sim = matrix_from({1, 10}, row);
  std::vector<int> qids = {7};
  std::vector<int> gids = {0, 1, 2, 3, 4, 7, 6, 5, 8, 9};  // match sits sixth
  CHECK(rank_k(sim, qids, gids, 5) == 0.0);
  CHECK(rank_k(sim, qids, gids, 6) == 100.0);
  CHECK(rank_k(sim, qids, gids, 10) == 100.0);
  CHECK(mean_average_precision(sim, qids, gids) == doctest::Approx(100.0 / 6.0));

  MetricsReport rep = evaluate_direction(sim, qids, gids, "text-to-image");
  REQUIRE(rep.per_query_ranks.size() == 1);
  CHECK(rep.per_query_ranks[0] == 6);
  CHECK(rep.rank5 == 0.0);
  CHECK(rep.rank10 == 100.0);
  CHECK(rep.line().find("text-to-image") == 0);
  CHECK(rep.line().find("map=") != std::string::npos);
}

TEST_CASE("average precision follows the hand-computed example") {
  // Query 0 finds its match first (AP 1), query 1 second (AP 1/2).
  Tensor sim = matrix_from({2, 2}, {0.9, 0.1, 0.8, 0.2});
  std::vector<int> qids = {0, 1};
  std::vector<int> gids = {0, 1};
  CHECK(mean_average_precision(sim, qids, gids) == 75.0);
}

TEST_CASE("metrics agree exactly with a full-sort reference") {
  Rng rng(1234);
  for (int trial = 0; trial < 40; ++trial) {
    const int nq = 1 + static_cast<int>(rng.uniform_int(30));
    const int ng = 5 + static_cast<int>(rng.uniform_int(36));
    Tensor sim({nq, ng});
    for (std::int64_t i = 0; i < sim.size(); ++i) sim[i] = rng.uniform(-2.0, 2.0);
    // Inject exact duplicates so the tie rule matters.
    for (int d = 0; d < ng / 2; ++d) {
      std::int64_t a = static_cast<std::int64_t>(rng.uniform_int(static_cast<int>(sim.size())));
      std::int64_t b = static_cast<std::int64_t>(rng.uniform_int(static_cast<int>(sim.size())));
      sim[a] = sim[b];
    }
    // Gallery carries every identity 0..4 at least once so ground truth
    // always exists.
    std::vector<int> gids, qids;
    for (int j = 0; j < ng; ++j) gids.push_back(j < 5 ? j : static_cast<int>(rng.uniform_int(5)));
    for (int q = 0; q < nq; ++q) qids.push_back(static_cast<int>(rng.uniform_int(5)));

    for (int k : {1, 5, 10}) {
      CHECK(rank_k(sim, qids, gids, k) == reference_rank_k(sim, qids, gids, k));
    }
    CHECK(mean_average_precision(sim, qids, gids) ==
          doctest::Approx(reference_map(sim, qids, gids)).epsilon(1e-12));
  }
}

TEST_CASE("ties resolve to the earliest gallery entry") {
  Tensor sim = matrix_from({1, 4}, {0.5, 0.5, 0.5, 0.5});
  std::vector<int> qids = {3};
  CHECK(rank_k(sim, qids, {3, 0, 0, 3}, 1) == 100.0);
  CHECK(rank_k(sim, qids, {0, 0, 0, 3}, 1) == 0.0);
  CHECK(rank_k(sim, qids, {0, 0, 0, 3}, 3) == 0.0);
  CHECK(rank_k(sim, qids, {0, 0, 0, 3}, 4) == 100.0);
  MetricsReport rep = evaluate_direction(sim, qids, {0, 0, 0, 3}, "text-to-image");
  CHECK(rep.per_query_ranks[0] == 4);
}

TEST_CASE("metrics reject impossible queries and bad cutoffs") {
  Tensor sim = matrix_from({1, 2}, {0.3, 0.1});
  std::vector<int> qids = {9};
  std::vector<int> gids = {0, 1};
  CHECK_THROWS_WITH_AS(rank_k(sim, qids, gids, 1), Contains("query 0"), ProtocolError);
  CHECK_THROWS_AS(mean_average_precision(sim, qids, gids), ProtocolError);
  CHECK_THROWS_AS(rank_k(sim, {0}, gids, 0), ConfigError);
}

TEST_CASE("similarity matrix equals a per-pair cosine loop") {
  Rng rng(42);
  RetrievalIndex index = random_index(4, 5, 2, 6, rng);
  Tensor sim = similarity_matrix(index);
  REQUIRE(sim.dim(0) == 4);
  REQUIRE(sim.dim(1) == 5);
  for (int q = 0; q < 4; ++q) {
    for (int j = 0; j < 5; ++j) {
      double expect =
          cosine_of(flatten_entry(index.query_global[q], index.query_locals[q], false),
                    flatten_entry(index.gallery_global[j], index.gallery_locals[j], false)) +
          cosine_of(flatten_entry(index.query_global[q], index.query_locals[q], true),
                    flatten_entry(index.gallery_global[j], index.gallery_locals[j], true));
      CHECK(sim[q * 5 + j] == doctest::Approx(expect).epsilon(1e-12));
      CHECK(sim[q * 5 + j] >= -2.0);
      CHECK(sim[q * 5 + j] <= 2.0);
    }
  }

  // An identical pair saturates at 2 and dominates its row.
  index.gallery_global[2] = index.query_global[1];
  index.gallery_locals[2] = index.query_locals[1];
  sim = similarity_matrix(index);
  CHECK(sim[1 * 5 + 2] == doctest::Approx(2.0));
  for (int j = 0; j < 5; ++j) CHECK(sim[1 * 5 + 2] >= sim[1 * 5 + j]);

  // Global-only index stays within the single-cosine range.
  RetrievalIndex global_only = random_index(3, 3, 0, 6, rng);
  global_only.gallery_global[0] = global_only.query_global[0];
  Tensor gsim = similarity_matrix(global_only);
  CHECK(gsim[0] == doctest::Approx(1.0));
  for (std::int64_t i = 0; i < gsim.size(); ++i) {
    CHECK(gsim[i] >= -1.0);
    CHECK(gsim[i] <= 1.0);
  }
}

TEST_CASE("zero-norm embeddings are reported with their side and position") {
  Rng rng(7);
  RetrievalIndex index = random_index(3, 3, 1, 4, rng);
  for (std::int64_t i = 0; i < 4; ++i) index.query_global[1][i] = 0.0;
  for (std::int64_t i = 0; i < 4; ++i) index.query_locals[1][0][i] = 0.0;
  CHECK_THROWS_WITH_AS(similarity_matrix(index), Contains("query sample 1"),
                       DegenerateInputError);

  index = random_index(3, 3, 1, 4, rng);
  for (std::int64_t i = 0; i < 4; ++i) index.gallery_global[2][i] = 0.0;
  for (std::int64_t i = 0; i < 4; ++i) index.gallery_locals[2][0][i] = 0.0;
  CHECK_THROWS_WITH_AS(similarity_matrix(index), Contains("gallery sample 2"),
                       DegenerateInputError);
}

TEST_CASE("index construction encodes each sample once and never runs the teacher") {
  Dataset ds = small_dataset();
  Model model(small_encoder(), variant_options("full"), ds.cfg.train_identities, 5);
  model.reset_pass_counters();
  model.teacher()->reset_attention_calls();

  RetrievalIndex index = build_index(model, ds, Split::kTest);
  const int n = ds.cfg.test_identities * ds.cfg.samples_per_identity;
  CHECK(model.image_passes() == n);
  CHECK(model.text_passes() == n);
  CHECK(model.teacher()->attention_calls() == 0);
  CHECK(index.K == small_encoder().K);
  REQUIRE(static_cast<int>(index.query_global.size()) == n);
  REQUIRE(static_cast<int>(index.gallery_global.size()) == n);
  for (int i = 0; i < n; ++i) {
    CHECK(index.query_identity[static_cast<std::size_t>(i)] >= ds.cfg.train_identities);
    CHECK(index.query_identity[static_cast<std::size_t>(i)] < ds.cfg.total_identities());
    CHECK(index.query_identity[static_cast<std::size_t>(i)] ==
          index.gallery_identity[static_cast<std::size_t>(i)]);
  }

  // Evaluation is deterministic: a rebuilt index is bit-identical.
  RetrievalIndex again = build_index(model, ds, Split::kTest);
  for (int i = 0; i < n; ++i) {
    CHECK(max_abs_diff(index.query_global[static_cast<std::size_t>(i)],
                       again.query_global[static_cast<std::size_t>(i)]) == 0.0);
    CHECK(max_abs_diff(index.gallery_global[static_cast<std::size_t>(i)],
                       again.gallery_global[static_cast<std::size_t>(i)]) == 0.0);
    for (int k = 0; k < index.K; ++k) {
      CHECK(max_abs_diff(index.query_locals[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)],
                         again.query_locals[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)]) ==
            0.0);
    }
  }

  CHECK_THROWS_AS(build_index(model, ds, Split::kVal), ValidationError);

  Model baseline(small_encoder(), variant_options("baseline"), ds.cfg.train_identities, 5);
  RetrievalIndex plain = build_index(baseline, ds, Split::kTest);
  CHECK(plain.K == 0);
  CHECK(plain.query_locals[0].empty());
  std::vector<MetricsReport> reports = evaluate_index(plain);
  REQUIRE(reports.size() == 2);
}

TEST_CASE("both retrieval directions come from one similarity matrix") {
  Rng rng(9);
  RetrievalIndex index = random_index(5, 5, 1, 6, rng);
  for (int i = 0; i < 5; ++i) {
    index.gallery_global[static_cast<std::size_t>(i)] =
        index.query_global[static_cast<std::size_t>(i)];
    index.gallery_locals[static_cast<std::size_t>(i)] =
        index.query_locals[static_cast<std::size_t>(i)];
  }
  std::vector<MetricsReport> reports = evaluate_index(index);
  REQUIRE(reports.size() == 2);
  CHECK(reports[0].direction == "text-to-image");
  CHECK(reports[1].direction == "image-to-text");
  for (const MetricsReport& r : reports) {
    CHECK(r.rank1 == 100.0);
    CHECK(r.map == 100.0);
    for (int rank : r.per_query_ranks) CHECK(rank == 1);
  }
}

TEST_CASE("embedding export writes the documented binary layout") {
  Rng rng(21);
  RetrievalIndex index = random_index(2, 3, 1, 3, rng);
  TempDir tmp;
  export_embeddings(index, tmp.file("emb"));

  struct Side {
    const char* path;
    std::size_t count;
    const std::vector<Tensor>* global;
    const std::vector<std::vector<Tensor>>* locals;
  };
  const Side sides[] = {
      {"emb.text.bin", 2, &index.query_global, &index.query_locals},
      {"emb.image.bin", 3, &index.gallery_global, &index.gallery_locals},
  };
  for (const Side& side : sides) {
    CAPTURE(side.path);
    std::string path = tmp.file(side.path);
    REQUIRE(fs::exists(path));
    const std::size_t dim = 6;  // global 3 + one local of 3
    CHECK(fs::file_size(path) == 8 + 12 + side.count * dim * 4);
    std::ifstream is(path, std::ios::binary);
    char magic[8];
    REQUIRE(static_cast<bool>(is.read(magic, 8)));
    CHECK(std::memcmp(magic, "VGSGEMB1", 8) == 0);
    CHECK(read_u32(is) == side.count);
    CHECK(read_u32(is) == dim);
    CHECK(read_u32(is) == 1);
    for (std::size_t i = 0; i < side.count; ++i) {
      for (std::int64_t c = 0; c < 3; ++c) {
        CHECK(read_f32(is) ==
              doctest::Approx((*side.global)[i][c]).epsilon(1e-6));
      }
      for (std::int64_t c = 0; c < 3; ++c) {
        CHECK(read_f32(is) ==
              doctest::Approx((*side.locals)[i][0][c]).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("ablation report aggregates variants deterministically") {
  Dataset ds = small_dataset();
  TrainConfig base;
  base.epochs = 1;
  base.decay_epoch = 0;  // single epoch runs at the decayed rate
  base.base_lr = 1e-3;
  base.batch_size = 4;
  base.per_identity = 2;

  std::vector<std::string> variants = {"baseline", "full"};
  std::vector<std::uint64_t> seeds = {0, 1};
  AblationReport report = ablation_report(small_encoder(), base, ds, variants, seeds);
  REQUIRE(report.rows.size() == 4);
  CHECK(report.rows[0].variant == "baseline");
  CHECK(report.rows[0].direction == "text-to-image");
  CHECK(report.rows[1].direction == "image-to-text");
  CHECK(report.rows[2].variant == "full");
  for (const AblationRow& row : report.rows) {
    CHECK(!row.failed);
    CHECK(row.rank1 >= 0.0);
    CHECK(row.rank1 <= 100.0);
    CHECK(row.map >= 0.0);
    CHECK(row.map <= 100.0);
    CHECK(row.seed_median == row.rank1);
  }

  std::string csv = report.csv();
  CHECK(csv.rfind("variant,direction,rank1,rank5,rank10,map,seed_median\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);

  // Re-running the whole pipeline reproduces the bytes.
  AblationReport again = ablation_report(small_encoder(), base, ds, variants, seeds);
  CHECK(again.csv() == csv);
  CHECK(again.grid() == report.grid());

  CHECK_THROWS_AS(ablation_report(small_encoder(), base, ds, variants, {}), ConfigError);
}

TEST_CASE("a variant that cannot train is reported instead of aborting") {
  Dataset ds = small_dataset();
  TrainConfig base;
  base.epochs = 1;
  base.decay_epoch = 0;
  base.batch_size = 4;
  base.per_identity = 3;  // does not divide the batch
  AblationReport report = ablation_report(small_encoder(), base, ds, {"baseline"}, {0});
  REQUIRE(report.rows.size() == 2);
  for (const AblationRow& row : report.rows) {
    CHECK(row.failed);
    CHECK(!row.error.empty());
  }
  CHECK(report.csv().find("nan") != std::string::npos);
  CHECK(report.grid().find("FAILED") != std::string::npos);
}
