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

#include "vgsg/evaluator.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "vgsg/error.hpp"

namespace vgsg {

namespace {

std::vector<int> caption_tokens(const Dataset& ds, const SynthSample& s) {
  std::vector<int> tokens;
  tokens.reserve(s.caption.size());
  for (const std::string& w : s.caption) tokens.push_back(ds.vocab.id_of(w));
  return tokens;
}

}  // namespace

RetrievalIndex build_index(Model& model, const Dataset& ds, Split split) {
  std::vector<int> indices = ds.sample_indices(split);
  if (indices.empty()) {
    throw ValidationError("cannot build a retrieval index over an empty split");
  }
  RetrievalIndex out;
  out.K = model.options().has_local_branch() ? model.config().K : 0;
  for (int idx : indices) {
    const SynthSample& s = ds.samples[static_cast<std::size_t>(idx)];
    {
      Graph g;
      ImageEmbedding e = model.encode_image(g, s.image);
      out.gallery_global.push_back(e.global_feat.val());
      std::vector<Tensor> locals;
      for (Var v : e.locals) locals.push_back(v.val());
      out.gallery_locals.push_back(std::move(locals));
      out.gallery_identity.push_back(s.identity);
    }
    {
      Graph g;
      std::vector<TextEmbedding> one;
      one.push_back(model.encode_text(g, caption_tokens(ds, s), false, nullptr));
      model.attach_text_locals(g, one, false);
      out.query_global.push_back(one[0].global_feat.val());
      std::vector<Tensor> locals;
      for (Var v : one[0].locals) locals.push_back(v.val());
      out.query_locals.push_back(std::move(locals));
      out.query_identity.push_back(s.identity);
    }
  }
  return out;
}

namespace {

// Concatenated, L2-normalized copy of one sample's vectors; throws naming
// the sample when the norm vanishes.
std::vector<double> normalized_concat(const std::vector<Tensor>& parts, const std::string& side,
                                      std::size_t index) {
  std::vector<double> flat;
  for (const Tensor& t : parts) {
    for (std::int64_t i = 0; i < t.size(); ++i) flat.push_back(t[i]);
  }
  double sq = 0.0;
  for (double v : flat) sq += v * v;
  double norm = std::sqrt(sq);
  if (norm < 1e-150) {
    throw DegenerateInputError(side + " sample " + std::to_string(index) +
                               " has a zero-norm embedding");
  }
  for (double& v : flat) v /= norm;
  return flat;
}

}  // namespace

Tensor similarity_matrix(const RetrievalIndex& index) {
  const int nq = static_cast<int>(index.query_global.size());
  const int ng = static_cast<int>(index.gallery_global.size());
  if (nq == 0 || ng == 0) throw ValidationError("similarity matrix over an empty index");

  std::vector<std::vector<double>> qg(static_cast<std::size_t>(nq)),
      gg(static_cast<std::size_t>(ng)), ql(static_cast<std::size_t>(nq)),
      gl(static_cast<std::size_t>(ng));
  for (int q = 0; q < nq; ++q) {
    qg[static_cast<std::size_t>(q)] =
        normalized_concat({index.query_global[static_cast<std::size_t>(q)]}, "query",
                          static_cast<std::size_t>(q));
    if (index.K > 0) {
      ql[static_cast<std::size_t>(q)] =
          normalized_concat(index.query_locals[static_cast<std::size_t>(q)], "query",
                            static_cast<std::size_t>(q));
    }
  }
  for (int g = 0; g < ng; ++g) {
    gg[static_cast<std::size_t>(g)] =
        normalized_concat({index.gallery_global[static_cast<std::size_t>(g)]}, "gallery",
                          static_cast<std::size_t>(g));
    if (index.K > 0) {
      gl[static_cast<std::size_t>(g)] =
          normalized_concat(index.gallery_locals[static_cast<std::size_t>(g)], "gallery",
                            static_cast<std::size_t>(g));
    }
  }

  Tensor sim({nq, ng});
  for (int q = 0; q < nq; ++q) {
    for (int g = 0; g < ng; ++g) {
      const std::vector<double>& a = qg[static_cast<std::size_t>(q)];
      const std::vector<double>& b = gg[static_cast<std::size_t>(g)];
      // Clamp against rounding: normalized dots may exceed 1 by an ulp.
      double s = std::clamp(std::inner_product(a.begin(), a.end(), b.begin(), 0.0), -1.0, 1.0);
      if (index.K > 0) {
        const std::vector<double>& c = ql[static_cast<std::size_t>(q)];
        const std::vector<double>& d = gl[static_cast<std::size_t>(g)];
        s += std::clamp(std::inner_product(c.begin(), c.end(), d.begin(), 0.0), -1.0, 1.0);
      }
      sim[static_cast<std::int64_t>(q) * ng + g] = s;
    }
  }
  return sim;
}

namespace {

void check_metric_inputs(const Tensor& sim, const std::vector<int>& query_ids,
                         const std::vector<int>& gallery_ids) {
  if (sim.rank() != 2) throw DimensionError("similarity matrix must be rank 2");
  if (sim.dim(0) != static_cast<int>(query_ids.size()) ||
      sim.dim(1) != static_cast<int>(gallery_ids.size())) {
    throw DimensionError("similarity matrix shape does not match the label lists");
  }
}

// Gallery indices ranked best-first for one query; equal similarities keep
// gallery order.
std::vector<int> ranked_gallery(const Tensor& sim, int q, int ng) {
  std::vector<int> order(static_cast<std::size_t>(ng));
  std::iota(order.begin(), order.end(), 0);
  const double* row = sim.data() + static_cast<std::int64_t>(q) * ng;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return row[a] > row[b]; });
  return order;
}

void require_ground_truth(int q, int qid, const std::vector<int>& gallery_ids) {
  for (int gid : gallery_ids) {
    if (gid == qid) return;
  }
  throw ProtocolError("query " + std::to_string(q) + " has no correct gallery entry");
}

}  // namespace

double rank_k(const Tensor& sim, const std::vector<int>& query_ids,
              const std::vector<int>& gallery_ids, int k) {
  check_metric_inputs(sim, query_ids, gallery_ids);
  if (k < 1) throw ConfigError("rank cutoff must be at least 1");
  const int nq = sim.dim(0);
  const int ng = sim.dim(1);
  long hits = 0;
  for (int q = 0; q < nq; ++q) {
    require_ground_truth(q, query_ids[static_cast<std::size_t>(q)], gallery_ids);
    std::vector<int> order = ranked_gallery(sim, q, ng);
    const int top = std::min(k, ng);
    for (int r = 0; r < top; ++r) {
      if (gallery_ids[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] ==
          query_ids[static_cast<std::size_t>(q)]) {
        ++hits;
        break;
      }
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(nq);
}

double mean_average_precision(const Tensor& sim, const std::vector<int>& query_ids,
                              const std::vector<int>& gallery_ids) {
  check_metric_inputs(sim, query_ids, gallery_ids);
  const int nq = sim.dim(0);
  const int ng = sim.dim(1);
  double ap_sum = 0.0;
  for (int q = 0; q < nq; ++q) {
    require_ground_truth(q, query_ids[static_cast<std::size_t>(q)], gallery_ids);
    std::vector<int> order = ranked_gallery(sim, q, ng);
    long relevant_seen = 0;
    double precision_sum = 0.0;
    for (int r = 0; r < ng; ++r) {
      if (gallery_ids[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] ==
          query_ids[static_cast<std::size_t>(q)]) {
        ++relevant_seen;
        precision_sum += static_cast<double>(relevant_seen) / static_cast<double>(r + 1);
      }
    }
    ap_sum += precision_sum / static_cast<double>(relevant_seen);
  }
  return 100.0 * ap_sum / static_cast<double>(nq);
}

std::string MetricsReport::line() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s rank1=%.4f rank5=%.4f rank10=%.4f map=%.4f",
                direction.c_str(), rank1, rank5, rank10, map);
  return std::string(buf);
}

MetricsReport evaluate_direction(const Tensor& sim, const std::vector<int>& query_ids,
                                 const std::vector<int>& gallery_ids,
                                 const std::string& direction) {
  MetricsReport r;
  r.direction = direction;
  r.rank1 = rank_k(sim, query_ids, gallery_ids, 1);
  r.rank5 = rank_k(sim, query_ids, gallery_ids, 5);
  r.rank10 = rank_k(sim, query_ids, gallery_ids, 10);
  r.map = mean_average_precision(sim, query_ids, gallery_ids);
  const int nq = sim.dim(0);
  const int ng = sim.dim(1);
  for (int q = 0; q < nq; ++q) {
    std::vector<int> order = ranked_gallery(sim, q, ng);
    int best = ng;
    for (int rk = 0; rk < ng; ++rk) {
      if (gallery_ids[static_cast<std::size_t>(order[static_cast<std::size_t>(rk)])] ==
          query_ids[static_cast<std::size_t>(q)]) {
        best = rk + 1;
        break;
      }
    }
    r.per_query_ranks.push_back(best);
  }
  return r;
}

std::vector<MetricsReport> evaluate_index(const RetrievalIndex& index) {
  Tensor sim = similarity_matrix(index);
  const int nq = sim.dim(0);
  const int ng = sim.dim(1);
  Tensor simT({ng, nq});
  for (int q = 0; q < nq; ++q) {
    for (int g = 0; g < ng; ++g) {
      simT[static_cast<std::int64_t>(g) * nq + q] = sim[static_cast<std::int64_t>(q) * ng + g];
    }
  }
  std::vector<MetricsReport> out;
  out.push_back(evaluate_direction(sim, index.query_identity, index.gallery_identity,
                                   "text-to-image"));
  out.push_back(evaluate_direction(simT, index.gallery_identity, index.query_identity,
                                   "image-to-text"));
  return out;
}

namespace {

void write_embedding_file(const std::string& path, const std::vector<Tensor>& globals,
                          const std::vector<std::vector<Tensor>>& locals, int K) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IngestionError("cannot write embedding file " + path);
  os.write("VGSGEMB1", 8);
  auto put_u32 = [&](std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  const std::uint32_t count = static_cast<std::uint32_t>(globals.size());
  std::uint32_t dim = count == 0 ? 0 : static_cast<std::uint32_t>(globals[0].size());
  if (count > 0 && K > 0) {
    for (const Tensor& t : locals[0]) dim += static_cast<std::uint32_t>(t.size());
  }
  put_u32(count);
  put_u32(dim);
  put_u32(static_cast<std::uint32_t>(K));
  auto put_f32 = [&](double d) {
    float f = static_cast<float>(d);
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  for (std::size_t r = 0; r < globals.size(); ++r) {
    for (std::int64_t i = 0; i < globals[r].size(); ++i) put_f32(globals[r][i]);
    if (K > 0) {
      for (const Tensor& t : locals[r]) {
        for (std::int64_t i = 0; i < t.size(); ++i) put_f32(t[i]);
      }
    }
  }
  os.flush();
  if (!os) throw IngestionError("cannot write embedding file " + path);
}

}  // namespace

void export_embeddings(const RetrievalIndex& index, const std::string& prefix) {
  write_embedding_file(prefix + ".text.bin", index.query_global, index.query_locals, index.K);
  write_embedding_file(prefix + ".image.bin", index.gallery_global, index.gallery_locals,
                       index.K);
}

namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return std::string(buf);
}

}  // namespace

std::string AblationReport::csv() const {
  std::ostringstream os;
  os << "variant,direction,rank1,rank5,rank10,map,seed_median\n";
  for (const AblationRow& r : rows) {
    if (r.failed) {
      os << r.variant << "," << r.direction << ",nan,nan,nan,nan,nan\n";
    } else {
      os << r.variant << "," << r.direction << "," << fmt_metric(r.rank1) << ","
         << fmt_metric(r.rank5) << "," << fmt_metric(r.rank10) << "," << fmt_metric(r.map)
         << "," << fmt_metric(r.seed_median) << "\n";
    }
  }
  return os.str();
}

std::string AblationReport::grid() const {
  std::vector<std::vector<std::string>> cells;
  cells.push_back({"variant", "direction", "rank1", "rank5", "rank10", "map", "seed_median"});
  for (const AblationRow& r : rows) {
    if (r.failed) {
      cells.push_back({r.variant, r.direction, "FAILED: " + r.error, "", "", "", ""});
    } else {
      cells.push_back({r.variant, r.direction, fmt_metric(r.rank1), fmt_metric(r.rank5),
                       fmt_metric(r.rank10), fmt_metric(r.map), fmt_metric(r.seed_median)});
    }
  }
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream os;
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      os << row[c];
      if (c + 1 < row.size()) {
        os << std::string(width[c] - row[c].size() + 2, ' ');
      }
    }
    os << "\n";
  }
  return os.str();
}

namespace {

// Both rows (one per direction) for one spec.
std::vector<AblationRow> ablation_rows(const EncoderConfig& enc, const TrainConfig& base,
                                       const Dataset& ds, const AblationSpec& spec,
                                       const std::vector<std::uint64_t>& seeds) {
  std::vector<MetricsReport> text_runs, image_runs;
  std::string error;
  bool failed = false;
  for (std::uint64_t seed : seeds) {
    try {
      TrainConfig cfg = base;
      cfg.model = spec.options;
      cfg.seed = seed;
      Trainer trainer(enc, cfg, ds, 0);
      trainer.run();
      RetrievalIndex index = build_index(trainer.model(), ds, Split::kTest);
      std::vector<MetricsReport> reports = evaluate_index(index);
      text_runs.push_back(reports[0]);
      image_runs.push_back(reports[1]);
    } catch (const Error& e) {
      failed = true;
      error = e.what();
      break;
    }
  }
  std::vector<AblationRow> rows;
  for (const char* direction : {"text-to-image", "image-to-text"}) {
    AblationRow row;
    row.variant = spec.label;
    row.direction = direction;
    if (failed) {
      row.failed = true;
      row.error = error;
    } else {
      const std::vector<MetricsReport>& runs =
          std::strcmp(direction, "text-to-image") == 0 ? text_runs : image_runs;
      std::vector<double> r1, r5, r10, mp;
      for (const MetricsReport& m : runs) {
        r1.push_back(m.rank1);
        r5.push_back(m.rank5);
        r10.push_back(m.rank10);
        mp.push_back(m.map);
      }
      row.rank1 = median_of(r1);
      row.rank5 = median_of(r5);
      row.rank10 = median_of(r10);
      row.map = median_of(mp);
      row.seed_median = row.rank1;
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

AblationReport ablation_report(const EncoderConfig& enc, const TrainConfig& base,
                               const Dataset& ds, const std::vector<AblationSpec>& specs,
                               const std::vector<std::uint64_t>& seeds, int jobs) {
  if (seeds.empty()) throw ConfigError("ablation report needs at least one seed");
  if (jobs < 1) throw ConfigError("ablation jobs must be at least 1");

  std::vector<std::vector<AblationRow>> per_spec(specs.size());
  if (jobs == 1 || specs.size() <= 1) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      per_spec[i] = ablation_rows(enc, base, ds, specs[i], seeds);
    }
  } else {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= specs.size()) return;
        per_spec[i] = ablation_rows(enc, base, ds, specs[i], seeds);
      }
    };
    std::vector<std::thread> pool;
    std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(jobs), specs.size());
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  AblationReport report;
  for (const std::vector<AblationRow>& rows : per_spec) {
    for (const AblationRow& row : rows) report.rows.push_back(row);
  }
  return report;
}

AblationReport ablation_report(const EncoderConfig& enc, const TrainConfig& base,
                               const Dataset& ds, const std::vector<std::string>& variants,
                               const std::vector<std::uint64_t>& seeds) {
  std::vector<AblationSpec> specs;
  for (const std::string& name : variants) specs.push_back({name, variant_options(name)});
  return ablation_report(enc, base, ds, specs, seeds, 1);
}

}  // namespace vgsg
