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

#include "vgsg/graph.hpp"

#include <algorithm>
#include <cmath>

#include "vgsg/error.hpp"

namespace vgsg {

namespace debug {
bool flip_gelu_backward = false;
}

double Parameter::grad_abs_max() const {
  double m = 0.0;
  for (std::int64_t i = 0; i < grad.size(); ++i) m = std::max(m, std::abs(grad[i]));
  return m;
}

const Tensor& Var::val() const {
  if (!valid()) throw Error("Var::val on an empty handle");
  return g->value_of(id);
}

double scalar_of(Var v) {
  const Tensor& t = v.val();
  if (t.size() != 1) throw DimensionError("scalar_of: tensor has shape " + t.shape_str());
  return t[0];
}

Var Graph::constant(Tensor t) {
  int id = add_node(std::move(t), {}, nullptr, false);
  return {this, id};
}

Var Graph::leaf(Parameter& p) {
  int id = add_node(p.value, {}, nullptr, p.trainable);
  nodes_[static_cast<std::size_t>(id)].param = &p;
  return {this, id};
}

int Graph::add_node(Tensor value, std::vector<int> parents, BackFn back, bool needs) {
  Node n;
  n.value = std::move(value);
  n.parents = std::move(parents);
  n.back = std::move(back);
  n.needs_grad = needs;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

const Tensor& Graph::value_of(int id) const {
  return nodes_[static_cast<std::size_t>(id)].value;
}

Tensor& Graph::adjoint_of(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.has_adj) {
    n.adjoint = Tensor(n.value.shape());
    n.has_adj = true;
  }
  return n.adjoint;
}

bool Graph::has_adjoint(int id) const { return nodes_[static_cast<std::size_t>(id)].has_adj; }

bool Graph::needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

void Graph::backward(Var seed) {
  if (seed.g != this) throw Error("backward: seed from a different graph");
  const Node& s = nodes_[static_cast<std::size_t>(seed.id)];
  if (s.value.size() != 1) {
    throw DimensionError("backward: seed must be scalar, has shape " + s.value.shape_str());
  }
  adjoint_of(seed.id)[0] += 1.0;
  for (int id = seed.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_adj || !n.needs_grad) continue;
    if (n.param != nullptr) {
      if (n.param->trainable) {
        Tensor& g = n.param->grad;
        for (std::int64_t i = 0; i < g.size(); ++i) g[i] += n.adjoint[i];
      }
    } else if (n.back) {
      n.back(*this, id);
    }
  }
  // Reset adjoints so a later backward call starts clean; parameter
  // gradients accumulated above are left in place.
  for (Node& n : nodes_) {
    n.adjoint = Tensor();
    n.has_adj = false;
  }
}

namespace {

Graph* same_graph(Var a, Var b) {
  if (!a.valid() || !b.valid()) throw Error("operation on an empty Var");
  if (a.g != b.g) throw Error("operands live on different graphs");
  return a.g;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
  }
}

bool either_needs(Graph* g, Var a, Var b) {
  return g->needs_grad(a.id) || g->needs_grad(b.id);
}

// Row view of a rank-1 or rank-2 tensor: rank 1 counts as a single row.
void as_rows(const Tensor& t, int* rows, int* cols, const char* op) {
  if (t.rank() == 1) {
    *rows = 1;
    *cols = t.dim(0);
  } else if (t.rank() == 2) {
    *rows = t.dim(0);
    *cols = t.dim(1);
  } else {
    throw DimensionError(std::string(op) + ": expected rank 1 or 2, got shape " + t.shape_str());
  }
}

}  // namespace

Var add(Var a, Var b) {
  Graph* g = same_graph(a, b);
  const Tensor& ta = a.val();
  const Tensor& tb = b.val();
  require_same_shape(ta, tb, "add");
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
  int pa = a.id, pb = b.id;
  int id = g->add_node(std::move(out), {pa, pb},
                       [pa, pb](Graph& gr, int self) {
                         const Tensor& d = gr.adjoint_of(self);
                         if (gr.needs_grad(pa)) {
                           Tensor& da = gr.adjoint_of(pa);
                           for (std::int64_t i = 0; i < d.size(); ++i) da[i] += d[i];
                         }
                         if (gr.needs_grad(pb)) {
                           Tensor& db = gr.adjoint_of(pb);
                           for (std::int64_t i = 0; i < d.size(); ++i) db[i] += d[i];
                         }
                       },
                       either_needs(g, a, b));
  return {g, id};
}

Var sub(Var a, Var b) {
  Graph* g = same_graph(a, b);
  const Tensor& ta = a.val();
  const Tensor& tb = b.val();
  require_same_shape(ta, tb, "sub");
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] - tb[i];
  int pa = a.id, pb = b.id;
  int id = g->add_node(std::move(out), {pa, pb},
                       [pa, pb](Graph& gr, int self) {
                         const Tensor& d = gr.adjoint_of(self);
                         if (gr.needs_grad(pa)) {
                           Tensor& da = gr.adjoint_of(pa);
                           for (std::int64_t i = 0; i < d.size(); ++i) da[i] += d[i];
                         }
                         if (gr.needs_grad(pb)) {
                           Tensor& db = gr.adjoint_of(pb);
                           for (std::int64_t i = 0; i < d.size(); ++i) db[i] -= d[i];
                         }
                       },
                       either_needs(g, a, b));
  return {g, id};
}

Var mul(Var a, Var b) {
  Graph* g = same_graph(a, b);
  const Tensor& ta = a.val();
  const Tensor& tb = b.val();
  require_same_shape(ta, tb, "mul");
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
  int pa = a.id, pb = b.id;
  int id = g->add_node(std::move(out), {pa, pb},
                       [pa, pb](Graph& gr, int self) {
                         const Tensor& d = gr.adjoint_of(self);
                         const Tensor& va = gr.value_of(pa);
                         const Tensor& vb = gr.value_of(pb);
                         if (gr.needs_grad(pa)) {
                           Tensor& da = gr.adjoint_of(pa);
                           for (std::int64_t i = 0; i < d.size(); ++i) da[i] += d[i] * vb[i];
                         }
                         if (gr.needs_grad(pb)) {
                           Tensor& db = gr.adjoint_of(pb);
                           for (std::int64_t i = 0; i < d.size(); ++i) db[i] += d[i] * va[i];
                         }
                       },
                       either_needs(g, a, b));
  return {g, id};
}

Var scale(Var a, double c) {
  Graph* g = a.g;
  const Tensor& ta = a.val();
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] * c;
  int pa = a.id;
  int id = g->add_node(std::move(out), {pa},
                       [pa, c](Graph& gr, int self) {
                         if (!gr.needs_grad(pa)) return;
                         const Tensor& d = gr.adjoint_of(self);
                         Tensor& da = gr.adjoint_of(pa);
                         for (std::int64_t i = 0; i < d.size(); ++i) da[i] += d[i] * c;
                       },
                       g->needs_grad(pa));
  return {g, id};
}

Var add_scalar(Var a, double c) {
  Graph* g = a.g;
  const Tensor& ta = a.val();
  Tensor out(ta.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = ta[i] + c;
  int pa = a.id;
  int id = g->add_node(std::move(out), {pa},
                       [pa](Graph& gr, int self) {
                         if (!gr.needs_grad(pa)) return;
                         const Tensor& d = gr.adjoint_of(self);
                         Tensor& da = gr.adjoint_of(pa);
                         for (std::int64_t i = 0; i < d.size(); ++i) da[i] += d[i];
                       },
                       g->needs_grad(pa));
  return {g, id};
}

Var add_rows(Var m, Var bias) {
  Graph* g = same_graph(m, bias);
  const Tensor& tm = m.val();
  const Tensor& tb = bias.val();
  if (tm.rank() != 2 || tb.rank() != 1 || tm.dim(1) != tb.dim(0)) {
    throw DimensionError("add_rows: matrix " + tm.shape_str() + " vs bias " + tb.shape_str());
  }
  int R = tm.dim(0), C = tm.dim(1);
  Tensor out({R, C});
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) out[r * C + c] = tm[r * C + c] + tb[c];
  }
  int pm = m.id, pb = bias.id;
  int id = g->add_node(std::move(out), {pm, pb},
                       [pm, pb, R, C](Graph& gr, int self) {
                         const Tensor& d = gr.adjoint_of(self);
                         if (gr.needs_grad(pm)) {
                           Tensor& dm = gr.adjoint_of(pm);
                           for (std::int64_t i = 0; i < d.size(); ++i) dm[i] += d[i];
                         }
                         if (gr.needs_grad(pb)) {
                           Tensor& db = gr.adjoint_of(pb);
                           for (int r = 0; r < R; ++r) {
                             for (int c = 0; c < C; ++c) db[c] += d[r * C + c];
                           }
                         }
                       },
                       either_needs(g, m, bias));
  return {g, id};
}

Var matmul(Var a, Var b) {
  Graph* g = same_graph(a, b);
  const Tensor& ta = a.val();
  const Tensor& tb = b.val();
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0)) {
    throw DimensionError("matmul: " + ta.shape_str() + " @ " + tb.shape_str());
  }
  int M = ta.dim(0), K = ta.dim(1), N = tb.dim(1);
  Tensor out({M, N});
  {
    const double* A = ta.data();
    const double* B = tb.data();
    double* C = out.data();
    for (int i = 0; i < M; ++i) {
      double* crow = C + static_cast<std::int64_t>(i) * N;
      const double* arow = A + static_cast<std::int64_t>(i) * K;
      for (int k = 0; k < K; ++k) {
        double av = arow[k];
        if (av == 0.0) continue;
        const double* brow = B + static_cast<std::int64_t>(k) * N;
        for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
      }
    }
  }
  int pa = a.id, pb = b.id;
  int id = g->add_node(std::move(out), {pa, pb},
                       [pa, pb, M, K, N](Graph& gr, int self) {
                         const double* D = gr.adjoint_of(self).data();
                         if (gr.needs_grad(pa)) {
                           // dA = dC @ B^T
                           const double* B = gr.value_of(pb).data();
                           double* dA = gr.adjoint_of(pa).data();
                           for (int i = 0; i < M; ++i) {
                             const double* drow = D + static_cast<std::int64_t>(i) * N;
                             double* darow = dA + static_cast<std::int64_t>(i) * K;
                             for (int k = 0; k < K; ++k) {
                               const double* brow = B + static_cast<std::int64_t>(k) * N;
                               double acc = 0.0;
                               for (int j = 0; j < N; ++j) acc += drow[j] * brow[j];
                               darow[k] += acc;
                             }
                           }
                         }
                         if (gr.needs_grad(pb)) {
                           // dB = A^T @ dC
                           const double* A = gr.value_of(pa).data();
                           double* dB = gr.adjoint_of(pb).data();
                           for (int i = 0; i < M; ++i) {
                             const double* arow = A + static_cast<std::int64_t>(i) * K;
                             const double* drow = D + static_cast<std::int64_t>(i) * N;
                             for (int k = 0; k < K; ++k) {
                               double av = arow[k];
                               if (av == 0.0) continue;
                               double* dbrow = dB + static_cast<std::int64_t>(k) * N;
                               for (int j = 0; j < N; ++j) dbrow[j] += av * drow[j];
                             }
                           }
                         }
                       },
                       either_needs(g, a, b));
  return {g, id};
}

Var matmul_nt(Var a, Var b) {
  Graph* g = same_graph(a, b);
  const Tensor& ta = a.val();
  const Tensor& tb = b.val();
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(1)) {
    throw DimensionError("matmul_nt: " + ta.shape_str() + " @ T" + tb.shape_str());
  }
  int M = ta.dim(0), K = ta.dim(1), N = tb.dim(0);
  Tensor out({M, N});
  {
    const double* A = ta.data();
    const double* B = tb.data();
    double* C = out.data();
    for (int i = 0; i < M; ++i) {
      const double* arow = A + static_cast<std::int64_t>(i) * K;
      double* crow = C + static_cast<std::int64_t>(i) * N;
      for (int j = 0; j < N; ++j) {
        const double* brow = B + static_cast<std::int64_t>(j) * K;
        double acc = 0.0;
        for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
        crow[j] = acc;
      }
    }
  }
  int pa = a.id, pb = b.id;
  int id = g->add_node(std::move(out), {pa, pb},
                       [pa, pb, M, K, N](Graph& gr, int self) {
                         const double* D = gr.adjoint_of(self).data();
                         if (gr.needs_grad(pa)) {
                           // dA = dC @ B
                           const double* B = gr.value_of(pb).data();
                           double* dA = gr.adjoint_of(pa).data();
                           for (int i = 0; i < M; ++i) {
                             const double* drow = D + static_cast<std::int64_t>(i) * N;
                             double* darow = dA + static_cast<std::int64_t>(i) * K;
                             for (int j = 0; j < N; ++j) {
                               double dv = drow[j];
                               if (dv == 0.0) continue;
                               const double* brow = B + static_cast<std::int64_t>(j) * K;
                               for (int k = 0; k < K; ++k) darow[k] += dv * brow[k];
                             }
                           }
                         }
                         if (gr.needs_grad(pb)) {
                           // dB = dC^T @ A
                           const double* A = gr.value_of(pa).data();
                           double* dB = gr.adjoint_of(pb).data();
                           for (int i = 0; i < M; ++i) {
                             const double* drow = D + static_cast<std::int64_t>(i) * N;
                             const double* arow = A + static_cast<std::int64_t>(i) * K;
                             for (int j = 0; j < N; ++j) {
                               double dv = drow[j];
                               if (dv == 0.0) continue;
                               double* dbrow = dB + static_cast<std::int64_t>(j) * K;
                               for (int k = 0; k < K; ++k) dbrow[k] += dv * arow[k];
                             }
                           }
                         }
                       },
                       either_needs(g, a, b));
  return {g, id};
}

Var dot(Var u, Var v) {
  Graph* g = same_graph(u, v);
  const Tensor& tu = u.val();
  const Tensor& tv = v.val();
  if (tu.rank() != 1 || tv.rank() != 1 || tu.dim(0) != tv.dim(0)) {
    throw DimensionError("dot: " + tu.shape_str() + " vs " + tv.shape_str());
  }
  double acc = 0.0;
  for (std::int64_t i = 0; i < tu.size(); ++i) acc += tu[i] * tv[i];
  int pu = u.id, pv = v.id;
  int id = g->add_node(Tensor::scalar(acc), {pu, pv},
                       [pu, pv](Graph& gr, int self) {
                         double d = gr.adjoint_of(self)[0];
                         const Tensor& a = gr.value_of(pu);
                         const Tensor& b = gr.value_of(pv);
                         if (gr.needs_grad(pu)) {
                           Tensor& du = gr.adjoint_of(pu);
                           for (std::int64_t i = 0; i < b.size(); ++i) du[i] += d * b[i];
                         }
                         if (gr.needs_grad(pv)) {
                           Tensor& dv = gr.adjoint_of(pv);
                           for (std::int64_t i = 0; i < a.size(); ++i) dv[i] += d * a[i];
                         }
                       },
                       either_needs(g, u, v));
  return {g, id};
}

namespace {
constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC1 = 0.044715;
}  // namespace

Var gelu(Var x) {
  Graph* g = x.g;
  const Tensor& tx = x.val();
  Tensor out(tx.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) {
    double v = tx[i];
    double u = kGeluC0 * (v + kGeluC1 * v * v * v);
    out[i] = 0.5 * v * (1.0 + std::tanh(u));
  }
  int px = x.id;
  int id = g->add_node(std::move(out), {px},
                       [px](Graph& gr, int self) {
                         if (!gr.needs_grad(px)) return;
                         const Tensor& d = gr.adjoint_of(self);
                         const Tensor& v = gr.value_of(px);
                         Tensor& dx = gr.adjoint_of(px);
                         double sign = debug::flip_gelu_backward ? -1.0 : 1.0;
                         for (std::int64_t i = 0; i < d.size(); ++i) {
                           double t = v[i];
                           double u = kGeluC0 * (t + kGeluC1 * t * t * t);
                           double th = std::tanh(u);
                           double du = kGeluC0 * (1.0 + 3.0 * kGeluC1 * t * t);
                           double grad = 0.5 * (1.0 + th) + 0.5 * t * (1.0 - th * th) * du;
                           dx[i] += sign * d[i] * grad;
                         }
                       },
                       g->needs_grad(px));
  return {g, id};
}

Var softplus(Var x) {
  Graph* g = x.g;
  const Tensor& tx = x.val();
  Tensor out(tx.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) {
    double v = tx[i];
    out[i] = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
  }
  int px = x.id;
  int id = g->add_node(std::move(out), {px},
                       [px](Graph& gr, int self) {
                         if (!gr.needs_grad(px)) return;
                         const Tensor& d = gr.adjoint_of(self);
                         const Tensor& v = gr.value_of(px);
                         Tensor& dx = gr.adjoint_of(px);
                         for (std::int64_t i = 0; i < d.size(); ++i) {
                           double t = v[i];
                           double s = t >= 0.0 ? 1.0 / (1.0 + std::exp(-t))
                                               : std::exp(t) / (1.0 + std::exp(t));
                           dx[i] += d[i] * s;
                         }
                       },
                       g->needs_grad(px));
  return {g, id};
}

Var sum(Var x) {
  Graph* g = x.g;
  const Tensor& tx = x.val();
  double acc = 0.0;
  for (std::int64_t i = 0; i < tx.size(); ++i) acc += tx[i];
  int px = x.id;
  int id = g->add_node(Tensor::scalar(acc), {px},
                       [px](Graph& gr, int self) {
                         if (!gr.needs_grad(px)) return;
                         double d = gr.adjoint_of(self)[0];
                         Tensor& dx = gr.adjoint_of(px);
                         for (std::int64_t i = 0; i < dx.size(); ++i) dx[i] += d;
                       },
                       g->needs_grad(px));
  return {g, id};
}

Var mean(Var x) {
  const Tensor& tx = x.val();
  if (tx.size() == 0) throw DimensionError("mean over an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(tx.size()));
}

Var mean_rows(Var m) {
  Graph* g = m.g;
  const Tensor& tm = m.val();
  if (tm.rank() != 2) throw DimensionError("mean_rows: expected rank 2, got " + tm.shape_str());
  int R = tm.dim(0), C = tm.dim(1);
  if (R == 0) throw DimensionError("mean_rows over zero rows");
  Tensor out({C});
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) out[c] += tm[r * C + c];
  }
  for (int c = 0; c < C; ++c) out[c] /= static_cast<double>(R);
  int pm = m.id;
  int id = g->add_node(std::move(out), {pm},
                       [pm, R, C](Graph& gr, int self) {
                         if (!gr.needs_grad(pm)) return;
                         const Tensor& d = gr.adjoint_of(self);
                         Tensor& dm = gr.adjoint_of(pm);
                         double inv = 1.0 / static_cast<double>(R);
                         for (int r = 0; r < R; ++r) {
                           for (int c = 0; c < C; ++c) dm[r * C + c] += d[c] * inv;
                         }
                       },
                       g->needs_grad(pm));
  return {g, id};
}

Var reshape(Var x, std::vector<int> shape) {
  Graph* g = x.g;
  const Tensor& tx = x.val();
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  if (n != tx.size()) {
    throw DimensionError("reshape: " + tx.shape_str() + " to " + shape_to_string(shape));
  }
  Tensor out(shape, std::vector<double>(tx.data(), tx.data() + tx.size()));
  int px = x.id;
  int id = g->add_node(std::move(out), {px},
                       [px](Graph& gr, int self) {
                         if (!gr.needs_grad(px)) return;
                         const Tensor& d = gr.adjoint_of(self);
                         Tensor& dx = gr.adjoint_of(px);
                         for (std::int64_t i = 0; i < d.size(); ++i) dx[i] += d[i];
                       },
                       g->needs_grad(px));
  return {g, id};
}

Var row_slice(Var m, int r0, int r1) {
  Graph* g = m.g;
  const Tensor& tm = m.val();
  if (tm.rank() != 2) throw DimensionError("row_slice: expected rank 2, got " + tm.shape_str());
  int R = tm.dim(0), C = tm.dim(1);
  if (r0 < 0 || r1 > R || r0 >= r1) {
    throw DimensionError("row_slice [" + std::to_string(r0) + ", " + std::to_string(r1) +
                         ") out of range for " + tm.shape_str());
  }
  Tensor out({r1 - r0, C});
  std::copy(tm.data() + static_cast<std::int64_t>(r0) * C,
            tm.data() + static_cast<std::int64_t>(r1) * C, out.data());
  int pm = m.id;
  int id = g->add_node(std::move(out), {pm},
                       [pm, r0, C](Graph& gr, int self) {
                         if (!gr.needs_grad(pm)) return;
                         const Tensor& d = gr.adjoint_of(self);
                         Tensor& dm = gr.adjoint_of(pm);
                         double* base = dm.data() + static_cast<std::int64_t>(r0) * C;
                         for (std::int64_t i = 0; i < d.size(); ++i) base[i] += d[i];
                       },
                       g->needs_grad(pm));
  return {g, id};
}

Var col_slice(Var m, int c0, int c1) {
  Graph* g = m.g;
  const Tensor& tm = m.val();
  if (tm.rank() != 2) throw DimensionError("col_slice: expected rank 2, got " + tm.shape_str());
  int R = tm.dim(0), C = tm.dim(1);
  if (c0 < 0 || c1 > C || c0 >= c1) {
    throw DimensionError("col_slice [" + std::to_string(c0) + ", " + std::to_string(c1) +
                         ") out of range for " + tm.shape_str());
  }
  int W = c1 - c0;
  Tensor out({R, W});
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < W; ++c) out[r * W + c] = tm[r * C + c0 + c];
  }
  int pm = m.id;
  int id = g->add_node(std::move(out), {pm},
                       [pm, c0, C, W](Graph& gr, int self) {
                         if (!gr.needs_grad(pm)) return;
                         const Tensor& d = gr.adjoint_of(self);
                         Tensor& dm = gr.adjoint_of(pm);
                         int R2 = d.dim(0);
                         for (int r = 0; r < R2; ++r) {
                           for (int c = 0; c < W; ++c) dm[r * C + c0 + c] += d[r * W + c];
                         }
                       },
                       g->needs_grad(pm));
  return {g, id};
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: empty part list");
  Graph* g = parts[0].g;
  int C = -1, R = 0;
  std::vector<int> rows_of(parts.size());
  bool needs = false;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].g != g) throw Error("concat_rows: operands live on different graphs");
    const Tensor& t = parts[i].val();
    int r, c;
    as_rows(t, &r, &c, "concat_rows");
    if (C < 0) C = c;
    if (c != C) {
      throw DimensionError("concat_rows: column mismatch " + std::to_string(c) + " vs " +
                           std::to_string(C));
    }
    rows_of[i] = r;
    R += r;
    needs = needs || g->needs_grad(parts[i].id);
  }
  Tensor out({R, C});
  std::vector<int> ids(parts.size());
  int at = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& t = parts[i].val();
    std::copy(t.data(), t.data() + t.size(), out.data() + static_cast<std::int64_t>(at) * C);
    at += rows_of[i];
    ids[i] = parts[i].id;
  }
  std::vector<int> parents = ids;
  int id = g->add_node(std::move(out), std::move(parents),
                       [ids, rows_of, C](Graph& gr, int self) {
                         const Tensor& d = gr.adjoint_of(self);
                         int at2 = 0;
                         for (std::size_t i = 0; i < ids.size(); ++i) {
                           if (gr.needs_grad(ids[i])) {
                             Tensor& dp = gr.adjoint_of(ids[i]);
                             const double* src = d.data() + static_cast<std::int64_t>(at2) * C;
                             for (std::int64_t k = 0; k < dp.size(); ++k) dp[k] += src[k];
                           }
                           at2 += rows_of[i];
                         }
                       },
                       needs);
  return {g, id};
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: empty part list");
  Graph* g = parts[0].g;
  int R = -1, C = 0;
  std::vector<int> cols_of(parts.size());
  bool needs = false;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].g != g) throw Error("concat_cols: operands live on different graphs");
    const Tensor& t = parts[i].val();
    if (t.rank() != 2) throw DimensionError("concat_cols: expected rank 2, got " + t.shape_str());
    if (R < 0) R = t.dim(0);
    if (t.dim(0) != R) {
      throw DimensionError("concat_cols: row mismatch " + std::to_string(t.dim(0)) + " vs " +
                           std::to_string(R));
    }
    cols_of[i] = t.dim(1);
    C += cols_of[i];
  }
  Tensor out({R, C});
  std::vector<int> ids(parts.size());
  int at = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& t = parts[i].val();
    int w = cols_of[i];
    for (int r = 0; r < R; ++r) {
      std::copy(t.data() + static_cast<std::int64_t>(r) * w,
                t.data() + static_cast<std::int64_t>(r + 1) * w,
                out.data() + static_cast<std::int64_t>(r) * C + at);
    }
    at += w;
    ids[i] = parts[i].id;
    needs = needs || g->needs_grad(parts[i].id);
  }
  std::vector<int> parents = ids;
  int id = g->add_node(std::move(out), std::move(parents),
                       [ids, cols_of, R, C](Graph& gr, int self) {
                         const Tensor& d = gr.adjoint_of(self);
                         int at2 = 0;
                         for (std::size_t i = 0; i < ids.size(); ++i) {
                           int w = cols_of[i];
                           if (gr.needs_grad(ids[i])) {
                             Tensor& dp = gr.adjoint_of(ids[i]);
                             for (int r = 0; r < R; ++r) {
                               const double* src = d.data() + static_cast<std::int64_t>(r) * C + at2;
                               double* dst = dp.data() + static_cast<std::int64_t>(r) * w;
                               for (int c = 0; c < w; ++c) dst[c] += src[c];
                             }
                           }
                           at2 += w;
                         }
                       },
                       needs);
  return {g, id};
}

Var concat_vec(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_vec: empty part list");
  Graph* g = parts[0].g;
  std::int64_t N = 0;
  bool needs = false;
  for (const Var& p : parts) {
    if (p.g != g) throw Error("concat_vec: operands live on different graphs");
    const Tensor& t = p.val();
    if (t.rank() != 1) throw DimensionError("concat_vec: expected rank 1, got " + t.shape_str());
    N += t.size();
    needs = needs || g->needs_grad(p.id);
  }
  Tensor out({static_cast<int>(N)});
  std::vector<int> ids(parts.size());
  std::vector<std::int64_t> offs(parts.size());
  std::int64_t at = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& t = parts[i].val();
    std::copy(t.data(), t.data() + t.size(), out.data() + at);
    ids[i] = parts[i].id;
    offs[i] = at;
    at += t.size();
  }
  std::vector<int> parents = ids;
  int id = g->add_node(std::move(out), std::move(parents),
                       [ids, offs](Graph& gr, int self) {
                         const Tensor& d = gr.adjoint_of(self);
                         for (std::size_t i = 0; i < ids.size(); ++i) {
                           if (!gr.needs_grad(ids[i])) continue;
                           Tensor& dp = gr.adjoint_of(ids[i]);
                           const double* src = d.data() + offs[i];
                           for (std::int64_t k = 0; k < dp.size(); ++k) dp[k] += src[k];
                         }
                       },
                       needs);
  return {g, id};
}

Var stack_scalars(const std::vector<Var>& scalars, int rows, int cols) {
  if (scalars.empty()) throw DimensionError("stack_scalars: empty list");
  if (static_cast<std::int64_t>(scalars.size()) != static_cast<std::int64_t>(rows) * cols) {
    throw DimensionError("stack_scalars: " + std::to_string(scalars.size()) +
                         " scalars for a " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " matrix");
  }
  Graph* g = scalars[0].g;
  Tensor out({rows, cols});
  std::vector<int> ids(scalars.size());
  bool needs = false;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].g != g) throw Error("stack_scalars: operands live on different graphs");
    const Tensor& t = scalars[i].val();
    if (t.size() != 1) throw DimensionError("stack_scalars: non-scalar part " + t.shape_str());
    out[static_cast<std::int64_t>(i)] = t[0];
    ids[i] = scalars[i].id;
    needs = needs || g->needs_grad(scalars[i].id);
  }
  std::vector<int> parents = ids;
  int id = g->add_node(std::move(out), std::move(parents),
                       [ids](Graph& gr, int self) {
                         const Tensor& d = gr.adjoint_of(self);
                         for (std::size_t i = 0; i < ids.size(); ++i) {
                           if (!gr.needs_grad(ids[i])) continue;
                           gr.adjoint_of(ids[i])[0] += d[static_cast<std::int64_t>(i)];
                         }
                       },
                       needs);
  return {g, id};
}

Var gather_entries(Var m, const std::vector<std::pair<int, int>>& idx) {
  Graph* g = m.g;
  const Tensor& tm = m.val();
  if (tm.rank() != 2) throw DimensionError("gather_entries: expected rank 2, got " + tm.shape_str());
  int R = tm.dim(0), C = tm.dim(1);
  Tensor out({static_cast<int>(idx.size())});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto [r, c] = idx[i];
    if (r < 0 || r >= R || c < 0 || c >= C) {
      throw DimensionError("gather_entries: (" + std::to_string(r) + ", " + std::to_string(c) +
                           ") out of range for " + tm.shape_str());
    }
    out[static_cast<std::int64_t>(i)] = tm[static_cast<std::int64_t>(r) * C + c];
  }
  int pm = m.id;
  auto indices = idx;
  int id = g->add_node(std::move(out), {pm},
                       [pm, indices, C](Graph& gr, int self) {
                         if (!gr.needs_grad(pm)) return;
                         const Tensor& d = gr.adjoint_of(self);
                         Tensor& dm = gr.adjoint_of(pm);
                         for (std::size_t i = 0; i < indices.size(); ++i) {
                           auto [r, c] = indices[i];
                           dm[static_cast<std::int64_t>(r) * C + c] += d[static_cast<std::int64_t>(i)];
                         }
                       },
                       g->needs_grad(pm));
  return {g, id};
}

Var embedding_rows(Var table, const std::vector<int>& ids) {
  Graph* g = table.g;
  const Tensor& tt = table.val();
  if (tt.rank() != 2) throw DimensionError("embedding_rows: table has shape " + tt.shape_str());
  int V = tt.dim(0), C = tt.dim(1);
  for (int tok : ids) {
    if (tok < 0 || tok >= V) {
      throw VocabularyError("token id " + std::to_string(tok) + " outside vocabulary of size " +
                            std::to_string(V));
    }
  }
  Tensor out({static_cast<int>(ids.size()), C});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* src = tt.data() + static_cast<std::int64_t>(ids[i]) * C;
    std::copy(src, src + C, out.data() + static_cast<std::int64_t>(i) * C);
  }
  int pt = table.id;
  auto picked = ids;
  int id = g->add_node(std::move(out), {pt},
                       [pt, picked, C](Graph& gr, int self) {
                         if (!gr.needs_grad(pt)) return;
                         const Tensor& d = gr.adjoint_of(self);
                         Tensor& dt = gr.adjoint_of(pt);
                         for (std::size_t i = 0; i < picked.size(); ++i) {
                           double* dst = dt.data() + static_cast<std::int64_t>(picked[i]) * C;
                           const double* src = d.data() + static_cast<std::int64_t>(i) * C;
                           for (int c = 0; c < C; ++c) dst[c] += src[c];
                         }
                       },
                       g->needs_grad(pt));
  return {g, id};
}

namespace {

// Shared forward/backward for the (optionally masked) row softmax.
Var softmax_impl(Var m, const std::vector<char>* col_mask) {
  Graph* g = m.g;
  const Tensor& tm = m.val();
  int R, C;
  as_rows(tm, &R, &C, "softmax");
  if (C == 0) throw DimensionError("softmax over an empty axis");
  std::vector<char> mask;
  if (col_mask != nullptr) {
    if (static_cast<int>(col_mask->size()) != C) {
      throw DimensionError("softmax mask length " + std::to_string(col_mask->size()) +
                           " vs " + std::to_string(C) + " columns");
    }
    mask = *col_mask;
    bool any = false;
    for (char v : mask) any = any || (v != 0);
    if (!any) throw DegenerateInputError("softmax: every column is masked out");
  } else {
    mask.assign(static_cast<std::size_t>(C), 1);
  }
  Tensor out(tm.shape());
  for (int r = 0; r < R; ++r) {
    const double* x = tm.data() + static_cast<std::int64_t>(r) * C;
    double* y = out.data() + static_cast<std::int64_t>(r) * C;
    double mx = -1e300;
    for (int c = 0; c < C; ++c) {
      if (mask[static_cast<std::size_t>(c)] && x[c] > mx) mx = x[c];
    }
    double z = 0.0;
    for (int c = 0; c < C; ++c) {
      if (mask[static_cast<std::size_t>(c)]) {
        y[c] = std::exp(x[c] - mx);
        z += y[c];
      } else {
        y[c] = 0.0;
      }
    }
    for (int c = 0; c < C; ++c) {
      if (mask[static_cast<std::size_t>(c)]) y[c] /= z;
    }
  }
  int pm = m.id;
  int id = g->add_node(std::move(out), {pm},
                       [pm, R, C, mask](Graph& gr, int self) {
                         if (!gr.needs_grad(pm)) return;
                         const Tensor& d = gr.adjoint_of(self);
                         const Tensor& y = gr.value_of(self);
                         Tensor& dm = gr.adjoint_of(pm);
                         for (int r = 0; r < R; ++r) {
                           const double* yr = y.data() + static_cast<std::int64_t>(r) * C;
                           const double* dr = d.data() + static_cast<std::int64_t>(r) * C;
                           double* dmr = dm.data() + static_cast<std::int64_t>(r) * C;
                           double inner = 0.0;
                           for (int c = 0; c < C; ++c) inner += dr[c] * yr[c];
                           for (int c = 0; c < C; ++c) {
                             if (mask[static_cast<std::size_t>(c)]) {
                               dmr[c] += yr[c] * (dr[c] - inner);
                             }
                           }
                         }
                       },
                       g->needs_grad(pm));
  return {g, id};
}

}  // namespace

Var softmax_rows(Var m) { return softmax_impl(m, nullptr); }

Var masked_softmax_rows(Var m, const std::vector<char>& col_mask) {
  return softmax_impl(m, &col_mask);
}

Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  Graph* g = same_graph(x, gain);
  same_graph(gain, bias);
  const Tensor& tx = x.val();
  const Tensor& tg = gain.val();
  const Tensor& tb = bias.val();
  int R, C;
  as_rows(tx, &R, &C, "layer_norm");
  if (tg.rank() != 1 || tg.dim(0) != C || tb.rank() != 1 || tb.dim(0) != C) {
    throw DimensionError("layer_norm: gain " + tg.shape_str() + " / bias " + tb.shape_str() +
                         " vs " + std::to_string(C) + " features");
  }
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
  Tensor out(tx.shape());
  Tensor xhat(tx.shape());
  Tensor inv_sigma({R});
  for (int r = 0; r < R; ++r) {
    const double* xr = tx.data() + static_cast<std::int64_t>(r) * C;
    double mu = 0.0;
    for (int c = 0; c < C; ++c) mu += xr[c];
    mu /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= C;
    double inv = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = inv;
    double* hr = xhat.data() + static_cast<std::int64_t>(r) * C;
    double* yr = out.data() + static_cast<std::int64_t>(r) * C;
    for (int c = 0; c < C; ++c) {
      hr[c] = (xr[c] - mu) * inv;
      yr[c] = tg[c] * hr[c] + tb[c];
    }
  }
  int px = x.id, pg = gain.id, pb = bias.id;
  int id = g->add_node(
      std::move(out), {px, pg, pb},
      [px, pg, pb, R, C, xhat, inv_sigma](Graph& gr, int self) {
        const Tensor& d = gr.adjoint_of(self);
        const Tensor& tg2 = gr.value_of(pg);
        if (gr.needs_grad(pg)) {
          Tensor& dg = gr.adjoint_of(pg);
          for (int r = 0; r < R; ++r) {
            for (int c = 0; c < C; ++c) {
              dg[c] += d[static_cast<std::int64_t>(r) * C + c] *
                       xhat[static_cast<std::int64_t>(r) * C + c];
            }
          }
        }
        if (gr.needs_grad(pb)) {
          Tensor& db = gr.adjoint_of(pb);
          for (int r = 0; r < R; ++r) {
            for (int c = 0; c < C; ++c) db[c] += d[static_cast<std::int64_t>(r) * C + c];
          }
        }
        if (gr.needs_grad(px)) {
          Tensor& dx = gr.adjoint_of(px);
          for (int r = 0; r < R; ++r) {
            const double* dr = d.data() + static_cast<std::int64_t>(r) * C;
            const double* hr = xhat.data() + static_cast<std::int64_t>(r) * C;
            double* dxr = dx.data() + static_cast<std::int64_t>(r) * C;
            double m1 = 0.0, m2 = 0.0;
            for (int c = 0; c < C; ++c) {
              double dh = dr[c] * tg2[c];
              m1 += dh;
              m2 += dh * hr[c];
            }
            m1 /= C;
            m2 /= C;
            for (int c = 0; c < C; ++c) {
              double dh = dr[c] * tg2[c];
              dxr[c] += inv_sigma[r] * (dh - m1 - hr[c] * m2);
            }
          }
        }
      },
      g->needs_grad(px) || g->needs_grad(pg) || g->needs_grad(pb));
  return {g, id};
}

Var l2_normalize_rows(Var m) {
  Graph* g = m.g;
  const Tensor& tm = m.val();
  int R, C;
  as_rows(tm, &R, &C, "l2_normalize");
  Tensor out(tm.shape());
  Tensor inv_norm({R});
  for (int r = 0; r < R; ++r) {
    const double* xr = tm.data() + static_cast<std::int64_t>(r) * C;
    double n2 = 0.0;
    for (int c = 0; c < C; ++c) n2 += xr[c] * xr[c];
    double n = std::sqrt(n2);
    if (n < 1e-150) {
      throw DegenerateInputError("l2_normalize: row " + std::to_string(r) + " has zero norm");
    }
    inv_norm[r] = 1.0 / n;
    double* yr = out.data() + static_cast<std::int64_t>(r) * C;
    for (int c = 0; c < C; ++c) yr[c] = xr[c] * inv_norm[r];
  }
  int pm = m.id;
  int id = g->add_node(std::move(out), {pm},
                       [pm, R, C, inv_norm](Graph& gr, int self) {
                         if (!gr.needs_grad(pm)) return;
                         const Tensor& d = gr.adjoint_of(self);
                         const Tensor& y = gr.value_of(self);
                         Tensor& dm = gr.adjoint_of(pm);
                         for (int r = 0; r < R; ++r) {
                           const double* dr = d.data() + static_cast<std::int64_t>(r) * C;
                           const double* yr = y.data() + static_cast<std::int64_t>(r) * C;
                           double* dmr = dm.data() + static_cast<std::int64_t>(r) * C;
                           double proj = 0.0;
                           for (int c = 0; c < C; ++c) proj += dr[c] * yr[c];
                           for (int c = 0; c < C; ++c) {
                             dmr[c] += inv_norm[r] * (dr[c] - yr[c] * proj);
                           }
                         }
                       },
                       g->needs_grad(pm));
  return {g, id};
}

Var cosine(Var u, Var v) {
  Graph* g = same_graph(u, v);
  const Tensor& tu = u.val();
  const Tensor& tv = v.val();
  if (tu.rank() != 1 || tv.rank() != 1 || tu.dim(0) != tv.dim(0)) {
    throw DimensionError("cosine: " + tu.shape_str() + " vs " + tv.shape_str());
  }
  double duv = 0.0, nu2 = 0.0, nv2 = 0.0;
  for (std::int64_t i = 0; i < tu.size(); ++i) {
    duv += tu[i] * tv[i];
    nu2 += tu[i] * tu[i];
    nv2 += tv[i] * tv[i];
  }
  double nu = std::sqrt(nu2), nv = std::sqrt(nv2);
  if (nu < 1e-150 || nv < 1e-150) {
    throw DegenerateInputError("cosine: zero-norm operand");
  }
  double s = duv / (nu * nv);
  int pu = u.id, pv = v.id;
  int id = g->add_node(Tensor::scalar(s), {pu, pv},
                       [pu, pv, nu, nv, s](Graph& gr, int self) {
                         double d = gr.adjoint_of(self)[0];
                         const Tensor& a = gr.value_of(pu);
                         const Tensor& b = gr.value_of(pv);
                         if (gr.needs_grad(pu)) {
                           Tensor& du = gr.adjoint_of(pu);
                           for (std::int64_t i = 0; i < a.size(); ++i) {
                             du[i] += d * (b[i] / (nu * nv) - s * a[i] / (nu * nu));
                           }
                         }
                         if (gr.needs_grad(pv)) {
                           Tensor& dv = gr.adjoint_of(pv);
                           for (std::int64_t i = 0; i < b.size(); ++i) {
                             dv[i] += d * (a[i] / (nu * nv) - s * b[i] / (nv * nv));
                           }
                         }
                       },
                       either_needs(g, u, v));
  return {g, id};
}

Var chw_to_pxc(Var chw) {
  Graph* g = chw.g;
  const Tensor& t = chw.val();
  if (t.rank() != 3) throw DimensionError("chw_to_pxc: expected rank 3, got " + t.shape_str());
  int C = t.dim(0), H = t.dim(1), W = t.dim(2);
  int P = H * W;
  Tensor out({P, C});
  for (int c = 0; c < C; ++c) {
    const double* plane = t.data() + static_cast<std::int64_t>(c) * P;
    for (int p = 0; p < P; ++p) out[static_cast<std::int64_t>(p) * C + c] = plane[p];
  }
  int px = chw.id;
  int id = g->add_node(std::move(out), {px},
                       [px, C, P](Graph& gr, int self) {
                         if (!gr.needs_grad(px)) return;
                         const Tensor& d = gr.adjoint_of(self);
                         Tensor& dx = gr.adjoint_of(px);
                         for (int c = 0; c < C; ++c) {
                           double* plane = dx.data() + static_cast<std::int64_t>(c) * P;
                           for (int p = 0; p < P; ++p) {
                             plane[p] += d[static_cast<std::int64_t>(p) * C + c];
                           }
                         }
                       },
                       g->needs_grad(px));
  return {g, id};
}

Var conv2d_3x3(Var input, Var weight, Var bias) {
  Graph* g = same_graph(input, weight);
  same_graph(weight, bias);
  const Tensor& ti = input.val();
  const Tensor& tw = weight.val();
  const Tensor& tb = bias.val();
  if (ti.rank() != 3 || tw.rank() != 4 || tb.rank() != 1) {
    throw DimensionError("conv2d: input " + ti.shape_str() + ", weight " + tw.shape_str() +
                         ", bias " + tb.shape_str());
  }
  int Cin = ti.dim(0), H = ti.dim(1), W = ti.dim(2);
  int Cout = tw.dim(0);
  if (tw.dim(1) != Cin || tw.dim(2) != 3 || tw.dim(3) != 3 || tb.dim(0) != Cout) {
    throw DimensionError("conv2d: weight " + tw.shape_str() + " does not fit input " +
                         ti.shape_str());
  }
  Tensor out({Cout, H, W});
  {
    const double* in = ti.data();
    const double* w = tw.data();
    double* o = out.data();
    for (int co = 0; co < Cout; ++co) {
      double* oplane = o + static_cast<std::int64_t>(co) * H * W;
      double bv = tb[co];
      for (int i = 0; i < H * W; ++i) oplane[i] = bv;
      for (int ci = 0; ci < Cin; ++ci) {
        const double* iplane = in + static_cast<std::int64_t>(ci) * H * W;
        const double* wk = w + (static_cast<std::int64_t>(co) * Cin + ci) * 9;
        for (int dy = 0; dy < 3; ++dy) {
          int ylo = std::max(0, 1 - dy), yhi = std::min(H, H + 1 - dy);
          for (int dx = 0; dx < 3; ++dx) {
            double wv = wk[dy * 3 + dx];
            if (wv == 0.0) continue;
            int xlo = std::max(0, 1 - dx), xhi = std::min(W, W + 1 - dx);
            for (int y = ylo; y < yhi; ++y) {
              double* orow = oplane + static_cast<std::int64_t>(y) * W;
              const double* irow = iplane + static_cast<std::int64_t>(y + dy - 1) * W + (dx - 1);
              for (int x = xlo; x < xhi; ++x) orow[x] += wv * irow[x];
            }
          }
        }
      }
    }
  }
  int pi = input.id, pw = weight.id, pb = bias.id;
  int id = g->add_node(
      std::move(out), {pi, pw, pb},
      [pi, pw, pb, Cin, Cout, H, W](Graph& gr, int self) {
        const Tensor& d = gr.adjoint_of(self);
        const double* D = d.data();
        if (gr.needs_grad(pb)) {
          Tensor& db = gr.adjoint_of(pb);
          for (int co = 0; co < Cout; ++co) {
            const double* dplane = D + static_cast<std::int64_t>(co) * H * W;
            double acc = 0.0;
            for (int i = 0; i < H * W; ++i) acc += dplane[i];
            db[co] += acc;
          }
        }
        if (gr.needs_grad(pw)) {
          const double* in = gr.value_of(pi).data();
          Tensor& dw = gr.adjoint_of(pw);
          for (int co = 0; co < Cout; ++co) {
            const double* dplane = D + static_cast<std::int64_t>(co) * H * W;
            for (int ci = 0; ci < Cin; ++ci) {
              const double* iplane = in + static_cast<std::int64_t>(ci) * H * W;
              double* wk = dw.data() + (static_cast<std::int64_t>(co) * Cin + ci) * 9;
              for (int dy = 0; dy < 3; ++dy) {
                int ylo = std::max(0, 1 - dy), yhi = std::min(H, H + 1 - dy);
                for (int dx = 0; dx < 3; ++dx) {
                  int xlo = std::max(0, 1 - dx), xhi = std::min(W, W + 1 - dx);
                  double acc = 0.0;
                  for (int y = ylo; y < yhi; ++y) {
                    const double* drow = dplane + static_cast<std::int64_t>(y) * W;
                    const double* irow =
                        iplane + static_cast<std::int64_t>(y + dy - 1) * W + (dx - 1);
                    for (int x = xlo; x < xhi; ++x) acc += drow[x] * irow[x];
                  }
                  wk[dy * 3 + dx] += acc;
                }
              }
            }
          }
        }
        if (gr.needs_grad(pi)) {
          const double* w = gr.value_of(pw).data();
          Tensor& di = gr.adjoint_of(pi);
          for (int co = 0; co < Cout; ++co) {
            const double* dplane = D + static_cast<std::int64_t>(co) * H * W;
            for (int ci = 0; ci < Cin; ++ci) {
              double* iplane = di.data() + static_cast<std::int64_t>(ci) * H * W;
              const double* wk = w + (static_cast<std::int64_t>(co) * Cin + ci) * 9;
              for (int dy = 0; dy < 3; ++dy) {
                int ylo = std::max(0, 1 - dy), yhi = std::min(H, H + 1 - dy);
                for (int dx = 0; dx < 3; ++dx) {
                  double wv = wk[dy * 3 + dx];
                  if (wv == 0.0) continue;
                  int xlo = std::max(0, 1 - dx), xhi = std::min(W, W + 1 - dx);
                  for (int y = ylo; y < yhi; ++y) {
                    const double* drow = dplane + static_cast<std::int64_t>(y) * W;
                    double* irow = iplane + static_cast<std::int64_t>(y + dy - 1) * W + (dx - 1);
                    for (int x = xlo; x < xhi; ++x) irow[x] += wv * drow[x];
                  }
                }
              }
            }
          }
        }
      },
      g->needs_grad(pi) || g->needs_grad(pw) || g->needs_grad(pb));
  return {g, id};
}

Var avg_pool_2x2(Var input) {
  Graph* g = input.g;
  const Tensor& t = input.val();
  if (t.rank() != 3) throw DimensionError("avg_pool: expected rank 3, got " + t.shape_str());
  int C = t.dim(0), H = t.dim(1), W = t.dim(2);
  if (H % 2 != 0 || W % 2 != 0) {
    throw DimensionError("avg_pool: spatial dims must be even, got " + t.shape_str());
  }
  int Ho = H / 2, Wo = W / 2;
  Tensor out({C, Ho, Wo});
  for (int c = 0; c < C; ++c) {
    const double* ip = t.data() + static_cast<std::int64_t>(c) * H * W;
    double* op = out.data() + static_cast<std::int64_t>(c) * Ho * Wo;
    for (int y = 0; y < Ho; ++y) {
      for (int x = 0; x < Wo; ++x) {
        const double* r0 = ip + static_cast<std::int64_t>(2 * y) * W + 2 * x;
        const double* r1 = r0 + W;
        op[y * Wo + x] = 0.25 * (r0[0] + r0[1] + r1[0] + r1[1]);
      }
    }
  }
  int pi = input.id;
  int id = g->add_node(std::move(out), {pi},
                       [pi, C, H, W, Ho, Wo](Graph& gr, int self) {
                         if (!gr.needs_grad(pi)) return;
                         const Tensor& d = gr.adjoint_of(self);
                         Tensor& di = gr.adjoint_of(pi);
                         for (int c = 0; c < C; ++c) {
                           const double* dp = d.data() + static_cast<std::int64_t>(c) * Ho * Wo;
                           double* ip = di.data() + static_cast<std::int64_t>(c) * H * W;
                           for (int y = 0; y < Ho; ++y) {
                             for (int x = 0; x < Wo; ++x) {
                               double v = 0.25 * dp[y * Wo + x];
                               double* r0 = ip + static_cast<std::int64_t>(2 * y) * W + 2 * x;
                               double* r1 = r0 + W;
                               r0[0] += v;
                               r0[1] += v;
                               r1[0] += v;
                               r1[1] += v;
                             }
                           }
                         }
                       },
                       g->needs_grad(pi));
  return {g, id};
}

Var layer_norm_channels(Var chw, Var gain, Var bias, double eps) {
  Graph* g = same_graph(chw, gain);
  same_graph(gain, bias);
  const Tensor& t = chw.val();
  const Tensor& tg = gain.val();
  const Tensor& tb = bias.val();
  if (t.rank() != 3) {
    throw DimensionError("layer_norm_channels: expected rank 3, got " + t.shape_str());
  }
  int C = t.dim(0), H = t.dim(1), W = t.dim(2);
  int P = H * W;
  if (tg.rank() != 1 || tg.dim(0) != C || tb.rank() != 1 || tb.dim(0) != C) {
    throw DimensionError("layer_norm_channels: gain " + tg.shape_str() + " / bias " +
                         tb.shape_str() + " vs " + std::to_string(C) + " channels");
  }
  if (eps <= 0.0) throw ConfigError("layer_norm_channels: eps must be positive");
  Tensor out(t.shape());
  Tensor xhat(t.shape());
  Tensor inv_sigma({P});
  for (int p = 0; p < P; ++p) {
    double mu = 0.0;
    for (int c = 0; c < C; ++c) mu += t[static_cast<std::int64_t>(c) * P + p];
    mu /= C;
    double var = 0.0;
    for (int c = 0; c < C; ++c) {
      double v = t[static_cast<std::int64_t>(c) * P + p] - mu;
      var += v * v;
    }
    var /= C;
    double inv = 1.0 / std::sqrt(var + eps);
    inv_sigma[p] = inv;
    for (int c = 0; c < C; ++c) {
      std::int64_t i = static_cast<std::int64_t>(c) * P + p;
      xhat[i] = (t[i] - mu) * inv;
      out[i] = tg[c] * xhat[i] + tb[c];
    }
  }
  int px = chw.id, pg = gain.id, pb = bias.id;
  int id = g->add_node(
      std::move(out), {px, pg, pb},
      [px, pg, pb, C, P, xhat, inv_sigma](Graph& gr, int self) {
        const Tensor& d = gr.adjoint_of(self);
        const Tensor& tg2 = gr.value_of(pg);
        if (gr.needs_grad(pg)) {
          Tensor& dg = gr.adjoint_of(pg);
          for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int p = 0; p < P; ++p) {
              std::int64_t i = static_cast<std::int64_t>(c) * P + p;
              acc += d[i] * xhat[i];
            }
            dg[c] += acc;
          }
        }
        if (gr.needs_grad(pb)) {
          Tensor& db = gr.adjoint_of(pb);
          for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int p = 0; p < P; ++p) acc += d[static_cast<std::int64_t>(c) * P + p];
            db[c] += acc;
          }
        }
        if (gr.needs_grad(px)) {
          Tensor& dx = gr.adjoint_of(px);
          for (int p = 0; p < P; ++p) {
            double m1 = 0.0, m2 = 0.0;
            for (int c = 0; c < C; ++c) {
              std::int64_t i = static_cast<std::int64_t>(c) * P + p;
              double dh = d[i] * tg2[c];
              m1 += dh;
              m2 += dh * xhat[i];
            }
            m1 /= C;
            m2 /= C;
            for (int c = 0; c < C; ++c) {
              std::int64_t i = static_cast<std::int64_t>(c) * P + p;
              double dh = d[i] * tg2[c];
              dx[i] += inv_sigma[p] * (dh - m1 - xhat[i] * m2);
            }
          }
        }
      },
      g->needs_grad(px) || g->needs_grad(pg) || g->needs_grad(pb));
  return {g, id};
}

Var batch_norm_cols(Var x, Var gain, Var bias, BatchNormState& state, bool training,
                    double eps) {
  Graph* g = same_graph(x, gain);
  same_graph(gain, bias);
  const Tensor& tx = x.val();
  const Tensor& tg = gain.val();
  const Tensor& tb = bias.val();
  if (tx.rank() != 2) throw DimensionError("batch_norm: expected rank 2, got " + tx.shape_str());
  int R = tx.dim(0), C = tx.dim(1);
  if (R == 0) throw DimensionError("batch_norm over zero rows");
  if (tg.rank() != 1 || tg.dim(0) != C || tb.rank() != 1 || tb.dim(0) != C ||
      state.running_mean.dim(0) != C) {
    throw DimensionError("batch_norm: feature count mismatch for " + tx.shape_str());
  }
  if (eps <= 0.0) throw ConfigError("batch_norm: eps must be positive");

  Tensor mu({C}), var({C});
  if (training) {
    for (int r = 0; r < R; ++r) {
      for (int c = 0; c < C; ++c) mu[c] += tx[static_cast<std::int64_t>(r) * C + c];
    }
    for (int c = 0; c < C; ++c) mu[c] /= R;
    for (int r = 0; r < R; ++r) {
      for (int c = 0; c < C; ++c) {
        double v = tx[static_cast<std::int64_t>(r) * C + c] - mu[c];
        var[c] += v * v;
      }
    }
    for (int c = 0; c < C; ++c) var[c] /= R;
    // First batch seeds the running statistics; later ones blend in.
    if (state.count[0] == 0.0) {
      state.running_mean = mu;
      state.running_var = var;
    } else {
      for (int c = 0; c < C; ++c) {
        state.running_mean[c] =
            (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu[c];
        state.running_var[c] =
            (1.0 - state.momentum) * state.running_var[c] + state.momentum * var[c];
      }
    }
    state.count[0] += 1.0;
  } else {
    mu = state.running_mean;
    var = state.running_var;
  }

  Tensor out(tx.shape());
  Tensor xhat(tx.shape());
  Tensor inv_sigma({C});
  for (int c = 0; c < C; ++c) inv_sigma[c] = 1.0 / std::sqrt(var[c] + eps);
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) {
      std::int64_t i = static_cast<std::int64_t>(r) * C + c;
      xhat[i] = (tx[i] - mu[c]) * inv_sigma[c];
      out[i] = tg[c] * xhat[i] + tb[c];
    }
  }
  int px = x.id, pg = gain.id, pb = bias.id;
  int id = g->add_node(
      std::move(out), {px, pg, pb},
      [px, pg, pb, R, C, xhat, inv_sigma, training](Graph& gr, int self) {
        const Tensor& d = gr.adjoint_of(self);
        const Tensor& tg2 = gr.value_of(pg);
        if (gr.needs_grad(pg)) {
          Tensor& dg = gr.adjoint_of(pg);
          for (int r = 0; r < R; ++r) {
            for (int c = 0; c < C; ++c) {
              std::int64_t i = static_cast<std::int64_t>(r) * C + c;
              dg[c] += d[i] * xhat[i];
            }
          }
        }
        if (gr.needs_grad(pb)) {
          Tensor& db = gr.adjoint_of(pb);
          for (int r = 0; r < R; ++r) {
            for (int c = 0; c < C; ++c) db[c] += d[static_cast<std::int64_t>(r) * C + c];
          }
        }
        if (gr.needs_grad(px)) {
          Tensor& dx = gr.adjoint_of(px);
          if (training) {
            // Gradient through the batch statistics.
            for (int c = 0; c < C; ++c) {
              double m1 = 0.0, m2 = 0.0;
              for (int r = 0; r < R; ++r) {
                std::int64_t i = static_cast<std::int64_t>(r) * C + c;
                double dh = d[i] * tg2[c];
                m1 += dh;
                m2 += dh * xhat[i];
              }
              m1 /= R;
              m2 /= R;
              for (int r = 0; r < R; ++r) {
                std::int64_t i = static_cast<std::int64_t>(r) * C + c;
                double dh = d[i] * tg2[c];
                dx[i] += inv_sigma[c] * (dh - m1 - xhat[i] * m2);
              }
            }
          } else {
            for (int r = 0; r < R; ++r) {
              for (int c = 0; c < C; ++c) {
                std::int64_t i = static_cast<std::int64_t>(r) * C + c;
                dx[i] += d[i] * tg2[c] * inv_sigma[c];
              }
            }
          }
        }
      },
      g->needs_grad(px) || g->needs_grad(pg) || g->needs_grad(pb));
  return {g, id};
}

Var softmax_cross_entropy(Var logits, const std::vector<int>& labels, double eps) {
  Graph* g = logits.g;
  const Tensor& tl = logits.val();
  if (tl.rank() != 2) {
    throw DimensionError("cross_entropy: expected rank 2 logits, got " + tl.shape_str());
  }
  int B = tl.dim(0), N = tl.dim(1);
  if (N < 2) throw ValidationError("cross_entropy: need at least 2 classes, got " + std::to_string(N));
  if (static_cast<int>(labels.size()) != B) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(B) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || l >= N) {
      throw ValidationError("cross_entropy: label " + std::to_string(l) + " outside [0, " +
                            std::to_string(N) + ")");
    }
  }
  if (eps < 0.0 || eps >= 1.0) {
    throw ConfigError("cross_entropy: smoothing must lie in [0, 1), got " + std::to_string(eps));
  }
  double off = eps / (N - 1);
  double on = 1.0 - eps;
  Tensor probs({B, N});
  double loss = 0.0;
  for (int r = 0; r < B; ++r) {
    const double* x = tl.data() + static_cast<std::int64_t>(r) * N;
    double* p = probs.data() + static_cast<std::int64_t>(r) * N;
    double mx = x[0];
    for (int c = 1; c < N; ++c) mx = std::max(mx, x[c]);
    double z = 0.0;
    for (int c = 0; c < N; ++c) {
      p[c] = std::exp(x[c] - mx);
      z += p[c];
    }
    double logz = std::log(z) + mx;
    for (int c = 0; c < N; ++c) {
      p[c] /= z;
      double t = (c == labels[static_cast<std::size_t>(r)]) ? on : off;
      if (t != 0.0) loss -= t * (x[c] - logz);
    }
  }
  loss /= B;
  int pl = logits.id;
  auto labs = labels;
  int id = g->add_node(Tensor::scalar(loss), {pl},
                       [pl, labs, B, N, on, off, probs](Graph& gr, int self) {
                         if (!gr.needs_grad(pl)) return;
                         double d = gr.adjoint_of(self)[0] / B;
                         Tensor& dl = gr.adjoint_of(pl);
                         for (int r = 0; r < B; ++r) {
                           const double* p = probs.data() + static_cast<std::int64_t>(r) * N;
                           double* dr = dl.data() + static_cast<std::int64_t>(r) * N;
                           for (int c = 0; c < N; ++c) {
                             double t = (c == labs[static_cast<std::size_t>(r)]) ? on : off;
                             dr[c] += d * (p[c] - t);
                           }
                         }
                       },
                       g->needs_grad(pl));
  return {g, id};
}

namespace {
constexpr double kProbFloor = 1e-12;
constexpr double kRowSumTol = 1e-5;

void require_row_stochastic(const Tensor& t, int R, int C, const char* who) {
  for (int r = 0; r < R; ++r) {
    double s = 0.0;
    for (int c = 0; c < C; ++c) {
      double v = t[static_cast<std::int64_t>(r) * C + c];
      if (v < -kRowSumTol) {
        throw ValidationError(std::string(who) + ": negative probability at row " +
                              std::to_string(r));
      }
      s += v;
    }
    if (std::abs(s - 1.0) > kRowSumTol) {
      throw ValidationError(std::string(who) + ": row " + std::to_string(r) +
                            " sums to " + std::to_string(s) + ", expected 1");
    }
  }
}
}  // namespace

Var kl_div_rows(Var p, Var q) {
  Graph* g = same_graph(p, q);
  const Tensor& tp = p.val();
  const Tensor& tq = q.val();
  require_same_shape(tp, tq, "kl_div");
  int R, C;
  as_rows(tp, &R, &C, "kl_div");
  require_row_stochastic(tp, R, C, "kl_div(p)");
  require_row_stochastic(tq, R, C, "kl_div(q)");
  double loss = 0.0;
  for (std::int64_t i = 0; i < tp.size(); ++i) {
    double pv = tp[i];
    if (pv <= kProbFloor) continue;  // 0 log 0 := 0
    double qv = std::max(tq[i], kProbFloor);
    loss += pv * std::log(pv / qv);
  }
  loss /= R;
  int pp = p.id, pq = q.id;
  int id = g->add_node(Tensor::scalar(loss), {pp, pq},
                       [pp, pq, R](Graph& gr, int self) {
                         double d = gr.adjoint_of(self)[0] / R;
                         const Tensor& vp = gr.value_of(pp);
                         const Tensor& vq = gr.value_of(pq);
                         if (gr.needs_grad(pp)) {
                           Tensor& dp = gr.adjoint_of(pp);
                           for (std::int64_t i = 0; i < vp.size(); ++i) {
                             double pv = vp[i];
                             if (pv <= kProbFloor) continue;
                             double qv = std::max(vq[i], kProbFloor);
                             dp[i] += d * (std::log(pv / qv) + 1.0);
                           }
                         }
                         if (gr.needs_grad(pq)) {
                           Tensor& dq = gr.adjoint_of(pq);
                           for (std::int64_t i = 0; i < vq.size(); ++i) {
                             double pv = vp[i];
                             if (pv <= kProbFloor) continue;
                             double qv = vq[i];
                             if (qv <= kProbFloor) continue;  // clamped region
                             dq[i] += d * (-pv / qv);
                           }
                         }
                       },
                       either_needs(g, p, q));
  return {g, id};
}

Var mse(Var a, Var b) {
  Graph* g = same_graph(a, b);
  const Tensor& ta = a.val();
  const Tensor& tb = b.val();
  require_same_shape(ta, tb, "mse");
  if (ta.size() == 0) throw DimensionError("mse over empty tensors");
  double loss = 0.0;
  for (std::int64_t i = 0; i < ta.size(); ++i) {
    double v = ta[i] - tb[i];
    loss += v * v;
  }
  loss /= static_cast<double>(ta.size());
  int pa = a.id, pb = b.id;
  int id = g->add_node(Tensor::scalar(loss), {pa, pb},
                       [pa, pb](Graph& gr, int self) {
                         const Tensor& va = gr.value_of(pa);
                         const Tensor& vb = gr.value_of(pb);
                         double d = 2.0 * gr.adjoint_of(self)[0] / static_cast<double>(va.size());
                         if (gr.needs_grad(pa)) {
                           Tensor& da = gr.adjoint_of(pa);
                           for (std::int64_t i = 0; i < va.size(); ++i) {
                             da[i] += d * (va[i] - vb[i]);
                           }
                         }
                         if (gr.needs_grad(pb)) {
                           Tensor& db = gr.adjoint_of(pb);
                           for (std::int64_t i = 0; i < vb.size(); ++i) {
                             db[i] -= d * (va[i] - vb[i]);
                           }
                         }
                       },
                       either_needs(g, a, b));
  return {g, id};
}

Var detach(Var x) {
  Graph* g = x.g;
  return g->constant(x.val());
}

}  // namespace vgsg
