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

#include <benchmark/benchmark.h>

#include "vgsg/graph.hpp"
#include "vgsg/init.hpp"
#include "vgsg/rng.hpp"

namespace {

using namespace vgsg;

Tensor rand_tensor(std::vector<int> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

void BM_matmul_forward(benchmark::State& state) {
  int n = static_cast<int>(state.range(0));
  Rng rng(1);
  Tensor a = rand_tensor({n, n}, rng);
  Tensor b = rand_tensor({n, n}, rng);
  for (auto _ : state) {
    Graph g;
    Var out = matmul(g.constant(a), g.constant(b));
    benchmark::DoNotOptimize(out.val().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * n * n);
}
BENCHMARK(BM_matmul_forward)->Arg(16)->Arg(64)->Arg(128);

void BM_matmul_train_step(benchmark::State& state) {
  int n = static_cast<int>(state.range(0));
  Rng rng(2);
  Parameter a("a", rand_tensor({n, n}, rng));
  Parameter b("b", rand_tensor({n, n}, rng));
  for (auto _ : state) {
    Graph g;
    Var out = matmul(g.leaf(a), g.leaf(b));
    Var loss = mean(mul(out, out));
    g.backward(loss);
    a.zero_grad();
    b.zero_grad();
    benchmark::DoNotOptimize(loss.val()[0]);
  }
}
BENCHMARK(BM_matmul_train_step)->Arg(16)->Arg(64);

void BM_softmax_rows(benchmark::State& state) {
  Rng rng(3);
  Tensor x = rand_tensor({64, 64}, rng);
  for (auto _ : state) {
    Graph g;
    Var out = softmax_rows(g.constant(x));
    benchmark::DoNotOptimize(out.val().data());
  }
}
BENCHMARK(BM_softmax_rows);

void BM_conv2d_forward(benchmark::State& state) {
  Rng rng(4);
  Tensor img = rand_tensor({16, 32, 16}, rng);
  Tensor w = rand_tensor({32, 16, 3, 3}, rng);
  Tensor b = rand_tensor({32}, rng);
  for (auto _ : state) {
    Graph g;
    Var out = conv2d_3x3(g.constant(img), g.constant(w), g.constant(b));
    benchmark::DoNotOptimize(out.val().data());
  }
}
BENCHMARK(BM_conv2d_forward);

}  // namespace

BENCHMARK_MAIN();
