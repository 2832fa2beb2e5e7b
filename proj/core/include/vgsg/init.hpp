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

#include <cmath>

#include "vgsg/rng.hpp"
#include "vgsg/tensor.hpp"

namespace vgsg {

// Glorot-uniform fill over [-a, a] with a = sqrt(6 / (fan_in + fan_out)).
inline void init_xavier(Tensor& t, Rng& rng, int fan_in, int fan_out) {
  double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-a, a);
}

inline void init_normal(Tensor& t, Rng& rng, double stddev) {
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
}

}  // namespace vgsg
