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

#include <functional>
#include <string>
#include <vector>

#include "vgsg/graph.hpp"

namespace vgsg {

// Finite-difference verification of reverse-mode gradients.
//
// The oracle is independent of the tape: it only re-evaluates the loss at
// perturbed parameter values and forms central differences
// (f(t + h) - f(t - h)) / (2h).  It never inspects backward rules, so a
// broken rule cannot fool it.

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  std::int64_t worst_index = -1;
  double analytic = 0.0;  // at the worst coordinate
  double numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double step = 0.0;
  double tol = 0.0;

  bool passed() const;
  std::vector<std::string> failing() const;
  std::string summary() const;
};

// Loss evaluation hook.  Must rebuild the computation from the current
// parameter values and return the scalar loss; when backprop is set it
// must also run backward so gradients accumulate into the parameters.
// The function has to be deterministic: any stochastic choices must be
// frozen before checking.
using LossFn = std::function<double(bool backprop)>;

// Relative error per coordinate is |a - n| / max(|a|, |n|, 0.0001): exact
// in the large, an absolute comparison at 1e-8 resolution near zero.
GradCheckReport grad_check(const LossFn& loss, const std::vector<Parameter*>& params,
                           double step = 1e-5, double tol = 1e-4);

}  // namespace vgsg
