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
#include <vector>

#include "vgsg/grad_check.hpp"

namespace vgsg {

// Finite-difference sweep over every trainable parameter of every model
// variant, driven through the full step loss at verification scale.  The
// variant set covers each parameter group: the shared encoders and pools,
// the stripe branch, the semantic-group branch, the teacher, and every
// transfer-loss surface.

struct SuiteItem {
  std::string name;
  GradCheckReport report;
};

struct SuiteOptions {
  double step = 1e-5;
  double tol = 1e-4;
  // Negative control: break one backward rule so the suite must fail.
  bool flip_gelu_backward = false;
  // When nonempty, only items whose name contains one of these run.
  std::vector<std::string> only;
};

std::vector<SuiteItem> run_gradcheck_suite(const SuiteOptions& options);

// Names of the items a default run executes, in order.
std::vector<std::string> gradcheck_suite_names();

bool suite_passed(const std::vector<SuiteItem>& items);
std::vector<std::string> suite_failures(const std::vector<SuiteItem>& items);

}  // namespace vgsg
