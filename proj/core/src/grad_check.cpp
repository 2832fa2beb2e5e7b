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

#include "vgsg/grad_check.hpp"

#include <cmath>
#include <sstream>

#include "vgsg/error.hpp"

namespace vgsg {

bool GradCheckReport::passed() const {
  for (const GradCheckEntry& e : entries) {
    if (!e.passed) return false;
  }
  return true;
}

std::vector<std::string> GradCheckReport::failing() const {
  std::vector<std::string> out;
  for (const GradCheckEntry& e : entries) {
    if (!e.passed) out.push_back(e.param);
  }
  return out;
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  for (const GradCheckEntry& e : entries) {
    os << (e.passed ? "ok   " : "FAIL ") << e.param << "  max_rel_err=" << e.max_rel_err;
    if (e.worst_index >= 0) {
      os << "  (coord " << e.worst_index << ": analytic=" << e.analytic
         << " numeric=" << e.numeric << ")";
    }
    os << "\n";
  }
  return os.str();
}

GradCheckReport grad_check(const LossFn& loss, const std::vector<Parameter*>& params,
                           double step, double tol) {
  if (step <= 0.0) throw ConfigError("grad_check: step must be positive");
  if (tol <= 0.0) throw ConfigError("grad_check: tol must be positive");

  for (Parameter* p : params) p->zero_grad();
  double f0 = loss(true);
  if (!std::isfinite(f0)) {
    throw VerificationError("grad_check: loss is not finite at the base point");
  }

  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckReport report;
  report.step = step;
  report.tol = tol;

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    GradCheckEntry entry;
    entry.param = p.name;
    for (std::int64_t i = 0; i < p.value.size(); ++i) {
      double saved = p.value[i];
      p.value[i] = saved + step;
      double fp = loss(false);
      p.value[i] = saved - step;
      double fm = loss(false);
      p.value[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw VerificationError("grad_check: non-finite loss while perturbing " + p.name);
      }
      double numeric = (fp - fm) / (2.0 * step);
      double a = analytic[pi][i];
      double denom = std::max({std::abs(a), std::abs(numeric), 1e-4});
      double rel = std::abs(a - numeric) / denom;
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = numeric;
      }
    }
    entry.passed = entry.max_rel_err <= tol;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace vgsg
