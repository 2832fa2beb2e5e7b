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

#include "vgsg/tensor.hpp"

#include <cmath>

#include "vgsg/error.hpp"

namespace vgsg {

namespace {

std::int64_t checked_count(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

}  // namespace

std::string shape_to_string(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<std::size_t>(checked_count(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (checked_count(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw DimensionError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_to_string(shape_));
  }
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

int Tensor::dim(int i) const {
  if (i < 0 || i >= rank()) {
    throw DimensionError("axis " + std::to_string(i) + " out of range for shape " + shape_str());
  }
  return shape_[static_cast<std::size_t>(i)];
}

int Tensor::rows() const {
  if (rank() != 2) throw DimensionError("rows(): tensor has shape " + shape_str());
  return shape_[0];
}

int Tensor::cols() const {
  if (rank() != 2) throw DimensionError("cols(): tensor has shape " + shape_str());
  return shape_[1];
}

double& Tensor::at(int r, int c) {
  return data_[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) +
               static_cast<std::size_t>(c)];
}

double Tensor::at(int r, int c) const {
  return data_[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) +
               static_cast<std::size_t>(c)];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::fill(double v) {
  for (double& x : data_) x = v;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

}  // namespace vgsg
