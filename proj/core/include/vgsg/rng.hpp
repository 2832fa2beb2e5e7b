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
#include <random>
#include <string>
#include <vector>

namespace vgsg {

// Deterministic random stream.  All stochastic behaviour in the library
// draws from an explicitly passed Rng; nothing reads global entropy.
//
// derive() builds an independent stream from the root seed and a stream
// id, so work split across identities (or workers) reproduces the serial
// order bit-exactly: each unit of work owns a derived stream that does
// not depend on how many draws its neighbours made.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // Independent stream keyed by (root seed, stream id).
  Rng derive(std::uint64_t stream_id) const;

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();

  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Uniform on [lo, hi).
  double uniform(double lo, double hi);
  // Uniform integer on [0, n); n must be positive.
  int uniform_int(int n);

  // Standard normal via Box-Muller.  No cached spare draw, so the
  // serialized engine state fully describes the stream position.
  double normal();
  double normal(double mean, double stddev);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(static_cast<int>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Engine state round trip, used by checkpoint resume.
  std::string serialize_state() const;
  void restore_state(const std::string& text);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

// SplitMix64 finalizer; also used on its own for config hashing salt.
std::uint64_t mix64(std::uint64_t x);

}  // namespace vgsg
