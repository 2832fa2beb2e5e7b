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

#include <stdexcept>
#include <string>

namespace vgsg {

// Root of the library's error hierarchy.  Everything thrown on purpose
// derives from Error so callers can separate our failures from the
// runtime's.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or axis disagreement between operands.
struct DimensionError : Error {
  using Error::Error;
};

// Inconsistent or out-of-range configuration values.
struct ConfigError : Error {
  using Error::Error;
};

// Input that is structurally valid but mathematically unusable
// (zero-norm vector fed to a cosine, fully masked attention row, ...).
struct DegenerateInputError : Error {
  using Error::Error;
};

// Runtime precondition on data values violated (labels out of range,
// non-stochastic probability rows, empty pair sets, ...).
struct ValidationError : Error {
  using Error::Error;
};

// Token id outside the vocabulary.
struct VocabularyError : Error {
  using Error::Error;
};

// Batch composition cannot be satisfied by the dataset.
struct SamplingError : Error {
  using Error::Error;
};

// Malformed persisted data (dataset records, checkpoints, exports).
struct IngestionError : Error {
  using Error::Error;
};

// Persisted data is well formed but fails a cross-check (CRC, seed echo,
// config hash).
struct IntegrityError : Error {
  using Error::Error;
};

// Evaluation protocol violated (query without ground truth, ...).
struct ProtocolError : Error {
  using Error::Error;
};

// Non-finite loss during training; message names the offending term.
struct TrainingDivergenceError : Error {
  using Error::Error;
};

// A verification pass (gradient check, oracle comparison) could not run
// or produced a non-finite quantity; message names the operation.
struct VerificationError : Error {
  using Error::Error;
};

}  // namespace vgsg
