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
#include <iosfwd>
#include <string>

#include "vgsg/encoders.hpp"
#include "vgsg/synthdata.hpp"
#include "vgsg/trainer.hpp"

namespace vgsg::cli {

// Everything a run needs, as one serializable record.  The text form is
// flat `key value` lines grouped by dotted prefix; '#' starts a comment.
// The canonical serialization has a fixed key order and prints reals with
// 17 significant digits, so equal configs serialize to equal bytes and
// hash() is a usable identity.  Every artifact a command writes carries
// that hash, and eval refuses checkpoints whose stamp disagrees unless
// forced.
struct RunConfig {
  EncoderConfig enc;
  TrainConfig train;
  DatasetConfig data;

  std::string serialize() const;
  std::uint64_t hash() const;
};

// Applies one `key value` pair; ConfigError on unknown keys or unparsable
// values.
void apply_key(RunConfig& cfg, const std::string& key, const std::string& value);

// Parses the text form over the current values of `cfg`, so callers layer
// a file on top of defaults.  ConfigError messages name `origin` and the
// offending line.
void parse_config(RunConfig& cfg, std::istream& in, const std::string& origin);

// IngestionError when the file cannot be read.
void load_config_file(RunConfig& cfg, const std::string& path);

}  // namespace vgsg::cli
