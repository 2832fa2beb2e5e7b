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

#include "runconfig.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>

#include "vgsg/error.hpp"
#include "vgsg/model.hpp"

namespace vgsg::cli {
namespace {

// One field table drives both directions, which keeps serialize and
// apply_key in sync by construction.  The visitor receives each key with
// a reference of the field's concrete type.
template <typename Config, typename F>
void visit_fields(Config& c, F&& f) {
  f("enc.channels", c.enc.C);
  f("enc.text_channels", c.enc.C_T);
  f("enc.input_h", c.enc.input_h);
  f("enc.input_w", c.enc.input_w);
  f("enc.max_tokens", c.enc.L_max);
  f("enc.vocab_size", c.enc.vocab_size);
  f("enc.text_layers", c.enc.text_layers);
  f("enc.heads", c.enc.heads);
  f("enc.mlp_ratio", c.enc.mlp_ratio);
  f("enc.drop_path_rate", c.enc.drop_path_rate);
  f("enc.stripes", c.enc.K);
  f("enc.pad_sequences", c.enc.pad_sequences);

  f("train.epochs", c.train.epochs);
  f("train.base_lr", c.train.base_lr);
  f("train.text_lr", c.train.text_lr);
  f("train.lr_decay_factor", c.train.lr_decay_factor);
  f("train.decay_epoch", c.train.decay_epoch);
  f("train.batch_size", c.train.batch_size);
  f("train.per_identity", c.train.per_identity);
  f("train.grad_clip_norm", c.train.grad_clip_norm);
  f("train.tau", c.train.tau);
  f("train.all_pairs_negatives", c.train.all_pairs_negatives);
  f("train.check_stop_gradient", c.train.check_stop_gradient);
  f("train.seed", c.train.seed);

  f("model.local_conv", c.train.model.use_local_conv);
  f("model.sgtl", c.train.model.use_sgtl);
  f("model.vgkt", c.train.model.use_vgkt);
  f("model.transfer", c.train.model.transfer);
  f("model.sgtl_layers", c.train.model.sgtl.layers);
  f("model.text_query", c.train.model.sgtl.use_text_query);
  f("model.channel_group", c.train.model.sgtl.use_channel_group);
  f("model.eos_per_group", c.train.model.sgtl.eos_per_group);
  f("model.sgtl_batch_norm", c.train.model.sgtl.use_batch_norm);

  f("loss.lambda1", c.train.weights.lambda1);
  f("loss.lambda2", c.train.weights.lambda2);
  f("loss.tau_p", c.train.weights.tau_p);
  f("loss.tau_n", c.train.weights.tau_n);
  f("loss.alpha", c.train.weights.alpha);
  f("loss.beta", c.train.weights.beta);
  f("loss.eps", c.train.weights.eps);

  f("data.parts", c.data.k);
  f("data.image_h", c.data.image_h);
  f("data.image_w", c.data.image_w);
  f("data.train_identities", c.data.train_identities);
  f("data.test_identities", c.data.test_identities);
  f("data.samples_per_identity", c.data.samples_per_identity);
  f("data.noise_level", c.data.noise_level);
}

std::string format_value(int v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(std::uint64_t v) { return std::to_string(v); }
std::string format_value(TransferMode v) { return transfer_mode_name(v); }

std::string format_value(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw ConfigError("bad value '" + value + "' for key '" + key + "'");
}

void assign(int& field, const std::string& value, const std::string& key) {
  std::size_t used = 0;
  long parsed = 0;
  try {
    parsed = std::stol(value, &used);
  } catch (const std::exception&) {
    bad_value(key, value);
  }
  if (used != value.size() || parsed < INT32_MIN || parsed > INT32_MAX) bad_value(key, value);
  field = static_cast<int>(parsed);
}

void assign(std::uint64_t& field, const std::string& value, const std::string& key) {
  std::size_t used = 0;
  try {
    field = std::stoull(value, &used);
  } catch (const std::exception&) {
    bad_value(key, value);
  }
  if (used != value.size()) bad_value(key, value);
}

void assign(double& field, const std::string& value, const std::string& key) {
  std::size_t used = 0;
  try {
    field = std::stod(value, &used);
  } catch (const std::exception&) {
    bad_value(key, value);
  }
  if (used != value.size()) bad_value(key, value);
}

void assign(bool& field, const std::string& value, const std::string& key) {
  if (value == "true" || value == "1") {
    field = true;
  } else if (value == "false" || value == "0") {
    field = false;
  } else {
    bad_value(key, value);
  }
}

void assign(TransferMode& field, const std::string& value, const std::string&) {
  field = transfer_mode_from_name(value);  // ConfigError on unknown names
}

std::string trimmed(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string RunConfig::serialize() const {
  std::ostringstream out;
  std::string section;
  visit_fields(*this, [&](const char* key, const auto& field) {
    std::string prefix(key, static_cast<std::size_t>(std::strchr(key, '.') - key));
    if (prefix != section) {
      if (!section.empty()) out << "\n";
      section = prefix;
    }
    out << key << " " << format_value(field) << "\n";
  });
  return out.str();
}

std::uint64_t RunConfig::hash() const { return fnv1a64(serialize()); }

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  bool hit = false;
  visit_fields(cfg, [&](const char* name, auto& field) {
    if (hit || key != name) return;
    hit = true;
    assign(field, value, key);
  });
  if (!hit) throw ConfigError("unknown config key '" + key + "'");
}

void parse_config(RunConfig& cfg, std::istream& in, const std::string& origin) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t comment = line.find('#');
    if (comment != std::string::npos) line.erase(comment);
    line = trimmed(line);
    if (line.empty()) continue;
    std::size_t gap = line.find_first_of(" \t");
    if (gap == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key value'");
    }
    std::string key = line.substr(0, gap);
    std::string value = trimmed(line.substr(gap + 1));
    try {
      apply_key(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot read config file '" + path + "'");
  parse_config(cfg, in, path);
}

}  // namespace vgsg::cli
