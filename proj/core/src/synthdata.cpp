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

#include "vgsg/synthdata.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "vgsg/error.hpp"

namespace vgsg {

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  throw ValidationError("unknown split value");
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw IngestionError("unknown split name '" + name + "'");
}

void DatasetConfig::validate() const {
  if (k < 1 || k > kPaletteSize) {
    throw ConfigError("part count k must lie in [1, " + std::to_string(kPaletteSize) + "]");
  }
  if (image_h <= 0 || image_w <= 0) throw ConfigError("image dimensions must be positive");
  if (image_h % k != 0) throw ConfigError("image height must divide into k bands");
  if (train_identities < 2) throw ConfigError("need at least 2 train identities");
  if (test_identities < 0) throw ConfigError("test identity count must be non-negative");
  if (samples_per_identity < 1) throw ConfigError("need at least one sample per identity");
  if (noise_level < 0.0) throw ConfigError("noise level must be non-negative");
  double capacity = std::pow(static_cast<double>(kPaletteSize), k);
  if (capacity < static_cast<double>(total_identities())) {
    throw ConfigError("palette exhausted: " + std::to_string(kPaletteSize) + "^" +
                      std::to_string(k) + " attribute vectors cannot cover " +
                      std::to_string(total_identities()) + " identities");
  }
}

std::vector<int> Dataset::sample_indices(Split s) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].split == s) out.push_back(static_cast<int>(i));
  }
  return out;
}

const std::array<std::array<double, 3>, kPaletteSize>& band_palette() {
  static const std::array<std::array<double, 3>, kPaletteSize> palette = {{
      {0.1, 0.1, 0.1},
      {0.9, 0.1, 0.1},
      {0.1, 0.9, 0.1},
      {0.1, 0.1, 0.9},
      {0.9, 0.9, 0.1},
      {0.9, 0.1, 0.9},
      {0.1, 0.9, 0.9},
      {0.9, 0.9, 0.9},
  }};
  return palette;
}

namespace {

const std::array<std::string, kPaletteSize> kColorWords = {
    "black", "red", "green", "blue", "yellow", "magenta", "cyan", "white"};
const std::array<std::string, kPaletteSize> kColorSynonyms = {
    "dark", "crimson", "lime", "navy", "gold", "pink", "teal", "pale"};
const std::array<std::string, kPaletteSize> kPartNouns = {
    "head", "chest", "torso", "waist", "legs", "knees", "feet", "shoes"};
const std::array<std::string, 3> kConnectors = {"with", "wearing", "has"};
const std::array<std::string, 2> kOpeners = {"a", "the"};

int require_palette_value(int value) {
  if (value < 0 || value >= kPaletteSize) {
    throw ValidationError("attribute value " + std::to_string(value) + " outside the palette");
  }
  return value;
}

}  // namespace

const std::string& color_word(int value) { return kColorWords[require_palette_value(value)]; }
const std::string& color_synonym(int value) {
  return kColorSynonyms[require_palette_value(value)];
}
const std::string& part_noun(int part) {
  if (part < 0 || part >= kPaletteSize) {
    throw ValidationError("part index " + std::to_string(part) + " has no noun");
  }
  return kPartNouns[static_cast<std::size_t>(part)];
}

Tensor render_identity_image(const DatasetConfig& cfg, const std::vector<int>& attributes) {
  cfg.validate();
  if (static_cast<int>(attributes.size()) != cfg.k) {
    throw ValidationError("expected " + std::to_string(cfg.k) + " part attributes");
  }
  Tensor img({3, cfg.image_h, cfg.image_w});
  int band_h = cfg.image_h / cfg.k;
  for (int c = 0; c < 3; ++c) {
    for (int r = 0; r < cfg.image_h; ++r) {
      double v = band_palette()[static_cast<std::size_t>(
          require_palette_value(attributes[static_cast<std::size_t>(r / band_h)]))]
                     [static_cast<std::size_t>(c)];
      for (int x = 0; x < cfg.image_w; ++x) {
        img[(static_cast<std::int64_t>(c) * cfg.image_h + r) * cfg.image_w + x] = v;
      }
    }
  }
  return img;
}

namespace {

double& px(Tensor& img, int c, int r, int x) {
  return img[(static_cast<std::int64_t>(c) * img.dim(1) + r) * img.dim(2) + x];
}

// Flip, shifted crop, erase, then photometric noise, each drawn from the
// sample's stream in a fixed order.
void augment_image(Tensor& img, const DatasetConfig& cfg, Rng& rng) {
  int H = cfg.image_h, W = cfg.image_w;
  if (rng.uniform() < 0.5) {
    for (int c = 0; c < 3; ++c) {
      for (int r = 0; r < H; ++r) {
        for (int x = 0; x < W / 2; ++x) {
          std::swap(px(img, c, r, x), px(img, c, r, W - 1 - x));
        }
      }
    }
  }

  // Zero-pad by 2 on every side, then crop back at a random offset.
  int dy = rng.uniform_int(5), dx = rng.uniform_int(5);
  Tensor shifted({3, H, W});
  for (int c = 0; c < 3; ++c) {
    for (int r = 0; r < H; ++r) {
      for (int x = 0; x < W; ++x) {
        int sr = r + dy - 2, sx = x + dx - 2;
        double v = 0.0;
        if (sr >= 0 && sr < H && sx >= 0 && sx < W) v = px(img, c, sr, sx);
        px(shifted, c, r, x) = v;
      }
    }
  }
  img = shifted;

  if (rng.uniform() < 0.5) {
    int eh = std::max(1, H / 8) + rng.uniform_int(std::max(1, H / 4));
    int ew = std::max(1, W / 4) + rng.uniform_int(std::max(1, W / 2));
    eh = std::min(eh, H);
    ew = std::min(ew, W);
    int r0 = rng.uniform_int(H - eh + 1), x0 = rng.uniform_int(W - ew + 1);
    for (int c = 0; c < 3; ++c) {
      for (int r = r0; r < r0 + eh; ++r) {
        for (int x = x0; x < x0 + ew; ++x) px(img, c, r, x) = rng.uniform();
      }
    }
  }

  for (std::int64_t i = 0; i < img.size(); ++i) img[i] += rng.normal(0.0, cfg.noise_level);
}

std::vector<std::string> compose_caption(const std::vector<int>& attributes, int k, Rng& rng) {
  std::vector<std::string> words;
  words.push_back(kOpeners[static_cast<std::size_t>(rng.uniform_int(2))]);
  words.push_back("person");
  for (int part = 0; part < k; ++part) {
    words.push_back(kConnectors[static_cast<std::size_t>(rng.uniform_int(3))]);
    int value = attributes[static_cast<std::size_t>(part)];
    words.push_back(rng.uniform_int(2) == 0 ? color_word(value) : color_synonym(value));
    words.push_back(part_noun(part));
  }
  return words;
}

Vocabulary build_vocabulary(int k) {
  std::vector<std::string> words = {"<sos>", "<eos>"};
  words.insert(words.end(), kOpeners.begin(), kOpeners.end());
  words.push_back("person");
  words.insert(words.end(), kConnectors.begin(), kConnectors.end());
  words.insert(words.end(), kColorWords.begin(), kColorWords.end());
  words.insert(words.end(), kColorSynonyms.begin(), kColorSynonyms.end());
  for (int part = 0; part < k; ++part) words.push_back(part_noun(part));
  return Vocabulary::from_words(words);
}

void quantize_to_float(Tensor& img) {
  for (std::int64_t i = 0; i < img.size(); ++i) {
    img[i] = static_cast<double>(static_cast<float>(img[i]));
  }
}

}  // namespace

Dataset generate_dataset(std::uint64_t seed, const DatasetConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.seed = seed;
  ds.cfg = cfg;
  ds.vocab = build_vocabulary(cfg.k);

  // Collision-free attribute assignment from the root stream.
  Rng root(seed);
  std::set<std::vector<int>> used;
  for (int id = 0; id < cfg.total_identities(); ++id) {
    std::vector<int> attrs(static_cast<std::size_t>(cfg.k));
    do {
      for (int part = 0; part < cfg.k; ++part) {
        attrs[static_cast<std::size_t>(part)] = root.uniform_int(kPaletteSize);
      }
    } while (!used.insert(attrs).second);
    ds.part_attributes.push_back(attrs);
  }

  for (int id = 0; id < cfg.total_identities(); ++id) {
    Split split = id < cfg.train_identities ? Split::kTrain : Split::kTest;
    Rng stream = root.derive(static_cast<std::uint64_t>(id));
    for (int s = 0; s < cfg.samples_per_identity; ++s) {
      SynthSample sample;
      sample.identity = id;
      sample.split = split;
      sample.image = render_identity_image(cfg, ds.part_attributes[static_cast<std::size_t>(id)]);
      if (cfg.noise_level > 0.0) augment_image(sample.image, cfg, stream);
      quantize_to_float(sample.image);
      sample.caption = compose_caption(ds.part_attributes[static_cast<std::size_t>(id)], cfg.k,
                                       stream);
      ds.samples.push_back(std::move(sample));
    }
  }
  return ds;
}

namespace {

const char kB64Alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(const std::vector<unsigned char>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    unsigned int chunk = static_cast<unsigned int>(bytes[i]) << 16;
    int have = 1;
    if (i + 1 < bytes.size()) {
      chunk |= static_cast<unsigned int>(bytes[i + 1]) << 8;
      have = 2;
    }
    if (i + 2 < bytes.size()) {
      chunk |= static_cast<unsigned int>(bytes[i + 2]);
      have = 3;
    }
    out.push_back(kB64Alphabet[(chunk >> 18) & 63]);
    out.push_back(kB64Alphabet[(chunk >> 12) & 63]);
    out.push_back(have >= 2 ? kB64Alphabet[(chunk >> 6) & 63] : '=');
    out.push_back(have == 3 ? kB64Alphabet[chunk & 63] : '=');
  }
  return out;
}

std::vector<unsigned char> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw IngestionError("base64 payload length not a multiple of 4");
  std::array<int, 256> lookup;
  lookup.fill(-1);
  for (int i = 0; i < 64; ++i) lookup[static_cast<unsigned char>(kB64Alphabet[i])] = i;
  std::vector<unsigned char> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    unsigned int chunk = 0;
    int pads = 0;
    for (int j = 0; j < 4; ++j) {
      char ch = text[i + static_cast<std::size_t>(j)];
      chunk <<= 6;
      if (ch == '=') {
        if (i + 4 != text.size() || j < 2) throw IngestionError("misplaced base64 padding");
        ++pads;
        continue;
      }
      if (pads > 0 || lookup[static_cast<unsigned char>(ch)] < 0) {
        throw IngestionError("invalid base64 character");
      }
      chunk |= static_cast<unsigned int>(lookup[static_cast<unsigned char>(ch)]);
    }
    out.push_back(static_cast<unsigned char>((chunk >> 16) & 0xff));
    if (pads < 2) out.push_back(static_cast<unsigned char>((chunk >> 8) & 0xff));
    if (pads < 1) out.push_back(static_cast<unsigned char>(chunk & 0xff));
  }
  return out;
}

std::vector<unsigned char> image_bytes(const Tensor& img) {
  std::vector<unsigned char> bytes;
  bytes.reserve(static_cast<std::size_t>(img.size()) * 4);
  for (std::int64_t i = 0; i < img.size(); ++i) {
    std::uint32_t u = std::bit_cast<std::uint32_t>(static_cast<float>(img[i]));
    bytes.push_back(static_cast<unsigned char>(u & 0xff));
    bytes.push_back(static_cast<unsigned char>((u >> 8) & 0xff));
    bytes.push_back(static_cast<unsigned char>((u >> 16) & 0xff));
    bytes.push_back(static_cast<unsigned char>((u >> 24) & 0xff));
  }
  return bytes;
}

Tensor image_from_bytes(const std::vector<unsigned char>& bytes, const DatasetConfig& cfg) {
  std::size_t expect = static_cast<std::size_t>(3) * cfg.image_h * cfg.image_w * 4;
  if (bytes.size() != expect) {
    throw IngestionError("image payload holds " + std::to_string(bytes.size()) +
                         " bytes, expected " + std::to_string(expect));
  }
  Tensor img({3, cfg.image_h, cfg.image_w});
  for (std::int64_t i = 0; i < img.size(); ++i) {
    std::size_t o = static_cast<std::size_t>(i) * 4;
    std::uint32_t u = static_cast<std::uint32_t>(bytes[o]) |
                      (static_cast<std::uint32_t>(bytes[o + 1]) << 8) |
                      (static_cast<std::uint32_t>(bytes[o + 2]) << 16) |
                      (static_cast<std::uint32_t>(bytes[o + 3]) << 24);
    img[i] = static_cast<double>(std::bit_cast<float>(u));
  }
  return img;
}

std::uint32_t crc_of(const std::vector<unsigned char>& bytes) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::filesystem::path root(dir);

  std::ofstream manifest(root / "manifest.txt");
  if (!manifest) throw IngestionError("cannot write manifest under " + dir);
  manifest << "version 1\n";
  manifest << "seed " << ds.seed << "\n";
  manifest << "k " << ds.cfg.k << "\n";
  manifest << "image_h " << ds.cfg.image_h << "\n";
  manifest << "image_w " << ds.cfg.image_w << "\n";
  manifest << "train_identities " << ds.cfg.train_identities << "\n";
  manifest << "test_identities " << ds.cfg.test_identities << "\n";
  manifest << "samples_per_identity " << ds.cfg.samples_per_identity << "\n";
  manifest << "noise_level " << format_double(ds.cfg.noise_level) << "\n";
  manifest << "vocabulary";
  for (int i = 0; i < ds.vocab.size(); ++i) manifest << ' ' << ds.vocab.word(i);
  manifest << "\n";

  std::ofstream out(root / "samples.txt");
  if (!out) throw IngestionError("cannot write samples under " + dir);
  out << "seed " << ds.seed << "\n";
  for (const SynthSample& s : ds.samples) {
    std::vector<unsigned char> bytes = image_bytes(s.image);
    out << s.identity << ' ' << split_name(s.split) << ' ' << s.caption.size();
    for (const std::string& w : s.caption) out << ' ' << w;
    out << ' ' << crc_of(bytes) << ' ' << base64_encode(bytes) << "\n";
  }
}

namespace {

[[noreturn]] void record_error(int line, const std::string& what) {
  throw IngestionError("samples.txt line " + std::to_string(line) + ": " + what);
}

long long parse_ll(const std::string& tok, int line, const char* what) {
  try {
    std::size_t pos = 0;
    long long v = std::stoll(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    record_error(line, std::string("bad ") + what + " '" + tok + "'");
  }
}

}  // namespace

Dataset load_dataset(const std::string& dir) {
  std::filesystem::path root(dir);
  std::ifstream manifest(root / "manifest.txt");
  if (!manifest) throw IngestionError("missing manifest.txt under " + dir);

  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::size_t sp = line.find(' ');
    if (sp == std::string::npos) throw IngestionError("manifest line without a value: " + line);
    kv[line.substr(0, sp)] = line.substr(sp + 1);
  }
  auto field = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw IngestionError("manifest is missing '" + key + "'");
    return it->second;
  };
  if (field("version") != "1") {
    throw IngestionError("unsupported dataset version " + field("version"));
  }

  Dataset ds;
  ds.seed = static_cast<std::uint64_t>(std::stoull(field("seed")));
  ds.cfg.k = std::stoi(field("k"));
  ds.cfg.image_h = std::stoi(field("image_h"));
  ds.cfg.image_w = std::stoi(field("image_w"));
  ds.cfg.train_identities = std::stoi(field("train_identities"));
  ds.cfg.test_identities = std::stoi(field("test_identities"));
  ds.cfg.samples_per_identity = std::stoi(field("samples_per_identity"));
  ds.cfg.noise_level = std::stod(field("noise_level"));
  ds.cfg.validate();

  std::istringstream vs(field("vocabulary"));
  std::vector<std::string> words;
  std::string w;
  while (vs >> w) words.push_back(w);
  ds.vocab = Vocabulary::from_words(words);

  std::ifstream in(root / "samples.txt");
  if (!in) throw IngestionError("missing samples.txt under " + dir);
  if (!std::getline(in, line)) throw IngestionError("samples.txt is empty");
  {
    std::istringstream hs(line);
    std::string tag, value;
    if (!(hs >> tag >> value) || tag != "seed") {
      throw IngestionError("samples.txt must start with the seed header");
    }
    if (value != std::to_string(ds.seed)) {
      throw IntegrityError("samples seed " + value + " does not match manifest seed " +
                           std::to_string(ds.seed));
    }
  }

  // Inverse caption map for rebuilding attribute vectors.
  std::map<std::string, int> word_to_value;
  for (int v = 0; v < kPaletteSize; ++v) {
    word_to_value[color_word(v)] = v;
    word_to_value[color_synonym(v)] = v;
  }

  ds.part_attributes.assign(static_cast<std::size_t>(ds.cfg.total_identities()), {});
  std::vector<int> split_seen(static_cast<std::size_t>(ds.cfg.total_identities()), -1);
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<std::string> tok;
    while (ls >> w) tok.push_back(w);
    if (tok.size() < 5) record_error(lineno, "truncated record");

    SynthSample s;
    long long id = parse_ll(tok[0], lineno, "identity");
    if (id < 0 || id >= ds.cfg.total_identities()) {
      record_error(lineno, "identity " + tok[0] + " outside the manifest range");
    }
    s.identity = static_cast<int>(id);
    try {
      s.split = split_from_name(tok[1]);
    } catch (const IngestionError& e) {
      record_error(lineno, e.what());
    }
    long long ntok = parse_ll(tok[2], lineno, "caption length");
    if (ntok < 1 || tok.size() != static_cast<std::size_t>(ntok) + 5) {
      record_error(lineno, "field count does not match the caption length");
    }
    std::vector<int> attrs;
    for (long long i = 0; i < ntok; ++i) {
      const std::string& word = tok[3 + static_cast<std::size_t>(i)];
      if (!ds.vocab.contains(word)) record_error(lineno, "unknown word '" + word + "'");
      auto it = word_to_value.find(word);
      if (it != word_to_value.end()) attrs.push_back(it->second);
      s.caption.push_back(word);
    }
    if (static_cast<int>(attrs.size()) != ds.cfg.k) {
      record_error(lineno, "caption names " + std::to_string(attrs.size()) + " attributes, not " +
                               std::to_string(ds.cfg.k));
    }

    std::vector<unsigned char> bytes;
    try {
      bytes = base64_decode(tok.back());
    } catch (const IngestionError& e) {
      record_error(lineno, e.what());
    }
    std::uint32_t want =
        static_cast<std::uint32_t>(parse_ll(tok[tok.size() - 2], lineno, "checksum"));
    if (crc_of(bytes) != want) record_error(lineno, "checksum mismatch");
    try {
      s.image = image_from_bytes(bytes, ds.cfg);
    } catch (const IngestionError& e) {
      record_error(lineno, e.what());
    }

    std::size_t uid = static_cast<std::size_t>(s.identity);
    if (ds.part_attributes[uid].empty()) {
      ds.part_attributes[uid] = attrs;
    } else if (ds.part_attributes[uid] != attrs) {
      record_error(lineno, "identity " + tok[0] + " changes its attributes");
    }
    int split_tag = static_cast<int>(s.split);
    if (split_seen[uid] == -1) {
      split_seen[uid] = split_tag;
    } else if (split_seen[uid] != split_tag) {
      record_error(lineno, "identity " + tok[0] + " appears in two splits");
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Batch sample_batch(const Dataset& ds, Rng& rng, int batch_size, int per_identity) {
  if (batch_size < 1 || per_identity < 1 || batch_size % per_identity != 0) {
    throw ConfigError("batch size must be a positive multiple of the per-identity count");
  }
  int groups = batch_size / per_identity;

  std::map<int, std::vector<int>> by_identity;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    if (ds.samples[i].split == Split::kTrain) {
      by_identity[ds.samples[i].identity].push_back(static_cast<int>(i));
    }
  }
  std::vector<int> eligible;
  for (const auto& [id, idx] : by_identity) {
    if (static_cast<int>(idx.size()) >= per_identity) eligible.push_back(id);
  }
  if (static_cast<int>(eligible.size()) < groups) {
    throw SamplingError("batch needs " + std::to_string(groups) + " identities with " +
                        std::to_string(per_identity) + " samples, have " +
                        std::to_string(eligible.size()));
  }

  rng.shuffle(eligible);
  Batch batch;
  for (int gidx = 0; gidx < groups; ++gidx) {
    int id = eligible[static_cast<std::size_t>(gidx)];
    std::vector<int> pool = by_identity[id];
    rng.shuffle(pool);
    for (int p = 0; p < per_identity; ++p) {
      batch.sample_indices.push_back(pool[static_cast<std::size_t>(p)]);
      batch.identities.push_back(id);
    }
  }
  return batch;
}

}  // namespace vgsg
