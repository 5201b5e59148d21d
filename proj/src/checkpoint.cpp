// SPDX-License-Identifier: Apache-2.0
#include "elx/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace elx {

using ordered_json = nlohmann::ordered_json;

bool LevelTable::has(int percent) const {
  for (const auto& e : levels) {
    if (e.percent == percent) return true;
  }
  return false;
}

const LevelEntry& LevelTable::at(int percent) const {
  for (const auto& e : levels) {
    if (e.percent == percent) return e;
  }
  throw LookupError("unknown model level " + std::to_string(percent) + "%");
}

ViewExtents ElasticCheckpoint::extents_for(int percent) const {
  const LevelEntry& e = levels.at(percent);
  ViewExtents ext;
  ext.layers = e.layers;
  return ext;
}

const AdapterSet* ElasticCheckpoint::adapters_for(int percent) const {
  auto it = adapters.find(percent);
  return it == adapters.end() ? nullptr : &it->second;
}

int64_t ElasticCheckpoint::adapter_param_count(int percent) const {
  const AdapterSet* set = adapters_for(percent);
  return set ? set->param_count() : 0;
}

uint64_t fnv1a64(const void* data, size_t n, uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::string fnv1a64_hex_of(const std::string& s) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(s.data(), s.size())));
  return buf;
}

namespace {

constexpr char kMagic[4] = {'E', 'L', 'X', 'C'};

struct BlobWriter {
  std::vector<char> bytes;
  ordered_json entries = ordered_json::array();

  void add(const std::string& name, const TensorF& t) {
    if (t.empty()) return;
    ordered_json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["offset"] = bytes.size();
    entries.push_back(std::move(e));
    const size_t n = static_cast<size_t>(t.numel()) * sizeof(float);
    const size_t at = bytes.size();
    bytes.resize(at + n);
    std::memcpy(bytes.data() + at, t.data(), n);
  }
};

struct BlobReader {
  const std::vector<char>& bytes;

  TensorF read(const ordered_json& entry) const {
    const std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
    const size_t offset = entry.at("offset").get<size_t>();
    const int64_t numel = TensorF::numel_of(shape);
    const size_t n = static_cast<size_t>(numel) * sizeof(float);
    if (offset + n > bytes.size()) {
      throw FormatError("tensor '" + entry.at("name").get<std::string>() +
                        "' extends past the end of the blob");
    }
    TensorF t(shape);
    std::memcpy(t.data(), bytes.data() + offset, n);
    return t;
  }
};

void write_container(const std::string& path, const ordered_json& manifest,
                     const std::vector<char>& blob) {
  const std::string m = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out.write(kMagic, 4);
  const uint32_t version = kCheckpointFormatVersion;
  const uint64_t msize = m.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&msize), sizeof(msize));
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw FormatError("short write to '" + path + "'");
}

std::pair<ordered_json, std::vector<char>> read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::vector<char> all((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
  if (all.size() < 16 || std::memcmp(all.data(), kMagic, 4) != 0) {
    throw FormatError("'" + path + "' is not an elx container");
  }
  uint32_t version = 0;
  uint64_t msize = 0;
  std::memcpy(&version, all.data() + 4, sizeof(version));
  std::memcpy(&msize, all.data() + 8, sizeof(msize));
  if (version != kCheckpointFormatVersion) {
    throw UnsupportedVersionError("unsupported container version " +
                                  std::to_string(version));
  }
  if (16 + msize > all.size()) throw FormatError("truncated manifest in '" + path + "'");
  ordered_json manifest;
  try {
    manifest = ordered_json::parse(all.begin() + 16, all.begin() + 16 +
                                                         static_cast<std::ptrdiff_t>(msize));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest parse error: ") + e.what());
  }
  std::vector<char> blob(all.begin() + 16 + static_cast<std::ptrdiff_t>(msize), all.end());
  return {std::move(manifest), std::move(blob)};
}

void check_blob(const ordered_json& manifest, const std::vector<char>& blob) {
  const uint64_t expect_bytes = manifest.at("blob_bytes").get<uint64_t>();
  if (blob.size() != expect_bytes) {
    throw FormatError("blob size mismatch: manifest says " + std::to_string(expect_bytes) +
                      ", file has " + std::to_string(blob.size()));
  }
  char digest[17];
  std::snprintf(digest, sizeof(digest), "%016llx",
                static_cast<unsigned long long>(fnv1a64(blob.data(), blob.size())));
  if (manifest.at("blob_digest").get<std::string>() != digest) {
    throw FormatError("blob digest mismatch; the file is corrupt");
  }
}

std::string blob_digest_hex(const std::vector<char>& blob) {
  char digest[17];
  std::snprintf(digest, sizeof(digest), "%016llx",
                static_cast<unsigned long long>(fnv1a64(blob.data(), blob.size())));
  return digest;
}

ordered_json config_to_json(const ModelConfig& c) {
  ordered_json j;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["head_dim"] = c.head_dim;
  j["d_ff"] = c.d_ff;
  j["vocab_size"] = c.vocab_size;
  j["mlp_kind"] = c.mlp_kind == MlpKind::kGated ? "gated" : "plain";
  j["use_rope"] = c.use_rope;
  j["use_bias"] = c.use_bias;
  j["seed"] = c.seed;
  return j;
}

ModelConfig config_from_json(const ordered_json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.head_dim = j.at("head_dim").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  const std::string kind = j.at("mlp_kind").get<std::string>();
  if (kind == "gated") {
    c.mlp_kind = MlpKind::kGated;
  } else if (kind == "plain") {
    c.mlp_kind = MlpKind::kPlain;
  } else {
    throw FormatError("unknown mlp_kind '" + kind + "'");
  }
  c.use_rope = j.at("use_rope").get<bool>();
  c.use_bias = j.at("use_bias").get<bool>();
  c.seed = j.at("seed").get<uint64_t>();
  c.validate();
  return c;
}

const char* adapter_slot_names[] = {"wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"};

Adapter* adapter_slot(LayerAdapters& la, const std::string& name) {
  if (name == "wq") return &la.wq;
  if (name == "wk") return &la.wk;
  if (name == "wv") return &la.wv;
  if (name == "wo") return &la.wo;
  if (name == "w_gate") return &la.w_gate;
  if (name == "w_up") return &la.w_up;
  if (name == "w_down") return &la.w_down;
  return nullptr;
}

}  // namespace

void save_checkpoint(const ElasticCheckpoint& ckpt, const std::string& path) {
  BlobWriter blob;
  ckpt.weights.for_each_tensor(
      [&](const std::string& name, const TensorF& t) { blob.add(name, t); });
  for (const auto& [pct, set] : ckpt.adapters) {
    for (size_t l = 0; l < set.layers.size(); ++l) {
      const auto& la = set.layers[l];
      const Adapter* slots[] = {&la.wq, &la.wk, &la.wv, &la.wo, &la.w_gate, &la.w_up,
                                &la.w_down};
      for (size_t s = 0; s < 7; ++s) {
        if (!slots[s]->present()) continue;
        const std::string base = "adapters." + std::to_string(pct) + ".layers." +
                                 std::to_string(l) + "." + adapter_slot_names[s];
        blob.add(base + ".a", slots[s]->a);
        blob.add(base + ".b", slots[s]->b);
      }
    }
  }

  ordered_json m;
  m["format"] = "elx-checkpoint";
  m["format_version"] = ckpt.format_version;
  m["config"] = config_to_json(ckpt.config());
  m["anchors"] = ckpt.anchors;
  m["head_order"] = ckpt.head_order;
  m["neuron_order"] = ckpt.neuron_order;
  {
    ordered_json imp;
    std::vector<std::vector<double>> heads(static_cast<size_t>(ckpt.config().n_layers));
    std::vector<std::vector<double>> neurons(static_cast<size_t>(ckpt.config().n_layers));
    for (int l = 0; l < ckpt.config().n_layers; ++l) {
      heads[static_cast<size_t>(l)].resize(static_cast<size_t>(ckpt.config().n_heads));
      neurons[static_cast<size_t>(l)].resize(static_cast<size_t>(ckpt.config().d_ff));
      for (int h = 0; h < ckpt.config().n_heads; ++h) {
        heads[static_cast<size_t>(l)][static_cast<size_t>(h)] =
            ckpt.importance.at({l, UnitKind::kAttentionHead, h});
      }
      for (int j = 0; j < ckpt.config().d_ff; ++j) {
        neurons[static_cast<size_t>(l)][static_cast<size_t>(j)] =
            ckpt.importance.at({l, UnitKind::kMlpNeuron, j});
      }
    }
    imp["heads"] = heads;
    imp["neurons"] = neurons;
    m["importance"] = std::move(imp);
  }
  {
    ordered_json levels = ordered_json::array();
    for (const auto& e : ckpt.levels.levels) {
      ordered_json le;
      le["percent"] = e.percent;
      le["fraction"] = e.fraction;
      std::vector<int> heads, neurons;
      for (const auto& x : e.layers) {
        heads.push_back(x.heads);
        neurons.push_back(x.neurons);
      }
      le["heads"] = heads;
      le["neurons"] = neurons;
      levels.push_back(std::move(le));
    }
    m["levels"] = std::move(levels);
  }
  m["adapter_rank"] = ckpt.adapter_rank;
  {
    std::vector<int> pcts;
    for (const auto& [pct, _] : ckpt.adapters) pcts.push_back(pct);
    m["adapter_levels"] = pcts;
  }
  m["tensors"] = blob.entries;
  m["blob_bytes"] = blob.bytes.size();
  m["blob_digest"] = blob_digest_hex(blob.bytes);
  write_container(path, m, blob.bytes);
}

ElasticCheckpoint load_checkpoint(const std::string& path) {
  auto [m, blob] = read_container(path);
  try {
    if (m.at("format").get<std::string>() != "elx-checkpoint") {
      throw FormatError("'" + path + "' is not an elastic checkpoint");
    }
    const int fv = m.at("format_version").get<int>();
    if (fv != kCheckpointFormatVersion) {
      throw UnsupportedVersionError("unsupported checkpoint format version " +
                                    std::to_string(fv));
    }
    check_blob(m, blob);

    ElasticCheckpoint ckpt;
    ckpt.format_version = fv;
    const ModelConfig cfg = config_from_json(m.at("config"));

    std::map<std::string, const ordered_json*> entry_by_name;
    for (const auto& e : m.at("tensors")) {
      entry_by_name[e.at("name").get<std::string>()] = &e;
    }
    BlobReader reader{blob};
    auto read_tensor = [&](const std::string& name) -> TensorF {
      auto it = entry_by_name.find(name);
      if (it == entry_by_name.end()) {
        throw FormatError("manifest is missing tensor '" + name + "'");
      }
      return reader.read(*it->second);
    };

    // materialize weights with the right optional tensors, then fill
    ckpt.weights.config = cfg;
    ckpt.weights.layers.resize(static_cast<size_t>(cfg.n_layers));
    ckpt.weights.embedding = read_tensor("embedding");
    ckpt.weights.lm_head = read_tensor("lm_head");
    ckpt.weights.final_norm_g = read_tensor("final_norm_g");
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& lw = ckpt.weights.layers[static_cast<size_t>(l)];
      lw.wq = read_tensor(p + "wq");
      lw.wk = read_tensor(p + "wk");
      lw.wv = read_tensor(p + "wv");
      lw.wo = read_tensor(p + "wo");
      if (cfg.use_bias) {
        lw.bq = read_tensor(p + "bq");
        lw.bk = read_tensor(p + "bk");
        lw.bv = read_tensor(p + "bv");
      }
      if (cfg.mlp_kind == MlpKind::kGated) {
        lw.w_gate = read_tensor(p + "w_gate");
        if (cfg.use_bias) lw.b_gate = read_tensor(p + "b_gate");
      }
      lw.w_up = read_tensor(p + "w_up");
      if (cfg.use_bias) lw.b_up = read_tensor(p + "b_up");
      lw.w_down = read_tensor(p + "w_down");
      lw.attn_norm_g = read_tensor(p + "attn_norm_g");
      lw.mlp_norm_g = read_tensor(p + "mlp_norm_g");
    }

    ckpt.anchors = m.at("anchors").get<std::set<int>>();
    ckpt.head_order = m.at("head_order").get<std::vector<std::vector<int>>>();
    ckpt.neuron_order = m.at("neuron_order").get<std::vector<std::vector<int>>>();
    {
      const auto heads = m.at("importance").at("heads").get<std::vector<std::vector<double>>>();
      const auto neurons =
          m.at("importance").at("neurons").get<std::vector<std::vector<double>>>();
      for (int l = 0; l < cfg.n_layers; ++l) {
        for (int h = 0; h < cfg.n_heads; ++h) {
          ckpt.importance[{l, UnitKind::kAttentionHead, h}] =
              heads.at(static_cast<size_t>(l)).at(static_cast<size_t>(h));
        }
        for (int j = 0; j < cfg.d_ff; ++j) {
          ckpt.importance[{l, UnitKind::kMlpNeuron, j}] =
              neurons.at(static_cast<size_t>(l)).at(static_cast<size_t>(j));
        }
      }
    }
    for (const auto& le : m.at("levels")) {
      LevelEntry e;
      e.percent = le.at("percent").get<int>();
      e.fraction = le.at("fraction").get<double>();
      const auto heads = le.at("heads").get<std::vector<int>>();
      const auto neurons = le.at("neurons").get<std::vector<int>>();
      if (heads.size() != static_cast<size_t>(cfg.n_layers) || neurons.size() != heads.size()) {
        throw FormatError("level entry layer count mismatch");
      }
      for (size_t l = 0; l < heads.size(); ++l) {
        e.layers.push_back(LayerExtents{heads[l], neurons[l]});
      }
      ckpt.levels.levels.push_back(std::move(e));
    }
    ckpt.adapter_rank = m.at("adapter_rank").get<int>();
    for (int pct : m.at("adapter_levels").get<std::vector<int>>()) {
      AdapterSet set;
      set.rank = ckpt.adapter_rank;
      set.layers.resize(static_cast<size_t>(cfg.n_layers));
      for (int l = 0; l < cfg.n_layers; ++l) {
        auto& la = set.layers[static_cast<size_t>(l)];
        for (const char* slot : adapter_slot_names) {
          const std::string base = "adapters." + std::to_string(pct) + ".layers." +
                                   std::to_string(l) + "." + slot;
          auto it = entry_by_name.find(base + ".a");
          if (it == entry_by_name.end()) continue;
          Adapter* ad = adapter_slot(la, slot);
          ad->a = reader.read(*it->second);
          ad->b = read_tensor(base + ".b");
        }
      }
      ckpt.adapters[pct] = std::move(set);
    }
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

void save_base_model(const Weights& w, const std::string& path) {
  BlobWriter blob;
  w.for_each_tensor([&](const std::string& name, const TensorF& t) { blob.add(name, t); });
  ordered_json m;
  m["format"] = "elx-base-model";
  m["format_version"] = kCheckpointFormatVersion;
  m["config"] = config_to_json(w.config);
  m["tensors"] = blob.entries;
  m["blob_bytes"] = blob.bytes.size();
  m["blob_digest"] = blob_digest_hex(blob.bytes);
  write_container(path, m, blob.bytes);
}

Weights load_base_model(const std::string& path) {
  auto [m, blob] = read_container(path);
  try {
    if (m.at("format").get<std::string>() != "elx-base-model") {
      throw FormatError("'" + path + "' is not a base model file");
    }
    check_blob(m, blob);
    const ModelConfig cfg = config_from_json(m.at("config"));
    Weights w = Weights::init(cfg);  // shapes, then overwritten below
    std::map<std::string, const ordered_json*> entry_by_name;
    for (const auto& e : m.at("tensors")) {
      entry_by_name[e.at("name").get<std::string>()] = &e;
    }
    BlobReader reader{blob};
    w.for_each_tensor([&](const std::string& name, TensorF& t) {
      auto it = entry_by_name.find(name);
      if (it == entry_by_name.end()) {
        throw FormatError("base model is missing tensor '" + name + "'");
      }
      t = reader.read(*it->second);
    });
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed base model manifest: ") + e.what());
  }
}

}  // namespace elx
