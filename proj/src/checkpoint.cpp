#include "ecgnat/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace ecgnat {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr char kMagic[8] = {'E', 'C', 'G', 'N', 'A', 'T', '1', '\0'};

ordered_json config_json(const ModelConfig& cfg) {
  ordered_json j;
  j["n_leads"] = cfg.n_leads;
  j["input_len"] = cfg.input_len;
  j["embed_dim"] = cfg.embed_dim;
  j["stage_heads"] = cfg.stage_heads;
  j["mlp_ratio"] = cfg.mlp_ratio;
  j["window_k"] = cfg.window_k;
  j["blocks_per_stage"] = cfg.blocks_per_stage;
  j["n_classes"] = cfg.n_classes;
  j["noise_std"] = cfg.noise_std;
  j["mask_ratio"] = cfg.mask_ratio;
  j["tau"] = cfg.tau;
  j["alpha"] = cfg.alpha;
  return j;
}

ModelConfig config_from(const ordered_json& j) {
  ModelConfig cfg;
  try {
    cfg.n_leads = j.at("n_leads").get<int64_t>();
    cfg.input_len = j.at("input_len").get<int64_t>();
    cfg.embed_dim = j.at("embed_dim").get<int64_t>();
    const auto heads = j.at("stage_heads").get<std::vector<int64_t>>();
    check(heads.size() == 4, "config: stage_heads must list 4 stages");
    std::copy(heads.begin(), heads.end(), cfg.stage_heads.begin());
    cfg.mlp_ratio = j.at("mlp_ratio").get<double>();
    cfg.window_k = j.at("window_k").get<int64_t>();
    cfg.blocks_per_stage = j.at("blocks_per_stage").get<int64_t>();
    cfg.n_classes = j.at("n_classes").get<int64_t>();
    cfg.noise_std = j.at("noise_std").get<double>();
    cfg.mask_ratio = j.at("mask_ratio").get<double>();
    cfg.tau = j.at("tau").get<double>();
    cfg.alpha = j.at("alpha").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("config: malformed JSON: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

}  // namespace

const Tensor<float>& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw ContractError("checkpoint: no tensor named " + name);
}

uint64_t Checkpoint::counter(const std::string& name, uint64_t fallback) const {
  const auto it = counters.find(name);
  return it == counters.end() ? fallback : it->second;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  ck.config.validate();

  ordered_json header;
  header["config"] = config_json(ck.config);
  ordered_json state;
  state["counters"] = ordered_json::object();
  for (const auto& [k, v] : ck.counters) state["counters"][k] = v;  // map order: sorted, stable
  state["rng"] = ck.rng_state;
  header["state"] = state;
  if (!ck.run_json.empty()) {
    try {
      header["run"] = ordered_json::parse(ck.run_json);
    } catch (const nlohmann::json::exception& e) {
      throw ContractError(std::string("checkpoint: run_json is not valid JSON: ") + e.what());
    }
  }

  ordered_json table = ordered_json::object();
  uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    check(!name.empty(), "checkpoint: tensor names must be nonempty");
    check(table.find(name) == table.end(), "checkpoint: duplicate tensor " + name);
    ordered_json entry;
    entry["dtype"] = "f32";
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    table[name] = entry;
    offset += uint64_t(t.numel()) * sizeof(float);
  }
  header["tensors"] = table;

  const std::string text = header.dump();
  const uint64_t len = text.size();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open " + path + " for writing");
  f.write(kMagic, 8);
  char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = char((len >> (8 * i)) & 0xff);
  f.write(lenbuf, 8);
  f.write(text.data(), std::streamsize(text.size()));
  for (const auto& [name, t] : ck.tensors)
    f.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.numel() * int64_t(sizeof(float))));
  if (!f) throw IoError("checkpoint: short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open " + path);

  char magic[8];
  f.read(magic, 8);
  if (f.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0)
    throw IoError("checkpoint: " + path + " does not start with the expected magic");

  char lenbuf[8];
  f.read(lenbuf, 8);
  if (f.gcount() != 8) throw IoError("checkpoint: " + path + " truncated before header");
  uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= uint64_t(uint8_t(lenbuf[i])) << (8 * i);
  check(len > 0 && len < (uint64_t(1) << 30), "checkpoint: implausible header length");

  std::string text(len, '\0');
  f.read(text.data(), std::streamsize(len));
  if (uint64_t(f.gcount()) != len) throw IoError("checkpoint: " + path + " truncated inside header");

  ordered_json header;
  try {
    header = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint: " + path + " has a malformed header: " + e.what());
  }

  Checkpoint ck;
  try {
    ck.config = config_from(header.at("config"));
    const ordered_json& state = header.at("state");
    for (const auto& [k, v] : state.at("counters").items()) ck.counters[k] = v.get<uint64_t>();
    const auto rng = state.at("rng").get<std::vector<uint64_t>>();
    check(rng.size() == 4, "checkpoint: rng state must hold 4 words");
    std::copy(rng.begin(), rng.end(), ck.rng_state.begin());
    if (header.contains("run")) ck.run_json = header.at("run").dump();

    uint64_t expect_offset = 0;
    for (const auto& [name, entry] : header.at("tensors").items()) {
      if (entry.at("dtype").get<std::string>() != "f32")
        throw IoError("checkpoint: tensor " + name + " has unsupported dtype");
      const auto shape = entry.at("shape").get<std::vector<int64_t>>();
      const uint64_t offset = entry.at("offset").get<uint64_t>();
      check(offset == expect_offset, "checkpoint: tensor " + name + " is not tightly packed");
      Tensor<float> t(shape);
      f.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.numel() * int64_t(sizeof(float))));
      if (f.gcount() != std::streamsize(t.numel() * int64_t(sizeof(float))))
        throw IoError("checkpoint: " + path + " truncated inside tensor " + name);
      ck.tensors.emplace_back(name, t);
      expect_offset += uint64_t(t.numel()) * sizeof(float);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint: " + path + " header is missing fields: " + e.what());
  }
  return ck;
}

std::string config_to_json(const ModelConfig& cfg) { return config_json(cfg).dump(); }

ModelConfig config_from_json(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("config: malformed JSON: ") + e.what());
  }
  return config_from(j);
}

}  // namespace ecgnat
