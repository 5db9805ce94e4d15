#include "checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mvb {

namespace {
constexpr char kMagic[4] = {'M', 'V', 'B', 'A'};
constexpr uint32_t kVersion = 1;
}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::string& path, const CheckpointHeader& header,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  json j;
  j["kind"] = header.kind;
  j["config"] = header.config;
  j["schedule"] = header.schedule;
  j["seed_lineage"] = header.seed_lineage;
  j["extra"] = header.extra;
  j["step"] = header.step;

  int64_t offset = 0;
  json tlist = json::array();
  for (const auto& [name, t] : tensors) {
    tlist.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset},
                     {"count", t->size()}});
    offset += t->size();
  }
  j["tensors"] = tlist;
  const std::string hdr = j.dump();

  const fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
  }
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_checkpoint: cannot open " + tmp.string());
    out.write(kMagic, 4);
    const uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), 4);
    const uint64_t hlen = hdr.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
    for (const auto& [name, t] : tensors) {
      out.write(reinterpret_cast<const char*>(t->data()),
                static_cast<std::streamsize>(t->size()) * 8);
    }
    out.close();
    if (!out) throw IoError("save_checkpoint: failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw IoError("save_checkpoint: cannot move " + tmp.string() + " into place");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path);
  char magic[4];
  uint32_t version = 0;
  uint64_t hlen = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("load_checkpoint: " + path + " is not a checkpoint archive");
  }
  if (version != kVersion) {
    throw ConfigError("load_checkpoint: unsupported version " + std::to_string(version));
  }
  std::string hdr(hlen, '\0');
  in.read(hdr.data(), static_cast<std::streamsize>(hlen));
  json j;
  try {
    j = json::parse(hdr);
  } catch (const json::exception& e) {
    throw IoError("load_checkpoint: bad header in " + path + ": " + e.what());
  }

  Checkpoint ckpt;
  ckpt.header.kind = j.at("kind").get<std::string>();
  ckpt.header.config = j.at("config");
  ckpt.header.schedule = j.at("schedule");
  ckpt.header.seed_lineage = j.at("seed_lineage");
  ckpt.header.extra = j.at("extra");
  ckpt.header.step = j.at("step").get<int64_t>();

  for (const json& tj : j.at("tensors")) {
    Tensor t(tj.at("shape").get<std::vector<int>>());
    check_internal(t.size() == tj.at("count").get<int64_t>(),
                   "load_checkpoint: tensor count mismatch for " +
                       tj.at("name").get<std::string>());
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size()) * 8);
    if (!in) throw IoError("load_checkpoint: truncated payload in " + path);
    ckpt.tensors.emplace_back(tj.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

}  // namespace mvb
