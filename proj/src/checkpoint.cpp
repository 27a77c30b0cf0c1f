#include "shellflow/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace shellflow {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'S', 'F', 'L', 'O', 'C', 'K', 'P', '1'};
}

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const json& meta) {
  json manifest;
  manifest["format"] = "shellflow-checkpoint";
  manifest["version"] = 1;
  manifest["meta"] = meta;
  json tensors = json::array();
  for (int i = 0; i < params.size(); ++i) {
    const auto& v = params.value(i);
    tensors.push_back({{"name", params.name(i)},
                       {"rows", v.rows()},
                       {"cols", v.cols()}});
  }
  manifest["tensors"] = tensors;
  const std::string header = manifest.dump();

  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
  std::fwrite(kMagic, 1, 8, f);
  const uint64_t hlen = header.size();
  std::fwrite(&hlen, sizeof(hlen), 1, f);
  std::fwrite(header.data(), 1, header.size(), f);
  for (int i = 0; i < params.size(); ++i) {
    const auto& v = params.value(i);
    std::fwrite(v.data(), sizeof(double), v.size(), f);
  }
  std::fclose(f);
}

ParamStore load_checkpoint(const std::string& path, json& out_meta) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  uint64_t hlen = 0;
  if (std::fread(magic, 1, 8, f) != 8 || std::memcmp(magic, kMagic, 8) != 0 ||
      std::fread(&hlen, sizeof(hlen), 1, f) != 1) {
    std::fclose(f);
    throw std::runtime_error("bad checkpoint header: " + path);
  }
  std::string header(hlen, '\0');
  if (std::fread(header.data(), 1, hlen, f) != hlen) {
    std::fclose(f);
    throw std::runtime_error("truncated checkpoint manifest: " + path);
  }
  json manifest = json::parse(header);
  out_meta = manifest.value("meta", json::object());
  ParamStore params;
  for (const auto& t : manifest["tensors"]) {
    const int idx = params.add(t["name"].get<std::string>(),
                               t["rows"].get<int>(), t["cols"].get<int>());
    auto& v = params.value(idx);
    if (std::fread(v.data(), sizeof(double), v.size(), f) !=
        static_cast<size_t>(v.size())) {
      std::fclose(f);
      throw std::runtime_error("truncated checkpoint payload: " + path);
    }
  }
  std::fclose(f);
  return params;
}

}  // namespace shellflow
