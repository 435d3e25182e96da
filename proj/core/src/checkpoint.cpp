#include "vigil/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace vigil {

namespace {

constexpr char kMagic[8] = {'V', 'G', 'L', 'C', 'K', 'P', 'T', '\x01'};

void write_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::ifstream& in, const std::string& path) {
  std::uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) {
    throw DataError("checkpoint: truncated file " + path);
  }
  return v;
}

}  // namespace

std::string Checkpoint::meta_value(const std::string& key) const {
  auto j = nlohmann::json::parse(meta_json, nullptr, false);
  if (j.is_discarded() || !j.contains(key)) return "";
  const auto& v = j.at(key);
  return v.is_string() ? v.get<std::string>() : v.dump();
}

void save_checkpoint(const std::string& path, const std::string& kind,
                     const std::string& meta_json,
                     const std::vector<std::pair<std::string, const Matrix*>>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot open " + path + " for writing");
  out.write(kMagic, sizeof(kMagic));

  nlohmann::ordered_json header{{"kind", kind},
                                {"meta", nlohmann::json::parse(meta_json.empty() ? "{}" : meta_json)},
                                {"tensor_count", tensors.size()}};
  const std::string header_text = header.dump();
  write_u32(out, static_cast<std::uint32_t>(header_text.size()));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));

  for (const auto& [name, m] : tensors) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(m->rows()));
    write_u32(out, static_cast<std::uint32_t>(m->cols()));
    out.write(reinterpret_cast<const char*>(m->data()),
              static_cast<std::streamsize>(m->size() * sizeof(double)));
  }
  if (!out) throw DataError("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, 7) != 0) {
    throw DataError("checkpoint: " + path + " is not a checkpoint file");
  }
  if (magic[7] != kMagic[7]) {
    throw DataError("checkpoint: unsupported version " + std::to_string(int(magic[7])) + " in " +
                    path);
  }
  const std::uint32_t header_len = read_u32(in, path);
  std::string header_text(header_len, '\0');
  if (!in.read(header_text.data(), header_len)) {
    throw DataError("checkpoint: truncated header in " + path);
  }
  auto header = nlohmann::json::parse(header_text, nullptr, false);
  if (header.is_discarded()) throw DataError("checkpoint: bad header in " + path);

  Checkpoint ckpt;
  ckpt.kind = header.value("kind", "");
  ckpt.meta_json = header.contains("meta") ? header.at("meta").dump() : "{}";
  const std::size_t count = header.value("tensor_count", std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = read_u32(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw DataError("checkpoint: truncated name in " + path);
    const int rows = static_cast<int>(read_u32(in, path));
    const int cols = static_cast<int>(read_u32(in, path));
    Matrix m(rows, cols);
    if (!in.read(reinterpret_cast<char*>(m.data()),
                 static_cast<std::streamsize>(m.size() * sizeof(double)))) {
      throw DataError("checkpoint: truncated tensor '" + name + "' in " + path);
    }
    ckpt.tensors.emplace(std::move(name), std::move(m));
  }
  return ckpt;
}

}  // namespace vigil
