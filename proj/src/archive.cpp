#include "msgdn/archive.hpp"

#include <cstring>
#include <fstream>

#include "msgdn/common.hpp"

namespace msgdn {

namespace {
constexpr char kMagic[8] = {'M', 'S', 'G', 'T', 'N', 'S', 'R', '1'};
}

void Archive::save(const std::string& path) const {
  nlohmann::json header;
  header["format_version"] = 1;
  header["kind"] = kind;
  header["meta"] = meta_json.empty() ? nlohmann::json::object() : nlohmann::json::parse(meta_json);
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {  // std::map iterates sorted by name
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = {t.n, t.c, t.h, t.w};
    e["offset"] = offset;
    offset += t.size() * sizeof(double);
    entries.push_back(e);
  }
  header["tensors"] = entries;
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("archive: cannot open for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::uint32_t len = static_cast<std::uint32_t>(header_str.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, t] : tensors) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw IoError("archive: write failed: " + path);
}

Archive Archive::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("archive: cannot open: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("archive: bad magic in " + path);
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in) throw IoError("archive: truncated header in " + path);
  std::string header_str(len, '\0');
  in.read(header_str.data(), len);
  if (!in) throw IoError("archive: truncated header in " + path);

  nlohmann::json header = nlohmann::json::parse(header_str, nullptr, false);
  if (header.is_discarded()) throw IoError("archive: malformed header in " + path);
  if (header.value("format_version", 0) != 1)
    throw IoError("archive: unsupported format version in " + path);

  Archive a;
  a.kind = header.value("kind", "");
  a.meta_json = header["meta"].dump();
  for (const auto& e : header["tensors"]) {
    const std::string name = e["name"].get<std::string>();
    const auto shape = e["shape"];
    Tensor4 t(shape[0].get<int>(), shape[1].get<int>(), shape[2].get<int>(), shape[3].get<int>());
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw IoError("archive: truncated payload for tensor '" + name + "' in " + path);
    a.tensors.emplace(name, std::move(t));
  }
  return a;
}

nlohmann::json Archive::meta() const {
  return meta_json.empty() ? nlohmann::json::object() : nlohmann::json::parse(meta_json);
}

void Archive::set_meta(const nlohmann::json& j) { meta_json = j.dump(); }

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace msgdn
