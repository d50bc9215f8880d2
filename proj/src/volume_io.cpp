#include "thoraxdiff/volume_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace thoraxdiff {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "raw volume blobs are little-endian; big-endian hosts need byte swapping");

namespace {

constexpr const char* kOrder = "row-major, z slowest";

struct Header {
  Shape3 shape;
  std::string dtype;
  Spacing spacing{1.0, 1.0, 1.0};
};

std::string header_text(const Shape3& s, const std::string& dtype, const Spacing& sp) {
  json j = {{"shape", {s.d, s.h, s.w}},
            {"dtype", dtype},
            {"spacing_mm", {sp[0], sp[1], sp[2]}},
            {"order", kOrder}};
  return j.dump(2) + "\n";
}

Header parse_header(const fs::path& json_path) {
  json j;
  try {
    j = json::parse(read_file(json_path));
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, json_path.string() + ": malformed header (" + e.what() + ")");
  }
  const auto where = json_path.string() + ": ";
  require(j.is_object(), ErrorKind::Format, where + "header must be a JSON object");
  Header h;
  require(j.contains("shape") && j["shape"].is_array() && j["shape"].size() == 3,
          ErrorKind::Format, where + "field 'shape' must be [D,H,W]");
  int dims[3];
  for (int i = 0; i < 3; ++i) {
    const auto& v = j["shape"][i];
    require(v.is_number_integer() && v.get<long long>() > 0 && v.get<long long>() < (1 << 20),
            ErrorKind::Format, where + "field 'shape' must hold positive integers");
    dims[i] = v.get<int>();
  }
  h.shape = {dims[0], dims[1], dims[2]};
  require(j.contains("dtype") && j["dtype"].is_string(), ErrorKind::Format,
          where + "field 'dtype' missing");
  h.dtype = j["dtype"].get<std::string>();
  require(h.dtype == "f32" || h.dtype == "u8", ErrorKind::Format,
          where + "field 'dtype' unsupported: '" + h.dtype + "'");
  if (j.contains("spacing_mm")) {
    const auto& sp = j["spacing_mm"];
    require(sp.is_array() && sp.size() == 3, ErrorKind::Format,
            where + "field 'spacing_mm' must be [z,y,x]");
    for (int i = 0; i < 3; ++i) {
      require(sp[i].is_number() && sp[i].get<double>() > 0, ErrorKind::Format,
              where + "field 'spacing_mm' must hold positive numbers");
      h.spacing[i] = sp[i].get<double>();
    }
  }
  if (j.contains("order")) {
    require(j["order"] == kOrder, ErrorKind::Format,
            where + "field 'order' must be '" + std::string(kOrder) + "'");
  }
  return h;
}

template <class T>
void save_pair(const fs::path& path, const Grid3<T>& grid, const char* dtype, const Spacing& sp) {
  const fs::path base = volume_base(path);
  const auto bytes = std::string_view(reinterpret_cast<const char*>(grid.values().data()),
                                      grid.size() * sizeof(T));
  write_file_atomic(fs::path(base.string() + ".raw"), bytes);
  write_file_atomic(fs::path(base.string() + ".json"), header_text(grid.shape(), dtype, sp));
}

template <class T>
Grid3<T> load_pair(const fs::path& path, const char* dtype, Spacing& sp) {
  const fs::path base = volume_base(path);
  const fs::path json_path = base.string() + ".json";
  const fs::path raw_path = base.string() + ".raw";
  const Header h = parse_header(json_path);
  require(h.dtype == dtype, ErrorKind::Format,
          json_path.string() + ": field 'dtype' is '" + h.dtype + "', expected '" + dtype + "'");
  const std::string blob = read_file(raw_path);
  const std::size_t expected = h.shape.size() * sizeof(T);
  require(blob.size() == expected, ErrorKind::Format,
          raw_path.string() + ": byte count " + std::to_string(blob.size()) +
              " does not match field 'shape' " + h.shape.str() + " (expected " +
              std::to_string(expected) + ")");
  std::vector<T> data(h.shape.size());
  std::memcpy(data.data(), blob.data(), expected);
  sp = h.spacing;
  return Grid3<T>(h.shape, std::move(data));
}

}  // namespace

fs::path volume_base(const fs::path& path) {
  const auto ext = path.extension();
  if (ext == ".json" || ext == ".raw") return fs::path(path).replace_extension();
  return path;
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) fail(ErrorKind::Io, "write failed for " + tmp.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::Io, "cannot rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void save_volume(const fs::path& path, const Volume& vol) {
  save_pair(path, vol.values, "f32", vol.spacing_mm);
}

Volume load_volume(const fs::path& path) {
  Volume v;
  v.values = load_pair<float>(path, "f32", v.spacing_mm);
  return v;
}

void save_layout(const fs::path& path, const SemanticLayout& layout) {
  save_pair(path, layout.labels, "u8", layout.spacing_mm);
}

SemanticLayout load_layout(const fs::path& path) {
  SemanticLayout l;
  l.labels = load_pair<std::uint8_t>(path, "u8", l.spacing_mm);
  return l;
}

}  // namespace thoraxdiff
