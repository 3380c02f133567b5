#include "spvd/data/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>

#include "spvd/common/error.hpp"

namespace spvd::data {

namespace fs = std::filesystem;

namespace {

using Unit = ParseError::Unit;

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

template <typename T>
std::optional<T> parse_number(std::string_view s) {
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

// Reads lines one at a time, tracking 1-based line numbers and the byte
// position after the last consumed line.
class LineReader {
 public:
  explicit LineReader(std::string_view text) : text_(text) {}

  std::optional<std::string_view> next() {
    if (pos_ >= text_.size()) return std::nullopt;
    std::size_t end = text_.find('\n', pos_);
    if (end == std::string_view::npos) end = text_.size();
    std::string_view line = text_.substr(pos_, end - pos_);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    pos_ = end + 1;
    ++line_;
    return line;
  }
  std::size_t line() const { return line_; }
  std::size_t pos() const { return std::min(pos_, text_.size()); }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
  std::size_t line_ = 0;
};

std::ostringstream precise_stream() {
  std::ostringstream os;
  os.precision(std::numeric_limits<float>::max_digits10);
  return os;
}

// PLY scalar types.
enum class Scalar { kInt8, kUint8, kInt16, kUint16, kInt32, kUint32, kFloat32, kFloat64 };

std::optional<Scalar> parse_scalar(std::string_view s) {
  if (s == "char" || s == "int8") return Scalar::kInt8;
  if (s == "uchar" || s == "uint8") return Scalar::kUint8;
  if (s == "short" || s == "int16") return Scalar::kInt16;
  if (s == "ushort" || s == "uint16") return Scalar::kUint16;
  if (s == "int" || s == "int32") return Scalar::kInt32;
  if (s == "uint" || s == "uint32") return Scalar::kUint32;
  if (s == "float" || s == "float32") return Scalar::kFloat32;
  if (s == "double" || s == "float64") return Scalar::kFloat64;
  return std::nullopt;
}

std::size_t scalar_size(Scalar s) {
  switch (s) {
    case Scalar::kInt8:
    case Scalar::kUint8: return 1;
    case Scalar::kInt16:
    case Scalar::kUint16: return 2;
    case Scalar::kInt32:
    case Scalar::kUint32:
    case Scalar::kFloat32: return 4;
    case Scalar::kFloat64: return 8;
  }
  return 0;
}

bool is_integer(Scalar s) { return s != Scalar::kFloat32 && s != Scalar::kFloat64; }

template <typename U>
U load_le(const char* p) {
  U v;
  std::memcpy(&v, p, sizeof(U));
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  return v;
}

double read_binary(Scalar s, const char* p) {
  switch (s) {
    case Scalar::kInt8: return load_le<std::int8_t>(p);
    case Scalar::kUint8: return load_le<std::uint8_t>(p);
    case Scalar::kInt16: return load_le<std::int16_t>(p);
    case Scalar::kUint16: return load_le<std::uint16_t>(p);
    case Scalar::kInt32: return load_le<std::int32_t>(p);
    case Scalar::kUint32: return load_le<std::uint32_t>(p);
    case Scalar::kFloat32: return load_le<float>(p);
    case Scalar::kFloat64: return load_le<double>(p);
  }
  return 0;
}

struct Property {
  std::string name;
  Scalar type = Scalar::kFloat32;
  bool is_list = false;
  Scalar count_type = Scalar::kUint8;
  std::size_t line = 0;
};

struct Element {
  std::string name;
  std::size_t count = 0;
  std::vector<Property> props;
};

}  // namespace

PointCloud parse_xyz(const std::string& text) {
  PointCloud cloud;
  LineReader reader(text);
  while (auto line = reader.next()) {
    auto tok = split_ws(*line);
    if (tok.empty()) continue;
    if (tok.size() != 3) throw ParseError("xyz: expected three values per line", reader.line(), Unit::kLine);
    for (auto t : tok) {
      auto v = parse_number<float>(t);
      if (!v) throw ParseError("xyz: malformed number '" + std::string(t) + "'", reader.line(), Unit::kLine);
      cloud.xyz.push_back(*v);
    }
  }
  return cloud;
}

PointCloud load_xyz(const fs::path& path) {
  auto cloud = parse_xyz(read_file(path));
  cloud.name = path.stem().string();
  return cloud;
}

void save_xyz(const PointCloud& cloud, const fs::path& path) {
  auto os = precise_stream();
  for (std::size_t i = 0; i < cloud.size(); ++i)
    os << cloud.xyz[i * 3] << ' ' << cloud.xyz[i * 3 + 1] << ' ' << cloud.xyz[i * 3 + 2] << '\n';
  write_file_atomic(path, os.str());
}

PointCloud parse_ply(const std::string& bytes) {
  LineReader reader(bytes);
  auto first = reader.next();
  if (!first || *first != "ply") throw ParseError("ply: missing magic", 1, Unit::kLine);

  std::optional<bool> binary;
  std::vector<Element> elements;
  bool ended = false;
  while (auto line = reader.next()) {
    auto tok = split_ws(*line);
    const std::size_t ln = reader.line();
    if (tok.empty()) continue;
    if (tok[0] == "comment" || tok[0] == "obj_info") continue;
    if (tok[0] == "end_header") {
      ended = true;
      break;
    }
    if (tok[0] == "format") {
      if (tok.size() != 3 || tok[2] != "1.0") throw ParseError("ply: malformed format line", ln, Unit::kLine);
      if (tok[1] == "ascii") {
        binary = false;
      } else if (tok[1] == "binary_little_endian") {
        binary = true;
      } else {
        throw ParseError("ply: unsupported format '" + std::string(tok[1]) + "'", ln, Unit::kLine);
      }
    } else if (tok[0] == "element") {
      if (tok.size() != 3) throw ParseError("ply: malformed element line", ln, Unit::kLine);
      auto count = parse_number<std::size_t>(tok[2]);
      if (!count) throw ParseError("ply: malformed element count", ln, Unit::kLine);
      elements.push_back({std::string(tok[1]), *count, {}});
    } else if (tok[0] == "property") {
      if (elements.empty()) throw ParseError("ply: property before any element", ln, Unit::kLine);
      Property p;
      if (tok.size() == 5 && tok[1] == "list") {
        auto ct = parse_scalar(tok[2]);
        auto vt = parse_scalar(tok[3]);
        if (!ct || !vt || !is_integer(*ct)) throw ParseError("ply: malformed list property", ln, Unit::kLine);
        p = {std::string(tok[4]), *vt, true, *ct};
      } else if (tok.size() == 3) {
        auto t = parse_scalar(tok[1]);
        if (!t) throw ParseError("ply: unknown property type '" + std::string(tok[1]) + "'", ln, Unit::kLine);
        p.name = std::string(tok[2]);
        p.type = *t;
      } else {
        throw ParseError("ply: malformed property line", ln, Unit::kLine);
      }
      p.line = ln;
      elements.back().props.push_back(p);
    } else {
      throw ParseError("ply: unexpected header keyword '" + std::string(tok[0]) + "'", ln, Unit::kLine);
    }
  }
  if (!ended) throw ParseError("ply: header has no end_header", reader.line(), Unit::kLine);
  if (!binary) throw ParseError("ply: header has no format line", reader.line(), Unit::kLine);

  const Element* vertex = nullptr;
  for (const auto& e : elements)
    if (e.name == "vertex") vertex = &e;
  if (!vertex) throw ParseError("ply: no vertex element", reader.line(), Unit::kLine);
  int ix = -1, iy = -1, iz = -1, ipart = -1;
  for (std::size_t k = 0; k < vertex->props.size(); ++k) {
    const auto& p = vertex->props[k];
    const bool coord = p.name == "x" || p.name == "y" || p.name == "z";
    if (coord && (p.is_list || p.type != Scalar::kFloat32))
      throw ParseError("ply: vertex property '" + p.name + "' must be float", p.line, Unit::kLine);
    if (p.name == "x") ix = static_cast<int>(k);
    if (p.name == "y") iy = static_cast<int>(k);
    if (p.name == "z") iz = static_cast<int>(k);
    if (p.name == "part" && !p.is_list && is_integer(p.type)) ipart = static_cast<int>(k);
  }
  if (ix < 0 || iy < 0 || iz < 0) throw ParseError("ply: vertex lacks x, y or z", reader.line(), Unit::kLine);

  PointCloud cloud;
  cloud.xyz.reserve(vertex->count * 3);
  if (ipart >= 0) cloud.parts.reserve(vertex->count);
  std::vector<std::string_view> scalars;

  if (!*binary) {
    for (const auto& e : elements) {
      for (std::size_t r = 0; r < e.count; ++r) {
        auto line = reader.next();
        while (line && split_ws(*line).empty()) line = reader.next();
        if (!line) throw ParseError("ply: truncated " + e.name + " data", reader.line() + 1, Unit::kLine);
        auto tok = split_ws(*line);
        std::size_t at = 0;
        scalars.clear();
        for (const auto& p : e.props) {
          std::size_t n = 1;
          if (p.is_list) {
            if (at >= tok.size()) throw ParseError("ply: truncated list", reader.line(), Unit::kLine);
            auto c = parse_number<std::size_t>(tok[at++]);
            if (!c) throw ParseError("ply: malformed list count", reader.line(), Unit::kLine);
            n = *c;
            scalars.push_back({});
          } else if (at < tok.size()) {
            scalars.push_back(tok[at]);
          }
          for (std::size_t q = 0; q < n; ++q) {
            if (at >= tok.size()) throw ParseError("ply: too few values", reader.line(), Unit::kLine);
            if (!parse_number<double>(tok[at++])) throw ParseError("ply: malformed number", reader.line(), Unit::kLine);
          }
        }
        if (at != tok.size()) throw ParseError("ply: too many values", reader.line(), Unit::kLine);
        if (&e != vertex) continue;
        for (int k : {ix, iy, iz}) {
          auto v = parse_number<float>(scalars[k]);
          if (!v) throw ParseError("ply: malformed float", reader.line(), Unit::kLine);
          cloud.xyz.push_back(*v);
        }
        if (ipart >= 0) {
          auto v = parse_number<int>(scalars[ipart]);
          if (!v) throw ParseError("ply: part id must be an integer", reader.line(), Unit::kLine);
          cloud.parts.push_back(*v);
        }
      }
    }
    return cloud;
  }

  std::size_t pos = reader.pos();
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size()) throw ParseError("ply: truncated binary payload", pos, Unit::kByte);
  };
  for (const auto& e : elements) {
    for (std::size_t r = 0; r < e.count; ++r) {
      float xyz[3] = {0, 0, 0};
      int part = 0;
      for (std::size_t k = 0; k < e.props.size(); ++k) {
        const auto& p = e.props[k];
        if (p.is_list) {
          const std::size_t cs = scalar_size(p.count_type);
          need(cs);
          const double c = read_binary(p.count_type, bytes.data() + pos);
          pos += cs;
          if (c < 0) throw ParseError("ply: negative list count", pos - cs, Unit::kByte);
          const std::size_t len = static_cast<std::size_t>(c) * scalar_size(p.type);
          need(len);
          pos += len;
          continue;
        }
        const std::size_t sz = scalar_size(p.type);
        need(sz);
        if (&e == vertex) {
          const int ki = static_cast<int>(k);
          if (ki == ix) xyz[0] = load_le<float>(bytes.data() + pos);
          if (ki == iy) xyz[1] = load_le<float>(bytes.data() + pos);
          if (ki == iz) xyz[2] = load_le<float>(bytes.data() + pos);
          if (ki == ipart) part = static_cast<int>(read_binary(p.type, bytes.data() + pos));
        }
        pos += sz;
      }
      if (&e == vertex) {
        cloud.xyz.insert(cloud.xyz.end(), xyz, xyz + 3);
        if (ipart >= 0) cloud.parts.push_back(part);
      }
    }
  }
  return cloud;
}

PointCloud load_ply(const fs::path& path) {
  auto cloud = parse_ply(read_file(path));
  cloud.name = path.stem().string();
  return cloud;
}

std::string format_ply(const PointCloud& cloud, PlyFormat format) {
  if (cloud.has_parts() && cloud.parts.size() != cloud.size())
    throw ContractError("ply: part ids do not match the point count");
  auto os = precise_stream();
  os << "ply\nformat " << (format == PlyFormat::kAscii ? "ascii" : "binary_little_endian") << " 1.0\n";
  os << "element vertex " << cloud.size() << "\n";
  os << "property float x\nproperty float y\nproperty float z\n";
  if (cloud.has_parts()) os << "property int part\n";
  os << "end_header\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (format == PlyFormat::kAscii) {
      os << cloud.xyz[i * 3] << ' ' << cloud.xyz[i * 3 + 1] << ' ' << cloud.xyz[i * 3 + 2];
      if (cloud.has_parts()) os << ' ' << cloud.parts[i];
      os << '\n';
    } else {
      os.write(reinterpret_cast<const char*>(&cloud.xyz[i * 3]), 3 * sizeof(float));
      if (cloud.has_parts()) {
        const std::int32_t p = cloud.parts[i];
        os.write(reinterpret_cast<const char*>(&p), sizeof(p));
      }
    }
  }
  return os.str();
}

void save_ply(const PointCloud& cloud, const fs::path& path, PlyFormat format) {
  write_file_atomic(path, format_ply(cloud, format));
}

PointCloud load_cloud(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".ply") return load_ply(path);
  if (ext == ".xyz") return load_xyz(path);
  throw ConfigError("unsupported cloud extension '" + ext + "': " + path.string());
}

std::vector<fs::path> list_clouds(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw Error("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto ext = entry.path().extension();
    if (entry.is_regular_file() && (ext == ".ply" || ext == ".xyz")) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace spvd::data
