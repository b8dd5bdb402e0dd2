#include "deepobf/model_io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace deepobf {

static_assert(std::endian::native == std::endian::little, "model files are written in host order");

namespace {

constexpr char kMagic[4] = {'D', 'O', 'B', 'F'};

std::string_view role_name(BlockRole r) { return r == BlockRole::feature ? "feature" : "classifier"; }

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

Index parse_index(const std::string& s, int line) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return static_cast<Index>(v);
  } catch (const std::exception&) {
    throw ModelFileError(ModelFileError::Kind::malformed,
                         "structure line " + std::to_string(line) + ": bad integer '" + s + "'");
  }
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename T>
  T get(const char* what) {
    T v;
    get_bytes(&v, sizeof(T), what);
    return v;
  }
  void get_bytes(void* out, std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw ModelFileError(ModelFileError::Kind::truncated,
                           std::string("model file truncated while reading ") + what + " at offset " +
                               std::to_string(pos_));
    }
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string structure_text(const ModelGraph& m) {
  std::ostringstream out;
  out << "deepobf-structure " << kModelFormatVersion << "\n";
  out << "input " << m.input.channels << "x" << m.input.height << "x" << m.input.width << "\n";
  out << "classes " << m.classes << "\n";
  for (const auto& b : m.blocks) {
    out << "block " << b.name << " " << role_name(b.role) << "\n";
    for (const auto& n : b.nodes) {
      out << "  node " << n.id << " " << to_string(n.kind) << " inputs=";
      for (std::size_t i = 0; i < n.inputs.size(); ++i) out << (i ? "," : "") << n.inputs[i];
      switch (n.kind) {
        case LayerKind::conv:
          out << " in=" << n.in_channels << " out=" << n.out_channels << " k=" << n.kernel
              << " s=" << n.stride << " p=" << n.padding;
          break;
        case LayerKind::linear:
          out << " in=" << n.in_channels << " out=" << n.out_channels;
          break;
        case LayerKind::batchnorm:
          out << " ch=" << n.in_channels;
          break;
        case LayerKind::maxpool:
        case LayerKind::avgpool:
          out << " k=" << n.kernel << " s=" << n.stride << " p=" << n.padding;
          break;
        default:
          break;
      }
      out << "\n";
    }
    out << "end\n";
  }
  if (!m.frozen.empty()) {
    out << "frozen";
    for (const auto& id : m.frozen) out << " " << id;
    out << "\n";
  }
  return out.str();
}

ModelGraph parse_structure(const std::string& text) {
  ModelGraph m;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  BlockSpec* current = nullptr;
  bool header = false;
  auto fail = [&](const std::string& why) -> void {
    throw ModelFileError(ModelFileError::Kind::malformed,
                         "structure line " + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (!header) {
      if (tok.size() != 2 || tok[0] != "deepobf-structure") fail("missing structure header");
      if (parse_index(tok[1], lineno) != kModelFormatVersion) {
        throw ModelFileError(ModelFileError::Kind::version_mismatch,
                             "structure version " + tok[1] + " is not supported");
      }
      header = true;
      continue;
    }
    if (tok[0] == "input" && tok.size() == 2) {
      const auto dims = split(tok[1], 'x');
      if (dims.size() != 3) fail("input extent must be CxHxW");
      m.input = {parse_index(dims[0], lineno), parse_index(dims[1], lineno), parse_index(dims[2], lineno)};
    } else if (tok[0] == "classes" && tok.size() == 2) {
      m.classes = parse_index(tok[1], lineno);
    } else if (tok[0] == "block" && tok.size() == 3) {
      if (current) fail("nested block");
      BlockSpec b;
      b.name = tok[1];
      if (tok[2] == "feature") {
        b.role = BlockRole::feature;
      } else if (tok[2] == "classifier") {
        b.role = BlockRole::classifier;
      } else {
        fail("unknown block role '" + tok[2] + "'");
      }
      m.blocks.push_back(std::move(b));
      current = &m.blocks.back();
    } else if (tok[0] == "end" && tok.size() == 1) {
      if (!current) fail("'end' outside a block");
      current = nullptr;
    } else if (tok[0] == "node" && tok.size() >= 4) {
      if (!current) fail("node outside a block");
      LayerSpec n;
      n.id = tok[1];
      try {
        n.kind = parse_layer_kind(tok[2]);
      } catch (const GraphError& e) {
        fail(e.what());
      }
      for (std::size_t i = 3; i < tok.size(); ++i) {
        const auto eq = tok[i].find('=');
        if (eq == std::string::npos) fail("expected key=value, got '" + tok[i] + "'");
        const std::string key = tok[i].substr(0, eq), val = tok[i].substr(eq + 1);
        if (key == "inputs") {
          n.inputs = split(val, ',');
        } else if (key == "in") {
          n.in_channels = parse_index(val, lineno);
        } else if (key == "out") {
          n.out_channels = parse_index(val, lineno);
        } else if (key == "ch") {
          n.in_channels = n.out_channels = parse_index(val, lineno);
        } else if (key == "k") {
          n.kernel = parse_index(val, lineno);
        } else if (key == "s") {
          n.stride = parse_index(val, lineno);
        } else if (key == "p") {
          n.padding = parse_index(val, lineno);
        } else {
          fail("unknown node attribute '" + key + "'");
        }
      }
      current->nodes.push_back(std::move(n));
    } else if (tok[0] == "frozen") {
      m.frozen.insert(tok.begin() + 1, tok.end());
    } else {
      fail("unrecognised line '" + line + "'");
    }
  }
  if (!header) fail("empty structure");
  if (current) fail("unterminated block '" + current->name + "'");
  return m;
}

std::vector<std::uint8_t> serialize(const ModelGraph& m) {
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kModelFormatVersion);
  const std::string text = structure_text(m);
  w.put<std::uint64_t>(text.size());
  w.put_bytes(text.data(), text.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.params.size()));
  for (const auto& [key, t] : m.params) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(key.size()));
    w.put_bytes(key.data(), key.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put_bytes(t.data(), static_cast<std::size_t>(t.size()) * sizeof(float));
  }
  w.put<std::uint32_t>(crc32(w.bytes));
  return std::move(w.bytes);
}

ModelGraph deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ModelFileError(ModelFileError::Kind::bad_magic, "not a model file (bad magic)");
  }
  Reader r(bytes.subspan(4));
  const auto version = r.get<std::uint32_t>("version");
  if (version != kModelFormatVersion) {
    throw ModelFileError(ModelFileError::Kind::version_mismatch,
                         "model file version " + std::to_string(version) + ", expected " +
                             std::to_string(kModelFormatVersion));
  }
  const auto text_len = r.get<std::uint64_t>("structure length");
  if (text_len > r.remaining()) {
    throw ModelFileError(ModelFileError::Kind::truncated, "model file truncated inside structure section");
  }
  std::string text(text_len, '\0');
  r.get_bytes(text.data(), text_len, "structure");
  const auto entries = r.get<std::uint32_t>("entry count");
  ParamStore params;
  for (std::uint32_t e = 0; e < entries; ++e) {
    const auto key_len = r.get<std::uint32_t>("parameter id length");
    if (key_len > r.remaining()) {
      throw ModelFileError(ModelFileError::Kind::truncated, "model file truncated inside parameter id");
    }
    std::string key(key_len, '\0');
    r.get_bytes(key.data(), key_len, "parameter id");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw ModelFileError(ModelFileError::Kind::malformed, "parameter '" + key + "' has rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.get<std::uint32_t>("extent"));
    const auto count = static_cast<std::size_t>(numel(shape));
    if (count * sizeof(float) > r.remaining()) {
      throw ModelFileError(ModelFileError::Kind::truncated, "model file truncated inside parameter '" + key + "'");
    }
    TensorF t(shape);
    r.get_bytes(t.data(), count * sizeof(float), "parameter values");
    params.emplace(std::move(key), std::move(t));
  }
  const std::size_t body = bytes.size() - r.remaining();
  const auto stored = r.get<std::uint32_t>("checksum");
  if (r.remaining() != 0) {
    throw ModelFileError(ModelFileError::Kind::malformed, "trailing bytes after checksum");
  }
  if (stored != crc32(bytes.first(body))) {
    throw ModelFileError(ModelFileError::Kind::checksum, "model file checksum mismatch");
  }
  ModelGraph m = parse_structure(text);
  m.params = std::move(params);
  try {
    validate(m);
  } catch (const std::invalid_argument& e) {
    throw ModelFileError(ModelFileError::Kind::malformed, std::string("invalid model: ") + e.what());
  }
  return m;
}

namespace {
std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelFileError(ModelFileError::Kind::io, "cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}
}  // namespace

void save(const ModelGraph& m, const std::filesystem::path& path) {
  const auto bytes = serialize(m);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ModelFileError(ModelFileError::Kind::io, "cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ModelFileError(ModelFileError::Kind::io, "short write to '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

ModelGraph load(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return deserialize(bytes);
}

std::string read_structure_section(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ModelFileError(ModelFileError::Kind::bad_magic, "not a model file (bad magic)");
  }
  Reader r(std::span<const std::uint8_t>(bytes).subspan(4));
  r.get<std::uint32_t>("version");
  const auto len = r.get<std::uint64_t>("structure length");
  if (len > r.remaining()) throw ModelFileError(ModelFileError::Kind::truncated, "structure section truncated");
  std::string text(len, '\0');
  r.get_bytes(text.data(), len, "structure");
  return text;
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t model_hash(const ModelGraph& m) {
  const auto bytes = serialize(m);
  return fnv1a64(bytes);
}

std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

}  // namespace deepobf
