#include "grunlab/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "grunlab/common.hpp"

namespace grunlab {

namespace {

constexpr char kMagic[8] = {'G', 'R', 'U', 'N', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  size_t offset = 0;

  void need(size_t n, const char* what) const {
    if (offset + n > buf.size())
      throw FormatError("checkpoint: truncated while reading " +
                        std::string(what) + " at offset " +
                        std::to_string(offset));
  }

  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = static_cast<uint8_t>(buf[offset]) |
                 (static_cast<uint16_t>(static_cast<uint8_t>(buf[offset + 1]))
                  << 8);
    offset += 2;
    return v;
  }

  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[offset + i]))
           << (8 * i);
    offset += 4;
    return v;
  }

  uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<uint8_t>(buf[offset++]);
  }

  std::string bytes(size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(offset, n);
    offset += n;
    return s;
  }
};

}  // namespace

void write_checkpoint_file(const std::string& path,
                           const std::vector<NamedTensorData>& tensors) {
  std::string out;
  out.append(kMagic, 8);
  put_u32(out, kVersion);
  put_u32(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xffff)
      throw FormatError("checkpoint: tensor name too long: " + t.name);
    put_u16(out, static_cast<uint16_t>(t.name.size()));
    out += t.name;
    out.push_back(0);  // dtype f32
    out.push_back(static_cast<char>(t.dims.size()));
    size_t numel = 1;
    for (size_t d : t.dims) {
      put_u32(out, static_cast<uint32_t>(d));
      numel *= d;
    }
    if (numel != t.data.size())
      throw FormatError("checkpoint: dims/data mismatch for tensor " + t.name);
    for (float v : t.data) put_f32(out, v);
  }
  write_text_file(path, out);
}

std::vector<NamedTensorData> read_checkpoint_file(const std::string& path) {
  const std::string buf = read_text_file(path);
  Reader r{buf};
  const std::string magic = r.bytes(8, "magic");
  if (std::memcmp(magic.data(), kMagic, 8) != 0)
    throw FormatError("checkpoint: bad magic at offset 0");
  const uint32_t version = r.u32("version");
  if (version != kVersion)
    throw FormatError("checkpoint: unsupported version " +
                      std::to_string(version) + " at offset 8");
  const uint32_t count = r.u32("tensor count");
  std::vector<NamedTensorData> tensors;
  tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    NamedTensorData t;
    const uint16_t name_len = r.u16("name length");
    t.name = r.bytes(name_len, "name");
    const uint8_t dtype = r.u8("dtype");
    if (dtype != 0)
      throw FormatError("checkpoint: unknown dtype " + std::to_string(dtype) +
                        " at offset " + std::to_string(r.offset - 1));
    const uint8_t rank = r.u8("rank");
    size_t numel = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      const uint32_t dim = r.u32("dim");
      if (dim == 0)
        throw FormatError("checkpoint: zero dim at offset " +
                          std::to_string(r.offset - 4));
      t.dims.push_back(dim);
      numel *= dim;
    }
    r.need(numel * 4, "payload");
    t.data.resize(numel);
    for (size_t j = 0; j < numel; ++j) {
      const uint32_t bits = r.u32("payload");
      float v;
      std::memcpy(&v, &bits, 4);
      t.data[j] = v;
    }
    tensors.push_back(std::move(t));
  }
  if (r.offset != buf.size())
    throw FormatError("checkpoint: trailing bytes at offset " +
                      std::to_string(r.offset));
  return tensors;
}

namespace {

Tensor<float> tensor_from_record(const NamedTensorData& rec,
                                 bool requires_grad) {
  return Tensor<float>::from_data(rec.dims, rec.data, requires_grad);
}

void fill_param(const std::map<std::string, const NamedTensorData*>& by_name,
                const std::string& name, const Tensor<float>& param) {
  auto it = by_name.find(name);
  if (it == by_name.end())
    throw FormatError("checkpoint: missing tensor " + name);
  const auto& rec = *it->second;
  if (rec.dims != param.shape())
    throw FormatError("checkpoint: tensor " + name + " has shape " +
                      shape_str(rec.dims) + ", expected " +
                      shape_str(param.shape()));
  std::copy(rec.data.begin(), rec.data.end(), param.value().begin());
}

}  // namespace

LoadedCheckpoint load_checkpoint(const std::string& path) {
  const std::vector<NamedTensorData> tensors = read_checkpoint_file(path);
  std::map<std::string, const NamedTensorData*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;

  auto cfg_it = by_name.find("meta/config");
  if (cfg_it == by_name.end())
    throw FormatError("checkpoint: missing tensor meta/config");
  const auto& cv = cfg_it->second->data;
  if (cv.size() != 7)
    throw FormatError("checkpoint: meta/config must hold 7 values");
  ModelConfig cfg;
  cfg.vocab_size = static_cast<size_t>(cv[0]);
  cfg.d_model = static_cast<size_t>(cv[1]);
  cfg.n_layers = static_cast<size_t>(cv[2]);
  cfg.n_heads = static_cast<size_t>(cv[3]);
  cfg.max_seq_len = static_cast<size_t>(cv[4]);
  cfg.ff_mult = static_cast<size_t>(cv[5]);
  cfg.summary_token = static_cast<int>(cv[6]);
  cfg.validate();

  LoadedCheckpoint out{Model<float>(cfg, 0), GrunStack<float>{}};
  for (const auto& [name, param] : out.model.named_parameters())
    fill_param(by_name, name, param);

  // Reassemble intervention requests from grun/<request>/<layer>/... names.
  std::map<size_t, std::map<size_t, std::map<std::string, const NamedTensorData*>>>
      grun;
  for (const auto& t : tensors) {
    if (t.name.rfind("grun/", 0) != 0) continue;
    const size_t a = t.name.find('/', 5);
    const size_t b = t.name.find('/', a + 1);
    if (a == std::string::npos || b == std::string::npos)
      throw FormatError("checkpoint: malformed intervention name " + t.name);
    const size_t request = std::stoul(t.name.substr(5, a - 5));
    const size_t layer = std::stoul(t.name.substr(a + 1, b - a - 1));
    grun[request][layer][t.name.substr(b + 1)] = &t;
  }
  for (auto& [request, layers] : grun) {
    if (request != out.stack.requests.size())
      throw FormatError("checkpoint: non-contiguous request index " +
                        std::to_string(request));
    typename GrunStack<float>::Request req;
    for (auto& [layer, fields] : layers) {
      GrunModule<float> m;
      m.layer = layer;
      auto field = [&](const std::string& key) -> const NamedTensorData& {
        auto it = fields.find(key);
        if (it == fields.end())
          throw FormatError("checkpoint: missing tensor grun/" +
                            std::to_string(request) + "/" +
                            std::to_string(layer) + "/" + key);
        return *it->second;
      };
      m.reft.R = tensor_from_record(field("R"), false);
      m.reft.W = tensor_from_record(field("W"), false);
      m.reft.b = tensor_from_record(field("b"), false);
      if (fields.count("gate.w")) {
        m.gate.kind = GateKind::kLinear;
        m.gate.w = tensor_from_record(field("gate.w"), false);
        m.gate.b = tensor_from_record(field("gate.b"), false);
      } else {
        m.gate.kind = GateKind::kMlp;
        m.gate.w1 = tensor_from_record(field("gate.w1"), false);
        m.gate.b1 = tensor_from_record(field("gate.b1"), false);
        m.gate.w2 = tensor_from_record(field("gate.w2"), false);
        m.gate.b2 = tensor_from_record(field("gate.b2"), false);
        m.gate.w3 = tensor_from_record(field("gate.w3"), false);
        m.gate.b3 = tensor_from_record(field("gate.b3"), false);
      }
      req.modules.push_back(std::move(m));
    }
    out.stack.requests.push_back(std::move(req));
  }
  if (auto it = by_name.find("meta/stack"); it != by_name.end()) {
    if (it->second->data.size() != 2)
      throw FormatError("checkpoint: meta/stack must hold 2 values");
    out.stack.coeff = it->second->data[0];
    if (static_cast<size_t>(it->second->data[1]) != out.stack.size())
      throw FormatError("checkpoint: meta/stack request count mismatch");
  }
  return out;
}

}  // namespace grunlab
