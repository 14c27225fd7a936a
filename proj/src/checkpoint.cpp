#include "fireedit/checkpoint.hpp"

#include <map>

#include "fireedit/io.hpp"

namespace fireedit {

namespace {
constexpr std::uint32_t kMagic = 0x4B434546;  // "FECK"
}

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::vector<char> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.put(kMagic);
  w.put(ckpt.version);
  w.put(ckpt.step);
  w.put<std::uint64_t>(ckpt.config.size());
  w.put_array(ckpt.config.data(), ckpt.config.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const NamedTensor& t : ckpt.tensors) {
    if (shape_numel(t.shape) != t.values.size())
      throw ContractError("checkpoint tensor " + t.name + " has " + std::to_string(t.values.size()) +
                          " values for shape " + shape_str(t.shape));
    w.put_string(t.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t e : t.shape) w.put<std::uint64_t>(e);
    w.put_array(t.values.data(), t.values.size());
  }
  return w.bytes();
}

Checkpoint decode_checkpoint(const std::vector<char>& bytes, const std::string& what) {
  ByteReader r(bytes, what);
  if (r.get<std::uint32_t>() != kMagic) throw ConfigError(what + ": not a checkpoint");
  Checkpoint c;
  c.version = r.get<std::uint32_t>();
  if (c.version != Checkpoint::kVersion)
    throw ConfigError(what + ": unsupported format version " + std::to_string(c.version));
  c.step = r.get<std::uint64_t>();
  c.config.resize(r.get<std::uint64_t>());
  r.get_array(c.config.data(), c.config.size());
  c.tensors.resize(r.get<std::uint32_t>());
  for (NamedTensor& t : c.tensors) {
    t.name = r.get_string();
    t.shape.resize(r.get<std::uint32_t>());
    for (auto& e : t.shape) e = r.get<std::uint64_t>();
    t.values.resize(shape_numel(t.shape));
    r.get_array(t.values.data(), t.values.size());
  }
  if (!r.done()) throw ConfigError(what + ": trailing bytes");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_file(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path), path); }

std::vector<std::string> tensor_diff(const std::vector<NamedTensor>& expected, const std::vector<NamedTensor>& found) {
  std::map<std::string, const NamedTensor*> have;
  for (const auto& t : found) have[t.name] = &t;
  std::vector<std::string> out;
  for (const auto& t : expected) {
    const auto it = have.find(t.name);
    if (it == have.end()) {
      out.push_back("missing tensor " + t.name + " " + shape_str(t.shape));
      continue;
    }
    if (it->second->shape != t.shape)
      out.push_back("tensor " + t.name + ": model " + shape_str(t.shape) + " vs checkpoint " +
                    shape_str(it->second->shape));
    have.erase(it);
  }
  for (const auto& [name, t] : have) out.push_back("unexpected tensor " + name + " " + shape_str(t->shape));
  return out;
}

}  // namespace fireedit
