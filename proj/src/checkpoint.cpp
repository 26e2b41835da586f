#include "modguide/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace modguide {

namespace {

constexpr const char* kMagic = "modguide-checkpoint 1";

Shape parse_shape(const std::string& text) {
  if (text.size() < 3 || text.front() != '[' || text.back() != ']') throw CheckpointError("bad shape '" + text + "'");
  Shape shape;
  std::stringstream ss(text.substr(1, text.size() - 2));
  std::string part;
  while (std::getline(ss, part, 'x')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(part, &used);
      if (used != part.size() || v <= 0) throw CheckpointError("bad shape '" + text + "'");
      shape.push_back(static_cast<Index>(v));
    } catch (const std::logic_error&) {
      throw CheckpointError("bad shape '" + text + "'");
    }
  }
  return shape;
}

long long parse_int(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(text, &used);
    if (used != text.size()) throw CheckpointError("");
    return v;
  } catch (const std::exception&) {
    throw CheckpointError("checkpoint field " + key + " is not an integer: '" + text + "'");
  }
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return out;
}

std::string serialize_checkpoint(const Checkpoint& c) {
  std::ostringstream os;
  os << kMagic << '\n' << "kind " << c.kind << '\n';
  for (const auto& [k, v] : c.header) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw CheckpointError("checkpoint header entry '" + k + "' contains whitespace");
    }
    os << k << ' ' << v << '\n';
  }
  std::size_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    os << "param " << name << ' ' << shape_string(t.shape()) << ' ' << offset << '\n';
    offset += static_cast<std::size_t>(t.size()) * 4;
  }
  os << "end\n";
  std::string out = os.str();
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : c.tensors) {
    for (float v : t.data()) {
      std::uint32_t u;
      std::memcpy(&u, &v, 4);
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
    }
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw CheckpointError("checkpoint manifest is truncated");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (next_line() != kMagic) throw CheckpointError("not a checkpoint file");
  Checkpoint c;
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  for (;;) {
    const std::string line = next_line();
    if (line == "end") break;
    const auto sp = line.find(' ');
    if (sp == std::string::npos) throw CheckpointError("malformed manifest line '" + line + "'");
    const std::string key = line.substr(0, sp);
    const std::string rest = line.substr(sp + 1);
    if (key == "kind") {
      c.kind = rest;
    } else if (key == "param") {
      std::istringstream ls(rest);
      Entry e;
      std::string shape;
      if (!(ls >> e.name >> shape >> e.offset)) throw CheckpointError("malformed param line '" + line + "'");
      e.shape = parse_shape(shape);
      entries.push_back(std::move(e));
    } else {
      c.header[key] = rest;
    }
  }
  const std::size_t blob = pos;
  std::size_t expected = 0;
  for (const auto& e : entries) {
    if (e.offset != expected) throw CheckpointError("parameter '" + e.name + "' has an out-of-order offset");
    const std::size_t n = static_cast<std::size_t>(shape_size(e.shape));
    if (blob + e.offset + 4 * n > bytes.size()) throw CheckpointError("checkpoint blob is truncated");
    Tensor<float> t(e.shape);
    auto data = t.data();
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= std::uint32_t(static_cast<unsigned char>(bytes[blob + e.offset + 4 * i + b])) << (8 * b);
      std::memcpy(&data[i], &u, 4);
    }
    if (!t.all_finite()) throw CheckpointError("parameter '" + e.name + "' holds non-finite values");
    c.tensors.emplace_back(e.name, std::move(t));
    expected += 4 * n;
  }
  if (blob + expected != bytes.size()) throw CheckpointError("checkpoint has trailing bytes");
  return c;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("failed writing '" + path.string() + "'");
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> model_config_header(const ModelConfig& c) {
  return {
      {"model.d_model", std::to_string(c.d_model)},
      {"model.n_layers", std::to_string(c.n_layers)},
      {"model.heads", std::to_string(c.heads)},
      {"model.d_pool", std::to_string(c.d_pool)},
      {"model.d_token", std::to_string(c.d_token)},
      {"model.text_tokens", std::to_string(c.text_tokens)},
      {"model.resolution", std::to_string(c.resolution)},
      {"model.channels", std::to_string(c.channels)},
      {"model.patch", std::to_string(c.patch)},
      {"model.time_dim", std::to_string(c.time_dim)},
      {"model.mlp_multiplier", std::to_string(c.mlp_multiplier)},
      {"model.pooled_path", c.pooled_path ? "1" : "0"},
  };
}

ModelConfig model_config_from_header(const std::map<std::string, std::string>& h) {
  auto get = [&](const std::string& key) -> long long {
    auto it = h.find(key);
    if (it == h.end()) throw CheckpointError("checkpoint is missing " + key);
    return parse_int(key, it->second);
  };
  ModelConfig c;
  c.d_model = get("model.d_model");
  c.n_layers = get("model.n_layers");
  c.heads = get("model.heads");
  c.d_pool = get("model.d_pool");
  c.d_token = get("model.d_token");
  c.text_tokens = get("model.text_tokens");
  c.resolution = get("model.resolution");
  c.channels = get("model.channels");
  c.patch = get("model.patch");
  c.time_dim = get("model.time_dim");
  c.mlp_multiplier = get("model.mlp_multiplier");
  c.pooled_path = get("model.pooled_path") != 0;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint model config is invalid: ") + e.what());
  }
  return c;
}

Checkpoint store_checkpoint(std::string kind, const ParameterStore<float>& store) {
  Checkpoint c;
  c.kind = std::move(kind);
  for (const auto& p : store) {
    Tensor<float> t = p.tensor;
    t.set_requires_grad(false);
    c.tensors.emplace_back(p.name, std::move(t));
  }
  return c;
}

void load_store(const Checkpoint& c, ParameterStore<float>& store) {
  if (c.tensors.size() != store.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, model expects " +
                          std::to_string(store.size()));
  }
  for (const auto& [name, t] : c.tensors) {
    if (!store.contains(name)) throw CheckpointError("checkpoint tensor '" + name + "' is unknown to the model");
    auto& dst = store[store.slot(name)];
    if (dst.shape() != t.shape()) {
      throw CheckpointError("tensor '" + name + "' has shape " + shape_string(t.shape()) + ", model expects " +
                            shape_string(dst.shape()));
    }
    std::copy(t.data().begin(), t.data().end(), dst.data().begin());
  }
}

std::string serialize_model(const Dit<float>& model, const std::map<std::string, std::string>& extra) {
  Checkpoint c = store_checkpoint("dit", model.params);
  c.header = model_config_header(model.config);
  for (const auto& [k, v] : extra) c.header[k] = v;
  return serialize_checkpoint(c);
}

Dit<float> parse_model(const std::string& bytes) {
  const Checkpoint c = parse_checkpoint(bytes);
  if (c.kind != "dit") throw CheckpointError("expected a model checkpoint, found kind '" + c.kind + "'");
  Dit<float> m = Dit<float>::create(model_config_from_header(c.header), 0);
  load_store(c, m.params);
  return m;
}

void save_model(const std::filesystem::path& path, const Dit<float>& model,
                const std::map<std::string, std::string>& extra) {
  write_file(path, serialize_model(model, extra));
}

Dit<float> load_model(const std::filesystem::path& path) { return parse_model(read_file(path)); }

}  // namespace modguide
