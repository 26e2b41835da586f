#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "modguide/dit.hpp"

namespace modguide {

/// A manifest plus an ordered tensor table. On disk:
///
///   modguide-checkpoint 1
///   kind <kind>
///   <key> <value>            (header entries, sorted by key)
///   param <name> <shape> <byte offset>
///   end
///   <blob of little-endian float32>
struct Checkpoint {
  std::string kind;
  std::map<std::string, std::string> header;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

std::string serialize_checkpoint(const Checkpoint& c);
Checkpoint parse_checkpoint(const std::string& bytes);

void write_file(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

/// Header entries (prefixed "model.") describing a model config, and the inverse.
std::map<std::string, std::string> model_config_header(const ModelConfig& c);
ModelConfig model_config_from_header(const std::map<std::string, std::string>& header);

/// Copies every parameter of `store` into the tensor table, in store order.
Checkpoint store_checkpoint(std::string kind, const ParameterStore<float>& store);
/// Overwrites `store` from `c`; the name sets and shapes must match exactly.
void load_store(const Checkpoint& c, ParameterStore<float>& store);

std::string serialize_model(const Dit<float>& model, const std::map<std::string, std::string>& extra = {});
Dit<float> parse_model(const std::string& bytes);

void save_model(const std::filesystem::path& path, const Dit<float>& model,
                const std::map<std::string, std::string>& extra = {});
Dit<float> load_model(const std::filesystem::path& path);

}  // namespace modguide
