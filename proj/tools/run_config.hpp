#pragma once

#include <string>

#include "json.hpp"

namespace modguide::cli {

using json = nlohmann::ordered_json;

/// Every key a config may contain, with its default. The defaults double as the
/// schema: a user value must name a known key and match the default's type.
json default_config();

/// Overlays `user` onto the defaults. Throws ConfigError naming the first
/// unknown key or mistyped value, e.g. "train.lr".
json resolve_config(const json& user);

/// Reads and parses a config file; ConfigError on I/O or syntax problems.
json read_config_file(const std::string& path);

}  // namespace modguide::cli
