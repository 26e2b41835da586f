#include "run_config.hpp"

#include <fstream>
#include <sstream>

#include "modguide/errors.hpp"

namespace modguide::cli {

json default_config() {
  return json::parse(R"({
    "seed": 0,
    "model": {
      "d_model": 64, "n_layers": 8, "heads": 4, "d_pool": 32, "d_token": 64, "text_tokens": 8,
      "resolution": 16, "channels": 3, "patch": 2, "time_dim": 64, "mlp_multiplier": 4, "pooled_path": true
    },
    "data": {"seed": 0, "size": 10000, "encoder_seed": 1234, "filler_probability": 0.5},
    "train": {
      "steps": 18000, "batch": 16, "lr": 0.002, "warmup_steps": 100, "cosine_decay": true, "grad_clip": 1.0,
      "uncond_prob": 0.1, "pooled_dropout": 0.0, "eval_probes": 256, "log_every": 50
    },
    "sample": {"steps": 20, "cfg_scale": 3.0, "route": "full"},
    "prompts": {"list": [], "heldout_seed": 777, "count": 200},
    "guidance": {
      "enabled": false, "kind": "step", "index_mode": "fractional", "w": 3.0, "i": 5, "i1": 0, "i2": 0, "i3": 0,
      "w1": 0.0, "w2": 0.0, "sigma": 5.0, "positive": "", "positive_from": "", "negative": ""
    },
    "evaluate": {"attributes": ["count", "color"]},
    "sweep": {"axis": "w", "values": [0, 1, 2, 3, 4, 6, 8], "kinds": ["constant", "step"]},
    "retrofit": {"iterations": 1000, "batch": 8, "lr": 0.001, "adapter_width": 64, "grad_clip": 1.0},
    "analysis": {
      "seeds": [0], "permutations": 10000, "target": "count", "related": ["shape", "size"], "feature": "count"
    },
    "io": {"checkpoint": "", "checkpoint_hash": "", "adapter": "", "save_images": true}
  })");
}

namespace {

const char* type_name(const json& v) {
  if (v.is_boolean()) return "a boolean";
  if (v.is_number_integer()) return "an integer";
  if (v.is_number()) return "a number";
  if (v.is_string()) return "a string";
  if (v.is_array()) return "a list";
  if (v.is_object()) return "an object";
  return "null";
}

bool same_kind(const json& def, const json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_number()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  if (def.is_object()) return v.is_object();
  return false;
}

void overlay(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError("config" + (prefix.empty() ? "" : " key '" + prefix + "'") + " must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    json& slot = base[key];
    if (!same_kind(slot, value)) {
      throw ConfigError("config key '" + path + "' must be " + type_name(slot) + ", got " + type_name(value));
    }
    if (slot.is_object()) {
      overlay(slot, value, path);
    } else {
      slot = value;
    }
  }
}

}  // namespace

json resolve_config(const json& user) {
  json out = default_config();
  overlay(out, user, "");
  return out;
}

json read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
}

}  // namespace modguide::cli
