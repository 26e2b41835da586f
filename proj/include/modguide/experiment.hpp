#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "modguide/sampler.hpp"

namespace modguide {

/// Guidance settings shared by a whole prompt panel. When `positive_from` is
/// set, each prompt's own clause for that attribute is added to `positive`
/// (the counting recipe: "number of target objects" taken from the prompt).
struct GuidanceRecipe {
  GuidanceSchedule schedule;
  toy::ToyPrompt positive;
  toy::ToyPrompt negative;
  std::optional<toy::Attribute> positive_from;
};

/// Throws ConfigError when the prompt lacks the `positive_from` attribute.
GuidanceSpec make_guidance(const GuidanceRecipe& recipe, const toy::ToyPrompt& prompt);

/// Prompts of a held-out split (a dataset drawn with its own seed).
std::vector<toy::ToyPrompt> heldout_prompts(std::uint64_t seed, std::size_t count);

struct PanelSample {
  toy::ToyPrompt prompt;
  std::uint64_t seed = 0;
  Tensor<float> image;
  toy::Detection detection;
  bool match = false;
  double energy = 0.0;
};

struct PanelResult {
  std::vector<PanelSample> samples;
  double fidelity = 0.0;  ///< oracle match rate over the requested attributes
  double quality = 0.0;   ///< mean detail energy

  std::vector<double> match_indicators() const;
};

/// Samples prompt i with seed sampler.seed + i, with or without guidance, and
/// scores every image with the oracle detector.
PanelResult run_panel(const Conditioner& c, const std::vector<toy::ToyPrompt>& prompts, const GuidanceRecipe* recipe,
                      const SamplerConfig& sampler, const std::vector<toy::Attribute>& attributes);

}  // namespace modguide
