#include "modguide/experiment.hpp"

namespace modguide {

GuidanceSpec make_guidance(const GuidanceRecipe& recipe, const toy::ToyPrompt& prompt) {
  GuidanceSpec spec{prompt, recipe.positive, recipe.negative, recipe.schedule};
  if (recipe.positive_from) {
    std::vector<toy::Clause> clauses = recipe.positive.clauses();
    bool found = false;
    for (const auto& c : prompt.clauses()) {
      if (c.attribute != *recipe.positive_from) continue;
      clauses.push_back(c);
      found = true;
    }
    if (!found) {
      throw ConfigError(std::string("prompt '") + prompt.canonical() + "' has no " +
                        toy::attribute_name(*recipe.positive_from) + " clause to guide towards");
    }
    spec.positive = toy::ToyPrompt(std::move(clauses));
  }
  return spec;
}

std::vector<toy::ToyPrompt> heldout_prompts(std::uint64_t seed, std::size_t count) {
  std::vector<toy::ToyPrompt> out;
  for (auto& e : toy::sample_dataset(seed, count)) out.push_back(std::move(e.prompt));
  return out;
}

std::vector<double> PanelResult::match_indicators() const {
  std::vector<double> out;
  for (const auto& s : samples) out.push_back(s.match ? 1.0 : 0.0);
  return out;
}

PanelResult run_panel(const Conditioner& c, const std::vector<toy::ToyPrompt>& prompts, const GuidanceRecipe* recipe,
                      const SamplerConfig& sampler, const std::vector<toy::Attribute>& attributes) {
  PanelResult out;
  double matches = 0.0;
  double energy = 0.0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    PanelSample s;
    s.prompt = prompts[i];
    SamplerConfig sc = sampler;
    sc.seed = sampler.seed + i;
    s.seed = sc.seed;
    if (recipe) {
      const GuidanceSpec spec = make_guidance(*recipe, prompts[i]);
      s.image = sample(c, prompts[i], &spec, sc);
    } else {
      s.image = sample(c, prompts[i], nullptr, sc);
    }
    s.detection = toy::detect_scene(s.image);
    s.match = toy::detection_matches(s.detection, prompts[i], attributes);
    s.energy = toy::detail_energy(s.image);
    matches += s.match;
    energy += s.energy;
    out.samples.push_back(std::move(s));
  }
  if (!prompts.empty()) {
    out.fidelity = matches / double(prompts.size());
    out.quality = energy / double(prompts.size());
  }
  return out;
}

}  // namespace modguide
