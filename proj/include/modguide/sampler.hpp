#pragma once

#include <cstdint>
#include <vector>

#include "modguide/guidance.hpp"

namespace modguide {

struct SamplerConfig {
  int steps = 20;
  double cfg_scale = 3.0;
  std::uint64_t seed = 0;
};

/// Per-step recordings from the conditional branch of one sampling run.
struct SamplingTrace {
  bool record_attention = false;
  bool record_activations = false;
  /// [step] -> latent x_t fed to the model at that step (recorded with activations).
  std::vector<Tensor<float>> latents;
  /// [step][layer][head] -> image-query x text-key block of the attention weights.
  std::vector<std::vector<std::vector<Matrix<float>>>> image_to_text;
  /// [step][layer] -> residual stream entering the block.
  std::vector<std::vector<Tensor<float>>> block_inputs;
};

/// Euler integration of the velocity field from t = 1 (seeded noise) to t = 0.
/// The conditional branch uses `guidance` when given; the unconditional branch
/// always uses the unguided conditioning of the empty prompt. The result is
/// clamped to [-1, 1].
Tensor<float> sample(const Conditioner& c, const toy::ToyPrompt& prompt, const GuidanceSpec* guidance,
                     const SamplerConfig& config, SamplingTrace* trace = nullptr);

/// One velocity evaluation with explicit per-layer conditioning.
Tensor<float> velocity(const Conditioner& c, const Tensor<float>& x, double t, const toy::TokenEmbeddings& tokens,
                       const std::vector<Tensor<float>>& y_per_layer, ForwardRecord<float>* record = nullptr);

}  // namespace modguide
