#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "modguide/dit.hpp"
#include "modguide/optim.hpp"
#include "modguide/toy_world.hpp"

namespace modguide {

struct TrainConfig {
  long steps = 18000;
  int batch = 16;
  double lr = 2e-3;
  long warmup_steps = 100;
  /// Cosine decay of the learning rate to zero after warmup; constant otherwise.
  bool cosine_decay = true;
  double grad_clip = 1.0;
  /// Probability of replacing the whole prompt by the unconditional one.
  double uncond_prob = 0.1;
  /// Probability of zeroing only the pooled embedding (dual-path training).
  double pooled_dropout = 0.0;
  std::uint64_t seed = 0;
};

/// Prompt encodings shared by training and sampling.
struct Encoders {
  toy::PooledEncoder pooled;
  toy::SequenceEncoder sequence;

  explicit Encoders(std::uint64_t seed = toy::kDefaultEncoderSeed) : pooled(seed), sequence(seed) {}
};

/// One fixed (x0, t, noise, prompt) draw; used for reproducible loss evaluation.
struct LossProbe {
  Tensor<float> x0;
  toy::ToyPrompt prompt;
  double t = 0.0;
  Tensor<float> noise;
};

std::vector<LossProbe> make_loss_probes(const std::vector<toy::Example>& data, std::size_t count, std::uint64_t seed);

/// Mean conditional flow-matching loss over fixed probes.
double evaluate_loss(Dit<float>& model, const Encoders& enc, const std::vector<LossProbe>& probes);

struct TrainProgress {
  long step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

/// Adam on the flow-matching loss. Each step draws `batch` examples, builds one
/// graph per example and reduces gradients in example order. Returns per-step losses.
std::vector<double> train_model(Dit<float>& model, const std::vector<toy::Example>& data, const Encoders& enc,
                                const TrainConfig& config,
                                const std::function<void(const TrainProgress&)>& on_step = {});

}  // namespace modguide
