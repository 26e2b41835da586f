#include "modguide/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "modguide/random.hpp"

namespace modguide {

std::vector<LossProbe> make_loss_probes(const std::vector<toy::Example>& data, std::size_t count, std::uint64_t seed) {
  if (data.empty()) throw ConfigError("loss probes need a nonempty dataset");
  std::mt19937_64 rng(seed);
  std::vector<LossProbe> out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& e = data[i % data.size()];
    LossProbe p;
    p.x0 = e.image;
    p.prompt = e.prompt;
    p.t = uniform01(rng);
    p.noise = normal_tensor<float>(rng, e.image.shape());
    out.push_back(std::move(p));
  }
  return out;
}

double evaluate_loss(Dit<float>& model, const Encoders& enc, const std::vector<LossProbe>& probes) {
  double total = 0.0;
  for (const auto& p : probes) {
    Graph<float> g(false);
    const auto loss = flow_matching_loss(g, model, p.x0, enc.sequence.encode(p.prompt), enc.pooled.encode(p.prompt),
                                         p.t, p.noise);
    total += loss.value()[0];
  }
  return total / double(probes.size());
}

std::vector<double> train_model(Dit<float>& model, const std::vector<toy::Example>& data, const Encoders& enc,
                                const TrainConfig& cfg, const std::function<void(const TrainProgress&)>& on_step) {
  if (data.empty()) throw ConfigError("training needs a nonempty dataset");
  if (cfg.batch < 1) throw ConfigError("train.batch must be >= 1");
  if (cfg.steps < 0) throw ConfigError("train.steps must be >= 0");

  // Encode every distinct prompt once.
  std::vector<toy::TokenEmbeddings> tokens;
  std::vector<Tensor<float>> pooled;
  tokens.reserve(data.size());
  pooled.reserve(data.size());
  for (const auto& e : data) {
    tokens.push_back(enc.sequence.encode(e.prompt));
    pooled.push_back(enc.pooled.encode(e.prompt));
  }
  const auto null_tokens = enc.sequence.encode(toy::ToyPrompt{});
  const Tensor<float> zero_pooled({model.config.d_pool});

  OptimizerState opt;
  opt.config.lr = cfg.lr;
  std::mt19937_64 rng(cfg.seed);
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(cfg.steps));
  for (long step = 0; step < cfg.steps; ++step) {
    model.params.zero_grads();
    double batch_loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const std::size_t idx = static_cast<std::size_t>(rng() % data.size());
      const double t = uniform01(rng);
      const Tensor<float> noise = normal_tensor<float>(rng, data[idx].image.shape());
      const double u = uniform01(rng);
      const bool uncond = u < cfg.uncond_prob;
      const bool drop_pooled = !uncond && uniform01(rng) < cfg.pooled_dropout;

      Graph<float> g;
      const auto loss = flow_matching_loss(g, model, data[idx].image, uncond ? null_tokens : tokens[idx],
                                           uncond || drop_pooled ? zero_pooled : pooled[idx], t, noise);
      const auto scaled = scale(loss, 1.0f / float(cfg.batch));
      g.backward(scaled);
      g.accumulate_parameter_grads();
      batch_loss += loss.value()[0];
    }
    batch_loss /= cfg.batch;
    const double norm = clip_grad_norm(model.params, cfg.grad_clip);
    if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite at step " + std::to_string(step));
    const double warm = cfg.warmup_steps > 0 ? std::min(1.0, double(step + 1) / double(cfg.warmup_steps)) : 1.0;
    double decay = 1.0;
    if (cfg.cosine_decay && step >= cfg.warmup_steps && cfg.steps > cfg.warmup_steps) {
      const double progress = double(step - cfg.warmup_steps) / double(cfg.steps - cfg.warmup_steps);
      decay = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }
    opt.config.lr = cfg.lr * warm * decay;
    adam_step(model.params, opt);
    losses.push_back(batch_loss);
    if (on_step) on_step({step, batch_loss, norm});
  }
  return losses;
}

}  // namespace modguide
