#include "modguide/sampler.hpp"

#include <algorithm>

#include "modguide/random.hpp"

namespace modguide {

Tensor<float> velocity(const Conditioner& c, const Tensor<float>& x, double t, const toy::TokenEmbeddings& tokens,
                       const std::vector<Tensor<float>>& y_per_layer, ForwardRecord<float>* record) {
  Graph<float> g(false);
  std::vector<Var<float>> ys;
  ys.reserve(y_per_layer.size());
  for (const auto& y : y_per_layer) ys.push_back(g.constant(y));
  return model_forward(g, *c.model, x, t, tokens, ys, record).value();
}

Tensor<float> sample(const Conditioner& c, const toy::ToyPrompt& prompt, const GuidanceSpec* guidance,
                     const SamplerConfig& cfg, SamplingTrace* trace) {
  if (cfg.steps < 1) throw ConfigError("sampler steps must be >= 1");
  if (!(cfg.cfg_scale >= 0.0) || !std::isfinite(cfg.cfg_scale)) throw ConfigError("cfg scale must be finite and >= 0");
  if (guidance && !(guidance->prompt == prompt)) throw ConfigError("guidance spec prompt differs from the sampled prompt");
  const auto& mc = c.model->config;
  const auto L = static_cast<std::size_t>(mc.n_layers);
  std::mt19937_64 rng(cfg.seed);
  Tensor<float> x = normal_tensor<float>(rng, {mc.channels, mc.resolution, mc.resolution});

  const auto cond_tokens = c.tokens(prompt);
  const auto uncond_prompt = toy::ToyPrompt{};
  const auto uncond_tokens = c.encoders->sequence.encode(uncond_prompt);
  const bool need_uncond = cfg.cfg_scale != 1.0;
  const float dt = 1.0f / float(cfg.steps);

  for (int k = 0; k < cfg.steps; ++k) {
    const double t = 1.0 - double(k) / double(cfg.steps);
    const std::vector<Tensor<float>> ys =
        guidance ? build_guided_y(c, *guidance, t) : std::vector<Tensor<float>>(L, c.y(prompt, t));

    ForwardRecord<float> rec;
    rec.attention = trace && trace->record_attention;
    rec.activations = trace && trace->record_activations;
    const Tensor<float> v_cond = velocity(c, x, t, cond_tokens, ys, trace ? &rec : nullptr);
    if (trace) {
      const Index nt = mc.text_tokens;
      const Index ni = mc.image_tokens();
      if (rec.attention) {
        std::vector<std::vector<Matrix<float>>> layers;
        for (const auto& per_head : rec.attention_weights) {
          std::vector<Matrix<float>> heads;
          for (const auto& w : per_head) heads.push_back(w.block(nt, 0, ni, nt));
          layers.push_back(std::move(heads));
        }
        trace->image_to_text.push_back(std::move(layers));
      }
      if (rec.activations) {
        trace->block_inputs.push_back(std::move(rec.block_inputs));
        trace->latents.push_back(x);
      }
    }

    Tensor<float> v = v_cond;
    if (need_uncond) {
      const std::vector<Tensor<float>> yu(L, c.y(uncond_prompt, t));
      v = cfg_combine(v_cond, velocity(c, x, t, uncond_tokens, yu), cfg.cfg_scale);
    }
    x.matrix() -= dt * v.matrix();
  }
  for (float& v : x.data()) v = std::clamp(v, -1.0f, 1.0f);
  return x;
}

}  // namespace modguide
