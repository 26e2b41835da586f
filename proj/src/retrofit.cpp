#include "modguide/retrofit.hpp"

#include <algorithm>

#include "modguide/random.hpp"

namespace modguide {

std::string model_hash(const Dit<float>& model) { return hex64(fnv1a64(serialize_model(model))); }

namespace {

void require_pooled_free(const Dit<float>& base) {
  if (base.config.pooled_path) throw ConfigError("retrofit needs a base model without a pooled path");
}

void check_adapter_fits(const Dit<float>& base, const PooledAdapter<float>& adapter) {
  if (adapter.d_pool != base.config.d_pool || adapter.out_dim != base.config.time_dim) {
    throw DimensionError("adapter maps " + std::to_string(adapter.d_pool) + " -> " + std::to_string(adapter.out_dim) +
                         ", base expects " + std::to_string(base.config.d_pool) + " -> " +
                         std::to_string(base.config.time_dim));
  }
}

}  // namespace

Var<float> retrofit_forward(Graph<float>& g, Dit<float>& base, PooledAdapter<float>& adapter,
                            const Tensor<float>& x_t, double t, const toy::TokenEmbeddings& null_tokens,
                            const Tensor<float>& pooled) {
  check_adapter_fits(base, adapter);
  const auto extra = adapter.contribution(g, pooled);
  const auto y = global_conditioning(g, base, pooled, t, &extra);
  const std::vector<Var<float>> ys(static_cast<std::size_t>(base.config.n_layers), y);
  return model_forward(g, base, x_t, t, null_tokens, ys);
}

double distill_step(Dit<float>& base, PooledAdapter<float>& adapter, const Encoders& enc, const Tensor<float>& x0,
                    const toy::ToyPrompt& prompt, double t, const Tensor<float>& noise, float grad_scale) {
  require_pooled_free(base);
  if (x0.shape() != noise.shape()) throw DimensionError("distill_step: image and noise shapes differ");
  // Stale gradients from earlier training must not count as a violation.
  base.params.zero_grads();

  Tensor<float> x_t(x0.shape());
  const float ts = float(t);
  x_t.matrix() = (1.0f - ts) * x0.matrix() + ts * noise.matrix();
  const Tensor<float> pooled = enc.pooled.encode(prompt);

  Tensor<float> teacher;
  {
    Graph<float> g(false);
    const auto y = global_conditioning(g, base, pooled, t);
    const std::vector<Var<float>> ys(static_cast<std::size_t>(base.config.n_layers), y);
    teacher = model_forward(g, base, x_t, t, enc.sequence.encode(prompt), ys).value();
  }

  Graph<float> g;
  const auto student = retrofit_forward(g, base, adapter, x_t, t, enc.sequence.encode(toy::ToyPrompt{}), pooled);
  const auto loss = mse(student, g.constant(std::move(teacher)));
  g.backward(scale(loss, grad_scale));
  g.accumulate_parameter_grads();

  for (const auto& p : base.params) {
    if (!p.tensor.has_grad()) continue;
    const auto& gr = *p.tensor.grad_storage();
    if (std::any_of(gr.begin(), gr.end(), [](float v) { return v != 0.0f; })) {
      throw FrozennessError("base parameter '" + p.name + "' received a gradient during distillation");
    }
  }
  return loss.value()[0];
}

double evaluate_distillation(Dit<float>& base, PooledAdapter<float>& adapter, const Encoders& enc,
                             const std::vector<LossProbe>& probes) {
  require_pooled_free(base);
  check_adapter_fits(base, adapter);
  if (probes.empty()) throw ConfigError("evaluate_distillation needs at least one probe");
  const auto null_tokens = enc.sequence.encode(toy::ToyPrompt{});
  double sum = 0.0;
  for (const auto& p : probes) {
    Tensor<float> x_t(p.x0.shape());
    const float ts = float(p.t);
    x_t.matrix() = (1.0f - ts) * p.x0.matrix() + ts * p.noise.matrix();
    const Tensor<float> pooled = enc.pooled.encode(p.prompt);
    Graph<float> g(false);
    const auto y = global_conditioning(g, base, pooled, p.t);
    const std::vector<Var<float>> ys(static_cast<std::size_t>(base.config.n_layers), y);
    const auto teacher = model_forward(g, base, x_t, p.t, enc.sequence.encode(p.prompt), ys);
    const auto student = retrofit_forward(g, base, adapter, x_t, p.t, null_tokens, pooled);
    sum += mse(student, teacher).value()[0];
  }
  return sum / double(probes.size());
}

RetrofitRun retrofit_train(Dit<float>& base, const std::vector<toy::Example>& data, const Encoders& enc,
                           const RetrofitConfig& cfg, const std::function<void(const TrainProgress&)>& on_step) {
  require_pooled_free(base);
  if (data.empty()) throw ConfigError("retrofit needs a nonempty dataset");
  if (cfg.iterations < 0) throw ConfigError("retrofit.iterations must be >= 0");
  if (cfg.batch < 1) throw ConfigError("retrofit.batch must be >= 1");

  RetrofitRun run;
  run.base_hash = model_hash(base);
  run.adapter = PooledAdapter<float>::for_model(base.config, cfg.adapter_width, mix_seed(cfg.seed, 1));

  // Freeze for the duration of the run, then restore the caller's flags.
  std::vector<bool> trainable;
  for (const auto& p : base.params) trainable.push_back(p.tensor.requires_grad());
  base.params.set_trainable(false);
  auto restore = [&] {
    std::size_t i = 0;
    for (auto& p : base.params) p.tensor.set_requires_grad(trainable[i++]);
  };

  try {
    OptimizerState opt;
    opt.config.lr = cfg.lr;
    std::mt19937_64 rng(mix_seed(cfg.seed, 2));
    double initial = 0.0;
    long above = 0;
    for (long step = 0; step < cfg.iterations; ++step) {
      run.adapter.params.zero_grads();
      double batch_loss = 0.0;
      for (int b = 0; b < cfg.batch; ++b) {
        const auto& e = data[static_cast<std::size_t>(rng() % data.size())];
        const double t = uniform01(rng);
        const auto noise = normal_tensor<float>(rng, e.image.shape());
        batch_loss += distill_step(base, run.adapter, enc, e.image, e.prompt, t, noise, 1.0f / float(cfg.batch));
      }
      batch_loss /= cfg.batch;
      const double norm = clip_grad_norm(run.adapter.params, cfg.grad_clip);
      if (!std::isfinite(norm) || !std::isfinite(batch_loss)) {
        throw NumericError("retrofit diverged at step " + std::to_string(step) + ": non-finite loss or gradient");
      }
      adam_step(run.adapter.params, opt);
      run.losses.push_back(batch_loss);
      run.iterations = step + 1;
      if (step == 0) initial = batch_loss;
      above = batch_loss > cfg.divergence_factor * initial ? above + 1 : 0;
      if (above >= cfg.divergence_patience) {
        throw NumericError("retrofit diverged: loss " + std::to_string(batch_loss) + " has exceeded " +
                           std::to_string(cfg.divergence_factor) + "x the initial " + std::to_string(initial) +
                           " for " + std::to_string(above) + " steps (step " + std::to_string(step) + ")");
      }
      if (on_step) on_step({step, batch_loss, norm});
    }
  } catch (...) {
    restore();
    throw;
  }
  restore();
  return run;
}

std::string serialize_adapter(const RetrofitRun& run) {
  Checkpoint c = store_checkpoint("adapter", run.adapter.params);
  c.header["base_hash"] = run.base_hash;
  c.header["adapter.d_pool"] = std::to_string(run.adapter.d_pool);
  c.header["adapter.width"] = std::to_string(run.adapter.width);
  c.header["adapter.out_dim"] = std::to_string(run.adapter.out_dim);
  c.header["iterations"] = std::to_string(run.iterations);
  return serialize_checkpoint(c);
}

RetrofitRun parse_adapter(const std::string& bytes, const Dit<float>& base) {
  const Checkpoint c = parse_checkpoint(bytes);
  if (c.kind != "adapter") throw CheckpointError("expected an adapter checkpoint, found kind '" + c.kind + "'");
  auto field = [&](const std::string& key) {
    const auto it = c.header.find(key);
    if (it == c.header.end()) throw CheckpointError("adapter checkpoint lacks header '" + key + "'");
    return it->second;
  };
  auto number = [&](const std::string& key) {
    try {
      return std::stol(field(key));
    } catch (const std::logic_error&) {
      throw CheckpointError("adapter header '" + key + "' is not an integer");
    }
  };
  RetrofitRun run;
  run.base_hash = field("base_hash");
  const std::string actual = model_hash(base);
  if (run.base_hash != actual) {
    throw CheckpointError("adapter was trained against base " + run.base_hash + ", loaded base is " + actual);
  }
  try {
    run.adapter = PooledAdapter<float>::create(number("adapter.d_pool"), number("adapter.width"),
                                               number("adapter.out_dim"), 0);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("adapter header: ") + e.what());
  }
  if (run.adapter.d_pool != base.config.d_pool || run.adapter.out_dim != base.config.time_dim) {
    throw CheckpointError("adapter dimensions do not fit the base model");
  }
  run.iterations = number("iterations");
  load_store(c, run.adapter.params);
  return run;
}

void save_adapter(const std::filesystem::path& path, const RetrofitRun& run) { write_file(path, serialize_adapter(run)); }

RetrofitRun load_adapter(const std::filesystem::path& path, const Dit<float>& base) {
  return parse_adapter(read_file(path), base);
}

}  // namespace modguide
