#include "modguide/guidance.hpp"

#include <algorithm>

namespace modguide {

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "constant") return ScheduleKind::constant;
  if (name == "step") return ScheduleKind::step;
  if (name == "window") return ScheduleKind::window;
  if (name == "bumps") return ScheduleKind::bumps;
  if (name == "two_level") return ScheduleKind::two_level;
  throw ConfigError("unknown schedule kind '" + name + "'");
}

std::string schedule_kind_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::step: return "step";
    case ScheduleKind::window: return "window";
    case ScheduleKind::bumps: return "bumps";
    case ScheduleKind::two_level: return "two_level";
  }
  throw ConfigError("unknown schedule kind");
}

IndexMode parse_index_mode(const std::string& name) {
  if (name == "absolute") return IndexMode::absolute;
  if (name == "fractional") return IndexMode::fractional;
  throw ConfigError("unknown index mode '" + name + "'");
}

std::string index_mode_name(IndexMode m) { return m == IndexMode::absolute ? "absolute" : "fractional"; }

GuidanceSchedule GuidanceSchedule::constant(double w, Index layers) {
  GuidanceSchedule s;
  s.kind = ScheduleKind::constant;
  s.w = w;
  s.layers = layers;
  s.validate();
  return s;
}

GuidanceSchedule GuidanceSchedule::step(int i, double w, Index layers, IndexMode mode) {
  GuidanceSchedule s;
  s.kind = ScheduleKind::step;
  s.i1 = i;
  s.w = w;
  s.layers = layers;
  s.index_mode = mode;
  s.validate();
  return s;
}

GuidanceSchedule GuidanceSchedule::window(int i1, int i2, double w, Index layers, IndexMode mode) {
  GuidanceSchedule s;
  s.kind = ScheduleKind::window;
  s.i1 = i1;
  s.i2 = i2;
  s.w = w;
  s.layers = layers;
  s.index_mode = mode;
  s.validate();
  return s;
}

GuidanceSchedule GuidanceSchedule::bumps(int i1, int i2, double sigma, double w, Index layers, IndexMode mode) {
  GuidanceSchedule s;
  s.kind = ScheduleKind::bumps;
  s.i1 = i1;
  s.i2 = i2;
  s.sigma = sigma;
  s.w = w;
  s.layers = layers;
  s.index_mode = mode;
  s.validate();
  return s;
}

GuidanceSchedule GuidanceSchedule::two_level(int i1, int i2, int i3, double w1, double w2, Index layers,
                                             IndexMode mode) {
  GuidanceSchedule s;
  s.kind = ScheduleKind::two_level;
  s.i1 = i1;
  s.i2 = i2;
  s.i3 = i3;
  s.w1 = w1;
  s.w2 = w2;
  s.layers = layers;
  s.index_mode = mode;
  s.validate();
  return s;
}

int GuidanceSchedule::map_index(int i) const {
  if (index_mode == IndexMode::absolute) return i;
  // Round half up, in integers: floor((2 i L + 57) / 114).
  const long long num = 2LL * i * layers + kReferenceLayers;
  return static_cast<int>(num / (2LL * kReferenceLayers));
}

void GuidanceSchedule::validate() const {
  if (layers < 1) throw ConfigError("schedule layer count must be >= 1");
  for (double v : {w, w1, w2}) {
    if (!std::isfinite(v)) throw ConfigError("schedule scales must be finite");
  }
  const int ref = reference_layers();
  auto in_range = [&](int i, const char* name) {
    if (i < 0 || i > ref) {
      throw ConfigError(std::string("schedule index ") + name + "=" + std::to_string(i) + " outside [0, " +
                        std::to_string(ref) + "]");
    }
  };
  switch (kind) {
    case ScheduleKind::constant: break;
    case ScheduleKind::step: in_range(i1, "i"); break;
    case ScheduleKind::window:
    case ScheduleKind::bumps:
      in_range(i1, "i1");
      in_range(i2, "i2");
      if (i1 > i2) throw ConfigError("schedule requires i1 <= i2");
      break;
    case ScheduleKind::two_level:
      in_range(i1, "i1");
      in_range(i2, "i2");
      in_range(i3, "i3");
      if (i1 > i2 || i2 > i3) throw ConfigError("schedule requires i1 <= i2 <= i3");
      break;
  }
  if (kind == ScheduleKind::bumps && !(sigma > 0.0 && std::isfinite(sigma))) {
    throw ConfigError("bump width sigma must be positive");
  }
}

double GuidanceSchedule::eval(Index l) const {
  if (l < 0 || l >= layers) throw RangeError("layer " + std::to_string(l) + " outside [0, " + std::to_string(layers) + ")");
  switch (kind) {
    case ScheduleKind::constant: return w;
    case ScheduleKind::step: return l < map_index(i1) ? 0.0 : w;
    case ScheduleKind::window: return (l >= map_index(i1) && l < map_index(i2)) ? w : 0.0;
    case ScheduleKind::bumps: {
      const double s = index_mode == IndexMode::fractional ? sigma * double(layers) / kReferenceLayers : sigma;
      double peak = 0.0;
      for (int c : {map_index(i1), map_index(i2)}) {
        const double d = double(l) - double(c);
        peak = std::max(peak, std::exp(-d * d / (2.0 * s * s)));
      }
      return w * peak;
    }
    case ScheduleKind::two_level:
      if (l >= map_index(i1) && l < map_index(i2)) return w1;
      if (l >= map_index(i2) && l < map_index(i3)) return w2;
      return 0.0;
  }
  throw ConfigError("unknown schedule kind");
}

std::vector<double> GuidanceSchedule::evaluate_all() const {
  std::vector<double> out;
  for (Index l = 0; l < layers; ++l) out.push_back(eval(l));
  return out;
}

bool GuidanceSchedule::all_zero() const {
  const auto v = evaluate_all();
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

// ---------------------------------------------------------------------------

toy::TokenEmbeddings Conditioner::tokens(const toy::ToyPrompt& p) const {
  if (route == TextRoute::pooled_only) return encoders->sequence.encode(toy::ToyPrompt{});
  return encoders->sequence.encode(p);
}

Tensor<float> Conditioner::pooled(const toy::ToyPrompt& p) const {
  if (zero_pooled) return Tensor<float>({model->config.d_pool});
  return encoders->pooled.encode(p);
}

Tensor<float> Conditioner::y(const toy::ToyPrompt& p, double t) const {
  Graph<float> g(false);
  const Tensor<float> e = pooled(p);
  if (adapter) {
    const auto extra = adapter->contribution(g, e);
    return global_conditioning(g, *model, e, t, &extra).value();
  }
  return global_conditioning(g, *model, e, t).value();
}

Tensor<float> guidance_direction(const Conditioner& c, const toy::ToyPrompt& positive, const toy::ToyPrompt& negative,
                                 double t) {
  const Tensor<float> yp = c.y(positive, t);
  const Tensor<float> yn = c.y(negative, t);
  Tensor<float> out(yp.shape());
  out.matrix() = yp.matrix() - yn.matrix();
  return out;
}

Tensor<float> guided_conditioning(const Tensor<float>& y, const Tensor<float>& delta, double w) {
  if (y.shape() != delta.shape()) {
    throw DimensionError("guided_conditioning: " + shape_string(y.shape()) + " vs " + shape_string(delta.shape()));
  }
  Tensor<float> out = y;
  if (w == 0.0) return out;
  const float wf = static_cast<float>(w);
  auto o = out.data();
  const auto d = delta.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const float inc = wf * d[i];
    if (inc != 0.0f) o[i] += inc;
  }
  return out;
}

Tensor<float> cfg_combine(const Tensor<float>& v_cond, const Tensor<float>& v_uncond, double s) {
  if (v_cond.shape() != v_uncond.shape()) {
    throw DimensionError("cfg_combine: " + shape_string(v_cond.shape()) + " vs " + shape_string(v_uncond.shape()));
  }
  if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("cfg scale must be finite and >= 0");
  if (s == 1.0) return v_cond;
  if (s == 0.0) return v_uncond;
  Tensor<float> out(v_cond.shape());
  const float sf = static_cast<float>(s);
  out.matrix() = v_uncond.matrix() + sf * (v_cond.matrix() - v_uncond.matrix());
  return out;
}

std::vector<Tensor<float>> build_guided_y(const Conditioner& c, const GuidanceSpec& spec, double t) {
  spec.schedule.validate();
  if (spec.schedule.layers != c.model->config.n_layers) {
    throw ConfigError("schedule is defined for " + std::to_string(spec.schedule.layers) + " layers, model has " +
                      std::to_string(c.model->config.n_layers));
  }
  const Tensor<float> y = c.y(spec.prompt, t);
  const auto w = spec.schedule.evaluate_all();
  std::vector<Tensor<float>> out;
  out.reserve(w.size());
  if (std::all_of(w.begin(), w.end(), [](double v) { return v == 0.0; })) {
    out.assign(w.size(), y);
    return out;
  }
  const Tensor<float> delta = guidance_direction(c, spec.positive, spec.negative, t);
  for (double wl : w) out.push_back(guided_conditioning(y, delta, wl));
  return out;
}

}  // namespace modguide
