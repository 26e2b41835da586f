// End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails. Trained models are cached in the
// directory given by --cache so that reruns only repeat the evaluations.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "modguide/analysis.hpp"
#include "modguide/checkpoint.hpp"
#include "modguide/experiment.hpp"
#include "modguide/grad_check.hpp"
#include "modguide/random.hpp"
#include "modguide/retrofit.hpp"
#include "modguide/sampler.hpp"
#include "modguide/train.hpp"

namespace fs = std::filesystem;
using namespace modguide;
using toy::Attribute;
using toy::ToyPrompt;

namespace {

// ---------------------------------------------------------------------------
// Fixed experiment settings

constexpr std::uint64_t kDataSeed = 0;
constexpr std::size_t kDataSize = 10000;
constexpr std::uint64_t kHeldoutSeed = 777;
constexpr std::uint64_t kProbeSeed = 99;
constexpr std::size_t kProbeCount = 256;
constexpr long kLossCheckStep = 5000;
constexpr int kPermutations = 10000;

TrainConfig default_training() {
  TrainConfig tc;
  tc.steps = 18000;
  tc.batch = 16;
  tc.lr = 2e-3;
  tc.seed = 0;
  return tc;
}

TrainConfig dual_path_training() {
  TrainConfig tc = default_training();
  tc.pooled_dropout = 0.5;
  tc.seed = 1;
  return tc;
}

TrainConfig pooled_free_training() {
  TrainConfig tc = default_training();
  tc.seed = 2;
  return tc;
}

ToyPrompt counting_negative() { return ToyPrompt::parse("detail=plain"); }

/// Strategy 1 on the 8-layer model: reference threshold 5 of 57, w = 3.
GuidanceSchedule counting_schedule(Index layers) { return GuidanceSchedule::step(5, 3.0, layers); }

GuidanceRecipe counting_recipe(Index layers) {
  GuidanceRecipe r;
  r.schedule = counting_schedule(layers);
  r.negative = counting_negative();
  r.positive_from = Attribute::count;
  return r;
}

// ---------------------------------------------------------------------------
// Reporting

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

bool bit_identical(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() &&
         std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](float x, float y) { return std::memcmp(&x, &y, sizeof(float)) == 0; });
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Trained models, cached on disk

struct TrainedModel {
  Dit<float> model;
  double loss_initial = 0.0;
  double loss_at_check = 0.0;
  double seconds = 0.0;
};

std::string training_signature(const ModelConfig& mc, const TrainConfig& tc, std::uint64_t model_seed) {
  std::ostringstream os;
  for (const auto& [k, v] : model_config_header(mc)) os << k << '=' << v << ';';
  os << "steps=" << tc.steps << ";batch=" << tc.batch << ";lr=" << tc.lr << ";warmup=" << tc.warmup_steps
     << ";cosine=" << tc.cosine_decay << ";clip=" << tc.grad_clip << ";uncond=" << tc.uncond_prob
     << ";pooled_dropout=" << tc.pooled_dropout << ";seed=" << tc.seed << ";model_seed=" << model_seed
     << ";data=" << kDataSeed << '/' << kDataSize;
  return hex64(fnv1a64(os.str()));
}

class ModelCache {
 public:
  explicit ModelCache(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  const fs::path& dir() const { return dir_; }

  const std::vector<toy::Example>& data() {
    if (data_.empty()) data_ = toy::sample_dataset(kDataSeed, kDataSize);
    return data_;
  }
  const Encoders& encoders() const { return enc_; }

  TrainedModel& get(const std::string& name, const ModelConfig& mc, const TrainConfig& tc, std::uint64_t model_seed) {
    if (auto it = models_.find(name); it != models_.end()) return it->second;
    const std::string sig = training_signature(mc, tc, model_seed);
    const fs::path path = dir_ / (name + ".ckpt");
    if (fs::exists(path)) {
      const auto ck = parse_checkpoint(read_file(path));
      if (auto s = ck.header.find("acceptance.signature"); s != ck.header.end() && s->second == sig) {
        TrainedModel tm{parse_model(read_file(path)), std::stod(ck.header.at("acceptance.loss_initial")),
                        std::stod(ck.header.at("acceptance.loss_at_check")),
                        std::stod(ck.header.at("acceptance.seconds"))};
        std::cerr << "[cache] loaded " << path.string() << '\n';
        return models_.emplace(name, std::move(tm)).first->second;
      }
    }
    std::cerr << "[train] " << name << ": " << tc.steps << " steps, batch " << tc.batch << '\n';
    TrainedModel tm{Dit<float>::create(mc, model_seed)};
    const auto probes = make_loss_probes(data(), kProbeCount, kProbeSeed);
    tm.loss_initial = evaluate_loss(tm.model, enc_, probes);
    tm.loss_at_check = std::numeric_limits<double>::quiet_NaN();
    const auto t0 = std::chrono::steady_clock::now();
    train_model(tm.model, data(), enc_, tc, [&](const TrainProgress& p) {
      if (p.step + 1 == kLossCheckStep) tm.loss_at_check = evaluate_loss(tm.model, enc_, probes);
      if ((p.step + 1) % 1000 == 0) {
        std::cerr << "[train] " << name << " step " << p.step + 1 << " loss " << fmt(p.loss) << " ("
                  << fmt(seconds_since(t0), 5) << " s)\n";
      }
    });
    tm.seconds = seconds_since(t0);
    if (std::isnan(tm.loss_at_check)) tm.loss_at_check = evaluate_loss(tm.model, enc_, probes);
    save_model(path, tm.model,
               {{"acceptance.signature", sig},
                {"acceptance.loss_initial", fmt(tm.loss_initial, 17)},
                {"acceptance.loss_at_check", fmt(tm.loss_at_check, 17)},
                {"acceptance.seconds", fmt(tm.seconds, 17)}});
    return models_.emplace(name, std::move(tm)).first->second;
  }

  TrainedModel& default_model() {
    return get("default", ModelConfig{}, default_training(), 0);
  }
  TrainedModel& dual_path_model() { return get("dual_path", ModelConfig{}, dual_path_training(), 1); }
  TrainedModel& pooled_free_model() {
    ModelConfig mc;
    mc.pooled_path = false;
    return get("pooled_free", mc, pooled_free_training(), 2);
  }

 private:
  fs::path dir_;
  Encoders enc_;
  std::vector<toy::Example> data_;
  std::map<std::string, TrainedModel> models_;
};

Conditioner conditioner(Dit<float>& m, const Encoders& enc) {
  Conditioner c;
  c.model = &m;
  c.encoders = &enc;
  return c;
}

const std::vector<ToyPrompt>& heldout() {
  static const auto prompts = heldout_prompts(kHeldoutSeed, 200);
  return prompts;
}

std::vector<ToyPrompt> heldout_first(std::size_t n) { return {heldout().begin(), heldout().begin() + long(n)}; }

// ---------------------------------------------------------------------------
// 1. Zero-guidance identity

Outcome zero_guidance_identity(ModelCache& cache) {
  auto& m = cache.default_model().model;
  const auto c = conditioner(m, cache.encoders());
  const Index L = m.config.n_layers;
  const std::vector<std::pair<std::string, GuidanceSchedule>> zero_schedules = {
      {"constant w=0", GuidanceSchedule::constant(0.0, L)},
      {"step i=5 w=0", GuidanceSchedule::step(5, 0.0, L)},
      {"window w=0", GuidanceSchedule::window(13, 30, 0.0, L)},
      {"bumps w=0", GuidanceSchedule::bumps(20, 50, 5.0, 0.0, L)},
      {"two_level w1=w2=0", GuidanceSchedule::two_level(13, 30, 45, 0.0, 0.0, L)},
  };
  const auto positive = ToyPrompt::parse("count=4, detail=textured");
  int compared = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    const auto& p = heldout()[i];
    SamplerConfig sc;
    sc.seed = 500 + i;
    const auto plain = sample(c, p, nullptr, sc);
    for (const auto& [name, sched] : zero_schedules) {
      if (!sched.all_zero()) return {false, name + " does not evaluate to zero"};
      const GuidanceSpec spec{p, positive, counting_negative(), sched};
      if (!bit_identical(sample(c, p, &spec, sc), plain)) return {false, name + " changed prompt " + p.canonical()};
      ++compared;
    }
    const GuidanceSpec same{p, positive, positive, counting_schedule(L)};
    if (!bit_identical(sample(c, p, &same, sc), plain)) return {false, "p+ = p- changed prompt " + p.canonical()};
    ++compared;
  }
  return {true, std::to_string(compared) + " guided runs byte-identical to unguided"};
}

// ---------------------------------------------------------------------------
// 2. Schedule values

Outcome schedule_values() {
  // Expected values written out by hand over the 57-layer reference stack.
  std::vector<double> s1(kReferenceLayers), s4(kReferenceLayers);
  for (int l = 0; l < kReferenceLayers; ++l) {
    s1[std::size_t(l)] = l >= 5 ? 3.0 : 0.0;
    s4[std::size_t(l)] = (l >= 13 && l < 30) ? 3.0 : (l >= 30 && l < 45) ? 1.0 : 0.0;
  }
  const auto got1 = GuidanceSchedule::step(5, 3.0, kReferenceLayers, IndexMode::absolute).evaluate_all();
  const auto got4 = GuidanceSchedule::two_level(13, 30, 45, 3.0, 1.0, kReferenceLayers, IndexMode::absolute).evaluate_all();
  if (got1 != s1) return {false, "strategy 1 values differ"};
  if (got4 != s4) return {false, "strategy 4 values differ"};
  for (Index L : {Index(1), Index(8), Index(57)}) {
    for (IndexMode mode : {IndexMode::absolute, IndexMode::fractional}) {
      for (double w : {0.0, 1.5, 3.0, -2.0}) {
        if (GuidanceSchedule::step(0, w, L, mode).evaluate_all() != GuidanceSchedule::constant(w, L).evaluate_all()) {
          return {false, "step(i=0) differs from constant at L=" + std::to_string(L)};
        }
      }
    }
  }
  return {true, "strategy 1 and 4 match at all 57 layers; step(0) == constant"};
}

// ---------------------------------------------------------------------------
// 3. Affinity and locality

float ulp_at(float magnitude) {
  const float a = std::abs(magnitude);
  return std::nextafter(a, std::numeric_limits<float>::infinity()) - a;
}

Outcome affinity_and_locality(ModelCache& cache) {
  auto& m = cache.default_model().model;
  const auto c = conditioner(m, cache.encoders());
  const Index L = m.config.n_layers;

  std::mt19937_64 rng(31);
  double worst = 0.0;
  for (int draw = 0; draw < 1000; ++draw) {
    const auto& p = heldout()[std::size_t(draw) % heldout().size()];
    const auto& q = heldout()[std::size_t(draw * 7 + 3) % heldout().size()];
    const double t = uniform01(rng);
    const auto y = c.y(p, t);
    const auto delta = guidance_direction(c, p, q, t);
    const double a = -8.0 + 16.0 * uniform01(rng);
    const double b = -8.0 + 16.0 * uniform01(rng);
    const auto lhs = guided_conditioning(guided_conditioning(y, delta, a), delta, b);
    const auto rhs = guided_conditioning(y, delta, a + b);
    for (Index i = 0; i < y.size(); ++i) {
      const float scale = std::max({std::abs(y[i]), std::abs(float(a) * delta[i]), std::abs(float(b) * delta[i]),
                                    std::abs(float(a + b) * delta[i])});
      worst = std::max(worst, double(std::abs(lhs[i] - rhs[i])) / double(ulp_at(scale)));
    }
  }
  if (worst > 4.0) return {false, "affinity off by " + fmt(worst) + " ulp"};

  // Locality: with the same latent at every sampler step, block inputs up to the
  // first guided block are bit-identical to an unguided forward.
  int checked = 0;
  for (int ref_i : {5, 13, 30, 45}) {
    const auto sched = GuidanceSchedule::step(ref_i, 3.0, L);
    const Index first = sched.map_index(ref_i);
    const auto& p = heldout()[std::size_t(ref_i)];
    GuidanceSpec s = make_guidance(counting_recipe(L), p);
    s.schedule = sched;
    SamplerConfig sc;
    sc.seed = 900 + ref_i;
    SamplingTrace trace;
    trace.record_activations = true;
    sample(c, p, &s, sc, &trace);
    const auto tokens = c.tokens(p);
    for (int k = 0; k < sc.steps; ++k) {
      const double t = 1.0 - double(k) / sc.steps;
      ForwardRecord<float> rec;
      rec.activations = true;
      velocity(c, trace.latents[std::size_t(k)], t, tokens, std::vector<Tensor<float>>(std::size_t(L), c.y(p, t)),
               &rec);
      for (Index l = 0; l <= std::min(first, L - 1); ++l) {
        if (!bit_identical(rec.block_inputs[std::size_t(l)], trace.block_inputs[std::size_t(k)][std::size_t(l)])) {
          return {false, "block " + std::to_string(l) + " input differs at step " + std::to_string(k) +
                             " for threshold " + std::to_string(ref_i)};
        }
        ++checked;
      }
    }
  }
  return {true, "affinity worst " + fmt(worst) + " ulp over 1000 draws; " + std::to_string(checked) +
                    " unguided block inputs bit-identical"};
}

// ---------------------------------------------------------------------------
// 4. Gradient integrity

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng) { return normal_tensor<double>(rng, std::move(shape)); }

Var<double> weighted_sum(Graph<double>& g, const Var<double>& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return mean(mul(x, g.constant(random_tensor(x.shape(), rng))));
}

Outcome gradient_integrity() {
  constexpr double kEps = 1e-5;
  std::mt19937_64 rng(42);
  const auto other = random_tensor({4, 3}, rng);
  const auto row = random_tensor({3}, rng);
  const auto target = random_tensor({3, 3}, rng);
  const auto gather_index = std::make_shared<const std::vector<Index>>(std::vector<Index>{5, 0, 0, 3, 2, 1, 4, 4});
  const std::vector<std::tuple<std::string, Shape, ScalarFn>> ops = {
      {"matmul", {2, 4}, [&](auto& g, const auto& x) { return weighted_sum(g, matmul(x, g.constant(other)), 1); }},
      {"linear", {3},
       [&](auto& g, const auto& b) {
         std::mt19937_64 r(9);
         return weighted_sum(g, linear(g.constant(random_tensor({5, 4}, r)), g.constant(other), b), 3);
       }},
      {"add/sub/mul/scale", {3, 3},
       [&](auto& g, const auto& x) { return weighted_sum(g, mul(add(x, x), sub(x, scale(x, 0.3))), 4); }},
      {"add_row", {3}, [&](auto& g, const auto& r) { return weighted_sum(g, add_row(g.constant(other), r), 5); }},
      {"scale_shift_rows", {4, 3},
       [&](auto& g, const auto& x) {
         return weighted_sum(g, scale_shift_rows(x, g.constant(row), g.constant(row)), 6);
       }},
      {"modulation coefficients", {3},
       [&](auto& g, const auto& a) { return weighted_sum(g, scale_shift_rows(g.constant(other), a, a), 7); }},
      {"layer_norm", {3, 5}, [&](auto& g, const auto& x) { return weighted_sum(g, layer_norm(x), 9); }},
      {"silu", {4, 4}, [&](auto& g, const auto& x) { return weighted_sum(g, silu(x), 10); }},
      {"softmax_rows", {3, 4}, [&](auto& g, const auto& x) { return weighted_sum(g, softmax_rows(x), 11); }},
      {"attention", {5, 6}, [&](auto& g, const auto& x) { return weighted_sum(g, attention(x, x, x, 3), 16); }},
      {"concat/slice", {4, 3},
       [&](auto& g, const auto& x) {
         return weighted_sum(g, concat_cols(concat_rows<double>({slice_rows(x, 1, 2), x}),
                                            concat_rows<double>({x, slice_rows(x, 0, 2)})),
                             17);
       }},
      {"gather", {2, 3}, [&](auto& g, const auto& x) { return weighted_sum(g, gather(x, gather_index, {4, 2}), 19); }},
      {"mse", {3, 3}, [&](auto& g, const auto& x) { return mse(x, g.constant(target)); }},
  };
  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, shape, f] : ops) {
    for (int trial = 0; trial < 3; ++trial) {
      const auto r = grad_check(f, random_tensor(shape, rng), kEps);
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        worst_name = name;
      }
    }
  }

  // Full flow-matching loss of a 2-layer, d=16 model with every parameter active.
  ModelConfig mc;
  mc.d_model = 16;
  mc.n_layers = 2;
  mc.heads = 2;
  mc.time_dim = 16;
  mc.mlp_multiplier = 2;
  auto m = Dit<float>::create(mc, 7).cast<double>();
  std::mt19937_64 prng(70);
  for (auto& p : m.params)
    for (auto& v : p.tensor.data()) v = 0.3 * standard_normal(prng);
  const Encoders enc;
  const auto ex = toy::sample_dataset(3, 4)[2];
  std::mt19937_64 nrng(9);
  const auto noise = normal_tensor<double>(nrng, ex.image.shape());
  const auto x0 = ex.image.cast<double>();
  const auto tokens = enc.sequence.encode(ex.prompt);
  const auto pooled = enc.pooled.encode(ex.prompt).cast<double>();
  const auto full = grad_check_parameters(
      m.params, [&](Graph<double>& g) { return flow_matching_loss(g, m, x0, tokens, pooled, 0.37, noise); }, kEps);
  const bool pass = worst < 1e-4 && full.max_rel_error < 1e-4;
  return {pass, "ops worst " + fmt(worst) + " (" + worst_name + "); full loss " + fmt(full.max_rel_error) + " over " +
                    std::to_string(m.params.element_count()) + " parameters"};
}

// ---------------------------------------------------------------------------
// 5. Toy training

struct Accuracy {
  double count = 0.0;
  double color = 0.0;
  double joint = 0.0;
  int rejected = 0;
};

Accuracy attribute_accuracy(const PanelResult& panel) {
  Accuracy a;
  for (const auto& s : panel.samples) {
    a.count += toy::detection_matches(s.detection, s.prompt, {Attribute::count});
    a.color += toy::detection_matches(s.detection, s.prompt, {Attribute::color});
    a.joint += s.match;
    a.rejected += s.detection.rejected;
  }
  const double n = double(panel.samples.size());
  a.count /= n;
  a.color /= n;
  a.joint /= n;
  return a;
}

Outcome toy_training(ModelCache& cache) {
  auto& tm = cache.default_model();
  const auto c = conditioner(tm.model, cache.encoders());
  SamplerConfig sc;
  sc.steps = 20;
  sc.cfg_scale = 3.0;
  sc.seed = 1000;
  const auto panel = run_panel(c, heldout(), nullptr, sc, {Attribute::count, Attribute::color});
  const auto acc = attribute_accuracy(panel);
  const double ratio = tm.loss_at_check / tm.loss_initial;
  const bool pass = ratio < 0.5 && acc.count >= 0.8 && acc.color >= 0.8;
  return {pass, "loss " + fmt(tm.loss_initial) + " -> " + fmt(tm.loss_at_check) + " at step 5000 (ratio " +
                    fmt(ratio) + "); accuracy count " + fmt(acc.count) + " color " + fmt(acc.color) + " joint " +
                    fmt(acc.joint) + ", " + std::to_string(acc.rejected) + " rejected of 200; trained in " +
                    fmt(tm.seconds / 60.0, 3) + " min"};
}

// ---------------------------------------------------------------------------
// 6. Counting guidance

Outcome counting_guidance(ModelCache& cache) {
  auto& m = cache.default_model().model;
  const auto c = conditioner(m, cache.encoders());
  SamplerConfig sc;
  sc.seed = 2000;
  const std::vector<Attribute> attrs = {Attribute::count};
  const auto recipe = counting_recipe(m.config.n_layers);
  const auto plain = run_panel(c, heldout(), nullptr, sc, attrs);
  const auto guided = run_panel(c, heldout(), &recipe, sc, attrs);
  const double gain = guided.fidelity - plain.fidelity;
  const double p = paired_permutation_p(guided.match_indicators(), plain.match_indicators(), kPermutations, 6);
  return {gain >= 0.10 && p < 0.05, "count match " + fmt(plain.fidelity) + " -> " + fmt(guided.fidelity) + " (" +
                                        (gain >= 0 ? "+" : "") + fmt(100.0 * gain, 3) + " pp), paired p " + fmt(p)};
}

// ---------------------------------------------------------------------------
// 7. Attention shift

Outcome attention_shift(ModelCache& cache) {
  auto& m = cache.default_model().model;
  const auto c = conditioner(m, cache.encoders());
  const auto recipe = counting_recipe(m.config.n_layers);
  const auto prompts = heldout_first(100);
  std::vector<double> plain, guided;
  bool neutral = true;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& p = prompts[i];
    const auto grouping = prompt_grouping(p, Attribute::count, {Attribute::shape, Attribute::size});
    SamplerConfig sc;
    sc.seed = 3000 + i;
    const GuidanceSpec spec = make_guidance(recipe, p);
    SamplingTrace tu, tg;
    tu.record_attention = tg.record_attention = true;
    const auto iu = sample(c, p, nullptr, sc, &tu);
    const auto ig = sample(c, p, &spec, sc, &tg);
    plain.push_back(token_group_mass(tu, grouping)[0]);
    guided.push_back(token_group_mass(tg, grouping)[0]);
    if (i < 10) {
      neutral = neutral && bit_identical(sample(c, p, nullptr, sc), iu) && bit_identical(sample(c, p, &spec, sc), ig);
    }
  }
  double mu = 0.0, mg = 0.0;
  for (std::size_t i = 0; i < plain.size(); ++i) {
    mu += plain[i] / double(plain.size());
    mg += guided[i] / double(plain.size());
  }
  const double p = paired_permutation_p(guided, plain, kPermutations, 7);
  return {mg > mu && p < 0.05 && neutral, "target-token mass " + fmt(mu) + " -> " + fmt(mg) + ", paired p " + fmt(p) +
                                              "; recording neutral: " + (neutral ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 8. Dynamic versus constant guidance

Outcome dynamic_vs_constant(ModelCache& cache) {
  auto& m = cache.default_model().model;
  const auto c = conditioner(m, cache.encoders());
  const Index L = m.config.n_layers;
  const auto prompts = heldout_first(100);
  const std::vector<Attribute> attrs = {Attribute::count, Attribute::color};
  SamplerConfig sc;
  sc.seed = 4000;
  GuidanceRecipe recipe;
  recipe.positive = ToyPrompt::parse("detail=textured");
  recipe.negative = ToyPrompt::parse("detail=plain");

  const std::vector<double> ws = {0, 1, 2, 3, 4, 6, 8};
  std::vector<double> fid, qual;
  std::ostringstream curve;
  for (double w : ws) {
    recipe.schedule = GuidanceSchedule::constant(w, L);
    const auto r = run_panel(c, prompts, &recipe, sc, attrs);
    fid.push_back(r.fidelity);
    qual.push_back(r.quality);
    curve << " w" << w << ":" << fmt(r.fidelity, 3) << "/" << fmt(r.quality, 3);
  }
  // Non-increasing from the peak onwards, and no better at w=8 than at w=0.
  const std::size_t peak = std::size_t(std::max_element(fid.begin(), fid.end()) - fid.begin());
  bool tail_monotone = true;
  for (std::size_t k = peak + 1; k < fid.size(); ++k) tail_monotone = tail_monotone && fid[k] <= fid[k - 1];
  const bool part_a = tail_monotone && fid.back() <= fid.front();

  const double f3 = fid[3], q3 = qual[3];
  std::optional<int> winner;
  std::ostringstream steps;
  for (int i : {5, 13, 20, 30, 45}) {
    recipe.schedule = GuidanceSchedule::step(i, 3.0, L);
    const auto r = run_panel(c, prompts, &recipe, sc, attrs);
    steps << " i" << i << ":" << fmt(r.fidelity, 3) << "/" << fmt(r.quality, 3);
    if (!winner && r.fidelity >= f3 && r.quality >= q3) winner = i;
  }
  const bool part_b = winner.has_value();
  return {part_a && part_b, "constant (fidelity/quality)" + curve.str() + "; step at w=3" + steps.str() +
                                "; (a) " + (part_a ? "holds" : "fails") + ", (b) " +
                                (part_b ? "holds at i=" + std::to_string(*winner) : "fails")};
}

// ---------------------------------------------------------------------------
// 9. Retrofit

struct RetrofitResult {
  RetrofitRun run;
  bool base_untouched = false;
  double probe_initial = 0.0;
  double probe_final = 0.0;
};

RetrofitResult& retrofit(ModelCache& cache) {
  static std::optional<RetrofitResult> result;
  if (result) return *result;
  auto& base = cache.pooled_free_model().model;
  RetrofitConfig rc;
  rc.iterations = 1000;
  rc.seed = 5;
  const auto probes = make_loss_probes(cache.data(), 128, 55);
  auto initial = PooledAdapter<float>::for_model(base.config, rc.adapter_width, mix_seed(rc.seed, 1));
  RetrofitResult r;
  r.probe_initial = evaluate_distillation(base, initial, cache.encoders(), probes);
  const std::string before = serialize_model(base);
  const auto t0 = std::chrono::steady_clock::now();
  r.run = retrofit_train(base, cache.data(), cache.encoders(), rc, [&](const TrainProgress& p) {
    if ((p.step + 1) % 250 == 0) {
      std::cerr << "[retrofit] step " << p.step + 1 << " loss " << fmt(p.loss) << " (" << fmt(seconds_since(t0), 4)
                << " s)\n";
    }
  });
  r.base_untouched = serialize_model(base) == before;
  r.probe_final = evaluate_distillation(base, r.run.adapter, cache.encoders(), probes);
  save_adapter(cache.dir() / "adapter.ckpt", r.run);
  result = std::move(r);
  return *result;
}

Outcome retrofit_criterion(ModelCache& cache) {
  auto& base = cache.pooled_free_model().model;
  auto& r = retrofit(cache);
  auto& adapter = r.run.adapter;
  const auto& enc = cache.encoders();

  // Neutrality at pooled = 0.
  bool neutral = true;
  std::mt19937_64 rng(19);
  const Tensor<float> zero_pooled({base.config.d_pool});
  for (int k = 0; k < 8; ++k) {
    const auto& p = heldout()[std::size_t(k)];
    const double t = uniform01(rng);
    const auto x = normal_tensor<float>(rng, {3, 16, 16});
    Graph<float> g(false);
    const auto contrib = adapter.contribution(g, zero_pooled).value();
    neutral = neutral && std::all_of(contrib.data().begin(), contrib.data().end(), [](float v) {
                return v == 0.0f && !std::signbit(v);
              });
    const auto tokens = enc.sequence.encode(p);
    const auto retro = retrofit_forward(g, base, adapter, x, t, tokens, zero_pooled).value();
    const auto y = global_conditioning(g, base, zero_pooled, t);
    const auto plain =
        model_forward(g, base, x, t, tokens, std::vector<Var<float>>(std::size_t(base.config.n_layers), y)).value();
    neutral = neutral && bit_identical(retro, plain);
  }

  const double ratio = r.probe_final / r.probe_initial;

  // Pooled-only conditioning through the adapter.
  Conditioner c = conditioner(base, enc);
  c.adapter = &adapter;
  c.route = TextRoute::pooled_only;
  SamplerConfig sc;
  sc.seed = 5000;
  const auto panel = run_panel(c, heldout(), nullptr, sc, {Attribute::count});
  const double count_acc = panel.fidelity;

  // Guidance through the retrofitted path: w = 0 is inert, w = 3 is not.
  const auto prompts = heldout_first(20);
  int changed = 0;
  bool zero_inert = true;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    SamplerConfig s = sc;
    s.seed = 5100 + i;
    GuidanceRecipe recipe = counting_recipe(base.config.n_layers);
    const auto plain = sample(c, prompts[i], nullptr, s);
    const GuidanceSpec guided = make_guidance(recipe, prompts[i]);
    changed += !bit_identical(sample(c, prompts[i], &guided, s), plain);
    recipe.schedule = GuidanceSchedule::step(5, 0.0, base.config.n_layers);
    const GuidanceSpec inert = make_guidance(recipe, prompts[i]);
    zero_inert = zero_inert && bit_identical(sample(c, prompts[i], &inert, s), plain);
  }
  const bool pass = neutral && r.base_untouched && ratio < 0.5 && count_acc >= 0.4 && zero_inert &&
                    changed == int(prompts.size());
  return {pass, std::string("neutral ") + (neutral ? "yes" : "no") + "; base untouched " +
                    (r.base_untouched ? "yes" : "no") + "; distillation " + fmt(r.probe_initial) + " -> " +
                    fmt(r.probe_final) + " (ratio " + fmt(ratio) + "); pooled-only count accuracy " +
                    fmt(count_acc) + "; guidance changed " + std::to_string(changed) + "/" +
                    std::to_string(prompts.size()) + ", w=0 inert " + (zero_inert ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 10. Pooled ablation

Outcome pooled_ablation_trend(ModelCache& cache) {
  AblationOptions opt;
  opt.seeds = {6000};
  opt.permutations = kPermutations;
  opt.permutation_seed = 10;

  auto& dual = cache.dual_path_model().model;
  const auto report = pooled_ablation(conditioner(dual, cache.encoders()), heldout(), opt);

  auto& free_model = cache.pooled_free_model().model;
  const auto zero = pooled_ablation(conditioner(free_model, cache.encoders()), heldout(), opt);
  const bool all_zero = std::all_of(zero.rows.begin(), zero.rows.end(),
                                    [](const AblationRow& r) { return r.cosine_dist == 0.0 && r.mse == 0.0; });

  double mean_dist = 0.0;
  for (const auto& r : report.rows) mean_dist += r.cosine_dist / double(report.rows.size());
  const bool pass = report.spearman <= 0.0 && report.p_value < 0.05 && all_zero;
  return {pass, "dual-path spearman " + fmt(report.spearman) + ", p " + fmt(report.p_value) + ", mean distance " +
                    fmt(mean_dist) + "; pooled-free distances all zero: " + (all_zero ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::string cache_dir = "acceptance-cache";
  std::vector<int> only;
  app.add_option("--cache", cache_dir, "directory for trained checkpoints");
  bool report_only = false;
  app.add_option("--only", only, "run only these criteria")->check(CLI::Range(1, 10));
  app.add_flag("--report-only", report_only,
               "exit 0 when every criterion ran to completion, even if some measured FAIL");
  CLI11_PARSE(app, argc, argv);

  ModelCache cache(cache_dir);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"zero-guidance identity", [&] { return zero_guidance_identity(cache); }},
      {"schedule correctness", [] { return schedule_values(); }},
      {"affinity and locality", [&] { return affinity_and_locality(cache); }},
      {"gradient integrity", [] { return gradient_integrity(); }},
      {"toy training", [&] { return toy_training(cache); }},
      {"counting guidance", [&] { return counting_guidance(cache); }},
      {"attention shift", [&] { return attention_shift(cache); }},
      {"dynamic vs constant", [&] { return dynamic_vs_constant(cache); }},
      {"retrofit", [&] { return retrofit_criterion(cache); }},
      {"pooled ablation", [&] { return pooled_ablation_trend(cache); }},
  };

  // Train whatever the selected criteria need before timing them.
  const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}
                                              : std::set<int>(only.begin(), only.end());
  int failures = 0;
  int errors = 0;
  for (int k : selected) {
    const auto& [name, run] = criteria[std::size_t(k - 1)];
    if (k == 1 || (k >= 3 && k != 4)) cache.default_model();
    if (k == 9 || k == 10) cache.pooled_free_model();
    if (k == 10) cache.dual_path_model();
    if (k == 9) retrofit(cache);
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
      ++errors;
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << k << " (" << name << "): " << o.detail << " ["
              << fmt(seconds_since(t0), 3) << " s]" << std::endl;
  }
  std::cout << (selected.size() - std::size_t(failures)) << "/" << selected.size() << " criteria passed" << std::endl;
  if (report_only) return errors == 0 ? 0 : 1;
  return failures == 0 ? 0 : 1;
}
