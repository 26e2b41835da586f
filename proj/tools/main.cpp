#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "modguide/analysis.hpp"
#include "modguide/checkpoint.hpp"
#include "modguide/experiment.hpp"
#include "modguide/random.hpp"
#include "modguide/retrofit.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace modguide;
using modguide::cli::json;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kCheckpoint = 3, kNumeric = 4 };

struct Run {
  json config;       // resolved
  json user;         // as given
  fs::path out;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Config accessors

ModelConfig model_config(const json& m) {
  ModelConfig c;
  c.d_model = m.at("d_model");
  c.n_layers = m.at("n_layers");
  c.heads = m.at("heads");
  c.d_pool = m.at("d_pool");
  c.d_token = m.at("d_token");
  c.text_tokens = m.at("text_tokens");
  c.resolution = m.at("resolution");
  c.channels = m.at("channels");
  c.patch = m.at("patch");
  c.time_dim = m.at("time_dim");
  c.mlp_multiplier = m.at("mlp_multiplier");
  c.pooled_path = m.at("pooled_path");
  c.validate();
  return c;
}

std::vector<toy::Example> dataset(const json& d) {
  const long size = d.at("size");
  if (size < 1) throw ConfigError("data.size must be >= 1");
  toy::DatasetOptions opt;
  opt.filler_probability = d.at("filler_probability");
  return toy::sample_dataset(d.at("seed").get<std::uint64_t>(), std::size_t(size), opt);
}

SamplerConfig sampler_config(const Run& r) {
  SamplerConfig s;
  s.steps = r.config["sample"]["steps"];
  s.cfg_scale = r.config["sample"]["cfg_scale"];
  s.seed = r.seed;
  return s;
}

toy::ToyPrompt prompt_or_empty(const std::string& text) { return toy::ToyPrompt::parse(text); }

std::vector<toy::Attribute> attributes(const json& list) {
  std::vector<toy::Attribute> out;
  for (const auto& a : list) out.push_back(toy::parse_attribute(a.get<std::string>()));
  return out;
}

std::vector<toy::ToyPrompt> prompt_panel(const json& p) {
  std::vector<toy::ToyPrompt> out;
  for (const auto& s : p.at("list")) out.push_back(toy::ToyPrompt::parse(s.get<std::string>()));
  if (!out.empty()) return out;
  const long n = p.at("count");
  if (n < 1) throw ConfigError("prompts.count must be >= 1 when prompts.list is empty");
  return heldout_prompts(p.at("heldout_seed").get<std::uint64_t>(), std::size_t(n));
}

GuidanceSchedule schedule(const json& g, Index layers) {
  GuidanceSchedule s;
  s.kind = parse_schedule_kind(g.at("kind"));
  s.index_mode = parse_index_mode(g.at("index_mode"));
  s.layers = layers;
  s.w = g.at("w");
  s.w1 = g.at("w1");
  s.w2 = g.at("w2");
  s.i1 = s.kind == ScheduleKind::step ? g.at("i").get<int>() : g.at("i1").get<int>();
  s.i2 = g.at("i2");
  s.i3 = g.at("i3");
  s.sigma = g.at("sigma");
  s.validate();
  return s;
}

std::optional<GuidanceRecipe> recipe(const json& g, Index layers) {
  if (!g.at("enabled").get<bool>()) return std::nullopt;
  GuidanceRecipe r;
  r.schedule = schedule(g, layers);
  r.positive = prompt_or_empty(g.at("positive"));
  r.negative = prompt_or_empty(g.at("negative"));
  const std::string from = g.at("positive_from");
  if (!from.empty()) r.positive_from = toy::parse_attribute(from);
  return r;
}

// ---------------------------------------------------------------------------
// Models and conditioners

struct LoadedModel {
  Dit<float> model;
  std::optional<RetrofitRun> retrofit;
};

LoadedModel load_checkpoint(const Run& r) {
  const std::string path = r.config["io"]["checkpoint"];
  if (path.empty()) throw ConfigError("io.checkpoint is required for this command");
  LoadedModel lm{load_model(path), std::nullopt};
  const std::string want = r.config["io"]["checkpoint_hash"];
  if (!want.empty() && want != model_hash(lm.model)) {
    throw CheckpointError("checkpoint '" + path + "' has hash " + model_hash(lm.model) + ", config expects " + want);
  }
  if (r.user.contains("model") && !(model_config(r.config["model"]) == lm.model.config)) {
    throw CheckpointError("the config's model section does not describe checkpoint '" + path + "'");
  }
  const std::string adapter = r.config["io"]["adapter"];
  if (!adapter.empty()) lm.retrofit = load_adapter(adapter, lm.model);
  return lm;
}

Conditioner conditioner(const Run& r, LoadedModel& lm, const Encoders& enc) {
  Conditioner c;
  c.model = &lm.model;
  c.encoders = &enc;
  const std::string route = r.config["sample"]["route"];
  if (route == "full") {
    c.route = TextRoute::full;
  } else if (route == "pooled_only") {
    c.route = TextRoute::pooled_only;
  } else {
    throw ConfigError("sample.route must be 'full' or 'pooled_only', got '" + route + "'");
  }
  if (lm.retrofit) c.adapter = &lm.retrofit->adapter;
  return c;
}

Encoders encoders(const Run& r) { return Encoders(r.config["data"]["encoder_seed"].get<std::uint64_t>()); }

// ---------------------------------------------------------------------------
// Output helpers

void prepare_out(const fs::path& out, bool force) {
  if (out.empty()) throw ConfigError("--out is required");
  if (fs::exists(out)) {
    if (!force) throw ConfigError("output directory '" + out.string() + "' exists; pass --force to overwrite");
    fs::remove_all(out);
  }
  fs::create_directories(out);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  os << text;
  if (!os) throw ConfigError("cannot write '" + p.string() + "'");
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void write_ppm(const fs::path& p, const Tensor<float>& image) {
  const Index h = image.dim(1);
  const Index w = image.dim(2);
  std::string bytes = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      for (Index ch = 0; ch < 3; ++ch) {
        const double v = (double(image[(ch * h + y) * w + x]) + 1.0) * 0.5;
        bytes += static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  write_text(p, bytes);
}

/// Append-only metric rows, written out at the end of a command.
struct MetricsLog {
  std::ostringstream rows;
  MetricsLog() { rows << "step,metric,value\n"; }
  void add(long step, const std::string& metric, double value) {
    rows << step << ',' << metric << ',' << format_number(value) << '\n';
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Commands

void cmd_train(const Run& r) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto mc = model_config(r.config["model"]);
  const auto& tj = r.config["train"];
  TrainConfig tc;
  tc.steps = tj["steps"];
  tc.batch = tj["batch"];
  tc.lr = tj["lr"];
  tc.warmup_steps = tj["warmup_steps"];
  tc.cosine_decay = tj["cosine_decay"];
  tc.grad_clip = tj["grad_clip"];
  tc.uncond_prob = tj["uncond_prob"];
  tc.pooled_dropout = tj["pooled_dropout"];
  tc.seed = r.seed;
  const long log_every = std::max<long>(1, tj["log_every"].get<long>());

  const auto data = dataset(r.config["data"]);
  const Encoders enc = encoders(r);
  auto model = Dit<float>::create(mc, r.seed);
  const auto probes = make_loss_probes(data, std::size_t(std::max<long>(1, tj["eval_probes"].get<long>())),
                                       mix_seed(r.seed, 99));
  MetricsLog log;
  log.add(0, "eval_loss", evaluate_loss(model, enc, probes));
  train_model(model, data, enc, tc, [&](const TrainProgress& p) {
    log.add(p.step + 1, "loss", p.loss);
    log.add(p.step + 1, "grad_norm", p.grad_norm);
    if ((p.step + 1) % log_every == 0) {
      std::cerr << "step " << p.step + 1 << " loss " << format_number(p.loss) << " (" << format_number(seconds_since(t0))
                << " s)\n";
    }
  });
  log.add(tc.steps, "eval_loss", evaluate_loss(model, enc, probes));
  save_model(r.out / "model.ckpt", model);
  write_text(r.out / "metrics.csv", log.rows.str());
  std::cout << "wrote " << (r.out / "model.ckpt").string() << " (hash " << model_hash(model) << ")\n";
}

void write_oracle_csv(const fs::path& p, const PanelResult& panel) {
  std::ostringstream os;
  os << "index,seed,prompt,rejected,reason,count,color,detail,match,energy\n";
  for (std::size_t i = 0; i < panel.samples.size(); ++i) {
    const auto& s = panel.samples[i];
    const auto& d = s.detection;
    os << i << ',' << s.seed << ',' << csv_quote(s.prompt.canonical()) << ',' << int(d.rejected) << ','
       << csv_quote(d.reason) << ',' << (d.rejected ? "" : std::to_string(d.count)) << ','
       << (d.rejected ? "" : toy::value_name(toy::Attribute::color, int(d.color))) << ','
       << (d.rejected ? "" : toy::value_name(toy::Attribute::detail, int(d.detail))) << ',' << int(s.match) << ','
       << format_number(s.energy) << '\n';
  }
  os << "summary,,,,,,,," << format_number(panel.fidelity) << ',' << format_number(panel.quality) << '\n';
  write_text(p, os.str());
}

void cmd_generate(const Run& r) {
  auto lm = load_checkpoint(r);
  const Encoders enc = encoders(r);
  const Conditioner c = conditioner(r, lm, enc);
  const auto prompts = prompt_panel(r.config["prompts"]);
  const auto rec = recipe(r.config["guidance"], lm.model.config.n_layers);
  const auto panel = run_panel(c, prompts, rec ? &*rec : nullptr, sampler_config(r),
                               attributes(r.config["evaluate"]["attributes"]));
  if (r.config["io"]["save_images"].get<bool>()) {
    fs::create_directories(r.out / "images");
    for (std::size_t i = 0; i < panel.samples.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%04zu.ppm", i);
      write_ppm(r.out / "images" / name, panel.samples[i].image);
    }
  }
  write_oracle_csv(r.out / "oracle.csv", panel);
  std::cout << "match rate " << format_number(panel.fidelity) << " over " << panel.samples.size()
            << " samples, mean detail energy " << format_number(panel.quality) << "\n";
}

void cmd_sweep(const Run& r) {
  auto lm = load_checkpoint(r);
  const Encoders enc = encoders(r);
  const Conditioner c = conditioner(r, lm, enc);
  const auto prompts = prompt_panel(r.config["prompts"]);
  const auto attrs = attributes(r.config["evaluate"]["attributes"]);
  const auto& sw = r.config["sweep"];
  const std::string axis = sw["axis"];
  if (sw["values"].empty()) throw ConfigError("sweep.values must not be empty");
  if (axis != "w" && axis != "i" && axis != "cfg") throw ConfigError("sweep.axis must be w, i or cfg");
  const Index L = lm.model.config.n_layers;

  std::ostringstream os;
  os << "axis,value,kind,fidelity,quality,samples\n";
  auto emit = [&](const std::string& value, const std::string& kind, const PanelResult& p) {
    os << axis << ',' << value << ',' << kind << ',' << format_number(p.fidelity) << ',' << format_number(p.quality)
       << ',' << p.samples.size() << '\n';
    std::cerr << axis << '=' << value << ' ' << kind << " fidelity " << format_number(p.fidelity) << " quality "
              << format_number(p.quality) << '\n';
  };
  const SamplerConfig base = sampler_config(r);
  emit("baseline", "none", run_panel(c, prompts, nullptr, base, attrs));

  json g = r.config["guidance"];
  g["enabled"] = true;
  for (const auto& v : sw["values"]) {
    if (!v.is_number()) throw ConfigError("sweep.values must be numbers");
    const std::string vs = format_number(v.get<double>());
    if (axis == "cfg") {
      SamplerConfig sc = base;
      sc.cfg_scale = v.get<double>();
      const auto rec = recipe(r.config["guidance"], L);
      emit(vs, rec ? schedule_kind_name(rec->schedule.kind) : "none",
           run_panel(c, prompts, rec ? &*rec : nullptr, sc, attrs));
    } else if (axis == "i") {
      if (!v.is_number_integer()) throw ConfigError("sweep over i needs integer values");
      json gi = g;
      gi["kind"] = "step";
      gi["i"] = v;
      const auto rec = recipe(gi, L);
      emit(vs, "step", run_panel(c, prompts, &*rec, base, attrs));
    } else {
      for (const auto& kind : sw["kinds"]) {
        json gw = g;
        gw["kind"] = kind;
        gw["w"] = v;
        if (kind == "two_level") {
          gw["w1"] = v;
        }
        const auto rec = recipe(gw, L);
        emit(vs, kind.get<std::string>(), run_panel(c, prompts, &*rec, base, attrs));
      }
    }
  }
  write_text(r.out / "sweep.csv", os.str());
}

void cmd_retrofit(const Run& r) {
  auto lm = load_checkpoint(r);
  if (lm.retrofit) throw ConfigError("io.adapter must be empty when training a new adapter");
  const auto t0 = std::chrono::steady_clock::now();
  const auto& rj = r.config["retrofit"];
  RetrofitConfig rc;
  rc.iterations = rj["iterations"];
  rc.batch = rj["batch"];
  rc.lr = rj["lr"];
  rc.adapter_width = rj["adapter_width"];
  rc.grad_clip = rj["grad_clip"];
  rc.seed = r.seed;
  const auto data = dataset(r.config["data"]);
  const Encoders enc = encoders(r);
  MetricsLog log;
  const auto run = retrofit_train(lm.model, data, enc, rc, [&](const TrainProgress& p) {
    log.add(p.step + 1, "distill_loss", p.loss);
    if ((p.step + 1) % 50 == 0) {
      std::cerr << "step " << p.step + 1 << " distill loss " << format_number(p.loss) << " ("
                << format_number(seconds_since(t0)) << " s)\n";
    }
  });
  save_adapter(r.out / "adapter.ckpt", run);
  write_text(r.out / "metrics.csv", log.rows.str());
  std::cout << "wrote " << (r.out / "adapter.ckpt").string() << " for base " << run.base_hash << "\n";
}

void cmd_ablate(const Run& r) {
  auto lm = load_checkpoint(r);
  const Encoders enc = encoders(r);
  const Conditioner c = conditioner(r, lm, enc);
  AblationOptions opt;
  opt.sampler = sampler_config(r);
  opt.seeds.clear();
  for (const auto& s : r.config["analysis"]["seeds"]) opt.seeds.push_back(r.seed + s.get<std::uint64_t>());
  opt.permutations = r.config["analysis"]["permutations"];
  opt.permutation_seed = mix_seed(r.seed, 7);
  const auto report = pooled_ablation(c, prompt_panel(r.config["prompts"]), opt);
  std::ofstream os(r.out / "ablation.csv");
  write_ablation_csv(os, report.rows);
  write_text(r.out / "summary.csv", "spearman,p_value\n" + format_number(report.spearman) + "," +
                                        format_number(report.p_value) + "\n");
  std::cout << "spearman " << format_number(report.spearman) << " p " << format_number(report.p_value) << "\n";
}

void cmd_attn(const Run& r) {
  auto lm = load_checkpoint(r);
  const Encoders enc = encoders(r);
  const Conditioner c = conditioner(r, lm, enc);
  const auto prompts = prompt_panel(r.config["prompts"]);
  const auto& aj = r.config["analysis"];
  const auto target = toy::parse_attribute(aj["target"]);
  const auto related = attributes(aj["related"]);
  const auto rec = recipe(r.config["guidance"], lm.model.config.n_layers);
  const SamplerConfig base = sampler_config(r);

  std::vector<GroupMassRow> rows;
  std::vector<double> unguided_target, guided_target;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (!prompts[i].position_of(target)) continue;
    const auto grouping = prompt_grouping(prompts[i], target, related, lm.model.config.text_tokens);
    SamplerConfig sc = base;
    sc.seed = base.seed + i;
    auto record = [&](const GuidanceSpec* spec, const std::string& run_id) {
      SamplingTrace trace;
      trace.record_attention = true;
      sample(c, prompts[i], spec, sc, &trace);
      const auto shares = token_group_mass(trace, grouping);
      for (std::size_t g = 0; g < shares.size(); ++g) rows.push_back({run_id, grouping.groups[g].name, shares[g]});
      return shares[0];
    };
    unguided_target.push_back(record(nullptr, "p" + std::to_string(i) + "-unguided"));
    if (rec) {
      const auto spec = make_guidance(*rec, prompts[i]);
      guided_target.push_back(record(&spec, "p" + std::to_string(i) + "-guided"));
    }
  }
  std::ofstream gm(r.out / "group_mass.csv");
  write_group_mass_csv(gm, rows);

  const auto profile = layer_attention_profile(c, prompts, toy::parse_attribute(aj["feature"]), base);
  std::ofstream lp(r.out / "layer_profile.csv");
  write_layer_profile_csv(lp, profile.mean_mass);
  if (profile.skipped) std::cerr << profile.skipped << " prompts lack the feature clause and were skipped\n";

  std::ostringstream summary;
  summary << "runs,unguided_target_share,guided_target_share,p_value\n";
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / double(v.size());
  };
  summary << unguided_target.size() << ',' << format_number(mean(unguided_target)) << ',';
  if (rec && guided_target.size() >= 2) {
    const double p = paired_permutation_p(guided_target, unguided_target, aj["permutations"], mix_seed(r.seed, 8));
    summary << format_number(mean(guided_target)) << ',' << format_number(p) << '\n';
  } else {
    summary << ",\n";
  }
  write_text(r.out / "summary.csv", summary.str());
  std::cout << summary.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modulation-guidance toy laboratory"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;

  struct Command {
    const char* name;
    const char* help;
    void (*fn)(const Run&);
  };
  const Command commands[] = {
      {"train", "train the toy diffusion transformer", cmd_train},
      {"generate", "sample images and score them with the oracle detector", cmd_generate},
      {"sweep", "fidelity/quality trade-off over a guidance or cfg grid", cmd_sweep},
      {"retrofit", "distill a pooled-embedding adapter into a pooled-free model", cmd_retrofit},
      {"ablate", "pooled-embedding ablation against prompt length", cmd_ablate},
      {"attn", "attention mass per token group and per layer", cmd_attn},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--seed", seed, "override the config's seed");
    sub->add_option("--out", out, "output directory")->required();
    sub->add_flag("--force", force, "replace an existing output directory");
    subs.emplace_back(sub, &c);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    Run run;
    run.user = config_path.empty() ? json::object() : cli::read_config_file(config_path);
    run.config = cli::resolve_config(run.user);
    if (seed) run.config["seed"] = *seed;
    run.seed = run.config["seed"].get<std::uint64_t>();
    run.out = out;
    prepare_out(run.out, force);
    write_text(run.out / "config.json", run.config.dump(2) + "\n");
    for (const auto& [sub, cmd] : subs) {
      if (sub->parsed()) cmd->fn(run);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const VocabularyError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const RangeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
