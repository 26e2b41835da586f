#include "modguide/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "modguide/random.hpp"

namespace modguide {

ImageDistance image_distance(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("image_distance: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0, sq = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double x = a[i];
    const double y = b[i];
    dot += x * y;
    na += x * x;
    nb += y * y;
    sq += (x - y) * (x - y);
  }
  ImageDistance d;
  d.mse = sq / double(a.size());
  if (na == 0.0 && nb == 0.0) {
    d.cosine = 0.0;
  } else if (na == 0.0 || nb == 0.0) {
    d.cosine = 1.0;
  } else {
    d.cosine = std::clamp(1.0 - dot / std::sqrt(na * nb), 0.0, 2.0);
  }
  return d;
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * double(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

namespace {

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = double(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

void check_pairs(const std::vector<double>& x, const std::vector<double>& y, const char* what) {
  if (x.size() != y.size()) throw DimensionError(std::string(what) + ": samples differ in length");
  if (x.size() < 2) throw ConfigError(std::string(what) + ": need at least two samples");
}

/// Unbiased shuffle independent of the standard library's distributions.
template <typename T>
void shuffle_portable(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(toy::uniform_index(rng, int(i)));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  check_pairs(x, y, "spearman");
  return pearson(average_ranks(x), average_ranks(y));
}

double spearman_permutation_p(const std::vector<double>& x, const std::vector<double>& y, Tail tail, int permutations,
                              std::uint64_t seed) {
  check_pairs(x, y, "spearman_permutation_p");
  if (permutations < 1) throw ConfigError("permutation count must be >= 1");
  const auto rx = average_ranks(x);
  auto ry = average_ranks(y);
  const double observed = pearson(rx, ry);
  std::mt19937_64 rng(seed);
  int extreme = 0;
  for (int k = 0; k < permutations; ++k) {
    shuffle_portable(ry, rng);
    const double r = pearson(rx, ry);
    if (tail == Tail::less ? r <= observed : r >= observed) ++extreme;
  }
  return double(extreme + 1) / double(permutations + 1);
}

double paired_permutation_p(const std::vector<double>& a, const std::vector<double>& b, int permutations,
                            std::uint64_t seed) {
  check_pairs(a, b, "paired_permutation_p");
  if (permutations < 1) throw ConfigError("permutation count must be >= 1");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double observed = std::accumulate(d.begin(), d.end(), 0.0);
  std::mt19937_64 rng(seed);
  int extreme = 0;
  for (int k = 0; k < permutations; ++k) {
    double s = 0.0;
    for (double v : d) s += (rng() & 1) ? v : -v;
    // Tolerate summation-order noise so that ties with the observed sum count.
    if (s >= observed - 1e-12 * (1.0 + std::abs(observed))) ++extreme;
  }
  return double(extreme + 1) / double(permutations + 1);
}

bool looks_untrained(const Dit<float>& model) {
  for (const auto& p : model.params) {
    if (p.name.find(".mod_") == std::string::npos) continue;
    for (float v : p.tensor.data())
      if (v != 0.0f) return false;
  }
  return true;
}

AblationReport pooled_ablation(const Conditioner& c, const std::vector<toy::ToyPrompt>& prompts,
                               const AblationOptions& options) {
  if (looks_untrained(*c.model)) {
    throw ConfigError("pooled ablation needs a trained model; every modulation head is still at its zero init");
  }
  if (prompts.empty() || options.seeds.empty()) throw ConfigError("pooled ablation needs prompts and seeds");
  Conditioner with = c;
  with.zero_pooled = false;
  Conditioner without = c;
  without.zero_pooled = true;

  AblationReport report;
  std::vector<double> counts;
  std::vector<double> means;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    double total = 0.0;
    for (std::uint64_t seed : options.seeds) {
      SamplerConfig sc = options.sampler;
      sc.seed = seed;
      const auto a = sample(with, prompts[i], nullptr, sc);
      const auto b = sample(without, prompts[i], nullptr, sc);
      const auto d = image_distance(a, b);
      report.rows.push_back({int(i), int(prompts[i].size()), seed, d.cosine, d.mse});
      total += d.cosine;
    }
    counts.push_back(double(prompts[i].size()));
    means.push_back(total / double(options.seeds.size()));
  }
  if (prompts.size() >= 2) {
    report.spearman = spearman(counts, means);
    report.p_value = spearman_permutation_p(counts, means, Tail::less, options.permutations, options.permutation_seed);
  }
  return report;
}

// ---------------------------------------------------------------------------

void TokenGrouping::validate(Index text_tokens) const {
  std::set<int> seen;
  for (const auto& g : groups) {
    for (int t : g.tokens) {
      if (t < 0 || t >= text_tokens) {
        throw ConfigError("token " + std::to_string(t) + " of group '" + g.name + "' is outside [0, " +
                          std::to_string(text_tokens) + ")");
      }
      if (!seen.insert(t).second) throw ConfigError("token " + std::to_string(t) + " belongs to two groups");
    }
  }
  if (Index(seen.size()) != text_tokens) {
    throw ConfigError("grouping covers " + std::to_string(seen.size()) + " of " + std::to_string(text_tokens) +
                      " text tokens");
  }
}

TokenGrouping prompt_grouping(const toy::ToyPrompt& prompt, toy::Attribute target,
                              const std::vector<toy::Attribute>& related, Index text_tokens) {
  TokenGrouping out{{{"target", {}}, {"related", {}}, {"filler_null", {}}, {"other", {}}}};
  const auto& cl = prompt.clauses();
  for (int i = 0; i < int(text_tokens); ++i) {
    std::size_t g = 3;
    if (i >= int(cl.size()) || cl[std::size_t(i)].attribute == toy::Attribute::filler) {
      g = 2;
    } else if (cl[std::size_t(i)].attribute == target) {
      g = 0;
    } else if (std::find(related.begin(), related.end(), cl[std::size_t(i)].attribute) != related.end()) {
      g = 1;
    }
    out.groups[g].tokens.push_back(i);
  }
  return out;
}

namespace {

template <typename Fn>
void for_each_block(const SamplingTrace& trace, const MassFilter& filter, Fn&& fn) {
  for (std::size_t s = 0; s < trace.image_to_text.size(); ++s) {
    if (filter.step && *filter.step != s) continue;
    for (std::size_t l = 0; l < trace.image_to_text[s].size(); ++l) {
      if (filter.layer && *filter.layer != l) continue;
      for (const auto& w : trace.image_to_text[s][l]) fn(l, w);
    }
  }
}

}  // namespace

std::vector<double> token_group_mass(const SamplingTrace& trace, const TokenGrouping& grouping,
                                     const MassFilter& filter) {
  if (trace.image_to_text.empty()) throw ConfigError("attention trace is empty; enable record_attention");
  const Index n_text = trace.image_to_text.front().front().front().cols();
  grouping.validate(n_text);
  std::vector<double> shares(grouping.groups.size(), 0.0);
  int blocks = 0;
  for_each_block(trace, filter, [&](std::size_t, const Matrix<float>& w) {
    const Eigen::Matrix<double, 1, Eigen::Dynamic> per_token = w.cast<double>().colwise().sum();
    const double total = per_token.sum();
    if (total <= 0.0) return;
    for (std::size_t g = 0; g < grouping.groups.size(); ++g) {
      double m = 0.0;
      for (int t : grouping.groups[g].tokens) m += per_token[t];
      shares[g] += m / total;
    }
    ++blocks;
  });
  if (blocks == 0) throw ConfigError("attention filter selects no recorded blocks");
  for (double& s : shares) s /= blocks;
  return shares;
}

std::vector<double> layer_token_mass(const SamplingTrace& trace, int token) {
  if (trace.image_to_text.empty()) throw ConfigError("attention trace is empty; enable record_attention");
  const std::size_t layers = trace.image_to_text.front().size();
  const Index n_text = trace.image_to_text.front().front().front().cols();
  if (token < 0 || token >= n_text) throw ConfigError("token " + std::to_string(token) + " outside the text stream");
  std::vector<double> mass(layers, 0.0);
  std::vector<int> blocks(layers, 0);
  for_each_block(trace, {}, [&](std::size_t l, const Matrix<float>& w) {
    const double total = w.cast<double>().sum();
    if (total <= 0.0) return;
    mass[l] += w.col(token).cast<double>().sum() / total;
    ++blocks[l];
  });
  for (std::size_t l = 0; l < layers; ++l)
    if (blocks[l]) mass[l] /= blocks[l];
  return mass;
}

LayerProfile layer_attention_profile(const Conditioner& c, const std::vector<toy::ToyPrompt>& prompts,
                                     toy::Attribute feature, const SamplerConfig& sampler) {
  LayerProfile out;
  out.mean_mass.assign(std::size_t(c.model->config.n_layers), 0.0);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto pos = prompts[i].position_of(feature);
    if (!pos) {
      ++out.skipped;
      continue;
    }
    SamplingTrace trace;
    trace.record_attention = true;
    SamplerConfig sc = sampler;
    sc.seed = mix_seed(sampler.seed, i);
    sample(c, prompts[i], nullptr, sc, &trace);
    const auto m = layer_token_mass(trace, int(*pos));
    for (std::size_t l = 0; l < m.size(); ++l) out.mean_mass[l] += m[l];
    ++out.used;
  }
  if (out.used)
    for (double& v : out.mean_mass) v /= out.used;
  return out;
}

// ---------------------------------------------------------------------------

std::string format_number(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "prompt_id,clause_count,seed,cosine_dist,mse\n";
  for (const auto& r : rows) {
    os << r.prompt_id << ',' << r.clause_count << ',' << r.seed << ',' << format_number(r.cosine_dist) << ','
       << format_number(r.mse) << '\n';
  }
}

void write_group_mass_csv(std::ostream& os, const std::vector<GroupMassRow>& rows) {
  os << "run_id,group,share\n";
  for (const auto& r : rows) os << r.run_id << ',' << r.group << ',' << format_number(r.share) << '\n';
}

void write_layer_profile_csv(std::ostream& os, const std::vector<double>& mean_mass) {
  os << "layer,mean_mass\n";
  for (std::size_t l = 0; l < mean_mass.size(); ++l) os << l << ',' << format_number(mean_mass[l]) << '\n';
}

}  // namespace modguide
