#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "modguide/sampler.hpp"

namespace modguide {

// ---------------------------------------------------------------------------
// Image distance

struct ImageDistance {
  double cosine = 0.0;  ///< 1 - cosine similarity of the flattened images, in [0, 2]
  double mse = 0.0;
};

/// Two all-zero images are at cosine distance 0; one zero image against a
/// nonzero one is at distance 1.
ImageDistance image_distance(const Tensor<float>& a, const Tensor<float>& b);

// ---------------------------------------------------------------------------
// Statistics

/// Ranks starting at 1, ties sharing their average rank.
std::vector<double> average_ranks(const std::vector<double>& v);
/// Spearman correlation with tie correction (Pearson on average ranks). Zero
/// when either side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

enum class Tail { less, greater };

/// Permutation p-value for the Spearman correlation, shuffling y.
/// `less` tests for a negative association.
double spearman_permutation_p(const std::vector<double>& x, const std::vector<double>& y, Tail tail, int permutations,
                              std::uint64_t seed);

/// Sign-flip permutation test on paired differences a_i - b_i; one-sided for
/// mean(a - b) > 0.
double paired_permutation_p(const std::vector<double>& a, const std::vector<double>& b, int permutations,
                            std::uint64_t seed);

// ---------------------------------------------------------------------------
// Pooled-embedding ablation

struct AblationRow {
  int prompt_id = 0;
  int clause_count = 0;
  std::uint64_t seed = 0;
  double cosine_dist = 0.0;
  double mse = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  /// Spearman correlation between clause count and the per-prompt mean cosine distance.
  double spearman = 0.0;
  /// One-sided permutation p-value for a negative correlation.
  double p_value = 1.0;
};

struct AblationOptions {
  SamplerConfig sampler;
  std::vector<std::uint64_t> seeds{0};
  int permutations = 10000;
  std::uint64_t permutation_seed = 0;
};

/// Samples every prompt with and without its pooled embedding (same seeds) and
/// relates the distance to the clause count. Refuses an untrained model.
AblationReport pooled_ablation(const Conditioner& c, const std::vector<toy::ToyPrompt>& prompts,
                               const AblationOptions& options);

/// True while every modulation head is still exactly zero, as after creation.
bool looks_untrained(const Dit<float>& model);

// ---------------------------------------------------------------------------
// Attention mass

struct TokenGroup {
  std::string name;
  std::vector<int> tokens;
};

/// Partition of the text-token positions into named groups.
struct TokenGrouping {
  std::vector<TokenGroup> groups;

  /// Throws ConfigError on overlapping groups, out-of-range tokens or uncovered tokens.
  void validate(Index text_tokens) const;
};

/// Four groups for a prompt: "target" (clauses of the target attribute),
/// "related" (clauses of the related attributes), "filler_null" (filler
/// clauses and null positions) and "other".
TokenGrouping prompt_grouping(const toy::ToyPrompt& prompt, toy::Attribute target,
                              const std::vector<toy::Attribute>& related, Index text_tokens = toy::kMaxClauses);

/// Restricts the average to one layer and/or one sampler step.
struct MassFilter {
  std::optional<std::size_t> layer;
  std::optional<std::size_t> step;
};

/// Share of image-to-text attention landing in each group, averaged over the
/// selected steps, layers and heads. Shares follow the grouping's order.
std::vector<double> token_group_mass(const SamplingTrace& trace, const TokenGrouping& grouping,
                                     const MassFilter& filter = {});

/// Per-layer share of image-to-text attention on one text token, averaged over
/// steps and heads.
std::vector<double> layer_token_mass(const SamplingTrace& trace, int token);

struct LayerProfile {
  std::vector<double> mean_mass;  ///< one entry per layer
  int used = 0;
  int skipped = 0;  ///< prompts without the feature clause
};

/// Mean per-layer attention share on the feature attribute's token across prompts.
LayerProfile layer_attention_profile(const Conditioner& c, const std::vector<toy::ToyPrompt>& prompts,
                                     toy::Attribute feature, const SamplerConfig& sampler);

// ---------------------------------------------------------------------------
// CSV output (floats with 6 significant digits)

struct GroupMassRow {
  std::string run_id;
  std::string group;
  double share = 0.0;
};

std::string format_number(double v);
void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows);
void write_group_mass_csv(std::ostream& os, const std::vector<GroupMassRow>& rows);
void write_layer_profile_csv(std::ostream& os, const std::vector<double>& mean_mass);

}  // namespace modguide
