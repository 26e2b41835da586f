#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "modguide/adapter.hpp"
#include "modguide/dit.hpp"
#include "modguide/train.hpp"

namespace modguide {

// ---------------------------------------------------------------------------
// Per-layer schedules

enum class ScheduleKind { constant, step, window, bumps, two_level };
enum class IndexMode { absolute, fractional };

/// Depth of the stack the reference layer indices were chosen for.
inline constexpr int kReferenceLayers = 57;
inline constexpr double kDefaultBumpSigma = 5.0;

ScheduleKind parse_schedule_kind(const std::string& name);
std::string schedule_kind_name(ScheduleKind k);
IndexMode parse_index_mode(const std::string& name);
std::string index_mode_name(IndexMode m);

struct GuidanceSchedule {
  ScheduleKind kind = ScheduleKind::constant;
  double w = 0.0;   ///< constant, step, window, bumps
  double w1 = 0.0;  ///< two_level, first plateau
  double w2 = 0.0;  ///< two_level, second plateau
  int i1 = 0;       ///< step threshold, or first boundary / center
  int i2 = 0;
  int i3 = 0;
  double sigma = kDefaultBumpSigma;
  Index layers = 8;
  IndexMode index_mode = IndexMode::fractional;

  static GuidanceSchedule constant(double w, Index layers);
  static GuidanceSchedule step(int i, double w, Index layers, IndexMode mode = IndexMode::fractional);
  static GuidanceSchedule window(int i1, int i2, double w, Index layers, IndexMode mode = IndexMode::fractional);
  static GuidanceSchedule bumps(int i1, int i2, double sigma, double w, Index layers,
                                IndexMode mode = IndexMode::fractional);
  static GuidanceSchedule two_level(int i1, int i2, int i3, double w1, double w2, Index layers,
                                    IndexMode mode = IndexMode::fractional);

  /// Largest index a schedule parameter may take in the current mode.
  int reference_layers() const { return index_mode == IndexMode::fractional ? kReferenceLayers : int(layers); }
  /// A reference index mapped onto this stack (identity in absolute mode).
  int map_index(int i) const;

  void validate() const;
  double eval(Index l) const;
  std::vector<double> evaluate_all() const;
  bool all_zero() const;
};

// ---------------------------------------------------------------------------
// Conditioning sources

/// Which text routes feed the conditional branch.
enum class TextRoute {
  full,         ///< sequence tokens, and the pooled path when the model has one
  pooled_only,  ///< all-null sequence; the prompt enters only through the pooled route
};

/// Turns prompts into the model's two conditioning inputs. The pooled route is
/// the model's own pooled input, or a retrofit adapter on a pooled-free model.
struct Conditioner {
  Dit<float>* model = nullptr;
  const Encoders* encoders = nullptr;
  PooledAdapter<float>* adapter = nullptr;
  TextRoute route = TextRoute::full;
  /// Replace every pooled embedding by zero (the "without pooled" ablation arm).
  bool zero_pooled = false;

  toy::TokenEmbeddings tokens(const toy::ToyPrompt& p) const;
  Tensor<float> pooled(const toy::ToyPrompt& p) const;
  /// y(p, t) as a [1 x d_model] tensor.
  Tensor<float> y(const toy::ToyPrompt& p, double t) const;
};

// ---------------------------------------------------------------------------
// Guidance in the conditioning space

struct GuidanceSpec {
  toy::ToyPrompt prompt;
  toy::ToyPrompt positive;
  toy::ToyPrompt negative;
  GuidanceSchedule schedule;
};

/// delta = y(p+, t) - y(p-, t).
Tensor<float> guidance_direction(const Conditioner& c, const toy::ToyPrompt& positive, const toy::ToyPrompt& negative,
                                 double t);

/// y + w * delta. Entries whose increment is exactly zero keep y's bits.
Tensor<float> guided_conditioning(const Tensor<float>& y, const Tensor<float>& delta, double w);

/// v_u + s (v_c - v_u), with s = 1 and s = 0 returning an operand unchanged.
Tensor<float> cfg_combine(const Tensor<float>& v_cond, const Tensor<float>& v_uncond, double s);

/// One conditioning vector per layer for the conditional branch at time t.
std::vector<Tensor<float>> build_guided_y(const Conditioner& c, const GuidanceSpec& spec, double t);

}  // namespace modguide
