#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "modguide/adapter.hpp"
#include "modguide/checkpoint.hpp"
#include "modguide/train.hpp"

namespace modguide {

/// Content hash of a model checkpoint, as written into adapter checkpoints.
std::string model_hash(const Dit<float>& model);

/// Student forward: null sequence tokens, prompt enters only through the adapter.
Var<float> retrofit_forward(Graph<float>& g, Dit<float>& base, PooledAdapter<float>& adapter,
                            const Tensor<float>& x_t, double t, const toy::TokenEmbeddings& null_tokens,
                            const Tensor<float>& pooled);

/// One distillation sample. The teacher is the pooled-free base with the
/// prompt's sequence tokens; the student is the same base with null tokens plus
/// the adapter's contribution of the prompt's pooled embedding. Both see the
/// same x_t. Adds d(loss * grad_scale)/d(adapter) into the adapter's gradients
/// and returns the unscaled loss. Throws FrozennessError if any base parameter
/// received a gradient.
double distill_step(Dit<float>& base, PooledAdapter<float>& adapter, const Encoders& enc, const Tensor<float>& x0,
                    const toy::ToyPrompt& prompt, double t, const Tensor<float>& noise, float grad_scale = 1.0f);

/// Mean teacher/student MSE over fixed probes, without touching any gradient.
double evaluate_distillation(Dit<float>& base, PooledAdapter<float>& adapter, const Encoders& enc,
                             const std::vector<LossProbe>& probes);

struct RetrofitConfig {
  long iterations = 1000;
  int batch = 8;
  double lr = 1e-3;
  double grad_clip = 1.0;
  Index adapter_width = kDefaultAdapterWidth;
  std::uint64_t seed = 0;
  /// Abort once the loss has exceeded this multiple of the first step's loss...
  double divergence_factor = 10.0;
  /// ...for this many consecutive steps.
  long divergence_patience = 100;
};

struct RetrofitRun {
  std::string base_hash;
  PooledAdapter<float> adapter;
  long iterations = 0;
  std::vector<double> losses;
};

/// Trains a fresh adapter against a frozen pooled-free base.
RetrofitRun retrofit_train(Dit<float>& base, const std::vector<toy::Example>& data, const Encoders& enc,
                           const RetrofitConfig& cfg, const std::function<void(const TrainProgress&)>& on_step = {});

std::string serialize_adapter(const RetrofitRun& run);
/// Parses an adapter checkpoint and checks that it was trained against `base`.
RetrofitRun parse_adapter(const std::string& bytes, const Dit<float>& base);
void save_adapter(const std::filesystem::path& path, const RetrofitRun& run);
RetrofitRun load_adapter(const std::filesystem::path& path, const Dit<float>& base);

}  // namespace modguide
