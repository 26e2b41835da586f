#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "modguide/autodiff.hpp"
#include "modguide/nn.hpp"
#include "modguide/toy_world.hpp"

namespace modguide {

struct ModelConfig {
  Index d_model = 64;
  Index n_layers = 8;
  Index heads = 4;
  Index d_pool = toy::kPooledDim;
  Index d_token = toy::kTokenDim;
  Index text_tokens = toy::kMaxClauses;
  Index resolution = 16;
  Index channels = 3;
  Index patch = 2;
  Index time_dim = 64;
  Index mlp_multiplier = 4;
  /// When false the conditioning network never sees a pooled embedding.
  bool pooled_path = true;

  Index grid() const { return resolution / patch; }
  Index image_tokens() const { return grid() * grid(); }
  Index patch_dim() const { return channels * patch * patch; }
  Index sequence_length() const { return text_tokens + image_tokens(); }

  void validate() const {
    auto positive = [](Index v, const char* name) {
      if (v < 1) throw ConfigError(std::string("model.") + name + " must be >= 1");
    };
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(heads, "heads");
    positive(d_pool, "d_pool");
    positive(d_token, "d_token");
    positive(text_tokens, "text_tokens");
    positive(resolution, "resolution");
    positive(channels, "channels");
    positive(patch, "patch");
    positive(time_dim, "time_dim");
    positive(mlp_multiplier, "mlp_multiplier");
    if (d_model % heads != 0) throw ConfigError("model.d_model must be divisible by model.heads");
    if (resolution % patch != 0) throw ConfigError("model.resolution must be divisible by model.patch");
    if (time_dim % 2 != 0) throw ConfigError("model.time_dim must be even");
    if (d_model % 4 != 0) throw ConfigError("model.d_model must be divisible by 4 for 2-D positions");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Both modulation sites of one block: attention input and MLP input.
struct BlockLayers {
  MultiheadAttention attn;
  MlpBlock mlp;
  LinearLayer attn_scale;
  LinearLayer attn_shift;
  LinearLayer mlp_scale;
  LinearLayer mlp_shift;
};

struct DitLayers {
  LinearLayer time_embed;
  LinearLayer cond_fc1;
  LinearLayer cond_fc2;
  LinearLayer text_proj;
  ParameterStore<float>::Slot text_null = 0;
  LinearLayer patch_embed;
  std::vector<BlockLayers> blocks;
  LinearLayer final_proj;
};

/// Fixed 2-D sine-cosine table, one row per image token in raster order.
inline Matrix<double> position_table(Index grid, Index d) {
  Matrix<double> out(grid * grid, d);
  const Index quarter = d / 4;
  for (Index gy = 0; gy < grid; ++gy) {
    for (Index gx = 0; gx < grid; ++gx) {
      const Index row = gy * grid + gx;
      for (Index k = 0; k < quarter; ++k) {
        const double freq = std::pow(10000.0, -double(k) / double(quarter));
        out(row, k) = std::sin(double(gy) * freq);
        out(row, quarter + k) = std::cos(double(gy) * freq);
        out(row, 2 * quarter + k) = std::sin(double(gx) * freq);
        out(row, 3 * quarter + k) = std::cos(double(gx) * freq);
      }
    }
  }
  return out;
}

/// Flat index maps between a [C x H x W] image and its [tokens x C*p*p] patches.
struct PatchIndex {
  std::shared_ptr<const std::vector<Index>> to_patches;
  std::shared_ptr<const std::vector<Index>> to_image;
};

inline PatchIndex make_patch_index(const ModelConfig& c) {
  const Index res = c.resolution, p = c.patch, grid = c.grid(), pd = c.patch_dim();
  std::vector<Index> fwd(static_cast<std::size_t>(c.image_tokens() * pd));
  std::vector<Index> inv(fwd.size());
  for (Index gy = 0; gy < grid; ++gy)
    for (Index gx = 0; gx < grid; ++gx)
      for (Index ch = 0; ch < c.channels; ++ch)
        for (Index dy = 0; dy < p; ++dy)
          for (Index dx = 0; dx < p; ++dx) {
            const Index token = gy * grid + gx;
            const Index feature = (ch * p + dy) * p + dx;
            const Index pixel = (ch * res + gy * p + dy) * res + gx * p + dx;
            fwd[static_cast<std::size_t>(token * pd + feature)] = pixel;
            inv[static_cast<std::size_t>(pixel)] = token * pd + feature;
          }
  return {std::make_shared<const std::vector<Index>>(std::move(fwd)),
          std::make_shared<const std::vector<Index>>(std::move(inv))};
}

/// Diffusion transformer with per-block adaptive modulation of the image stream.
template <typename Scalar>
struct Dit {
  ModelConfig config;
  ParameterStore<Scalar> params;
  DitLayers layers;
  Tensor<Scalar> positions;  ///< [image_tokens x d_model], fixed
  PatchIndex patches;

  static Dit create(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    Dit m;
    m.config = c;
    Initializer init(seed);
    auto& s = m.params;
    auto& L = m.layers;
    using Init = LinearLayer::Init;
    L.time_embed = LinearLayer::create(s, init, "time_embed", c.time_dim, c.time_dim);
    const Index cond_in = c.time_dim + (c.pooled_path ? c.d_pool : 0);
    L.cond_fc1 = LinearLayer::create(s, init, "cond.fc1", cond_in, c.d_model);
    L.cond_fc2 = LinearLayer::create(s, init, "cond.fc2", c.d_model, c.d_model);
    L.text_proj = LinearLayer::create(s, init, "text.proj", c.d_token, c.d_model);
    L.text_null = s.add("text.null", init.normal<Scalar>({c.text_tokens, c.d_token}, 1.0));
    L.patch_embed = LinearLayer::create(s, init, "patch_embed", c.patch_dim(), c.d_model);
    for (Index l = 0; l < c.n_layers; ++l) {
      const std::string p = "block" + std::to_string(l);
      BlockLayers b;
      b.attn = MultiheadAttention::create(s, init, p + ".attn", c.d_model, c.heads);
      b.mlp = MlpBlock::create(s, init, p + ".mlp", c.d_model, c.mlp_multiplier);
      b.attn_scale = LinearLayer::create(s, init, p + ".mod_attn.scale_head", c.d_model, c.d_model, Init::zero);
      b.attn_shift = LinearLayer::create(s, init, p + ".mod_attn.shift_head", c.d_model, c.d_model, Init::zero);
      b.mlp_scale = LinearLayer::create(s, init, p + ".mod_mlp.scale_head", c.d_model, c.d_model, Init::zero);
      b.mlp_shift = LinearLayer::create(s, init, p + ".mod_mlp.shift_head", c.d_model, c.d_model, Init::zero);
      L.blocks.push_back(b);
    }
    L.final_proj = LinearLayer::create(s, init, "final.proj", c.d_model, c.patch_dim());
    m.positions = Tensor<Scalar>::from_matrix(position_table(c.grid(), c.d_model).template cast<Scalar>());
    m.patches = make_patch_index(c);
    return m;
  }

  template <typename Other>
  Dit<Other> cast() const {
    Dit<Other> out;
    out.config = config;
    out.params = params.template cast<Other>();
    out.layers = layers;
    out.positions = positions.template cast<Other>();
    out.patches = patches;
    return out;
  }
};

// ---------------------------------------------------------------------------
// Conditioning

inline void check_timestep(double t) {
  if (!std::isfinite(t) || t < 0.0 || t > 1.0) {
    throw RangeError("timestep " + std::to_string(t) + " outside [0, 1]");
  }
}

/// Sinusoidal features of 1000 t: cosines then sines over geometric frequencies.
template <typename Scalar>
Tensor<Scalar> timestep_features(double t, Index dim) {
  check_timestep(t);
  Tensor<Scalar> out({1, dim});
  const Index half = dim / 2;
  for (Index i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
    out[i] = Scalar(std::cos(1000.0 * t * freq));
    out[half + i] = Scalar(std::sin(1000.0 * t * freq));
  }
  return out;
}

template <typename Scalar>
Var<Scalar> embed_timestep(Graph<Scalar>& g, Dit<Scalar>& m, double t) {
  return m.layers.time_embed(g, m.params, g.constant(timestep_features<Scalar>(t, m.config.time_dim)));
}

/// Adds `extra` to `base` elementwise, leaving entries where `extra` is exactly
/// zero untouched (so a zero contribution is a bit-level no-op, signed zeros included).
template <typename Scalar>
Var<Scalar> add_contribution(const Var<Scalar>& base, const Var<Scalar>& extra) {
  detail::require_same_shape(base, extra, "add_contribution");
  Tensor<Scalar> out = base.value();
  const auto e = extra.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i)
    if (e[i] != Scalar(0)) o[i] += e[i];
  return base.graph().record(std::move(out), base.requires_grad() || extra.requires_grad(),
                             [base, extra](Graph<Scalar>& g, auto grad) {
                               g.accumulate(base, grad);
                               g.accumulate(extra, grad);
                             });
}

/// y = MLP(concat(temb [+ extra], pooled)). `extra`, when given, is added to the
/// timestep embedding first; the pooled operand is ignored on pooled-free models.
template <typename Scalar>
Var<Scalar> global_conditioning(Graph<Scalar>& g, Dit<Scalar>& m, const Tensor<Scalar>& pooled, double t,
                                const Var<Scalar>* extra = nullptr) {
  const auto& c = m.config;
  if (c.pooled_path && pooled.size() != c.d_pool) {
    throw DimensionError("pooled embedding has " + std::to_string(pooled.size()) + " entries, expected " +
                         std::to_string(c.d_pool));
  }
  Var<Scalar> temb = embed_timestep(g, m, t);
  if (extra) temb = add_contribution(temb, *extra);
  Var<Scalar> in = c.pooled_path ? concat_cols(temb, g.constant(pooled.reshaped({1, c.d_pool}))) : temb;
  return m.layers.cond_fc2(g, m.params, silu(m.layers.cond_fc1(g, m.params, in)));
}

/// Mod(s) = alpha * s + beta, per column, broadcast over rows.
template <typename Scalar>
Var<Scalar> modulate(const Var<Scalar>& s, const Var<Scalar>& alpha, const Var<Scalar>& beta) {
  return scale_shift_rows(s, alpha, beta);
}

template <typename Scalar>
struct ModulationParams {
  Var<Scalar> alpha;
  Var<Scalar> beta;
};

/// alpha = 1 + scale_head(y), beta = shift_head(y).
template <typename Scalar>
ModulationParams<Scalar> modulation_params(Graph<Scalar>& g, ParameterStore<Scalar>& store, const LinearLayer& scale,
                                           const LinearLayer& shift, const Var<Scalar>& y) {
  return {add_constant(scale(g, store, y), Scalar(1)), shift(g, store, y)};
}

// ---------------------------------------------------------------------------
// Forward

/// Optional per-block recordings of one forward pass.
template <typename Scalar>
struct ForwardRecord {
  bool activations = false;
  bool attention = false;
  std::vector<Tensor<Scalar>> block_inputs;         ///< residual stream entering each block
  std::vector<AttentionWeights<Scalar>> attention_weights;  ///< per block, [heads] x [seq x seq]
};

template <typename Scalar>
Var<Scalar> block_forward(Graph<Scalar>& g, Dit<Scalar>& m, Index l, const Var<Scalar>& seq, const Var<Scalar>& y,
                          ForwardRecord<Scalar>* rec = nullptr) {
  const auto& b = m.layers.blocks.at(static_cast<std::size_t>(l));
  const Index nt = m.config.text_tokens;
  const Index ni = seq.rows() - nt;
  if (rec && rec->activations) rec->block_inputs.push_back(seq.value());

  auto modulated = [&](const Var<Scalar>& x, const LinearLayer& sc, const LinearLayer& sh) {
    const auto normed = layer_norm(x);
    const auto mp = modulation_params(g, m.params, sc, sh, y);
    // Text rows are normalized but never modulated.
    return concat_rows<Scalar>({slice_rows(normed, 0, nt), modulate(slice_rows(normed, nt, ni), mp.alpha, mp.beta)});
  };

  AttentionWeights<Scalar> weights;
  const auto h = modulated(seq, b.attn_scale, b.attn_shift);
  auto out = add(seq, b.attn(g, m.params, h, h, rec && rec->attention ? &weights : nullptr));
  if (rec && rec->attention) rec->attention_weights.push_back(std::move(weights));
  const auto h2 = modulated(out, b.mlp_scale, b.mlp_shift);
  return add(out, b.mlp(g, m.params, h2));
}

/// Text stream: clause tokens, with null positions filled from the learned null sequence.
template <typename Scalar>
Var<Scalar> text_stream(Graph<Scalar>& g, Dit<Scalar>& m, const toy::TokenEmbeddings& tokens) {
  const auto& c = m.config;
  if (tokens.tokens.rows() != c.text_tokens || tokens.tokens.cols() != c.d_token) {
    throw DimensionError("token matrix " + shape_string(tokens.tokens.shape()) + " does not match the model");
  }
  Tensor<Scalar> mask({c.text_tokens, c.d_token});
  for (Index r = 0; r < c.text_tokens; ++r)
    if (tokens.is_null[static_cast<std::size_t>(r)]) mask.matrix().row(r).setOnes();
  const auto filled = add(g.constant(tokens.tokens.template cast<Scalar>()),
                          mul(g.parameter(m.params[m.layers.text_null]), g.constant(std::move(mask))));
  return m.layers.text_proj(g, m.params, filled);
}

/// Velocity prediction for latent `x_t` [C x H x W]. `y_per_layer` holds one
/// conditioning vector per block.
template <typename Scalar>
Var<Scalar> model_forward(Graph<Scalar>& g, Dit<Scalar>& m, const Tensor<Scalar>& x_t, double t,
                          const toy::TokenEmbeddings& tokens, const std::vector<Var<Scalar>>& y_per_layer,
                          ForwardRecord<Scalar>* rec = nullptr) {
  const auto& c = m.config;
  check_timestep(t);
  if (static_cast<Index>(y_per_layer.size()) != c.n_layers) {
    throw ConfigError("model_forward: got " + std::to_string(y_per_layer.size()) + " conditioning vectors for " +
                      std::to_string(c.n_layers) + " layers");
  }
  if (x_t.shape() != Shape{c.channels, c.resolution, c.resolution}) {
    throw DimensionError("latent " + shape_string(x_t.shape()) + " does not match the model resolution");
  }
  const auto patches = gather(g.constant(x_t), m.patches.to_patches, {c.image_tokens(), c.patch_dim()});
  const auto img = add(m.layers.patch_embed(g, m.params, patches), g.constant(m.positions));
  auto seq = concat_rows<Scalar>({text_stream(g, m, tokens), img});
  for (Index l = 0; l < c.n_layers; ++l) seq = block_forward(g, m, l, seq, y_per_layer[static_cast<std::size_t>(l)], rec);
  const auto out = m.layers.final_proj(g, m.params, layer_norm(slice_rows(seq, c.text_tokens, c.image_tokens())));
  return gather(out, m.patches.to_image, {c.channels, c.resolution, c.resolution});
}

/// Rectified-flow objective for one example.
template <typename Scalar>
Var<Scalar> flow_matching_loss(Graph<Scalar>& g, Dit<Scalar>& m, const Tensor<Scalar>& x0,
                               const toy::TokenEmbeddings& tokens, const Tensor<Scalar>& pooled, double t,
                               const Tensor<Scalar>& noise) {
  if (x0.shape() != noise.shape()) throw DimensionError("flow_matching_loss: image and noise shapes differ");
  Tensor<Scalar> x_t(x0.shape());
  Tensor<Scalar> target(x0.shape());
  const Scalar ts = Scalar(t);
  x_t.matrix() = (Scalar(1) - ts) * x0.matrix() + ts * noise.matrix();
  target.matrix() = noise.matrix() - x0.matrix();
  const auto y = global_conditioning(g, m, pooled, t);
  const std::vector<Var<Scalar>> ys(static_cast<std::size_t>(m.config.n_layers), y);
  return mse(model_forward(g, m, x_t, t, tokens, ys), g.constant(std::move(target)));
}

}  // namespace modguide
