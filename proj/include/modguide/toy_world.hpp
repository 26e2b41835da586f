#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "modguide/tensor.hpp"

namespace modguide::toy {

// ---------------------------------------------------------------------------
// Attribute grammar

enum class Attribute : int { count = 0, color, shape, size, detail, region, filler };
inline constexpr int kAttributeCount = 7;

enum class ShapeKind : int { circle = 0, square };
enum class Color : int { red = 0, green, blue, yellow, cyan, magenta };
enum class Size : int { small = 0, large };
enum class Detail : int { plain = 0, textured };
enum class Region : int { top = 0, bottom, left, right };

inline constexpr int kMinCount = 1;
inline constexpr int kMaxCount = 5;
inline constexpr int kColorCount = 6;
inline constexpr int kFillerCount = 4;
inline constexpr int kGrid = 4;
inline constexpr int kMaxClauses = 8;
inline constexpr int kMaxFillers = 2;
inline constexpr Index kDefaultResolution = 16;

/// Number of values an attribute can take.
int value_count(Attribute a);
const char* attribute_name(Attribute a);
Attribute parse_attribute(const std::string& name);
std::string value_name(Attribute a, int value);
int parse_value(Attribute a, const std::string& name);

/// Normalized RGB in {0,1}^3 of a palette color.
std::array<float, 3> palette_rgb(Color c);

/// One `attribute=value` clause. For `count` the value is the object count (1..5).
struct Clause {
  Attribute attribute = Attribute::count;
  int value = 0;

  friend bool operator==(const Clause&, const Clause&) = default;
  friend auto operator<=>(const Clause&, const Clause&) = default;
};

std::string to_string(const Clause& c);

/// Ordered clause list; clause order is normalized on construction.
class ToyPrompt {
 public:
  ToyPrompt() = default;
  explicit ToyPrompt(std::vector<Clause> clauses);

  /// Parses a canonical or non-canonical "attr=value, attr=value" string.
  static ToyPrompt parse(const std::string& text);
  static ToyPrompt unconditional() { return ToyPrompt{}; }

  const std::vector<Clause>& clauses() const { return clauses_; }
  std::size_t size() const { return clauses_.size(); }
  bool empty() const { return clauses_.empty(); }
  bool is_unconditional() const { return clauses_.empty(); }
  std::optional<int> value_of(Attribute a) const;
  int filler_count() const;
  /// Index of the first clause with this attribute in the normalized order, if any.
  std::optional<std::size_t> position_of(Attribute a) const;

  std::string canonical() const;

  friend bool operator==(const ToyPrompt&, const ToyPrompt&) = default;

 private:
  std::vector<Clause> clauses_;
};

// ---------------------------------------------------------------------------
// Scenes

struct ToyScene {
  ShapeKind shape = ShapeKind::square;
  int count = 1;
  Color color = Color::red;
  std::vector<int> cells;  ///< distinct cell indices row * 4 + col, ascending
  Size size = Size::large;
  Detail detail = Detail::plain;
  Region region = Region::top;

  friend bool operator==(const ToyScene&, const ToyScene&) = default;
};

/// The eight cells of a half-grid region, ascending.
std::vector<int> region_cells(Region r);
bool cell_in_region(int cell, Region r);

/// Throws ConfigError when the scene breaks its invariants.
void validate(const ToyScene& scene);

/// Prompt describing every attribute of `scene`, plus the given filler clauses.
ToyPrompt describe(const ToyScene& scene, const std::vector<int>& fillers = {});

/// Raster of a scene as [3 x res x res] in [-1, 1]. Background is -1.
Tensor<float> render_scene(const ToyScene& scene, Index resolution = kDefaultResolution);

/// Verdict of the oracle detector.
struct Detection {
  bool rejected = true;
  std::string reason;
  int count = 0;
  Color color = Color::red;
  std::vector<int> cells;
  Detail detail = Detail::plain;
};

/// Connected-component detector inverting render_scene.
Detection detect_scene(const Tensor<float>& image);

/// Mean absolute brightness deviation inside foreground components; the
/// quality proxy for the "detail" axis. Zero when there is no foreground.
double detail_energy(const Tensor<float>& image);

/// True when the detection is not a reject and agrees with `prompt` on every
/// attribute in `attributes` that the prompt specifies.
bool detection_matches(const Detection& d, const ToyPrompt& prompt, const std::vector<Attribute>& attributes);

// ---------------------------------------------------------------------------
// Encoders

inline constexpr Index kPooledDim = 32;
inline constexpr Index kTokenDim = 64;
inline constexpr std::uint64_t kDefaultEncoderSeed = 1234;

/// Column range of an attribute inside the pooled vector.
struct PooledBlock {
  Index offset = 0;
  Index width = 0;
};
PooledBlock pooled_block(Attribute a);

/// Pooled embedding: each clause is an orthonormal direction inside its
/// attribute's block, and a prompt embeds as the sum of its clauses.
class PooledEncoder {
 public:
  explicit PooledEncoder(std::uint64_t seed = kDefaultEncoderSeed);
  Tensor<float> encode(const ToyPrompt& prompt) const;
  const Matrix<float>& basis(Attribute a) const { return bases_[static_cast<std::size_t>(a)]; }

 private:
  std::array<Matrix<float>, kAttributeCount> bases_;
};

/// Per-clause token matrix, padded to kMaxClauses with null positions.
struct TokenEmbeddings {
  Tensor<float> tokens;                  ///< [kMaxClauses x kTokenDim]; zero rows at null positions
  std::array<bool, kMaxClauses> is_null{};

  friend bool operator==(const TokenEmbeddings&, const TokenEmbeddings&) = default;
};

/// Sequence embedding with one fixed vector per distinct clause.
class SequenceEncoder {
 public:
  explicit SequenceEncoder(std::uint64_t seed = kDefaultEncoderSeed);
  TokenEmbeddings encode(const ToyPrompt& prompt) const;
  /// Embedding of a single clause (norm sqrt(kTokenDim)).
  RowVector<float> clause_vector(const Clause& c) const;
  static int vocabulary_size();
  static int vocabulary_index(const Clause& c);

 private:
  Matrix<float> table_;  ///< [vocabulary x kTokenDim]
};

// ---------------------------------------------------------------------------
// Dataset

struct Example {
  ToyScene scene;
  ToyPrompt prompt;
  Tensor<float> image;
};

struct DatasetOptions {
  double filler_probability = 0.5;
};

/// Uniform draw over scene space with faithful prompts.
ToyScene sample_scene(std::mt19937_64& rng);

/// Portable uniform draw in [0, n).
inline int uniform_index(std::mt19937_64& rng, int n) { return static_cast<int>(rng() % static_cast<std::uint64_t>(n)); }
std::vector<Example> sample_dataset(std::uint64_t seed, std::size_t size, const DatasetOptions& options = {});

struct DatasetHeader {
  std::uint64_t seed = 0;
  std::uint64_t size = 0;
  std::uint32_t resolution = static_cast<std::uint32_t>(kDefaultResolution);
  std::uint64_t encoder_seed = kDefaultEncoderSeed;
};

/// Binary split file: header, then fixed-size records of int32 scene fields
/// followed by the image as little-endian float32.
void write_dataset(std::ostream& os, const DatasetHeader& header, const std::vector<Example>& examples);
std::pair<DatasetHeader, std::vector<Example>> read_dataset(std::istream& is);

}  // namespace modguide::toy
