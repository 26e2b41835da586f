#include "modguide/toy_world.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "modguide/errors.hpp"
#include "modguide/random.hpp"

namespace modguide::toy {

namespace {

constexpr const char* kAttributeNames[kAttributeCount] = {"count", "color", "shape", "size", "detail", "region",
                                                          "filler"};
constexpr const char* kColorNames[kColorCount] = {"red", "green", "blue", "yellow", "cyan", "magenta"};
constexpr const char* kShapeNames[2] = {"circle", "square"};
constexpr const char* kSizeNames[2] = {"small", "large"};
constexpr const char* kDetailNames[2] = {"plain", "textured"};
constexpr const char* kRegionNames[4] = {"top", "bottom", "left", "right"};
constexpr const char* kFillerNames[kFillerCount] = {"sharp", "clean", "vivid", "balanced"};

// Pooled block widths. Each is one more than the attribute's value count, so
// the block never spans its whole subspace with a single clause family.
constexpr int kPooledWidths[kAttributeCount] = {6, 7, 3, 3, 3, 5, 5};

constexpr Index kCellPixels = 4;
constexpr float kTextureLevel = 0.45f;
constexpr float kForegroundThreshold = 0.25f;
constexpr int kSpeckleSize = 3;
constexpr int kSpeckleBudget = 4;
constexpr double kDetailThreshold = 0.1;

int index_of(Attribute a) { return static_cast<int>(a); }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\n\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\n\r");
  return s.substr(b, e - b + 1);
}

void check_value(Attribute a, int value) {
  if (a == Attribute::count) {
    if (value < kMinCount || value > kMaxCount) {
      throw VocabularyError("count must be in [1, 5], got " + std::to_string(value));
    }
    return;
  }
  if (value < 0 || value >= value_count(a)) {
    throw VocabularyError(std::string("value ") + std::to_string(value) + " out of range for " + attribute_name(a));
  }
}

Eigen::MatrixXd orthonormal_columns(std::mt19937_64& rng, Index rows, Index cols) {
  Eigen::MatrixXd a(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) a(i, j) = standard_normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
  return q;
}

}  // namespace

// ---------------------------------------------------------------------------

int value_count(Attribute a) {
  switch (a) {
    case Attribute::count: return kMaxCount - kMinCount + 1;
    case Attribute::color: return kColorCount;
    case Attribute::shape: return 2;
    case Attribute::size: return 2;
    case Attribute::detail: return 2;
    case Attribute::region: return 4;
    case Attribute::filler: return kFillerCount;
  }
  throw VocabularyError("unknown attribute");
}

const char* attribute_name(Attribute a) {
  const int i = index_of(a);
  if (i < 0 || i >= kAttributeCount) throw VocabularyError("unknown attribute");
  return kAttributeNames[i];
}

Attribute parse_attribute(const std::string& name) {
  for (int i = 0; i < kAttributeCount; ++i) {
    if (name == kAttributeNames[i]) return static_cast<Attribute>(i);
  }
  throw VocabularyError("unknown attribute '" + name + "'");
}

std::string value_name(Attribute a, int value) {
  check_value(a, value);
  switch (a) {
    case Attribute::count: return std::to_string(value);
    case Attribute::color: return kColorNames[value];
    case Attribute::shape: return kShapeNames[value];
    case Attribute::size: return kSizeNames[value];
    case Attribute::detail: return kDetailNames[value];
    case Attribute::region: return kRegionNames[value];
    case Attribute::filler: return kFillerNames[value];
  }
  throw VocabularyError("unknown attribute");
}

int parse_value(Attribute a, const std::string& name) {
  if (a == Attribute::count) {
    if (name.size() == 1 && name[0] >= '0' && name[0] <= '9') {
      const int v = name[0] - '0';
      check_value(a, v);
      return v;
    }
    throw VocabularyError("invalid count '" + name + "'");
  }
  for (int v = 0; v < value_count(a); ++v) {
    if (name == value_name(a, v)) return v;
  }
  throw VocabularyError("unknown value '" + name + "' for " + attribute_name(a));
}

std::array<float, 3> palette_rgb(Color c) {
  switch (c) {
    case Color::red: return {1, 0, 0};
    case Color::green: return {0, 1, 0};
    case Color::blue: return {0, 0, 1};
    case Color::yellow: return {1, 1, 0};
    case Color::cyan: return {0, 1, 1};
    case Color::magenta: return {1, 0, 1};
  }
  throw VocabularyError("unknown color");
}

std::string to_string(const Clause& c) { return std::string(attribute_name(c.attribute)) + "=" + value_name(c.attribute, c.value); }

// ---------------------------------------------------------------------------

ToyPrompt::ToyPrompt(std::vector<Clause> clauses) : clauses_(std::move(clauses)) {
  for (const auto& c : clauses_) check_value(c.attribute, c.value);
  std::sort(clauses_.begin(), clauses_.end());
  for (std::size_t i = 1; i < clauses_.size(); ++i) {
    const auto& a = clauses_[i - 1];
    const auto& b = clauses_[i];
    if (a == b) throw VocabularyError("duplicate clause '" + to_string(a) + "'");
    if (a.attribute == b.attribute && a.attribute != Attribute::filler) {
      throw VocabularyError(std::string("conflicting clauses for ") + attribute_name(a.attribute));
    }
  }
}

ToyPrompt ToyPrompt::parse(const std::string& text) {
  std::vector<Clause> clauses;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (part.empty()) {
      if (trim(text).empty()) break;
      throw VocabularyError("empty clause in '" + text + "'");
    }
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw VocabularyError("clause '" + part + "' is not attr=value");
    const Attribute a = parse_attribute(trim(part.substr(0, eq)));
    clauses.push_back({a, parse_value(a, trim(part.substr(eq + 1)))});
  }
  return ToyPrompt(std::move(clauses));
}

std::optional<int> ToyPrompt::value_of(Attribute a) const {
  for (const auto& c : clauses_)
    if (c.attribute == a) return c.value;
  return std::nullopt;
}

int ToyPrompt::filler_count() const {
  return static_cast<int>(std::count_if(clauses_.begin(), clauses_.end(),
                                        [](const Clause& c) { return c.attribute == Attribute::filler; }));
}

std::optional<std::size_t> ToyPrompt::position_of(Attribute a) const {
  for (std::size_t i = 0; i < clauses_.size(); ++i)
    if (clauses_[i].attribute == a) return i;
  return std::nullopt;
}

std::string ToyPrompt::canonical() const {
  std::string out;
  for (std::size_t i = 0; i < clauses_.size(); ++i) {
    if (i) out += ", ";
    out += to_string(clauses_[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<int> region_cells(Region r) {
  std::vector<int> cells;
  for (int c = 0; c < kGrid * kGrid; ++c)
    if (cell_in_region(c, r)) cells.push_back(c);
  return cells;
}

bool cell_in_region(int cell, Region r) {
  const int row = cell / kGrid;
  const int col = cell % kGrid;
  switch (r) {
    case Region::top: return row < kGrid / 2;
    case Region::bottom: return row >= kGrid / 2;
    case Region::left: return col < kGrid / 2;
    case Region::right: return col >= kGrid / 2;
  }
  return false;
}

void validate(const ToyScene& s) {
  if (s.count < kMinCount || s.count > kMaxCount) {
    throw ConfigError("scene count must be in [1, 5], got " + std::to_string(s.count));
  }
  if (static_cast<int>(s.cells.size()) != s.count) throw ConfigError("scene cell list does not match its count");
  for (std::size_t i = 0; i < s.cells.size(); ++i) {
    if (s.cells[i] < 0 || s.cells[i] >= kGrid * kGrid) throw ConfigError("scene cell out of grid");
    if (i && s.cells[i] <= s.cells[i - 1]) throw ConfigError("scene cells must be distinct and ascending");
    if (!cell_in_region(s.cells[i], s.region)) throw ConfigError("scene cell outside its region");
  }
  check_value(Attribute::color, static_cast<int>(s.color));
  check_value(Attribute::shape, static_cast<int>(s.shape));
  check_value(Attribute::size, static_cast<int>(s.size));
  check_value(Attribute::detail, static_cast<int>(s.detail));
  check_value(Attribute::region, static_cast<int>(s.region));
}

ToyPrompt describe(const ToyScene& s, const std::vector<int>& fillers) {
  std::vector<Clause> clauses = {
      {Attribute::count, s.count},
      {Attribute::color, static_cast<int>(s.color)},
      {Attribute::shape, static_cast<int>(s.shape)},
      {Attribute::size, static_cast<int>(s.size)},
      {Attribute::detail, static_cast<int>(s.detail)},
      {Attribute::region, static_cast<int>(s.region)},
  };
  for (int f : fillers) clauses.push_back({Attribute::filler, f});
  return ToyPrompt(std::move(clauses));
}

Tensor<float> render_scene(const ToyScene& s, Index res) {
  validate(s);
  if (res != kGrid * kCellPixels) throw ConfigError("render_scene supports resolution 16 only");
  Tensor<float> img({3, res, res});
  std::fill(img.data().begin(), img.data().end(), -1.0f);

  const Index side = s.size == Size::large ? 3 : 2;
  const Index offset = s.size == Size::large ? 0 : 1;
  const double radius = 0.425 * double(side);
  const auto rgb = palette_rgb(s.color);
  for (int cell : s.cells) {
    const Index y0 = (cell / kGrid) * kCellPixels + offset;
    const Index x0 = (cell % kGrid) * kCellPixels + offset;
    const double cy = double(y0) + double(side) / 2.0;
    const double cx = double(x0) + double(side) / 2.0;
    for (Index y = y0; y < y0 + side; ++y) {
      for (Index x = x0; x < x0 + side; ++x) {
        if (s.shape == ShapeKind::circle) {
          const double dy = double(y) + 0.5 - cy;
          const double dx = double(x) + 0.5 - cx;
          if (std::sqrt(dx * dx + dy * dy) > radius) continue;
        }
        const float level = (s.detail == Detail::textured && (x + y) % 2 == 1) ? kTextureLevel : 1.0f;
        for (Index ch = 0; ch < 3; ++ch) img[(ch * res + y) * res + x] = -1.0f + 2.0f * level * rgb[ch];
      }
    }
  }
  return img;
}

// ---------------------------------------------------------------------------

namespace {

struct Component {
  std::vector<Index> pixels;  // y * res + x
};

struct Foreground {
  Index res = 0;
  std::vector<float> brightness;           // max channel of (v + 1) / 2
  std::array<std::vector<float>, 3> rgb;   // (v + 1) / 2 per channel
  std::vector<Component> components;       // 4-connected, raster order of first pixel
};

Foreground analyze(const Tensor<float>& image) {
  const auto& shape = image.shape();
  if (shape.size() != 3 || shape[0] != 3 || shape[1] != shape[2]) {
    throw DimensionError("detect_scene expects [3 x r x r], got " + shape_string(shape));
  }
  Foreground f;
  f.res = shape[1];
  const Index n = f.res * f.res;
  f.brightness.assign(static_cast<std::size_t>(n), 0.0f);
  for (int ch = 0; ch < 3; ++ch) {
    f.rgb[ch].resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      const float v = std::clamp((image[ch * n + i] + 1.0f) * 0.5f, 0.0f, 1.0f);
      f.rgb[ch][i] = v;
      f.brightness[i] = std::max(f.brightness[i], v);
    }
  }
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  for (Index start = 0; start < n; ++start) {
    if (seen[start] || f.brightness[start] <= kForegroundThreshold) continue;
    Component c;
    std::vector<Index> stack = {start};
    seen[start] = 1;
    while (!stack.empty()) {
      const Index p = stack.back();
      stack.pop_back();
      c.pixels.push_back(p);
      const Index y = p / f.res, x = p % f.res;
      const Index nbr[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& q : nbr) {
        if (q[0] < 0 || q[0] >= f.res || q[1] < 0 || q[1] >= f.res) continue;
        const Index qi = q[0] * f.res + q[1];
        if (seen[qi] || f.brightness[qi] <= kForegroundThreshold) continue;
        seen[qi] = 1;
        stack.push_back(qi);
      }
    }
    std::sort(c.pixels.begin(), c.pixels.end());
    f.components.push_back(std::move(c));
  }
  return f;
}

double component_detail(const Foreground& f, const Component& c) {
  double mean = 0.0;
  for (Index p : c.pixels) mean += f.brightness[p];
  mean /= double(c.pixels.size());
  double dev = 0.0;
  for (Index p : c.pixels) dev += std::abs(double(f.brightness[p]) - mean);
  return dev;  // summed; callers normalize by total pixel count
}

}  // namespace

Detection detect_scene(const Tensor<float>& image) {
  const Foreground f = analyze(image);
  Detection d;
  if (f.res != kGrid * kCellPixels) {
    d.reason = "unsupported resolution";
    return d;
  }

  int speckle = 0;
  std::vector<const Component*> objects;
  for (const auto& c : f.components) {
    if (static_cast<int>(c.pixels.size()) < kSpeckleSize) {
      speckle += static_cast<int>(c.pixels.size());
    } else {
      objects.push_back(&c);
    }
  }
  if (speckle > kSpeckleBudget) {
    d.reason = "speckle";
    return d;
  }
  if (objects.empty()) {
    d.reason = "no components";
    return d;
  }

  std::array<Index, kColorCount> color_votes{};
  std::set<int> cells;
  double detail_sum = 0.0;
  Index detail_pixels = 0;
  for (const Component* c : objects) {
    const Index p0 = c->pixels.front();
    const int cell = int((p0 / f.res) / kCellPixels) * kGrid + int((p0 % f.res) / kCellPixels);
    for (Index p : c->pixels) {
      const int pc = int((p / f.res) / kCellPixels) * kGrid + int((p % f.res) / kCellPixels);
      if (pc != cell) {
        d.reason = "component crosses cells";
        return d;
      }
    }
    if (!cells.insert(cell).second) {
      d.reason = "two components in one cell";
      return d;
    }

    std::array<double, 3> mean{};
    for (Index p : c->pixels)
      for (int ch = 0; ch < 3; ++ch) mean[ch] += f.rgb[ch][p];
    const double peak = std::max({mean[0], mean[1], mean[2]});
    int best = 0;
    double best_dist = 1e30;
    for (int k = 0; k < kColorCount; ++k) {
      const auto pal = palette_rgb(static_cast<Color>(k));
      double dist = 0.0;
      for (int ch = 0; ch < 3; ++ch) {
        const double diff = mean[ch] / peak - pal[ch];
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = k;
      }
    }
    color_votes[best] += static_cast<Index>(c->pixels.size());
    detail_sum += component_detail(f, *c);
    detail_pixels += static_cast<Index>(c->pixels.size());
  }

  const int count = static_cast<int>(objects.size());
  if (count < kMinCount || count > kMaxCount) {
    d.reason = "count out of range";
    d.count = count;
    return d;
  }
  d.rejected = false;
  d.count = count;
  d.cells.assign(cells.begin(), cells.end());
  d.color = static_cast<Color>(std::max_element(color_votes.begin(), color_votes.end()) - color_votes.begin());
  d.detail = detail_sum / double(detail_pixels) > kDetailThreshold ? Detail::textured : Detail::plain;
  return d;
}

double detail_energy(const Tensor<float>& image) {
  const Foreground f = analyze(image);
  double sum = 0.0;
  Index pixels = 0;
  for (const auto& c : f.components) {
    sum += component_detail(f, c);
    pixels += static_cast<Index>(c.pixels.size());
  }
  return pixels ? sum / double(pixels) : 0.0;
}

bool detection_matches(const Detection& d, const ToyPrompt& prompt, const std::vector<Attribute>& attributes) {
  if (d.rejected) return false;
  for (Attribute a : attributes) {
    const auto v = prompt.value_of(a);
    if (!v) continue;
    switch (a) {
      case Attribute::count:
        if (d.count != *v) return false;
        break;
      case Attribute::color:
        if (static_cast<int>(d.color) != *v) return false;
        break;
      case Attribute::detail:
        if (static_cast<int>(d.detail) != *v) return false;
        break;
      case Attribute::region:
        for (int c : d.cells)
          if (!cell_in_region(c, static_cast<Region>(*v))) return false;
        break;
      default:
        throw ConfigError(std::string("the detector does not measure ") + attribute_name(a));
    }
  }
  return true;
}

// ---------------------------------------------------------------------------

PooledBlock pooled_block(Attribute a) {
  const int i = index_of(a);
  if (i < 0 || i >= kAttributeCount) throw VocabularyError("unknown attribute");
  Index offset = 0;
  for (int k = 0; k < i; ++k) offset += kPooledWidths[k];
  return {offset, kPooledWidths[i]};
}

PooledEncoder::PooledEncoder(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (int i = 0; i < kAttributeCount; ++i) {
    const Index w = kPooledWidths[i];
    bases_[static_cast<std::size_t>(i)] = orthonormal_columns(rng, w, w).cast<float>();
  }
}

Tensor<float> PooledEncoder::encode(const ToyPrompt& prompt) const {
  Tensor<float> out({kPooledDim});
  for (const auto& c : prompt.clauses()) {
    const PooledBlock b = pooled_block(c.attribute);
    const int column = c.attribute == Attribute::count ? c.value - kMinCount : c.value;
    const auto& basis = bases_[static_cast<std::size_t>(index_of(c.attribute))];
    for (Index r = 0; r < b.width; ++r) out[b.offset + r] += basis(r, column);
  }
  return out;
}

int SequenceEncoder::vocabulary_size() {
  int n = 0;
  for (int i = 0; i < kAttributeCount; ++i) n += value_count(static_cast<Attribute>(i));
  return n;
}

int SequenceEncoder::vocabulary_index(const Clause& c) {
  check_value(c.attribute, c.value);
  int base = 0;
  for (int i = 0; i < index_of(c.attribute); ++i) base += value_count(static_cast<Attribute>(i));
  return base + (c.attribute == Attribute::count ? c.value - kMinCount : c.value);
}

SequenceEncoder::SequenceEncoder(std::uint64_t seed) {
  // Offset the stream so the two encoders never share draws for one seed.
  std::mt19937_64 rng(seed ^ 0x5eb1'7e0c'0de5'1a7eULL);
  const Eigen::MatrixXd q = orthonormal_columns(rng, kTokenDim, vocabulary_size());
  table_ = (q.transpose() * std::sqrt(double(kTokenDim))).cast<float>();
}

RowVector<float> SequenceEncoder::clause_vector(const Clause& c) const { return table_.row(vocabulary_index(c)); }

TokenEmbeddings SequenceEncoder::encode(const ToyPrompt& prompt) const {
  if (prompt.size() > static_cast<std::size_t>(kMaxClauses)) {
    throw DimensionError("prompt has " + std::to_string(prompt.size()) + " clauses; at most 8 fit the text sequence");
  }
  TokenEmbeddings out;
  out.tokens = Tensor<float>({kMaxClauses, kTokenDim});
  out.is_null.fill(true);
  auto m = out.tokens.matrix();
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    m.row(static_cast<Index>(i)) = table_.row(vocabulary_index(prompt.clauses()[i]));
    out.is_null[i] = false;
  }
  return out;
}

// ---------------------------------------------------------------------------

ToyScene sample_scene(std::mt19937_64& rng) {
  ToyScene s;
  s.shape = static_cast<ShapeKind>(uniform_index(rng, 2));
  s.count = kMinCount + uniform_index(rng, kMaxCount - kMinCount + 1);
  s.color = static_cast<Color>(uniform_index(rng, kColorCount));
  s.size = static_cast<Size>(uniform_index(rng, 2));
  s.detail = static_cast<Detail>(uniform_index(rng, 2));
  s.region = static_cast<Region>(uniform_index(rng, 4));
  std::vector<int> pool = region_cells(s.region);
  // Partial Fisher-Yates: the first `count` entries are a uniform subset.
  for (int i = 0; i < s.count; ++i) {
    const int j = i + uniform_index(rng, static_cast<int>(pool.size()) - i);
    std::swap(pool[i], pool[j]);
  }
  s.cells.assign(pool.begin(), pool.begin() + s.count);
  std::sort(s.cells.begin(), s.cells.end());
  return s;
}

namespace {

std::vector<int> sample_fillers(std::mt19937_64& rng, double probability) {
  if (uniform01(rng) >= probability) return {};
  const int n = 1 + uniform_index(rng, kMaxFillers);
  std::vector<int> pool(kFillerCount);
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < n; ++i) std::swap(pool[i], pool[i + uniform_index(rng, kFillerCount - i)]);
  pool.resize(n);
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

std::vector<Example> sample_dataset(std::uint64_t seed, std::size_t size, const DatasetOptions& options) {
  if (size == 0) throw ConfigError("dataset size must be at least 1");
  std::mt19937_64 rng(seed);
  std::vector<Example> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    Example e;
    e.scene = sample_scene(rng);
    e.prompt = describe(e.scene, sample_fillers(rng, options.filler_probability));
    e.image = render_scene(e.scene);
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kDatasetMagic[8] = {'M', 'G', 'T', 'O', 'Y', 'D', 'S', '1'};
constexpr int kRecordInts = 14;

template <typename T>
void put_le(std::ostream& os, T v) {
  unsigned char b[sizeof(T)];
  std::uint64_t u = 0;
  std::memcpy(&u, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw CheckpointError("dataset file truncated");
  std::uint64_t u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= std::uint64_t(b[i]) << (8 * i);
  T v;
  std::memcpy(&v, &u, sizeof(T));
  return v;
}

}  // namespace

void write_dataset(std::ostream& os, const DatasetHeader& header, const std::vector<Example>& examples) {
  if (header.size != examples.size()) throw ConfigError("dataset header size does not match the example count");
  os.write(kDatasetMagic, sizeof(kDatasetMagic));
  put_le<std::uint64_t>(os, header.seed);
  put_le<std::uint64_t>(os, header.size);
  put_le<std::uint32_t>(os, header.resolution);
  put_le<std::uint64_t>(os, header.encoder_seed);
  const Index pixels = 3 * Index(header.resolution) * Index(header.resolution);
  for (const auto& e : examples) {
    const auto& s = e.scene;
    std::array<std::int32_t, kRecordInts> f;
    f.fill(-1);
    f[0] = static_cast<std::int32_t>(s.shape);
    f[1] = s.count;
    f[2] = static_cast<std::int32_t>(s.color);
    f[3] = static_cast<std::int32_t>(s.size);
    f[4] = static_cast<std::int32_t>(s.detail);
    f[5] = static_cast<std::int32_t>(s.region);
    for (std::size_t i = 0; i < s.cells.size(); ++i) f[6 + i] = s.cells[i];
    f[11] = e.prompt.filler_count();
    int k = 0;
    for (const auto& c : e.prompt.clauses())
      if (c.attribute == Attribute::filler) f[12 + k++] = c.value;
    for (auto v : f) put_le<std::int32_t>(os, v);
    if (e.image.size() != pixels) throw DimensionError("example image does not match the header resolution");
    for (float v : e.image.data()) put_le<float>(os, v);
  }
  if (!os) throw CheckpointError("failed writing dataset");
}

std::pair<DatasetHeader, std::vector<Example>> read_dataset(std::istream& is) {
  char magic[sizeof(kDatasetMagic)];
  if (!is.read(magic, sizeof(magic)) || !std::equal(magic, magic + sizeof(magic), kDatasetMagic)) {
    throw CheckpointError("not a toy dataset file");
  }
  DatasetHeader h;
  h.seed = get_le<std::uint64_t>(is);
  h.size = get_le<std::uint64_t>(is);
  h.resolution = get_le<std::uint32_t>(is);
  h.encoder_seed = get_le<std::uint64_t>(is);
  const Index res = h.resolution;
  std::vector<Example> out;
  out.reserve(h.size);
  for (std::uint64_t r = 0; r < h.size; ++r) {
    std::array<std::int32_t, kRecordInts> f;
    for (auto& v : f) v = get_le<std::int32_t>(is);
    Example e;
    e.scene.shape = static_cast<ShapeKind>(f[0]);
    e.scene.count = f[1];
    e.scene.color = static_cast<Color>(f[2]);
    e.scene.size = static_cast<Size>(f[3]);
    e.scene.detail = static_cast<Detail>(f[4]);
    e.scene.region = static_cast<Region>(f[5]);
    for (int i = 0; i < 5; ++i)
      if (f[6 + i] >= 0) e.scene.cells.push_back(f[6 + i]);
    try {
      validate(e.scene);
    } catch (const ConfigError& err) {
      throw CheckpointError("dataset record " + std::to_string(r) + ": " + err.what());
    }
    std::vector<int> fillers;
    for (int i = 0; i < f[11] && i < kMaxFillers; ++i) fillers.push_back(f[12 + i]);
    e.prompt = describe(e.scene, fillers);
    e.image = Tensor<float>({3, res, res});
    for (float& v : e.image.data()) v = get_le<float>(is);
    out.push_back(std::move(e));
  }
  return {h, std::move(out)};
}

}  // namespace modguide::toy
