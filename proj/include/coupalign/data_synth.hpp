#pragma once

// Synthetic referring-segmentation scenes: hard-edged circles, squares and
// triangles on a flat background, each paired with a short expression that
// picks out exactly one of them.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "coupalign/catn.hpp"
#include "coupalign/config.hpp"

namespace coupalign {

inline constexpr std::uint32_t kGeneratorVersion = 1;

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;

  static const std::vector<std::string>& words() {
    static const std::vector<std::string> table = {
        "<pad>", "<cls>",                                             //
        "red", "green", "blue", "yellow", "purple", "orange",         // colors
        "circle", "square", "triangle",                               // shapes
        "small", "large",                                             // sizes
        "left", "right", "top", "bottom",                             // positions
        "first", "second", "third", "fourth",                         // ordinals
        "from", "the",                                                // relation words
    };
    return table;
  }

  static std::size_t size() { return words().size(); }

  static int id(const std::string& word) {
    const auto& w = words();
    auto it = std::find(w.begin() + 2, w.end(), word);
    if (it == w.end()) throw InputError("tokenize: unknown word '" + word + "'");
    return static_cast<int>(it - w.begin());
  }

  /// FNV-1a over the table, written into dataset manifests.
  static std::uint64_t hash() {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& w : words()) {
      for (unsigned char c : w + '\n') {
        h ^= c;
        h *= 1099511628211ULL;
      }
    }
    return h;
  }
};

/// [CLS] + word ids, padded with PAD to t_max.
inline std::vector<int> tokenize(const std::string& expression, std::size_t t_max) {
  std::vector<int> ids{Vocabulary::kCls};
  std::istringstream in(expression);
  std::string w;
  while (in >> w) ids.push_back(Vocabulary::id(w));
  if (ids.size() > t_max) {
    throw InputError("tokenize: '" + expression + "' needs " + std::to_string(ids.size()) + " tokens, T_max is " +
                     std::to_string(t_max));
  }
  ids.resize(t_max, Vocabulary::kPad);
  return ids;
}

/// Inverse of tokenize: drops CLS and PAD.
inline std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id == Vocabulary::kPad || id == Vocabulary::kCls) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= Vocabulary::size()) {
      throw InputError("detokenize: token id " + std::to_string(id) + " outside vocabulary");
    }
    if (!out.empty()) out += ' ';
    out += Vocabulary::words()[static_cast<std::size_t>(id)];
  }
  return out;
}

enum class ShapeKind : int { circle = 0, square = 1, triangle = 2 };
enum class Direction : int { left = 0, right = 1, top = 2, bottom = 3 };
enum class Template : int { color_shape = 0, size_color_shape = 1, shape_direction = 2, ordinal = 3 };

inline constexpr std::array<const char*, 6> kColorNames{"red", "green", "blue", "yellow", "purple", "orange"};
inline constexpr std::array<std::array<float, 3>, 6> kColorRgb{{{0.90f, 0.12f, 0.10f},
                                                               {0.10f, 0.75f, 0.20f},
                                                               {0.15f, 0.25f, 0.95f},
                                                               {0.95f, 0.90f, 0.10f},
                                                               {0.60f, 0.20f, 0.80f},
                                                               {1.00f, 0.55f, 0.05f}}};
inline constexpr std::array<const char*, 3> kShapeNames{"circle", "square", "triangle"};
inline constexpr std::array<const char*, 4> kDirectionNames{"left", "right", "top", "bottom"};
inline constexpr std::array<const char*, 4> kOrdinalNames{"first", "second", "third", "fourth"};
inline constexpr float kBackground = 0.5f;
inline constexpr double kMinRankGap = 4.0;  // pixels between ranked centers

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  int color = 0;
  bool large = false;
  double cx = 0, cy = 0, r = 0;  // center (pixels) and half extent

  /// Hard-edged membership test at pixel (x, y), sampled at the pixel center.
  bool covers(std::size_t x, std::size_t y) const {
    const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
    switch (shape) {
      case ShapeKind::circle: return dx * dx + dy * dy <= r * r;
      case ShapeKind::square: return std::abs(dx) <= r && std::abs(dy) <= r;
      case ShapeKind::triangle: return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2;
    }
    return false;
  }
};

struct Expression {
  Template kind = Template::color_shape;
  ShapeKind shape = ShapeKind::circle;
  int color = -1;  // -1: not mentioned
  int size = -1;   // -1: not mentioned, 0 small, 1 large
  Direction direction = Direction::left;
  int ordinal = 0;  // 0-based rank for Template::ordinal

  std::string words() const {
    const std::string s = kShapeNames[static_cast<int>(shape)];
    const std::string c = color >= 0 ? std::string(kColorNames[static_cast<std::size_t>(color)]) + " " : "";
    switch (kind) {
      case Template::color_shape: return c + s;
      case Template::size_color_shape: return std::string(size == 1 ? "large " : "small ") + c + s;
      case Template::shape_direction: return s + " " + kDirectionNames[static_cast<int>(direction)];
      case Template::ordinal:
        return std::string("the ") + kOrdinalNames[static_cast<std::size_t>(ordinal)] + " " + c + s + " from " +
               kDirectionNames[static_cast<int>(direction)];
    }
    return s;
  }
};

namespace detail {

inline bool attribute_match(const Expression& e, const SceneObject& o) {
  if (o.shape != e.shape) return false;
  if (e.color >= 0 && o.color != e.color) return false;
  if (e.size >= 0 && static_cast<int>(o.large) != e.size) return false;
  return true;
}

/// Orders candidates along a direction: primary key is the center coordinate
/// (ascending from that side), ties broken by the perpendicular coordinate.
inline void sort_along(std::vector<std::size_t>& idx, const std::vector<SceneObject>& objs, Direction d) {
  auto key = [&](std::size_t i) -> std::pair<double, double> {
    const auto& o = objs[i];
    switch (d) {
      case Direction::left: return {o.cx, o.cy};
      case Direction::right: return {-o.cx, o.cy};
      case Direction::top: return {o.cy, o.cx};
      case Direction::bottom: return {-o.cy, o.cx};
    }
    return {0, 0};
  };
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
}

}  // namespace detail

/// Indices of every object satisfying the expression's predicate.
inline std::vector<std::size_t> referents(const Expression& e, const std::vector<SceneObject>& objs) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < objs.size(); ++i)
    if (detail::attribute_match(e, objs[i])) cand.push_back(i);
  if (e.kind == Template::color_shape || e.kind == Template::size_color_shape) return cand;
  if (cand.empty()) return {};
  detail::sort_along(cand, objs, e.direction);
  // Ranks along the axis count only when neighbours are clearly separated;
  // otherwise the expression names every object too close to call.
  const bool horizontal = e.direction == Direction::left || e.direction == Direction::right;
  auto axis = [&](std::size_t i) { return horizontal ? objs[i].cx : objs[i].cy; };
  const std::size_t rank = e.kind == Template::shape_direction ? 0 : static_cast<std::size_t>(e.ordinal);
  if (rank >= cand.size()) return {};
  std::vector<std::size_t> out{cand[rank]};
  for (std::size_t k = 0; k < cand.size(); ++k) {
    if (k != rank && std::abs(axis(cand[k]) - axis(cand[rank])) < kMinRankGap) out.push_back(cand[k]);
  }
  return out;
}

struct SampleMeta {
  int shape = 0, color = 0, size = 0;
  int rank = -1;  // ordinal rank when the expression uses one
  int direction = -1;
  int template_kind = 0;
  int n_objects = 0;
  int visible_pixels = 0;
  int shape_class_count = 0;  // objects sharing the referent's shape

  std::vector<float> to_vector() const {
    return {static_cast<float>(shape),          static_cast<float>(color),         static_cast<float>(size),
            static_cast<float>(rank),           static_cast<float>(direction),     static_cast<float>(template_kind),
            static_cast<float>(n_objects),      static_cast<float>(visible_pixels), static_cast<float>(shape_class_count)};
  }
  static SampleMeta from_vector(const std::vector<float>& v) {
    if (v.size() != 9) throw DataError("sample meta must have 9 entries");
    SampleMeta m;
    int* fields[] = {&m.shape, &m.color, &m.size, &m.rank, &m.direction, &m.template_kind,
                     &m.n_objects, &m.visible_pixels, &m.shape_class_count};
    for (std::size_t i = 0; i < 9; ++i) *fields[i] = static_cast<int>(v[i]);
    return m;
  }
};

struct Sample {
  std::size_t height = 0, width = 0;
  std::vector<float> image;  // [H×W×3] in [0,1]
  std::vector<float> mask;   // [H×W] of 0/1
  std::vector<int> tokens;   // length T_max
  SampleMeta meta;
  std::vector<SceneObject> objects;  // empty after load()
  Expression expression;

  template <class T>
  Tensor<T> image_tensor() const {
    return Tensor<T>({height, width, 3}, std::vector<T>(image.begin(), image.end()));
  }
  template <class T>
  Tensor<T> mask_tensor() const {
    return Tensor<T>({height, width}, std::vector<T>(mask.begin(), mask.end()));
  }
  std::vector<std::uint8_t> mask_bits() const {
    std::vector<std::uint8_t> out(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] != 0.0f;
    return out;
  }
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Paints objects in z-order into an id map (-1 = background).
inline std::vector<int> rasterize(const std::vector<SceneObject>& objs, std::size_t h, std::size_t w) {
  std::vector<int> ids(h * w, -1);
  for (std::size_t k = 0; k < objs.size(); ++k)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        if (objs[k].covers(x, y)) ids[y * w + x] = static_cast<int>(k);
  return ids;
}

struct GeneratorOptions {
  std::size_t height = 64, width = 64, t_max = 16;
  double crowd_probability = 0.7;
  std::size_t max_retries = 200;
};

namespace detail {

inline std::vector<SceneObject> random_scene(std::mt19937_64& rng, const GeneratorOptions& opt, bool crowd) {
  std::discrete_distribution<int> count_dist({0, 0, 4, 4, 3, 2, 1});  // 2..6 objects
  const int n = count_dist(rng);
  std::uniform_int_distribution<int> shape_dist(0, 2), color_dist(0, 5), coin(0, 1);
  std::vector<SceneObject> objs(static_cast<std::size_t>(n));
  const double scale = static_cast<double>(std::min(opt.height, opt.width)) / 64.0;
  for (auto& o : objs) {
    o.shape = static_cast<ShapeKind>(shape_dist(rng));
    o.color = color_dist(rng);
    o.large = coin(rng) == 1;
    std::uniform_real_distribution<double> rad(o.large ? 9.0 : 5.0, o.large ? 12.0 : 7.0);
    o.r = rad(rng) * scale;
    std::uniform_real_distribution<double> px(o.r, static_cast<double>(opt.width) - o.r);
    std::uniform_real_distribution<double> py(o.r, static_cast<double>(opt.height) - o.r);
    o.cx = px(rng);
    o.cy = py(rng);
  }
  if (crowd) objs[1].shape = objs[0].shape;
  return objs;
}

inline std::vector<Expression> candidate_expressions(const std::vector<SceneObject>& objs, std::size_t target) {
  const SceneObject& o = objs[target];
  std::vector<Expression> out;
  Expression e;
  e.shape = o.shape;
  e.kind = Template::color_shape;
  e.color = o.color;
  out.push_back(e);
  e.kind = Template::size_color_shape;
  e.size = o.large ? 1 : 0;
  out.push_back(e);
  e.size = -1;
  for (int d = 0; d < 4; ++d) {
    Expression s;
    s.kind = Template::shape_direction;
    s.shape = o.shape;
    s.direction = static_cast<Direction>(d);
    out.push_back(s);
    for (int with_color = 0; with_color < 2; ++with_color) {
      Expression q;
      q.kind = Template::ordinal;
      q.shape = o.shape;
      q.color = with_color ? o.color : -1;
      q.direction = static_cast<Direction>(d);
      std::vector<std::size_t> cand;
      for (std::size_t i = 0; i < objs.size(); ++i)
        if (attribute_match(q, objs[i])) cand.push_back(i);
      sort_along(cand, objs, q.direction);
      const auto pos = std::find(cand.begin(), cand.end(), target) - cand.begin();
      if (cand.size() < 2 || pos >= 4) continue;
      q.ordinal = static_cast<int>(pos);
      out.push_back(q);
    }
  }
  return out;
}

}  // namespace detail

/// Generates sample `index` of the stream identified by `seed`. The sample's
/// generator is seeded from splitmix64(seed ^ index) alone, so samples can be
/// produced in any order.
inline Sample generate_sample(std::uint64_t seed, std::uint64_t index, const GeneratorOptions& opt = {}) {
  std::mt19937_64 rng(splitmix64(seed ^ index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::array<double, 4> template_weight{0.3, 0.2, 0.2, 0.3};
  const std::size_t h = opt.height, w = opt.width;

  for (std::size_t attempt = 0; attempt < opt.max_retries; ++attempt) {
    const bool crowd = unit(rng) < opt.crowd_probability;
    std::vector<SceneObject> objs = detail::random_scene(rng, opt, crowd);
    const std::vector<int> ids = rasterize(objs, h, w);
    std::vector<int> visible(objs.size(), 0);
    for (int id : ids)
      if (id >= 0) ++visible[static_cast<std::size_t>(id)];
    // Every object keeps at least half of its own area in view.
    bool ok = true;
    for (std::size_t k = 0; k < objs.size() && ok; ++k) {
      int full = 0;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) full += objs[k].covers(x, y);
      ok = full > 0 && 2 * visible[k] >= full;
    }
    if (!ok) continue;

    std::vector<std::size_t> pool;
    for (std::size_t k = 0; k < objs.size(); ++k) {
      const auto same = std::count_if(objs.begin(), objs.end(), [&](const SceneObject& o) { return o.shape == objs[k].shape; });
      if (!crowd || same >= 2) pool.push_back(k);
    }
    const std::size_t target = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];

    std::vector<Expression> valid;
    for (const Expression& e : detail::candidate_expressions(objs, target)) {
      const auto r = referents(e, objs);
      if (r.size() == 1 && r.front() == target) valid.push_back(e);
    }
    if (valid.empty()) continue;
    // Template kind first (weighted over the kinds that can name the target),
    // then uniformly among that kind's valid expressions.
    std::array<double, 4> weights{};
    for (const auto& e : valid) weights[static_cast<std::size_t>(e.kind)] = template_weight[static_cast<std::size_t>(e.kind)];
    const auto kind = static_cast<Template>(std::discrete_distribution<int>(weights.begin(), weights.end())(rng));
    std::vector<Expression> of_kind;
    for (const auto& e : valid)
      if (e.kind == kind) of_kind.push_back(e);
    const Expression expr = of_kind[std::uniform_int_distribution<std::size_t>(0, of_kind.size() - 1)(rng)];

    Sample s;
    s.height = h;
    s.width = w;
    s.image.assign(h * w * 3, kBackground);
    s.mask.assign(h * w, 0.0f);
    for (std::size_t p = 0; p < h * w; ++p) {
      if (ids[p] < 0) continue;
      const auto& rgb = kColorRgb[static_cast<std::size_t>(objs[static_cast<std::size_t>(ids[p])].color)];
      std::copy(rgb.begin(), rgb.end(), s.image.begin() + static_cast<std::ptrdiff_t>(3 * p));
      if (static_cast<std::size_t>(ids[p]) == target) s.mask[p] = 1.0f;
    }
    s.tokens = tokenize(expr.words(), opt.t_max);
    const SceneObject& o = objs[target];
    s.meta.shape = static_cast<int>(o.shape);
    s.meta.color = o.color;
    s.meta.size = o.large ? 1 : 0;
    s.meta.rank = expr.kind == Template::ordinal ? expr.ordinal : -1;
    s.meta.direction =
        expr.kind == Template::ordinal || expr.kind == Template::shape_direction ? static_cast<int>(expr.direction) : -1;
    s.meta.template_kind = static_cast<int>(expr.kind);
    s.meta.n_objects = static_cast<int>(objs.size());
    s.meta.visible_pixels = visible[target];
    s.meta.shape_class_count =
        static_cast<int>(std::count_if(objs.begin(), objs.end(), [&](const SceneObject& x) { return x.shape == o.shape; }));
    s.objects = std::move(objs);
    s.expression = expr;
    return s;
  }
  throw DataError("generate: no scene with a uniquely referable object after " + std::to_string(opt.max_retries) +
                  " attempts (seed " + std::to_string(seed) + ", index " + std::to_string(index) + ")");
}

/// n samples with indices base, base+1, ...
inline std::vector<Sample> generate(std::uint64_t seed, std::size_t n, std::uint64_t base = 0,
                                    const GeneratorOptions& opt = {}) {
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(seed, base + i, opt));
  return out;
}

/// Index offsets that keep the train/val/test streams disjoint.
inline constexpr std::array<std::uint64_t, 3> kSplitBase{0, 1ULL << 32, 2ULL << 32};
inline constexpr std::array<const char*, 3> kSplitNames{"train", "val", "test"};

struct Dataset {
  std::vector<Sample> train, val, test;

  const std::vector<Sample>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "'");
  }
};

inline Dataset generate_dataset(const DataConfig& cfg, std::size_t image_size, std::size_t t_max) {
  GeneratorOptions opt;
  opt.height = opt.width = image_size;
  opt.t_max = t_max;
  Dataset d;
  d.train = generate(cfg.seed, cfg.n_train, kSplitBase[0], opt);
  d.val = generate(cfg.seed, cfg.n_val, kSplitBase[1], opt);
  d.test = generate(cfg.seed, cfg.n_test, kSplitBase[2], opt);
  return d;
}

inline std::vector<catn::Entry> sample_entries(const Sample& s) {
  std::vector<float> tokens(s.tokens.begin(), s.tokens.end());
  return {catn::Entry{"image", {s.height, s.width, 3}, s.image},
          catn::Entry{"mask", {s.height, s.width}, s.mask},
          catn::Entry{"tokens", {tokens.size()}, tokens},
          catn::Entry{"meta", {9}, s.meta.to_vector()}};
}

inline Sample sample_from_entries(const std::vector<catn::Entry>& entries) {
  auto floats = [&](const std::string& name, std::size_t rank) -> const catn::Entry& {
    const catn::Entry& e = catn::find(entries, name);
    if (e.dtype() != catn::DType::f32 || e.shape.size() != rank) {
      throw DataError("sample tensor '" + name + "' has unexpected type or rank");
    }
    return e;
  };
  Sample s;
  const auto& img = floats("image", 3);
  if (img.shape[2] != 3) throw DataError("sample image must have 3 channels");
  s.height = img.shape[0];
  s.width = img.shape[1];
  s.image = std::get<0>(img.values);
  const auto& mask = floats("mask", 2);
  if (mask.shape[0] != s.height || mask.shape[1] != s.width) throw DataError("sample mask does not match image");
  s.mask = std::get<0>(mask.values);
  for (float v : std::get<0>(floats("tokens", 1).values)) s.tokens.push_back(static_cast<int>(v));
  s.meta = SampleMeta::from_vector(std::get<0>(floats("meta", 1).values));
  return s;
}

/// Writes `dir/samples/{idx}.catn` and `dir/manifest.txt`.
inline void save_split(const std::vector<Sample>& samples, const std::filesystem::path& dir, std::uint64_t seed) {
  std::filesystem::create_directories(dir / "samples");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    catn::save(dir / "samples" / (std::to_string(i) + ".catn"), sample_entries(samples[i]));
  }
  std::ofstream m(dir / "manifest.txt");
  m << "generator_version = " << kGeneratorVersion << "\n"
    << "seed = " << seed << "\n"
    << "count = " << samples.size() << "\n"
    << "vocab_size = " << Vocabulary::size() << "\n"
    << "vocab_hash = " << Vocabulary::hash() << "\n";
  if (!m) throw DataError("cannot write manifest in " + dir.string());
}

inline std::vector<Sample> load_split(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.txt");
  if (!m) throw DataError("missing manifest.txt in " + dir.string());
  std::size_t count = 0;
  bool have_count = false;
  std::string line;
  while (std::getline(m, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    if (key == "count") {
      count = std::stoull(value);
      have_count = true;
    } else if (key == "vocab_hash" && value != std::to_string(Vocabulary::hash())) {
      throw DataError(dir.string() + " was generated with a different vocabulary");
    } else if (key == "generator_version" && value != std::to_string(kGeneratorVersion)) {
      throw DataError(dir.string() + " was generated by generator version " + value);
    }
  }
  if (!have_count) throw DataError("manifest in " + dir.string() + " has no count");
  std::vector<Sample> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(sample_from_entries(catn::load(dir / "samples" / (std::to_string(i) + ".catn"))));
  }
  return out;
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& dir, std::uint64_t seed) {
  save_split(d.train, dir / "train", seed);
  save_split(d.val, dir / "val", seed);
  save_split(d.test, dir / "test", seed);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  return Dataset{load_split(dir / "train"), load_split(dir / "val"), load_split(dir / "test")};
}

}  // namespace coupalign
