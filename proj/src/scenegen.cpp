#include "ctxguard/scenegen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>

#include "ctxguard/errors.hpp"
#include "ctxguard/parallel.hpp"

namespace ctxguard {

namespace {

enum class Glyph { Triangle, Square, Disc, Cross, Stripes, Checker };

struct CategoryStyle {
  std::string_view name;
  Glyph glyph;
  std::array<double, 3> color;
  int min_side;
  int max_side;
  double aspect;  // h / w
};

// Confusable pairs (triangle/diamond, disc/ring) share glyph, size and nearly
// the same colour; the 0.015 offset sits well below the per-instance jitter.
constexpr std::array<CategoryStyle, kNumCategories> kStyles = {{
    {"triangle", Glyph::Triangle, {0.85, 0.55, 0.45}, 14, 22, 1.0},
    {"square", Glyph::Square, {0.50, 0.80, 0.50}, 18, 26, 1.0},
    {"disc", Glyph::Disc, {0.55, 0.60, 0.90}, 10, 18, 1.0},
    {"cross", Glyph::Cross, {0.90, 0.85, 0.40}, 12, 20, 1.0},
    {"diamond", Glyph::Triangle, {0.865, 0.565, 0.465}, 14, 22, 1.0},
    {"ring", Glyph::Disc, {0.565, 0.615, 0.915}, 10, 18, 1.0},
    {"stripes", Glyph::Stripes, {0.80, 0.50, 0.85}, 20, 28, 0.6},
    {"checker", Glyph::Checker, {0.45, 0.85, 0.85}, 14, 20, 1.0},
}};

bool glyph_mask(Glyph g, double u, double v) {
  switch (g) {
    case Glyph::Triangle:
      return v >= 0.1 && v <= 0.9 && std::abs(u - 0.5) <= 0.45 * (v - 0.1) / 0.8;
    case Glyph::Square:
      return u >= 0.15 && u <= 0.85 && v >= 0.15 && v <= 0.85;
    case Glyph::Disc:
      return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.42 * 0.42;
    case Glyph::Cross:
      return std::abs(u - 0.5) <= 0.15 || std::abs(v - 0.5) <= 0.15;
    case Glyph::Stripes:
      return static_cast<int>(v * 5.0) % 2 == 0;
    case Glyph::Checker:
      return (static_cast<int>(u * 3.0) + static_cast<int>(v * 3.0)) % 2 == 0;
  }
  return false;
}

void render_object(Image& img, const GtObject& obj, const std::array<double, 3>& bg, Rng& rng,
                   const SceneOptions& opts) {
  const CategoryStyle& st = kStyles[static_cast<std::size_t>(obj.category)];
  std::array<double, 3> color{};
  for (int c = 0; c < 3; ++c) {
    color[c] = bg[c] + opts.contrast * (st.color[c] - bg[c]) + rng.uniform(-opts.color_jitter, opts.color_jitter);
  }
  const Box& b = obj.box;
  for (int yy = 0; yy < b.h; ++yy) {
    for (int xx = 0; xx < b.w; ++xx) {
      const double u = (xx + 0.5) / b.w;
      const double v = (yy + 0.5) / b.h;
      const double mix = glyph_mask(st.glyph, u, v) ? 1.0 : opts.card_fill;
      if (mix == 0.0) continue;
      for (int c = 0; c < 3; ++c) {
        img.at(b.y + yy, b.x + xx, c) = bg[c] + mix * (color[c] - bg[c]) + opts.pixel_noise * rng.normal();
      }
    }
  }
  // Occlusion strip painted with scene background.
  const bool horizontal = rng.bernoulli(0.5);
  const int span = horizontal ? b.h : b.w;
  const int thick = std::max(1, static_cast<int>(std::lround(rng.uniform(0.15, 0.25) * span)));
  const int start = rng.uniform_int(0, std::max(0, span - thick));
  for (int k = start; k < start + thick && k < span; ++k) {
    const int other = horizontal ? b.w : b.h;
    for (int t = 0; t < other; ++t) {
      const int y = horizontal ? b.y + k : b.y + t;
      const int x = horizontal ? b.x + t : b.x + k;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = bg[c] + opts.background_noise * rng.normal();
    }
  }
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

std::string_view category_name(int category) {
  if (category == kBackground) return "background";
  if (category < 0 || category >= kNumCategories) throw ArgumentError("category out of range");
  return kStyles[static_cast<std::size_t>(category)].name;
}

ContextModel ContextModel::standard(double leak_prob) {
  ContextModel cm;
  cm.groups = {{0, 1, 2, 3}, {4, 5, 6, 7}};
  cm.leak_prob = leak_prob;
  cm.confusable_pairs = {{0, 4}, {2, 5}};
  return cm;
}

void ContextModel::validate() const {
  if (!(leak_prob >= 0.0 && leak_prob <= 1.0)) throw ArgumentError("leak_prob must be in [0,1]");
  if (groups.empty()) throw ArgumentError("context model needs at least one group");
  std::set<int> seen;
  for (const auto& g : groups) {
    if (g.empty()) throw ArgumentError("empty context group");
    for (int c : g) {
      if (c < 0 || c >= kNumCategories) throw ArgumentError("group category out of range");
      if (!seen.insert(c).second) throw ArgumentError("category in more than one group");
    }
  }
  if (static_cast<int>(seen.size()) != kNumCategories) {
    throw ArgumentError("context groups must cover all categories");
  }
  for (const auto& [a, b] : confusable_pairs) {
    if (a < 0 || a >= kNumCategories || b < 0 || b >= kNumCategories) {
      throw ArgumentError("confusable pair category out of range");
    }
    if (group_of(a) == group_of(b)) throw ArgumentError("confusable pair within one group");
  }
}

int ContextModel::group_of(int category) const {
  for (std::size_t g = 0; g < groups.size(); ++g)
    if (std::find(groups[g].begin(), groups[g].end(), category) != groups[g].end())
      return static_cast<int>(g);
  return -1;
}

int ContextModel::confusable_partner(int category) const {
  for (const auto& [a, b] : confusable_pairs) {
    if (a == category) return b;
    if (b == category) return a;
  }
  return -1;
}

Scene generate_scene(Rng& rng, const ContextModel& cm, const SceneOptions& opts) {
  cm.validate();
  if (opts.min_objects < 0 || opts.max_objects < opts.min_objects || opts.max_objects > 5) {
    throw ArgumentError("object count range must lie within [0, 5]");
  }
  Scene scene;
  scene.context_group = static_cast<int>(rng.uniform_int(cm.groups.size()));
  const auto& group = cm.groups[static_cast<std::size_t>(scene.context_group)];

  std::vector<int> outside;
  for (int c = 0; c < kNumCategories; ++c)
    if (cm.group_of(c) != scene.context_group) outside.push_back(c);

  const int n = rng.uniform_int(opts.min_objects, opts.max_objects);
  std::vector<int> cats;
  for (int i = 0; i < n; ++i) {
    int c = group[rng.uniform_int(group.size())];
    if (!outside.empty() && rng.bernoulli(cm.leak_prob)) c = outside[rng.uniform_int(outside.size())];
    cats.push_back(c);
  }

  std::array<double, 3> bg{};
  const double base = rng.uniform(opts.background_min, opts.background_max);
  for (int c = 0; c < 3; ++c) bg[c] = base + rng.uniform(-0.03, 0.03);

  scene.image = Image(kImageSide, kImageSide);
  for (int y = 0; y < kImageSide; ++y)
    for (int x = 0; x < kImageSide; ++x)
      for (int c = 0; c < 3; ++c) scene.image.at(y, x, c) = bg[c] + opts.background_noise * rng.normal();

  for (int c : cats) {
    const CategoryStyle& st = kStyles[static_cast<std::size_t>(c)];
    bool placed = false;
    for (int attempt = 0; attempt < opts.max_placement_attempts && !placed; ++attempt) {
      Box b;
      b.w = rng.uniform_int(st.min_side, st.max_side);
      b.h = std::max(kMinBoxSide, static_cast<int>(std::lround(b.w * st.aspect)));
      b.x = rng.uniform_int(0, kImageSide - b.w);
      b.y = rng.uniform_int(0, kImageSide - b.h);
      const bool clear = std::all_of(scene.objects.begin(), scene.objects.end(), [&](const GtObject& o) {
        return iou(o.box, b) < opts.max_pairwise_iou;
      });
      if (clear) {
        scene.objects.push_back({c, b});
        placed = true;
      }
    }
    if (!placed) throw GenerationError("could not place object after " +
                                       std::to_string(opts.max_placement_attempts) + " attempts");
  }
  for (const auto& obj : scene.objects) render_object(scene.image, obj, bg, rng, opts);
  for (double& v : scene.image.pixels()) v = quantize(v);
  return scene;
}

Scene generate_scene_retrying(Rng& rng, const ContextModel& cm, const SceneOptions& opts) {
  for (;;) {
    try {
      return generate_scene(rng, cm, opts);
    } catch (const GenerationError&) {
    }
  }
}

Box jitter_box(const Box& gt, Rng& rng) {
  const double cx = gt.x + gt.w / 2.0 + rng.uniform(-0.1, 0.1) * gt.w;
  const double cy = gt.y + gt.h / 2.0 + rng.uniform(-0.1, 0.1) * gt.h;
  const double s = rng.uniform(0.85, 1.18);
  Box b;
  b.w = std::max(kMinBoxSide, static_cast<int>(std::lround(gt.w * s)));
  b.h = std::max(kMinBoxSide, static_cast<int>(std::lround(gt.h * s)));
  b.x = static_cast<int>(std::lround(cx - b.w / 2.0));
  b.y = static_cast<int>(std::lround(cy - b.h / 2.0));
  return clamp_box(b);
}

std::vector<Box> propose_regions(const Scene& scene, Rng& rng) {
  std::vector<Box> out;
  for (const auto& obj : scene.objects) out.push_back(jitter_box(obj.box, rng));
  const int distractors = rng.uniform_int(0, 2);
  for (int d = 0; d < distractors; ++d) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      Box b;
      b.w = rng.uniform_int(10, 22);
      b.h = rng.uniform_int(10, 22);
      b.x = rng.uniform_int(0, kImageSide - b.w);
      b.y = rng.uniform_int(0, kImageSide - b.h);
      const bool background = std::all_of(scene.objects.begin(), scene.objects.end(),
                                           [&](const GtObject& o) { return iou(o.box, b) < 0.1; });
      if (background) {
        out.push_back(b);
        break;
      }
    }
  }
  rng.shuffle(out);
  return out;
}

std::string_view split_name(Split s) { return s == Split::Train ? "train" : "val"; }

Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  throw ArgumentError("unknown split '" + std::string(s) + "'");
}

std::uint64_t split_seed(std::uint64_t run_seed, Split split) {
  return mix64(run_seed * 2 + (split == Split::Train ? 0 : 1) + 0x5851F42D4C957F2DULL);
}

Dataset generate_dataset(std::size_t count, Split split, std::uint64_t seed, const ContextModel& cm,
                         const SceneOptions& opts) {
  cm.validate();
  Dataset ds;
  ds.split = split;
  ds.seed = seed;
  ds.digest = config_digest(cm, opts);
  ds.scenes.resize(count);
  const Rng root(seed);
  parallel_for(count, [&](std::size_t i) {
    Rng scene_rng = root.split(2 * i);
    Rng proposal_rng = root.split(2 * i + 1);
    Scene s = generate_scene_retrying(scene_rng, cm, opts);
    s.index = static_cast<int>(i);
    s.proposals = propose_regions(s, proposal_rng);
    ds.scenes[i] = std::move(s);
  });
  return ds;
}

}  // namespace ctxguard
