#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctxguard/geometry.hpp"
#include "ctxguard/numerics.hpp"

namespace ctxguard {

inline constexpr int kNumCategories = 8;
inline constexpr int kBackground = kNumCategories;  // the explicit 9th label
inline constexpr int kNumClasses = kNumCategories + 1;

std::string_view category_name(int category);

struct GtObject {
  int category = 0;
  Box box;

  friend bool operator==(const GtObject&, const GtObject&) = default;
};

struct Scene {
  int index = 0;
  int context_group = 0;
  Image image;
  std::vector<GtObject> objects;
  std::vector<Box> proposals;

  friend bool operator==(const Scene&, const Scene&) = default;
};

/// Which categories co-occur. Confusable pairs render near-identical glyphs,
/// so only the surrounding objects tell them apart.
struct ContextModel {
  std::vector<std::vector<int>> groups;
  double leak_prob = 0.1;
  std::vector<std::pair<int, int>> confusable_pairs;

  /// 2 groups of 4 with two cross-group confusable pairs.
  static ContextModel standard(double leak_prob = 0.1);

  void validate() const;
  int group_of(int category) const;
  /// Partner of `category` in a confusable pair, or -1.
  int confusable_partner(int category) const;

  friend bool operator==(const ContextModel&, const ContextModel&) = default;
};

struct SceneOptions {
  int min_objects = 2;
  int max_objects = 5;
  double pixel_noise = 0.15;
  double background_noise = 0.05;
  /// Object colour = background + contrast * (category colour - background).
  double contrast = 0.45;
  /// Non-glyph pixels of a box are tinted this far toward the object colour.
  double card_fill = 0.7;
  /// Per-instance uniform colour jitter, per channel.
  double color_jitter = 0.03;
  /// Range of the scene's grey background level.
  double background_min = 0.25;
  double background_max = 0.30;
  int max_placement_attempts = 100;
  double max_pairwise_iou = 0.3;

  friend bool operator==(const SceneOptions&, const SceneOptions&) = default;
};

/// One scene. Throws GenerationError when an object cannot be placed.
Scene generate_scene(Rng& rng, const ContextModel& cm, const SceneOptions& opts = {});

/// Retries generate_scene with the advanced rng until it succeeds.
Scene generate_scene_retrying(Rng& rng, const ContextModel& cm, const SceneOptions& opts = {});

/// One jittered copy per ground-truth box plus 0-2 background distractors,
/// in random order.
std::vector<Box> propose_regions(const Scene& scene, Rng& rng);

/// Jittered copy of a single box (centre shift up to 10% of size, uniform scale
/// in [0.85, 1.18]), clamped to the image.
Box jitter_box(const Box& gt, Rng& rng);

enum class Split { Train, Val };
std::string_view split_name(Split s);
Split parse_split(std::string_view s);

struct Dataset {
  std::vector<Scene> scenes;
  Split split = Split::Train;
  std::uint64_t seed = 0;
  std::string digest;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Stable hex digest of the generation config.
std::string config_digest(const ContextModel& cm, const SceneOptions& opts);

/// Scene i is drawn from Rng(seed).split(i), so the result does not depend on
/// how many workers generate it.
Dataset generate_dataset(std::size_t count, Split split, std::uint64_t seed, const ContextModel& cm,
                         const SceneOptions& opts = {});

/// Seed for a split, derived from the run seed; train and val never coincide.
std::uint64_t split_seed(std::uint64_t run_seed, Split split);

/// JSON-lines: one header line, then one scene per line.
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
std::string dataset_to_string(const Dataset& ds);
Dataset dataset_from_string(const std::string& text);

}  // namespace ctxguard
