#include "ctxguard/config.hpp"

#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"

#include "ctxguard/errors.hpp"

namespace ctxguard {

using nlohmann::json;

namespace {

/// Reads the known keys of one JSON object and rejects everything else.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + " must be an object");
  }

  bool has(const std::string& key) {
    known_.insert(key);
    return j_.contains(key);
  }

  void number(const std::string& key, double& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(label(key) + " must be a number");
    out = v.get<double>();
  }

  template <typename Int>
  void integer(const std::string& key, Int& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer()) throw ConfigError(label(key) + " must be an integer");
    if constexpr (std::is_unsigned_v<Int>) {
      if (v.is_number_unsigned()) {
        out = static_cast<Int>(v.get<std::uint64_t>());
        return;
      }
      if (v.get<std::int64_t>() < 0) throw ConfigError(label(key) + " must be non-negative");
    }
    const auto raw = v.get<std::int64_t>();
    if (raw < static_cast<std::int64_t>(std::numeric_limits<Int>::min()) ||
        static_cast<std::uint64_t>(raw) > static_cast<std::uint64_t>(std::numeric_limits<Int>::max()))
      throw ConfigError(label(key) + " is out of range");
    out = static_cast<Int>(raw);
  }

  void boolean(const std::string& key, bool& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(label(key) + " must be true or false");
    out = v.get<bool>();
  }

  void string(const std::string& key, std::string& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(label(key) + " must be a string");
    out = v.get<std::string>();
  }

  /// Nested object, or nullptr when absent.
  const json* object(const std::string& key) {
    if (!has(key)) return nullptr;
    return &j_.at(key);
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!known_.count(key)) throw ConfigError("unknown config key '" + child(key) + "'");
    }
  }

 private:
  std::string label() const { return path_.empty() ? "config" : "'" + path_ + "'"; }
  std::string label(const std::string& key) const { return "'" + child(key) + "'"; }

  const json& j_;
  std::string path_;
  std::set<std::string> known_;
};

void read_scene(const json& j, const std::string& path, SceneOptions& s) {
  Section r(j, path);
  r.integer("min_objects", s.min_objects);
  r.integer("max_objects", s.max_objects);
  r.number("pixel_noise", s.pixel_noise);
  r.number("background_noise", s.background_noise);
  r.number("contrast", s.contrast);
  r.number("card_fill", s.card_fill);
  r.number("color_jitter", s.color_jitter);
  r.number("background_min", s.background_min);
  r.number("background_max", s.background_max);
  r.integer("max_placement_attempts", s.max_placement_attempts);
  r.number("max_pairwise_iou", s.max_pairwise_iou);
  r.finish();
}

void read_dataset(const json& j, DatasetConfig& d) {
  Section r(j, "dataset");
  r.integer("train_scenes", d.train_scenes);
  r.integer("val_scenes", d.val_scenes);
  r.number("leak_prob", d.leak_prob);
  if (const json* s = r.object("scene")) read_scene(*s, r.child("scene"), d.scene);
  r.finish();
}

void read_backbone(const json& j, BackboneConfig& b) {
  Section r(j, "backbone");
  r.integer("epochs", b.train.epochs);
  r.number("learning_rate", b.train.learning_rate);
  r.number("momentum", b.train.momentum);
  r.integer("batch_size", b.train.batch_size);
  r.number("weight_decay", b.train.weight_decay);
  r.number("augment_noise", b.train.augment_noise);
  r.number("holdout_split", b.holdout_split);
  r.finish();
}

void read_encoder(const json& j, EncoderConfig& e) {
  Section r(j, "encoder");
  r.integer("d_model", e.d_model);
  r.integer("layers", e.layers);
  r.integer("heads", e.heads);
  r.integer("d_k", e.d_k);
  r.integer("d_ff", e.d_ff);
  r.integer("d_out", e.d_out);
  r.integer("hidden_units", e.hidden_units);
  r.integer("max_seq", e.max_seq);
  r.boolean("use_positional_encoding", e.use_positional_encoding);
  r.boolean("use_boxes", e.use_boxes);
  r.number("layer_norm_eps", e.layer_norm_eps);
  r.finish();
}

void read_scg(const json& j, ScgOptions& s) {
  Section r(j, "scg");
  r.number("sigma0", s.sigma0);
  r.number("lambda0", s.lambda0);
  r.integer("max_iters", s.max_iters);
  r.number("grad_tol", s.grad_tol);
  r.finish();
}

void read_tedm(const json& j, double& l2) {
  Section r(j, "tedm");
  r.number("l2", l2);
  r.finish();
}

void read_attack(const json& j, AttackConfig& a) {
  Section r(j, "attack");
  r.number("epsilon", a.epsilon);
  r.integer("fff_iters", a.fff_iters);
  r.number("target_fool", a.target_fool);
  r.integer("max_epochs", a.max_epochs);
  r.integer("inner_steps", a.inner_steps);
  r.finish();
}

void read_eval(const json& j, EvalConfig& e) {
  Section r(j, "eval");
  std::string mode = e.auc_mode == AucMode::RankStatistic ? "rank" : "sweep";
  r.string("auc_mode", mode);
  if (mode == "rank") {
    e.auc_mode = AucMode::RankStatistic;
  } else if (mode == "sweep") {
    e.auc_mode = AucMode::ThresholdSweep;
  } else {
    throw ConfigError("'eval.auc_mode' must be \"rank\" or \"sweep\"");
  }
  r.finish();
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace

void RunConfig::validate() const {
  require(dataset.train_scenes >= 2, "'dataset.train_scenes' must be at least 2");
  require(dataset.val_scenes >= 1, "'dataset.val_scenes' must be at least 1");
  const SceneOptions& s = dataset.scene;
  require(s.min_objects >= 1 && s.min_objects <= s.max_objects && s.max_objects <= 5,
          "'dataset.scene' object counts must satisfy 1 <= min_objects <= max_objects <= 5");
  require(s.pixel_noise >= 0.0 && s.background_noise >= 0.0, "scene noise levels must be non-negative");
  require(s.contrast > 0.0 && s.contrast <= 1.0, "'dataset.scene.contrast' must be in (0, 1]");
  require(s.card_fill >= 0.0 && s.card_fill < 1.0, "'dataset.scene.card_fill' must be in [0, 1)");
  require(s.color_jitter >= 0.0, "'dataset.scene.color_jitter' must be non-negative");
  require(s.background_min >= 0.0 && s.background_min <= s.background_max && s.background_max <= 1.0,
          "scene background range must satisfy 0 <= min <= max <= 1");
  require(s.max_placement_attempts >= 1, "'dataset.scene.max_placement_attempts' must be positive");
  require(s.max_pairwise_iou > 0.0 && s.max_pairwise_iou <= 1.0, "'dataset.scene.max_pairwise_iou' must be in (0, 1]");
  require(backbone.train.epochs >= 0, "'backbone.epochs' must be non-negative");
  require(backbone.train.learning_rate > 0.0, "'backbone.learning_rate' must be positive");
  require(backbone.train.momentum >= 0.0 && backbone.train.momentum < 1.0, "'backbone.momentum' must be in [0, 1)");
  require(backbone.train.batch_size >= 1, "'backbone.batch_size' must be positive");
  require(backbone.train.weight_decay >= 0.0 && backbone.train.augment_noise >= 0.0,
          "backbone regularisers must be non-negative");
  require(backbone.holdout_split > 0.0 && backbone.holdout_split < 1.0, "'backbone.holdout_split' must be in (0, 1)");
  require(tedm_l2 >= 0.0, "'tedm.l2' must be non-negative");
  require(attack.epsilon >= 0.0 && attack.epsilon <= 1.0, "'attack.epsilon' must be in [0, 1]");
  require(attack.fff_iters >= 0, "'attack.fff_iters' must be non-negative");
  require(attack.target_fool > 0.0 && attack.target_fool <= 1.0, "'attack.target_fool' must be in (0, 1]");
  require(attack.max_epochs >= 1 && attack.inner_steps >= 1, "attack epochs and inner steps must be positive");
  try {
    context_model().validate();
    encoder.validate();
    scg.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
}

ContextModel RunConfig::context_model() const { return ContextModel::standard(dataset.leak_prob); }

RunConfig config_from_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  Section r(doc, "");
  r.integer("seed", cfg.seed);
  std::string out = cfg.output_dir.string();
  r.string("output_dir", out);
  cfg.output_dir = out;
  if (const json* j = r.object("dataset")) read_dataset(*j, cfg.dataset);
  if (const json* j = r.object("backbone")) read_backbone(*j, cfg.backbone);
  if (const json* j = r.object("encoder")) read_encoder(*j, cfg.encoder);
  if (const json* j = r.object("scg")) read_scg(*j, cfg.scg);
  if (const json* j = r.object("tedm")) read_tedm(*j, cfg.tedm_l2);
  if (const json* j = r.object("attack")) read_attack(*j, cfg.attack);
  if (const json* j = r.object("eval")) read_eval(*j, cfg.eval);
  r.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return config_from_string(ss.str());
}

std::string config_to_string(const RunConfig& c) {
  const SceneOptions& s = c.dataset.scene;
  const json doc = {
      {"seed", c.seed},
      {"output_dir", c.output_dir.string()},
      {"dataset",
       {{"train_scenes", c.dataset.train_scenes},
        {"val_scenes", c.dataset.val_scenes},
        {"leak_prob", c.dataset.leak_prob},
        {"scene",
         {{"min_objects", s.min_objects},
          {"max_objects", s.max_objects},
          {"pixel_noise", s.pixel_noise},
          {"background_noise", s.background_noise},
          {"contrast", s.contrast},
          {"card_fill", s.card_fill},
          {"color_jitter", s.color_jitter},
          {"background_min", s.background_min},
          {"background_max", s.background_max},
          {"max_placement_attempts", s.max_placement_attempts},
          {"max_pairwise_iou", s.max_pairwise_iou}}}}},
      {"backbone",
       {{"epochs", c.backbone.train.epochs},
        {"learning_rate", c.backbone.train.learning_rate},
        {"momentum", c.backbone.train.momentum},
        {"batch_size", c.backbone.train.batch_size},
        {"weight_decay", c.backbone.train.weight_decay},
        {"augment_noise", c.backbone.train.augment_noise},
        {"holdout_split", c.backbone.holdout_split}}},
      {"encoder",
       {{"d_model", c.encoder.d_model},
        {"layers", c.encoder.layers},
        {"heads", c.encoder.heads},
        {"d_k", c.encoder.d_k},
        {"d_ff", c.encoder.d_ff},
        {"d_out", c.encoder.d_out},
        {"hidden_units", c.encoder.hidden_units},
        {"max_seq", c.encoder.max_seq},
        {"use_positional_encoding", c.encoder.use_positional_encoding},
        {"use_boxes", c.encoder.use_boxes},
        {"layer_norm_eps", c.encoder.layer_norm_eps}}},
      {"scg",
       {{"sigma0", c.scg.sigma0},
        {"lambda0", c.scg.lambda0},
        {"max_iters", c.scg.max_iters},
        {"grad_tol", c.scg.grad_tol}}},
      {"tedm", {{"l2", c.tedm_l2}}},
      {"attack",
       {{"epsilon", c.attack.epsilon},
        {"fff_iters", c.attack.fff_iters},
        {"target_fool", c.attack.target_fool},
        {"max_epochs", c.attack.max_epochs},
        {"inner_steps", c.attack.inner_steps}}},
      {"eval", {{"auc_mode", c.eval.auc_mode == AucMode::RankStatistic ? "rank" : "sweep"}}}};
  return doc.dump(2) + "\n";
}

}  // namespace ctxguard
