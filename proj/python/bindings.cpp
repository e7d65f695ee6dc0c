// Python bindings: data generation, metrics, the optimizer and the pipeline stages.

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "ctxguard/attacks.hpp"
#include "ctxguard/config.hpp"
#include "ctxguard/encoder.hpp"
#include "ctxguard/errors.hpp"
#include "ctxguard/eval.hpp"
#include "ctxguard/parallel.hpp"
#include "ctxguard/pipeline.hpp"
#include "ctxguard/scg.hpp"

namespace py = pybind11;
using namespace ctxguard;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

Array image_array(const Image& img) {
  Array out({static_cast<py::ssize_t>(img.height()), static_cast<py::ssize_t>(img.width()),
             static_cast<py::ssize_t>(kChannels)});
  std::copy(img.pixels().begin(), img.pixels().end(), out.mutable_data());
  return out;
}

std::vector<double> to_vector(const Array& a) { return {a.data(), a.data() + a.size()}; }

py::tuple box_tuple(const Box& b) { return py::make_tuple(b.x, b.y, b.w, b.h); }

Box to_box(const py::sequence& s) {
  if (py::len(s) != 4) throw ArgumentError("a box is (x, y, w, h)");
  return Box{s[0].cast<int>(), s[1].cast<int>(), s[2].cast<int>(), s[3].cast<int>()};
}

py::dict scene_dict(const Scene& s) {
  py::list objects, proposals;
  for (const auto& o : s.objects) objects.append(py::make_tuple(o.category, box_tuple(o.box)));
  for (const auto& b : s.proposals) proposals.append(box_tuple(b));
  py::dict d;
  d["index"] = s.index;
  d["context_group"] = s.context_group;
  d["image"] = image_array(s.image);
  d["objects"] = objects;
  d["proposals"] = proposals;
  return d;
}

// Predictions are (category, box, confidence); ground truths are (category, box).
std::vector<Detection> to_preds(const py::sequence& seq) {
  std::vector<Detection> out;
  for (const auto& item : seq) {
    const auto t = item.cast<py::sequence>();
    Detection d;
    d.category = t[0].cast<int>();
    d.box = to_box(t[1].cast<py::sequence>());
    d.confidence = t[2].cast<double>();
    out.push_back(d);
  }
  return out;
}

std::vector<GtObject> to_gts(const py::sequence& seq) {
  std::vector<GtObject> out;
  for (const auto& item : seq) {
    const auto t = item.cast<py::sequence>();
    out.push_back({t[0].cast<int>(), to_box(t[1].cast<py::sequence>())});
  }
  return out;
}

PredsByScene to_pred_scenes(const py::sequence& seq) {
  PredsByScene out;
  for (const auto& s : seq) out.push_back(to_preds(s.cast<py::sequence>()));
  return out;
}

GtsByScene to_gt_scenes(const py::sequence& seq) {
  GtsByScene out;
  for (const auto& s : seq) out.push_back(to_gts(s.cast<py::sequence>()));
  return out;
}

// Python objective: f(x: ndarray) -> (value, grad).
Objective wrap_objective(const py::function& f) {
  return [f](std::span<const double> x) {
    py::gil_scoped_acquire gil;
    Array arr(static_cast<py::ssize_t>(x.size()));
    std::copy(x.begin(), x.end(), arr.mutable_data());
    const py::tuple r = f(arr).cast<py::tuple>();
    ValueGrad vg;
    vg.value = r[0].cast<double>();
    vg.grad = to_vector(r[1].cast<Array>());
    return vg;
  };
}

RunConfig run_config(const std::string& config_json, std::optional<std::uint64_t> seed,
                     std::optional<std::string> out) {
  RunConfig cfg = config_from_string(config_json);
  if (seed) cfg.seed = *seed;
  if (out) cfg.output_dir = *out;
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "ctxguard native core";

  // Translators run newest first, so the base class is registered first.
  const auto error = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", error.ptr());
  py::register_exception<PrerequisiteError>(m, "PrerequisiteError", error.ptr());
  py::register_exception<ConsistencyError>(m, "ConsistencyError", error.ptr());
  py::register_exception<ParseError>(m, "ParseError", error.ptr());

  m.attr("IMAGE_SIDE") = kImageSide;
  m.attr("NUM_CATEGORIES") = kNumCategories;
  m.attr("BACKGROUND") = kBackground;

  m.def("thread_count", &thread_count, "Worker count (CTXGUARD_THREADS caps it).");
  m.def("category_name", [](int c) { return std::string(category_name(c)); });
  m.def("iou", [](const py::sequence& a, const py::sequence& b) { return iou(to_box(a), to_box(b)); });
  m.def("softmax", [](const Array& v) {
    const auto p = softmax(to_vector(v));
    return Array(static_cast<py::ssize_t>(p.size()), p.data());
  });
  m.def("positional_encoding", [](std::size_t n, std::size_t d) { return to_array(positional_encoding(n, d)); });

  m.def(
      "generate_dataset",
      [](std::size_t count, const std::string& split, std::uint64_t seed, double leak_prob) {
        Dataset ds = generate_dataset(count, parse_split(split), seed, ContextModel::standard(leak_prob));
        py::list scenes;
        for (const auto& s : ds.scenes) scenes.append(scene_dict(s));
        return py::make_tuple(scenes, ds.digest);
      },
      py::arg("count"), py::arg("split") = "train", py::arg("seed") = 0, py::arg("leak_prob") = 0.1,
      "Scenes as dicts (image is an H x W x 3 array) plus the config digest.");
  m.def("split_seed", [](std::uint64_t seed, const std::string& split) { return split_seed(seed, parse_split(split)); });

  m.def(
      "average_precision",
      [](int category, const py::sequence& preds, const py::sequence& gts, double tau) {
        return average_precision(category, to_pred_scenes(preds), to_gt_scenes(gts), tau);
      },
      py::arg("category"), py::arg("preds"), py::arg("gts"), py::arg("tau") = 0.5,
      "101-point AP; preds[scene] = [(category, box, confidence)], gts[scene] = [(category, box)].");
  m.def(
      "map_sweep",
      [](const py::sequence& preds, const py::sequence& gts) {
        const MapResult r = map_sweep(to_pred_scenes(preds), to_gt_scenes(gts));
        return py::make_tuple(r.map50, r.map5095);
      },
      "(mAP@0.5, mAP@[0.5:0.95]).");
  m.def("f1_micro",
        [](const py::sequence& preds, const py::sequence& gts, double tau, double score_min) {
          return f1_micro(to_pred_scenes(preds), to_gt_scenes(gts), tau, score_min);
        },
        py::arg("preds"), py::arg("gts"), py::arg("tau") = 0.5, py::arg("score_min") = 0.5);
  m.def(
      "auc",
      [](const Array& pos, const Array& neg, const std::string& mode) {
        if (mode != "rank" && mode != "sweep") throw ArgumentError("mode must be 'rank' or 'sweep'");
        return auc_from_scores(to_vector(pos), to_vector(neg),
                               mode == "rank" ? AucMode::RankStatistic : AucMode::ThresholdSweep);
      },
      py::arg("positives"), py::arg("negatives"), py::arg("mode") = "rank", "None when either class is empty.");

  m.def(
      "grad_check",
      [](const py::function& f, const Array& x, double h) {
        const auto v = to_vector(x);
        return grad_check(wrap_objective(f), v, h);
      },
      py::arg("f"), py::arg("x"), py::arg("h") = 1e-5, "f(x) -> (value, grad); max relative error.");
  m.def(
      "scg_minimize",
      [](const py::function& f, const Array& w0, int max_iters, double grad_tol) {
        ScgOptions opts;
        opts.max_iters = max_iters;
        opts.grad_tol = grad_tol;
        const auto start = to_vector(w0);
        const ScgResult r = scg_minimize(wrap_objective(f), start, opts);
        py::dict d;
        d["w"] = Array(static_cast<py::ssize_t>(r.w.size()), r.w.data());
        d["value"] = r.value;
        d["grad_norm"] = r.grad_norm;
        d["converged"] = r.converged;
        d["iterations"] = r.trace.iterations.size();
        d["accepted"] = r.trace.accepted_count();
        py::list objectives;
        for (const auto& it : r.trace.iterations)
          if (it.accepted) objectives.append(it.objective);
        d["accepted_objectives"] = objectives;
        return d;
      },
      py::arg("f"), py::arg("w0"), py::arg("max_iters") = 500, py::arg("grad_tol") = 1e-8);

  m.def("default_config", [] { return config_to_string(RunConfig{}); }, "Every config field as JSON.");
  m.def(
      "run_stage",
      [](const std::string& stage, const std::string& config_json, std::optional<std::uint64_t> seed,
         std::optional<std::string> out, std::optional<std::string> kind, const std::string& model,
         const std::string& mode) {
        const RunConfig cfg = run_config(config_json, seed, out);
        std::ostringstream log;
        py::gil_scoped_release release;
        if (stage == "gen") {
          cmd_gen(cfg, log);
        } else if (stage == "train-backbone") {
          cmd_train_backbone(cfg, log);
        } else if (stage == "train-tedm") {
          cmd_train_tedm(cfg, log);
        } else if (stage == "attack") {
          if (!kind) throw ConfigError("attack needs kind='fff' or 'uap'");
          cmd_attack(cfg, parse_attack_kind(*kind), log);
        } else if (stage == "eval") {
          Condition c;
          c.model = model;
          if (kind && *kind != "none") {
            c.attack = parse_attack_kind(*kind);
            c.mode = parse_apply_mode(mode);
          }
          cmd_eval(cfg, c, log);
        } else if (stage == "compare") {
          cmd_compare(cfg, log);
        } else {
          throw ConfigError("unknown stage '" + stage + "'");
        }
        return log.str();
      },
      py::arg("stage"), py::arg("config_json") = "{}", py::arg("seed") = py::none(), py::arg("out") = py::none(),
      py::arg("kind") = py::none(), py::arg("model") = "baseline", py::arg("mode") = "whole",
      "Runs one pipeline stage and returns its log text.");
}
