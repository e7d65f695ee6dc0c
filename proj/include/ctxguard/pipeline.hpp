#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>

#include "ctxguard/attacks.hpp"
#include "ctxguard/config.hpp"
#include "ctxguard/eval.hpp"

namespace ctxguard {

/// File layout of one run directory.
struct RunPaths {
  std::filesystem::path dir;

  std::filesystem::path train() const { return dir / "train.jsonl"; }
  std::filesystem::path val() const { return dir / "val.jsonl"; }
  std::filesystem::path backbone() const { return dir / "backbone.json"; }
  std::filesystem::path backbone_trace() const { return dir / "backbone_trace.csv"; }
  std::filesystem::path tedm() const { return dir / "tedm.json"; }
  std::filesystem::path tedm_trace() const { return dir / "tedm_trace.csv"; }
  std::filesystem::path perturbation(AttackKind k) const { return dir / ("perturbation_" + attack_kind_name(k) + ".json"); }
  std::filesystem::path attack_report(AttackKind k) const { return dir / ("attack_" + attack_kind_name(k) + ".json"); }
  std::filesystem::path report_dir() const { return dir / "reports"; }
  std::filesystem::path reports_csv() const { return dir / "reports.csv"; }
  std::filesystem::path compare_csv() const { return dir / "compare.csv"; }
  std::filesystem::path lock() const { return dir / ".lock"; }
};

/// Exclusive ownership of a run directory for the lifetime of the object.
/// A lock left by a process that no longer exists is taken over.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// One evaluation condition of the grid.
struct Condition {
  std::string model = "baseline";             // baseline | tedm
  std::optional<AttackKind> attack;            // none when clean
  ApplyMode mode = ApplyMode::Whole;

  std::string attack_name() const { return attack ? attack_kind_name(*attack) : "none"; }
  std::string mode_name() const { return attack ? apply_mode_name(mode) : "none"; }
  std::string stem() const { return model + "_" + attack_name() + "_" + mode_name(); }
};

void cmd_gen(const RunConfig& cfg, std::ostream& log);
void cmd_train_backbone(const RunConfig& cfg, std::ostream& log);
void cmd_train_tedm(const RunConfig& cfg, std::ostream& log);
void cmd_attack(const RunConfig& cfg, AttackKind kind, std::ostream& log);
EvalReport cmd_eval(const RunConfig& cfg, const Condition& cond, std::ostream& log);
void cmd_compare(const RunConfig& cfg, std::ostream& log);

/// Predictions on every val scene for a condition. `tedm` may be null for the
/// baseline; `p` is null for the clean condition.
PredsByScene predict_condition(const Dataset& val, const BackboneWeights& bb, const TedmWeights* tedm,
                               const Perturbation* p, ApplyMode mode);

/// Splits the train set into the backbone part and the rescoring part.
std::pair<Dataset, Dataset> holdout_split(const Dataset& train, double fraction);

/// Parsed reports.csv rows keyed by (model, attack, mode, epsilon, seed).
struct ReportRow {
  std::string model, attack, mode, epsilon, seed;
  double map50 = 0.0, map5095 = 0.0, f1 = 0.0, mean_auc = 0.0;
  std::string fool_rate;
};
std::vector<ReportRow> read_reports_csv(const std::filesystem::path& path);

/// Rows of the comparison table (TEDM minus baseline) in a stable order.
struct CompareRow {
  std::string attack, mode, epsilon, seed;
  double d_map50 = 0.0, d_map5095 = 0.0, d_f1 = 0.0, d_auc = 0.0;
  bool underperforms = false;
};
std::vector<CompareRow> compare_rows(const std::vector<ReportRow>& rows);

}  // namespace ctxguard
