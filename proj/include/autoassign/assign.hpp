#pragma once

// Differentiable label assignment: a learnable per-category Gaussian center
// prior, joint classification/localization confidence weighting, positive
// and negative weight maps, and the loss built from them. Fixed baseline
// strategies share the same loss evaluator.

#include "autoassign/diffcore.hpp"
#include "autoassign/geometry.hpp"

#include <Eigen/Core>

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace autoassign {

using RowArrayXXd = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct GroundTruth {
  Boxd box;
  int category = 0;
};

enum class PriorMode { kNone, kFixed, kShared, kCategory };
enum class ConfidenceMode { kFull, kClsOnly, kLocOnly };
enum class ObjectnessMode { kImplicit, kExplicit, kNone };
enum class AssignStrategy { kAutoAssign, kUniformInbox, kCenterSampling, kCenterSamplingScaleRanges };

std::string_view to_string(PriorMode mode);
std::string_view to_string(ConfidenceMode mode);
std::string_view to_string(ObjectnessMode mode);
std::string_view to_string(AssignStrategy strategy);
PriorMode parse_prior_mode(std::string_view text);
ConfidenceMode parse_confidence_mode(std::string_view text);
ObjectnessMode parse_objectness_mode(std::string_view text);
AssignStrategy parse_strategy(std::string_view text);

/// Per-category (mu, sigma) pairs in stride-normalized units, columns (x, y).
class CenterPrior {
 public:
  static constexpr double kSigmaFloor = 1e-3;

  CenterPrior(int num_categories, PriorMode mode, double mu_init = 0.0, double sigma_init = 1.0);

  PriorMode mode() const { return mode_; }
  int num_categories() const { return num_categories_; }
  /// Row of the parameter arrays used by a category (0 for shared).
  Index row(int category) const;

  Parameter& mu() { return mu_; }
  Parameter& sigma() { return sigma_; }
  const Parameter& mu() const { return mu_; }
  const Parameter& sigma() const { return sigma_; }
  Eigen::Array2d mu_of(int category) const;
  Eigen::Array2d sigma_of(int category) const;

  std::vector<Parameter*> parameters();
  void clamp_sigma();

 private:
  PriorMode mode_;
  int num_categories_;
  Parameter mu_;
  Parameter sigma_;
};

/// Prior parameters as arrays on one tape (constants when no tape).
struct BoundPrior {
  const CenterPrior* prior = nullptr;
  DiffArray mu;
  DiffArray sigma;
};

BoundPrior bind_prior(CenterPrior& prior, Tape* tape);

struct AssignConfig {
  double tau = 1.0 / 3.0;
  double lambda = 5.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  ConfidenceMode confidence = ConfidenceMode::kFull;
  ObjectnessMode objectness = ObjectnessMode::kImplicit;
  double iou_clamp_epsilon = 1e-6;
  double probability_floor = 1e-12;
  double explicit_objectness_weight = 1.0;
  EdgePolicy edges = EdgePolicy::kStrictInterior;

  // Replace one factor of the positive confidence by a constant.
  std::optional<double> pin_cls_confidence;
  std::optional<double> pin_loc_confidence;

  AssignStrategy strategy = AssignStrategy::kAutoAssign;
  double center_sampling_radius = 1.5;
  /// Per-level (min, max] bound on max(l, t, r, b) in pixels.
  std::vector<std::pair<double, double>> scale_ranges{{0.0, 32.0}, {32.0, 1e30}};
  /// Uniform baseline uses w+ = 1 instead of 1/|S_n|.
  bool uniform_weight_one = false;

  void validate() const;
};

struct DensePredictions {
  DiffArray cls_logits;  // [L, K]
  DiffArray obj_logits;  // [L, 1]
  DiffArray ltrb;        // [L, 4], positive, pixels
};

class LossError : public std::runtime_error {
 public:
  LossError(std::string term, const std::string& what)
      : std::runtime_error(what), term_(std::move(term)) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

// ---- weighting pieces -----------------------------------------------------

/// exp(-|d - mu|^2 / 2 sigma^2) with the product taken over both axes -> [n].
DiffArray center_weight(const Eigen::ArrayX2d& offsets, int category, const BoundPrior& prior);
/// log of center_weight, computed without the exponential.
DiffArray center_log_weight(const Eigen::ArrayX2d& offsets, int category, const BoundPrior& prior);

/// exp(-lambda * loss).
DiffArray loc_confidence(const DiffArray& loc_loss, double lambda);

/// sigmoid(cls[:, category]) * sigmoid(obj) (objectness none: no factor) -> [n].
DiffArray cls_confidence(const DiffArray& cls_logits, const DiffArray& obj_logits, int category,
                         ObjectnessMode mode);

/// (P+, P-). P- is always the classification confidence.
std::pair<DiffArray, DiffArray> joint_confidence(const DiffArray& cls_conf,
                                                 const DiffArray& loc_conf, ConfidenceMode mode);

/// exp(P+ / tau).
DiffArray confidence_weight(const DiffArray& p_pos, double tau);

/// C*G normalized to sum 1 over the object's in-box locations.
DiffArray positive_weights(const DiffArray& confidence, const DiffArray& center);
/// Same weights from log C and log G, shifted by their maximum so that
/// underflowing center weights cannot produce 0/0.
DiffArray positive_weights_log(const DiffArray& log_confidence, const DiffArray& log_center);

/// 1 - minmax(1 / (1 - iou)) over one in-box set, iou clamped to 1 - epsilon.
/// All-equal sets map to 0.
Eigen::ArrayXd negative_weights(std::span<const double> ious, double epsilon);

// ---- fixed baselines ------------------------------------------------------

struct FixedPositive {
  int object_id = -1;
  std::vector<Index> indices;
  Eigen::ArrayXd weights;
};

struct BaselineAssignment {
  std::vector<FixedPositive> positives;
  /// [L, K] negative-loss weights: 1 negative, 0 ignored as negative.
  RowArrayXXd negative_weight;
  std::vector<int> skipped;
};

BaselineAssignment baseline_assign(AssignStrategy strategy, std::span<const GroundTruth> gts,
                                   const LocationSet& locations, int num_categories,
                                   const AssignConfig& cfg);

// ---- loss -----------------------------------------------------------------

struct ObjectAssignment {
  int object_id = -1;
  int category = 0;
  std::vector<Index> indices;
  Eigen::ArrayXd center;      // G
  Eigen::ArrayXd confidence;  // C
  Eigen::ArrayXd p_pos;
  Eigen::ArrayXd w_pos;
};

/// Detached snapshot of one loss evaluation.
struct AssignmentState {
  std::vector<ObjectAssignment> objects;
  Eigen::ArrayXd w_neg;    // [L], min over owning objects, 1 outside boxes
  Eigen::ArrayXd max_iou;  // [L], max over all ground truths
  std::vector<int> dropped;
};

struct LossBreakdown {
  double total = 0.0;
  double positive = 0.0;
  double negative = 0.0;
  double objectness = 0.0;
  std::vector<double> object_confidence;
};

struct LossOutput {
  DiffArray total;
  DiffArray positive;
  DiffArray negative;
  LossBreakdown breakdown;
  AssignmentState state;
};

/// Positive term -alpha * sum_n log(sum_i w+ P+), negative term
/// -(1 - alpha) * sum (w- P-)^gamma log(1 - w- P-) over all locations and
/// categories, plus the objectness term in explicit mode.
LossOutput autoassign_loss(const DensePredictions& preds, std::span<const GroundTruth> gts,
                           const LocationSet& locations, CenterPrior& prior,
                           const AssignConfig& cfg);
/// Same, with prior arrays already bound (e.g. as gradient-check inputs).
LossOutput autoassign_loss(const DensePredictions& preds, std::span<const GroundTruth> gts,
                           const LocationSet& locations, const BoundPrior& prior,
                           const AssignConfig& cfg);

// ---- weight report --------------------------------------------------------

struct WeightEntry {
  Index location = 0;
  double center = 0.0;
  double confidence = 0.0;
  double p_pos = 0.0;
  double w_pos = 0.0;
};

struct ObjectWeights {
  int object_id = -1;
  int category = 0;
  std::vector<WeightEntry> entries;
};

struct WeightReport {
  std::vector<ObjectWeights> objects;
  Eigen::ArrayXd w_neg;
  Eigen::ArrayXd max_iou;
};

WeightReport export_weight_report(const AssignmentState& state);

/// One positive file per (object, level) and one negative file per level.
/// Returns the paths written.
std::vector<std::string> write_weight_report_csv(const WeightReport& report,
                                                 const LocationSet& locations,
                                                 const std::string& directory);
WeightReport read_weight_report_csv(const LocationSet& locations, const std::string& directory);

}  // namespace autoassign
