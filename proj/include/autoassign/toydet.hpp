#pragma once

// Desk-scale detector used to exercise the assignment engine end to end:
// synthetic grayscale scenes, a small convolutional dense detector over a
// two or three level pyramid, SGD training, NMS and AP50 evaluation.

#include "autoassign/assign.hpp"
#include "autoassign/diffcore.hpp"
#include "autoassign/geometry.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace autoassign {

/// SplitMix64 finalizer over (base, stream, index); stable across platforms.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index);

// ---- scenes ---------------------------------------------------------------

enum class ShapeKind { kFilledRect, kEllipse, kBottomBar, kLeftBar };

std::string_view to_string(ShapeKind kind);
ShapeKind parse_shape_kind(std::string_view text);

struct CategorySpec {
  ShapeKind shape = ShapeKind::kFilledRect;
  double min_size = 16.0;
  double max_size = 32.0;
  /// Displacement of the evidence from the box center as a fraction of the
  /// box extent: vertical for all shapes except left-bar.
  double evidence_offset = 0.0;
  double intensity = 1.0;
};

struct SceneGenConfig {
  int image_size = 96;
  std::vector<CategorySpec> categories;
  int min_objects = 1;
  int max_objects = 3;
  double noise_std = 0.05;
  /// Faint one-pixel frame along each box; 0 disables it.
  double outline_intensity = 0.25;
  /// Minimum empty pixels between two boxes.
  double min_gap = 2.0;
  int max_retries = 100;

  int num_categories() const { return static_cast<int>(categories.size()); }
  void validate() const;
};

/// 96x96 scenes with three categories: a centered rectangle, a centered
/// ellipse and a bar in the lower half of its box.
SceneGenConfig standard_benchmark();

struct SyntheticScene {
  std::uint64_t seed = 0;
  int id = 0;
  int height = 0;
  int width = 0;
  Eigen::ArrayXd image;  // row-major H*W
  std::vector<GroundTruth> objects;
  /// Objects that could not be placed.
  int dropped = 0;
};

SyntheticScene generate_scene(const SceneGenConfig& cfg, std::uint64_t seed);
std::vector<SyntheticScene> generate_dataset(const SceneGenConfig& cfg, std::uint64_t base_seed,
                                             int count);

/// Pixel region covered by the rendered evidence (before clipping to the box).
Boxd evidence_region(const CategorySpec& spec, const Boxd& box);

// ---- model ----------------------------------------------------------------

struct ModelConfig {
  int image_size = 96;
  int num_categories = 1;
  int channels = 16;
  int head_convs = 1;
  /// Kernel side of the shared head convs: 1 or 3.
  int head_kernel = 1;
  /// Initial left/top/right/bottom extent in stride units.
  double initial_box = 8.0;
  /// Output strides, each twice the previous; the first is 4 or 8.
  std::vector<int> strides{4, 8};
  std::uint64_t seed = 1;

  void validate() const;
};

class DetectorModel {
 public:
  explicit DetectorModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Parameter*> parameter_pointers();
  std::size_t parameter_count() const;
  std::vector<PyramidLevelSpec> levels() const;

  /// Forward pass with weights supplied in parameter order.
  DensePredictions forward(std::span<const DiffArray> weights, const Eigen::ArrayXd& image) const;
  /// Weights bound to `tape`, so backward accumulates into parameter grads.
  DensePredictions forward(Tape& tape, const Eigen::ArrayXd& image);
  /// Untracked forward.
  DensePredictions forward(const Eigen::ArrayXd& image) const;

 private:
  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::size_t backbone_layers_ = 0;
};

// ---- training ---------------------------------------------------------------

struct TrainConfig {
  int iterations = 2000;
  int scenes_per_step = 2;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  /// Fractions of `iterations` after which the rate is multiplied by lr_decay.
  std::vector<double> milestones{2.0 / 3.0, 8.0 / 9.0};
  double lr_decay = 0.1;
  /// Multiplies the learning rate of the center-prior parameters.
  double prior_lr_scale = 0.3;
  /// Global gradient-norm ceiling; 0 disables clipping.
  double clip_grad_norm = 0.0;

  void validate() const;
  double learning_rate_at(int iteration) const;
};

struct TrainLogRecord {
  int iteration = 0;
  double learning_rate = 0.0;
  double total = 0.0;
  double positive = 0.0;
  double negative = 0.0;
  double objectness = 0.0;
  int objects = 0;
  int dropped = 0;
  double grad_norm = 0.0;
  Eigen::ArrayXd mu;
  Eigen::ArrayXd sigma;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(int iteration, std::uint64_t scene_seed, const std::string& what)
      : std::runtime_error(what), iteration_(iteration), scene_seed_(scene_seed) {}
  int iteration() const { return iteration_; }
  std::uint64_t scene_seed() const { return scene_seed_; }

 private:
  int iteration_;
  std::uint64_t scene_seed_;
};

using TrainLogger = std::function<void(const TrainLogRecord&)>;

/// Serial SGD over scenes taken in order, cycling. Each scene's loss is
/// divided by max(1, objects) and by scenes_per_step. Throws TrainingAborted
/// on a non-finite loss.
std::vector<TrainLogRecord> train(DetectorModel& model, CenterPrior& prior, const AssignConfig& assign,
                                  const TrainConfig& cfg, std::span<const SyntheticScene> scenes,
                                  const TrainLogger& logger = {});

// ---- inference and evaluation ---------------------------------------------

struct Detection {
  Boxd box;
  int category = 0;
  double score = 0.0;
  int scene = 0;
};

struct InferenceConfig {
  double score_threshold = 0.05;
  int pre_nms_top_k = 100;
  double nms_iou = 0.6;
  int max_detections = 50;
};

/// Score sigmoid(cls) * sigmoid(obj) per location and category.
std::vector<Detection> detect(const DensePredictions& preds, const LocationSet& locations,
                              const InferenceConfig& cfg, int scene = 0);

/// Greedy per-category suppression of boxes with IoU above the threshold.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold);

struct CategoryEval {
  int category = 0;
  int ground_truths = 0;
  int detections = 0;
  /// NaN when the category has no ground truth.
  double ap = 0.0;
  std::vector<double> precision;
  std::vector<double> recall;
};

struct EvalResult {
  double ap50 = 0.0;
  std::vector<CategoryEval> categories;
  std::vector<int> excluded;
  int ground_truths = 0;
  int detections = 0;
};

/// All-point interpolated AP with greedy highest-score-first matching.
/// `ground_truth[s]` holds the objects of scene s.
EvalResult evaluate_ap(std::span<const Detection> detections,
                       std::span<const std::vector<GroundTruth>> ground_truth, int num_categories,
                       double iou_threshold = 0.5);

std::vector<Detection> detect_dataset(const DetectorModel& model, std::span<const SyntheticScene> scenes,
                                      const InferenceConfig& cfg);

// ---- persistence ----------------------------------------------------------

/// images/scene_<id>.bin (float64, row-major) plus annotations.txt.
void write_dataset(const std::string& directory, std::span<const SyntheticScene> scenes);
std::vector<SyntheticScene> read_dataset(const std::string& directory, int image_size);

/// checkpoint.bin holds the values back to back; checkpoint.manifest lists
/// name, shape and offset per parameter.
void save_checkpoint(const std::string& directory, std::span<const Parameter* const> params);
void load_checkpoint(const std::string& directory, std::span<Parameter* const> params);

}  // namespace autoassign
