#include "autoassign/assign.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace autoassign {

namespace {

template <typename Enum, std::size_t N>
std::string_view enum_name(const std::array<std::pair<Enum, std::string_view>, N>& table,
                           Enum value) {
  for (const auto& [e, name] : table) {
    if (e == value) return name;
  }
  return "unknown";
}

template <typename Enum, std::size_t N>
Enum enum_parse(const std::array<std::pair<Enum, std::string_view>, N>& table,
                std::string_view text, std::string_view what) {
  for (const auto& [e, name] : table) {
    if (name == text) return e;
  }
  std::string valid;
  for (const auto& [e, name] : table) {
    if (!valid.empty()) valid += ", ";
    valid += name;
  }
  throw std::invalid_argument("unknown " + std::string(what) + " '" + std::string(text) +
                              "' (valid: " + valid + ")");
}

constexpr std::array<std::pair<PriorMode, std::string_view>, 4> kPriorModes{{
    {PriorMode::kNone, "none"},
    {PriorMode::kFixed, "fixed"},
    {PriorMode::kShared, "shared"},
    {PriorMode::kCategory, "category"},
}};
constexpr std::array<std::pair<ConfidenceMode, std::string_view>, 3> kConfidenceModes{{
    {ConfidenceMode::kFull, "full"},
    {ConfidenceMode::kClsOnly, "cls-only"},
    {ConfidenceMode::kLocOnly, "loc-only"},
}};
constexpr std::array<std::pair<ObjectnessMode, std::string_view>, 3> kObjectnessModes{{
    {ObjectnessMode::kImplicit, "implicit"},
    {ObjectnessMode::kExplicit, "explicit"},
    {ObjectnessMode::kNone, "none"},
}};
constexpr std::array<std::pair<AssignStrategy, std::string_view>, 4> kStrategies{{
    {AssignStrategy::kAutoAssign, "autoassign"},
    {AssignStrategy::kUniformInbox, "uniform-inbox"},
    {AssignStrategy::kCenterSampling, "center-sampling"},
    {AssignStrategy::kCenterSamplingScaleRanges, "center-sampling+scale-ranges"},
}};

DiffArray flat_constant(Shape shape, const RowArrayXXd& m) {
  return DiffArray::constant(std::move(shape), Eigen::Map<const Eigen::ArrayXd>(m.data(), m.size()));
}

Tape* tape_of(const DensePredictions& p) {
  for (const DiffArray* a : {&p.cls_logits, &p.obj_logits, &p.ltrb}) {
    if (a->tracked()) return a->tape();
  }
  return nullptr;
}

void check_finite(const DiffArray& term, const std::string& name) {
  const double v = term.item();
  if (!std::isfinite(v)) {
    throw LossError(name, "non-finite " + name + " loss term (" + std::to_string(v) + ")");
  }
}

Eigen::ArrayX2d gather_xy(const LocationSet& locations, std::span<const Index> idx) {
  Eigen::ArrayX2d xy(static_cast<Index>(idx.size()), 2);
  for (std::size_t i = 0; i < idx.size(); ++i) xy.row(static_cast<Index>(i)) = locations.xy.row(idx[i]);
  return xy;
}

// Positive-path pieces shared by the learned and fixed strategies.
struct PositivePath {
  DiffArray p_pos;
};

PositivePath positive_confidence(const DensePredictions& preds, const LocationSet& locations,
                                 std::span<const Index> idx, const GroundTruth& gt,
                                 const AssignConfig& cfg) {
  const DiffArray cls_rows = gather_rows(preds.cls_logits, idx);
  const DiffArray obj_rows = gather_rows(preds.obj_logits, idx);
  const DiffArray ltrb_rows = gather_rows(preds.ltrb, idx);
  const DiffArray boxes = ltrb_decode(ltrb_rows, gather_xy(locations, idx));
  const Index n = static_cast<Index>(idx.size());

  DiffArray cls_conf = cls_confidence(cls_rows, obj_rows, gt.category, cfg.objectness);
  DiffArray loc_conf = loc_confidence(giou_loss(boxes, gt.box), cfg.lambda);
  if (cfg.pin_cls_confidence) cls_conf = DiffArray::full({n}, *cfg.pin_cls_confidence);
  if (cfg.pin_loc_confidence) loc_conf = DiffArray::full({n}, *cfg.pin_loc_confidence);
  return {joint_confidence(cls_conf, loc_conf, cfg.confidence).first};
}

}  // namespace

std::string_view to_string(PriorMode mode) { return enum_name(kPriorModes, mode); }
std::string_view to_string(ConfidenceMode mode) { return enum_name(kConfidenceModes, mode); }
std::string_view to_string(ObjectnessMode mode) { return enum_name(kObjectnessModes, mode); }
std::string_view to_string(AssignStrategy s) { return enum_name(kStrategies, s); }
PriorMode parse_prior_mode(std::string_view t) { return enum_parse(kPriorModes, t, "prior mode"); }
ConfidenceMode parse_confidence_mode(std::string_view t) {
  return enum_parse(kConfidenceModes, t, "confidence mode");
}
ObjectnessMode parse_objectness_mode(std::string_view t) {
  return enum_parse(kObjectnessModes, t, "objectness mode");
}
AssignStrategy parse_strategy(std::string_view t) {
  return enum_parse(kStrategies, t, "assignment strategy");
}

// ---- CenterPrior ------------------------------------------------------------

CenterPrior::CenterPrior(int num_categories, PriorMode mode, double mu_init, double sigma_init)
    : mode_(mode), num_categories_(num_categories) {
  if (num_categories < 1) throw std::invalid_argument("center prior needs at least one category");
  if (!(sigma_init > 0.0)) throw std::invalid_argument("center prior sigma must be positive");
  const Index rows = mode == PriorMode::kShared ? 1 : num_categories;
  const bool learnable = mode == PriorMode::kShared || mode == PriorMode::kCategory;
  mu_ = Parameter("prior.mu", {rows, 2}, Eigen::ArrayXd::Constant(rows * 2, mu_init), learnable);
  sigma_ = Parameter("prior.sigma", {rows, 2}, Eigen::ArrayXd::Constant(rows * 2, sigma_init),
                     learnable);
}

Index CenterPrior::row(int category) const {
  if (category < 0 || category >= num_categories_) {
    throw std::out_of_range("category " + std::to_string(category) + " out of range [0, " +
                            std::to_string(num_categories_) + ")");
  }
  return mode_ == PriorMode::kShared ? 0 : category;
}

Eigen::Array2d CenterPrior::mu_of(int category) const {
  return mu_.value.segment<2>(2 * row(category));
}

Eigen::Array2d CenterPrior::sigma_of(int category) const {
  return sigma_.value.segment<2>(2 * row(category));
}

std::vector<Parameter*> CenterPrior::parameters() { return {&mu_, &sigma_}; }

void CenterPrior::clamp_sigma() { sigma_.value = sigma_.value.max(kSigmaFloor); }

BoundPrior bind_prior(CenterPrior& prior, Tape* tape) {
  BoundPrior bound;
  bound.prior = &prior;
  if (tape != nullptr) {
    bound.mu = tape->bind(prior.mu());
    bound.sigma = tape->bind(prior.sigma());
  } else {
    bound.mu = DiffArray::constant(prior.mu().shape, prior.mu().value);
    bound.sigma = DiffArray::constant(prior.sigma().shape, prior.sigma().value);
  }
  return bound;
}

void AssignConfig::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  if (!(lambda > 0.0)) throw std::invalid_argument("lambda must be positive");
  if (!(focal_gamma >= 0.0)) throw std::invalid_argument("focal gamma must be non-negative");
  if (!(focal_alpha >= 0.0 && focal_alpha <= 1.0)) {
    throw std::invalid_argument("focal alpha must lie in [0, 1]");
  }
  if (!(iou_clamp_epsilon > 0.0 && iou_clamp_epsilon < 1.0)) {
    throw std::invalid_argument("iou clamp epsilon must lie in (0, 1)");
  }
  if (!(probability_floor > 0.0 && probability_floor < 0.5)) {
    throw std::invalid_argument("probability floor must lie in (0, 0.5)");
  }
}

// ---- weighting pieces -----------------------------------------------------

DiffArray center_log_weight(const Eigen::ArrayX2d& offsets, int category, const BoundPrior& prior) {
  const Index n = offsets.rows();
  const Index row = prior.prior->row(category);
  if (prior.prior->mode() == PriorMode::kNone) return DiffArray::full({n}, 0.0);
  Eigen::ArrayXd d(n * 2);
  for (Index i = 0; i < n; ++i) {
    d(2 * i) = offsets(i, 0);
    d(2 * i + 1) = offsets(i, 1);
  }
  const std::array<Index, 1> pick{row};
  const DiffArray mu = gather_rows(prior.mu, pick);
  const DiffArray sigma = gather_rows(prior.sigma, pick);
  const DiffArray z = (DiffArray::constant({n, 2}, std::move(d)) - mu) / sigma;
  return -0.5 * sum(z * z, 1);
}

DiffArray center_weight(const Eigen::ArrayX2d& offsets, int category, const BoundPrior& prior) {
  return exp(center_log_weight(offsets, category, prior));
}

DiffArray loc_confidence(const DiffArray& loc_loss, double lambda) {
  return exp(loc_loss * -lambda);
}

DiffArray cls_confidence(const DiffArray& cls_logits, const DiffArray& obj_logits, int category,
                         ObjectnessMode mode) {
  if (cls_logits.rank() != 2 || category < 0 || category >= cls_logits.dim(1)) {
    throw std::out_of_range("category " + std::to_string(category) + " out of range for logits " +
                            shape_string(cls_logits.shape()));
  }
  const Index n = cls_logits.dim(0);
  const DiffArray cls = reshape(sigmoid(slice_cols(cls_logits, category, 1)), {n});
  if (mode == ObjectnessMode::kNone) return cls;
  return cls * reshape(sigmoid(obj_logits), {n});
}

std::pair<DiffArray, DiffArray> joint_confidence(const DiffArray& cls_conf,
                                                 const DiffArray& loc_conf, ConfidenceMode mode) {
  switch (mode) {
    case ConfidenceMode::kClsOnly: return {cls_conf, cls_conf};
    case ConfidenceMode::kLocOnly: return {loc_conf, cls_conf};
    case ConfidenceMode::kFull: break;
  }
  return {cls_conf * loc_conf, cls_conf};
}

DiffArray confidence_weight(const DiffArray& p_pos, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  return exp(p_pos * (1.0 / tau));
}

DiffArray positive_weights(const DiffArray& confidence, const DiffArray& center) {
  if (confidence.size() == 0) {
    throw std::invalid_argument("positive weights over an empty in-box set");
  }
  const DiffArray cg = confidence * center;
  return cg / sum(cg);
}

DiffArray positive_weights_log(const DiffArray& log_confidence, const DiffArray& log_center) {
  if (log_confidence.size() == 0) {
    throw std::invalid_argument("positive weights over an empty in-box set");
  }
  const DiffArray a = log_confidence + log_center;
  const DiffArray e = exp(a - max(a));
  return e / sum(e);
}

Eigen::ArrayXd negative_weights(std::span<const double> ious, double epsilon) {
  const Index n = static_cast<Index>(ious.size());
  Eigen::ArrayXd f(n);
  for (Index i = 0; i < n; ++i) {
    const double clamped = std::min(ious[static_cast<std::size_t>(i)], 1.0 - epsilon);
    f(i) = 1.0 / (1.0 - clamped);
  }
  if (n == 0) return f;
  const double lo = f.minCoeff();
  const double hi = f.maxCoeff();
  if (hi == lo) return Eigen::ArrayXd::Zero(n);
  return 1.0 - (f - lo) / (hi - lo);
}

// ---- fixed baselines ------------------------------------------------------

BaselineAssignment baseline_assign(AssignStrategy strategy, std::span<const GroundTruth> gts,
                                   const LocationSet& locations, int num_categories,
                                   const AssignConfig& cfg) {
  if (strategy == AssignStrategy::kAutoAssign) {
    throw std::invalid_argument("autoassign is not a fixed baseline strategy");
  }
  BaselineAssignment out;
  out.negative_weight = RowArrayXXd::Ones(locations.size(), num_categories);
  for (std::size_t n = 0; n < gts.size(); ++n) {
    const GroundTruth& gt = gts[n];
    const InBoxIndex inbox = inside_mask(locations, gt.box, static_cast<int>(n), cfg.edges);
    FixedPositive pos;
    pos.object_id = static_cast<int>(n);
    for (Index g : inbox.indices) {
      bool keep = true;
      if (strategy != AssignStrategy::kUniformInbox) {
        const double reach = cfg.center_sampling_radius * locations.stride(g);
        keep = std::abs(locations.xy(g, 0) - gt.box.center_x()) <= reach &&
               std::abs(locations.xy(g, 1) - gt.box.center_y()) <= reach;
      }
      if (keep && strategy == AssignStrategy::kCenterSamplingScaleRanges) {
        const auto l = static_cast<std::size_t>(locations.level[static_cast<std::size_t>(g)]);
        if (l >= cfg.scale_ranges.size()) {
          throw std::invalid_argument("no scale range configured for pyramid level " +
                                      std::to_string(l));
        }
        const double extent = ltrb_encode(locations.xy(g, 0), locations.xy(g, 1), gt.box).maxCoeff();
        keep = extent > cfg.scale_ranges[l].first && extent <= cfg.scale_ranges[l].second;
      }
      if (keep) pos.indices.push_back(g);
    }
    if (pos.indices.empty()) {
      out.skipped.push_back(static_cast<int>(n));
      continue;
    }
    const Index count = static_cast<Index>(pos.indices.size());
    const bool unit = strategy == AssignStrategy::kUniformInbox && cfg.uniform_weight_one;
    pos.weights = Eigen::ArrayXd::Constant(count, unit ? 1.0 : 1.0 / static_cast<double>(count));
    if (strategy != AssignStrategy::kUniformInbox) {
      for (Index g : pos.indices) out.negative_weight(g, gt.category) = 0.0;
    }
    out.positives.push_back(std::move(pos));
  }
  return out;
}

// ---- loss -----------------------------------------------------------------

LossOutput autoassign_loss(const DensePredictions& preds, std::span<const GroundTruth> gts,
                           const LocationSet& locations, CenterPrior& prior,
                           const AssignConfig& cfg) {
  return autoassign_loss(preds, gts, locations, bind_prior(prior, tape_of(preds)), cfg);
}

LossOutput autoassign_loss(const DensePredictions& preds, std::span<const GroundTruth> gts,
                           const LocationSet& locations, const BoundPrior& bound,
                           const AssignConfig& cfg) {
  cfg.validate();
  const Index num_loc = locations.size();
  const int num_cat = bound.prior->num_categories();
  if (preds.cls_logits.shape() != Shape{num_loc, num_cat} ||
      preds.obj_logits.shape() != Shape{num_loc, 1} || preds.ltrb.shape() != Shape{num_loc, 4}) {
    throw std::invalid_argument(
        "predictions " + shape_string(preds.cls_logits.shape()) + ", " +
        shape_string(preds.obj_logits.shape()) + ", " + shape_string(preds.ltrb.shape()) +
        " do not match " + std::to_string(num_loc) + " locations and " + std::to_string(num_cat) +
        " categories");
  }
  for (const GroundTruth& gt : gts) {
    if (gt.category < 0 || gt.category >= num_cat) {
      throw std::out_of_range("ground-truth category " + std::to_string(gt.category) +
                              " out of range");
    }
  }

  for (const DiffArray* a : {&preds.cls_logits, &preds.obj_logits, &preds.ltrb}) {
    if (!a->values().allFinite()) throw LossError("predictions", "non-finite prediction values");
  }

  LossOutput out;
  AssignmentState& state = out.state;

  // Negative weights see only detached proposals.
  const Eigen::ArrayXd ltrb = stop_gradient(preds.ltrb).values();
  state.max_iou = Eigen::ArrayXd::Zero(num_loc);
  for (Index i = 0; i < num_loc; ++i) {
    const double x = locations.xy(i, 0);
    const double y = locations.xy(i, 1);
    const Boxd proposal{x - ltrb(4 * i), y - ltrb(4 * i + 1), x + ltrb(4 * i + 2),
                        y + ltrb(4 * i + 3)};
    for (const GroundTruth& gt : gts) state.max_iou(i) = std::max(state.max_iou(i), iou(proposal, gt.box));
  }
  state.w_neg = Eigen::ArrayXd::Ones(num_loc);
  RowArrayXXd class_w_neg = RowArrayXXd::Ones(num_loc, num_cat);

  std::vector<DiffArray> object_terms;
  const auto add_object = [&](int object_id, std::span<const Index> idx, const DiffArray& p_pos,
                              const DiffArray& w_pos, const Eigen::ArrayXd& center,
                              const Eigen::ArrayXd& confidence) {
    const DiffArray conf = sum(w_pos * p_pos);
    out.breakdown.object_confidence.push_back(conf.item());
    object_terms.push_back(log(clamp(conf, cfg.probability_floor, 1.0)));
    ObjectAssignment snap;
    snap.object_id = object_id;
    snap.category = gts[static_cast<std::size_t>(object_id)].category;
    snap.indices.assign(idx.begin(), idx.end());
    snap.center = center;
    snap.confidence = confidence;
    snap.p_pos = p_pos.values();
    snap.w_pos = w_pos.values();
    state.objects.push_back(std::move(snap));
  };

  if (cfg.strategy == AssignStrategy::kAutoAssign) {
    for (std::size_t n = 0; n < gts.size(); ++n) {
      const GroundTruth& gt = gts[n];
      const InBoxIndex inbox = inside_mask(locations, gt.box, static_cast<int>(n), cfg.edges);
      if (inbox.indices.empty()) {
        state.dropped.push_back(static_cast<int>(n));
        continue;
      }
      const std::span<const Index> idx(inbox.indices);
      const DiffArray p_pos = positive_confidence(preds, locations, idx, gt, cfg).p_pos;
      const DiffArray log_center =
          center_log_weight(center_offsets(locations, idx, gt.box), gt.category, bound);
      const DiffArray w_pos = positive_weights_log(p_pos * (1.0 / cfg.tau), log_center);
      add_object(static_cast<int>(n), idx, p_pos, w_pos, log_center.values().exp(),
                 (p_pos.values() / cfg.tau).exp());

      std::vector<double> ious(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) ious[i] = state.max_iou(idx[i]);
      const Eigen::ArrayXd w_neg = negative_weights(ious, cfg.iou_clamp_epsilon);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const Index g = idx[i];
        const Index r = static_cast<Index>(i);
        class_w_neg(g, gt.category) = std::min(class_w_neg(g, gt.category), w_neg(r));
        state.w_neg(g) = std::min(state.w_neg(g), w_neg(r));
      }
    }
  } else {
    const BaselineAssignment fixed = baseline_assign(cfg.strategy, gts, locations, num_cat, cfg);
    state.dropped = fixed.skipped;
    for (const FixedPositive& pos : fixed.positives) {
      const GroundTruth& gt = gts[static_cast<std::size_t>(pos.object_id)];
      const std::span<const Index> idx(pos.indices);
      const DiffArray p_pos = positive_confidence(preds, locations, idx, gt, cfg).p_pos;
      const Index n = static_cast<Index>(idx.size());
      const DiffArray w_pos = DiffArray::constant({n}, pos.weights);
      add_object(pos.object_id, idx, p_pos, w_pos, Eigen::ArrayXd::Ones(n), Eigen::ArrayXd::Ones(n));
    }
    class_w_neg = fixed.negative_weight;
    state.w_neg = class_w_neg.rowwise().minCoeff();
  }

  // Positive term.
  if (object_terms.empty()) {
    out.positive = DiffArray::scalar(0.0);
  } else {
    std::vector<DiffArray> rows;
    for (const DiffArray& t : object_terms) rows.push_back(reshape(t, {1}));
    out.positive = sum(concat_rows(rows)) * -cfg.focal_alpha;
  }

  // Negative term: every location and category, focal-modulated.
  DiffArray p_neg = sigmoid(preds.cls_logits);
  if (cfg.objectness != ObjectnessMode::kNone) p_neg = p_neg * sigmoid(preds.obj_logits);
  const DiffArray q = p_neg * flat_constant({num_loc, num_cat}, class_w_neg);
  const DiffArray nll = -log(1.0 - clamp(q, 0.0, 1.0 - cfg.probability_floor));
  DiffArray per_entry = nll;
  if (cfg.focal_gamma > 0.0) {
    const DiffArray base =
        cfg.focal_gamma < 1.0 ? clamp(q, cfg.probability_floor, 1.0) : q;
    per_entry = power(base, cfg.focal_gamma) * nll;
  }
  out.negative = sum(per_entry) * (1.0 - cfg.focal_alpha);

  check_finite(out.positive, "positive");
  check_finite(out.negative, "negative");
  out.total = out.positive + out.negative;

  if (cfg.objectness == ObjectnessMode::kExplicit) {
    Eigen::ArrayXd target = Eigen::ArrayXd::Zero(num_loc);
    for (std::size_t n = 0; n < gts.size(); ++n) {
      for (Index g : inside_mask(locations, gts[n].box, static_cast<int>(n), cfg.edges).indices) {
        target(g) = 1.0;
      }
    }
    const DiffArray t = DiffArray::constant({num_loc, 1}, target);
    const DiffArray s = sigmoid(preds.obj_logits);
    const double floor = cfg.probability_floor;
    const DiffArray bce = -(t * log(clamp(s, floor, 1.0)) + (1.0 - t) * log(clamp(1.0 - s, floor, 1.0)));
    const DiffArray objectness = mean(bce) * cfg.explicit_objectness_weight;
    check_finite(objectness, "objectness");
    out.breakdown.objectness = objectness.item();
    out.total = out.total + objectness;
  }

  out.breakdown.positive = out.positive.item();
  out.breakdown.negative = out.negative.item();
  out.breakdown.total = out.total.item();
  return out;
}

// ---- weight report --------------------------------------------------------

WeightReport export_weight_report(const AssignmentState& state) {
  WeightReport report;
  for (const ObjectAssignment& obj : state.objects) {
    ObjectWeights ow;
    ow.object_id = obj.object_id;
    ow.category = obj.category;
    for (std::size_t i = 0; i < obj.indices.size(); ++i) {
      const Index r = static_cast<Index>(i);
      ow.entries.push_back({obj.indices[i], obj.center(r), obj.confidence(r), obj.p_pos(r), obj.w_pos(r)});
    }
    report.objects.push_back(std::move(ow));
  }
  report.w_neg = state.w_neg;
  report.max_iou = state.max_iou;
  return report;
}

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) fields.push_back(f);
  return fields;
}

constexpr const char* kPositiveHeader = "object_id,category,level,row,col,G,C,P_pos,w_pos";
constexpr const char* kNegativeHeader = "level,row,col,w_neg,max_iou";

}  // namespace

std::vector<std::string> write_weight_report_csv(const WeightReport& report,
                                                 const LocationSet& locations,
                                                 const std::string& directory) {
  namespace fs = std::filesystem;
  fs::create_directories(directory);
  std::vector<std::string> written;
  const std::size_t levels = locations.levels.size();
  for (const ObjectWeights& obj : report.objects) {
    for (std::size_t l = 0; l < levels; ++l) {
      const std::string path = (fs::path(directory) / ("positive_obj" + std::to_string(obj.object_id) +
                                                       "_level" + std::to_string(l) + ".csv"))
                                   .string();
      std::ofstream os(path);
      if (!os) throw std::runtime_error("cannot write " + path);
      os << kPositiveHeader << '\n';
      for (const WeightEntry& e : obj.entries) {
        const auto [lev, row, col] = locations.grid_position(e.location);
        if (static_cast<std::size_t>(lev) != l) continue;
        os << obj.object_id << ',' << obj.category << ',' << lev << ',' << row << ',' << col << ','
           << fmt17(e.center) << ',' << fmt17(e.confidence) << ',' << fmt17(e.p_pos) << ','
           << fmt17(e.w_pos) << '\n';
      }
      written.push_back(path);
    }
  }
  for (std::size_t l = 0; l < levels; ++l) {
    const std::string path =
        (fs::path(directory) / ("negative_level" + std::to_string(l) + ".csv")).string();
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << kNegativeHeader << '\n';
    for (Index row = 0; row < locations.levels[l].height; ++row) {
      for (Index col = 0; col < locations.levels[l].width; ++col) {
        const Index g = locations.global_index(l, row, col);
        os << l << ',' << row << ',' << col << ',' << fmt17(report.w_neg(g)) << ','
           << fmt17(report.max_iou(g)) << '\n';
      }
    }
    written.push_back(path);
  }
  return written;
}

WeightReport read_weight_report_csv(const LocationSet& locations, const std::string& directory) {
  namespace fs = std::filesystem;
  WeightReport report;
  report.w_neg = Eigen::ArrayXd::Ones(locations.size());
  report.max_iou = Eigen::ArrayXd::Zero(locations.size());

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(directory)) files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  std::map<int, ObjectWeights> objects;
  for (const fs::path& path : files) {
    const std::string name = path.filename().string();
    const bool positive = name.rfind("positive_obj", 0) == 0;
    const bool negative = name.rfind("negative_level", 0) == 0;
    if (!positive && !negative) continue;
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    if (line != (positive ? kPositiveHeader : kNegativeHeader)) {
      throw std::runtime_error("unexpected header in " + path.string());
    }
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto f = split_csv(line);
      if (positive) {
        if (f.size() != 9) throw std::runtime_error("malformed row in " + path.string());
        const int id = std::stoi(f[0]);
        ObjectWeights& ow = objects[id];
        ow.object_id = id;
        ow.category = std::stoi(f[1]);
        const Index g = locations.global_index(std::stoul(f[2]), std::stol(f[3]), std::stol(f[4]));
        ow.entries.push_back({g, std::stod(f[5]), std::stod(f[6]), std::stod(f[7]), std::stod(f[8])});
      } else {
        if (f.size() != 5) throw std::runtime_error("malformed row in " + path.string());
        const Index g = locations.global_index(std::stoul(f[0]), std::stol(f[1]), std::stol(f[2]));
        report.w_neg(g) = std::stod(f[3]);
        report.max_iou(g) = std::stod(f[4]);
      }
    }
  }
  for (auto& [id, ow] : objects) {
    std::stable_sort(ow.entries.begin(), ow.entries.end(),
                     [](const WeightEntry& a, const WeightEntry& b) { return a.location < b.location; });
  }
  for (auto& [id, ow] : objects) report.objects.push_back(std::move(ow));
  return report;
}

}  // namespace autoassign
