#include "autoassign/toydet.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace autoassign {

namespace {

std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::array<std::pair<ShapeKind, std::string_view>, 4> kShapeKinds{{
    {ShapeKind::kFilledRect, "filled-rect"},
    {ShapeKind::kEllipse, "ellipse"},
    {ShapeKind::kBottomBar, "bottom-bar"},
    {ShapeKind::kLeftBar, "left-bar"},
}};

double overlap(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

// Exact per-pixel area coverage of an axis-aligned rectangle.
Eigen::ArrayXd rect_coverage(const Boxd& r, int height, int width) {
  Eigen::ArrayXd cov = Eigen::ArrayXd::Zero(static_cast<Index>(height) * width);
  if (!(r.x2 > r.x1 && r.y2 > r.y1)) return cov;
  const int c0 = std::max(0, static_cast<int>(std::floor(r.x1)));
  const int c1 = std::min(width - 1, static_cast<int>(std::ceil(r.x2)) - 1);
  const int r0 = std::max(0, static_cast<int>(std::floor(r.y1)));
  const int r1 = std::min(height - 1, static_cast<int>(std::ceil(r.y2)) - 1);
  for (int row = r0; row <= r1; ++row) {
    const double fy = overlap(row, row + 1.0, r.y1, r.y2);
    for (int col = c0; col <= c1; ++col) {
      cov(static_cast<Index>(row) * width + col) = fy * overlap(col, col + 1.0, r.x1, r.x2);
    }
  }
  return cov;
}

// Ellipse inscribed in `r`, clipped to `clip`, by 8x8 supersampling.
Eigen::ArrayXd ellipse_coverage(const Boxd& r, const Boxd& clip, int height, int width) {
  constexpr int kSub = 8;
  Eigen::ArrayXd cov = Eigen::ArrayXd::Zero(static_cast<Index>(height) * width);
  const double cx = r.center_x();
  const double cy = r.center_y();
  const double ax = r.width() / 2.0;
  const double ay = r.height() / 2.0;
  const int c0 = std::max(0, static_cast<int>(std::floor(r.x1)));
  const int c1 = std::min(width - 1, static_cast<int>(std::ceil(r.x2)) - 1);
  const int r0 = std::max(0, static_cast<int>(std::floor(r.y1)));
  const int r1 = std::min(height - 1, static_cast<int>(std::ceil(r.y2)) - 1);
  for (int row = r0; row <= r1; ++row) {
    for (int col = c0; col <= c1; ++col) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        const double y = row + (sy + 0.5) / kSub;
        for (int sx = 0; sx < kSub; ++sx) {
          const double x = col + (sx + 0.5) / kSub;
          const double u = (x - cx) / ax;
          const double v = (y - cy) / ay;
          if (u * u + v * v <= 1.0 && x >= clip.x1 && x <= clip.x2 && y >= clip.y1 && y <= clip.y2) {
            ++hits;
          }
        }
      }
      cov(static_cast<Index>(row) * width + col) = static_cast<double>(hits) / (kSub * kSub);
    }
  }
  return cov;
}

Boxd intersect(const Boxd& a, const Boxd& b) {
  return {std::max(a.x1, b.x1), std::max(a.y1, b.y1), std::min(a.x2, b.x2), std::min(a.y2, b.y2)};
}

// Padding (k - stride) / 2 keeps output cell i centered on input (i + 0.5) * stride.
DiffArray conv_block(const DiffArray& x, const DiffArray& w, const DiffArray& b, Index stride) {
  const Index f = b.size();
  return conv2d(x, w, stride, (w.dim(2) - stride) / 2) + reshape(b, {f, 1, 1});
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(splitmix64(base) + stream) + index);
}

std::string_view to_string(ShapeKind kind) {
  for (const auto& [k, name] : kShapeKinds) {
    if (k == kind) return name;
  }
  return "?";
}

ShapeKind parse_shape_kind(std::string_view text) {
  std::string valid;
  for (const auto& [k, name] : kShapeKinds) {
    if (name == text) return k;
    valid += (valid.empty() ? "" : ", ") + std::string(name);
  }
  throw std::invalid_argument("unknown shape '" + std::string(text) + "' (valid: " + valid + ")");
}

// ---- scenes ---------------------------------------------------------------

void SceneGenConfig::validate() const {
  if (image_size < 8) throw std::invalid_argument("image size must be at least 8");
  if (categories.empty()) throw std::invalid_argument("scene config needs at least one category");
  if (min_objects < 0 || max_objects < min_objects) {
    throw std::invalid_argument("objects-per-scene range must satisfy 0 <= min <= max");
  }
  if (!(noise_std >= 0.0)) throw std::invalid_argument("noise std must be non-negative");
  if (max_retries < 1) throw std::invalid_argument("max retries must be positive");
  for (std::size_t k = 0; k < categories.size(); ++k) {
    const CategorySpec& c = categories[k];
    const std::string tag = "category " + std::to_string(k);
    if (!(c.min_size >= 2.0 && c.max_size >= c.min_size)) {
      throw std::invalid_argument(tag + ": size range must satisfy 2 <= min <= max");
    }
    if (c.max_size > image_size - 2.0) throw std::invalid_argument(tag + ": shapes must fit inside the image");
    if (!(c.evidence_offset >= -0.5 && c.evidence_offset <= 0.5)) {
      throw std::invalid_argument(tag + ": evidence offset must lie in [-0.5, 0.5]");
    }
  }
}

SceneGenConfig standard_benchmark() {
  SceneGenConfig cfg;
  cfg.image_size = 96;
  cfg.categories = {
      {ShapeKind::kFilledRect, 28.0, 56.0, 0.0, 1.0},
      {ShapeKind::kEllipse, 28.0, 56.0, 0.0, 1.0},
      {ShapeKind::kBottomBar, 28.0, 56.0, 0.25, 1.0},
  };
  return cfg;
}

Boxd evidence_region(const CategorySpec& spec, const Boxd& box) {
  const double w = box.width();
  const double h = box.height();
  double ew = 0.6 * w;
  double eh = 0.6 * h;
  double cx = box.center_x();
  double cy = box.center_y() + spec.evidence_offset * h;
  switch (spec.shape) {
    case ShapeKind::kFilledRect:
    case ShapeKind::kEllipse: break;
    case ShapeKind::kBottomBar:
      ew = 0.8 * w;
      eh = 0.4 * h;
      break;
    case ShapeKind::kLeftBar:
      ew = 0.4 * w;
      eh = 0.8 * h;
      cx = box.center_x() + spec.evidence_offset * w;
      cy = box.center_y();
      break;
  }
  return {cx - ew / 2, cy - eh / 2, cx + ew / 2, cy + eh / 2};
}

SyntheticScene generate_scene(const SceneGenConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const int size = cfg.image_size;
  SyntheticScene scene;
  scene.seed = seed;
  scene.height = size;
  scene.width = size;

  std::uniform_int_distribution<int> count_dist(cfg.min_objects, cfg.max_objects);
  std::uniform_int_distribution<int> cat_dist(0, cfg.num_categories() - 1);
  const int count = count_dist(rng);
  for (int n = 0; n < count; ++n) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
      const int cat = cat_dist(rng);
      const CategorySpec& spec = cfg.categories[static_cast<std::size_t>(cat)];
      std::uniform_real_distribution<double> side(spec.min_size, spec.max_size);
      const double w = side(rng);
      const double h = side(rng);
      std::uniform_real_distribution<double> px(1.0, size - 1.0 - w);
      std::uniform_real_distribution<double> py(1.0, size - 1.0 - h);
      const double x = px(rng);
      const double y = py(rng);
      const Boxd box{x, y, x + w, y + h};
      const Boxd padded{box.x1 - cfg.min_gap, box.y1 - cfg.min_gap, box.x2 + cfg.min_gap,
                        box.y2 + cfg.min_gap};
      const bool clear = std::none_of(scene.objects.begin(), scene.objects.end(),
                                      [&](const GroundTruth& o) { return intersection_area(padded, o.box) > 0.0; });
      if (clear) {
        scene.objects.push_back({box, cat});
        placed = true;
      }
    }
    if (!placed) ++scene.dropped;
  }

  scene.image = Eigen::ArrayXd::Zero(static_cast<Index>(size) * size);
  for (const GroundTruth& o : scene.objects) {
    const CategorySpec& spec = cfg.categories[static_cast<std::size_t>(o.category)];
    const Boxd ev = evidence_region(spec, o.box);
    const Eigen::ArrayXd cov = spec.shape == ShapeKind::kEllipse
                                   ? ellipse_coverage(ev, o.box, size, size)
                                   : rect_coverage(intersect(ev, o.box), size, size);
    scene.image = scene.image.max(spec.intensity * cov);
    if (cfg.outline_intensity > 0.0) {
      const Boxd inner{o.box.x1 + 1, o.box.y1 + 1, o.box.x2 - 1, o.box.y2 - 1};
      const Eigen::ArrayXd frame = rect_coverage(o.box, size, size) - rect_coverage(inner, size, size);
      scene.image = scene.image.max(cfg.outline_intensity * frame);
    }
  }
  if (cfg.noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_std);
    for (Index i = 0; i < scene.image.size(); ++i) scene.image(i) += noise(rng);
  }
  return scene;
}

std::vector<SyntheticScene> generate_dataset(const SceneGenConfig& cfg, std::uint64_t base_seed,
                                             int count) {
  std::vector<SyntheticScene> scenes;
  scenes.reserve(static_cast<std::size_t>(std::max(0, count)));
  for (int i = 0; i < count; ++i) {
    scenes.push_back(generate_scene(cfg, derive_seed(base_seed, 0, static_cast<std::uint64_t>(i))));
    scenes.back().id = i;
  }
  return scenes;
}

// ---- model ----------------------------------------------------------------

void ModelConfig::validate() const {
  if (num_categories < 1) throw std::invalid_argument("model needs at least one category");
  if (channels < 2 || channels % 2 != 0) throw std::invalid_argument("model channels must be even and >= 2");
  if (head_convs < 0 || head_convs > 2) throw std::invalid_argument("head convs must be 0, 1 or 2");
  if (head_kernel != 1 && head_kernel != 3) throw std::invalid_argument("head kernel must be 1 or 3");
  if (!(initial_box > 0.0)) throw std::invalid_argument("initial box extent must be positive");
  if (strides.empty() || strides.size() > 3) throw std::invalid_argument("model needs 1 to 3 strides");
  if (strides[0] != 4 && strides[0] != 8) throw std::invalid_argument("first stride must be 4 or 8");
  for (std::size_t i = 1; i < strides.size(); ++i) {
    if (strides[i] != 2 * strides[i - 1]) throw std::invalid_argument("each stride must double the previous");
  }
  if (image_size % strides.back() != 0) {
    throw std::invalid_argument("image size " + std::to_string(image_size) +
                                " is not divisible by stride " + std::to_string(strides.back()));
  }
}

DetectorModel::DetectorModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const Index c = cfg_.channels;
  const auto add_conv = [&](const std::string& name, Index in, Index out, Index k, double std_dev) {
    std::normal_distribution<double> dist(0.0, std_dev);
    Eigen::ArrayXd w(out * in * k * k);
    for (Index i = 0; i < w.size(); ++i) w(i) = dist(rng);
    params_.emplace_back(name + ".weight", Shape{out, in, k, k}, std::move(w));
    params_.emplace_back(name + ".bias", Shape{out}, Eigen::ArrayXd::Zero(out));
  };
  const auto kaiming = [](Index fan_in, Index k) { return std::sqrt(2.0 / static_cast<double>(fan_in * k * k)); };

  // 4x4 stride-2 stages until the first pyramid stride, a 3x3 stride-1
  // refinement, then one 4x4 stride-2 stage per further level.
  int stride = 1;
  Index in = 1;
  int layer = 0;
  while (stride < cfg_.strides[0]) {
    const Index out = stride == 1 ? c / 2 : c;
    add_conv("backbone." + std::to_string(layer++), in, out, 4, kaiming(in, 4));
    in = out;
    stride *= 2;
  }
  add_conv("backbone." + std::to_string(layer++), in, c, 3, kaiming(in, 3));
  for (std::size_t l = 1; l < cfg_.strides.size(); ++l) {
    add_conv("backbone." + std::to_string(layer++), c, c, 4, kaiming(c, 4));
  }
  backbone_layers_ = static_cast<std::size_t>(layer);

  for (int h = 0; h < cfg_.head_convs; ++h) add_conv("head." + std::to_string(h), c, c, cfg_.head_kernel, kaiming(c, cfg_.head_kernel));
  const Index k = cfg_.num_categories;
  add_conv("head.out", c, k + 5, 3, 0.01);
  Eigen::ArrayXd& bias = params_.back().value;
  bias.head(k).setConstant(-std::log(99.0));
  bias.tail(4).setConstant(std::log(cfg_.initial_box));
}

std::vector<Parameter*> DetectorModel::parameter_pointers() {
  std::vector<Parameter*> out;
  for (Parameter& p : params_) out.push_back(&p);
  return out;
}

std::size_t DetectorModel::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

std::vector<PyramidLevelSpec> DetectorModel::levels() const {
  std::vector<PyramidLevelSpec> out;
  for (int s : cfg_.strides) {
    const Index side = cfg_.image_size / s;
    out.push_back({s, side, side});
  }
  return out;
}

DensePredictions DetectorModel::forward(std::span<const DiffArray> w, const Eigen::ArrayXd& image) const {
  if (w.size() != params_.size()) {
    throw std::invalid_argument("expected " + std::to_string(params_.size()) + " weight arrays, got " +
                                std::to_string(w.size()));
  }
  const Index side = cfg_.image_size;
  if (image.size() != side * side) {
    throw std::invalid_argument("image has " + std::to_string(image.size()) + " pixels, expected " +
                                std::to_string(side * side));
  }
  DiffArray x = DiffArray::constant({1, side, side}, image);
  std::vector<DiffArray> features;
  std::size_t p = 0;
  int stride = 1;
  while (stride < cfg_.strides[0]) {
    x = relu(conv_block(x, w[p], w[p + 1], 2));
    p += 2;
    stride *= 2;
  }
  x = relu(conv_block(x, w[p], w[p + 1], 1));
  p += 2;
  features.push_back(x);
  for (std::size_t l = 1; l < cfg_.strides.size(); ++l) {
    x = relu(conv_block(x, w[p], w[p + 1], 2));
    p += 2;
    features.push_back(x);
  }

  const Index k = cfg_.num_categories;
  std::vector<DiffArray> cls;
  std::vector<DiffArray> obj;
  std::vector<DiffArray> ltrb;
  for (std::size_t l = 0; l < features.size(); ++l) {
    DiffArray h = features[l];
    std::size_t q = p;
    for (int i = 0; i < cfg_.head_convs; ++i, q += 2) h = relu(conv_block(h, w[q], w[q + 1], 1));
    const DiffArray out = conv_block(h, w[q], w[q + 1], 1);
    const Index hw = out.dim(1) * out.dim(2);
    const DiffArray rows = transpose(reshape(out, {k + 5, hw}));
    cls.push_back(slice_cols(rows, 0, k));
    obj.push_back(slice_cols(rows, k, 1));
    ltrb.push_back(exp(clamp(slice_cols(rows, k + 1, 4), -8.0, 8.0)) * static_cast<double>(cfg_.strides[l]));
  }
  return {concat_rows(cls), concat_rows(obj), concat_rows(ltrb)};
}

DensePredictions DetectorModel::forward(Tape& tape, const Eigen::ArrayXd& image) {
  std::vector<DiffArray> w;
  w.reserve(params_.size());
  for (Parameter& p : params_) w.push_back(tape.bind(p));
  return forward(std::span<const DiffArray>(w), image);
}

DensePredictions DetectorModel::forward(const Eigen::ArrayXd& image) const {
  std::vector<DiffArray> w;
  w.reserve(params_.size());
  for (const Parameter& p : params_) w.push_back(DiffArray::constant(p.shape, p.value));
  return forward(std::span<const DiffArray>(w), image);
}

// ---- training ---------------------------------------------------------------

void TrainConfig::validate() const {
  if (iterations < 0) throw std::invalid_argument("iterations must be non-negative");
  if (scenes_per_step < 1) throw std::invalid_argument("scenes per step must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be non-negative");
  if (!(prior_lr_scale >= 0.0)) throw std::invalid_argument("prior learning-rate scale must be non-negative");
  if (!(clip_grad_norm >= 0.0)) throw std::invalid_argument("gradient clip must be non-negative");
  for (double m : milestones) {
    if (!(m > 0.0 && m < 1.0)) throw std::invalid_argument("milestones must lie in (0, 1)");
  }
}

double TrainConfig::learning_rate_at(int iteration) const {
  double lr = learning_rate;
  for (double m : milestones) {
    if (iteration >= static_cast<int>(std::lround(m * iterations))) lr *= lr_decay;
  }
  return lr;
}

std::vector<TrainLogRecord> train(DetectorModel& model, CenterPrior& prior, const AssignConfig& assign,
                                  const TrainConfig& cfg, std::span<const SyntheticScene> scenes,
                                  const TrainLogger& logger) {
  cfg.validate();
  assign.validate();
  if (scenes.empty() && cfg.iterations > 0) throw std::invalid_argument("training needs at least one scene");
  if (prior.num_categories() != model.config().num_categories) {
    throw std::invalid_argument("prior and model disagree on the number of categories");
  }
  const std::vector<PyramidLevelSpec> specs = model.levels();
  const LocationSet locations = make_locations(specs);
  std::vector<Parameter*> net = model.parameter_pointers();
  std::vector<Parameter*> prior_params = prior.parameters();
  std::vector<Parameter*> all = net;
  all.insert(all.end(), prior_params.begin(), prior_params.end());
  for (Parameter* p : all) p->zero_grad();

  std::vector<TrainLogRecord> log;
  log.reserve(static_cast<std::size_t>(cfg.iterations));
  const double per_step = 1.0 / cfg.scenes_per_step;
  for (int it = 0; it < cfg.iterations; ++it) {
    TrainLogRecord rec;
    rec.iteration = it;
    rec.learning_rate = cfg.learning_rate_at(it);
    std::uint64_t last_seed = 0;
    for (int j = 0; j < cfg.scenes_per_step; ++j) {
      const std::size_t pick =
          (static_cast<std::size_t>(it) * static_cast<std::size_t>(cfg.scenes_per_step) + static_cast<std::size_t>(j)) %
          scenes.size();
      const SyntheticScene& scene = scenes[pick];
      last_seed = scene.seed;
      Tape tape;
      const DensePredictions preds = model.forward(tape, scene.image);
      LossOutput out;
      try {
        out = autoassign_loss(preds, scene.objects, locations, bind_prior(prior, &tape), assign);
      } catch (const LossError& e) {
        throw TrainingAborted(it, scene.seed,
                              "non-finite " + e.term() + " loss at iteration " + std::to_string(it) +
                                  " on scene seed " + std::to_string(scene.seed));
      }
      const double scale = per_step / std::max<double>(1.0, static_cast<double>(scene.objects.size()));
      tape.backward(out.total * scale);
      rec.total += out.breakdown.total * scale;
      rec.positive += out.breakdown.positive * scale;
      rec.negative += out.breakdown.negative * scale;
      rec.objectness += out.breakdown.objectness * scale;
      rec.objects += static_cast<int>(out.state.objects.size());
      rec.dropped += static_cast<int>(out.state.dropped.size());
    }

    double sq = 0.0;
    for (const Parameter* p : all) {
      if (p->learnable) sq += p->grad.square().sum();
    }
    rec.grad_norm = std::sqrt(sq);
    if (!std::isfinite(rec.grad_norm)) {
      throw TrainingAborted(it, last_seed,
                            "non-finite gradient at iteration " + std::to_string(it) + " on scene seed " +
                                std::to_string(last_seed));
    }
    if (cfg.clip_grad_norm > 0.0 && rec.grad_norm > cfg.clip_grad_norm) {
      const double shrink = cfg.clip_grad_norm / rec.grad_norm;
      for (Parameter* p : all) p->grad *= shrink;
    }
    sgd_step(net, rec.learning_rate, cfg.momentum, cfg.weight_decay);
    sgd_step(prior_params, rec.learning_rate * cfg.prior_lr_scale, cfg.momentum, 0.0);
    prior.clamp_sigma();

    rec.mu = prior.mu().value;
    rec.sigma = prior.sigma().value;
    if (logger) logger(rec);
    log.push_back(std::move(rec));
  }
  return log;
}

// ---- inference and evaluation ---------------------------------------------

std::vector<Detection> detect(const DensePredictions& preds, const LocationSet& locations,
                              const InferenceConfig& cfg, int scene) {
  const Index num_loc = locations.size();
  const Index k = preds.cls_logits.dim(1);
  const Eigen::ArrayXd& cls = preds.cls_logits.values();
  const Eigen::ArrayXd& obj = preds.obj_logits.values();
  const Eigen::ArrayXd& ltrb = preds.ltrb.values();
  const auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };

  struct Candidate {
    double score;
    Index location;
    int category;
  };
  std::vector<Candidate> cand;
  for (Index i = 0; i < num_loc; ++i) {
    const double o = sig(obj(i));
    for (Index c = 0; c < k; ++c) {
      const double s = sig(cls(i * k + c)) * o;
      if (s > cfg.score_threshold) cand.push_back({s, i, static_cast<int>(c)});
    }
  }
  std::stable_sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  if (cfg.pre_nms_top_k > 0 && cand.size() > static_cast<std::size_t>(cfg.pre_nms_top_k)) {
    cand.resize(static_cast<std::size_t>(cfg.pre_nms_top_k));
  }
  std::vector<Detection> dets;
  for (const Candidate& c : cand) {
    const double x = locations.xy(c.location, 0);
    const double y = locations.xy(c.location, 1);
    const Index o = 4 * c.location;
    dets.push_back({{x - ltrb(o), y - ltrb(o + 1), x + ltrb(o + 2), y + ltrb(o + 3)}, c.category, c.score, scene});
  }
  dets = nms(std::move(dets), cfg.nms_iou);
  if (cfg.max_detections > 0 && dets.size() > static_cast<std::size_t>(cfg.max_detections)) {
    dets.resize(static_cast<std::size_t>(cfg.max_detections));
  }
  return dets;
}

std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold) {
  std::stable_sort(detections.begin(), detections.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const Detection& d : detections) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.category == d.category && k.scene == d.scene && iou(k.box, d.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

EvalResult evaluate_ap(std::span<const Detection> detections,
                       std::span<const std::vector<GroundTruth>> ground_truth, int num_categories,
                       double iou_threshold) {
  EvalResult result;
  double ap_sum = 0.0;
  int included = 0;
  for (int k = 0; k < num_categories; ++k) {
    CategoryEval cat;
    cat.category = k;
    std::vector<std::vector<bool>> matched(ground_truth.size());
    for (std::size_t s = 0; s < ground_truth.size(); ++s) {
      matched[s].assign(ground_truth[s].size(), false);
      for (const GroundTruth& g : ground_truth[s]) cat.ground_truths += g.category == k ? 1 : 0;
    }
    std::vector<const Detection*> dets;
    for (const Detection& d : detections) {
      if (d.category == k) dets.push_back(&d);
    }
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection* a, const Detection* b) { return a->score > b->score; });
    cat.detections = static_cast<int>(dets.size());

    int tp = 0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      const Detection& d = *dets[i];
      if (d.scene < 0 || static_cast<std::size_t>(d.scene) >= ground_truth.size()) {
        throw std::out_of_range("detection refers to unknown scene " + std::to_string(d.scene));
      }
      const auto& gts = ground_truth[static_cast<std::size_t>(d.scene)];
      int best = -1;
      double best_iou = iou_threshold;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].category != k || matched[static_cast<std::size_t>(d.scene)][g]) continue;
        const double v = iou(d.box, gts[g].box);
        if (v >= best_iou) {
          best_iou = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) {
        matched[static_cast<std::size_t>(d.scene)][static_cast<std::size_t>(best)] = true;
        ++tp;
      }
      cat.precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
      cat.recall.push_back(cat.ground_truths > 0 ? static_cast<double>(tp) / cat.ground_truths : 0.0);
    }

    if (cat.ground_truths == 0) {
      cat.ap = std::nan("");
      result.excluded.push_back(k);
    } else {
      // Area under the monotone precision envelope.
      std::vector<double> envelope = cat.precision;
      for (std::size_t i = envelope.size(); i-- > 1;) envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);
      double ap = 0.0;
      double prev_recall = 0.0;
      for (std::size_t i = 0; i < envelope.size(); ++i) {
        ap += (cat.recall[i] - prev_recall) * envelope[i];
        prev_recall = cat.recall[i];
      }
      cat.ap = ap;
      ap_sum += ap;
      ++included;
    }
    result.ground_truths += cat.ground_truths;
    result.detections += cat.detections;
    result.categories.push_back(std::move(cat));
  }
  result.ap50 = included > 0 ? ap_sum / included : 0.0;
  return result;
}

std::vector<Detection> detect_dataset(const DetectorModel& model, std::span<const SyntheticScene> scenes,
                                      const InferenceConfig& cfg) {
  const std::vector<PyramidLevelSpec> specs = model.levels();
  const LocationSet locations = make_locations(specs);
  std::vector<Detection> all;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto dets = detect(model.forward(scenes[s].image), locations, cfg, static_cast<int>(s));
    all.insert(all.end(), dets.begin(), dets.end());
  }
  return all;
}

// ---- persistence ----------------------------------------------------------

namespace {

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string scene_file(int id) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "scene_%06d.bin", id);
  return buf;
}

}  // namespace

void write_dataset(const std::string& directory, std::span<const SyntheticScene> scenes) {
  namespace fs = std::filesystem;
  const fs::path images = fs::path(directory) / "images";
  fs::create_directories(images);
  std::ofstream ann(fs::path(directory) / "annotations.txt");
  if (!ann) throw std::runtime_error("cannot write annotations in " + directory);
  ann << "# scene <id> <seed> <height> <width> <dropped>\n# object <id> <x1> <y1> <x2> <y2> <category>\n";
  for (const SyntheticScene& s : scenes) {
    ann << "scene " << s.id << ' ' << s.seed << ' ' << s.height << ' ' << s.width << ' ' << s.dropped << '\n';
    for (const GroundTruth& o : s.objects) {
      ann << "object " << s.id << ' ' << fmt17(o.box.x1) << ' ' << fmt17(o.box.y1) << ' ' << fmt17(o.box.x2)
          << ' ' << fmt17(o.box.y2) << ' ' << o.category << '\n';
    }
    std::ofstream img(images / scene_file(s.id), std::ios::binary);
    if (!img) throw std::runtime_error("cannot write image for scene " + std::to_string(s.id));
    img.write(reinterpret_cast<const char*>(s.image.data()),
              static_cast<std::streamsize>(s.image.size() * sizeof(double)));
  }
}

std::vector<SyntheticScene> read_dataset(const std::string& directory, int image_size) {
  namespace fs = std::filesystem;
  std::ifstream ann(fs::path(directory) / "annotations.txt");
  if (!ann) throw std::runtime_error("no dataset at " + directory);
  std::vector<SyntheticScene> scenes;
  std::map<int, std::size_t> by_id;
  std::string line;
  int line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    std::string kind;
    is >> kind;
    if (kind == "scene") {
      SyntheticScene s;
      is >> s.id >> s.seed >> s.height >> s.width >> s.dropped;
      if (!is || s.height != image_size || s.width != image_size) {
        throw std::runtime_error("annotations.txt:" + std::to_string(line_no) + ": bad scene record");
      }
      by_id[s.id] = scenes.size();
      scenes.push_back(std::move(s));
    } else if (kind == "object") {
      int id = 0;
      GroundTruth g;
      is >> id >> g.box.x1 >> g.box.y1 >> g.box.x2 >> g.box.y2 >> g.category;
      if (!is || !by_id.contains(id)) {
        throw std::runtime_error("annotations.txt:" + std::to_string(line_no) + ": bad object record");
      }
      scenes[by_id[id]].objects.push_back(g);
    } else {
      throw std::runtime_error("annotations.txt:" + std::to_string(line_no) + ": unknown record '" + kind + "'");
    }
  }
  const Index pixels = static_cast<Index>(image_size) * image_size;
  for (SyntheticScene& s : scenes) {
    std::ifstream img(fs::path(directory) / "images" / scene_file(s.id), std::ios::binary);
    s.image.resize(pixels);
    img.read(reinterpret_cast<char*>(s.image.data()), static_cast<std::streamsize>(pixels * sizeof(double)));
    if (!img) throw std::runtime_error("missing or short image for scene " + std::to_string(s.id));
  }
  return scenes;
}

void save_checkpoint(const std::string& directory, std::span<const Parameter* const> params) {
  namespace fs = std::filesystem;
  fs::create_directories(directory);
  std::ofstream bin(fs::path(directory) / "checkpoint.bin", std::ios::binary);
  std::ofstream man(fs::path(directory) / "checkpoint.manifest");
  if (!bin || !man) throw std::runtime_error("cannot write checkpoint in " + directory);
  man << "# name learnable offset count shape\n";
  Index offset = 0;
  for (const Parameter* p : params) {
    man << p->name << ' ' << (p->learnable ? 1 : 0) << ' ' << offset << ' ' << p->value.size() << ' '
        << shape_string(p->shape) << '\n';
    bin.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    offset += p->value.size();
  }
}

void load_checkpoint(const std::string& directory, std::span<Parameter* const> params) {
  namespace fs = std::filesystem;
  std::ifstream man(fs::path(directory) / "checkpoint.manifest");
  std::ifstream bin(fs::path(directory) / "checkpoint.bin", std::ios::binary);
  if (!man || !bin) throw std::runtime_error("no checkpoint at " + directory);
  std::map<std::string, std::pair<Index, Index>> entries;
  std::map<std::string, std::string> shapes;
  std::string line;
  while (std::getline(man, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    std::string name;
    int learnable = 0;
    Index offset = 0;
    Index count = 0;
    is >> name >> learnable >> offset >> count;
    std::string shape;
    std::getline(is >> std::ws, shape);
    entries[name] = {offset, count};
    shapes[name] = shape;
  }
  for (Parameter* p : params) {
    const auto it = entries.find(p->name);
    if (it == entries.end()) throw std::runtime_error("checkpoint lacks parameter " + p->name);
    if (shapes[p->name] != shape_string(p->shape)) {
      throw std::runtime_error("checkpoint shape " + shapes[p->name] + " for " + p->name + " does not match " +
                               shape_string(p->shape));
    }
    bin.seekg(static_cast<std::streamoff>(it->second.first * static_cast<Index>(sizeof(double))));
    bin.read(reinterpret_cast<char*>(p->value.data()),
             static_cast<std::streamsize>(it->second.second * static_cast<Index>(sizeof(double))));
    if (!bin) throw std::runtime_error("checkpoint data truncated at " + p->name);
    p->zero_grad();
    p->velocity.setZero(p->value.size());
  }
}

}  // namespace autoassign
