#include "autoassign/experiment.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <utility>

namespace autoassign {

ConfigError::ConfigError(int line, std::string key, const std::string& message)
    : std::runtime_error((line > 0 ? "line " + std::to_string(line) + ": " : std::string()) +
                         (key.empty() ? std::string() : "'" + key + "': ") + message),
      line_(line),
      key_(std::move(key)) {}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_integer(std::string_view s) {
  T v{};
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw std::invalid_argument("expected an integer, got '" + std::string(s) + "'");
  }
  return v;
}

double parse_double(std::string_view s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw std::invalid_argument("expected a number, got '" + std::string(s) + "'");
  }
  return v;
}

bool parse_bool(std::string_view s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw std::invalid_argument("expected true or false, got '" + std::string(s) + "'");
}

std::string_view edge_name(EdgePolicy e) { return e == EdgePolicy::kInclusive ? "inclusive" : "strict"; }

EdgePolicy parse_edges(std::string_view s) {
  if (s == "strict") return EdgePolicy::kStrictInterior;
  if (s == "inclusive") return EdgePolicy::kInclusive;
  throw std::invalid_argument("unknown edge policy '" + std::string(s) + "' (valid: strict, inclusive)");
}

template <class T, class F>
std::vector<T> parse_list(std::string_view s, F&& one) {
  std::vector<T> out;
  if (trim(s).empty()) return out;
  for (std::string_view part : split(s, ',')) out.push_back(one(part));
  return out;
}

template <class T, class F>
std::string join(const std::vector<T>& xs, F&& one) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? ", " : "") + one(xs[i]);
  return out;
}

std::optional<double> parse_optional(std::string_view s) {
  if (s == "none") return std::nullopt;
  return parse_double(s);
}

std::string optional_text(const std::optional<double>& v) { return v ? fmt(*v) : "none"; }

struct Field {
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define AA_INT(expr) \
  {[](RunConfig& c, std::string_view v) { expr = parse_integer<int>(v); }, \
   [](const RunConfig& c) { return std::to_string(expr); }}
#define AA_DOUBLE(expr) \
  {[](RunConfig& c, std::string_view v) { expr = parse_double(v); }, [](const RunConfig& c) { return fmt(expr); }}
#define AA_BOOL(expr) \
  {[](RunConfig& c, std::string_view v) { expr = parse_bool(v); }, \
   [](const RunConfig& c) { return std::string(expr ? "true" : "false"); }}
#define AA_ENUM(expr, parser) \
  {[](RunConfig& c, std::string_view v) { expr = parser(v); }, \
   [](const RunConfig& c) { return std::string(to_string(expr)); }}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"run.seed",
       {[](RunConfig& c, std::string_view v) { c.seed = parse_integer<std::uint64_t>(v); },
        [](const RunConfig& c) { return std::to_string(c.seed); }}},
      {"scene.image_size", AA_INT(c.scene.image_size)},
      {"scene.min_objects", AA_INT(c.scene.min_objects)},
      {"scene.max_objects", AA_INT(c.scene.max_objects)},
      {"scene.noise_std", AA_DOUBLE(c.scene.noise_std)},
      {"scene.outline_intensity", AA_DOUBLE(c.scene.outline_intensity)},
      {"scene.min_gap", AA_DOUBLE(c.scene.min_gap)},
      {"scene.max_retries", AA_INT(c.scene.max_retries)},
      {"data.train_scenes", AA_INT(c.train_scenes)},
      {"data.test_scenes", AA_INT(c.test_scenes)},
      {"data.probe_scene", AA_INT(c.probe_scene)},
      {"model.channels", AA_INT(c.model.channels)},
      {"model.head_convs", AA_INT(c.model.head_convs)},
      {"model.head_kernel", AA_INT(c.model.head_kernel)},
      {"model.initial_box", AA_DOUBLE(c.model.initial_box)},
      {"model.strides",
       {[](RunConfig& c, std::string_view v) { c.model.strides = parse_list<int>(v, parse_integer<int>); },
        [](const RunConfig& c) { return join(c.model.strides, [](int s) { return std::to_string(s); }); }}},
      {"prior.mode", AA_ENUM(c.prior_mode, parse_prior_mode)},
      {"prior.mu_init", AA_DOUBLE(c.prior_mu_init)},
      {"prior.sigma_init", AA_DOUBLE(c.prior_sigma_init)},
      {"assign.strategy", AA_ENUM(c.assign.strategy, parse_strategy)},
      {"assign.tau", AA_DOUBLE(c.assign.tau)},
      {"assign.lambda", AA_DOUBLE(c.assign.lambda)},
      {"assign.focal_alpha", AA_DOUBLE(c.assign.focal_alpha)},
      {"assign.focal_gamma", AA_DOUBLE(c.assign.focal_gamma)},
      {"assign.confidence", AA_ENUM(c.assign.confidence, parse_confidence_mode)},
      {"assign.objectness", AA_ENUM(c.assign.objectness, parse_objectness_mode)},
      {"assign.explicit_objectness_weight", AA_DOUBLE(c.assign.explicit_objectness_weight)},
      {"assign.iou_clamp_epsilon", AA_DOUBLE(c.assign.iou_clamp_epsilon)},
      {"assign.probability_floor", AA_DOUBLE(c.assign.probability_floor)},
      {"assign.edges",
       {[](RunConfig& c, std::string_view v) { c.assign.edges = parse_edges(v); },
        [](const RunConfig& c) { return std::string(edge_name(c.assign.edges)); }}},
      {"assign.pin_cls_confidence",
       {[](RunConfig& c, std::string_view v) { c.assign.pin_cls_confidence = parse_optional(v); },
        [](const RunConfig& c) { return optional_text(c.assign.pin_cls_confidence); }}},
      {"assign.pin_loc_confidence",
       {[](RunConfig& c, std::string_view v) { c.assign.pin_loc_confidence = parse_optional(v); },
        [](const RunConfig& c) { return optional_text(c.assign.pin_loc_confidence); }}},
      {"assign.center_sampling_radius", AA_DOUBLE(c.assign.center_sampling_radius)},
      {"assign.scale_ranges",
       {[](RunConfig& c, std::string_view v) {
          c.assign.scale_ranges = parse_list<std::pair<double, double>>(v, [](std::string_view r) {
            const auto parts = split(r, ':');
            if (parts.size() != 2) throw std::invalid_argument("scale range must be lo:hi, got '" + std::string(r) + "'");
            return std::make_pair(parse_double(parts[0]), parse_double(parts[1]));
          });
        },
        [](const RunConfig& c) {
          return join(c.assign.scale_ranges, [](const std::pair<double, double>& r) {
            return fmt(r.first) + ":" + (r.second >= 1e30 ? std::string("inf") : fmt(r.second));
          });
        }}},
      {"assign.uniform_weight_one", AA_BOOL(c.assign.uniform_weight_one)},
      {"train.iterations", AA_INT(c.train.iterations)},
      {"train.scenes_per_step", AA_INT(c.train.scenes_per_step)},
      {"train.learning_rate", AA_DOUBLE(c.train.learning_rate)},
      {"train.momentum", AA_DOUBLE(c.train.momentum)},
      {"train.weight_decay", AA_DOUBLE(c.train.weight_decay)},
      {"train.milestones",
       {[](RunConfig& c, std::string_view v) { c.train.milestones = parse_list<double>(v, parse_double); },
        [](const RunConfig& c) { return join(c.train.milestones, fmt); }}},
      {"train.lr_decay", AA_DOUBLE(c.train.lr_decay)},
      {"train.prior_lr_scale", AA_DOUBLE(c.train.prior_lr_scale)},
      {"train.clip_grad_norm", AA_DOUBLE(c.train.clip_grad_norm)},
      {"infer.score_threshold", AA_DOUBLE(c.infer.score_threshold)},
      {"infer.pre_nms_top_k", AA_INT(c.infer.pre_nms_top_k)},
      {"infer.nms_iou", AA_DOUBLE(c.infer.nms_iou)},
      {"infer.max_detections", AA_INT(c.infer.max_detections)},
      {"eval.iou_threshold", AA_DOUBLE(c.eval_iou)},
      {"gradcheck.seeds", AA_INT(c.gradcheck.seeds)},
      {"gradcheck.epsilon", AA_DOUBLE(c.gradcheck.epsilon)},
      {"gradcheck.unit_tolerance", AA_DOUBLE(c.gradcheck.unit_tolerance)},
      {"gradcheck.end_to_end_tolerance", AA_DOUBLE(c.gradcheck.end_to_end_tolerance)},
      {"gradcheck.end_to_end", AA_BOOL(c.gradcheck.end_to_end)},
      {"gradcheck.fault_op",
       {[](RunConfig& c, std::string_view v) {
          if (v == "none") {
            c.gradcheck.fault_op.reset();
            return;
          }
          const auto op = op_from_name(v);
          if (!op) throw std::invalid_argument("unknown op '" + std::string(v) + "'");
          c.gradcheck.fault_op = *op;
        },
        [](const RunConfig& c) {
          return c.gradcheck.fault_op ? std::string(op_name(*c.gradcheck.fault_op)) : std::string("none");
        }}},
      {"dump.scene", AA_INT(c.dump_scene)},
  };
  return table;
}

#undef AA_INT
#undef AA_DOUBLE
#undef AA_BOOL
#undef AA_ENUM

constexpr std::array<std::string_view, 5> kCategoryFields{"shape", "min_size", "max_size", "evidence_offset",
                                                          "intensity"};

void set_category_field(CategorySpec& spec, std::string_view field, std::string_view v) {
  if (field == "shape") {
    spec.shape = parse_shape_kind(v);
  } else if (field == "min_size") {
    spec.min_size = parse_double(v);
  } else if (field == "max_size") {
    spec.max_size = parse_double(v);
  } else if (field == "evidence_offset") {
    spec.evidence_offset = parse_double(v);
  } else if (field == "intensity") {
    spec.intensity = parse_double(v);
  } else {
    std::string valid;
    for (std::string_view name : kCategoryFields) valid += (valid.empty() ? "" : ", ") + std::string(name);
    throw std::invalid_argument("unknown category field (valid: " + valid + ")");
  }
}

struct Line {
  int number;
  std::string key;
  std::string value;
};

}  // namespace

void RunConfig::validate() const {
  scene.validate();
  if (train_scenes < 1) throw std::invalid_argument("data.train_scenes must be positive");
  if (test_scenes < 1) throw std::invalid_argument("data.test_scenes must be positive");
  if (probe_scene < 0 || probe_scene >= test_scenes) {
    throw std::invalid_argument("data.probe_scene must index the test set");
  }
  if (dump_scene < 0) throw std::invalid_argument("dump.scene must be non-negative");
  resolved_model().validate();
  assign.validate();
  if (assign.strategy == AssignStrategy::kCenterSamplingScaleRanges &&
      assign.scale_ranges.size() != model.strides.size()) {
    throw std::invalid_argument("assign.scale_ranges needs one range per stride");
  }
  train.validate();
  if (!(prior_sigma_init > 0.0)) throw std::invalid_argument("prior.sigma_init must be positive");
  if (!(eval_iou > 0.0 && eval_iou <= 1.0)) throw std::invalid_argument("eval.iou_threshold must lie in (0, 1]");
  if (!(infer.nms_iou > 0.0 && infer.nms_iou <= 1.0)) throw std::invalid_argument("infer.nms_iou must lie in (0, 1]");
  gradcheck.validate();
}

ModelConfig RunConfig::resolved_model() const {
  ModelConfig m = model;
  m.image_size = scene.image_size;
  m.num_categories = scene.num_categories();
  m.seed = derive_seed(seed, 2, 0);
  return m;
}

RunConfig parse_run_config(std::string_view text) {
  std::vector<Line> lines;
  std::map<std::string, int> seen;
  int number = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++number;
    std::string_view s = raw;
    if (const std::size_t hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = trim(s);
    if (s.empty()) continue;
    const std::size_t eq = s.find('=');
    if (eq == std::string_view::npos) throw ConfigError(number, "", "expected 'key = value'");
    const std::string key(trim(s.substr(0, eq)));
    const std::string value(trim(s.substr(eq + 1)));
    if (key.empty()) throw ConfigError(number, "", "missing key before '='");
    if (value.empty()) throw ConfigError(number, key, "missing value");
    if (const auto it = seen.find(key); it != seen.end()) {
      throw ConfigError(number, key, "duplicate key (first set on line " + std::to_string(it->second) + ")");
    }
    seen[key] = number;
    lines.push_back({number, key, value});
  }

  RunConfig cfg;
  // The category count must be known before per-category keys apply.
  for (const Line& l : lines) {
    if (l.key != "scene.categories") continue;
    try {
      const int n = parse_integer<int>(l.value);
      if (n < 1) throw std::invalid_argument("need at least one category");
      cfg.scene.categories.resize(static_cast<std::size_t>(n));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(l.number, l.key, e.what());
    }
  }
  for (const Line& l : lines) {
    if (l.key == "scene.categories") continue;
    try {
      constexpr std::string_view prefix = "scene.category.";
      if (l.key.starts_with(prefix)) {
        const std::string_view rest = std::string_view(l.key).substr(prefix.size());
        const std::size_t dot = rest.find('.');
        if (dot == std::string_view::npos) throw std::invalid_argument("expected scene.category.<index>.<field>");
        const int index = parse_integer<int>(rest.substr(0, dot));
        if (index < 0 || index >= cfg.scene.num_categories()) {
          throw std::invalid_argument("category index out of range (scene.categories = " +
                                      std::to_string(cfg.scene.num_categories()) + ")");
        }
        set_category_field(cfg.scene.categories[static_cast<std::size_t>(index)], rest.substr(dot + 1), l.value);
        continue;
      }
      const auto& table = fields();
      const auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) { return f.first == l.key; });
      if (it == table.end()) throw std::invalid_argument("unknown key");
      it->second.set(cfg, l.value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(l.number, l.key, e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(0, "", e.what());
  }
  return cfg;
}

RunConfig override_run_config(const RunConfig& cfg, std::string_view key, std::string_view value) {
  std::istringstream in(serialize_run_config(cfg));
  std::string out;
  std::string line;
  bool found = false;
  while (std::getline(in, line)) {
    const std::size_t eq = line.find('=');
    if (eq != std::string::npos && trim(std::string_view(line).substr(0, eq)) == key) {
      line = std::string(key) + " = " + std::string(value);
      found = true;
    }
    out += line + "\n";
  }
  if (!found) throw ConfigError(0, std::string(key), "unknown key");
  return parse_run_config(out);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return parse_run_config(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(e.line(), e.key(), std::string(path) + ": " + e.what());
  }
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  const auto emit = [&](const std::string& key, const std::string& value) {
    const std::string head = key.substr(0, key.find('.'));
    if (head != section) {
      if (!section.empty()) out += '\n';
      section = head;
    }
    out += key + " = " + value + '\n';
  };
  for (const auto& [key, field] : fields()) {
    emit(key, field.get(cfg));
    if (key == "scene.max_retries") {
      emit("scene.categories", std::to_string(cfg.scene.num_categories()));
      for (std::size_t k = 0; k < cfg.scene.categories.size(); ++k) {
        const CategorySpec& c = cfg.scene.categories[k];
        const std::string p = "scene.category." + std::to_string(k) + ".";
        emit(p + "shape", std::string(to_string(c.shape)));
        emit(p + "min_size", fmt(c.min_size));
        emit(p + "max_size", fmt(c.max_size));
        emit(p + "evidence_offset", fmt(c.evidence_offset));
        emit(p + "intensity", fmt(c.intensity));
      }
    }
  }
  return out;
}

// ---- variants ---------------------------------------------------------------

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{
      "autoassign", "uniform-inbox", "center-sampling", "center-sampling+scale-ranges", "cls-only", "loc-only",
      "no-obj",     "explicit-obj",  "fixed-prior",     "shared-prior",                 "none-prior"};
  return names;
}

RunConfig apply_variant(RunConfig cfg, std::string_view name) {
  if (name == "autoassign") {
    cfg.assign.strategy = AssignStrategy::kAutoAssign;
  } else if (name == "uniform-inbox" || name == "center-sampling" || name == "center-sampling+scale-ranges") {
    cfg.assign.strategy = parse_strategy(name);
  } else if (name == "cls-only") {
    cfg.assign.confidence = ConfidenceMode::kClsOnly;
  } else if (name == "loc-only") {
    cfg.assign.confidence = ConfidenceMode::kLocOnly;
  } else if (name == "no-obj") {
    cfg.assign.objectness = ObjectnessMode::kNone;
  } else if (name == "explicit-obj") {
    cfg.assign.objectness = ObjectnessMode::kExplicit;
  } else if (name == "fixed-prior") {
    cfg.prior_mode = PriorMode::kFixed;
  } else if (name == "shared-prior") {
    cfg.prior_mode = PriorMode::kShared;
  } else if (name == "none-prior") {
    cfg.prior_mode = PriorMode::kNone;
  } else {
    std::string valid;
    for (const std::string& v : variant_names()) valid += (valid.empty() ? "" : ", ") + v;
    throw std::invalid_argument("unknown strategy '" + std::string(name) + "' (valid: " + valid + ")");
  }
  return cfg;
}

// ---- experiments ------------------------------------------------------------

Datasets make_datasets(const RunConfig& cfg) {
  return {generate_dataset(cfg.scene, derive_seed(cfg.seed, 1, 0), cfg.train_scenes),
          generate_dataset(cfg.scene, derive_seed(cfg.seed, 3, 0), cfg.test_scenes)};
}

std::vector<Parameter*> checkpoint_parameters(DetectorModel& model, CenterPrior& prior) {
  std::vector<Parameter*> out = model.parameter_pointers();
  out.push_back(&prior.mu());
  out.push_back(&prior.sigma());
  return out;
}

EvalResult evaluate(const RunConfig& cfg, const DetectorModel& model, std::span<const SyntheticScene> scenes) {
  const std::vector<Detection> dets = detect_dataset(model, scenes, cfg.infer);
  std::vector<std::vector<GroundTruth>> gts;
  gts.reserve(scenes.size());
  for (const SyntheticScene& s : scenes) gts.push_back(s.objects);
  return evaluate_ap(dets, gts, cfg.scene.num_categories(), cfg.eval_iou);
}

std::vector<std::string> export_scene_weights(const RunConfig& cfg, const DetectorModel& model,
                                              CenterPrior& prior, const SyntheticScene& scene,
                                              const std::string& directory) {
  const std::vector<PyramidLevelSpec> specs = model.levels();
  const LocationSet locations = make_locations(specs);
  const LossOutput out = autoassign_loss(model.forward(scene.image), scene.objects, locations, prior, cfg.assign);
  return write_weight_report_csv(export_weight_report(out.state), locations, directory);
}

ExperimentResult run_experiment(const RunConfig& cfg, const Datasets& data, const TrainLogger& logger) {
  cfg.validate();
  ExperimentResult r{DetectorModel(cfg.resolved_model()),
                     CenterPrior(cfg.scene.num_categories(), cfg.prior_mode, cfg.prior_mu_init, cfg.prior_sigma_init),
                     {},
                     {}};
  r.log = train(r.model, r.prior, cfg.assign, cfg.train, data.train, logger);
  r.eval = evaluate(cfg, r.model, data.test);
  return r;
}

}  // namespace autoassign
