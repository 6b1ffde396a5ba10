#include "autoassign/gradsuite.hpp"

#include "autoassign/toydet.hpp"

#include <algorithm>
#include <array>
#include <functional>
#include <random>
#include <stdexcept>

namespace autoassign {

namespace {

Eigen::ArrayXd uniform(std::mt19937_64& rng, Index n, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Eigen::ArrayXd v(n);
  for (Index i = 0; i < n; ++i) v(i) = dist(rng);
  return v;
}

GradCheckOptions options_for(const GradSuiteConfig& cfg, double tolerance) {
  GradCheckOptions o;
  o.epsilon = cfg.epsilon;
  o.tolerance = tolerance;
  o.sign_fault = cfg.fault_op;
  return o;
}

struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  double lo;
  double hi;
  std::function<DiffArray(std::span<const DiffArray>)> op;
};

std::vector<OpCase> op_cases() {
  const std::array<Index, 3> pick{2, 0, 2};
  return {
      {"add", {{2, 3}, {1, 3}}, -1, 1, [](auto in) { return in[0] + in[1]; }},
      {"sub", {{2, 3}, {2, 1}}, -1, 1, [](auto in) { return in[0] - in[1]; }},
      {"mul", {{4}, {4}}, -1, 1, [](auto in) { return in[0] * in[1]; }},
      {"div", {{2, 2}, {1, 2}}, 0.5, 1.5, [](auto in) { return in[0] / in[1]; }},
      {"minimum", {{6}, {6}}, -1, 1, [](auto in) { return minimum(in[0], in[1]); }},
      {"maximum", {{6}, {6}}, -1, 1, [](auto in) { return maximum(in[0], in[1]); }},
      {"exp", {{5}}, -1, 1, [](auto in) { return exp(in[0]); }},
      {"log", {{5}}, 0.5, 2, [](auto in) { return log(in[0]); }},
      {"sigmoid", {{5}}, -3, 3, [](auto in) { return sigmoid(in[0]); }},
      {"relu", {{8}}, -1, 1, [](auto in) { return relu(in[0]); }},
      {"power", {{5}}, 0.5, 2, [](auto in) { return power(in[0], 2.5); }},
      {"clamp", {{8}}, -1, 1, [](auto in) { return clamp(in[0], -0.5, 0.5); }},
      {"negate", {{4}}, -1, 1, [](auto in) { return -in[0]; }},
      {"sum", {{3, 4}}, -1, 1, [](auto in) { return sum(in[0], 1); }},
      {"max", {{3, 4}}, -1, 1, [](auto in) { return max(in[0], 0); }},
      {"mean", {{3, 4}}, -1, 1, [](auto in) { return mean(in[0], 0); }},
      {"reshape", {{2, 6}}, -1, 1, [](auto in) { return reshape(in[0], {3, 4}); }},
      {"transpose", {{3, 4}}, -1, 1, [](auto in) { return transpose(in[0]); }},
      {"gather_rows", {{3, 2}}, -1, 1, [pick](auto in) { return gather_rows(in[0], pick); }},
      {"concat_rows", {{1, 3}, {2, 3}}, -1, 1,
       [](auto in) { return concat_rows(std::vector<DiffArray>{in[0], in[1]}); }},
      {"slice_cols", {{3, 4}}, -1, 1, [](auto in) { return slice_cols(in[0], 1, 2); }},
      {"conv2d", {{1, 4, 4}, {1, 1, 3, 3}}, -1, 1, [](auto in) { return conv2d(in[0], in[1], 1, 1); }},
      {"conv2d_strided", {{1, 4, 4}, {1, 1, 3, 3}}, -1, 1,
       [](auto in) { return conv2d(in[0], in[1], 2, 1); }},
      {"conv2d_even", {{1, 4, 4}, {2, 1, 2, 2}}, -1, 1,
       [](auto in) { return conv2d(in[0], in[1], 2, 0); }},
      {"stop_gradient", {{4}}, -1, 1, [](auto in) { return stop_gradient(in[0]) * in[0]; }},
  };
}

std::vector<GroundTruth> random_objects(std::mt19937_64& rng, int count, int num_cat, double extent) {
  std::uniform_real_distribution<double> corner(0.0, extent * 0.45);
  std::uniform_real_distribution<double> size(extent * 0.28, extent * 0.55);
  std::uniform_int_distribution<int> cat(0, num_cat - 1);
  std::vector<GroundTruth> gts;
  for (int i = 0; i < count; ++i) {
    const double x = corner(rng);
    const double y = corner(rng);
    gts.push_back({{x, y, std::min(extent, x + size(rng)), std::min(extent, y + size(rng))}, cat(rng)});
  }
  return gts;
}

}  // namespace

void GradSuiteConfig::validate() const {
  if (seeds < 1) throw std::invalid_argument("grad suites need at least one seed");
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
  if (!(unit_tolerance > 0.0 && end_to_end_tolerance > 0.0)) {
    throw std::invalid_argument("grad-check tolerances must be positive");
  }
  if (fault_op && (*fault_op == OpTag::kLeaf || *fault_op == OpTag::kStopGradient)) {
    throw std::invalid_argument("op '" + std::string(op_name(*fault_op)) + "' has no backward rule to fault");
  }
  assign.validate();
}

std::vector<GradCase> unit_op_suite(const GradSuiteConfig& cfg) {
  cfg.validate();
  std::vector<GradCase> out;
  for (const OpCase& c : op_cases()) {
    for (int seed = 0; seed < cfg.seeds; ++seed) {
      std::mt19937_64 rng(static_cast<std::uint64_t>(seed) * 7919 + 17);
      std::vector<GradInput> inputs;
      for (const Shape& s : c.shapes) inputs.push_back({s, uniform(rng, numel(s), c.lo, c.hi)});
      const Eigen::ArrayXd weights = uniform(rng, 64, 0.5, 1.5);
      const auto f = [&](std::span<const DiffArray> in) {
        const DiffArray y = c.op(in);
        return sum(y * DiffArray::constant(y.shape(), weights.head(y.size())));
      };
      out.push_back({"unit", c.name, seed, cfg.unit_tolerance,
                     grad_check(f, inputs, options_for(cfg, cfg.unit_tolerance))});
    }
  }
  return out;
}

std::vector<GradCase> loss_suite(const GradSuiteConfig& cfg) {
  cfg.validate();
  const std::vector<PyramidLevelSpec> specs{{8, 4, 4}, {16, 2, 2}};
  const LocationSet locs = make_locations(specs);
  const Index num_loc = locs.size();
  const Index k = 2;
  std::vector<GradCase> out;
  for (int seed = 0; seed < cfg.seeds; ++seed) {
    std::mt19937_64 rng(1300 + static_cast<std::uint64_t>(seed));
    const std::vector<GroundTruth> gts = random_objects(rng, 1 + seed % 3, static_cast<int>(k), 32.0);
    CenterPrior prior(static_cast<int>(k), PriorMode::kCategory);
    const std::vector<GradInput> inputs{{{num_loc, k}, uniform(rng, num_loc * k, -3.0, 1.0)},
                                        {{num_loc, 1}, uniform(rng, num_loc, -2.0, 2.0)},
                                        {{num_loc, 4}, uniform(rng, num_loc * 4, 2.0, 14.0)},
                                        {{k, 2}, uniform(rng, 2 * k, -0.5, 0.5)},
                                        {{k, 2}, uniform(rng, 2 * k, 0.6, 1.6)}};
    const auto f = [&](std::span<const DiffArray> x) {
      const BoundPrior bound{&prior, x[3], x[4]};
      return autoassign_loss({x[0], x[1], x[2]}, gts, locs, bound, cfg.assign).total;
    };
    out.push_back({"loss", "autoassign_loss", seed, cfg.unit_tolerance,
                   grad_check(f, inputs, options_for(cfg, cfg.unit_tolerance))});
  }
  return out;
}

std::vector<GradCase> end_to_end_suite(const GradSuiteConfig& cfg) {
  cfg.validate();
  std::vector<GradCase> out;
  for (int seed = 0; seed < cfg.seeds; ++seed) {
    ModelConfig mc;
    mc.image_size = 16;
    mc.num_categories = 2;
    mc.channels = 4;
    mc.initial_box = 2.0;
    mc.seed = 4100 + static_cast<std::uint64_t>(seed);
    DetectorModel model(mc);
    std::mt19937_64 rng(mc.seed);
    // Zero biases put dead units exactly on the relu kink; the output layer is
    // spread so the loss is not flat around the initial state.
    std::vector<Parameter>& params = model.parameters();
    for (std::size_t i = 1; i + 2 < params.size(); i += 2) {
      params[i].value = uniform(rng, params[i].value.size(), -0.1, 0.1);
    }
    Parameter& head = params[params.size() - 2];
    head.value = uniform(rng, head.value.size(), -0.3, 0.3);
    const Eigen::ArrayXd image = uniform(rng, 16 * 16, 0.0, 1.0);
    const std::vector<GroundTruth> gts = random_objects(rng, 1, mc.num_categories, 16.0);
    const std::vector<PyramidLevelSpec> specs = model.levels();
    const LocationSet locs = make_locations(specs);
    CenterPrior prior(mc.num_categories, PriorMode::kCategory);

    std::vector<GradInput> inputs;
    for (const Parameter& p : model.parameters()) inputs.push_back({p.shape, p.value});
    const std::size_t net = inputs.size();
    inputs.push_back({{mc.num_categories, 2}, uniform(rng, 2 * mc.num_categories, -0.5, 0.5)});
    inputs.push_back({{mc.num_categories, 2}, uniform(rng, 2 * mc.num_categories, 0.6, 1.6)});
    const auto f = [&](std::span<const DiffArray> x) {
      const DensePredictions preds = model.forward(x.first(net), image);
      const BoundPrior bound{&prior, x[net], x[net + 1]};
      return autoassign_loss(preds, gts, locs, bound, cfg.assign).total;
    };
    out.push_back({"end-to-end", "detector", seed, cfg.end_to_end_tolerance,
                   grad_check(f, inputs, options_for(cfg, cfg.end_to_end_tolerance))});
  }
  return out;
}

std::vector<GradCase> run_grad_suites(const GradSuiteConfig& cfg) {
  std::vector<GradCase> all = unit_op_suite(cfg);
  std::vector<GradCase> loss = loss_suite(cfg);
  all.insert(all.end(), loss.begin(), loss.end());
  if (cfg.end_to_end) {
    std::vector<GradCase> e2e = end_to_end_suite(cfg);
    all.insert(all.end(), e2e.begin(), e2e.end());
  }
  return all;
}

std::vector<GradSuiteSummary> summarize(const std::vector<GradCase>& cases) {
  std::vector<GradSuiteSummary> out;
  for (const GradCase& c : cases) {
    auto it = std::find_if(out.begin(), out.end(), [&](const GradSuiteSummary& s) { return s.suite == c.suite; });
    if (it == out.end()) {
      out.push_back({});
      it = std::prev(out.end());
      it->suite = c.suite;
    }
    ++it->cases;
    if (!c.passed()) ++it->failed;
    if (it->cases == 1 || c.report.max_rel_error > it->max_rel_error) {
      it->max_rel_error = c.report.max_rel_error;
      it->worst_case = c.name;
      it->worst_seed = c.seed;
      it->worst = c.report.worst;
    }
  }
  return out;
}

}  // namespace autoassign
