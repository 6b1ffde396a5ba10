#include "autoassign/diffcore.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <sstream>

namespace autoassign {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr std::array<std::pair<OpTag, std::string_view>, 24> kOpNames{{
    {OpTag::kLeaf, "leaf"},
    {OpTag::kAdd, "add"},
    {OpTag::kSub, "sub"},
    {OpTag::kMul, "mul"},
    {OpTag::kDiv, "div"},
    {OpTag::kExp, "exp"},
    {OpTag::kLog, "log"},
    {OpTag::kSigmoid, "sigmoid"},
    {OpTag::kRelu, "relu"},
    {OpTag::kPower, "power"},
    {OpTag::kClamp, "clamp"},
    {OpTag::kNegate, "negate"},
    {OpTag::kMinimum, "minimum"},
    {OpTag::kMaximum, "maximum"},
    {OpTag::kSum, "sum"},
    {OpTag::kMax, "max"},
    {OpTag::kMean, "mean"},
    {OpTag::kStopGradient, "stop_gradient"},
    {OpTag::kConv2d, "conv2d"},
    {OpTag::kReshape, "reshape"},
    {OpTag::kTranspose, "transpose"},
    {OpTag::kGatherRows, "gather_rows"},
    {OpTag::kConcatRows, "concat_rows"},
    {OpTag::kSliceCols, "slice_cols"},
}};

Tape* common_tape(const DiffArray& a, const DiffArray* b = nullptr) {
  Tape* t = a.tracked() ? a.tape() : nullptr;
  if (b != nullptr && b->tracked()) {
    if (t != nullptr && t != b->tape()) {
      throw DiffError("operands are recorded on different tapes");
    }
    t = b->tape();
  }
  return t;
}

DiffArray make_result(Tape* tape, OpTag tag, Shape shape, Eigen::ArrayXd values,
                      std::vector<int> parents, Tape::Backward backward) {
  if (tape == nullptr) {
    return DiffArray::constant(std::move(shape), std::move(values));
  }
  return tape->record(tag, std::move(shape), std::move(values), std::move(parents),
                      std::move(backward));
}

// Maps each output element of a broadcast binary op back to its source
// element in each operand. An empty map means the operand already has the
// output shape.
struct BroadcastPlan {
  Shape out;
  std::vector<Index> map_a;
  std::vector<Index> map_b;
  bool full_a = true;
  bool full_b = true;
};

std::vector<Index> source_map(const Shape& padded, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<Index> strides(rank, 0);
  Index stride = 1;
  for (std::size_t d = rank; d-- > 0;) {
    strides[d] = padded[d] == 1 ? 0 : stride;
    stride *= padded[d];
  }
  const Index n = numel(out);
  std::vector<Index> map(static_cast<std::size_t>(n));
  std::vector<Index> counter(rank, 0);
  Index src = 0;
  for (Index i = 0; i < n; ++i) {
    map[static_cast<std::size_t>(i)] = src;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      src += strides[d];
      if (counter[d] < out[d]) break;
      src -= strides[d] * counter[d];
      counter[d] = 0;
    }
  }
  return map;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    return plan;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank - a.size(), 1);
  pa.insert(pa.end(), a.begin(), a.end());
  Shape pb(rank - b.size(), 1);
  pb.insert(pb.end(), b.begin(), b.end());
  plan.out.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] == pb[d] || pb[d] == 1) {
      plan.out[d] = pa[d];
    } else if (pa[d] == 1) {
      plan.out[d] = pb[d];
    } else {
      throw DiffError("shape mismatch: " + shape_string(a) + " vs " + shape_string(b));
    }
  }
  plan.full_a = pa == plan.out;
  plan.full_b = pb == plan.out;
  if (!plan.full_a) plan.map_a = source_map(pa, plan.out);
  if (!plan.full_b) plan.map_b = source_map(pb, plan.out);
  return plan;
}

Eigen::ArrayXd expand(const Eigen::ArrayXd& v, const std::vector<Index>& map) {
  if (map.empty()) return v;
  Eigen::ArrayXd out(static_cast<Index>(map.size()));
  for (std::size_t i = 0; i < map.size(); ++i) out(static_cast<Index>(i)) = v(map[i]);
  return out;
}

Eigen::ArrayXd fold(const Eigen::ArrayXd& g, const std::vector<Index>& map, Index n) {
  if (map.empty()) return g;
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(n);
  for (std::size_t i = 0; i < map.size(); ++i) out(map[i]) += g(static_cast<Index>(i));
  return out;
}

enum class Binary { kAdd, kSub, kMul, kDiv, kMin, kMax };

DiffArray binary(Binary kind, OpTag tag, const DiffArray& a, const DiffArray& b) {
  Tape* tape = common_tape(a, &b);
  BroadcastPlan plan = plan_broadcast(a.shape(), b.shape());
  auto ea = std::make_shared<Eigen::ArrayXd>(expand(a.values(), plan.map_a));
  auto eb = std::make_shared<Eigen::ArrayXd>(expand(b.values(), plan.map_b));
  Eigen::ArrayXd out;
  switch (kind) {
    case Binary::kAdd: out = *ea + *eb; break;
    case Binary::kSub: out = *ea - *eb; break;
    case Binary::kMul: out = *ea * *eb; break;
    case Binary::kDiv:
      if ((*eb == 0.0).any()) {
        throw DiffError("division by zero in div " + shape_string(a.shape()) + " / " +
                        shape_string(b.shape()));
      }
      out = *ea / *eb;
      break;
    case Binary::kMin: out = (*eb < *ea).select(*eb, *ea); break;
    case Binary::kMax: out = (*eb > *ea).select(*eb, *ea); break;
  }
  const int na = a.tracked() ? a.node() : -1;
  const int nb = b.tracked() ? b.node() : -1;
  const Index sa = a.size();
  const Index sb = b.size();
  auto map_a = std::make_shared<std::vector<Index>>(std::move(plan.map_a));
  auto map_b = std::make_shared<std::vector<Index>>(std::move(plan.map_b));
  return make_result(
      tape, tag, plan.out, std::move(out), {na, nb},
      [kind, ea, eb, na, nb, sa, sb, map_a, map_b](const Eigen::ArrayXd& g, Tape& t) {
        Eigen::ArrayXd ga;
        Eigen::ArrayXd gb;
        switch (kind) {
          case Binary::kAdd: ga = g; gb = g; break;
          case Binary::kSub: ga = g; gb = -g; break;
          case Binary::kMul: ga = g * *eb; gb = g * *ea; break;
          case Binary::kDiv:
            ga = g / *eb;
            gb = -g * *ea / eb->square();
            break;
          case Binary::kMin: {
            auto pick_b = (*eb < *ea);
            ga = pick_b.select(0.0, g);
            gb = pick_b.select(g, 0.0);
            break;
          }
          case Binary::kMax: {
            auto pick_b = (*eb > *ea);
            ga = pick_b.select(0.0, g);
            gb = pick_b.select(g, 0.0);
            break;
          }
        }
        if (na >= 0) t.accumulate(na, fold(ga, *map_a, sa));
        if (nb >= 0) t.accumulate(nb, fold(gb, *map_b, sb));
      });
}

// Unary op whose local derivative is a function of input and output.
template <typename Forward, typename Local>
DiffArray unary(OpTag tag, const DiffArray& a, Forward forward, Local local) {
  Tape* tape = common_tape(a);
  auto in = std::make_shared<Eigen::ArrayXd>(a.values());
  auto out = std::make_shared<Eigen::ArrayXd>(forward(*in));
  const int na = a.tracked() ? a.node() : -1;
  return make_result(tape, tag, a.shape(), *out, {na},
                     [in, out, na, local](const Eigen::ArrayXd& g, Tape& t) {
                       t.accumulate(na, g * local(*in, *out));
                     });
}

struct AxisSplit {
  Index outer = 1;
  Index n = 1;
  Index inner = 1;
  Shape reduced;
};

AxisSplit split_axis(const Shape& shape, std::optional<Index> axis, std::string_view op) {
  AxisSplit s;
  if (!axis) {
    s.n = numel(shape);
    return s;
  }
  const Index rank = static_cast<Index>(shape.size());
  if (*axis < 0 || *axis >= rank) {
    throw DiffError(std::string(op) + ": axis " + std::to_string(*axis) +
                    " out of range for shape " + shape_string(shape));
  }
  for (Index d = 0; d < rank; ++d) {
    const Index len = shape[static_cast<std::size_t>(d)];
    if (d < *axis) s.outer *= len;
    if (d > *axis) s.inner *= len;
    if (d != *axis) s.reduced.push_back(len);
  }
  s.n = shape[static_cast<std::size_t>(*axis)];
  return s;
}

}  // namespace

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string_view op_name(OpTag tag) {
  for (const auto& [t, name] : kOpNames) {
    if (t == tag) return name;
  }
  return "unknown";
}

std::optional<OpTag> op_from_name(std::string_view name) {
  for (const auto& [t, n] : kOpNames) {
    if (n == name) return t;
  }
  return std::nullopt;
}

// ---- DiffArray / Parameter -------------------------------------------------

DiffArray::DiffArray(Shape shape, std::shared_ptr<const Eigen::ArrayXd> values, Tape* tape,
                     int node)
    : shape_(std::move(shape)), values_(std::move(values)), tape_(tape), node_(node) {}

DiffArray DiffArray::constant(Shape shape, Eigen::ArrayXd values) {
  if (numel(shape) != values.size()) {
    throw DiffError("shape " + shape_string(shape) + " does not hold " +
                    std::to_string(values.size()) + " values");
  }
  return DiffArray(std::move(shape), std::make_shared<const Eigen::ArrayXd>(std::move(values)),
                   nullptr, -1);
}

DiffArray DiffArray::scalar(double value) {
  return constant({}, Eigen::ArrayXd::Constant(1, value));
}

DiffArray DiffArray::full(Shape shape, double value) {
  const Index n = numel(shape);
  return constant(std::move(shape), Eigen::ArrayXd::Constant(n, value));
}

const Eigen::ArrayXd& DiffArray::values() const {
  static const Eigen::ArrayXd kEmpty;
  return values_ ? *values_ : kEmpty;
}

double DiffArray::item() const {
  if (size() != 1) {
    throw DiffError("item() on array of shape " + shape_string(shape_));
  }
  return (*values_)(0);
}

Parameter::Parameter(std::string name_in, Shape shape_in, Eigen::ArrayXd value_in,
                     bool learnable_in)
    : name(std::move(name_in)),
      shape(std::move(shape_in)),
      value(std::move(value_in)),
      grad(Eigen::ArrayXd::Zero(value.size())),
      velocity(Eigen::ArrayXd::Zero(value.size())),
      learnable(learnable_in) {
  if (numel(shape) != value.size()) {
    throw DiffError("parameter " + name + ": shape " + shape_string(shape) + " does not hold " +
                    std::to_string(value.size()) + " values");
  }
}

// ---- Tape -----------------------------------------------------------------

DiffArray Tape::variable(Shape shape, Eigen::ArrayXd values) {
  if (numel(shape) != values.size()) {
    throw DiffError("variable shape " + shape_string(shape) + " does not hold " +
                    std::to_string(values.size()) + " values");
  }
  return record(OpTag::kLeaf, std::move(shape), std::move(values), {}, nullptr);
}

DiffArray Tape::bind(Parameter& param) {
  if (!param.learnable) {
    return DiffArray::constant(param.shape, param.value);
  }
  DiffArray leaf = variable(param.shape, param.value);
  bound_.emplace_back(leaf.node(), &param);
  return leaf;
}

DiffArray Tape::record(OpTag tag, Shape shape, Eigen::ArrayXd values, std::vector<int> parents,
                       Backward backward) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{tag, std::move(parents), std::move(backward)});
  return DiffArray(std::move(shape), std::make_shared<const Eigen::ArrayXd>(std::move(values)),
                   this, id);
}

void Tape::accumulate(int node, const Eigen::ArrayXd& contribution) {
  if (node < 0) return;
  auto& g = grads_[static_cast<std::size_t>(node)];
  if (g.size() == 0) {
    g = contribution;
  } else {
    g += contribution;
  }
}

void Tape::backward(const DiffArray& out) {
  if (!out.tracked() || out.tape() != this) {
    throw DiffError("backward() needs an output recorded on this tape");
  }
  if (out.size() != 1) {
    throw DiffError("backward() needs a scalar output, got " + shape_string(out.shape()));
  }
  grads_.assign(nodes_.size(), Eigen::ArrayXd());
  grads_[static_cast<std::size_t>(out.node())] = Eigen::ArrayXd::Ones(1);
  for (int i = out.node(); i >= 0; --i) {
    const Node& node = nodes_[static_cast<std::size_t>(i)];
    Eigen::ArrayXd& g = grads_[static_cast<std::size_t>(i)];
    if (g.size() == 0 || !node.backward) continue;
    if (fault_ && *fault_ == node.tag) {
      const Eigen::ArrayXd flipped = -g;
      node.backward(flipped, *this);
    } else {
      node.backward(g, *this);
    }
  }
  for (auto& [node, param] : bound_) {
    const auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.size() == 0) continue;
    if (param->grad.size() != param->value.size()) param->zero_grad();
    param->grad += g;
  }
}

Eigen::ArrayXd Tape::grad(const DiffArray& array) const {
  if (array.tracked() && array.tape() == this &&
      static_cast<std::size_t>(array.node()) < grads_.size()) {
    const auto& g = grads_[static_cast<std::size_t>(array.node())];
    if (g.size() > 0) return g;
  }
  return Eigen::ArrayXd::Zero(array.size());
}

void Tape::start_capture_detached() {
  detach_mode_ = DetachMode::kCapture;
  detached_.clear();
}

void Tape::replay_detached(std::vector<Eigen::ArrayXd> values) {
  detach_mode_ = DetachMode::kReplay;
  detached_ = std::move(values);
  detached_cursor_ = 0;
}

std::vector<Eigen::ArrayXd> Tape::take_captured_detached() {
  detach_mode_ = DetachMode::kOff;
  return std::move(detached_);
}

std::optional<Eigen::ArrayXd> Tape::next_detached(const Eigen::ArrayXd& live) {
  switch (detach_mode_) {
    case DetachMode::kOff:
      return std::nullopt;
    case DetachMode::kCapture:
      detached_.push_back(live);
      return std::nullopt;
    case DetachMode::kReplay:
      if (detached_cursor_ >= detached_.size() ||
          detached_[detached_cursor_].size() != live.size()) {
        throw DiffError("detached replay diverged from the captured evaluation");
      }
      return detached_[detached_cursor_++];
  }
  return std::nullopt;
}

std::vector<bool> Tape::detached_ancestors() const {
  std::vector<bool> marked(nodes_.size(), false);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    const bool seed = nodes_[i].tag == OpTag::kStopGradient;
    if (!seed && !marked[i]) continue;
    for (int p : nodes_[i].parents) {
      if (p >= 0) marked[static_cast<std::size_t>(p)] = true;
    }
  }
  return marked;
}

// ---- elementwise ----------------------------------------------------------

DiffArray add(const DiffArray& a, const DiffArray& b) { return binary(Binary::kAdd, OpTag::kAdd, a, b); }
DiffArray sub(const DiffArray& a, const DiffArray& b) { return binary(Binary::kSub, OpTag::kSub, a, b); }
DiffArray mul(const DiffArray& a, const DiffArray& b) { return binary(Binary::kMul, OpTag::kMul, a, b); }
DiffArray div(const DiffArray& a, const DiffArray& b) { return binary(Binary::kDiv, OpTag::kDiv, a, b); }
DiffArray minimum(const DiffArray& a, const DiffArray& b) { return binary(Binary::kMin, OpTag::kMinimum, a, b); }
DiffArray maximum(const DiffArray& a, const DiffArray& b) { return binary(Binary::kMax, OpTag::kMaximum, a, b); }

DiffArray exp(const DiffArray& a) {
  return unary(
      OpTag::kExp, a, [](const Eigen::ArrayXd& x) -> Eigen::ArrayXd { return x.exp(); },
      [](const Eigen::ArrayXd&, const Eigen::ArrayXd& y) -> Eigen::ArrayXd { return y; });
}

DiffArray log(const DiffArray& a) {
  const auto& v = a.values();
  for (Index i = 0; i < v.size(); ++i) {
    if (!(v(i) > 0.0)) {
      std::ostringstream os;
      os << "log of non-positive value " << v(i) << " at index " << i << " of shape "
         << shape_string(a.shape());
      throw DiffError(os.str());
    }
  }
  return unary(
      OpTag::kLog, a, [](const Eigen::ArrayXd& x) -> Eigen::ArrayXd { return x.log(); },
      [](const Eigen::ArrayXd& x, const Eigen::ArrayXd&) -> Eigen::ArrayXd { return x.inverse(); });
}

DiffArray sigmoid(const DiffArray& a) {
  return unary(
      OpTag::kSigmoid, a,
      [](const Eigen::ArrayXd& x) -> Eigen::ArrayXd {
        Eigen::ArrayXd y(x.size());
        for (Index i = 0; i < x.size(); ++i) {
          if (x(i) >= 0.0) {
            y(i) = 1.0 / (1.0 + std::exp(-x(i)));
          } else {
            const double e = std::exp(x(i));
            y(i) = e / (1.0 + e);
          }
        }
        return y;
      },
      [](const Eigen::ArrayXd&, const Eigen::ArrayXd& y) -> Eigen::ArrayXd { return y * (1.0 - y); });
}

DiffArray relu(const DiffArray& a) {
  return unary(
      OpTag::kRelu, a, [](const Eigen::ArrayXd& x) -> Eigen::ArrayXd { return x.max(0.0); },
      [](const Eigen::ArrayXd& x, const Eigen::ArrayXd&) -> Eigen::ArrayXd {
        return (x > 0.0).cast<double>();
      });
}

DiffArray power(const DiffArray& a, double exponent) {
  if (exponent < 1.0 && exponent != 0.0 && (a.values() <= 0.0).any()) {
    throw DiffError("power with exponent " + std::to_string(exponent) +
                    " requires positive inputs");
  }
  if (exponent == 0.0) {
    return unary(
        OpTag::kPower, a,
        [](const Eigen::ArrayXd& x) -> Eigen::ArrayXd { return Eigen::ArrayXd::Ones(x.size()); },
        [](const Eigen::ArrayXd& x, const Eigen::ArrayXd&) -> Eigen::ArrayXd {
          return Eigen::ArrayXd::Zero(x.size());
        });
  }
  return unary(
      OpTag::kPower, a,
      [exponent](const Eigen::ArrayXd& x) -> Eigen::ArrayXd { return x.pow(exponent); },
      [exponent](const Eigen::ArrayXd& x, const Eigen::ArrayXd&) -> Eigen::ArrayXd {
        return exponent * x.pow(exponent - 1.0);
      });
}

DiffArray clamp(const DiffArray& a, double lo, double hi) {
  if (lo > hi) throw DiffError("clamp with lo > hi");
  return unary(
      OpTag::kClamp, a,
      [lo, hi](const Eigen::ArrayXd& x) -> Eigen::ArrayXd { return x.max(lo).min(hi); },
      [lo, hi](const Eigen::ArrayXd& x, const Eigen::ArrayXd&) -> Eigen::ArrayXd {
        return ((x >= lo) && (x <= hi)).cast<double>();
      });
}

DiffArray negate(const DiffArray& a) {
  return unary(
      OpTag::kNegate, a, [](const Eigen::ArrayXd& x) -> Eigen::ArrayXd { return -x; },
      [](const Eigen::ArrayXd& x, const Eigen::ArrayXd&) -> Eigen::ArrayXd {
        return Eigen::ArrayXd::Constant(x.size(), -1.0);
      });
}

DiffArray elementwise(OpTag tag, const DiffArray& a, const DiffArray* b, double param0,
                      double param1) {
  auto need_b = [&]() -> const DiffArray& {
    if (b == nullptr) throw DiffError(std::string(op_name(tag)) + " needs two operands");
    return *b;
  };
  switch (tag) {
    case OpTag::kAdd: return add(a, need_b());
    case OpTag::kSub: return sub(a, need_b());
    case OpTag::kMul: return mul(a, need_b());
    case OpTag::kDiv: return div(a, need_b());
    case OpTag::kMinimum: return minimum(a, need_b());
    case OpTag::kMaximum: return maximum(a, need_b());
    case OpTag::kExp: return exp(a);
    case OpTag::kLog: return log(a);
    case OpTag::kSigmoid: return sigmoid(a);
    case OpTag::kRelu: return relu(a);
    case OpTag::kPower: return power(a, param0);
    case OpTag::kClamp: return clamp(a, param0, param1);
    case OpTag::kNegate: return negate(a);
    default:
      throw DiffError(std::string(op_name(tag)) + " is not an elementwise op");
  }
}

DiffArray operator+(const DiffArray& a, const DiffArray& b) { return add(a, b); }
DiffArray operator-(const DiffArray& a, const DiffArray& b) { return sub(a, b); }
DiffArray operator*(const DiffArray& a, const DiffArray& b) { return mul(a, b); }
DiffArray operator/(const DiffArray& a, const DiffArray& b) { return div(a, b); }
DiffArray operator-(const DiffArray& a) { return negate(a); }
DiffArray operator+(const DiffArray& a, double b) { return add(a, DiffArray::scalar(b)); }
DiffArray operator-(const DiffArray& a, double b) { return sub(a, DiffArray::scalar(b)); }
DiffArray operator*(const DiffArray& a, double b) { return mul(a, DiffArray::scalar(b)); }
DiffArray operator/(const DiffArray& a, double b) { return div(a, DiffArray::scalar(b)); }
DiffArray operator+(double a, const DiffArray& b) { return add(DiffArray::scalar(a), b); }
DiffArray operator-(double a, const DiffArray& b) { return sub(DiffArray::scalar(a), b); }
DiffArray operator*(double a, const DiffArray& b) { return mul(DiffArray::scalar(a), b); }

// ---- reductions -----------------------------------------------------------

DiffArray sum(const DiffArray& a, std::optional<Index> axis) {
  const AxisSplit s = split_axis(a.shape(), axis, "sum");
  const auto& v = a.values();
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(s.outer * s.inner);
  for (Index o = 0; o < s.outer; ++o) {
    for (Index k = 0; k < s.n; ++k) {
      out.segment(o * s.inner, s.inner) += v.segment((o * s.n + k) * s.inner, s.inner);
    }
  }
  const int na = a.tracked() ? a.node() : -1;
  return make_result(common_tape(a), OpTag::kSum, s.reduced, std::move(out), {na},
                     [s, na](const Eigen::ArrayXd& g, Tape& t) {
                       Eigen::ArrayXd ga(s.outer * s.n * s.inner);
                       for (Index o = 0; o < s.outer; ++o) {
                         for (Index k = 0; k < s.n; ++k) {
                           ga.segment((o * s.n + k) * s.inner, s.inner) =
                               g.segment(o * s.inner, s.inner);
                         }
                       }
                       t.accumulate(na, ga);
                     });
}

DiffArray max(const DiffArray& a, std::optional<Index> axis) {
  const AxisSplit s = split_axis(a.shape(), axis, "max");
  if (s.n == 0) throw DiffError("max over an empty axis");
  const auto& v = a.values();
  Eigen::ArrayXd out(s.outer * s.inner);
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(s.outer * s.inner));
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      Index best = o * s.n * s.inner + i;
      for (Index k = 1; k < s.n; ++k) {
        const Index idx = (o * s.n + k) * s.inner + i;
        if (v(idx) > v(best)) best = idx;
      }
      out(o * s.inner + i) = v(best);
      (*argmax)[static_cast<std::size_t>(o * s.inner + i)] = best;
    }
  }
  const int na = a.tracked() ? a.node() : -1;
  const Index n_in = a.size();
  return make_result(common_tape(a), OpTag::kMax, s.reduced, std::move(out), {na},
                     [argmax, na, n_in](const Eigen::ArrayXd& g, Tape& t) {
                       Eigen::ArrayXd ga = Eigen::ArrayXd::Zero(n_in);
                       for (std::size_t i = 0; i < argmax->size(); ++i) {
                         ga((*argmax)[i]) += g(static_cast<Index>(i));
                       }
                       t.accumulate(na, ga);
                     });
}

DiffArray mean(const DiffArray& a, std::optional<Index> axis) {
  const AxisSplit s = split_axis(a.shape(), axis, "mean");
  if (s.n == 0) throw DiffError("mean over an empty axis");
  const auto& v = a.values();
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(s.outer * s.inner);
  for (Index o = 0; o < s.outer; ++o) {
    for (Index k = 0; k < s.n; ++k) {
      out.segment(o * s.inner, s.inner) += v.segment((o * s.n + k) * s.inner, s.inner);
    }
  }
  const double scale = 1.0 / static_cast<double>(s.n);
  out *= scale;
  const int na = a.tracked() ? a.node() : -1;
  return make_result(common_tape(a), OpTag::kMean, s.reduced, std::move(out), {na},
                     [s, na, scale](const Eigen::ArrayXd& g, Tape& t) {
                       Eigen::ArrayXd ga(s.outer * s.n * s.inner);
                       for (Index o = 0; o < s.outer; ++o) {
                         for (Index k = 0; k < s.n; ++k) {
                           ga.segment((o * s.n + k) * s.inner, s.inner) =
                               g.segment(o * s.inner, s.inner) * scale;
                         }
                       }
                       t.accumulate(na, ga);
                     });
}

// ---- structure ------------------------------------------------------------

DiffArray stop_gradient(const DiffArray& a) {
  if (!a.tracked()) return a;
  Tape& tape = *a.tape();
  std::optional<Eigen::ArrayXd> frozen = tape.next_detached(a.values());
  Eigen::ArrayXd values = frozen ? std::move(*frozen) : a.values();
  return tape.record(OpTag::kStopGradient, a.shape(), std::move(values), {a.node()}, nullptr);
}

DiffArray reshape(const DiffArray& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DiffError("reshape " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  const int na = a.tracked() ? a.node() : -1;
  return make_result(common_tape(a), OpTag::kReshape, std::move(shape), a.values(), {na},
                     [na](const Eigen::ArrayXd& g, Tape& t) { t.accumulate(na, g); });
}

DiffArray transpose(const DiffArray& a) {
  if (a.rank() != 2) throw DiffError("transpose needs rank 2, got " + shape_string(a.shape()));
  const Index rows = a.dim(0);
  const Index cols = a.dim(1);
  Eigen::ArrayXd out(a.size());
  Eigen::Map<RowMatrix>(out.data(), cols, rows) =
      Eigen::Map<const RowMatrix>(a.values().data(), rows, cols).transpose();
  const int na = a.tracked() ? a.node() : -1;
  return make_result(common_tape(a), OpTag::kTranspose, {cols, rows}, std::move(out), {na},
                     [na, rows, cols](const Eigen::ArrayXd& g, Tape& t) {
                       Eigen::ArrayXd ga(g.size());
                       Eigen::Map<RowMatrix>(ga.data(), rows, cols) =
                           Eigen::Map<const RowMatrix>(g.data(), cols, rows).transpose();
                       t.accumulate(na, ga);
                     });
}

DiffArray gather_rows(const DiffArray& a, std::span<const Index> rows) {
  if (a.rank() < 1) throw DiffError("gather_rows needs rank >= 1");
  const Index n_rows = a.dim(0);
  const Index width = n_rows == 0 ? 0 : a.size() / n_rows;
  auto picked = std::make_shared<std::vector<Index>>(rows.begin(), rows.end());
  Eigen::ArrayXd out(static_cast<Index>(picked->size()) * width);
  for (std::size_t r = 0; r < picked->size(); ++r) {
    const Index src = (*picked)[r];
    if (src < 0 || src >= n_rows) {
      throw DiffError("gather_rows: row " + std::to_string(src) + " out of range for shape " +
                      shape_string(a.shape()));
    }
    out.segment(static_cast<Index>(r) * width, width) = a.values().segment(src * width, width);
  }
  Shape shape = a.shape();
  shape[0] = static_cast<Index>(picked->size());
  const int na = a.tracked() ? a.node() : -1;
  const Index n_in = a.size();
  return make_result(common_tape(a), OpTag::kGatherRows, std::move(shape), std::move(out), {na},
                     [picked, width, na, n_in](const Eigen::ArrayXd& g, Tape& t) {
                       Eigen::ArrayXd ga = Eigen::ArrayXd::Zero(n_in);
                       for (std::size_t r = 0; r < picked->size(); ++r) {
                         ga.segment((*picked)[r] * width, width) +=
                             g.segment(static_cast<Index>(r) * width, width);
                       }
                       t.accumulate(na, ga);
                     });
}

DiffArray concat_rows(std::span<const DiffArray> parts) {
  if (parts.empty()) throw DiffError("concat_rows of nothing");
  Tape* tape = nullptr;
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  Index rows = 0;
  Index total = 0;
  for (const DiffArray& p : parts) {
    if (p.rank() < 1 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw DiffError("concat_rows shape mismatch: " + shape_string(parts[0].shape()) + " vs " +
                      shape_string(p.shape()));
    }
    Tape* t = common_tape(p);
    if (t != nullptr) {
      if (tape != nullptr && tape != t) throw DiffError("operands are recorded on different tapes");
      tape = t;
    }
    rows += p.dim(0);
    total += p.size();
  }
  Eigen::ArrayXd out(total);
  std::vector<int> parents;
  auto spans = std::make_shared<std::vector<std::pair<int, std::pair<Index, Index>>>>();
  Index offset = 0;
  for (const DiffArray& p : parts) {
    out.segment(offset, p.size()) = p.values();
    const int np = p.tracked() ? p.node() : -1;
    parents.push_back(np);
    spans->push_back({np, {offset, p.size()}});
    offset += p.size();
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_result(tape, OpTag::kConcatRows, std::move(shape), std::move(out),
                     std::move(parents), [spans](const Eigen::ArrayXd& g, Tape& t) {
                       for (const auto& [node, range] : *spans) {
                         if (node >= 0) t.accumulate(node, g.segment(range.first, range.second));
                       }
                     });
}

DiffArray slice_cols(const DiffArray& a, Index begin, Index count) {
  if (a.rank() != 2) throw DiffError("slice_cols needs rank 2, got " + shape_string(a.shape()));
  const Index rows = a.dim(0);
  const Index cols = a.dim(1);
  if (begin < 0 || count < 0 || begin + count > cols) {
    throw DiffError("slice_cols [" + std::to_string(begin) + ", " +
                    std::to_string(begin + count) + ") out of range for " +
                    shape_string(a.shape()));
  }
  Eigen::ArrayXd out(rows * count);
  Eigen::Map<RowMatrix>(out.data(), rows, count) =
      Eigen::Map<const RowMatrix>(a.values().data(), rows, cols).middleCols(begin, count);
  const int na = a.tracked() ? a.node() : -1;
  return make_result(common_tape(a), OpTag::kSliceCols, {rows, count}, std::move(out), {na},
                     [na, rows, cols, begin, count](const Eigen::ArrayXd& g, Tape& t) {
                       Eigen::ArrayXd ga = Eigen::ArrayXd::Zero(rows * cols);
                       Eigen::Map<RowMatrix>(ga.data(), rows, cols).middleCols(begin, count) =
                           Eigen::Map<const RowMatrix>(g.data(), rows, count);
                       t.accumulate(na, ga);
                     });
}

// ---- convolution ----------------------------------------------------------

DiffArray conv2d(const DiffArray& input, const DiffArray& kernel, Index stride, Index padding) {
  if (input.rank() != 3 || kernel.rank() != 4) {
    throw DiffError("conv2d expects input [C,H,W] and kernel [F,C,k,k], got " +
                    shape_string(input.shape()) + " and " + shape_string(kernel.shape()));
  }
  const Index channels = input.dim(0);
  const Index height = input.dim(1);
  const Index width = input.dim(2);
  const Index filters = kernel.dim(0);
  const Index k = kernel.dim(2);
  if (kernel.dim(1) != channels || kernel.dim(3) != k || k < 1) {
    throw DiffError("conv2d kernel " + shape_string(kernel.shape()) +
                    " incompatible with input " + shape_string(input.shape()));
  }
  if (stride < 1 || padding < 0) throw DiffError("conv2d needs stride >= 1 and padding >= 0");
  const Index out_h = (height + 2 * padding - k) / stride + 1;
  const Index out_w = (width + 2 * padding - k) / stride + 1;
  if (height + 2 * padding - k < 0 || width + 2 * padding - k < 0 || out_h <= 0 || out_w <= 0) {
    throw DiffError("conv2d output would be empty for input " + shape_string(input.shape()));
  }
  const Index patch = channels * k * k;
  const Index positions = out_h * out_w;

  // im2col: one column per output position.
  auto cols = std::make_shared<RowMatrix>(RowMatrix::Zero(patch, positions));
  const double* in = input.values().data();
  for (Index c = 0; c < channels; ++c) {
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        double* row = cols->row((c * k + ki) * k + kj).data();
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - padding + ki;
          if (iy < 0 || iy >= height) continue;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - padding + kj;
            if (ix < 0 || ix >= width) continue;
            row[oy * out_w + ox] = in[(c * height + iy) * width + ix];
          }
        }
      }
    }
  }
  auto weights = std::make_shared<RowMatrix>(
      Eigen::Map<const RowMatrix>(kernel.values().data(), filters, patch));
  Eigen::ArrayXd out(filters * positions);
  Eigen::Map<RowMatrix>(out.data(), filters, positions).noalias() = (*weights) * (*cols);

  Tape* tape = common_tape(input, &kernel);
  const int ni = input.tracked() ? input.node() : -1;
  const int nk = kernel.tracked() ? kernel.node() : -1;
  return make_result(
      tape, OpTag::kConv2d, {filters, out_h, out_w}, std::move(out), {ni, nk},
      [=](const Eigen::ArrayXd& g, Tape& t) {
        Eigen::Map<const RowMatrix> grad_out(g.data(), filters, positions);
        if (nk >= 0) {
          Eigen::ArrayXd gk(filters * patch);
          Eigen::Map<RowMatrix>(gk.data(), filters, patch).noalias() =
              grad_out * cols->transpose();
          t.accumulate(nk, gk);
        }
        if (ni >= 0) {
          const RowMatrix grad_cols = weights->transpose() * grad_out;
          Eigen::ArrayXd gi = Eigen::ArrayXd::Zero(channels * height * width);
          for (Index c = 0; c < channels; ++c) {
            for (Index ki = 0; ki < k; ++ki) {
              for (Index kj = 0; kj < k; ++kj) {
                const double* row = grad_cols.row((c * k + ki) * k + kj).data();
                for (Index oy = 0; oy < out_h; ++oy) {
                  const Index iy = oy * stride - padding + ki;
                  if (iy < 0 || iy >= height) continue;
                  for (Index ox = 0; ox < out_w; ++ox) {
                    const Index ix = ox * stride - padding + kj;
                    if (ix < 0 || ix >= width) continue;
                    gi((c * height + iy) * width + ix) += row[oy * out_w + ox];
                  }
                }
              }
            }
          }
          t.accumulate(ni, gi);
        }
      });
}

// ---- gradient checking ----------------------------------------------------

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

GradCheckReport grad_check(const ScalarFunction& f, std::span<const GradInput> inputs,
                           const GradCheckOptions& options) {
  GradCheckReport report;

  Tape tape;
  tape.inject_sign_fault(options.sign_fault);
  if (options.detached == DetachedPolicy::kFreeze) tape.start_capture_detached();
  std::vector<DiffArray> leaves;
  leaves.reserve(inputs.size());
  for (const GradInput& in : inputs) leaves.push_back(tape.variable(in.shape, in.values));
  const DiffArray out = f(leaves);
  if (!out.tracked()) {
    // Output does not depend on any input: every analytic gradient is zero.
    for (const GradInput& in : inputs) report.checked += static_cast<std::size_t>(in.values.size());
    return report;
  }
  tape.backward(out);
  std::vector<Eigen::ArrayXd> analytic;
  for (const DiffArray& leaf : leaves) analytic.push_back(tape.grad(leaf));
  std::vector<Eigen::ArrayXd> frozen;
  if (options.detached == DetachedPolicy::kFreeze) frozen = tape.take_captured_detached();

  std::vector<bool> excluded(inputs.size(), false);
  if (options.detached == DetachedPolicy::kExclude) {
    const std::vector<bool> marked = tape.detached_ancestors();
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      excluded[i] = marked[static_cast<std::size_t>(leaves[i].node())];
    }
  }

  auto evaluate = [&](std::size_t which, Index coord, double value) {
    Tape probe;
    if (options.detached == DetachedPolicy::kFreeze) probe.replay_detached(frozen);
    std::vector<DiffArray> xs;
    xs.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      Eigen::ArrayXd v = inputs[i].values;
      if (i == which) v(coord) = value;
      xs.push_back(probe.variable(inputs[i].shape, std::move(v)));
    }
    try {
      return f(xs).item();
    } catch (const DiffError&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Index j = 0; j < inputs[i].values.size(); ++j) {
      if (excluded[i]) {
        ++report.excluded;
        continue;
      }
      const double x = inputs[i].values(j);
      const double fp = evaluate(i, j, x + options.epsilon);
      const double fm = evaluate(i, j, x - options.epsilon);
      GradCheckCoordinate c;
      c.input = i;
      c.index = j;
      c.analytic = analytic[i](j);
      c.numeric = (fp - fm) / (2.0 * options.epsilon);
      c.rel_error = std::isfinite(fp) && std::isfinite(fm)
                        ? relative_error(c.analytic, c.numeric)
                        : std::numeric_limits<double>::infinity();
      ++report.checked;
      if (report.checked == 1 || c.rel_error > report.max_rel_error) {
        report.max_rel_error = c.rel_error;
        report.worst = c;
      }
      if (!(c.rel_error < options.tolerance)) {
        report.passed = false;
        report.failures.push_back(c);
      }
    }
  }
  return report;
}

// ---- optimization ---------------------------------------------------------

void sgd_step(std::span<Parameter* const> params, double learning_rate, double momentum,
              double weight_decay) {
  for (Parameter* p : params) {
    if (!p->learnable) continue;
    if (p->grad.size() != p->value.size()) p->zero_grad();
    if (p->velocity.size() != p->value.size()) p->velocity.setZero(p->value.size());
    p->velocity = momentum * p->velocity + p->grad + weight_decay * p->value;
    p->value -= learning_rate * p->velocity;
    p->grad.setZero();
  }
}

}  // namespace autoassign
