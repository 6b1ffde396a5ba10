#pragma once

// Reverse-mode differentiation over dense row-major arrays.
//
// A Tape records every operation applied to tracked arrays. Arrays that do
// not descend from a tracked leaf are plain constants and cost nothing to
// record. All storage is Eigen::ArrayXd in row-major (C) element order.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace autoassign {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Raised on contract violations inside the differentiation core
/// (shape mismatch, out-of-domain log/div, bad axis, ...).
class DiffError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class OpTag : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kExp,
  kLog,
  kSigmoid,
  kRelu,
  kPower,
  kClamp,
  kNegate,
  kMinimum,
  kMaximum,
  kSum,
  kMax,
  kMean,
  kStopGradient,
  kConv2d,
  kReshape,
  kTranspose,
  kGatherRows,
  kConcatRows,
  kSliceCols,
};

std::string_view op_name(OpTag tag);
std::optional<OpTag> op_from_name(std::string_view name);

class Tape;
struct Parameter;

class DiffArray {
 public:
  DiffArray() = default;

  static DiffArray constant(Shape shape, Eigen::ArrayXd values);
  static DiffArray scalar(double value);
  static DiffArray full(Shape shape, double value);

  const Shape& shape() const { return shape_; }
  Index size() const { return values_ ? values_->size() : 0; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  const Eigen::ArrayXd& values() const;
  double item() const;

  bool tracked() const { return tape_ != nullptr && node_ >= 0; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

 private:
  friend class Tape;
  DiffArray(Shape shape, std::shared_ptr<const Eigen::ArrayXd> values, Tape* tape, int node);

  Shape shape_;
  std::shared_ptr<const Eigen::ArrayXd> values_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

/// Named tensor that persists across tapes. Learnable parameters collect
/// gradients from every backward pass on a tape they were bound to.
struct Parameter {
  std::string name;
  Shape shape;
  Eigen::ArrayXd value;
  Eigen::ArrayXd grad;
  Eigen::ArrayXd velocity;
  bool learnable = true;

  Parameter() = default;
  Parameter(std::string name, Shape shape, Eigen::ArrayXd value, bool learnable = true);

  void zero_grad() { grad.setZero(value.size()); }
};

/// Append-only computation record. Confined to one thread.
class Tape {
 public:
  using Backward = std::function<void(const Eigen::ArrayXd& grad, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  DiffArray variable(Shape shape, Eigen::ArrayXd values);
  /// Learnable parameters become tracked leaves; frozen ones are constants.
  DiffArray bind(Parameter& param);

  DiffArray record(OpTag tag, Shape shape, Eigen::ArrayXd values, std::vector<int> parents,
                   Backward backward);

  /// Seeds d(out)/d(out) = 1 and sweeps the record once in reverse. Gradients
  /// of bound learnable parameters are added into Parameter::grad.
  void backward(const DiffArray& out);

  /// Gradient of the last backward pass w.r.t. a tracked array. Zeros when the
  /// array did not influence the output.
  Eigen::ArrayXd grad(const DiffArray& array) const;

  void accumulate(int node, const Eigen::ArrayXd& contribution);

  std::size_t size() const { return nodes_.size(); }

  /// Negates the backward contribution of every node with this tag. Used to
  /// prove the gradient checker catches a broken rule.
  void inject_sign_fault(std::optional<OpTag> tag) { fault_ = tag; }

  // Detached-value replay, used by the gradient checker so that finite
  // differences follow the same contract as the analytic gradient.
  void start_capture_detached();
  void replay_detached(std::vector<Eigen::ArrayXd> values);
  std::vector<Eigen::ArrayXd> take_captured_detached();
  std::optional<Eigen::ArrayXd> next_detached(const Eigen::ArrayXd& live);

  /// Nodes that are ancestors of some stop_gradient node.
  std::vector<bool> detached_ancestors() const;

 private:
  struct Node {
    OpTag tag;
    std::vector<int> parents;
    Backward backward;
  };

  std::vector<Node> nodes_;
  std::vector<Eigen::ArrayXd> grads_;
  std::vector<std::pair<int, Parameter*>> bound_;
  std::optional<OpTag> fault_;

  enum class DetachMode { kOff, kCapture, kReplay };
  DetachMode detach_mode_ = DetachMode::kOff;
  std::vector<Eigen::ArrayXd> detached_;
  std::size_t detached_cursor_ = 0;
};

// ---- elementwise --------------------------------------------------------

// Binary ops broadcast numpy-style: ranks align from the right and a
// dimension of size 1 stretches to match the other side.
DiffArray add(const DiffArray& a, const DiffArray& b);
DiffArray sub(const DiffArray& a, const DiffArray& b);
DiffArray mul(const DiffArray& a, const DiffArray& b);
/// Rejects any zero in the divisor.
DiffArray div(const DiffArray& a, const DiffArray& b);
/// Elementwise min/max; ties route the gradient to `a`.
DiffArray minimum(const DiffArray& a, const DiffArray& b);
DiffArray maximum(const DiffArray& a, const DiffArray& b);

DiffArray exp(const DiffArray& a);
/// Rejects non-positive inputs; clamp first.
DiffArray log(const DiffArray& a);
DiffArray sigmoid(const DiffArray& a);
DiffArray relu(const DiffArray& a);
/// a^exponent. Exponent below 1 requires a > 0.
DiffArray power(const DiffArray& a, double exponent);
/// Gradient passes where lo <= a <= hi, zero where saturated.
DiffArray clamp(const DiffArray& a, double lo, double hi);
DiffArray negate(const DiffArray& a);

DiffArray elementwise(OpTag tag, const DiffArray& a, const DiffArray* b = nullptr,
                      double param0 = 0.0, double param1 = 0.0);

DiffArray operator+(const DiffArray& a, const DiffArray& b);
DiffArray operator-(const DiffArray& a, const DiffArray& b);
DiffArray operator*(const DiffArray& a, const DiffArray& b);
DiffArray operator/(const DiffArray& a, const DiffArray& b);
DiffArray operator-(const DiffArray& a);
DiffArray operator+(const DiffArray& a, double b);
DiffArray operator-(const DiffArray& a, double b);
DiffArray operator*(const DiffArray& a, double b);
DiffArray operator/(const DiffArray& a, double b);
DiffArray operator+(double a, const DiffArray& b);
DiffArray operator-(double a, const DiffArray& b);
DiffArray operator*(double a, const DiffArray& b);

// ---- reductions -----------------------------------------------------------

/// Reduce all elements (axis absent) or one axis, which is removed from the
/// result shape. max sends the gradient to the first maximal element.
DiffArray sum(const DiffArray& a, std::optional<Index> axis = std::nullopt);
DiffArray max(const DiffArray& a, std::optional<Index> axis = std::nullopt);
DiffArray mean(const DiffArray& a, std::optional<Index> axis = std::nullopt);

// ---- structure ------------------------------------------------------------

/// Identical forward value; contributes nothing to ancestors on backward.
DiffArray stop_gradient(const DiffArray& a);

DiffArray reshape(const DiffArray& a, Shape shape);
/// 2-D transpose.
DiffArray transpose(const DiffArray& a);
/// Rows (slices along axis 0) picked by index; repeats allowed.
DiffArray gather_rows(const DiffArray& a, std::span<const Index> rows);
DiffArray concat_rows(std::span<const DiffArray> parts);
/// Columns [begin, begin + count) of a 2-D array.
DiffArray slice_cols(const DiffArray& a, Index begin, Index count);

/// Cross-correlation of input [C,H,W] with kernel [F,C,k,k].
DiffArray conv2d(const DiffArray& input, const DiffArray& kernel, Index stride, Index padding);

// ---- gradient checking ----------------------------------------------------

enum class DetachedPolicy {
  /// Detached values are frozen at the unperturbed point, so the numeric
  /// derivative follows the same contract as the analytic one.
  kFreeze,
  /// Inputs with any path into a stop_gradient are left out of the comparison.
  kExclude,
};

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  DetachedPolicy detached = DetachedPolicy::kFreeze;
  std::optional<OpTag> sign_fault;
};

struct GradCheckCoordinate {
  std::size_t input = 0;
  Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  GradCheckCoordinate worst;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  std::vector<GradCheckCoordinate> failures;
};

using ScalarFunction = std::function<DiffArray(std::span<const DiffArray>)>;

struct GradInput {
  Shape shape;
  Eigen::ArrayXd values;
};

double relative_error(double a, double b);

GradCheckReport grad_check(const ScalarFunction& f, std::span<const GradInput> inputs,
                           const GradCheckOptions& options = {});

// ---- optimization ---------------------------------------------------------

/// v <- momentum*v + grad + decay*param; param <- param - lr*v; grad <- 0.
void sgd_step(std::span<Parameter* const> params, double learning_rate, double momentum,
              double weight_decay);

}  // namespace autoassign
