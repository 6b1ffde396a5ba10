#pragma once

// Axis-aligned boxes, pyramid location grids and the stride-normalized
// center offsets consumed by the center prior.

#include "autoassign/diffcore.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

namespace autoassign {

template <typename Scalar>
struct Box {
  Scalar x1{};
  Scalar y1{};
  Scalar x2{};
  Scalar y2{};

  Scalar width() const { return x2 - x1; }
  Scalar height() const { return y2 - y1; }
  Scalar area() const { return width() * height(); }
  Scalar center_x() const { return (x1 + x2) / Scalar(2); }
  Scalar center_y() const { return (y1 + y2) / Scalar(2); }

  bool valid() const {
    using std::isfinite;
    return isfinite(x1) && isfinite(y1) && isfinite(x2) && isfinite(y2) && x1 < x2 && y1 < y2;
  }

  Box scaled(Scalar factor) const { return {x1 * factor, y1 * factor, x2 * factor, y2 * factor}; }
  Box translated(Scalar dx, Scalar dy) const { return {x1 + dx, y1 + dy, x2 + dx, y2 + dy}; }

  Eigen::Matrix<Scalar, 4, 1> as_vector() const { return {x1, y1, x2, y2}; }

  friend bool operator==(const Box&, const Box&) = default;
};

using Boxd = Box<double>;

template <typename Scalar>
Scalar intersection_area(const Box<Scalar>& a, const Box<Scalar>& b) {
  using std::max;
  using std::min;
  const Scalar w = max(Scalar(0), min(a.x2, b.x2) - max(a.x1, b.x1));
  const Scalar h = max(Scalar(0), min(a.y2, b.y2) - max(a.y1, b.y1));
  return w * h;
}

template <typename Scalar>
Scalar iou(const Box<Scalar>& a, const Box<Scalar>& b) {
  const Scalar inter = intersection_area(a, b);
  const Scalar uni = a.area() + b.area() - inter;
  return uni > Scalar(0) ? inter / uni : Scalar(0);
}

/// Smallest box covering both.
template <typename Scalar>
Box<Scalar> enclosing(const Box<Scalar>& a, const Box<Scalar>& b) {
  using std::max;
  using std::min;
  return {min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2)};
}

/// 1 - GIoU, in [0, 2).
template <typename Scalar>
Scalar giou_loss(const Box<Scalar>& pred, const Box<Scalar>& gt) {
  const Scalar inter = intersection_area(pred, gt);
  const Scalar uni = pred.area() + gt.area() - inter;
  const Scalar encl = enclosing(pred, gt).area();
  const Scalar giou = inter / uni - (encl - uni) / encl;
  return Scalar(1) - giou;
}

/// Box(x - l, y - t, x + r, y + b). Rejects zero-area results.
Boxd ltrb_decode(double x, double y, const Eigen::Array4d& ltrb);
/// Distances from (x, y) to the four box edges.
Eigen::Array4d ltrb_encode(double x, double y, const Boxd& box);

struct PyramidLevelSpec {
  int stride = 1;
  Index height = 0;
  Index width = 0;
};

/// Cell-center coordinates of every pyramid location, level-major and
/// row-major within a level.
struct LocationSet {
  std::vector<PyramidLevelSpec> levels;
  Eigen::ArrayX2d xy;
  Eigen::ArrayXd stride;
  std::vector<int> level;
  std::vector<Index> offset;  // first global index of each level

  Index size() const { return xy.rows(); }
  Index level_size(std::size_t l) const { return levels[l].height * levels[l].width; }
  /// (level, row, col) of a global index.
  std::array<Index, 3> grid_position(Index global) const;
  Index global_index(std::size_t level, Index row, Index col) const;
};

LocationSet make_locations(std::span<const PyramidLevelSpec> specs);

enum class EdgePolicy { kStrictInterior, kInclusive };

struct InBoxIndex {
  int object_id = -1;
  std::vector<Index> indices;
};

InBoxIndex inside_mask(const LocationSet& locations, const Boxd& box, int object_id = -1,
                       EdgePolicy edges = EdgePolicy::kStrictInterior);

/// Offsets from the box center divided by each location's stride; rows
/// follow `indices`. Columns are (dx, dy).
Eigen::ArrayX2d center_offsets(const LocationSet& locations, std::span<const Index> indices,
                               const Boxd& box);

// ---- differentiable forms -------------------------------------------------

/// ltrb [n,4] at locations xy [n,2] -> boxes [n,4] as (x1,y1,x2,y2).
DiffArray ltrb_decode(const DiffArray& ltrb, const Eigen::ArrayX2d& xy);

/// Per-row 1 - GIoU between boxes [n,4] and one fixed box -> [n]. Enclosing
/// and union areas are floored at 1e-9.
DiffArray giou_loss(const DiffArray& boxes, const Boxd& gt);

}  // namespace autoassign
