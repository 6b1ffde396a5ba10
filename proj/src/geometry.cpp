#include "autoassign/geometry.hpp"

#include <array>
#include <sstream>

namespace autoassign {

namespace {
constexpr double kAreaFloor = 1e-9;
}

Boxd ltrb_decode(double x, double y, const Eigen::Array4d& ltrb) {
  if ((ltrb < 0.0).any()) throw std::invalid_argument("ltrb offsets must be non-negative");
  const Boxd box{x - ltrb(0), y - ltrb(1), x + ltrb(2), y + ltrb(3)};
  if (!box.valid()) {
    std::ostringstream os;
    os << "degenerate decoded box (" << box.x1 << ", " << box.y1 << ", " << box.x2 << ", "
       << box.y2 << ")";
    throw std::invalid_argument(os.str());
  }
  return box;
}

Eigen::Array4d ltrb_encode(double x, double y, const Boxd& box) {
  return {x - box.x1, y - box.y1, box.x2 - x, box.y2 - y};
}

std::array<Index, 3> LocationSet::grid_position(Index global) const {
  const int l = level.at(static_cast<std::size_t>(global));
  const Index local = global - offset[static_cast<std::size_t>(l)];
  const Index w = levels[static_cast<std::size_t>(l)].width;
  return {l, local / w, local % w};
}

Index LocationSet::global_index(std::size_t l, Index row, Index col) const {
  return offset.at(l) + row * levels.at(l).width + col;
}

LocationSet make_locations(std::span<const PyramidLevelSpec> specs) {
  if (specs.empty()) throw std::invalid_argument("make_locations needs at least one level");
  LocationSet set;
  Index total = 0;
  int previous_stride = 0;
  for (const auto& s : specs) {
    if (s.stride < 1 || s.height < 1 || s.width < 1) {
      throw std::invalid_argument("pyramid level with stride " + std::to_string(s.stride) +
                                  " and size " + std::to_string(s.height) + "x" +
                                  std::to_string(s.width) + " is empty");
    }
    if (s.stride <= previous_stride) {
      throw std::invalid_argument("pyramid strides must strictly increase");
    }
    previous_stride = s.stride;
    set.offset.push_back(total);
    total += s.height * s.width;
  }
  set.levels.assign(specs.begin(), specs.end());
  set.xy.resize(total, 2);
  set.stride.resize(total);
  set.level.resize(static_cast<std::size_t>(total));
  Index g = 0;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    const double s = specs[l].stride;
    for (Index i = 0; i < specs[l].height; ++i) {
      for (Index j = 0; j < specs[l].width; ++j, ++g) {
        set.xy(g, 0) = (static_cast<double>(j) + 0.5) * s;
        set.xy(g, 1) = (static_cast<double>(i) + 0.5) * s;
        set.stride(g) = s;
        set.level[static_cast<std::size_t>(g)] = static_cast<int>(l);
      }
    }
  }
  return set;
}

InBoxIndex inside_mask(const LocationSet& locations, const Boxd& box, int object_id,
                       EdgePolicy edges) {
  InBoxIndex result;
  result.object_id = object_id;
  for (Index g = 0; g < locations.size(); ++g) {
    const double x = locations.xy(g, 0);
    const double y = locations.xy(g, 1);
    const bool inside = edges == EdgePolicy::kStrictInterior
                            ? (box.x1 < x && x < box.x2 && box.y1 < y && y < box.y2)
                            : (box.x1 <= x && x <= box.x2 && box.y1 <= y && y <= box.y2);
    if (inside) result.indices.push_back(g);
  }
  return result;
}

Eigen::ArrayX2d center_offsets(const LocationSet& locations, std::span<const Index> indices,
                               const Boxd& box) {
  Eigen::ArrayX2d d(static_cast<Index>(indices.size()), 2);
  const double cx = box.center_x();
  const double cy = box.center_y();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Index g = indices[i];
    const Index r = static_cast<Index>(i);
    d(r, 0) = (locations.xy(g, 0) - cx) / locations.stride(g);
    d(r, 1) = (locations.xy(g, 1) - cy) / locations.stride(g);
  }
  return d;
}

DiffArray ltrb_decode(const DiffArray& ltrb, const Eigen::ArrayX2d& xy) {
  if (ltrb.rank() != 2 || ltrb.dim(1) != 4 || ltrb.dim(0) != xy.rows()) {
    throw DiffError("ltrb_decode: ltrb " + shape_string(ltrb.shape()) + " vs " +
                    std::to_string(xy.rows()) + " locations");
  }
  const Index n = xy.rows();
  // Sign pattern (-,-,+,+) applied to ltrb and added to (x, y, x, y).
  Eigen::ArrayXd base(n * 4);
  for (Index i = 0; i < n; ++i) {
    base(4 * i + 0) = xy(i, 0);
    base(4 * i + 1) = xy(i, 1);
    base(4 * i + 2) = xy(i, 0);
    base(4 * i + 3) = xy(i, 1);
  }
  const DiffArray sign = DiffArray::constant({1, 4}, Eigen::Array4d(-1.0, -1.0, 1.0, 1.0));
  return DiffArray::constant({n, 4}, std::move(base)) + ltrb * sign;
}

DiffArray giou_loss(const DiffArray& boxes, const Boxd& gt) {
  if (boxes.rank() != 2 || boxes.dim(1) != 4) {
    throw DiffError("giou_loss expects boxes [n,4], got " + shape_string(boxes.shape()));
  }
  const DiffArray x1 = slice_cols(boxes, 0, 1);
  const DiffArray y1 = slice_cols(boxes, 1, 1);
  const DiffArray x2 = slice_cols(boxes, 2, 1);
  const DiffArray y2 = slice_cols(boxes, 3, 1);
  const auto c = [](double v) { return DiffArray::scalar(v); };

  const DiffArray area = (x2 - x1) * (y2 - y1);
  const DiffArray iw = relu(minimum(x2, c(gt.x2)) - maximum(x1, c(gt.x1)));
  const DiffArray ih = relu(minimum(y2, c(gt.y2)) - maximum(y1, c(gt.y1)));
  const DiffArray inter = iw * ih;
  const DiffArray uni = maximum(area + gt.area() - inter, c(kAreaFloor));
  const DiffArray ew = maximum(x2, c(gt.x2)) - minimum(x1, c(gt.x1));
  const DiffArray eh = maximum(y2, c(gt.y2)) - minimum(y1, c(gt.y1));
  const DiffArray encl = maximum(ew * eh, c(kAreaFloor));
  const DiffArray giou = inter / uni - (encl - uni) / encl;
  return reshape(1.0 - giou, {boxes.dim(0)});
}

}  // namespace autoassign
