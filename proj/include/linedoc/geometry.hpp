#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>

namespace linedoc {

// Axis-aligned box in normalized layout units [0, 1000].
struct BBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool valid() const {
    return 0 <= x0 && x0 <= x1 && x1 <= 1000 && 0 <= y0 && y0 <= y1 &&
           y1 <= 1000;
  }
  bool contains(const BBox& other) const {
    return x0 <= other.x0 && y0 <= other.y0 && x1 >= other.x1 && y1 >= other.y1;
  }
  bool operator==(const BBox& o) const {
    return x0 == o.x0 && y0 == o.y0 && x1 == o.x1 && y1 == o.y1;
  }
};

struct PixelBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

// floor(c * 1000 / dim), clamped; total for any in-range pixel box
inline BBox normalize_bbox(const PixelBox& box, int page_w, int page_h) {
  if (page_w <= 0 || page_h <= 0)
    throw std::invalid_argument("normalize_bbox: non-positive page size");
  if (box.x0 > box.x1 || box.y0 > box.y1)
    throw std::invalid_argument("normalize_bbox: inverted box");
  if (box.x0 < 0 || box.y0 < 0 || box.x1 > page_w || box.y1 > page_h)
    throw std::out_of_range("normalize_bbox: box out of range");
  auto norm = [](int c, int dim) {
    int v = static_cast<int>(static_cast<int64_t>(c) * 1000 / dim);
    return std::clamp(v, 0, 1000);
  };
  return BBox{norm(box.x0, page_w), norm(box.y0, page_h), norm(box.x1, page_w),
              norm(box.y1, page_h)};
}

struct GridConfig {
  int rows = 7;
  int cols = 7;
  int cell_count() const { return rows * cols; }
};

// grid cell of a box center; clamping makes this total for any valid BBox
inline int assign_grid(const BBox& box, const GridConfig& grid) {
  if (!box.valid()) throw std::invalid_argument("assign_grid: invalid bbox");
  if (grid.cell_count() < 2)
    throw std::invalid_argument("assign_grid: G must be >= 2");
  double cx = 0.5 * (box.x0 + box.x1);
  double cy = 0.5 * (box.y0 + box.y1);
  int row = std::clamp(static_cast<int>(cy * grid.rows / 1000.0), 0,
                       grid.rows - 1);
  int col = std::clamp(static_cast<int>(cx * grid.cols / 1000.0), 0,
                       grid.cols - 1);
  return row * grid.cols + col;
}

// layout-unit box of one grid cell, used as the 2D box of visual tokens
inline BBox grid_cell_bbox(int index, const GridConfig& grid) {
  if (index < 0 || index >= grid.cell_count())
    throw std::out_of_range("grid_cell_bbox: bad index");
  int row = index / grid.cols, col = index % grid.cols;
  return BBox{col * 1000 / grid.cols, row * 1000 / grid.rows,
              (col + 1) * 1000 / grid.cols, (row + 1) * 1000 / grid.rows};
}

}  // namespace linedoc
