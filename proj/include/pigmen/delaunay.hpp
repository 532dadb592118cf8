#pragma once

// Incremental Bowyer-Watson Delaunay triangulation of a 2D point cloud.
// Quadratic in the worst case; intended for fixture meshes of a few
// thousand points.

#include "pigmen/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <utility>
#include <vector>

namespace pigmen::mesh::detail {

struct Point2 {
  double x;
  double y;
};

class Delaunay2 {
 public:
  /// Triangulates `points`; returned triangles index into `points` and are
  /// counter-clockwise.
  static std::vector<std::array<int, 3>> triangulate(const std::vector<Point2>& points) {
    Delaunay2 d(points);
    for (int i = 0; i < static_cast<int>(points.size()); ++i) d.insert(i);
    return d.finish();
  }

 private:
  struct Tri {
    std::array<int, 3> v;
    double cx, cy, r2;
    bool alive;
  };

  explicit Delaunay2(const std::vector<Point2>& points) : pts_(points) {
    double xmin = 1e300, ymin = 1e300, xmax = -1e300, ymax = -1e300;
    for (const auto& p : points) {
      xmin = std::min(xmin, p.x);
      xmax = std::max(xmax, p.x);
      ymin = std::min(ymin, p.y);
      ymax = std::max(ymax, p.y);
    }
    const double span = std::max({xmax - xmin, ymax - ymin, 1.0});
    const double mx = 0.5 * (xmin + xmax);
    const double my = 0.5 * (ymin + ymax);
    n_real_ = static_cast<int>(points.size());
    pts_.push_back({mx - 20 * span, my - 10 * span});
    pts_.push_back({mx + 20 * span, my - 10 * span});
    pts_.push_back({mx, my + 20 * span});
    add(n_real_, n_real_ + 1, n_real_ + 2);
  }

  void add(int a, int b, int c) {
    const auto& A = pts_[a];
    const auto& B = pts_[b];
    const auto& C = pts_[c];
    if ((B.x - A.x) * (C.y - A.y) - (B.y - A.y) * (C.x - A.x) < 0.0) std::swap(b, c);
    const auto& P = pts_[a];
    const auto& Q = pts_[b];
    const auto& R = pts_[c];
    const double bx = Q.x - P.x, by = Q.y - P.y, cx = R.x - P.x, cy = R.y - P.y;
    const double d = 2.0 * (bx * cy - by * cx);
    const double ux = (cy * (bx * bx + by * by) - by * (cx * cx + cy * cy)) / d;
    const double uy = (bx * (cx * cx + cy * cy) - cx * (bx * bx + by * by)) / d;
    tris_.push_back({{a, b, c}, P.x + ux, P.y + uy, ux * ux + uy * uy, true});
  }

  void insert(int pi) {
    const auto& p = pts_[pi];
    std::map<std::pair<int, int>, int> boundary;
    for (auto& t : tris_) {
      if (!t.alive) continue;
      const double dx = p.x - t.cx, dy = p.y - t.cy;
      if (dx * dx + dy * dy < t.r2 * (1.0 - 1e-12)) {
        t.alive = false;
        for (int e = 0; e < 3; ++e) {
          int a = t.v[e], b = t.v[(e + 1) % 3];
          auto key = std::minmax(a, b);
          ++boundary[{key.first, key.second}];
        }
      }
    }
    for (const auto& [edge, count] : boundary) {
      if (count == 1) add(edge.first, edge.second, pi);
    }
    if (tris_.size() > 4 * static_cast<std::size_t>(alive_estimate_ + 64)) compact();
  }

  void compact() {
    std::erase_if(tris_, [](const Tri& t) { return !t.alive; });
    alive_estimate_ = static_cast<int>(tris_.size());
  }

  std::vector<std::array<int, 3>> finish() {
    std::vector<std::array<int, 3>> out;
    for (const auto& t : tris_) {
      if (!t.alive) continue;
      if (t.v[0] >= n_real_ || t.v[1] >= n_real_ || t.v[2] >= n_real_) continue;
      out.push_back(t.v);
    }
    return out;
  }

  std::vector<Point2> pts_;
  std::vector<Tri> tris_;
  int n_real_ = 0;
  int alive_estimate_ = 1;
};

}  // namespace pigmen::mesh::detail
