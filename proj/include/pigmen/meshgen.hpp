#pragma once

// Deterministic generators for the fixture geometries:
//   rectangle(nx, ny[, lx, ly])   structured triangles, g2 on x=0, g1 on x=lx
//   annulus(r_in, r_out, n)       structured polar triangles, g1 inner, g2 outer
//   rings2d(level)                five interlocking annuli, Delaunay-meshed
//   lshape3d(level)               voxel L-block (sharp re-entrant corner)
//   elbow3d(level)                voxelized tube along a smooth winding path
// 3D shapes are voxel sets split into Kuhn tetrahedra (6 per cube).

#include "pigmen/delaunay.hpp"
#include "pigmen/mesh.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace pigmen::mesh {

struct MeshSpec {
  std::string kind;
  std::vector<double> params;

  std::string str() const {
    std::ostringstream ss;
    ss << kind;
    for (double p : params) ss << ' ' << detail::format_double(p);
    return ss.str();
  }
};

/// Parses "kind p1 p2 ..." (whitespace separated).
inline MeshSpec parse_spec(const std::string& text) {
  std::istringstream ss(text);
  MeshSpec spec;
  if (!(ss >> spec.kind)) throw UsageError("empty mesh spec");
  std::string tok;
  while (ss >> tok) {
    try {
      std::size_t pos = 0;
      spec.params.push_back(std::stod(tok, &pos));
      if (pos != tok.size()) throw UsageError("bad mesh parameter '" + tok + "'");
    } catch (const std::logic_error&) {
      throw UsageError("bad mesh parameter '" + tok + "'");
    }
  }
  return spec;
}

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw UsageError(what);
}

inline int positive_int(double v, const char* name) {
  require(v >= 1.0 && v == std::floor(v) && v < 1e6, std::string(name) + " must be a positive integer");
  return static_cast<int>(v);
}

// Structured quad grid split along the (i,j)-(i+1,j+1) diagonal.
// node(i, j) = j * (nx + 1) + i.
inline Mesh structured_triangles(int nx, int ny, const std::function<std::array<double, 2>(int, int)>& place) {
  Mesh m;
  m.dim = 2;
  m.coords.resize((nx + 1) * (ny + 1), 2);
  for (int j = 0; j <= ny; ++j)
    for (int i = 0; i <= nx; ++i) {
      auto p = place(i, j);
      m.coords(j * (nx + 1) + i, 0) = p[0];
      m.coords(j * (nx + 1) + i, 1) = p[1];
    }
  m.elements.resize(2 * nx * ny, 3);
  int e = 0;
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      const int v00 = j * (nx + 1) + i, v10 = v00 + 1, v01 = v00 + nx + 1, v11 = v01 + 1;
      m.elements.row(e++) << v00, v10, v11;
      m.elements.row(e++) << v00, v11, v01;
    }
  return m;
}

inline void set_facets(Mesh& m, const std::vector<std::pair<std::vector<int>, BoundaryTag>>& facets) {
  m.facets.resize(static_cast<Eigen::Index>(facets.size()), m.dim);
  m.facet_tags.clear();
  for (std::size_t f = 0; f < facets.size(); ++f) {
    for (int c = 0; c < m.dim; ++c) m.facets(static_cast<Eigen::Index>(f), c) = facets[f].first[c];
    m.facet_tags.push_back(facets[f].second);
  }
}

// ----------------------------- voxel meshes --------------------------------

using Cell = std::array<int, 3>;

/// Adds cells until every pair of included cells that touch only along an
/// edge or a corner is also joined through face-adjacent included cells in
/// their common bounding block. Removes pinch points of the voxel union.
inline void close_diagonal_contacts(std::set<Cell>& cells) {
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<Cell> to_add;
    for (const Cell& c : cells) {
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int nz = (dx != 0) + (dy != 0) + (dz != 0);
            if (nz < 2) continue;
            const Cell o{c[0] + dx, c[1] + dy, c[2] + dz};
            if (!cells.count(o)) continue;
            // BFS over face neighbours inside the block spanned by c and o.
            Cell lo{std::min(c[0], o[0]), std::min(c[1], o[1]), std::min(c[2], o[2])};
            Cell hi{std::max(c[0], o[0]), std::max(c[1], o[1]), std::max(c[2], o[2])};
            std::set<Cell> seen{c};
            std::vector<Cell> stack{c};
            bool reached = false;
            while (!stack.empty() && !reached) {
              Cell q = stack.back();
              stack.pop_back();
              for (int a = 0; a < 3 && !reached; ++a)
                for (int s : {-1, 1}) {
                  Cell n = q;
                  n[a] += s;
                  if (n[a] < lo[a] || n[a] > hi[a]) continue;
                  if (!cells.count(n) || seen.count(n)) continue;
                  if (n == o) {
                    reached = true;
                    break;
                  }
                  seen.insert(n);
                  stack.push_back(n);
                }
            }
            if (!reached) {
              Cell step = c;
              const std::array<int, 3> d{dx, dy, dz};
              for (int a = 0; a < 3; ++a) {
                if (d[a] == 0) continue;
                step[a] += d[a];
                if (step != o) to_add.push_back(step);
              }
            }
          }
    }
    for (const Cell& c : to_add) changed |= cells.insert(c).second;
  }
}

/// Kuhn subdivision of a voxel set with unit-spacing lattice scaled by `h`.
/// `tag_face` maps the three lattice nodes of a boundary triangle to a tag.
inline Mesh voxel_mesh(const std::set<Cell>& cells, double h,
                       const std::function<BoundaryTag(const std::array<Cell, 3>&)>& tag_face) {
  std::map<std::array<int, 3>, int> node_id;  // keyed (z, y, x) for z-major numbering
  for (const Cell& c : cells)
    for (int dz = 0; dz <= 1; ++dz)
      for (int dy = 0; dy <= 1; ++dy)
        for (int dx = 0; dx <= 1; ++dx) node_id[{c[2] + dz, c[1] + dy, c[0] + dx}] = 0;
  Mesh m;
  m.dim = 3;
  m.coords.resize(static_cast<Eigen::Index>(node_id.size()), 3);
  std::vector<Cell> lattice(node_id.size());
  int next = 0;
  for (auto& [key, id] : node_id) {
    id = next;
    lattice[next] = {key[2], key[1], key[0]};
    m.coords.row(next) << key[2] * h, key[1] * h, key[0] * h;
    ++next;
  }
  static constexpr std::array<std::array<int, 3>, 6> kPerms{
      {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
  m.elements.resize(static_cast<Eigen::Index>(cells.size() * 6), 4);
  int e = 0;
  // Cells in z-major order as well.
  std::vector<Cell> ordered(cells.begin(), cells.end());
  std::sort(ordered.begin(), ordered.end(), [](const Cell& a, const Cell& b) {
    return std::tie(a[2], a[1], a[0]) < std::tie(b[2], b[1], b[0]);
  });
  for (const Cell& c : ordered) {
    for (const auto& perm : kPerms) {
      std::array<int, 3> p{c[0], c[1], c[2]};
      m.elements(e, 0) = node_id.at({p[2], p[1], p[0]});
      for (int s = 0; s < 3; ++s) {
        ++p[perm[s]];
        m.elements(e, s + 1) = node_id.at({p[2], p[1], p[0]});
      }
      ++e;
    }
  }
  IndexMatrix faces = boundary_faces(m);
  std::vector<std::pair<std::vector<int>, BoundaryTag>> facets;
  for (Eigen::Index f = 0; f < faces.rows(); ++f) {
    std::array<Cell, 3> pts{lattice[faces(f, 0)], lattice[faces(f, 1)], lattice[faces(f, 2)]};
    facets.push_back({{faces(f, 0), faces(f, 1), faces(f, 2)}, tag_face(pts)});
  }
  set_facets(m, facets);
  return m;
}

// ----------------------------- rings2d --------------------------------------

struct Ring {
  double cx, cy;
};

inline constexpr double kRingOuter = 10.0;
inline constexpr double kRingInner = 8.0;

inline std::vector<Ring> olympic_rings() {
  return {{0.0, 0.0}, {22.0, 0.0}, {44.0, 0.0}, {11.0, -12.0}, {33.0, -12.0}};
}

inline bool in_band(const Ring& r, double x, double y, double margin) {
  const double d = std::hypot(x - r.cx, y - r.cy);
  return d >= kRingInner + margin && d <= kRingOuter - margin;
}

inline bool in_rings(const std::vector<Ring>& rings, double x, double y, double margin = 0.0) {
  for (const auto& r : rings)
    if (in_band(r, x, y, margin)) return true;
  return false;
}

}  // namespace detail

inline Mesh rectangle(int nx, int ny, double lx = 1.0, double ly = 1.0) {
  detail::require(nx >= 1 && ny >= 1, "rectangle: nx, ny must be >= 1");
  detail::require(lx > 0.0 && ly > 0.0, "rectangle: side lengths must be positive");
  Mesh m = detail::structured_triangles(nx, ny, [&](int i, int j) {
    return std::array<double, 2>{lx * i / nx, ly * j / ny};
  });
  std::vector<std::pair<std::vector<int>, BoundaryTag>> facets;
  auto node = [&](int i, int j) { return j * (nx + 1) + i; };
  for (int i = 0; i < nx; ++i) facets.push_back({{node(i, 0), node(i + 1, 0)}, BoundaryTag::Free});
  for (int j = 0; j < ny; ++j) facets.push_back({{node(nx, j), node(nx, j + 1)}, BoundaryTag::Gamma1});
  for (int i = nx; i > 0; --i) facets.push_back({{node(i, ny), node(i - 1, ny)}, BoundaryTag::Free});
  for (int j = ny; j > 0; --j) facets.push_back({{node(0, j), node(0, j - 1)}, BoundaryTag::Gamma2});
  detail::set_facets(m, facets);
  validate(m);
  return m;
}

inline Mesh annulus(double r_in, double r_out, int n) {
  detail::require(r_in > 0.0 && r_out > 0.0, "annulus: radii must be positive");
  detail::require(r_in < r_out, "annulus: r_in must be smaller than r_out");
  detail::require(n >= 3, "annulus: at least 3 angular divisions");
  const int nr = std::max(1, static_cast<int>(std::lround(n * (r_out - r_in) / (std::numbers::pi * (r_in + r_out)))));
  // Periodic in the angular index: build an open strip then weld the seam.
  Mesh strip = detail::structured_triangles(n, nr, [&](int i, int j) {
    const double r = r_in + (r_out - r_in) * j / nr;
    const double t = 2.0 * std::numbers::pi * (i % n) / n;
    return std::array<double, 2>{r * std::cos(t), r * std::sin(t)};
  });
  std::vector<int> remap((n + 1) * (nr + 1));
  Mesh m;
  m.dim = 2;
  m.coords.resize(n * (nr + 1), 2);
  for (int j = 0; j <= nr; ++j)
    for (int i = 0; i <= n; ++i) {
      const int welded = j * n + (i % n);
      remap[j * (n + 1) + i] = welded;
      m.coords.row(welded) = strip.coords.row(j * (n + 1) + i);
    }
  m.elements = strip.elements;
  for (Eigen::Index e = 0; e < m.elements.rows(); ++e)
    for (int c = 0; c < 3; ++c) m.elements(e, c) = remap[m.elements(e, c)];
  std::vector<std::pair<std::vector<int>, BoundaryTag>> facets;
  for (int i = 0; i < n; ++i) facets.push_back({{i, (i + 1) % n}, BoundaryTag::Gamma1});
  for (int i = 0; i < n; ++i) facets.push_back({{nr * n + (i + 1) % n, nr * n + i}, BoundaryTag::Gamma2});
  detail::set_facets(m, facets);
  validate(m);
  return m;
}

/// Five interlocking rings (outer radius 10, inner radius 8). Target spacing
/// h = 1.1 level^-1.6: level 1 is the coarse fixture, level 2 the fine one.
/// Gamma1 is the right-most outer arc, Gamma2 the left-most outer arc.
inline Mesh rings2d(int level) {
  detail::require(level >= 1 && level <= 8, "rings2d: level must be in 1..8");
  using detail::Point2;
  const double h = 1.1 * std::pow(static_cast<double>(level), -1.6);
  const auto rings = detail::olympic_rings();
  pigmen::detail::Rng rng(0x5249'4E47'5332'4400ULL + static_cast<unsigned>(level));

  std::vector<Point2> pts;
  // Boundary samples on every circle portion that lies on the union boundary.
  auto on_union_boundary = [&](double x, double y, std::size_t self) {
    for (std::size_t k = 0; k < rings.size(); ++k) {
      if (k != self && detail::in_band(rings[k], x, y, 1e-9)) return false;
    }
    return true;
  };
  for (std::size_t k = 0; k < rings.size(); ++k) {
    for (double radius : {detail::kRingInner, detail::kRingOuter}) {
      const int ns = static_cast<int>(std::ceil(2.0 * std::numbers::pi * radius / h));
      for (int s = 0; s < ns; ++s) {
        const double t = 2.0 * std::numbers::pi * s / ns;
        // Tiny radial jitter breaks exact co-circularity for the Delaunay kernel.
        const double r = radius * (1.0 + 1e-9 * rng.uniform(-1.0, 1.0));
        const double x = rings[k].cx + r * std::cos(t);
        const double y = rings[k].cy + r * std::sin(t);
        if (on_union_boundary(x, y, k)) pts.push_back({x, y});
      }
    }
  }
  // Jittered hexagonal lattice in the interior, kept away from boundary arcs.
  const double dy = h * std::sqrt(3.0) / 2.0;
  const double pad = detail::kRingOuter + h;
  const double xmin = -pad, xmax = 44.0 + pad;
  const double ymin = -12.0 - pad, ymax = pad;
  int row = 0;
  for (double y = ymin; y <= ymax; y += dy, ++row) {
    const double shift = (row % 2) ? 0.5 * h : 0.0;
    for (double x = xmin + shift; x <= xmax; x += h) {
      const double px = x + 0.15 * h * rng.uniform(-1.0, 1.0);
      const double py = y + 0.15 * h * rng.uniform(-1.0, 1.0);
      if (!detail::in_rings(rings, px, py)) continue;
      bool near_boundary = false;
      for (std::size_t k = 0; k < rings.size() && !near_boundary; ++k) {
        const double d = std::hypot(px - rings[k].cx, py - rings[k].cy);
        for (double radius : {detail::kRingInner, detail::kRingOuter}) {
          if (std::abs(d - radius) >= 0.5 * h) continue;
          const double qx = rings[k].cx + radius * (px - rings[k].cx) / d;
          const double qy = rings[k].cy + radius * (py - rings[k].cy) / d;
          if (on_union_boundary(qx, qy, k)) near_boundary = true;
        }
      }
      if (!near_boundary) pts.push_back({px, py});
    }
  }

  auto tris = detail::Delaunay2::triangulate(pts);
  std::vector<std::array<int, 3>> kept;
  const double min_area = 1e-6 * h * h;
  for (const auto& t : tris) {
    const auto& a = pts[t[0]];
    const auto& b = pts[t[1]];
    const auto& c = pts[t[2]];
    const double cx = (a.x + b.x + c.x) / 3.0, cy = (a.y + b.y + c.y) / 3.0;
    const double area = 0.5 * ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x));
    if (area > min_area && detail::in_rings(rings, cx, cy)) kept.push_back(t);
  }
  // Compact node numbering in order of first appearance in point order.
  std::vector<int> remap(pts.size(), -1);
  std::vector<char> used(pts.size(), 0);
  for (const auto& t : kept)
    for (int v : t) used[v] = 1;
  Mesh m;
  m.dim = 2;
  int n = 0;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (used[i]) remap[i] = n++;
  m.coords.resize(n, 2);
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (used[i]) m.coords.row(remap[i]) << pts[i].x, pts[i].y;
  m.elements.resize(static_cast<Eigen::Index>(kept.size()), 3);
  for (std::size_t e = 0; e < kept.size(); ++e)
    for (int c = 0; c < 3; ++c) m.elements(static_cast<Eigen::Index>(e), c) = remap[kept[e][c]];

  const auto& right = rings[2];
  const auto& left = rings[0];
  auto on_outer_arc = [&](const detail::Ring& r, int node, double side) {
    const double x = m.coords(node, 0) - r.cx, y = m.coords(node, 1) - r.cy;
    return std::abs(std::hypot(x, y) - detail::kRingOuter) < 1e-6 && side * x >= 0.5 * detail::kRingOuter;
  };
  IndexMatrix faces = boundary_faces(m);
  std::vector<std::pair<std::vector<int>, BoundaryTag>> facets;
  for (Eigen::Index f = 0; f < faces.rows(); ++f) {
    const int a = faces(f, 0), b = faces(f, 1);
    BoundaryTag tag = BoundaryTag::Free;
    if (on_outer_arc(right, a, 1.0) && on_outer_arc(right, b, 1.0)) tag = BoundaryTag::Gamma1;
    if (on_outer_arc(left, a, -1.0) && on_outer_arc(left, b, -1.0)) tag = BoundaryTag::Gamma2;
    facets.push_back({{a, b}, tag});
  }
  detail::set_facets(m, facets);
  validate(m);
  return m;
}

/// L-shaped block: legs of 2n x n cells, thickness n, n = 2 * level.
/// Gamma1 is the end face x = 2n, Gamma2 the end face y = 2n.
inline Mesh lshape3d(int level) {
  detail::require(level >= 1 && level <= 32, "lshape3d: level must be in 1..32");
  const int n = 2 * level;
  std::set<detail::Cell> cells;
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < 2 * n; ++j)
      for (int i = 0; i < 2 * n; ++i)
        if (j < n || i < n) cells.insert({i, j, k});
  Mesh m = detail::voxel_mesh(cells, 1.0, [n](const std::array<detail::Cell, 3>& f) {
    auto all = [&](int axis, int value) {
      return f[0][axis] == value && f[1][axis] == value && f[2][axis] == value;
    };
    if (all(0, 2 * n)) return BoundaryTag::Gamma1;
    if (all(1, 2 * n)) return BoundaryTag::Gamma2;
    return BoundaryTag::Free;
  });
  validate(m);
  return m;
}

/// Voxelized tube of radius 3.8 s following a smooth path with four bends in
/// y and a slow arc in z, s = level. Gamma2 is the inlet face x = 0,
/// Gamma1 the outlet face x = L.
inline Mesh elbow3d(int level) {
  detail::require(level >= 1 && level <= 8, "elbow3d: level must be in 1..8");
  const double s = level;
  const int length = static_cast<int>(std::lround(120.0 * s));
  const double amp = 10.0 * s, lift = 6.0 * s, radius = 3.8 * s;
  const double pad = radius + 2.0;
  auto path = [&](double x) {
    const double t = x / length;
    return std::array<double, 3>{x, amp * (1.0 - std::cos(4.0 * std::numbers::pi * t)) + pad,
                                 lift * std::sin(std::numbers::pi * t) + pad};
  };
  const int samples = 8 * length;
  std::vector<std::array<double, 3>> curve(samples + 1);
  for (int i = 0; i <= samples; ++i) curve[i] = path(static_cast<double>(length) * i / samples);

  std::set<detail::Cell> cells;
  const int ny = static_cast<int>(std::ceil(2.0 * amp + 2.0 * pad));
  const int nz = static_cast<int>(std::ceil(lift + 2.0 * pad));
  for (int i = 0; i < length; ++i) {
    const double cx = i + 0.5;
    const int lo = std::max(0, static_cast<int>((cx - pad) * samples / length));
    const int hi = std::min(samples, static_cast<int>((cx + pad) * samples / length) + 1);
    for (int j = 0; j < ny; ++j)
      for (int k = 0; k < nz; ++k) {
        const double cy = j + 0.5, cz = k + 0.5;
        double best = 1e300;
        for (int q = lo; q <= hi; ++q) {
          const double ddx = cx - curve[q][0], ddy = cy - curve[q][1], ddz = cz - curve[q][2];
          best = std::min(best, ddx * ddx + ddy * ddy + ddz * ddz);
        }
        if (best <= radius * radius) cells.insert({i, j, k});
      }
  }
  detail::close_diagonal_contacts(cells);
  std::erase_if(cells, [&](const detail::Cell& c) { return c[0] < 0 || c[0] >= length; });
  Mesh m = detail::voxel_mesh(cells, 1.0, [length](const std::array<detail::Cell, 3>& f) {
    auto all = [&](int value) { return f[0][0] == value && f[1][0] == value && f[2][0] == value; };
    if (all(length)) return BoundaryTag::Gamma1;
    if (all(0)) return BoundaryTag::Gamma2;
    return BoundaryTag::Free;
  });
  validate(m);
  return m;
}

inline Mesh generate_mesh(const MeshSpec& spec) {
  const auto& p = spec.params;
  auto arity = [&](std::size_t lo, std::size_t hi) {
    detail::require(p.size() >= lo && p.size() <= hi,
                    spec.kind + ": expected " + std::to_string(lo) +
                        (lo == hi ? "" : ".." + std::to_string(hi)) + " parameters");
  };
  if (spec.kind == "rectangle") {
    arity(2, 4);
    return rectangle(detail::positive_int(p[0], "nx"), detail::positive_int(p[1], "ny"), p.size() > 2 ? p[2] : 1.0,
                     p.size() > 3 ? p[3] : 1.0);
  }
  if (spec.kind == "annulus") {
    arity(3, 3);
    return annulus(p[0], p[1], detail::positive_int(p[2], "n"));
  }
  if (spec.kind == "rings2d") {
    arity(1, 1);
    return rings2d(detail::positive_int(p[0], "level"));
  }
  if (spec.kind == "lshape3d") {
    arity(1, 1);
    return lshape3d(detail::positive_int(p[0], "level"));
  }
  if (spec.kind == "elbow3d") {
    arity(1, 1);
    return elbow3d(detail::positive_int(p[0], "level"));
  }
  throw UsageError("unknown mesh kind '" + spec.kind + "'");
}

/// Named fixtures used by tests, examples and the acceptance runs.
inline MeshSpec fixture_spec(const std::string& name) {
  static const std::map<std::string, std::string> fixtures{
      {"unit_square", "rectangle 1 1"},   {"rect4", "rectangle 4 4"},
      {"strip6x3", "rectangle 6 3 2 1"},  {"annulus_small", "annulus 1 2 12"},
      {"rings2d_coarse", "rings2d 1"},    {"rings2d_fine", "rings2d 2"},
      {"lshape3d_small", "lshape3d 1"},   {"lshape3d_train", "lshape3d 4"},
      {"elbow3d_test", "elbow3d 1"},
  };
  auto it = fixtures.find(name);
  if (it == fixtures.end()) throw UsageError("unknown fixture '" + name + "'");
  return parse_spec(it->second);
}

inline nlohmann::json manifest(const MeshSpec& spec, const Mesh& m) {
  return {
      {"format", "pigmesh-manifest"},
      {"version", kMeshFormatVersion},
      {"generator", spec.str()},
      {"kind", spec.kind},
      {"params", spec.params},
      {"dim", m.dim},
      {"n_nodes", m.n_nodes()},
      {"n_elements", m.n_elements()},
      {"n_boundary_facets", m.n_facets()},
      {"n_directed_edges", 2 * static_cast<long>(unique_edges(m).size())},
      {"n_gamma1_nodes", tagged_nodes(m, BoundaryTag::Gamma1).size()},
      {"n_gamma2_nodes", tagged_nodes(m, BoundaryTag::Gamma2).size()},
  };
}

}  // namespace pigmen::mesh
