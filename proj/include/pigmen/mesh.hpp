#pragma once

// Simplicial meshes with tagged boundaries, the text mesh format, and the
// mesh -> graph conversion with translation-invariant edge features.

#include "pigmen/core.hpp"

#include <algorithm>
#include <array>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace pigmen::mesh {

enum class BoundaryTag { Gamma1, Gamma2, Free };

inline std::string_view tag_token(BoundaryTag tag) {
  switch (tag) {
    case BoundaryTag::Gamma1: return "g1";
    case BoundaryTag::Gamma2: return "g2";
    case BoundaryTag::Free: return "free";
  }
  return "free";
}

inline BoundaryTag parse_tag(std::string_view token) {
  if (token == "g1") return BoundaryTag::Gamma1;
  if (token == "g2") return BoundaryTag::Gamma2;
  if (token == "free") return BoundaryTag::Free;
  throw ParseError("unknown boundary tag '" + std::string(token) + "'");
}

struct Mesh {
  int dim = 2;
  Matrix coords;           // N_v x dim
  IndexMatrix elements;    // N_e x (dim + 1)
  IndexMatrix facets;      // N_b x dim
  std::vector<BoundaryTag> facet_tags;

  int n_nodes() const { return static_cast<int>(coords.rows()); }
  int n_elements() const { return static_cast<int>(elements.rows()); }
  int n_facets() const { return static_cast<int>(facets.rows()); }
};

struct Graph {
  int n_nodes = 0;
  std::vector<int> senders;
  std::vector<int> receivers;
  Matrix edge_features;  // N_edge x (dim + 1): (x_s - x_r, |x_s - x_r|)
  Matrix node_features;  // N_v x F

  int n_edges() const { return static_cast<int>(senders.size()); }
};

namespace detail {

inline double factorial(int n) {
  double f = 1.0;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

/// Characteristic length: diagonal of the coordinate bounding box.
inline double bbox_scale(const Matrix& coords) {
  if (coords.rows() == 0) return 1.0;
  const Eigen::RowVectorXd lo = coords.colwise().minCoeff();
  const Eigen::RowVectorXd hi = coords.colwise().maxCoeff();
  const double s = (hi - lo).norm();
  return s > 0.0 ? s : 1.0;
}

template <class Face>
Face sorted(Face f) {
  std::sort(f.begin(), f.end());
  return f;
}

}  // namespace detail

/// Signed volume of element `e` (area in 2D).
inline double signed_volume(const Mesh& m, int e) {
  const int d = m.dim;
  Eigen::MatrixXd jac(d, d);
  for (int c = 0; c < d; ++c) {
    jac.col(c) = (m.coords.row(m.elements(e, c + 1)) - m.coords.row(m.elements(e, 0))).transpose();
  }
  return jac.determinant() / detail::factorial(d);
}

/// Sorted node tuples of every (dim-1)-face of every element, with use counts.
inline std::map<std::vector<int>, int> face_counts(const Mesh& m) {
  std::map<std::vector<int>, int> counts;
  const int nv = m.dim + 1;
  std::vector<int> face(m.dim);
  for (int e = 0; e < m.n_elements(); ++e) {
    for (int skip = 0; skip < nv; ++skip) {
      int k = 0;
      for (int i = 0; i < nv; ++i) {
        if (i != skip) face[k++] = m.elements(e, i);
      }
      ++counts[detail::sorted(face)];
    }
  }
  return counts;
}

/// Unique undirected edges (i < j), lexicographically sorted.
inline std::vector<std::pair<int, int>> unique_edges(const Mesh& m) {
  std::vector<std::pair<int, int>> edges;
  const int nv = m.dim + 1;
  edges.reserve(static_cast<std::size_t>(m.n_elements()) * nv * (nv - 1) / 2);
  for (int e = 0; e < m.n_elements(); ++e) {
    for (int a = 0; a < nv; ++a) {
      for (int b = a + 1; b < nv; ++b) {
        int i = m.elements(e, a);
        int j = m.elements(e, b);
        if (i > j) std::swap(i, j);
        edges.emplace_back(i, j);
      }
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

/// Node indices lying on at least one facet with the given tag, sorted.
inline std::vector<int> tagged_nodes(const Mesh& m, BoundaryTag tag) {
  std::set<int> nodes;
  for (int f = 0; f < m.n_facets(); ++f) {
    if (m.facet_tags[f] != tag) continue;
    for (int c = 0; c < m.dim; ++c) nodes.insert(m.facets(f, c));
  }
  return {nodes.begin(), nodes.end()};
}

/// Checks every Mesh invariant and canonicalizes element orientation so that
/// all signed volumes are positive. Throws ValidationError.
inline void validate(Mesh& m) {
  if (m.dim != 2 && m.dim != 3) throw ValidationError("mesh dimension must be 2 or 3");
  if (m.coords.cols() != m.dim) throw ValidationError("coordinate rows must have dim entries");
  if (m.n_elements() == 0) throw ValidationError("mesh has no elements");
  if (m.elements.cols() != m.dim + 1) throw ValidationError("elements must have dim+1 nodes");
  if (m.facets.rows() > 0 && m.facets.cols() != m.dim) throw ValidationError("facets must have dim nodes");
  if (static_cast<int>(m.facet_tags.size()) != m.n_facets()) throw ValidationError("facet/tag count mismatch");
  if (!m.coords.allFinite()) throw ValidationError("non-finite node coordinate");

  const int nvtx = m.n_nodes();
  std::vector<char> used(nvtx, 0);
  for (int e = 0; e < m.n_elements(); ++e) {
    for (int c = 0; c <= m.dim; ++c) {
      const int i = m.elements(e, c);
      if (i < 0 || i >= nvtx) {
        throw ValidationError("element " + std::to_string(e) + " references node " + std::to_string(i) +
                              " of a " + std::to_string(nvtx) + "-node mesh");
      }
      used[i] = 1;
    }
  }
  for (int i = 0; i < nvtx; ++i) {
    if (!used[i]) throw ValidationError("node " + std::to_string(i) + " belongs to no element");
  }

  const double min_volume = 1e-14 * std::pow(detail::bbox_scale(m.coords), m.dim);
  for (int e = 0; e < m.n_elements(); ++e) {
    double v = signed_volume(m, e);
    if (std::abs(v) < min_volume) {
      throw ValidationError("element " + std::to_string(e) + " is degenerate (volume " + std::to_string(v) + ")");
    }
    if (v < 0.0) std::swap(m.elements(e, 0), m.elements(e, 1));
  }

  auto counts = face_counts(m);
  std::set<std::vector<int>> seen;
  std::vector<int> face(m.dim);
  for (int f = 0; f < m.n_facets(); ++f) {
    for (int c = 0; c < m.dim; ++c) {
      face[c] = m.facets(f, c);
      if (face[c] < 0 || face[c] >= nvtx) throw ValidationError("boundary facet references a missing node");
    }
    auto key = detail::sorted(face);
    auto it = counts.find(key);
    if (it == counts.end() || it->second != 1) {
      throw ValidationError("boundary facet " + std::to_string(f) + " is not a face of exactly one element");
    }
    if (!seen.insert(key).second) throw ValidationError("duplicate boundary facet " + std::to_string(f));
  }
  for (const auto& [key, count] : counts) {
    if (count > 2) throw ValidationError("face shared by more than two elements");
    if (count == 1 && !seen.count(key)) throw ValidationError("untagged boundary face");
  }

  auto g1 = tagged_nodes(m, BoundaryTag::Gamma1);
  auto g2 = tagged_nodes(m, BoundaryTag::Gamma2);
  std::vector<int> common;
  std::set_intersection(g1.begin(), g1.end(), g2.begin(), g2.end(), std::back_inserter(common));
  if (!common.empty()) throw ValidationError("Gamma1 and Gamma2 share node " + std::to_string(common.front()));
}

/// Returns every boundary face (face of exactly one element) as facet rows.
inline IndexMatrix boundary_faces(const Mesh& m) {
  auto counts = face_counts(m);
  std::vector<std::vector<int>> faces;
  for (const auto& [key, count] : counts) {
    if (count == 1) faces.push_back(key);
  }
  IndexMatrix out(static_cast<Eigen::Index>(faces.size()), m.dim);
  for (std::size_t f = 0; f < faces.size(); ++f) {
    for (int c = 0; c < m.dim; ++c) out(static_cast<Eigen::Index>(f), c) = faces[f][c];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text format
//
//   pigmesh 1 <dim>
//   nodes <N_v>        followed by N_v lines of dim floats
//   elements <N_e>     followed by N_e lines of dim+1 indices
//   boundary <N_b>     followed by N_b lines of dim indices and a tag token
// ---------------------------------------------------------------------------

inline constexpr int kMeshFormatVersion = 1;

namespace detail {

/// Tokenizing line reader that strips `#` comments and skips blank lines.
class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  bool next(std::vector<std::string>& tokens) {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      std::istringstream ss(line);
      tokens.clear();
      std::string tok;
      while (ss >> tok) tokens.push_back(tok);
      if (!tokens.empty()) return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError("line " + std::to_string(line_no_) + ": " + what);
  }

  std::vector<std::string> expect(std::size_t n, std::string_view what) {
    std::vector<std::string> tokens;
    if (!next(tokens)) fail("unexpected end of file, expected " + std::string(what));
    if (tokens.size() != n) fail("expected " + std::to_string(n) + " tokens for " + std::string(what));
    return tokens;
  }

  int line() const { return line_no_; }

 private:
  std::istream& in_;
  int line_no_ = 0;
};

inline double to_double(const LineReader& r, const std::string& tok) {
  // strtod rather than stod: subnormals set ERANGE but are valid values.
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(tok.c_str(), &end);
  if (tok.empty() || end != tok.c_str() + tok.size()) r.fail("bad number '" + tok + "'");
  if (errno == ERANGE && std::isinf(v)) r.fail("number out of range '" + tok + "'");
  return v;
}

inline long to_long(const LineReader& r, const std::string& tok) {
  try {
    std::size_t pos = 0;
    long v = std::stol(tok, &pos);
    if (pos != tok.size()) r.fail("bad integer '" + tok + "'");
    return v;
  } catch (const std::logic_error&) {
    r.fail("bad integer '" + tok + "'");
  }
}

inline int section(LineReader& r, std::string_view name) {
  auto t = r.expect(2, name);
  if (t[0] != name) r.fail("expected section '" + std::string(name) + "', got '" + t[0] + "'");
  long n = to_long(r, t[1]);
  if (n < 0) r.fail("negative count");
  return static_cast<int>(n);
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline Mesh read_mesh(std::istream& in) {
  detail::LineReader r(in);
  auto header = r.expect(3, "header");
  if (header[0] != "pigmesh") r.fail("missing 'pigmesh' header");
  if (detail::to_long(r, header[1]) != kMeshFormatVersion) r.fail("unsupported mesh format version");
  Mesh m;
  m.dim = static_cast<int>(detail::to_long(r, header[2]));
  if (m.dim != 2 && m.dim != 3) r.fail("dimension must be 2 or 3");

  const int nn = detail::section(r, "nodes");
  m.coords.resize(nn, m.dim);
  for (int i = 0; i < nn; ++i) {
    auto t = r.expect(m.dim, "node coordinates");
    for (int c = 0; c < m.dim; ++c) m.coords(i, c) = detail::to_double(r, t[c]);
  }
  const int ne = detail::section(r, "elements");
  m.elements.resize(ne, m.dim + 1);
  for (int e = 0; e < ne; ++e) {
    auto t = r.expect(m.dim + 1, "element");
    for (int c = 0; c <= m.dim; ++c) m.elements(e, c) = static_cast<int>(detail::to_long(r, t[c]));
  }
  const int nb = detail::section(r, "boundary");
  m.facets.resize(nb, m.dim);
  m.facet_tags.resize(nb);
  for (int f = 0; f < nb; ++f) {
    auto t = r.expect(m.dim + 1, "boundary facet");
    for (int c = 0; c < m.dim; ++c) m.facets(f, c) = static_cast<int>(detail::to_long(r, t[c]));
    try {
      m.facet_tags[f] = parse_tag(t[m.dim]);
    } catch (const ParseError& e) {
      r.fail(e.what());
    }
  }
  std::vector<std::string> extra;
  if (r.next(extra)) r.fail("trailing content after boundary section");
  validate(m);
  return m;
}

inline Mesh load_mesh(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open mesh file '" + path + "'");
  return read_mesh(in);
}

inline void write_mesh(std::ostream& out, const Mesh& m) {
  out << "pigmesh " << kMeshFormatVersion << ' ' << m.dim << '\n';
  out << "nodes " << m.n_nodes() << '\n';
  for (int i = 0; i < m.n_nodes(); ++i) {
    for (int c = 0; c < m.dim; ++c) out << (c ? " " : "") << detail::format_double(m.coords(i, c));
    out << '\n';
  }
  out << "elements " << m.n_elements() << '\n';
  for (int e = 0; e < m.n_elements(); ++e) {
    for (int c = 0; c <= m.dim; ++c) out << (c ? " " : "") << m.elements(e, c);
    out << '\n';
  }
  out << "boundary " << m.n_facets() << '\n';
  for (int f = 0; f < m.n_facets(); ++f) {
    for (int c = 0; c < m.dim; ++c) out << m.facets(f, c) << ' ';
    out << tag_token(m.facet_tags[f]) << '\n';
  }
}

inline void save_mesh(const std::string& path, const Mesh& m) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write mesh file '" + path + "'");
  write_mesh(out, m);
}

// ---------------------------------------------------------------------------
// Graph conversion
// ---------------------------------------------------------------------------

/// Each undirected mesh edge {i, j} (i < j) yields the directed pair
/// (s=i, r=j) then (s=j, r=i). Edge feature = (x_s - x_r, |x_s - x_r|).
inline Graph mesh_to_graph(const Mesh& m, const Matrix& node_features) {
  if (node_features.rows() != m.n_nodes()) {
    throw ShapeError("node feature rows (" + std::to_string(node_features.rows()) + ") != node count (" +
                     std::to_string(m.n_nodes()) + ")");
  }
  auto edges = unique_edges(m);
  Graph g;
  g.n_nodes = m.n_nodes();
  g.node_features = node_features;
  g.senders.reserve(edges.size() * 2);
  g.receivers.reserve(edges.size() * 2);
  g.edge_features.resize(static_cast<Eigen::Index>(edges.size() * 2), m.dim + 1);
  Eigen::Index k = 0;
  for (auto [i, j] : edges) {
    for (auto [s, r] : {std::pair{i, j}, std::pair{j, i}}) {
      g.senders.push_back(s);
      g.receivers.push_back(r);
      double d2 = 0.0;
      for (int c = 0; c < m.dim; ++c) {
        const double dx = m.coords(s, c) - m.coords(r, c);
        g.edge_features(k, c) = dx;
        d2 += dx * dx;
      }
      g.edge_features(k, m.dim) = std::sqrt(d2);
      ++k;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Rigid transforms and topology helpers (used by invariance checks)
// ---------------------------------------------------------------------------

inline Mesh translated(const Mesh& m, const Eigen::RowVectorXd& delta) {
  Mesh out = m;
  out.coords.rowwise() += delta;
  return out;
}

/// Relabels nodes: new index of old node i is perm[i].
inline Mesh permuted(const Mesh& m, const std::vector<int>& perm) {
  if (static_cast<int>(perm.size()) != m.n_nodes()) throw ShapeError("permutation size mismatch");
  Mesh out = m;
  for (int i = 0; i < m.n_nodes(); ++i) out.coords.row(perm[i]) = m.coords.row(i);
  for (int e = 0; e < m.n_elements(); ++e)
    for (int c = 0; c <= m.dim; ++c) out.elements(e, c) = perm[m.elements(e, c)];
  for (int f = 0; f < m.n_facets(); ++f)
    for (int c = 0; c < m.dim; ++c) out.facets(f, c) = perm[m.facets(f, c)];
  return out;
}

/// Node adjacency lists (mesh edges), each list sorted.
inline std::vector<std::vector<int>> adjacency(const Mesh& m) {
  std::vector<std::vector<int>> adj(m.n_nodes());
  for (auto [i, j] : unique_edges(m)) {
    adj[i].push_back(j);
    adj[j].push_back(i);
  }
  for (auto& a : adj) std::sort(a.begin(), a.end());
  return adj;
}

/// Counts of simplices by dimension: {vertices, edges, triangles, tetrahedra}.
inline std::array<long, 4> simplex_counts(const Mesh& m) {
  std::array<long, 4> counts{m.n_nodes(), static_cast<long>(unique_edges(m).size()), 0, 0};
  if (m.dim == 2) {
    counts[2] = m.n_elements();
  } else {
    counts[2] = static_cast<long>(face_counts(m).size());
    counts[3] = m.n_elements();
  }
  return counts;
}

inline long euler_characteristic(const Mesh& m) {
  auto c = simplex_counts(m);
  return c[0] - c[1] + c[2] - c[3];
}

}  // namespace pigmen::mesh
