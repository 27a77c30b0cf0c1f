#include "shellflow/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace shellflow {

Eigen::VectorXd TriMesh::positions() const {
  Eigen::VectorXd p(3 * vertex_count());
  for (int i = 0; i < vertex_count(); ++i) p.segment<3>(3 * i) = vertices[i];
  return p;
}

void TriMesh::set_positions(const Eigen::VectorXd& p) {
  if (p.size() != 3 * vertex_count())
    throw MeshError("position vector length mismatch");
  for (int i = 0; i < vertex_count(); ++i) vertices[i] = p.segment<3>(3 * i);
}

double TriMesh::bbox_diagonal() const {
  if (vertices.empty()) return 0.0;
  Eigen::Vector3d lo = vertices[0], hi = vertices[0];
  for (const auto& v : vertices) {
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  }
  return (hi - lo).norm();
}

void TriMesh::validate() const {
  const int K = vertex_count();
  std::map<std::pair<int, int>, int> edge_count;
  for (size_t t = 0; t < triangles.size(); ++t) {
    const auto& tri = triangles[t];
    for (int k = 0; k < 3; ++k) {
      if (tri[k] < 0 || tri[k] >= K)
        throw MeshError("triangle " + std::to_string(t) +
                        " has out-of-range vertex index");
    }
    const Eigen::Vector3d e1 = vertices[tri[1]] - vertices[tri[0]];
    const Eigen::Vector3d e2 = vertices[tri[2]] - vertices[tri[0]];
    if (e1.cross(e2).norm() <= 0.0)
      throw MeshError("degenerate (zero-area) triangle " + std::to_string(t));
    for (int k = 0; k < 3; ++k) {
      int a = tri[k], b = tri[(k + 1) % 3];
      if (a > b) std::swap(a, b);
      if (++edge_count[{a, b}] > 2)
        throw MeshError("non-manifold edge (" + std::to_string(a) + "," +
                        std::to_string(b) + ") shared by >2 triangles");
    }
  }
}

Adjacency build_adjacency(const TriMesh& mesh) {
  const int K = mesh.vertex_count();
  Adjacency adj;
  adj.one_ring.resize(K);
  adj.two_ring.resize(K);

  std::vector<std::set<int>> ring1(K);
  // edge -> (tri, opposite vertex) incidences
  std::map<std::pair<int, int>, std::vector<std::pair<int, int>>> edge_tris;
  for (size_t t = 0; t < mesh.triangles.size(); ++t) {
    const auto& tri = mesh.triangles[t];
    for (int k = 0; k < 3; ++k) {
      const int a = tri[k], b = tri[(k + 1) % 3], o = tri[(k + 2) % 3];
      ring1[a].insert(b);
      ring1[b].insert(a);
      auto e = std::minmax(a, b);
      edge_tris[{e.first, e.second}].push_back({static_cast<int>(t), o});
    }
  }
  for (int i = 0; i < K; ++i)
    adj.one_ring[i].assign(ring1[i].begin(), ring1[i].end());

  for (int i = 0; i < K; ++i) {
    std::set<int> ring2;
    for (int j : adj.one_ring[i])
      for (int k : adj.one_ring[j])
        if (k != i && !ring1[i].count(k)) ring2.insert(k);
    adj.two_ring[i].assign(ring2.begin(), ring2.end());
  }

  for (const auto& [edge, inc] : edge_tris) {
    if (inc.size() == 2) {
      adj.dihedral_pairs.push_back({inc[0].first, inc[1].first, edge.first,
                                    edge.second, inc[0].second,
                                    inc[1].second});
    }
  }
  return adj;
}

CotanWeights cotan_weights(const TriMesh& mesh) {
  CotanWeights cw;
  for (size_t t = 0; t < mesh.triangles.size(); ++t) {
    const auto& tri = mesh.triangles[t];
    for (int k = 0; k < 3; ++k) {
      const int i = tri[k], j = tri[(k + 1) % 3], o = tri[(k + 2) % 3];
      const Eigen::Vector3d u = mesh.vertices[i] - mesh.vertices[o];
      const Eigen::Vector3d v = mesh.vertices[j] - mesh.vertices[o];
      const double cross = u.cross(v).norm();
      const double cot = u.dot(v) / cross;
      if (!std::isfinite(cot))
        throw MeshError("degenerate triangle " + std::to_string(t) +
                        " yields non-finite cotangent");
      cw.w[CotanWeights::key(i, j)] += 0.5 * cot;
    }
  }
  return cw;
}

TriMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MeshError("cannot open OBJ file: " + path);
  TriMesh mesh;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag)) continue;
    if (tag == "v") {
      Eigen::Vector3d v;
      if (!(ss >> v.x() >> v.y() >> v.z()))
        throw MeshError(path + ":" + std::to_string(lineno) +
                        ": malformed vertex record");
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ss >> tok) {
        // accept "i", "i/..", "i//.." forms; only the vertex index is used
        const long v = std::strtol(tok.c_str(), nullptr, 10);
        if (v == 0)
          throw MeshError(path + ":" + std::to_string(lineno) +
                          ": malformed face record");
        idx.push_back(static_cast<int>(v > 0
                                           ? v - 1
                                           : static_cast<long>(
                                                 mesh.vertices.size()) +
                                                 v));
      }
      if (idx.size() != 3)
        throw MeshError(path + ":" + std::to_string(lineno) +
                        ": non-triangular face (" + std::to_string(idx.size()) +
                        " vertices)");
      mesh.triangles.push_back({idx[0], idx[1], idx[2]});
    }
  }
  mesh.validate();
  return mesh;
}

void save_obj(const std::string& path, const TriMesh& mesh) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw MeshError("cannot write OBJ file: " + path);
  for (const auto& v : mesh.vertices)
    std::fprintf(f, "v %.9g %.9g %.9g\n", v.x(), v.y(), v.z());
  for (const auto& t : mesh.triangles)
    std::fprintf(f, "f %d %d %d\n", t[0] + 1, t[1] + 1, t[2] + 1);
  std::fclose(f);
}

}  // namespace shellflow
