#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace shellflow {

struct MeshError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Triangle mesh: K vertices, triangulated faces, edge-manifold.
// Immutable after construction; shared read-only access is safe.
struct TriMesh {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<std::array<int, 3>> triangles;

  int vertex_count() const { return static_cast<int>(vertices.size()); }
  int triangle_count() const { return static_cast<int>(triangles.size()); }

  // Stacked positions (x0,y0,z0,x1,...), length 3K.
  Eigen::VectorXd positions() const;
  void set_positions(const Eigen::VectorXd& p);

  double bbox_diagonal() const;

  // Throws MeshError on out-of-range indices, degenerate triangles,
  // or a non-manifold edge (shared by more than two triangles).
  void validate() const;
};

// Interior edge with its two incident triangles and opposite vertices.
struct DihedralPair {
  int tri_a, tri_b;
  int edge_v0, edge_v1;  // shared edge, edge_v0 < edge_v1
  int opp_a, opp_b;      // vertex of tri_a / tri_b opposite the edge
};

struct Adjacency {
  std::vector<std::vector<int>> one_ring;  // sorted, N^1_i
  std::vector<std::vector<int>> two_ring;  // sorted, graph distance exactly 2
  std::vector<DihedralPair> dihedral_pairs;
};

Adjacency build_adjacency(const TriMesh& mesh);

// Symmetric cotangent edge weights, c_ij = 1/2 (cot a + cot b) over the one
// or two angles opposite edge (i,j). Boundary edges use the single triangle.
struct CotanWeights {
  std::unordered_map<uint64_t, double> w;

  static uint64_t key(int i, int j) {
    if (i > j) std::swap(i, j);
    return (static_cast<uint64_t>(i) << 32) | static_cast<uint32_t>(j);
  }
  double at(int i, int j) const {
    auto it = w.find(key(i, j));
    if (it == w.end()) throw MeshError("cotan weight queried for non-edge");
    return it->second;
  }
  bool has(int i, int j) const { return w.count(key(i, j)) != 0; }
};

CotanWeights cotan_weights(const TriMesh& mesh);

// OBJ text IO, v/f records only, 1-based indices, 9 significant digits.
TriMesh load_obj(const std::string& path);
void save_obj(const std::string& path, const TriMesh& mesh);

}  // namespace shellflow
