#pragma once

#include <array>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "osf/geom.hpp"

namespace osf {

struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> triangles;
    std::vector<Vec3> normals;  // per-vertex, optional (empty when absent)

    bool empty() const { return triangles.empty(); }
};

using ScalarField = std::function<double(const Vec3&)>;

/// Marching cubes over a regular grid spanning `bounds` at iso-level zero,
/// with linear interpolation along cube edges. Triangles wind so that their
/// geometric normal points toward positive field values (outward for SDFs).
/// An all-positive or all-negative grid yields an empty mesh.
TriangleMesh extract_mesh(const ScalarField& field, const Aabb& bounds, int resolution);

/// Drops zero-area triangles and unreferenced vertices.
void clean_mesh(TriangleMesh& mesh);

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c);
double mesh_surface_area(const TriangleMesh& mesh);

struct MeshIoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// ASCII OBJ: v/vn/f records only.
void save_obj(const TriangleMesh& mesh, const std::string& path);
TriangleMesh load_obj(const std::string& path);

}  // namespace osf
