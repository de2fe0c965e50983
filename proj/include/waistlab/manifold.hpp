#pragma once

// Configuration-space geometry: the flat d-torus R^d / Z^d (d = 1, 2, 3) and
// the round unit sphere embedded in R^3.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "waistlab/error.hpp"

namespace waistlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct ConfigSpace {
    enum class Kind { torus, sphere2 };

    Kind kind = Kind::torus;
    int dim = 2;  ///< torus dimension; ignored for sphere2

    static ConfigSpace torus(int d) {
        if (d < 1 || d > 3) throw Error(ErrorKind::config, "torus dimension must be 1, 2 or 3");
        return {Kind::torus, d};
    }
    static ConfigSpace sphere() { return {Kind::sphere2, 2}; }

    bool is_torus() const { return kind == Kind::torus; }
    bool is_sphere() const { return kind == Kind::sphere2; }

    /// Number of coordinates used to store a point (d on T^d, 3 on S^2).
    int ambient_dim() const { return is_torus() ? dim : 3; }
    /// Manifold dimension.
    int intrinsic_dim() const { return is_torus() ? dim : 2; }

    std::string name() const {
        return is_torus() ? "T" + std::to_string(dim) : std::string("S2");
    }

    friend bool operator==(const ConfigSpace&, const ConfigSpace&) = default;
};

/// Free homotopy class of a loop. On tori this is the winding vector in Z^d;
/// on the sphere every loop is contractible and the vector is empty.
struct HomotopyTag {
    std::vector<int> winding;

    static HomotopyTag trivial(const ConfigSpace& space) {
        return {std::vector<int>(space.is_torus() ? space.dim : 0, 0)};
    }

    bool contractible() const {
        for (int w : winding)
            if (w != 0) return false;
        return true;
    }

    HomotopyTag scaled(int m) const {
        HomotopyTag t = *this;
        for (int& w : t.winding) w *= m;
        return t;
    }

    friend bool operator==(const HomotopyTag&, const HomotopyTag&) = default;
};

inline std::string to_string(const HomotopyTag& tag) {
    if (tag.winding.empty()) return "contractible";
    std::string s = "(";
    for (std::size_t i = 0; i < tag.winding.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(tag.winding[i]);
    }
    return s + ")";
}

/// Representative of x mod 1 in [-1/2, 1/2). Ties at exactly +-1/2 map to -1/2.
inline double centered_mod1(double x) { return x - std::floor(x + 0.5); }

/// Shortest lift of q1 - q0 on the torus, each component in [-1/2, 1/2).
inline Vec torus_displacement(const Vec& q0, const Vec& q1) {
    Vec d(q0.size());
    for (Eigen::Index i = 0; i < q0.size(); ++i) d[i] = centered_mod1(q1[i] - q0[i]);
    return d;
}

/// Normalize torus coordinates into [0,1)^d.
inline Vec torus_wrap(Vec q) {
    for (Eigen::Index i = 0; i < q.size(); ++i) {
        q[i] -= std::floor(q[i]);
        if (q[i] >= 1.0) q[i] -= 1.0;  // floor rounding at values just below an integer
    }
    return q;
}

/// Projection onto the tangent plane of the unit sphere at q.
inline Eigen::Matrix3d sphere_tangent_projector(const Eigen::Vector3d& q) {
    return Eigen::Matrix3d::Identity() - q * q.transpose();
}

/// Retraction onto S^2: drops the normal part of the step, then renormalizes.
inline Eigen::Vector3d sphere_retract(const Eigen::Vector3d& q, const Eigen::Vector3d& step) {
    const Eigen::Vector3d tangent = step - step.dot(q) * q;
    const Eigen::Vector3d moved = q + tangent;
    const double n = moved.norm();
    if (n < 1e-12) throw Error(ErrorKind::retraction_breakdown);
    return moved / n;
}

/// Orthonormal basis (columns) of the tangent plane of S^2 at q.
inline Eigen::Matrix<double, 3, 2> sphere_tangent_basis(const Eigen::Vector3d& q) {
    Eigen::Vector3d a = std::abs(q.x()) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
    Eigen::Vector3d e1 = (a - a.dot(q) * q).normalized();
    Eigen::Vector3d e2 = q.cross(e1);
    Eigen::Matrix<double, 3, 2> B;
    B.col(0) = e1;
    B.col(1) = e2;
    return B;
}

/// Largest consecutive displacement component accepted before the winding of
/// a sampled loop is considered ambiguous.
inline constexpr double kCoarsenessGuard = 0.4;

/// Winding vector of a closed polygon of torus points (rows), including the
/// wrap-around segment. Throws loop_too_coarse when a step is ambiguous.
inline HomotopyTag winding_class(const ConfigSpace& space, const Mat& points) {
    if (space.is_sphere()) return HomotopyTag::trivial(space);
    const Eigen::Index n = points.rows();
    if (n < 3) throw Error(ErrorKind::loop_too_coarse, "fewer than 3 points");
    Vec total = Vec::Zero(space.dim);
    for (Eigen::Index k = 0; k < n; ++k) {
        Vec d = torus_displacement(points.row(k).transpose(), points.row((k + 1) % n).transpose());
        if (d.cwiseAbs().maxCoeff() >= kCoarsenessGuard)
            throw Error(ErrorKind::loop_too_coarse,
                        "segment " + std::to_string(k) + " exceeds the displacement guard");
        total += d;
    }
    HomotopyTag tag;
    for (int i = 0; i < space.dim; ++i) tag.winding.push_back(static_cast<int>(std::lround(total[i])));
    return tag;
}

/// Geodesic-free distance used for loop comparisons: torus shortest lift or
/// chordal distance on the sphere.
inline double point_distance(const ConfigSpace& space, const Vec& a, const Vec& b) {
    if (space.is_torus()) return torus_displacement(a, b).norm();
    return (a - b).norm();
}

}  // namespace waistlab
