#pragma once

#include <cmath>
#include <numbers>
#include <random>

#include "waistlab/action.hpp"

namespace waistlab::testing {

inline constexpr double kTau = 2.0 * std::numbers::pi;

/// Smooth random loop with the given winding (torus) or a random
/// perturbed great/small circle (sphere).
inline DiscreteLoop random_loop(const LagrangianModel& model, std::mt19937_64& rng, int n,
                                std::vector<int> winding = {}, double amplitude = 0.05) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> g;
    const ConfigSpace& space = model.space();
    const int D = space.ambient_dim();
    const double period = 0.5 + 2.5 * u(rng);
    Mat pts(n, D);
    if (space.is_torus()) {
        if (winding.empty()) winding.assign(D, 0);
        Vec q0(D), a1(D), b1(D), a2(D);
        for (int i = 0; i < D; ++i) q0[i] = u(rng), a1[i] = g(rng), b1[i] = g(rng), a2[i] = g(rng);
        for (int k = 0; k < n; ++k) {
            const double t = static_cast<double>(k) / n;
            for (int i = 0; i < D; ++i)
                pts(k, i) = q0[i] + winding[i] * t +
                            amplitude * (a1[i] * std::cos(kTau * t) + b1[i] * std::sin(kTau * t) +
                                         0.5 * a2[i] * std::sin(2 * kTau * t));
        }
    } else {
        const Eigen::Vector3d axis = Eigen::Vector3d(g(rng), g(rng), g(rng)).normalized();
        Eigen::Vector3d e1 = axis.unitOrthogonal();
        const Eigen::Vector3d e2 = axis.cross(e1);
        const double h = 0.8 * (2 * u(rng) - 1);
        const double r = std::sqrt(1 - h * h);
        const double c1 = g(rng), c2 = g(rng);
        for (int k = 0; k < n; ++k) {
            const double t = kTau * k / n;
            const Eigen::Vector3d p = h * axis + r * (std::cos(t) * e1 + std::sin(t) * e2) +
                                      amplitude * (c1 * std::sin(2 * t) * axis + c2 * std::cos(3 * t) * e1);
            pts.row(k) = p.normalized().transpose();
        }
    }
    return DiscreteLoop::make(space, pts, period);
}

inline DiscreteLoop constant_loop(const ConfigSpace& space, const Vec& q, int n, double period) {
    Mat pts(n, space.ambient_dim());
    pts.rowwise() = q.transpose();
    return DiscreteLoop::make(space, pts, period);
}

/// Circle of the given radius and center in the (x, y) plane of T^2,
/// traversed counterclockwise.
inline DiscreteLoop torus_circle(double cx, double cy, double radius, int n, double period) {
    Mat pts(n, 2);
    for (int k = 0; k < n; ++k) {
        const double t = kTau * k / n;
        pts.row(k) << cx + radius * std::cos(t), cy + radius * std::sin(t);
    }
    return DiscreteLoop::make(ConfigSpace::torus(2), pts, period);
}

}  // namespace waistlab::testing
