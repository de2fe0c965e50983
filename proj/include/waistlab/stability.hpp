#pragma once

// Monodromy of periodic orbits in intrinsic phase coordinates, the reduced
// Poincare map, and the stability classification built on it.

#include <algorithm>
#include <complex>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "waistlab/integrator.hpp"

namespace waistlab {

using Complex = std::complex<double>;

enum class StabilityClass { hyperbolic, elliptic, quasi_elliptic, degenerate };

inline std::string to_string(StabilityClass c) {
    switch (c) {
    case StabilityClass::hyperbolic: return "hyperbolic";
    case StabilityClass::elliptic: return "elliptic";
    case StabilityClass::quasi_elliptic: return "quasi_elliptic";
    case StabilityClass::degenerate: return "degenerate";
    }
    return "unknown";
}

struct StabilityOptions {
    double unit_circle_tol = 1e-6;  ///< ||lambda| - 1| below this counts as on the unit circle
    double one_tol = 1e-5;          ///< |lambda - 1| below this counts as the eigenvalue 1
    double angle_tol = 1e-4;        ///< resonance tolerance of the 4-elementary test
    double rank_tol = 1e-6;         ///< singular-value cut for dim ker(P - I)
};

struct StabilityReport {
    std::vector<Complex> multipliers;          ///< eigenvalues of the monodromy
    std::vector<Complex> reduced_multipliers;  ///< eigenvalues of the reduced Poincare map
    StabilityClass cls = StabilityClass::degenerate;
    bool four_elementary = true;
    std::vector<int> resonance;   ///< failing combination as signed 1-based angle indices
    int unit_multiplicity = 0;    ///< dim ker(P - I)
    double determinant = 1.0;     ///< det of the monodromy
    double unit_circle_tol = 1e-6;
    Mat reduced_map;
};

inline std::vector<Complex> eigenvalues_sorted(const Mat& A) {
    std::vector<Complex> out;
    if (A.size() == 0) return out;
    Eigen::EigenSolver<Mat> es(A, false);
    for (Eigen::Index i = 0; i < A.rows(); ++i) out.push_back(es.eigenvalues()[i]);
    std::sort(out.begin(), out.end(), [](Complex a, Complex b) {
        if (std::abs(a) != std::abs(b)) return std::abs(a) > std::abs(b);
        return std::arg(a) < std::arg(b);
    });
    return out;
}

/// 4-elementary test: no nonzero integer combination sum k_j theta_j with
/// sum |k_j| <= 4 of the unit-circle angles (one per conjugate pair) vanishes
/// mod 2 pi. Returns the first failing combination, empty when none fails.
inline std::vector<int> four_resonance(const std::vector<double>& angles, double tol) {
    const int q = static_cast<int>(angles.size());
    std::vector<int> pick;
    std::vector<int> found;
    // Enumerate multisets of up to 4 signed indices in nondecreasing order.
    auto check = [&]() {
        std::vector<int> k(q, 0);
        double sum = 0.0;
        for (int s : pick) {
            const int j = std::abs(s) - 1;
            k[j] += s > 0 ? 1 : -1;
            sum += s > 0 ? angles[j] : -angles[j];
        }
        if (std::all_of(k.begin(), k.end(), [](int x) { return x == 0; })) return false;
        const double r = std::remainder(sum, 2.0 * std::numbers::pi);
        return std::abs(r) <= tol;
    };
    std::vector<int> symbols;
    for (int j = 1; j <= q; ++j) symbols.push_back(j), symbols.push_back(-j);
    std::function<bool(std::size_t, int)> rec = [&](std::size_t start, int depth) {
        if (!pick.empty() && check()) {
            found = pick;
            return true;
        }
        if (depth == 4) return false;
        for (std::size_t i = start; i < symbols.size(); ++i) {
            pick.push_back(symbols[i]);
            if (rec(i, depth + 1)) return true;
            pick.pop_back();
        }
        return false;
    };
    rec(0, 0);
    return found;
}

/// Classification of a reduced Poincare map given as a raw matrix.
inline StabilityReport classify_reduced(const Mat& P, const StabilityOptions& opts = {}) {
    StabilityReport r;
    r.unit_circle_tol = opts.unit_circle_tol;
    r.reduced_map = P;
    r.reduced_multipliers = eigenvalues_sorted(P);
    int on_circle = 0, off_circle = 0;
    bool near_one = false;
    std::vector<double> angles;
    for (const Complex& l : r.reduced_multipliers) {
        if (std::abs(l - 1.0) <= opts.one_tol) near_one = true;
        if (std::abs(std::abs(l) - 1.0) <= opts.unit_circle_tol) {
            ++on_circle;
            if (l.imag() > 0 || (l.imag() == 0 && l.real() < 0)) angles.push_back(std::arg(l));
            else if (l.imag() == 0) angles.push_back(0.0);
        } else {
            ++off_circle;
        }
    }
    if (P.size() > 0) {
        // dim ker(P - I), capped by the algebraic count of multipliers near 1.
        Eigen::JacobiSVD<Mat> svd(P - Mat::Identity(P.rows(), P.cols()));
        int rank_deficit = 0, algebraic = 0;
        for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i)
            if (svd.singularValues()[i] <= opts.rank_tol) ++rank_deficit;
        for (const Complex& l : r.reduced_multipliers)
            if (std::abs(l - 1.0) <= opts.one_tol) ++algebraic;
        r.unit_multiplicity = std::min(rank_deficit, algebraic);
    }
    if (near_one) r.cls = StabilityClass::degenerate;
    else if (on_circle == 0) r.cls = StabilityClass::hyperbolic;
    else if (off_circle == 0) r.cls = StabilityClass::elliptic;
    else r.cls = StabilityClass::quasi_elliptic;
    r.resonance = four_resonance(angles, opts.angle_tol);
    r.four_elementary = r.resonance.empty();
    return r;
}

/// Linearized period map of a periodic orbit in intrinsic coordinates
/// (identity chart on tori, an orthonormal frame of T(TS^2) on the sphere).
struct Monodromy {
    Mat M;        ///< intrinsic monodromy
    Mat frame;    ///< ambient -> intrinsic: intrinsic = frame^T ambient
    Vec flow;     ///< flow direction at the base point (intrinsic)
    Vec denergy;  ///< energy differential at the base point (intrinsic)
    double determinant = 1.0;
    FlowResult flow_result;  ///< last segment; action accumulated over the period
};

/// Orthonormal basis of the tangent space of the phase constraint set at (q, v).
inline Mat phase_frame(const ConfigSpace& space, const PhaseState& s) {
    const int D = space.ambient_dim();
    if (space.is_torus()) return Mat::Identity(2 * D, 2 * D);
    Mat C = Mat::Zero(2, 6);
    C.block(0, 0, 1, 3) = s.q.transpose();
    C.block(1, 0, 1, 3) = s.v.transpose();
    C.block(1, 3, 1, 3) = s.q.transpose();
    Eigen::JacobiSVD<Mat> svd(C, Eigen::ComputeFullV);
    return svd.matrixV().rightCols(4);
}

/// Monodromy as the product of segment transition matrices; the
/// determinant is accumulated per segment, which keeps it accurate on
/// strongly unstable orbits.
inline Monodromy monodromy(const LagrangianModel& model, const PhaseState& s0, double period,
                           const IntegratorOptions& opts = {}, int segments = 4) {
    Monodromy out;
    out.frame = phase_frame(model.space(), s0);
    const int n = static_cast<int>(out.frame.cols());
    out.M = Mat::Identity(n, n);
    out.determinant = 1.0;
    PhaseState s = s0;
    Mat frame = out.frame;
    for (int j = 0; j < segments; ++j) {
        FlowResult seg = el_flow(model, s, period / segments, opts, true);
        PhaseState next{seg.lifted_q, seg.state.v};
        const Mat next_frame = j + 1 == segments ? out.frame : phase_frame(model.space(), next);
        const Mat block = next_frame.transpose() * seg.transition * frame;
        out.M = block * out.M;
        out.determinant *= block.determinant();
        s = next;
        frame = next_frame;
        seg.action += out.flow_result.action;
        out.flow_result = std::move(seg);
    }
    const int D = model.dim();
    Vec f(2 * D), dE(2 * D);
    f << s0.v, model.acceleration(s0.q, s0.v);
    dE << Vec(model.fields(s0.q).grad_U), s0.v;
    out.flow = out.frame.transpose() * f;
    out.denergy = out.frame.transpose() * dE;
    return out;
}

/// Reduced Poincare map: M acting on ker(dE) modulo the flow direction,
/// written in an orthonormal basis B of ker(dE) orthogonal to the flow.
/// At an equilibrium (no flow direction) the full monodromy is returned.
inline Mat reduced_poincare(const Monodromy& m) {
    const Eigen::Index n = m.M.rows();
    const double scale = std::max(1.0, m.denergy.norm());
    if (m.flow.norm() <= 1e-12 * scale) return m.M;
    if (n == 2) return Mat(0, 0);
    Mat C(2, n);
    C.row(0) = m.flow.normalized().transpose();
    C.row(1) = m.denergy.norm() > 0 ? Vec(m.denergy.normalized()) : Vec::Zero(n);
    Eigen::JacobiSVD<Mat> svd(C, Eigen::ComputeFullV);
    const Mat B = svd.matrixV().rightCols(n - 2);
    Mat FB(n, n - 1);
    FB.col(0) = m.flow;
    FB.rightCols(n - 2) = B;
    const Mat coeffs = FB.colPivHouseholderQr().solve(m.M * B);
    return coeffs.bottomRows(n - 2);
}

inline StabilityReport classify_orbit(const LagrangianModel& model, const PhaseState& s0, double period,
                                      const StabilityOptions& opts = {}, const IntegratorOptions& iopts = {},
                                      int segments = 4) {
    const Monodromy m = monodromy(model, s0, period, iopts, segments);
    StabilityReport r = classify_reduced(reduced_poincare(m), opts);
    r.multipliers = eigenvalues_sorted(m.M);
    r.determinant = m.determinant;
    if (m.flow.norm() <= 1e-12 * std::max(1.0, m.denergy.norm())) {
        int near_one = 0;
        for (const Complex& l : r.multipliers)
            if (std::abs(l - 1.0) <= opts.one_tol) ++near_one;
        if (near_one > 2) throw Error(ErrorKind::trivial_pair_ambiguous, "equilibrium with several unit multipliers");
    }
    return r;
}

}  // namespace waistlab
