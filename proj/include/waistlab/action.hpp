#pragma once

// Discrete free-period action functional on loop space
//
//     S_e(loop) = sum_k L(m_k, v_k) dt + p e,   dt = p / N,
//
// with midpoint quadrature: m_k is the midpoint of the k-th chord and
// v_k = chord / dt. On the sphere the midpoint is the normalized chord
// midpoint, at which the chord is automatically tangent.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "waistlab/lagrangian.hpp"

namespace waistlab {

/// A periodic curve sampled at N equally spaced times, with free period.
struct DiscreteLoop {
    ConfigSpace space;
    Mat points;               ///< N x ambient_dim, one row per point
    double log_period = 0.0;  ///< the period is exp(log_period) > 0
    HomotopyTag tag;

    int size() const { return static_cast<int>(points.rows()); }
    double period() const { return std::exp(log_period); }
    Vec point(int k) const { return points.row(((k % size()) + size()) % size()).transpose(); }

    /// Builds a loop, normalizing points and computing the homotopy tag.
    static DiscreteLoop make(const ConfigSpace& space, Mat pts, double period) {
        if (!(period > 0.0)) throw Error(ErrorKind::precondition, "period must be positive");
        if (pts.cols() != space.ambient_dim())
            throw Error(ErrorKind::precondition, "point dimension does not match the space");
        for (Eigen::Index k = 0; k < pts.rows(); ++k) {
            if (space.is_torus())
                pts.row(k) = torus_wrap(pts.row(k).transpose()).transpose();
            else
                pts.row(k).normalize();
        }
        DiscreteLoop loop{space, std::move(pts), std::log(period), {}};
        loop.tag = winding_class(space, loop.points);
        return loop;
    }
};

/// Chord between consecutive loop points: torus shortest lift, or plain
/// difference on the sphere (guarded against near-antipodal neighbours).
inline Vec loop_chord(const ConfigSpace& space, const Vec& a, const Vec& b) {
    if (space.is_torus()) {
        Vec d = torus_displacement(a, b);
        if (d.cwiseAbs().maxCoeff() >= kCoarsenessGuard) throw Error(ErrorKind::loop_too_coarse);
        return d;
    }
    Vec d = b - a;
    if (d.norm() >= 1.0) throw Error(ErrorKind::loop_too_coarse, "sphere chord longer than 1");
    return d;
}

struct ActionEval {
    double value = 0.0;
    Mat grad_points;               ///< dS/dq_k (ambient; tangent-projected on the sphere if requested)
    double grad_log_period = 0.0;  ///< dS/d(log p) = p (e - mean discrete energy)
    double mean_energy = 0.0;      ///< mean over segments of 1/2|v_k|^2 + U(m_k)
};

/// Value and exact gradient of the discrete action.
inline ActionEval evaluate_action(const LagrangianModel& model, const DiscreteLoop& loop, double e,
                                  bool with_gradient = true, bool project = true) {
    const ConfigSpace& space = loop.space;
    const int n = loop.size();
    const int D = space.ambient_dim();
    const double p = loop.period();
    const double dt = p / n;
    ActionEval out;
    if (with_gradient) out.grad_points = Mat::Zero(n, D);
    double sum = 0.0, dS_dp = 0.0, energy_sum = 0.0;
    for (int k = 0; k < n; ++k) {
        const int k1 = (k + 1) % n;
        const SVec a = loop.points.row(k).transpose();
        const SVec b = loop.points.row(k1).transpose();
        SVec c, m;
        double snorm = 1.0;
        if (space.is_torus()) {
            c = loop_chord(space, a, b);
            m = a + 0.5 * c;
        } else {
            c = b - a;
            if (c.norm() >= 1.0) throw Error(ErrorKind::loop_too_coarse, "sphere chord longer than 1");
            const SVec s = a + b;
            snorm = s.norm();
            m = s / snorm;
        }
        const FieldEval f = model.fields(m);
        const double c2 = c.squaredNorm();
        sum += c2 / (2.0 * dt) + f.A.dot(c) - f.U * dt;
        dS_dp += (-c2 / (2.0 * dt * dt) - f.U) / n;
        energy_sum += c2 / (2.0 * dt * dt) + f.U;
        if (!with_gradient) continue;
        const SVec dT_dc = c / dt + f.A;
        SVec dT_dm = f.DA * c - f.grad_U * dt;
        if (space.is_torus()) {
            dT_dm *= 0.5;
        } else {
            dT_dm = (dT_dm - m * m.dot(dT_dm)) / snorm;
        }
        out.grad_points.row(k) += (dT_dm - dT_dc).transpose();
        out.grad_points.row(k1) += (dT_dm + dT_dc).transpose();
    }
    out.value = sum + p * e;
    out.mean_energy = energy_sum / n;
    out.grad_log_period = p * (dS_dp + e);
    if (with_gradient && project && space.is_sphere()) {
        for (int k = 0; k < n; ++k) {
            const Eigen::Vector3d q = loop.points.row(k).transpose();
            const Eigen::Vector3d g = out.grad_points.row(k).transpose();
            out.grad_points.row(k) = (g - g.dot(q) * q).transpose();
        }
    }
    return out;
}

inline double action(const LagrangianModel& model, const DiscreteLoop& loop, double e) {
    return evaluate_action(model, loop, e, false).value;
}

/// Intrinsic coordinates around a loop: per-point displacements (tangent
/// basis on the sphere) followed by the log-period.
class LoopChart {
public:
    explicit LoopChart(const DiscreteLoop& base) : base_(base) {
        if (base.space.is_sphere()) {
            bases_.reserve(base.size());
            for (int k = 0; k < base.size(); ++k) bases_.push_back(sphere_tangent_basis(base.points.row(k).transpose()));
        }
    }

    int point_dim() const { return base_.space.intrinsic_dim(); }
    int dim() const { return base_.size() * point_dim() + 1; }
    const DiscreteLoop& base() const { return base_; }

    /// Tangent vector of the loop space expressed in this chart's coordinates.
    Vec coordinates(const Mat& grad_points, double grad_log_period) const {
        const int n = base_.size(), d = point_dim();
        Vec g(dim());
        for (int k = 0; k < n; ++k) {
            if (base_.space.is_torus())
                g.segment(k * d, d) = grad_points.row(k).transpose();
            else
                g.segment(k * d, d) = bases_[k].transpose() * grad_points.row(k).transpose();
        }
        g[dim() - 1] = grad_log_period;
        return g;
    }

    Vec gradient(const LagrangianModel& model, double e) const {
        const ActionEval ev = evaluate_action(model, base_, e);
        return coordinates(ev.grad_points, ev.grad_log_period);
    }

    /// Ambient displacement of point k for chart coordinates xi.
    Vec point_step(const Vec& xi, int k) const {
        const int d = point_dim();
        if (base_.space.is_torus()) return xi.segment(k * d, d);
        return bases_[k] * xi.segment(k * d, d);
    }

    /// The loop obtained by moving along xi (retraction on the sphere). The
    /// homotopy tag is recomputed and must match unless allow_tag_change.
    DiscreteLoop displace(const Vec& xi, bool allow_tag_change = false) const {
        DiscreteLoop out = base_;
        const int n = base_.size();
        for (int k = 0; k < n; ++k) {
            const Vec q = base_.points.row(k).transpose();
            if (base_.space.is_torus())
                out.points.row(k) = torus_wrap(q + point_step(xi, k)).transpose();
            else
                out.points.row(k) = sphere_retract(q, point_step(xi, k)).transpose();
        }
        out.log_period += xi[dim() - 1];
        const HomotopyTag tag = winding_class(out.space, out.points);
        if (!allow_tag_change && !(tag == base_.tag))
            throw Error(ErrorKind::loop_too_coarse, "step changed the homotopy class");
        out.tag = tag;
        return out;
    }

    /// Ambient-coordinate embedding of chart vectors, used to transport
    /// vectors between charts on the sphere.
    Mat ambient(const Vec& xi) const {
        const int n = base_.size();
        Mat out(n, base_.space.ambient_dim());
        for (int k = 0; k < n; ++k) out.row(k) = point_step(xi, k).transpose();
        return out;
    }

private:
    DiscreteLoop base_;
    std::vector<Eigen::Matrix<double, 3, 2>> bases_;
};

/// Dense Hessian of the discrete action in LoopChart coordinates, assembled
/// by central differences of the analytic gradient. On the sphere the
/// ambient Hessian is compressed to the tangent planes with the Weingarten
/// correction -(grad.q) I.
inline Mat action_hessian(const LagrangianModel& model, const DiscreteLoop& loop, double e,
                          double h = 1e-5) {
    const int n = loop.size();
    if (loop.space.is_torus()) {
        const int d = loop.space.dim;
        const int dim = n * d + 1;
        Mat H(dim, dim);
        auto grad_at = [&](int j, double step) {
            DiscreteLoop l = loop;
            if (j < n * d)
                l.points(j / d, j % d) += step;  // unwrapped is fine: chords use shortest lifts
            else
                l.log_period += step;
            const ActionEval ev = evaluate_action(model, l, e);
            Vec g(dim);
            for (int k = 0; k < n; ++k) g.segment(k * d, d) = ev.grad_points.row(k).transpose();
            g[dim - 1] = ev.grad_log_period;
            return g;
        };
        for (int j = 0; j < dim; ++j) H.col(j) = (grad_at(j, h) - grad_at(j, -h)) / (2 * h);
        return 0.5 * (H + H.transpose());
    }
    // Sphere: ambient Hessian, points perturbed off the sphere.
    const int amb = 3 * n + 1;
    Mat Ha(amb, amb);
    auto grad_at = [&](int j, double step) {
        DiscreteLoop l = loop;
        if (j < 3 * n)
            l.points(j / 3, j % 3) += step;
        else
            l.log_period += step;
        const ActionEval ev = evaluate_action(model, l, e, true, false);
        Vec g(amb);
        for (int k = 0; k < n; ++k) g.segment(3 * k, 3) = ev.grad_points.row(k).transpose();
        g[amb - 1] = ev.grad_log_period;
        return g;
    };
    for (int j = 0; j < amb; ++j) Ha.col(j) = (grad_at(j, h) - grad_at(j, -h)) / (2 * h);
    Ha = 0.5 * (Ha + Ha.transpose());
    const ActionEval base = evaluate_action(model, loop, e, true, false);
    const int dim = 2 * n + 1;
    Mat Bfull = Mat::Zero(amb, dim);
    for (int k = 0; k < n; ++k) Bfull.block(3 * k, 2 * k, 3, 2) = sphere_tangent_basis(loop.points.row(k).transpose());
    Bfull(amb - 1, dim - 1) = 1.0;
    Mat H = Bfull.transpose() * Ha * Bfull;
    for (int k = 0; k < n; ++k) {
        const double normal = base.grad_points.row(k).dot(loop.points.row(k));
        H.block(2 * k, 2 * k, 2, 2) -= normal * Eigen::Matrix2d::Identity();
    }
    return 0.5 * (H + H.transpose());
}

struct ActionReport {
    double value = 0.0;
    double grad_norm = 0.0;
    int index = 0;                 ///< free-period Morse index
    int nullity_total = 0;         ///< free-period near-kernel dimension
    int index_fixed_period = 0;    ///< index with the period frozen
    int nullity_fixed_period = 0;
    double tol_zero = 0.0;
    std::vector<double> spectrum_edge;  ///< smallest eigenvalues (up to 5)
    Vec eigenvalues;
    Mat eigenvectors;  ///< columns, LoopChart coordinates
};

struct SpectrumOptions {
    double grad_threshold = 1e-4;      ///< "not a critical point" above this gradient norm
    double relative_zero_tol = 1e-6;   ///< near-kernel tolerance relative to the spectral norm
};

inline ActionReport action_hessian_spectrum(const LagrangianModel& model, const DiscreteLoop& loop,
                                            double e, const SpectrumOptions& opts = {}) {
    ActionReport r;
    const LoopChart chart(loop);
    const ActionEval ev = evaluate_action(model, loop, e);
    r.value = ev.value;
    r.grad_norm = chart.coordinates(ev.grad_points, ev.grad_log_period).norm();
    if (r.grad_norm > opts.grad_threshold)
        throw Error(ErrorKind::not_a_critical_point, "gradient norm " + fmt_sci(r.grad_norm));
    const Mat H = action_hessian(model, loop, e);
    Eigen::SelfAdjointEigenSolver<Mat> es(H);
    r.eigenvalues = es.eigenvalues();
    r.eigenvectors = es.eigenvectors();
    const double scale = r.eigenvalues.cwiseAbs().maxCoeff();
    r.tol_zero = opts.relative_zero_tol * scale;
    for (Eigen::Index i = 0; i < r.eigenvalues.size(); ++i) {
        const double l = r.eigenvalues[i];
        if (l < -r.tol_zero) ++r.index;
        else if (l <= r.tol_zero) ++r.nullity_total;
    }
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(5, r.eigenvalues.size()); ++i)
        r.spectrum_edge.push_back(r.eigenvalues[i]);
    const Eigen::Index m = H.rows() - 1;
    Eigen::SelfAdjointEigenSolver<Mat> fixed(H.topLeftCorner(m, m), Eigen::EigenvaluesOnly);
    const double tol_fixed = opts.relative_zero_tol * fixed.eigenvalues().cwiseAbs().maxCoeff();
    for (Eigen::Index i = 0; i < m; ++i) {
        const double l = fixed.eigenvalues()[i];
        if (l < -tol_fixed) ++r.index_fixed_period;
        else if (l <= tol_fixed) ++r.nullity_fixed_period;
    }
    return r;
}

/// gamma^m: points repeated m times, period m p, tag multiplied by m.
inline DiscreteLoop iterate_loop(const DiscreteLoop& loop, int m) {
    if (m < 1) throw Error(ErrorKind::precondition, "iterate order must be positive");
    DiscreteLoop out = loop;
    out.points.resize(loop.size() * m, loop.points.cols());
    for (int j = 0; j < m; ++j) out.points.middleRows(j * loop.size(), loop.size()) = loop.points;
    out.log_period = loop.log_period + std::log(static_cast<double>(m));
    out.tag = loop.tag.scaled(m);
    return out;
}

/// The reversed loop t -> gamma(-t).
inline DiscreteLoop reverse_loop(const DiscreteLoop& loop) {
    DiscreteLoop out = loop;
    const int n = loop.size();
    for (int k = 0; k < n; ++k) out.points.row(k) = loop.points.row(n - 1 - k);
    out.tag = loop.tag.scaled(-1);
    return out;
}

/// Doubles N by inserting chord midpoints.
inline DiscreteLoop refine_loop(const DiscreteLoop& loop) {
    const int n = loop.size();
    DiscreteLoop out = loop;
    out.points.resize(2 * n, loop.points.cols());
    for (int k = 0; k < n; ++k) {
        const Vec a = loop.points.row(k).transpose();
        const Vec b = loop.point(k + 1);
        Vec mid;
        if (loop.space.is_torus())
            mid = torus_wrap(a + 0.5 * torus_displacement(a, b));
        else
            mid = (a + b).normalized();
        out.points.row(2 * k) = a.transpose();
        out.points.row(2 * k + 1) = mid.transpose();
    }
    return out;
}

/// Periodic piecewise-linear resampling to n points (normalized on the sphere).
inline DiscreteLoop resample_loop(const DiscreteLoop& loop, int n) {
    const int m = loop.size();
    if (n == m) return loop;
    const int D = loop.space.ambient_dim();
    // Lifted coordinates along the loop.
    Mat lifted(m + 1, D);
    lifted.row(0) = loop.points.row(0);
    for (int k = 0; k < m; ++k) {
        const Vec a = loop.points.row(k).transpose();
        const Vec b = loop.point(k + 1);
        const Vec c = loop.space.is_torus() ? torus_displacement(a, b) : Vec(b - a);
        lifted.row(k + 1) = lifted.row(k) + c.transpose();
    }
    Mat pts(n, D);
    for (int j = 0; j < n; ++j) {
        const double s = static_cast<double>(j) * m / n;
        const int k = std::min(static_cast<int>(std::floor(s)), m - 1);
        const double w = s - k;
        pts.row(j) = (1 - w) * lifted.row(k) + w * lifted.row(k + 1);
    }
    DiscreteLoop out = DiscreteLoop::make(loop.space, pts, loop.period());
    return out;
}

/// Phase-aligned loop distance: RMS of point differences under the best
/// cyclic index shift, plus |delta log p|. Loops must have equal size.
inline double loop_distance(const DiscreteLoop& a, const DiscreteLoop& b) {
    if (a.size() != b.size()) throw Error(ErrorKind::precondition, "loop sizes differ");
    const int n = a.size();
    double best = std::numeric_limits<double>::infinity();
    for (int s = 0; s < n; ++s) {
        double acc = 0.0;
        for (int k = 0; k < n; ++k) {
            const double dist = point_distance(a.space, a.points.row(k).transpose(), b.point(k + s));
            acc += dist * dist;
        }
        best = std::min(best, acc / n);
    }
    return std::sqrt(best) + std::abs(a.log_period - b.log_period);
}

/// Index-aligned loop-space distance used by the string method.
inline double aligned_loop_distance(const DiscreteLoop& a, const DiscreteLoop& b) {
    const int n = a.size();
    double acc = 0.0;
    for (int k = 0; k < n; ++k) {
        const double dist = point_distance(a.space, a.points.row(k).transpose(), b.points.row(k).transpose());
        acc += dist * dist;
    }
    return std::sqrt(acc / n) + std::abs(a.log_period - b.log_period);
}

/// Discrete circulation of the one-form: sum_k A(m_k).chord_k.
inline double discrete_circulation(const LagrangianModel& model, const DiscreteLoop& loop) {
    double circ = 0.0;
    const int n = loop.size();
    for (int k = 0; k < n; ++k) {
        const Vec a = loop.points.row(k).transpose();
        const Vec b = loop.point(k + 1);
        Vec c, m;
        if (loop.space.is_torus()) {
            c = torus_displacement(a, b);
            m = a + 0.5 * c;
        } else {
            c = b - a;
            m = (a + b).normalized();
        }
        circ += model.fields(m).A.dot(c);
    }
    return circ;
}

}  // namespace waistlab
