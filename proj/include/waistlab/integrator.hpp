#pragma once

// Adaptive Dormand-Prince 5(4) integration of the Euler-Lagrange flow, with
// optional variational equations (transition matrix) and action quadrature.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>

#include "waistlab/lagrangian.hpp"

namespace waistlab {

struct IntegratorOptions {
    double rtol = 1e-12;
    double atol = 1e-12;
    double initial_step = 1e-3;
    double min_step = 1e-13;
    long max_steps = 5'000'000;
    double blowup_bound = 1e8;
};

/// Augmented Euler-Lagrange system. Layout of the state vector:
///   [q (D), v (D), transition matrix (2D x 2D, column-major, optional), action (optional)].
/// Torus coordinates are lifted (never wrapped) during integration.
class ElSystem {
public:
    ElSystem(const LagrangianModel& model, bool linearize, bool accumulate_action)
        : model_(model), linearize_(linearize), action_(accumulate_action), d_(model.dim()) {}

    int dim() const { return d_; }
    int phase_size() const { return 2 * d_; }
    int size() const {
        return 2 * d_ + (linearize_ ? 4 * d_ * d_ : 0) + (action_ ? 1 : 0);
    }
    bool linearize() const { return linearize_; }
    bool accumulates_action() const { return action_; }
    int action_index() const { return 2 * d_ + (linearize_ ? 4 * d_ * d_ : 0); }

    Vec pack(const Vec& q, const Vec& v) const {
        Vec y = Vec::Zero(size());
        y.head(d_) = q;
        y.segment(d_, d_) = v;
        if (linearize_) {
            const int n = 2 * d_;
            Eigen::Map<Mat>(y.data() + n, n, n).setIdentity();
        }
        return y;
    }

    Mat transition(const Vec& y) const {
        const int n = 2 * d_;
        return Eigen::Map<const Mat>(y.data() + n, n, n);
    }

    void operator()(const Vec& y, Vec& dy) const {
        const int d = d_;
        dy.resize(y.size());
        const auto q = y.head(d);
        const auto v = y.segment(d, d);
        dy.head(d) = v;
        dy.segment(d, d) = model_.acceleration(q, v);
        if (linearize_) {
            const int n = 2 * d;
            const auto [aq, av] = model_.acceleration_jacobian(q, v);
            Eigen::Map<const Mat> Phi(y.data() + n, n, n);
            Eigen::Map<Mat> dPhi(dy.data() + n, n, n);
            dPhi.topRows(d) = Phi.bottomRows(d);
            dPhi.bottomRows(d) = aq * Phi.topRows(d) + av * Phi.bottomRows(d);
        }
        if (action_) dy[action_index()] = model_.lagrangian(q, v);
    }

    /// Keeps sphere states on the unit tangent bundle constraint set.
    void project(Vec& y) const {
        if (!model_.space().is_sphere()) return;
        Eigen::Vector3d q = y.head(3);
        q.normalize();
        Eigen::Vector3d v = y.segment(3, 3);
        v -= v.dot(q) * q;
        y.head(3) = q;
        y.segment(3, 3) = v;
    }

    double energy(const Vec& y) const { return model_.energy(y.head(d_), y.segment(d_, d_)); }

    const LagrangianModel& model() const { return model_; }

private:
    const LagrangianModel& model_;
    bool linearize_;
    bool action_;
    int d_;
};

/// One Dormand-Prince step with embedded error estimate.
class Dopri5 {
public:
    template <class Rhs>
    static void step(const Rhs& f, const Vec& y, const Vec& k1, double h, Vec& y_new, Vec& k7,
                     Vec& err) {
        static constexpr double a21 = 1.0 / 5;
        static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
        static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
        static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187,
                                a53 = 64448.0 / 6561, a54 = -212.0 / 729;
        static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                                a64 = 49.0 / 176, a65 = -5103.0 / 18656;
        static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                                b5 = -2187.0 / 6784, b6 = 11.0 / 84;
        static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                                e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;
        Vec k2, k3, k4, k5, k6;
        f(y + h * a21 * k1, k2);
        f(y + h * (a31 * k1 + a32 * k2), k3);
        f(y + h * (a41 * k1 + a42 * k2 + a43 * k3), k4);
        f(y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4), k5);
        f(y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5), k6);
        y_new = y + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
        f(y_new, k7);
        err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    }
};

struct FlowStats {
    long steps = 0;
    long rejected = 0;
    double max_energy_drift = 0.0;
};

/// Adaptive integration of an ElSystem from t = 0 to t_end (t_end may be
/// negative). The optional hook is called after each accepted step with
/// (t_prev, y_prev, t_new, y_new); returning true stops the integration early.
class ElIntegrator {
public:
    using StepHook = std::function<bool(double, const Vec&, double, const Vec&)>;

    ElIntegrator(const ElSystem& sys, IntegratorOptions opts) : sys_(sys), opts_(opts) {}

    /// Returns the time actually reached (t_end unless the hook stopped early).
    double integrate(Vec& y, double t_end, FlowStats* stats = nullptr,
                     const StepHook& hook = {}) const {
        FlowStats local;
        FlowStats& st = stats ? *stats : local;
        if (t_end == 0.0) return 0.0;
        const double dir = t_end > 0 ? 1.0 : -1.0;
        const double span = std::abs(t_end);
        const int n_phase = sys_.phase_size();
        const double e_start = sys_.energy(y);
        double t = 0.0;
        double h = std::min(opts_.initial_step, span);
        Vec k1, k7, y_new, err;
        sys_(y, k1);
        const double order_exp = 1.0 / 5.0;
        while (t < span) {
            if (++st.steps > opts_.max_steps)
                throw Error(ErrorKind::tolerance_failure, "step budget exceeded");
            h = std::min(h, span - t);
            Dopri5::step(sys_, y, k1, dir * h, y_new, k7, err);
            double norm = 0.0;
            for (Eigen::Index i = 0; i < y.size(); ++i) {
                const double sc = opts_.atol + opts_.rtol * std::max(std::abs(y[i]), std::abs(y_new[i]));
                const double r = err[i] / sc;
                norm += r * r;
            }
            norm = std::sqrt(norm / static_cast<double>(y.size()));
            if (!std::isfinite(norm)) norm = 1e10;
            if (norm <= 1.0) {
                const double t_prev = t;
                t = (span - t - h <= 1e-15 * span) ? span : t + h;
                sys_.project(y_new);
                if (y_new.head(n_phase).cwiseAbs().maxCoeff() > opts_.blowup_bound)
                    throw Error(ErrorKind::blowup, "state norm exceeded bound");
                const double drift = std::abs(sys_.energy(y_new) - e_start);
                st.max_energy_drift = std::max(st.max_energy_drift, drift);
                Vec y_prev = std::move(y);
                y = y_new;
                k1 = k7;
                if (sys_.model().space().is_sphere()) sys_(y, k1);  // projection changed y
                const double fac = norm == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(norm, -order_exp), 0.2, 5.0);
                h *= fac;
                if (hook && hook(dir * t_prev, y_prev, dir * t, y)) return dir * t;
            } else {
                ++st.rejected;
                h *= std::clamp(0.9 * std::pow(norm, -order_exp), 0.1, 0.9);
                if (h < opts_.min_step * std::max(1.0, span))
                    throw Error(ErrorKind::tolerance_failure, "step size underflow");
            }
        }
        return dir * span;
    }

    /// Advances a copy of y by h under error control (event refinement).
    Vec advance(Vec y, double h) const {
        integrate(y, h);
        return y;
    }

private:
    const ElSystem& sys_;
    IntegratorOptions opts_;
};

struct FlowResult {
    PhaseState state;     ///< final state (torus coordinates wrapped into [0,1)^d)
    Vec lifted_q;         ///< final configuration without wrapping
    Mat transition;       ///< 2D x 2D fundamental matrix (empty unless requested)
    double action = 0.0;  ///< integral of L along the trajectory
    FlowStats stats;
};

/// The Euler-Lagrange flow phi^t applied to s0, optionally with the
/// fundamental solution of the variational equations.
inline FlowResult el_flow(const LagrangianModel& model, const PhaseState& s0, double t,
                          const IntegratorOptions& opts = {}, bool with_linearization = false) {
    const ElSystem sys(model, with_linearization, true);
    Vec y = sys.pack(s0.q, s0.v);
    sys.project(y);
    FlowResult out;
    ElIntegrator(sys, opts).integrate(y, t, &out.stats);
    const int d = model.dim();
    out.lifted_q = y.head(d);
    out.state.q = model.space().is_torus() ? torus_wrap(out.lifted_q) : Vec(out.lifted_q);
    out.state.v = y.segment(d, d);
    if (with_linearization) out.transition = sys.transition(y);
    out.action = y[sys.action_index()];
    return out;
}

}  // namespace waistlab
