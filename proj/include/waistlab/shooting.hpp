#pragma once

// Refinement of approximate periodic orbits by multiple shooting, and the
// OrbitRecord assembled from the refined orbit.

#include "waistlab/optimize.hpp"
#include "waistlab/stability.hpp"

namespace waistlab {

struct OrbitRecord {
    DiscreteLoop loop;  ///< resampled representative, polished to a discrete critical point
    PhaseState state0;
    double energy = 0.0;  ///< target energy e
    double period = 0.0;
    double energy_residual = 0.0;    ///< |E(state0) - e|
    double shooting_residual = 0.0;  ///< multiple-shooting matching residual (lifted)
    double period_map_defect = 0.0;  ///< |phi^p(state0) - state0| by composing the segment flows
    int segments = 0;
    double action = 0.0;             ///< continuous S_e along the orbit
    double discrete_action = 0.0;    ///< S_e of the discrete representative
    double discrete_grad_norm = 0.0;
    int index = 0;
    int nullity_total = 0;
    int index_fixed_period = 0;
    int nullity_fixed_period = 0;
    std::vector<double> spectrum_edge;
    StabilityReport stability;
    bool is_waist = false;
    int newton_iterations = 0;

    const HomotopyTag& tag() const { return loop.tag; }
};

struct RefineOptions {
    int segments = 4;
    int max_segments = 32;
    int max_iterations = 40;
    double tol = 1e-13;           ///< Newton residual target
    double accept = 1e-8;         ///< residual invariants required of the result
    double basin_bound = 0.25;    ///< max loop distance between guess and refined orbit
    int resample_points = 0;      ///< 0 keeps the guess size
    bool spectrum = true;         ///< discrete index/nullity of the result
    bool stability = true;        ///< monodromy classification of the result
    double critical_threshold = 1e-6;
    IntegratorOptions integrator;
    StabilityOptions stability_options;
};

namespace detail {

inline PhaseState loop_state(const LagrangianModel& model, const DiscreteLoop& loop, int k, double e) {
    const int n = loop.size();
    const double dt = loop.period() / n;
    const Vec q = loop.point(k);
    Vec v;
    if (loop.space.is_torus()) {
        v = (torus_displacement(loop.point(k - 1), q) + torus_displacement(q, loop.point(k + 1))) / (2 * dt);
    } else {
        v = (loop.point(k + 1) - loop.point(k - 1)) / (2 * dt);
        v -= v.dot(q) * q;
    }
    const double kinetic = e - model.potential(q);
    if (kinetic > 0 && v.norm() > 0) v *= std::sqrt(2 * kinetic) / v.norm();
    return {q, v};
}

/// Shift between the end and the start of one period in lifted coordinates.
inline Vec lift_shift(const DiscreteLoop& loop) {
    const int D = loop.space.ambient_dim();
    Vec s = Vec::Zero(2 * D);
    if (loop.space.is_torus())
        for (int i = 0; i < D; ++i) s[i] = loop.tag.winding[i];
    return s;
}

/// Puts sphere segment states back on the unit tangent bundle.
inline void retract_states(Vec& x, int segments) {
    for (int j = 0; j < segments; ++j) {
        auto q = x.segment(6 * j, 3);
        auto v = x.segment(6 * j + 3, 3);
        q.normalize();
        v -= v.dot(q) * q;
    }
}

}  // namespace detail

/// Multiple-shooting Gauss-Newton for a periodic orbit of energy e near the
/// guess. Unknowns: segment initial states and the period. Equations: flow
/// matching across segments, periodicity up to the winding shift, E = e, a
/// phase anchor, and the sphere constraints.
inline OrbitRecord refine_orbit(const LagrangianModel& model, const DiscreteLoop& guess, double e,
                                const RefineOptions& opts = {}) {
    const int S = opts.segments;
    const int n = guess.size();
    const int D = model.dim();
    const int Z = 2 * D;
    const bool sphere = model.space().is_sphere();
    const ElSystem sys(model, true, false);
    const ElIntegrator integ(sys, opts.integrator);
    const Vec shift = detail::lift_shift(guess);

    Vec x(S * Z + 1);
    for (int j = 0; j < S; ++j) {
        const PhaseState s = detail::loop_state(model, guess, j * n / S, e);
        x.segment(j * Z, D) = s.q;
        x.segment(j * Z + D, D) = s.v;
    }
    // Lift the segment starts so consecutive starts follow the guess.
    if (!sphere) {
        for (int j = 1; j < S; ++j) {
            Vec acc = x.segment((j - 1) * Z, D);
            for (int k = (j - 1) * n / S; k < j * n / S; ++k)
                acc += torus_displacement(guess.point(k), guess.point(k + 1));
            x.segment(j * Z, D) = acc;
        }
    }
    x[S * Z] = guess.period();
    if (sphere) detail::retract_states(x, S);
    const Vec q_ref = x.head(D);
    const Vec v_ref = x.segment(D, D);

    const int rows = S * Z + 2 + (sphere ? 2 * S : 0);
    auto residual = [&](const Vec& xx, Mat* J) {
        Vec r = Vec::Zero(rows);
        if (J) J->setZero(rows, S * Z + 1);
        const double T = xx[S * Z];
        for (int j = 0; j < S; ++j) {
            Vec y = sys.pack(xx.segment(j * Z, D), xx.segment(j * Z + D, D));
            integ.integrate(y, T / S);
            const int next = (j + 1) % S;
            Vec target = xx.segment(next * Z, Z);
            if (next == 0) target += shift;
            r.segment(j * Z, Z) = y.head(Z) - target;
            if (J) {
                J->block(j * Z, j * Z, Z, Z) = sys.transition(y);
                J->block(j * Z, next * Z, Z, Z) -= Mat::Identity(Z, Z);
                Vec f(Z);
                sys(y, f);
                J->block(j * Z, S * Z, Z, 1) = f.head(Z) / S;
            }
        }
        const Vec q0 = xx.head(D), v0 = xx.segment(D, D);
        r[S * Z] = model.energy(q0, v0) - e;
        r[S * Z + 1] = (q0 - q_ref).dot(v_ref);
        if (J) {
            J->block(S * Z, 0, 1, D) = Vec(model.fields(q0).grad_U).transpose();
            J->block(S * Z, D, 1, D) = v0.transpose();
            J->block(S * Z + 1, 0, 1, D) = v_ref.transpose();
        }
        if (sphere) {
            for (int j = 0; j < S; ++j) {
                const Vec q = xx.segment(j * Z, D), v = xx.segment(j * Z + D, D);
                const int row = S * Z + 2 + 2 * j;
                r[row] = 0.5 * (q.squaredNorm() - 1.0);
                r[row + 1] = q.dot(v);
                if (J) {
                    J->block(row, j * Z, 1, D) = q.transpose();
                    J->block(row + 1, j * Z, 1, D) = v.transpose();
                    J->block(row + 1, j * Z + D, 1, D) = q.transpose();
                }
            }
        }
        return r;
    };

    Mat J;
    Vec r;
    try {
        r = residual(x, &J);
    } catch (const Error& err) {
        throw Error(ErrorKind::left_basin, std::string("initial shooting failed: ") + err.what());
    }
    int it = 0;
    for (; it < opts.max_iterations && r.norm() > opts.tol; ++it) {
        const Vec delta = -J.completeOrthogonalDecomposition().solve(r);
        double t = 1.0;
        bool improved = false;
        for (int ls = 0; ls < 12; ++ls, t *= 0.5) {
            Vec xt = x + t * delta;
            if (!(xt[S * Z] > 0)) continue;
            if (sphere) detail::retract_states(xt, S);
            try {
                Mat Jt;
                Vec rt = residual(xt, &Jt);
                if (rt.norm() < r.norm()) {
                    x = std::move(xt);
                    r = std::move(rt);
                    J = std::move(Jt);
                    improved = true;
                    break;
                }
            } catch (const Error&) {
            }
        }
        if (!improved) break;
    }
    OrbitRecord rec;
    rec.newton_iterations = it;
    rec.energy = e;
    rec.period = x[S * Z];
    PhaseState s0{x.head(D), x.segment(D, D)};
    if (sphere) {
        s0.q.normalize();
        s0.v -= s0.v.dot(s0.q) * s0.q;
    }
    rec.energy_residual = std::abs(model.energy(s0) - e);
    rec.shooting_residual = r.head(S * Z).norm();
    {
        // Periodicity defect of the composed segment flows from state0; a
        // diagnostic, dominated by lambda * rounding on strongly unstable orbits.
        Vec y = sys.pack(s0.q, s0.v);
        for (int j = 0; j < S; ++j) {
            integ.integrate(y, rec.period / S);
            y = sys.pack(y.head(D), y.segment(D, D));
        }
        Vec start(Z);
        start << s0.q, s0.v;
        rec.period_map_defect = (y.head(Z) - start - shift).norm();
    }
    if (rec.shooting_residual > opts.accept || rec.energy_residual > opts.accept) {
        if (2 * S <= opts.max_segments && it > 0) {
            // Strongly unstable orbits need shorter segments.
            RefineOptions finer = opts;
            finer.segments = 2 * S;
            return refine_orbit(model, guess, e, finer);
        }
        throw Error(ErrorKind::newton_stagnation, "residual " + fmt_sci(r.norm()) + " after " +
                                                       std::to_string(it) + " iterations");
    }
    rec.segments = S;

    // Sample the orbit at equal times; accumulate action and periodicity defect.
    const int m = opts.resample_points > 0 ? opts.resample_points : n;
    const ElSystem asys(model, false, true);
    const ElIntegrator ainteg(asys, opts.integrator);
    Vec y = asys.pack(s0.q, s0.v);
    Mat pts(m, D);
    for (int k = 0; k < m; ++k) {
        pts.row(k) = y.head(D).transpose();
        ainteg.integrate(y, rec.period / m);
    }
    rec.action = y[asys.action_index()] + rec.period * e;
    if (!sphere) s0.q = torus_wrap(s0.q);
    rec.state0 = s0;

    DiscreteLoop loop = DiscreteLoop::make(model.space(), pts, rec.period);
    if (!(loop.tag == guess.tag)) throw Error(ErrorKind::left_basin, "homotopy class changed");
    const DiscreteLoop cmp = resample_loop(loop, n);
    const double dist = loop_distance(cmp, guess);
    if (dist > opts.basin_bound)
        throw Error(ErrorKind::left_basin, "loop distance " + fmt_sci(dist));
    const PolishResult pol = newton_polish(model, loop, e);
    rec.loop = pol.loop;
    const ActionEval ev = evaluate_action(model, rec.loop, e);
    rec.discrete_action = ev.value;
    rec.discrete_grad_norm = pol.grad_norm;
    if (opts.spectrum) {
        SpectrumOptions so;
        so.grad_threshold = opts.critical_threshold;
        const ActionReport rep = action_hessian_spectrum(model, rec.loop, e, so);
        rec.index = rep.index;
        rec.nullity_total = rep.nullity_total;
        rec.index_fixed_period = rep.index_fixed_period;
        rec.nullity_fixed_period = rep.nullity_fixed_period;
        rec.spectrum_edge = rep.spectrum_edge;
        rec.is_waist = rec.index == 0 && rec.nullity_total == 1;
    }
    if (opts.stability)
        rec.stability = classify_orbit(model, rec.state0, rec.period, opts.stability_options, opts.integrator, S);
    return rec;
}

}  // namespace waistlab
