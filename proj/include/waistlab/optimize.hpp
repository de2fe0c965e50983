#pragma once

// Local minimization of the discrete action over (points, log p): L-BFGS
// with backtracking, a period-floor barrier, and a Newton polish that
// converges to nearby critical points of any index.

#include <deque>
#include <limits>

#include "waistlab/action.hpp"

namespace waistlab {

struct MinimizeOptions {
    int max_iterations = 3000;     ///< per barrier stage
    double grad_tol = 1e-7;        ///< final-stage gradient norm (chart coordinates)
    double stage_grad_tol = 1e-6;  ///< intermediate barrier stages
    int memory = 12;
    double tau_min = 0.0;          ///< period floor enforced by the barrier
    double mu_start = 1e-2;
    double mu_end = 1e-8;
    double mu_factor = 0.1;
    double max_point_step = 0.05;  ///< cap on per-point displacement in one step
    double max_log_period_step = 0.5;
    double min_log_period = std::log(1e-6);  ///< below this the loop is declared collapsed
    double stop_below = -std::numeric_limits<double>::infinity();  ///< early exit once S_e < this
    double collapse_margin = 1e-2;  ///< p < tau_min (1 + margin) counts as pinned to the floor
};

struct MinimizeResult {
    DiscreteLoop loop;
    double value = 0.0;      ///< S_e at the returned loop (barrier excluded)
    double grad_norm = 0.0;  ///< gradient norm of S_e (barrier excluded)
    int iterations = 0;
    bool converged = false;
    bool barrier_collapsed = false;  ///< period pinned against the floor (or shrunk to zero)
    bool early_exit = false;
    std::vector<double> trace;  ///< objective after each accepted step (barrier included)
};

namespace detail {

/// Flattened ambient tangent vector: N x D point block followed by log p.
inline Vec flatten(const Mat& points, double log_period) {
    Vec v(points.size() + 1);
    for (Eigen::Index k = 0; k < points.rows(); ++k)
        v.segment(k * points.cols(), points.cols()) = points.row(k).transpose();
    v[v.size() - 1] = log_period;
    return v;
}

/// Projects a flattened vector onto the tangent space of the loop (sphere) in place.
inline void project_tangent(const DiscreteLoop& loop, Vec& v) {
    if (!loop.space.is_sphere()) return;
    for (int k = 0; k < loop.size(); ++k) {
        const Eigen::Vector3d q = loop.points.row(k).transpose();
        auto seg = v.segment(3 * k, 3);
        seg -= seg.dot(q) * q;
    }
}

/// Moves the loop along a flattened tangent vector; throws on a tag change.
inline DiscreteLoop step_loop(const DiscreteLoop& loop, const Vec& s) {
    DiscreteLoop out = loop;
    const int D = loop.space.ambient_dim();
    for (int k = 0; k < loop.size(); ++k) {
        const Vec q = loop.points.row(k).transpose();
        const Vec dq = s.segment(k * D, D);
        out.points.row(k) = (loop.space.is_torus() ? torus_wrap(q + dq) : Vec(sphere_retract(q, dq))).transpose();
    }
    out.log_period += s[s.size() - 1];
    const HomotopyTag tag = winding_class(out.space, out.points);
    if (!(tag == loop.tag)) throw Error(ErrorKind::loop_too_coarse, "step changed the homotopy class");
    return out;
}

struct Objective {
    const LagrangianModel& model;
    double e;
    double tau_min;
    double mu;

    double barrier(double p) const {
        if (mu <= 0.0 || tau_min <= 0.0) return 0.0;
        return p > tau_min ? mu / (p - tau_min) : std::numeric_limits<double>::infinity();
    }

    /// Objective value; gradient (flattened, projected) if requested.
    double operator()(const DiscreteLoop& loop, Vec* grad, double* action_value = nullptr) const {
        const double p = loop.period();
        const double b = barrier(p);
        if (!std::isfinite(b)) return std::numeric_limits<double>::infinity();
        const ActionEval ev = evaluate_action(model, loop, e, grad != nullptr);
        if (action_value) *action_value = ev.value;
        if (grad) {
            double glp = ev.grad_log_period;
            if (mu > 0.0 && tau_min > 0.0) glp -= mu * p / ((p - tau_min) * (p - tau_min));
            *grad = flatten(ev.grad_points, glp);
        }
        return ev.value + b;
    }
};

}  // namespace detail

/// L-BFGS minimization of S_e (plus barrier) from the given loop.
inline MinimizeResult lbfgs_stage(const LagrangianModel& model, DiscreteLoop loop, double e, double mu,
                                  double grad_tol, const MinimizeOptions& opts, std::vector<double>& trace) {
    const detail::Objective obj{model, e, opts.tau_min, mu};
    const int D = loop.space.ambient_dim();
    Vec g;
    double action_value = 0.0;
    double f = obj(loop, &g, &action_value);
    if (!std::isfinite(f)) throw Error(ErrorKind::precondition, "initial loop violates the period floor");
    std::deque<std::pair<Vec, Vec>> memory;
    MinimizeResult r;
    int it = 0;
    for (; it < opts.max_iterations; ++it) {
        if (g.norm() < grad_tol) {
            r.converged = true;
            break;
        }
        if (action_value < opts.stop_below) {
            r.early_exit = true;
            break;
        }
        if (loop.log_period < opts.min_log_period) break;
        // Two-loop recursion, with stored pairs re-projected to the current tangent space.
        for (auto& [s, y] : memory) {
            detail::project_tangent(loop, s);
            detail::project_tangent(loop, y);
        }
        Vec d = -g;
        std::vector<double> alpha(memory.size());
        for (int i = static_cast<int>(memory.size()) - 1; i >= 0; --i) {
            const auto& [s, y] = memory[i];
            alpha[i] = s.dot(d) / s.dot(y);
            d -= alpha[i] * y;
        }
        if (!memory.empty()) {
            const auto& [s, y] = memory.back();
            d *= s.dot(y) / y.dot(y);
        } else {
            d *= 1e-2 / std::max(1e-12, g.cwiseAbs().maxCoeff());
        }
        for (std::size_t i = 0; i < memory.size(); ++i) {
            const auto& [s, y] = memory[i];
            const double beta = y.dot(d) / s.dot(y);
            d += (alpha[i] - beta) * s;
        }
        if (d.dot(g) >= 0.0) {
            memory.clear();
            d = -g * (1e-2 / std::max(1e-12, g.cwiseAbs().maxCoeff()));
        }
        double max_point = 0.0;
        for (int k = 0; k < loop.size(); ++k) max_point = std::max(max_point, d.segment(k * D, D).norm());
        double step = 1.0;
        if (max_point > opts.max_point_step) step = opts.max_point_step / max_point;
        if (std::abs(d[d.size() - 1]) * step > opts.max_log_period_step)
            step = opts.max_log_period_step / std::abs(d[d.size() - 1]);
        const double slope = g.dot(d);
        bool accepted = false;
        DiscreteLoop trial;
        Vec g_new;
        double f_new = 0.0, a_new = 0.0;
        for (int ls = 0; ls < 50; ++ls, step *= 0.5) {
            try {
                trial = detail::step_loop(loop, step * d);
                f_new = obj(trial, &g_new, &a_new);
            } catch (const Error&) {
                continue;
            }
            if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
        }
        if (!accepted) break;
        Vec s = step * d;
        detail::project_tangent(trial, s);
        Vec y = g_new - g;
        detail::project_tangent(trial, y);
        if (s.dot(y) > 1e-12 * s.norm() * y.norm()) {
            memory.emplace_back(std::move(s), std::move(y));
            if (static_cast<int>(memory.size()) > opts.memory) memory.pop_front();
        }
        loop = std::move(trial);
        f = f_new;
        g = std::move(g_new);
        action_value = a_new;
        trace.push_back(f);
    }
    r.iterations = it;
    r.loop = std::move(loop);
    r.value = action_value;
    return r;
}

/// Minimizes S_e with the barrier mu/(p - tau_min), annealing mu from
/// mu_start down to mu_end (single unconstrained stage when tau_min = 0).
inline MinimizeResult minimize_action(const LagrangianModel& model, const DiscreteLoop& start, double e,
                                      const MinimizeOptions& opts = {}) {
    std::vector<double> trace;
    MinimizeResult r;
    r.loop = start;
    int total = 0;
    if (opts.tau_min > 0.0) {
        for (double mu = opts.mu_start; mu >= opts.mu_end * (1 - 1e-12); mu *= opts.mu_factor) {
            const bool last = mu * opts.mu_factor < opts.mu_end * (1 - 1e-12);
            r = lbfgs_stage(model, r.loop, e, mu, last ? opts.grad_tol : opts.stage_grad_tol, opts, trace);
            total += r.iterations;
            if (r.early_exit) break;
        }
        r.barrier_collapsed = r.loop.period() < opts.tau_min * (1 + opts.collapse_margin);
    } else {
        r = lbfgs_stage(model, r.loop, e, 0.0, opts.grad_tol, opts, trace);
        total = r.iterations;
    }
    if (r.loop.log_period < opts.min_log_period) r.barrier_collapsed = true;
    r.iterations = total;
    r.trace = std::move(trace);
    const ActionEval ev = evaluate_action(model, r.loop, e);
    r.value = ev.value;
    r.grad_norm = LoopChart(r.loop).coordinates(ev.grad_points, ev.grad_log_period).norm();
    return r;
}

struct PolishResult {
    DiscreteLoop loop;
    double grad_norm = 0.0;
    int iterations = 0;
    bool converged = false;
};

/// Newton iteration on the gradient of S_e with the near-kernel of the
/// Hessian removed; converges to the nearby critical point of any index.
inline PolishResult newton_polish(const LagrangianModel& model, DiscreteLoop loop, double e,
                                  double tol = 1e-11, int max_iterations = 12) {
    PolishResult r;
    Vec g = LoopChart(loop).gradient(model, e);
    for (int it = 0; it < max_iterations; ++it) {
        r.iterations = it;
        if (g.norm() < tol) {
            r.converged = true;
            break;
        }
        const Mat H = action_hessian(model, loop, e);
        Eigen::SelfAdjointEigenSolver<Mat> es(H);
        const double cut = 1e-9 * es.eigenvalues().cwiseAbs().maxCoeff();
        Vec delta = Vec::Zero(H.rows());
        for (Eigen::Index i = 0; i < H.rows(); ++i) {
            const double l = es.eigenvalues()[i];
            if (std::abs(l) > cut) delta -= (es.eigenvectors().col(i).dot(g) / l) * es.eigenvectors().col(i);
        }
        bool improved = false;
        double t = 1.0;
        for (int ls = 0; ls < 12; ++ls, t *= 0.5) {
            try {
                DiscreteLoop trial = LoopChart(loop).displace(t * delta);
                const Vec gt = LoopChart(trial).gradient(model, e);
                if (gt.norm() < g.norm()) {
                    loop = std::move(trial);
                    g = gt;
                    improved = true;
                    break;
                }
            } catch (const Error&) {
            }
        }
        if (!improved) break;
    }
    r.grad_norm = g.norm();
    r.converged = r.converged || r.grad_norm < tol;
    r.loop = std::move(loop);
    return r;
}

}  // namespace waistlab
