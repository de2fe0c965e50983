#pragma once

// Waist search by multistart minimization with a period floor, the
// elastic-string mountain pass between two loops, and the energy scan of
// minmax values along an orbit cylinder.

#include <optional>
#include <random>

#include "waistlab/critvals.hpp"
#include "waistlab/floquet.hpp"
#include "waistlab/parallel.hpp"

namespace waistlab {

/// Generator for stream `index` of a run seeded with `seed`.
inline std::mt19937_64 substream(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

// ---------------------------------------------------------------------------
// Waists

struct WaistOptions {
    double tau_min = 0.1;
    int seeds = 32;
    int budget = 3000;  ///< iterations per barrier stage
    int points = 48;
    Scope scope = Scope::all;
    std::optional<std::vector<int>> winding;  ///< restrict to one class (torus)
    int winding_box = 1;
    std::uint64_t seed = 1;
    int threads = 0;
    double rho = 1e-2;  ///< certificate sphere radius (loop distance)
    int certificate_samples = 64;
    std::vector<DiscreteLoop> extra_seeds;  ///< tried first, e.g. Aubry cycles
    RefineOptions refine;
};

struct WaistCandidate {
    int seed = 0;
    std::string status;  ///< "waist", "saddle", "collapsed" or an error text
    double action = std::numeric_limits<double>::quiet_NaN();
    double period = std::numeric_limits<double>::quiet_NaN();
    int index = -1;
    int nullity = -1;
    std::vector<int> winding;
};

struct NeighborhoodCertificate {
    double rho = 0.0;
    int samples = 0;
    double center = 0.0;      ///< S_e at the discrete waist
    double min_sample = 0.0;  ///< least S_e over the sampled sphere
    double margin = 0.0;      ///< min_sample - center
    bool passed = false;
};

struct WaistSearch {
    std::optional<OrbitRecord> orbit;
    NeighborhoodCertificate certificate;
    std::vector<WaistCandidate> candidates;
    // NotFound diagnostics
    std::optional<int> best_index;
    std::optional<double> best_action;
    int collapsed = 0;

    bool found() const { return orbit.has_value(); }
};

namespace detail {

inline double seed_period(const LagrangianModel& model, const Mat& pts, double e) {
    const ConfigSpace& space = model.space();
    const int n = static_cast<int>(pts.rows());
    double len = 0.0, mean_u = 0.0;
    for (int k = 0; k < n; ++k) {
        const Vec a = pts.row(k).transpose(), b = pts.row((k + 1) % n).transpose();
        len += space.is_torus() ? torus_displacement(a, b).norm() : (b - a).norm();
        mean_u += model.potential(a) / n;
    }
    return std::max(1e-3, len / std::sqrt(2 * std::max(0.05, e - mean_u)));
}

inline DiscreteLoop torus_seed(const LagrangianModel& model, double e, const std::vector<int>& w,
                               std::mt19937_64& rng, int n, double amp) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> g;
    const int d = model.space().dim;
    Vec q0(d), a1(d), b1(d);
    for (int i = 0; i < d; ++i) q0[i] = u(rng), a1[i] = g(rng), b1[i] = g(rng);
    Mat pts(n, d);
    for (int k = 0; k < n; ++k) {
        const double t = static_cast<double>(k) / n;
        for (int i = 0; i < d; ++i)
            pts(k, i) = q0[i] + w[i] * t +
                        amp * (a1[i] * std::cos(2 * std::numbers::pi * t) + b1[i] * std::sin(2 * std::numbers::pi * t));
    }
    return DiscreteLoop::make(model.space(), pts, seed_period(model, pts, e));
}

inline DiscreteLoop circle_seed(const LagrangianModel& model, double e, const Vec& center, const Vec& e1,
                                const Vec& e2, double radius, int orient, int n) {
    Mat pts(n, model.space().ambient_dim());
    for (int k = 0; k < n; ++k) {
        const double t = orient * 2 * std::numbers::pi * k / n;
        Vec p = center + radius * (std::cos(t) * e1 + std::sin(t) * e2);
        if (model.space().is_sphere()) p.normalize();
        pts.row(k) = p.transpose();
    }
    return DiscreteLoop::make(model.space(), pts, seed_period(model, pts, e));
}

}  // namespace detail

/// Seed loop number i of a waist search: random loops in the allowed
/// classes, circles at random centers and radii, near-straight lines, and
/// latitudes on the sphere. Deterministic in (opts.seed, i).
inline DiscreteLoop waist_seed(const LagrangianModel& model, double e, int i, const WaistOptions& opts) {
    auto rng = substream(opts.seed, static_cast<std::uint64_t>(i));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> g;
    const ConfigSpace& space = model.space();
    const int n = opts.points;
    const std::vector<double> radii{0.05, 0.15, 0.25, 0.35, 0.45};
    const int orient = u(rng) < 0.5 ? 1 : -1;
    if (space.is_torus()) {
        const int d = space.dim;
        std::vector<int> w(d, 0);
        const bool contractible_only = opts.scope == Scope::contractible;
        if (opts.winding) {
            w = *opts.winding;
        } else if (!contractible_only) {
            std::uniform_int_distribution<int> pick(-opts.winding_box, opts.winding_box);
            do {
                for (int& x : w) x = pick(rng);
            } while (std::all_of(w.begin(), w.end(), [](int x) { return x == 0; }) && i % 4 != 1);
        }
        const bool zero = std::all_of(w.begin(), w.end(), [](int x) { return x == 0; });
        if (zero && d >= 2 && (i % 4 == 1 || contractible_only)) {
            Vec c(d), e1 = Vec::Zero(d), e2 = Vec::Zero(d);
            for (int k = 0; k < d; ++k) c[k] = u(rng);
            e1[0] = 1.0;
            e2[1] = 1.0;
            return detail::circle_seed(model, e, c, e1, e2, radii[(i / 4) % radii.size()], orient, n);
        }
        return detail::torus_seed(model, e, w, rng, n, i % 4 == 2 ? 0.01 : 0.05);
    }
    Eigen::Vector3d axis = Eigen::Vector3d::UnitZ();
    if (i % 4 == 1) axis = Eigen::Vector3d(g(rng), g(rng), g(rng)).normalized();
    const double h = 0.9 * (2 * u(rng) - 1);
    const Eigen::Vector3d e1 = axis.unitOrthogonal(), e2 = axis.cross(e1);
    const double r = std::sqrt(1 - h * h);
    return detail::circle_seed(model, e, Vec(h * axis), Vec(r * e1), Vec(r * e2), 1.0, orient, n);
}

/// Samples S_e on a sphere of loop-distance radius rho around the loop,
/// transverse to the Hessian near-kernel (reparametrizations).
inline NeighborhoodCertificate neighborhood_certificate(const LagrangianModel& model, const DiscreteLoop& loop,
                                                       double e, double rho, int samples, std::uint64_t seed) {
    NeighborhoodCertificate cert;
    cert.rho = rho;
    const LoopChart chart(loop);
    const ActionReport rep = action_hessian_spectrum(model, loop, e);
    cert.center = rep.value;
    std::vector<Vec> kernel;
    for (Eigen::Index i = 0; i < rep.eigenvalues.size(); ++i)
        if (std::abs(rep.eigenvalues[i]) <= rep.tol_zero) kernel.push_back(rep.eigenvectors.col(i));
    auto rng = substream(seed, 0xCE57);
    std::normal_distribution<double> g;
    const int n = loop.size(), d = chart.point_dim();
    cert.min_sample = std::numeric_limits<double>::infinity();
    for (int s = 0; s < samples; ++s) {
        Vec xi(chart.dim());
        for (Eigen::Index k = 0; k < xi.size(); ++k) xi[k] = g(rng);
        for (const Vec& v : kernel) xi -= v.dot(xi) * v;
        double acc = 0.0;
        for (int k = 0; k < n; ++k) acc += xi.segment(k * d, d).squaredNorm();
        const double size = std::sqrt(acc / n) + std::abs(xi[chart.dim() - 1]);
        xi *= rho / size;
        try {
            cert.min_sample = std::min(cert.min_sample, action(model, chart.displace(xi), e));
            ++cert.samples;
        } catch (const Error&) {
        }
    }
    cert.margin = cert.min_sample - cert.center;
    cert.passed = cert.samples > 0 && cert.margin > 0;
    return cert;
}

/// Multistart minimization of S_e with the period floor tau_min; refined
/// minimizers that are waists (index 0, nullity 1) compete on action.
inline WaistSearch find_waist(const LagrangianModel& model, double e, const WaistOptions& opts = {}) {
    std::vector<DiscreteLoop> seeds = opts.extra_seeds;
    for (int i = 0; i < opts.seeds; ++i) seeds.push_back(waist_seed(model, e, i, opts));
    const int total = static_cast<int>(seeds.size());
    std::vector<WaistCandidate> cand(total);
    std::vector<std::optional<OrbitRecord>> orbits(total);
    MinimizeOptions mo;
    mo.tau_min = opts.tau_min;
    mo.max_iterations = opts.budget;
    parallel_for(
        total,
        [&](int i) {
            WaistCandidate& c = cand[i];
            c.seed = i;
            DiscreteLoop start = seeds[i];
            if (opts.tau_min > 0 && start.period() < 2 * opts.tau_min) start.log_period = std::log(2 * opts.tau_min);
            try {
                const MinimizeResult r = minimize_action(model, start, e, mo);
                c.action = r.value;
                c.period = r.loop.period();
                c.winding = r.loop.tag.winding;
                if (r.barrier_collapsed) {
                    c.status = r.converged ? "collapsed" : "budget exhausted";
                    return;
                }
                OrbitRecord rec = refine_orbit(model, r.loop, e, opts.refine);
                c.action = rec.action;
                c.period = rec.period;
                c.index = rec.index;
                c.nullity = rec.nullity_total;
                c.status = rec.is_waist ? "waist" : "saddle";
                orbits[i] = std::move(rec);
            } catch (const Error& err) {
                c.status = err.what();
            }
        },
        opts.threads);
    WaistSearch out;
    out.candidates = cand;
    int best = -1;
    for (int i = 0; i < total; ++i) {
        if (cand[i].status == "collapsed") ++out.collapsed;
        if (!orbits[i]) continue;
        if (!out.best_index || cand[i].index < *out.best_index) out.best_index = cand[i].index;
        if (!out.best_action || cand[i].action < *out.best_action) out.best_action = cand[i].action;
        if (cand[i].status == "waist" && (best < 0 || cand[i].action < cand[best].action)) best = i;
    }
    if (total > 0 && out.collapsed == total)
        throw Error(ErrorKind::barrier_collapse, "all " + std::to_string(total) + " starts collapsed to the period floor");
    if (best >= 0) {
        out.orbit = orbits[best];
        out.certificate =
            neighborhood_certificate(model, out.orbit->loop, e, opts.rho, opts.certificate_samples, opts.seed);
    }
    return out;
}

struct WaistThreshold {
    std::optional<double> value;  ///< largest scanned e with a waist found
    std::vector<std::pair<double, bool>> scan;
};

/// Upward scan from e_start in steps de until the first failure (or e_max).
inline WaistThreshold waist_threshold(const LagrangianModel& model, double e_start, double de, double e_max,
                                      const WaistOptions& opts = {}) {
    WaistThreshold out;
    for (double e = e_start; e <= e_max + 1e-12; e += de) {
        bool ok = false;
        try {
            ok = find_waist(model, e, opts).found();
        } catch (const Error&) {
        }
        out.scan.push_back({e, ok});
        if (!ok) break;
        out.value = e;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mountain pass

struct StringPath {
    std::vector<DiscreteLoop> knots;
    std::vector<double> values;

    int top() const {
        return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
    }
    double value() const { return values.empty() ? std::numeric_limits<double>::quiet_NaN() : values[top()]; }
};

struct MountainPassOptions {
    int knots = 16;
    int budget = 2000;      ///< relaxation sweeps
    int inner_steps = 2;    ///< descent steps per knot per sweep
    double grad_tol = 1e-4; ///< normal gradient at the top knot (preconditioned norm)
    double tear_bound = 0.5;
    double jitter = 0.0;    ///< random initial perturbation of interior knots
    std::uint64_t seed = 1;
    bool climbing = true;   ///< top knot climbs along the string after warm-up
    int warmup = 50;
    double climb_step = 1.0;
    bool refine = true;
    RefineOptions refine_options;
};

struct MountainPassResult {
    double s_value = 0.0;
    StringPath string;
    std::optional<OrbitRecord> critical;  ///< refined top knot (empty: unrefined)
    std::string refine_error;
    bool converged = false;
    bool budget_exhausted = false;
    int sweeps = 0;
    double top_gradient = 0.0;
    std::vector<double> trace;  ///< string value after each sweep
};

namespace detail {

/// Per-point ambient displacement from a to b plus delta log p, flattened.
inline Vec loop_difference(const DiscreteLoop& a, const DiscreteLoop& b) {
    const int n = a.size(), D = a.space.ambient_dim();
    Vec v(n * D + 1);
    for (int k = 0; k < n; ++k) {
        const Vec p = a.points.row(k).transpose(), q = b.points.row(k).transpose();
        v.segment(k * D, D) = a.space.is_torus() ? torus_displacement(p, q) : Vec(q - p);
    }
    v[n * D] = b.log_period - a.log_period;
    return v;
}

/// Pointwise interpolation between loops (torus lifted linear, sphere
/// normalized linear, log p linear).
inline DiscreteLoop interpolate_loops(const DiscreteLoop& a, const DiscreteLoop& b, double w) {
    const int n = a.size();
    Mat pts(n, a.space.ambient_dim());
    for (int k = 0; k < n; ++k) {
        const Vec p = a.points.row(k).transpose(), q = b.points.row(k).transpose();
        if (a.space.is_torus()) {
            pts.row(k) = (p + w * torus_displacement(p, q)).transpose();
        } else {
            const Vec m = (1 - w) * p + w * q;
            if (m.norm() < 1e-6) throw Error(ErrorKind::string_tore, "antipodal knot points");
            pts.row(k) = m.normalized().transpose();
        }
    }
    return DiscreteLoop::make(a.space, pts, std::exp((1 - w) * a.log_period + w * b.log_period));
}

/// Lifted interpolation used to build the initial string on the torus: the
/// second loop is lifted next to the first and interpolated in R^d.
inline DiscreteLoop lifted_interpolation(const DiscreteLoop& a, const DiscreteLoop& b, double w) {
    if (a.space.is_sphere()) return interpolate_loops(a, b, w);
    const int n = a.size(), d = a.space.dim;
    auto unwrap = [&](const DiscreteLoop& l) {
        Mat out(n, d);
        out.row(0) = l.points.row(0);
        for (int k = 1; k < n; ++k)
            out.row(k) = out.row(k - 1) +
                         torus_displacement(l.points.row(k - 1).transpose(), l.points.row(k).transpose()).transpose();
        return out;
    };
    const Mat la = unwrap(a);
    Mat lb = unwrap(b);
    const Vec shift = (lb.row(0) - la.row(0)).transpose();
    Vec offset(d);
    for (int i = 0; i < d; ++i) offset[i] = std::round(shift[i]);
    lb.rowwise() -= offset.transpose();
    const Mat pts = (1 - w) * la + w * lb;
    return DiscreteLoop::make(a.space, pts, std::exp((1 - w) * a.log_period + w * b.log_period));
}

/// Cyclic shift of b's points that best matches a (phase alignment).
inline DiscreteLoop align_phase(const DiscreteLoop& a, const DiscreteLoop& b) {
    const int n = a.size();
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int s = 0; s < n; ++s) {
        double acc = 0.0;
        for (int k = 0; k < n; ++k) {
            const double dd = point_distance(a.space, a.points.row(k).transpose(), b.point(k + s));
            acc += dd * dd;
        }
        if (acc < best_d) best_d = acc, best = s;
    }
    DiscreteLoop out = b;
    for (int k = 0; k < n; ++k) out.points.row(k) = b.point(k + best).transpose();
    return out;
}

/// H^1-type preconditioner for point gradients: (L + I) / dt with L the
/// periodic second difference.
class PointPreconditioner {
public:
    PointPreconditioner(int n, double dt) {
        Mat M = Mat::Identity(n, n) * (2.0 + 1.0);
        for (int k = 0; k < n; ++k) {
            M(k, (k + 1) % n) -= 1.0;
            M(k, (k + n - 1) % n) -= 1.0;
        }
        M /= dt;
        llt_.compute(M);
    }
    Mat solve(const Mat& g) const { return llt_.solve(g); }

private:
    Eigen::LLT<Mat> llt_;
};

}  // namespace detail

/// Elastic-string minmax between two loops in the same component.
inline MountainPassResult mountain_pass(const LagrangianModel& model, double e, const DiscreteLoop& loop_a,
                                        const DiscreteLoop& loop_b, const MountainPassOptions& opts = {}) {
    if (!(loop_a.tag == loop_b.tag))
        throw Error(ErrorKind::components_differ,
                    "endpoint classes " + to_string(loop_a.tag) + " and " + to_string(loop_b.tag));
    if (opts.knots < 16) throw Error(ErrorKind::precondition, "the string needs at least 16 knots");
    const int n = std::max(loop_a.size(), loop_b.size());
    const DiscreteLoop A = loop_a.size() == n ? loop_a : resample_loop(loop_a, n);
    const DiscreteLoop B = detail::align_phase(A, loop_b.size() == n ? loop_b : resample_loop(loop_b, n));
    if (!(B.tag == A.tag)) throw Error(ErrorKind::components_differ, "resampling changed a class");
    const int M = opts.knots;
    const int D = A.space.ambient_dim();

    MountainPassResult out;
    StringPath& str = out.string;
    auto rng = substream(opts.seed, 0x57A1);
    std::normal_distribution<double> g;
    for (int j = 0; j < M; ++j) {
        const double w = static_cast<double>(j) / (M - 1);
        DiscreteLoop knot = detail::lifted_interpolation(A, B, w);
        if (opts.jitter > 0 && j > 0 && j < M - 1) {
            Vec xi = Vec::Zero(n * D + 1);
            for (int mode = 1; mode <= 2; ++mode)
                for (int i = 0; i < D; ++i) {
                    const double c = g(rng), s = g(rng);
                    for (int k = 0; k < n; ++k) {
                        const double t = 2 * std::numbers::pi * mode * k / n;
                        xi[k * D + i] += opts.jitter * std::sin(std::numbers::pi * w) * (c * std::cos(t) + s * std::sin(t));
                    }
                }
            detail::project_tangent(knot, xi);
            knot = detail::step_loop(knot, xi);
        }
        str.knots.push_back(knot);
    }
    if (str.knots.front().tag.winding != A.tag.winding)
        throw Error(ErrorKind::components_differ, "initial string changed class");
    str.values.resize(M);
    for (int j = 0; j < M; ++j) str.values[j] = action(model, str.knots[j], e);

    std::vector<double> steps(M, 1.0);
    auto value_grad = [&](const DiscreteLoop& l, Vec& grad, double& kin) {
        const ActionEval ev = evaluate_action(model, l, e);
        grad = detail::flatten(ev.grad_points, ev.grad_log_period);
        detail::project_tangent(l, grad);
        kin = ev.value - l.period() * e;  // curvature scale for the log p direction
        return ev.value;
    };
    // Preconditioned direction -P g with P from the point Laplacian.
    auto precondition = [&](const DiscreteLoop& l, const Vec& grad, double kin) {
        const detail::PointPreconditioner P(n, l.period() / n);
        Mat gp(n, D);
        for (int k = 0; k < n; ++k) gp.row(k) = grad.segment(k * D, D).transpose();
        const Mat dp = P.solve(gp);
        Vec d(n * D + 1);
        for (int k = 0; k < n; ++k) d.segment(k * D, D) = dp.row(k).transpose();
        d[n * D] = grad[n * D] / (std::abs(kin) + l.period() * std::abs(e) + 1e-3);
        detail::project_tangent(l, d);
        return d;
    };
    auto tangent_at = [&](int j) {
        Vec t = detail::loop_difference(str.knots[j - 1], str.knots[j + 1]);
        const double nt = t.norm();
        return nt > 0 ? Vec(t / nt) : t;
    };

    int climber = -1;
    for (int sweep = 0; sweep < opts.budget; ++sweep) {
        out.sweeps = sweep + 1;
        const int top = str.top();
        if (opts.climbing && sweep >= opts.warmup && top > 0 && top < M - 1) climber = top;
        double top_grad = 0.0;
        for (int j = 1; j < M - 1; ++j) {
            for (int it = 0; it < opts.inner_steps; ++it) {
                DiscreteLoop& knot = str.knots[j];
                Vec grad;
                double kin = 0.0;
                const double f0 = value_grad(knot, grad, kin);
                const Vec t = tangent_at(j);
                Vec d = precondition(knot, grad, kin);
                if (j == climber) {
                    // Descend normal to the string, ascend along it.
                    d -= 2.0 * d.dot(t) * t;
                    const double gn = d.norm();
                    if (it == 0) top_grad = gn;
                    try {
                        knot = detail::step_loop(knot, -opts.climb_step * d);
                    } catch (const Error&) {
                    }
                    str.values[j] = action(model, knot, e);
                    continue;
                }
                d -= d.dot(t) * t;
                if (j == top && it == 0 && climber < 0) top_grad = d.norm();
                double h = steps[j];
                bool ok = false;
                for (int ls = 0; ls < 20; ++ls, h *= 0.5) {
                    try {
                        DiscreteLoop trial = detail::step_loop(knot, -h * d);
                        const double f1 = action(model, trial, e);
                        if (f1 <= f0 - 1e-4 * h * d.dot(grad)) {
                            knot = std::move(trial);
                            str.values[j] = f1;
                            ok = true;
                            break;
                        }
                    } catch (const Error&) {
                    }
                }
                steps[j] = ok ? std::min(1.0, 2.0 * h) : h;
            }
        }
        // Equal-arclength redistribution; the climbing knot stays put.
        std::vector<double> arc(M, 0.0);
        for (int j = 1; j < M; ++j) arc[j] = arc[j - 1] + aligned_loop_distance(str.knots[j - 1], str.knots[j]);
        std::vector<DiscreteLoop> fresh = str.knots;
        auto redistribute = [&](int lo, int hi) {
            for (int j = lo + 1; j < hi; ++j) {
                const double target = arc[lo] + (arc[hi] - arc[lo]) * (j - lo) / (hi - lo);
                int s = lo;
                while (s + 1 < hi && arc[s + 1] < target) ++s;
                const double span = arc[s + 1] - arc[s];
                const double w = span > 0 ? (target - arc[s]) / span : 0.0;
                fresh[j] = detail::interpolate_loops(str.knots[s], str.knots[s + 1], w);
            }
        };
        if (climber > 0) {
            redistribute(0, climber);
            redistribute(climber, M - 1);
        } else {
            redistribute(0, M - 1);
        }
        str.knots = std::move(fresh);
        for (int j = 1; j < M; ++j) {
            const double dist = aligned_loop_distance(str.knots[j - 1], str.knots[j]);
            if (dist > opts.tear_bound || !(str.knots[j].tag == A.tag))
                throw Error(ErrorKind::string_tore, "adjacent knot distance " + fmt_sci(dist));
        }
        for (int j = 1; j < M - 1; ++j) str.values[j] = action(model, str.knots[j], e);
        out.trace.push_back(str.value());
        out.top_gradient = top_grad;
        if (top_grad < opts.grad_tol && (climber > 0 || !opts.climbing)) {
            out.converged = true;
            break;
        }
    }
    out.budget_exhausted = !out.converged;
    out.s_value = str.value();
    if (opts.refine && out.converged) {
        try {
            out.critical = refine_orbit(model, str.knots[str.top()], e, opts.refine_options);
        } catch (const Error& err) {
            out.refine_error = err.what();
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Struwe scan

struct StruweRow {
    double e = 0.0;
    double s_value = 0.0;
    double waist_action = 0.0;   ///< S_e(gamma_e)
    double iterate_action = 0.0; ///< S_e(gamma_e^m)
    bool converged = false;
};

struct StruweScan {
    int m = 0;
    std::vector<StruweRow> rows;
    bool monotone = true;
};

/// s_e(m) for each energy: mountain pass between the cylinder waist gamma_e
/// and its iterate gamma_e^m; monotone flags non-decreasing values.
inline StruweScan struwe_scan(const LagrangianModel& model, int m, const std::vector<double>& energies,
                              const CylinderBranch& cylinder, const MountainPassOptions& opts = {},
                              double monotone_tol = 1e-6) {
    if (m < 2) throw Error(ErrorKind::degenerate_endpoints, "iterate order " + std::to_string(m));
    StruweScan out;
    out.m = m;
    for (double e : energies) {
        const CylinderSample* sample = nullptr;
        for (const auto& s : cylinder.samples)
            if (std::abs(s.e - e) <= 1e-9 * std::max(1.0, std::abs(e))) sample = &s;
        if (!sample) throw Error(ErrorKind::precondition, "cylinder has no sample at e = " + fmt_sci(e));
        const DiscreteLoop& gamma = sample->orbit.loop;
        const DiscreteLoop iterate = iterate_loop(gamma, m);
        const MountainPassResult r = mountain_pass(model, e, resample_loop(gamma, iterate.size()), iterate, opts);
        StruweRow row;
        row.e = e;
        row.s_value = r.s_value;
        row.waist_action = action(model, gamma, e);
        row.iterate_action = action(model, iterate, e);
        row.converged = r.converged;
        out.rows.push_back(row);
    }
    for (std::size_t i = 1; i < out.rows.size(); ++i)
        if (out.rows[i].s_value < out.rows[i - 1].s_value - monotone_tol) out.monotone = false;
    return out;
}

}  // namespace waistlab
