#pragma once

// Nonlinear return maps, twist fits, orbit-cylinder continuation in energy,
// and the search for long periodic orbits near a twist-type fixed point.

#include <map>
#include <numeric>
#include <optional>

#include "waistlab/shooting.hpp"

namespace waistlab {

inline Monodromy monodromy(const LagrangianModel& model, const OrbitRecord& orbit,
                           const IntegratorOptions& opts = {}) {
    return monodromy(model, orbit.state0, orbit.period, opts, std::max(1, orbit.segments));
}

inline StabilityReport classify(const LagrangianModel& model, const OrbitRecord& orbit,
                                const StabilityOptions& opts = {}, const IntegratorOptions& iopts = {}) {
    return classify_orbit(model, orbit.state0, orbit.period, opts, iopts, std::max(1, orbit.segments));
}

using Point2 = Eigen::Vector2d;

/// A planar map with a fixed point at the origin, in coordinates where the
/// fixed point sits at 0.
struct PlanarMap {
    std::function<Point2(const Point2&)> map;
    double base_period = 0.0;  ///< flow time of one application at the fixed point
    /// Optional lift of a periodic point (coordinates, iterate count, angular
    /// winding) to a refined periodic orbit.
    std::function<std::optional<OrbitRecord>(const Point2&, int, int)> lift;

    Eigen::Matrix2d linearization(double h = 1e-6) const {
        Eigen::Matrix2d J;
        for (int j = 0; j < 2; ++j) {
            Point2 d = Point2::Zero();
            d[j] = h;
            J.col(j) = (map(d) - map(-d)) / (2 * h);
        }
        return J;
    }
};

/// Time-T map of a one-degree-of-freedom system around an equilibrium, in
/// coordinates (q - q*, v).
inline PlanarMap stroboscopic_map(const LagrangianModel& model, double q_star, double T,
                                  const IntegratorOptions& opts = {}) {
    if (model.dim() != 1) throw Error(ErrorKind::precondition, "stroboscopic map needs a 1-dof system");
    PlanarMap pm;
    pm.base_period = T;
    pm.map = [&model, q_star, T, opts](const Point2& x) {
        PhaseState s{Vec::Constant(1, q_star + x[0]), Vec::Constant(1, x[1])};
        const FlowResult r = el_flow(model, s, T, opts);
        return Point2(centered_mod1(r.lifted_q[0] - q_star), r.state.v[0]);
    };
    pm.lift = [&model, q_star, T, opts](const Point2& x, int n, int m) -> std::optional<OrbitRecord> {
        // The orbit through x closes after n strobe steps and m turns.
        const double period = n * T / m;
        const int N = 64;
        PhaseState s{Vec::Constant(1, q_star + x[0]), Vec::Constant(1, x[1])};
        const double e = model.energy(s);
        Mat pts(N, 1);
        for (int k = 0; k < N; ++k) {
            pts(k, 0) = s.q[0];
            s = el_flow(model, s, period / N, opts).state;
        }
        RefineOptions ro;
        ro.integrator = opts;
        ro.spectrum = false;
        try {
            return refine_orbit(model, DiscreteLoop::make(model.space(), pts, period), e, ro);
        } catch (const Error&) {
            return std::nullopt;
        }
    };
    return pm;
}

/// Transverse section through state0: affine hyperplane orthogonal to the
/// flow, intersected with the energy level. Coordinates are taken along an
/// orthonormal basis of ker(dE) orthogonal to the flow (intrinsic frame).
class SectionMap {
public:
    SectionMap(const LagrangianModel& model, const OrbitRecord& orbit, IntegratorOptions opts = {})
        : model_(model), orbit_(orbit), opts_(opts) {
        if (model.space().intrinsic_dim() != 2)
            throw Error(ErrorKind::precondition, "section maps need two degrees of freedom");
        const int D = model.dim();
        const PhaseState& s0 = orbit.state0;
        z0_.resize(2 * D);
        z0_ << s0.q, s0.v;
        const Mat frame = phase_frame(model.space(), s0);
        Vec f(2 * D), dE(2 * D);
        f << s0.v, model.acceleration(s0.q, s0.v);
        dE << Vec(model.fields(s0.q).grad_U), s0.v;
        flow_ = f;
        const Vec fi = frame.transpose() * f, ei = frame.transpose() * dE;
        Mat C(2, fi.size());
        C.row(0) = fi.normalized().transpose();
        C.row(1) = ei.normalized().transpose();
        Eigen::JacobiSVD<Mat> svd(C, Eigen::ComputeFullV);
        W_ = frame * svd.matrixV().rightCols(2);
        // In-hyperplane direction used to restore the energy: dE with its flow
        // component removed (dE is already orthogonal to the flow).
        n_ = dE - W_ * (W_.transpose() * dE);
        n_ -= f.dot(n_) / f.squaredNorm() * f;
    }

    /// Phase state on the section for section coordinates xi.
    PhaseState lift(const Point2& xi) const {
        const int D = model_.dim();
        Vec z = z0_ + W_ * xi;
        for (int it = 0; it < 30; ++it) {
            PhaseState s = constrain({z.head(D), z.segment(D, D)});
            const double res = model_.energy(s) - orbit_.energy;
            if (std::abs(res) < 1e-14) return s;
            Vec dE(2 * D);
            dE << Vec(model_.fields(s.q).grad_U), s.v;
            z = pack(s) - res / dE.dot(n_) * n_;
        }
        return constrain({z.head(D), z.segment(D, D)});
    }

    Point2 coordinates(const PhaseState& s) const {
        Vec z = pack(s) - z0_;
        if (model_.space().is_torus())
            for (int i = 0; i < model_.dim(); ++i) z[i] = centered_mod1(z[i]);
        return W_.transpose() * z;
    }

    /// First return to the section (crossing of the hyperplane in the flow
    /// direction, after at least half the base period).
    Point2 operator()(const Point2& xi) const { return coordinates(return_state(lift(xi)).first); }

    /// Returned state and return time.
    std::pair<PhaseState, double> return_state(const PhaseState& start) const {
        const int D = model_.dim();
        const ElSystem sys(model_, false, false);
        const ElIntegrator integ(sys, opts_);
        Vec y = sys.pack(start.q, start.v);
        const Vec q0 = z0_.head(D);
        auto side = [&](const Vec& yy) {
            Vec d(2 * D);
            Vec dq = yy.head(D) - q0;
            if (model_.space().is_torus())
                for (int i = 0; i < D; ++i) dq[i] = centered_mod1(dq[i]);
            d << dq, yy.segment(D, D) - z0_.segment(D, D);
            return flow_.dot(d);
        };
        const double t_min = 0.5 * orbit_.period;
        integ.integrate(y, t_min);
        double t_cross = 0.0;
        Vec y_prev, y_cross;
        integ.integrate(y, 2.0 * orbit_.period, nullptr, [&](double t0, const Vec& a, double t1, const Vec& b) {
            if (side(a) < 0 && side(b) >= 0) {
                // Secant refinement of the crossing inside [t0, t1].
                double lo = 0.0, hi = t1 - t0;
                double slo = side(a), shi = side(b);
                Vec ym = b;
                for (int k = 0; k < 60 && hi - lo > 1e-15; ++k) {
                    const double tm = lo + (hi - lo) * slo / (slo - shi);
                    ym = integ.advance(a, tm);
                    const double sm = side(ym);
                    if (std::abs(sm) < 1e-15) {
                        lo = hi = tm;
                        break;
                    }
                    if (sm < 0) lo = tm, slo = sm;
                    else hi = tm, shi = sm;
                }
                y_cross = ym;
                t_cross = t_min + t0 + 0.5 * (lo + hi);
                return true;
            }
            return false;
        });
        if (y_cross.size() == 0) throw Error(ErrorKind::tolerance_failure, "no return to the section");
        PhaseState s{y_cross.head(D), y_cross.segment(D, D)};
        if (model_.space().is_torus()) s.q = torus_wrap(s.q);
        return {s, t_cross};
    }

    PlanarMap planar() const {
        PlanarMap pm;
        pm.base_period = orbit_.period;
        pm.map = [this](const Point2& x) { return (*this)(x); };
        return pm;
    }

private:
    Vec pack(const PhaseState& s) const {
        Vec z(2 * model_.dim());
        z << s.q, s.v;
        return z;
    }
    PhaseState constrain(PhaseState s) const {
        if (model_.space().is_sphere()) {
            s.q.normalize();
            s.v -= s.v.dot(s.q) * s.q;
        }
        return s;
    }

    const LagrangianModel& model_;
    OrbitRecord orbit_;
    IntegratorOptions opts_;
    Vec z0_, flow_, n_;
    Mat W_;
};

struct TwistFit {
    double rotation = 0.0;  ///< a: rotation angle at the fixed point
    double twist = 0.0;     ///< b in angle(r) = a + 2 pi b r^2
    double twist_stderr = 0.0;
    double fit_radius = 0.0;
    double fit_residual = 0.0;  ///< RMS of the angle fit
    bool nonzero = false;       ///< |b| > 3 stderr
    Eigen::Matrix2d basis;      ///< normalized eigenbasis (columns), |det| = 1
    std::vector<double> radii, angles;
};

/// Mean rotation angle of the map on circles of radius {1/4,1/2,3/4,1} R in
/// the normalized eigenbasis of its linear part, fitted to a + 2 pi b r^2.
/// Angles are measured in the orientation in which the linear part rotates
/// by a in (0, pi).
inline TwistFit twist_fit(const PlanarMap& pm, double fit_radius, int samples_per_circle = 16) {
    const Eigen::Matrix2d P = pm.linearization();
    Eigen::EigenSolver<Eigen::Matrix2d> es(P);
    const auto lambda = es.eigenvalues();
    int k = lambda[0].imag() > 0 ? 0 : 1;
    if (std::abs(lambda[k].imag()) < 1e-9 || std::abs(std::abs(lambda[k]) - 1.0) > 1e-5)
        throw Error(ErrorKind::not_elliptic, "linear part is not a rotation");
    const Eigen::Vector2cd w = es.eigenvectors().col(k);
    Eigen::Matrix2d T;
    T.col(0) = w.real();
    T.col(1) = -w.imag();
    T /= std::sqrt(std::abs(T.determinant()));
    const Eigen::Matrix2d Tinv = T.inverse();
    const double a0 = std::arg(lambda[k]);
    TwistFit fit;
    fit.basis = T;
    fit.fit_radius = fit_radius;
    for (double frac : {0.25, 0.5, 0.75, 1.0}) {
        const double r = frac * fit_radius;
        double sum = 0.0;
        for (int j = 0; j < samples_per_circle; ++j) {
            const double phi = 2 * std::numbers::pi * j / samples_per_circle;
            const Point2 z(r * std::cos(phi), r * std::sin(phi));
            const Point2 img = Tinv * pm.map(T * z);
            const double ratio = img.norm() / r;
            if (!(ratio > 0.5 && ratio < 2.0))
                throw Error(ErrorKind::fit_ill_conditioned, "radius ratio " + fmt_sci(ratio));
            double d = std::atan2(img[1], img[0]) - phi;
            d = a0 + std::remainder(d - a0, 2 * std::numbers::pi);
            sum += d;
        }
        fit.radii.push_back(r);
        fit.angles.push_back(sum / samples_per_circle);
    }
    const int n = static_cast<int>(fit.radii.size());
    Mat X(n, 2);
    Vec y(n);
    for (int i = 0; i < n; ++i) {
        X(i, 0) = 1.0;
        X(i, 1) = 2 * std::numbers::pi * fit.radii[i] * fit.radii[i];
        y[i] = fit.angles[i];
    }
    const Vec beta = X.colPivHouseholderQr().solve(y);
    fit.rotation = beta[0];
    fit.twist = beta[1];
    const Vec res = y - X * beta;
    fit.fit_residual = std::sqrt(res.squaredNorm() / n);
    const double sigma2 = res.squaredNorm() / std::max(1, n - 2);
    const double sxx = (X.col(1).array() - X.col(1).mean()).square().sum();
    fit.twist_stderr = std::max(1e-9, std::sqrt(sigma2 / sxx));
    fit.nonzero = std::abs(fit.twist) > 3 * fit.twist_stderr;
    return fit;
}

struct CylinderSample {
    double e = 0.0;
    OrbitRecord orbit;
};

struct CylinderBranch {
    std::vector<CylinderSample> samples;  ///< ascending in e
    std::vector<double> d_action_d_e;     ///< NaN at the two end samples
    std::vector<double> identity_error;   ///< |dS/de - p| / p at interior samples, NaN at ends
    bool index_constant = true;
    bool class_constant = true;
    double max_loop_jump = 0.0;  ///< largest loop distance between neighbouring samples
};

struct ContinuationOptions {
    RefineOptions refine;
    bool require_nondegenerate = true;
    int max_halvings = 6;
};

/// Predictor for a new energy: same points, period rescaled as if the
/// kinetic energy changed uniformly along the loop.
inline DiscreteLoop predict_loop(const LagrangianModel& model, const OrbitRecord& from, double e_new) {
    DiscreteLoop loop = from.loop;
    double mean_u = 0.0;
    for (int k = 0; k < loop.size(); ++k) mean_u += model.potential(loop.point(k));
    mean_u /= loop.size();
    const double k_old = from.energy - mean_u, k_new = e_new - mean_u;
    if (k_old > 0 && k_new > 0) loop.log_period += 0.5 * std::log(k_old / k_new);
    return loop;
}

/// Three-point derivative on a nonuniform grid at the middle node.
inline double nonuniform_derivative(double x0, double y0, double x1, double y1, double x2, double y2) {
    const double h0 = x1 - x0, h1 = x2 - x1;
    return -h1 / (h0 * (h0 + h1)) * y0 + (h1 - h0) / (h0 * h1) * y1 + h0 / (h1 * (h0 + h1)) * y2;
}

/// Natural-parameter continuation of a periodic orbit in energy over
/// `steps` equally spaced energies in [e_lo, e_hi], starting from the orbit's
/// own energy and proceeding outward in both directions.
inline CylinderBranch continue_cylinder(const LagrangianModel& model, const OrbitRecord& orbit, double e_lo,
                                        double e_hi, int steps, const ContinuationOptions& opts = {}) {
    if (steps < 1 || !(e_hi >= e_lo)) throw Error(ErrorKind::precondition, "invalid energy range");
    const double one_tol = opts.refine.stability_options.one_tol;
    auto degenerate = [&](const OrbitRecord& r) {
        for (const Complex& l : r.stability.reduced_multipliers)
            if (std::abs(l - 1.0) <= one_tol) return true;
        return false;
    };
    if (opts.require_nondegenerate && degenerate(orbit))
        throw Error(ErrorKind::degeneracy_hit, "starting orbit is degenerate");
    std::vector<double> grid;
    for (int k = 0; k < steps; ++k) grid.push_back(steps == 1 ? e_lo : e_lo + (e_hi - e_lo) * k / (steps - 1));

    auto advance_to = [&](const OrbitRecord& from, double target) {
        OrbitRecord cur = from;
        double step = target - from.energy;
        int halvings = 0;
        while (std::abs(target - cur.energy) > 1e-15) {
            const double next = std::abs(step) >= std::abs(target - cur.energy) ? target : cur.energy + step;
            try {
                OrbitRecord r = refine_orbit(model, predict_loop(model, cur, next), next, opts.refine);
                if (opts.require_nondegenerate && degenerate(r))
                    throw Error(ErrorKind::degeneracy_hit, "reduced multiplier at 1 near e = " + fmt_sci(next));
                cur = std::move(r);
            } catch (const Error& err) {
                if (err.kind() == ErrorKind::degeneracy_hit) throw;
                if (++halvings > opts.max_halvings)
                    throw Error(ErrorKind::fold_suspected, "corrector failed near e = " + fmt_sci(next));
                step *= 0.5;
            }
        }
        return cur;
    };

    std::vector<CylinderSample> up, down;
    OrbitRecord cur = orbit;
    for (double e : grid)
        if (e >= orbit.energy) {
            cur = advance_to(cur, e);
            up.push_back({e, cur});
        }
    cur = orbit;
    for (auto it = grid.rbegin(); it != grid.rend(); ++it)
        if (*it < orbit.energy) {
            cur = advance_to(cur, *it);
            down.push_back({*it, cur});
        }
    CylinderBranch br;
    br.samples.assign(down.rbegin(), down.rend());
    br.samples.insert(br.samples.end(), up.begin(), up.end());
    const int n = static_cast<int>(br.samples.size());
    const double nan = std::numeric_limits<double>::quiet_NaN();
    br.d_action_d_e.assign(n, nan);
    br.identity_error.assign(n, nan);
    for (int i = 1; i + 1 < n; ++i) {
        const auto& a = br.samples[i - 1];
        const auto& b = br.samples[i];
        const auto& c = br.samples[i + 1];
        br.d_action_d_e[i] = nonuniform_derivative(a.e, a.orbit.action, b.e, b.orbit.action, c.e, c.orbit.action);
        br.identity_error[i] = std::abs(br.d_action_d_e[i] - b.orbit.period) / b.orbit.period;
    }
    for (int i = 0; i < n; ++i) {
        const auto& s = br.samples[i].orbit;
        if (s.index != orbit.index) br.index_constant = false;
        if (s.stability.cls != orbit.stability.cls) br.class_constant = false;
        if (i > 0) {
            const auto& prev = br.samples[i - 1].orbit.loop;
            if (prev.size() == s.loop.size())
                br.max_loop_jump = std::max(br.max_loop_jump, loop_distance(prev, s.loop));
        }
    }
    return br;
}

struct BirkhoffLewisOptions {
    double min_period_factor = 3.0;
    int max_denominator = 24;  ///< budget: largest iterate count tried
    int seeds_per_fraction = 2;
    double fit_radius = 0.0;   ///< 0: taken from the twist fit supplied
    int newton_iterations = 30;
    double tol = 1e-10;
    double min_radius_fraction = 0.1;  ///< reject points closer to the fixed point (normalized radius / R)
};

struct SubharmonicPoint {
    Point2 point;
    int iterates = 0;  ///< n: minimal period under the map
    int winding = 0;   ///< m: turns around the fixed point
    double return_period = 0.0;  ///< n * base period
    std::optional<OrbitRecord> orbit;
};

/// Periodic points of the map near the fixed point, seeded where the fitted
/// rotation number equals m/n, refined by Newton on F^n(x) - x with an SVD
/// pseudo-inverse. One point per rotation number is kept.
inline std::vector<SubharmonicPoint> birkhoff_lewis_probe(const PlanarMap& pm, const StabilityReport& stab,
                                                          const TwistFit& fit, const BirkhoffLewisOptions& opts = {}) {
    if (stab.cls != StabilityClass::elliptic && stab.cls != StabilityClass::quasi_elliptic)
        throw Error(ErrorKind::precondition, "orbit is not elliptic");
    if (!fit.nonzero) throw Error(ErrorKind::precondition, "twist not significantly nonzero");
    const double R = opts.fit_radius > 0 ? opts.fit_radius : fit.fit_radius;
    const double tau = 2 * std::numbers::pi;
    const double rho0 = fit.rotation / tau;
    const double rhoR = (fit.rotation + tau * fit.twist * R * R) / tau;
    const double lo = std::min(rho0, rhoR), hi = std::max(rho0, rhoR);
    auto iterate = [&](Point2 x, int n) {
        for (int i = 0; i < n; ++i) x = pm.map(x);
        return x;
    };
    std::vector<SubharmonicPoint> out;
    for (int n = 2; n <= opts.max_denominator; ++n) {
        if (n * pm.base_period <= opts.min_period_factor * pm.base_period) continue;
        for (int m = 1; m < n; ++m) {
            if (std::gcd(m, n) != 1) continue;
            const double rho = static_cast<double>(m) / n;
            if (!(rho > lo && rho < hi)) continue;
            const double r2 = (tau * rho - fit.rotation) / (tau * fit.twist);
            if (!(r2 > 0)) continue;
            const double r = std::sqrt(r2);
            for (int s = 0; s < opts.seeds_per_fraction; ++s) {
                const double phi = tau * s / std::max(1, opts.seeds_per_fraction) / 2;
                Point2 x = fit.basis * Point2(r * std::cos(phi), r * std::sin(phi));
                bool ok = false;
                try {
                    for (int it = 0; it < opts.newton_iterations; ++it) {
                        const Point2 g = iterate(x, n) - x;
                        if (g.norm() < opts.tol) {
                            ok = true;
                            break;
                        }
                        Eigen::Matrix2d J;
                        const double h = 1e-7;
                        for (int j = 0; j < 2; ++j) {
                            Point2 d = Point2::Zero();
                            d[j] = h;
                            J.col(j) = ((iterate(x + d, n) - x - d) - (iterate(x - d, n) - x + d)) / (2 * h);
                        }
                        Eigen::JacobiSVD<Eigen::Matrix2d> svd(J, Eigen::ComputeFullU | Eigen::ComputeFullV);
                        const auto sv = svd.singularValues();
                        Point2 step = Point2::Zero();
                        for (int i = 0; i < 2; ++i)
                            if (sv[i] > 1e-8 * sv[0])
                                step -= svd.matrixV().col(i) * (svd.matrixU().col(i).dot(g) / sv[i]);
                        x += step;
                    }
                } catch (const Error&) {
                    ok = false;
                }
                if (!ok || (fit.basis.inverse() * x).norm() < opts.min_radius_fraction * R) continue;
                bool minimal = true;
                Point2 y = x;
                for (int k = 1; k < n; ++k) {
                    y = pm.map(y);
                    if ((y - x).norm() < 1e-6) minimal = false;
                }
                if (!minimal) continue;
                SubharmonicPoint sp{x, n, m, n * pm.base_period, std::nullopt};
                if (pm.lift) sp.orbit = pm.lift(x, n, m);
                out.push_back(std::move(sp));
                break;
            }
        }
    }
    return out;
}

}  // namespace waistlab
