#pragma once

// Critical energy values: e0, the action potential on a configuration grid
// (free-time segment actions, shortest paths, negative cycles), the Mane
// critical value by bisection on two probes, and the projected Aubry set.

#include <array>
#include <deque>
#include <iomanip>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <queue>
#include <random>

#include "waistlab/optimize.hpp"
#include "waistlab/parallel.hpp"

namespace waistlab {

// ---------------------------------------------------------------------------
// Grids

/// Quasi-uniform points on S^2 (Fibonacci spiral), one per row.
inline Mat fibonacci_sphere(int count) {
    Mat pts(count, 3);
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < count; ++i) {
        const double z = 1.0 - (2.0 * i + 1.0) / count;
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = golden * i;
        pts.row(i) << r * std::cos(phi), r * std::sin(phi), z;
    }
    return pts;
}

/// Uniform n^d grid on the torus, row-major in the coordinates.
inline Mat torus_grid(int dim, int n) {
    int count = 1;
    for (int i = 0; i < dim; ++i) count *= n;
    Mat pts(count, dim);
    for (int idx = 0; idx < count; ++idx) {
        int rest = idx;
        for (int i = dim - 1; i >= 0; --i) {
            pts(idx, i) = static_cast<double>(rest % n) / n;
            rest /= n;
        }
    }
    return pts;
}

/// Configuration grid of a space: n^d torus grid, or n^2 sphere points.
inline Mat configuration_grid(const ConfigSpace& space, int n) {
    return space.is_torus() ? torus_grid(space.dim, n) : fibonacci_sphere(n * n);
}

// ---------------------------------------------------------------------------
// e0

struct E0Report {
    double value = 0.0;
    Vec argmax;
    double residual = 0.0;  ///< gradient norm of U at the refined maximizer
};

/// max U over a dense grid, refined by Newton ascent from the best node.
inline E0Report e0(const LagrangianModel& model) {
    const ConfigSpace& space = model.space();
    int n = 0;
    if (space.is_torus()) n = space.dim == 1 ? 512 : space.dim == 2 ? 160 : 32;
    else n = 140;
    const Mat grid = configuration_grid(space, n);
    Eigen::Index best = 0;
    double best_u = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < grid.rows(); ++i) {
        const double u = model.potential(grid.row(i).transpose());
        if (u > best_u) best_u = u, best = i;
    }
    Vec q = grid.row(best).transpose();
    auto riemannian = [&](const Vec& x, const FieldEval& f) {
        Vec g = f.grad_U;
        if (space.is_sphere()) g -= g.dot(x) * x;
        return g;
    };
    for (int it = 0; it < 50; ++it) {
        const FieldEval f = model.fields(q);
        const Vec g = riemannian(q, f);
        if (g.norm() < 1e-14) break;
        Vec step;
        if (space.is_torus()) {
            const Mat H = f.hess_U;
            Eigen::SelfAdjointEigenSolver<Mat> es(H);
            step = es.eigenvalues().maxCoeff() < 0 ? Vec(-H.ldlt().solve(g)) : Vec(1e-3 * g);
        } else {
            step = 1e-2 * g;
        }
        Vec trial = space.is_torus() ? Vec(q + step) : Vec(sphere_retract(q, step));
        if (model.potential(trial) + 1e-15 < model.potential(q)) break;
        q = trial;
    }
    E0Report r;
    if (space.is_torus()) q = torus_wrap(q);
    r.argmax = q;
    r.value = model.potential(q);
    r.residual = riemannian(q, model.fields(q)).norm();
    return r;
}

// ---------------------------------------------------------------------------
// Segment action

struct SegmentOptions {
    double r_seg = 0.0;    ///< neighborhood radius; 0 selects 0.36 (torus) or 0.8 (sphere)
    int interior = 2;      ///< interior points K, at most 4
    double tau_min = 1e-4;
    double tau_max = 1e3;
    int max_iterations = 200;
    double grad_tol = 1e-9;

    double radius(const ConfigSpace& space) const {
        if (r_seg > 0) return r_seg;
        return space.is_torus() ? 0.36 : 0.8;
    }
};

struct SegmentResult {
    double value = 0.0;
    double duration = 0.0;
    Mat path;  ///< K + 2 points, lifted on the torus (first = q0)
};

namespace detail {

/// Dense BFGS with Armijo backtracking for small smooth problems.
template <class F>
double small_bfgs(const F& f, Vec& x, int max_iterations, double grad_tol) {
    const Eigen::Index n = x.size();
    Vec g(n);
    double fx = f(x, &g);
    Mat Hinv = Mat::Identity(n, n);
    bool scaled = false;
    for (int it = 0; it < max_iterations && g.norm() > grad_tol; ++it) {
        Vec d = -Hinv * g;
        if (d.dot(g) >= 0) {
            Hinv.setIdentity();
            d = -g;
        }
        double t = 1.0;
        Vec xt, gt(n);
        double ft = 0.0;
        bool ok = false;
        for (int ls = 0; ls < 40; ++ls, t *= 0.5) {
            xt = x + t * d;
            ft = f(xt, &gt);
            if (std::isfinite(ft) && ft <= fx + 1e-4 * t * d.dot(g)) {
                ok = true;
                break;
            }
        }
        if (!ok) break;
        const bool stalled = fx - ft <= 1e-15 * (1.0 + std::abs(fx));
        const Vec s = xt - x, y = gt - g;
        const double sy = s.dot(y);
        if (sy > 1e-14 * s.norm() * y.norm()) {
            if (!scaled) {
                Hinv *= sy / y.squaredNorm();
                scaled = true;
            }
            const double rho = 1.0 / sy;
            const Mat I = Mat::Identity(n, n);
            Hinv = (I - rho * s * y.transpose()) * Hinv * (I - rho * y * s.transpose()) + rho * s * s.transpose();
        }
        x = xt;
        g = gt;
        fx = ft;
        if (stalled) break;
    }
    return fx;
}

inline double sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }

}  // namespace detail

/// Minimal discrete action over curves from q0 to q1 with K interior points
/// and free duration in [tau_min, tau_max], midpoint rule on K + 1 equal
/// time steps. Starts from the straight chord with its optimal time.
inline SegmentResult segment_action(const LagrangianModel& model, const Vec& q0, const Vec& q1, double e,
                                    const SegmentOptions& opts = {}) {
    const ConfigSpace& space = model.space();
    const int D = space.ambient_dim();
    const int K = std::clamp(opts.interior, 0, 4);
    const int steps = K + 1;
    Vec end = q1;
    double dist = 0.0;
    if (space.is_torus()) {
        const Vec d = torus_displacement(q0, q1);
        end = q0 + d;
        dist = d.norm();
    } else {
        dist = std::acos(std::clamp(q0.dot(q1), -1.0, 1.0));
    }
    if (dist > opts.radius(space)) throw Error(ErrorKind::endpoints_too_far, "distance " + fmt_sci(dist));
    SegmentResult out;
    if (dist < 1e-14) {
        // Constant curve: zero duration unless staying pays.
        const double u = model.potential(q0);
        out.duration = e >= u ? 0.0 : opts.tau_max;
        out.value = std::min(0.0, opts.tau_max * (e - u));
        out.path = Mat(2, D);
        out.path.row(0) = q0.transpose();
        out.path.row(1) = q0.transpose();
        return out;
    }
    const double lmin = std::log(opts.tau_min), lmax = std::log(opts.tau_max);

    auto point_at = [&](double s) -> Vec {
        if (space.is_torus()) return q0 + s * (end - q0);
        return ((1 - s) * q0 + s * q1).normalized();
    };
    // Objective over interior (ambient) coordinates and the duration parameter.
    auto objective = [&](const Vec& x, Vec* grad) -> double {
        const double sg = detail::sigmoid(x[K * D]);
        const double logtau = lmin + (lmax - lmin) * sg;
        const double tau = std::exp(logtau);
        const double dt = tau / steps;
        if (grad) grad->setZero(x.size());
        double sum = 0.0, dS_ddt = 0.0;
        SVec prev = q0;
        SVec prev_raw = q0;
        for (int j = 0; j < steps; ++j) {
            SVec raw, cur;
            if (j == K) {
                cur = end;
                raw = cur;
            } else {
                raw = x.segment(j * D, D);
                if (space.is_sphere()) {
                    const double rn = raw.norm();
                    if (rn < 1e-8) return std::numeric_limits<double>::infinity();
                    cur = raw / rn;
                } else {
                    cur = raw;
                }
            }
            SVec c = cur - prev, m;
            double snorm = 1.0;
            if (space.is_torus()) {
                m = prev + 0.5 * c;
            } else {
                if (c.norm() >= 1.0) return std::numeric_limits<double>::infinity();
                const SVec s = prev + cur;
                snorm = s.norm();
                m = s / snorm;
            }
            const FieldEval f = model.fields(m);
            const double c2 = c.squaredNorm();
            sum += c2 / (2 * dt) + f.A.dot(c) - f.U * dt;
            dS_ddt += -c2 / (2 * dt * dt) - f.U;
            if (grad) {
                const SVec dT_dc = c / dt + f.A;
                SVec dT_dm = f.DA * c - f.grad_U * dt;
                if (space.is_torus()) dT_dm *= 0.5;
                else dT_dm = (dT_dm - m * m.dot(dT_dm)) / snorm;
                const SVec g_prev = dT_dm - dT_dc, g_cur = dT_dm + dT_dc;
                auto add = [&](int idx, const SVec& raw_pt, const SVec& unit, const SVec& g) {
                    if (idx < 0 || idx >= K) return;
                    SVec gg = g;
                    if (space.is_sphere()) gg = (g - unit * unit.dot(g)) / raw_pt.norm();
                    grad->segment(idx * D, D) += Vec(gg);
                };
                add(j - 1, prev_raw, prev, g_prev);
                add(j, raw, cur, g_cur);
            }
            prev = cur;
            prev_raw = raw;
        }
        const double value = sum + e * tau;
        if (grad) {
            // d/du of log tau, then chain through tau.
            const double dlog_du = (lmax - lmin) * sg * (1 - sg);
            (*grad)[K * D] = (dS_ddt / steps + e) * tau * dlog_du;
        }
        return value;
    };

    Vec x(K * D + 1);
    for (int j = 0; j < K; ++j) x.segment(j * D, D) = point_at(static_cast<double>(j + 1) / steps);
    const Vec mid = point_at(0.5);
    const double kin = e - model.potential(mid);
    const double tau0 = kin > 0 ? std::clamp(dist / std::sqrt(2 * kin), opts.tau_min * 1.5, opts.tau_max / 1.5)
                                : opts.tau_max / 1.5;
    const double s0 = (std::log(tau0) - lmin) / (lmax - lmin);
    x[K * D] = std::log(s0 / (1 - s0));
    out.value = detail::small_bfgs(objective, x, opts.max_iterations, opts.grad_tol);
    out.duration = std::exp(lmin + (lmax - lmin) * detail::sigmoid(x[K * D]));
    out.path.resize(K + 2, D);
    out.path.row(0) = q0.transpose();
    for (int j = 0; j < K; ++j) {
        Vec p = x.segment(j * D, D);
        if (space.is_sphere()) p.normalize();
        out.path.row(j + 1) = p.transpose();
    }
    out.path.row(K + 1) = end.transpose();
    return out;
}

// ---------------------------------------------------------------------------
// Action graph

struct GraphEdge {
    int to = 0;
    double weight = 0.0;
    std::array<double, 3> shift{};  ///< lifted displacement (torus), zero on the sphere
};

struct ActionGraph {
    ConfigSpace space;
    Mat nodes;
    double energy = 0.0;
    std::vector<std::vector<GraphEdge>> out;

    int size() const { return static_cast<int>(nodes.rows()); }
    std::size_t edge_count() const {
        std::size_t c = 0;
        for (const auto& o : out) c += o.size();
        return c;
    }
};

struct GraphOptions {
    SegmentOptions segment;
    int sphere_neighbors = 40;
    bool self_loops = true;  ///< constant curves q -> q
    int threads = 0;
};

/// Neighbor lists: torus offsets with max |o_i| <= 2 (second-nearest), sphere
/// k nearest neighbors (symmetrized).
inline std::vector<std::vector<int>> grid_neighbors(const ConfigSpace& space, const Mat& nodes, int n,
                                                   int sphere_neighbors) {
    const int N = static_cast<int>(nodes.rows());
    std::vector<std::vector<int>> nb(N);
    if (space.is_torus()) {
        const int d = space.dim;
        std::vector<std::vector<int>> offsets;
        std::vector<int> o(d, -2);
        while (true) {
            if (std::any_of(o.begin(), o.end(), [](int v) { return v != 0; })) offsets.push_back(o);
            int i = 0;
            while (i < d && ++o[i] > 2) o[i++] = -2;
            if (i == d) break;
        }
        for (int idx = 0; idx < N; ++idx) {
            std::vector<int> coord(d);
            int rest = idx;
            for (int i = d - 1; i >= 0; --i) coord[i] = rest % n, rest /= n;
            for (const auto& off : offsets) {
                int j = 0;
                for (int i = 0; i < d; ++i) j = j * n + ((coord[i] + off[i]) % n + n) % n;
                if (j != idx) nb[idx].push_back(j);
            }
            std::sort(nb[idx].begin(), nb[idx].end());
            nb[idx].erase(std::unique(nb[idx].begin(), nb[idx].end()), nb[idx].end());
        }
    } else {
        for (int i = 0; i < N; ++i) {
            std::vector<std::pair<double, int>> dist;
            dist.reserve(N);
            for (int j = 0; j < N; ++j)
                if (j != i) dist.push_back({(nodes.row(i) - nodes.row(j)).squaredNorm(), j});
            const int k = std::min<int>(sphere_neighbors, static_cast<int>(dist.size()));
            std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
            for (int a = 0; a < k; ++a) {
                nb[i].push_back(dist[a].second);
                nb[dist[a].second].push_back(i);
            }
        }
        for (auto& v : nb) {
            std::sort(v.begin(), v.end());
            v.erase(std::unique(v.begin(), v.end()), v.end());
        }
    }
    return nb;
}

/// Directed graph of segment actions between grid neighbors at energy e.
inline ActionGraph build_action_graph(const LagrangianModel& model, double e, int n, const GraphOptions& opts = {}) {
    if (n < 8) throw Error(ErrorKind::precondition, "grid size n must be at least 8");
    ActionGraph g;
    g.space = model.space();
    g.energy = e;
    g.nodes = configuration_grid(g.space, n);
    const auto nb = grid_neighbors(g.space, g.nodes, n, opts.sphere_neighbors);
    const int N = g.size();
    const double r_seg = opts.segment.radius(g.space);
    for (int i = 0; i < N; ++i)
        for (int j : nb[i]) {
            const Vec a = g.nodes.row(i).transpose(), b = g.nodes.row(j).transpose();
            const double dist = g.space.is_torus() ? torus_displacement(a, b).norm()
                                                   : std::acos(std::clamp(a.dot(b), -1.0, 1.0));
            if (dist > r_seg) throw Error(ErrorKind::grid_too_coarse, "edge length " + fmt_sci(dist));
        }
    g.out.assign(N, {});
    parallel_for(
        N,
        [&](int i) {
            const Vec a = g.nodes.row(i).transpose();
            auto& edges = g.out[i];
            if (opts.self_loops) {
                GraphEdge self;
                self.to = i;
                self.weight = segment_action(model, a, a, e, opts.segment).value;
                if (self.weight < 0) edges.push_back(self);
            }
            for (int j : nb[i]) {
                const Vec b = g.nodes.row(j).transpose();
                GraphEdge edge;
                edge.to = j;
                edge.weight = segment_action(model, a, b, e, opts.segment).value;
                if (g.space.is_torus()) {
                    const Vec d = torus_displacement(a, b);
                    for (int k = 0; k < d.size(); ++k) edge.shift[k] = d[k];
                }
                edges.push_back(edge);
            }
        },
        opts.threads);
    return g;
}

struct CycleInfo {
    bool found = false;
    std::vector<int> nodes;  ///< cycle in traversal order
    double weight = 0.0;     ///< untilted weight
    std::vector<int> winding;
};

namespace detail {

inline double tilted_weight(const GraphEdge& e, const Vec& xi) {
    double w = e.weight;
    for (Eigen::Index k = 0; k < xi.size(); ++k) w -= xi[k] * e.shift[k];
    return w;
}

}  // namespace detail

/// Queue-based Bellman-Ford from a virtual source on the weights
/// w - xi . shift. Returns a negative cycle if one exists; otherwise the
/// shortest-path potentials are left in `potential`.
inline CycleInfo find_negative_cycle(const ActionGraph& g, const Vec& xi = Vec(), Vec* potential = nullptr) {
    const int N = g.size();
    const int d = g.space.is_torus() ? g.space.dim : 0;
    const Vec tilt = xi.size() == 0 ? Vec::Zero(d) : xi;
    std::vector<double> dist(N, 0.0);
    std::vector<int> pred(N, -1), pred_edge(N, -1);
    std::vector<char> queued(N, 1);
    std::deque<int> queue;
    for (int i = 0; i < N; ++i) queue.push_back(i);
    std::vector<int> stamp(N, -1);
    long relaxations = 0;
    CycleInfo info;

    auto cycle_in_predecessors = [&]() -> int {
        std::fill(stamp.begin(), stamp.end(), -1);
        for (int s = 0; s < N; ++s) {
            int v = s;
            while (v != -1 && stamp[v] == -1) {
                stamp[v] = s;
                v = pred[v];
            }
            if (v != -1 && stamp[v] == s) return v;
        }
        return -1;
    };
    auto extract = [&](int v) {
        std::vector<int> cyc{v};
        for (int u = pred[v]; u != v; u = pred[u]) cyc.push_back(u);
        std::reverse(cyc.begin(), cyc.end());
        info.found = true;
        info.nodes = cyc;
        Vec wind = Vec::Zero(d);
        double w = 0.0;
        for (std::size_t k = 0; k < cyc.size(); ++k) {
            const int to = cyc[(k + 1) % cyc.size()];
            const GraphEdge& e = g.out[pred[to]][pred_edge[to]];
            w += e.weight;
            for (int i = 0; i < d; ++i) wind[i] += e.shift[i];
        }
        info.weight = w;
        info.winding.clear();
        for (int i = 0; i < d; ++i) info.winding.push_back(static_cast<int>(std::lround(wind[i])));
    };

    while (!queue.empty()) {
        const int u = queue.front();
        queue.pop_front();
        queued[u] = 0;
        for (std::size_t k = 0; k < g.out[u].size(); ++k) {
            const GraphEdge& e = g.out[u][k];
            const double nd = dist[u] + detail::tilted_weight(e, tilt);
            if (nd < dist[e.to] - 1e-13 * (1.0 + std::abs(dist[e.to]))) {
                dist[e.to] = nd;
                pred[e.to] = u;
                pred_edge[e.to] = static_cast<int>(k);
                if (++relaxations % N == 0) {
                    const int v = cycle_in_predecessors();
                    if (v != -1) {
                        extract(v);
                        return info;
                    }
                }
                if (!queued[e.to]) {
                    queued[e.to] = 1;
                    queue.push_back(e.to);
                }
            }
        }
    }
    const int v = cycle_in_predecessors();
    if (v != -1) {
        extract(v);
        return info;
    }
    if (potential) *potential = Eigen::Map<const Vec>(dist.data(), N);
    return info;
}

namespace detail {

/// Chebyshev center of {x : a_i . x <= b_i, |x_j| <= box} by vertex
/// enumeration (small dimension only). Returns the radius (< 0 if empty).
inline double chebyshev_center(const std::vector<Vec>& A, const std::vector<double>& b, double box, Vec& center) {
    const int d = static_cast<int>(center.size());
    std::vector<Vec> rows = A;
    std::vector<double> rhs = b;
    for (int j = 0; j < d; ++j) {
        Vec e = Vec::Zero(d);
        e[j] = 1.0;
        rows.push_back(e);
        rhs.push_back(box);
        rows.push_back(-e);
        rhs.push_back(box);
    }
    const int m = static_cast<int>(rows.size());
    double best = -1.0;
    std::vector<int> pick(d + 1);
    std::function<void(int, int)> rec = [&](int start, int depth) {
        if (depth == d + 1) {
            Mat M(d + 1, d + 1);
            Vec r(d + 1);
            for (int i = 0; i <= d; ++i) {
                M.block(i, 0, 1, d) = rows[pick[i]].transpose();
                M(i, d) = rows[pick[i]].norm();
                r[i] = rhs[pick[i]];
            }
            Eigen::FullPivLU<Mat> lu(M);
            if (!lu.isInvertible()) return;
            const Vec sol = lu.solve(r);
            const double rad = sol[d];
            if (rad <= best) return;
            for (int i = 0; i < m; ++i)
                if (rows[i].dot(sol.head(d)) + rad * rows[i].norm() > rhs[i] + 1e-12) return;
            best = rad;
            center = sol.head(d);
            return;
        }
        for (int i = start; i < m; ++i) {
            pick[depth] = i;
            rec(i + 1, depth + 1);
        }
    };
    rec(0, 0);
    return best;
}

}  // namespace detail

struct ContractibleProbe {
    bool negative = false;
    CycleInfo witness;  ///< zero-winding negative cycle, when one was met directly
    Vec xi;             ///< certificate: tilt with no negative cycle (when not negative)
    int cuts = 0;
};

/// Whether the graph carries a negative closed walk of zero winding. Uses
/// the duality: no such walk iff some tilt xi makes w - xi . shift free of
/// negative cycles. Cutting planes from cycles of nonzero winding shrink
/// the feasible tilt region; its Chebyshev center is the next tilt.
inline ContractibleProbe contractible_negative_cycle(const ActionGraph& g, int max_cuts = 100, double box = 10.0) {
    ContractibleProbe out;
    if (g.space.is_sphere()) {
        out.witness = find_negative_cycle(g);
        out.negative = out.witness.found;
        return out;
    }
    const int d = g.space.dim;
    Vec xi = Vec::Zero(d);
    std::vector<Vec> A;
    std::vector<double> b;
    for (int it = 0; it < max_cuts; ++it) {
        const CycleInfo c = find_negative_cycle(g, xi);
        if (!c.found) {
            out.xi = xi;
            return out;
        }
        const bool zero = std::all_of(c.winding.begin(), c.winding.end(), [](int w) { return w == 0; });
        if (zero) {
            out.negative = true;
            out.witness = c;
            return out;
        }
        Vec a(d);
        for (int i = 0; i < d; ++i) a[i] = c.winding[i];
        A.push_back(a);
        b.push_back(c.weight);
        ++out.cuts;
        if (d == 1) {
            double lo = -box, hi = box;
            for (std::size_t i = 0; i < A.size(); ++i) {
                if (A[i][0] > 0) hi = std::min(hi, b[i] / A[i][0]);
                else lo = std::max(lo, b[i] / A[i][0]);
            }
            if (hi < lo) {
                out.negative = true;
                return out;
            }
            xi[0] = 0.5 * (lo + hi);
        } else {
            const double r = detail::chebyshev_center(A, b, box, xi);
            if (r < 0) {
                out.negative = true;
                return out;
            }
        }
    }
    // Undecided within the cut budget: the feasible tilt set is (numerically) empty.
    out.negative = true;
    return out;
}

// ---------------------------------------------------------------------------
// Action potential

struct PotentialGrid {
    ConfigSpace space;
    Mat nodes;
    double energy = 0.0;
    bool negative_cycle = false;
    CycleInfo cycle;  ///< a negative cycle when flagged
    Mat phi;          ///< phi(a, b) = Phi_e(node a, node b); empty when flagged
    Vec cycle_min;    ///< least weight of a nontrivial cycle through each node

    int size() const { return static_cast<int>(nodes.rows()); }

    /// Index of the grid node nearest to q.
    int nearest(const Vec& q) const {
        int best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (int i = 0; i < size(); ++i) {
            const double d = point_distance(space, nodes.row(i).transpose(), q);
            if (d < bd) bd = d, best = i;
        }
        return best;
    }

    /// CSV: node coordinates followed by the row of Phi values.
    void write_csv(std::ostream& os) const {
        const int D = static_cast<int>(nodes.cols());
        for (int i = 0; i < D; ++i) os << "q" << i << ",";
        os << "phi_diag";
        for (int j = 0; j < phi.cols(); ++j) os << ",phi_" << j;
        os << "\n" << std::setprecision(17);
        for (int i = 0; i < size(); ++i) {
            for (int k = 0; k < D; ++k) os << nodes(i, k) << ",";
            os << (phi.size() ? phi(i, i) : std::numeric_limits<double>::quiet_NaN());
            for (int j = 0; j < phi.cols(); ++j) os << "," << phi(i, j);
            os << "\n";
        }
    }
};

struct PotentialOptions {
    GraphOptions graph;
    int max_table_nodes = 4096;
};

namespace detail {

/// Dijkstra on reduced weights from one source; returns distances in the
/// original weights and the predecessor array.
inline void dijkstra(const ActionGraph& g, const Vec& h, int source, std::vector<double>& dist, std::vector<int>& pred) {
    const int N = g.size();
    dist.assign(N, std::numeric_limits<double>::infinity());
    pred.assign(N, -1);
    using Item = std::pair<double, int>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    dist[source] = 0.0;
    pq.push({0.0, source});
    std::vector<double> reduced(N, std::numeric_limits<double>::infinity());
    reduced[source] = 0.0;
    while (!pq.empty()) {
        const auto [du, u] = pq.top();
        pq.pop();
        if (du > reduced[u]) continue;
        for (const GraphEdge& e : g.out[u]) {
            if (e.to == u) continue;
            const double w = std::max(0.0, e.weight + h[u] - h[e.to]);
            if (du + w < reduced[e.to]) {
                reduced[e.to] = du + w;
                pred[e.to] = u;
                pq.push({reduced[e.to], e.to});
            }
        }
    }
    for (int v = 0; v < N; ++v)
        if (std::isfinite(reduced[v])) dist[v] = reduced[v] - h[source] + h[v];
}

}  // namespace detail

/// Phi_e on the grid from shortest paths (Johnson reweighting), or the
/// negative-cycle flag.
inline PotentialGrid action_potential_from_graph(const ActionGraph& g, const PotentialOptions& opts = {}) {
    PotentialGrid pg;
    pg.space = g.space;
    pg.nodes = g.nodes;
    pg.energy = g.energy;
    Vec h;
    pg.cycle = find_negative_cycle(g, Vec(), &h);
    if (pg.cycle.found) {
        pg.negative_cycle = true;
        return pg;
    }
    const int N = g.size();
    if (N > opts.max_table_nodes) throw Error(ErrorKind::precondition, "grid too large for the potential table");
    pg.phi.resize(N, N);
    pg.cycle_min = Vec::Constant(N, std::numeric_limits<double>::infinity());
    // Incoming edges for the diagonal.
    std::vector<std::vector<std::pair<int, double>>> in(N);
    for (int u = 0; u < N; ++u)
        for (const GraphEdge& e : g.out[u])
            if (e.to != u) in[e.to].push_back({u, e.weight});
    parallel_for(
        N,
        [&](int s) {
            std::vector<double> dist;
            std::vector<int> pred;
            detail::dijkstra(g, h, s, dist, pred);
            for (int t = 0; t < N; ++t) pg.phi(s, t) = dist[t];
            double best = std::numeric_limits<double>::infinity();
            for (const auto& [u, w] : in[s]) best = std::min(best, dist[u] + w);
            pg.cycle_min[s] = best;
            pg.phi(s, s) = std::min(0.0, best);
        },
        opts.graph.threads);
    return pg;
}

inline PotentialGrid action_potential(const LagrangianModel& model, double e, int n, const PotentialOptions& opts = {}) {
    return action_potential_from_graph(build_action_graph(model, e, n, opts.graph), opts);
}

// ---------------------------------------------------------------------------
// Mane critical value

enum class Scope { contractible, all };
enum class CriticalMethod { loops, graph, both };

inline std::string to_string(Scope s) { return s == Scope::contractible ? "contractible" : "all"; }
inline std::string to_string(CriticalMethod m) {
    return m == CriticalMethod::loops ? "loops" : m == CriticalMethod::graph ? "graph" : "both";
}

struct ProbeRecord {
    double e = 0.0;
    bool negative = false;
    double witness_action = 0.0;  ///< S_e of the witness (loops) or cycle weight (graph)
    std::vector<int> witness_winding;
};

struct Bracket {
    double lo = 0.0;
    double hi = 0.0;
    std::string method;
    std::vector<ProbeRecord> trace;
    bool monotone = true;  ///< no probe found S_e < 0 above one that found none

    double value() const { return 0.5 * (lo + hi); }
    double width() const { return hi - lo; }
    bool contains(double x) const { return lo <= x && x <= hi; }
};

struct CriticalOptions {
    double bracket_below = 0.1;  ///< initial bracket [e0 - below, e0 + above]
    double bracket_above = 5.0;
    double tol = 1e-3;
    int graph_n = 32;
    GraphOptions graph;
    int loop_points = 32;
    int random_loops = 2;  ///< random seeds per homotopy class
    int winding_box = 2;
    int max_iterations = 400;
    std::uint64_t seed = 1;
    int max_cuts = 100;
};

struct CriticalEstimate {
    Scope scope = Scope::all;
    CriticalMethod method = CriticalMethod::both;
    std::optional<Bracket> loops, graph;
    double lo = 0.0, hi = 0.0;
    bool overlap = true;  ///< loops and graph brackets intersect (method both)
    std::string provenance;

    double value() const { return 0.5 * (lo + hi); }
};

namespace detail {

inline Bracket bisect(const std::function<ProbeRecord(double)>& probe, double lo, double hi, double tol,
                      const std::string& method) {
    Bracket br;
    br.method = method;
    const ProbeRecord top = probe(hi);
    br.trace.push_back(top);
    if (top.negative)
        throw Error(ErrorKind::bracket_invalid, method + " probe found S_e < 0 at the top e = " + fmt_sci(hi));
    const ProbeRecord bottom = probe(lo);
    br.trace.push_back(bottom);
    if (!bottom.negative)
        throw Error(ErrorKind::bracket_invalid, method + " probe found no S_e < 0 at the bottom e = " + fmt_sci(lo));
    while (hi - lo >= tol) {
        const double mid = 0.5 * (lo + hi);
        const ProbeRecord r = probe(mid);
        br.trace.push_back(r);
        (r.negative ? lo : hi) = mid;
    }
    for (const auto& a : br.trace)
        for (const auto& b : br.trace)
            if (a.e < b.e && !a.negative && b.negative) br.monotone = false;
    br.lo = lo;
    br.hi = hi;
    return br;
}

}  // namespace detail

/// Deterministic seed loops for the loops probe and for waist search.
struct SeedLoopOptions {
    int points = 32;
    int random_loops = 2;
    int winding_box = 2;
    Scope scope = Scope::all;
    std::uint64_t seed = 1;
    std::vector<double> circle_radii{0.05, 0.15, 0.3, 0.45};
};

inline std::vector<DiscreteLoop> seed_loops(const LagrangianModel& model, double e, const SeedLoopOptions& opts) {
    const ConfigSpace& space = model.space();
    const int N = opts.points;
    std::mt19937_64 rng(opts.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> gauss;
    std::vector<DiscreteLoop> out;
    auto period_for = [&](const Mat& pts) {
        double len = 0.0, mean_u = 0.0;
        for (int k = 0; k < N; ++k) {
            const Vec a = pts.row(k).transpose(), b = pts.row((k + 1) % N).transpose();
            len += space.is_torus() ? torus_displacement(a, b).norm() : (b - a).norm();
            mean_u += model.potential(a) / N;
        }
        return std::max(0.05, len / std::sqrt(2 * std::max(0.05, e - mean_u)));
    };
    if (space.is_torus()) {
        const int d = space.dim;
        std::vector<std::vector<int>> windings;
        if (opts.scope == Scope::contractible) {
            windings.push_back(std::vector<int>(d, 0));
        } else {
            std::vector<int> w(d, -opts.winding_box);
            while (true) {
                windings.push_back(w);
                int i = 0;
                while (i < d && ++w[i] > opts.winding_box) w[i++] = -opts.winding_box;
                if (i == d) break;
            }
        }
        for (const auto& w : windings) {
            const bool zero = std::all_of(w.begin(), w.end(), [](int v) { return v == 0; });
            for (int r = 0; r < opts.random_loops; ++r) {
                Vec q0(d), a1(d), b1(d);
                for (int i = 0; i < d; ++i) q0[i] = u(rng), a1[i] = gauss(rng), b1[i] = gauss(rng);
                const double amp = zero ? 0.15 : 0.05;
                Mat pts(N, d);
                for (int k = 0; k < N; ++k) {
                    const double t = static_cast<double>(k) / N;
                    for (int i = 0; i < d; ++i)
                        pts(k, i) = q0[i] + w[i] * t +
                                    amp * (a1[i] * std::cos(2 * std::numbers::pi * t) +
                                           b1[i] * std::sin(2 * std::numbers::pi * t));
                }
                try {
                    out.push_back(DiscreteLoop::make(space, pts, period_for(pts)));
                } catch (const Error&) {
                }
            }
        }
        if (d >= 2) {
            // Circles in the (x0, x1) plane at grid centers, both orientations.
            for (double r : opts.circle_radii)
                for (double cx : {0.25, 0.75})
                    for (double cy : {0.25, 0.75})
                        for (int orient : {1, -1}) {
                            Mat pts(N, d);
                            for (int k = 0; k < N; ++k) {
                                const double t = orient * 2 * std::numbers::pi * k / N;
                                pts.row(k).setConstant(0.5);
                                pts(k, 0) = cx + r * std::cos(t);
                                pts(k, 1) = cy + r * std::sin(t);
                            }
                            try {
                                out.push_back(DiscreteLoop::make(space, pts, period_for(pts)));
                            } catch (const Error&) {
                            }
                        }
        }
    } else {
        for (double z = -0.8; z <= 0.81; z += 0.4)
            for (int orient : {1, -1}) {
                Mat pts(N, 3);
                const double r = std::sqrt(1 - z * z);
                for (int k = 0; k < N; ++k) {
                    const double t = orient * 2 * std::numbers::pi * k / N;
                    pts.row(k) << r * std::cos(t), r * std::sin(t), z;
                }
                out.push_back(DiscreteLoop::make(space, pts, period_for(pts)));
            }
        for (int s = 0; s < 4 * opts.random_loops; ++s) {
            const Eigen::Vector3d axis = Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng)).normalized();
            const Eigen::Vector3d e1 = axis.unitOrthogonal(), e2 = axis.cross(e1);
            const double h = 0.9 * (2 * u(rng) - 1), r = std::sqrt(1 - h * h);
            Mat pts(N, 3);
            for (int k = 0; k < N; ++k) {
                const double t = 2 * std::numbers::pi * k / N;
                pts.row(k) = (h * axis + r * (std::cos(t) * e1 + std::sin(t) * e2)).normalized().transpose();
            }
            out.push_back(DiscreteLoop::make(space, pts, period_for(pts)));
        }
    }
    return out;
}

/// Loops probe: multistart descent of S_e with early exit once S_e < 0.
/// Constant loops at the maximizer of U are included (they are loops).
class LoopProbe {
public:
    LoopProbe(const LagrangianModel& model, Scope scope, const CriticalOptions& opts)
        : model_(model), scope_(scope), opts_(opts), peak_(e0(model).argmax) {}

    ProbeRecord operator()(double e) {
        ProbeRecord rec;
        rec.e = e;
        auto check = [&](const DiscreteLoop& loop, double value) {
            if (value < 0) {
                rec.negative = true;
                rec.witness_action = value;
                rec.witness_winding = loop.tag.winding;
                witnesses_.push_back(loop);
                return true;
            }
            return false;
        };
        // Earlier witnesses first: S_e(gamma) is increasing in e.
        std::vector<DiscreteLoop> seeds(witnesses_.rbegin(), witnesses_.rend());
        Mat constant(opts_.loop_points, peak_.size());
        constant.rowwise() = peak_.transpose();
        seeds.push_back(DiscreteLoop::make(model_.space(), constant, 1.0));
        SeedLoopOptions so;
        so.points = opts_.loop_points;
        so.random_loops = opts_.random_loops;
        so.winding_box = opts_.winding_box;
        so.scope = scope_;
        so.seed = opts_.seed;
        for (auto& l : seed_loops(model_, e, so)) seeds.push_back(std::move(l));
        MinimizeOptions mo;
        mo.stop_below = 0.0;
        mo.max_iterations = opts_.max_iterations;
        for (const DiscreteLoop& s : seeds) {
            if (scope_ == Scope::contractible && !s.tag.contractible()) continue;
            try {
                if (check(s, action(model_, s, e))) return rec;
                const MinimizeResult r = minimize_action(model_, s, e, mo);
                if (check(r.loop, r.value)) return rec;
            } catch (const Error&) {
            }
        }
        return rec;
    }

private:
    const LagrangianModel& model_;
    Scope scope_;
    CriticalOptions opts_;
    Vec peak_;
    std::vector<DiscreteLoop> witnesses_;
};

inline ProbeRecord graph_probe(const LagrangianModel& model, Scope scope, double e, const CriticalOptions& opts) {
    const ActionGraph g = build_action_graph(model, e, opts.graph_n, opts.graph);
    ProbeRecord rec;
    rec.e = e;
    if (scope == Scope::all || g.space.is_sphere()) {
        const CycleInfo c = find_negative_cycle(g);
        rec.negative = c.found;
        rec.witness_action = c.weight;
        rec.witness_winding = c.winding;
    } else {
        const ContractibleProbe c = contractible_negative_cycle(g, opts.max_cuts);
        rec.negative = c.negative;
        rec.witness_action = c.witness.weight;
        rec.witness_winding = c.witness.winding;
    }
    return rec;
}

inline CriticalEstimate mane_critical(const LagrangianModel& model, Scope scope, CriticalMethod method,
                                      const CriticalOptions& opts = {}) {
    CriticalEstimate est;
    est.scope = model.space().is_sphere() ? Scope::all : scope;
    est.method = method;
    const double base = e0(model).value;
    const double lo = base - opts.bracket_below, hi = base + opts.bracket_above;
    if (method != CriticalMethod::graph) {
        LoopProbe probe(model, est.scope, opts);
        est.loops = detail::bisect([&](double e) { return probe(e); }, lo, hi, opts.tol, "loops");
    }
    if (method != CriticalMethod::loops) {
        est.graph = detail::bisect([&](double e) { return graph_probe(model, est.scope, e, opts); }, lo, hi,
                                   opts.tol, "graph");
    }
    if (est.loops && est.graph) {
        est.lo = std::max(est.loops->lo, est.graph->lo);
        est.hi = std::min(est.loops->hi, est.graph->hi);
        est.overlap = est.lo <= est.hi;
        if (!est.overlap) {
            // Report the hull; the flag records the disagreement.
            est.lo = std::min(est.loops->lo, est.graph->lo);
            est.hi = std::max(est.loops->hi, est.graph->hi);
        }
        est.provenance = "intersection of loops and graph brackets";
    } else {
        const Bracket& b = est.loops ? *est.loops : *est.graph;
        est.lo = b.lo;
        est.hi = b.hi;
        est.provenance = b.method + " bisection";
    }
    return est;
}

struct CriticalValueReport {
    E0Report e0;
    CriticalEstimate c_contractible;  ///< c_u surrogate (c_0 alias)
    CriticalEstimate c_all;           ///< c (equal to c_0 on tori)
    std::optional<double> waist_threshold;

    /// e0 <= c_contractible <= c_all + tol.
    bool ordered(double tol) const {
        return e0.value <= c_contractible.hi + tol && c_contractible.lo <= c_all.hi + tol;
    }
};

// ---------------------------------------------------------------------------
// Aubry set

struct AubryCycle {
    int node = 0;
    std::vector<int> cycle;  ///< nodes of the minimizing cycle through `node`
    DiscreteLoop loop;       ///< the cycle as a discrete loop (uniform time)
    double mean_energy = 0.0;
};

struct AubrySet {
    double energy = 0.0;
    std::vector<int> nodes;
    std::vector<AubryCycle> cycles;
};

/// Discrete loop along a node cycle: each edge replaced by its optimal
/// segment path, then resampled to `points` equal time steps.
inline DiscreteLoop cycle_loop(const LagrangianModel& model, const ActionGraph& g, const std::vector<int>& cycle,
                               int points, const SegmentOptions& seg = {}) {
    const int D = g.space.ambient_dim();
    std::vector<double> times{0.0};
    std::vector<Vec> pts{g.nodes.row(cycle[0]).transpose()};
    for (std::size_t k = 0; k < cycle.size(); ++k) {
        const Vec a = g.nodes.row(cycle[k]).transpose();
        const Vec b = g.nodes.row(cycle[(k + 1) % cycle.size()]).transpose();
        const SegmentResult s = segment_action(model, a, b, g.energy, seg);
        const int steps = static_cast<int>(s.path.rows()) - 1;
        const Vec base = pts.back();
        for (int j = 1; j <= steps; ++j) {
            Vec p = s.path.row(j).transpose();
            if (g.space.is_torus()) p = base + (p - a);
            pts.push_back(p);
            times.push_back(times.back() + s.duration / steps);
        }
    }
    const double period = times.back();
    Mat out(points, D);
    std::size_t seg_idx = 0;
    for (int k = 0; k < points; ++k) {
        const double t = period * k / points;
        while (seg_idx + 2 < times.size() && times[seg_idx + 1] <= t) ++seg_idx;
        const double span = times[seg_idx + 1] - times[seg_idx];
        const double w = span > 0 ? (t - times[seg_idx]) / span : 0.0;
        Vec p = (1 - w) * pts[seg_idx] + w * pts[seg_idx + 1];
        if (g.space.is_sphere()) p.normalize();
        out.row(k) = p.transpose();
    }
    return DiscreteLoop::make(g.space, out, period);
}

/// Nodes whose least nontrivial cycle weight at e = c_est is within
/// tol_aubry of zero, with their minimizing cycles.
inline AubrySet aubry_points(const LagrangianModel& model, double c_est, int n, double tol_aubry = 2e-3,
                             const PotentialOptions& opts = {}, int loop_points = 64) {
    const ActionGraph g = build_action_graph(model, c_est, n, opts.graph);
    Vec h;
    const CycleInfo neg = find_negative_cycle(g, Vec(), &h);
    if (neg.found) throw Error(ErrorKind::below_critical, "negative cycle at e = " + fmt_sci(c_est));
    const PotentialGrid pg = action_potential_from_graph(g, opts);
    AubrySet out;
    out.energy = c_est;
    for (int q = 0; q < pg.size(); ++q)
        if (std::abs(pg.cycle_min[q]) <= tol_aubry) out.nodes.push_back(q);
    for (int q : out.nodes) {
        // Rebuild the minimizing cycle: shortest path q -> u plus the edge u -> q.
        std::vector<double> dist;
        std::vector<int> pred;
        detail::dijkstra(g, h, q, dist, pred);
        int best_u = -1;
        double best = std::numeric_limits<double>::infinity();
        for (int u = 0; u < g.size(); ++u)
            for (const GraphEdge& e : g.out[u])
                if (e.to == q && u != q && dist[u] + e.weight < best) best = dist[u] + e.weight, best_u = u;
        if (best_u < 0) continue;
        AubryCycle ac;
        ac.node = q;
        for (int v = best_u; v != -1; v = pred[v]) ac.cycle.push_back(v);
        std::reverse(ac.cycle.begin(), ac.cycle.end());
        try {
            ac.loop = cycle_loop(model, g, ac.cycle, loop_points, opts.graph.segment);
            ac.mean_energy = evaluate_action(model, ac.loop, c_est, false).mean_energy;
        } catch (const Error&) {
            continue;
        }
        out.cycles.push_back(std::move(ac));
    }
    return out;
}

}  // namespace waistlab
