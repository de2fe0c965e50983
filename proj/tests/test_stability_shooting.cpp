#include <cmath>

#include <gtest/gtest.h>

#include "support.hpp"
#include "waistlab/floquet.hpp"

using namespace waistlab;
using namespace waistlab::testing;

namespace {

/// Line of the given winding on T^2 through (x0, y0), with a small wobble,
/// and the period a free particle at energy e would need.
DiscreteLoop wobbly_line(const LagrangianModel& m, double x0, double y0, std::vector<int> w, double e, int n = 64,
                         double wobble = 0.01) {
    Mat pts(n, 2);
    for (int k = 0; k < n; ++k) {
        const double t = static_cast<double>(k) / n;
        pts.row(k) << x0 + w[0] * t + wobble * w[1] * std::sin(kTau * t),
            y0 + w[1] * t + wobble * w[0] * std::sin(kTau * t);
    }
    double p = 0.0;
    for (int k = 0; k < n; ++k)
        p += std::hypot(w[0], w[1]) / n / std::sqrt(2 * (e - m.potential(pts.row(k).transpose())));
    return DiscreteLoop::make(m.space(), pts, p);
}

OrbitRecord minimize_and_refine(const LagrangianModel& m, const DiscreteLoop& seed, double e) {
    MinimizeOptions o;
    o.tau_min = 0.1;
    const MinimizeResult r = minimize_action(m, seed, e, o);
    EXPECT_FALSE(r.barrier_collapsed);
    return refine_orbit(m, r.loop, e);
}

const OrbitRecord& magt2_waist() {
    static const OrbitRecord rec = [] {
        const auto m = make_system("sys-magt2");
        return minimize_and_refine(m, wobbly_line(m, 0.4, 0.0, {0, 1}, 0.525), 0.525);
    }();
    return rec;
}

const OrbitRecord& mecht2_line() {
    static const OrbitRecord rec = [] {
        const auto m = make_system("sys-mecht2");
        return minimize_and_refine(m, wobbly_line(m, 0.0, 0.02, {1, 0}, 2.5), 2.5);
    }();
    return rec;
}

/// Clockwise latitude at height z on S^2.
DiscreteLoop latitude(double z, int n, double period) {
    Mat pts(n, 3);
    const double r = std::sqrt(1 - z * z);
    for (int k = 0; k < n; ++k) {
        const double t = -kTau * k / n;
        pts.row(k) << r * std::cos(t), r * std::sin(t), z;
    }
    return DiscreteLoop::make(ConfigSpace::sphere(), pts, period);
}

const OrbitRecord& mags2_waist() {
    static const OrbitRecord rec = [] {
        const auto m = make_system("sys-mags2");
        return minimize_and_refine(m, latitude(0.7, 64, 8.0), 0.125 * 1.05);
    }();
    return rec;
}

void expect_symplectic_pairs(const std::vector<Complex>& mult, double tol) {
    // Multipliers sorted by modulus: the k-th largest pairs with the k-th smallest.
    const std::size_t n = mult.size();
    for (std::size_t k = 0; k < n / 2; ++k) {
        const Complex prod = mult[k] * mult[n - 1 - k];
        EXPECT_NEAR(std::abs(prod), 1.0, tol) << "pair " << k;
    }
}

}  // namespace

TEST(Shooting, FreeGeodesicIsDegenerateWithNullityBridge) {
    const auto m = make_system("sys-free");
    const double e = 0.5;
    const OrbitRecord r = refine_orbit(m, wobbly_line(m, 0.0, 0.3, {1, 0}, e, 16, 0.0), e);
    EXPECT_NEAR(r.period, 1.0 / std::sqrt(2 * e), 1e-10);
    EXPECT_NEAR(r.action, std::sqrt(2 * e), 1e-10);
    EXPECT_LT(r.shooting_residual, 1e-10);
    EXPECT_EQ(r.stability.cls, StabilityClass::degenerate);
    EXPECT_EQ(r.index, 0);
    // Translations across the line plus the time shift.
    EXPECT_EQ(r.nullity_total, 2);
    EXPECT_EQ(r.nullity_total - 1, r.stability.unit_multiplicity);
}

TEST(Shooting, LeavingTheBasinIsReported) {
    const auto m = make_system("sys-free");
    RefineOptions o;
    o.basin_bound = 1e-3;
    try {
        refine_orbit(m, wobbly_line(m, 0.0, 0.3, {1, 0}, 0.5, 32, 0.05), 0.5, o);
        FAIL() << "expected left_basin";
    } catch (const Error& err) {
        EXPECT_EQ(err.kind(), ErrorKind::left_basin);
    }
}

TEST(Shooting, MagneticTorusWaistMatchesClosedForm) {
    const OrbitRecord& r = magt2_waist();
    const double e = 0.525;
    EXPECT_NEAR(r.period, 1.0 / std::sqrt(2 * e), 1e-8);
    EXPECT_NEAR(r.action, std::sqrt(2 * e) - 1.0, 1e-8);
    EXPECT_NEAR(r.state0.q[0], 0.5, 1e-8);
    EXPECT_GT(r.state0.v[1], 0.0);
    EXPECT_LT(r.discrete_grad_norm, 1e-6);
    EXPECT_EQ(r.index, 0);
    EXPECT_EQ(r.nullity_total, 1);
    EXPECT_TRUE(r.is_waist);
    EXPECT_EQ(r.stability.cls, StabilityClass::hyperbolic);
    EXPECT_NEAR(r.stability.determinant, 1.0, 1e-8);
    expect_symplectic_pairs(r.stability.multipliers, 1e-6);
}

TEST(Shooting, RefinementIsIdempotent) {
    const auto m = make_system("sys-magt2");
    const OrbitRecord& r = magt2_waist();
    const OrbitRecord again = refine_orbit(m, r.loop, r.energy);
    EXPECT_LT(loop_distance(again.loop, r.loop), 1e-8);
    EXPECT_NEAR(again.action, r.action, 1e-10);

    const auto s2 = make_system("sys-mags2");
    const OrbitRecord& w = mags2_waist();
    const OrbitRecord w2 = refine_orbit(s2, w.loop, w.energy);
    EXPECT_LT(loop_distance(w2.loop, w.loop), 1e-8);
}

TEST(Shooting, SphereWaistIsTheCriticalLatitude) {
    // Among clockwise latitudes of speed sqrt(2e), S = 2 pi r sqrt(2e) - 2 pi z r^2
    // after optimizing the period; rotational symmetry makes its critical
    // latitude a critical loop of the full action.
    const double e = 0.125 * 1.05, v = std::sqrt(2 * e);
    auto dS = [&](double z) {
        const double r = std::sqrt(1 - z * z);
        return -v * z / r - (1 - 3 * z * z);
    };
    double lo = 0.6, hi = 0.8;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (dS(lo) * dS(mid) <= 0 ? hi : lo) = mid;
    }
    const double z = 0.5 * (lo + hi), rad = std::sqrt(1 - z * z);
    const OrbitRecord& w = mags2_waist();
    EXPECT_NEAR(w.state0.q[2], z, 1e-8);
    EXPECT_NEAR(w.period, kTau * rad / v, 1e-8);
    EXPECT_NEAR(w.action, kTau * rad * v - kTau * z * rad * rad, 1e-8);
    EXPECT_LT(Eigen::Vector3d(w.state0.q).cross(Eigen::Vector3d(w.state0.v))[2], 0.0);  // clockwise seen from +z
    EXPECT_TRUE(w.is_waist);
    EXPECT_EQ(w.stability.cls, StabilityClass::hyperbolic);
    EXPECT_NEAR(w.stability.determinant, 1.0, 1e-8);
    expect_symplectic_pairs(w.stability.multipliers, 1e-6);
}

TEST(Stability, HyperbolicMultiplierMatchesNonlinearDivergence) {
    const auto m = make_system("sys-magt2");
    const OrbitRecord& r = magt2_waist();
    const Monodromy mono = monodromy(m, r);
    Eigen::EigenSolver<Mat> es(mono.M);
    Eigen::Index top = 0;
    for (Eigen::Index i = 1; i < mono.M.rows(); ++i)
        if (std::abs(es.eigenvalues()[i]) > std::abs(es.eigenvalues()[top])) top = i;
    const double lambda = es.eigenvalues()[top].real();
    const Vec u = es.eigenvectors().col(top).real().normalized();
    // Keep the perturbation on the energy level to first order.
    const double delta = 1e-7;
    PhaseState s = r.state0;
    s.q += delta * u.head(2);
    s.v += delta * u.tail(2);
    const FlowResult a = el_flow(m, r.state0, r.period);
    const FlowResult b = el_flow(m, s, r.period);
    Vec d(4);
    d << b.lifted_q - a.lifted_q, b.state.v - a.state.v;
    EXPECT_NEAR(d.norm() / delta, std::abs(lambda), 1e-3 * std::abs(lambda));
    EXPECT_GT(std::abs(lambda), 1.0 + 1e-3);
}

TEST(Stability, BottIterationFormulaOnHyperbolicWaists) {
    const std::vector<std::pair<std::string, const OrbitRecord*>> cases = {
        {"sys-magt2", &magt2_waist()}, {"sys-mecht2", &mecht2_line()}};
    for (const auto& [name, rec] : cases) {
        const auto m = make_system(name);
        ASSERT_EQ(rec->index, 0) << name;
        ASSERT_EQ(rec->stability.cls, StabilityClass::hyperbolic) << name;
        for (int k = 1; k <= 4; ++k) {
            const DiscreteLoop it = iterate_loop(rec->loop, k);
            const ActionReport rep = action_hessian_spectrum(m, it, rec->energy);
            const StabilityReport st = classify_orbit(m, rec->state0, k * rec->period, {}, {}, k * rec->segments);
            // Hyperbolic orbits: index grows linearly (here 0) and the nullity
            // is one plus the unit multiplicity of P^k.
            EXPECT_EQ(rep.index, k * rec->index) << name << " m=" << k;
            EXPECT_EQ(rep.nullity_total, 1 + st.unit_multiplicity) << name << " m=" << k;
            ASSERT_EQ(st.reduced_multipliers.size(), rec->stability.reduced_multipliers.size());
            for (std::size_t j = 0; j < st.reduced_multipliers.size(); ++j) {
                const Complex expect = std::pow(rec->stability.reduced_multipliers[j], k);
                // Multipliers inside the unit disk carry an absolute error of
                // order eps * |P^m|; their partners are compared instead.
                if (std::abs(expect) < 1.0) continue;
                EXPECT_LE(std::abs(st.reduced_multipliers[j] - expect), 1e-6 * std::max(1.0, std::abs(expect)))
                    << name << " m=" << k;
            }
        }
    }
}

TEST(Stability, FourElementaryDetectsLowOrderResonances) {
    auto rotation_blocks = [](const std::vector<double>& turns) {
        const int q = static_cast<int>(turns.size());
        Mat P = Mat::Zero(2 * q, 2 * q);
        for (int j = 0; j < q; ++j) {
            const double a = kTau * turns[j];
            P.block(2 * j, 2 * j, 2, 2) << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
        }
        return P;
    };
    const StabilityReport res = classify_reduced(rotation_blocks({0.30, 0.60}));
    EXPECT_EQ(res.cls, StabilityClass::elliptic);
    EXPECT_FALSE(res.four_elementary);
    EXPECT_FALSE(res.resonance.empty());
    EXPECT_FALSE(classify_reduced(rotation_blocks({0.25})).four_elementary);
    EXPECT_FALSE(classify_reduced(rotation_blocks({1.0 / 3.0})).four_elementary);
    EXPECT_TRUE(classify_reduced(rotation_blocks({0.1234, 0.3717})).four_elementary);
    EXPECT_TRUE(classify_reduced(rotation_blocks({0.2})).four_elementary);  // 5 theta is outside the range
}

TEST(Stability, ClassesOfSyntheticMaps) {
    Mat H(2, 2);
    H << 3.0, 0.0, 0.0, 1.0 / 3.0;
    EXPECT_EQ(classify_reduced(H).cls, StabilityClass::hyperbolic);
    Mat Q = Mat::Zero(4, 4);
    Q.block(0, 0, 2, 2) = H;
    Q.block(2, 2, 2, 2) << std::cos(1.0), -std::sin(1.0), std::sin(1.0), std::cos(1.0);
    EXPECT_EQ(classify_reduced(Q).cls, StabilityClass::quasi_elliptic);
    Mat J(2, 2);
    J << 1.0, 1.0, 0.0, 1.0;
    const StabilityReport d = classify_reduced(J);
    EXPECT_EQ(d.cls, StabilityClass::degenerate);
    EXPECT_EQ(d.unit_multiplicity, 1);
    EXPECT_EQ(classify_reduced(Mat::Identity(2, 2)).unit_multiplicity, 2);
}

TEST(Stability, PendulumEquilibriumRotatesByOmegaTimesPeriod) {
    const auto m = make_system("sys-pend");
    const double T = 0.3;
    const StabilityReport st = classify_orbit(m, PhaseState{Vec::Constant(1, 0.5), Vec::Zero(1)}, T);
    ASSERT_EQ(st.reduced_multipliers.size(), 2u);
    EXPECT_EQ(st.cls, StabilityClass::elliptic);
    // Linearization q'' = -4 pi^2 (q - 1/2): rotation by 2 pi T.
    for (const Complex& l : st.reduced_multipliers) {
        EXPECT_NEAR(std::abs(l), 1.0, 1e-9);
        EXPECT_NEAR(std::abs(std::arg(l)), kTau * T, 1e-8);
    }
}
