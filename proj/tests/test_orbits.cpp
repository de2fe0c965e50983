#include <cmath>

#include <gtest/gtest.h>

#include "support.hpp"
#include "waistlab/orbits.hpp"

using namespace waistlab;
using namespace waistlab::testing;

namespace {

constexpr double kMagEnergy = 0.525;       // c* + 0.05 (c* - e0) with c* = 1/2
constexpr double kSphereEnergy = 0.13125;  // c* = 1/8

const WaistSearch& magt2_search() {
    static const WaistSearch s = find_waist(make_system("sys-magt2"), kMagEnergy);
    return s;
}

const WaistSearch& mags2_search() {
    static const WaistSearch s = [] {
        WaistOptions o;
        o.points = 64;
        return find_waist(make_system("sys-mags2"), kSphereEnergy, o);
    }();
    return s;
}

/// Critical clockwise latitude of speed sqrt(2e) on the magnetic sphere.
double critical_latitude(double e) {
    const double v = std::sqrt(2 * e);
    auto dS = [&](double z) { return -v * z / std::sqrt(1 - z * z) - (1 - 3 * z * z); };
    double lo = 0.6, hi = 0.8;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (dS(lo) * dS(mid) <= 0 ? hi : lo) = mid;
    }
    return 0.5 * (lo + hi);
}

/// RMS distance from the points of a to the polyline through b's points
/// (torus), plus |delta log p|: a distance modulo phase.
double curve_distance(const DiscreteLoop& a, const DiscreteLoop& b) {
    double acc = 0.0;
    for (int k = 0; k < a.size(); ++k) {
        const Vec q = a.point(k);
        double best = std::numeric_limits<double>::infinity();
        for (int j = 0; j < b.size(); ++j) {
            const Vec p0 = b.point(j);
            const Vec seg = torus_displacement(p0, b.point(j + 1));
            const Vec rel = torus_displacement(p0, q);
            const double t = std::clamp(rel.dot(seg) / seg.squaredNorm(), 0.0, 1.0);
            best = std::min(best, (rel - t * seg).norm());
        }
        acc += best * best;
    }
    return std::sqrt(acc / a.size()) + std::abs(a.log_period - b.log_period);
}

}  // namespace

TEST(FindWaist, MagneticTorusWaistIsTheVerticalLine) {
    const WaistSearch& s = magt2_search();
    ASSERT_TRUE(s.found());
    const OrbitRecord& w = *s.orbit;
    EXPECT_EQ(w.index, 0);
    EXPECT_EQ(w.nullity_total, 1);
    EXPECT_TRUE(w.is_waist);
    EXPECT_LT(w.energy_residual, 1e-8);
    EXPECT_LT(w.shooting_residual, 1e-8);
    // Vertical lines through A = cos(2 pi x) extremes: S = sqrt(2e) - 1.
    EXPECT_NEAR(w.action, std::sqrt(2 * kMagEnergy) - 1.0, 1e-8);
    EXPECT_EQ(std::abs(w.tag().winding[0]), 0);
    EXPECT_EQ(std::abs(w.tag().winding[1]), 1);
    EXPECT_TRUE(s.certificate.passed);
    EXPECT_GT(s.certificate.margin, 0.0);
}

TEST(FindWaist, MagneticSphereWaistIsTheCriticalLatitude) {
    const WaistSearch& s = mags2_search();
    ASSERT_TRUE(s.found());
    const OrbitRecord& w = *s.orbit;
    EXPECT_TRUE(w.is_waist);
    EXPECT_LT(w.energy_residual, 1e-8);
    const double z = critical_latitude(kSphereEnergy), r = std::sqrt(1 - z * z), v = std::sqrt(2 * kSphereEnergy);
    EXPECT_NEAR(w.action, kTau * r * v - kTau * z * r * r, 1e-8);
    EXPECT_NEAR(w.period, kTau * r / v, 1e-8);
    EXPECT_TRUE(s.certificate.passed);
}

TEST(FindWaist, NoContractibleWaistOnTheMagneticTorus) {
    // Contractible loops shrink to the period floor at this energy.
    WaistOptions o;
    o.scope = Scope::contractible;
    o.seeds = 8;
    try {
        const WaistSearch s = find_waist(make_system("sys-magt2"), kMagEnergy, o);
        EXPECT_FALSE(s.found());
    } catch (const Error& err) {
        EXPECT_EQ(err.kind(), ErrorKind::barrier_collapse);
    }
}

TEST(FindWaist, ClassMinimizerMatchesBruteForceDescent) {
    const auto m = make_system("sys-mecht2");
    const double e = 2.5;
    WaistOptions o;
    o.winding = std::vector<int>{1, 0};
    o.seeds = 8;
    const WaistSearch s = find_waist(m, e, o);
    ASSERT_TRUE(s.found());
    // Brute force: horizontal lines and tilted circles of the class, descended.
    MinimizeOptions mo;
    mo.tau_min = 0.1;
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 20; ++i) {
        Mat pts(48, 2);
        for (int k = 0; k < 48; ++k) pts.row(k) << k / 48.0, i / 20.0 + 0.03 * std::sin(kTau * k / 48.0);
        const MinimizeResult r = minimize_action(m, DiscreteLoop::make(m.space(), pts, 0.5), e, mo);
        if (!r.barrier_collapsed) best = std::min(best, r.value);
    }
    EXPECT_NEAR(s.orbit->discrete_action, best, 1e-7);
    EXPECT_EQ(s.orbit->tag().winding, (std::vector<int>{1, 0}));
}

TEST(FindWaist, HyperbolicWaistIteratesAreWaists) {
    const auto m = make_system("sys-magt2");
    const OrbitRecord& w = *magt2_search().orbit;
    ASSERT_EQ(w.stability.cls, StabilityClass::hyperbolic);
    for (int k : {2, 3}) {
        WaistOptions o;
        o.seeds = 0;
        o.extra_seeds = {iterate_loop(w.loop, k)};
        const WaistSearch s = find_waist(m, kMagEnergy, o);
        ASSERT_TRUE(s.found()) << k;
        EXPECT_EQ(s.orbit->index, 0);
        EXPECT_EQ(s.orbit->tag(), w.tag().scaled(k));
        EXPECT_NEAR(s.orbit->action, k * w.action, 1e-8);
    }
}

TEST(FindWaist, ImpossibleFloorReportsNotFound) {
    WaistOptions o;
    o.tau_min = 50.0;
    o.seeds = 4;
    o.budget = 2;
    const WaistSearch s = find_waist(make_system("sys-magt2"), kMagEnergy, o);
    EXPECT_FALSE(s.found());
    EXPECT_EQ(s.candidates.size(), 4u);
}

TEST(RefineOrbit, PerturbedWaistReturns) {
    const auto m = make_system("sys-magt2");
    const OrbitRecord& w = *magt2_search().orbit;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g;
    Mat pts = w.loop.points;
    for (Eigen::Index k = 0; k < pts.rows(); ++k)
        for (Eigen::Index i = 0; i < pts.cols(); ++i) pts(k, i) += 1e-3 * g(rng);
    const OrbitRecord r = refine_orbit(m, DiscreteLoop::make(m.space(), pts, w.period), kMagEnergy);
    // The time shift is free: compare modulo phase.
    EXPECT_LT(curve_distance(r.loop, w.loop), 1e-6);
    EXPECT_NEAR(r.action, w.action, 1e-10);
    // Idempotence at a solution.
    const OrbitRecord again = refine_orbit(m, w.loop, kMagEnergy);
    EXPECT_LT(loop_distance(again.loop, w.loop), 1e-10);
}

TEST(MountainPass, SphereMinmaxExceedsBothEndpoints) {
    const auto m = make_system("sys-mags2");
    const OrbitRecord& w = *mags2_search().orbit;
    const DiscreteLoop g2 = iterate_loop(w.loop, 2);
    const DiscreteLoop g1 = resample_loop(w.loop, g2.size());
    const MountainPassResult ab = mountain_pass(m, kSphereEnergy, g1, g2);
    ASSERT_TRUE(ab.converged);
    const double sa = action(m, g1, kSphereEnergy), sb = action(m, g2, kSphereEnergy);
    EXPECT_GT(ab.s_value, std::max(sa, sb));
    ASSERT_TRUE(ab.critical.has_value()) << ab.refine_error;
    EXPECT_GE(ab.critical->index, 1);
    EXPECT_EQ(ab.string.knots.size(), 16u);
    // Endpoint order does not matter.
    const MountainPassResult ba = mountain_pass(m, kSphereEnergy, g2, g1);
    EXPECT_NEAR(ba.s_value, ab.s_value, 1e-3 * ab.s_value);
    // A jittered initial string relaxes to the same value.
    MountainPassOptions o;
    o.jitter = 0.02;
    o.seed = 11;
    const MountainPassResult jit = mountain_pass(m, kSphereEnergy, g1, g2, o);
    EXPECT_NEAR(jit.s_value, ab.s_value, 1e-2 * ab.s_value);
}

TEST(MountainPass, Guards) {
    const auto m = make_system("sys-magt2");
    const OrbitRecord& w = *magt2_search().orbit;
    const DiscreteLoop g2 = iterate_loop(w.loop, 2);
    try {
        mountain_pass(m, kMagEnergy, resample_loop(w.loop, g2.size()), g2);
        FAIL();
    } catch (const Error& err) {
        EXPECT_EQ(err.kind(), ErrorKind::components_differ);
    }
    MountainPassOptions o;
    o.knots = 8;
    try {
        mountain_pass(m, kMagEnergy, w.loop, w.loop, o);
        FAIL();
    } catch (const Error& err) {
        EXPECT_EQ(err.kind(), ErrorKind::precondition);
    }
}

TEST(StruweScan, GuardsAndSingleEnergy) {
    const auto m = make_system("sys-mags2");
    const OrbitRecord& w = *mags2_search().orbit;
    CylinderBranch br;
    br.samples.push_back({kSphereEnergy, w});
    try {
        struwe_scan(m, 1, {kSphereEnergy}, br);
        FAIL();
    } catch (const Error& err) {
        EXPECT_EQ(err.kind(), ErrorKind::degenerate_endpoints);
    }
    const StruweScan scan = struwe_scan(m, 2, {kSphereEnergy}, br);
    ASSERT_EQ(scan.rows.size(), 1u);
    EXPECT_TRUE(scan.monotone);
    EXPECT_GT(scan.rows[0].s_value, scan.rows[0].iterate_action);
}
