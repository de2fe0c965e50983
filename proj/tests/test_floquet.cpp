#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "support.hpp"
#include "waistlab/floquet.hpp"

using namespace waistlab;
using namespace waistlab::testing;

namespace {

/// Pendulum period around q = 1/2 at energy e (elliptic-integral form of
/// phi'' = -4 pi^2 sin phi, phi = 2 pi (q - 1/2)).
double pendulum_period(double e) { return 2.0 / std::numbers::pi * std::comp_ellint_1(std::sqrt(e / 2.0)); }

PlanarMap twist_map(double a, double b, const Eigen::Matrix2d& conj) {
    PlanarMap pm;
    pm.base_period = 1.0;
    const Eigen::Matrix2d inv = conj.inverse();
    pm.map = [=](const Point2& x) {
        const Point2 z = inv * x;
        const double ang = a + kTau * b * z.squaredNorm();
        return Point2(conj * Point2(std::cos(ang) * z[0] - std::sin(ang) * z[1],
                                    std::sin(ang) * z[0] + std::cos(ang) * z[1]));
    };
    return pm;
}

OrbitRecord magt2_waist(double e) {
    const auto m = make_system("sys-magt2");
    Mat pts(48, 2);
    for (int k = 0; k < 48; ++k) pts.row(k) << 0.5, k / 48.0;
    return refine_orbit(m, DiscreteLoop::make(m.space(), pts, 1.0 / std::sqrt(2 * e)), e);
}

}  // namespace

TEST(TwistFit, RecoversSyntheticTwist) {
    Eigen::Matrix2d conj;
    conj << 2.0, 0.3, 0.0, 0.5;  // determinant 1
    for (const auto& C : {Eigen::Matrix2d(Eigen::Matrix2d::Identity()), conj}) {
        const TwistFit f = twist_fit(twist_map(0.7, 0.31, C), 0.2);
        EXPECT_NEAR(f.rotation, 0.7, 1e-6);
        EXPECT_NEAR(f.twist, 0.31, 1e-5);
        EXPECT_TRUE(f.nonzero);
    }
    const TwistFit flat = twist_fit(twist_map(0.7, 0.0, conj), 0.2);
    EXPECT_NEAR(flat.twist, 0.0, 1e-6);
    EXPECT_FALSE(flat.nonzero);
}

TEST(TwistFit, RejectsNonRotations) {
    PlanarMap pm;
    pm.map = [](const Point2& x) { return Point2(2.0 * x[0], 0.5 * x[1]); };
    try {
        twist_fit(pm, 0.1);
        FAIL();
    } catch (const Error& err) {
        EXPECT_EQ(err.kind(), ErrorKind::not_elliptic);
    }
}

TEST(TwistFit, PendulumTwistHasTheSofteningSign) {
    const auto m = make_system("sys-pend");
    const double T = 0.3;
    // Normalized coordinates: E ~ omega r^2 / 2 with omega = 2 pi; outer circle at E = 1.
    const double R = std::sqrt(1.0 / std::numbers::pi);
    const TwistFit f = twist_fit(stroboscopic_map(m, 0.5, T), R);
    ASSERT_GT(pendulum_period(1.0), pendulum_period(0.1));  // period grows with amplitude
    EXPECT_TRUE(f.nonzero);
    EXPECT_LT(f.twist, 0.0);
    EXPECT_NEAR(f.rotation, kTau * T, 0.02);
    // Each circle's mean angle lies between the strobe rotations of its extreme energies.
    for (std::size_t i = 0; i < f.radii.size(); ++i) {
        const double e_mid = std::numbers::pi * f.radii[i] * f.radii[i];
        const double expect = kTau * T / pendulum_period(e_mid);
        EXPECT_NEAR(f.angles[i], expect, 0.05 * expect) << "r=" << f.radii[i];
    }
}

TEST(BirkhoffLewis, PendulumSubharmonicsMatchEllipticPeriods) {
    const auto m = make_system("sys-pend");
    const double T = 0.3;
    const PlanarMap pm = stroboscopic_map(m, 0.5, T);
    const TwistFit f = twist_fit(pm, std::sqrt(1.0 / std::numbers::pi));
    const StabilityReport st = classify_orbit(m, PhaseState{Vec::Constant(1, 0.5), Vec::Zero(1)}, T);
    const auto subs = birkhoff_lewis_probe(pm, st, f);
    std::set<std::pair<int, int>> fractions;
    for (const auto& s : subs) {
        EXPECT_GT(s.return_period, 3.0 * T);
        const double e = 0.5 * s.point[1] * s.point[1] + m.potential(Vec::Constant(1, 0.5 + s.point[0]));
        // Rotation number of the strobe map on this level is T / period(e).
        EXPECT_NEAR(T / pendulum_period(e), static_cast<double>(s.winding) / s.iterates, 1e-7)
            << s.winding << "/" << s.iterates;
        ASSERT_TRUE(s.orbit.has_value());
        EXPECT_NEAR(s.orbit->period, pendulum_period(e), 1e-7);
        fractions.insert({s.winding, s.iterates});
    }
    EXPECT_GE(fractions.size(), 2u);
}

TEST(BirkhoffLewis, RequiresAnEllipticOrbit) {
    const auto m = make_system("sys-magt2");
    const OrbitRecord w = magt2_waist(0.525);
    const TwistFit f = twist_fit(twist_map(0.7, 0.31, Eigen::Matrix2d::Identity()), 0.2);
    try {
        birkhoff_lewis_probe(PlanarMap{}, w.stability, f);
        FAIL();
    } catch (const Error& err) {
        EXPECT_EQ(err.kind(), ErrorKind::precondition);
    }
}

TEST(SectionMap, FixedPointAndLinearizationMatchReducedMap) {
    const auto m = make_system("sys-mecht2");
    const double e = 2.5;
    Mat pts(64, 2);
    double p = 0.0;
    for (int k = 0; k < 64; ++k) {
        pts.row(k) << k / 64.0, 0.5;
        p += 1.0 / 64 / std::sqrt(2 * (e - m.potential(pts.row(k).transpose())));
    }
    const OrbitRecord r = refine_orbit(m, DiscreteLoop::make(m.space(), pts, p), e);
    ASSERT_EQ(r.stability.cls, StabilityClass::elliptic);
    const SectionMap sm(m, r);
    EXPECT_LT(sm(Point2::Zero()).norm(), 1e-9);
    const Eigen::Matrix2d J = sm.planar().linearization();
    // The section map is the reduced map in another basis: same trace.
    EXPECT_NEAR(J.trace(), r.stability.reduced_map.trace(), 1e-6);
    EXPECT_NEAR(J.determinant(), 1.0, 1e-6);
    // Separable system: the transverse oscillation has omega = 2 pi at y = 1/2.
    EXPECT_NEAR(std::acos(0.5 * J.trace()), std::acos(std::cos(kTau * r.period)), 1e-6);
    const TwistFit f = twist_fit(sm.planar(), 0.05);
    EXPECT_TRUE(f.nonzero);
}

TEST(Cylinder, FreeParticleReproducesPeriodLaw) {
    const auto m = make_system("sys-free");
    Mat pts(16, 2);
    for (int k = 0; k < 16; ++k) pts.row(k) << k / 16.0, 0.3;
    const OrbitRecord r = refine_orbit(m, DiscreteLoop::make(m.space(), pts, 1.0), 0.5);
    try {
        continue_cylinder(m, r, 0.4, 0.6, 5);
        FAIL() << "degenerate start must be refused";
    } catch (const Error& err) {
        EXPECT_EQ(err.kind(), ErrorKind::degeneracy_hit);
    }
    ContinuationOptions o;
    o.require_nondegenerate = false;
    const CylinderBranch br = continue_cylinder(m, r, 0.45, 0.55, 21, o);
    ASSERT_EQ(br.samples.size(), 21u);
    for (const auto& s : br.samples) {
        EXPECT_NEAR(s.orbit.period, 1.0 / std::sqrt(2 * s.e), 1e-8);
        EXPECT_DOUBLE_EQ(s.orbit.energy, s.e);
    }
    for (std::size_t i = 1; i + 1 < br.samples.size(); ++i) EXPECT_LT(br.identity_error[i], 1e-4);
    EXPECT_TRUE(std::isnan(br.d_action_d_e.front()));
}

TEST(Cylinder, HyperbolicWaistPersistsWithActionPeriodIdentity) {
    const auto m = make_system("sys-magt2");
    const OrbitRecord w = magt2_waist(0.525);
    const CylinderBranch br = continue_cylinder(m, w, 0.515, 0.55, 8);
    ASSERT_EQ(br.samples.size(), 8u);
    EXPECT_TRUE(br.index_constant);
    EXPECT_TRUE(br.class_constant);
    for (std::size_t i = 1; i + 1 < br.samples.size(); ++i) {
        EXPECT_LT(br.identity_error[i], 1e-4) << "e=" << br.samples[i].e;
        EXPECT_NEAR(br.samples[i].orbit.action, std::sqrt(2 * br.samples[i].e) - 1.0, 1e-8);
    }
    for (std::size_t i = 1; i < br.samples.size(); ++i) EXPECT_GT(br.samples[i].e, br.samples[i - 1].e);
}

TEST(Cylinder, NonuniformDerivativeIsExactOnQuadratics) {
    auto f = [](double x) { return 3 * x * x - 2 * x + 1; };
    EXPECT_NEAR(nonuniform_derivative(0.1, f(0.1), 0.25, f(0.25), 0.7, f(0.7)), 6 * 0.25 - 2, 1e-12);
}
