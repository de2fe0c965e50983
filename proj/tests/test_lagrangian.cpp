#include <random>

#include <gtest/gtest.h>

#include "waistlab/integrator.hpp"

using namespace waistlab;

namespace {

PhaseState state(std::initializer_list<double> q, std::initializer_list<double> v) {
    PhaseState s;
    s.q = Eigen::Map<const Vec>(q.begin(), static_cast<Eigen::Index>(q.size()));
    s.v = Eigen::Map<const Vec>(v.begin(), static_cast<Eigen::Index>(v.size()));
    return s;
}

PhaseState random_state(const LagrangianModel& m, std::mt19937_64& rng, double vmax) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> g;
    PhaseState s;
    const int d = m.dim();
    s.q.resize(d);
    s.v.resize(d);
    for (int i = 0; i < d; ++i) {
        s.q[i] = m.space().is_torus() ? u(rng) : g(rng);
        s.v[i] = g(rng);
    }
    if (m.space().is_sphere()) {
        s.q.normalize();
        s.v -= s.v.dot(s.q) * s.q;
    }
    s.v *= vmax * u(rng) / std::max(1e-12, s.v.norm());
    return s;
}

const char* kSystems[] = {"sys-pend", "sys-mecht2", "sys-magt2", "sys-mags2"};

}  // namespace

TEST(Energy, CatalogValues) {
    EXPECT_DOUBLE_EQ(make_system("sys-pend").energy(state({0.0}, {0.0})), 2.0);
    EXPECT_DOUBLE_EQ(make_system("sys-magt2").energy(state({0.3, 0.8}, {0.0, 0.0})), 0.0);
    EXPECT_DOUBLE_EQ(make_system("sys-mecht2").energy(state({0.0, 0.0}, {0.0, 0.0})), 2.0);
}

TEST(Energy, MagneticTermCancels) {
    std::mt19937_64 rng(3);
    for (const char* name : kSystems) {
        const auto m = make_system(name);
        for (int i = 0; i < 200; ++i) {
            const PhaseState s = random_state(m, rng, 3.0);
            EXPECT_NEAR(m.energy_by_definition(s), 0.5 * s.v.squaredNorm() + m.potential(s.q), 1e-14)
                << name;
        }
    }
}

TEST(Catalog, UnknownNamesAndOverrides) {
    EXPECT_THROW(make_system("sys-nope"), Error);
    EXPECT_THROW(make_system("sys-pend", {{"bogus", 1.0}}), Error);
    const auto m = make_system("sys-mags2", {{"magnetic", 0.5}});
    EXPECT_DOUBLE_EQ(m.magnetic_amplitude(), 0.5);
    EXPECT_EQ(make_system("sys-free", {{"dim", 3}}).dim(), 3);
}

TEST(ElFlow, FreeParticleStraightLine) {
    const auto m = make_system("sys-free");
    const auto r = el_flow(m, state({0, 0}, {1, 0}), 1.0);
    EXPECT_NEAR(torus_displacement(r.state.q, Vec::Zero(2)).norm(), 0.0, 1e-12);
    EXPECT_NEAR((r.state.v - Eigen::Vector2d(1, 0)).norm(), 0.0, 1e-12);
    EXPECT_NEAR(r.lifted_q[0], 1.0, 1e-12);
}

TEST(ElFlow, PendulumEquilibriumIsFixed) {
    const auto m = make_system("sys-pend");
    const auto r = el_flow(m, state({0.0}, {0.0}), 7.5);
    EXPECT_EQ(r.lifted_q[0], 0.0);
    EXPECT_EQ(r.state.v[0], 0.0);
}

TEST(ElFlow, MagneticT2EnergyDriftAgainstTighterRun) {
    const auto m = make_system("sys-magt2");
    const PhaseState s0 = state({0.13, 0.42}, {0.7, -0.9});
    const auto coarse = el_flow(m, s0, 50.0);
    IntegratorOptions tight;
    tight.rtol = tight.atol = 0.5e-12;
    const auto fine = el_flow(m, s0, 50.0, tight);
    EXPECT_LT(std::abs(m.energy(coarse.state) - m.energy(s0)), 1e-8);
    EXPECT_LT(std::abs(m.energy(fine.state) - m.energy(s0)), 1e-8);
    EXPECT_LT(coarse.stats.max_energy_drift, 1e-8);
    // Both runs approximate the same trajectory.
    EXPECT_LT((coarse.lifted_q - fine.lifted_q).norm(), 1e-6);
}

TEST(ElFlow, EnergyConservationProperty) {
    std::mt19937_64 rng(17);
    for (const char* name : kSystems) {
        const auto m = make_system(name);
        for (int i = 0; i < 5; ++i) {
            const PhaseState s0 = random_state(m, rng, 3.0);
            const auto r = el_flow(m, s0, 50.0);
            EXPECT_LT(r.stats.max_energy_drift, 1e-8) << name;
        }
    }
}

TEST(ElFlow, SphereStaysOnTangentBundle) {
    const auto m = make_system("sys-mags2");
    std::mt19937_64 rng(2);
    const PhaseState s0 = random_state(m, rng, 2.0);
    const auto r = el_flow(m, s0, 20.0);
    EXPECT_NEAR(r.state.q.norm(), 1.0, 1e-12);
    EXPECT_LT(std::abs(r.state.q.dot(r.state.v)), 1e-10);
}

TEST(ElFlow, LinearizationSecondOrderConsistency) {
    std::mt19937_64 rng(23);
    for (const char* name : kSystems) {
        const auto m = make_system(name);
        const PhaseState s0 = random_state(m, rng, 1.5);
        const double T = 1.3;
        const auto base = el_flow(m, s0, T, {}, true);
        const int d = m.dim();
        // tangent perturbation direction
        std::normal_distribution<double> g;
        Vec dq(d), dv(d);
        for (int i = 0; i < d; ++i) dq[i] = g(rng), dv[i] = g(rng);
        if (m.space().is_sphere()) {
            dq -= dq.dot(s0.q) * s0.q;
            dv -= dv.dot(s0.q) * s0.q;
            dv -= (dq.dot(s0.v)) * s0.q;  // keeps q.v = 0 to first order
        }
        Vec delta(2 * d);
        delta << dq, dv;
        delta.normalize();
        double prev_err = 0.0;
        for (int k = 0; k < 4; ++k) {
            const double eps = 1e-3 / (1 << k);
            PhaseState s1{s0.q + eps * delta.head(d), s0.v + eps * delta.tail(d)};
            const auto pert = el_flow(m, s1, T);
            Vec diff(2 * d);
            diff << pert.lifted_q - base.lifted_q, pert.state.v - base.state.v;
            const double err = (diff - eps * base.transition * delta).norm();
            if (k > 0) {
                const double ratio = prev_err / err;
                EXPECT_GT(ratio, 3.0) << name << " eps=" << eps;
                EXPECT_LT(ratio, 5.0) << name << " eps=" << eps;
            }
            prev_err = err;
        }
    }
}
