#pragma once

// Tonelli Lagrangians of the form
//
//     L(q,v) = 1/2 |v|^2 + A(q).v - U(q)
//
// on a torus or on the unit sphere (ambient coordinates), with the built-in
// system catalog. The kinetic metric is the identity for every system.

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include <Eigen/Dense>

#include "waistlab/error.hpp"
#include "waistlab/manifold.hpp"

namespace waistlab {

/// Small vectors/matrices (at most 3x3) stored inline; used in the hot loops.
using SVec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 3, 1>;
using SMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 3, 3>;

struct PhaseState {
    Vec q;
    Vec v;
};

/// Potential and one-form data at a configuration point.
struct FieldEval {
    double U = 0.0;
    SVec grad_U;
    SMat hess_U;
    SVec A;   ///< one-form components theta_q = A(q).dq
    SMat DA;  ///< DA(i,j) = d_i A_j
};

class LagrangianModel {
public:
    enum class System { pend, mecht2, magt2, mags2, free };

    LagrangianModel(System system, ConfigSpace space, double potential_amp, double magnetic_amp)
        : system_(system), space_(space), potential_amp_(potential_amp), magnetic_amp_(magnetic_amp) {}

    System system() const { return system_; }
    const ConfigSpace& space() const { return space_; }
    int dim() const { return space_.ambient_dim(); }
    double potential_amplitude() const { return potential_amp_; }
    double magnetic_amplitude() const { return magnetic_amp_; }
    bool mechanical() const { return system_ != System::magt2 && system_ != System::mags2; }

    std::string name() const {
        switch (system_) {
        case System::pend: return "sys-pend";
        case System::mecht2: return "sys-mecht2";
        case System::magt2: return "sys-magt2";
        case System::mags2: return "sys-mags2";
        case System::free: return "sys-free";
        }
        return "unknown";
    }

    template <class Q>
    FieldEval fields(const Q& q) const {
        constexpr double tau = 2.0 * std::numbers::pi;
        const int d = dim();
        FieldEval f;
        f.grad_U = SVec::Zero(d);
        f.hess_U = SMat::Zero(d, d);
        f.A = SVec::Zero(d);
        f.DA = SMat::Zero(d, d);
        const double a = potential_amp_;
        const double s = magnetic_amp_;
        switch (system_) {
        case System::pend:
            f.U = a * (1.0 + std::cos(tau * q[0]));
            f.grad_U[0] = -a * tau * std::sin(tau * q[0]);
            f.hess_U(0, 0) = -a * tau * tau * std::cos(tau * q[0]);
            break;
        case System::mecht2:
            for (int i = 0; i < 2; ++i) {
                f.U += a * std::cos(tau * q[i]);
                f.grad_U[i] = -a * tau * std::sin(tau * q[i]);
                f.hess_U(i, i) = -a * tau * tau * std::cos(tau * q[i]);
            }
            break;
        case System::magt2:
            f.A[1] = s * std::cos(tau * q[0]);
            f.DA(0, 1) = -s * tau * std::sin(tau * q[0]);
            break;
        case System::mags2:
            f.A << -s * q[2] * q[1], s * q[2] * q[0], 0.0;
            f.DA(0, 1) = s * q[2];
            f.DA(1, 0) = -s * q[2];
            f.DA(2, 0) = -s * q[1];
            f.DA(2, 1) = s * q[0];
            break;
        case System::free:
            break;
        }
        return f;
    }

    template <class Q>
    double potential(const Q& q) const { return fields(q).U; }

    /// Magnetic matrix F_ij = d_i A_j - d_j A_i; the Lorentz-type force is F v.
    template <class Q>
    SMat magnetic_matrix(const Q& q) const {
        const SMat DA = fields(q).DA;
        return DA - DA.transpose();
    }

    /// Derivative d_k F of the magnetic matrix.
    template <class Q>
    SMat magnetic_matrix_derivative(const Q& q, int k) const {
        constexpr double tau = 2.0 * std::numbers::pi;
        const int d = dim();
        SMat dF = SMat::Zero(d, d);
        const double s = magnetic_amp_;
        if (system_ == System::magt2 && k == 0) {
            dF(0, 1) = -s * tau * tau * std::cos(tau * q[0]);
            dF(1, 0) = -dF(0, 1);
        } else if (system_ == System::mags2) {
            // F_xy = 2 s z, F_xz = s y, F_yz = -s x
            if (k == 2) dF(0, 1) = 2.0 * s;
            if (k == 1) dF(0, 2) = s;
            if (k == 0) dF(1, 2) = -s;
            dF -= SMat(dF.transpose());
        }
        return dF;
    }

    template <class Q, class V>
    double lagrangian(const Q& q, const V& v) const {
        const FieldEval f = fields(q);
        return 0.5 * v.squaredNorm() + f.A.dot(v) - f.U;
    }

    /// E = d_vL.v - L = 1/2 |v|^2 + U: the magnetic term cancels.
    template <class Q, class V>
    double energy(const Q& q, const V& v) const {
        return 0.5 * v.squaredNorm() + potential(q);
    }

    double energy(const PhaseState& s) const { return energy(s.q, s.v); }

    /// Energy computed from its definition d_vL.v - L, used to cross-check energy().
    double energy_by_definition(const PhaseState& s) const {
        const FieldEval f = fields(s.q);
        const SVec v = s.v;
        const SVec p = v + f.A;  // d_vL
        return p.dot(v) - lagrangian(s.q, s.v);
    }

    /// Acceleration of the Euler-Lagrange flow. On the sphere this is the
    /// constrained ambient dynamics q'' = P_q (F v - grad U) - |v|^2 q.
    template <class Q, class V>
    SVec acceleration(const Q& q, const V& v) const {
        const FieldEval f = fields(q);
        const SMat F = f.DA - f.DA.transpose();
        SVec w = F * SVec(v) - f.grad_U;
        if (space_.is_sphere()) {
            const SVec qq = q;
            w = w - qq * qq.dot(w) - qq * SVec(v).squaredNorm();
        }
        return w;
    }

    /// Partial derivatives of the acceleration: (da/dq, da/dv).
    template <class Q, class V>
    std::pair<SMat, SMat> acceleration_jacobian(const Q& q, const V& v) const {
        const int d = dim();
        const FieldEval f = fields(q);
        const SMat F = f.DA - f.DA.transpose();
        const SVec vv = v;
        SMat dw_dq(d, d);
        for (int k = 0; k < d; ++k) dw_dq.col(k) = magnetic_matrix_derivative(q, k) * vv;
        dw_dq -= f.hess_U;
        if (space_.is_torus()) return {dw_dq, F};

        const SVec qq = q;
        const SVec w = F * vv - f.grad_U;
        const SMat P = SMat::Identity(d, d) - qq * qq.transpose();
        SMat da_dq = P * dw_dq - qq.dot(w) * SMat::Identity(d, d) - qq * w.transpose() -
                     vv.squaredNorm() * SMat::Identity(d, d);
        SMat da_dv = P * F - 2.0 * qq * vv.transpose();
        return {da_dq, da_dv};
    }

private:
    System system_;
    ConfigSpace space_;
    double potential_amp_;
    double magnetic_amp_;
};

/// Numeric overrides accepted by make_system: "potential" and "magnetic"
/// amplitudes, and "dim" for sys-free.
using SystemOverrides = std::map<std::string, double>;

inline LagrangianModel make_system(const std::string& name, const SystemOverrides& overrides = {}) {
    auto get = [&](const char* key, double fallback) {
        auto it = overrides.find(key);
        return it == overrides.end() ? fallback : it->second;
    };
    for (const auto& [key, value] : overrides) {
        if (key != "potential" && key != "magnetic" && key != "dim")
            throw Error(ErrorKind::config, "unknown system parameter '" + key + "'");
        (void)value;
    }
    using S = LagrangianModel::System;
    if (name == "sys-pend") return {S::pend, ConfigSpace::torus(1), get("potential", 1.0), 0.0};
    if (name == "sys-mecht2") return {S::mecht2, ConfigSpace::torus(2), get("potential", 1.0), 0.0};
    if (name == "sys-magt2") return {S::magt2, ConfigSpace::torus(2), 0.0, get("magnetic", 1.0)};
    if (name == "sys-mags2") return {S::mags2, ConfigSpace::sphere(), 0.0, get("magnetic", 1.0)};
    if (name == "sys-free") {
        const double d = get("dim", 2.0);
        return {S::free, ConfigSpace::torus(static_cast<int>(std::lround(d))), 0.0, 0.0};
    }
    throw Error(ErrorKind::config, "unknown system '" + name + "'");
}

}  // namespace waistlab
