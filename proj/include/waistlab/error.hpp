#pragma once

#include <cstdio>
#include <stdexcept>
#include <string>

namespace waistlab {

/// Short scientific rendering of a number for diagnostic messages.
inline std::string fmt_sci(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", x);
    return buf;
}

/// Failure categories raised by the library. The message text of each kind is
/// stable and is what the run records report.
enum class ErrorKind {
    retraction_breakdown,
    loop_too_coarse,
    tolerance_failure,
    blowup,
    not_a_critical_point,
    endpoints_too_far,
    grid_too_coarse,
    bracket_invalid,
    below_critical,
    barrier_collapse,
    newton_stagnation,
    left_basin,
    string_tore,
    budget_exhausted,
    degenerate_endpoints,
    components_differ,
    trivial_pair_ambiguous,
    not_elliptic,
    fit_ill_conditioned,
    fold_suspected,
    degeneracy_hit,
    precondition,
    missing_payload,
    config,
};

inline const char* error_text(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::retraction_breakdown: return "retraction breakdown";
    case ErrorKind::loop_too_coarse: return "loop too coarse";
    case ErrorKind::tolerance_failure: return "tolerance failure";
    case ErrorKind::blowup: return "blowup";
    case ErrorKind::not_a_critical_point: return "not a critical point";
    case ErrorKind::endpoints_too_far: return "endpoints too far";
    case ErrorKind::grid_too_coarse: return "grid too coarse";
    case ErrorKind::bracket_invalid: return "bracket invalid";
    case ErrorKind::below_critical: return "below critical";
    case ErrorKind::barrier_collapse: return "barrier collapse";
    case ErrorKind::newton_stagnation: return "Newton stagnation";
    case ErrorKind::left_basin: return "left basin";
    case ErrorKind::string_tore: return "string tore";
    case ErrorKind::budget_exhausted: return "budget exhausted";
    case ErrorKind::degenerate_endpoints: return "degenerate endpoints";
    case ErrorKind::components_differ: return "components differ";
    case ErrorKind::trivial_pair_ambiguous: return "trivial pair ambiguous";
    case ErrorKind::not_elliptic: return "not elliptic";
    case ErrorKind::fit_ill_conditioned: return "fit ill-conditioned";
    case ErrorKind::fold_suspected: return "fold suspected";
    case ErrorKind::degeneracy_hit: return "degeneracy hit";
    case ErrorKind::precondition: return "precondition violated";
    case ErrorKind::missing_payload: return "missing payload";
    case ErrorKind::config: return "invalid configuration";
    }
    return "unknown error";
}

class Error : public std::runtime_error {
public:
    explicit Error(ErrorKind kind, const std::string& detail = {})
        : std::runtime_error(detail.empty() ? std::string(error_text(kind))
                                            : std::string(error_text(kind)) + ": " + detail),
          kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

}  // namespace waistlab
