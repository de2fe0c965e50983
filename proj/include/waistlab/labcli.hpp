#pragma once

// Experiment runs: resolved JSON configuration, named protocols composed
// from the numerical modules, and the run directory (config.json,
// records.jsonl, result.json, summary.csv).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>

#include <json.hpp>

#include "waistlab/critvals.hpp"
#include "waistlab/floquet.hpp"
#include "waistlab/orbits.hpp"

namespace waistlab::lab {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

inline constexpr const char* kResultSchema = "waistlab.result/1";

enum class ExitCode : int { ok = 0, failure = 1, config = 2, no_result = 3, protocol_error = 4 };

inline const std::vector<std::string>& protocols() {
    static const std::vector<std::string> names{"critvals", "waist", "minmax", "cylinder", "struwe", "floquet", "aubry"};
    return names;
}

/// Every knob with its default. A null energy means "auto".
inline json default_config() {
    return json::parse(R"({
  "system": "sys-pend",
  "system_params": {},
  "protocol": "critvals",
  "seed": 1,
  "output_dir": "runs/default",
  "threads": 0,
  "energy": null,
  "critvals": {
    "scope": "both",
    "method": "both",
    "tol": 0.001,
    "bracket_below": 0.1,
    "bracket_above": 5.0,
    "graph_n": 32,
    "loop_points": 32,
    "random_loops": 2,
    "winding_box": 2,
    "max_iterations": 400,
    "waist_threshold": false,
    "threshold_step": 0.05,
    "threshold_max": 1.0,
    "export_potential": false
  },
  "orbits": {
    "tau_min": 0.1,
    "seeds": 32,
    "budget": 3000,
    "points": 0,
    "scope": "all",
    "winding": null,
    "winding_box": 1,
    "rho": 0.01,
    "certificate_samples": 64,
    "aubry_seeds": true
  },
  "minmax": {
    "iterate": 2,
    "knots": 16,
    "budget": 2000,
    "grad_tol": 0.0001,
    "jitter": 0.0,
    "climb_step": 1.0
  },
  "cylinder": {
    "e_lo": null,
    "e_hi": null,
    "width": 0.05,
    "steps": 8,
    "require_nondegenerate": true
  },
  "struwe": {
    "m": 2,
    "monotone_tol": 1e-6
  },
  "floquet": {
    "strobe_period": 0.3,
    "fit_radius": 0.0,
    "samples": 16,
    "birkhoff_lewis": true,
    "max_denominator": 24
  },
  "aubry": {
    "graph_n": 32,
    "tol": 0.002,
    "c_est": null
  }
})");
}

namespace detail {

[[noreturn]] inline void config_error(const std::string& field, const std::string& msg) {
    throw Error(ErrorKind::config, field + ": " + msg);
}

/// Recursively checks `user` against `defaults`: unknown keys and type
/// mismatches are errors; null defaults accept numbers, strings and arrays.
inline void merge_checked(json& base, const json& user, const std::string& prefix) {
    if (!user.is_object()) config_error(prefix.empty() ? "<root>" : prefix, "expected an object");
    for (const auto& [key, value] : user.items()) {
        const std::string field = prefix.empty() ? key : prefix + "." + key;
        if (!base.contains(key)) config_error(field, "unknown field");
        json& slot = base[key];
        if (key == "system_params" && prefix.empty()) {
            if (!value.is_object()) config_error(field, "expected an object");
            for (const auto& [pk, pv] : value.items())
                if (!pv.is_number()) config_error(field + "." + pk, "expected a number");
            slot = value;
            continue;
        }
        if (slot.is_object()) {
            merge_checked(slot, value, field);
        } else if (slot.is_null() || value.is_null()) {
            slot = value;
        } else if (slot.is_boolean()) {
            if (!value.is_boolean()) config_error(field, "expected true or false");
            slot = value;
        } else if (slot.is_number()) {
            if (!value.is_number()) config_error(field, "expected a number");
            if (slot.is_number_integer() && !value.is_number_integer()) config_error(field, "expected an integer");
            slot = value;
        } else if (slot.is_string()) {
            if (!value.is_string()) config_error(field, "expected a string");
            slot = value;
        } else {
            slot = value;
        }
    }
}

}  // namespace detail

/// Applies one "a.b.c=value" override; the value is parsed as JSON when
/// possible, otherwise taken as a string.
inline void apply_override(json& user, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) detail::config_error(assignment, "override must look like key=value");
    const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    json* node = &user;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
        node = &(*node)[parts[i]];
    }
    (*node)[parts.back()] = value;
}

/// Defaults merged with the user document, validated field by field.
inline json resolve_config(const json& user) {
    json cfg = default_config();
    detail::merge_checked(cfg, user, "");
    const std::string protocol = cfg["protocol"].get<std::string>();
    if (std::find(protocols().begin(), protocols().end(), protocol) == protocols().end())
        detail::config_error("protocol", "unknown protocol '" + protocol + "'");
    try {
        std::map<std::string, double> params;
        for (const auto& [k, v] : cfg["system_params"].items()) params[k] = v.get<double>();
        make_system(cfg["system"].get<std::string>(), params);
    } catch (const Error& err) {
        const std::string msg = err.what(), prefix = std::string(error_text(ErrorKind::config)) + ": ";
        detail::config_error("system", msg.rfind(prefix, 0) == 0 ? msg.substr(prefix.size()) : msg);
    }
    if (!cfg["energy"].is_null() && !cfg["energy"].is_number()) detail::config_error("energy", "expected a number or null");
    auto in = [&](const std::string& field, const std::string& v, std::initializer_list<const char*> allowed) {
        for (const char* a : allowed)
            if (v == a) return;
        detail::config_error(field, "invalid value '" + v + "'");
    };
    in("critvals.scope", cfg["critvals"]["scope"], {"contractible", "all", "both"});
    in("critvals.method", cfg["critvals"]["method"], {"loops", "graph", "both"});
    in("orbits.scope", cfg["orbits"]["scope"], {"contractible", "all"});
    auto positive = [&](const std::string& section, const std::string& key) {
        if (!(cfg[section][key].get<double>() > 0)) detail::config_error(section + "." + key, "must be positive");
    };
    positive("critvals", "tol");
    positive("critvals", "graph_n");
    positive("minmax", "knots");
    positive("cylinder", "steps");
    positive("aubry", "graph_n");
    if (cfg["orbits"]["tau_min"].get<double>() < 0) detail::config_error("orbits.tau_min", "must be nonnegative");
    if (cfg["orbits"]["seeds"].get<int>() < 0) detail::config_error("orbits.seeds", "must be nonnegative");
    const json& w = cfg["orbits"]["winding"];
    if (!w.is_null() && (!w.is_array() || !std::all_of(w.begin(), w.end(), [](const json& x) { return x.is_number_integer(); })))
        detail::config_error("orbits.winding", "expected null or an integer array");
    if (!cfg["aubry"]["c_est"].is_null() && !cfg["aubry"]["c_est"].is_number())
        detail::config_error("aubry.c_est", "expected a number or null");
    for (const char* k : {"e_lo", "e_hi"})
        if (!cfg["cylinder"][k].is_null() && !cfg["cylinder"][k].is_number())
            detail::config_error(std::string("cylinder.") + k, "expected a number or null");
    return cfg;
}

// ---------------------------------------------------------------------------
// Serialization

inline json complex_list(const std::vector<Complex>& v) {
    json out = json::array();
    for (const Complex& c : v) out.push_back({c.real(), c.imag()});
    return out;
}

inline json vec_json(const Vec& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
    return out;
}

inline json loop_json(const DiscreteLoop& loop) {
    json pts = json::array();
    for (int k = 0; k < loop.size(); ++k) pts.push_back(vec_json(loop.points.row(k).transpose()));
    return {{"period", loop.period()}, {"winding", loop.tag.winding}, {"points", pts}};
}

inline json orbit_json(const OrbitRecord& r, bool with_loop = true) {
    json j = {{"energy", r.energy},
              {"period", r.period},
              {"action", r.action},
              {"discrete_action", r.discrete_action},
              {"energy_residual", r.energy_residual},
              {"shooting_residual", r.shooting_residual},
              {"period_map_defect", r.period_map_defect},
              {"index", r.index},
              {"nullity_total", r.nullity_total},
              {"index_fixed_period", r.index_fixed_period},
              {"nullity_fixed_period", r.nullity_fixed_period},
              {"is_waist", r.is_waist},
              {"winding", r.tag().winding},
              {"stability", to_string(r.stability.cls)},
              {"four_elementary", r.stability.four_elementary},
              {"multipliers", complex_list(r.stability.multipliers)},
              {"reduced_multipliers", complex_list(r.stability.reduced_multipliers)},
              {"state0", {{"q", vec_json(r.state0.q)}, {"v", vec_json(r.state0.v)}}}};
    if (with_loop) j["loop"] = loop_json(r.loop);
    return j;
}

inline json bracket_json(const Bracket& b) {
    json trace = json::array();
    for (const auto& p : b.trace)
        trace.push_back({{"e", p.e}, {"negative", p.negative}, {"witness_action", p.witness_action},
                         {"witness_winding", p.witness_winding}});
    return {{"method", b.method}, {"lo", b.lo}, {"hi", b.hi}, {"monotone", b.monotone}, {"trace", trace}};
}

inline json estimate_json(const CriticalEstimate& c) {
    json j = {{"scope", to_string(c.scope)}, {"method", to_string(c.method)}, {"lo", c.lo}, {"hi", c.hi},
              {"value", c.value()}, {"overlap", c.overlap}, {"provenance", c.provenance}};
    if (c.loops) j["loops"] = bracket_json(*c.loops);
    if (c.graph) j["graph"] = bracket_json(*c.graph);
    return j;
}

/// Flat table: the payload's tabular view, source of summary.csv.
struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<json>> rows;

    json to_json() const { return {{"columns", columns}, {"rows", rows}}; }
    static Table from_json(const json& j) {
        Table t;
        t.columns = j.at("columns").get<std::vector<std::string>>();
        for (const auto& r : j.at("rows")) t.rows.push_back(r.get<std::vector<json>>());
        return t;
    }
};

/// RFC 4180 field: numbers with 17 significant digits, strings quoted when needed.
inline std::string csv_field(const json& v) {
    if (v.is_null()) return "";
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    if (v.is_number()) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v.get<double>());
        return buf;
    }
    std::string s = v.is_string() ? v.get<std::string>() : v.dump();
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::string table_csv(const Table& t) {
    std::string out;
    for (std::size_t i = 0; i < t.columns.size(); ++i) out += (i ? "," : "") + csv_field(t.columns[i]);
    out += "\r\n";
    for (const auto& row : t.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + csv_field(row[i]);
        out += "\r\n";
    }
    return out;
}

inline std::string table_jsonl(const Table& t) {
    std::string out;
    for (const auto& row : t.rows) {
        json obj = json::object();
        for (std::size_t i = 0; i < t.columns.size(); ++i) obj[t.columns[i]] = row[i];
        out += obj.dump() + "\n";
    }
    return out;
}

/// Single writer of records.jsonl with a strictly increasing step counter.
class EventLog {
public:
    EventLog() = default;
    explicit EventLog(const fs::path& path) : out_(path, std::ios::trunc) {}

    void emit(const std::string& event, json data = json::object()) {
        std::lock_guard lock(mutex_);
        json line = {{"step", step_++}, {"event", event}};
        for (auto& [k, v] : data.items()) line[k] = v;
        if (out_) out_ << line.dump() << "\n";
    }
    long steps() const { return step_; }

private:
    std::ofstream out_;
    std::mutex mutex_;
    long step_ = 0;
};

// ---------------------------------------------------------------------------
// Protocols

struct RunRecord {
    json config;
    json result;
    Table table;
    ExitCode exit = ExitCode::ok;
    long events = 0;
    double wall_seconds = 0.0;
};

class Runner {
public:
    Runner(const json& cfg, EventLog& log)
        : cfg_(cfg), log_(log), model_(make_model(cfg)), seed_(cfg["seed"].get<std::uint64_t>()),
          threads_(cfg["threads"].get<int>()) {}

    /// Runs the protocol; fills payload and table.
    void run(json& payload, Table& table) {
        const std::string p = cfg_["protocol"];
        if (p == "critvals") critvals(payload, table);
        else if (p == "waist") waist(payload, table);
        else if (p == "minmax") minmax(payload, table);
        else if (p == "cylinder") cylinder(payload, table);
        else if (p == "struwe") struwe(payload, table);
        else if (p == "floquet") floquet(payload, table);
        else aubry(payload, table);
    }

    bool not_found = false;

private:
    static LagrangianModel make_model(const json& cfg) {
        std::map<std::string, double> params;
        for (const auto& [k, v] : cfg["system_params"].items()) params[k] = v.get<double>();
        return make_system(cfg["system"].get<std::string>(), params);
    }

    CriticalOptions critical_options() const {
        const json& c = cfg_["critvals"];
        CriticalOptions o;
        o.tol = c["tol"];
        o.bracket_below = c["bracket_below"];
        o.bracket_above = c["bracket_above"];
        o.graph_n = c["graph_n"];
        o.loop_points = c["loop_points"];
        o.random_loops = c["random_loops"];
        o.winding_box = c["winding_box"];
        o.max_iterations = c["max_iterations"];
        o.seed = seed_;
        o.graph.threads = threads_;
        return o;
    }

    /// Graph estimate of c over all classes (shared by energy selection and Aubry seeds).
    const CriticalEstimate& graph_c() {
        if (!graph_c_) {
            graph_c_ = mane_critical(model_, Scope::all, CriticalMethod::graph, critical_options());
            log_.emit("critical_estimate", estimate_json(*graph_c_));
        }
        return *graph_c_;
    }

    /// Configured energy, or c* + max(0.05 (c* - e0), 0.25) from the graph estimate.
    double energy() {
        if (!cfg_["energy"].is_null()) return cfg_["energy"].get<double>();
        if (!energy_) {
            const double e0v = e0(model_).value;
            const double c = graph_c().value();
            energy_ = c + std::max(0.05 * (c - e0v), c - e0v > 1e-2 ? 0.0 : 0.25);
            log_.emit("energy_selected", {{"e", *energy_}, {"c_star", c}, {"e0", e0v}});
        }
        return *energy_;
    }

    WaistOptions waist_options() {
        const json& o = cfg_["orbits"];
        WaistOptions w;
        w.tau_min = o["tau_min"];
        w.seeds = o["seeds"];
        w.budget = o["budget"];
        const int pts = o["points"];
        w.points = pts > 0 ? pts : (model_.space().is_sphere() ? 64 : 48);
        w.scope = o["scope"] == "contractible" ? Scope::contractible : Scope::all;
        if (!o["winding"].is_null()) w.winding = o["winding"].get<std::vector<int>>();
        w.winding_box = o["winding_box"];
        w.rho = o["rho"];
        w.certificate_samples = o["certificate_samples"];
        w.seed = seed_;
        w.threads = threads_;
        if (o["aubry_seeds"].get<bool>()) {
            try {
                const CriticalEstimate& c = graph_c();
                const AubrySet a = aubry_points(model_, c.graph->hi, cfg_["critvals"]["graph_n"].get<int>(),
                                                cfg_["aubry"]["tol"].get<double>(), aubry_potential_options(),
                                                w.points);
                for (std::size_t i = 0; i < a.cycles.size() && i < 4; ++i) {
                    const DiscreteLoop& l = a.cycles[i].loop;
                    if (w.scope == Scope::contractible && !l.tag.contractible()) continue;
                    if (w.winding && l.tag.winding != *w.winding) continue;
                    w.extra_seeds.push_back(l);
                }
                log_.emit("aubry_seeds", {{"count", w.extra_seeds.size()}});
            } catch (const Error& err) {
                log_.emit("aubry_seeds", {{"count", 0}, {"error", err.what()}});
            }
        }
        return w;
    }

    PotentialOptions aubry_potential_options() const {
        PotentialOptions o;
        o.graph.threads = threads_;
        return o;
    }

    /// Finds the waist at the run energy; records NotFound and returns nullopt.
    std::optional<OrbitRecord> find_run_waist(json& payload, double e) {
        const WaistSearch s = find_waist(model_, e, waist_options());
        json cands = json::array();
        for (const auto& c : s.candidates) {
            json cj = {{"seed", c.seed}, {"status", c.status}, {"action", c.action}, {"period", c.period},
                       {"index", c.index}, {"nullity", c.nullity}, {"winding", c.winding}};
            log_.emit("waist_candidate", cj);
            cands.push_back(cj);
        }
        payload["candidates"] = cands;
        if (!s.found()) {
            not_found = true;
            payload["not_found"] = {{"best_index", s.best_index ? json(*s.best_index) : json()},
                                    {"best_action", s.best_action ? json(*s.best_action) : json()},
                                    {"collapsed", s.collapsed}};
            return std::nullopt;
        }
        payload["waist"] = orbit_json(*s.orbit);
        payload["certificate"] = {{"rho", s.certificate.rho}, {"samples", s.certificate.samples},
                                  {"center", s.certificate.center}, {"min_sample", s.certificate.min_sample},
                                  {"margin", s.certificate.margin}, {"passed", s.certificate.passed}};
        return s.orbit;
    }

    static std::vector<std::string> orbit_columns() {
        return {"e", "period", "action", "index", "nullity_total", "class", "energy_residual", "is_waist"};
    }
    static std::vector<json> orbit_row(const OrbitRecord& r) {
        return {r.energy, r.period, r.action, r.index, r.nullity_total, to_string(r.stability.cls), r.energy_residual,
                r.is_waist};
    }

    void critvals(json& payload, Table& table) {
        const json& c = cfg_["critvals"];
        const E0Report e0r = e0(model_);
        payload["e0"] = {{"value", e0r.value}, {"argmax", vec_json(e0r.argmax)}, {"residual", e0r.residual}};
        log_.emit("e0", payload["e0"]);
        const CriticalMethod method = c["method"] == "loops"   ? CriticalMethod::loops
                                      : c["method"] == "graph" ? CriticalMethod::graph
                                                               : CriticalMethod::both;
        const std::string scope = c["scope"];
        const CriticalOptions opts = critical_options();
        table.columns = {"quantity", "lo", "hi", "value", "scope", "method", "provenance"};
        table.rows.push_back({"e0", e0r.value, e0r.value, e0r.value, "", "", "grid max with local ascent"});
        std::optional<CriticalEstimate> contractible, all;
        auto record = [&](const char* name, const CriticalEstimate& est) {
            payload[name] = estimate_json(est);
            for (const Bracket* b : {est.loops ? &*est.loops : nullptr, est.graph ? &*est.graph : nullptr})
                if (b)
                    for (const auto& p : b->trace)
                        log_.emit("probe", {{"quantity", name}, {"method", b->method}, {"e", p.e}, {"negative", p.negative}});
            table.rows.push_back({name, est.lo, est.hi, est.value(), to_string(est.scope), to_string(est.method),
                                  est.provenance});
        };
        if (scope != "all" || model_.space().is_sphere()) {
            contractible = mane_critical(model_, Scope::contractible, method, opts);
            record("c_contractible", *contractible);
        }
        if (scope != "contractible") {
            if (model_.space().is_sphere() && contractible) {
                all = contractible;
                payload["c_all"] = payload["c_contractible"];
                payload["c_all"]["provenance"] = "alias of c_contractible (all loops are contractible)";
                table.rows.push_back({"c_all", all->lo, all->hi, all->value(), "all", to_string(all->method),
                                      "alias of c_contractible"});
            } else {
                all = mane_critical(model_, Scope::all, method, opts);
                record("c_all", *all);
            }
        }
        payload["aliases"] = {{"c_u", "c_contractible"}, {"c_0", model_.space().is_sphere() ? "c_contractible" : "c_all"}};
        if (contractible && all) {
            const double tol = c["tol"].get<double>();
            payload["ordered"] = e0r.value <= contractible->hi + tol && contractible->lo <= all->hi + tol;
        }
        if (c["waist_threshold"].get<bool>() && all) {
            const WaistThreshold wt = waist_threshold(model_, all->hi + c["threshold_step"].get<double>(),
                                                      c["threshold_step"], c["threshold_max"], waist_options());
            payload["waist_threshold"] = wt.value ? json(*wt.value) : json();
            table.rows.push_back({"waist_threshold", payload["waist_threshold"], payload["waist_threshold"],
                                  payload["waist_threshold"], "", "scan", "largest e with a waist found"});
        } else {
            payload["waist_threshold"] = nullptr;
        }
        if (c["export_potential"].get<bool>() && all) {
            const PotentialGrid pg = action_potential(model_, all->hi, c["graph_n"], aubry_potential_options());
            std::ostringstream os;
            pg.write_csv(os);
            potential_csv = os.str();
            payload["potential_csv"] = "potential.csv";
        }
    }

    void waist(json& payload, Table& table) {
        const double e = energy();
        payload["energy"] = e;
        table.columns = orbit_columns();
        table.columns.push_back("certificate_margin");
        if (const auto w = find_run_waist(payload, e)) {
            auto row = orbit_row(*w);
            row.push_back(payload["certificate"]["margin"]);
            table.rows.push_back(row);
        }
    }

    void minmax(json& payload, Table& table) {
        const json& c = cfg_["minmax"];
        const double e = energy();
        payload["energy"] = e;
        table.columns = {"e", "s_value", "action_a", "action_b", "converged", "sweeps", "critical_index"};
        const auto w = find_run_waist(payload, e);
        if (!w) return;
        const int k = c["iterate"];
        const DiscreteLoop b = iterate_loop(w->loop, k);
        const DiscreteLoop a = resample_loop(w->loop, b.size());
        MountainPassOptions o;
        o.knots = c["knots"];
        o.budget = c["budget"];
        o.grad_tol = c["grad_tol"];
        o.jitter = c["jitter"];
        o.climb_step = c["climb_step"];
        o.seed = seed_;
        const MountainPassResult r = mountain_pass(model_, e, a, b, o);
        for (std::size_t i = 0; i < r.trace.size(); ++i) log_.emit("string_sweep", {{"sweep", i}, {"value", r.trace[i]}});
        const double sa = action(model_, a, e), sb = action(model_, b, e);
        json profile = json::array();
        for (double v : r.string.values) profile.push_back(v);
        payload["minmax"] = {{"iterate", k}, {"s_value", r.s_value}, {"action_a", sa}, {"action_b", sb},
                             {"converged", r.converged}, {"budget_exhausted", r.budget_exhausted},
                             {"sweeps", r.sweeps}, {"top_gradient", r.top_gradient}, {"profile", profile},
                             {"critical", r.critical ? orbit_json(*r.critical) : json()},
                             {"refine_error", r.refine_error}};
        table.rows.push_back({e, r.s_value, sa, sb, r.converged, r.sweeps,
                              r.critical ? json(r.critical->index) : json()});
    }

    CylinderBranch run_cylinder(json& payload, double e, const OrbitRecord& w) {
        const json& c = cfg_["cylinder"];
        const double width = c["width"];
        const double lo = c["e_lo"].is_null() ? e - width * (e - e0(model_).value) - 1e-3 : c["e_lo"].get<double>();
        const double hi = c["e_hi"].is_null() ? e + width * std::max(e, 0.1) : c["e_hi"].get<double>();
        ContinuationOptions co;
        co.require_nondegenerate = c["require_nondegenerate"];
        const CylinderBranch br = continue_cylinder(model_, w, std::max(lo, e0(model_).value + 1e-6), hi,
                                                    c["steps"], co);
        json samples = json::array();
        for (std::size_t i = 0; i < br.samples.size(); ++i) {
            const auto& s = br.samples[i];
            json sj = orbit_json(s.orbit, false);
            sj["d_action_d_e"] = std::isnan(br.d_action_d_e[i]) ? json() : json(br.d_action_d_e[i]);
            sj["identity_error"] = std::isnan(br.identity_error[i]) ? json() : json(br.identity_error[i]);
            log_.emit("cylinder_sample", {{"e", s.e}, {"period", s.orbit.period}, {"action", s.orbit.action}});
            samples.push_back(sj);
        }
        payload["cylinder"] = {{"samples", samples}, {"index_constant", br.index_constant},
                               {"class_constant", br.class_constant}, {"max_loop_jump", br.max_loop_jump}};
        return br;
    }

    void cylinder(json& payload, Table& table) {
        const double e = energy();
        payload["energy"] = e;
        table.columns = {"e", "period", "action", "index", "class", "d_action_d_e", "identity_error",
                         "lead_multiplier_abs", "lead_multiplier_arg"};
        const auto w = find_run_waist(payload, e);
        if (!w) return;
        const CylinderBranch br = run_cylinder(payload, e, *w);
        for (std::size_t i = 0; i < br.samples.size(); ++i) {
            const auto& s = br.samples[i];
            // Leading reduced multiplier: largest modulus, ties by argument.
            json lead_abs, lead_arg;
            const auto& red = s.orbit.stability.reduced_multipliers;
            if (!red.empty()) {
                const Complex l = *std::max_element(red.begin(), red.end(), [](Complex a, Complex b) {
                    return std::abs(a) != std::abs(b) ? std::abs(a) < std::abs(b) : std::arg(a) < std::arg(b);
                });
                lead_abs = std::abs(l);
                lead_arg = std::arg(l);
            }
            table.rows.push_back({s.e, s.orbit.period, s.orbit.action, s.orbit.index, to_string(s.orbit.stability.cls),
                                  payload["cylinder"]["samples"][i]["d_action_d_e"],
                                  payload["cylinder"]["samples"][i]["identity_error"], lead_abs, lead_arg});
        }
    }

    void struwe(json& payload, Table& table) {
        const double e = energy();
        payload["energy"] = e;
        table.columns = {"e", "s_value", "waist_action", "iterate_action", "converged"};
        const auto w = find_run_waist(payload, e);
        if (!w) return;
        const CylinderBranch br = run_cylinder(payload, e, *w);
        std::vector<double> energies;
        for (const auto& s : br.samples) energies.push_back(s.e);
        const json& mc = cfg_["minmax"];
        MountainPassOptions o;
        o.knots = mc["knots"];
        o.budget = mc["budget"];
        o.grad_tol = mc["grad_tol"];
        o.jitter = mc["jitter"];
        o.climb_step = mc["climb_step"];
        o.seed = seed_;
        const StruweScan scan = struwe_scan(model_, cfg_["struwe"]["m"], energies, br, o,
                                            cfg_["struwe"]["monotone_tol"]);
        json rows = json::array();
        for (const auto& r : scan.rows) {
            json rj = {{"e", r.e}, {"s_value", r.s_value}, {"waist_action", r.waist_action},
                       {"iterate_action", r.iterate_action}, {"converged", r.converged}};
            log_.emit("struwe_row", rj);
            rows.push_back(rj);
            table.rows.push_back({r.e, r.s_value, r.waist_action, r.iterate_action, r.converged});
        }
        payload["struwe"] = {{"m", scan.m}, {"rows", rows}, {"monotone", scan.monotone}};
    }

    void floquet(json& payload, Table& table) {
        const json& c = cfg_["floquet"];
        table.columns = {"kind", "re", "im", "abs"};
        StabilityReport st;
        PlanarMap pm;
        std::optional<SectionMap> section;
        double fit_radius = c["fit_radius"];
        if (model_.dim() == 1) {
            // Strobe map of the elliptic equilibrium (minimum of U).
            const Mat grid = torus_grid(1, 512);
            double best = std::numeric_limits<double>::infinity(), q_star = 0.0;
            for (Eigen::Index i = 0; i < grid.rows(); ++i) {
                const double u = model_.potential(grid.row(i).transpose());
                if (u < best) best = u, q_star = grid(i, 0);
            }
            const double T = c["strobe_period"];
            st = classify_orbit(model_, PhaseState{Vec::Constant(1, q_star), Vec::Zero(1)}, T);
            pm = stroboscopic_map(model_, q_star, T);
            payload["equilibrium"] = {{"q", q_star}, {"strobe_period", T}};
            if (fit_radius <= 0) fit_radius = 0.5;
        } else {
            const double e = energy();
            payload["energy"] = e;
            const auto w = find_run_waist(payload, e);
            if (!w) return;
            st = w->stability;
            if (st.cls == StabilityClass::elliptic || st.cls == StabilityClass::quasi_elliptic) {
                section.emplace(model_, *w);
                pm = section->planar();
            }
            if (fit_radius <= 0) fit_radius = 0.05;
        }
        payload["stability"] = {{"class", to_string(st.cls)}, {"four_elementary", st.four_elementary},
                                {"multipliers", complex_list(st.multipliers)},
                                {"reduced_multipliers", complex_list(st.reduced_multipliers)},
                                {"unit_multiplicity", st.unit_multiplicity}, {"determinant", st.determinant}};
        for (const Complex& l : st.multipliers) table.rows.push_back({"multiplier", l.real(), l.imag(), std::abs(l)});
        for (const Complex& l : st.reduced_multipliers)
            table.rows.push_back({"reduced_multiplier", l.real(), l.imag(), std::abs(l)});
        if (!pm.map) {
            payload["twist"] = {{"skipped", "orbit is not elliptic"}};
            return;
        }
        try {
            const TwistFit f = twist_fit(pm, fit_radius, c["samples"]);
            payload["twist"] = {{"rotation", f.rotation}, {"twist", f.twist}, {"twist_stderr", f.twist_stderr},
                                {"fit_radius", f.fit_radius}, {"fit_residual", f.fit_residual}, {"nonzero", f.nonzero}};
            table.rows.push_back({"twist", f.twist, 0.0, std::abs(f.twist)});
            if (c["birkhoff_lewis"].get<bool>() && f.nonzero) {
                BirkhoffLewisOptions bo;
                bo.max_denominator = c["max_denominator"];
                const auto subs = birkhoff_lewis_probe(pm, st, f, bo);
                json list = json::array();
                for (const auto& s : subs) {
                    json sj = {{"point", {s.point[0], s.point[1]}}, {"iterates", s.iterates}, {"winding", s.winding},
                               {"return_period", s.return_period},
                               {"orbit_period", s.orbit ? json(s.orbit->period) : json()}};
                    log_.emit("subharmonic", sj);
                    list.push_back(sj);
                    table.rows.push_back({"subharmonic " + std::to_string(s.winding) + "/" + std::to_string(s.iterates),
                                          s.point[0], s.point[1], s.point.norm()});
                }
                payload["subharmonics"] = list;
            }
        } catch (const Error& err) {
            payload["twist"] = {{"error", err.what()}};
        }
    }

    void aubry(json& payload, Table& table) {
        const json& c = cfg_["aubry"];
        const double c_est = c["c_est"].is_null() ? graph_c().graph->hi : c["c_est"].get<double>();
        const AubrySet a = aubry_points(model_, c_est, c["graph_n"], c["tol"], aubry_potential_options());
        payload["c_est"] = c_est;
        table.columns = {"node", "mean_energy", "cycle_length"};
        const Mat grid = configuration_grid(model_.space(), c["graph_n"]);
        for (int i = 0; i < grid.cols(); ++i) table.columns.push_back("q" + std::to_string(i));
        json nodes = json::array();
        for (const auto& cy : a.cycles) {
            json nj = {{"node", cy.node}, {"q", vec_json(grid.row(cy.node).transpose())},
                       {"mean_energy", cy.mean_energy}, {"cycle", cy.cycle}};
            nodes.push_back(nj);
            std::vector<json> row{cy.node, cy.mean_energy, static_cast<int>(cy.cycle.size())};
            for (int i = 0; i < grid.cols(); ++i) row.push_back(grid(cy.node, i));
            table.rows.push_back(row);
        }
        payload["nodes"] = a.nodes;
        payload["cycles"] = nodes;
    }

    json cfg_;
    EventLog& log_;
    LagrangianModel model_;
    std::uint64_t seed_;
    int threads_;
    std::optional<CriticalEstimate> graph_c_;
    std::optional<double> energy_;

public:
    std::string potential_csv;
};

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::config, "output_dir: cannot write " + path.string());
    out << text;
}

/// Executes a resolved configuration and writes the run directory.
inline RunRecord run(const json& cfg) {
    RunRecord rec;
    rec.config = cfg;
    const fs::path dir = cfg["output_dir"].get<std::string>();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::config, "output_dir: " + ec.message());
    write_text(dir / "config.json", cfg.dump(2) + "\n");
    EventLog log(dir / "records.jsonl");
    const auto t0 = std::chrono::steady_clock::now();
    log.emit("run_start", {{"system", cfg["system"]}, {"protocol", cfg["protocol"]}, {"seed", cfg["seed"]}});
    json payload = json::object();
    json result = {{"schema", kResultSchema}, {"system", cfg["system"]}, {"protocol", cfg["protocol"]},
                   {"seed", cfg["seed"]}, {"status", "ok"}};
    std::string potential_csv;
    try {
        Runner runner(cfg, log);
        runner.run(payload, rec.table);
        potential_csv = runner.potential_csv;
        if (runner.not_found) {
            result["status"] = "not_found";
            rec.exit = ExitCode::no_result;
        }
    } catch (const Error& err) {
        result["status"] = "error";
        result["error"] = {{"kind", error_text(err.kind())}, {"message", err.what()}};
        log.emit("error", result["error"]);
        rec.exit = ExitCode::protocol_error;
    }
    result["payload"] = payload;
    result["table"] = rec.table.to_json();
    rec.result = result;
    write_text(dir / "result.json", result.dump(2) + "\n");
    write_text(dir / "summary.csv", table_csv(rec.table));
    if (!potential_csv.empty()) write_text(dir / "potential.csv", potential_csv);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.emit("run_end", {{"status", result["status"]}, {"wall_seconds", rec.wall_seconds}});
    rec.events = log.steps();
    return rec;
}

/// Re-emits the flat table of a run from result.json: summary.csv (csv) or
/// summary.jsonl (jsonl). Returns the written path.
inline fs::path export_run(const fs::path& dir, const std::string& what) {
    const fs::path src = dir / "result.json";
    std::ifstream in(src);
    if (!in) throw Error(ErrorKind::missing_payload, src.string());
    json result;
    try {
        result = json::parse(in);
    } catch (const json::parse_error&) {
        throw Error(ErrorKind::missing_payload, "unreadable " + src.string());
    }
    if (!result.contains("table")) throw Error(ErrorKind::missing_payload, "no table in " + src.string());
    const Table t = Table::from_json(result["table"]);
    if (what == "csv") {
        write_text(dir / "summary.csv", table_csv(t));
        return dir / "summary.csv";
    }
    if (what == "jsonl") {
        write_text(dir / "summary.jsonl", table_jsonl(t));
        return dir / "summary.jsonl";
    }
    throw Error(ErrorKind::config, "export: unknown format '" + what + "'");
}

}  // namespace waistlab::lab
