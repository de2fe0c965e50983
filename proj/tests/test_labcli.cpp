#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "waistlab/labcli.hpp"

using namespace waistlab;
namespace lab = waistlab::lab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("waistlab_test_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

lab::json config(const std::string& system, const std::string& protocol, const fs::path& out, lab::json extra = {}) {
    lab::json user = {{"system", system}, {"protocol", protocol}, {"output_dir", out.string()}};
    if (extra.is_object()) user.update(extra, true);
    return lab::resolve_config(user);
}

/// Minimal RFC 4180 reader.
std::vector<std::vector<std::string>> read_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows(1);
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') field += '"', ++i;
            else if (c == '"') quoted = false;
            else field += c;
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            rows.back().push_back(field), field.clear();
        } else if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
            rows.back().push_back(field), field.clear();
            rows.emplace_back();
            ++i;
        } else {
            field += c;
        }
    }
    if (rows.back().empty()) rows.pop_back();
    return rows;
}

void collect_numbers(const lab::json& j, std::vector<double>& out) {
    if (j.is_number()) out.push_back(j.get<double>());
    else if (j.is_structured())
        for (const auto& v : j) collect_numbers(v, out);
}

#ifdef WAISTLAB_CLI
int cli(const std::string& args) {
    const int rc = std::system((std::string(WAISTLAB_CLI) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}
#endif

}  // namespace

TEST(Config, DefaultsResolveAndEveryKnobIsDocumented) {
    const lab::json cfg = lab::resolve_config(lab::json::object());
    EXPECT_EQ(cfg, lab::default_config());
    for (const auto& p : lab::protocols()) EXPECT_NO_THROW(lab::resolve_config({{"protocol", p}}));
}

TEST(Config, FieldLevelErrors) {
    auto message = [](const lab::json& user) -> std::string {
        try {
            lab::resolve_config(user);
        } catch (const Error& err) {
            EXPECT_EQ(err.kind(), ErrorKind::config);
            return err.what();
        }
        return "";
    };
    EXPECT_NE(message({{"critvals", {{"tol", "small"}}}}).find("critvals.tol"), std::string::npos);
    EXPECT_NE(message({{"orbits", {{"nonsense", 1}}}}).find("orbits.nonsense"), std::string::npos);
    EXPECT_NE(message({{"protocol", "dance"}}).find("protocol"), std::string::npos);
    EXPECT_NE(message({{"system", "sys-none"}}).find("system"), std::string::npos);
    EXPECT_NE(message({{"critvals", {{"graph_n", 2.5}}}}).find("integer"), std::string::npos);
    EXPECT_NE(message({{"orbits", {{"winding", {1, 0.5}}}}}).find("orbits.winding"), std::string::npos);
    EXPECT_NE(message({{"minmax", {{"knots", 0}}}}).find("minmax.knots"), std::string::npos);
}

TEST(Config, OverridesParseJsonValues) {
    lab::json user = lab::json::object();
    lab::apply_override(user, "orbits.tau_min=0.25");
    lab::apply_override(user, "orbits.winding=[0,1]");
    lab::apply_override(user, "critvals.scope=all");
    lab::apply_override(user, "system_params.magnetic=2");
    const lab::json cfg = lab::resolve_config(user);
    EXPECT_DOUBLE_EQ(cfg["orbits"]["tau_min"].get<double>(), 0.25);
    EXPECT_EQ(cfg["orbits"]["winding"], lab::json({0, 1}));
    EXPECT_EQ(cfg["critvals"]["scope"], "all");
    EXPECT_THROW(lab::apply_override(user, "novalue"), Error);
}

TEST(Csv, Rfc4180FieldsAndDigits) {
    EXPECT_EQ(lab::csv_field(0.1), "0.10000000000000001");
    EXPECT_EQ(lab::csv_field(2.0), "2");
    EXPECT_EQ(lab::csv_field(7), "7");
    EXPECT_EQ(lab::csv_field(nullptr), "");
    EXPECT_EQ(lab::csv_field("a,b"), "\"a,b\"");
    EXPECT_EQ(lab::csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    lab::Table t{{"x", "label"}, {{1.5, "p,q"}, {-3e-20, "plain"}}};
    const auto rows = read_csv(lab::table_csv(t));
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[1][1], "p,q");
    EXPECT_DOUBLE_EQ(std::stod(rows[2][0]), -3e-20);
}

TEST(Run, PendulumCriticalValuesAndDeterminism) {
    const fs::path a = scratch("crit_a"), b = scratch("crit_b");
    const lab::RunRecord rec = lab::run(config("sys-pend", "critvals", a));
    EXPECT_EQ(rec.exit, lab::ExitCode::ok);
    const lab::json r = lab::json::parse(slurp(a / "result.json"));
    EXPECT_EQ(r["schema"], lab::kResultSchema);
    EXPECT_EQ(r["status"], "ok");
    EXPECT_EQ(r["payload"]["e0"]["value"].get<double>(), 2.0);
    for (const char* key : {"c_contractible", "c_all"}) {
        EXPECT_LE(r["payload"][key]["lo"].get<double>(), 2.0) << key;
        EXPECT_GE(r["payload"][key]["hi"].get<double>(), 2.0) << key;
    }
    // Config echo is the resolved document.
    EXPECT_EQ(lab::json::parse(slurp(a / "config.json")), rec.config);
    // Same config and seed: byte-identical payload.
    lab::run(config("sys-pend", "critvals", b));
    EXPECT_EQ(slurp(a / "result.json"), slurp(b / "result.json"));
    EXPECT_EQ(slurp(a / "summary.csv"), slurp(b / "summary.csv"));
}

TEST(Run, EventLogStepsIncrease) {
    const fs::path d = scratch("events");
    const lab::RunRecord rec = lab::run(config("sys-pend", "critvals", d));
    std::ifstream in(d / "records.jsonl");
    std::string line;
    long last = -1, count = 0;
    while (std::getline(in, line)) {
        const lab::json ev = lab::json::parse(line);
        ASSERT_TRUE(ev.contains("step"));
        EXPECT_GT(ev["step"].get<long>(), last);
        last = ev["step"].get<long>();
        ++count;
    }
    EXPECT_EQ(count, rec.events);
    EXPECT_GT(count, 3);
}

TEST(Run, SummaryNumbersAppearInResult) {
    const fs::path d = scratch("orphans");
    lab::run(config("sys-pend", "critvals", d));
    const lab::json r = lab::json::parse(slurp(d / "result.json"));
    std::vector<double> payload_numbers;
    collect_numbers(r["payload"], payload_numbers);
    const std::set<double> known(payload_numbers.begin(), payload_numbers.end());
    const auto rows = read_csv(slurp(d / "summary.csv"));
    ASSERT_GT(rows.size(), 1u);
    int checked = 0;
    for (std::size_t i = 1; i < rows.size(); ++i)
        for (const std::string& f : rows[i]) {
            char* end = nullptr;
            const double x = std::strtod(f.c_str(), &end);
            if (f.empty() || *end != '\0') continue;
            EXPECT_TRUE(known.count(x)) << f;
            ++checked;
        }
    EXPECT_GE(checked, 9);
}

TEST(Run, WaistNotFoundIsDistinctFromFailure) {
    const fs::path d = scratch("notfound");
    lab::json extra = {{"energy", 0.525},
                       {"orbits", {{"tau_min", 50.0}, {"budget", 2}, {"seeds", 4}, {"aubry_seeds", false}}}};
    const lab::RunRecord rec = lab::run(config("sys-magt2", "waist", d, extra));
    EXPECT_EQ(rec.exit, lab::ExitCode::no_result);
    const lab::json r = lab::json::parse(slurp(d / "result.json"));
    EXPECT_EQ(r["status"], "not_found");
    EXPECT_EQ(r["payload"]["candidates"].size(), 4u);
    EXPECT_TRUE(r["table"]["rows"].empty());
}

TEST(Run, ProtocolErrorIsCaptured) {
    const fs::path d = scratch("protoerr");
    // Below the critical value the Aubry protocol has nothing to calibrate.
    const lab::RunRecord rec = lab::run(config("sys-magt2", "aubry", d, {{"aubry", {{"c_est", 0.3}, {"graph_n", 16}}}}));
    EXPECT_EQ(rec.exit, lab::ExitCode::protocol_error);
    const lab::json r = lab::json::parse(slurp(d / "result.json"));
    EXPECT_EQ(r["status"], "error");
    EXPECT_EQ(r["error"]["kind"], "below critical");
}

TEST(Export, CylinderColumnsIdempotenceAndMissingPayload) {
    const fs::path d = scratch("cylinder");
    lab::json extra = {{"energy", 0.525}, {"orbits", {{"seeds", 8}, {"aubry_seeds", false}}}};
    const lab::RunRecord rec = lab::run(config("sys-magt2", "cylinder", d, extra));
    ASSERT_EQ(rec.exit, lab::ExitCode::ok);
    const std::string original = slurp(d / "summary.csv");
    fs::remove(d / "summary.csv");
    const fs::path csv = lab::export_run(d, "csv");
    const std::string once = slurp(csv);
    EXPECT_EQ(once, original);
    lab::export_run(d, "csv");
    EXPECT_EQ(slurp(csv), once);
    const auto rows = read_csv(once);
    ASSERT_GE(rows.size(), 9u);
    const std::vector<std::string> head(rows[0].begin(), rows[0].begin() + 5);
    EXPECT_EQ(head, (std::vector<std::string>{"e", "period", "action", "index", "class"}));
    const fs::path jl = lab::export_run(d, "jsonl");
    const std::string jtext = slurp(jl);
    EXPECT_EQ(slurp(lab::export_run(d, "jsonl")), jtext);
    std::istringstream is(jtext);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(lab::json::parse(line)["class"], "hyperbolic");

    const fs::path empty = scratch("empty");
    fs::create_directories(empty);
    try {
        lab::export_run(empty, "csv");
        FAIL();
    } catch (const Error& err) {
        EXPECT_EQ(err.kind(), ErrorKind::missing_payload);
    }
}

#ifdef WAISTLAB_CLI
TEST(Cli, ExitStatuses) {
    const fs::path d = scratch("cli");
    EXPECT_EQ(cli("run --system sys-pend --protocol floquet --out " + d.string()), 0);
    EXPECT_TRUE(fs::exists(d / "summary.csv"));
    EXPECT_EQ(cli("export " + d.string() + " --jsonl"), 0);
    EXPECT_TRUE(fs::exists(d / "summary.jsonl"));
    EXPECT_EQ(cli("run --system sys-pend --set critvals.tol=\\\"x\\\" --out " + d.string()), 2);
    EXPECT_EQ(cli("run --protocol dance --out " + d.string()), 2);
    EXPECT_EQ(cli("frobnicate"), 2);
    const fs::path empty = scratch("cli_empty");
    fs::create_directories(empty);
    EXPECT_EQ(cli("export " + empty.string() + " --csv"), 3);
    EXPECT_EQ(cli("run --system sys-magt2 --protocol waist --energy 0.525 --set orbits.tau_min=50 orbits.budget=2 "
                  "orbits.seeds=2 orbits.aubry_seeds=false --out " + d.string()),
              3);
    EXPECT_EQ(cli("run --system sys-magt2 --protocol aubry --set aubry.c_est=0.3 aubry.graph_n=16 --out " + d.string()), 4);
}
#endif
