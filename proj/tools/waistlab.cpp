#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "waistlab/labcli.hpp"

using namespace waistlab;
namespace lab = waistlab::lab;

namespace {

int fail(lab::ExitCode code, const std::string& msg) {
    std::cerr << "waistlab: " << msg << "\n";
    return static_cast<int>(code);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"waistlab: critical values, waists and minmax orbits of magnetic Lagrangians"};
    app.require_subcommand(1);

    std::string config_path, system, protocol, out;
    std::optional<std::uint64_t> seed;
    std::optional<double> energy;
    std::optional<int> threads;
    std::vector<std::string> sets;
    CLI::App* run = app.add_subcommand("run", "run one protocol and write a run directory");
    run->add_option("-c,--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    run->add_option("--system", system, "system name (sys-pend, sys-mecht2, sys-magt2, sys-mags2, sys-free)");
    run->add_option("--protocol", protocol, "critvals, waist, minmax, cylinder, struwe, floquet or aubry");
    run->add_option("--seed", seed, "master seed");
    run->add_option("--energy", energy, "energy level (default: chosen above the estimated critical value)");
    run->add_option("--threads", threads, "worker threads (0: hardware)");
    run->add_option("-o,--out", out, "run directory");
    run->add_option("--set", sets, "override key.path=value (JSON value)")->take_all();

    std::string export_dir;
    bool as_csv = false, as_jsonl = false;
    CLI::App* exp = app.add_subcommand("export", "regenerate the flat table of a run directory");
    exp->add_option("dir", export_dir, "run directory")->required();
    auto* csv_flag = exp->add_flag("--csv", as_csv, "write summary.csv");
    exp->add_flag("--jsonl", as_jsonl, "write summary.jsonl")->excludes(csv_flag);

    app.add_subcommand("defaults", "print the default configuration");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(lab::ExitCode::config);
    }

    try {
        if (app.got_subcommand("defaults")) {
            std::cout << lab::default_config().dump(2) << "\n";
            return 0;
        }
        if (app.got_subcommand("export")) {
            const auto path = lab::export_run(export_dir, as_jsonl ? "jsonl" : "csv");
            std::cout << path.string() << "\n";
            return 0;
        }
        lab::json user = lab::json::object();
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            try {
                user = lab::json::parse(in);
            } catch (const lab::json::parse_error& e) {
                return fail(lab::ExitCode::config, std::string("config: ") + e.what());
            }
        }
        if (!system.empty()) user["system"] = system;
        if (!protocol.empty()) user["protocol"] = protocol;
        if (seed) user["seed"] = *seed;
        if (energy) user["energy"] = *energy;
        if (threads) user["threads"] = *threads;
        if (!out.empty()) user["output_dir"] = out;
        for (const auto& s : sets) lab::apply_override(user, s);
        const lab::json cfg = lab::resolve_config(user);
        const lab::RunRecord rec = lab::run(cfg);
        const auto& r = rec.result;
        std::cout << r["system"].get<std::string>() << " " << r["protocol"].get<std::string>() << ": "
                  << r["status"].get<std::string>() << " -> " << cfg["output_dir"].get<std::string>() << "\n";
        if (r.contains("error")) std::cerr << "waistlab: " << r["error"]["message"].get<std::string>() << "\n";
        return static_cast<int>(rec.exit);
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::config) return fail(lab::ExitCode::config, e.what());
        if (e.kind() == ErrorKind::missing_payload) return fail(lab::ExitCode::no_result, e.what());
        return fail(lab::ExitCode::protocol_error, e.what());
    } catch (const std::exception& e) {
        return fail(lab::ExitCode::failure, e.what());
    }
}
