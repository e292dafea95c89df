#pragma once

// Command-line front end. dispatch() is the whole program; main() only
// forwards argv so tests can drive every subcommand in-process.
//
// Exit codes: 0 success, 1 validation or domain error, 2 usage error.

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "common.hpp"
#include "corpus.hpp"
#include "mock_backend.hpp"
#include "orchestrator.hpp"
#include "prompt.hpp"
#include "reporting.hpp"

namespace kappabench {

/// Harness-wide settings. Precedence: config file < environment < flags.
struct GlobalConfig {
    std::optional<std::string> endpoint;
    bool endpoint_overrides = false;  // set by environment or flag: applies to every config
    std::string api_key;
    RetryPolicy retry;
    std::optional<int> concurrency;
    std::optional<std::string> config_file;

    nlohmann::ordered_json effective_json() const {
        nlohmann::ordered_json j;
        j["endpoint"] = endpoint ? nlohmann::ordered_json(*endpoint) : nlohmann::ordered_json(nullptr);
        j["endpoint_overrides_plan"] = endpoint_overrides;
        j["api_key_set"] = !api_key.empty();
        j["retry_policy"] = retry_policy_to_json(retry);
        j["concurrency"] = concurrency ? nlohmann::ordered_json(*concurrency) : nlohmann::ordered_json(nullptr);
        j["config_file"] = config_file ? nlohmann::ordered_json(*config_file) : nlohmann::ordered_json(nullptr);
        j["precedence"] = "config file < environment < flags";
        return j;
    }
};

inline void apply_config_file(GlobalConfig& g, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config file " + path.string());
    auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(path.string() + ": config file is not a JSON object");
    if (j.contains("endpoint")) g.endpoint = j["endpoint"].get<std::string>();
    if (j.contains("api_key")) g.api_key = j["api_key"].get<std::string>();
    if (j.contains("retry_policy")) g.retry = retry_policy_from_json(j["retry_policy"], g.retry);
    if (j.contains("concurrency")) g.concurrency = j["concurrency"].get<int>();
    g.config_file = path.string();
}

inline void apply_environment(GlobalConfig& g) {
    if (const char* e = std::getenv("KAPPABENCH_ENDPOINT"); e && *e) {
        g.endpoint = e;
        g.endpoint_overrides = true;
    }
    if (const char* k = std::getenv("KAPPABENCH_API_KEY"); k && *k) g.api_key = k;
}

inline void apply_endpoint(RunPlan& plan, const GlobalConfig& g) {
    if (!g.endpoint) return;
    for (auto& c : plan.configs)
        if (g.endpoint_overrides || c.endpoint_url.empty()) c.endpoint_url = *g.endpoint;
}

namespace detail {

inline std::string read_text(const std::filesystem::path& p) { return read_file(p); }

inline int run_report(const std::filesystem::path& run_dir, std::uint64_t records, const std::string& format,
                      std::ostream& out) {
    const auto bundle = load_report_bundle(run_dir);
    const auto heat = render_heatmap(bundle);
    const auto md = render_report(bundle, records, "Run report: " + run_dir.filename().string());
    std::ofstream(run_dir / "report.md", std::ios::binary | std::ios::trunc) << md;
    std::ofstream(run_dir / "heatmap.csv", std::ios::binary | std::ios::trunc) << heat.matrix_csv;
    std::ofstream(run_dir / "heatmap.svg", std::ios::binary | std::ios::trunc) << heat.svg;
    if (format == "csv") out << heat.matrix_csv;
    else if (format == "svg") out << heat.svg;
    else out << md;
    return 0;
}

inline void print_run_report(const RunReport& r, std::ostream& out, std::ostream& err) {
    out << "cases: " << r.total_cases << " total, " << r.appended << " evaluated now, " << r.skipped
        << " already complete\n";
    for (const auto& s : r.cells) {
        out << "  " << s.config_id << " / " << s.benchmark << ": kappa=" << format_optional(s.kappa)
            << " sens=" << format_optional(s.sensitivity) << " spec=" << format_optional(s.specificity)
            << " time=" << format_optional(s.time_mean_s) << " (" << format_optional(s.time_sd_s) << ")"
            << " n_valid=" << s.n_valid << " n_failed=" << s.n_failed << " status=" << to_string(s.status) << "\n";
    }
    if (r.concurrent_timing) err << "warning: concurrent requests; timing is not comparable to sequential per-case timing\n";
    if (r.transport_failures > 0) err << "error: " << r.transport_failures << " case(s) failed in transport\n";
}

}  // namespace detail

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"kappabench: balanced benchmarks and agreement metrics for locally hosted language models"};
    app.require_subcommand(1);
    std::string config_file;
    app.add_option("--config", config_file, "Harness config file (JSON)");

    // balance
    auto* balance = app.add_subcommand("balance", "Build a class-balanced benchmark manifest from a labeled source");
    std::string input, name, definition_file, out_path, provenance_file;
    std::size_t per_class = 0;
    std::uint64_t seed = 0;
    double min_kappa = 0.80, min_precision = 0.95;
    balance->add_option("--input", input, "Source dataset (.csv or .jsonl)")->required();
    balance->add_option("--per-class", per_class, "Cases per class")->required()->check(CLI::PositiveNumber);
    balance->add_option("--seed", seed, "Sampling seed")->required();
    balance->add_option("--name", name, "Benchmark name")->required();
    balance->add_option("--definition-file", definition_file, "Operational definition text file")->required();
    balance->add_option("--provenance", provenance_file, "Provenance record (JSON)")->required();
    balance->add_option("--out", out_path, "Manifest output path")->required();
    balance->add_option("--min-kappa", min_kappa, "Minimum reliability kappa for manual coding");
    balance->add_option("--min-precision", min_precision, "Minimum documented precision for rule-based labels");

    // template validate
    auto* tmpl = app.add_subcommand("template", "Prompt template tools");
    tmpl->require_subcommand(1);
    auto* tvalidate = tmpl->add_subcommand("validate", "Check a prompt template");
    std::string template_file;
    tvalidate->add_option("file", template_file, "Template file (JSON)")->required();

    // run
    auto* run = app.add_subcommand("run", "Execute an evaluation plan");
    std::string plan_file, run_dir, endpoint_flag;
    bool resume_flag = false, dry_run = false;
    std::optional<int> warmup, concurrency;
    run->add_option("--plan", plan_file, "Plan file (JSON)")->required();
    run->add_option("--out", run_dir, "Run directory")->required();
    run->add_flag("--resume", resume_flag, "Continue an interrupted run in --out");
    run->add_flag("--dry-run", dry_run, "Print the matrix and request count without sending requests");
    run->add_option("--warmup", warmup, "Untimed warm-up requests per cell")->check(CLI::NonNegativeNumber);
    run->add_option("--concurrency", concurrency, "In-flight requests")->check(CLI::PositiveNumber);
    run->add_option("--endpoint", endpoint_flag, "Endpoint URL for every config");

    // resume
    auto* res = app.add_subcommand("resume", "Continue an interrupted run");
    std::string resume_dir, resume_plan;
    res->add_option("--out", resume_dir, "Run directory")->required();
    res->add_option("--plan", resume_plan, "Plan file; must hash to the stored snapshot");
    res->add_option("--endpoint", endpoint_flag, "Endpoint URL for every config");

    // report
    auto* report = app.add_subcommand("report", "Render tables, heatmap and projections for a run");
    std::string report_dir, format = "md";
    std::uint64_t records = 250000;
    report->add_option("--run", report_dir, "Run directory")->required();
    report->add_option("--records", records, "Record count for throughput projection");
    report->add_option("--format", format, "Output on stdout")->check(CLI::IsMember({"md", "csv", "svg"}));

    // mock-serve
    auto* mock = app.add_subcommand("mock-serve", "Serve the deterministic mock backend on a loopback port");
    std::vector<std::string> mock_manifests;
    MockSpec spec;
    int port = 0;
    mock->add_option("--manifest", mock_manifests, "Manifest(s) whose cases the mock answers")->required();
    mock->add_option("--port", port, "Port on 127.0.0.1 (0 picks a free port)");
    mock->add_option("--flip", spec.flip_probability, "Probability of answering the flipped label")->check(CLI::Range(0.0, 1.0));
    mock->add_option("--malformed", spec.malformed_probability, "Probability of malformed output")->check(CLI::Range(0.0, 1.0));
    mock->add_option("--latency-mean", spec.latency_mean_s, "Mean injected latency (s)")->check(CLI::NonNegativeNumber);
    mock->add_option("--latency-sd", spec.latency_sd_s, "SD of injected latency (s)")->check(CLI::NonNegativeNumber);
    mock->add_flag("--reasoning", spec.reasoning_trace, "Wrap answers in a reasoning trace");
    mock->add_option("--seed", spec.seed, "Mock seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, err, err);
        err << app.help();
        return 2;
    }

    try {
        GlobalConfig global;
        if (config_file.empty())
            if (const char* c = std::getenv("KAPPABENCH_CONFIG"); c && *c) config_file = c;
        if (!config_file.empty()) apply_config_file(global, config_file);
        apply_environment(global);
        if (!endpoint_flag.empty()) {
            global.endpoint = endpoint_flag;
            global.endpoint_overrides = true;
        }
        if (concurrency) global.concurrency = concurrency;

        if (*balance) {
            const auto source = load_source(input);
            const auto definition = detail::read_text(definition_file);
            std::ifstream pin(provenance_file);
            if (!pin) throw Error("cannot open provenance file " + provenance_file);
            auto pj = nlohmann::json::parse(pin, nullptr, false);
            if (pj.is_discarded()) throw Error(provenance_file + ": not a JSON document");
            const auto prov = provenance_from_json(pj);
            const auto verdict = validate_provenance(prov, QualityPolicy{min_kappa, min_precision});
            if (!verdict.passed()) {
                err << "provenance "
                    << (verdict.status == ProvenanceVerdict::Status::structural_failure ? "is incomplete" : "fails quality gate")
                    << ":\n";
                for (const auto& r : verdict.reasons) err << "  - " << r << "\n";
                return 1;
            }
            const auto m = build_balanced_benchmark(source, per_class, seed, prov, name, definition);
            save_manifest(m, out_path);
            out << "wrote " << out_path << ": " << m.name << ", " << per_class << " positive + " << per_class
                << " negative, seed " << seed << "\n";
            return 0;
        }

        if (*tvalidate) {
            const auto t = load_template(template_file);
            const auto v = validate_template(t);
            if (v.passed()) {
                out << template_file << ": ok\n";
                return 0;
            }
            for (const auto& p : v.problems) err << template_file << ": " << p << "\n";
            return 1;
        }

        if (*run || *res) {
            RunEnvironment env;
            env.api_key = global.api_key;
            env.effective_config = global.effective_json();
            RunReport report;
            if (*run) {
                auto plan = load_plan(plan_file, global.retry);
                apply_endpoint(plan, global);
                if (global.concurrency) plan.concurrency = *global.concurrency;
                if (warmup) plan.warmup = *warmup;
                validate_plan(plan);
                if (dry_run) {
                    out << describe_plan(plan);
                    return 0;
                }
                ExecuteOptions opts;
                opts.resume = resume_flag;
                opts.environment = env;
                report = execute(plan, run_dir, std::move(opts));
            } else {
                ExecuteOptions opts;
                opts.environment = env;
                std::optional<RunPlan> plan;
                if (!resume_plan.empty()) {
                    plan = load_plan(resume_plan, global.retry);
                    apply_endpoint(*plan, global);
                    if (global.concurrency) plan->concurrency = *global.concurrency;
                }
                if (plan) {
                    report = resume(resume_dir, plan, std::move(opts));
                } else {
                    std::ifstream in(std::filesystem::path(resume_dir) / "plan.snapshot");
                    if (!in) throw Error("cannot resume: no plan.snapshot in " + resume_dir);
                    auto snap = nlohmann::json::parse(in, nullptr, false);
                    if (snap.is_discarded()) throw Error("cannot resume: plan.snapshot is corrupt");
                    auto stored = plan_from_snapshot(snap);
                    apply_endpoint(stored, global);
                    if (global.concurrency) stored.concurrency = *global.concurrency;
                    report = resume(resume_dir, stored, std::move(opts));
                }
            }
            detail::print_run_report(report, out, err);
            return report.transport_failures > 0 ? 1 : 0;
        }

        if (*report) return detail::run_report(report_dir, records, format, out);

        if (*mock) {
            auto backend = std::make_shared<MockBackend>(spec);
            for (const auto& m : mock_manifests) backend->add_manifest(load_manifest(m));
            sigset_t set;
            sigemptyset(&set);
            sigaddset(&set, SIGINT);
            sigaddset(&set, SIGTERM);
            pthread_sigmask(SIG_BLOCK, &set, nullptr);
            MockServer server(backend);
            server.start(port);
            out << server.url() << std::endl;
            err << "mock backend listening on " << server.url() << " (Ctrl-C to stop)\n";
            int sig = 0;
            sigwait(&set, &sig);
            server.stop();
            return 0;
        }
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    err << app.help();
    return 2;
}

}  // namespace kappabench
