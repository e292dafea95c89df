#pragma once

// Fixtures shared by the unit and acceptance suites.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "kappabench/cli.hpp"

namespace kbtest {

namespace fs = std::filesystem;
using namespace kappabench;

inline ProvenanceRecord manual_provenance(double kappa = 0.84) {
    ProvenanceRecord p;
    p.validation_method = ValidationMethod::manual_coding;
    p.reliability_kappa = kappa;
    p.validation_period = {2015, 2018};
    p.description = "test fixture";
    return p;
}

/// Source with ids P0000.. for positives followed by N0000.. for negatives.
inline std::vector<LabeledCase> make_source(std::size_t positives, std::size_t negatives) {
    std::vector<LabeledCase> out;
    char id[32];
    for (std::size_t i = 0; i < positives; ++i) {
        std::snprintf(id, sizeof id, "P%05zu", i);
        out.push_back({id, "Positive record " + std::to_string(i) + ": father tested positive for opiates.", Label::positive, {}});
    }
    for (std::size_t i = 0; i < negatives; ++i) {
        std::snprintf(id, sizeof id, "N%05zu", i);
        out.push_back({id, "Negative record " + std::to_string(i) + ": home visit unremarkable.", Label::negative, {}});
    }
    return out;
}

inline BenchmarkManifest make_manifest(std::string name, std::size_t per_class, std::uint64_t seed = 42) {
    return build_balanced_benchmark(make_source(per_class + 7, per_class + 11), per_class, seed, manual_provenance(),
                                    std::move(name), "test construct");
}

inline PromptTemplate make_template() {
    PromptTemplate t;
    t.task_instruction = "Decide whether the record documents the construct.";
    t.operational_definition = "The construct is any documented instance of the test condition.";
    t.output_format_spec = R"(Reply with {"label": "present"} or {"label": "absent"}.)";
    return t;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "kb") {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter.fetch_add(1)) + "-" +
                 std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& s) const { return path_ / s; }

private:
    fs::path path_;
};

/// Plan over in-process mock backends; manifests are written into `dir`.
inline RunPlan make_mock_plan(const fs::path& dir, std::vector<std::string> configs, std::vector<std::string> benches,
                              std::size_t per_class, MockSpec mock = {}) {
    RunPlan p;
    p.plan_id = "test-plan";
    p.seed = 7;
    p.mock = mock;
    p.retry_policy.backoff_initial_s = 0.0;
    for (const auto& id : configs)
        p.configs.push_back(ModelConfig::with_defaults(id, "", "mock-4B", ProcessingMode::standard, ModeAdapter::think_toggle));
    std::uint64_t seed = 100;
    for (const auto& b : benches) {
        BenchmarkEntry e;
        e.manifest = make_manifest(b, per_class, seed++);
        e.manifest_path = dir / (b + ".kb");
        save_manifest(e.manifest, e.manifest_path);
        e.prompt = make_template();
        e.template_origin = "inline";
        p.benchmarks.push_back(std::move(e));
    }
    return p;
}

inline std::string slurp(const fs::path& p) { return detail::read_file(p); }

}  // namespace kbtest
