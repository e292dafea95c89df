#pragma once

// Resumable execution of a configs x benchmarks evaluation matrix.
//
// Run directory:
//   plan.snapshot            resolved plan + hash, written once
//   results.log              one CaseResult JSON object per line, append-only
//   metrics.<config>.<bench> per-cell MetricsSummary
//   report.md                rendered report
//   lock                     advisory flock held while a run is active

#include <sys/file.h>
#include <fcntl.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "corpus.hpp"
#include "gateway.hpp"
#include "metrics.hpp"
#include "mock_backend.hpp"
#include "parser.hpp"
#include "prompt.hpp"
#include "reporting.hpp"
#include "results.hpp"
#include "rng.hpp"

namespace kappabench {

namespace fs = std::filesystem;

inline constexpr const char* kPlanSchema = "kappabench.plan/1";
inline constexpr const char* kSnapshotSchema = "kappabench.snapshot/1";

struct BenchmarkEntry {
    fs::path manifest_path;
    BenchmarkManifest manifest;
    PromptTemplate prompt;
    std::string template_origin;

    const std::string& name() const { return manifest.name; }
};

struct RunPlan {
    std::string plan_id;
    std::vector<ModelConfig> configs;
    std::vector<BenchmarkEntry> benchmarks;
    RetryPolicy retry_policy;
    int concurrency = 1;
    std::uint64_t seed = 0;
    int warmup = 0;
    std::optional<MockSpec> mock;
    bool bootstrap_ci = false;
};

inline void validate_plan(const RunPlan& plan) {
    if (plan.configs.empty() || plan.benchmarks.empty()) throw Error("nothing to execute: plan has no configs or no benchmarks");
    std::set<std::string> ids;
    for (const auto& c : plan.configs) {
        validate_config(c);
        if (!ids.insert(c.config_id).second) throw Error("duplicate config_id '" + c.config_id + "' in plan");
    }
    std::set<std::string> names;
    for (const auto& b : plan.benchmarks) {
        if (!names.insert(b.name()).second) throw Error("duplicate benchmark '" + b.name() + "' in plan");
        const auto v = validate_template(b.prompt);
        if (!v.passed()) throw Error("template for benchmark '" + b.name() + "': " + v.problems.front());
    }
    if (plan.concurrency < 1) throw Error("concurrency must be at least 1");
    if (plan.retry_policy.max_retries < 0 || !(plan.retry_policy.timeout_s > 0))
        throw Error("retry policy needs max_retries >= 0 and timeout_s > 0");
}

inline nlohmann::ordered_json retry_policy_to_json(const RetryPolicy& r) {
    return {{"max_retries", r.max_retries},
            {"timeout_s", r.timeout_s},
            {"backoff_initial_s", r.backoff_initial_s},
            {"backoff_multiplier", r.backoff_multiplier},
            {"endpoint_down_after", r.endpoint_down_after}};
}

inline RetryPolicy retry_policy_from_json(const nlohmann::json& j, RetryPolicy base = {}) {
    base.max_retries = j.value("max_retries", base.max_retries);
    base.timeout_s = j.value("timeout_s", base.timeout_s);
    base.backoff_initial_s = j.value("backoff_initial_s", base.backoff_initial_s);
    base.backoff_multiplier = j.value("backoff_multiplier", base.backoff_multiplier);
    base.endpoint_down_after = j.value("endpoint_down_after", base.endpoint_down_after);
    return base;
}

/// Plan file: JSON with plan_id, seed, configs[], benchmarks[{manifest,
/// template}], optional retry_policy / concurrency / warmup / mock. Relative
/// paths resolve against the plan file's directory. A template may be given
/// inline as an object instead of a path.
inline RunPlan plan_from_json(const nlohmann::json& j, const fs::path& base_dir, const RetryPolicy& default_retry = {}) {
    if (!j.is_object()) throw Error("plan must be a JSON object");
    if (j.contains("schema_version") && j["schema_version"] != kPlanSchema)
        throw Error("unsupported plan schema_version " + j["schema_version"].dump());
    RunPlan p;
    p.retry_policy = default_retry;
    try {
        p.plan_id = j.value("plan_id", std::string{"plan"});
        p.seed = j.value("seed", std::uint64_t{0});
        p.concurrency = j.value("concurrency", 1);
        p.warmup = j.value("warmup", 0);
        p.bootstrap_ci = j.value("bootstrap_ci", false);
        if (j.contains("retry_policy")) p.retry_policy = retry_policy_from_json(j["retry_policy"], default_retry);
        if (j.contains("mock") && !j["mock"].is_null()) p.mock = mock_spec_from_json(j["mock"]);
        for (const auto& c : j.value("configs", nlohmann::json::array())) p.configs.push_back(config_from_json(c));
        for (const auto& b : j.value("benchmarks", nlohmann::json::array())) {
            BenchmarkEntry e;
            auto mpath = fs::path(b.at("manifest").get<std::string>());
            e.manifest_path = fs::absolute(mpath.is_absolute() ? mpath : base_dir / mpath).lexically_normal();
            e.manifest = load_manifest(e.manifest_path);
            const auto& t = b.at("template");
            if (t.is_object()) {
                e.prompt = template_from_json(t);
                e.template_origin = "inline";
            } else {
                auto tpath = fs::path(t.get<std::string>());
                tpath = tpath.is_absolute() ? tpath : base_dir / tpath;
                e.prompt = load_template(tpath);
                e.template_origin = tpath.lexically_normal().string();
            }
            p.benchmarks.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed plan: ") + e.what());
    }
    return p;
}

inline RunPlan load_plan(const fs::path& path, const RetryPolicy& default_retry = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open plan " + path.string());
    auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw Error(path.string() + ": plan is not a JSON document");
    return plan_from_json(j, fs::absolute(path).parent_path(), default_retry);
}

// ---------------------------------------------------------------------------
// Snapshot

/// The part of a plan that determines results. Endpoint URLs, concurrency and
/// warm-up are not included.
inline nlohmann::ordered_json plan_identity_json(const RunPlan& plan) {
    nlohmann::ordered_json j;
    j["plan_id"] = plan.plan_id;
    j["seed"] = plan.seed;
    j["retry_policy"] = retry_policy_to_json(plan.retry_policy);
    j["bootstrap_ci"] = plan.bootstrap_ci;
    j["mock"] = plan.mock ? mock_spec_to_json(*plan.mock) : nlohmann::ordered_json(nullptr);
    auto& cfgs = j["configs"] = nlohmann::ordered_json::array();
    for (const auto& c : plan.configs) cfgs.push_back(config_to_json(c, false));
    auto& benches = j["benchmarks"] = nlohmann::ordered_json::array();
    for (const auto& b : plan.benchmarks) {
        benches.push_back({{"name", b.name()},
                           {"manifest_path", b.manifest_path.string()},
                           {"manifest_fingerprint", hex64(fnv1a64(manifest_to_string(b.manifest)))},
                           {"case_count", b.manifest.cases.size()},
                           {"template", template_to_json(b.prompt)}});
    }
    return j;
}

inline std::string plan_hash(const RunPlan& plan) { return hex64(fnv1a64(plan_identity_json(plan).dump())); }

struct RunEnvironment {
    std::string api_key;
    nlohmann::ordered_json effective_config = nlohmann::ordered_json::object();
};

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[96];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                  tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
    return buf;
}

inline nlohmann::ordered_json snapshot_json(const RunPlan& plan, const RunEnvironment& env) {
    nlohmann::ordered_json j;
    j["schema_version"] = kSnapshotSchema;
    j["plan_hash"] = plan_hash(plan);
    j["plan"] = plan_identity_json(plan);
    auto& e = j["environment"];
    e["harness_version"] = kHarnessVersion;
    e["created_at"] = utc_timestamp();
    e["concurrency"] = plan.concurrency;
    e["warmup"] = plan.warmup;
    auto& eps = e["endpoints"] = nlohmann::ordered_json::object();
    for (const auto& c : plan.configs) eps[c.config_id] = plan.mock ? std::string("mock:in-process") : c.endpoint_url;
    auto& hw = e["hardware_notes"] = nlohmann::ordered_json::object();
    for (const auto& c : plan.configs)
        if (c.hardware_note) hw[c.config_id] = *c.hardware_note;
    e["effective_config"] = env.effective_config;
    return j;
}

/// Rebuilds a plan from a stored snapshot; manifests are reloaded from their
/// recorded paths and must still match their fingerprints.
inline RunPlan plan_from_snapshot(const nlohmann::json& snap) {
    if (snap.value("schema_version", std::string{}) != kSnapshotSchema) throw Error("unsupported plan.snapshot schema");
    const auto& j = snap.at("plan");
    RunPlan p;
    p.plan_id = j.at("plan_id").get<std::string>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.retry_policy = retry_policy_from_json(j.at("retry_policy"));
    p.bootstrap_ci = j.value("bootstrap_ci", false);
    if (!j.at("mock").is_null()) p.mock = mock_spec_from_json(j["mock"]);
    const auto& env = snap.value("environment", nlohmann::json::object());
    p.concurrency = env.value("concurrency", 1);
    p.warmup = env.value("warmup", 0);
    const auto endpoints = env.value("endpoints", nlohmann::json::object());
    for (const auto& cj : j.at("configs")) {
        auto c = config_from_json(cj);
        if (endpoints.contains(c.config_id) && !p.mock) c.endpoint_url = endpoints[c.config_id].get<std::string>();
        p.configs.push_back(std::move(c));
    }
    for (const auto& bj : j.at("benchmarks")) {
        BenchmarkEntry e;
        e.manifest_path = bj.at("manifest_path").get<std::string>();
        e.manifest = load_manifest(e.manifest_path);
        if (hex64(fnv1a64(manifest_to_string(e.manifest))) != bj.at("manifest_fingerprint").get<std::string>())
            throw Error("manifest " + e.manifest_path.string() + " changed since the run started");
        e.prompt = template_from_json(bj.at("template"));
        e.template_origin = "snapshot";
        p.benchmarks.push_back(std::move(e));
    }
    return p;
}

// ---------------------------------------------------------------------------
// Results log

struct LogContents {
    std::vector<CaseResult> results;
    std::uintmax_t valid_bytes = 0;  // bytes up to and including the last complete line
    bool had_partial_tail = false;
};

/// Parses results.log. A final line without a newline (interrupted write) is
/// reported as a partial tail and excluded; any other bad line is an error.
inline LogContents read_results_log(const fs::path& path) {
    LogContents out;
    if (!fs::exists(path)) return out;
    const auto data = detail::read_file(path);
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < data.size()) {
        const auto nl = data.find('\n', pos);
        if (nl == std::string::npos) {
            out.had_partial_tail = true;
            break;
        }
        ++line_no;
        const auto line = std::string_view(data).substr(pos, nl - pos);
        pos = nl + 1;
        out.valid_bytes = pos;
        if (trim(line).empty()) continue;
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw Error(path.string() + ":" + std::to_string(line_no) + ": corrupt result record");
        try {
            out.results.push_back(case_result_from_json(j));
        } catch (const Error& e) {
            throw Error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

using CaseKey = std::tuple<std::string, std::string, std::string>;  // config, benchmark, case_id

inline CaseKey key_of(const CaseResult& r) { return {r.config_id, r.benchmark, r.case_id}; }

/// Completed (config, benchmark, case) triples; derived only from the log.
struct RunState {
    std::set<CaseKey> completed;
    nlohmann::json environment;
};

inline RunState run_state_from_log(const std::vector<CaseResult>& results) {
    RunState s;
    for (const auto& r : results)
        if (!s.completed.insert(key_of(r)).second)
            throw Error("results.log has a duplicate record for " + r.config_id + "/" + r.benchmark + "/" + r.case_id);
    return s;
}

class ResultLog {
public:
    explicit ResultLog(const fs::path& path) : file_(std::fopen(path.c_str(), "ab")) {
        if (!file_) throw Error("cannot open " + path.string() + " for appending");
    }
    ~ResultLog() {
        if (file_) std::fclose(file_);
    }
    ResultLog(const ResultLog&) = delete;
    ResultLog& operator=(const ResultLog&) = delete;

    /// One line per call, flushed before returning.
    void append(const CaseResult& r) {
        const auto line = case_result_to_line(r) + "\n";
        if (std::fwrite(line.data(), 1, line.size(), file_) != line.size() || std::fflush(file_) != 0)
            throw Error("write to results.log failed");
    }

private:
    std::FILE* file_;
};

/// Advisory exclusive lock on <run_dir>/lock, released on destruction or
/// process death.
class RunLock {
public:
    explicit RunLock(const fs::path& run_dir) {
        const auto path = run_dir / "lock";
        fd_ = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
        if (fd_ < 0) throw Error("cannot create lock file in " + run_dir.string());
        if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
            ::close(fd_);
            fd_ = -1;
            throw Error("run directory " + run_dir.string() + " is locked by another process");
        }
        const auto pid = std::to_string(::getpid()) + "\n";
        if (::ftruncate(fd_, 0) == 0) (void)!::write(fd_, pid.data(), pid.size());
    }
    ~RunLock() {
        if (fd_ >= 0) {
            ::flock(fd_, LOCK_UN);
            ::close(fd_);
        }
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    int fd_ = -1;
};

// ---------------------------------------------------------------------------
// Execution

inline std::string file_component(const std::string& s) {
    std::string out;
    for (unsigned char c : s) out.push_back(std::isalnum(c) || c == '-' || c == '_' || c == '.' ? static_cast<char>(c) : '_');
    return out;
}

inline fs::path metrics_path(const fs::path& run_dir, const std::string& config_id, const std::string& benchmark) {
    return run_dir / ("metrics." + file_component(config_id) + "." + file_component(benchmark));
}

/// Seeded case order for a benchmark; the same for every config so cells are
/// paired case by case.
inline std::vector<std::size_t> case_order(const RunPlan& plan, const BenchmarkEntry& bench) {
    std::vector<std::size_t> idx(bench.manifest.cases.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    SeededRng rng(mix_seed(plan.seed, fnv1a64(bench.name())));
    fisher_yates(std::span(idx), rng);
    return idx;
}

using BackendFactory = std::function<std::unique_ptr<ChatBackend>(const ModelConfig&)>;

struct ExecuteOptions {
    bool resume = false;
    RunEnvironment environment;
    /// Overrides the default backend choice (in-process mock when the plan has
    /// a mock section, HTTP otherwise).
    BackendFactory backend_factory;
    /// Called after each record is durably appended, with the number appended
    /// in this session.
    std::function<void(std::size_t)> on_appended;
    SleepFn sleep = real_sleep;
};

struct RunReport {
    std::vector<MetricsSummary> cells;
    std::size_t total_cases = 0;
    std::size_t appended = 0;
    std::size_t skipped = 0;
    std::size_t transport_failures = 0;
    bool concurrent_timing = false;
    std::string plan_hash;
};

namespace detail {

class SharedMockBackend final : public ChatBackend {
public:
    explicit SharedMockBackend(std::shared_ptr<MockBackend> m) : mock_(std::move(m)) {}
    WireReply post(const std::string& body, std::chrono::duration<double> timeout) override {
        return mock_->post(body, timeout);
    }
    std::string identity() const override { return mock_->identity(); }

private:
    std::shared_ptr<MockBackend> mock_;
};

inline BackendFactory default_backend_factory(const RunPlan& plan, const RunEnvironment& env) {
    if (plan.mock) {
        auto mock = std::make_shared<MockBackend>(*plan.mock);
        for (const auto& b : plan.benchmarks) mock->add_manifest(b.manifest);
        return [mock](const ModelConfig&) { return std::make_unique<SharedMockBackend>(mock); };
    }
    return [key = env.api_key](const ModelConfig& c) -> std::unique_ptr<ChatBackend> {
        if (c.endpoint_url.empty()) throw Error("config " + c.config_id + " has no endpoint_url and no default endpoint is set");
        return std::make_unique<HttpBackend>(c.endpoint_url, key);
    };
}

}  // namespace detail

/// Renders, classifies and parses one case into a result record.
inline CaseResult evaluate_case(const RunPlan& plan, const ModelConfig& cfg, const BenchmarkEntry& bench,
                                const LabeledCase& c, ChatBackend& backend, const SleepFn& sleep) {
    CaseResult r;
    r.plan_id = plan.plan_id;
    r.config_id = cfg.config_id;
    r.benchmark = bench.name();
    r.case_id = c.case_id;
    r.gold_label = c.gold_label;
    const auto prompt = render(bench.prompt, c.text);
    auto outcome = classify_case(cfg, prompt, plan.retry_policy, backend, sleep);
    if (auto* fail = std::get_if<TransportFailure>(&outcome)) {
        r.outcome = fail->kind;
        r.error_detail = fail->detail;
        r.attempt_count = fail->attempt_count;
        r.latency_seconds = fail->last_latency_seconds;
    } else {
        auto& resp = std::get<InferenceResponse>(outcome);
        r.raw_output = resp.raw_text;
        r.latency_seconds = resp.latency_seconds;
        r.attempt_count = resp.attempt_count;
        r.truncated = resp.truncated;
        const auto vocab = cfg.lenient_labels ? LabelVocabulary::lenient() : LabelVocabulary::strict();
        auto parsed = parse_output(resp.raw_text, cfg.delimiters, vocab, resp.truncated);
        if (auto* ok = std::get_if<ParsedClassification>(&parsed)) {
            r.outcome = ok->label;
            r.reasoning_trace = ok->reasoning_trace;
        } else {
            const auto& err = std::get<ParseError>(parsed);
            r.outcome = failure_from_parse(err.kind);
            r.error_detail = err.detail;
            r.reasoning_trace = strip_reasoning(resp.raw_text, cfg.delimiters).trace;
        }
    }
    r.timestamp = utc_timestamp();
    return r;
}

inline bool dir_is_empty(const fs::path& p) { return !fs::exists(p) || fs::is_empty(p); }

/// Computes per-cell summaries from the log and writes metrics files and
/// report.md.
inline std::vector<MetricsSummary> write_cell_metrics(const RunPlan& plan, const fs::path& run_dir,
                                                      const std::vector<CaseResult>& results) {
    std::map<std::pair<std::string, std::string>, std::vector<CaseResult>> by_cell;
    for (const auto& r : results) by_cell[{r.config_id, r.benchmark}].push_back(r);
    std::vector<MetricsSummary> cells;
    for (const auto& cfg : plan.configs) {
        for (const auto& b : plan.benchmarks) {
            const auto& rs = by_cell[{cfg.config_id, b.name()}];
            if (rs.empty()) continue;
            SummaryOptions opt;
            opt.concurrent_timing = plan.concurrency > 1;
            opt.bootstrap = plan.bootstrap_ci;
            opt.bootstrap_seed = mix_seed(plan.seed, fnv1a64(cfg.config_id + "\n" + b.name()));
            auto s = summarize(accumulate(rs), opt);
            std::ofstream out(metrics_path(run_dir, cfg.config_id, b.name()), std::ios::binary | std::ios::trunc);
            out << metrics_to_json(s).dump(2) << "\n";
            if (!out) throw Error("cannot write metrics for " + cfg.config_id + "/" + b.name());
            cells.push_back(std::move(s));
        }
    }
    return cells;
}

inline ReportBundle bundle_from_plan(const RunPlan& plan, const std::vector<MetricsSummary>& cells) {
    ReportBundle bundle;
    for (const auto& c : plan.configs) bundle.configs.push_back({c.config_id, c.model_id, c.processing_mode, c.size_billions});
    for (const auto& b : plan.benchmarks) bundle.benchmarks.push_back(b.name());
    for (const auto& s : cells) bundle.cells[{s.config_id, s.benchmark}] = s;
    return bundle;
}

inline RunReport execute(const RunPlan& plan, const fs::path& run_dir, ExecuteOptions opts = {}) {
    validate_plan(plan);
    std::error_code ec;
    fs::create_directories(run_dir, ec);
    if (ec || !fs::is_directory(run_dir)) throw Error("cannot create run directory " + run_dir.string());
    const auto probe = run_dir / ".write-probe";
    {
        std::ofstream p(probe);
        if (!p) throw Error("run directory " + run_dir.string() + " is not writable");
    }
    fs::remove(probe, ec);

    RunLock lock(run_dir);
    const auto snapshot_path = run_dir / "plan.snapshot";
    const auto log_path = run_dir / "results.log";
    const auto hash = plan_hash(plan);

    if (opts.resume) {
        if (!fs::exists(snapshot_path)) throw Error("cannot resume: " + snapshot_path.string() + " not found");
        std::ifstream in(snapshot_path);
        auto snap = nlohmann::json::parse(in, nullptr, false);
        if (snap.is_discarded()) throw Error("cannot resume: plan.snapshot is corrupt");
        const auto stored = snap.value("plan_hash", std::string{});
        if (stored != hash)
            throw Error("plan hash mismatch: run directory holds plan " + stored + ", given plan hashes to " + hash +
                        "; refusing to mix incompatible runs");
    } else {
        if (fs::exists(snapshot_path) || fs::exists(log_path))
            throw Error("run directory " + run_dir.string() + " already holds a run; use --resume");
        std::ofstream out(snapshot_path, std::ios::binary);
        out << snapshot_json(plan, opts.environment).dump(2) << "\n";
        if (!out) throw Error("cannot write " + snapshot_path.string());
    }

    auto log = read_results_log(log_path);
    if (log.had_partial_tail) fs::resize_file(log_path, log.valid_bytes);
    for (const auto& r : log.results)
        if (r.plan_id != plan.plan_id) throw Error("results.log holds records from plan '" + r.plan_id + "'");
    auto state = run_state_from_log(log.results);

    auto factory = opts.backend_factory ? opts.backend_factory : detail::default_backend_factory(plan, opts.environment);
    ResultLog writer(log_path);
    std::mutex write_mu;
    std::vector<CaseResult> session;

    RunReport report;
    report.plan_hash = hash;
    report.concurrent_timing = plan.concurrency > 1;

    auto append = [&](CaseResult r) {
        std::lock_guard lk(write_mu);
        writer.append(r);
        session.push_back(std::move(r));
        ++report.appended;
        if (opts.on_appended) opts.on_appended(report.appended);
    };

    for (const auto& cfg : plan.configs) {
        int consecutive_unreachable = 0;
        bool endpoint_down = false;
        for (const auto& bench : plan.benchmarks) {
            const auto order = case_order(plan, bench);
            std::vector<const LabeledCase*> todo;
            for (auto i : order) {
                const auto& c = bench.manifest.cases[i];
                ++report.total_cases;
                if (state.completed.count({cfg.config_id, bench.name(), c.case_id})) ++report.skipped;
                else todo.push_back(&c);
            }
            if (todo.empty()) continue;

            auto mark_down = [&](const LabeledCase& c) {
                CaseResult r;
                r.plan_id = plan.plan_id;
                r.config_id = cfg.config_id;
                r.benchmark = bench.name();
                r.case_id = c.case_id;
                r.gold_label = c.gold_label;
                r.outcome = FailureKind::endpoint_down;
                r.error_detail = "endpoint marked down after repeated unreachable cases; not dispatched";
                r.timestamp = utc_timestamp();
                append(std::move(r));
            };
            auto note_outcome = [&](const CaseResult& r) {
                if (const auto* f = r.failure(); f && *f == FailureKind::unreachable) {
                    if (++consecutive_unreachable >= plan.retry_policy.endpoint_down_after &&
                        plan.retry_policy.endpoint_down_after > 0)
                        endpoint_down = true;
                } else {
                    consecutive_unreachable = 0;
                }
            };

            if (endpoint_down) {
                for (const auto* c : todo) mark_down(*c);
                continue;
            }

            if (plan.warmup > 0) {
                auto backend = factory(cfg);
                const auto n = std::min<std::size_t>(static_cast<std::size_t>(plan.warmup), order.size());
                for (std::size_t i = 0; i < n; ++i) {
                    const auto& c = bench.manifest.cases[order[i]];
                    (void)classify_case(cfg, render(bench.prompt, c.text), plan.retry_policy, *backend, opts.sleep);
                }
            }

            if (plan.concurrency <= 1) {
                auto backend = factory(cfg);
                for (const auto* c : todo) {
                    if (endpoint_down) {
                        mark_down(*c);
                        continue;
                    }
                    auto r = evaluate_case(plan, cfg, bench, *c, *backend, opts.sleep);
                    note_outcome(r);
                    append(std::move(r));
                }
            } else {
                std::atomic<std::size_t> next{0};
                std::mutex state_mu;
                std::exception_ptr failure;
                auto worker = [&] {
                    try {
                        auto backend = factory(cfg);
                        for (;;) {
                            const auto i = next.fetch_add(1);
                            if (i >= todo.size()) break;
                            bool down;
                            {
                                std::lock_guard lk(state_mu);
                                down = endpoint_down;
                            }
                            if (down) {
                                mark_down(*todo[i]);
                                continue;
                            }
                            auto r = evaluate_case(plan, cfg, bench, *todo[i], *backend, opts.sleep);
                            {
                                std::lock_guard lk(state_mu);
                                note_outcome(r);
                            }
                            append(std::move(r));
                        }
                    } catch (...) {
                        std::lock_guard lk(state_mu);
                        if (!failure) failure = std::current_exception();
                        next.store(todo.size());
                    }
                };
                std::vector<std::thread> pool;
                for (int w = 0; w < plan.concurrency; ++w) pool.emplace_back(worker);
                for (auto& t : pool) t.join();
                if (failure) std::rethrow_exception(failure);
            }
        }
    }

    std::vector<CaseResult> all = std::move(log.results);
    all.insert(all.end(), session.begin(), session.end());
    for (const auto& r : all)
        if (const auto* f = r.failure(); f && is_transport_failure(*f)) ++report.transport_failures;
    report.cells = write_cell_metrics(plan, run_dir, all);

    std::ofstream md(run_dir / "report.md", std::ios::binary | std::ios::trunc);
    md << render_report(bundle_from_plan(plan, report.cells), 250000, "Run report: " + plan.plan_id);
    return report;
}

/// Continues an interrupted run. With no plan given, the stored snapshot is
/// the plan.
inline RunReport resume(const fs::path& run_dir, const std::optional<RunPlan>& plan, ExecuteOptions opts = {}) {
    opts.resume = true;
    if (plan) return execute(*plan, run_dir, std::move(opts));
    std::ifstream in(run_dir / "plan.snapshot");
    if (!in) throw Error("cannot resume: no plan.snapshot in " + run_dir.string());
    auto snap = nlohmann::json::parse(in, nullptr, false);
    if (snap.is_discarded()) throw Error("cannot resume: plan.snapshot is corrupt");
    return execute(plan_from_snapshot(snap), run_dir, std::move(opts));
}

/// Plan summary for --dry-run; no network access.
inline std::string describe_plan(const RunPlan& plan) {
    std::ostringstream os;
    std::size_t per_config = 0;
    for (const auto& b : plan.benchmarks) per_config += b.manifest.cases.size();
    const auto warm = static_cast<std::size_t>(std::max(plan.warmup, 0));
    os << "plan " << plan.plan_id << " (hash " << plan_hash(plan) << ")\n";
    os << "configs x benchmarks: " << plan.configs.size() << " x " << plan.benchmarks.size() << "\n";
    for (const auto& c : plan.configs) {
        os << "  " << c.config_id << "  model=" << c.model_id << " mode=" << to_string(c.processing_mode)
           << " adapter=" << to_string(c.mode_adapter) << " T=" << c.temperature << " top_p=" << c.top_p
           << " max_tokens=" << c.max_output_tokens
           << " endpoint=" << (plan.mock ? std::string("mock:in-process") : c.endpoint_url) << "\n";
    }
    for (const auto& b : plan.benchmarks)
        os << "  benchmark " << b.name() << ": " << b.manifest.cases.size() << " cases (" << b.manifest.per_class_count
           << " per class), template " << b.template_origin << "\n";
    const auto requests = plan.configs.size() * (per_config + warm * plan.benchmarks.size());
    os << "estimated requests: " << requests << " (excluding retries)\n";
    os << "concurrency: " << plan.concurrency << (plan.concurrency > 1 ? " (timing not comparable to sequential protocol)" : "")
       << "\n";
    return os.str();
}

/// Loads configs/benchmarks from the snapshot and metrics files from a run
/// directory for re-rendering.
inline ReportBundle load_report_bundle(const fs::path& run_dir) {
    std::ifstream in(run_dir / "plan.snapshot");
    if (!in) throw Error("no plan.snapshot in " + run_dir.string());
    auto snap = nlohmann::json::parse(in, nullptr, false);
    if (snap.is_discarded() || !snap.contains("plan")) throw Error("plan.snapshot is corrupt");
    ReportBundle bundle;
    for (const auto& cj : snap["plan"].at("configs")) {
        auto c = config_from_json(cj);
        bundle.configs.push_back({c.config_id, c.model_id, c.processing_mode, c.size_billions});
    }
    for (const auto& bj : snap["plan"].at("benchmarks")) bundle.benchmarks.push_back(bj.at("name").get<std::string>());
    for (const auto& c : bundle.configs) {
        for (const auto& b : bundle.benchmarks) {
            const auto p = metrics_path(run_dir, c.config_id, b);
            if (!fs::exists(p)) continue;
            std::ifstream mf(p);
            auto j = nlohmann::json::parse(mf, nullptr, false);
            if (j.is_discarded()) throw Error(p.string() + " is corrupt");
            bundle.cells[{c.config_id, b}] = metrics_from_json(j);
        }
    }
    return bundle;
}

}  // namespace kappabench
