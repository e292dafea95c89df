#pragma once

// Agreement and timing statistics over per-case results.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "results.hpp"
#include "rng.hpp"

namespace kappabench {

struct ConfusionMatrix {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t tn = 0;
    std::uint64_t fn = 0;

    std::uint64_t n() const { return tp + fp + tn + fn; }

    void add(Label gold, Label predicted) {
        if (gold == Label::positive) (predicted == Label::positive ? tp : fn) += 1;
        else (predicted == Label::positive ? fp : tn) += 1;
    }

    /// Relabel negative as the positive class.
    ConfusionMatrix swapped() const { return {tn, fn, tp, fp}; }

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// kappa = (p_o - p_e) / (1 - p_e). Evaluated as the integer ratio
/// (n*(tp+tn) - S) / (n^2 - S), S = sum of marginal products, so the only
/// rounding is the final division. When p_e = 1 the result is 1 if p_o = 1
/// and undefined otherwise; n = 0 is undefined.
inline std::optional<double> cohen_kappa(const ConfusionMatrix& m) {
    using wide = __int128;
    const wide n = m.n();
    if (n == 0) return std::nullopt;
    const wide gold_pos = m.tp + m.fn;
    const wide pred_pos = m.tp + m.fp;
    const wide gold_neg = m.tn + m.fp;
    const wide pred_neg = m.tn + m.fn;
    const wide chance = gold_pos * pred_pos + gold_neg * pred_neg;
    const wide agree = static_cast<wide>(m.tp + m.tn);
    const wide den = n * n - chance;
    if (den == 0) return agree == n ? std::optional<double>(1.0) : std::nullopt;
    const wide num = n * agree - chance;
    constexpr wide exact_limit = static_cast<wide>(1) << 53;
    if (num < exact_limit && -num < exact_limit && den < exact_limit)
        return static_cast<double>(num) / static_cast<double>(den);
    return static_cast<double>(static_cast<long double>(num) / static_cast<long double>(den));
}

inline std::optional<double> sensitivity(const ConfusionMatrix& m) {
    if (m.tp + m.fn == 0) return std::nullopt;
    return static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
}

inline std::optional<double> specificity(const ConfusionMatrix& m) {
    if (m.tn + m.fp == 0) return std::nullopt;
    return static_cast<double>(m.tn) / static_cast<double>(m.tn + m.fp);
}

inline std::optional<double> accuracy(const ConfusionMatrix& m) {
    if (m.n() == 0) return std::nullopt;
    return static_cast<double>(m.tp + m.tn) / static_cast<double>(m.n());
}

enum class AgreementBand { poor, moderate, substantial, almost_perfect };

inline const char* to_string(AgreementBand b) {
    switch (b) {
    case AgreementBand::poor: return "poor";
    case AgreementBand::moderate: return "moderate";
    case AgreementBand::substantial: return "substantial";
    case AgreementBand::almost_perfect: return "almost_perfect";
    }
    return "poor";
}

/// Half-open bands anchored at 0.41 / 0.61 / 0.80; the 0.40-0.41 gap is poor.
inline AgreementBand band(double kappa) {
    if (kappa >= 0.80) return AgreementBand::almost_perfect;
    if (kappa >= 0.61) return AgreementBand::substantial;
    if (kappa >= 0.41) return AgreementBand::moderate;
    return AgreementBand::poor;
}

struct TimingStats {
    std::optional<double> mean;
    std::optional<double> sd;  // sample (n-1) estimator
};

/// Welford accumulation; a constant series yields sd exactly 0.
inline TimingStats timing_stats(std::span<const double> durations) {
    TimingStats s;
    if (durations.empty()) return s;
    double mean = 0.0;
    double m2 = 0.0;
    std::size_t k = 0;
    for (double x : durations) {
        ++k;
        const double delta = x - mean;
        mean += delta / static_cast<double>(k);
        m2 += delta * (x - mean);
    }
    s.mean = mean;
    if (k >= 2) s.sd = std::sqrt(std::max(0.0, m2 / static_cast<double>(k - 1)));
    return s;
}

struct ThroughputProjection {
    double hours = 0.0;
    double mean_latency_s = 0.0;
    std::uint64_t n_records = 0;
    std::string latency_source;
};

inline ThroughputProjection project_throughput(double mean_latency_s, std::uint64_t n_records,
                                               std::string latency_source = {}) {
    if (!(mean_latency_s > 0.0) || !std::isfinite(mean_latency_s))
        throw Error("project_throughput: mean latency must be positive and finite");
    return {mean_latency_s * static_cast<double>(n_records) / 3600.0, mean_latency_s, n_records,
            std::move(latency_source)};
}

// ---------------------------------------------------------------------------
// Aggregation

struct Accumulation {
    std::string config_id;
    std::string benchmark;
    ConfusionMatrix matrix;
    std::vector<double> latencies;  // every case that received a model response, sorted
    std::map<FailureKind, std::size_t> failures;
    std::size_t n_failed = 0;
};

/// Order-independent fold. Failed cases only increment the tally; transport
/// failures contribute no latency.
inline Accumulation accumulate(std::span<const CaseResult> results) {
    Accumulation acc;
    bool first = true;
    for (const auto& r : results) {
        if (first) {
            acc.config_id = r.config_id;
            acc.benchmark = r.benchmark;
            first = false;
        } else if (r.config_id != acc.config_id || r.benchmark != acc.benchmark) {
            throw Error("accumulate: mixed cells (" + acc.config_id + "/" + acc.benchmark + " vs " + r.config_id +
                        "/" + r.benchmark + ")");
        }
        if (const auto* l = r.parsed_label()) {
            acc.matrix.add(r.gold_label, *l);
            acc.latencies.push_back(r.latency_seconds);
        } else {
            const auto kind = *r.failure();
            acc.failures[kind] += 1;
            acc.n_failed += 1;
            if (!is_transport_failure(kind)) acc.latencies.push_back(r.latency_seconds);
        }
    }
    std::sort(acc.latencies.begin(), acc.latencies.end());
    return acc;
}

struct BootstrapInterval {
    double lower = 0.0;
    double upper = 0.0;
    int replicates = 0;
    std::uint64_t seed = 0;
};

/// Percentile bootstrap for kappa: cases are resampled with replacement,
/// which for a 2x2 table is a multinomial draw over the four cells.
inline std::optional<BootstrapInterval> bootstrap_kappa_ci(const ConfusionMatrix& m, int replicates = 2000,
                                                           std::uint64_t seed = 0, double level = 0.95) {
    const auto n = m.n();
    if (n == 0 || replicates < 2) return std::nullopt;
    SeededRng rng(seed);
    std::vector<double> draws;
    draws.reserve(static_cast<std::size_t>(replicates));
    for (int r = 0; r < replicates; ++r) {
        ConfusionMatrix b;
        for (std::uint64_t i = 0; i < n; ++i) {
            const auto u = rng.below(n);
            if (u < m.tp) ++b.tp;
            else if (u < m.tp + m.fp) ++b.fp;
            else if (u < m.tp + m.fp + m.tn) ++b.tn;
            else ++b.fn;
        }
        if (auto k = cohen_kappa(b)) draws.push_back(*k);
    }
    if (draws.size() < 2) return std::nullopt;
    std::sort(draws.begin(), draws.end());
    const double alpha = (1.0 - level) / 2.0;
    auto at = [&](double q) {
        const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(draws.size() - 1) + 0.5));
        return draws[std::min(idx, draws.size() - 1)];
    };
    return BootstrapInterval{at(alpha), at(1.0 - alpha), replicates, seed};
}

enum class SummaryStatus { ok, degraded, no_valid_results };

inline const char* to_string(SummaryStatus s) {
    switch (s) {
    case SummaryStatus::ok: return "ok";
    case SummaryStatus::degraded: return "degraded";
    case SummaryStatus::no_valid_results: return "no_valid_results";
    }
    return "ok";
}

inline constexpr double kDegradedFailureRate = 0.02;

struct MetricsSummary {
    std::string config_id;
    std::string benchmark;
    ConfusionMatrix matrix;
    std::optional<double> kappa;
    std::optional<double> sensitivity;
    std::optional<double> specificity;
    std::optional<double> accuracy;
    std::optional<AgreementBand> band;
    std::optional<double> time_mean_s;
    std::optional<double> time_sd_s;
    std::size_t n_valid = 0;
    std::size_t n_failed = 0;
    std::map<FailureKind, std::size_t> failures;
    SummaryStatus status = SummaryStatus::ok;
    bool concurrent_timing = false;
    std::optional<BootstrapInterval> kappa_ci;

    double failure_rate() const {
        const auto total = n_valid + n_failed;
        return total == 0 ? 0.0 : static_cast<double>(n_failed) / static_cast<double>(total);
    }
};

struct SummaryOptions {
    bool concurrent_timing = false;
    bool bootstrap = false;
    int bootstrap_replicates = 2000;
    std::uint64_t bootstrap_seed = 0;
};

inline MetricsSummary summarize(const Accumulation& acc, const SummaryOptions& opt = {}) {
    MetricsSummary s;
    s.config_id = acc.config_id;
    s.benchmark = acc.benchmark;
    s.matrix = acc.matrix;
    s.n_valid = static_cast<std::size_t>(acc.matrix.n());
    s.n_failed = acc.n_failed;
    s.failures = acc.failures;
    s.kappa = cohen_kappa(acc.matrix);
    s.sensitivity = sensitivity(acc.matrix);
    s.specificity = specificity(acc.matrix);
    s.accuracy = accuracy(acc.matrix);
    if (s.kappa) s.band = band(*s.kappa);
    const auto t = timing_stats(acc.latencies);
    s.time_mean_s = t.mean;
    s.time_sd_s = t.sd;
    s.concurrent_timing = opt.concurrent_timing;
    if (s.n_valid == 0) s.status = SummaryStatus::no_valid_results;
    else if (s.failure_rate() > kDegradedFailureRate) s.status = SummaryStatus::degraded;
    if (opt.bootstrap) s.kappa_ci = bootstrap_kappa_ci(acc.matrix, opt.bootstrap_replicates, opt.bootstrap_seed);
    return s;
}

// ---------------------------------------------------------------------------
// Metrics file (one per config x benchmark cell)

inline constexpr const char* kMetricsSchema = "kappabench.metrics/1";

namespace detail {
template <typename Json>
void put_optional(Json& j, const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
    else j[key] = nullptr;
}
inline std::optional<double> get_optional(const nlohmann::json& j, const char* key) {
    if (!j.contains(key) || j[key].is_null()) return std::nullopt;
    return j[key].get<double>();
}
}  // namespace detail

inline nlohmann::ordered_json metrics_to_json(const MetricsSummary& s) {
    nlohmann::ordered_json j;
    j["schema_version"] = kMetricsSchema;
    j["config_id"] = s.config_id;
    j["benchmark"] = s.benchmark;
    j["status"] = to_string(s.status);
    j["n_valid"] = s.n_valid;
    j["n_failed"] = s.n_failed;
    j["failure_rate"] = s.failure_rate();
    j["confusion"] = {{"tp", s.matrix.tp}, {"fp", s.matrix.fp}, {"tn", s.matrix.tn}, {"fn", s.matrix.fn}};
    detail::put_optional(j, "kappa", s.kappa);
    if (s.band) j["band"] = to_string(*s.band);
    else j["band"] = nullptr;
    detail::put_optional(j, "sensitivity", s.sensitivity);
    detail::put_optional(j, "specificity", s.specificity);
    detail::put_optional(j, "accuracy", s.accuracy);
    detail::put_optional(j, "time_mean_s", s.time_mean_s);
    detail::put_optional(j, "time_sd_s", s.time_sd_s);
    j["timing"] = s.concurrent_timing ? "concurrent - not comparable to sequential per-case protocol" : "sequential";
    auto& f = j["failures"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : s.failures) f[to_string(k)] = v;
    if (s.kappa_ci) {
        j["kappa_bootstrap_ci95"] = {{"lower", s.kappa_ci->lower},
                                     {"upper", s.kappa_ci->upper},
                                     {"replicates", s.kappa_ci->replicates},
                                     {"seed", s.kappa_ci->seed},
                                     {"note", "extension: percentile bootstrap over cases"}};
    }
    return j;
}

inline MetricsSummary metrics_from_json(const nlohmann::json& j) {
    if (j.value("schema_version", std::string{}) != kMetricsSchema)
        throw Error("metrics file has unsupported schema_version");
    MetricsSummary s;
    try {
        s.config_id = j.at("config_id").get<std::string>();
        s.benchmark = j.at("benchmark").get<std::string>();
        const auto status = j.at("status").get<std::string>();
        if (status == "degraded") s.status = SummaryStatus::degraded;
        else if (status == "no_valid_results") s.status = SummaryStatus::no_valid_results;
        s.n_valid = j.at("n_valid").get<std::size_t>();
        s.n_failed = j.at("n_failed").get<std::size_t>();
        const auto& c = j.at("confusion");
        s.matrix = {c.at("tp").get<std::uint64_t>(), c.at("fp").get<std::uint64_t>(), c.at("tn").get<std::uint64_t>(),
                    c.at("fn").get<std::uint64_t>()};
        s.kappa = detail::get_optional(j, "kappa");
        if (s.kappa) s.band = band(*s.kappa);
        s.sensitivity = detail::get_optional(j, "sensitivity");
        s.specificity = detail::get_optional(j, "specificity");
        s.accuracy = detail::get_optional(j, "accuracy");
        s.time_mean_s = detail::get_optional(j, "time_mean_s");
        s.time_sd_s = detail::get_optional(j, "time_sd_s");
        s.concurrent_timing = j.value("timing", std::string{"sequential"}) != "sequential";
        if (j.contains("failures"))
            for (const auto& [k, v] : j["failures"].items())
                if (auto kind = failure_kind_from_string(k)) s.failures[*kind] = v.get<std::size_t>();
        if (j.contains("kappa_bootstrap_ci95")) {
            const auto& ci = j["kappa_bootstrap_ci95"];
            s.kappa_ci = BootstrapInterval{ci.at("lower").get<double>(), ci.at("upper").get<double>(),
                                           ci.at("replicates").get<int>(), ci.at("seed").get<std::uint64_t>()};
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed metrics file: ") + e.what());
    }
    return s;
}

}  // namespace kappabench
