#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <variant>

#include <json.hpp>

#include "common.hpp"
#include "parser.hpp"

namespace kappabench {

/// Why a case has no usable label. The first five come from the response
/// parser, the rest from the transport layer.
enum class FailureKind {
    no_payload_found,
    malformed_payload,
    missing_label_field,
    invalid_label_value,
    truncated_output,
    unreachable,
    timeout,
    http_status,
    endpoint_down,
};

inline constexpr FailureKind kAllFailureKinds[] = {
    FailureKind::no_payload_found, FailureKind::malformed_payload, FailureKind::missing_label_field,
    FailureKind::invalid_label_value, FailureKind::truncated_output, FailureKind::unreachable,
    FailureKind::timeout, FailureKind::http_status, FailureKind::endpoint_down,
};

inline const char* to_string(FailureKind k) {
    switch (k) {
    case FailureKind::no_payload_found: return "no_payload_found";
    case FailureKind::malformed_payload: return "malformed_payload";
    case FailureKind::missing_label_field: return "missing_label_field";
    case FailureKind::invalid_label_value: return "invalid_label_value";
    case FailureKind::truncated_output: return "truncated_output";
    case FailureKind::unreachable: return "unreachable";
    case FailureKind::timeout: return "timeout";
    case FailureKind::http_status: return "http_status";
    case FailureKind::endpoint_down: return "endpoint_down";
    }
    return "unknown";
}

inline std::optional<FailureKind> failure_kind_from_string(std::string_view s) {
    for (auto k : kAllFailureKinds)
        if (s == to_string(k)) return k;
    return std::nullopt;
}

inline bool is_transport_failure(FailureKind k) {
    return k == FailureKind::unreachable || k == FailureKind::timeout || k == FailureKind::http_status ||
           k == FailureKind::endpoint_down;
}

inline FailureKind failure_from_parse(ParseErrorKind k) {
    switch (k) {
    case ParseErrorKind::no_payload_found: return FailureKind::no_payload_found;
    case ParseErrorKind::malformed_payload: return FailureKind::malformed_payload;
    case ParseErrorKind::missing_label_field: return FailureKind::missing_label_field;
    case ParseErrorKind::invalid_label_value: return FailureKind::invalid_label_value;
    case ParseErrorKind::truncated_output: return FailureKind::truncated_output;
    }
    return FailureKind::malformed_payload;
}

/// One line of results.log.
struct CaseResult {
    std::string plan_id;
    std::string config_id;
    std::string benchmark;
    std::string case_id;
    Label gold_label = Label::negative;
    std::variant<Label, FailureKind> outcome = Label::negative;
    std::string error_detail;
    std::string raw_output;
    std::optional<std::string> reasoning_trace;
    double latency_seconds = 0.0;
    int attempt_count = 0;
    bool truncated = false;
    std::string timestamp;

    bool valid() const { return std::holds_alternative<Label>(outcome); }
    const Label* parsed_label() const { return std::get_if<Label>(&outcome); }
    const FailureKind* failure() const { return std::get_if<FailureKind>(&outcome); }
};

inline nlohmann::ordered_json case_result_to_json(const CaseResult& r) {
    nlohmann::ordered_json j;
    j["plan_id"] = r.plan_id;
    j["config_id"] = r.config_id;
    j["benchmark"] = r.benchmark;
    j["case_id"] = r.case_id;
    j["gold_label"] = to_string(r.gold_label);
    if (const auto* l = r.parsed_label()) j["parsed_label"] = to_string(*l);
    else {
        j["error_kind"] = to_string(*r.failure());
        j["error_detail"] = r.error_detail;
    }
    j["raw_output"] = r.raw_output;
    if (r.reasoning_trace) j["reasoning_trace"] = *r.reasoning_trace;
    j["latency_seconds"] = r.latency_seconds;
    j["attempt_count"] = r.attempt_count;
    j["truncated"] = r.truncated;
    j["timestamp"] = r.timestamp;
    return j;
}

/// Single line, no trailing newline. Invalid UTF-8 in model output is
/// replaced with U+FFFD so the log always stays valid JSON.
inline std::string case_result_to_line(const CaseResult& r) {
    return case_result_to_json(r).dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::replace);
}

inline CaseResult case_result_from_json(const nlohmann::json& j) {
    CaseResult r;
    try {
        r.plan_id = j.at("plan_id").get<std::string>();
        r.config_id = j.at("config_id").get<std::string>();
        r.benchmark = j.at("benchmark").get<std::string>();
        r.case_id = j.at("case_id").get<std::string>();
        auto gold = parse_label_token(j.at("gold_label").get<std::string>());
        if (!gold) throw Error("bad gold_label");
        r.gold_label = *gold;
        const bool has_label = j.contains("parsed_label");
        const bool has_error = j.contains("error_kind");
        if (has_label == has_error) throw Error("exactly one of parsed_label / error_kind must be present");
        if (has_label) {
            auto l = parse_label_token(j["parsed_label"].get<std::string>());
            if (!l) throw Error("bad parsed_label");
            r.outcome = *l;
        } else {
            auto k = failure_kind_from_string(j["error_kind"].get<std::string>());
            if (!k) throw Error("unknown error_kind");
            r.outcome = *k;
            r.error_detail = j.value("error_detail", std::string{});
        }
        r.raw_output = j.value("raw_output", std::string{});
        if (j.contains("reasoning_trace")) r.reasoning_trace = j["reasoning_trace"].get<std::string>();
        r.latency_seconds = j.at("latency_seconds").get<double>();
        r.attempt_count = j.value("attempt_count", 0);
        r.truncated = j.value("truncated", false);
        r.timestamp = j.value("timestamp", std::string{});
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed result record: ") + e.what());
    }
    return r;
}

}  // namespace kappabench
