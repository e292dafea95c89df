#pragma once

// Chat-completions client for locally hosted inference servers.
//
// Wire surface (see docs/protocol.md): POST <endpoint>/v1/chat/completions
// with model, messages[system,user], temperature, top_p, max_tokens,
// stream=false, plus whatever the configured mode adapter adds.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "common.hpp"
#include "parser.hpp"
#include "prompt.hpp"
#include "results.hpp"

namespace kappabench {

enum class ProcessingMode { standard, reasoning, effort_low, effort_medium, effort_high };

inline const char* to_string(ProcessingMode m) {
    switch (m) {
    case ProcessingMode::standard: return "standard";
    case ProcessingMode::reasoning: return "reasoning";
    case ProcessingMode::effort_low: return "effort_low";
    case ProcessingMode::effort_medium: return "effort_medium";
    case ProcessingMode::effort_high: return "effort_high";
    }
    return "standard";
}

inline std::optional<ProcessingMode> processing_mode_from_string(std::string_view s) {
    for (auto m : {ProcessingMode::standard, ProcessingMode::reasoning, ProcessingMode::effort_low,
                   ProcessingMode::effort_medium, ProcessingMode::effort_high})
        if (s == to_string(m)) return m;
    return std::nullopt;
}

inline bool is_effort_mode(ProcessingMode m) {
    return m == ProcessingMode::effort_low || m == ProcessingMode::effort_medium || m == ProcessingMode::effort_high;
}

/// How a processing mode reaches the server.
///  think_toggle: /think or /no_think directive appended to the system text and
///                chat_template_kwargs.enable_thinking set.
///  effort_field: reasoning_effort = low | medium | high.
///  none:         mode is recorded but not transmitted.
enum class ModeAdapter { think_toggle, effort_field, none };

inline const char* to_string(ModeAdapter a) {
    switch (a) {
    case ModeAdapter::think_toggle: return "think-toggle";
    case ModeAdapter::effort_field: return "effort-field";
    case ModeAdapter::none: return "none";
    }
    return "none";
}

inline std::optional<ModeAdapter> mode_adapter_from_string(std::string_view s) {
    if (s == "think-toggle") return ModeAdapter::think_toggle;
    if (s == "effort-field") return ModeAdapter::effort_field;
    if (s == "none") return ModeAdapter::none;
    return std::nullopt;
}

struct SamplingDefaults {
    double temperature;
    double top_p;
};

/// standard 0.2 / 0.8, reasoning 0.2 / 0.95; effort levels keep temperature
/// 0.2 and the server-neutral top_p of 1.0.
inline SamplingDefaults sampling_defaults(ProcessingMode m) {
    switch (m) {
    case ProcessingMode::standard: return {0.2, 0.8};
    case ProcessingMode::reasoning: return {0.2, 0.95};
    default: return {0.2, 1.0};
    }
}

inline constexpr int kDefaultMaxOutputTokens = 2048;

struct ModelConfig {
    std::string config_id;
    std::string endpoint_url;
    std::string model_id;
    ProcessingMode processing_mode = ProcessingMode::standard;
    double temperature = 0.2;
    double top_p = 0.8;
    int max_output_tokens = kDefaultMaxOutputTokens;
    ModeAdapter mode_adapter = ModeAdapter::none;
    std::optional<std::string> hardware_note;
    std::optional<double> size_billions;  // row ordering in reports
    ReasoningDelimiters delimiters;
    bool lenient_labels = false;

    static ModelConfig with_defaults(std::string config_id, std::string endpoint_url, std::string model_id,
                                     ProcessingMode mode, ModeAdapter adapter) {
        ModelConfig c;
        c.config_id = std::move(config_id);
        c.endpoint_url = std::move(endpoint_url);
        c.model_id = std::move(model_id);
        c.processing_mode = mode;
        c.mode_adapter = adapter;
        const auto d = sampling_defaults(mode);
        c.temperature = d.temperature;
        c.top_p = d.top_p;
        return c;
    }
};

inline std::vector<std::string> config_problems(const ModelConfig& c) {
    std::vector<std::string> p;
    if (c.config_id.empty()) p.emplace_back("config_id is empty");
    if (c.model_id.empty()) p.emplace_back("model_id is empty");
    if (!(c.temperature >= 0.0)) p.emplace_back("temperature must be >= 0");
    if (!(c.top_p > 0.0 && c.top_p <= 1.0)) p.emplace_back("top_p must be in (0, 1]");
    if (c.max_output_tokens <= 0) p.emplace_back("max_output_tokens must be positive");
    if (is_effort_mode(c.processing_mode) && c.mode_adapter != ModeAdapter::effort_field)
        p.push_back(std::string(to_string(c.processing_mode)) + " requires the effort-field adapter");
    if (c.mode_adapter == ModeAdapter::effort_field && !is_effort_mode(c.processing_mode))
        p.emplace_back("effort-field adapter requires an effort_* processing mode");
    return p;
}

inline void validate_config(const ModelConfig& c) {
    const auto p = config_problems(c);
    if (p.empty()) return;
    std::string msg = "invalid model config '" + c.config_id + "'";
    for (const auto& s : p) msg += "\n  - " + s;
    throw Error(msg);
}

/// Missing sampling fields take the per-mode defaults.
inline ModelConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error("model config must be an object");
    ModelConfig c;
    try {
        c.config_id = j.at("config_id").get<std::string>();
        c.endpoint_url = j.value("endpoint_url", std::string{});
        c.model_id = j.at("model_id").get<std::string>();
        const auto mode = j.value("processing_mode", std::string{"standard"});
        auto m = processing_mode_from_string(mode);
        if (!m) throw Error("config " + c.config_id + ": unknown processing_mode '" + mode + "'");
        c.processing_mode = *m;
        const auto adapter = j.value("mode_adapter", std::string{"none"});
        auto a = mode_adapter_from_string(adapter);
        if (!a) throw Error("config " + c.config_id + ": unknown mode_adapter '" + adapter + "'");
        c.mode_adapter = *a;
        const auto d = sampling_defaults(c.processing_mode);
        c.temperature = j.value("temperature", d.temperature);
        c.top_p = j.value("top_p", d.top_p);
        c.max_output_tokens = j.value("max_output_tokens", kDefaultMaxOutputTokens);
        if (j.contains("hardware_note") && !j["hardware_note"].is_null())
            c.hardware_note = j["hardware_note"].get<std::string>();
        if (j.contains("size_billions") && !j["size_billions"].is_null())
            c.size_billions = j["size_billions"].get<double>();
        if (j.contains("reasoning_delimiters")) {
            const auto& rd = j["reasoning_delimiters"];
            c.delimiters.open = rd.value("open", c.delimiters.open);
            c.delimiters.close = rd.value("close", c.delimiters.close);
        }
        c.lenient_labels = j.value("lenient_labels", false);
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed model config: ") + e.what());
    }
    return c;
}

inline nlohmann::ordered_json config_to_json(const ModelConfig& c, bool include_endpoint = true) {
    nlohmann::ordered_json j;
    j["config_id"] = c.config_id;
    if (include_endpoint) j["endpoint_url"] = c.endpoint_url;
    j["model_id"] = c.model_id;
    j["processing_mode"] = to_string(c.processing_mode);
    j["mode_adapter"] = to_string(c.mode_adapter);
    j["temperature"] = c.temperature;
    j["top_p"] = c.top_p;
    j["max_output_tokens"] = c.max_output_tokens;
    if (c.hardware_note) j["hardware_note"] = *c.hardware_note;
    if (c.size_billions) j["size_billions"] = *c.size_billions;
    j["reasoning_delimiters"] = {{"open", c.delimiters.open}, {"close", c.delimiters.close}};
    j["lenient_labels"] = c.lenient_labels;
    return j;
}

/// Request body for one case, with the mode adapter applied.
inline nlohmann::ordered_json build_request_body(const ModelConfig& cfg, const RenderedPrompt& prompt) {
    std::string system = prompt.system_text;
    nlohmann::ordered_json body;
    body["model"] = cfg.model_id;
    if (cfg.mode_adapter == ModeAdapter::think_toggle) {
        const bool thinking = cfg.processing_mode == ProcessingMode::reasoning;
        system += thinking ? "\n/think" : "\n/no_think";
        body["chat_template_kwargs"] = {{"enable_thinking", thinking}};
    }
    body["messages"] = nlohmann::ordered_json::array(
        {{{"role", "system"}, {"content", system}}, {{"role", "user"}, {"content", prompt.user_text}}});
    body["temperature"] = cfg.temperature;
    body["top_p"] = cfg.top_p;
    body["max_tokens"] = cfg.max_output_tokens;
    body["stream"] = false;
    if (cfg.mode_adapter == ModeAdapter::effort_field) {
        const char* effort = cfg.processing_mode == ProcessingMode::effort_low      ? "low"
                             : cfg.processing_mode == ProcessingMode::effort_medium ? "medium"
                                                                                    : "high";
        body["reasoning_effort"] = effort;
    }
    return body;
}

// ---------------------------------------------------------------------------
// Transport

struct WireReply {
    enum class Status { ok, unreachable, timeout };
    Status status = Status::ok;
    int http_status = 0;
    std::string body;
    std::string detail;
};

/// One request/response exchange with a chat-completions server. Instances
/// are used by one thread at a time.
class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual WireReply post(const std::string& body, std::chrono::duration<double> timeout) = 0;
    virtual std::string identity() const = 0;
};

struct EndpointAddress {
    std::string scheme_host_port;
    std::string path;
};

inline EndpointAddress parse_endpoint(std::string_view url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string_view::npos) throw Error("endpoint URL needs a scheme: " + std::string(url));
    const auto scheme = to_lower(url.substr(0, scheme_end));
    if (scheme != "http") throw Error("only http:// endpoints are supported (got " + std::string(url) + ")");
    const auto path_start = url.find('/', scheme_end + 3);
    EndpointAddress a;
    a.scheme_host_port = std::string(url.substr(0, path_start));
    std::string path = path_start == std::string_view::npos ? std::string{} : std::string(url.substr(path_start));
    while (!path.empty() && path.back() == '/') path.pop_back();
    if (path.empty()) path = "/v1/chat/completions";
    else if (path.size() < 17 || path.compare(path.size() - 17, 17, "/chat/completions") != 0)
        path += "/chat/completions";
    a.path = path;
    return a;
}

class HttpBackend final : public ChatBackend {
public:
    HttpBackend(const std::string& endpoint_url, std::string api_key)
        : endpoint_(endpoint_url), address_(parse_endpoint(endpoint_url)), api_key_(std::move(api_key)),
          client_(address_.scheme_host_port) {
        client_.set_keep_alive(true);
        client_.set_tcp_nodelay(true);
    }

    WireReply post(const std::string& body, std::chrono::duration<double> timeout) override {
        const auto usec = std::chrono::duration_cast<std::chrono::microseconds>(timeout);
        client_.set_connection_timeout(usec);
        client_.set_read_timeout(usec);
        client_.set_write_timeout(usec);
        httplib::Headers headers;
        if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
        const auto started = std::chrono::steady_clock::now();
        auto res = client_.Post(address_.path, headers, body, "application/json");
        WireReply r;
        if (!res) {
            const auto err = res.error();
            const auto elapsed = std::chrono::steady_clock::now() - started;
            const bool timed_out = err == httplib::Error::ConnectionTimeout ||
                                   (err == httplib::Error::Read && elapsed >= timeout * 0.95);
            r.status = timed_out ? WireReply::Status::timeout : WireReply::Status::unreachable;
            r.detail = httplib::to_string(err);
            return r;
        }
        r.http_status = res->status;
        r.body = std::move(res->body);
        return r;
    }

    std::string identity() const override { return endpoint_; }

private:
    std::string endpoint_;
    EndpointAddress address_;
    std::string api_key_;
    httplib::Client client_;
};

struct RetryPolicy {
    int max_retries = 2;
    double timeout_s = 120.0;
    double backoff_initial_s = 0.5;
    double backoff_multiplier = 2.0;
    /// Consecutive unreachable cases after which a config's remaining cases
    /// are recorded as endpoint_down without dispatch. 0 disables.
    int endpoint_down_after = 3;

    friend bool operator==(const RetryPolicy&, const RetryPolicy&) = default;
};

struct TokenUsage {
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;
};

struct InferenceResponse {
    std::string raw_text;
    double latency_seconds = 0.0;  // successful attempt only
    int attempt_count = 1;
    bool truncated = false;
    std::optional<TokenUsage> token_usage;
};

struct TransportFailure {
    FailureKind kind = FailureKind::unreachable;
    std::string detail;
    int attempt_count = 0;
    double last_latency_seconds = 0.0;
};

using ClassifyOutcome = std::variant<InferenceResponse, TransportFailure>;

namespace detail {

inline bool transient(const WireReply& r) {
    if (r.status != WireReply::Status::ok) return true;
    return r.http_status == 408 || r.http_status == 429 || r.http_status >= 500;
}

/// Reasoning returned in a separate field is folded back in front of the
/// answer, wrapped in the configured delimiters.
inline std::optional<InferenceResponse> decode_completion(const std::string& body, const ReasoningDelimiters& delims,
                                                          std::string& why) {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        why = "response body is not JSON";
        return std::nullopt;
    }
    if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) {
        why = "response has no choices";
        return std::nullopt;
    }
    const auto& choice = j["choices"][0];
    if (!choice.contains("message") || !choice["message"].is_object()) {
        why = "response choice has no message";
        return std::nullopt;
    }
    const auto& msg = choice["message"];
    InferenceResponse out;
    std::string content = msg.contains("content") && msg["content"].is_string() ? msg["content"].get<std::string>() : "";
    if (msg.contains("reasoning_content") && msg["reasoning_content"].is_string() &&
        !msg["reasoning_content"].get<std::string>().empty())
        out.raw_text = delims.open + msg["reasoning_content"].get<std::string>() + delims.close;
    out.raw_text += content;
    out.truncated = choice.contains("finish_reason") && choice["finish_reason"] == "length";
    if (j.contains("usage") && j["usage"].is_object()) {
        TokenUsage u;
        u.prompt_tokens = j["usage"].value("prompt_tokens", std::int64_t{0});
        u.completion_tokens = j["usage"].value("completion_tokens", std::int64_t{0});
        out.token_usage = u;
    }
    return out;
}

}  // namespace detail

using SleepFn = std::function<void(std::chrono::duration<double>)>;

inline void real_sleep(std::chrono::duration<double> d) {
    if (d.count() > 0) std::this_thread::sleep_for(d);
}

/// Sends one case, retrying transient failures (no connection, timeout,
/// 408/429/5xx) with exponential backoff. Latency is client wall clock from
/// request start to full response, per attempt.
inline ClassifyOutcome classify_case(const ModelConfig& cfg, const RenderedPrompt& prompt, const RetryPolicy& policy,
                                     ChatBackend& backend, const SleepFn& sleep = real_sleep) {
    const auto body = build_request_body(cfg, prompt).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
    const auto timeout = std::chrono::duration<double>(policy.timeout_s);
    TransportFailure failure;
    double backoff = policy.backoff_initial_s;
    for (int attempt = 1; attempt <= policy.max_retries + 1; ++attempt) {
        const auto t0 = std::chrono::steady_clock::now();
        auto reply = backend.post(body, timeout);
        const double latency = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failure.attempt_count = attempt;
        failure.last_latency_seconds = latency;

        if (reply.status == WireReply::Status::ok && reply.http_status >= 200 && reply.http_status < 300) {
            std::string why;
            auto decoded = detail::decode_completion(reply.body, cfg.delimiters, why);
            if (!decoded) {
                failure.kind = FailureKind::http_status;
                failure.detail = "HTTP " + std::to_string(reply.http_status) + ": " + why;
                return failure;
            }
            decoded->latency_seconds = latency;
            decoded->attempt_count = attempt;
            return *decoded;
        }

        if (reply.status == WireReply::Status::unreachable) {
            failure.kind = FailureKind::unreachable;
            failure.detail = reply.detail;
        } else if (reply.status == WireReply::Status::timeout) {
            failure.kind = FailureKind::timeout;
            failure.detail = "no response within " + std::to_string(policy.timeout_s) + " s";
        } else {
            failure.kind = FailureKind::http_status;
            failure.detail = "HTTP " + std::to_string(reply.http_status) + ": " + reply.body.substr(0, 200);
        }
        if (!detail::transient(reply) || attempt == policy.max_retries + 1) break;
        sleep(std::chrono::duration<double>(backoff));
        backoff *= policy.backoff_multiplier;
    }
    return failure;
}

}  // namespace kappabench
