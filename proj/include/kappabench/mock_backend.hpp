#pragma once

// Deterministic stand-in for an inference server. It recognises the case in
// each request, answers with the gold label (or its flip), optionally wraps
// the answer in a reasoning trace, optionally emits malformed text, and sleeps
// for a per-case latency draw. Every decision is a function of
// (seed, case text) only, so outcomes do not depend on request order.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "common.hpp"
#include "corpus.hpp"
#include "gateway.hpp"
#include "rng.hpp"

namespace kappabench {

struct MockSpec {
    double flip_probability = 0.0;
    double malformed_probability = 0.0;
    double latency_mean_s = 0.0;
    double latency_sd_s = 0.0;
    bool reasoning_trace = false;
    std::uint64_t seed = 0;

    friend bool operator==(const MockSpec&, const MockSpec&) = default;
};

inline nlohmann::ordered_json mock_spec_to_json(const MockSpec& s) {
    nlohmann::ordered_json j;
    j["flip_probability"] = s.flip_probability;
    j["malformed_probability"] = s.malformed_probability;
    j["latency"] = {{"distribution", "normal_truncated_at_zero"}, {"mean_s", s.latency_mean_s}, {"sd_s", s.latency_sd_s}};
    j["reasoning_trace"] = s.reasoning_trace;
    j["seed"] = s.seed;
    return j;
}

inline MockSpec mock_spec_from_json(const nlohmann::json& j) {
    MockSpec s;
    s.flip_probability = j.value("flip_probability", 0.0);
    s.malformed_probability = j.value("malformed_probability", 0.0);
    if (j.contains("latency")) {
        s.latency_mean_s = j["latency"].value("mean_s", 0.0);
        s.latency_sd_s = j["latency"].value("sd_s", 0.0);
    }
    s.reasoning_trace = j.value("reasoning_trace", false);
    s.seed = j.value("seed", std::uint64_t{0});
    if (s.flip_probability < 0 || s.flip_probability > 1 || s.malformed_probability < 0 ||
        s.malformed_probability > 1 || s.latency_mean_s < 0 || s.latency_sd_s < 0)
        throw Error("mock spec: probabilities must be in [0,1] and latency parameters non-negative");
    return s;
}

/// What the mock decided for one case.
struct MockDecision {
    Label answered = Label::negative;
    bool flipped = false;
    bool malformed = false;
    double delay_s = 0.0;
    int malformed_variant = 0;
};

struct InjectedDelay {
    std::string case_id;
    double delay_s;
};

class MockBackend final : public ChatBackend {
public:
    explicit MockBackend(MockSpec spec) : spec_(spec) {}

    void add_case(const LabeledCase& c) {
        std::lock_guard lock(mu_);
        if (by_text_.emplace(c.text, cases_.size()).second) cases_.push_back(c);
    }

    void add_manifest(const BenchmarkManifest& m) {
        for (const auto& c : m.cases) add_case(c);
    }

    const MockSpec& spec() const { return spec_; }

    MockDecision decide(const LabeledCase& c) const {
        SeededRng rng(mix_seed(spec_.seed, fnv1a64(c.text)));
        MockDecision d;
        d.malformed = rng.bernoulli(spec_.malformed_probability);
        d.flipped = rng.bernoulli(spec_.flip_probability);
        d.answered = d.flipped ? flipped(c.gold_label) : c.gold_label;
        d.delay_s = rng.truncated_normal(spec_.latency_mean_s, spec_.latency_sd_s);
        d.malformed_variant = static_cast<int>(rng.below(4));
        return d;
    }

    /// Handles one chat-completions request body; returns (HTTP status, body).
    /// Sleeps for the case's latency draw, capped at `timeout`.
    std::pair<int, std::string> respond(const std::string& request_body,
                                        std::optional<std::chrono::duration<double>> timeout = std::nullopt,
                                        bool* timed_out = nullptr) {
        auto req = nlohmann::json::parse(request_body, nullptr, false);
        if (req.is_discarded() || !req.contains("messages") || !req["messages"].is_array())
            return {400, R"({"error":{"message":"request must carry a messages array"}})"};
        std::string user;
        for (const auto& m : req["messages"])
            if (m.value("role", "") == "user" && m.contains("content") && m["content"].is_string())
                user = m["content"].get<std::string>();
        const auto c = find_case(user);
        if (!c) return {400, R"({"error":{"message":"mock does not know this case"}})"};

        const auto d = decide(*c);
        {
            std::lock_guard lock(mu_);
            delays_.push_back({c->case_id, d.delay_s});
        }
        if (timeout && d.delay_s > timeout->count()) {
            std::this_thread::sleep_for(*timeout);
            if (timed_out) *timed_out = true;
            return {0, {}};
        }
        if (d.delay_s > 0) std::this_thread::sleep_for(std::chrono::duration<double>(d.delay_s));

        std::string content;
        if (d.malformed) {
            static const char* variants[] = {
                "I am unable to determine this from the record.",
                "{\"label\": \"present\"",
                "{label: absent}",
                "```json\n{\"label\": }\n```",
            };
            content = variants[d.malformed_variant];
        } else {
            const char* token = d.answered == Label::positive ? "present" : "absent";
            const char* decoy = d.answered == Label::positive ? "absent" : "present";
            if (spec_.reasoning_trace)
                content = std::string("<think>\nDraft: {\"label\": \"") + decoy +
                          "\"}\nRe-reading the record against the definition.\n</think>\n\n";
            content += std::string("{\"label\": \"") + token + "\"}";
        }

        const auto id = counter_.fetch_add(1);
        nlohmann::ordered_json resp;
        resp["id"] = "mock-" + std::to_string(id);
        resp["object"] = "chat.completion";
        resp["model"] = req.value("model", std::string{"mock"});
        resp["choices"] = nlohmann::ordered_json::array(
            {{{"index", 0},
              {"message", {{"role", "assistant"}, {"content", content}}},
              {"finish_reason", "stop"}}});
        resp["usage"] = {{"prompt_tokens", word_count(request_body)},
                         {"completion_tokens", word_count(content)},
                         {"total_tokens", word_count(request_body) + word_count(content)}};
        return {200, resp.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace)};
    }

    WireReply post(const std::string& body, std::chrono::duration<double> timeout) override {
        bool timed_out = false;
        auto [status, text] = respond(body, timeout, &timed_out);
        WireReply r;
        if (timed_out) {
            r.status = WireReply::Status::timeout;
            r.detail = "mock delay exceeded timeout";
            return r;
        }
        r.http_status = status;
        r.body = std::move(text);
        return r;
    }

    std::string identity() const override { return "mock:in-process"; }

    std::vector<InjectedDelay> injected_delays() const {
        std::lock_guard lock(mu_);
        return delays_;
    }

private:
    std::optional<LabeledCase> find_case(const std::string& user_text) const {
        std::lock_guard lock(mu_);
        if (auto it = by_text_.find(user_text); it != by_text_.end()) return cases_[it->second];
        const LabeledCase* best = nullptr;
        for (const auto& c : cases_)
            if ((!best || c.text.size() > best->text.size()) && user_text.find(c.text) != std::string::npos) best = &c;
        if (best) return *best;
        return std::nullopt;
    }

    static std::int64_t word_count(const std::string& s) {
        std::int64_t n = 0;
        bool in_word = false;
        for (unsigned char ch : s) {
            const bool space = std::isspace(ch) != 0;
            if (!space && !in_word) ++n;
            in_word = !space;
        }
        return n;
    }

    MockSpec spec_;
    mutable std::mutex mu_;
    std::vector<LabeledCase> cases_;
    std::unordered_map<std::string, std::size_t> by_text_;
    std::vector<InjectedDelay> delays_;
    std::atomic<std::uint64_t> counter_{0};
};

/// Serves a MockBackend on a loopback port with the chat-completions surface
/// the gateway expects. Runs on a background thread until stopped.
class MockServer {
public:
    explicit MockServer(std::shared_ptr<MockBackend> backend) : backend_(std::move(backend)) {
        auto handler = [this](const httplib::Request& req, httplib::Response& res) {
            auto [status, body] = backend_->respond(req.body);
            res.status = status;
            res.set_content(body, "application/json");
        };
        server_.set_tcp_nodelay(true);
        server_.Post("/v1/chat/completions", handler);
        server_.Post("/chat/completions", handler);
        server_.Get("/health", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"status":"ok"})", "application/json");
        });
        server_.Get("/v1/models", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"object":"list","data":[{"id":"mock","object":"model"}]})", "application/json");
        });
    }

    ~MockServer() { stop(); }

    MockServer(const MockServer&) = delete;
    MockServer& operator=(const MockServer&) = delete;

    /// Binds 127.0.0.1:port (0 picks a free port) and returns the bound port.
    int bind(int port = 0) {
        port_ = port == 0 ? server_.bind_to_any_port("127.0.0.1") : (server_.bind_to_port("127.0.0.1", port) ? port : -1);
        if (port_ < 0) throw Error("mock server could not bind 127.0.0.1:" + std::to_string(port));
        return port_;
    }

    /// Binds and serves on a background thread.
    int start(int port = 0) {
        bind(port);
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port_;
    }

    /// Serves on the calling thread until stop() is called elsewhere.
    void listen() { server_.listen_after_bind(); }

    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    int port() const { return port_; }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
    httplib::Server& server() { return server_; }

private:
    std::shared_ptr<MockBackend> backend_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = -1;
};

}  // namespace kappabench
