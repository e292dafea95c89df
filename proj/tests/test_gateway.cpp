#include <gtest/gtest.h>

#include <deque>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include "support.hpp"

using namespace kbtest;

namespace {

class ScriptedBackend final : public ChatBackend {
public:
    explicit ScriptedBackend(std::deque<WireReply> replies) : replies_(std::move(replies)) {}
    WireReply post(const std::string& body, std::chrono::duration<double>) override {
        bodies.push_back(body);
        auto r = replies_.front();
        if (replies_.size() > 1) replies_.pop_front();
        return r;
    }
    std::string identity() const override { return "scripted"; }
    std::vector<std::string> bodies;

private:
    std::deque<WireReply> replies_;
};

WireReply http(int status, std::string body = {}) {
    WireReply r;
    r.http_status = status;
    r.body = std::move(body);
    return r;
}

WireReply down() {
    WireReply r;
    r.status = WireReply::Status::unreachable;
    r.detail = "connection refused";
    return r;
}

std::string completion(const std::string& content, const std::string& finish = "stop", const std::string& reasoning = "") {
    nlohmann::json j;
    j["choices"] = nlohmann::json::array({{{"message", {{"role", "assistant"}, {"content", content}}}, {"finish_reason", finish}}});
    if (!reasoning.empty()) j["choices"][0]["message"]["reasoning_content"] = reasoning;
    return j.dump();
}

RetryPolicy fast_policy() {
    RetryPolicy p;
    p.timeout_s = 5;
    p.backoff_initial_s = 0.0;
    return p;
}

const SleepFn no_sleep = [](std::chrono::duration<double>) {};

// A loopback port that was free a moment ago and has nothing listening now.
int dead_port() {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
    socklen_t len = sizeof addr;
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    ::close(fd);
    return ntohs(addr.sin_port);
}

}  // namespace

TEST(Modes, SamplingDefaults) {
    const auto s = ModelConfig::with_defaults("a", "", "m", ProcessingMode::standard, ModeAdapter::think_toggle);
    EXPECT_EQ(s.temperature, 0.2);
    EXPECT_EQ(s.top_p, 0.8);
    EXPECT_EQ(s.max_output_tokens, 2048);
    const auto r = ModelConfig::with_defaults("b", "", "m", ProcessingMode::reasoning, ModeAdapter::think_toggle);
    EXPECT_EQ(r.temperature, 0.2);
    EXPECT_EQ(r.top_p, 0.95);
    const auto e = config_from_json(nlohmann::json::parse(
        R"({"config_id":"g","model_id":"gpt-oss-20b","processing_mode":"effort_high","mode_adapter":"effort-field"})"));
    EXPECT_EQ(e.temperature, 0.2);
    EXPECT_EQ(e.top_p, 1.0);
    const auto o = config_from_json(nlohmann::json::parse(
        R"({"config_id":"g","model_id":"m","processing_mode":"standard","mode_adapter":"none","top_p":0.5})"));
    EXPECT_EQ(o.top_p, 0.5);
}

TEST(Modes, AdapterConsistency) {
    auto c = ModelConfig::with_defaults("a", "", "m", ProcessingMode::effort_low, ModeAdapter::think_toggle);
    EXPECT_THROW(validate_config(c), Error);
    c = ModelConfig::with_defaults("a", "", "m", ProcessingMode::standard, ModeAdapter::effort_field);
    EXPECT_THROW(validate_config(c), Error);
    c = ModelConfig::with_defaults("a", "", "m", ProcessingMode::effort_medium, ModeAdapter::effort_field);
    EXPECT_NO_THROW(validate_config(c));
}

TEST(Request, ThinkToggle) {
    const auto p = render(make_template(), "text");
    auto c = ModelConfig::with_defaults("a", "", "qwen3-4b", ProcessingMode::reasoning, ModeAdapter::think_toggle);
    auto b = build_request_body(c, p);
    EXPECT_EQ(b["chat_template_kwargs"]["enable_thinking"], true);
    EXPECT_EQ(b["messages"][0]["content"].get<std::string>().substr(p.system_text.size()), "\n/think");
    EXPECT_EQ(b["messages"][1]["content"], p.user_text);
    EXPECT_EQ(b["temperature"], 0.2);
    EXPECT_EQ(b["top_p"], 0.95);
    EXPECT_EQ(b["max_tokens"], 2048);
    c.processing_mode = ProcessingMode::standard;
    b = build_request_body(c, p);
    EXPECT_EQ(b["chat_template_kwargs"]["enable_thinking"], false);
    EXPECT_FALSE(b.contains("reasoning_effort"));
}

TEST(Request, EffortField) {
    const auto p = render(make_template(), "text");
    const auto c = ModelConfig::with_defaults("g", "", "gpt-oss-20b", ProcessingMode::effort_medium, ModeAdapter::effort_field);
    const auto b = build_request_body(c, p);
    EXPECT_EQ(b["reasoning_effort"], "medium");
    EXPECT_FALSE(b.contains("chat_template_kwargs"));
    EXPECT_EQ(b["messages"][0]["content"], p.system_text);
}

TEST(Classify, RetriesTransientThenSucceeds) {
    ScriptedBackend be({http(503), down(), http(200, completion(R"({"label":"present"})"))});
    const auto c = ModelConfig::with_defaults("a", "", "m", ProcessingMode::standard, ModeAdapter::none);
    std::vector<double> sleeps;
    auto policy = fast_policy();
    policy.backoff_initial_s = 0.5;
    const auto out = classify_case(c, render(make_template(), "t"), policy, be,
                                   [&](std::chrono::duration<double> d) { sleeps.push_back(d.count()); });
    ASSERT_TRUE(std::holds_alternative<InferenceResponse>(out));
    EXPECT_EQ(std::get<InferenceResponse>(out).attempt_count, 3);
    EXPECT_EQ(sleeps, (std::vector<double>{0.5, 1.0}));
    EXPECT_EQ(be.bodies.size(), 3u);
    EXPECT_EQ(be.bodies[0], be.bodies[2]);
}

TEST(Classify, ClientErrorNotRetried) {
    ScriptedBackend be({http(400, "bad request")});
    const auto c = ModelConfig::with_defaults("a", "", "m", ProcessingMode::standard, ModeAdapter::none);
    const auto out = classify_case(c, render(make_template(), "t"), fast_policy(), be, no_sleep);
    ASSERT_TRUE(std::holds_alternative<TransportFailure>(out));
    EXPECT_EQ(std::get<TransportFailure>(out).kind, FailureKind::http_status);
    EXPECT_EQ(be.bodies.size(), 1u);
}

TEST(Classify, ExhaustedRetriesReportLastKind) {
    ScriptedBackend be({down()});
    const auto c = ModelConfig::with_defaults("a", "", "m", ProcessingMode::standard, ModeAdapter::none);
    const auto out = classify_case(c, render(make_template(), "t"), fast_policy(), be, no_sleep);
    const auto& f = std::get<TransportFailure>(out);
    EXPECT_EQ(f.kind, FailureKind::unreachable);
    EXPECT_EQ(f.attempt_count, 3);
}

TEST(Classify, TruncationAndReasoningField) {
    ScriptedBackend be({http(200, completion(R"({"label": "pre)", "length", "thinking hard"))});
    const auto c = ModelConfig::with_defaults("a", "", "m", ProcessingMode::reasoning, ModeAdapter::none);
    const auto out = classify_case(c, render(make_template(), "t"), fast_policy(), be, no_sleep);
    const auto& r = std::get<InferenceResponse>(out);
    EXPECT_TRUE(r.truncated);
    EXPECT_EQ(r.raw_text, std::string("<think>thinking hard</think>") + R"({"label": "pre)");
}

TEST(Endpoint, Parsing) {
    EXPECT_EQ(parse_endpoint("http://127.0.0.1:8000").path, "/v1/chat/completions");
    EXPECT_EQ(parse_endpoint("http://host:1/v1").path, "/v1/chat/completions");
    EXPECT_EQ(parse_endpoint("http://host:1/v1/chat/completions").path, "/v1/chat/completions");
    EXPECT_THROW(parse_endpoint("ftp://host"), Error);
}

TEST(Mock, DecisionsDependOnlyOnSeedAndText) {
    MockSpec spec;
    spec.flip_probability = 0.3;
    spec.seed = 5;
    MockBackend a(spec), b(spec);
    const auto m = make_manifest("x", 50);
    int flips = 0;
    for (const auto& c : m.cases) {
        const auto da = a.decide(c);
        const auto db = b.decide(c);
        EXPECT_EQ(da.answered, db.answered);
        EXPECT_EQ(da.delay_s, db.delay_s);
        flips += da.flipped;
    }
    EXPECT_GT(flips, 10);
    EXPECT_LT(flips, 50);
}

TEST(Mock, HttpRoundTripWithInjectedLatency) {
    MockSpec spec;
    spec.latency_mean_s = 0.5;
    spec.latency_sd_s = 0.0;
    spec.reasoning_trace = true;
    auto backend = std::make_shared<MockBackend>(spec);
    const auto m = make_manifest("x", 2);
    backend->add_manifest(m);
    MockServer server(backend);
    server.start();
    HttpBackend http_backend(server.url(), "secret");
    const auto c = ModelConfig::with_defaults("a", server.url(), "mock", ProcessingMode::reasoning, ModeAdapter::think_toggle);
    const auto& k = m.cases.front();
    const auto out = classify_case(c, render(make_template(), k.text), fast_policy(), http_backend, no_sleep);
    server.stop();
    ASSERT_TRUE(std::holds_alternative<InferenceResponse>(out)) << std::get<TransportFailure>(out).detail;
    const auto& r = std::get<InferenceResponse>(out);
    const auto delays = backend->injected_delays();
    ASSERT_EQ(delays.size(), 1u);
    EXPECT_EQ(delays[0].case_id, k.case_id);
    EXPECT_GE(r.latency_seconds, delays[0].delay_s);
    EXPECT_LT(r.latency_seconds, delays[0].delay_s + 0.25);
    const auto parsed = parse_output(r.raw_text);
    ASSERT_TRUE(std::holds_alternative<ParsedClassification>(parsed));
    EXPECT_EQ(std::get<ParsedClassification>(parsed).label, k.gold_label);
    EXPECT_TRUE(std::get<ParsedClassification>(parsed).reasoning_trace);
}

TEST(Mock, DeadEndpointIsTransportFailureAndRunContinues) {
    const auto url = "http://127.0.0.1:" + std::to_string(dead_port());
    HttpBackend be(url, "");
    const auto c = ModelConfig::with_defaults("a", url, "m", ProcessingMode::standard, ModeAdapter::none);
    const auto m = make_manifest("x", 1);
    std::vector<CaseResult> results;
    for (const auto& k : m.cases) {
        const auto out = classify_case(c, render(make_template(), k.text), fast_policy(), be, no_sleep);
        ASSERT_TRUE(std::holds_alternative<TransportFailure>(out));
        EXPECT_EQ(std::get<TransportFailure>(out).kind, FailureKind::unreachable);
        CaseResult r;
        r.config_id = "a";
        r.benchmark = "x";
        r.case_id = k.case_id;
        r.gold_label = k.gold_label;
        r.outcome = std::get<TransportFailure>(out).kind;
        results.push_back(r);
    }
    EXPECT_EQ(results.size(), 2u);
    const auto one = std::vector<CaseResult>{results.front()};
    EXPECT_EQ(summarize(accumulate(one)).status, SummaryStatus::no_valid_results);
}
