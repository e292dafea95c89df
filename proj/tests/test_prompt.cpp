#include <gtest/gtest.h>

#include "support.hpp"

using namespace kbtest;

TEST(Template, EmptyDefinitionFails) {
    auto t = make_template();
    t.operational_definition = "  ";
    const auto v = validate_template(t);
    ASSERT_FALSE(v.passed());
    EXPECT_EQ(v.problems.front(), "operational_definition missing");
}

TEST(Template, ShippedTemplatesPass) {
    for (const char* name : {"substance_related_problems", "domestic_violence", "opioids", "firearms"}) {
        const auto t = load_template(fs::path(KB_SOURCE_ROOT) / "templates" / (std::string(name) + ".json"));
        const auto v = validate_template(t);
        EXPECT_TRUE(v.passed()) << name << ": " << (v.problems.empty() ? "" : v.problems.front());
    }
}

TEST(Template, TwoPlaceholdersFail) {
    auto t = make_template();
    t.user_template = "{{case_text}}\n---\n{{case_text}}";
    EXPECT_FALSE(validate_template(t).passed());
    auto u = make_template();
    u.operational_definition += " {{case_text}}";
    EXPECT_FALSE(validate_template(u).passed());
}

TEST(Template, MissingPlaceholderFails) {
    auto t = make_template();
    t.user_template = "Case record:";
    EXPECT_FALSE(validate_template(t).passed());
    EXPECT_THROW(render(t, "text"), Error);
}

TEST(Render, CaseTextVerbatim) {
    const auto r = render(make_template(), "Father tested positive for opiates.");
    EXPECT_NE(r.user_text.find("Father tested positive for opiates."), std::string::npos);
    EXPECT_NE(r.system_text.find(make_template().operational_definition), std::string::npos);
    EXPECT_NE(r.system_text.find(make_template().output_format_spec), std::string::npos);
}

TEST(Render, Pure) {
    const auto t = make_template();
    EXPECT_EQ(render(t, "same input"), render(t, "same input"));
}

TEST(Render, RejectsEmptyCase) { EXPECT_THROW(render(make_template(), ""), Error); }

TEST(Render, SpecialCharactersSurviveAtPlaceholderSpan) {
    const std::vector<std::string> inputs = {
        R"(He said "{{case_text}}" and {"label": "present"})",
        "braces {{ }} }{ and $1 \\n backslashes \\",
        "multi\nline\r\n\ttext with unicode caf\xc3\xa9",
        "%s %d {0} ${x}",
    };
    const auto t = make_template();
    const auto at = t.user_template.find(kCaseTextPlaceholder);
    ASSERT_NE(at, std::string::npos);
    const auto prefix = t.user_template.substr(0, at);
    const auto suffix = t.user_template.substr(at + kCaseTextPlaceholder.size());
    for (const auto& text : inputs) {
        const auto r = render(t, text);
        EXPECT_EQ(r.user_text.substr(0, prefix.size()), prefix);
        EXPECT_EQ(r.user_text.substr(prefix.size(), text.size()), text);
        EXPECT_EQ(r.user_text.substr(prefix.size() + text.size()), suffix);
    }
}

TEST(Render, LengthArithmetic) {
    std::mt19937_64 gen(3);
    const auto t = make_template();
    for (int i = 0; i < 200; ++i) {
        std::string text(1 + gen() % 400, 'x');
        for (auto& ch : text) ch = static_cast<char>(' ' + gen() % 95);
        const auto r = render(t, text);
        EXPECT_EQ(r.user_text.size(), t.user_template.size() - kCaseTextPlaceholder.size() + text.size());
    }
}

TEST(Template, JsonRoundTrip) {
    auto t = make_template();
    t.notes = "reconstruction";
    EXPECT_EQ(template_from_json(nlohmann::json::parse(template_to_json(t).dump())), t);
}
