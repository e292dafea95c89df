#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "common.hpp"

namespace kappabench {

inline constexpr std::string_view kCaseTextPlaceholder = "{{case_text}}";

/// A standardized classification prompt: task instruction, operational
/// definition and output-format requirements go to the system role; the case
/// narrative is substituted into `user_template`.
struct PromptTemplate {
    std::string task_instruction;
    std::string operational_definition;
    std::string output_format_spec;
    std::string user_template = "Case record:\n{{case_text}}";
    std::string notes;

    friend bool operator==(const PromptTemplate&, const PromptTemplate&) = default;
};

struct RenderedPrompt {
    std::string system_text;
    std::string user_text;

    friend bool operator==(const RenderedPrompt&, const RenderedPrompt&) = default;
};

struct TemplateVerdict {
    std::vector<std::string> problems;
    bool passed() const { return problems.empty(); }
};

inline std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
    std::size_t n = 0;
    for (auto pos = hay.find(needle); pos != std::string_view::npos; pos = hay.find(needle, pos + needle.size())) ++n;
    return n;
}

inline TemplateVerdict validate_template(const PromptTemplate& t) {
    TemplateVerdict v;
    if (trim(t.task_instruction).empty()) v.problems.emplace_back("task_instruction missing");
    if (trim(t.operational_definition).empty()) v.problems.emplace_back("operational_definition missing");
    if (trim(t.output_format_spec).empty()) v.problems.emplace_back("output_format_spec missing");

    const auto total = count_occurrences(t.task_instruction, kCaseTextPlaceholder) +
                       count_occurrences(t.operational_definition, kCaseTextPlaceholder) +
                       count_occurrences(t.output_format_spec, kCaseTextPlaceholder) +
                       count_occurrences(t.user_template, kCaseTextPlaceholder);
    const auto in_user = count_occurrences(t.user_template, kCaseTextPlaceholder);
    if (total == 0) {
        v.problems.emplace_back("case-text placeholder {{case_text}} missing");
    } else if (total > 1) {
        v.problems.emplace_back("case-text placeholder must appear exactly once, found " + std::to_string(total));
    } else if (in_user != 1) {
        v.problems.emplace_back("case-text placeholder must be in user_template");
    }
    return v;
}

inline std::string system_text_of(const PromptTemplate& t) {
    return t.task_instruction + "\n\n" + t.operational_definition + "\n\n" + t.output_format_spec;
}

/// Pure substitution; the case text is copied byte for byte.
inline RenderedPrompt render(const PromptTemplate& t, std::string_view case_text) {
    const auto verdict = validate_template(t);
    if (!verdict.passed()) throw Error("invalid prompt template: " + verdict.problems.front());
    if (case_text.empty()) throw Error("case text is empty");

    const auto at = t.user_template.find(kCaseTextPlaceholder);
    RenderedPrompt p;
    p.system_text = system_text_of(t);
    p.user_text.reserve(t.user_template.size() - kCaseTextPlaceholder.size() + case_text.size());
    p.user_text.append(t.user_template, 0, at);
    p.user_text.append(case_text);
    p.user_text.append(t.user_template, at + kCaseTextPlaceholder.size());
    return p;
}

inline nlohmann::ordered_json template_to_json(const PromptTemplate& t) {
    nlohmann::ordered_json j;
    j["task_instruction"] = t.task_instruction;
    j["operational_definition"] = t.operational_definition;
    j["output_format_spec"] = t.output_format_spec;
    j["user_template"] = t.user_template;
    if (!t.notes.empty()) j["notes"] = t.notes;
    return j;
}

inline PromptTemplate template_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error("prompt template must be a JSON object");
    PromptTemplate t;
    auto field = [&](const char* key, std::string& dst) {
        if (!j.contains(key)) return;
        if (!j[key].is_string()) throw Error(std::string("template field ") + key + " must be a string");
        dst = j[key].get<std::string>();
    };
    field("task_instruction", t.task_instruction);
    field("operational_definition", t.operational_definition);
    field("output_format_spec", t.output_format_spec);
    field("user_template", t.user_template);
    field("notes", t.notes);
    return t;
}

inline PromptTemplate load_template(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open template " + path.string());
    auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw Error(path.string() + ": not a JSON document");
    return template_from_json(j);
}

}  // namespace kappabench
