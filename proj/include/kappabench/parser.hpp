#pragma once

// Raw model output -> binary classification. Parsing is the composition
// strip_reasoning -> extract_label; the label is read only from the text left
// after reasoning blocks are removed.

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "common.hpp"

namespace kappabench {

struct ReasoningDelimiters {
    std::string open = "<think>";
    std::string close = "</think>";

    friend bool operator==(const ReasoningDelimiters&, const ReasoningDelimiters&) = default;
};

struct StrippedOutput {
    std::optional<std::string> trace;
    std::string remainder;
    /// (offset in remainder, offset in raw) at the start of each kept segment.
    std::vector<std::pair<std::size_t, std::size_t>> segments;

    std::size_t raw_offset(std::size_t remainder_offset) const {
        std::size_t raw = remainder_offset;
        for (const auto& [rem, src] : segments) {
            if (rem > remainder_offset) break;
            raw = src + (remainder_offset - rem);
        }
        return raw;
    }
};

/// Removes every delimited block into the trace. An open marker without a
/// close turns the rest of the text into trace (cut-off reasoning). A close
/// marker that appears before any open marker ends a trace whose opening was
/// supplied by the chat template, so everything before it is trace.
inline StrippedOutput strip_reasoning(std::string_view raw, const ReasoningDelimiters& delims = {}) {
    StrippedOutput out;
    std::vector<std::string_view> parts;
    std::size_t pos = 0;
    if (delims.open.empty() || delims.close.empty()) {
        out.remainder = std::string(raw);
        out.segments.emplace_back(0, 0);
        return out;
    }

    const auto first_open = raw.find(delims.open);
    const auto first_close = raw.find(delims.close);
    if (first_close != std::string_view::npos && (first_open == std::string_view::npos || first_close < first_open)) {
        parts.push_back(raw.substr(0, first_close));
        pos = first_close + delims.close.size();
    }

    while (pos <= raw.size()) {
        const auto open = raw.find(delims.open, pos);
        const auto keep_end = open == std::string_view::npos ? raw.size() : open;
        if (keep_end > pos) {
            out.segments.emplace_back(out.remainder.size(), pos);
            out.remainder.append(raw.substr(pos, keep_end - pos));
        }
        if (open == std::string_view::npos) break;
        const auto body = open + delims.open.size();
        const auto close = raw.find(delims.close, body);
        if (close == std::string_view::npos) {
            parts.push_back(raw.substr(body));
            break;
        }
        parts.push_back(raw.substr(body, close - body));
        pos = close + delims.close.size();
    }

    if (!parts.empty()) {
        std::string trace;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (i) trace.push_back('\n');
            trace.append(parts[i]);
        }
        out.trace = std::move(trace);
    }
    return out;
}

enum class ParseErrorKind { no_payload_found, malformed_payload, missing_label_field, invalid_label_value, truncated_output };

inline const char* to_string(ParseErrorKind k) {
    switch (k) {
    case ParseErrorKind::no_payload_found: return "no_payload_found";
    case ParseErrorKind::malformed_payload: return "malformed_payload";
    case ParseErrorKind::missing_label_field: return "missing_label_field";
    case ParseErrorKind::invalid_label_value: return "invalid_label_value";
    case ParseErrorKind::truncated_output: return "truncated_output";
    }
    return "unknown";
}

inline std::optional<ParseErrorKind> parse_error_kind_from_string(std::string_view s) {
    for (auto k : {ParseErrorKind::no_payload_found, ParseErrorKind::malformed_payload,
                   ParseErrorKind::missing_label_field, ParseErrorKind::invalid_label_value,
                   ParseErrorKind::truncated_output})
        if (s == to_string(k)) return k;
    return std::nullopt;
}

struct ParseError {
    ParseErrorKind kind;
    std::string detail;
};

struct ParsedClassification {
    Label label;
    std::optional<std::string> reasoning_trace;
    /// Half-open byte range [first, second) of the chosen object.
    std::pair<std::size_t, std::size_t> payload_span;
};

using ParseOutcome = std::variant<ParsedClassification, ParseError>;

/// Maps payload `label` tokens to classes. Strict accepts present/absent;
/// lenient adds yes/no, true/false and JSON booleans.
struct LabelVocabulary {
    std::map<std::string, Label> tokens{{"present", Label::positive}, {"absent", Label::negative}};
    bool accept_json_booleans = false;

    static LabelVocabulary strict() { return {}; }
    static LabelVocabulary lenient() {
        LabelVocabulary v;
        v.tokens.emplace("yes", Label::positive);
        v.tokens.emplace("no", Label::negative);
        v.tokens.emplace("true", Label::positive);
        v.tokens.emplace("false", Label::negative);
        v.accept_json_booleans = true;
        return v;
    }
};

namespace detail {

// Longest suffix of the remainder that is scanned for objects.
inline constexpr std::size_t kMaxScanBytes = 256 * 1024;

/// Index one past the brace that balances text[start] == '{', honouring JSON
/// string literals and escapes; npos when the text ends first.
inline std::size_t balanced_object_end(std::string_view text, std::size_t start, std::size_t* budget = nullptr) {
    int depth = 0;
    bool in_string = false;
    for (std::size_t i = start; i < text.size(); ++i) {
        if (budget) {
            if (*budget == 0) return std::string_view::npos;
            --*budget;
        }
        const char c = text[i];
        if (in_string) {
            if (c == '\\') ++i;
            else if (c == '"') in_string = false;
            continue;
        }
        if (c == '"') in_string = true;
        else if (c == '{') ++depth;
        else if (c == '}' && --depth == 0) return i + 1;
    }
    return std::string_view::npos;
}

// Total bytes the brace matcher may examine per scan. Inputs made of many
// unbalanced braces would otherwise cost quadratic time.
inline constexpr std::size_t kScanWorkBudget = 16 * kMaxScanBytes;

struct ObjectScan {
    std::vector<std::pair<std::size_t, std::size_t>> objects;
    bool saw_brace = false;
    bool budget_exhausted = false;
};

/// Well-formed JSON objects in left-to-right order. Objects nested inside an
/// accepted object are not reported separately.
inline ObjectScan scan_objects(std::string_view text) {
    ObjectScan scan;
    const std::size_t base = text.size() > kMaxScanBytes ? text.size() - kMaxScanBytes : 0;
    std::size_t budget = kScanWorkBudget;
    std::size_t i = text.find('{', base);
    while (i != std::string_view::npos) {
        scan.saw_brace = true;
        if (budget == 0) {
            scan.budget_exhausted = true;
            break;
        }
        const auto end = balanced_object_end(text, i, &budget);
        if (end != std::string_view::npos) {
            auto j = nlohmann::json::parse(text.substr(i, end - i), nullptr, false);
            if (!j.is_discarded() && j.is_object()) {
                scan.objects.emplace_back(i, end);
                i = text.find('{', end);
                continue;
            }
        }
        i = text.find('{', i + 1);
    }
    return scan;
}

}  // namespace detail

/// The last well-formed object in `remainder` decides; prose around it is
/// ignored. `truncated` is the gateway's length-cap flag.
inline ParseOutcome extract_label(std::string_view remainder, const LabelVocabulary& vocab = {},
                                  bool truncated = false) {
    const auto scan = detail::scan_objects(remainder);
    if (scan.objects.empty()) {
        if (truncated)
            return ParseError{ParseErrorKind::truncated_output, "output hit the token limit before a payload"};
        if (scan.saw_brace) return ParseError{ParseErrorKind::malformed_payload, "no brace group parses as a JSON object"};
        return ParseError{ParseErrorKind::no_payload_found, "no JSON object in output"};
    }
    const auto span = scan.objects.back();
    const auto obj = nlohmann::json::parse(remainder.substr(span.first, span.second - span.first));
    if (!obj.contains("label")) return ParseError{ParseErrorKind::missing_label_field, "payload has no 'label' field"};

    const auto& value = obj["label"];
    if (value.is_boolean() && vocab.accept_json_booleans)
        return ParsedClassification{value.get<bool>() ? Label::positive : Label::negative, std::nullopt, span};
    if (!value.is_string())
        return ParseError{ParseErrorKind::invalid_label_value, "label is not a string: " + value.dump()};
    const auto token = to_lower(trim(value.get<std::string>()));
    const auto it = vocab.tokens.find(token);
    if (it == vocab.tokens.end())
        return ParseError{ParseErrorKind::invalid_label_value, "label '" + value.get<std::string>() + "' not in vocabulary"};
    return ParsedClassification{it->second, std::nullopt, span};
}

/// Full pipeline: strip reasoning, then extract. The payload span is mapped
/// back to offsets in `raw`.
inline ParseOutcome parse_output(std::string_view raw, const ReasoningDelimiters& delims = {},
                                 const LabelVocabulary& vocab = {}, bool truncated = false) {
    auto stripped = strip_reasoning(raw, delims);
    auto outcome = extract_label(stripped.remainder, vocab, truncated);
    if (auto* ok = std::get_if<ParsedClassification>(&outcome)) {
        const auto len = ok->payload_span.second - ok->payload_span.first;
        ok->payload_span.first = stripped.raw_offset(ok->payload_span.first);
        ok->payload_span.second = ok->payload_span.first + len;
        ok->reasoning_trace = std::move(stripped.trace);
    }
    return outcome;
}

}  // namespace kappabench
