#pragma once

// Labeled source ingestion, provenance gating and balanced benchmark
// construction.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "rng.hpp"

namespace kappabench {

inline constexpr const char* kManifestSchema = "kappabench.manifest/1";

struct LabeledCase {
    std::string case_id;
    std::string text;
    Label gold_label = Label::negative;
    std::map<std::string, std::string> group_tags;

    friend bool operator==(const LabeledCase&, const LabeledCase&) = default;
};

enum class ValidationMethod { manual_coding, rule_based };

inline const char* to_string(ValidationMethod m) {
    return m == ValidationMethod::manual_coding ? "manual_coding" : "rule_based";
}

struct YearRange {
    int from = 0;
    int to = 0;
    friend bool operator==(const YearRange&, const YearRange&) = default;
};

struct ProvenanceRecord {
    ValidationMethod validation_method = ValidationMethod::manual_coding;
    std::optional<double> reliability_kappa;
    std::optional<double> documented_precision;
    YearRange validation_period;
    std::string description;

    friend bool operator==(const ProvenanceRecord&, const ProvenanceRecord&) = default;
};

struct QualityPolicy {
    double min_kappa = 0.80;
    double min_precision = 0.95;
};

struct ProvenanceVerdict {
    enum class Status { pass, threshold_failure, structural_failure };
    Status status = Status::pass;
    std::vector<std::string> reasons;

    bool passed() const { return status == Status::pass; }
};

/// Structural problems (missing fields for the declared method, values out of
/// range) are reported separately from threshold misses.
inline ProvenanceVerdict validate_provenance(const ProvenanceRecord& rec, const QualityPolicy& policy = {}) {
    ProvenanceVerdict v;
    auto structural = [&](std::string why) {
        v.status = ProvenanceVerdict::Status::structural_failure;
        v.reasons.push_back(std::move(why));
    };
    if (rec.reliability_kappa && (*rec.reliability_kappa < -1.0 || *rec.reliability_kappa > 1.0))
        structural("reliability_kappa outside [-1, 1]");
    if (rec.documented_precision && (*rec.documented_precision < 0.0 || *rec.documented_precision > 1.0))
        structural("documented_precision outside [0, 1]");
    if (rec.validation_period.from > rec.validation_period.to)
        structural("validation_period.from is after validation_period.to");

    if (rec.validation_method == ValidationMethod::manual_coding) {
        if (!rec.reliability_kappa) structural("manual_coding requires reliability_kappa");
    } else {
        if (!rec.documented_precision) structural("rule_based requires documented_precision");
    }
    if (v.status == ProvenanceVerdict::Status::structural_failure) return v;

    if (rec.validation_method == ValidationMethod::manual_coding) {
        if (*rec.reliability_kappa < policy.min_kappa) {
            v.status = ProvenanceVerdict::Status::threshold_failure;
            std::ostringstream os;
            os << "reliability_kappa " << *rec.reliability_kappa << " below minimum " << policy.min_kappa;
            v.reasons.push_back(os.str());
        }
    } else if (*rec.documented_precision < policy.min_precision) {
        v.status = ProvenanceVerdict::Status::threshold_failure;
        std::ostringstream os;
        os << "documented_precision " << *rec.documented_precision << " below minimum " << policy.min_precision;
        v.reasons.push_back(os.str());
    }
    return v;
}

struct BenchmarkManifest {
    std::string schema_version = kManifestSchema;
    std::string name;
    std::string construct_definition;
    std::size_t per_class_count = 0;
    std::uint64_t seed = 0;
    std::vector<LabeledCase> cases;
    ProvenanceRecord provenance;

    friend bool operator==(const BenchmarkManifest&, const BenchmarkManifest&) = default;
};

/// Raised when a class has fewer source cases than requested.
class ShortfallError : public Error {
public:
    ShortfallError(Label cls, std::size_t have, std::size_t need)
        : Error(std::string("insufficient ") + to_string(cls) + " cases: have " + std::to_string(have) +
                ", need " + std::to_string(need)),
          cls_(cls), have_(have), need_(need) {}

    Label deficient_class() const { return cls_; }
    std::size_t have() const { return have_; }
    std::size_t need() const { return need_; }

private:
    Label cls_;
    std::size_t have_;
    std::size_t need_;
};

inline void check_unique_ids(const std::vector<LabeledCase>& cases) {
    std::unordered_set<std::string_view> seen;
    seen.reserve(cases.size());
    for (const auto& c : cases)
        if (!seen.insert(c.case_id).second) throw Error("duplicate case_id '" + c.case_id + "'");
}

/// Partition by label (source order), Fisher-Yates each partition, keep the
/// first per_class of each, then shuffle the union. One generator stream,
/// seeded with `seed`, drives all three shuffles in that order.
inline BenchmarkManifest build_balanced_benchmark(const std::vector<LabeledCase>& source, std::size_t per_class,
                                                  std::uint64_t seed, ProvenanceRecord provenance,
                                                  std::string name, std::string definition) {
    if (per_class == 0) throw Error("per_class must be positive");
    check_unique_ids(source);

    std::vector<const LabeledCase*> pos;
    std::vector<const LabeledCase*> neg;
    for (const auto& c : source) (c.gold_label == Label::positive ? pos : neg).push_back(&c);
    if (pos.size() < per_class) throw ShortfallError(Label::positive, pos.size(), per_class);
    if (neg.size() < per_class) throw ShortfallError(Label::negative, neg.size(), per_class);

    SeededRng rng(seed);
    fisher_yates(std::span(pos), rng);
    fisher_yates(std::span(neg), rng);

    std::vector<const LabeledCase*> picked;
    picked.reserve(2 * per_class);
    picked.insert(picked.end(), pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(per_class));
    picked.insert(picked.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(per_class));
    fisher_yates(std::span(picked), rng);

    BenchmarkManifest m;
    m.name = std::move(name);
    m.construct_definition = std::move(definition);
    m.per_class_count = per_class;
    m.seed = seed;
    m.provenance = std::move(provenance);
    m.cases.reserve(picked.size());
    for (const auto* c : picked) m.cases.push_back(*c);
    return m;
}

// ---------------------------------------------------------------------------
// Source ingestion

namespace detail {

/// RFC 4180 records: quoted fields may contain separators, doubled quotes and
/// line breaks. CRLF and LF both terminate records.
inline std::vector<std::vector<std::string>> parse_csv(std::string_view data) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool in_quotes = false;
    bool field_started = false;
    std::size_t i = 0;
    auto end_field = [&] {
        row.push_back(std::move(field));
        field.clear();
        field_started = false;
    };
    auto end_row = [&] {
        end_field();
        if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
        row.clear();
    };
    while (i < data.size()) {
        const char c = data[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < data.size() && data[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                field.push_back(c);
            }
        } else if (c == '"' && !field_started) {
            in_quotes = true;
            field_started = true;
        } else if (c == ',') {
            end_field();
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < data.size() && data[i + 1] == '\n') ++i;
            end_row();
        } else {
            field.push_back(c);
            field_started = true;
        }
        ++i;
    }
    if (in_quotes) throw Error("unterminated quoted field in delimited source");
    if (field_started || !row.empty()) end_row();
    return rows;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void check_case(const LabeledCase& c, std::size_t record) {
    const auto where = "record " + std::to_string(record);
    if (c.case_id.empty()) throw Error(where + ": empty case_id");
    if (trim(c.text).empty()) throw Error(where + " (" + c.case_id + "): text is empty");
    if (!is_valid_utf8(c.text) || !is_valid_utf8(c.case_id))
        throw Error(where + " (" + c.case_id + "): text is not valid UTF-8");
}

inline Label label_from_cell(std::string_view token, std::size_t record) {
    auto l = parse_label_token(token);
    if (!l) throw Error("record " + std::to_string(record) + ": unrecognised label '" + std::string(token) + "'");
    return *l;
}

}  // namespace detail

inline std::vector<LabeledCase> parse_delimited_source(std::string_view data) {
    auto rows = detail::parse_csv(data);
    if (rows.empty()) throw Error("delimited source has no header");
    const auto& header = rows.front();
    int id_col = -1, label_col = -1, text_col = -1;
    std::vector<std::pair<std::size_t, std::string>> group_cols;
    for (std::size_t i = 0; i < header.size(); ++i) {
        const auto h = trim(header[i]);
        if (h == "case_id") id_col = static_cast<int>(i);
        else if (h == "label") label_col = static_cast<int>(i);
        else if (h == "text") text_col = static_cast<int>(i);
        else if (h.rfind("group.", 0) == 0 && h.size() > 6) group_cols.emplace_back(i, h.substr(6));
        else throw Error("unexpected column '" + h + "' (expected case_id,label,text[,group.*])");
    }
    if (id_col < 0 || label_col < 0 || text_col < 0)
        throw Error("delimited source header must contain case_id, label and text");

    std::vector<LabeledCase> out;
    out.reserve(rows.size() - 1);
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.size() != header.size())
            throw Error("record " + std::to_string(r) + ": expected " + std::to_string(header.size()) +
                        " fields, found " + std::to_string(row.size()));
        LabeledCase c;
        c.case_id = trim(row[static_cast<std::size_t>(id_col)]);
        c.gold_label = detail::label_from_cell(row[static_cast<std::size_t>(label_col)], r);
        c.text = row[static_cast<std::size_t>(text_col)];
        for (const auto& [col, key] : group_cols) c.group_tags[key] = row[col];
        detail::check_case(c, r);
        out.push_back(std::move(c));
    }
    return out;
}

inline std::vector<LabeledCase> parse_line_delimited_source(std::string_view data) {
    std::vector<LabeledCase> out;
    std::size_t pos = 0;
    std::size_t record = 0;
    while (pos < data.size()) {
        auto nl = data.find('\n', pos);
        if (nl == std::string_view::npos) nl = data.size();
        const auto line = data.substr(pos, nl - pos);
        pos = nl + 1;
        if (trim(line).empty()) continue;
        ++record;
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw Error("record " + std::to_string(record) + ": not a JSON object");
        LabeledCase c;
        if (!j.contains("case_id") || !j.contains("label") || !j.contains("text"))
            throw Error("record " + std::to_string(record) + ": case_id, label and text are required");
        const auto& id = j["case_id"];
        c.case_id = id.is_string() ? id.get<std::string>() : id.dump();
        const auto& lab = j["label"];
        if (lab.is_boolean()) c.gold_label = lab.get<bool>() ? Label::positive : Label::negative;
        else if (lab.is_number_integer()) c.gold_label = detail::label_from_cell(lab.dump(), record);
        else if (lab.is_string()) c.gold_label = detail::label_from_cell(lab.get<std::string>(), record);
        else throw Error("record " + std::to_string(record) + ": label has unsupported type");
        if (!j["text"].is_string()) throw Error("record " + std::to_string(record) + ": text must be a string");
        c.text = j["text"].get<std::string>();
        for (const auto& [k, v] : j.items()) {
            if (k.rfind("group.", 0) == 0 && k.size() > 6)
                c.group_tags[k.substr(6)] = v.is_string() ? v.get<std::string>() : v.dump();
        }
        detail::check_case(c, record);
        out.push_back(std::move(c));
    }
    return out;
}

/// Format chosen by extension (.csv vs .jsonl/.ndjson), falling back to the
/// first non-blank byte. Duplicate ids are a hard error.
inline std::vector<LabeledCase> load_source(const std::filesystem::path& path) {
    const auto data = detail::read_file(path);
    const auto ext = to_lower(path.extension().string());
    bool jsonl = ext == ".jsonl" || ext == ".ndjson";
    if (ext != ".csv" && !jsonl) {
        const auto first = data.find_first_not_of(" \t\r\n");
        jsonl = first != std::string::npos && data[first] == '{';
    }
    auto cases = jsonl ? parse_line_delimited_source(data) : parse_delimited_source(data);
    check_unique_ids(cases);
    return cases;
}

// ---------------------------------------------------------------------------
// Manifest files

inline nlohmann::ordered_json provenance_to_json(const ProvenanceRecord& p) {
    nlohmann::ordered_json j;
    j["validation_method"] = to_string(p.validation_method);
    if (p.reliability_kappa) j["reliability_kappa"] = *p.reliability_kappa;
    if (p.documented_precision) j["documented_precision"] = *p.documented_precision;
    j["validation_period"] = {{"from", p.validation_period.from}, {"to", p.validation_period.to}};
    j["description"] = p.description;
    return j;
}

inline ProvenanceRecord provenance_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error("provenance must be an object");
    ProvenanceRecord p;
    const auto method = j.value("validation_method", std::string{});
    if (method == "manual_coding") p.validation_method = ValidationMethod::manual_coding;
    else if (method == "rule_based") p.validation_method = ValidationMethod::rule_based;
    else throw Error("provenance.validation_method must be manual_coding or rule_based, got '" + method + "'");
    if (j.contains("reliability_kappa") && !j["reliability_kappa"].is_null())
        p.reliability_kappa = j["reliability_kappa"].get<double>();
    if (j.contains("documented_precision") && !j["documented_precision"].is_null())
        p.documented_precision = j["documented_precision"].get<double>();
    if (j.contains("validation_period")) {
        const auto& vp = j["validation_period"];
        p.validation_period.from = vp.value("from", 0);
        p.validation_period.to = vp.value("to", 0);
    }
    p.description = j.value("description", std::string{});
    return p;
}

inline nlohmann::ordered_json manifest_to_json(const BenchmarkManifest& m) {
    nlohmann::ordered_json j;
    j["schema_version"] = m.schema_version;
    j["name"] = m.name;
    j["construct_definition"] = m.construct_definition;
    j["per_class_count"] = m.per_class_count;
    j["seed"] = m.seed;
    j["sampler"] = SeededRng::kAlgorithm;
    j["provenance"] = provenance_to_json(m.provenance);
    auto& cases = j["cases"] = nlohmann::ordered_json::array();
    for (const auto& c : m.cases) {
        nlohmann::ordered_json cj;
        cj["case_id"] = c.case_id;
        cj["gold_label"] = to_string(c.gold_label);
        cj["text"] = c.text;
        if (!c.group_tags.empty()) cj["group_tags"] = c.group_tags;
        cases.push_back(std::move(cj));
    }
    return j;
}

inline std::string manifest_to_string(const BenchmarkManifest& m) { return manifest_to_json(m).dump(2) + "\n"; }

/// Enforces schema version and every manifest invariant; all problems found
/// are listed in the error message.
inline BenchmarkManifest manifest_from_string(std::string_view data, const std::string& origin = "manifest") {
    auto j = nlohmann::json::parse(data, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(origin + ": not a JSON document");
    if (!j.contains("schema_version")) throw Error(origin + ": missing schema_version");
    const auto version = j["schema_version"].is_string() ? j["schema_version"].get<std::string>() : j["schema_version"].dump();
    if (version != kManifestSchema)
        throw Error(origin + ": unsupported schema_version '" + version + "' (expected " + kManifestSchema + ")");

    BenchmarkManifest m;
    try {
        m.name = j.at("name").get<std::string>();
        m.construct_definition = j.at("construct_definition").get<std::string>();
        m.per_class_count = j.at("per_class_count").get<std::size_t>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.provenance = provenance_from_json(j.at("provenance"));
        for (const auto& cj : j.at("cases")) {
            LabeledCase c;
            c.case_id = cj.at("case_id").get<std::string>();
            auto lab = parse_label_token(cj.at("gold_label").get<std::string>());
            if (!lab) throw Error("case " + c.case_id + ": bad gold_label");
            c.gold_label = *lab;
            c.text = cj.at("text").get<std::string>();
            if (cj.contains("group_tags")) c.group_tags = cj["group_tags"].get<std::map<std::string, std::string>>();
            m.cases.push_back(std::move(c));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(origin + ": malformed manifest: " + e.what());
    }

    std::vector<std::string> problems;
    std::size_t pos = 0;
    std::size_t neg = 0;
    for (const auto& c : m.cases) (c.gold_label == Label::positive ? pos : neg) += 1;
    if (pos != neg) problems.push_back("unbalanced classes: " + std::to_string(pos) + " positive / " +
                                       std::to_string(neg) + " negative");
    if (m.per_class_count == 0) problems.push_back("per_class_count must be positive");
    if (pos != m.per_class_count || neg != m.per_class_count)
        problems.push_back("per_class_count " + std::to_string(m.per_class_count) + " does not match case counts");
    try {
        check_unique_ids(m.cases);
    } catch (const Error& e) {
        problems.push_back(e.what());
    }
    for (const auto& c : m.cases)
        if (trim(c.text).empty()) problems.push_back("case " + c.case_id + ": empty text");
    const auto verdict = validate_provenance(m.provenance, QualityPolicy{-1.0, 0.0});
    for (const auto& r : verdict.reasons) problems.push_back("provenance: " + r);

    if (!problems.empty()) {
        std::string msg = origin + ": invalid manifest";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw Error(msg);
    }
    return m;
}

inline BenchmarkManifest load_manifest(const std::filesystem::path& path) {
    return manifest_from_string(detail::read_file(path), path.string());
}

inline void save_manifest(const BenchmarkManifest& m, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << manifest_to_string(m);
    if (!out) throw Error("write failed for " + path.string());
}

}  // namespace kappabench
