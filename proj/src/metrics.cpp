// SPDX-License-Identifier: Apache-2.0
#include "l2smerge/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <limits>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "l2smerge/errors.hpp"

using json = nlohmann::ordered_json;

namespace l2smerge {

namespace {

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

const char* mode_name(MatchMode m) { return m == MatchMode::substring ? "substring" : "word_boundary"; }

json group_json(const GroupStats& g) {
    json j = {{"n", g.n},
              {"avg_length", g.avg_length},
              {"reflective_count", g.reflective_count},
              {"reflective_ratio", g.reflective_ratio},
              {"keyword_freq_per_response", g.keyword_freq},
              {"approx_lengths", g.approx_lengths},
              {"keyword_totals", g.keyword_totals}};
    if (g.accuracy) j["accuracy"] = *g.accuracy;
    return j;
}

json macro_json(const MacroStats& m) {
    json j = {{"avg_length", m.avg_length}, {"reflective_ratio", m.reflective_ratio}, {"keyword_freq_per_response", m.keyword_freq}};
    if (m.accuracy) j["accuracy"] = *m.accuracy;
    return j;
}

json report_body(const CorpusReport& r) {
    json j;
    j["datasets"] = json::object();
    for (const auto& [name, g] : r.datasets) j["datasets"][name] = group_json(g);
    j["macro"] = macro_json(r.macro);
    j["difficulty"] = json::object();
    for (const auto& [name, levels] : r.difficulty) {
        json lj = json::object();
        for (const auto& [level, g] : levels) lj[std::to_string(level)] = group_json(g);
        j["difficulty"][name] = lj;
    }
    j["length_unit"] = r.approximate_lengths() ? "approx (whitespace tokens for some records)" : "tokens";
    return j;
}

std::string percent(double fraction) { return fmt::format("{:.1f}", 100.0 * fraction); }

} // namespace

const std::vector<std::string>& reflection_keywords() {
    static const std::vector<std::string> keywords{"wait",         "re-examine",   "recap",
                                                   "double-check", "let me check", "let me just check",
                                                   "let me verify", "let me just verify"};
    return keywords;
}

Reflection detect_reflection(std::string_view text, MatchMode mode) {
    std::string lowered(text);
    std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    const auto& keywords = reflection_keywords();
    Reflection r;
    std::size_t i = 0;
    while (i < lowered.size()) {
        const std::string* best = nullptr;
        for (const auto& kw : keywords) {
            if (lowered.compare(i, kw.size(), kw) != 0) continue;
            if (mode == MatchMode::word_boundary) {
                const bool left_ok = i == 0 || !is_word_char(lowered[i - 1]);
                const std::size_t end = i + kw.size();
                const bool right_ok = end >= lowered.size() || !is_word_char(lowered[end]);
                if (!left_ok || !right_ok) continue;
            }
            if (!best || kw.size() > best->size()) best = &kw;
        }
        if (best) {
            ++r.keyword_count;
            ++r.per_keyword[*best];
            i += best->size();
        } else {
            ++i;
        }
    }
    r.reflective = r.keyword_count > 0;
    return r;
}

std::uint64_t whitespace_token_count(std::string_view text) {
    std::uint64_t n = 0;
    bool in_token = false;
    for (char c : text) {
        const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
        if (!space && !in_token) ++n;
        in_token = !space;
    }
    return n;
}

bool CorpusReport::approximate_lengths() const {
    return std::any_of(datasets.begin(), datasets.end(), [](const auto& kv) { return kv.second.approx_lengths > 0; });
}

void CorpusAccumulator::Sums::add(const Sums& o) {
    n += o.n;
    length += o.length;
    reflective += o.reflective;
    keywords += o.keywords;
    labeled += o.labeled;
    correct += o.correct;
    approx += o.approx;
    for (const auto& [k, v] : o.per_keyword) per_keyword[k] += v;
}

GroupStats CorpusAccumulator::Sums::stats() const {
    GroupStats g;
    g.n = n;
    g.reflective_count = reflective;
    g.approx_lengths = approx;
    g.keyword_totals = per_keyword;
    if (n > 0) {
        const double dn = static_cast<double>(n);
        g.avg_length = static_cast<double>(length) / dn;
        g.reflective_ratio = static_cast<double>(reflective) / dn;
        g.keyword_freq = static_cast<double>(keywords) / dn;
        if (labeled == n) g.accuracy = static_cast<double>(correct) / dn;
    }
    return g;
}

void CorpusAccumulator::add(const ResponseRecord& record) {
    if (record.dataset.empty()) throw ValidationError(fmt::format("record '{}': dataset must not be empty", record.id));
    const auto refl = detect_reflection(record.response, mode_);
    Sums s;
    s.n = 1;
    if (record.token_count) {
        s.length = *record.token_count;
    } else {
        s.length = whitespace_token_count(record.response);
        s.approx = 1;
    }
    s.reflective = refl.reflective ? 1 : 0;
    s.keywords = refl.keyword_count;
    s.per_keyword = refl.per_keyword;
    if (record.correct) {
        s.labeled = 1;
        s.correct = *record.correct ? 1 : 0;
    }
    datasets_[record.dataset].add(s);
    if (record.difficulty) difficulty_[record.dataset][*record.difficulty].add(s);
    ++records_;
}

void CorpusAccumulator::merge(const CorpusAccumulator& other) {
    for (const auto& [k, v] : other.datasets_) datasets_[k].add(v);
    for (const auto& [k, levels] : other.difficulty_) {
        for (const auto& [level, v] : levels) difficulty_[k][level].add(v);
    }
    records_ += other.records_;
}

CorpusReport CorpusAccumulator::report() const {
    CorpusReport r;
    r.mode = mode_;
    for (const auto& [k, v] : datasets_) r.datasets[k] = v.stats();
    for (const auto& [k, levels] : difficulty_) {
        for (const auto& [level, v] : levels) r.difficulty[k][level] = v.stats();
    }
    if (!r.datasets.empty()) {
        const double d = static_cast<double>(r.datasets.size());
        double acc = 0.0;
        bool all_labeled = true;
        for (const auto& [_, g] : r.datasets) {
            r.macro.avg_length += g.avg_length / d;
            r.macro.reflective_ratio += g.reflective_ratio / d;
            r.macro.keyword_freq += g.keyword_freq / d;
            if (g.accuracy) {
                acc += *g.accuracy;
            } else {
                all_labeled = false;
            }
        }
        if (all_labeled) r.macro.accuracy = acc / d;
    }
    return r;
}

CorpusReport corpus_stats(std::span<const ResponseRecord> records, MatchMode mode) {
    if (records.empty()) throw ValidationError("corpus_stats needs at least one record");
    CorpusAccumulator acc(mode);
    for (const auto& r : records) acc.add(r);
    return acc.report();
}

std::map<int, GroupStats> difficulty_profile(std::span<const ResponseRecord> records, MatchMode mode) {
    std::map<int, CorpusAccumulator> levels;
    for (const auto& r : records) {
        if (!r.difficulty) continue;
        ResponseRecord pooled = r;
        pooled.dataset = "level";
        levels.try_emplace(*r.difficulty, mode).first->second.add(pooled);
    }
    std::map<int, GroupStats> out;
    for (const auto& [level, acc] : levels) out[level] = acc.report().datasets.at("level");
    return out;
}

LengthReduction length_reduction(const CorpusReport& candidate, const CorpusReport& baseline) {
    LengthReduction out;
    double sum = 0.0;
    for (const auto& [name, c] : candidate.datasets) {
        auto it = baseline.datasets.find(name);
        if (it == baseline.datasets.end()) {
            out.candidate_only.push_back(name);
            continue;
        }
        const double base_len = it->second.avg_length;
        if (!(base_len > 0.0)) {
            throw ValidationError(fmt::format("baseline average length for dataset '{}' is 0", name));
        }
        const double pct = 100.0 * (base_len - c.avg_length) / base_len;
        out.per_dataset[name] = pct;
        sum += pct;
    }
    for (const auto& [name, _] : baseline.datasets) {
        if (!candidate.datasets.count(name)) out.baseline_only.push_back(name);
    }
    if (out.per_dataset.empty()) throw ValidationError("candidate and baseline share no dataset");
    out.macro = sum / static_cast<double>(out.per_dataset.size());
    return out;
}

ResponseRecord parse_record(std::string_view json_line, std::size_t line) {
    const auto where = line ? fmt::format("line {}", line) : std::string("record");
    json j;
    try {
        j = json::parse(json_line);
    } catch (const json::parse_error& e) {
        throw ValidationError(fmt::format("{}: invalid JSON: {}", where, e.what()));
    }
    if (!j.is_object()) throw ValidationError(fmt::format("{}: expected a JSON object", where));
    ResponseRecord r;
    if (j.contains("id")) {
        const auto& id = j["id"];
        if (id.is_string()) {
            r.id = id.get<std::string>();
        } else if (id.is_number_integer()) {
            r.id = std::to_string(id.get<long long>());
        } else if (!id.is_null()) {
            throw ValidationError(fmt::format("{}: id must be a string or integer", where));
        }
    }
    if (!j.contains("dataset") || !j["dataset"].is_string() || j["dataset"].get<std::string>().empty()) {
        throw ValidationError(fmt::format("{}: dataset must be a non-empty string", where));
    }
    r.dataset = j["dataset"].get<std::string>();
    if (!j.contains("response") || !j["response"].is_string()) {
        throw ValidationError(fmt::format("{}: response must be a string", where));
    }
    r.response = j["response"].get<std::string>();
    if (j.contains("token_count") && !j["token_count"].is_null()) {
        const auto& tc = j["token_count"];
        if (tc.is_number_unsigned()) {
            r.token_count = tc.get<std::uint64_t>();
        } else {
            throw ValidationError(fmt::format("{}: token_count must be a non-negative integer", where));
        }
    }
    if (j.contains("correct") && !j["correct"].is_null()) {
        if (!j["correct"].is_boolean()) throw ValidationError(fmt::format("{}: correct must be a boolean", where));
        r.correct = j["correct"].get<bool>();
    }
    if (j.contains("difficulty") && !j["difficulty"].is_null()) {
        if (!j["difficulty"].is_number_integer()) {
            throw ValidationError(fmt::format("{}: difficulty must be an integer", where));
        }
        r.difficulty = j["difficulty"].get<int>();
    }
    return r;
}

namespace {

template <typename F>
void for_each_line(const std::filesystem::path& path, F&& f) {
    std::ifstream in(path);
    if (!in) throw IoError(fmt::format("cannot read '{}'", path.string()));
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
        f(parse_record(text, line));
    }
    if (in.bad()) throw IoError(fmt::format("error reading '{}'", path.string()));
}

} // namespace

std::vector<ResponseRecord> read_records(const std::filesystem::path& path) {
    std::vector<ResponseRecord> out;
    for_each_line(path, [&](ResponseRecord r) { out.push_back(std::move(r)); });
    return out;
}

void accumulate_file(const std::filesystem::path& path, CorpusAccumulator& acc) {
    for_each_line(path, [&](const ResponseRecord& r) { acc.add(r); });
}

std::string report_to_json(const CorpusReport& report, const CorpusReport* baseline, const LengthReduction* reduction) {
    json j;
    j["schema_version"] = report_schema_version;
    j["header"] = {{"keyword_counting", "per occurrence"},
                   {"match_mode", mode_name(report.mode)},
                   {"keywords", reflection_keywords()},
                   {"aggregation", "macro (unweighted mean over datasets)"},
                   {"accuracy_unit", "fraction"},
                   {"reduction_sign", "positive = shorter than baseline, percent"}};
    j["candidate"] = report_body(report);
    if (baseline) j["baseline"] = report_body(*baseline);
    if (reduction) {
        j["length_reduction"] = {{"per_dataset", reduction->per_dataset},
                                 {"macro", reduction->macro},
                                 {"candidate_only", reduction->candidate_only},
                                 {"baseline_only", reduction->baseline_only}};
    }
    return j.dump(2);
}

std::string report_to_markdown(const CorpusReport& report, const CorpusReport* baseline,
                               const LengthReduction* reduction) {
    std::string out = "# Response length report\n\n";
    out += fmt::format("Reflection keywords are counted per occurrence ({} matching). Lengths are {}.\n\n",
                       mode_name(report.mode),
                       report.approximate_lengths() ? "partly approximate (whitespace tokens)" : "token counts");
    out += "| Dataset | n | Avg length | Reduction % | Reflective % | Keywords / response | Accuracy % |\n";
    out += "|---|---:|---:|---:|---:|---:|---:|\n";
    for (const auto& [name, g] : report.datasets) {
        std::string red = "-";
        if (reduction) {
            auto it = reduction->per_dataset.find(name);
            if (it != reduction->per_dataset.end()) red = fmt::format("{:.1f}", it->second);
        }
        out += fmt::format("| {} | {} | {:.1f} | {} | {} | {:.3f} | {} |\n", name, g.n, g.avg_length, red,
                           percent(g.reflective_ratio), g.keyword_freq, g.accuracy ? percent(*g.accuracy) : "-");
    }
    out += fmt::format("| **Macro** | | {:.1f} | {} | {} | {:.3f} | {} |\n", report.macro.avg_length,
                       reduction ? fmt::format("{:.1f}", reduction->macro) : "-", percent(report.macro.reflective_ratio),
                       report.macro.keyword_freq, report.macro.accuracy ? percent(*report.macro.accuracy) : "-");
    if (baseline) {
        out += "\n## Baseline\n\n| Dataset | n | Avg length | Reflective % | Accuracy % |\n|---|---:|---:|---:|---:|\n";
        for (const auto& [name, g] : baseline->datasets) {
            out += fmt::format("| {} | {} | {:.1f} | {} | {} |\n", name, g.n, g.avg_length, percent(g.reflective_ratio),
                               g.accuracy ? percent(*g.accuracy) : "-");
        }
    }
    if (!report.difficulty.empty()) {
        out += "\n## By difficulty\n\n| Dataset | Level | n | Avg length | Reflective % |\n|---|---:|---:|---:|---:|\n";
        for (const auto& [name, levels] : report.difficulty) {
            for (const auto& [level, g] : levels) {
                out += fmt::format("| {} | {} | {} | {:.1f} | {} |\n", name, level, g.n, g.avg_length,
                                   percent(g.reflective_ratio));
            }
        }
    }
    return out;
}

} // namespace l2smerge
