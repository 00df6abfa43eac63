// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace l2smerge {

/// One model response. `token_count` falls back to the number of
/// whitespace-delimited tokens of `response` when absent.
struct ResponseRecord {
    std::string id;
    std::string dataset;
    std::string response;
    std::optional<std::uint64_t> token_count;
    std::optional<bool> correct;
    std::optional<int> difficulty;
};

enum class MatchMode {
    substring,     ///< "awaiting" contains "wait"
    word_boundary, ///< matches must not touch letters or digits on either side
};

/// Reflection keywords, lower case.
const std::vector<std::string>& reflection_keywords();

struct Reflection {
    bool reflective = false;
    std::uint64_t keyword_count = 0;
    std::map<std::string, std::uint64_t> per_keyword;
};

/// Case-insensitive scan. Each occurrence site counts once: at every position
/// the longest matching keyword is taken and scanning resumes after it.
Reflection detect_reflection(std::string_view text, MatchMode mode = MatchMode::substring);

std::uint64_t whitespace_token_count(std::string_view text);

struct GroupStats {
    std::uint64_t n = 0;
    double avg_length = 0.0;
    std::uint64_t reflective_count = 0;
    double reflective_ratio = 0.0;
    double keyword_freq = 0.0; ///< keyword occurrences per response
    std::optional<double> accuracy; ///< fraction correct, only when every record is labeled
    std::uint64_t approx_lengths = 0; ///< records whose length used the whitespace fallback
    std::map<std::string, std::uint64_t> keyword_totals;
};

struct MacroStats {
    double avg_length = 0.0;
    double reflective_ratio = 0.0;
    double keyword_freq = 0.0;
    std::optional<double> accuracy; ///< only when every dataset has an accuracy
};

struct CorpusReport {
    MatchMode mode = MatchMode::substring;
    std::map<std::string, GroupStats> datasets;
    std::map<std::string, std::map<int, GroupStats>> difficulty; ///< dataset -> level -> stats
    MacroStats macro;

    bool approximate_lengths() const;
};

/// Streaming aggregation; results do not depend on the order records arrive in.
class CorpusAccumulator {
public:
    explicit CorpusAccumulator(MatchMode mode = MatchMode::substring) : mode_(mode) {}

    void add(const ResponseRecord& record);
    void merge(const CorpusAccumulator& other);
    std::uint64_t size() const { return records_; }
    CorpusReport report() const;

    struct Sums {
        std::uint64_t n = 0, length = 0, reflective = 0, keywords = 0, labeled = 0, correct = 0, approx = 0;
        std::map<std::string, std::uint64_t> per_keyword;

        void add(const Sums& other);
        GroupStats stats() const;
    };

private:
    MatchMode mode_;
    std::uint64_t records_ = 0;
    std::map<std::string, Sums> datasets_;
    std::map<std::string, std::map<int, Sums>> difficulty_;
};

/// Per-dataset statistics and macro (unweighted per-dataset) averages. Needs >= 1 record.
CorpusReport corpus_stats(std::span<const ResponseRecord> records, MatchMode mode = MatchMode::substring);

/// Statistics per difficulty level over the records that carry one.
std::map<int, GroupStats> difficulty_profile(std::span<const ResponseRecord> records,
                                             MatchMode mode = MatchMode::substring);

/// Percent reductions; positive means the candidate is shorter.
struct LengthReduction {
    std::map<std::string, double> per_dataset;
    double macro = 0.0; ///< unweighted mean over shared datasets
    std::vector<std::string> candidate_only;
    std::vector<std::string> baseline_only;
};

LengthReduction length_reduction(const CorpusReport& candidate, const CorpusReport& baseline);

/// Parses one JSONL object; `line` is used in diagnostics.
ResponseRecord parse_record(std::string_view json_line, std::size_t line = 0);
std::vector<ResponseRecord> read_records(const std::filesystem::path& path);
/// Streams a JSONL file straight into an accumulator.
void accumulate_file(const std::filesystem::path& path, CorpusAccumulator& acc);

inline constexpr int report_schema_version = 1;

std::string report_to_json(const CorpusReport& report, const CorpusReport* baseline = nullptr,
                           const LengthReduction* reduction = nullptr);
std::string report_to_markdown(const CorpusReport& report, const CorpusReport* baseline = nullptr,
                               const LengthReduction* reduction = nullptr);

} // namespace l2smerge
