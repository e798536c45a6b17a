#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "common.hpp"
#include "corpus.hpp"

namespace hybridrank {

struct RunEntry {
    std::string query_id;
    std::string doc_id;
    int rank = 1;
    double score = 0.0;
    std::string tag;

    bool operator==(const RunEntry&) const = default;
};

using Run = std::vector<RunEntry>;

/// Checks the per-query invariants: ranks consecutive from 1 in entry order,
/// unique documents and non-increasing scores.
inline void validate_run(const Run& run)
{
    struct State {
        int last_rank = 0;
        double last_score = 0.0;
        std::set<std::string> docs;
    };
    std::map<std::string, State> per_query;
    for (const auto& e : run) {
        auto& st = per_query[e.query_id];
        if (e.rank != st.last_rank + 1) {
            throw Error(ErrorKind::invalid_argument, "run: query '" + e.query_id + "' rank " + std::to_string(e.rank) +
                                                         " does not follow rank " + std::to_string(st.last_rank));
        }
        if (st.last_rank > 0 && e.score > st.last_score) {
            throw Error(ErrorKind::invalid_argument, "run: query '" + e.query_id + "' scores increase at rank " + std::to_string(e.rank));
        }
        if (!std::isfinite(e.score)) {
            throw Error(ErrorKind::numeric, "run: non-finite score for '" + e.doc_id + "'");
        }
        if (!st.docs.insert(e.doc_id).second) {
            throw Error(ErrorKind::duplicate_id, "run: duplicate document '" + e.doc_id + "' in query '" + e.query_id + "'");
        }
        if (e.query_id.empty() || e.doc_id.empty() || e.tag.empty() ||
            (e.query_id + e.doc_id + e.tag).find_first_of(" \t\r\n") != std::string::npos) {
            throw Error(ErrorKind::invalid_argument, "run: fields must be non-empty and free of whitespace");
        }
        st.last_rank = e.rank;
        st.last_score = e.score;
    }
}

inline std::string format_run_line(const RunEntry& e)
{
    char score[64];
    std::snprintf(score, sizeof(score), "%.6f", e.score);
    return e.query_id + " Q0 " + e.doc_id + " " + std::to_string(e.rank) + " " + score + " " + e.tag;
}

/// Six-column TREC format, scores with six decimals.
inline void write_run(const Run& run, const std::string& path)
{
    validate_run(run);
    auto out = detail::open_output(path);
    for (const auto& e : run) {
        out << format_run_line(e) << '\n';
    }
    if (!out) {
        throw Error(ErrorKind::io, "write to '" + path + "' failed");
    }
}

/// Reads a TREC run with arbitrary whitespace between columns. Entries are
/// returned in file order; invariants are not enforced on read.
inline Run read_run(const std::string& path)
{
    auto in = detail::open_input(path);
    Run run;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto f = split_whitespace(line);
        if (f.empty()) {
            continue;
        }
        if (f.size() != 6) {
            throw parse_error(path, line_no, "expected 'query_id Q0 doc_id rank score tag'");
        }
        const auto rank = parse_int(f[3]);
        const auto score = parse_real(f[4]);
        if (!rank) {
            throw parse_error(path, line_no, "rank is not an integer");
        }
        if (!score || !std::isfinite(*score)) {
            throw parse_error(path, line_no, "score is not a finite real");
        }
        run.push_back(RunEntry{std::string(f[0]), std::string(f[2]), static_cast<int>(*rank), *score, std::string(f[5])});
    }
    return run;
}

/// Candidate list of one query as run entries.
inline void append_run(Run& run, const std::string& query_id, const CandidateList& list, const std::string& tag)
{
    for (std::size_t i = 0; i < list.size(); ++i) {
        run.push_back(RunEntry{query_id, list[i].passage_id, static_cast<int>(i + 1), list[i].retrieval_score, tag});
    }
}

/// Per-query document order used for evaluation: ascending rank column, with
/// score descending and then doc id ascending settling malformed duplicates.
/// Only ranks matter, so any strictly monotone rescaling of scores is neutral.
inline std::map<std::string, std::vector<std::string>> ranked_docs(const Run& run)
{
    std::map<std::string, std::vector<const RunEntry*>> grouped;
    for (const auto& e : run) {
        grouped[e.query_id].push_back(&e);
    }
    std::map<std::string, std::vector<std::string>> out;
    for (auto& [q, entries] : grouped) {
        std::stable_sort(entries.begin(), entries.end(), [](const RunEntry* a, const RunEntry* b) {
            if (a->rank != b->rank) {
                return a->rank < b->rank;
            }
            return score_then_id(a->score, a->doc_id, b->score, b->doc_id);
        });
        std::set<std::string> seen;
        auto& docs = out[q];
        for (const auto* e : entries) {
            if (seen.insert(e->doc_id).second) {
                docs.push_back(e->doc_id);
            }
        }
    }
    return out;
}

struct MetricResult {
    std::string name;
    std::map<std::string, double> per_query;
    double mean = 0.0;
    /// Judged queries left out of the mean because they have nothing relevant.
    std::size_t skipped = 0;
};

namespace detail {

inline void finish_mean(MetricResult& r)
{
    double sum = 0.0;
    for (const auto& [_, v] : r.per_query) {
        sum += v;
    }
    r.mean = r.per_query.empty() ? 0.0 : sum / static_cast<double>(r.per_query.size());
}

inline const std::vector<std::string>& docs_for(const std::map<std::string, std::vector<std::string>>& ranked, const std::string& q)
{
    static const std::vector<std::string> empty;
    auto it = ranked.find(q);
    return it == ranked.end() ? empty : it->second;
}

}  // namespace detail

/// NDCG@k with linear gain. Judged queries whose grades are all zero are
/// skipped; judged queries missing from the run score 0.
inline MetricResult ndcg_at_k(const Run& run, const Qrels& qrels, std::size_t k)
{
    if (k < 1) {
        throw Error(ErrorKind::invalid_argument, "ndcg_at_k: k must be >= 1");
    }
    MetricResult r;
    r.name = "ndcg@" + std::to_string(k);
    const auto ranked = ranked_docs(run);
    for (const auto& [q, judged] : qrels.all()) {
        std::vector<int> grades;
        for (const auto& [_, g] : judged) {
            grades.push_back(g);
        }
        std::sort(grades.begin(), grades.end(), std::greater<>());
        double idcg = 0.0;
        for (std::size_t i = 0; i < std::min(k, grades.size()); ++i) {
            idcg += grades[i] / std::log2(static_cast<double>(i) + 2.0);
        }
        if (idcg <= 0.0) {
            ++r.skipped;
            continue;
        }
        const auto& docs = detail::docs_for(ranked, q);
        double dcg = 0.0;
        for (std::size_t i = 0; i < std::min(k, docs.size()); ++i) {
            dcg += qrels.grade(q, docs[i]) / std::log2(static_cast<double>(i) + 2.0);
        }
        r.per_query[q] = dcg / idcg;
    }
    detail::finish_mean(r);
    return r;
}

namespace detail {

/// Runs `f(query, ranked docs, relevant count)` for every judged query with at
/// least one relevant document; the rest are counted as skipped.
template <typename F>
MetricResult binary_metric(const Run& run, const Qrels& qrels, int rel_threshold, std::string name, F&& f)
{
    MetricResult r;
    r.name = std::move(name);
    const auto ranked = ranked_docs(run);
    for (const auto& [q, judged] : qrels.all()) {
        std::size_t n_rel = 0;
        for (const auto& [_, g] : judged) {
            n_rel += g >= rel_threshold ? 1 : 0;
        }
        if (n_rel == 0) {
            ++r.skipped;
            continue;
        }
        r.per_query[q] = f(q, docs_for(ranked, q), n_rel);
    }
    finish_mean(r);
    return r;
}

}  // namespace detail

inline MetricResult average_precision(const Run& run, const Qrels& qrels, int rel_threshold = 2)
{
    return detail::binary_metric(run, qrels, rel_threshold, "ap", [&](const std::string& q, const std::vector<std::string>& docs, std::size_t n_rel) {
        double sum = 0.0;
        std::size_t hits = 0;
        for (std::size_t i = 0; i < docs.size(); ++i) {
            if (qrels.grade(q, docs[i]) >= rel_threshold) {
                ++hits;
                sum += static_cast<double>(hits) / static_cast<double>(i + 1);
            }
        }
        return sum / static_cast<double>(n_rel);
    });
}

inline MetricResult recall_at_k(const Run& run, const Qrels& qrels, std::size_t k, int rel_threshold = 2)
{
    return detail::binary_metric(run, qrels, rel_threshold, "recall@" + std::to_string(k),
                                 [&](const std::string& q, const std::vector<std::string>& docs, std::size_t n_rel) {
                                     std::size_t hits = 0;
                                     for (std::size_t i = 0; i < std::min(k, docs.size()); ++i) {
                                         hits += qrels.grade(q, docs[i]) >= rel_threshold ? 1 : 0;
                                     }
                                     return static_cast<double>(hits) / static_cast<double>(n_rel);
                                 });
}

inline MetricResult mrr_at_k(const Run& run, const Qrels& qrels, std::size_t k, int rel_threshold = 2)
{
    return detail::binary_metric(run, qrels, rel_threshold, "mrr@" + std::to_string(k),
                                 [&](const std::string& q, const std::vector<std::string>& docs, std::size_t) {
                                     for (std::size_t i = 0; i < std::min(k, docs.size()); ++i) {
                                         if (qrels.grade(q, docs[i]) >= rel_threshold) {
                                             return 1.0 / static_cast<double>(i + 1);
                                         }
                                     }
                                     return 0.0;
                                 });
}

struct EvalOptions {
    std::size_t ndcg_k = 10;
    std::size_t recall_k = 1000;
    std::size_t mrr_k = 100;
    int rel_threshold = 2;
};

/// The four standard metrics in a fixed order: AP, NDCG@k, R@k, MRR@k.
inline std::vector<MetricResult> evaluate(const Run& run, const Qrels& qrels, const EvalOptions& opts = {})
{
    return {average_precision(run, qrels, opts.rel_threshold), ndcg_at_k(run, qrels, opts.ndcg_k),
            recall_at_k(run, qrels, opts.recall_k, opts.rel_threshold), mrr_at_k(run, qrels, opts.mrr_k, opts.rel_threshold)};
}

/// `metric<TAB>query_id<TAB>value` per query, then `metric<TAB>all<TAB>mean`.
inline std::string format_per_query(const std::vector<MetricResult>& results)
{
    std::string out;
    char buf[64];
    for (const auto& m : results) {
        for (const auto& [q, v] : m.per_query) {
            std::snprintf(buf, sizeof(buf), "%.4f", v);
            out += m.name + "\t" + q + "\t" + buf + "\n";
        }
        std::snprintf(buf, sizeof(buf), "%.4f", m.mean);
        out += m.name + "\tall\t" + buf + "\n";
    }
    return out;
}

}  // namespace hybridrank
