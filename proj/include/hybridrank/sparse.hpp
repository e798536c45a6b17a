#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "corpus.hpp"

namespace hybridrank {

/// Lucene-style smoothed idf, never negative.
inline double bm25_idf(std::size_t doc_count, std::size_t df)
{
    const double n = static_cast<double>(doc_count);
    const double f = static_cast<double>(df);
    return std::log(1.0 + (n - f + 0.5) / (f + 0.5));
}

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;

    void validate() const
    {
        if (!(k1 >= 0.0)) {
            throw Error(ErrorKind::invalid_argument, "bm25: k1 must be >= 0");
        }
        if (!(b >= 0.0 && b <= 1.0)) {
            throw Error(ErrorKind::invalid_argument, "bm25: b must lie in [0, 1]");
        }
    }
};

namespace detail {

inline std::vector<std::string> unique_sorted(std::vector<std::string> tokens)
{
    std::sort(tokens.begin(), tokens.end());
    tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
    return tokens;
}

inline void check_id_persistable(const std::string& id)
{
    if (id.find_first_of("\t\n\r") != std::string::npos) {
        throw Error(ErrorKind::invalid_argument, "id '" + id + "' contains a tab or newline and cannot be persisted");
    }
}

inline void expect_header(std::istream& in, const std::string& path, const std::string& magic, int version)
{
    std::string line;
    if (!std::getline(in, line)) {
        throw parse_error(path, 1, "missing header");
    }
    detail::strip_cr(line);
    const auto f = split_whitespace(line);
    if (f.size() != 2 || f[0] != magic) {
        throw parse_error(path, 1, "expected header '" + magic + " <version>'");
    }
    if (parse_int(f[1]) != version) {
        throw parse_error(path, 1, "unsupported version " + std::string(f[1]));
    }
}

inline std::size_t read_count_line(std::istream& in, const std::string& path, std::size_t& line_no, const std::string& key)
{
    std::string line;
    ++line_no;
    if (!std::getline(in, line)) {
        throw parse_error(path, line_no, "unexpected end of file, expected '" + key + "'");
    }
    const auto f = split_whitespace(line);
    if (f.size() != 2 || f[0] != key) {
        throw parse_error(path, line_no, "expected '" + key + " <count>'");
    }
    const auto n = parse_int(f[1]);
    if (!n || *n < 0) {
        throw parse_error(path, line_no, "bad count");
    }
    return static_cast<std::size_t>(*n);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Inverted index over term frequencies

struct Posting {
    std::uint32_t ordinal;
    std::uint32_t tf;

    bool operator==(const Posting&) const = default;
};

class InvertedIndex {
  public:
    InvertedIndex() = default;

    std::size_t doc_count() const { return m_ids.size(); }
    double avg_doc_length() const { return m_avg_doc_length; }
    std::uint32_t doc_length(std::uint32_t ordinal) const { return m_doc_lengths.at(ordinal); }
    const std::vector<std::uint32_t>& doc_lengths() const { return m_doc_lengths; }
    const std::string& id(std::uint32_t ordinal) const { return m_ids.at(ordinal); }
    const std::vector<std::string>& ids() const { return m_ids; }

    std::optional<std::uint32_t> ordinal_of(const std::string& id) const
    {
        auto it = m_ordinals.find(id);
        return it == m_ordinals.end() ? std::nullopt : std::optional<std::uint32_t>(it->second);
    }

    const std::vector<Posting>* postings(const std::string& term) const
    {
        auto it = m_postings.find(term);
        return it == m_postings.end() ? nullptr : &it->second;
    }

    std::size_t df(const std::string& term) const
    {
        const auto* p = postings(term);
        return p ? p->size() : 0;
    }

    std::uint32_t tf(const std::string& term, std::uint32_t ordinal) const
    {
        const auto* p = postings(term);
        if (!p) {
            return 0;
        }
        auto it = std::lower_bound(p->begin(), p->end(), ordinal, [](const Posting& x, std::uint32_t o) { return x.ordinal < o; });
        return (it != p->end() && it->ordinal == ordinal) ? it->tf : 0;
    }

    const std::unordered_map<std::string, std::vector<Posting>>& all_postings() const { return m_postings; }

    bool operator==(const InvertedIndex& o) const
    {
        return m_ids == o.m_ids && m_doc_lengths == o.m_doc_lengths && m_avg_doc_length == o.m_avg_doc_length &&
               m_postings == o.m_postings;
    }

    /// Builds from per-ordinal token sequences. Counting runs in parallel; the
    /// merge walks ordinals in order so postings never depend on scheduling.
    static InvertedIndex from_tokens(std::vector<std::string> ids, const std::vector<std::vector<std::string>>& docs,
                                     unsigned threads = 1)
    {
        InvertedIndex idx;
        idx.m_ids = std::move(ids);
        const std::size_t n = idx.m_ids.size();
        std::vector<std::vector<std::pair<std::string, std::uint32_t>>> counts(n);
        parallel_for(n, threads, [&](std::size_t i) {
            std::map<std::string, std::uint32_t> tf;
            for (const auto& t : docs[i]) {
                ++tf[t];
            }
            counts[i].assign(tf.begin(), tf.end());
        });
        idx.m_doc_lengths.resize(n);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            idx.m_doc_lengths[i] = static_cast<std::uint32_t>(docs[i].size());
            total += static_cast<double>(docs[i].size());
            for (auto& [term, f] : counts[i]) {
                idx.m_postings[term].push_back(Posting{static_cast<std::uint32_t>(i), f});
            }
        }
        idx.m_avg_doc_length = n == 0 ? 0.0 : total / static_cast<double>(n);
        idx.rebuild_ordinals();
        return idx;
    }

    void save(const std::string& path) const
    {
        auto out = detail::open_output(path);
        out << "hybridrank-inverted-index 1\n";
        out << "docs " << m_ids.size() << '\n';
        out << "avgdl " << format_real(m_avg_doc_length) << '\n';
        for (std::size_t i = 0; i < m_ids.size(); ++i) {
            detail::check_id_persistable(m_ids[i]);
            out << m_ids[i] << '\t' << m_doc_lengths[i] << '\n';
        }
        std::vector<const std::string*> terms;
        terms.reserve(m_postings.size());
        for (const auto& [t, _] : m_postings) {
            terms.push_back(&t);
        }
        std::sort(terms.begin(), terms.end(), [](const std::string* a, const std::string* b) { return *a < *b; });
        out << "terms " << terms.size() << '\n';
        for (const auto* t : terms) {
            out << *t;
            for (const auto& p : m_postings.at(*t)) {
                out << '\t' << p.ordinal << ':' << p.tf;
            }
            out << '\n';
        }
        if (!out) {
            throw Error(ErrorKind::io, "write to '" + path + "' failed");
        }
    }

    static InvertedIndex load(const std::string& path)
    {
        auto in = detail::open_input(path);
        detail::expect_header(in, path, "hybridrank-inverted-index", 1);
        std::size_t line_no = 1;
        InvertedIndex idx;
        const std::size_t n = detail::read_count_line(in, path, line_no, "docs");
        std::string line;
        ++line_no;
        if (!std::getline(in, line)) {
            throw parse_error(path, line_no, "missing avgdl");
        }
        {
            const auto f = split_whitespace(line);
            const auto v = f.size() == 2 && f[0] == "avgdl" ? parse_real(f[1]) : std::nullopt;
            if (!v) {
                throw parse_error(path, line_no, "expected 'avgdl <real>'");
            }
            idx.m_avg_doc_length = *v;
        }
        idx.m_ids.reserve(n);
        idx.m_doc_lengths.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            ++line_no;
            if (!std::getline(in, line)) {
                throw parse_error(path, line_no, "unexpected end of file in id table");
            }
            detail::strip_cr(line);
            const auto tab = line.find('\t');
            const auto len = tab == std::string::npos ? std::nullopt : parse_int(std::string_view(line).substr(tab + 1));
            if (!len || *len < 0) {
                throw parse_error(path, line_no, "expected id<TAB>length");
            }
            idx.m_ids.push_back(line.substr(0, tab));
            idx.m_doc_lengths.push_back(static_cast<std::uint32_t>(*len));
        }
        const std::size_t terms = detail::read_count_line(in, path, line_no, "terms");
        for (std::size_t t = 0; t < terms; ++t) {
            ++line_no;
            if (!std::getline(in, line)) {
                throw parse_error(path, line_no, "unexpected end of file in postings");
            }
            detail::strip_cr(line);
            std::vector<std::string_view> fields;
            std::string_view rest(line);
            for (std::size_t pos; (pos = rest.find('\t')) != std::string_view::npos; rest = rest.substr(pos + 1)) {
                fields.push_back(rest.substr(0, pos));
            }
            fields.push_back(rest);
            auto& plist = idx.m_postings[std::string(fields[0])];
            for (std::size_t k = 1; k < fields.size(); ++k) {
                const auto colon = fields[k].find(':');
                const auto o = colon == std::string_view::npos ? std::nullopt : parse_int(fields[k].substr(0, colon));
                const auto f = colon == std::string_view::npos ? std::nullopt : parse_int(fields[k].substr(colon + 1));
                if (!o || !f || *o < 0 || static_cast<std::size_t>(*o) >= n || *f <= 0) {
                    throw parse_error(path, line_no, "bad posting '" + std::string(fields[k]) + "'");
                }
                if (!plist.empty() && plist.back().ordinal >= *o) {
                    throw parse_error(path, line_no, "postings not sorted by ordinal");
                }
                plist.push_back(Posting{static_cast<std::uint32_t>(*o), static_cast<std::uint32_t>(*f)});
            }
        }
        idx.rebuild_ordinals();
        return idx;
    }

  private:
    void rebuild_ordinals()
    {
        m_ordinals.clear();
        m_ordinals.reserve(m_ids.size());
        for (std::size_t i = 0; i < m_ids.size(); ++i) {
            if (!m_ordinals.emplace(m_ids[i], static_cast<std::uint32_t>(i)).second) {
                throw Error(ErrorKind::duplicate_id, "duplicate passage id '" + m_ids[i] + "' in index");
            }
        }
    }

    std::unordered_map<std::string, std::vector<Posting>> m_postings;
    std::vector<std::uint32_t> m_doc_lengths;
    double m_avg_doc_length = 0.0;
    std::vector<std::string> m_ids;
    std::unordered_map<std::string, std::uint32_t> m_ordinals;
};

using Expansions = std::unordered_map<std::string, std::string>;

/// Indexes each passage over its tokens followed by the tokens of its
/// expansion text, when one is given.
inline InvertedIndex build_inverted_index(const Corpus& corpus, const Expansions& expansions = {}, unsigned threads = 1)
{
    for (const auto& [id, _] : expansions) {
        if (!corpus.find(id)) {
            throw Error(ErrorKind::unknown_id, "expansion for unknown passage '" + id + "'");
        }
    }
    std::vector<std::string> ids;
    std::vector<std::vector<std::string>> docs(corpus.size());
    ids.reserve(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        ids.push_back(corpus.at(i).passage_id);
    }
    parallel_for(corpus.size(), threads, [&](std::size_t i) {
        docs[i] = corpus.tokens(i);
        auto it = expansions.find(ids[i]);
        if (it != expansions.end()) {
            auto extra = tokenize(it->second);
            docs[i].insert(docs[i].end(), extra.begin(), extra.end());
        }
    });
    return InvertedIndex::from_tokens(std::move(ids), docs, threads);
}

/// Reads `passage_id<TAB>expansion text` lines. Repeated ids are concatenated
/// in file order, so several predicted queries per passage may be listed.
inline Expansions load_expansions(const std::string& path)
{
    auto in = detail::open_input(path);
    Expansions out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        detail::strip_cr(line);
        if (trim(line).empty()) {
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0) {
            throw parse_error(path, line_no, "expected passage_id<TAB>expansion text");
        }
        auto& slot = out[line.substr(0, tab)];
        if (!slot.empty()) {
            slot.push_back(' ');
        }
        slot += line.substr(tab + 1);
    }
    return out;
}

namespace detail {

inline double bm25_term(double idf, double tf, double dl, double avgdl, const Bm25Params& p)
{
    const double norm = avgdl > 0.0 ? dl / avgdl : 0.0;
    return idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * norm));
}

}  // namespace detail

/// Okapi BM25 of one passage. Unique query terms are summed in lexicographic
/// order, the same order retrieve_bm25 uses, so both give bit-identical scores.
inline double bm25_score(const InvertedIndex& index, const std::vector<std::string>& query_tokens, std::uint32_t ordinal,
                         const Bm25Params& params = {})
{
    params.validate();
    double score = 0.0;
    const double dl = index.doc_length(ordinal);
    for (const auto& t : detail::unique_sorted(query_tokens)) {
        const auto tf = index.tf(t, ordinal);
        if (tf == 0) {
            continue;
        }
        score += detail::bm25_term(bm25_idf(index.doc_count(), index.df(t)), tf, dl, index.avg_doc_length(), params);
    }
    return score;
}

/// Exhaustive term-at-a-time BM25 over the postings of the query terms.
inline CandidateList retrieve_bm25(const InvertedIndex& index, const Query& query, std::size_t k, const Bm25Params& params = {})
{
    if (k < 1) {
        throw Error(ErrorKind::invalid_argument, "retrieve_bm25: k must be >= 1");
    }
    params.validate();
    std::unordered_map<std::uint32_t, double> acc;
    for (const auto& t : detail::unique_sorted(tokenize(query.text))) {
        const auto* plist = index.postings(t);
        if (!plist) {
            continue;
        }
        const double idf = bm25_idf(index.doc_count(), plist->size());
        for (const auto& p : *plist) {
            acc[p.ordinal] += detail::bm25_term(idf, p.tf, index.doc_length(p.ordinal), index.avg_doc_length(), params);
        }
    }
    std::vector<std::pair<double, std::uint32_t>> scored;
    scored.reserve(acc.size());
    for (const auto& [o, s] : acc) {
        scored.emplace_back(s, o);
    }
    const auto order = top_k_ordinals(std::move(scored), k, [&](std::uint32_t o) -> const std::string& { return index.id(o); });
    CandidateList out;
    out.reserve(order.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
        out.push_back(Candidate{index.id(order[r]), acc[order[r]], static_cast<int>(r + 1), "bm25", std::nullopt, std::nullopt});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Impact index over precomputed term weights

using TermWeights = std::map<std::string, double>;
/// Passage (or query) id with its term weights, in ordinal order.
using WeightTable = std::vector<std::pair<std::string, TermWeights>>;

/// Analytic stand-in for learned sparse weights: ln(1 + tf) * idf.
inline WeightTable default_term_weights(const Corpus& corpus)
{
    std::unordered_map<std::string, std::size_t> df;
    std::vector<std::map<std::string, std::uint32_t>> tfs(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        for (const auto& t : corpus.tokens(i)) {
            ++tfs[i][t];
        }
        for (const auto& [t, _] : tfs[i]) {
            ++df[t];
        }
    }
    WeightTable out;
    out.reserve(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        TermWeights w;
        for (const auto& [t, f] : tfs[i]) {
            w[t] = std::log1p(static_cast<double>(f)) * bm25_idf(corpus.size(), df[t]);
        }
        out.emplace_back(corpus.at(i).passage_id, std::move(w));
    }
    return out;
}

/// Unit weight for every unique query token.
inline TermWeights unit_query_weights(const std::string& text)
{
    TermWeights w;
    for (const auto& t : tokenize(text)) {
        w[t] = 1.0;
    }
    return w;
}

struct ImpactPosting {
    std::uint32_t ordinal;
    double weight;

    bool operator==(const ImpactPosting&) const = default;
};

class ImpactIndex {
  public:
    std::size_t doc_count() const { return m_ids.size(); }
    const std::string& id(std::uint32_t ordinal) const { return m_ids.at(ordinal); }
    const std::vector<std::string>& ids() const { return m_ids; }

    std::optional<std::uint32_t> ordinal_of(const std::string& id) const
    {
        auto it = m_ordinals.find(id);
        return it == m_ordinals.end() ? std::nullopt : std::optional<std::uint32_t>(it->second);
    }

    const std::vector<ImpactPosting>* postings(const std::string& term) const
    {
        auto it = m_postings.find(term);
        return it == m_postings.end() ? nullptr : &it->second;
    }

    double weight(const std::string& term, std::uint32_t ordinal) const
    {
        const auto* p = postings(term);
        if (!p) {
            return 0.0;
        }
        auto it = std::lower_bound(p->begin(), p->end(), ordinal, [](const ImpactPosting& x, std::uint32_t o) { return x.ordinal < o; });
        return (it != p->end() && it->ordinal == ordinal) ? it->weight : 0.0;
    }

    bool operator==(const ImpactIndex& o) const { return m_ids == o.m_ids && m_postings == o.m_postings; }

    /// Zero weights are dropped from the postings; negative or non-finite
    /// weights are rejected.
    static ImpactIndex build(const WeightTable& weights)
    {
        ImpactIndex idx;
        idx.m_ids.reserve(weights.size());
        for (std::size_t i = 0; i < weights.size(); ++i) {
            idx.m_ids.push_back(weights[i].first);
            for (const auto& [t, w] : weights[i].second) {
                if (!(w >= 0.0) || !std::isfinite(w)) {
                    throw Error(ErrorKind::invalid_argument,
                                "negative or non-finite weight for term '" + t + "' in '" + weights[i].first + "'");
                }
                if (w > 0.0) {
                    idx.m_postings[t].push_back(ImpactPosting{static_cast<std::uint32_t>(i), w});
                }
            }
        }
        idx.rebuild_ordinals();
        return idx;
    }

    void save(const std::string& path) const
    {
        auto out = detail::open_output(path);
        out << "hybridrank-impact-index 1\n";
        out << "docs " << m_ids.size() << '\n';
        for (const auto& id : m_ids) {
            detail::check_id_persistable(id);
            out << id << '\n';
        }
        std::map<std::string, const std::vector<ImpactPosting>*> sorted;
        for (const auto& [t, p] : m_postings) {
            sorted.emplace(t, &p);
        }
        out << "terms " << sorted.size() << '\n';
        for (const auto& [t, plist] : sorted) {
            out << t;
            for (const auto& p : *plist) {
                out << '\t' << p.ordinal << ':' << format_real(p.weight);
            }
            out << '\n';
        }
        if (!out) {
            throw Error(ErrorKind::io, "write to '" + path + "' failed");
        }
    }

    static ImpactIndex load(const std::string& path)
    {
        auto in = detail::open_input(path);
        detail::expect_header(in, path, "hybridrank-impact-index", 1);
        std::size_t line_no = 1;
        ImpactIndex idx;
        const std::size_t n = detail::read_count_line(in, path, line_no, "docs");
        std::string line;
        for (std::size_t i = 0; i < n; ++i) {
            ++line_no;
            if (!std::getline(in, line)) {
                throw parse_error(path, line_no, "unexpected end of file in id table");
            }
            detail::strip_cr(line);
            idx.m_ids.push_back(line);
        }
        const std::size_t terms = detail::read_count_line(in, path, line_no, "terms");
        for (std::size_t t = 0; t < terms; ++t) {
            ++line_no;
            if (!std::getline(in, line)) {
                throw parse_error(path, line_no, "unexpected end of file in postings");
            }
            detail::strip_cr(line);
            std::vector<std::string_view> fields;
            std::string_view rest(line);
            for (std::size_t pos; (pos = rest.find('\t')) != std::string_view::npos; rest = rest.substr(pos + 1)) {
                fields.push_back(rest.substr(0, pos));
            }
            fields.push_back(rest);
            auto& plist = idx.m_postings[std::string(fields[0])];
            for (std::size_t k = 1; k < fields.size(); ++k) {
                const auto colon = fields[k].find(':');
                const auto o = colon == std::string_view::npos ? std::nullopt : parse_int(fields[k].substr(0, colon));
                const auto w = colon == std::string_view::npos ? std::nullopt : parse_real(fields[k].substr(colon + 1));
                if (!o || !w || *o < 0 || static_cast<std::size_t>(*o) >= n || !(*w >= 0.0)) {
                    throw parse_error(path, line_no, "bad posting '" + std::string(fields[k]) + "'");
                }
                if (!plist.empty() && plist.back().ordinal >= *o) {
                    throw parse_error(path, line_no, "postings not sorted by ordinal");
                }
                plist.push_back(ImpactPosting{static_cast<std::uint32_t>(*o), *w});
            }
        }
        idx.rebuild_ordinals();
        return idx;
    }

  private:
    void rebuild_ordinals()
    {
        m_ordinals.clear();
        for (std::size_t i = 0; i < m_ids.size(); ++i) {
            if (!m_ordinals.emplace(m_ids[i], static_cast<std::uint32_t>(i)).second) {
                throw Error(ErrorKind::duplicate_id, "duplicate passage id '" + m_ids[i] + "' in impact index");
            }
        }
    }

    std::unordered_map<std::string, std::vector<ImpactPosting>> m_postings;
    std::vector<std::string> m_ids;
    std::unordered_map<std::string, std::uint32_t> m_ordinals;
};

inline ImpactIndex build_impact_index(const WeightTable& weights) { return ImpactIndex::build(weights); }

/// Dot product between query and passage weights. Query terms are visited in
/// lexicographic order (TermWeights is ordered).
inline double impact_score(const ImpactIndex& index, const TermWeights& query_weights, std::uint32_t ordinal)
{
    double s = 0.0;
    for (const auto& [t, qw] : query_weights) {
        const double dw = index.weight(t, ordinal);
        if (dw != 0.0) {
            s += qw * dw;
        }
    }
    return s;
}

/// Every passage that posts any query term is a candidate, even at score 0.
inline CandidateList retrieve_impact(const ImpactIndex& index, const TermWeights& query_weights, std::size_t k)
{
    if (k < 1) {
        throw Error(ErrorKind::invalid_argument, "retrieve_impact: k must be >= 1");
    }
    std::unordered_map<std::uint32_t, double> acc;
    for (const auto& [t, qw] : query_weights) {
        if (!(qw >= 0.0) || !std::isfinite(qw)) {
            throw Error(ErrorKind::invalid_argument, "negative or non-finite query weight for term '" + t + "'");
        }
        const auto* plist = index.postings(t);
        if (!plist) {
            continue;
        }
        for (const auto& p : *plist) {
            acc[p.ordinal] += qw * p.weight;
        }
    }
    std::vector<std::pair<double, std::uint32_t>> scored;
    scored.reserve(acc.size());
    for (const auto& [o, s] : acc) {
        scored.emplace_back(s, o);
    }
    const auto order = top_k_ordinals(std::move(scored), k, [&](std::uint32_t o) -> const std::string& { return index.id(o); });
    CandidateList out;
    out.reserve(order.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
        out.push_back(Candidate{index.id(order[r]), acc[order[r]], static_cast<int>(r + 1), "impact", std::nullopt, std::nullopt});
    }
    return out;
}

/// Reads `{"id": ..., "weights": {term: weight}}` records, one per line.
inline WeightTable load_term_weights(const std::string& path)
{
    auto in = detail::open_input(path);
    WeightTable out;
    std::unordered_map<std::string, std::size_t> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw parse_error(path, line_no, std::string("invalid JSON: ") + e.what());
        }
        if (!rec.is_object() || !rec.contains("id") || !rec["id"].is_string() || !rec.contains("weights") ||
            !rec["weights"].is_object()) {
            throw parse_error(path, line_no, "expected {\"id\": string, \"weights\": object}");
        }
        TermWeights w;
        for (const auto& [term, value] : rec["weights"].items()) {
            if (!value.is_number()) {
                throw parse_error(path, line_no, "weight for '" + term + "' is not a number");
            }
            const double v = value.get<double>();
            if (!(v >= 0.0) || !std::isfinite(v)) {
                throw Error(ErrorKind::invalid_argument, path + ":" + std::to_string(line_no) + ": negative weight for '" + term + "'");
            }
            w[term] = v;
        }
        const auto id = rec["id"].get<std::string>();
        if (!seen.emplace(id, out.size()).second) {
            throw Error(ErrorKind::duplicate_id, path + ":" + std::to_string(line_no) + ": duplicate id '" + id + "'");
        }
        out.emplace_back(id, std::move(w));
    }
    return out;
}

inline void save_term_weights(const WeightTable& table, const std::string& path)
{
    auto out = detail::open_output(path);
    for (const auto& [id, w] : table) {
        nlohmann::ordered_json rec;
        rec["id"] = id;
        rec["weights"] = nlohmann::ordered_json::object();
        for (const auto& [t, v] : w) {
            rec["weights"][t] = v;
        }
        out << rec.dump() << '\n';
    }
}

/// Orders an externally supplied weight table by corpus ordinal. Passages
/// without weights get an empty row; unknown ids are an error.
inline WeightTable align_weights(const Corpus& corpus, const WeightTable& table)
{
    WeightTable out(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        out[i].first = corpus.at(i).passage_id;
    }
    for (const auto& [id, w] : table) {
        auto o = corpus.find(id);
        if (!o) {
            throw Error(ErrorKind::unknown_id, "term weights for unknown passage '" + id + "'");
        }
        out[*o].second = w;
    }
    return out;
}

}  // namespace hybridrank
