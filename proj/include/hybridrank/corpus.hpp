#pragma once

#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"

namespace hybridrank {

// ---------------------------------------------------------------------------
// Tokenizer
//
// Lowercased runs of alphanumeric code points. ASCII letters and digits are
// alphanumeric; every other ASCII byte separates tokens. Non-ASCII code points
// count as alphanumeric except for the Latin-1, general and CJK punctuation
// blocks. Invalid UTF-8 bytes are kept as-is inside tokens.

namespace detail {

inline bool is_separator_codepoint(char32_t cp)
{
    if (cp < 0x80) {
        const bool alnum = (cp >= '0' && cp <= '9') || (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z');
        return !alnum;
    }
    return (cp >= 0x80 && cp <= 0xBF) || cp == 0xD7 || cp == 0xF7 || (cp >= 0x2000 && cp <= 0x206F) ||
           (cp >= 0x2E00 && cp <= 0x2E7F) || (cp >= 0x3000 && cp <= 0x303F) || (cp >= 0xFE30 && cp <= 0xFE4F) ||
           (cp >= 0xFF00 && cp <= 0xFF0F) || (cp >= 0xFF1A && cp <= 0xFF20) || cp == 0xFEFF;
}

inline char32_t to_lower_codepoint(char32_t cp)
{
    if (cp >= 'A' && cp <= 'Z') {
        return cp + 0x20;
    }
    if ((cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) || (cp >= 0x391 && cp <= 0x3A9 && cp != 0x3A2) ||
        (cp >= 0x410 && cp <= 0x42F)) {
        return cp + 0x20;
    }
    return cp;
}

inline void append_utf8(std::string& out, char32_t cp)
{
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

/// Decodes one code point starting at s[i]; returns its byte length, or 0 if
/// the sequence is invalid.
inline std::size_t decode_utf8(std::string_view s, std::size_t i, char32_t& cp)
{
    const auto b0 = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    if (b0 < 0x80) {
        cp = b0;
        return 1;
    }
    if ((b0 & 0xE0) == 0xC0) {
        len = 2;
        cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
        len = 3;
        cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
        len = 4;
        cp = b0 & 0x07;
    } else {
        return 0;
    }
    if (i + len > s.size()) {
        return 0;
    }
    for (std::size_t k = 1; k < len; ++k) {
        const auto b = static_cast<unsigned char>(s[i + k]);
        if ((b & 0xC0) != 0x80) {
            return 0;
        }
        cp = (cp << 6) | (b & 0x3F);
    }
    return len;
}

}  // namespace detail

inline std::vector<std::string> tokenize(std::string_view text)
{
    std::vector<std::string> tokens;
    std::string current;
    std::size_t i = 0;
    while (i < text.size()) {
        char32_t cp = 0;
        const std::size_t len = detail::decode_utf8(text, i, cp);
        if (len == 0) {
            current.push_back(text[i]);
            ++i;
            continue;
        }
        if (detail::is_separator_codepoint(cp)) {
            if (!current.empty()) {
                tokens.push_back(std::move(current));
                current.clear();
            }
        } else {
            detail::append_utf8(current, detail::to_lower_codepoint(cp));
        }
        i += len;
    }
    if (!current.empty()) {
        tokens.push_back(std::move(current));
    }
    return tokens;
}

inline std::string join_tokens(const std::vector<std::string>& tokens, std::size_t begin, std::size_t end)
{
    std::string out;
    for (std::size_t i = begin; i < end; ++i) {
        if (i > begin) {
            out.push_back(' ');
        }
        out += tokens[i];
    }
    return out;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) { return join_tokens(tokens, 0, tokens.size()); }

// ---------------------------------------------------------------------------
// Records

struct Document {
    std::string doc_id;
    std::string text;
    std::optional<std::string> title;

    /// Title and body as one indexable string.
    std::string full_text() const { return title && !title->empty() ? *title + " " + text : text; }
};

struct TokenSpan {
    std::size_t start = 0;
    std::size_t end = 0;

    bool operator==(const TokenSpan&) const = default;
};

struct Passage {
    std::string passage_id;
    std::string parent_doc_id;
    std::string text;
    std::optional<TokenSpan> token_span;
};

struct Query {
    std::string query_id;
    std::string text;

    bool operator==(const Query&) const = default;
};

struct SplitOptions {
    std::size_t window = 180;
    std::size_t stride = 90;
};

/// Sliding windows over the document's tokens. Windows start every `stride`
/// tokens; the last one is the first to reach the end of the document.
inline std::vector<Passage> split_passages(const Document& doc, std::size_t window, std::size_t stride)
{
    if (window < 1) {
        throw Error(ErrorKind::invalid_argument, "split_passages: window must be >= 1");
    }
    if (stride < 1 || stride > window) {
        throw Error(ErrorKind::invalid_argument, "split_passages: stride must satisfy 1 <= stride <= window");
    }
    const auto tokens = tokenize(doc.full_text());
    std::vector<Passage> out;
    if (tokens.empty()) {
        return out;
    }
    std::size_t start = 0;
    for (std::size_t w = 0;; ++w, start += stride) {
        const std::size_t end = std::min(start + window, tokens.size());
        out.push_back(Passage{doc.doc_id + "#" + std::to_string(w), doc.doc_id, join_tokens(tokens, start, end),
                              TokenSpan{start, end}});
        if (end == tokens.size()) {
            break;
        }
    }
    return out;
}

/// Recovers the parent document id from a passage id: the part before a
/// trailing `#<digits>` suffix, or the id itself when there is no `#`.
inline std::string parent_doc_id(std::string_view passage_id)
{
    if (passage_id.empty()) {
        throw Error(ErrorKind::invalid_argument, "empty passage id");
    }
    const auto hash = passage_id.rfind('#');
    if (hash == std::string_view::npos) {
        return std::string(passage_id);
    }
    const auto suffix = passage_id.substr(hash + 1);
    const bool digits = !suffix.empty() && std::all_of(suffix.begin(), suffix.end(), [](char c) { return c >= '0' && c <= '9'; });
    if (!digits || hash == 0) {
        throw Error(ErrorKind::invalid_argument, "unparseable passage id '" + std::string(passage_id) + "'");
    }
    return std::string(passage_id.substr(0, hash));
}

// ---------------------------------------------------------------------------
// Corpus: the immutable set of retrieval units.

class Corpus {
  public:
    Corpus() = default;

    /// Every document is its own passage.
    static Corpus from_native(const std::vector<Document>& docs)
    {
        Corpus c;
        c.m_passages.reserve(docs.size());
        for (const auto& d : docs) {
            c.m_passages.push_back(Passage{d.doc_id, d.doc_id, d.full_text(), std::nullopt});
        }
        c.finish();
        return c;
    }

    static Corpus from_split(const std::vector<Document>& docs, const SplitOptions& opts)
    {
        Corpus c;
        for (const auto& d : docs) {
            auto ps = split_passages(d, opts.window, opts.stride);
            for (auto& p : ps) {
                c.m_passages.push_back(std::move(p));
            }
        }
        c.finish();
        return c;
    }

    static Corpus from_passages(std::vector<Passage> passages)
    {
        Corpus c;
        c.m_passages = std::move(passages);
        c.finish();
        return c;
    }

    std::size_t size() const { return m_passages.size(); }
    bool empty() const { return m_passages.empty(); }
    const Passage& at(std::size_t ordinal) const { return m_passages.at(ordinal); }
    const std::vector<Passage>& passages() const { return m_passages; }
    const std::vector<std::string>& tokens(std::size_t ordinal) const { return m_tokens.at(ordinal); }

    std::optional<std::size_t> find(const std::string& passage_id) const
    {
        auto it = m_index.find(passage_id);
        if (it == m_index.end()) {
            return std::nullopt;
        }
        return it->second;
    }

  private:
    void finish()
    {
        m_index.reserve(m_passages.size());
        m_tokens.reserve(m_passages.size());
        for (std::size_t i = 0; i < m_passages.size(); ++i) {
            const auto& id = m_passages[i].passage_id;
            if (id.empty()) {
                throw Error(ErrorKind::invalid_argument, "empty passage id at ordinal " + std::to_string(i));
            }
            if (!m_index.emplace(id, i).second) {
                throw Error(ErrorKind::duplicate_id, "duplicate passage id '" + id + "'");
            }
            m_tokens.push_back(tokenize(m_passages[i].text));
        }
    }

    std::vector<Passage> m_passages;
    std::vector<std::vector<std::string>> m_tokens;
    std::unordered_map<std::string, std::size_t> m_index;
};

// ---------------------------------------------------------------------------
// Relevance judgments

class Qrels {
  public:
    /// Throws on a negative grade or a second grade for the same pair.
    void add(const std::string& query_id, const std::string& doc_id, int grade)
    {
        if (grade < 0) {
            throw Error(ErrorKind::invalid_argument, "negative grade for (" + query_id + ", " + doc_id + ")");
        }
        if (!m_judgments[query_id].emplace(doc_id, grade).second) {
            throw Error(ErrorKind::duplicate_id, "duplicate judgment for (" + query_id + ", " + doc_id + ")");
        }
    }

    int grade(const std::string& query_id, const std::string& doc_id) const
    {
        auto q = m_judgments.find(query_id);
        if (q == m_judgments.end()) {
            return 0;
        }
        auto d = q->second.find(doc_id);
        return d == q->second.end() ? 0 : d->second;
    }

    const std::map<std::string, int>& judgments(const std::string& query_id) const
    {
        static const std::map<std::string, int> empty;
        auto q = m_judgments.find(query_id);
        return q == m_judgments.end() ? empty : q->second;
    }

    std::vector<std::string> query_ids() const
    {
        std::vector<std::string> out;
        for (const auto& [q, _] : m_judgments) {
            out.push_back(q);
        }
        return out;
    }

    const std::map<std::string, std::map<std::string, int>>& all() const { return m_judgments; }
    std::size_t size() const
    {
        std::size_t n = 0;
        for (const auto& [_, m] : m_judgments) {
            n += m.size();
        }
        return n;
    }

    bool operator==(const Qrels&) const = default;

  private:
    std::map<std::string, std::map<std::string, int>> m_judgments;
};

// ---------------------------------------------------------------------------
// File formats

enum class CorpusFormat { automatic, jsonl, tsv };

inline CorpusFormat parse_corpus_format(std::string_view s)
{
    if (s == "auto" || s.empty()) {
        return CorpusFormat::automatic;
    }
    if (s == "jsonl") {
        return CorpusFormat::jsonl;
    }
    if (s == "tsv") {
        return CorpusFormat::tsv;
    }
    throw Error(ErrorKind::invalid_argument, "unknown corpus format '" + std::string(s) + "'");
}

namespace detail {

inline std::ifstream open_input(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorKind::io, "cannot open '" + path + "' for reading");
    }
    return in;
}

inline std::ofstream open_output(const std::string& path)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorKind::io, "cannot open '" + path + "' for writing");
    }
    return out;
}

inline bool ends_with(std::string_view s, std::string_view suffix)
{
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

inline void strip_cr(std::string& line)
{
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
}

}  // namespace detail

inline std::vector<Document> load_corpus(const std::string& path, CorpusFormat format = CorpusFormat::automatic)
{
    if (format == CorpusFormat::automatic) {
        format = (detail::ends_with(path, ".tsv") || detail::ends_with(path, ".txt")) ? CorpusFormat::tsv : CorpusFormat::jsonl;
    }
    auto in = detail::open_input(path);
    std::vector<Document> docs;
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        detail::strip_cr(line);
        if (trim(line).empty()) {
            continue;
        }
        Document doc;
        if (format == CorpusFormat::jsonl) {
            nlohmann::json rec;
            try {
                rec = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw parse_error(path, line_no, std::string("invalid JSON: ") + e.what());
            }
            if (!rec.is_object()) {
                throw parse_error(path, line_no, "record is not an object");
            }
            const char* id_key = rec.contains("doc_id") ? "doc_id" : (rec.contains("passage_id") ? "passage_id" : nullptr);
            if (id_key == nullptr || !rec[id_key].is_string()) {
                throw parse_error(path, line_no, "missing string field doc_id or passage_id");
            }
            if (!rec.contains("text") || !rec["text"].is_string()) {
                throw parse_error(path, line_no, "missing string field text");
            }
            doc.doc_id = rec[id_key].get<std::string>();
            doc.text = rec["text"].get<std::string>();
            if (rec.contains("title") && !rec["title"].is_null()) {
                if (!rec["title"].is_string()) {
                    throw parse_error(path, line_no, "title is not a string");
                }
                doc.title = rec["title"].get<std::string>();
            }
        } else {
            const auto tab = line.find('\t');
            if (tab == std::string::npos) {
                throw parse_error(path, line_no, "expected id<TAB>text");
            }
            doc.doc_id = line.substr(0, tab);
            doc.text = line.substr(tab + 1);
        }
        if (doc.doc_id.empty()) {
            throw parse_error(path, line_no, "empty id");
        }
        if (!seen.insert(doc.doc_id).second) {
            throw Error(ErrorKind::duplicate_id, path + ":" + std::to_string(line_no) + ": duplicate id '" + doc.doc_id + "'");
        }
        docs.push_back(std::move(doc));
    }
    return docs;
}

inline void save_corpus_jsonl(const std::vector<Document>& docs, const std::string& path)
{
    auto out = detail::open_output(path);
    for (const auto& d : docs) {
        nlohmann::ordered_json rec;
        rec["doc_id"] = d.doc_id;
        if (d.title) {
            rec["title"] = *d.title;
        }
        rec["text"] = d.text;
        out << rec.dump() << '\n';
    }
}

inline std::vector<Query> load_queries(const std::string& path)
{
    auto in = detail::open_input(path);
    std::vector<Query> queries;
    std::set<std::string> seen;
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
            throw parse_error(path, line_no, "expected query_id<TAB>text");
        }
        Query q{line.substr(0, tab), line.substr(tab + 1)};
        if (!seen.insert(q.query_id).second) {
            throw Error(ErrorKind::duplicate_id, path + ":" + std::to_string(line_no) + ": duplicate query id '" + q.query_id + "'");
        }
        queries.push_back(std::move(q));
    }
    return queries;
}

inline void save_queries(const std::vector<Query>& queries, const std::string& path)
{
    auto out = detail::open_output(path);
    for (const auto& q : queries) {
        out << q.query_id << '\t' << q.text << '\n';
    }
}

inline Qrels load_qrels(const std::string& path)
{
    auto in = detail::open_input(path);
    Qrels qrels;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto fields = split_whitespace(line);
        if (fields.empty()) {
            continue;
        }
        if (fields.size() != 4) {
            throw parse_error(path, line_no, "expected 'query_id iter doc_id grade'");
        }
        const auto grade = parse_int(fields[3]);
        if (!grade) {
            throw parse_error(path, line_no, "grade is not an integer");
        }
        if (*grade < 0) {
            throw parse_error(path, line_no, "negative grade");
        }
        try {
            qrels.add(std::string(fields[0]), std::string(fields[2]), static_cast<int>(*grade));
        } catch (const Error& e) {
            throw Error(e.kind(), path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return qrels;
}

inline void save_qrels(const Qrels& qrels, const std::string& path)
{
    auto out = detail::open_output(path);
    for (const auto& [q, docs] : qrels.all()) {
        for (const auto& [d, g] : docs) {
            out << q << " 0 " << d << ' ' << g << '\n';
        }
    }
}

}  // namespace hybridrank
