#pragma once

#include <filesystem>
#include <string>
#include <unordered_set>
#include <vector>

#include "common.hpp"
#include "corpus.hpp"
#include "dense.hpp"

namespace hybridrank {

struct SyntheticConfig {
    std::size_t n_docs = 1000;
    std::size_t n_queries = 20;
    /// Size of the filler vocabulary.
    std::size_t vocab = 5000;
    std::uint64_t seed = 42;
    /// Share of each query's relevant passages that contain the query terms.
    double lexical_fraction = 0.5;
    std::size_t relevant_per_query = 10;
    std::size_t query_length = 4;
    std::size_t doc_length = 40;
    /// Built-in embedder the paraphrase construction targets.
    std::size_t embed_dim = 256;
    std::uint64_t embed_seed = 42;

    void validate() const
    {
        if (n_docs == 0 || n_queries == 0 || vocab == 0 || relevant_per_query == 0 || query_length == 0 || doc_length == 0) {
            throw Error(ErrorKind::invalid_argument, "synthetic: sizes must be positive");
        }
        if (!(lexical_fraction >= 0.0 && lexical_fraction <= 1.0)) {
            throw Error(ErrorKind::invalid_argument, "synthetic: lexical_fraction must lie in [0, 1]");
        }
        if (n_queries * relevant_per_query > n_docs) {
            throw Error(ErrorKind::invalid_argument, "synthetic: n_docs must be at least n_queries * relevant_per_query");
        }
        if (embed_dim < 8) {
            throw Error(ErrorKind::invalid_argument, "synthetic: embed_dim must be >= 8");
        }
    }
};

struct SyntheticData {
    std::vector<Document> docs;
    std::vector<Query> queries;
    Qrels qrels;
};

namespace detail {

class WordMaker {
  public:
    explicit WordMaker(Rng& rng) : m_rng(rng) {}

    std::string fresh(std::size_t min_syl, std::size_t max_syl)
    {
        for (;;) {
            auto w = raw(min_syl, max_syl);
            if (m_used.insert(w).second) {
                return w;
            }
        }
    }

    /// A fresh word landing in `slot` of the hash embedder, with the given sign.
    std::string colliding(const HashSlot& slot, std::size_t dim, std::uint64_t seed)
    {
        for (;;) {
            auto w = raw(3, 4);
            if (hash_slot(w, dim, seed) == slot && m_used.insert(w).second) {
                return w;
            }
        }
    }

  private:
    std::string raw(std::size_t min_syl, std::size_t max_syl)
    {
        static constexpr const char* consonants = "bcdfghjklmnprstvz";
        static constexpr const char* vowels = "aeiou";
        const std::size_t n = min_syl + m_rng.below(max_syl - min_syl + 1);
        std::string w;
        for (std::size_t i = 0; i < n; ++i) {
            w.push_back(consonants[m_rng.below(17)]);
            w.push_back(vowels[m_rng.below(5)]);
        }
        return w;
    }

    Rng& m_rng;
    std::unordered_set<std::string> m_used;
};

}  // namespace detail

/// Seeded corpus with planted relevance. Every query gets `relevant_per_query`
/// relevant passages (grade 2):
///  - lexical ones contain each query term once, each followed by a partner
///    token that hashes to the same embedding bucket with the opposite sign, so
///    BM25 finds them while their unigram embedding mass cancels;
///  - paraphrase ones contain, twice, a synonym of each query term that hashes
///    to the same bucket and sign, so the built-in embedder finds them while
///    they share no token with the query.
/// Half of the remaining passages carry one term of some query (with its
/// partner) as lexical distractors; judged non-relevant samples get grade 0.
inline SyntheticData generate_synthetic(const SyntheticConfig& cfg)
{
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, "synthetic"));
    detail::WordMaker words(rng);

    std::vector<std::string> filler;
    filler.reserve(cfg.vocab);
    for (std::size_t i = 0; i < cfg.vocab; ++i) {
        filler.push_back(words.fresh(2, 3));
    }

    struct Term {
        std::string word, synonym, partner;
    };
    std::vector<std::vector<Term>> query_terms(cfg.n_queries);
    SyntheticData data;
    for (std::size_t q = 0; q < cfg.n_queries; ++q) {
        std::vector<std::string> text;
        for (std::size_t t = 0; t < cfg.query_length; ++t) {
            Term term;
            term.word = words.fresh(4, 5);
            const auto slot = hash_slot(term.word, cfg.embed_dim, cfg.embed_seed);
            term.synonym = words.colliding(slot, cfg.embed_dim, cfg.embed_seed);
            term.partner = words.colliding(HashSlot{slot.index, -slot.sign}, cfg.embed_dim, cfg.embed_seed);
            text.push_back(term.word);
            query_terms[q].push_back(std::move(term));
        }
        char qid[32];
        std::snprintf(qid, sizeof(qid), "q%03zu", q);
        data.queries.push_back(Query{qid, join_tokens(text)});
    }

    auto filler_tokens = [&] {
        std::vector<std::string> toks;
        for (std::size_t i = 0; i < cfg.doc_length; ++i) {
            toks.push_back(filler[rng.below(filler.size())]);
        }
        return toks;
    };
    auto insert_at_random = [&](std::vector<std::string>& toks, std::vector<std::string> piece) {
        const auto pos = static_cast<std::ptrdiff_t>(rng.below(toks.size() + 1));
        toks.insert(toks.begin() + pos, piece.begin(), piece.end());
    };

    // Doc slots are shuffled so planted passages are spread over the id space.
    std::vector<std::size_t> slots(cfg.n_docs);
    for (std::size_t i = 0; i < slots.size(); ++i) {
        slots[i] = i;
    }
    rng.shuffle(slots);
    std::vector<std::vector<std::string>> bodies(cfg.n_docs);
    std::vector<std::pair<std::size_t, std::size_t>> relevant;  // (query, slot)
    std::size_t next = 0;
    const auto n_lexical = static_cast<std::size_t>(std::llround(cfg.lexical_fraction * static_cast<double>(cfg.relevant_per_query)));
    for (std::size_t q = 0; q < cfg.n_queries; ++q) {
        for (std::size_t r = 0; r < cfg.relevant_per_query; ++r) {
            const std::size_t slot = slots[next++];
            auto toks = filler_tokens();
            for (const auto& term : query_terms[q]) {
                if (r < n_lexical) {
                    insert_at_random(toks, {term.word, term.partner});
                } else {
                    insert_at_random(toks, {term.synonym});
                    insert_at_random(toks, {term.synonym});
                }
            }
            bodies[slot] = std::move(toks);
            relevant.emplace_back(q, slot);
        }
    }
    std::vector<std::vector<std::size_t>> distractors(cfg.n_queries);
    for (std::size_t i = 0; next < cfg.n_docs; ++i) {
        const std::size_t slot = slots[next++];
        auto toks = filler_tokens();
        if (i % 2 == 0) {
            const std::size_t q = (i / 2) % cfg.n_queries;
            const auto& term = query_terms[q][rng.below(cfg.query_length)];
            insert_at_random(toks, {term.word, term.partner});
            distractors[q].push_back(slot);
        }
        bodies[slot] = std::move(toks);
    }

    auto doc_id = [](std::size_t slot) {
        char id[32];
        std::snprintf(id, sizeof(id), "d%05zu", slot);
        return std::string(id);
    };
    for (std::size_t slot = 0; slot < cfg.n_docs; ++slot) {
        data.docs.push_back(Document{doc_id(slot), join_tokens(bodies[slot]), std::nullopt});
    }
    for (const auto& [q, slot] : relevant) {
        data.qrels.add(data.queries[q].query_id, doc_id(slot), 2);
    }
    for (std::size_t q = 0; q < cfg.n_queries; ++q) {
        for (std::size_t i = 0; i < std::min<std::size_t>(5, distractors[q].size()); ++i) {
            data.qrels.add(data.queries[q].query_id, doc_id(distractors[q][i]), 0);
        }
    }
    return data;
}

inline void save_synthetic(const SyntheticData& data, const std::string& dir)
{
    std::filesystem::create_directories(dir);
    save_corpus_jsonl(data.docs, dir + "/corpus.jsonl");
    save_queries(data.queries, dir + "/queries.tsv");
    save_qrels(data.qrels, dir + "/qrels.txt");
}

}  // namespace hybridrank
