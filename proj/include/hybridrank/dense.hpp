#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "common.hpp"
#include "corpus.hpp"

namespace hybridrank {

/// Bucket and sign a feature hashes to in the built-in embedder.
struct HashSlot {
    std::size_t index;
    double sign;

    bool operator==(const HashSlot&) const = default;
};

inline HashSlot hash_slot(std::string_view feature, std::size_t dim, std::uint64_t seed)
{
    const std::uint64_t h = mix64(fnv1a64(feature) ^ mix64(seed ^ 0xD1B54A32D192ED03ULL));
    return HashSlot{static_cast<std::size_t>((h & 0x7FFFFFFFFFFFFFFFULL) % dim), (h >> 63) ? -1.0 : 1.0};
}

/// Key used for an adjacent token pair. 0x1F can never occur inside a token.
inline std::string bigram_key(const std::string& a, const std::string& b)
{
    std::string key;
    key.reserve(a.size() + b.size() + 1);
    key += a;
    key.push_back('\x1f');
    key += b;
    return key;
}

/// Signed feature hashing over unigrams and adjacent bigrams, L2-normalized.
inline std::vector<double> hash_embed(std::string_view text, std::size_t dim = 256, std::uint64_t seed = 42)
{
    if (dim < 8) {
        throw Error(ErrorKind::invalid_argument, "hash_embed: dim must be >= 8");
    }
    const auto tokens = tokenize(text);
    std::vector<double> v(dim, 0.0);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto u = hash_slot(tokens[i], dim, seed);
        v[u.index] += u.sign;
        if (i + 1 < tokens.size()) {
            const auto b = hash_slot(bigram_key(tokens[i], tokens[i + 1]), dim, seed);
            v[b.index] += b.sign;
        }
    }
    double norm2 = 0.0;
    for (double x : v) {
        norm2 += x * x;
    }
    if (norm2 == 0.0) {
        throw Error(ErrorKind::invalid_argument, "unembeddable empty text");
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& x : v) {
        x *= inv;
    }
    return v;
}

struct HashEmbedder {
    std::size_t dim = 256;
    std::uint64_t seed = 42;

    std::vector<double> operator()(std::string_view text) const { return hash_embed(text, dim, seed); }
};

inline double dot(std::span<const double> a, std::span<const double> b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

/// Exact (exhaustive) store of unit vectors keyed by passage id.
class VectorStore {
  public:
    explicit VectorStore(std::size_t dim = 0) : m_dim(dim) {}

    std::size_t dim() const { return m_dim; }
    std::size_t size() const { return m_ids.size(); }
    const std::string& id(std::size_t ordinal) const { return m_ids.at(ordinal); }
    const std::vector<std::string>& ids() const { return m_ids; }

    std::span<const double> vector(std::size_t ordinal) const
    {
        return std::span<const double>(m_data).subspan(ordinal * m_dim, m_dim);
    }

    std::optional<std::size_t> ordinal_of(const std::string& id) const
    {
        auto it = m_ordinals.find(id);
        return it == m_ordinals.end() ? std::nullopt : std::optional<std::size_t>(it->second);
    }

    /// Appends a vector, normalizing it to unit length.
    void add(const std::string& id, std::span<const double> v)
    {
        if (v.size() != m_dim) {
            throw Error(ErrorKind::dimension_mismatch,
                        "vector for '" + id + "' has dimension " + std::to_string(v.size()) + ", expected " + std::to_string(m_dim));
        }
        double norm2 = 0.0;
        for (double x : v) {
            if (!std::isfinite(x)) {
                throw Error(ErrorKind::numeric, "non-finite component in vector for '" + id + "'");
            }
            norm2 += x * x;
        }
        if (norm2 == 0.0) {
            throw Error(ErrorKind::invalid_argument, "zero vector for '" + id + "'");
        }
        if (!m_ordinals.emplace(id, m_ids.size()).second) {
            throw Error(ErrorKind::duplicate_id, "duplicate vector id '" + id + "'");
        }
        const double inv = 1.0 / std::sqrt(norm2);
        m_ids.push_back(id);
        for (double x : v) {
            m_data.push_back(x * inv);
        }
    }

    /// `#dim=<d>` header, then `id<TAB>v1,...,vd` at full precision.
    void save(const std::string& path) const
    {
        auto out = detail::open_output(path);
        out << "#dim=" << m_dim << '\n';
        for (std::size_t i = 0; i < m_ids.size(); ++i) {
            if (m_ids[i].find_first_of("\t\n\r") != std::string::npos) {
                throw Error(ErrorKind::invalid_argument, "id '" + m_ids[i] + "' cannot be persisted");
            }
            out << m_ids[i] << '\t';
            const auto v = vector(i);
            for (std::size_t d = 0; d < m_dim; ++d) {
                if (d > 0) {
                    out << ',';
                }
                out << format_real(v[d]);
            }
            out << '\n';
        }
        if (!out) {
            throw Error(ErrorKind::io, "write to '" + path + "' failed");
        }
    }

    static VectorStore load(const std::string& path)
    {
        auto in = detail::open_input(path);
        std::optional<std::size_t> dim;
        VectorStore store;
        std::string line;
        std::size_t line_no = 0;
        std::vector<double> v;
        while (std::getline(in, line)) {
            ++line_no;
            detail::strip_cr(line);
            if (trim(line).empty()) {
                continue;
            }
            if (line.rfind("#dim=", 0) == 0) {
                const auto d = parse_int(std::string_view(line).substr(5));
                if (!d || *d < 1) {
                    throw parse_error(path, line_no, "bad #dim header");
                }
                if (!store.m_ids.empty()) {
                    throw parse_error(path, line_no, "#dim header after vectors");
                }
                dim = static_cast<std::size_t>(*d);
                continue;
            }
            const auto tab = line.find('\t');
            if (tab == std::string::npos || tab == 0) {
                throw parse_error(path, line_no, "expected id<TAB>v1,...,vd");
            }
            const std::string id = line.substr(0, tab);
            v.clear();
            std::string_view rest = std::string_view(line).substr(tab + 1);
            while (true) {
                const auto comma = rest.find(',');
                const auto x = parse_real(trim(rest.substr(0, comma)));
                if (!x) {
                    throw parse_error(path, line_no, "bad component in vector for '" + id + "'");
                }
                v.push_back(*x);
                if (comma == std::string_view::npos) {
                    break;
                }
                rest = rest.substr(comma + 1);
            }
            if (!dim) {
                dim = v.size();
            }
            if (store.m_dim == 0) {
                store.m_dim = *dim;
            }
            if (v.size() != *dim) {
                throw Error(ErrorKind::dimension_mismatch, path + ":" + std::to_string(line_no) + ": vector for '" + id +
                                                               "' has dimension " + std::to_string(v.size()) + ", expected " +
                                                               std::to_string(*dim));
            }
            store.add(id, v);
        }
        if (store.m_dim == 0 && dim) {
            store.m_dim = *dim;
        }
        return store;
    }

    bool operator==(const VectorStore& o) const { return m_dim == o.m_dim && m_ids == o.m_ids && m_data == o.m_data; }

  private:
    std::size_t m_dim;
    std::vector<std::string> m_ids;
    std::vector<double> m_data;
    std::unordered_map<std::string, std::size_t> m_ordinals;
};

using Embedder = std::function<std::vector<double>(std::string_view)>;

/// One vector per passage, in corpus order. Embedding runs in parallel.
inline VectorStore build_vector_store(const Corpus& corpus, const Embedder& embed, std::size_t dim, unsigned threads = 1)
{
    std::vector<std::vector<double>> vecs(corpus.size());
    parallel_for(corpus.size(), threads, [&](std::size_t i) {
        try {
            vecs[i] = embed(corpus.at(i).text);
        } catch (const Error& e) {
            throw Error(e.kind(), "passage '" + corpus.at(i).passage_id + "': " + e.what());
        }
    });
    VectorStore store(dim);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        store.add(corpus.at(i).passage_id, vecs[i]);
    }
    return store;
}

inline VectorStore build_vector_store(const Corpus& corpus, const HashEmbedder& embedder, unsigned threads = 1)
{
    return build_vector_store(corpus, Embedder(embedder), embedder.dim, threads);
}

inline VectorStore load_vectors(const std::string& path) { return VectorStore::load(path); }

/// Loads vectors and checks every id against the corpus.
inline VectorStore load_vectors(const std::string& path, const Corpus& corpus)
{
    auto store = VectorStore::load(path);
    for (const auto& id : store.ids()) {
        if (!corpus.find(id)) {
            throw Error(ErrorKind::unknown_id, path + ": vector for unknown passage '" + id + "'");
        }
    }
    return store;
}

/// Exhaustive inner-product top-k.
inline CandidateList retrieve_dense(const VectorStore& store, std::span<const double> query_vector, std::size_t k)
{
    if (k < 1) {
        throw Error(ErrorKind::invalid_argument, "retrieve_dense: k must be >= 1");
    }
    if (query_vector.size() != store.dim()) {
        throw Error(ErrorKind::dimension_mismatch, "query vector has dimension " + std::to_string(query_vector.size()) +
                                                       ", store has " + std::to_string(store.dim()));
    }
    std::vector<std::pair<double, std::uint32_t>> scored(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
        scored[i] = {dot(store.vector(i), query_vector), static_cast<std::uint32_t>(i)};
    }
    std::vector<double> scores(store.size());
    for (const auto& [s, o] : scored) {
        scores[o] = s;
    }
    const auto order = top_k_ordinals(std::move(scored), k, [&](std::uint32_t o) -> const std::string& { return store.id(o); });
    CandidateList out;
    out.reserve(order.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
        out.push_back(Candidate{store.id(order[r]), scores[order[r]], static_cast<int>(r + 1), "dense", std::nullopt, std::nullopt});
    }
    return out;
}

}  // namespace hybridrank
