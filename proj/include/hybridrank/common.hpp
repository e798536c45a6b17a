#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <iostream>
#include <limits>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

namespace hybridrank {

enum class ErrorKind {
    invalid_argument,
    parse,
    duplicate_id,
    unknown_id,
    dimension_mismatch,
    io,
    numeric,
    missing_artifact,
};

inline const char* to_string(ErrorKind kind)
{
    switch (kind) {
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::parse: return "parse";
    case ErrorKind::duplicate_id: return "duplicate_id";
    case ErrorKind::unknown_id: return "unknown_id";
    case ErrorKind::dimension_mismatch: return "dimension_mismatch";
    case ErrorKind::io: return "io";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::missing_artifact: return "missing_artifact";
    }
    return "unknown";
}

/// Every failure raised by the library. `kind()` is stable and is what the CLI
/// prints in its machine-readable error line.
class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& message) : std::runtime_error(message), m_kind(kind) {}

    ErrorKind kind() const noexcept { return m_kind; }

  private:
    ErrorKind m_kind;
};

inline Error parse_error(const std::string& where, std::size_t line, const std::string& what)
{
    return Error(ErrorKind::parse, where + ":" + std::to_string(line) + ": " + what);
}

// ---------------------------------------------------------------------------
// Logging

enum class LogLevel { quiet = 0, warn = 1, info = 2 };

namespace detail {
inline LogLevel& log_level()
{
    static LogLevel level = LogLevel::warn;
    return level;
}
inline std::mutex& log_mutex()
{
    static std::mutex m;
    return m;
}
}  // namespace detail

inline void set_log_level(LogLevel level) { detail::log_level() = level; }

inline void log_info(const std::string& msg)
{
    if (detail::log_level() < LogLevel::info) {
        return;
    }
    std::lock_guard lock(detail::log_mutex());
    std::cerr << "[info] " << msg << '\n';
}

inline void log_warn(const std::string& msg)
{
    if (detail::log_level() < LogLevel::warn) {
        return;
    }
    std::lock_guard lock(detail::log_mutex());
    std::cerr << "[warn] " << msg << '\n';
}

// ---------------------------------------------------------------------------
// Random numbers
//
// The standard distributions are implementation-defined. Everything seeded in
// this library goes through Rng (splitmix64 plus its own distributions) so
// generated data and trained parameters are identical across standard libraries.

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : m_state(seed) {}

    std::uint64_t next_u64()
    {
        // splitmix64
        std::uint64_t z = (m_state += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n)
    {
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller.
    double normal()
    {
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v)
    {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

  private:
    std::uint64_t m_state;
};

/// Stable 64-bit FNV-1a, used wherever a seeded hash of a string is needed.
inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t basis = 0xcbf29ce484222325ULL)
{
    std::uint64_t h = basis;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t mix64(std::uint64_t z)
{
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Seed for a named sub-stream, so per-query randomness does not depend on
/// which other queries exist.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name)
{
    return mix64(fnv1a64(name) ^ mix64(seed + 0x9E3779B97F4A7C15ULL));
}

// ---------------------------------------------------------------------------
// Candidates

struct Candidate {
    std::string passage_id;
    double retrieval_score = 0.0;
    int retrieval_rank = 1;
    std::string source_tag;
    std::optional<double> ranking_score;
    std::optional<double> hlatr_score;
};

using CandidateList = std::vector<Candidate>;

/// The global ordering rule: score descending, ties by id ascending.
inline bool score_then_id(double sa, const std::string& ia, double sb, const std::string& ib)
{
    if (sa != sb) {
        return sa > sb;
    }
    return ia < ib;
}

/// Sorts by retrieval_score under the global tie rule, truncates to k and
/// assigns consecutive 1-based ranks.
inline void finalize_ranking(CandidateList& list, std::size_t k)
{
    std::sort(list.begin(), list.end(), [](const Candidate& a, const Candidate& b) {
        return score_then_id(a.retrieval_score, a.passage_id, b.retrieval_score, b.passage_id);
    });
    if (list.size() > k) {
        list.resize(k);
    }
    for (std::size_t i = 0; i < list.size(); ++i) {
        list[i].retrieval_rank = static_cast<int>(i + 1);
    }
}

/// Bounded top-k selection over (score, ordinal) pairs followed by the tie rule
/// on external ids. Returns ordinals in final order.
template <typename IdLookup>
std::vector<std::uint32_t> top_k_ordinals(std::vector<std::pair<double, std::uint32_t>> scored, std::size_t k, IdLookup&& id_of)
{
    auto better = [&](const std::pair<double, std::uint32_t>& a, const std::pair<double, std::uint32_t>& b) {
        return score_then_id(a.first, id_of(a.second), b.first, id_of(b.second));
    };
    if (scored.size() > k) {
        std::nth_element(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(), better);
        scored.resize(k);
    }
    std::sort(scored.begin(), scored.end(), better);
    std::vector<std::uint32_t> out;
    out.reserve(scored.size());
    for (auto& [s, o] : scored) {
        out.push_back(o);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Threading

/// Static-partition parallel loop. Each index is visited exactly once, so
/// results written to per-index slots are independent of the thread count.
template <typename F>
void parallel_for(std::size_t n, unsigned threads, F&& body)
{
    if (threads <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) {
            body(i);
        }
        return;
    }
    const std::size_t workers = std::min<std::size_t>(threads, n);
    std::vector<std::exception_ptr> errors(workers);
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < n; i += workers) {
                        body(i);
                    }
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

// ---------------------------------------------------------------------------
// Small string helpers

inline std::string format_real(double v, int precision = 17)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
    return buf;
}

inline std::string_view trim(std::string_view s)
{
    const char* ws = " \t\r\n\f\v";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split_whitespace(std::string_view s)
{
    std::vector<std::string_view> out;
    std::size_t i = 0;
    auto is_ws = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v'; };
    while (i < s.size()) {
        while (i < s.size() && is_ws(s[i])) {
            ++i;
        }
        std::size_t j = i;
        while (j < s.size() && !is_ws(s[j])) {
            ++j;
        }
        if (j > i) {
            out.push_back(s.substr(i, j - i));
        }
        i = j;
    }
    return out;
}

inline std::optional<double> parse_real(std::string_view s)
{
    std::string tmp(s);
    if (tmp.empty()) {
        return std::nullopt;
    }
    char* end = nullptr;
    const double v = std::strtod(tmp.c_str(), &end);
    if (end != tmp.c_str() + tmp.size()) {
        return std::nullopt;
    }
    return v;
}

inline std::optional<long long> parse_int(std::string_view s)
{
    std::string tmp(s);
    if (tmp.empty()) {
        return std::nullopt;
    }
    char* end = nullptr;
    const long long v = std::strtoll(tmp.c_str(), &end, 10);
    if (end != tmp.c_str() + tmp.size()) {
        return std::nullopt;
    }
    return v;
}

}  // namespace hybridrank
