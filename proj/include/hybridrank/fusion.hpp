#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "common.hpp"

namespace hybridrank {

enum class Normalization { minmax, zscore, none };

inline Normalization parse_normalization(std::string_view s)
{
    if (s == "minmax") {
        return Normalization::minmax;
    }
    if (s == "zscore") {
        return Normalization::zscore;
    }
    if (s == "none") {
        return Normalization::none;
    }
    throw Error(ErrorKind::invalid_argument, "unknown normalization '" + std::string(s) + "'");
}

inline const char* to_string(Normalization n)
{
    switch (n) {
    case Normalization::minmax: return "minmax";
    case Normalization::zscore: return "zscore";
    case Normalization::none: return "none";
    }
    return "none";
}

/// Per-list score normalization of a plain score vector.
/// minmax: constant input maps to all 1.0. zscore: population stdev; constant
/// input maps to all 0.0.
inline std::vector<double> normalize_values(const std::vector<double>& scores, Normalization method)
{
    if (scores.empty()) {
        throw Error(ErrorKind::invalid_argument, "normalize_scores: empty list");
    }
    std::vector<double> out(scores);
    switch (method) {
    case Normalization::none:
        break;
    case Normalization::minmax: {
        const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
        const double range = *hi - *lo;
        for (double& s : out) {
            s = range > 0.0 ? (s - *lo) / range : 1.0;
        }
        break;
    }
    case Normalization::zscore: {
        double mean = 0.0;
        for (double s : scores) {
            mean += s;
        }
        mean /= static_cast<double>(scores.size());
        double var = 0.0;
        for (double s : scores) {
            var += (s - mean) * (s - mean);
        }
        const double sd = std::sqrt(var / static_cast<double>(scores.size()));
        for (double& s : out) {
            s = sd > 0.0 ? (s - mean) / sd : 0.0;
        }
        break;
    }
    }
    return out;
}

/// Rewrites retrieval_score; order and ranks are untouched.
inline CandidateList normalize_scores(CandidateList list, Normalization method)
{
    std::vector<double> s;
    s.reserve(list.size());
    for (const auto& c : list) {
        s.push_back(c.retrieval_score);
    }
    const auto n = normalize_values(s, method);
    for (std::size_t i = 0; i < list.size(); ++i) {
        list[i].retrieval_score = n[i];
    }
    return list;
}

inline void validate_weights(const std::vector<double>& weights, std::size_t n_sources, const char* who)
{
    if (n_sources == 0 || weights.size() != n_sources) {
        throw Error(ErrorKind::invalid_argument, std::string(who) + ": need one weight per source and at least one source");
    }
    bool any = false;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) {
            throw Error(ErrorKind::invalid_argument, std::string(who) + ": weights must be finite and >= 0");
        }
        any = any || w > 0.0;
    }
    if (!any) {
        throw Error(ErrorKind::invalid_argument, std::string(who) + ": weights must not all be zero");
    }
}

namespace detail {

/// Sum of contributions in a canonical order, so the result does not depend on
/// the order sources were given in.
inline double canonical_sum(std::vector<double>& parts)
{
    std::sort(parts.begin(), parts.end());
    double s = 0.0;
    for (double p : parts) {
        s += p;
    }
    return s;
}

}  // namespace detail

/// Linear combination of already-normalized lists; a passage missing from a
/// list contributes 0 for it. Lists with weight 0 contribute no candidates.
/// Output is top-k under the global tie rule.
inline CandidateList weighted_fuse(const std::vector<CandidateList>& lists, const std::vector<double>& weights, std::size_t k)
{
    validate_weights(weights, lists.size(), "weighted_fuse");
    if (k < 1) {
        throw Error(ErrorKind::invalid_argument, "weighted_fuse: k must be >= 1");
    }
    std::unordered_map<std::string, std::vector<double>> parts;
    for (std::size_t i = 0; i < lists.size(); ++i) {
        if (weights[i] == 0.0) {
            continue;
        }
        for (const auto& c : lists[i]) {
            auto& p = parts[c.passage_id];
            p.push_back(weights[i] * c.retrieval_score);
        }
    }
    CandidateList out;
    out.reserve(parts.size());
    for (auto& [id, p] : parts) {
        out.push_back(Candidate{id, detail::canonical_sum(p), 1, "fused", std::nullopt, std::nullopt});
    }
    finalize_ranking(out, k);
    return out;
}

/// One named input of a fusion: where its run comes from, its weight and how
/// it is normalized before weighting.
struct FusionSource {
    std::string source;
    double weight = 1.0;
    Normalization normalization = Normalization::minmax;
};

/// Normalizes each non-empty list with its own method, then fuses.
inline CandidateList normalize_and_fuse(const std::vector<CandidateList>& lists, const std::vector<FusionSource>& sources, std::size_t k)
{
    if (lists.size() != sources.size()) {
        throw Error(ErrorKind::invalid_argument, "normalize_and_fuse: one source spec per list required");
    }
    std::vector<CandidateList> normalized;
    std::vector<double> weights;
    for (std::size_t i = 0; i < lists.size(); ++i) {
        normalized.push_back(lists[i].empty() ? lists[i] : normalize_scores(lists[i], sources[i].normalization));
        weights.push_back(sources[i].weight);
    }
    return weighted_fuse(normalized, weights, k);
}

}  // namespace hybridrank
