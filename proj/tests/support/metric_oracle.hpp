#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "hybridrank/eval.hpp"

namespace hybridrank::testing {

/// Direct-definition metrics over plain containers, written without any
/// library helpers. `ranking` is the ordered doc list, `grades` the judged
/// grades of one query.
struct OracleQuery {
    std::vector<std::string> ranking;
    std::map<std::string, int> grades;

    int grade(const std::string& d) const
    {
        auto it = grades.find(d);
        return it == grades.end() ? 0 : it->second;
    }
    std::size_t relevant(int t) const
    {
        std::size_t n = 0;
        for (const auto& [_, g] : grades) {
            if (g >= t) {
                ++n;
            }
        }
        return n;
    }
};

inline double oracle_ndcg(const OracleQuery& q, std::size_t k)
{
    double dcg = 0;
    for (std::size_t i = 0; i < q.ranking.size() && i < k; ++i) {
        dcg += q.grade(q.ranking[i]) / (std::log(static_cast<double>(i + 2)) / std::log(2.0));
    }
    std::vector<int> ideal;
    for (const auto& [_, g] : q.grades) {
        ideal.push_back(g);
    }
    std::sort(ideal.rbegin(), ideal.rend());
    double idcg = 0;
    for (std::size_t i = 0; i < ideal.size() && i < k; ++i) {
        idcg += ideal[i] / (std::log(static_cast<double>(i + 2)) / std::log(2.0));
    }
    return dcg / idcg;
}

inline double oracle_ap(const OracleQuery& q, int t)
{
    // Precision at the rank of every relevant doc; unretrieved ones add 0.
    double total = 0;
    for (std::size_t i = 0; i < q.ranking.size(); ++i) {
        if (q.grade(q.ranking[i]) < t) {
            continue;
        }
        std::size_t rel_upto = 0;
        for (std::size_t j = 0; j <= i; ++j) {
            rel_upto += q.grade(q.ranking[j]) >= t;
        }
        total += static_cast<double>(rel_upto) / static_cast<double>(i + 1);
    }
    return total / static_cast<double>(q.relevant(t));
}

inline double oracle_recall(const OracleQuery& q, std::size_t k, int t)
{
    std::size_t hit = 0;
    for (std::size_t i = 0; i < q.ranking.size() && i < k; ++i) {
        hit += q.grade(q.ranking[i]) >= t;
    }
    return static_cast<double>(hit) / static_cast<double>(q.relevant(t));
}

inline double oracle_mrr(const OracleQuery& q, std::size_t k, int t)
{
    for (std::size_t i = 0; i < q.ranking.size() && i < k; ++i) {
        if (q.grade(q.ranking[i]) >= t) {
            return 1.0 / static_cast<double>(i + 1);
        }
    }
    return 0.0;
}

/// Random run plus qrels: up to `max_q` queries, up to `max_d` docs each,
/// grades 0..3. Returns the library structures and the oracle view.
struct RandomEvalInstance {
    Run run;
    Qrels qrels;
    std::map<std::string, OracleQuery> oracle;
};

inline RandomEvalInstance random_eval_instance(Rng& rng, std::size_t max_q = 5, std::size_t max_d = 20)
{
    RandomEvalInstance inst;
    const auto nq = 1 + rng.below(max_q);
    for (std::uint64_t qi = 0; qi < nq; ++qi) {
        const std::string q = "q" + std::to_string(qi);
        const auto nd = 1 + rng.below(max_d);
        std::vector<std::pair<double, std::string>> scored;
        for (std::uint64_t di = 0; di < nd; ++di) {
            scored.emplace_back(std::round(rng.uniform() * 50.0), "d" + std::to_string(di));
        }
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
        auto& oq = inst.oracle[q];
        for (std::size_t r = 0; r < scored.size(); ++r) {
            inst.run.push_back(RunEntry{q, scored[r].second, static_cast<int>(r + 1), scored[r].first, "t"});
            oq.ranking.push_back(scored[r].second);
        }
        // Judge a random subset of docs, some outside the run.
        for (std::uint64_t di = 0; di < max_d + 5; ++di) {
            if (rng.below(3) == 0) {
                const int g = static_cast<int>(rng.below(4));
                const std::string d = "d" + std::to_string(di);
                inst.qrels.add(q, d, g);
                oq.grades[d] = g;
            }
        }
    }
    return inst;
}

}  // namespace hybridrank::testing
