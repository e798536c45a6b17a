#include <algorithm>
#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "hybridrank/fusion.hpp"
#include "test_support.hpp"

using namespace hybridrank;

namespace {

CandidateList list_of(const std::vector<std::pair<std::string, double>>& items)
{
    CandidateList l;
    for (const auto& [id, s] : items) {
        l.push_back(Candidate{id, s, static_cast<int>(l.size() + 1), "t", std::nullopt, std::nullopt});
    }
    return l;
}

std::vector<std::string> ids_of(const CandidateList& l)
{
    std::vector<std::string> out;
    for (const auto& c : l) {
        out.push_back(c.passage_id);
    }
    return out;
}

CandidateList random_list(Rng& rng, std::size_t max_len)
{
    std::map<std::string, double> items;
    const auto n = 1 + rng.below(max_len);
    for (std::uint64_t i = 0; i < n; ++i) {
        items["p" + std::to_string(rng.below(30))] = std::round(rng.uniform() * 8.0) / 8.0;
    }
    CandidateList l;
    for (const auto& [id, s] : items) {
        l.push_back(Candidate{id, s, 1, "r", std::nullopt, std::nullopt});
    }
    finalize_ranking(l, l.size());
    return l;
}

/// Straight from the definition: sum of w_i * s_i(p) with absent -> 0, sorted
/// by (score desc, id asc).
std::vector<std::pair<std::string, double>> oracle_fuse(const std::vector<CandidateList>& lists, const std::vector<double>& w, std::size_t k)
{
    std::map<std::string, double> acc;
    for (std::size_t i = 0; i < lists.size(); ++i) {
        if (w[i] == 0.0) {
            continue;
        }
        for (const auto& c : lists[i]) {
            acc[c.passage_id] += w[i] * c.retrieval_score;
        }
    }
    std::vector<std::pair<std::string, double>> v(acc.begin(), acc.end());
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second != b.second ? a.second > b.second : a.first < b.first; });
    v.resize(std::min(v.size(), k));
    return v;
}

}  // namespace

TEST(Normalize, MinMax)
{
    EXPECT_EQ(normalize_values({4, 2, 0}, Normalization::minmax), (std::vector<double>{1.0, 0.5, 0.0}));
    EXPECT_EQ(normalize_values({3, 3}, Normalization::minmax), (std::vector<double>{1.0, 1.0}));
}

TEST(Normalize, ZScore)
{
    const auto z = normalize_values({1, 2, 3}, Normalization::zscore);
    EXPECT_NEAR(z[0], -std::sqrt(1.5), 1e-12);
    EXPECT_NEAR(z[1], 0.0, 1e-15);
    EXPECT_NEAR(z[2], std::sqrt(1.5), 1e-12);
    EXPECT_NEAR(z[2], 1.2247, 1e-4);
    EXPECT_EQ(normalize_values({5, 5, 5}, Normalization::zscore), (std::vector<double>{0, 0, 0}));
}

TEST(Normalize, NoneAndErrors)
{
    EXPECT_EQ(normalize_values({7, -1}, Normalization::none), (std::vector<double>{7, -1}));
    EXPECT_THROW(normalize_values({}, Normalization::minmax), Error);
    EXPECT_THROW(normalize_scores({}, Normalization::zscore), Error);
    EXPECT_THROW(parse_normalization("softmax"), Error);
    EXPECT_EQ(parse_normalization("zscore"), Normalization::zscore);
}

TEST(Normalize, MonotoneOnRandomLists)
{
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const auto l = random_list(rng, 15);
        for (auto m : {Normalization::minmax, Normalization::zscore, Normalization::none}) {
            const auto n = normalize_scores(l, m);
            EXPECT_EQ(ids_of(n), ids_of(l));
            for (std::size_t i = 1; i < n.size(); ++i) {
                EXPECT_GE(n[i - 1].retrieval_score, n[i].retrieval_score);
                EXPECT_EQ(n[i].retrieval_rank, l[i].retrieval_rank);
            }
        }
        const auto mm = normalize_scores(l, Normalization::minmax);
        for (const auto& c : mm) {
            EXPECT_GE(c.retrieval_score, 0.0);
            EXPECT_LE(c.retrieval_score, 1.0);
        }
    }
}

TEST(WeightedFuse, HandExample)
{
    const auto a = list_of({{"d1", 1.0}, {"d2", 0.5}});
    const auto b = list_of({{"d2", 1.0}, {"d3", 0.5}});
    const auto f = weighted_fuse({a, b}, {0.5, 0.5}, 10);
    ASSERT_EQ(f.size(), 3u);
    EXPECT_EQ(ids_of(f), (std::vector<std::string>{"d2", "d1", "d3"}));
    EXPECT_DOUBLE_EQ(f[0].retrieval_score, 0.75);
    EXPECT_DOUBLE_EQ(f[1].retrieval_score, 0.5);
    EXPECT_DOUBLE_EQ(f[2].retrieval_score, 0.25);
    for (std::size_t i = 0; i < f.size(); ++i) {
        EXPECT_EQ(f[i].retrieval_rank, static_cast<int>(i + 1));
        EXPECT_EQ(f[i].source_tag, "fused");
    }
}

TEST(WeightedFuse, DegenerateWeightsKeepFirstList)
{
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const auto a = normalize_scores(random_list(rng, 12), Normalization::minmax);
        const auto b = normalize_scores(random_list(rng, 12), Normalization::minmax);
        const std::size_t k = 1 + rng.below(12);
        auto expect = ids_of(a);
        expect.resize(std::min(expect.size(), k));
        EXPECT_EQ(ids_of(weighted_fuse({a, b}, {1.0, 0.0}, k)), expect);
    }
}

TEST(WeightedFuse, IdenticalListsKeepOrdering)
{
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const auto a = normalize_scores(random_list(rng, 12), Normalization::minmax);
        EXPECT_EQ(ids_of(weighted_fuse({a, a}, {0.3, 1.7}, 100)), ids_of(a));
    }
}

TEST(WeightedFuse, WeightValidation)
{
    const auto a = list_of({{"d1", 1.0}});
    EXPECT_THROW(weighted_fuse({a}, {}, 5), Error);
    EXPECT_THROW(weighted_fuse({}, {}, 5), Error);
    EXPECT_THROW(weighted_fuse({a, a}, {0.0, 0.0}, 5), Error);
    EXPECT_THROW(weighted_fuse({a}, {-1.0}, 5), Error);
    EXPECT_THROW(weighted_fuse({a}, {NAN}, 5), Error);
    EXPECT_THROW(weighted_fuse({a}, {1.0}, 0), Error);
}

TEST(WeightedFuse, MatchesDefinitionOracle)
{
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<CandidateList> lists;
        std::vector<double> w;
        const auto n = 1 + rng.below(4);
        for (std::uint64_t i = 0; i < n; ++i) {
            lists.push_back(random_list(rng, 10));
            w.push_back(rng.below(4) == 0 ? 0.0 : std::round(rng.uniform() * 4.0) / 4.0 + 0.25);
        }
        if (std::all_of(w.begin(), w.end(), [](double x) { return x == 0.0; })) {
            w[0] = 1.0;
        }
        const std::size_t k = 1 + rng.below(20);
        const auto got = weighted_fuse(lists, w, k);
        const auto want = oracle_fuse(lists, w, k);
        ASSERT_EQ(got.size(), want.size());
        for (std::size_t r = 0; r < got.size(); ++r) {
            // Dyadic scores and weights keep every sum exact.
            EXPECT_EQ(got[r].passage_id, want[r].first);
            EXPECT_EQ(got[r].retrieval_score, want[r].second);
        }
    }
}

TEST(WeightedFuse, PermutationInvariant)
{
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<CandidateList> lists;
        std::vector<double> w;
        for (int i = 0; i < 3; ++i) {
            lists.push_back(normalize_scores(random_list(rng, 10), Normalization::zscore));
            w.push_back(rng.uniform(0.1, 2.0));
        }
        const auto base = weighted_fuse(lists, w, 50);
        std::vector<std::size_t> perm{2, 0, 1};
        std::vector<CandidateList> pl;
        std::vector<double> pw;
        for (auto i : perm) {
            pl.push_back(lists[i]);
            pw.push_back(w[i]);
        }
        const auto other = weighted_fuse(pl, pw, 50);
        ASSERT_EQ(base.size(), other.size());
        for (std::size_t i = 0; i < base.size(); ++i) {
            EXPECT_EQ(base[i].passage_id, other[i].passage_id);
            EXPECT_EQ(base[i].retrieval_score, other[i].retrieval_score);
        }
    }
}

TEST(WeightedFuse, WeightScalingKeepsOrdering)
{
    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<CandidateList> lists;
        std::vector<double> w;
        for (int i = 0; i < 3; ++i) {
            lists.push_back(normalize_scores(random_list(rng, 10), Normalization::minmax));
            w.push_back(std::round(rng.uniform(0.1, 2.0) * 8.0) / 8.0);
        }
        const auto base = weighted_fuse(lists, w, 50);
        for (double c : {0.5, 2.0, 4.0}) {
            std::vector<double> cw;
            for (double x : w) {
                cw.push_back(c * x);
            }
            const auto scaled = weighted_fuse(lists, cw, 50);
            EXPECT_EQ(ids_of(scaled), ids_of(base));
            for (std::size_t i = 0; i < base.size(); ++i) {
                EXPECT_DOUBLE_EQ(scaled[i].retrieval_score, c * base[i].retrieval_score);
            }
        }
    }
}

TEST(WeightedFuse, SharedScoreSumsWeights)
{
    const auto a = list_of({{"x", 0.25}, {"y", 0.0}});
    const auto b = list_of({{"x", 0.25}, {"z", 1.0}});
    const auto f = weighted_fuse({a, b}, {0.5, 1.5}, 10);
    const auto it = std::find_if(f.begin(), f.end(), [](const Candidate& c) { return c.passage_id == "x"; });
    EXPECT_DOUBLE_EQ(it->retrieval_score, 0.25 * 2.0);
}

TEST(NormalizeAndFuse, PerSourceNormalization)
{
    const auto a = list_of({{"d1", 10.0}, {"d2", 5.0}, {"d3", 0.0}});
    const auto b = list_of({{"d3", 3.0}, {"d1", 1.0}});
    const auto f = normalize_and_fuse({a, b}, {{"a", 0.4, Normalization::minmax}, {"b", 0.6, Normalization::minmax}}, 10);
    // d1: 0.4*1 + 0.6*0 = 0.4; d2: 0.4*0.5 = 0.2; d3: 0 + 0.6*1 = 0.6
    EXPECT_EQ(ids_of(f), (std::vector<std::string>{"d3", "d1", "d2"}));
    EXPECT_NEAR(f[0].retrieval_score, 0.6, 1e-15);
    // An empty list is allowed and contributes nothing.
    const auto g = normalize_and_fuse({a, {}}, {{"a", 1.0, Normalization::minmax}, {"b", 1.0, Normalization::minmax}}, 2);
    EXPECT_EQ(ids_of(g), (std::vector<std::string>{"d1", "d2"}));
}
