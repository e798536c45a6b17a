#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "hlatr_oracle.hpp"
#include "hybridrank/hlatr.hpp"
#include "test_support.hpp"

using namespace hybridrank;
using hybridrank::testing::perturb_all;
using hybridrank::testing::scalar_hlatr_forward;
using hybridrank::testing::TempDir;
using hybridrank::testing::write_file;

namespace {

HlatrConfig small_config(std::size_t layers = 2)
{
    HlatrConfig c;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_layers = layers;
    c.ff_width = 12;
    c.max_list_length = 10;
    c.dropout = 0.0;
    c.seed = 3;
    return c;
}

RankedList random_list(Rng& rng, std::size_t n, std::size_t max_rank = 10)
{
    RankedList l;
    l.query_id = "q";
    for (std::size_t i = 0; i < n; ++i) {
        l.ids.push_back("p" + std::to_string(i));
        l.retrieval_ranks.push_back(static_cast<int>(1 + rng.below(max_rank)));
        l.ranking_scores.push_back(rng.uniform());
    }
    return l;
}

CandidateList stage2_list(const std::vector<double>& scores)
{
    CandidateList l;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        l.push_back(Candidate{"d" + std::to_string(i), 0.0, static_cast<int>(i + 1), "r", scores[i], std::nullopt});
    }
    return l;
}

}  // namespace

TEST(HlatrConfig, Validation)
{
    auto c = small_config();
    EXPECT_NO_THROW(c.validate());
    c.n_heads = 3;
    EXPECT_THROW(c.validate(), Error);
    c = small_config();
    c.max_list_length = 1;
    EXPECT_THROW(c.validate(), Error);
    c = small_config();
    c.dropout = 1.0;
    EXPECT_THROW(c.validate(), Error);
    const auto j = to_json(small_config());
    const auto back = hlatr_config_from_json(j);
    EXPECT_EQ(to_json(back), j);
}

TEST(BuildInputs, ProjectionAlgebra)
{
    Rng rng(1);
    auto m = HlatrModel::initialized(small_config());
    perturb_all(m, rng);
    const auto list = random_list(rng, 6, 14);
    const auto x = build_inputs(list, m);
    ASSERT_EQ(x.rows(), 6);
    for (Eigen::Index i = 0; i < 6; ++i) {
        const auto r = std::min(list.retrieval_ranks[static_cast<std::size_t>(i)], 10) - 1;
        for (Eigen::Index c = 0; c < 8; ++c) {
            const double rest = x(i, c) - m.position(r, c);
            EXPECT_NEAR(rest, list.ranking_scores[static_cast<std::size_t>(i)] * m.proj_w(0, c) + m.proj_b(0, c), 1e-12);
        }
    }
    m.proj_w.setZero();
    m.proj_b.setZero();
    const auto pure = build_inputs(list, m);
    for (Eigen::Index i = 0; i < 6; ++i) {
        EXPECT_EQ(pure.row(i), m.position.row(std::min(list.retrieval_ranks[static_cast<std::size_t>(i)], 10) - 1));
    }
}

TEST(BuildInputs, IdenticalFeaturesIdenticalRows)
{
    const auto m = HlatrModel::initialized(small_config());
    RankedList l{"q", {"a", "b"}, {3, 3}, {0.25, 0.25}, std::nullopt};
    const auto x = build_inputs(l, m);
    EXPECT_EQ(x.row(0), x.row(1));
}

TEST(BuildInputs, Errors)
{
    const auto m = HlatrModel::initialized(small_config());
    Rng rng(2);
    EXPECT_THROW(build_inputs(random_list(rng, 11), m), Error);
    RankedList bad{"q", {"a", "b"}, {1}, {0.0, 1.0}, std::nullopt};
    EXPECT_THROW(build_inputs(bad, m), Error);
    RankedList zero{"q", {"a", "b"}, {0, 1}, {0.0, 1.0}, std::nullopt};
    EXPECT_THROW(build_inputs(zero, m), Error);
}

TEST(Forward, ShapesAndScalarOracle)
{
    Rng rng(4);
    auto m = HlatrModel::initialized(small_config());
    perturb_all(m, rng);
    for (std::size_t n : {2u, 3u, 5u, 10u}) {
        const auto list = random_list(rng, n);
        const auto z = forward(m, list);
        ASSERT_EQ(static_cast<std::size_t>(z.size()), n);
        const auto want = scalar_hlatr_forward(m, list);
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_NEAR(z(static_cast<Eigen::Index>(i)), want[i], 1e-9);
        }
        EXPECT_EQ(forward(m, list), z);
    }
}

TEST(Forward, IdenticalCandidatesPermuteWithOutputs)
{
    Rng rng(5);
    auto m = HlatrModel::initialized(small_config());
    perturb_all(m, rng);
    RankedList l{"q", {"a", "b", "c", "d"}, {1, 4, 4, 2}, {0.9, 0.3, 0.3, 0.5}, std::nullopt};
    const auto z = forward(m, l);
    EXPECT_NEAR(z(1), z(2), 1e-12);
    RankedList p{"q", {"d", "c", "a", "b"}, {2, 4, 1, 4}, {0.5, 0.3, 0.9, 0.3}, std::nullopt};
    const auto zp = forward(m, p);
    EXPECT_NEAR(zp(0), z(3), 1e-12);
    EXPECT_NEAR(zp(2), z(0), 1e-12);
    EXPECT_NEAR(zp(1), z(1), 1e-12);
    EXPECT_NEAR(zp(3), z(2), 1e-12);
}

TEST(Forward, AttentionRowsSumToOne)
{
    Rng rng(6);
    auto m = HlatrModel::initialized(small_config());
    perturb_all(m, rng, 1.0);
    const auto maps = attention_maps(m, random_list(rng, 7));
    ASSERT_EQ(maps.size(), 4u);
    for (const auto& a : maps) {
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-9);
            EXPECT_GE(a.row(i).minCoeff(), 0.0);
        }
    }
}

TEST(Forward, NoLayersIsAffineInInputs)
{
    Rng rng(7);
    auto m = HlatrModel::initialized(small_config(0));
    perturb_all(m, rng);
    const auto list = random_list(rng, 8);
    const auto z = forward(m, list);
    for (std::size_t i = 0; i < list.size(); ++i) {
        double want = m.head_b(0, 0);
        for (Eigen::Index c = 0; c < 8; ++c) {
            want += (m.position(list.retrieval_ranks[i] - 1, c) + list.ranking_scores[i] * m.proj_w(0, c) + m.proj_b(0, c)) * m.head_w(c, 0);
        }
        EXPECT_NEAR(z(static_cast<Eigen::Index>(i)), want, 1e-12);
    }
    // The rerank order is the order of that affine score.
    CandidateList stage2;
    for (std::size_t i = 0; i < list.size(); ++i) {
        stage2.push_back(Candidate{list.ids[i], 0.0, list.retrieval_ranks[i], "r", list.ranking_scores[i], std::nullopt});
    }
    const auto out = hlatr_rerank(m, "q", stage2);
    const auto zn = forward(m, normalized_list(list));
    for (std::size_t i = 1; i < out.size(); ++i) {
        EXPECT_GE(*out[i - 1].hlatr_score, *out[i].hlatr_score);
    }
    for (const auto& c : out) {
        const auto idx = static_cast<Eigen::Index>(std::find(list.ids.begin(), list.ids.end(), c.passage_id) - list.ids.begin());
        EXPECT_EQ(*c.hlatr_score, zn(idx));
    }
}

TEST(ListLoss, ValuesAndShiftInvariance)
{
    Eigen::VectorXd s(3);
    s << 2, 1, 0;
    EXPECT_NEAR(listwise_loss(s, 0), 0.40761, 1e-5);
    EXPECT_NEAR(listwise_loss(s, 0), -std::log(std::exp(2.0) / (std::exp(2.0) + std::exp(1.0) + 1.0)), 1e-15);
    EXPECT_NEAR(listwise_loss(Eigen::VectorXd::Zero(4), 2), std::log(4.0), 1e-15);
    Eigen::VectorXd big(3);
    big << 800, 0, 0;
    EXPECT_NEAR(listwise_loss(big, 0), 0.0, 1e-300);
    Rng rng(8);
    for (int t = 0; t < 100; ++t) {
        Eigen::VectorXd z(6);
        for (int i = 0; i < 6; ++i) {
            z(i) = 4.0 * rng.normal();
        }
        const double c = 50.0 * rng.normal();
        EXPECT_NEAR(listwise_loss(z, 1), listwise_loss((z.array() + c).matrix(), 1), 1e-9);
    }
    EXPECT_THROW(listwise_loss(s, 3), Error);
}

TEST(Gradients, EveryTensorMatchesFiniteDifferences)
{
    Rng rng(9);
    auto cfg = small_config();
    cfg.d_model = 4;
    cfg.ff_width = 6;
    cfg.max_list_length = 5;
    auto m = HlatrModel::initialized(cfg);
    perturb_all(m, rng);
    auto list = normalized_list(random_list(rng, 4, 5));
    list.positive = 2;
    auto g = m.zeros_like();
    hlatr_loss_and_grad(m, list, nullptr, g);
    auto params = m.named_params();
    const auto grads = g.named_params();
    for (std::size_t k = 0; k < params.size(); ++k) {
        double worst = 0.0;
        for (Eigen::Index i = 0; i < params[k].second->size(); ++i) {
            double& x = params[k].second->data()[i];
            const double keep = x;
            x = keep + 1e-5;
            const double up = hlatr_loss(m, list);
            x = keep - 1e-5;
            const double down = hlatr_loss(m, list);
            x = keep;
            const double fd = (up - down) / 2e-5;
            const double an = grads[k].second->data()[i];
            const double denom = std::max(1e-6, std::max(std::abs(fd), std::abs(an)));
            if (std::abs(fd - an) > 1e-8) {
                worst = std::max(worst, std::abs(fd - an) / denom);
            }
        }
        EXPECT_LT(worst, 1e-3) << params[k].first;
    }
}

TEST(Rerank, ZeroModelKeepsStageOrder)
{
    const auto m = HlatrModel::zeros(small_config());
    const auto stage2 = stage2_list({0.9, 0.5, 0.7, 0.1});
    const auto out = hlatr_rerank(m, "q", stage2);
    ASSERT_EQ(out.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(out[i].passage_id, stage2[i].passage_id);
        EXPECT_EQ(*out[i].hlatr_score, 0.0);
    }
}

TEST(Rerank, ShortListsPassThroughAndTailStays)
{
    auto cfg = small_config();
    cfg.max_list_length = 3;
    Rng rng(10);
    auto m = HlatrModel::initialized(cfg);
    perturb_all(m, rng);
    const auto one = stage2_list({0.4});
    const auto same = hlatr_rerank(m, "q", one);
    ASSERT_EQ(same.size(), 1u);
    EXPECT_FALSE(same[0].hlatr_score.has_value());
    EXPECT_TRUE(hlatr_rerank(m, "q", {}).empty());

    const auto six = stage2_list({0.9, 0.8, 0.7, 0.6, 0.5, 0.4});
    const auto out = hlatr_rerank(m, "q", six);
    ASSERT_EQ(out.size(), 6u);
    for (std::size_t i = 3; i < 6; ++i) {
        EXPECT_EQ(out[i].passage_id, six[i].passage_id);
        EXPECT_FALSE(out[i].hlatr_score.has_value());
    }
    const auto scores = hlatr_output_scores(out);
    for (std::size_t i = 1; i < scores.size(); ++i) {
        EXPECT_GT(scores[i - 1], scores[i]);
    }
}

TEST(Training, LearnsHighestScoreIsPositive)
{
    auto cfg = small_config(1);
    cfg.d_model = 16;
    cfg.ff_width = 16;
    cfg.epochs = 40;
    cfg.lr = 1e-2;
    cfg.dropout = 0.1;
    Rng rng(11);
    auto make = [&](std::size_t count) {
        std::vector<RankedList> out;
        for (std::size_t q = 0; q < count; ++q) {
            auto l = random_list(rng, 8);
            l.query_id = "q" + std::to_string(q);
            for (std::size_t i = 0; i < 8; ++i) {
                l.retrieval_ranks[i] = static_cast<int>(i + 1);
            }
            l.positive = static_cast<std::size_t>(std::max_element(l.ranking_scores.begin(), l.ranking_scores.end()) - l.ranking_scores.begin());
            out.push_back(l);
        }
        return out;
    };
    const auto train = make(200);
    const auto held = make(100);
    std::vector<double> losses;
    const auto m = train_hlatr(train, cfg, &losses);
    ASSERT_EQ(losses.size(), 40u);
    EXPECT_LT(losses.back(), losses.front());
    std::size_t hits = 0;
    for (const auto& l : held) {
        const auto z = forward(m, normalized_list(l));
        Eigen::Index best;
        z.maxCoeff(&best);
        hits += static_cast<std::size_t>(best) == *l.positive;
    }
    EXPECT_GE(hits, 95u);

    // A reversed stage-2 list comes back in descending score order.
    const auto reversed = stage2_list({0.1, 0.3, 0.5, 0.7, 0.9});
    const auto out = hlatr_rerank(m, "q", reversed);
    EXPECT_EQ(out.front().passage_id, "d4");

    EXPECT_EQ(train_hlatr(train, cfg), m);
}

TEST(Training, RejectsListsWithoutPositive)
{
    Rng rng(12);
    auto l = random_list(rng, 4);
    EXPECT_THROW(train_hlatr({l}, small_config()), Error);
    l.positive = 9;
    EXPECT_THROW(train_hlatr({l}, small_config()), Error);
    RankedList one{"q", {"a"}, {1}, {0.5}, 0};
    EXPECT_THROW(train_hlatr({one}, small_config()), Error);
}

TEST(Persistence, ModelRoundTripIsExact)
{
    TempDir dir;
    Rng rng(13);
    auto m = HlatrModel::initialized(small_config());
    perturb_all(m, rng);
    save_hlatr(m, dir.file("m.txt"));
    const auto back = load_hlatr(dir.file("m.txt"));
    EXPECT_EQ(back, m);
    EXPECT_EQ(to_json(back.config), to_json(m.config));

    write_file(dir.file("bad.txt"), "hybridrank-hlatr 1\nconfig {\"d_model\": 8}\nposition 1 1 0\n");
    EXPECT_THROW(load_hlatr(dir.file("bad.txt")), Error);
    write_file(dir.file("wrong.txt"), "hybridrank-scorer 1\n");
    EXPECT_THROW(load_hlatr(dir.file("wrong.txt")), Error);
}

TEST(Persistence, RankedListsRoundTrip)
{
    TempDir dir;
    Rng rng(14);
    auto a = random_list(rng, 5);
    a.positive = 3;
    auto b = random_list(rng, 2);
    b.query_id = "q2";
    save_ranked_lists({a, b}, dir.file("l.jsonl"));
    const auto back = load_ranked_lists(dir.file("l.jsonl"));
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].ids, a.ids);
    EXPECT_EQ(back[0].retrieval_ranks, a.retrieval_ranks);
    EXPECT_EQ(back[0].ranking_scores, a.ranking_scores);
    EXPECT_EQ(back[0].positive, a.positive);
    EXPECT_FALSE(back[1].positive.has_value());

    write_file(dir.file("bad.jsonl"), "{\"query_id\":\"q\",\"positive\":\"zz\",\"candidates\":[]}\n");
    EXPECT_THROW(load_ranked_lists(dir.file("bad.jsonl")), Error);
}

TEST(TrainingLists, PositiveSelection)
{
    std::map<std::string, CandidateList> stage2;
    stage2["q1"] = stage2_list({0.9, 0.8, 0.7, 0.6});
    stage2["q2"] = stage2_list({0.9, 0.8});
    stage2["q3"] = stage2_list({0.9});
    Qrels qrels;
    qrels.add("q1", "d1", 2);
    qrels.add("q1", "d2", 3);
    qrels.add("q1", "d3", 3);
    qrels.add("q2", "d0", 1);
    qrels.add("q3", "d0", 3);
    const auto lists = make_training_lists(stage2, qrels, 3);
    ASSERT_EQ(lists.size(), 1u);
    EXPECT_EQ(lists[0].query_id, "q1");
    EXPECT_EQ(lists[0].size(), 3u);
    EXPECT_EQ(*lists[0].positive, 2u);
}
