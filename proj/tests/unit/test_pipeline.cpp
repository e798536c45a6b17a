#include <algorithm>
#include <cstdlib>
#include <map>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "hybridrank/pipeline.hpp"
#include "hybridrank/synthetic.hpp"
#include "test_support.hpp"

namespace hybridrank {
inline void PrintTo(const RunEntry& e, std::ostream* os)
{
    *os << e.query_id << ' ' << e.doc_id << ' ' << e.rank << ' ' << e.score << ' ' << e.tag;
}
}  // namespace hybridrank

using namespace hybridrank;
using hybridrank::testing::read_file;
using hybridrank::testing::TempDir;
using hybridrank::testing::write_file;

namespace {

using Entries = hybridrank::Run;

/// Small synthetic collection on disk plus a fast pipeline config over it.
struct Fixture {
    TempDir dir;
    PipelineConfig cfg;

    explicit Fixture(std::size_t n_docs = 200, std::size_t n_queries = 8)
    {
        SyntheticConfig sc;
        sc.n_docs = n_docs;
        sc.n_queries = n_queries;
        sc.vocab = 800;
        sc.relevant_per_query = 6;
        sc.doc_length = 20;
        save_synthetic(generate_synthetic(sc), dir.path().string());
        cfg.corpus = dir.file("corpus.jsonl");
        cfg.queries = dir.file("queries.tsv");
        cfg.qrels = dir.file("qrels.txt");
        cfg.output_dir = dir.file("out");
        cfg.retrieval_k = 30;
        cfg.fusion_k = 30;
        cfg.scorer.epochs = 3;
        cfg.hlatr.d_model = 8;
        cfg.hlatr.ff_width = 8;
        cfg.hlatr.n_layers = 1;
        cfg.hlatr.epochs = 2;
        cfg.hlatr.max_list_length = 30;
    }
};

std::vector<std::string> docs_of(const Entries& run, const std::string& q)
{
    std::vector<std::string> out;
    for (const auto& e : run) {
        if (e.query_id == q) {
            out.push_back(e.doc_id);
        }
    }
    return out;
}

const Entries& stage(const PipelineResult& r, const std::string& name)
{
    for (const auto& [n, run] : r.stages) {
        if (n == name) {
            return run;
        }
    }
    throw std::runtime_error("no stage " + name);
}

struct CliResult {
    int code;
    std::string out;
    std::string err;
};

CliResult run_cli(const TempDir& dir, const std::string& args)
{
    const char* cli = std::getenv("HYBRIDRANK_CLI");
    const std::string cmd = std::string(cli) + " " + args + " >" + dir.file("stdout.txt") + " 2>" + dir.file("stderr.txt");
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(dir.file("stdout.txt")), read_file(dir.file("stderr.txt"))};
}

std::string last_line(const std::string& s)
{
    std::istringstream in(s);
    std::string line, last;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            last = line;
        }
    }
    return last;
}

}  // namespace

TEST(MaxP, HandExample)
{
    const Entries run{{"q", "d1#0", 1, 0.9, "t"}, {"q", "d2#0", 2, 0.5, "t"}, {"q", "d1#2", 3, 0.3, "t"}};
    const auto docs = maxp_aggregate(run);
    ASSERT_EQ(docs.size(), 2u);
    EXPECT_EQ(docs[0], (RunEntry{"q", "d1", 1, 0.9, "t"}));
    EXPECT_EQ(docs[1], (RunEntry{"q", "d2", 2, 0.5, "t"}));
}

TEST(MaxP, OnePassagePerDocKeepsOrder)
{
    const Entries run{{"q", "b#0", 1, 3.0, "t"}, {"q", "a#0", 2, 2.0, "t"}, {"q", "c", 3, 1.0, "t"}};
    const auto docs = maxp_aggregate(run);
    EXPECT_EQ(docs_of(docs, "q"), (std::vector<std::string>{"b", "a", "c"}));
    EXPECT_THROW(maxp_aggregate(Entries{{"q", "d1#x", 1, 1.0, "t"}}), Error);
}

TEST(MaxP, MatchesGroupByMax)
{
    Rng rng(31);
    for (int trial = 0; trial < 30; ++trial) {
        Entries run;
        std::map<std::string, std::map<std::string, double>> want;
        for (int q = 0; q < 2; ++q) {
            const auto qid = "q" + std::to_string(q);
            std::map<std::string, double> seen;
            for (int i = 0; i < 50; ++i) {
                const auto pid = "d" + std::to_string(rng.below(10)) + "#" + std::to_string(rng.below(8));
                if (!seen.emplace(pid, std::round(rng.uniform() * 10.0) / 10.0).second) {
                    continue;
                }
            }
            std::vector<std::pair<std::string, double>> v(seen.begin(), seen.end());
            std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
            for (std::size_t r = 0; r < v.size(); ++r) {
                run.push_back(RunEntry{qid, v[r].first, static_cast<int>(r + 1), v[r].second, "t"});
                const auto doc = v[r].first.substr(0, v[r].first.find('#'));
                auto [it, fresh] = want[qid].emplace(doc, v[r].second);
                if (!fresh) {
                    it->second = std::max(it->second, v[r].second);
                }
            }
        }
        const auto got = maxp_aggregate(run);
        validate_run(got);
        for (const auto& [q, docs] : want) {
            std::vector<std::pair<std::string, double>> v(docs.begin(), docs.end());
            std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second != b.second ? a.second > b.second : a.first < b.first; });
            std::vector<std::pair<std::string, double>> g;
            for (const auto& e : got) {
                if (e.query_id == q) {
                    g.emplace_back(e.doc_id, e.score);
                }
            }
            EXPECT_EQ(g, v);
        }
    }
}

TEST(Config, DefaultsAndParsing)
{
    const auto c = pipeline_config_from_json(nlohmann::json::object());
    EXPECT_EQ(c.seed, 42u);
    EXPECT_EQ(c.retrieval_k, 100u);
    ASSERT_EQ(c.fusion_sources.size(), 3u);
    EXPECT_EQ(c.fusion_sources[0].weight, 0.4);
    EXPECT_EQ(c.fusion_sources[2].weight, 0.6);
    EXPECT_EQ(c.n_neg, 7u);
    EXPECT_EQ(c.scorer.hidden, 16u);
    EXPECT_EQ(c.hlatr.d_model, 64u);
    EXPECT_EQ(c.hlatr.max_list_length, 100u);
    EXPECT_EQ(c.eval.recall_k, 1000u);

    const auto j = nlohmann::json::parse(R"({"seed": 7, "data": {"corpus": "c.jsonl", "queries": "/abs/q.tsv"},
        "fusion": {"sources": [{"source": "dense", "weight": 1, "normalization": "zscore"}]},
        "hlatr": {"init": "zeros", "n_layers": 1}})");
    const auto p = pipeline_config_from_json(j, "/base");
    EXPECT_EQ(p.seed, 7u);
    EXPECT_EQ(p.scorer.seed, 7u);
    EXPECT_EQ(p.hlatr.seed, 7u);
    EXPECT_EQ(p.corpus, "/base/c.jsonl");
    EXPECT_EQ(p.queries, "/abs/q.tsv");
    EXPECT_TRUE(p.hlatr_zero_init);
    EXPECT_EQ(p.hlatr.n_layers, 1u);
    ASSERT_EQ(p.fusion_sources.size(), 1u);
    EXPECT_EQ(p.fusion_sources[0].normalization, Normalization::zscore);

    EXPECT_THROW(pipeline_config_from_json(nlohmann::json::parse(R"({"hlatr": {"init": "ones"}})")), Error);
    try {
        pipeline_config_from_json(nlohmann::json::parse(R"({"retrieval": {"k": "many"}})"));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::parse);
    }
}

TEST(Config, DumpRoundTrips)
{
    PipelineConfig c;
    c.seed = 9;
    c.corpus = "/x/c.jsonl";
    c.hlatr.epochs = 4;
    c.score_files.push_back({"/x/s.tsv", 0.5});
    const auto dumped = pipeline_config_to_json(c);
    const auto back = pipeline_config_from_json(nlohmann::json::parse(dumped.dump()));
    EXPECT_EQ(pipeline_config_to_json(back), dumped);
}

TEST(Config, ShippedDefaultListsEveryDefault)
{
    const char* src = std::getenv("HYBRIDRANK_SOURCE_DIR");
#ifdef HYBRIDRANK_SOURCE_DIR
    if (!src) {
        src = HYBRIDRANK_SOURCE_DIR;
    }
#endif
    if (!src) {
        GTEST_SKIP() << "HYBRIDRANK_SOURCE_DIR not set";
    }
    const std::string path = std::string(src) + "/configs/default.json";
    const auto shipped = nlohmann::json::parse(read_file(path));
    const auto loaded = load_pipeline_config(path);
    PipelineConfig defaults;
    defaults.corpus = loaded.corpus;
    defaults.queries = loaded.queries;
    defaults.qrels = loaded.qrels;
    defaults.output_dir = loaded.output_dir;
    EXPECT_EQ(nlohmann::json(pipeline_config_to_json(loaded)), nlohmann::json(pipeline_config_to_json(defaults)));
    // Every key the dump knows about is written out in the file.
    const auto flat_dump = nlohmann::json(pipeline_config_to_json(defaults)).flatten();
    const auto flat_file = shipped.flatten();
    for (const auto& [k, _] : flat_dump.items()) {
        EXPECT_TRUE(flat_file.contains(k)) << k;
    }
}

TEST(Pipeline, RetrievalOnlyEqualsFuse)
{
    Fixture f;
    f.cfg.ranking_enabled = false;
    f.cfg.hlatr_enabled = false;
    const auto res = run_pipeline(f.cfg);
    const auto& fused = stage(res, "fused");
    EXPECT_EQ(res.final_run, fused);

    const auto docs = load_corpus(f.cfg.corpus);
    const auto corpus = Corpus::from_native(docs);
    const auto sparse = build_inverted_index(corpus);
    const auto impact = build_impact_index(default_term_weights(corpus));
    const auto dense = build_vector_store(corpus, HashEmbedder{});
    Entries want;
    for (const auto& q : load_queries(f.cfg.queries)) {
        const std::vector<CandidateList> lists{retrieve_bm25(sparse, q, 30), retrieve_impact(impact, unit_query_weights(q.text), 30),
                                               retrieve_dense(dense, HashEmbedder{}(q.text), 30)};
        append_run(want, q.query_id, normalize_and_fuse(lists, f.cfg.fusion_sources, 30), "fused");
    }
    EXPECT_EQ(fused, want);
    EXPECT_EQ(read_run(f.cfg.output_dir + "/final.run").size(), want.size());
    EXPECT_TRUE(res.metrics.contains("fused"));
    EXPECT_TRUE(res.metrics.contains("final"));
}

TEST(Pipeline, DisabledStagesLeaveLastRunVerbatim)
{
    Fixture f;
    f.cfg.fusion_enabled = false;
    f.cfg.ranking_enabled = false;
    f.cfg.hlatr_enabled = false;
    run_pipeline(f.cfg);
    EXPECT_EQ(read_file(f.cfg.output_dir + "/final.run"), read_file(f.cfg.output_dir + "/bm25.run"));

    Fixture g;
    g.cfg.hlatr_enabled = false;
    run_pipeline(g.cfg);
    EXPECT_EQ(read_file(g.cfg.output_dir + "/final.run"), read_file(g.cfg.output_dir + "/ranking.run"));
}

TEST(Pipeline, ZeroHlatrKeepsRankingOrder)
{
    Fixture f;
    f.cfg.hlatr_zero_init = true;
    const auto res = run_pipeline(f.cfg);
    const auto& ranking = stage(res, "ranking");
    const auto& hlatr = stage(res, "hlatr");
    ASSERT_EQ(ranking.size(), hlatr.size());
    for (std::size_t i = 0; i < ranking.size(); ++i) {
        EXPECT_EQ(ranking[i].doc_id, hlatr[i].doc_id);
        EXPECT_EQ(ranking[i].rank, hlatr[i].rank);
    }
}

TEST(Pipeline, MissingArtifactNamesStage)
{
    Fixture f;
    auto expect_stage = [](const PipelineConfig& c, const std::string& name, ErrorKind kind) {
        try {
            run_pipeline(c);
            FAIL() << name;
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), kind) << e.what();
            EXPECT_NE(std::string(e.what()).find("stage '" + name + "'"), std::string::npos) << e.what();
        }
    };
    auto c = f.cfg;
    c.ranking_enabled = false;
    expect_stage(c, "hlatr", ErrorKind::missing_artifact);
    c = f.cfg;
    c.corpus.clear();
    expect_stage(c, "retrieval", ErrorKind::missing_artifact);
    c = f.cfg;
    c.scorer_train = false;
    expect_stage(c, "ranking", ErrorKind::missing_artifact);
    c = f.cfg;
    c.dense_enabled = false;
    expect_stage(c, "fusion", ErrorKind::missing_artifact);
    c = f.cfg;
    c.hlatr_train = false;
    expect_stage(c, "hlatr", ErrorKind::missing_artifact);
    c = f.cfg;
    c.vectors = f.dir.file("corpus.jsonl");
    c.fusion_enabled = false;
    EXPECT_THROW(run_pipeline(c), Error);
}

TEST(Pipeline, ExternalArtifactsPlugIn)
{
    Fixture f;
    // A first run supplies a trained scorer, HLATR model and a score file.
    auto first = f.cfg;
    first.output_dir = f.dir.file("first");
    const auto r1 = run_pipeline(first);
    ScoreTable table;
    for (const auto& e : stage(r1, "ranking")) {
        table[e.query_id][e.doc_id] = e.score;
    }
    save_score_file(table, f.dir.file("scores.tsv"));

    auto second = f.cfg;
    second.output_dir = f.dir.file("second");
    second.scorer_model = first.output_dir + "/scorer.txt";
    second.hlatr_model = first.output_dir + "/hlatr.model";
    const auto r2 = run_pipeline(second);
    EXPECT_EQ(stage(r2, "ranking"), stage(r1, "ranking"));
    EXPECT_EQ(r2.final_run, r1.final_run);

    auto third = f.cfg;
    third.output_dir = f.dir.file("third");
    third.scorer_train = false;
    third.score_files.push_back({f.dir.file("scores.tsv"), 1.0});
    third.hlatr_enabled = false;
    const auto r3 = run_pipeline(third);
    for (const auto& q : load_queries(f.cfg.queries)) {
        EXPECT_EQ(docs_of(stage(r3, "ranking"), q.query_id), docs_of(stage(r1, "ranking"), q.query_id));
    }
}

TEST(Pipeline, DeterministicAcrossRunsAndThreads)
{
    Fixture f;
    auto a = f.cfg;
    a.output_dir = f.dir.file("a");
    auto b = f.cfg;
    b.output_dir = f.dir.file("b");
    auto c = f.cfg;
    c.output_dir = f.dir.file("c");
    c.threads = 4;
    run_pipeline(a);
    run_pipeline(b);
    run_pipeline(c);
    for (const char* name : {"bm25.run", "impact.run", "dense.run", "fused.run", "ranking.run", "hlatr.run", "final.run", "scorer.txt", "hlatr.model"}) {
        const auto ref = read_file(a.output_dir + "/" + name);
        EXPECT_FALSE(ref.empty()) << name;
        EXPECT_EQ(read_file(b.output_dir + "/" + name), ref) << name;
        EXPECT_EQ(read_file(c.output_dir + "/" + name), ref) << name;
    }
}

TEST(Pipeline, SplitDocumentsGetMaxPRun)
{
    Fixture f;
    f.cfg.split = true;
    f.cfg.split_options.window = 8;
    f.cfg.split_options.stride = 4;
    f.cfg.hlatr_enabled = false;
    const auto res = run_pipeline(f.cfg);
    ASSERT_TRUE(res.final_doc_run.has_value());
    EXPECT_EQ(*res.final_doc_run, maxp_aggregate(res.final_run));
    const auto on_disk = read_run(f.cfg.output_dir + "/final.doc.run");
    ASSERT_EQ(on_disk.size(), res.final_doc_run->size());
    for (std::size_t i = 0; i < on_disk.size(); ++i) {
        EXPECT_EQ(on_disk[i].doc_id, (*res.final_doc_run)[i].doc_id);
        EXPECT_EQ(on_disk[i].rank, (*res.final_doc_run)[i].rank);
    }
    bool any_passage = false;
    for (const auto& e : res.final_run) {
        any_passage |= e.doc_id.find('#') != std::string::npos;
    }
    EXPECT_TRUE(any_passage);
}

TEST(Sweep, RowsAndValidation)
{
    Fixture f;
    f.cfg.score_noise = 0.5;
    const auto same = sweep_candidate_size(f.cfg, {10, 10});
    ASSERT_EQ(same.size(), 2u);
    EXPECT_EQ(same[0].ranking_ndcg, same[1].ranking_ndcg);
    EXPECT_EQ(same[0].hlatr_ndcg, same[1].hlatr_ndcg);

    const auto rows = sweep_candidate_size(f.cfg, {10, 50, 100});
    ASSERT_EQ(rows.size(), 3u);
    for (const auto& r : rows) {
        EXPECT_GE(r.ranking_ndcg, 0.0);
        EXPECT_LE(r.ranking_ndcg, 1.0);
        EXPECT_TRUE(r.hlatr_ndcg.has_value());
    }
    EXPECT_THROW(sweep_candidate_size(f.cfg, {50, 10}), Error);
    EXPECT_THROW(sweep_candidate_size(f.cfg, {0}), Error);
}

TEST(Sweep, SizeOneIsFusedTopOne)
{
    Fixture f;
    f.cfg.hlatr_enabled = false;
    const auto rows = sweep_candidate_size(f.cfg, {1});
    auto c = f.cfg;
    c.ranking_enabled = false;
    c.fusion_k = 1;
    const auto res = run_pipeline(c);
    EXPECT_EQ(rows[0].ranking_ndcg, ndcg_at_k(res.final_run, load_qrels(f.cfg.qrels), 10).mean);
}

// ---------------------------------------------------------------------------
// Command line

class Cli : public ::testing::Test {
  protected:
    void SetUp() override
    {
        if (!std::getenv("HYBRIDRANK_CLI")) {
            GTEST_SKIP() << "HYBRIDRANK_CLI not set";
        }
    }
    TempDir dir;
};

TEST_F(Cli, UsageErrorsAreJson)
{
    auto r = run_cli(dir, "");
    EXPECT_NE(r.code, 0);
    auto j = nlohmann::json::parse(last_line(r.err));
    EXPECT_EQ(j["kind"], "usage");
    EXPECT_TRUE(j.contains("error"));

    r = run_cli(dir, "frobnicate");
    EXPECT_NE(r.code, 0);
    EXPECT_EQ(nlohmann::json::parse(last_line(r.err))["kind"], "usage");

    r = run_cli(dir, "--help");
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("index-sparse"), std::string::npos);
}

TEST_F(Cli, LibraryErrorsCarryKind)
{
    write_file(dir.file("bad.run"), "q1 Q0 d1 1 zz tag\n");
    write_file(dir.file("qrels.txt"), "q1 0 d1 2\n");
    auto r = run_cli(dir, "--quiet eval --run " + dir.file("bad.run") + " --qrels " + dir.file("qrels.txt"));
    EXPECT_EQ(r.code, 1);
    const auto j = nlohmann::json::parse(r.err);
    EXPECT_EQ(j["kind"], "parse");
    EXPECT_NE(j["error"].get<std::string>().find(":1"), std::string::npos);

    r = run_cli(dir, "--quiet aggregate-maxp --run " + dir.file("missing.run"));
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(nlohmann::json::parse(r.err)["kind"], "io");
}

TEST_F(Cli, EndToEndCommands)
{
    const std::string d = dir.file("data");
    auto r = run_cli(dir, "--seed 5 synth --n-docs 120 --n-queries 5 --vocab 400 --relevant-per-query 4 --doc-length 15 --out " + d);
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string out = dir.file("o");
    r = run_cli(dir, "--output-dir " + out + " index-sparse --corpus " + d + "/corpus.jsonl");
    ASSERT_EQ(r.code, 0) << r.err;
    r = run_cli(dir, "--output-dir " + out + " index-dense --corpus " + d + "/corpus.jsonl");
    ASSERT_EQ(r.code, 0) << r.err;
    r = run_cli(dir, "--output-dir " + out + " retrieve --method bm25 --index " + out + "/sparse.idx --queries " + d + "/queries.tsv -k 20");
    ASSERT_EQ(r.code, 0) << r.err;
    r = run_cli(dir, "--output-dir " + out + " retrieve --method dense --index " + out + "/dense.vec --queries " + d + "/queries.tsv -k 20");
    ASSERT_EQ(r.code, 0) << r.err;
    r = run_cli(dir, "--output-dir " + out + " fuse --run " + out + "/bm25.run --run " + out + "/dense.run --weight 0.4 --weight 0.6 -k 20");
    ASSERT_EQ(r.code, 0) << r.err;
    r = run_cli(dir, "eval --run " + out + "/fused.run --qrels " + d + "/qrels.txt");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto m = nlohmann::json::parse(last_line(r.out));
    EXPECT_TRUE(m.contains("ndcg@10"));
    EXPECT_EQ(m["queries"], 5);

    // The CLI fuse equals the library fuse over the same runs.
    const auto bm25 = from_run(read_run(out + "/bm25.run"), "bm25");
    const auto dense = from_run(read_run(out + "/dense.run"), "dense");
    Entries want;
    for (const auto& q : load_queries(d + "/queries.tsv")) {
        std::vector<CandidateList> lists{bm25.count(q.query_id) ? bm25.at(q.query_id) : CandidateList{},
                                         dense.count(q.query_id) ? dense.at(q.query_id) : CandidateList{}};
        append_run(want, q.query_id, normalize_and_fuse(lists, {{"bm25", 0.4, Normalization::minmax}, {"dense", 0.6, Normalization::minmax}}, 20), "fused");
    }
    const auto got = read_run(out + "/fused.run");
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
        EXPECT_EQ(got[i].doc_id, want[i].doc_id);
    }

    r = run_cli(dir, "eval --per-query --run " + out + "/fused.run --qrels " + d + "/qrels.txt");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("ndcg@10\tall\t"), std::string::npos);
}

TEST_F(Cli, PipelineFromConfig)
{
    Fixture f(150, 5);
    auto j = nlohmann::json(pipeline_config_to_json(f.cfg));
    j["output_dir"] = "piped";
    j["data"]["corpus"] = "corpus.jsonl";
    j["data"]["queries"] = "queries.tsv";
    j["data"]["qrels"] = "qrels.txt";
    write_file(f.dir.file("cfg.json"), "// comment\n" + j.dump(2));
    auto r = run_cli(dir, "--quiet --config " + f.dir.file("cfg.json") + " pipeline");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(nlohmann::json::parse(last_line(r.out)).contains("ndcg@10"));
    EXPECT_FALSE(read_file(f.dir.file("piped/final.run")).empty());

    r = run_cli(dir, "--quiet --config " + f.dir.file("cfg.json") + " --output-dir " + dir.file("sw") + " sweep --sizes 5,10");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("non-increasing"), std::string::npos);

    r = run_cli(dir, "--quiet pipeline");
    EXPECT_NE(r.code, 0);
    EXPECT_TRUE(nlohmann::json::parse(last_line(r.err)).contains("kind"));
}
