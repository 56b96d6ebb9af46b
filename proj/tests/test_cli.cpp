#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gnae/cli.hpp"

using namespace gnae;
namespace fs = std::filesystem;

namespace {

struct FixtureDir {
    fs::path dir;
    explicit FixtureDir(const std::string& name) {
        dir = fs::temp_directory_path() / name;
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~FixtureDir() { fs::remove_all(dir); }
    void file(const std::string& fname, const std::string& content) const {
        std::ofstream out(dir / fname);
        out << content;
    }
    std::string at(const std::string& fname) const { return (dir / fname).string(); }
};

int run(const std::vector<std::string>& args, std::string* out_text = nullptr,
        std::string* err_text = nullptr) {
    std::vector<const char*> argv;
    argv.push_back("gnae");
    for (const auto& a : args)
        argv.push_back(a.c_str());
    std::ostringstream out, err;
    int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    if (out_text)
        *out_text = out.str();
    if (err_text)
        *err_text = err.str();
    return code;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// small but real: two epochs over the full synthetic benchmark
const char* kTinyConfig = R"({"epochs": 2, "latent_dim": 3, "feature_dim": 6,
    "cheb_order": 2, "batch_size": 100, "samples_per_graphon": 2, "sample_size": 6})";

} // namespace

TEST_CASE("command line pipeline") {
    FixtureDir fx("gnae_cli_pipeline");
    fx.file("tiny.json", kTinyConfig);

    std::string out, err;
    REQUIRE(run({"train", "--dataset", "synthetic:two_vs_er", "--config", fx.at("tiny.json"),
                 "--out", fx.at("model.ckpt"), "--seed", "7", "--history", fx.at("hist.csv")},
                &out, &err) == 0);
    CHECK(out.find("epoch 1 loss ") != std::string::npos);
    CHECK(out.find("epoch 2 loss ") != std::string::npos);
    CHECK(fs::exists(fx.at("model.ckpt")));
    {
        std::string hist = slurp(fx.at("hist.csv"));
        CHECK(hist.rfind("epoch,loss,recon,reg\n", 0) == 0);
        CHECK(std::count(hist.begin(), hist.end(), '\n') == 3);
    }

    SECTION("training twice writes the same bytes") {
        REQUIRE(run({"train", "--dataset", "synthetic:two_vs_er", "--config", fx.at("tiny.json"),
                     "--out", fx.at("model2.ckpt"), "--seed", "7"}) == 0);
        CHECK(slurp(fx.at("model2.ckpt")) == slurp(fx.at("model.ckpt")));
    }

    SECTION("inspect reports the stored run") {
        REQUIRE(run({"inspect", "--model", fx.at("model.ckpt")}, &out) == 0);
        CHECK(out.find("seed 7") != std::string::npos);
        CHECK(out.find("factors  3 (partitions:") != std::string::npos);
        CHECK(out.find("prior    2 components, latent dim 3") != std::string::npos);
        CHECK(out.find("history  2 epochs") != std::string::npos);
    }

    SECTION("embed then eval, reruns byte-identical") {
        REQUIRE(run({"embed", "--model", fx.at("model.ckpt"), "--dataset", "synthetic:two_vs_er",
                     "--seed", "7", "--out", fx.at("emb.csv")}) == 0);
        REQUIRE(run({"embed", "--model", fx.at("model.ckpt"), "--dataset", "synthetic:two_vs_er",
                     "--seed", "7", "--out", fx.at("emb2.csv")}) == 0);
        CHECK(slurp(fx.at("emb2.csv")) == slurp(fx.at("emb.csv")));

        std::string eval1, eval2;
        REQUIRE(run({"eval", "--embeddings", fx.at("emb.csv"), "--folds", "5", "--knn", "3"},
                    &eval1) == 0);
        REQUIRE(run({"eval", "--embeddings", fx.at("emb.csv"), "--folds", "5", "--knn", "3"},
                    &eval2) == 0);
        CHECK(eval1 == eval2);
        CHECK(eval1.find("protocol  stratified 5-fold 3-NN") != std::string::npos);

        // scoring a table against itself with one neighbor finds each point
        std::string holdout;
        REQUIRE(run({"eval", "--embeddings", fx.at("emb.csv"), "--train-embeddings",
                     fx.at("emb.csv"), "--knn", "1"},
                    &holdout) == 0);
        CHECK(holdout.find("protocol  holdout 1-NN (train=200, test=200)") != std::string::npos);
        CHECK(holdout.find("accuracy  1\n") != std::string::npos);
    }

    SECTION("generate writes deterministic graph files") {
        REQUIRE(run({"generate", "--model", fx.at("model.ckpt"), "--num", "2", "--nodes", "8,12",
                     "--out-dir", fx.at("gen"), "--seed", "5"}) == 0);
        const char* names[] = {"graph_000_n8.txt", "graph_000_n12.txt", "graph_001_n8.txt",
                               "graph_001_n12.txt"};
        for (const char* n : names)
            REQUIRE(fs::exists(fx.dir / "gen" / n));
        std::ifstream in(fx.dir / "gen" / "graph_000_n12.txt");
        AttributedGraph g = read_graph_text(in);
        CHECK(g.num_nodes == 12);
        CHECK_FALSE(g.has_attributes());

        REQUIRE(run({"generate", "--model", fx.at("model.ckpt"), "--num", "2", "--nodes", "8,12",
                     "--out-dir", fx.at("gen2"), "--seed", "5"}) == 0);
        for (const char* n : names)
            CHECK(slurp((fx.dir / "gen2" / n).string()) == slurp((fx.dir / "gen" / n).string()));
    }
}

TEST_CASE("command line distance") {
    FixtureDir fx("gnae_cli_distance");
    fx.file("a.txt", "5 4\n0 1\n0 2\n0 3\n3 4\n");
    fx.file("b.txt", "4 6\n0 1\n0 2\n0 3\n1 2\n1 3\n2 3\n");

    std::string out;
    REQUIRE(run({"distance", "--graph-a", fx.at("a.txt"), "--graph-b", fx.at("a.txt")}, &out) == 0);
    double self = -1.0;
    REQUIRE(std::sscanf(out.c_str(), "fgw %lf", &self) == 1);
    CHECK(self <= 1e-3);

    SECTION("distinct graphs give a positive value and a plan") {
        REQUIRE(run({"distance", "--graph-a", fx.at("a.txt"), "--graph-b", fx.at("b.txt"),
                     "--order", "1", "--plan-out", fx.at("plan.csv")},
                    &out) == 0);
        double d = -1.0;
        REQUIRE(std::sscanf(out.c_str(), "fgw %lf", &d) == 1);
        CHECK(d > 0.0);
        std::string plan = slurp(fx.at("plan.csv"));
        CHECK(std::count(plan.begin(), plan.end(), '\n') == 5);
        CHECK(std::count(plan.begin(), plan.end(), ',') == 5 * 3);
    }

    SECTION("identical invocations print identical text") {
        std::string again;
        REQUIRE(run({"distance", "--graph-a", fx.at("a.txt"), "--graph-b", fx.at("b.txt")},
                    &again) == 0);
        std::string twice;
        REQUIRE(run({"distance", "--graph-a", fx.at("a.txt"), "--graph-b", fx.at("b.txt")},
                    &twice) == 0);
        CHECK(again == twice);
    }
}

TEST_CASE("command line exit codes") {
    FixtureDir fx("gnae_cli_errors");

    std::string out, err;
    SECTION("help exits zero and names the flags") {
        CHECK(run({"--help"}, &out) == 0);
        CHECK(out.find("train") != std::string::npos);
        CHECK(run({"train", "--help"}, &out) == 0);
        CHECK(out.find("--dataset") != std::string::npos);
        CHECK(out.find("--history") != std::string::npos);
    }
    SECTION("usage errors exit one") {
        CHECK(run({}, nullptr, &err) == 1);
        CHECK(run({"frobnicate"}, nullptr, &err) == 1);
        CHECK(run({"train", "--dataset", "x", "--out", "y", "--bogus"}, nullptr, &err) == 1);
        CHECK(run({"train", "--out", "y"}, nullptr, &err) == 1); // missing --dataset
        CHECK(run({"distance", "--graph-a", "a", "--graph-b", "b", "--order", "3"}, nullptr,
                  &err) == 1);
    }
    SECTION("data errors exit two with one diagnostic line") {
        CHECK(run({"inspect", "--model", fx.at("missing.ckpt")}, nullptr, &err) == 2);
        CHECK(err.rfind("error: ", 0) == 0);
        CHECK(std::count(err.begin(), err.end(), '\n') == 1);

        CHECK(run({"embed", "--model", fx.at("missing.ckpt"), "--dataset", "synthetic:wat",
                   "--out", fx.at("z.csv")},
                  nullptr, &err) == 2);

        fx.file("bad.json", "{\"epoch\": 3}");
        CHECK(run({"train", "--dataset", "synthetic:er", "--config", fx.at("bad.json"), "--out",
                   fx.at("m.ckpt")},
                  nullptr, &err) == 2);
        CHECK(err.find("unknown field 'epoch'") != std::string::npos);

        fx.file("zero.json", "{\"epochs\": 0, \"batch_size\": -1}");
        CHECK(run({"train", "--dataset", "synthetic:er", "--config", fx.at("zero.json"), "--out",
                   fx.at("m.ckpt")},
                  nullptr, &err) == 2);
    }
}

TEST_CASE("command line seed resolution") {
    FixtureDir fx("gnae_cli_seed");
    fx.file("cfg7.json", R"({"epochs": 1, "latent_dim": 2, "feature_dim": 4, "cheb_order": 2,
        "batch_size": 200, "samples_per_graphon": 1, "sample_size": 6, "seed": 7})");

    REQUIRE(run({"train", "--dataset", "synthetic:two_vs_er", "--config", fx.at("cfg7.json"),
                 "--out", fx.at("a.ckpt")}) == 0);
    REQUIRE(run({"train", "--dataset", "synthetic:two_vs_er", "--config", fx.at("cfg7.json"),
                 "--seed", "7", "--out", fx.at("b.ckpt")}) == 0);
    REQUIRE(run({"train", "--dataset", "synthetic:two_vs_er", "--config", fx.at("cfg7.json"),
                 "--seed", "8", "--out", fx.at("c.ckpt")}) == 0);

    CHECK(slurp(fx.at("a.ckpt")) == slurp(fx.at("b.ckpt"))); // flag agrees with config
    CHECK(slurp(fx.at("a.ckpt")) != slurp(fx.at("c.ckpt"))); // flag beats config
}
