#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "gnae/config.hpp"
#include "gnae/data.hpp"
#include "gnae/eval.hpp"
#include "gnae/graphon.hpp"
#include "gnae/model.hpp"
#include "gnae/ot.hpp"
#include "gnae/rng.hpp"
#include "gnae/train.hpp"

namespace gnae {
namespace detail {

// Config files use exactly the TrainConfig field names. Unknown keys are
// rejected so a typo fails loudly instead of silently training with defaults.
inline TrainConfig config_from_file(const std::string& path, bool* saw_seed) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("config: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("config: " + path + ": " + e.what());
    }
    if (!j.is_object())
        throw std::runtime_error("config: " + path + ": expected an object of settings");
    TrainConfig cfg;
    *saw_seed = false;
    for (const auto& [key, val] : j.items()) {
        try {
            if (key == "batch_size")
                cfg.batch_size = val.get<int>();
            else if (key == "learning_rate")
                cfg.learning_rate = val.get<double>();
            else if (key == "epochs")
                cfg.epochs = val.get<int>();
            else if (key == "samples_per_graphon")
                cfg.samples_per_graphon = val.get<int>();
            else if (key == "sample_size")
                cfg.sample_size = val.get<int>();
            else if (key == "gamma")
                cfg.gamma = val.get<double>();
            else if (key == "cheb_order")
                cfg.cheb_order = val.get<int>();
            else if (key == "feature_dim")
                cfg.feature_dim = val.get<int>();
            else if (key == "latent_dim")
                cfg.latent_dim = val.get<int>();
            else if (key == "fgw_order")
                cfg.fgw_order = val.get<int>();
            else if (key == "sfgw_projections")
                cfg.sfgw_projections = val.get<int>();
            else if (key == "signal_sigma")
                cfg.signal_sigma = val.get<double>();
            else if (key == "seed") {
                cfg.seed = val.get<std::uint64_t>();
                *saw_seed = true;
            } else
                throw std::runtime_error("config: unknown field '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("config: field '" + key + "': " + e.what());
        }
    }
    return cfg;
}

// --dataset accepts either a TUDataset directory (its basename names the
// dataset) or synthetic:NAME regenerated from the resolved seed.
inline Dataset dataset_from_spec(const std::string& spec, std::uint64_t seed,
                                 std::ostream& warn) {
    const std::string prefix = "synthetic:";
    if (spec.rfind(prefix, 0) == 0) {
        const std::string name = spec.substr(prefix.size());
        Rng rng = Rng::derive(seed, "dataset");
        if (name == "two_vs_er")
            return two_vs_er_dataset(100, {20, 30}, rng);
        SynthParams params;
        if (name == "two_block_sbm")
            return synth_dataset(SynthKind::two_block_sbm, params, 200, {20, 30}, rng);
        if (name == "er")
            return synth_dataset(SynthKind::er, params, 200, {20, 30}, rng);
        if (name == "ring")
            return synth_dataset(SynthKind::ring, params, 200, {20, 30}, rng);
        throw std::runtime_error("unknown synthetic dataset '" + name +
                                 "' (have: two_vs_er, two_block_sbm, er, ring)");
    }
    std::filesystem::path dir(spec);
    std::string name = dir.filename().string();
    if (name.empty()) // trailing slash
        name = dir.parent_path().filename().string();
    if (name.empty())
        throw std::runtime_error("dataset: cannot infer a dataset name from '" + spec + "'");
    return parse_tudataset(dir.string(), name, &warn);
}

inline AttributedGraph graph_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("cannot open graph file " + path);
    return read_graph_text(in);
}

inline EmbeddingTable embeddings_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("cannot open embeddings file " + path);
    return read_embeddings(in);
}

// One decoded graphon, sampled at a requested size: uniform latent positions,
// then independent edge coins against the mixture kernel.
inline AttributedGraph sample_decoded_graph(const DecoderParams& dec, const Vec& weights, int k,
                                            Rng& rng) {
    AttributedGraph g;
    g.num_nodes = k;
    std::vector<double> pos(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i)
        pos[static_cast<std::size_t>(i)] = rng.uniform();
    for (int i = 0; i < k; ++i)
        for (int j = i + 1; j < k; ++j)
            if (rng.bernoulli(decode_edge_prob(dec, weights, pos[static_cast<std::size_t>(i)],
                                               pos[static_cast<std::size_t>(j)])))
                g.edges.emplace_back(i, j);
    return g;
}

template <typename Open> // Open: (std::ofstream&) -> void
inline void write_file(const std::string& path, const char* what, Open&& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error(std::string(what) + ": cannot open " + path + " for writing");
    body(out);
    if (!out)
        throw std::runtime_error(std::string(what) + ": write to " + path + " failed");
}

} // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"graphon autoencoder toolkit"};
    app.require_subcommand(1);

    auto* tr = app.add_subcommand("train", "fit a model and write a checkpoint");
    std::string tr_dataset, tr_config, tr_out, tr_history;
    std::uint64_t tr_seed = 42;
    tr->add_option("--dataset", tr_dataset, "TUDataset directory or synthetic:NAME")->required();
    tr->add_option("--config", tr_config, "settings file (field names match the training config)");
    tr->add_option("--out", tr_out, "checkpoint output path")->required();
    auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "seed (beats the config file; default 42)");
    tr->add_option("--history", tr_history, "also write the per-epoch loss table to this CSV");

    auto* em = app.add_subcommand("embed", "encode a dataset with a trained model");
    std::string em_model, em_dataset, em_out;
    std::uint64_t em_seed = 42;
    em->add_option("--model", em_model, "checkpoint to load")->required();
    em->add_option("--dataset", em_dataset, "TUDataset directory or synthetic:NAME")->required();
    em->add_option("--out", em_out, "embeddings CSV output path")->required();
    em->add_option("--seed", em_seed, "seed for synthetic dataset regeneration (default 42)");

    auto* ge = app.add_subcommand("generate", "sample graphs from a trained model's prior");
    std::string ge_model, ge_dir;
    int ge_num = 1;
    std::vector<int> ge_nodes;
    std::uint64_t ge_seed = 42;
    ge->add_option("--model", ge_model, "checkpoint to load")->required();
    ge->add_option("--num", ge_num, "latent draws, one decoded graphon each (default 1)");
    ge->add_option("--nodes", ge_nodes, "comma-separated graph sizes sampled per draw")
        ->required()
        ->delimiter(',');
    ge->add_option("--out-dir", ge_dir, "directory for the edge-list files")->required();
    ge->add_option("--seed", ge_seed, "seed for latent draws and edge coins (default 42)");

    auto* di = app.add_subcommand("distance", "fused distance between two graph files");
    std::string di_a, di_b, di_plan;
    int di_order = 2;
    di->add_option("--graph-a", di_a, "first graph file (n m header, edge lines)")->required();
    di->add_option("--graph-b", di_b, "second graph file")->required();
    di->add_option("--order", di_order, "cost exponent, 1 or 2 (default 2)")
        ->check(CLI::IsMember({1, 2}));
    di->add_option("--plan-out", di_plan, "write the transport plan matrix to this CSV");

    auto* ev = app.add_subcommand("eval", "k-NN accuracy of an embeddings table");
    std::string ev_emb, ev_train;
    int ev_folds = 10, ev_knn = 5;
    std::uint64_t ev_seed = 42;
    ev->add_option("--embeddings", ev_emb, "embeddings CSV to score")->required();
    ev->add_option("--train-embeddings", ev_train,
                   "separate training table; scores --embeddings as a held-out set, no folds");
    ev->add_option("--folds", ev_folds, "cross-validation folds (default 10)");
    ev->add_option("--knn", ev_knn, "neighbors per vote (default 5)");
    ev->add_option("--seed", ev_seed, "seed for fold assignment (default 42)");

    auto* in = app.add_subcommand("inspect", "print a checkpoint's settings and shapes");
    std::string in_model;
    in->add_option("--model", in_model, "checkpoint to describe")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (tr->parsed()) {
            TrainConfig cfg;
            bool cfg_has_seed = false;
            if (!tr_config.empty())
                cfg = detail::config_from_file(tr_config, &cfg_has_seed);
            if (tr_seed_opt->count() > 0)
                cfg.seed = tr_seed; // flag beats config beats the built-in 42
            Dataset ds = detail::dataset_from_spec(tr_dataset, cfg.seed, err);
            TrainResult res = train(ds, cfg, SignalActivation::identity, &out);
            Checkpoint ckpt;
            ckpt.config = cfg;
            ckpt.model = res.model;
            ckpt.normalization = res.normalization;
            ckpt.history = res.history;
            detail::write_file(tr_out, "checkpoint",
                               [&](std::ofstream& os) { save_checkpoint(os, ckpt); });
            if (!tr_history.empty())
                detail::write_file(tr_history, "history",
                                   [&](std::ofstream& os) { write_history(os, res.history); });
            out << "wrote " << tr_out << "\n";
        } else if (em->parsed()) {
            Checkpoint ckpt = load_checkpoint(em_model);
            Dataset ds = detail::dataset_from_spec(em_dataset, em_seed, err);
            std::vector<Vec> codes = embed_graphs(ds, ckpt.model, ckpt.normalization);
            EmbeddingTable table;
            table.codes = std::move(codes);
            for (std::size_t i = 0; i < ds.graphs.size(); ++i) {
                table.ids.push_back(static_cast<long long>(i));
                table.labels.push_back(ds.graphs[i].label.value_or(-1));
            }
            detail::write_file(em_out, "embeddings", [&](std::ofstream& os) {
                export_embeddings(os, table, ckpt.config.latent_dim);
            });
            out << "wrote " << em_out << "\n";
        } else if (ge->parsed()) {
            if (ge_num < 1)
                throw std::invalid_argument("generate: --num must be positive");
            for (int k : ge_nodes)
                if (k < 1)
                    throw std::invalid_argument("generate: node counts must be positive");
            Checkpoint ckpt = load_checkpoint(ge_model);
            std::filesystem::create_directories(ge_dir);
            Rng rng = Rng::derive(ge_seed, "generate");
            for (int g = 0; g < ge_num; ++g) {
                PriorSample ps = prior_sample(ckpt.model.prior, rng);
                Vec w = stable_softmax(ps.z);
                for (int k : ge_nodes) {
                    AttributedGraph ag =
                        detail::sample_decoded_graph(ckpt.model.decoder, w, k, rng);
                    char name[48];
                    std::snprintf(name, sizeof(name), "graph_%03d_n%d.txt", g, k);
                    const std::string path = (std::filesystem::path(ge_dir) / name).string();
                    detail::write_file(path, "generate",
                                       [&](std::ofstream& os) { write_graph_text(os, ag); });
                    out << "wrote " << path << "\n";
                }
            }
        } else if (di->parsed()) {
            AttributedGraph a = detail::graph_from_file(di_a);
            AttributedGraph b = detail::graph_from_file(di_b);
            auto [ga, sa] = induce_graphon(a);
            auto [gb, sb] = induce_graphon(b);
            const StepSignal* pa = nullptr;
            const StepSignal* pb = nullptr;
            if (sa && sb) {
                pa = &*sa;
                pb = &*sb;
            } else if (sa.has_value() != sb.has_value()) {
                err << "note: attributes present on only one graph; comparing structure alone\n";
            }
            SolverConfig sc;
            sc.order = di_order;
            sc.outer_iters = 400; // tight self-distances need a long proximal schedule
            FgwResult res = fgw_distance(ga, pa, gb, pb, sc);
            char buf[64];
            std::snprintf(buf, sizeof(buf), "fgw %.12g\n", res.distance);
            out << buf;
            if (!di_plan.empty())
                detail::write_file(di_plan, "plan", [&](std::ofstream& os) {
                    for (int i = 0; i < res.plan.matrix.rows(); ++i) {
                        for (int j = 0; j < res.plan.matrix.cols(); ++j) {
                            if (j)
                                os << ',';
                            detail::write_g9(os, res.plan.matrix(i, j));
                        }
                        os << '\n';
                    }
                });
        } else if (ev->parsed()) {
            EmbeddingTable test = detail::embeddings_from_file(ev_emb);
            if (test.codes.empty())
                throw std::runtime_error("eval: embeddings table is empty");
            EvalReport report;
            if (!ev_train.empty()) {
                EmbeddingTable ref = detail::embeddings_from_file(ev_train);
                std::vector<int> pred = knn_classify(ref.codes, ref.labels, test.codes, ev_knn);
                int hits = 0;
                for (std::size_t i = 0; i < pred.size(); ++i)
                    if (pred[i] == test.labels[i])
                        ++hits;
                report.accuracy_mean = static_cast<double>(hits) / static_cast<double>(pred.size());
                report.accuracy_std = 0.0;
                report.fold_accuracies = {report.accuracy_mean};
                report.protocol = "holdout " + std::to_string(ev_knn) + "-NN (train=" +
                                  std::to_string(ref.codes.size()) + ", test=" +
                                  std::to_string(test.codes.size()) + ")";
            } else {
                report = cross_validate(test.codes, test.labels, ev_folds, ev_knn, ev_seed, &err);
            }
            print_report(out, report);
        } else if (in->parsed()) {
            Checkpoint ckpt = load_checkpoint(in_model);
            out << "schema   " << ckpt.schema_version << "\n";
            const TrainConfig& c = ckpt.config;
            char buf[512];
            std::snprintf(buf, sizeof(buf),
                          "config   batch_size %d  learning_rate %g  epochs %d\n"
                          "         samples_per_graphon %d  sample_size %d  gamma %g\n"
                          "         cheb_order %d  feature_dim %d  latent_dim %d\n"
                          "         fgw_order %d  sfgw_projections %d  signal_sigma %g\n"
                          "         seed %llu\n",
                          c.batch_size, c.learning_rate, c.epochs, c.samples_per_graphon,
                          c.sample_size, c.gamma, c.cheb_order, c.feature_dim, c.latent_dim,
                          c.fgw_order, c.sfgw_projections, c.signal_sigma,
                          static_cast<unsigned long long>(c.seed));
            out << buf;
            out << "factors  " << ckpt.model.decoder.num_factors() << " (partitions:";
            for (const auto& f : ckpt.model.decoder.factors)
                out << ' ' << f.partitions;
            out << ")\n";
            const GmmPrior& prior = ckpt.model.prior;
            out << "prior    " << prior.num_components() << " components, latent dim "
                << prior.latent_dim() << "\n";
            for (int t = 0; t < prior.num_components(); ++t) {
                out << "  mean[" << t << "] ";
                for (int i = 0; i < prior.latent_dim(); ++i) {
                    std::snprintf(buf, sizeof(buf), " %.6g", prior.means(t, i));
                    out << buf;
                }
                out << "\n";
            }
            out << "inputs   " << ckpt.normalization.mean.size() << "-dim"
                << (ckpt.normalization.uses_ldp ? ", degree profile attached" : "") << "\n";
            if (!ckpt.history.empty()) {
                std::snprintf(buf, sizeof(buf), "history  %zu epochs, final loss %.9g\n",
                              ckpt.history.size(), ckpt.history.back().loss);
                out << buf;
            }
        }
        return 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

} // namespace gnae
