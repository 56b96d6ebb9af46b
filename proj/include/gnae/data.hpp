#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gnae/config.hpp"
#include "gnae/model.hpp"

namespace gnae {

struct Dataset {
    std::vector<AttributedGraph> graphs;
    int attribute_dim = 0; // 0 means none
    int num_classes = 0;   // 0 means unlabeled
    std::string name;
};

// ---------------------------------------------------------------------------
// TUDataset layout: <DS>_A.txt edge pairs (1-indexed, usually listed in both
// directions), <DS>_graph_indicator.txt node-to-graph map, optional
// <DS>_graph_labels.txt, <DS>_node_attributes.txt, <DS>_node_labels.txt.

namespace detail {

inline std::vector<std::string> read_lines(const std::string& path, const std::string& fname,
                                           bool required) {
    std::ifstream in(path);
    if (!in) {
        if (required)
            throw std::runtime_error("parse error: missing file " + fname);
        return {};
    }
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n'))
            line.pop_back();
        lines.push_back(line);
    }
    while (!lines.empty() && lines.back().find_first_not_of(" \t") == std::string::npos)
        lines.pop_back();
    return lines;
}

inline long long parse_int_line(const std::string& line, const std::string& fname,
                                std::size_t lineno) {
    try {
        std::size_t pos = 0;
        long long v = std::stoll(line, &pos);
        while (pos < line.size() && std::isspace(static_cast<unsigned char>(line[pos])))
            ++pos;
        if (pos != line.size())
            throw std::invalid_argument("trailing junk");
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error(fname + ":" + std::to_string(lineno) + ": expected an integer");
    }
}

inline std::vector<double> parse_csv_doubles(const std::string& line, const std::string& fname,
                                             std::size_t lineno) {
    std::vector<double> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        try {
            out.push_back(std::stod(cell));
        } catch (const std::exception&) {
            throw std::runtime_error(fname + ":" + std::to_string(lineno) +
                                     ": expected a real number, got '" + cell + "'");
        }
    }
    if (out.empty())
        throw std::runtime_error(fname + ":" + std::to_string(lineno) + ": empty line");
    return out;
}

} // namespace detail

inline Dataset parse_tudataset(const std::string& directory, const std::string& name,
                               std::ostream* warnings = nullptr) {
    auto path = [&](const std::string& suffix) { return directory + "/" + name + suffix; };

    const std::string ind_name = name + "_graph_indicator.txt";
    std::vector<std::string> ind_lines = detail::read_lines(path("_graph_indicator.txt"), ind_name, true);
    if (ind_lines.empty())
        throw std::runtime_error("parse error: " + ind_name + " is empty");

    const int total_nodes = static_cast<int>(ind_lines.size());
    std::vector<int> graph_of(static_cast<std::size_t>(total_nodes));
    std::vector<int> local_of(static_cast<std::size_t>(total_nodes));
    int num_graphs = 0;
    for (int i = 0; i < total_nodes; ++i) {
        long long gid = detail::parse_int_line(ind_lines[static_cast<std::size_t>(i)], ind_name,
                                               static_cast<std::size_t>(i) + 1);
        if (gid < 1)
            throw std::runtime_error(ind_name + ":" + std::to_string(i + 1) +
                                     ": graph ids must be positive");
        graph_of[static_cast<std::size_t>(i)] = static_cast<int>(gid);
        num_graphs = std::max(num_graphs, static_cast<int>(gid));
    }
    std::vector<int> node_count(static_cast<std::size_t>(num_graphs), 0);
    for (int i = 0; i < total_nodes; ++i)
        local_of[static_cast<std::size_t>(i)] =
            node_count[static_cast<std::size_t>(graph_of[static_cast<std::size_t>(i)]) - 1]++;
    for (int g = 0; g < num_graphs; ++g)
        if (node_count[static_cast<std::size_t>(g)] == 0)
            throw std::runtime_error("parse error: " + ind_name + " declares no nodes for graph " +
                                     std::to_string(g + 1));

    const std::string a_name = name + "_A.txt";
    std::vector<std::string> a_lines = detail::read_lines(path("_A.txt"), a_name, true);
    std::vector<std::set<std::pair<int, int>>> edges(static_cast<std::size_t>(num_graphs));
    int dropped = 0;
    for (std::size_t ln = 0; ln < a_lines.size(); ++ln) {
        std::string s = a_lines[ln];
        std::replace(s.begin(), s.end(), ',', ' ');
        std::istringstream es(s);
        long long u = 0, v = 0;
        if (!(es >> u >> v))
            throw std::runtime_error(a_name + ":" + std::to_string(ln + 1) + ": expected two node ids");
        if (u < 1 || v < 1 || u > total_nodes || v > total_nodes)
            throw std::runtime_error(a_name + ":" + std::to_string(ln + 1) +
                                     ": node id out of range (have " + std::to_string(total_nodes) +
                                     " nodes)");
        int gu = graph_of[static_cast<std::size_t>(u - 1)];
        int gv = graph_of[static_cast<std::size_t>(v - 1)];
        if (gu != gv)
            throw std::runtime_error(a_name + ":" + std::to_string(ln + 1) +
                                     ": edge endpoints belong to different graphs");
        if (u == v) {
            ++dropped;
            continue;
        }
        int lu = local_of[static_cast<std::size_t>(u - 1)];
        int lv = local_of[static_cast<std::size_t>(v - 1)];
        auto e = std::minmax(lu, lv);
        if (!edges[static_cast<std::size_t>(gu - 1)].emplace(e.first, e.second).second)
            ++dropped;
    }
    if (dropped > 0 && warnings)
        *warnings << "note: dropped " << dropped << " self-loop or duplicate edge entries in "
                  << a_name << "\n";

    Dataset ds;
    ds.name = name;
    ds.graphs.resize(static_cast<std::size_t>(num_graphs));
    for (int g = 0; g < num_graphs; ++g) {
        AttributedGraph& ag = ds.graphs[static_cast<std::size_t>(g)];
        ag.num_nodes = node_count[static_cast<std::size_t>(g)];
        ag.edges.assign(edges[static_cast<std::size_t>(g)].begin(),
                        edges[static_cast<std::size_t>(g)].end());
    }

    const std::string lab_name = name + "_graph_labels.txt";
    std::vector<std::string> lab_lines = detail::read_lines(path("_graph_labels.txt"), lab_name, false);
    if (!lab_lines.empty()) {
        if (static_cast<int>(lab_lines.size()) != num_graphs)
            throw std::runtime_error(lab_name + ": expected " + std::to_string(num_graphs) +
                                     " lines, got " + std::to_string(lab_lines.size()));
        std::vector<long long> raw(static_cast<std::size_t>(num_graphs));
        std::set<long long> distinct;
        for (int g = 0; g < num_graphs; ++g) {
            raw[static_cast<std::size_t>(g)] = detail::parse_int_line(
                lab_lines[static_cast<std::size_t>(g)], lab_name, static_cast<std::size_t>(g) + 1);
            distinct.insert(raw[static_cast<std::size_t>(g)]);
        }
        std::map<long long, int> remap;
        for (long long v : distinct)
            remap.emplace(v, static_cast<int>(remap.size()));
        for (int g = 0; g < num_graphs; ++g)
            ds.graphs[static_cast<std::size_t>(g)].label = remap.at(raw[static_cast<std::size_t>(g)]);
        ds.num_classes = static_cast<int>(distinct.size());
    }

    const std::string attr_name = name + "_node_attributes.txt";
    std::vector<std::string> attr_lines =
        detail::read_lines(path("_node_attributes.txt"), attr_name, false);
    if (!attr_lines.empty()) {
        if (static_cast<int>(attr_lines.size()) != total_nodes)
            throw std::runtime_error(attr_name + ": expected " + std::to_string(total_nodes) +
                                     " lines (one per node), got " + std::to_string(attr_lines.size()));
        std::vector<double> first = detail::parse_csv_doubles(attr_lines[0], attr_name, 1);
        const int dim = static_cast<int>(first.size());
        for (auto& g : ds.graphs)
            g.attributes = Mat::Zero(g.num_nodes, dim);
        for (int i = 0; i < total_nodes; ++i) {
            std::vector<double> row = detail::parse_csv_doubles(
                attr_lines[static_cast<std::size_t>(i)], attr_name, static_cast<std::size_t>(i) + 1);
            if (static_cast<int>(row.size()) != dim)
                throw std::runtime_error(attr_name + ":" + std::to_string(i + 1) +
                                         ": ragged attribute row");
            AttributedGraph& ag = ds.graphs[static_cast<std::size_t>(graph_of[static_cast<std::size_t>(i)]) - 1];
            for (int d = 0; d < dim; ++d)
                ag.attributes(local_of[static_cast<std::size_t>(i)], d) = row[static_cast<std::size_t>(d)];
        }
        ds.attribute_dim = dim;
    } else {
        const std::string nlab_name = name + "_node_labels.txt";
        std::vector<std::string> nlab_lines =
            detail::read_lines(path("_node_labels.txt"), nlab_name, false);
        if (!nlab_lines.empty()) {
            if (static_cast<int>(nlab_lines.size()) != total_nodes)
                throw std::runtime_error(nlab_name + ": expected " + std::to_string(total_nodes) +
                                         " lines (one per node), got " +
                                         std::to_string(nlab_lines.size()));
            std::vector<long long> raw(static_cast<std::size_t>(total_nodes));
            std::set<long long> distinct;
            for (int i = 0; i < total_nodes; ++i) {
                raw[static_cast<std::size_t>(i)] = detail::parse_int_line(
                    nlab_lines[static_cast<std::size_t>(i)], nlab_name,
                    static_cast<std::size_t>(i) + 1);
                distinct.insert(raw[static_cast<std::size_t>(i)]);
            }
            std::map<long long, int> remap;
            for (long long v : distinct)
                remap.emplace(v, static_cast<int>(remap.size()));
            const int dim = static_cast<int>(distinct.size());
            for (auto& g : ds.graphs)
                g.attributes = Mat::Zero(g.num_nodes, dim);
            for (int i = 0; i < total_nodes; ++i) {
                AttributedGraph& ag =
                    ds.graphs[static_cast<std::size_t>(graph_of[static_cast<std::size_t>(i)]) - 1];
                ag.attributes(local_of[static_cast<std::size_t>(i)],
                              remap.at(raw[static_cast<std::size_t>(i)])) = 1.0;
            }
            ds.attribute_dim = dim;
        }
    }

    for (auto& g : ds.graphs)
        g.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic datasets sampled from ground-truth step graphons.

enum class SynthKind { two_block_sbm, er, ring };

struct SynthParams {
    double p_in = 0.8;   // two_block_sbm
    double p_out = 0.1;
    double p = 0.45;     // er
    int partitions = 8;  // ring resolution
    int bandwidth = 1;   // ring: cells within this circular distance connect densely
    double p_band = 0.8;
    double p_off = 0.05;
};

inline StepGraphon synth_graphon(SynthKind kind, const SynthParams& params) {
    auto check01 = [](double p, const char* what) {
        if (!(p >= 0.0 && p <= 1.0))
            throw std::invalid_argument(std::string("synth_graphon: ") + what +
                                        " must lie in [0,1]");
    };
    switch (kind) {
    case SynthKind::two_block_sbm: {
        check01(params.p_in, "p_in");
        check01(params.p_out, "p_out");
        Mat v(2, 2);
        v << params.p_in, params.p_out, params.p_out, params.p_in;
        return StepGraphon(v);
    }
    case SynthKind::er: {
        check01(params.p, "p");
        Mat v(1, 1);
        v << params.p;
        return StepGraphon(v);
    }
    case SynthKind::ring: {
        check01(params.p_band, "p_band");
        check01(params.p_off, "p_off");
        if (params.partitions < 1 || params.bandwidth < 0)
            throw std::invalid_argument("synth_graphon: bad ring shape parameters");
        const int n = params.partitions;
        Mat v(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                int d = std::abs(i - j);
                d = std::min(d, n - d);
                v(i, j) = d <= params.bandwidth ? params.p_band : params.p_off;
            }
        return StepGraphon(v);
    }
    }
    throw std::invalid_argument("synth_graphon: unknown kind");
}

inline Dataset synth_dataset(SynthKind kind, const SynthParams& params, int count,
                             std::pair<int, int> size_range, Rng& rng) {
    if (count < 1)
        throw std::invalid_argument("synth_dataset: count must be positive");
    if (size_range.first < 1 || size_range.second < size_range.first)
        throw std::invalid_argument("synth_dataset: bad size range");
    StepGraphon g = synth_graphon(kind, params);
    Dataset ds;
    switch (kind) {
    case SynthKind::two_block_sbm: ds.name = "two_block_sbm"; break;
    case SynthKind::er: ds.name = "er"; break;
    case SynthKind::ring: ds.name = "ring"; break;
    }
    ds.num_classes = 1;
    ds.graphs.reserve(static_cast<std::size_t>(count));
    const int span = size_range.second - size_range.first + 1;
    for (int i = 0; i < count; ++i) {
        int k = size_range.first + static_cast<int>(rng.uniform_int(span));
        AttributedGraph ag = sample_graph(g, nullptr, k, 1.0, rng);
        ag.positions.clear(); // observed graphs carry no latent coordinates
        ag.label = 0;
        ds.graphs.push_back(std::move(ag));
    }
    return ds;
}

// Two-class benchmark: block-structured graphs vs Erdos-Renyi graphs whose
// edge probability matches the blocks' overall mean density.
inline Dataset two_vs_er_dataset(int per_class, std::pair<int, int> size_range, Rng& rng) {
    SynthParams sbm;
    SynthParams er;
    er.p = (2.0 * sbm.p_in + 2.0 * sbm.p_out) / 4.0;
    Dataset a = synth_dataset(SynthKind::two_block_sbm, sbm, per_class, size_range, rng);
    Dataset b = synth_dataset(SynthKind::er, er, per_class, size_range, rng);
    Dataset ds;
    ds.name = "two_vs_er";
    ds.num_classes = 2;
    ds.graphs = std::move(a.graphs);
    for (auto& g : b.graphs) {
        g.label = 1;
        ds.graphs.push_back(std::move(g));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Attribute preprocessing: optional degree-profile features for attribute-free
// datasets, then per-dimension z-scoring with statistics kept for reuse.

struct Normalization {
    Vec mean;
    Vec std;
    bool uses_ldp = false;
};

inline Dataset with_ldp_attributes(const Dataset& ds) {
    Dataset out = ds;
    for (auto& g : out.graphs)
        g.attributes = local_degree_profile(g).values;
    out.attribute_dim = 5;
    return out;
}

inline Normalization compute_normalization(const Dataset& ds) {
    if (ds.attribute_dim < 1)
        throw std::invalid_argument("compute_normalization: dataset has no attributes");
    const int m = ds.attribute_dim;
    Vec sum = Vec::Zero(m), sumsq = Vec::Zero(m);
    long long count = 0;
    for (const auto& g : ds.graphs) {
        for (int i = 0; i < g.num_nodes; ++i) {
            Vec row = g.attributes.row(i).transpose();
            sum += row;
            sumsq += row.cwiseProduct(row);
        }
        count += g.num_nodes;
    }
    Normalization nm;
    nm.mean = sum / static_cast<double>(count);
    Vec var = sumsq / static_cast<double>(count) - nm.mean.cwiseProduct(nm.mean);
    nm.std = var.cwiseMax(0.0).cwiseSqrt();
    for (int d = 0; d < m; ++d)
        if (nm.std(d) < 1e-12)
            nm.std(d) = 1.0;
    return nm;
}

inline void apply_normalization(Dataset& ds, const Normalization& nm) {
    if (ds.attribute_dim != static_cast<int>(nm.mean.size()))
        throw std::invalid_argument("apply_normalization: attribute dimension mismatch");
    for (auto& g : ds.graphs)
        for (int i = 0; i < g.num_nodes; ++i)
            g.attributes.row(i) =
                (g.attributes.row(i).transpose() - nm.mean).cwiseQuotient(nm.std).transpose();
}

// Builds the model-ready view of a dataset. When `frozen` is given its
// statistics are reused (transfer); otherwise fresh statistics are computed
// and returned through `out`.
inline Dataset prepare_inputs(const Dataset& ds, const Normalization* frozen, Normalization* out) {
    Dataset work = ds;
    bool ldp = frozen ? frozen->uses_ldp : ds.attribute_dim == 0;
    if (ldp)
        work = with_ldp_attributes(work);
    Normalization nm;
    if (frozen) {
        nm = *frozen;
        if (work.attribute_dim != static_cast<int>(nm.mean.size()))
            throw std::invalid_argument("prepare_inputs: attribute dimension incompatible with the model");
    } else {
        nm = compute_normalization(work);
        nm.uses_ldp = ldp;
    }
    apply_normalization(work, nm);
    if (out)
        *out = nm;
    return work;
}

// ---------------------------------------------------------------------------
// Checkpoints: one structured text document holding everything a run needs
// to be resumed or applied elsewhere. Factor logits are stored as full
// matrices; load re-packs them and rejects asymmetric tampering.

struct Checkpoint {
    int schema_version = 1;
    TrainConfig config;
    Model model;
    Normalization normalization;
    std::vector<EpochStats> history;
};

namespace detail {

inline nlohmann::ordered_json vec_json(const Vec& v) {
    nlohmann::ordered_json a = nlohmann::ordered_json::array();
    for (int i = 0; i < v.size(); ++i)
        a.push_back(v(i));
    return a;
}

inline nlohmann::ordered_json mat_json(const Mat& m) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (int r = 0; r < m.rows(); ++r) {
        nlohmann::ordered_json row = nlohmann::ordered_json::array();
        for (int c = 0; c < m.cols(); ++c)
            row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Vec vec_from_json(const nlohmann::json& j, const std::string& what) {
    if (!j.is_array())
        throw std::runtime_error("checkpoint: " + what + " must be an array");
    Vec v(static_cast<int>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number())
            throw std::runtime_error("checkpoint: " + what + " has a non-numeric entry");
        v(static_cast<int>(i)) = j[i].get<double>();
    }
    if (!v.allFinite())
        throw std::runtime_error("checkpoint: " + what + " has non-finite entries");
    return v;
}

inline Mat mat_from_json(const nlohmann::json& j, const std::string& what) {
    if (!j.is_array() || j.empty())
        throw std::runtime_error("checkpoint: " + what + " must be a non-empty array of rows");
    const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
    Mat m(static_cast<int>(j.size()), static_cast<int>(cols));
    for (std::size_t r = 0; r < j.size(); ++r) {
        if (!j[r].is_array() || j[r].size() != cols)
            throw std::runtime_error("checkpoint: " + what + " is ragged");
        for (std::size_t c = 0; c < cols; ++c) {
            if (!j[r][c].is_number())
                throw std::runtime_error("checkpoint: " + what + " has a non-numeric entry");
            m(static_cast<int>(r), static_cast<int>(c)) = j[r][c].get<double>();
        }
    }
    if (!m.allFinite())
        throw std::runtime_error("checkpoint: " + what + " has non-finite entries");
    return m;
}

} // namespace detail

inline void save_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
    using json = nlohmann::ordered_json;
    json j;
    j["schema_version"] = ckpt.schema_version;

    json cfg;
    cfg["batch_size"] = ckpt.config.batch_size;
    cfg["learning_rate"] = ckpt.config.learning_rate;
    cfg["epochs"] = ckpt.config.epochs;
    cfg["samples_per_graphon"] = ckpt.config.samples_per_graphon;
    cfg["sample_size"] = ckpt.config.sample_size;
    cfg["gamma"] = ckpt.config.gamma;
    cfg["cheb_order"] = ckpt.config.cheb_order;
    cfg["feature_dim"] = ckpt.config.feature_dim;
    cfg["latent_dim"] = ckpt.config.latent_dim;
    cfg["fgw_order"] = ckpt.config.fgw_order;
    cfg["sfgw_projections"] = ckpt.config.sfgw_projections;
    cfg["signal_sigma"] = ckpt.config.signal_sigma;
    cfg["seed"] = ckpt.config.seed;
    j["config"] = std::move(cfg);

    const EncoderParams& enc = ckpt.model.encoder;
    json je;
    je["input_normalization"] = {{"mean", detail::vec_json(ckpt.normalization.mean)},
                                 {"std", detail::vec_json(ckpt.normalization.std)},
                                 {"uses_ldp", ckpt.normalization.uses_ldp}};
    json thetas = json::array();
    for (const Mat& t : enc.theta)
        thetas.push_back(detail::mat_json(t));
    je["theta"] = std::move(thetas);
    json tbias = json::array();
    for (const Vec& b : enc.theta_bias)
        tbias.push_back(detail::vec_json(b));
    je["theta_bias"] = std::move(tbias);
    je["mlp_hidden"] = detail::mat_json(enc.mlp_hidden);
    je["mlp_hidden_bias"] = detail::vec_json(enc.mlp_hidden_bias);
    je["mlp_out"] = detail::mat_json(enc.mlp_out);
    je["mlp_out_bias"] = detail::vec_json(enc.mlp_out_bias);
    j["encoder"] = std::move(je);

    json jd;
    jd["activation"] = activation_name(ckpt.model.decoder.activation);
    json factors = json::array();
    for (const DecoderFactor& f : ckpt.model.decoder.factors) {
        json jf;
        jf["partitions"] = f.partitions;
        jf["logits"] = detail::mat_json(f.logits_full());
        jf["signal"] = detail::mat_json(f.signal);
        factors.push_back(std::move(jf));
    }
    jd["factors"] = std::move(factors);
    j["decoder"] = std::move(jd);

    j["prior"] = {{"means", detail::mat_json(ckpt.model.prior.means)},
                  {"log_stds", detail::mat_json(ckpt.model.prior.log_stds)}};

    json hist = json::array();
    for (const EpochStats& e : ckpt.history)
        hist.push_back({{"loss", e.loss}, {"recon", e.recon}, {"reg", e.reg}});
    j["history"] = std::move(hist);

    os << j.dump(2) << "\n";
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("save_checkpoint: cannot open " + path);
    save_checkpoint(out, ckpt);
    if (!out)
        throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(std::istream& is) {
    nlohmann::json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("checkpoint: malformed document: ") + e.what());
    }
    auto need = [](const nlohmann::json& obj, const char* key) -> const nlohmann::json& {
        auto it = obj.find(key);
        if (it == obj.end())
            throw std::runtime_error(std::string("checkpoint: missing field ") + key);
        return *it;
    };

    Checkpoint ckpt;
    const nlohmann::json& ver = need(j, "schema_version");
    if (!ver.is_number_integer() || ver.get<int>() != 1)
        throw std::runtime_error("checkpoint: unsupported version");
    ckpt.schema_version = 1;

    const nlohmann::json& cfg = need(j, "config");
    ckpt.config.batch_size = need(cfg, "batch_size").get<int>();
    ckpt.config.learning_rate = need(cfg, "learning_rate").get<double>();
    ckpt.config.epochs = need(cfg, "epochs").get<int>();
    ckpt.config.samples_per_graphon = need(cfg, "samples_per_graphon").get<int>();
    ckpt.config.sample_size = need(cfg, "sample_size").get<int>();
    ckpt.config.gamma = need(cfg, "gamma").get<double>();
    ckpt.config.cheb_order = need(cfg, "cheb_order").get<int>();
    ckpt.config.feature_dim = need(cfg, "feature_dim").get<int>();
    ckpt.config.latent_dim = need(cfg, "latent_dim").get<int>();
    ckpt.config.fgw_order = need(cfg, "fgw_order").get<int>();
    ckpt.config.sfgw_projections = need(cfg, "sfgw_projections").get<int>();
    ckpt.config.signal_sigma = need(cfg, "signal_sigma").get<double>();
    ckpt.config.seed = need(cfg, "seed").get<std::uint64_t>();
    if (ckpt.config.batch_size < 1 || ckpt.config.epochs < 0 ||
        ckpt.config.samples_per_graphon < 1 || ckpt.config.sample_size < 1 ||
        ckpt.config.cheb_order < 0 || ckpt.config.feature_dim < 1 || ckpt.config.latent_dim < 1 ||
        ckpt.config.sfgw_projections < 1)
        throw std::runtime_error("checkpoint: config counts out of range");
    if (!(ckpt.config.learning_rate > 0.0) || !(ckpt.config.gamma >= 0.0) ||
        !(ckpt.config.signal_sigma > 0.0))
        throw std::runtime_error("checkpoint: config reals out of range");
    if (ckpt.config.fgw_order != 1 && ckpt.config.fgw_order != 2)
        throw std::runtime_error("checkpoint: fgw_order must be 1 or 2");

    const nlohmann::json& je = need(j, "encoder");
    const nlohmann::json& jn = need(je, "input_normalization");
    ckpt.normalization.mean = detail::vec_from_json(need(jn, "mean"), "normalization mean");
    ckpt.normalization.std = detail::vec_from_json(need(jn, "std"), "normalization std");
    ckpt.normalization.uses_ldp = need(jn, "uses_ldp").get<bool>();
    if (ckpt.normalization.mean.size() != ckpt.normalization.std.size())
        throw std::runtime_error("checkpoint: normalization mean/std sizes differ");
    for (int d = 0; d < ckpt.normalization.std.size(); ++d)
        if (!(ckpt.normalization.std(d) > 0.0))
            throw std::runtime_error("checkpoint: normalization std must be positive");

    EncoderParams& enc = ckpt.model.encoder;
    const nlohmann::json& thetas = need(je, "theta");
    const nlohmann::json& tbias = need(je, "theta_bias");
    if (!thetas.is_array() || thetas.empty() || !tbias.is_array() || tbias.size() != thetas.size())
        throw std::runtime_error("checkpoint: theta and theta_bias must be parallel non-empty arrays");
    for (std::size_t i = 0; i < thetas.size(); ++i) {
        enc.theta.push_back(detail::mat_from_json(thetas[i], "theta"));
        enc.theta_bias.push_back(detail::vec_from_json(tbias[i], "theta_bias"));
    }
    enc.mlp_hidden = detail::mat_from_json(need(je, "mlp_hidden"), "mlp_hidden");
    enc.mlp_hidden_bias = detail::vec_from_json(need(je, "mlp_hidden_bias"), "mlp_hidden_bias");
    enc.mlp_out = detail::mat_from_json(need(je, "mlp_out"), "mlp_out");
    enc.mlp_out_bias = detail::vec_from_json(need(je, "mlp_out_bias"), "mlp_out_bias");
    for (std::size_t i = 0; i < enc.theta.size(); ++i) {
        if (enc.theta[i].rows() != enc.theta[0].rows() || enc.theta[i].cols() != enc.theta[0].cols())
            throw std::runtime_error("checkpoint: theta matrices disagree in shape");
        if (enc.theta_bias[i].size() != enc.theta[0].cols())
            throw std::runtime_error("checkpoint: theta_bias length mismatch");
    }
    if (enc.mlp_hidden.rows() != enc.theta[0].cols() ||
        enc.mlp_hidden.cols() != enc.mlp_hidden.rows() ||
        enc.mlp_hidden_bias.size() != enc.mlp_hidden.cols() ||
        enc.mlp_out.rows() != enc.mlp_hidden.cols() || enc.mlp_out_bias.size() != enc.mlp_out.cols())
        throw std::runtime_error("checkpoint: encoder layer shapes inconsistent");
    if (enc.signal_dim() != static_cast<int>(ckpt.normalization.mean.size()))
        throw std::runtime_error("checkpoint: normalization does not match encoder input width");

    const nlohmann::json& jd = need(j, "decoder");
    ckpt.model.decoder.activation = activation_from_name(need(jd, "activation").get<std::string>());
    const nlohmann::json& factors = need(jd, "factors");
    if (!factors.is_array() || factors.empty())
        throw std::runtime_error("checkpoint: decoder needs at least one factor");
    int signal_dim = -1;
    for (const auto& jf : factors) {
        DecoderFactor f;
        f.partitions = need(jf, "partitions").get<int>();
        if (f.partitions < 1)
            throw std::runtime_error("checkpoint: factor partitions must be positive");
        Mat full = detail::mat_from_json(need(jf, "logits"), "factor logits");
        if (full.rows() != f.partitions || full.cols() != f.partitions)
            throw std::runtime_error("checkpoint: factor logits shape does not match partitions");
        for (int r = 0; r < full.rows(); ++r)
            for (int c = r + 1; c < full.cols(); ++c)
                if (full(r, c) != full(c, r))
                    throw std::runtime_error("checkpoint: factor logits not symmetric");
        f.logits_upper = Vec(DecoderFactor::packed_size(f.partitions));
        for (int r = 0; r < f.partitions; ++r)
            for (int c = r; c < f.partitions; ++c)
                f.logits_upper(f.packed_index(r, c)) = full(r, c);
        f.signal = detail::mat_from_json(need(jf, "signal"), "factor signal");
        if (f.signal.rows() != f.partitions)
            throw std::runtime_error("checkpoint: factor signal must have one row per partition");
        if (signal_dim < 0)
            signal_dim = static_cast<int>(f.signal.cols());
        else if (signal_dim != f.signal.cols())
            throw std::runtime_error("checkpoint: factor signal widths disagree");
        ckpt.model.decoder.factors.push_back(std::move(f));
    }
    if (static_cast<int>(ckpt.model.decoder.factors.size()) != enc.latent_dim())
        throw std::runtime_error("checkpoint: factor count must equal the latent dimension");

    const nlohmann::json& jp = need(j, "prior");
    ckpt.model.prior.means = detail::mat_from_json(need(jp, "means"), "prior means");
    ckpt.model.prior.log_stds = detail::mat_from_json(need(jp, "log_stds"), "prior log_stds");
    if (ckpt.model.prior.means.rows() != ckpt.model.prior.log_stds.rows() ||
        ckpt.model.prior.means.cols() != ckpt.model.prior.log_stds.cols())
        throw std::runtime_error("checkpoint: prior means/log_stds shapes differ");
    if (ckpt.model.prior.latent_dim() != enc.latent_dim())
        throw std::runtime_error("checkpoint: prior dimension must equal the latent dimension");

    const nlohmann::json& hist = need(j, "history");
    if (!hist.is_array())
        throw std::runtime_error("checkpoint: history must be an array");
    for (const auto& he : hist) {
        EpochStats e;
        e.loss = need(he, "loss").get<double>();
        e.recon = need(he, "recon").get<double>();
        e.reg = need(he, "reg").get<double>();
        ckpt.history.push_back(e);
    }
    return ckpt;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("load_checkpoint: cannot open " + path);
    return load_checkpoint(in);
}

// ---------------------------------------------------------------------------
// Tabular exports: embeddings and training history, 9 significant digits.

namespace detail {

inline void write_g9(std::ostream& os, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    os << buf;
}

} // namespace detail

struct EmbeddingTable {
    std::vector<long long> ids;
    std::vector<int> labels; // -1 when unlabeled
    std::vector<Vec> codes;
};

inline void export_embeddings(std::ostream& os, const EmbeddingTable& table, int latent_dim) {
    os << "graph_id,label";
    for (int c = 0; c < latent_dim; ++c)
        os << ",z_" << c;
    os << "\n";
    for (std::size_t r = 0; r < table.ids.size(); ++r) {
        os << table.ids[r] << "," << table.labels[r];
        for (int c = 0; c < latent_dim; ++c) {
            os << ",";
            detail::write_g9(os, table.codes[r](c));
        }
        os << "\n";
    }
}

inline EmbeddingTable read_embeddings(std::istream& is) {
    std::string header;
    if (!std::getline(is, header))
        throw std::runtime_error("embeddings: empty file");
    if (header.rfind("graph_id,label", 0) != 0)
        throw std::runtime_error("embeddings: unexpected header");
    EmbeddingTable table;
    std::string line;
    std::size_t lineno = 1;
    std::size_t dim = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos)
            continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ','))
            cells.push_back(cell);
        if (cells.size() < 3)
            throw std::runtime_error("embeddings:" + std::to_string(lineno) + ": too few columns");
        if (table.codes.empty())
            dim = cells.size() - 2;
        else if (cells.size() - 2 != dim)
            throw std::runtime_error("embeddings:" + std::to_string(lineno) + ": ragged row");
        try {
            table.ids.push_back(std::stoll(cells[0]));
            table.labels.push_back(std::stoi(cells[1]));
            Vec z(static_cast<int>(dim));
            for (std::size_t c = 0; c < dim; ++c)
                z(static_cast<int>(c)) = std::stod(cells[c + 2]);
            table.codes.push_back(std::move(z));
        } catch (const std::exception&) {
            throw std::runtime_error("embeddings:" + std::to_string(lineno) + ": bad numeric cell");
        }
    }
    return table;
}

inline void write_history(std::ostream& os, const std::vector<EpochStats>& history) {
    os << "epoch,loss,recon,reg\n";
    for (std::size_t e = 0; e < history.size(); ++e) {
        os << (e + 1) << ",";
        detail::write_g9(os, history[e].loss);
        os << ",";
        detail::write_g9(os, history[e].recon);
        os << ",";
        detail::write_g9(os, history[e].reg);
        os << "\n";
    }
}

} // namespace gnae
