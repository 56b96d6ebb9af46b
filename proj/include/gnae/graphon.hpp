#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gnae/rng.hpp"

namespace gnae {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Step function on [0,1]^2: symmetric matrix of edge probabilities over
// `partitions` equal-width cells per axis.
struct StepGraphon {
    Mat values;
    int partitions = 0;

    StepGraphon() = default;

    explicit StepGraphon(Mat v) : values(std::move(v)), partitions(static_cast<int>(values.rows())) {
        if (partitions < 1 || values.cols() != values.rows())
            throw std::invalid_argument("StepGraphon: matrix must be square and non-empty");
        for (int i = 0; i < partitions; ++i) {
            for (int j = 0; j < partitions; ++j) {
                double x = values(i, j);
                if (!(x >= 0.0 && x <= 1.0))
                    throw std::invalid_argument("StepGraphon: entries must lie in [0,1]");
                if (x != values(j, i))
                    throw std::invalid_argument("StepGraphon: matrix must be symmetric");
            }
        }
    }
};

// Step function on [0,1] with vector values: one row per cell.
struct StepSignal {
    Mat values; // partitions x dim
    int partitions = 0;
    int dim = 0;

    StepSignal() = default;

    explicit StepSignal(Mat v)
        : values(std::move(v)),
          partitions(static_cast<int>(values.rows())),
          dim(static_cast<int>(values.cols())) {
        if (partitions < 1 || dim < 1)
            throw std::invalid_argument("StepSignal: matrix must be non-empty");
        if (!values.allFinite())
            throw std::invalid_argument("StepSignal: entries must be finite");
    }
};

// Which cell of an n-way equal partition of [0,1] the point t falls in.
// The right boundary belongs to the last cell.
inline int partition_index(double t, int n) {
    if (!(t >= 0.0 && t <= 1.0))
        throw std::invalid_argument("partition_index: point must lie in [0,1]");
    if (n < 1)
        throw std::invalid_argument("partition_index: need at least one cell");
    int idx = static_cast<int>(std::floor(t * n));
    return std::min(idx, n - 1);
}

inline double evaluate(const StepGraphon& g, double u, double v) {
    return g.values(partition_index(u, g.partitions), partition_index(v, g.partitions));
}

inline Vec evaluate(const StepSignal& s, double u) {
    return s.values.row(partition_index(u, s.partitions)).transpose();
}

// Simple undirected graph with optional node attributes, labels, and the
// latent positions it was sampled at. Edges are stored as i<j pairs, sorted
// and without duplicates.
struct AttributedGraph {
    int num_nodes = 0;
    std::vector<std::pair<int, int>> edges;
    Mat attributes;               // num_nodes x dim; 0x0 when absent
    std::optional<int> label;
    std::vector<double> positions; // empty when unknown

    bool has_attributes() const { return attributes.size() > 0; }
    bool has_positions() const { return !positions.empty(); }
    int attribute_dim() const { return has_attributes() ? static_cast<int>(attributes.cols()) : 0; }

    void validate() const {
        if (num_nodes < 1)
            throw std::invalid_argument("AttributedGraph: need at least one node");
        for (auto [i, j] : edges) {
            if (i < 0 || j < 0 || i >= num_nodes || j >= num_nodes)
                throw std::invalid_argument("AttributedGraph: edge endpoint out of range");
            if (i >= j)
                throw std::invalid_argument("AttributedGraph: edges must be stored as i<j");
        }
        for (std::size_t e = 1; e < edges.size(); ++e)
            if (!(edges[e - 1] < edges[e]))
                throw std::invalid_argument("AttributedGraph: edges must be sorted and unique");
        if (has_attributes() && attributes.rows() != num_nodes)
            throw std::invalid_argument("AttributedGraph: one attribute row per node required");
        if (has_positions() && static_cast<int>(positions.size()) != num_nodes)
            throw std::invalid_argument("AttributedGraph: one position per node required");
    }
};

inline Mat adjacency_matrix(const AttributedGraph& g) {
    Mat a = Mat::Zero(g.num_nodes, g.num_nodes);
    for (auto [i, j] : g.edges) {
        a(i, j) = 1.0;
        a(j, i) = 1.0;
    }
    return a;
}

// The K-node graph as a step graphon over K equal cells (0/1 values, zero
// diagonal), plus its attributes as a step signal when present.
inline std::pair<StepGraphon, std::optional<StepSignal>> induce_graphon(const AttributedGraph& g) {
    g.validate();
    StepGraphon gw(adjacency_matrix(g));
    std::optional<StepSignal> sig;
    if (g.has_attributes())
        sig = StepSignal(g.attributes);
    return {std::move(gw), std::move(sig)};
}

// Draw a K-node graph: latent positions uniform on [0,1], each unordered
// pair wired independently with probability g at the positions, attributes
// Gaussian around the signal value. Draw order is fixed: positions, then
// edges with k<k' in lexicographic order, then attribute noise row-major.
inline AttributedGraph sample_graph(const StepGraphon& g, const StepSignal* s, int k,
                                    double sigma, Rng& rng) {
    if (k < 1)
        throw std::invalid_argument("sample_graph: need at least one node");
    if (s && !(sigma > 0.0))
        throw std::invalid_argument("sample_graph: sigma must be positive");
    if (s && s->partitions != g.partitions)
        throw std::invalid_argument("sample_graph: signal and graphon partitions differ");

    AttributedGraph out;
    out.num_nodes = k;
    out.positions.resize(k);
    for (int i = 0; i < k; ++i)
        out.positions[i] = rng.uniform();
    for (int i = 0; i < k; ++i)
        for (int j = i + 1; j < k; ++j)
            if (rng.bernoulli(evaluate(g, out.positions[i], out.positions[j])))
                out.edges.emplace_back(i, j);
    if (s) {
        out.attributes.resize(k, s->dim);
        for (int i = 0; i < k; ++i) {
            Vec mean = evaluate(*s, out.positions[i]);
            for (int d = 0; d < s->dim; ++d)
                out.attributes(i, d) = mean(d) + sigma * rng.normal();
        }
    }
    return out;
}

// Number of cells in the coarsest common refinement of equal-width
// partitions with the given cell counts: interior cut points are the
// fractions i/N_c, compared exactly as reduced rationals.
inline int merged_partition_count(const std::vector<int>& counts) {
    if (counts.empty())
        throw std::invalid_argument("merged_partition_count: need at least one count");
    std::set<std::pair<long long, long long>> cuts;
    for (int n : counts) {
        if (n < 1)
            throw std::invalid_argument("merged_partition_count: counts must be positive");
        for (long long i = 1; i < n; ++i) {
            long long g = std::gcd(i, static_cast<long long>(n));
            cuts.emplace(i / g, n / g);
        }
    }
    return static_cast<int>(cuts.size()) + 1;
}

// Degree statistics per node: own degree plus min/max/mean/std over the
// neighbours' degrees. Isolated nodes get all zeros.
inline StepSignal local_degree_profile(const AttributedGraph& g) {
    g.validate();
    std::vector<int> degree(g.num_nodes, 0);
    std::vector<std::vector<int>> nbrs(g.num_nodes);
    for (auto [i, j] : g.edges) {
        ++degree[i];
        ++degree[j];
        nbrs[i].push_back(j);
        nbrs[j].push_back(i);
    }
    Mat out = Mat::Zero(g.num_nodes, 5);
    for (int v = 0; v < g.num_nodes; ++v) {
        if (degree[v] == 0)
            continue;
        double mn = 1e300, mx = -1e300, sum = 0.0, sumsq = 0.0;
        for (int u : nbrs[v]) {
            double d = degree[u];
            mn = std::min(mn, d);
            mx = std::max(mx, d);
            sum += d;
            sumsq += d * d;
        }
        double cnt = static_cast<double>(degree[v]);
        double mean = sum / cnt;
        double var = std::max(0.0, sumsq / cnt - mean * mean);
        out(v, 0) = degree[v];
        out(v, 1) = mn;
        out(v, 2) = mx;
        out(v, 3) = mean;
        out(v, 4) = std::sqrt(var);
    }
    return StepSignal(out);
}

// Text format: "N M" header, M lines "i j", then optionally N lines of
// comma-separated attribute values.
inline void write_graph_text(std::ostream& os, const AttributedGraph& g) {
    g.validate();
    os << g.num_nodes << " " << g.edges.size() << "\n";
    for (auto [i, j] : g.edges)
        os << i << " " << j << "\n";
    if (g.has_attributes()) {
        char buf[64];
        for (int r = 0; r < g.num_nodes; ++r) {
            for (int c = 0; c < g.attributes.cols(); ++c) {
                std::snprintf(buf, sizeof(buf), "%.9g", g.attributes(r, c));
                os << (c ? "," : "") << buf;
            }
            os << "\n";
        }
    }
}

inline AttributedGraph read_graph_text(std::istream& is) {
    std::string line;
    auto next_line = [&](std::string& out) {
        while (std::getline(is, line)) {
            if (line.find_first_not_of(" \t\r") == std::string::npos)
                continue;
            out = line;
            return true;
        }
        return false;
    };
    std::string header;
    if (!next_line(header))
        throw std::runtime_error("graph text: empty input");
    std::istringstream hs(header);
    long long n = 0, m = 0;
    if (!(hs >> n >> m) || n < 1 || m < 0)
        throw std::runtime_error("graph text: bad header line");
    AttributedGraph g;
    g.num_nodes = static_cast<int>(n);
    std::set<std::pair<int, int>> seen;
    for (long long e = 0; e < m; ++e) {
        std::string el;
        if (!next_line(el))
            throw std::runtime_error("graph text: missing edge line");
        std::istringstream es(el);
        long long i = 0, j = 0;
        if (!(es >> i >> j))
            throw std::runtime_error("graph text: bad edge line");
        if (i < 0 || j < 0 || i >= n || j >= n)
            throw std::runtime_error("graph text: edge endpoint out of range");
        if (i == j)
            throw std::runtime_error("graph text: self loops not allowed");
        seen.emplace(std::min(i, j), std::max(i, j));
    }
    g.edges.assign(seen.begin(), seen.end());

    std::vector<std::vector<double>> rows;
    std::string al;
    while (next_line(al)) {
        std::vector<double> row;
        std::istringstream as(al);
        std::string cell;
        while (std::getline(as, cell, ','))
            row.push_back(std::stod(cell));
        rows.push_back(std::move(row));
    }
    if (!rows.empty()) {
        if (static_cast<long long>(rows.size()) != n)
            throw std::runtime_error("graph text: expected one attribute line per node");
        std::size_t dim = rows[0].size();
        if (dim == 0)
            throw std::runtime_error("graph text: empty attribute line");
        g.attributes.resize(n, static_cast<int>(dim));
        for (long long r = 0; r < n; ++r) {
            if (rows[r].size() != dim)
                throw std::runtime_error("graph text: ragged attribute lines");
            for (std::size_t c = 0; c < dim; ++c)
                g.attributes(r, static_cast<int>(c)) = rows[r][c];
        }
    }
    g.validate();
    return g;
}

} // namespace gnae
