#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gnae/train.hpp"

namespace gnae {

// ---------------------------------------------------------------------------
// Euclidean k-NN with majority vote. Vote ties go to the label with the
// smallest mean distance among its voters, then to the lowest label.

inline std::vector<int> knn_classify(const std::vector<Vec>& train_codes,
                                     const std::vector<int>& train_labels,
                                     const std::vector<Vec>& test_codes, int k) {
    if (train_codes.empty())
        throw std::invalid_argument("knn_classify: empty training set");
    if (train_codes.size() != train_labels.size())
        throw std::invalid_argument("knn_classify: one label per training code required");
    if (k < 1 || k > static_cast<int>(train_codes.size()))
        throw std::invalid_argument("knn_classify: k must lie in [1, train size]");

    std::vector<int> predicted;
    predicted.reserve(test_codes.size());
    std::vector<std::pair<double, int>> dist(train_codes.size());
    for (const Vec& q : test_codes) {
        for (std::size_t i = 0; i < train_codes.size(); ++i)
            dist[i] = {(train_codes[i] - q).norm(), static_cast<int>(i)};
        std::sort(dist.begin(), dist.end());

        std::map<int, std::pair<int, double>> votes; // label -> (count, distance sum)
        for (int i = 0; i < k; ++i) {
            auto& v = votes[train_labels[static_cast<std::size_t>(dist[static_cast<std::size_t>(i)].second)]];
            v.first += 1;
            v.second += dist[static_cast<std::size_t>(i)].first;
        }
        int best_label = -1;
        int best_count = -1;
        double best_mean = 0.0;
        for (const auto& [label, v] : votes) {
            double mean = v.second / v.first;
            bool wins = v.first > best_count ||
                        (v.first == best_count && mean < best_mean) ||
                        (v.first == best_count && mean == best_mean && label < best_label);
            if (wins) {
                best_label = label;
                best_count = v.first;
                best_mean = mean;
            }
        }
        predicted.push_back(best_label);
    }
    return predicted;
}

// ---------------------------------------------------------------------------
// Stratified cross-validation of a k-NN classifier over fixed codes.

struct EvalReport {
    double accuracy_mean = 0.0;
    double accuracy_std = 0.0;
    std::vector<double> fold_accuracies;
    std::string protocol;
};

inline EvalReport cross_validate(const std::vector<Vec>& codes, const std::vector<int>& labels,
                                 int folds, int k, std::uint64_t seed,
                                 std::ostream* warn = nullptr) {
    if (codes.size() != labels.size())
        throw std::invalid_argument("cross_validate: one label per code required");
    const int n = static_cast<int>(codes.size());
    if (folds < 2)
        throw std::invalid_argument("cross_validate: need at least two folds");
    if (n < folds)
        throw std::invalid_argument("cross_validate: fewer points than folds");

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng::derive(seed, "cv");
    detail::shuffle_indices(order, rng);

    std::map<int, std::vector<int>> by_class; // label -> indices in shuffled order
    for (int i : order)
        by_class[labels[static_cast<std::size_t>(i)]].push_back(i);
    bool stratified = true;
    for (const auto& [label, members] : by_class)
        if (static_cast<int>(members.size()) < folds)
            stratified = false;

    std::vector<int> fold_of(static_cast<std::size_t>(n));
    if (stratified) {
        for (const auto& [label, members] : by_class)
            for (std::size_t i = 0; i < members.size(); ++i)
                fold_of[static_cast<std::size_t>(members[i])] = static_cast<int>(i) % folds;
    } else {
        if (warn)
            *warn << "note: a class has fewer members than folds; falling back to unstratified splits\n";
        for (std::size_t i = 0; i < order.size(); ++i)
            fold_of[static_cast<std::size_t>(order[i])] = static_cast<int>(i) % folds;
    }

    EvalReport report;
    for (int f = 0; f < folds; ++f) {
        std::vector<Vec> train_codes, test_codes;
        std::vector<int> train_labels, test_labels;
        for (int i = 0; i < n; ++i) {
            if (fold_of[static_cast<std::size_t>(i)] == f) {
                test_codes.push_back(codes[static_cast<std::size_t>(i)]);
                test_labels.push_back(labels[static_cast<std::size_t>(i)]);
            } else {
                train_codes.push_back(codes[static_cast<std::size_t>(i)]);
                train_labels.push_back(labels[static_cast<std::size_t>(i)]);
            }
        }
        int kf = std::min(k, static_cast<int>(train_codes.size()));
        std::vector<int> pred = knn_classify(train_codes, train_labels, test_codes, kf);
        int correct = 0;
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == test_labels[i])
                ++correct;
        report.fold_accuracies.push_back(test_labels.empty()
                                             ? 1.0
                                             : static_cast<double>(correct) /
                                                   static_cast<double>(test_labels.size()));
    }

    double sum = 0.0;
    for (double a : report.fold_accuracies)
        sum += a;
    report.accuracy_mean = sum / folds;
    double var = 0.0;
    for (double a : report.fold_accuracies)
        var += (a - report.accuracy_mean) * (a - report.accuracy_mean);
    report.accuracy_std = std::sqrt(var / folds);

    char buf[96];
    std::snprintf(buf, sizeof(buf), "%s%d-fold %d-NN", stratified ? "stratified " : "unstratified ",
                  folds, k);
    report.protocol = buf;
    return report;
}

// Applies a frozen model (with its stored normalization) to another dataset
// and cross-validates the resulting codes against that dataset's labels.
inline EvalReport transfer_eval(const Model& model, const Normalization& nm,
                                const std::string& source_name, const Dataset& target, int folds,
                                int k, std::uint64_t seed, std::ostream* warn = nullptr) {
    std::vector<Vec> codes = embed_graphs(target, model, nm);
    std::vector<int> labels;
    labels.reserve(target.graphs.size());
    for (const auto& g : target.graphs)
        labels.push_back(g.label.value_or(0));
    EvalReport report = cross_validate(codes, labels, folds, k, seed, warn);
    report.protocol = source_name + "->" + target.name + " " + report.protocol;
    return report;
}

// ---------------------------------------------------------------------------
// Multi-size generation check: one latent draw, one decoded graphon, graphs
// sampled at several sizes; their empirical densities should all sit near
// the decoded graphon's mean level.

struct GenerationRow {
    int size = 0;
    double mean_density = 0.0;
    double graphon_mean = 0.0;
};

inline std::vector<GenerationRow> generation_stats(const DecoderParams& dec, const GmmPrior& prior,
                                                   const std::vector<int>& sizes, int per_size,
                                                   Rng& rng) {
    if (sizes.empty())
        throw std::invalid_argument("generation_stats: sizes must be non-empty");
    for (int s : sizes)
        if (s < 2)
            throw std::invalid_argument("generation_stats: sizes must be at least 2");
    if (per_size < 1)
        throw std::invalid_argument("generation_stats: need at least one graph per size");

    PriorSample ps = prior_sample(prior, rng);
    Vec w = stable_softmax(ps.z);

    double grid = 0.0;
    for (int i = 0; i < 100; ++i)
        for (int j = 0; j < 100; ++j)
            grid += decode_edge_prob(dec, w, (i + 0.5) / 100.0, (j + 0.5) / 100.0);
    grid /= 10000.0;

    std::vector<GenerationRow> rows;
    rows.reserve(sizes.size());
    for (int k : sizes) {
        double density_sum = 0.0;
        for (int g = 0; g < per_size; ++g) {
            std::vector<double> pos(static_cast<std::size_t>(k));
            for (int i = 0; i < k; ++i)
                pos[static_cast<std::size_t>(i)] = rng.uniform();
            long long edges = 0;
            for (int i = 0; i < k; ++i)
                for (int j = i + 1; j < k; ++j)
                    if (rng.bernoulli(decode_edge_prob(dec, w, pos[static_cast<std::size_t>(i)],
                                                       pos[static_cast<std::size_t>(j)])))
                        ++edges;
            density_sum += 2.0 * static_cast<double>(edges) /
                           (static_cast<double>(k) * static_cast<double>(k - 1));
        }
        GenerationRow row;
        row.size = k;
        row.mean_density = density_sum / per_size;
        row.graphon_mean = grid;
        rows.push_back(row);
    }
    return rows;
}

inline void print_report(std::ostream& os, const EvalReport& report) {
    os << "protocol  " << report.protocol << "\n";
    char buf[96];
    std::snprintf(buf, sizeof(buf), "accuracy  %.9g\n", report.accuracy_mean);
    os << buf;
    std::snprintf(buf, sizeof(buf), "std       %.9g\n", report.accuracy_std);
    os << buf;
    os << "folds    ";
    for (double a : report.fold_accuracies) {
        std::snprintf(buf, sizeof(buf), " %.9g", a);
        os << buf;
    }
    os << "\n";
}

} // namespace gnae
