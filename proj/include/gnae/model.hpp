#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "gnae/graphon.hpp"

namespace gnae {

namespace detail {

// Sums a buffer in ascending value order. Any node permutation feeds the
// same multiset of summands, so the result is bitwise reproducible; this is
// what makes encoder outputs exactly invariant under relabeling.
inline double sorted_sum(std::vector<double>& buf) {
    std::sort(buf.begin(), buf.end());
    double acc = 0.0;
    for (double v : buf)
        acc += v;
    return acc;
}

} // namespace detail

struct EncoderParams {
    std::vector<Mat> theta;      // J+1 entries, each M x D
    std::vector<Vec> theta_bias; // J+1 entries, each D
    Mat mlp_hidden;              // D x D
    Vec mlp_hidden_bias;         // D
    Mat mlp_out;                 // D x C
    Vec mlp_out_bias;            // C

    int cheb_order() const { return static_cast<int>(theta.size()) - 1; }
    int signal_dim() const { return static_cast<int>(theta.at(0).rows()); }
    int feature_dim() const { return static_cast<int>(theta.at(0).cols()); }
    int latent_dim() const { return static_cast<int>(mlp_out.cols()); }
};

enum class SignalActivation { identity, relu, sigmoid, softmax };

inline const char* activation_name(SignalActivation a) {
    switch (a) {
    case SignalActivation::identity: return "identity";
    case SignalActivation::relu: return "relu";
    case SignalActivation::sigmoid: return "sigmoid";
    case SignalActivation::softmax: return "softmax";
    }
    return "identity";
}

inline SignalActivation activation_from_name(const std::string& name) {
    if (name == "identity") return SignalActivation::identity;
    if (name == "relu") return SignalActivation::relu;
    if (name == "sigmoid") return SignalActivation::sigmoid;
    if (name == "softmax") return SignalActivation::softmax;
    throw std::invalid_argument("unknown signal activation: " + name);
}

// One graphon factor. Edge logits are kept packed (upper triangle including
// the diagonal) so the decoded graphon is symmetric by construction and
// stays symmetric under any parameter update.
struct DecoderFactor {
    int partitions = 0;
    Vec logits_upper; // partitions*(partitions+1)/2 entries
    Mat signal;       // partitions x M

    static int packed_size(int n) { return n * (n + 1) / 2; }
    int packed_index(int i, int j) const {
        if (i > j)
            std::swap(i, j);
        return i * partitions - i * (i - 1) / 2 + (j - i);
    }
    double logit(int i, int j) const { return logits_upper(packed_index(i, j)); }
    Mat logits_full() const {
        Mat full(partitions, partitions);
        for (int i = 0; i < partitions; ++i)
            for (int j = 0; j < partitions; ++j)
                full(i, j) = logit(i, j);
        return full;
    }
};

struct DecoderParams {
    std::vector<DecoderFactor> factors;
    SignalActivation activation = SignalActivation::identity;

    int num_factors() const { return static_cast<int>(factors.size()); }
    int signal_dim() const { return factors.empty() ? 0 : static_cast<int>(factors[0].signal.cols()); }
};

struct GmmPrior {
    Mat means;    // T x C
    Mat log_stds; // T x C

    int num_components() const { return static_cast<int>(means.rows()); }
    int latent_dim() const { return static_cast<int>(means.cols()); }
};

constexpr double kLogStdMin = -20.0;
constexpr double kLogStdMax = 5.0;

struct LatentCode {
    Vec z;
};

// Everything chebyshev_features computes before the final projection; kept
// so the trainer can reuse the pooled filter outputs in its backward pass.
struct ChebPooled {
    std::vector<Vec> pooled; // J+1 entries, each length M: column means of S^j
};

inline ChebPooled chebyshev_pooled(const StepGraphon& g, const StepSignal& s, int cheb_order) {
    if (g.partitions != s.partitions)
        throw std::invalid_argument("graphon and signal partition counts differ");
    const int n = g.partitions;
    const int m = s.dim;
    const Mat& a = g.values;

    // degree of each partition, summed in canonical order
    std::vector<double> buf(static_cast<std::size_t>(n));
    Vec deg(n);
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < n; ++k)
            buf[static_cast<std::size_t>(k)] = a(i, k);
        deg(i) = detail::sorted_sum(buf);
    }

    auto laplacian_apply = [&](const Mat& sj) {
        Mat out(n, m);
        for (int i = 0; i < n; ++i)
            for (int d = 0; d < m; ++d) {
                for (int k = 0; k < n; ++k)
                    buf[static_cast<std::size_t>(k)] = a(i, k) * sj(k, d);
                out(i, d) = deg(i) * sj(i, d) - detail::sorted_sum(buf);
            }
        return out;
    };

    auto pool = [&](const Mat& sj) {
        Vec out(m);
        for (int d = 0; d < m; ++d) {
            for (int k = 0; k < n; ++k)
                buf[static_cast<std::size_t>(k)] = sj(k, d);
            out(d) = detail::sorted_sum(buf) / n;
        }
        return out;
    };

    ChebPooled result;
    result.pooled.reserve(static_cast<std::size_t>(cheb_order) + 1);
    Mat prev2 = s.values; // S^0
    result.pooled.push_back(pool(prev2));
    if (cheb_order >= 1) {
        Mat prev1 = laplacian_apply(prev2) / n; // S^1
        result.pooled.push_back(pool(prev1));
        for (int j = 2; j <= cheb_order; ++j) {
            Mat cur = (2.0 / n) * laplacian_apply(prev1) - prev2;
            result.pooled.push_back(pool(cur));
            prev2 = std::move(prev1);
            prev1 = std::move(cur);
        }
    }
    return result;
}

inline Vec chebyshev_features(const StepGraphon& g, const StepSignal& s, const EncoderParams& enc) {
    if (s.dim != enc.signal_dim())
        throw std::invalid_argument("signal dimension does not match encoder input width");
    ChebPooled pooled = chebyshev_pooled(g, s, enc.cheb_order());
    Vec feat = Vec::Zero(enc.feature_dim());
    for (std::size_t j = 0; j < pooled.pooled.size(); ++j)
        feat += enc.theta[j].transpose() * pooled.pooled[j] + enc.theta_bias[j];
    return feat;
}

inline Vec relu(const Vec& v) { return v.cwiseMax(0.0); }

inline LatentCode encode(const StepGraphon& g, const StepSignal& s, const EncoderParams& enc) {
    Vec feat = chebyshev_features(g, s, enc);
    Vec hidden = relu(enc.mlp_hidden.transpose() * feat + enc.mlp_hidden_bias);
    return LatentCode{enc.mlp_out.transpose() * hidden + enc.mlp_out_bias};
}

inline Vec stable_softmax(const Vec& v) {
    Vec shifted = v.array() - v.maxCoeff();
    Vec e = shifted.array().exp();
    return e / e.sum();
}

inline Vec decode_weights(const LatentCode& code) { return stable_softmax(code.z); }

inline double sigmoid(double x) {
    if (x >= 0.0)
        return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline double decode_edge_prob(const DecoderParams& dec, const Vec& w, double u, double v) {
    if (u < 0.0 || u > 1.0 || v < 0.0 || v > 1.0)
        throw std::invalid_argument("graphon coordinates must lie in [0,1]");
    double acc = 0.0;
    for (int c = 0; c < dec.num_factors(); ++c) {
        const DecoderFactor& f = dec.factors[static_cast<std::size_t>(c)];
        int iu = partition_index(u, f.partitions);
        int iv = partition_index(v, f.partitions);
        acc += w(c) * sigmoid(f.logit(iu, iv));
    }
    return acc;
}

inline Vec apply_signal_activation(SignalActivation act, const Vec& pre) {
    switch (act) {
    case SignalActivation::identity: return pre;
    case SignalActivation::relu: return pre.cwiseMax(0.0);
    case SignalActivation::sigmoid: {
        Vec out(pre.size());
        for (int i = 0; i < pre.size(); ++i)
            out(i) = sigmoid(pre(i));
        return out;
    }
    case SignalActivation::softmax: return stable_softmax(pre);
    }
    return pre;
}

inline Vec decode_signal(const DecoderParams& dec, const Vec& w, double u) {
    if (u < 0.0 || u > 1.0)
        throw std::invalid_argument("graphon coordinate must lie in [0,1]");
    Vec pre = Vec::Zero(dec.signal_dim());
    for (int c = 0; c < dec.num_factors(); ++c) {
        const DecoderFactor& f = dec.factors[static_cast<std::size_t>(c)];
        pre += w(c) * f.signal.row(partition_index(u, f.partitions)).transpose();
    }
    return apply_signal_activation(dec.activation, pre);
}

struct PriorSample {
    int component = 0;
    Vec z;
    Vec epsilon;
};

inline PriorSample prior_sample(const GmmPrior& prior, Rng& rng) {
    PriorSample out;
    out.component = rng.uniform_int(prior.num_components());
    const int c = prior.latent_dim();
    out.epsilon = Vec(c);
    out.z = Vec(c);
    for (int i = 0; i < c; ++i) {
        out.epsilon(i) = rng.normal();
        double log_std = std::clamp(prior.log_stds(out.component, i), kLogStdMin, kLogStdMax);
        out.z(i) = prior.means(out.component, i) + std::exp(log_std) * out.epsilon(i);
    }
    return out;
}

inline EncoderParams init_encoder(int cheb_order, int signal_dim, int feature_dim, int latent_dim,
                                  Rng& rng) {
    auto uniform_pm = [&rng](double bound) { return (2.0 * rng.uniform() - 1.0) * bound; };
    EncoderParams enc;
    const double in_bound = 1.0 / std::sqrt(static_cast<double>(signal_dim));
    for (int j = 0; j <= cheb_order; ++j) {
        Mat t(signal_dim, feature_dim);
        for (int r = 0; r < signal_dim; ++r)
            for (int c = 0; c < feature_dim; ++c)
                t(r, c) = uniform_pm(in_bound);
        Vec b(feature_dim);
        for (int c = 0; c < feature_dim; ++c)
            b(c) = uniform_pm(in_bound);
        enc.theta.push_back(std::move(t));
        enc.theta_bias.push_back(std::move(b));
    }
    const double hid_bound = 1.0 / std::sqrt(static_cast<double>(feature_dim));
    enc.mlp_hidden = Mat(feature_dim, feature_dim);
    for (int r = 0; r < feature_dim; ++r)
        for (int c = 0; c < feature_dim; ++c)
            enc.mlp_hidden(r, c) = uniform_pm(hid_bound);
    enc.mlp_hidden_bias = Vec(feature_dim);
    for (int c = 0; c < feature_dim; ++c)
        enc.mlp_hidden_bias(c) = uniform_pm(hid_bound);
    enc.mlp_out = Mat(feature_dim, latent_dim);
    for (int r = 0; r < feature_dim; ++r)
        for (int c = 0; c < latent_dim; ++c)
            enc.mlp_out(r, c) = uniform_pm(hid_bound);
    enc.mlp_out_bias = Vec(latent_dim);
    for (int c = 0; c < latent_dim; ++c)
        enc.mlp_out_bias(c) = uniform_pm(hid_bound);
    return enc;
}

inline double logit_of(double p) { return std::log(p / (1.0 - p)); }

// Builds one factor from an observed graph: its adjacency pattern becomes
// the edge logits, its attributes the factor signal.
inline DecoderFactor factor_from_graph(const AttributedGraph& g) {
    DecoderFactor f;
    f.partitions = g.num_nodes;
    Mat adj = adjacency_matrix(g);
    f.logits_upper = Vec(DecoderFactor::packed_size(g.num_nodes));
    for (int i = 0; i < g.num_nodes; ++i)
        for (int j = i; j < g.num_nodes; ++j)
            f.logits_upper(f.packed_index(i, j)) = logit_of(std::clamp(adj(i, j), 0.01, 0.99));
    f.signal = g.attributes;
    return f;
}

inline GmmPrior init_prior(int num_components, int latent_dim, Rng& rng) {
    GmmPrior prior;
    prior.means = Mat(num_components, latent_dim);
    for (int t = 0; t < num_components; ++t)
        for (int c = 0; c < latent_dim; ++c)
            prior.means(t, c) = rng.normal();
    prior.log_stds = Mat::Zero(num_components, latent_dim);
    return prior;
}

struct Model {
    EncoderParams encoder;
    DecoderParams decoder;
    GmmPrior prior;
};

} // namespace gnae
