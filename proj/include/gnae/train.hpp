#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <utility>
#include <vector>

#include "gnae/config.hpp"
#include "gnae/data.hpp"
#include "gnae/model.hpp"
#include "gnae/ot.hpp"

namespace gnae {

constexpr double kEdgeProbClamp = 1e-6;

// ---------------------------------------------------------------------------
// Payoff weights: softmax over negative FGW distances with adaptive
// temperature. The weights are data once the graphs are drawn; no gradient
// ever flows through them.

inline Vec payoff_softmax(const std::vector<double>& dists) {
    const int n = static_cast<int>(dists.size());
    double dmin = *std::min_element(dists.begin(), dists.end());
    double tau = std::max(dmin, 1e-8);
    Vec shifted(n);
    for (int i = 0; i < n; ++i)
        shifted(i) = -dists[i] / tau;
    return stable_softmax(shifted);
}

inline Vec payoff_weights(const std::vector<AttributedGraph>& sampled, const StepGraphon& gx,
                          const StepSignal* sx, const TrainConfig& cfg) {
    if (sampled.empty())
        throw std::invalid_argument("payoff_weights: need at least one sampled graph");
    SolverConfig solver;
    solver.order = cfg.fgw_order;
    std::vector<double> dists;
    dists.reserve(sampled.size());
    for (const AttributedGraph& g : sampled) {
        auto [gi, si] = induce_graphon(g);
        const StepSignal* sip = si ? &*si : nullptr;
        dists.push_back(fgw_distance(gi, sip, gx, sx, solver).distance);
    }
    return payoff_softmax(dists);
}

// Overload for an observed target graph: the second factor enters the solver
// as a sparse adjacency, so each distance costs O(K * E) in the target's
// edge count rather than O(K * N^2).
inline Vec payoff_weights(const std::vector<AttributedGraph>& sampled, const AttributedGraph& x,
                          const TrainConfig& cfg) {
    if (sampled.empty())
        throw std::invalid_argument("payoff_weights: need at least one sampled graph");
    SolverConfig solver;
    solver.order = cfg.fgw_order;
    SpMat adj(x.num_nodes, x.num_nodes);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(2 * x.edges.size());
    for (auto [i, j] : x.edges) {
        trip.emplace_back(i, j, 1.0);
        trip.emplace_back(j, i, 1.0);
    }
    adj.setFromTriplets(trip.begin(), trip.end());
    const Mat* sx = x.has_attributes() ? &x.attributes : nullptr;
    std::vector<double> dists;
    dists.reserve(sampled.size());
    for (const AttributedGraph& g : sampled) {
        auto [gi, si] = induce_graphon(g);
        const Mat* sip = si ? &si->values : nullptr;
        dists.push_back(detail::fgw_between(gi.values, sip, adj, sx, solver).distance);
    }
    return payoff_softmax(dists);
}

// ---------------------------------------------------------------------------
// Log-likelihood of a sampled graph under the decoded graphon. Node
// positions are the ones recorded at sampling time; the graph is data.

namespace detail {

struct PairEval {
    double ghat = 0.0; // mixture edge probability, unclamped
    Vec factor_sig;    // per-factor sigmoid at this pair's cells
};

struct NodeEval {
    Vec pre;  // mixture signal before activation
    Vec shat; // after activation
};

struct GraphEval {
    std::vector<std::vector<int>> cells; // [factor][node] partition index
    std::vector<PairEval> pairs;         // k < k', lexicographic
    std::vector<NodeEval> nodes;
    double loglik = 0.0;
};

inline double clamp_prob(double p) {
    return std::clamp(p, kEdgeProbClamp, 1.0 - kEdgeProbClamp);
}

inline GraphEval evaluate_graph(const AttributedGraph& g, const DecoderParams& dec, const Vec& w,
                                double sigma) {
    if (!g.has_positions())
        throw std::invalid_argument("log_likelihood: sampled graph is missing node positions");
    const int k = g.num_nodes;
    const int c = dec.num_factors();
    GraphEval ev;
    ev.cells.assign(static_cast<std::size_t>(c), std::vector<int>(static_cast<std::size_t>(k)));
    for (int f = 0; f < c; ++f)
        for (int node = 0; node < k; ++node)
            ev.cells[static_cast<std::size_t>(f)][static_cast<std::size_t>(node)] =
                partition_index(g.positions[static_cast<std::size_t>(node)],
                                dec.factors[static_cast<std::size_t>(f)].partitions);

    std::vector<bool> adj(static_cast<std::size_t>(k) * static_cast<std::size_t>(k), false);
    for (auto [i, j] : g.edges) {
        adj[static_cast<std::size_t>(i) * k + j] = true;
        adj[static_cast<std::size_t>(j) * k + i] = true;
    }

    double ll = 0.0;
    ev.pairs.reserve(static_cast<std::size_t>(k) * (k - 1) / 2);
    for (int i = 0; i < k; ++i)
        for (int j = i + 1; j < k; ++j) {
            PairEval pe;
            pe.factor_sig = Vec(c);
            double ghat = 0.0;
            for (int f = 0; f < c; ++f) {
                const DecoderFactor& fac = dec.factors[static_cast<std::size_t>(f)];
                double s = sigmoid(fac.logit(ev.cells[static_cast<std::size_t>(f)][i],
                                             ev.cells[static_cast<std::size_t>(f)][j]));
                pe.factor_sig(f) = s;
                ghat += w(f) * s;
            }
            pe.ghat = ghat;
            double gc = clamp_prob(ghat);
            double a = adj[static_cast<std::size_t>(i) * k + j] ? 1.0 : 0.0;
            ll += a * std::log(gc) + (1.0 - a) * std::log(1.0 - gc);
            ev.pairs.push_back(std::move(pe));
        }

    const int m = dec.signal_dim();
    if (m > 0 && g.has_attributes()) {
        if (g.attribute_dim() != m)
            throw std::invalid_argument("log_likelihood: attribute dimension does not match decoder");
        ev.nodes.reserve(static_cast<std::size_t>(k));
        for (int node = 0; node < k; ++node) {
            NodeEval ne;
            ne.pre = Vec::Zero(m);
            for (int f = 0; f < c; ++f) {
                const DecoderFactor& fac = dec.factors[static_cast<std::size_t>(f)];
                ne.pre += w(f) *
                          fac.signal.row(ev.cells[static_cast<std::size_t>(f)][node]).transpose();
            }
            ne.shat = apply_signal_activation(dec.activation, ne.pre);
            Vec attr = g.attributes.row(node).transpose();
            switch (dec.activation) {
            case SignalActivation::identity:
            case SignalActivation::relu:
                ll += -(ne.shat - attr).squaredNorm() / (2.0 * m * sigma * sigma);
                break;
            case SignalActivation::sigmoid:
                for (int d = 0; d < m; ++d) {
                    double p = clamp_prob(ne.shat(d));
                    ll += attr(d) * std::log(p) + (1.0 - attr(d)) * std::log(1.0 - p);
                }
                break;
            case SignalActivation::softmax:
                for (int d = 0; d < m; ++d)
                    ll += attr(d) * std::log(std::max(ne.shat(d), kEdgeProbClamp));
                break;
            }
            ev.nodes.push_back(std::move(ne));
        }
    }
    ev.loglik = ll;
    return ev;
}

} // namespace detail

inline double log_likelihood(const AttributedGraph& g, const DecoderParams& dec, const Vec& w,
                             const TrainConfig& cfg) {
    return detail::evaluate_graph(g, dec, w, cfg.signal_sigma).loglik;
}

// ---------------------------------------------------------------------------
// The batch tape: every random draw a batch consumes, frozen so the loss is
// a deterministic, almost-everywhere-smooth function of the parameters. The
// sampled graphs keep their positions, edges, and materialized attribute
// values; the payoff weights are computed once against the frozen graphs.

struct TapeSample {
    std::vector<AttributedGraph> sampled;
    Vec payoff;
    int prior_component = 0;
    Vec prior_eps;
};

struct BatchTape {
    std::vector<TapeSample> samples;
    Mat directions;                          // L x C
    std::vector<SlicedAlignment> alignments; // filled by the first forward pass
};

// Draws one graph of k nodes from the decoded graphon/signal. Mirrors
// sample_graph's draw order: positions, then edges (k < k'), then attribute
// noise row by row.
inline AttributedGraph sample_from_decoder(const DecoderParams& dec, const Vec& w, int k,
                                           double sigma, Rng& rng) {
    AttributedGraph out;
    out.num_nodes = k;
    out.positions.resize(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i)
        out.positions[static_cast<std::size_t>(i)] = rng.uniform();
    for (int i = 0; i < k; ++i)
        for (int j = i + 1; j < k; ++j)
            if (rng.bernoulli(decode_edge_prob(dec, w, out.positions[static_cast<std::size_t>(i)],
                                               out.positions[static_cast<std::size_t>(j)])))
                out.edges.emplace_back(i, j);
    const int m = dec.signal_dim();
    if (m > 0) {
        out.attributes.resize(k, m);
        for (int i = 0; i < k; ++i) {
            Vec mean = decode_signal(dec, w, out.positions[static_cast<std::size_t>(i)]);
            for (int d = 0; d < m; ++d)
                out.attributes(i, d) = mean(d) + sigma * rng.normal();
        }
    }
    return out;
}

inline BatchTape record_tape(const std::vector<const AttributedGraph*>& batch, const Model& model,
                             const TrainConfig& cfg, Rng& rng) {
    BatchTape tape;
    tape.samples.reserve(batch.size());
    for (const AttributedGraph* x : batch) {
        TapeSample ts;
        PriorSample ps = prior_sample(model.prior, rng);
        ts.prior_component = ps.component;
        ts.prior_eps = ps.epsilon;

        auto [gx, sx] = induce_graphon(*x);
        if (!sx)
            throw std::invalid_argument("record_tape: graphs need attributes before encoding");
        Vec w = decode_weights(encode(gx, *sx, model.encoder));
        ts.sampled.reserve(static_cast<std::size_t>(cfg.samples_per_graphon));
        for (int i = 0; i < cfg.samples_per_graphon; ++i)
            ts.sampled.push_back(
                sample_from_decoder(model.decoder, w, cfg.sample_size, cfg.signal_sigma, rng));
        ts.payoff = payoff_weights(ts.sampled, *x, cfg);
        tape.samples.push_back(std::move(ts));
    }
    tape.directions = draw_directions(cfg.sfgw_projections, cfg.latent_dim, rng);
    return tape;
}

struct BatchTrace {
    double loss = 0.0;
    double recon_term = 0.0;
    double regularizer_term = 0.0;
    std::vector<Vec> payoff;
};

namespace detail {

struct SampleCache {
    ChebPooled pooled;
    Vec feat, hidden_pre, hidden, z, w;
    Vec zprime;
    std::vector<GraphEval> graphs;
};

struct BatchCache {
    std::vector<SampleCache> samples;
};

// 1D alignment objective evaluated at a fixed pairing (no re-sorting); at
// the recording point this equals the min over the two candidate orders.
inline double sliced_frozen_value(const std::vector<Vec>& s1, const std::vector<Vec>& s2,
                                  const Mat& dirs, const std::vector<SlicedAlignment>& als) {
    const int n = static_cast<int>(s1.size());
    const int l = static_cast<int>(dirs.rows());
    std::vector<double> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
    double total = 0.0;
    for (int d = 0; d < l; ++d) {
        const SlicedAlignment& al = als[static_cast<std::size_t>(d)];
        for (int i = 0; i < n; ++i) {
            a[static_cast<std::size_t>(i)] =
                dirs.row(d).dot(s1[static_cast<std::size_t>(al.order1[static_cast<std::size_t>(i)])]);
            b[static_cast<std::size_t>(i)] =
                dirs.row(d).dot(s2[static_cast<std::size_t>(al.order2[static_cast<std::size_t>(i)])]);
        }
        total += fgw_1d_value(a, b);
    }
    return total / (static_cast<double>(n) * static_cast<double>(l));
}

} // namespace detail

// Forward pass over a batch against a recorded tape. If the tape has no
// sliced alignments yet they are computed and stored (the recording-point
// forward); otherwise the stored pairing is reused so that replays under
// perturbed parameters stay on the same smooth branch of the loss.
inline BatchTrace forward_batch(const std::vector<const AttributedGraph*>& batch,
                                const Model& model, const TrainConfig& cfg, BatchTape& tape,
                                detail::BatchCache* cache = nullptr) {
    if (batch.empty() || batch.size() != tape.samples.size())
        throw std::invalid_argument("forward_batch: batch and tape sizes differ");
    const int nb = static_cast<int>(batch.size());

    BatchTrace trace;
    if (cache)
        cache->samples.assign(static_cast<std::size_t>(nb), {});
    std::vector<Vec> codes(static_cast<std::size_t>(nb)), primes(static_cast<std::size_t>(nb));

    for (int n = 0; n < nb; ++n) {
        const AttributedGraph& x = *batch[static_cast<std::size_t>(n)];
        const TapeSample& ts = tape.samples[static_cast<std::size_t>(n)];

        auto [gx, sx] = induce_graphon(x);
        if (!sx)
            throw std::invalid_argument("forward_batch: graphs need attributes before encoding");
        ChebPooled pooled = chebyshev_pooled(gx, *sx, model.encoder.cheb_order());
        Vec feat = Vec::Zero(model.encoder.feature_dim());
        for (std::size_t j = 0; j < pooled.pooled.size(); ++j)
            feat += model.encoder.theta[j].transpose() * pooled.pooled[j] +
                    model.encoder.theta_bias[j];
        Vec hidden_pre = model.encoder.mlp_hidden.transpose() * feat + model.encoder.mlp_hidden_bias;
        Vec hidden = hidden_pre.cwiseMax(0.0);
        Vec z = model.encoder.mlp_out.transpose() * hidden + model.encoder.mlp_out_bias;
        Vec w = stable_softmax(z);

        double sample_ll = 0.0;
        std::vector<detail::GraphEval> evals;
        evals.reserve(ts.sampled.size());
        for (std::size_t i = 0; i < ts.sampled.size(); ++i) {
            detail::GraphEval ev =
                detail::evaluate_graph(ts.sampled[i], model.decoder, w, cfg.signal_sigma);
            sample_ll += ts.payoff(static_cast<int>(i)) * ev.loglik;
            evals.push_back(std::move(ev));
        }
        trace.recon_term -= sample_ll;
        trace.payoff.push_back(ts.payoff);

        Vec zp(cfg.latent_dim);
        for (int c = 0; c < cfg.latent_dim; ++c) {
            double ls = std::clamp(model.prior.log_stds(ts.prior_component, c), kLogStdMin,
                                   kLogStdMax);
            zp(c) = model.prior.means(ts.prior_component, c) + std::exp(ls) * ts.prior_eps(c);
        }
        codes[static_cast<std::size_t>(n)] = z;
        primes[static_cast<std::size_t>(n)] = zp;

        if (cache) {
            detail::SampleCache& sc = cache->samples[static_cast<std::size_t>(n)];
            sc.pooled = std::move(pooled);
            sc.feat = std::move(feat);
            sc.hidden_pre = std::move(hidden_pre);
            sc.hidden = std::move(hidden);
            sc.z = z;
            sc.w = std::move(w);
            sc.zprime = zp;
            sc.graphs = std::move(evals);
        }
    }

    if (tape.alignments.empty())
        trace.regularizer_term =
            sliced_fgw_with_directions(codes, primes, tape.directions, &tape.alignments);
    else
        trace.regularizer_term =
            detail::sliced_frozen_value(codes, primes, tape.directions, tape.alignments);

    trace.loss = trace.recon_term + cfg.gamma * trace.regularizer_term;
    return trace;
}

inline BatchTrace batch_loss(const std::vector<const AttributedGraph*>& batch, const Model& model,
                             const TrainConfig& cfg, Rng& rng) {
    BatchTape tape = record_tape(batch, model, cfg, rng);
    return forward_batch(batch, model, cfg, tape);
}

// ---------------------------------------------------------------------------
// Gradients, mirroring the model's parameter shapes.

struct Grads {
    std::vector<Mat> theta;
    std::vector<Vec> theta_bias;
    Mat mlp_hidden;
    Vec mlp_hidden_bias;
    Mat mlp_out;
    Vec mlp_out_bias;
    std::vector<Vec> factor_logits;
    std::vector<Mat> factor_signal;
    Mat prior_means;
    Mat prior_log_stds;

    static Grads zeros_like(const Model& m) {
        Grads g;
        for (const Mat& t : m.encoder.theta)
            g.theta.push_back(Mat::Zero(t.rows(), t.cols()));
        for (const Vec& b : m.encoder.theta_bias)
            g.theta_bias.push_back(Vec::Zero(b.size()));
        g.mlp_hidden = Mat::Zero(m.encoder.mlp_hidden.rows(), m.encoder.mlp_hidden.cols());
        g.mlp_hidden_bias = Vec::Zero(m.encoder.mlp_hidden_bias.size());
        g.mlp_out = Mat::Zero(m.encoder.mlp_out.rows(), m.encoder.mlp_out.cols());
        g.mlp_out_bias = Vec::Zero(m.encoder.mlp_out_bias.size());
        for (const DecoderFactor& f : m.decoder.factors) {
            g.factor_logits.push_back(Vec::Zero(f.logits_upper.size()));
            g.factor_signal.push_back(Mat::Zero(f.signal.rows(), f.signal.cols()));
        }
        g.prior_means = Mat::Zero(m.prior.means.rows(), m.prior.means.cols());
        g.prior_log_stds = Mat::Zero(m.prior.log_stds.rows(), m.prior.log_stds.cols());
        return g;
    }
};

// Reverse-mode gradients of the batch loss. The payoff weights, sampled
// graphs, node positions, and sliced alignments are constants here; the
// prior contributes through the reparameterized samples.
inline Grads backward(const std::vector<const AttributedGraph*>& batch, const Model& model,
                      const TrainConfig& cfg, const BatchTape& tape,
                      const detail::BatchCache& cache) {
    if (tape.alignments.empty())
        throw std::logic_error("backward: tape has no recorded sliced alignments");
    const int nb = static_cast<int>(batch.size());
    const int latent = cfg.latent_dim;
    const int m = model.decoder.signal_dim();
    const double sigma = cfg.signal_sigma;

    Grads g = Grads::zeros_like(model);
    std::vector<Vec> dz(static_cast<std::size_t>(nb), Vec::Zero(latent));
    std::vector<Vec> dzp(static_cast<std::size_t>(nb), Vec::Zero(latent));

    // sliced term first: it touches every z and z'
    {
        const int n = nb;
        const int l = static_cast<int>(tape.directions.rows());
        const double scale = cfg.gamma / (static_cast<double>(n) * static_cast<double>(l));
        std::vector<double> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
        for (int d = 0; d < l; ++d) {
            const SlicedAlignment& al = tape.alignments[static_cast<std::size_t>(d)];
            for (int i = 0; i < n; ++i) {
                a[static_cast<std::size_t>(i)] = tape.directions.row(d).dot(
                    cache.samples[static_cast<std::size_t>(al.order1[static_cast<std::size_t>(i)])].z);
                b[static_cast<std::size_t>(i)] = tape.directions.row(d).dot(
                    cache.samples[static_cast<std::size_t>(al.order2[static_cast<std::size_t>(i)])]
                        .zprime);
            }
            for (int i = 0; i < n; ++i) {
                double da = 2.0 * (a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(i)]);
                double db = -da;
                for (int j = 0; j < n; ++j) {
                    double dab = a[static_cast<std::size_t>(i)] - a[static_cast<std::size_t>(j)];
                    double dbb = b[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(j)];
                    double core = dab * dab - dbb * dbb;
                    da += 8.0 * core * dab;
                    db -= 8.0 * core * dbb;
                }
                dz[static_cast<std::size_t>(al.order1[static_cast<std::size_t>(i)])] +=
                    scale * da * tape.directions.row(d).transpose();
                dzp[static_cast<std::size_t>(al.order2[static_cast<std::size_t>(i)])] +=
                    scale * db * tape.directions.row(d).transpose();
            }
        }
    }

    for (int n = 0; n < nb; ++n) {
        const TapeSample& ts = tape.samples[static_cast<std::size_t>(n)];
        const detail::SampleCache& sc = cache.samples[static_cast<std::size_t>(n)];
        const int nfac = model.decoder.num_factors();
        Vec dw = Vec::Zero(nfac);

        for (std::size_t i = 0; i < ts.sampled.size(); ++i) {
            const AttributedGraph& gi = ts.sampled[i];
            const detail::GraphEval& ev = sc.graphs[i];
            const double coef = -ts.payoff(static_cast<int>(i)); // d loss / d loglik

            std::vector<bool> adj(static_cast<std::size_t>(gi.num_nodes) *
                                      static_cast<std::size_t>(gi.num_nodes),
                                  false);
            for (auto [u, v] : gi.edges) {
                adj[static_cast<std::size_t>(u) * gi.num_nodes + v] = true;
                adj[static_cast<std::size_t>(v) * gi.num_nodes + u] = true;
            }

            std::size_t p = 0;
            for (int u = 0; u < gi.num_nodes; ++u)
                for (int v = u + 1; v < gi.num_nodes; ++v, ++p) {
                    const detail::PairEval& pe = ev.pairs[p];
                    if (pe.ghat < kEdgeProbClamp || pe.ghat > 1.0 - kEdgeProbClamp)
                        continue; // clamped: flat branch
                    double aedge = adj[static_cast<std::size_t>(u) * gi.num_nodes + v] ? 1.0 : 0.0;
                    double dll_dg = aedge / pe.ghat - (1.0 - aedge) / (1.0 - pe.ghat);
                    double gcoef = coef * dll_dg;
                    for (int f = 0; f < nfac; ++f) {
                        double s = pe.factor_sig(f);
                        dw(f) += gcoef * s;
                        int cell = model.decoder.factors[static_cast<std::size_t>(f)].packed_index(
                            ev.cells[static_cast<std::size_t>(f)][static_cast<std::size_t>(u)],
                            ev.cells[static_cast<std::size_t>(f)][static_cast<std::size_t>(v)]);
                        g.factor_logits[static_cast<std::size_t>(f)](cell) +=
                            gcoef * sc.w(f) * s * (1.0 - s);
                    }
                }

            if (m > 0 && gi.has_attributes()) {
                for (int node = 0; node < gi.num_nodes; ++node) {
                    const detail::NodeEval& ne = ev.nodes[static_cast<std::size_t>(node)];
                    Vec attr = gi.attributes.row(node).transpose();
                    Vec dshat(m);
                    switch (model.decoder.activation) {
                    case SignalActivation::identity:
                    case SignalActivation::relu:
                        dshat = -(ne.shat - attr) / (m * sigma * sigma);
                        break;
                    case SignalActivation::sigmoid:
                        for (int d = 0; d < m; ++d) {
                            double pc = detail::clamp_prob(ne.shat(d));
                            dshat(d) = (ne.shat(d) < kEdgeProbClamp ||
                                        ne.shat(d) > 1.0 - kEdgeProbClamp)
                                           ? 0.0
                                           : attr(d) / pc - (1.0 - attr(d)) / (1.0 - pc);
                        }
                        break;
                    case SignalActivation::softmax:
                        for (int d = 0; d < m; ++d)
                            dshat(d) = ne.shat(d) <= kEdgeProbClamp ? 0.0 : attr(d) / ne.shat(d);
                        break;
                    }
                    Vec dpre(m);
                    switch (model.decoder.activation) {
                    case SignalActivation::identity:
                        dpre = dshat;
                        break;
                    case SignalActivation::relu:
                        dpre = (ne.pre.array() > 0.0).select(dshat, Vec::Zero(m));
                        break;
                    case SignalActivation::sigmoid:
                        dpre = dshat.array() * ne.shat.array() * (1.0 - ne.shat.array());
                        break;
                    case SignalActivation::softmax:
                        dpre = ne.shat.array() * (dshat.array() - dshat.dot(ne.shat));
                        break;
                    }
                    dpre *= coef;
                    for (int f = 0; f < nfac; ++f) {
                        const DecoderFactor& fac = model.decoder.factors[static_cast<std::size_t>(f)];
                        int cell = ev.cells[static_cast<std::size_t>(f)][static_cast<std::size_t>(node)];
                        dw(f) += dpre.dot(fac.signal.row(cell).transpose());
                        g.factor_signal[static_cast<std::size_t>(f)].row(cell) +=
                            sc.w(f) * dpre.transpose();
                    }
                }
            }
        }

        // softmax backward into the latent code
        Vec dzn = dz[static_cast<std::size_t>(n)];
        dzn += (sc.w.array() * (dw.array() - dw.dot(sc.w))).matrix();

        // prior backward through the reparameterization
        for (int c = 0; c < latent; ++c) {
            double ls = model.prior.log_stds(ts.prior_component, c);
            g.prior_means(ts.prior_component, c) += dzp[static_cast<std::size_t>(n)](c);
            if (ls > kLogStdMin && ls < kLogStdMax)
                g.prior_log_stds(ts.prior_component, c) +=
                    dzp[static_cast<std::size_t>(n)](c) * std::exp(ls) * ts.prior_eps(c);
        }

        // encoder backward
        g.mlp_out += sc.hidden * dzn.transpose();
        g.mlp_out_bias += dzn;
        Vec dh = model.encoder.mlp_out * dzn;
        Vec dhpre = (sc.hidden_pre.array() > 0.0).select(dh, Vec::Zero(dh.size()));
        g.mlp_hidden += sc.feat * dhpre.transpose();
        g.mlp_hidden_bias += dhpre;
        Vec dfeat = model.encoder.mlp_hidden * dhpre;
        for (std::size_t j = 0; j < sc.pooled.pooled.size(); ++j) {
            g.theta[j] += sc.pooled.pooled[j] * dfeat.transpose();
            g.theta_bias[j] += dfeat;
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Canonical flat ordering over all trainable scalars, shared by Adam and the
// finite-difference harness.

template <class F>
void for_each_param(Model& model, F&& f) {
    for (Mat& t : model.encoder.theta)
        for (int r = 0; r < t.rows(); ++r)
            for (int c = 0; c < t.cols(); ++c)
                f(t(r, c));
    for (Vec& b : model.encoder.theta_bias)
        for (int i = 0; i < b.size(); ++i)
            f(b(i));
    for (int r = 0; r < model.encoder.mlp_hidden.rows(); ++r)
        for (int c = 0; c < model.encoder.mlp_hidden.cols(); ++c)
            f(model.encoder.mlp_hidden(r, c));
    for (int i = 0; i < model.encoder.mlp_hidden_bias.size(); ++i)
        f(model.encoder.mlp_hidden_bias(i));
    for (int r = 0; r < model.encoder.mlp_out.rows(); ++r)
        for (int c = 0; c < model.encoder.mlp_out.cols(); ++c)
            f(model.encoder.mlp_out(r, c));
    for (int i = 0; i < model.encoder.mlp_out_bias.size(); ++i)
        f(model.encoder.mlp_out_bias(i));
    for (DecoderFactor& fac : model.decoder.factors) {
        for (int i = 0; i < fac.logits_upper.size(); ++i)
            f(fac.logits_upper(i));
        for (int r = 0; r < fac.signal.rows(); ++r)
            for (int c = 0; c < fac.signal.cols(); ++c)
                f(fac.signal(r, c));
    }
    for (int r = 0; r < model.prior.means.rows(); ++r)
        for (int c = 0; c < model.prior.means.cols(); ++c)
            f(model.prior.means(r, c));
    for (int r = 0; r < model.prior.log_stds.rows(); ++r)
        for (int c = 0; c < model.prior.log_stds.cols(); ++c)
            f(model.prior.log_stds(r, c));
}

template <class F>
void for_each_grad(const Grads& g, F&& f) {
    for (const Mat& t : g.theta)
        for (int r = 0; r < t.rows(); ++r)
            for (int c = 0; c < t.cols(); ++c)
                f(t(r, c));
    for (const Vec& b : g.theta_bias)
        for (int i = 0; i < b.size(); ++i)
            f(b(i));
    for (int r = 0; r < g.mlp_hidden.rows(); ++r)
        for (int c = 0; c < g.mlp_hidden.cols(); ++c)
            f(g.mlp_hidden(r, c));
    for (int i = 0; i < g.mlp_hidden_bias.size(); ++i)
        f(g.mlp_hidden_bias(i));
    for (int r = 0; r < g.mlp_out.rows(); ++r)
        for (int c = 0; c < g.mlp_out.cols(); ++c)
            f(g.mlp_out(r, c));
    for (int i = 0; i < g.mlp_out_bias.size(); ++i)
        f(g.mlp_out_bias(i));
    for (std::size_t fi = 0; fi < g.factor_logits.size(); ++fi) {
        for (int i = 0; i < g.factor_logits[fi].size(); ++i)
            f(g.factor_logits[fi](i));
        for (int r = 0; r < g.factor_signal[fi].rows(); ++r)
            for (int c = 0; c < g.factor_signal[fi].cols(); ++c)
                f(g.factor_signal[fi](r, c));
    }
    for (int r = 0; r < g.prior_means.rows(); ++r)
        for (int c = 0; c < g.prior_means.cols(); ++c)
            f(g.prior_means(r, c));
    for (int r = 0; r < g.prior_log_stds.rows(); ++r)
        for (int c = 0; c < g.prior_log_stds.cols(); ++c)
            f(g.prior_log_stds(r, c));
}

inline std::size_t param_count(const Model& model) {
    std::size_t n = 0;
    for_each_param(const_cast<Model&>(model), [&n](double&) { ++n; });
    return n;
}

struct AdamState {
    Vec m, v;
    long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState for_model(const Model& model) {
        AdamState s;
        s.m = Vec::Zero(static_cast<int>(param_count(model)));
        s.v = Vec::Zero(s.m.size());
        return s;
    }
};

inline void adam_step(Model& model, const Grads& grads, AdamState& state, double rate) {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(state.m.size()));
    for_each_grad(grads, [&flat](double v) { flat.push_back(v); });
    if (flat.size() != static_cast<std::size_t>(state.m.size()))
        throw std::logic_error("adam_step: gradient shape mismatch");

    state.step += 1;
    const double b1t = std::pow(state.beta1, static_cast<double>(state.step));
    const double b2t = std::pow(state.beta2, static_cast<double>(state.step));
    std::size_t idx = 0;
    for_each_param(model, [&](double& p) {
        double grad = flat[idx];
        double& mi = state.m(static_cast<int>(idx));
        double& vi = state.v(static_cast<int>(idx));
        mi = state.beta1 * mi + (1.0 - state.beta1) * grad;
        vi = state.beta2 * vi + (1.0 - state.beta2) * grad * grad;
        double mhat = mi / (1.0 - b1t);
        double vhat = vi / (1.0 - b2t);
        p -= rate * mhat / (std::sqrt(vhat) + state.eps * std::sqrt(1.0 - b2t));
        ++idx;
    });
}

// ---------------------------------------------------------------------------
// The training driver: preprocessing, initialization, and the epoch loop.
// Every random stream is derived from the one seed in the config, so two
// runs with the same inputs produce bitwise-identical models.

struct TrainResult {
    Model model;
    Normalization normalization;
    std::vector<EpochStats> history;
};

namespace detail {

inline void shuffle_indices(std::vector<int>& v, Rng& rng) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i)
        std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(rng.uniform_int(i + 1))]);
}

} // namespace detail

inline void validate_config(const TrainConfig& cfg) {
    if (cfg.batch_size < 1 || cfg.samples_per_graphon < 1 || cfg.sample_size < 1 ||
        cfg.feature_dim < 1 || cfg.latent_dim < 1 || cfg.sfgw_projections < 1)
        throw std::invalid_argument("train config: counts must be at least 1");
    if (cfg.epochs < 0 || cfg.cheb_order < 0)
        throw std::invalid_argument("train config: epochs and cheb_order must be non-negative");
    if (!(cfg.learning_rate > 0.0))
        throw std::invalid_argument("train config: learning rate must be positive");
    if (!(cfg.gamma >= 0.0))
        throw std::invalid_argument("train config: gamma must be non-negative");
    if (!(cfg.signal_sigma > 0.0))
        throw std::invalid_argument("train config: signal sigma must be positive");
    if (cfg.fgw_order != 1 && cfg.fgw_order != 2)
        throw std::invalid_argument("train config: fgw order must be 1 or 2");
}

inline TrainResult train(const Dataset& dataset, const TrainConfig& cfg,
                         SignalActivation activation = SignalActivation::identity,
                         std::ostream* log = nullptr) {
    validate_config(cfg);
    if (dataset.graphs.empty())
        throw std::invalid_argument("train: dataset is empty");

    TrainResult result;
    Dataset work = prepare_inputs(dataset, nullptr, &result.normalization);
    const int n = static_cast<int>(work.graphs.size());

    // one factor per latent dimension, drawn from the dataset with classes
    // interleaved so every class seeds some factors
    Rng rng_factors = Rng::derive(cfg.seed, "factors");
    std::vector<std::vector<int>> groups(static_cast<std::size_t>(std::max(work.num_classes, 1)));
    for (int i = 0; i < n; ++i) {
        int cls = work.graphs[static_cast<std::size_t>(i)].label.value_or(0);
        groups[static_cast<std::size_t>(std::clamp(cls, 0, static_cast<int>(groups.size()) - 1))]
            .push_back(i);
    }
    for (auto& g : groups)
        detail::shuffle_indices(g, rng_factors);
    std::vector<int> picks;
    std::vector<std::size_t> cursor(groups.size(), 0);
    while (static_cast<int>(picks.size()) < cfg.latent_dim) {
        bool progressed = false;
        for (std::size_t c = 0; c < groups.size() && static_cast<int>(picks.size()) < cfg.latent_dim;
             ++c) {
            if (cursor[c] < groups[c].size()) {
                picks.push_back(groups[c][cursor[c]++]);
                progressed = true;
            }
        }
        if (!progressed)
            std::fill(cursor.begin(), cursor.end(), 0); // fewer graphs than factors: reuse
    }

    Rng rng_enc = Rng::derive(cfg.seed, "encoder");
    result.model.encoder =
        init_encoder(cfg.cheb_order, work.attribute_dim, cfg.feature_dim, cfg.latent_dim, rng_enc);
    result.model.decoder.activation = activation;
    for (int idx : picks)
        result.model.decoder.factors.push_back(factor_from_graph(work.graphs[static_cast<std::size_t>(idx)]));
    Rng rng_prior = Rng::derive(cfg.seed, "prior");
    result.model.prior = init_prior(std::max(work.num_classes, 1), cfg.latent_dim, rng_prior);

    AdamState adam = AdamState::for_model(result.model);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        Rng rng_shuffle = Rng::derive(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
        detail::shuffle_indices(order, rng_shuffle);

        double loss_sum = 0.0, recon_sum = 0.0, reg_sum = 0.0;
        int batches = 0;
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int stop = std::min(n, start + cfg.batch_size);
            std::vector<const AttributedGraph*> batch;
            batch.reserve(static_cast<std::size_t>(stop - start));
            for (int i = start; i < stop; ++i)
                batch.push_back(&work.graphs[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
            Rng rng_tape = Rng::derive(cfg.seed, "tape",
                                       static_cast<std::uint64_t>(epoch - 1) * 1000000ull +
                                           static_cast<std::uint64_t>(batches));
            BatchTape tape = record_tape(batch, result.model, cfg, rng_tape);
            detail::BatchCache cache;
            BatchTrace trace = forward_batch(batch, result.model, cfg, tape, &cache);
            Grads grads = backward(batch, result.model, cfg, tape, cache);
            adam_step(result.model, grads, adam, cfg.learning_rate);
            loss_sum += trace.loss;
            recon_sum += trace.recon_term;
            reg_sum += trace.regularizer_term;
            ++batches;
        }

        EpochStats stats;
        stats.loss = loss_sum / batches;
        stats.recon = recon_sum / batches;
        stats.reg = reg_sum / batches;
        result.history.push_back(stats);
        if (log) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "epoch %d loss %.9g recon %.9g reg %.9g\n", epoch,
                          stats.loss, stats.recon, stats.reg);
            *log << buf;
        }
    }
    return result;
}

// Encodes every graph of a dataset with a frozen model: the stored
// normalization is reapplied, never refit.
inline std::vector<Vec> embed_graphs(const Dataset& dataset, const Model& model,
                                     const Normalization& nm) {
    Dataset work = prepare_inputs(dataset, &nm, nullptr);
    std::vector<Vec> codes;
    codes.reserve(work.graphs.size());
    for (const auto& g : work.graphs) {
        auto [gx, sx] = induce_graphon(g);
        if (!sx)
            throw std::invalid_argument("embed_graphs: graphs need attributes before encoding");
        codes.push_back(encode(gx, *sx, model.encoder).z);
    }
    return codes;
}

} // namespace gnae
