#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "gnae/train.hpp"

using namespace gnae;

namespace {

AttributedGraph random_graph(int n, int m, Rng& rng) {
    AttributedGraph g;
    g.num_nodes = n;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if (rng.bernoulli(0.45)) g.edges.emplace_back(i, j);
    g.attributes.resize(n, m);
    for (int i = 0; i < n; ++i)
        for (int d = 0; d < m; ++d)
            g.attributes(i, d) = rng.normal();
    return g;
}

// single flat-graphon factor with matching attributes: edge terms are exactly
// log(1/2) per pair, attribute residuals are exactly zero
DecoderParams half_prob_decoder(double attr_value) {
    DecoderFactor f;
    f.partitions = 1;
    f.logits_upper = Vec::Zero(1);
    f.signal = Mat::Constant(1, 1, attr_value);
    DecoderParams dec;
    dec.factors = {f};
    return dec;
}

AttributedGraph positioned_graph(int k, std::vector<std::pair<int, int>> edges, double attr_value) {
    AttributedGraph g;
    g.num_nodes = k;
    g.edges = std::move(edges);
    g.attributes = Mat::Constant(k, 1, attr_value);
    for (int i = 0; i < k; ++i)
        g.positions.push_back((i + 0.5) / k);
    return g;
}

struct TinySetup {
    std::vector<AttributedGraph> graphs;
    TrainConfig cfg;
    Model model;
};

TinySetup tiny_setup(std::uint64_t seed, SignalActivation act = SignalActivation::identity) {
    TinySetup s;
    Rng setup(seed * 977 + 5);
    for (int i = 0; i < 4; ++i)
        s.graphs.push_back(random_graph(5 + static_cast<int>(setup.uniform_int(3)), 2, setup));
    s.cfg.batch_size = 2;
    s.cfg.samples_per_graphon = 2;
    s.cfg.sample_size = 4;
    s.cfg.latent_dim = 3;
    s.cfg.feature_dim = 4;
    s.cfg.cheb_order = 2;
    s.cfg.sfgw_projections = 6;
    s.cfg.gamma = 0.1;
    s.cfg.seed = seed;
    Rng rng_enc = Rng::derive(seed, "enc");
    s.model.encoder = init_encoder(s.cfg.cheb_order, 2, s.cfg.feature_dim, s.cfg.latent_dim, rng_enc);
    s.model.decoder.activation = act;
    for (int c = 0; c < s.cfg.latent_dim; ++c)
        s.model.decoder.factors.push_back(factor_from_graph(s.graphs[static_cast<std::size_t>(c)]));
    Rng rng_prior = Rng::derive(seed, "prior");
    s.model.prior = init_prior(2, s.cfg.latent_dim, rng_prior);
    return s;
}

// worst relative error between reverse-mode and central-difference gradients
double fd_worst_error(TinySetup& s) {
    std::vector<const AttributedGraph*> batch = {&s.graphs[0], &s.graphs[1]};
    Rng rng_tape = Rng::derive(s.cfg.seed, "tape");
    BatchTape tape = record_tape(batch, s.model, s.cfg, rng_tape);
    detail::BatchCache cache;
    forward_batch(batch, s.model, s.cfg, tape, &cache);
    Grads grads = backward(batch, s.model, s.cfg, tape, cache);

    std::vector<double> analytic;
    for_each_grad(grads, [&](double v) { analytic.push_back(v); });
    REQUIRE(analytic.size() == param_count(s.model));

    const double h = 1e-5;
    double worst = 0.0;
    std::size_t idx = 0;
    for_each_param(s.model, [&](double& p) {
        double orig = p;
        p = orig + h;
        double lp = forward_batch(batch, s.model, s.cfg, tape).loss;
        p = orig - h;
        double lm = forward_batch(batch, s.model, s.cfg, tape).loss;
        p = orig;
        double fd = (lp - lm) / (2.0 * h);
        double a = analytic[idx++];
        worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-6}));
    });
    return worst;
}

std::vector<double> flat_params(const Model& m) {
    std::vector<double> out;
    for_each_param(const_cast<Model&>(m), [&](double& p) { out.push_back(p); });
    return out;
}

void fill_grads(Grads& g, double c) {
    for (auto& t : g.theta) t.setConstant(c);
    for (auto& b : g.theta_bias) b.setConstant(c);
    g.mlp_hidden.setConstant(c);
    g.mlp_hidden_bias.setConstant(c);
    g.mlp_out.setConstant(c);
    g.mlp_out_bias.setConstant(c);
    for (auto& l : g.factor_logits) l.setConstant(c);
    for (auto& s : g.factor_signal) s.setConstant(c);
    g.prior_means.setConstant(c);
    g.prior_log_stds.setConstant(c);
}

} // namespace

TEST_CASE("one present edge at half probability scores log one-half") {
    DecoderParams dec = half_prob_decoder(0.7);
    Vec w = Vec::Ones(1);
    AttributedGraph g = positioned_graph(2, {{0, 1}}, 0.7);
    TrainConfig cfg;
    CHECK(log_likelihood(g, dec, w, cfg) == Catch::Approx(std::log(0.5)).margin(1e-12));
}

TEST_CASE("empty triangle counts every absent pair") {
    DecoderParams dec = half_prob_decoder(0.7);
    Vec w = Vec::Ones(1);
    AttributedGraph g = positioned_graph(3, {}, 0.7);
    TrainConfig cfg;
    CHECK(log_likelihood(g, dec, w, cfg) == Catch::Approx(3.0 * std::log(0.5)).margin(1e-12));
}

TEST_CASE("gaussian attribute penalty matches the closed form") {
    // decoder emits 0, attributes are 1.5 in both dims, sigma 2:
    // per node -(2 * 1.5^2) / (2 * 2 * 2^2) = -0.28125
    DecoderFactor f;
    f.partitions = 1;
    f.logits_upper = Vec::Zero(1);
    f.signal = Mat::Zero(1, 2);
    DecoderParams dec;
    dec.factors = {f};
    Vec w = Vec::Ones(1);
    AttributedGraph g;
    g.num_nodes = 1;
    g.attributes = Mat::Constant(1, 2, 1.5);
    g.positions = {0.5};
    TrainConfig cfg;
    cfg.signal_sigma = 2.0;
    CHECK(log_likelihood(g, dec, w, cfg) ==
          Catch::Approx(-(2.0 * 1.5 * 1.5) / (2.0 * 2.0 * 4.0)).margin(1e-12));
}

TEST_CASE("sigmoid attribute terms become bernoulli log losses") {
    DecoderFactor f;
    f.partitions = 1;
    f.logits_upper = Vec::Zero(1);
    f.signal = Mat::Zero(1, 3); // sigmoid(0) = 0.5 per dim
    DecoderParams dec;
    dec.factors = {f};
    dec.activation = SignalActivation::sigmoid;
    Vec w = Vec::Ones(1);
    AttributedGraph g;
    g.num_nodes = 1;
    g.attributes = Mat(1, 3);
    g.attributes << 1.0, 0.0, 1.0;
    g.positions = {0.5};
    TrainConfig cfg;
    CHECK(log_likelihood(g, dec, w, cfg) == Catch::Approx(3.0 * std::log(0.5)).margin(1e-12));
}

TEST_CASE("missing positions are rejected") {
    DecoderParams dec = half_prob_decoder(0.0);
    Vec w = Vec::Ones(1);
    AttributedGraph g;
    g.num_nodes = 2;
    g.attributes = Mat::Zero(2, 1);
    TrainConfig cfg;
    CHECK_THROWS_AS(log_likelihood(g, dec, w, cfg), std::invalid_argument);
}

TEST_CASE("payoff weights temper by the smallest distance") {
    Vec q = payoff_softmax({0.3, 0.6});
    // tau = 0.3, exponents -1 and -2
    double e1 = std::exp(-1.0), e2 = std::exp(-2.0);
    CHECK(q(0) == Catch::Approx(e1 / (e1 + e2)));
    CHECK(q(1) == Catch::Approx(e2 / (e1 + e2)));

    Vec u = payoff_softmax({0.5, 0.5, 0.5});
    for (int i = 0; i < 3; ++i)
        CHECK(u(i) == Catch::Approx(1.0 / 3.0));

    Vec one = payoff_softmax({0.42});
    CHECK(one(0) == Catch::Approx(1.0));

    Vec zeros = payoff_softmax({0.0, 0.0});
    CHECK(zeros(0) == Catch::Approx(0.5));
    CHECK(zeros(1) == Catch::Approx(0.5));
}

TEST_CASE("payoff weights favor the sample closest to the target graph") {
    Rng rng(31);
    AttributedGraph x = random_graph(6, 2, rng);
    AttributedGraph near = x;
    AttributedGraph far = random_graph(6, 2, rng);
    far.attributes.array() += 5.0; // attribute shift dominates the distance
    TrainConfig cfg;
    Vec q = payoff_weights({near, far}, x, cfg);
    CHECK(q.sum() == Catch::Approx(1.0));
    CHECK(q(0) > 0.9);
}

TEST_CASE("reverse-mode gradients match central differences, identity decoder") {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        TinySetup s = tiny_setup(seed);
        worst = std::max(worst, fd_worst_error(s));
    }
    CHECK(worst <= 1e-4);
}

TEST_CASE("reverse-mode gradients match central differences, nonlinear decoders") {
    for (SignalActivation act :
         {SignalActivation::relu, SignalActivation::sigmoid, SignalActivation::softmax}) {
        double worst = 0.0;
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            TinySetup s = tiny_setup(seed, act);
            worst = std::max(worst, fd_worst_error(s));
        }
        INFO("activation " << activation_name(act));
        CHECK(worst <= 1e-4);
    }
}

TEST_CASE("batch trace is internally consistent") {
    TinySetup s = tiny_setup(3);
    std::vector<const AttributedGraph*> batch = {&s.graphs[0], &s.graphs[1]};
    Rng rng_tape = Rng::derive(3, "tape");
    BatchTape tape = record_tape(batch, s.model, s.cfg, rng_tape);
    BatchTrace trace = forward_batch(batch, s.model, s.cfg, tape);
    CHECK(trace.loss ==
          Catch::Approx(trace.recon_term + s.cfg.gamma * trace.regularizer_term).epsilon(1e-12));
    REQUIRE(trace.payoff.size() == 2);
    for (auto& q : trace.payoff) {
        CHECK(q.size() == s.cfg.samples_per_graphon);
        CHECK(q.sum() == Catch::Approx(1.0));
        CHECK(q.minCoeff() >= 0.0);
    }
}

TEST_CASE("replaying a frozen tape reproduces the loss bitwise") {
    TinySetup s = tiny_setup(4);
    std::vector<const AttributedGraph*> batch = {&s.graphs[0], &s.graphs[1]};
    Rng rng_tape = Rng::derive(4, "tape");
    BatchTape tape = record_tape(batch, s.model, s.cfg, rng_tape);
    double l1 = forward_batch(batch, s.model, s.cfg, tape).loss;
    double l2 = forward_batch(batch, s.model, s.cfg, tape).loss;
    CHECK(l1 == l2);

    Rng rng_again = Rng::derive(4, "tape");
    BatchTape tape2 = record_tape(batch, s.model, s.cfg, rng_again);
    CHECK(forward_batch(batch, s.model, s.cfg, tape2).loss == l1);
}

TEST_CASE("zero gamma silences the prior gradients") {
    TinySetup s = tiny_setup(5);
    s.cfg.gamma = 0.0;
    std::vector<const AttributedGraph*> batch = {&s.graphs[0], &s.graphs[1]};
    Rng rng_tape = Rng::derive(5, "tape");
    BatchTape tape = record_tape(batch, s.model, s.cfg, rng_tape);
    detail::BatchCache cache;
    BatchTrace trace = forward_batch(batch, s.model, s.cfg, tape, &cache);
    CHECK(trace.loss == trace.recon_term);
    Grads g = backward(batch, s.model, s.cfg, tape, cache);
    CHECK(g.prior_means.cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.prior_log_stds.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("adam first step and constant-gradient limit") {
    TinySetup s = tiny_setup(6);
    Model& model = s.model;
    AdamState state = AdamState::for_model(model);
    Grads g = Grads::zeros_like(model);
    const double c = 0.37;
    fill_grads(g, c);

    std::vector<double> before = flat_params(model);
    const double rate = 0.01;
    adam_step(model, g, state, rate);
    std::vector<double> after = flat_params(model);
    double expect = rate * c / (c + state.eps * std::sqrt(1.0 - state.beta2));
    for (std::size_t i = 0; i < before.size(); ++i)
        CHECK(before[i] - after[i] == Catch::Approx(expect).epsilon(1e-12));

    // same gradient forever: the step size settles at the learning rate
    for (int t = 0; t < 500; ++t)
        adam_step(model, g, state, rate);
    std::vector<double> prev = flat_params(model);
    adam_step(model, g, state, rate);
    std::vector<double> next = flat_params(model);
    CHECK(std::abs(prev[0] - next[0]) == Catch::Approx(rate).epsilon(0.01));
}

TEST_CASE("adam ignores parameters with zero gradient") {
    TinySetup s = tiny_setup(7);
    AdamState state = AdamState::for_model(s.model);
    Grads g = Grads::zeros_like(s.model);
    std::vector<double> before = flat_params(s.model);
    adam_step(s.model, g, state, 0.05);
    std::vector<double> after = flat_params(s.model);
    CHECK(before == after);
}

TEST_CASE("training is deterministic and obeys the epoch budget") {
    Rng data_rng(404);
    Dataset ds = two_vs_er_dataset(4, {6, 8}, data_rng);
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.epochs = 2;
    cfg.samples_per_graphon = 2;
    cfg.sample_size = 4;
    cfg.latent_dim = 2;
    cfg.feature_dim = 4;
    cfg.cheb_order = 2;
    cfg.sfgw_projections = 4;
    cfg.seed = 9;

    TrainResult a = train(ds, cfg);
    TrainResult b = train(ds, cfg);
    REQUIRE(a.history.size() == 2);
    for (std::size_t e = 0; e < 2; ++e) {
        CHECK(a.history[e].loss == b.history[e].loss);
        CHECK(a.history[e].recon == b.history[e].recon);
        CHECK(a.history[e].reg == b.history[e].reg);
    }
    CHECK(flat_params(a.model) == flat_params(b.model));
    CHECK(a.model.decoder.num_factors() == cfg.latent_dim);
    CHECK(a.model.prior.num_components() == 2);

    std::vector<Vec> za = embed_graphs(ds, a.model, a.normalization);
    std::vector<Vec> zb = embed_graphs(ds, b.model, b.normalization);
    REQUIRE(za.size() == ds.graphs.size());
    for (std::size_t i = 0; i < za.size(); ++i) {
        REQUIRE(za[i].size() == cfg.latent_dim);
        CHECK(za[i] == zb[i]);
    }

    // factor logits stay symmetric whatever adam did to them
    for (auto& f : a.model.decoder.factors) {
        Mat full = f.logits_full();
        CHECK((full - full.transpose()).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("zero epochs yields an initialized model and empty history") {
    Rng data_rng(405);
    Dataset ds = two_vs_er_dataset(3, {6, 8}, data_rng);
    TrainConfig cfg;
    cfg.epochs = 0;
    cfg.latent_dim = 2;
    cfg.feature_dim = 4;
    cfg.cheb_order = 2;
    TrainResult r = train(ds, cfg);
    CHECK(r.history.empty());
    CHECK(r.model.decoder.num_factors() == 2);
    CHECK(r.normalization.mean.size() == 5); // degree profile width
}

TEST_CASE("training logs one line per epoch") {
    Rng data_rng(406);
    Dataset ds = two_vs_er_dataset(3, {6, 7}, data_rng);
    TrainConfig cfg;
    cfg.batch_size = 6;
    cfg.epochs = 2;
    cfg.samples_per_graphon = 1;
    cfg.sample_size = 4;
    cfg.latent_dim = 2;
    cfg.feature_dim = 3;
    cfg.cheb_order = 1;
    cfg.sfgw_projections = 3;
    std::ostringstream log;
    train(ds, cfg, SignalActivation::identity, &log);
    std::string text = log.str();
    CHECK(text.find("epoch 1 loss ") != std::string::npos);
    CHECK(text.find("epoch 2 loss ") != std::string::npos);
    CHECK(text.find("recon ") != std::string::npos);
    CHECK(text.find("reg ") != std::string::npos);
}

TEST_CASE("config validation rejects out-of-range values") {
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.fgw_order = 3;
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.epochs = -1;
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.gamma = -0.1;
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(validate_config(cfg), std::invalid_argument);
    CHECK_NOTHROW(validate_config(TrainConfig{}));
}

TEST_CASE("tape and batch sizes must agree") {
    TinySetup s = tiny_setup(8);
    std::vector<const AttributedGraph*> batch = {&s.graphs[0], &s.graphs[1]};
    Rng rng_tape = Rng::derive(8, "tape");
    BatchTape tape = record_tape(batch, s.model, s.cfg, rng_tape);
    std::vector<const AttributedGraph*> bigger = {&s.graphs[0], &s.graphs[1], &s.graphs[2]};
    CHECK_THROWS_AS(forward_batch(bigger, s.model, s.cfg, tape), std::invalid_argument);
}

TEST_CASE("graphs without attributes cannot be taped") {
    TinySetup s = tiny_setup(9);
    AttributedGraph bare;
    bare.num_nodes = 4;
    bare.edges = {{0, 1}, {2, 3}};
    std::vector<const AttributedGraph*> batch = {&bare};
    Rng rng_tape = Rng::derive(9, "tape");
    CHECK_THROWS_AS(record_tape(batch, s.model, s.cfg, rng_tape), std::invalid_argument);
}
