#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "gnae/graphon.hpp"
#include "gnae/rng.hpp"

namespace gnae {

using SpMat = Eigen::SparseMatrix<double>;

struct SolverConfig {
    int outer_iters = 20;   // proximal steps
    int sinkhorn_iters = 5; // scaling rounds per proximal step
    double beta = 0.1;      // proximal temperature
    int order = 2;          // exponent on structure and signal costs, 1 or 2
};

struct TransportPlan {
    Mat matrix;       // rows: first space, cols: second space
    Vec row_marginal; // prescribed
    Vec col_marginal; // prescribed
};

struct FgwResult {
    double distance = 0.0;
    std::vector<double> objective_trace; // initial value, then one per proximal step
    TransportPlan plan;
};

namespace detail {

inline Mat mult_bt(const Mat& a, const Mat& b) { return a * b.transpose(); }
inline Mat mult_bt(const Mat& a, const SpMat& b) { return (b * a.transpose()).transpose(); }

inline Vec matvec(const Mat& m, const Vec& v) { return m * v; }
inline Vec matvec(const SpMat& m, const Vec& v) { return m * v; }

inline bool finite_entries(const Mat& m) { return m.allFinite(); }
inline bool finite_entries(const SpMat& m) {
    for (int k = 0; k < m.outerSize(); ++k)
        for (SpMat::InnerIterator it(m, k); it; ++it)
            if (!std::isfinite(it.value()))
                return false;
    return true;
}

inline Mat squared(const Mat& m) { return m.cwiseProduct(m); }
inline SpMat squared(const SpMat& m) { return m.cwiseProduct(m); }

// <structure cost, T (x) T> + <signal cost, T> with the squared-difference
// structure cost expanded through the actual marginals of T.
template <class M2>
double plan_objective_sq(const Mat& g1, const Mat& g1sq, const M2& g2, const M2& g2sq,
                         const Mat& ds, const Mat& t) {
    Vec r = t.rowwise().sum();
    Vec c = t.colwise().sum().transpose();
    double gw = r.dot(g1sq * r) + c.dot(matvec(g2sq, c)) -
                2.0 * (g1 * mult_bt(t, g2)).cwiseProduct(t).sum();
    return std::max(0.0, gw + ds.cwiseProduct(t).sum());
}

inline Mat linearized_cost_abs(const Mat& g1, const Mat& g2, const Mat& t) {
    const int n = static_cast<int>(g1.rows());
    const int m = static_cast<int>(g2.rows());
    Mat out(n, m);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            double acc = 0.0;
            for (int i2 = 0; i2 < n; ++i2)
                for (int j2 = 0; j2 < m; ++j2)
                    acc += std::abs(g1(i, i2) - g2(j, j2)) * t(i2, j2);
            out(i, j) = acc;
        }
    return out;
}

inline double plan_objective_abs(const Mat& g1, const Mat& g2, const Mat& ds, const Mat& t) {
    double gw = linearized_cost_abs(g1, g2, t).cwiseProduct(t).sum();
    return std::max(0.0, gw + ds.cwiseProduct(t).sum());
}

inline void check_marginals(const Vec& mu_p, const Vec& mu_q, int n, int m) {
    if (mu_p.size() != n || mu_q.size() != m)
        throw std::invalid_argument("fgw: marginal sizes do not match the inputs");
    if ((mu_p.array() <= 0.0).any() || (mu_q.array() <= 0.0).any())
        throw std::invalid_argument("fgw: marginals must be strictly positive");
    if (!mu_p.allFinite() || !mu_q.allFinite())
        throw std::invalid_argument("fgw: marginals must be finite");
}

// Proximal point iteration: repeatedly tilt the previous plan by
// exp(-cost/beta) and rebalance it with a few scaling rounds. The kernel is
// assembled in log space with a per-row max shift so large costs cannot
// underflow whole rows; tiny plan entries are floored so no cell freezes at
// zero. The final scaling round ends on the row side, so row sums of the
// returned plan match mu_p to rounding.
template <class M2>
TransportPlan proximal_solve_impl(const Mat& g1, const M2& g2, const Mat& ds,
                                  const Vec& mu_p, const Vec& mu_q, const SolverConfig& cfg,
                                  std::vector<double>* trace_out) {
    const int n = static_cast<int>(g1.rows());
    const int m = static_cast<int>(g2.rows());
    if (g1.cols() != n || g2.cols() != m)
        throw std::invalid_argument("fgw: structure matrices must be square");
    if (ds.rows() != n || ds.cols() != m)
        throw std::invalid_argument("fgw: signal cost has the wrong shape");
    if (!finite_entries(g1) || !finite_entries(g2) || !ds.allFinite())
        throw std::invalid_argument("fgw: inputs must be finite");
    check_marginals(mu_p, mu_q, n, m);
    if (cfg.order != 1 && cfg.order != 2)
        throw std::invalid_argument("fgw: order must be 1 or 2");
    if (cfg.outer_iters < 1 || cfg.sinkhorn_iters < 1 || !(cfg.beta > 0.0))
        throw std::invalid_argument("fgw: iteration counts and beta must be positive");

    const double floor = 1e-300;
    const bool sq = cfg.order == 2;
    Mat g1sq, g2_dense;
    M2 g2sq;
    if (sq) {
        g1sq = squared(g1);
        g2sq = squared(g2);
    } else {
        g2_dense = Mat(g2);
    }

    Mat t = mu_p * mu_q.transpose();
    Vec log_a = mu_p.array().log();
    Mat g12;
    if (sq)
        g12 = (g1sq * mu_p) * Eigen::RowVectorXd::Ones(m) +
              Vec::Ones(n) * matvec(g2sq, mu_q).transpose();

    auto objective = [&](const Mat& plan) {
        return sq ? plan_objective_sq(g1, g1sq, g2, g2sq, ds, plan)
                  : plan_objective_abs(Mat(g1), g2_dense, ds, plan);
    };

    std::vector<double> trace;
    trace.reserve(cfg.outer_iters + 1);
    trace.push_back(objective(t));

    for (int outer = 0; outer < cfg.outer_iters; ++outer) {
        t = t.cwiseMax(floor);
        Mat cost;
        if (sq)
            cost = ds + g12 - 2.0 * (g1 * mult_bt(t, g2));
        else
            cost = ds + linearized_cost_abs(Mat(g1), g2_dense, t);
        if (!cost.allFinite())
            throw std::invalid_argument("fgw: non-finite transport cost");

        Mat logk = (-cost / cfg.beta) + t.array().log().matrix();
        Vec shift = logk.rowwise().maxCoeff();
        Mat kernel = (logk.colwise() - shift).array().exp().matrix();

        // The carried scaling vector lives in the unshifted frame; moving it
        // into this step's frame (minus a free global offset) keeps the
        // iteration identical to running on the raw kernel.
        Vec w = log_a + shift;
        Vec a = (w.array() - w.maxCoeff()).exp();
        Vec b = Vec::Ones(m);
        for (int it = 0; it < cfg.sinkhorn_iters; ++it) {
            b = mu_q.cwiseQuotient((kernel.transpose() * a).cwiseMax(floor));
            a = mu_p.cwiseQuotient((kernel * b).cwiseMax(floor));
        }
        t = a.asDiagonal() * kernel * b.asDiagonal();
        log_a = a.array().log().matrix() - shift;
        trace.push_back(objective(t));
    }

    if (trace_out)
        *trace_out = std::move(trace);
    return TransportPlan{std::move(t), mu_p, mu_q};
}

inline Mat pairwise_signal_cost(const Mat& s1, const Mat& s2, int order) {
    if (s1.cols() != s2.cols())
        throw std::invalid_argument("fgw: signal dimensions differ");
    const int n = static_cast<int>(s1.rows());
    const int m = static_cast<int>(s2.rows());
    Mat ds(n, m);
    if (order == 2) {
        ds = s1.rowwise().squaredNorm() * Eigen::RowVectorXd::Ones(m) +
             Vec::Ones(n) * s2.rowwise().squaredNorm().transpose() -
             2.0 * s1 * s2.transpose();
        ds = ds.cwiseMax(0.0);
    } else {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j)
                ds(i, j) = (s1.row(i) - s2.row(j)).cwiseAbs().sum();
    }
    return ds;
}

template <class M2>
FgwResult fgw_between(const Mat& g1, const Mat* s1, const M2& g2, const Mat* s2,
                      const SolverConfig& cfg) {
    if ((s1 == nullptr) != (s2 == nullptr))
        throw std::invalid_argument("fgw: signals must be present on both sides or neither");
    const int n = static_cast<int>(g1.rows());
    const int m = static_cast<int>(g2.rows());
    Mat ds = s1 ? pairwise_signal_cost(*s1, *s2, cfg.order) : Mat::Zero(n, m);
    Vec mu_p = Vec::Constant(n, 1.0 / n);
    Vec mu_q = Vec::Constant(m, 1.0 / m);
    FgwResult res;
    res.plan = proximal_solve_impl(g1, g2, ds, mu_p, mu_q, cfg, &res.objective_trace);
    double obj = res.objective_trace.back();
    res.distance = cfg.order == 2 ? std::sqrt(obj) : obj;
    return res;
}

} // namespace detail

inline TransportPlan proximal_solve(const Mat& g1, const Mat& g2, const Mat& ds,
                                    const Vec& mu_p, const Vec& mu_q, const SolverConfig& cfg,
                                    std::vector<double>* trace = nullptr) {
    return detail::proximal_solve_impl(g1, g2, ds, mu_p, mu_q, cfg, trace);
}

// Distance between two step graphons (optionally with signals) under uniform
// weights on the cells: couple the cells, pay the squared (or absolute)
// mismatch of the structure values through the coupling twice and of the
// signal values once, and take the order-p root of the best value found.
inline FgwResult fgw_distance(const StepGraphon& x1, const StepSignal* s1,
                              const StepGraphon& x2, const StepSignal* s2,
                              const SolverConfig& cfg = {}) {
    if (s1 && s1->partitions != x1.partitions)
        throw std::invalid_argument("fgw: first signal does not match its graphon");
    if (s2 && s2->partitions != x2.partitions)
        throw std::invalid_argument("fgw: second signal does not match its graphon");
    const Mat* sv1 = s1 ? &s1->values : nullptr;
    const Mat* sv2 = s2 ? &s2->values : nullptr;
    return detail::fgw_between(x1.values, sv1, x2.values, sv2, cfg);
}

// One-dimensional objective for aligned scalar sequences: quadratic
// structure mismatch over all index pairs plus pointwise signal mismatch.
inline double fgw_1d_value(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty())
        throw std::invalid_argument("fgw_1d: sequences must be non-empty and equally long");
    const int n = static_cast<int>(a.size());
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            double d = (a[i] - a[j]) * (a[i] - a[j]) - (b[i] - b[j]) * (b[i] - b[j]);
            acc += d * d;
        }
        acc += (a[i] - b[i]) * (a[i] - b[i]);
    }
    return acc;
}

// With the first sequence sorted, only the ascending and descending orders
// of the second can be optimal; return the better of the two.
inline double fgw_1d(const std::vector<double>& sorted_a, const std::vector<double>& b_ascending,
                     const std::vector<double>& b_descending, bool* chose_descending = nullptr) {
    double up = fgw_1d_value(sorted_a, b_ascending);
    double down = fgw_1d_value(sorted_a, b_descending);
    if (chose_descending)
        *chose_descending = down < up;
    return std::min(up, down);
}

// Alignment chosen per direction: order1[i] is the sample index holding the
// i-th smallest projection of the first set, order2[i] the index matched
// against it from the second set.
struct SlicedAlignment {
    std::vector<int> order1;
    std::vector<int> order2;
};

namespace detail {

inline std::vector<int> sorted_order(const std::vector<double>& v) {
    std::vector<int> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int i, int j) { return v[i] < v[j]; });
    return idx;
}

} // namespace detail

inline double sliced_fgw_with_directions(const std::vector<Vec>& samples1,
                                         const std::vector<Vec>& samples2, const Mat& directions,
                                         std::vector<SlicedAlignment>* alignments = nullptr) {
    if (samples1.size() != samples2.size() || samples1.empty())
        throw std::invalid_argument("sliced_fgw: sample sets must be non-empty and equally sized");
    const int n = static_cast<int>(samples1.size());
    const int dim = static_cast<int>(samples1[0].size());
    for (const auto& z : samples1)
        if (z.size() != dim)
            throw std::invalid_argument("sliced_fgw: inconsistent sample dimension");
    for (const auto& z : samples2)
        if (z.size() != dim)
            throw std::invalid_argument("sliced_fgw: inconsistent sample dimension");
    const int l = static_cast<int>(directions.rows());
    if (l < 1 || directions.cols() != dim)
        throw std::invalid_argument("sliced_fgw: bad direction matrix");

    if (alignments)
        alignments->assign(l, {});
    double total = 0.0;
    std::vector<double> p1(n), p2(n), a(n), b_up(n), b_down(n);
    for (int d = 0; d < l; ++d) {
        for (int i = 0; i < n; ++i) {
            p1[i] = directions.row(d).dot(samples1[i]);
            p2[i] = directions.row(d).dot(samples2[i]);
        }
        std::vector<int> o1 = detail::sorted_order(p1);
        std::vector<int> o2 = detail::sorted_order(p2);
        for (int i = 0; i < n; ++i) {
            a[i] = p1[o1[i]];
            b_up[i] = p2[o2[i]];
            b_down[i] = p2[o2[n - 1 - i]];
        }
        bool desc = false;
        total += fgw_1d(a, b_up, b_down, &desc);
        if (alignments) {
            (*alignments)[d].order1 = o1;
            (*alignments)[d].order2 = o2;
            if (desc)
                std::reverse((*alignments)[d].order2.begin(), (*alignments)[d].order2.end());
        }
    }
    return total / (static_cast<double>(n) * static_cast<double>(l));
}

inline Mat draw_directions(int count, int dim, Rng& rng) {
    if (count < 1 || dim < 1)
        throw std::invalid_argument("draw_directions: count and dim must be positive");
    Mat dirs(count, dim);
    for (int i = 0; i < count; ++i) {
        double norm = 0.0;
        do {
            for (int d = 0; d < dim; ++d)
                dirs(i, d) = rng.normal();
            norm = dirs.row(i).norm();
        } while (norm < 1e-12);
        dirs.row(i) /= norm;
    }
    return dirs;
}

// Monte Carlo estimate of the distance between two equal-size point sets:
// project both onto random unit directions, align the sorted projections,
// and average the one-dimensional objective over directions (scaled by the
// set size).
inline double sliced_fgw(const std::vector<Vec>& samples1, const std::vector<Vec>& samples2,
                         int num_projections, Rng& rng) {
    if (samples1.empty())
        throw std::invalid_argument("sliced_fgw: sample sets must be non-empty");
    Mat dirs = draw_directions(num_projections, static_cast<int>(samples1[0].size()), rng);
    return sliced_fgw_with_directions(samples1, samples2, dirs);
}

} // namespace gnae
