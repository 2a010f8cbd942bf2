#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "gradot/matrix.hpp"
#include "gradot/stats.hpp"
#include "gradot/svd.hpp"

namespace gradot {

// Gradient-preserving compression score of a weight perturbation delta:
//   term1 = || H delta ||_1   (gradient-change surrogate, KFAC curvature)
//   term2 = < grad_mean, delta >
//   total = term1 - lambda * term2
struct GcsValue {
    double term1 = 0.0;
    double term2 = 0.0;
    double lambda = 0.0;
    double total = 0.0;
};

GcsValue gcs(const LayerStats& ls, const Matrix& delta, double lambda);

// First-order prediction of the mean-loss change for per-layer deltas,
// sum over layers of <grad_mean, delta>. grad_mean is a per-sample mean;
// n_samples_basis rescales to a summed-loss basis when != 1.
double loss_gap_estimate(const StatsBundle& bundle,
                         const std::map<std::string, Matrix>& deltas,
                         double n_samples_basis = 1.0);

// Cost of removing one component (SVD rank or MLP channel). Removing w_k
// means delta = -w_k, so the exact per-component GCS is
// term1 + lambda * term2; components with the smallest removal score are
// the cheapest to drop.
struct ComponentScore {
    int index = 0;
    double removal_term1 = 0.0;
    double removal_term2 = 0.0;
    double removal_score = 0.0;
};

std::vector<ComponentScore> svd_component_scores(const LayerStats& ls, const SvdFactors& f,
                                                 double lambda);

// One score per MLP intermediate channel: zeroing row k of w_up
// (d_int x d_model) plus zeroing column k of w_down (d_model x d_int).
std::vector<ComponentScore> channel_component_scores(const LayerStats& ls_up,
                                                     const LayerStats& ls_down,
                                                     const Matrix& w_up, const Matrix& w_down,
                                                     double lambda);

// Explicit per-channel delta pair (up, down), mostly for oracles.
std::vector<std::pair<Matrix, Matrix>> channel_component_matrices(const Matrix& w_up,
                                                                  const Matrix& w_down);

// Keep `keep_count` components: all pinned ones plus the largest removal
// scores among the rest. Ties break toward the lower index. Returns the
// kept set in ascending index order.
std::vector<int> select_greedy(const std::vector<ComponentScore>& scores, int keep_count,
                               const std::set<int>& pinned);

// Exhaustive minimizer of the exact aggregate GCS over kept sets of the
// given size; ties resolve to the lexicographically smallest kept set.
// Enumeration is bounded at 20 components.
struct BruteForceResult {
    std::vector<int> kept;
    double best_total = 0.0;
};

BruteForceResult brute_force_select(const LayerStats& ls, const std::vector<Matrix>& components,
                                    int keep_count, double lambda);

BruteForceResult brute_force_select_pair(const LayerStats& ls_up, const LayerStats& ls_down,
                                         const std::vector<std::pair<Matrix, Matrix>>& components,
                                         int keep_count, double lambda);

} // namespace gradot
