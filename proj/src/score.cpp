#include "gradot/score.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradot/errors.hpp"

namespace gradot {

namespace {

double vec_l1(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) {
        s += std::fabs(x);
    }
    return s;
}

} // namespace

GcsValue gcs(const LayerStats& ls, const Matrix& delta, double lambda) {
    GcsValue v;
    v.lambda = lambda;
    v.term1 = l1(kfac_hvp(ls, delta));
    v.term2 = inner(ls.grad_mean, delta);
    v.total = v.term1 - lambda * v.term2;
    return v;
}

double loss_gap_estimate(const StatsBundle& bundle,
                         const std::map<std::string, Matrix>& deltas,
                         double n_samples_basis) {
    double sum = 0.0;
    for (const auto& [id, delta] : deltas) {
        const LayerStats& ls = bundle.at(id); // throws on unknown layer
        if (!delta.same_shape(ls.grad_mean)) {
            throw ShapeError("loss_gap_estimate: delta shape mismatch for layer '" + id + "'");
        }
        sum += inner(ls.grad_mean, delta);
    }
    return sum * n_samples_basis;
}

std::vector<ComponentScore> svd_component_scores(const LayerStats& ls, const SvdFactors& f,
                                                 double lambda) {
    const int d_o = f.u.rows();
    const int d_i = f.vt.cols();
    if (ls.kfac_G.rows() != d_o || ls.kfac_A.rows() != d_i) {
        throw ShapeError("svd_component_scores: factors do not match layer stats");
    }

    std::vector<ComponentScore> out;
    out.reserve(f.sigma.size());
    std::vector<double> gu(static_cast<std::size_t>(d_o));
    std::vector<double> va(static_cast<std::size_t>(d_i));
    for (int k = 0; k < f.rank_count(); ++k) {
        const double sigma = f.sigma[static_cast<std::size_t>(k)];
        ComponentScore cs;
        cs.index = k;
        if (sigma != 0.0) {
            // H(sigma u v^T) = sigma (G u)(v^T A): a rank-1 matrix, so its
            // l1 norm factorizes.
            for (int i = 0; i < d_o; ++i) {
                double s = 0.0;
                const double* grow = ls.kfac_G.row_ptr(i);
                for (int j = 0; j < d_o; ++j) {
                    s += grow[j] * f.u(j, k);
                }
                gu[static_cast<std::size_t>(i)] = s;
            }
            for (int j = 0; j < d_i; ++j) {
                double s = 0.0;
                for (int i = 0; i < d_i; ++i) {
                    s += f.vt(k, i) * ls.kfac_A(i, j);
                }
                va[static_cast<std::size_t>(j)] = s;
            }
            cs.removal_term1 = sigma * vec_l1(gu) * vec_l1(va);
            double t2 = 0.0;
            for (int i = 0; i < d_o; ++i) {
                const double* grow = ls.grad_mean.row_ptr(i);
                double s = 0.0;
                for (int j = 0; j < d_i; ++j) {
                    s += grow[j] * f.vt(k, j);
                }
                t2 += f.u(i, k) * s;
            }
            cs.removal_term2 = sigma * t2;
        }
        cs.removal_score = cs.removal_term1 + lambda * cs.removal_term2;
        out.push_back(cs);
    }
    return out;
}

std::vector<ComponentScore> channel_component_scores(const LayerStats& ls_up,
                                                     const LayerStats& ls_down,
                                                     const Matrix& w_up, const Matrix& w_down,
                                                     double lambda) {
    const int d_int = w_up.rows();
    if (w_down.cols() != d_int) {
        throw ShapeError("channel_component_scores: up/down intermediate width mismatch");
    }
    if (ls_up.kfac_G.rows() != d_int || ls_up.kfac_A.rows() != w_up.cols() ||
        ls_down.kfac_A.rows() != d_int || ls_down.kfac_G.rows() != w_down.rows()) {
        throw ShapeError("channel_component_scores: stats do not match weights");
    }

    std::vector<ComponentScore> out;
    out.reserve(static_cast<std::size_t>(d_int));
    const int d_model = w_up.cols();
    const int d_out = w_down.rows();
    std::vector<double> tmp_up(static_cast<std::size_t>(d_model));
    std::vector<double> g_col(static_cast<std::size_t>(d_int));
    std::vector<double> gd(static_cast<std::size_t>(d_out));
    std::vector<double> a_row(static_cast<std::size_t>(d_int));

    for (int k = 0; k < d_int; ++k) {
        ComponentScore cs;
        cs.index = k;

        // Up projection: removed piece is e_k (row k of w_up). H(w_k) =
        // (G_up e_k) ((w_up row k) A_up), again rank-1.
        for (int j = 0; j < d_model; ++j) {
            double s = 0.0;
            const double* wrow = w_up.row_ptr(k);
            for (int i = 0; i < d_model; ++i) {
                s += wrow[i] * ls_up.kfac_A(i, j);
            }
            tmp_up[static_cast<std::size_t>(j)] = s;
        }
        for (int i = 0; i < d_int; ++i) {
            g_col[static_cast<std::size_t>(i)] = ls_up.kfac_G(i, k);
        }
        double term1 = vec_l1(g_col) * vec_l1(tmp_up);
        double term2 = 0.0;
        {
            const double* grow = ls_up.grad_mean.row_ptr(k);
            const double* wrow = w_up.row_ptr(k);
            for (int j = 0; j < d_model; ++j) {
                term2 += grow[j] * wrow[j];
            }
        }

        // Down projection: removed piece is column k of w_down.
        // H(w_k) = (G_down col_k(w_down)) (e_k^T A_down).
        for (int i = 0; i < d_out; ++i) {
            double s = 0.0;
            const double* grow = ls_down.kfac_G.row_ptr(i);
            for (int j = 0; j < d_out; ++j) {
                s += grow[j] * w_down(j, k);
            }
            gd[static_cast<std::size_t>(i)] = s;
        }
        for (int j = 0; j < d_int; ++j) {
            a_row[static_cast<std::size_t>(j)] = ls_down.kfac_A(k, j);
        }
        term1 += vec_l1(gd) * vec_l1(a_row);
        for (int i = 0; i < d_out; ++i) {
            term2 += ls_down.grad_mean(i, k) * w_down(i, k);
        }

        cs.removal_term1 = term1;
        cs.removal_term2 = term2;
        cs.removal_score = term1 + lambda * term2;
        out.push_back(cs);
    }
    return out;
}

std::vector<std::pair<Matrix, Matrix>> channel_component_matrices(const Matrix& w_up,
                                                                  const Matrix& w_down) {
    if (w_down.cols() != w_up.rows()) {
        throw ShapeError("channel_component_matrices: width mismatch");
    }
    std::vector<std::pair<Matrix, Matrix>> out;
    for (int k = 0; k < w_up.rows(); ++k) {
        Matrix up(w_up.rows(), w_up.cols());
        for (int j = 0; j < w_up.cols(); ++j) {
            up(k, j) = w_up(k, j);
        }
        Matrix down(w_down.rows(), w_down.cols());
        for (int i = 0; i < w_down.rows(); ++i) {
            down(i, k) = w_down(i, k);
        }
        out.emplace_back(std::move(up), std::move(down));
    }
    return out;
}

std::vector<int> select_greedy(const std::vector<ComponentScore>& scores, int keep_count,
                               const std::set<int>& pinned) {
    const int n = static_cast<int>(scores.size());
    if (keep_count < static_cast<int>(pinned.size()) || keep_count > n) {
        throw ConfigError("select_greedy: infeasible keep_count " + std::to_string(keep_count) +
                          " for " + std::to_string(n) + " components with " +
                          std::to_string(pinned.size()) + " pinned");
    }
    for (int p : pinned) {
        if (p < 0 || p >= n) {
            throw ConfigError("select_greedy: pinned index " + std::to_string(p) +
                              " out of range");
        }
    }

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
        const double sx = scores[static_cast<std::size_t>(x)].removal_score;
        const double sy = scores[static_cast<std::size_t>(y)].removal_score;
        if (sx != sy) {
            return sx > sy;
        }
        return x < y;
    });

    std::set<int> kept(pinned);
    for (int idx : order) {
        if (static_cast<int>(kept.size()) >= keep_count) {
            break;
        }
        kept.insert(idx);
    }
    return std::vector<int>(kept.begin(), kept.end());
}

namespace {

// Visit all k-subsets of {0..n-1} in lexicographic order.
template <typename Fn>
void for_each_subset(int n, int k, const Fn& fn) {
    std::vector<int> idx(static_cast<std::size_t>(k));
    std::iota(idx.begin(), idx.end(), 0);
    while (true) {
        fn(idx);
        int i = k - 1;
        while (i >= 0 && idx[static_cast<std::size_t>(i)] == n - k + i) {
            --i;
        }
        if (i < 0) {
            return;
        }
        idx[static_cast<std::size_t>(i)] += 1;
        for (int j = i + 1; j < k; ++j) {
            idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
        }
    }
}

void check_enumeration_bounds(std::size_t n, int keep_count) {
    if (n > 20) {
        throw ConfigError("brute_force_select: enumeration bound exceeded (" +
                          std::to_string(n) + " > 20 components)");
    }
    if (keep_count < 0 || keep_count > static_cast<int>(n)) {
        throw ConfigError("brute_force_select: infeasible keep_count");
    }
}

} // namespace

BruteForceResult brute_force_select(const LayerStats& ls, const std::vector<Matrix>& components,
                                    int keep_count, double lambda) {
    check_enumeration_bounds(components.size(), keep_count);
    const int n = static_cast<int>(components.size());

    BruteForceResult best;
    bool have = false;
    for_each_subset(n, keep_count, [&](const std::vector<int>& kept) {
        std::vector<bool> is_kept(static_cast<std::size_t>(n), false);
        for (int k : kept) {
            is_kept[static_cast<std::size_t>(k)] = true;
        }
        Matrix delta(components.front().rows(), components.front().cols());
        for (int k = 0; k < n; ++k) {
            if (!is_kept[static_cast<std::size_t>(k)]) {
                delta = sub(delta, components[static_cast<std::size_t>(k)]);
            }
        }
        const double total = gcs(ls, delta, lambda).total;
        if (!have || total < best.best_total) {
            have = true;
            best.best_total = total;
            best.kept = kept;
        }
    });
    return best;
}

BruteForceResult brute_force_select_pair(const LayerStats& ls_up, const LayerStats& ls_down,
                                         const std::vector<std::pair<Matrix, Matrix>>& components,
                                         int keep_count, double lambda) {
    check_enumeration_bounds(components.size(), keep_count);
    const int n = static_cast<int>(components.size());

    BruteForceResult best;
    bool have = false;
    for_each_subset(n, keep_count, [&](const std::vector<int>& kept) {
        std::vector<bool> is_kept(static_cast<std::size_t>(n), false);
        for (int k : kept) {
            is_kept[static_cast<std::size_t>(k)] = true;
        }
        Matrix d_up(components.front().first.rows(), components.front().first.cols());
        Matrix d_down(components.front().second.rows(), components.front().second.cols());
        for (int k = 0; k < n; ++k) {
            if (!is_kept[static_cast<std::size_t>(k)]) {
                d_up = sub(d_up, components[static_cast<std::size_t>(k)].first);
                d_down = sub(d_down, components[static_cast<std::size_t>(k)].second);
            }
        }
        const double total = gcs(ls_up, d_up, lambda).total + gcs(ls_down, d_down, lambda).total;
        if (!have || total < best.best_total) {
            have = true;
            best.best_total = total;
            best.kept = kept;
        }
    });
    return best;
}

} // namespace gradot
