#ifndef COLUMBUS_ALIGNMENT_HPP
#define COLUMBUS_ALIGNMENT_HPP

#include <iostream>
#include <map>

#include "columbus/tensor.hpp"

namespace columbus {

// Per-domain embedding statistics. The covariance uses the n-1 normalization
// and is only defined for count >= 2; single-example domains contribute mean
// terms only.
struct DomainStats {
    int domain_id = 0;
    int count = 0;
    int dim = 0;
    std::vector<double> mean;       // d
    std::vector<double> covariance; // d*d, row-major; empty when count < 2

    bool has_covariance() const { return count >= 2; }
};

inline DomainStats domain_stats(const Tensor& embeddings, int domain_id = 0) {
    if (embeddings.shape.size() != 2 || embeddings.shape[0] < 1)
        throw std::invalid_argument("domain_stats: need a nonempty (n, d) matrix");
    const int n = embeddings.shape[0], d = embeddings.shape[1];
    DomainStats s;
    s.domain_id = domain_id;
    s.count = n;
    s.dim = d;
    s.mean.assign(d, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) s.mean[j] += embeddings.at2(i, j);
    for (int j = 0; j < d; ++j) s.mean[j] /= n;
    if (n >= 2) {
        s.covariance.assign(static_cast<std::size_t>(d) * d, 0.0);
        for (int i = 0; i < n; ++i)
            for (int a = 0; a < d; ++a) {
                const double ea = embeddings.at2(i, a) - s.mean[a];
                for (int b = 0; b < d; ++b)
                    s.covariance[static_cast<std::size_t>(a) * d + b] +=
                        ea * (embeddings.at2(i, b) - s.mean[b]);
            }
        for (double& v : s.covariance) v /= (n - 1);
    }
    return s;
}

// Pairwise mean and covariance matching, averaged over all domain pairs:
// per pair ||mu_i - mu_j||^2 + (1 / (4 d^2)) ||C_i - C_j||_F^2. The covariance
// term is skipped for pairs where either side has fewer than 2 embeddings.
inline double alignment_loss(const std::vector<DomainStats>& stats, int d) {
    const int ns = static_cast<int>(stats.size());
    if (ns < 2) {
        std::cerr << "[columbus] alignment_loss: fewer than 2 domains in batch, returning 0\n";
        return 0.0;
    }
    const double cov_scale = 1.0 / (4.0 * static_cast<double>(d) * d);
    double total = 0.0;
    int pairs = 0;
    for (int i = 0; i < ns; ++i)
        for (int j = i + 1; j < ns; ++j) {
            double term = 0.0;
            for (int a = 0; a < d; ++a) {
                const double diff = stats[i].mean[a] - stats[j].mean[a];
                term += diff * diff;
            }
            if (stats[i].has_covariance() && stats[j].has_covariance()) {
                double fro = 0.0;
                for (std::size_t a = 0; a < stats[i].covariance.size(); ++a) {
                    const double diff = stats[i].covariance[a] - stats[j].covariance[a];
                    fro += diff * diff;
                }
                term += cov_scale * fro;
            }
            total += term;
            ++pairs;
        }
    return total / pairs;
}

struct AlignmentResult {
    double loss = 0.0;
    Tensor grad; // (N, d), d loss / d embeddings
};

// Loss plus its analytic gradient w.r.t. every embedding row, grouping rows
// by domain id. Domains are ordered by id so the result is independent of
// row order within the batch.
inline AlignmentResult alignment_loss_and_grad(const Tensor& embeddings,
                                               const std::vector<int>& domain_ids) {
    const int n = embeddings.shape[0], d = embeddings.shape[1];
    if (static_cast<int>(domain_ids.size()) != n)
        throw std::invalid_argument("alignment: domain id count mismatch");

    std::map<int, std::vector<int>> groups;
    for (int i = 0; i < n; ++i) groups[domain_ids[i]].push_back(i);

    AlignmentResult res;
    res.grad = Tensor({n, d});
    if (groups.size() < 2) {
        std::cerr << "[columbus] alignment: fewer than 2 domains in batch, loss = 0\n";
        return res;
    }

    std::vector<DomainStats> stats;
    std::vector<const std::vector<int>*> rows;
    for (const auto& [id, idx] : groups) {
        Tensor e({static_cast<int>(idx.size()), d});
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (int c = 0; c < d; ++c) e.at2(static_cast<int>(r), c) = embeddings.at2(idx[r], c);
        stats.push_back(domain_stats(e, id));
        rows.push_back(&groups.at(id));
    }
    res.loss = alignment_loss(stats, d);

    const int ns = static_cast<int>(stats.size());
    const int pairs = ns * (ns - 1) / 2;
    const double cov_scale = 1.0 / (4.0 * static_cast<double>(d) * d);

    for (int i = 0; i < ns; ++i)
        for (int j = i + 1; j < ns; ++j) {
            // mean term: d/d mu_i ||mu_i - mu_j||^2 = 2 (mu_i - mu_j), /pairs
            std::vector<double> gmu(d);
            for (int a = 0; a < d; ++a)
                gmu[a] = 2.0 * (stats[i].mean[a] - stats[j].mean[a]) / pairs;
            for (int r : *rows[i])
                for (int a = 0; a < d; ++a)
                    res.grad.at2(r, a) += gmu[a] / stats[i].count;
            for (int r : *rows[j])
                for (int a = 0; a < d; ++a)
                    res.grad.at2(r, a) -= gmu[a] / stats[j].count;

            if (!stats[i].has_covariance() || !stats[j].has_covariance()) continue;
            // covariance term: with G = 2 s (C_i - C_j) / pairs,
            // d/d e_k = (2 / (n_i - 1)) G (e_k - mu_i) for rows of domain i.
            std::vector<double> G(static_cast<std::size_t>(d) * d);
            for (std::size_t a = 0; a < G.size(); ++a)
                G[a] = 2.0 * cov_scale * (stats[i].covariance[a] - stats[j].covariance[a]) / pairs;
            auto add_cov_grad = [&](const DomainStats& s, const std::vector<int>& idx,
                                    double sign) {
                const double scale = sign * 2.0 / (s.count - 1);
                for (int r : idx) {
                    for (int a = 0; a < d; ++a) {
                        double acc = 0.0;
                        for (int b = 0; b < d; ++b)
                            acc += G[static_cast<std::size_t>(a) * d + b] *
                                   (embeddings.at2(r, b) - s.mean[b]);
                        res.grad.at2(r, a) += scale * acc;
                    }
                }
            };
            add_cov_grad(stats[i], *rows[i], 1.0);
            add_cov_grad(stats[j], *rows[j], -1.0);
        }
    return res;
}

} // namespace columbus

#endif
