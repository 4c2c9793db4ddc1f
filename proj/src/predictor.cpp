#include "kvo/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "kvo/error.hpp"

namespace kvo::predictor {

HeadMap HeadMap::gqa(std::size_t h_q, std::size_t h_kv) {
    if (h_q == 0 || h_kv == 0 || h_q % h_kv != 0)
        throw ParameterError("query heads must be a positive multiple of KV heads");
    HeadMap m;
    m.h_kv = h_kv;
    m.g.resize(h_q);
    for (std::size_t h = 0; h < h_q; ++h) m.g[h] = h / (h_q / h_kv);
    return m;
}

void HeadMap::validate() const {
    if (h_kv == 0 || g.empty() || g.size() % h_kv != 0) throw ParameterError("invalid head map shape");
    const std::size_t block = g.size() / h_kv;
    for (std::size_t h = 0; h < g.size(); ++h)
        if (g[h] != h / block) throw ParameterError("head map is not a GQA grouping");
}

Matrix low_rank_queries_from(const Matrix& queries, const kcompress::ProjectionMatrix& proj, const HeadMap& map) {
    map.validate();
    const std::size_t d = queries.cols();
    if (queries.rows() != map.h_q()) throw ParameterError("query count does not match head map");
    if (proj.width() != map.h_kv * d) throw ParameterError("projection width does not match h_kv·d");
    const std::size_t r = proj.rank();
    Matrix out(map.h_q(), r);
    for (std::size_t h = 0; h < map.h_q(); ++h) {
        const std::size_t base = map.g[h] * d;
        const auto q = queries.row(h);
        auto o = out.row(h);
        for (std::size_t i = 0; i < d; ++i) {
            const double qi = q[i];
            if (qi == 0.0) continue;
            const auto arow = proj.a.row(base + i);
            for (std::size_t j = 0; j < r; ++j) o[j] += qi * arow[j];
        }
    }
    return out;
}

Matrix low_rank_queries(std::span<const double> x, const Matrix& w_q, const kcompress::ProjectionMatrix& proj,
                        const HeadMap& map) {
    if (x.size() != w_q.rows()) throw ParameterError("input width does not match W_Q rows");
    if (map.h_q() == 0 || w_q.cols() % map.h_q() != 0) throw ParameterError("W_Q columns not divisible by h_q");
    const std::size_t d = w_q.cols() / map.h_q();
    const auto q = numerics::vecmat(x, w_q);
    return low_rank_queries_from(Matrix(map.h_q(), d, q), proj, map);
}

Matrix approx_scores(const Matrix& q_lr, const Matrix& k_lr, ScoreScaling scaling, std::size_t head_dim) {
    if (q_lr.cols() != k_lr.cols()) throw ParameterError("q_lr and k_lr ranks differ");
    Matrix s = numerics::matmul_transposed(q_lr, k_lr);
    if (scaling == ScoreScaling::inv_sqrt_head_dim) {
        const double f = 1.0 / std::sqrt(static_cast<double>(head_dim));
        for (double& v : s.data()) v *= f;
    }
    return s;
}

GroupScoreSet select_groups(const Matrix& scores, std::size_t group_size, std::size_t m) {
    const std::size_t n = scores.cols();
    if (n == 0 || scores.rows() == 0) throw ParameterError("empty score matrix");
    if (group_size == 0) throw ParameterError("group size must be positive");
    const std::size_t groups = (n + group_size - 1) / group_size;
    if (m > groups)
        throw ParameterError("cannot select " + std::to_string(m) + " of " + std::to_string(groups) + " groups");
    if (!scores.all_finite()) throw NumericError("non-finite attention score");

    GroupScoreSet out;
    out.token_scores = numerics::column_sums(scores);
    out.group_scores.assign(groups, -INFINITY);
    for (std::size_t t = 0; t < n; ++t) {
        double& g = out.group_scores[t / group_size];
        g = std::max(g, out.token_scores[t]);
    }
    std::vector<std::size_t> order(groups);
    std::iota(order.begin(), order.end(), 0);
    const auto& gs = out.group_scores;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m), order.end(),
                      [&](std::size_t a, std::size_t b) { return gs[a] != gs[b] ? gs[a] > gs[b] : a < b; });
    out.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m));
    std::sort(out.selected.begin(), out.selected.end());
    return out;
}

}  // namespace kvo::predictor
