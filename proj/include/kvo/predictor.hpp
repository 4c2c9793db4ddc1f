#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kvo/kcompress.hpp"
#include "kvo/numerics.hpp"

namespace kvo::predictor {

using numerics::Matrix;

// Query head → shared KV head.
struct HeadMap {
    std::vector<std::size_t> g;
    std::size_t h_kv = 0;

    std::size_t h_q() const { return g.size(); }

    // Contiguous blocks of h_q / h_kv query heads per KV head.
    static HeadMap gqa(std::size_t h_q, std::size_t h_kv);
    void validate() const;
};

// Row h: (x·W_Q,h)·A_slice(g(h)), where W_Q holds head h in columns
// [h·d, (h+1)·d) and A_slice(k) is rows [k·d, (k+1)·d) of A.
Matrix low_rank_queries(std::span<const double> x, const Matrix& w_q, const kcompress::ProjectionMatrix& proj,
                        const HeadMap& map);

// Same, starting from already projected per-head queries (h_q × d).
Matrix low_rank_queries_from(const Matrix& queries, const kcompress::ProjectionMatrix& proj, const HeadMap& map);

enum class ScoreScaling { raw, inv_sqrt_head_dim };

// h_q × N logits q_lr·k_lrᵀ.
Matrix approx_scores(const Matrix& q_lr, const Matrix& k_lr, ScoreScaling scaling = ScoreScaling::raw,
                     std::size_t head_dim = 1);

struct GroupScoreSet {
    std::vector<double> token_scores;
    std::vector<double> group_scores;
    std::vector<std::size_t> selected;  // ascending
};

// Sum over heads, max within each G-token group, top-M groups (ties go to the
// lower index). ParameterError if M exceeds the group count or N == 0.
GroupScoreSet select_groups(const Matrix& scores, std::size_t group_size, std::size_t m);

}  // namespace kvo::predictor
