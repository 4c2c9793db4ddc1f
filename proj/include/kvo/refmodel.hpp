#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "kvo/kv_config.hpp"
#include "kvo/kvstore.hpp"
#include "kvo/numerics.hpp"
#include "kvo/predictor.hpp"

namespace kvo::refmodel {

using kvstore::TokenKv;
using numerics::Matrix;

struct ModelDims {
    std::size_t layers = 4;
    std::size_t model_dim = 256;
    std::size_t h_q = 8;
    std::size_t h_kv = 2;
    std::size_t head_dim = 32;
    std::size_t ffn_dim = 512;
    // Scale of the output and FFN-down projections; small values keep the
    // residual stream close to its input, so adjacent layers see similar inputs.
    double residual_scale = 0.1;
    std::uint64_t seed = 7;

    void validate() const;
    std::size_t kv_width() const { return h_kv * head_dim; }
    std::size_t q_width() const { return h_q * head_dim; }
    friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct LayerWeights {
    Matrix w_q;  // D × h_q·d
    Matrix w_k;  // D × h_kv·d
    Matrix w_v;  // D × h_kv·d
    Matrix w_o;  // h_q·d × D
    Matrix w1;   // D × F
    Matrix w2;   // F × D
};

std::vector<double> rmsnorm(std::span<const double> x);

// softmax(q·kᵀ/√d)·v per query head over n tokens. `k_row(t)` and `v_row(t)`
// return the h_kv·d row of token t; query head h reads KV head map.g[h].
template <class KRow, class VRow>
Matrix attend(const Matrix& q, const predictor::HeadMap& map, std::size_t n, KRow&& k_row, VRow&& v_row) {
    const std::size_t d = q.cols();
    const std::size_t hq = q.rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    Matrix logits(hq, n);
    for (std::size_t t = 0; t < n; ++t) {
        const auto k = k_row(t);
        for (std::size_t h = 0; h < hq; ++h) {
            const double* kh = k.data() + map.g[h] * d;
            const auto qh = q.row(h);
            double s = 0.0;
            for (std::size_t i = 0; i < d; ++i) s += qh[i] * kh[i];
            logits(h, t) = s * scale;
        }
    }
    for (std::size_t h = 0; h < hq; ++h) {
        auto row = logits.row(h);
        double mx = -INFINITY;
        for (double x : row) mx = std::max(mx, x);
        double z = 0.0;
        for (double& x : row) {
            x = std::exp(x - mx);
            z += x;
        }
        for (double& x : row) x /= z;
    }
    Matrix out(hq, d);
    for (std::size_t t = 0; t < n; ++t) {
        const auto v = v_row(t);
        for (std::size_t h = 0; h < hq; ++h) {
            const double w = logits(h, t);
            const double* vh = v.data() + map.g[h] * d;
            auto o = out.row(h);
            for (std::size_t i = 0; i < d; ++i) o[i] += w * vh[i];
        }
    }
    return out;
}

// Standard GQA attention over K, V (N × h_kv·d). q is h_q × d.
Matrix exact_attention(const Matrix& q, const Matrix& k, const Matrix& v, const predictor::HeadMap& map);

// Raw logits q_h·K_{g(h)}ᵀ, h_q × N.
Matrix exact_scores(const Matrix& q, const Matrix& k, const predictor::HeadMap& map);

// select_groups on exact scores.
std::vector<std::size_t> oracle_top_groups(const Matrix& q, const Matrix& k, const predictor::HeadMap& map,
                                           std::size_t group_size, std::size_t m);

// |predicted ∩ oracle| / |oracle|; sizes must match and be non-zero.
double recall_at_m(std::span<const std::size_t> predicted, std::span<const std::size_t> oracle);

class ToyModel {
public:
    explicit ToyModel(ModelDims dims = {});

    const ModelDims& dims() const { return dims_; }
    const LayerWeights& layer(std::size_t i) const { return layers_.at(i); }
    const predictor::HeadMap& head_map() const { return map_; }

    // h_q × d queries of `layer` for layer input x.
    Matrix queries(std::size_t layer, std::span<const double> x) const;
    TokenKv kv(std::size_t layer, std::span<const double> x) const;
    // Residual update after attention: x + o·W_O, then the FFN block.
    std::vector<double> finish_layer(std::size_t layer, std::span<const double> x, const Matrix& attn_out) const;

    // Orthonormal basis (kv_width × kv_width) of the layer's key space used by
    // the workload generator; deterministic in the model seed.
    const Matrix& key_basis(std::size_t layer) const { return key_basis_.at(layer); }

private:
    ModelDims dims_;
    predictor::HeadMap map_;
    std::vector<LayerWeights> layers_;
    std::vector<Matrix> key_basis_;
};

// Keeps every K/V in memory and attends over all of it.
class ReferenceDecoder {
public:
    struct StepResult {
        std::vector<std::vector<double>> layer_inputs;  // x_0 .. x_{L-1}
        std::vector<Matrix> attn_out;                  // per layer, h_q × d
        std::vector<double> output;                    // x_L
    };

    ReferenceDecoder(const ToyModel& model, std::vector<Matrix> prompt_k, std::vector<Matrix> prompt_v);

    StepResult step(std::span<const double> x);

    const Matrix& k(std::size_t layer) const { return k_.at(layer); }
    const Matrix& v(std::size_t layer) const { return v_.at(layer); }

private:
    const ToyModel& model_;
    std::vector<Matrix> k_;
    std::vector<Matrix> v_;
};

struct WorkloadSpec {
    std::uint64_t seed = 1;
    std::size_t context_len = 4096;
    std::size_t steps = 300;
    double drift = 0.14;            // per-step probability that an active topic is replaced
    std::size_t unit_tokens = 16;   // hot tokens of a topic come in aligned runs of this length
    std::size_t active_topics = 5;
    std::size_t hot_tokens = 400;   // tokens hot at any step, split across the active topics
    double hot_scale = 20.0;        // key magnitude along the topic direction
    double key_noise = 1.0;         // isotropic key noise
    double spectrum_decay = 8.0;    // e-folding length of topic-direction energy across the key basis

    void validate() const;
    KeyValueConfig to_config() const;
    static WorkloadSpec from_config(const KeyValueConfig& cfg);
};

struct Workload {
    WorkloadSpec spec;
    std::vector<Matrix> prompt_k;  // per layer, S × h_kv·d
    std::vector<Matrix> prompt_v;
    std::vector<std::vector<double>> inputs;           // per step, model_dim
    std::vector<std::vector<std::size_t>> active;      // per step, sorted topic ids
    std::vector<std::vector<std::size_t>> topic_units;  // topic → unit indices
};

Workload gen_workload(const ToyModel& model, const WorkloadSpec& spec);

// Number of topics for a spec (units of context divided by units per topic).
std::size_t topic_count(const WorkloadSpec& spec);

// Prompt K of `sequences` held-out workloads stacked per layer, for fitting
// projections.
std::vector<Matrix> held_out_k_samples(const ToyModel& model, const WorkloadSpec& spec, std::size_t sequences);

}  // namespace kvo::refmodel
