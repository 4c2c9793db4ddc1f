#include "kvo/refmodel.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <string>

#include "kvo/error.hpp"
#include "kvo/random.hpp"

namespace kvo::refmodel {

namespace {

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    Matrix m(rows, cols);
    for (double& x : m.data()) x = rng.normal(0.0, stddev);
    return m;
}

// Columns of a random Gaussian matrix orthonormalized by modified Gram-Schmidt.
Matrix random_orthonormal(Rng& rng, std::size_t n) {
    Matrix q = gaussian(rng, n, n, 1.0);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 0; k < j; ++k) {
            double p = 0.0;
            for (std::size_t i = 0; i < n; ++i) p += q(i, j) * q(i, k);
            for (std::size_t i = 0; i < n; ++i) q(i, j) -= p * q(i, k);
        }
        double norm = 0.0;
        for (std::size_t i = 0; i < n; ++i) norm += q(i, j) * q(i, j);
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < n; ++i) q(i, j) /= norm;
    }
    return q;
}

}  // namespace

std::vector<double> rmsnorm(std::span<const double> x) {
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-12);
    std::vector<double> out(x.begin(), x.end());
    for (double& v : out) v *= inv;
    return out;
}

Matrix exact_attention(const Matrix& q, const Matrix& k, const Matrix& v, const predictor::HeadMap& map) {
    if (k.rows() != v.rows() || k.cols() != v.cols() || k.cols() != map.h_kv * q.cols() || q.rows() != map.h_q())
        throw ParameterError("attention shapes are inconsistent");
    if (k.rows() == 0) throw ParameterError("attention over an empty context");
    return attend(q, map, k.rows(), [&](std::size_t t) { return k.row(t); }, [&](std::size_t t) { return v.row(t); });
}

Matrix exact_scores(const Matrix& q, const Matrix& k, const predictor::HeadMap& map) {
    const std::size_t d = q.cols();
    if (k.cols() != map.h_kv * d || q.rows() != map.h_q()) throw ParameterError("score shapes are inconsistent");
    Matrix s(q.rows(), k.rows());
    for (std::size_t t = 0; t < k.rows(); ++t) {
        const auto kr = k.row(t);
        for (std::size_t h = 0; h < q.rows(); ++h) {
            const auto qh = q.row(h);
            const double* kh = kr.data() + map.g[h] * d;
            double acc = 0.0;
            for (std::size_t i = 0; i < d; ++i) acc += qh[i] * kh[i];
            s(h, t) = acc;
        }
    }
    return s;
}

std::vector<std::size_t> oracle_top_groups(const Matrix& q, const Matrix& k, const predictor::HeadMap& map,
                                           std::size_t group_size, std::size_t m) {
    return predictor::select_groups(exact_scores(q, k, map), group_size, m).selected;
}

double recall_at_m(std::span<const std::size_t> predicted, std::span<const std::size_t> oracle) {
    if (oracle.empty()) throw ParameterError("recall needs M > 0");
    if (predicted.size() != oracle.size()) throw ParameterError("predicted and oracle sets differ in size");
    const std::set<std::size_t> truth(oracle.begin(), oracle.end());
    std::size_t hit = 0;
    for (std::size_t p : std::set<std::size_t>(predicted.begin(), predicted.end())) hit += truth.count(p);
    return static_cast<double>(hit) / static_cast<double>(oracle.size());
}

// ---- model ----

void ModelDims::validate() const {
    if (layers == 0 || model_dim == 0 || h_q == 0 || h_kv == 0 || head_dim == 0 || ffn_dim == 0)
        throw ParameterError("model dimensions must be positive");
    if (h_q % h_kv != 0) throw ParameterError("h_q must be divisible by h_kv");
    if (!(residual_scale >= 0.0)) throw ParameterError("residual_scale must be non-negative");
}

ToyModel::ToyModel(ModelDims dims) : dims_(dims) {
    dims_.validate();
    map_ = predictor::HeadMap::gqa(dims_.h_q, dims_.h_kv);
    Rng rng(dims_.seed);
    const double in_sd = 1.0 / std::sqrt(static_cast<double>(dims_.model_dim));
    for (std::size_t l = 0; l < dims_.layers; ++l) {
        LayerWeights w;
        w.w_q = gaussian(rng, dims_.model_dim, dims_.q_width(), in_sd);
        w.w_k = gaussian(rng, dims_.model_dim, dims_.kv_width(), in_sd);
        w.w_v = gaussian(rng, dims_.model_dim, dims_.kv_width(), in_sd);
        w.w_o = gaussian(rng, dims_.q_width(), dims_.model_dim,
                         dims_.residual_scale / std::sqrt(static_cast<double>(dims_.q_width())));
        w.w1 = gaussian(rng, dims_.model_dim, dims_.ffn_dim, in_sd);
        w.w2 = gaussian(rng, dims_.ffn_dim, dims_.model_dim,
                        dims_.residual_scale / std::sqrt(static_cast<double>(dims_.ffn_dim)));
        layers_.push_back(std::move(w));
    }
    for (std::size_t l = 0; l < dims_.layers; ++l) key_basis_.push_back(random_orthonormal(rng, dims_.kv_width()));
}

Matrix ToyModel::queries(std::size_t layer, std::span<const double> x) const {
    const auto a = rmsnorm(x);
    return Matrix(dims_.h_q, dims_.head_dim, numerics::vecmat(a, layers_.at(layer).w_q));
}

TokenKv ToyModel::kv(std::size_t layer, std::span<const double> x) const {
    const auto a = rmsnorm(x);
    return {numerics::vecmat(a, layers_.at(layer).w_k), numerics::vecmat(a, layers_.at(layer).w_v)};
}

std::vector<double> ToyModel::finish_layer(std::size_t layer, std::span<const double> x, const Matrix& attn_out) const {
    const LayerWeights& w = layers_.at(layer);
    const auto o = numerics::vecmat(attn_out.data(), w.w_o);
    std::vector<double> h(x.begin(), x.end());
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += o[i];
    auto f = numerics::vecmat(rmsnorm(h), w.w1);
    for (double& v : f) v = std::max(0.0, v);
    const auto down = numerics::vecmat(f, w.w2);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += down[i];
    return h;
}

ReferenceDecoder::ReferenceDecoder(const ToyModel& model, std::vector<Matrix> prompt_k, std::vector<Matrix> prompt_v)
    : model_(model), k_(std::move(prompt_k)), v_(std::move(prompt_v)) {
    if (k_.size() != model.dims().layers || v_.size() != k_.size())
        throw ParameterError("prompt KV must cover every layer");
}

ReferenceDecoder::StepResult ReferenceDecoder::step(std::span<const double> x) {
    StepResult r;
    std::vector<double> cur(x.begin(), x.end());
    for (std::size_t l = 0; l < k_.size(); ++l) {
        r.layer_inputs.push_back(cur);
        const TokenKv t = model_.kv(l, cur);
        k_[l].append_row(t.k);
        v_[l].append_row(t.v);
        const Matrix q = model_.queries(l, cur);
        r.attn_out.push_back(exact_attention(q, k_[l], v_[l], model_.head_map()));
        cur = model_.finish_layer(l, cur, r.attn_out.back());
    }
    r.output = std::move(cur);
    return r;
}

// ---- workload ----

void WorkloadSpec::validate() const {
    if (context_len == 0 || unit_tokens == 0 || active_topics == 0 || hot_tokens == 0)
        throw ParameterError("workload sizes must be positive");
    if (!(drift >= 0.0 && drift <= 1.0)) throw ParameterError("drift must lie in [0, 1]");
    if (hot_tokens % (active_topics * unit_tokens) != 0)
        throw ParameterError("hot_tokens must be a multiple of active_topics × unit_tokens");
    if (topic_count(*this) < active_topics)
        throw ParameterError("context too short for " + std::to_string(active_topics) + " active topics");
}

std::size_t topic_count(const WorkloadSpec& spec) {
    const std::size_t units_per_topic = spec.hot_tokens / (spec.active_topics * spec.unit_tokens);
    if (units_per_topic == 0) return 0;
    return spec.context_len / spec.unit_tokens / units_per_topic;
}

KeyValueConfig WorkloadSpec::to_config() const {
    KeyValueConfig c;
    c.add("seed", std::to_string(seed));
    c.add("context_len", std::to_string(context_len));
    c.add("steps", std::to_string(steps));
    c.add("drift", format_double(drift));
    c.add("unit_tokens", std::to_string(unit_tokens));
    c.add("active_topics", std::to_string(active_topics));
    c.add("hot_tokens", std::to_string(hot_tokens));
    c.add("hot_scale", format_double(hot_scale));
    c.add("key_noise", format_double(key_noise));
    c.add("spectrum_decay", format_double(spectrum_decay));
    return c;
}

WorkloadSpec WorkloadSpec::from_config(const KeyValueConfig& c) {
    WorkloadSpec s;
    s.seed = c.get_uint("seed", s.seed);
    s.context_len = c.get_uint("context_len", s.context_len);
    s.steps = c.get_uint("steps", s.steps);
    s.drift = c.get_double("drift", s.drift);
    s.unit_tokens = c.get_uint("unit_tokens", s.unit_tokens);
    s.active_topics = c.get_uint("active_topics", s.active_topics);
    s.hot_tokens = c.get_uint("hot_tokens", s.hot_tokens);
    s.hot_scale = c.get_double("hot_scale", s.hot_scale);
    s.key_noise = c.get_double("key_noise", s.key_noise);
    s.spectrum_decay = c.get_double("spectrum_decay", s.spectrum_decay);
    s.validate();
    return s;
}

Workload gen_workload(const ToyModel& model, const WorkloadSpec& spec) {
    spec.validate();
    const ModelDims& dims = model.dims();
    const std::size_t width = dims.kv_width();
    const std::size_t topics = topic_count(spec);
    const std::size_t units_per_topic = spec.hot_tokens / (spec.active_topics * spec.unit_tokens);
    const std::size_t units = spec.context_len / spec.unit_tokens;
    Rng rng(spec.seed * 0x9e3779b97f4a7c15ULL + 0x1234567ULL);

    Workload w;
    w.spec = spec;

    // Scatter each topic's units over the context.
    std::vector<std::size_t> perm(units);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = units; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    std::vector<std::size_t> owner(units, topics);  // topics = cold
    w.topic_units.resize(topics);
    for (std::size_t p = 0; p < topics; ++p) {
        for (std::size_t j = 0; j < units_per_topic; ++j) {
            const std::size_t u = perm[p * units_per_topic + j];
            owner[u] = p;
            w.topic_units[p].push_back(u);
        }
        std::sort(w.topic_units[p].begin(), w.topic_units[p].end());
    }

    // Topic key directions: random mixtures of the model's key basis with
    // exponentially decaying weights, so keys have a decaying spectrum.
    std::vector<Matrix> dirs;  // per layer, topics × width
    for (std::size_t l = 0; l < dims.layers; ++l) {
        const Matrix& basis = model.key_basis(l);
        Matrix c(topics, width);
        for (std::size_t p = 0; p < topics; ++p) {
            auto row = c.row(p);
            for (std::size_t j = 0; j < width; ++j) {
                const double coef = rng.normal() * std::exp(-static_cast<double>(j) / spec.spectrum_decay);
                for (std::size_t i = 0; i < width; ++i) row[i] += coef * basis(i, j);
            }
            const double n = std::sqrt(numerics::dot(row, row));
            for (double& x : row) x /= n;
        }
        dirs.push_back(std::move(c));
    }

    // Prompt K/V.
    for (std::size_t l = 0; l < dims.layers; ++l) {
        Matrix k(spec.context_len, width), v(spec.context_len, width);
        for (std::size_t t = 0; t < spec.context_len; ++t) {
            auto kr = k.row(t);
            for (double& x : kr) x = spec.key_noise * rng.normal();
            for (double& x : v.row(t)) x = rng.normal();
            const std::size_t unit = t / spec.unit_tokens;
            if (unit < units && owner[unit] < topics) {
                const double mag = spec.hot_scale * rng.uniform(0.5, 1.0);
                const auto c = dirs[l].row(owner[unit]);
                for (std::size_t i = 0; i < width; ++i) kr[i] += mag * c[i];
            }
        }
        w.prompt_k.push_back(std::move(k));
        w.prompt_v.push_back(std::move(v));
    }

    // Topic embeddings e_p with e_p·W̄_l ≈ c_p^l for every layer, where W̄_l
    // sums the query projections of the heads sharing each KV head.
    const std::size_t dm = dims.model_dim;
    const std::size_t group = dims.h_q / dims.h_kv;
    Matrix wbar(dm, dims.layers * width);
    for (std::size_t l = 0; l < dims.layers; ++l) {
        const Matrix& wq = model.layer(l).w_q;
        for (std::size_t r = 0; r < dm; ++r)
            for (std::size_t h = 0; h < dims.h_q; ++h)
                for (std::size_t i = 0; i < dims.head_dim; ++i)
                    wbar(r, l * width + (h / group) * dims.head_dim + i) += wq(r, h * dims.head_dim + i);
    }
    Matrix targets(dims.layers * width, topics);
    for (std::size_t p = 0; p < topics; ++p)
        for (std::size_t l = 0; l < dims.layers; ++l)
            for (std::size_t i = 0; i < width; ++i) targets(l * width + i, p) = dirs[l](p, i);
    const Matrix gram = numerics::matmul_transposed(wbar, wbar);
    const Matrix embeddings = numerics::cholesky_solve(gram, numerics::matmul(wbar, targets), 1e-3);  // dm × topics

    // Active-topic trajectory.
    std::vector<std::size_t> active;
    {
        std::vector<std::size_t> all(topics);
        std::iota(all.begin(), all.end(), 0);
        for (std::size_t i = 0; i < spec.active_topics; ++i) {
            const std::size_t j = i + rng.below(topics - i);
            std::swap(all[i], all[j]);
            active.push_back(all[i]);
        }
    }
    for (std::size_t step = 0; step < spec.steps; ++step) {
        if (step > 0) {
            std::vector<bool> keep(active.size());
            std::set<std::size_t> kept;
            for (std::size_t i = 0; i < active.size(); ++i) {
                keep[i] = !rng.bernoulli(spec.drift);
                if (keep[i]) kept.insert(active[i]);
            }
            std::vector<std::size_t> pool;
            for (std::size_t p = 0; p < topics; ++p)
                if (!kept.contains(p)) pool.push_back(p);
            for (std::size_t i = 0; i < active.size(); ++i) {
                if (keep[i]) continue;
                const std::size_t j = rng.below(pool.size());
                active[i] = pool[j];
                pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
            }
        }
        std::vector<double> x(dm, 0.0);
        for (std::size_t p : active)
            for (std::size_t r = 0; r < dm; ++r) x[r] += embeddings(r, p);
        // Unit RMS, the scale the residual stream is normalized to.
        const double n = std::sqrt(numerics::dot(x, x) / static_cast<double>(dm));
        for (double& v : x) v /= n;
        w.inputs.push_back(std::move(x));
        std::vector<std::size_t> sorted = active;
        std::sort(sorted.begin(), sorted.end());
        w.active.push_back(std::move(sorted));
    }
    return w;
}

std::vector<Matrix> held_out_k_samples(const ToyModel& model, const WorkloadSpec& spec, std::size_t sequences) {
    std::vector<Matrix> out(model.dims().layers);
    for (std::size_t s = 0; s < sequences; ++s) {
        WorkloadSpec h = spec;
        h.seed = spec.seed + 1000003ULL * (s + 1);
        h.steps = 0;
        const Workload w = gen_workload(model, h);
        for (std::size_t l = 0; l < out.size(); ++l) out[l].append_rows(w.prompt_k[l]);
    }
    return out;
}

}  // namespace kvo::refmodel
