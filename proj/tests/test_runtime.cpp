#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>
#include <sstream>

#include "kvo/error.hpp"
#include "kvo/random.hpp"
#include "kvo/runtime.hpp"

using namespace kvo;
using kvo::numerics::Matrix;
using runtime::Engine;
using runtime::RuntimeConfig;

namespace {

refmodel::ModelDims small_dims() {
    refmodel::ModelDims d;
    d.layers = 3;
    d.model_dim = 32;
    d.h_q = 4;
    d.h_kv = 2;
    d.head_dim = 8;
    d.ffn_dim = 64;
    d.seed = 11;
    return d;
}

struct Prompt {
    std::vector<Matrix> k, v;
};

Prompt random_prompt(const refmodel::ModelDims& d, std::size_t s, std::uint64_t seed) {
    Rng rng(seed);
    Prompt p;
    for (std::size_t l = 0; l < d.layers; ++l) {
        Matrix k(s, d.kv_width()), v(s, d.kv_width());
        for (double& x : k.data()) x = rng.normal();
        for (double& x : v.data()) x = rng.normal();
        p.k.push_back(std::move(k));
        p.v.push_back(std::move(v));
    }
    return p;
}

std::vector<std::vector<double>> random_inputs(const refmodel::ModelDims& d, std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<double>> out(n, std::vector<double>(d.model_dim));
    for (auto& x : out)
        for (double& v : x) v = rng.normal();
    return out;
}

std::vector<kcompress::ProjectionMatrix> fit(const Prompt& p, double sigma) {
    std::vector<kcompress::ProjectionMatrix> out;
    for (const auto& k : p.k) out.push_back(kcompress::fit_projection(k, sigma));
    return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST(Engine, PrefillSplitsFullGroupsAndRemainder) {
    const refmodel::ToyModel model(small_dims());
    const Prompt p = random_prompt(model.dims(), 10, 1);
    RuntimeConfig cfg;
    cfg.m = 2;
    Engine e(model, cfg, fit(random_prompt(model.dims(), 64, 101), 1.0));
    e.prefill(p.k, p.v);
    for (std::size_t l = 0; l < model.dims().layers; ++l) {
        EXPECT_EQ(e.store().groups_written(static_cast<std::uint32_t>(l)), 2u);
        EXPECT_EQ(e.rolling().size(l), 2u);
        EXPECT_EQ(e.compressed_k().n_tokens(l), 8u);
        EXPECT_EQ(e.attendable_tokens(l), 10u);
    }
    EXPECT_EQ(e.sequence_length(), 10u);
    EXPECT_THROW(e.prefill(p.k, p.v), ContractViolation);
}

TEST(Engine, PrefillShorterThanOneGroup) {
    const refmodel::ToyModel model(small_dims());
    const Prompt p = random_prompt(model.dims(), 3, 2);
    RuntimeConfig cfg;
    cfg.m = 2;
    Engine e(model, cfg, fit(random_prompt(model.dims(), 64, 102), 1.0));
    e.prefill(p.k, p.v);
    EXPECT_EQ(e.store().groups_written(0), 0u);
    EXPECT_EQ(e.rolling().size(0), 3u);
    // Nothing selectable yet: the step attends over the rolling buffer only and flushes.
    const auto out = e.decode_step(random_inputs(model.dims(), 1, 3)[0]);
    EXPECT_EQ(out.stats.bytes_read, 0u);
    EXPECT_EQ(out.stats.groups_flushed, model.dims().layers);
    EXPECT_EQ(e.store().groups_written(0), 1u);
    EXPECT_EQ(e.rolling().size(0), 0u);
}

TEST(Engine, DecodeBeforePrefillIsRejected) {
    const refmodel::ToyModel model(small_dims());
    Engine e(model, {}, fit(random_prompt(model.dims(), 64, 103), 1.0));
    EXPECT_THROW(e.decode_step(random_inputs(model.dims(), 1, 1)[0]), ContractViolation);
}

TEST(Engine, SelectingEveryGroupMatchesReferenceDecoder) {
    const refmodel::ToyModel model(small_dims());
    const Prompt p = random_prompt(model.dims(), 37, 5);
    RuntimeConfig cfg;
    cfg.m = 100;  // more than the number of groups: everything is attended
    cfg.elem_bytes = 4;
    Engine e(model, cfg, fit(p, 1.0));
    e.prefill(p.k, p.v);
    refmodel::ReferenceDecoder ref(model, p.k, p.v);
    // Crosses several flush boundaries.
    for (const auto& x : random_inputs(model.dims(), 12, 6)) {
        const auto got = e.decode_step(x);
        const auto want = ref.step(x);
        EXPECT_LE(max_abs_diff(got.output, want.output), 1e-5);
        for (std::size_t l = 0; l < model.dims().layers; ++l)
            EXPECT_LE(max_abs_diff(got.attn_out[l].data(), want.attn_out[l].data()), 1e-5);
    }
    EXPECT_EQ(e.sequence_length(), 49u);
}

TEST(Engine, IdenticalSelectionsReadNothing) {
    const refmodel::ToyModel model(small_dims());
    const Prompt p = random_prompt(model.dims(), 64, 7);
    RuntimeConfig cfg;
    cfg.group_size = 16;  // no flush within the first 15 steps
    cfg.m = 2;
    Engine e(model, cfg, fit(p, 1.0));
    e.prefill(p.k, p.v);
    const auto x = random_inputs(model.dims(), 1, 8)[0];
    const auto first = e.decode_step(x);
    EXPECT_GT(first.stats.bytes_read, 0u);
    EXPECT_EQ(first.stats.reuse_hits, 0u);
    const auto second = e.decode_step(x);
    EXPECT_EQ(second.stats.selected, first.stats.selected);
    EXPECT_EQ(second.stats.bytes_read, 0u);
    EXPECT_EQ(second.stats.requests, 0u);
    EXPECT_EQ(second.stats.reuse_hits, second.stats.reuse_requests);
    EXPECT_EQ(second.stats.io_seconds, 0.0);
}

TEST(Engine, OverlappedMatchesSerializedBitForBit) {
    const refmodel::ToyModel model(small_dims());
    const Prompt p = random_prompt(model.dims(), 96, 9);
    RuntimeConfig a;
    a.m = 5;
    RuntimeConfig b = a;
    b.overlap = false;
    Engine ea(model, a, fit(p, 2.0));
    Engine eb(model, b, fit(p, 2.0));
    ea.prefill(p.k, p.v);
    eb.prefill(p.k, p.v);
    for (const auto& x : random_inputs(model.dims(), 30, 10)) {
        const auto ra = ea.decode_step(x);
        const auto rb = eb.decode_step(x);
        ASSERT_EQ(ra.output, rb.output);
        ASSERT_EQ(ra.stats.selected, rb.stats.selected);
        ASSERT_EQ(ra.stats.bytes_read, rb.stats.bytes_read);
    }
}

TEST(Engine, FileBackendMatchesSimulated) {
    const refmodel::ToyModel model(small_dims());
    const Prompt p = random_prompt(model.dims(), 50, 12);
    const auto dir = std::filesystem::temp_directory_path() / ("kvo_rt_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    RuntimeConfig sim;
    sim.m = 4;
    RuntimeConfig file = sim;
    file.backend = runtime::Backend::file;
    file.offload_path = dir;
    file.timing = runtime::TimingMode::measured;
    {
        Engine es(model, sim, fit(p, 1.0));
        Engine ef(model, file, fit(p, 1.0));
        es.prefill(p.k, p.v);
        ef.prefill(p.k, p.v);
        for (const auto& x : random_inputs(model.dims(), 10, 13)) {
            const auto rs = es.decode_step(x);
            const auto rf = ef.decode_step(x);
            ASSERT_EQ(rs.output, rf.output);
            ASSERT_EQ(rs.stats.bytes_read, rf.stats.bytes_read);
        }
        EXPECT_TRUE(std::filesystem::exists(dir / "kv_cache.bin"));
    }
    std::filesystem::remove_all(dir);
}

TEST(Engine, HitsEqualOverlapWithOneSelectionOfCapacity) {
    const refmodel::ToyModel model(small_dims());
    const Prompt p = random_prompt(model.dims(), 128, 14);
    RuntimeConfig cfg;
    cfg.m = 6;
    Engine probe(model, cfg, fit(p, 1.0));
    probe.prefill(p.k, p.v);
    const auto gbs = probe.store().layout().group_byte_size();
    // A FIFO of exactly M slots holds the previous selection and nothing else.
    cfg.reuse_capacity_bytes = model.dims().layers * cfg.m * gbs;
    Engine e(model, cfg, fit(p, 1.0));
    e.prefill(p.k, p.v);
    ASSERT_EQ(e.slots_per_layer(), cfg.m);

    // Drifting inputs so that selections partly change.
    auto xs = random_inputs(model.dims(), 25, 15);
    for (std::size_t j = 1; j < xs.size(); ++j)
        for (std::size_t i = 0; i < xs[j].size(); ++i) xs[j][i] = 0.8 * xs[j - 1][i] + 0.6 * xs[j][i];
    for (const auto& x : xs) e.decode_step(x);

    std::stringstream log;
    runtime::write_selection_log(log, e.history());
    const auto per_layer = runtime::read_selection_log(log);
    ASSERT_EQ(per_layer.size(), model.dims().layers);
    std::size_t total_hits = 0;
    double total_overlap = 0.0;
    for (std::size_t l = 0; l < per_layer.size(); ++l) {
        const auto ratio = runtime::overlap_ratio(per_layer[l]);
        for (std::size_t j = 1; j < per_layer[l].size(); ++j) {
            EXPECT_EQ(per_layer[l][j], e.history()[j].selected[l]);
            total_overlap += ratio[j - 1] * static_cast<double>(per_layer[l][j].size());
        }
    }
    for (std::size_t j = 1; j < e.history().size(); ++j) total_hits += e.history()[j].reuse_hits;
    EXPECT_NEAR(static_cast<double>(total_hits), total_overlap, 1e-9);
    EXPECT_GT(total_hits, 0u);
    EXPECT_LT(total_hits, (xs.size() - 1) * model.dims().layers * cfg.m);
}

TEST(Engine, ReuseCapacityBelowOneSelectionFails) {
    const refmodel::ToyModel model(small_dims());
    const Prompt p = random_prompt(model.dims(), 64, 16);
    RuntimeConfig cfg;
    cfg.m = 6;
    cfg.reuse_capacity_bytes = 1;  // zero slots per layer
    Engine e(model, cfg, fit(p, 1.0));
    e.prefill(p.k, p.v);
    try {
        e.decode_step(random_inputs(model.dims(), 1, 17)[0]);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& err) {
        EXPECT_NE(std::string(err.what()).find("layer"), std::string::npos);
    }
}

TEST(Engine, ReuseDisabledReadsEverySelection) {
    const refmodel::ToyModel model(small_dims());
    const Prompt p = random_prompt(model.dims(), 64, 18);
    RuntimeConfig cfg;
    cfg.m = 4;
    cfg.reuse = false;
    Engine e(model, cfg, fit(p, 1.0));
    e.prefill(p.k, p.v);
    const auto x = random_inputs(model.dims(), 1, 19)[0];
    e.decode_step(x);
    const auto again = e.decode_step(x);
    EXPECT_EQ(again.stats.reuse_hits, 0u);
    EXPECT_GT(again.stats.bytes_read, 0u);
}

TEST(Engine, RollingBufferVisibility) {
    const refmodel::ToyModel model(small_dims());
    const std::size_t g = 4;
    const Prompt p = random_prompt(model.dims(), 32, 20);
    for (bool rb : {true, false}) {
        RuntimeConfig cfg;
        cfg.group_size = g;
        cfg.m = 2;
        cfg.rolling_buffer = rb;
        Engine e(model, cfg, fit(p, 1.0));
        e.prefill(p.k, p.v);
        for (std::size_t step = 1; step <= 3 * g; ++step) {
            e.decode_step(random_inputs(model.dims(), 1, 100 + step)[0]);
            const std::size_t generated = step;
            const std::size_t pending = generated % g;
            for (std::size_t l = 0; l < model.dims().layers; ++l) {
                if (rb) {
                    EXPECT_EQ(e.attendable_tokens(l), 32 + generated);
                } else {
                    EXPECT_EQ(e.attendable_tokens(l), 32 + generated - pending);
                }
            }
        }
    }
}

TEST(Engine, ModeledWallTimeIsBetweenLaneBounds) {
    const refmodel::ToyModel model(small_dims());
    const Prompt p = random_prompt(model.dims(), 256, 21);
    RuntimeConfig cfg;
    cfg.m = 8;
    cfg.disk = kvstore::DiskModel::emmc();
    Engine e(model, cfg, fit(p, 2.0));
    e.prefill(p.k, p.v);
    for (const auto& x : random_inputs(model.dims(), 20, 22)) {
        const auto s = e.decode_step(x).stats;
        const double lower = std::max(s.compute_seconds - s.prediction_seconds, s.prediction_seconds + s.io_seconds);
        EXPECT_GE(s.wall_seconds, lower - 1e-15);
        EXPECT_LE(s.wall_seconds, s.compute_seconds + s.io_seconds + s.flush_seconds + 1e-15);
    }
    const auto sum = e.summary();
    EXPECT_EQ(sum.steps, 20u);
    EXPECT_GT(sum.tokens_per_second, 0.0);
    EXPECT_GT(sum.io_utilization, 0.0);
    EXPECT_LE(sum.io_utilization, 1.0);
}

TEST(Engine, OracleRecallIsOneAtFullRank) {
    const refmodel::ToyModel model(small_dims());
    const Prompt p = random_prompt(model.dims(), 64, 23);
    RuntimeConfig cfg;
    cfg.m = 3;
    cfg.oracle_recall = true;
    Engine e(model, cfg, fit(p, 1.0));
    e.prefill(p.k, p.v);
    for (const auto& x : random_inputs(model.dims(), 3, 24)) {
        const auto s = e.decode_step(x).stats;
        ASSERT_EQ(s.recall.size(), model.dims().layers);
        for (std::size_t l = 1; l < s.recall.size(); ++l) EXPECT_GE(s.recall[l], 0.0);
    }
    // Layer 0 predicts from its own input, so full rank reproduces the oracle.
    for (const auto& s : e.history()) EXPECT_DOUBLE_EQ(s.recall[0], 1.0);
    EXPECT_GE(e.summary().mean_recall, 0.0);
}

TEST(OverlapRatio, Examples) {
    const std::vector<std::vector<std::size_t>> log{{1, 2, 3, 4}, {3, 4, 5, 6}, {5, 6, 7, 8}, {5, 6, 7, 8}, {}};
    EXPECT_EQ(runtime::overlap_ratio(log), (std::vector<double>{0.5, 0.5, 1.0, 1.0}));
    EXPECT_THROW(runtime::overlap_ratio({{1}}), ParameterError);
}

TEST(SelectionLog, RejectsMalformedInput) {
    std::stringstream bad_json("{\"step\": 0, \"layer\": 0, \"groups\": [1, 2]}\nnot json\n");
    EXPECT_THROW(runtime::read_selection_log(bad_json), FormatError);
    std::stringstream skipped("{\"step\": 1, \"layer\": 0, \"groups\": [1]}\n");
    EXPECT_THROW(runtime::read_selection_log(skipped), FormatError);
    std::stringstream empty("");
    EXPECT_THROW(runtime::read_selection_log(empty), FormatError);
}

TEST(RuntimeConfig, Validation) {
    RuntimeConfig c;
    c.group_size = 0;
    EXPECT_THROW(c.validate(), ParameterError);
    c = {};
    c.sigma = 0.5;
    EXPECT_THROW(c.validate(), ParameterError);
    c = {};
    c.backend = runtime::Backend::file;
    EXPECT_THROW(c.validate(), ParameterError);
    c = {};
    c.elem_bytes = 3;
    EXPECT_THROW(c.validate(), ParameterError);
}
