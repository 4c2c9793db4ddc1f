#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kvo/kcompress.hpp"
#include "kvo/kvstore.hpp"
#include "kvo/refmodel.hpp"
#include "kvo/runtime.hpp"

namespace kvo::tuner {

// Byte accounting for one model's KV cache.
struct KvShape {
    std::size_t layers = 0;
    std::size_t h_kv = 0;
    std::size_t head_dim = 0;
    std::uint32_t elem_bytes = 2;

    static KvShape of(const refmodel::ModelDims& dims, std::uint32_t elem_bytes);
    std::size_t kv_width() const { return h_kv * head_dim; }
    // K and V of one token in one layer.
    std::uint64_t token_bytes() const { return 2ull * kv_width() * elem_bytes; }
    // Compressed K for S tokens at sigma, all layers.
    std::uint64_t klr_bytes(std::size_t s, double sigma) const;
    // One selection of MG tokens per layer.
    std::uint64_t selection_bytes(std::size_t mg_const) const { return layers * mg_const * token_bytes(); }
    std::uint64_t rolling_bytes(std::size_t group_size) const { return layers * group_size * token_bytes(); }
    friend bool operator==(const KvShape&, const KvShape&) = default;
};

struct LookupTables {
    // G → (C → mean reuse rate); C is total reuse bytes over all layers.
    std::map<std::size_t, std::map<std::uint64_t, double>> reuse_rate;
    // sigma → per-layer projections.
    std::map<double, std::vector<kcompress::ProjectionMatrix>> projections;

    // Linear in C between keys, clamped outside them.
    double reuse_at(std::size_t group_size, std::uint64_t capacity) const;
    void validate() const;
};

struct TunerConfig {
    std::uint64_t budget_max = 0;  // bytes over the whole batch
    std::size_t b_max = 1;
    std::size_t s_min = 2048;
    std::size_t s_max = 4096;
    std::size_t s_step = 2048;
    double alpha = 0.1;
    std::uint64_t delta = 0;  // 0 = one reuse slot at G_max
    double sigma_max = 32.0;
    std::size_t g_max = 16;
    std::size_t mg_const = 400;
    bool normalize_distance = false;

    void validate() const;
    std::uint64_t per_batch_budget() const { return budget_max / b_max; }
};

struct ReuseSampling {
    std::vector<std::uint64_t> capacities;  // C keys
    std::size_t samples = 2;
};

// Reuse rate per (G, C): the predictor's selections from runtime runs on
// `samples` workloads, replayed through a FIFO of each capacity. Capacities
// below one selection per layer record 0.
LookupTables build_reuse_lookup(const refmodel::ToyModel& model, const runtime::RuntimeConfig& base,
                                const std::vector<kcompress::ProjectionMatrix>& projections,
                                const refmodel::WorkloadSpec& workload, std::span<const std::size_t> group_sizes,
                                const ReuseSampling& sampling);

// Sampled delay surfaces. t_io is indexed [b][g][c], t_model [b][c][s][sigma].
struct ProfileTables {
    KvShape shape;
    std::size_t mg_const = 400;
    std::vector<double> b_axis, g_axis, c_axis, s_axis, sigma_axis;
    std::vector<double> t_io;
    std::vector<double> t_model;

    void validate() const;
    // Multilinear interpolation; points outside the grid are clamped to it
    // and `clamped` is set.
    double io(double b, double g, double c, bool* clamped = nullptr) const;
    double model(double b, double c, double s, double sigma, bool* clamped = nullptr) const;
    double& io_at(std::size_t bi, std::size_t gi, std::size_t ci);
    double& model_at(std::size_t bi, std::size_t ci, std::size_t si, std::size_t sigi);
};

struct ProfileOptions {
    kvstore::DiskModel disk = kvstore::DiskModel::nvme();
    runtime::ComputeCostModel cost;
    std::uint32_t block_align = 4096;
    std::size_t patterns = 8;  // random miss patterns averaged per t_io sample
    std::uint64_t seed = 1;
};

ProfileTables profile(const refmodel::ModelDims& dims, std::uint32_t elem_bytes, const TunerConfig& tc,
                      const LookupTables& lookup, const ProfileOptions& options);

struct Solution {
    std::size_t g = 1;
    double sigma = 1.0;
    std::size_t m = 1;
    std::uint64_t c = 0;
    bool feasible = false;
    double t_io = 0.0;
    double t_model = 0.0;
    std::string diagnostics;
    friend bool operator==(const Solution&, const Solution&) = default;
};

std::size_t m_for_group(std::size_t mg_const, std::size_t group_size);

// Greedy schedule: smallest sigma that fits the budget with C, then
// G = 1..G_max against (1−α)·t_io ≤ t_model; on failure C grows by δ and
// the G scan restarts.
Solution solve(const TunerConfig& tc, std::size_t b, std::size_t s, const ProfileTables& tables);

using SolutionKey = std::pair<std::size_t, std::size_t>;  // (b, S)
using SolutionTable = std::map<SolutionKey, Solution>;

// Feasible solutions over b = 1..b_max and S = S_min, S_min + step, ..., S_max.
SolutionTable build_solution_table(const TunerConfig& tc, const ProfileTables& tables,
                                   std::vector<std::string>* diagnostics = nullptr);

// Exact key, else nearest by Euclidean distance over (b, S); ties go to the
// smaller b, then the smaller S. With `normalize`, each axis is divided by
// its key range first.
const Solution& query_solution(const SolutionTable& table, std::size_t b, std::size_t s, bool normalize = false);

}  // namespace kvo::tuner
