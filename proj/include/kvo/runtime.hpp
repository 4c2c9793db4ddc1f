#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvo/kcompress.hpp"
#include "kvo/kvstore.hpp"
#include "kvo/membuf.hpp"
#include "kvo/refmodel.hpp"

namespace kvo::runtime {

using numerics::Matrix;

enum class Backend { simulated, file };
enum class TimingMode { modeled, measured };

// Deterministic CPU-time model for the decode tasks.
struct ComputeCostModel {
    double flops_per_second = 1e9;
    double per_layer_fixed_seconds = 20e-6;
    double per_group_lookup_seconds = 0.5e-6;
    double per_slot_seconds = 0.02e-6;

    // Query projection, low-rank projection, scores over n compressed tokens,
    // head summation and group max.
    double prediction_seconds(const refmodel::ModelDims& dims, std::size_t rank, std::size_t n_tokens) const;
    // QKV projections, attention over `attended` tokens, output projection, FFN.
    double compute_seconds(const refmodel::ModelDims& dims, std::size_t attended) const;
    double management_seconds(std::size_t groups, std::size_t slots) const;
};

struct RuntimeConfig {
    std::size_t group_size = 4;
    double sigma = 4.0;
    std::size_t m = 100;
    std::uint64_t reuse_capacity_bytes = 0;  // total over layers; 0 = two selections per layer
    std::size_t mg_const = 400;

    bool reuse = true;
    bool rolling_buffer = true;
    bool overlap = true;  // false runs the same tasks serially on one thread

    Backend backend = Backend::simulated;
    std::optional<kvstore::DiskModel> disk = kvstore::DiskModel::nvme();
    std::filesystem::path offload_path;  // file backend
    std::uint32_t elem_bytes = 2;
    std::uint32_t block_align = 4096;
    std::uint64_t max_context = 0;  // disk capacity in tokens; 0 = prompt + 4096

    TimingMode timing = TimingMode::modeled;
    ComputeCostModel cost;
    bool oracle_recall = false;

    void validate() const;
};

// Reuse slots per layer for a capacity in bytes.
std::size_t slots_per_layer(std::uint64_t capacity_bytes, std::size_t layers, std::uint64_t group_byte_size);

struct StepStats {
    std::size_t step = 0;
    double io_seconds = 0.0;          // disk reads
    double flush_seconds = 0.0;       // incremental group writes
    double prediction_seconds = 0.0;  // prediction + buffer management
    double compute_seconds = 0.0;     // all CPU work: prediction, management, attention, FFN
    double wall_seconds = 0.0;        // pipeline makespan
    std::uint64_t reuse_hits = 0;
    std::uint64_t reuse_requests = 0;
    std::uint64_t bytes_read = 0;
    std::uint64_t requests = 0;
    std::uint64_t groups_flushed = 0;
    std::vector<std::vector<std::size_t>> selected;  // per layer
    std::vector<double> recall;                      // per layer, when oracle_recall is on
};

struct DecodeSummary {
    std::size_t steps = 0;
    double io_seconds = 0.0;
    double flush_seconds = 0.0;
    double compute_seconds = 0.0;
    double wall_seconds = 0.0;
    std::uint64_t bytes_read = 0;
    std::uint64_t requests = 0;
    std::uint64_t reuse_hits = 0;
    std::uint64_t reuse_requests = 0;
    double tokens_per_second = 0.0;
    double io_utilization = 0.0;
    double reuse_rate = 0.0;
    double mean_recall = -1.0;  // -1 when not measured
};

DecodeSummary summarize(std::span<const StepStats> steps, double peak_bandwidth);

struct StepOutput {
    std::vector<double> output;    // final hidden state
    std::vector<Matrix> attn_out;  // per layer, h_q × d
    StepStats stats;
};

class Engine {
public:
    // projections: one per layer, fitted at config.sigma.
    Engine(const refmodel::ToyModel& model, RuntimeConfig config, std::vector<kcompress::ProjectionMatrix> projections);
    ~Engine();
    Engine(const Engine&) = delete;
    Engine& operator=(const Engine&) = delete;

    // Writes full groups to disk, seeds the rolling buffers with the
    // remainder and builds the compressed K cache for the on-disk tokens.
    void prefill(const std::vector<Matrix>& prompt_k, const std::vector<Matrix>& prompt_v);

    StepOutput decode_step(std::span<const double> x);

    const RuntimeConfig& config() const { return config_; }
    const std::vector<StepStats>& history() const { return history_; }
    DecodeSummary summary() const;

    const membuf::RollingBuffer& rolling() const;
    const kcompress::CompressedKCache& compressed_k() const { return klr_; }
    const membuf::ReuseBuffer& reuse_buffer(std::size_t layer) const { return buffers_.at(layer); }
    const kvstore::KvStore& store() const;
    std::size_t slots_per_layer() const { return slots_; }
    std::uint64_t prefill_io_bytes() const { return prefill_bytes_; }

    // Tokens visible to attention at the next step for a layer: on-disk
    // (selectable) plus rolling-buffer tokens when the rolling buffer is on.
    std::size_t attendable_tokens(std::size_t layer) const;
    // Total tokens in the sequence so far (prompt + generated).
    std::size_t sequence_length() const { return seq_len_; }

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    const refmodel::ToyModel& model_;
    RuntimeConfig config_;
    kcompress::CompressedKCache klr_;
    std::vector<membuf::ReuseBuffer> buffers_;
    std::size_t slots_ = 0;
    std::vector<StepStats> history_;
    std::uint64_t prefill_bytes_ = 0;
    std::size_t seq_len_ = 0;
};

// ratio[j-1] = |S_j ∩ S_{j-1}| / |S_j| for j ≥ 1; an empty S_j counts as 1.
std::vector<double> overlap_ratio(const std::vector<std::vector<std::size_t>>& selection_log);

// Line-delimited records.
void write_selection_log(std::ostream& out, std::span<const StepStats> steps);
// Per layer, the selection of every step. FormatError on malformed input.
std::vector<std::vector<std::vector<std::size_t>>> read_selection_log(std::istream& in);
void write_stats(std::ostream& out, std::span<const StepStats> steps);

}  // namespace kvo::runtime
