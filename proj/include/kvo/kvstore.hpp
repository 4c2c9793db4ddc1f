#pragma once

#include <atomic>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvo/kv_config.hpp"

namespace kvo::kvstore {

struct DiskLayout {
    std::uint32_t num_layers = 0;
    std::uint32_t h_kv = 0;
    std::uint32_t head_dim = 0;
    std::uint32_t group_size = 0;
    std::uint32_t elem_bytes = 2;  // 2 = IEEE half, 4 = float
    std::uint32_t block_align = 4096;
    std::uint64_t max_tokens = 0;  // capacity of each layer region

    void validate() const;  // throws ParameterError

    std::uint64_t kv_width() const { return std::uint64_t{h_kv} * head_dim; }
    // One token, all KV heads, K and V.
    std::uint64_t entry_bytes() const { return kv_width() * 2 * elem_bytes; }
    std::uint64_t group_byte_size() const { return entry_bytes() * group_size; }
    // Distance between consecutive groups on disk (group bytes rounded up to block_align).
    std::uint64_t group_stride() const;
    std::uint64_t groups_per_layer() const { return (max_tokens + group_size - 1) / group_size; }
    std::uint64_t header_bytes() const;
    std::uint64_t layer_offset(std::uint32_t layer) const;
    std::uint64_t group_offset(std::uint32_t layer, std::uint64_t index) const;
    std::uint64_t file_size() const;

    friend bool operator==(const DiskLayout&, const DiskLayout&) = default;
};

struct GroupId {
    std::uint32_t layer = 0;
    std::uint64_t index = 0;
    friend auto operator<=>(const GroupId&, const GroupId&) = default;
};

// K and V of one token, each h_kv × head_dim laid out head-major.
struct TokenKv {
    std::vector<double> k;
    std::vector<double> v;
};

// Serialized group payload (exactly group_byte_size bytes, no padding).
using Payload = std::vector<std::byte>;

Payload encode_group(const DiskLayout& layout, std::span<const TokenKv> tokens);
std::vector<TokenKv> decode_group(const DiskLayout& layout, std::span<const std::byte> payload);

// IEEE 754 binary16 conversion, round to nearest even.
std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

struct CalibrationPoint {
    std::uint64_t block_bytes = 0;
    double fraction = 0.0;
};

struct DiskModel {
    std::string name;
    double peak_bandwidth = 0.0;       // bytes/s
    double per_request_latency = 0.0;  // s
    std::vector<CalibrationPoint> curve;  // ascending block_bytes

    void validate() const;  // throws ParameterError

    static DiskModel nvme();
    static DiskModel emmc();
    static DiskModel from_config(const KeyValueConfig& cfg);
    static DiskModel load(const std::filesystem::path& path);
    // "nvme", "emmc", or a path to a preset file.
    static DiskModel resolve(const std::string& name_or_path);
    KeyValueConfig to_config() const;
};

// Fraction of peak at the given block size: piecewise linear in log2(block),
// saturating at the last point; below the first point throughput scales
// linearly with block size.
double bandwidth_fraction(const DiskModel& model, std::uint64_t block_bytes);
double effective_bandwidth(const DiskModel& model, std::uint64_t block_bytes);
double estimate_io_time(const DiskModel& model, std::span<const std::uint64_t> request_blocks);

// Run of consecutive groups read with one request.
struct ReadRequest {
    std::uint32_t layer = 0;
    std::uint64_t first = 0;
    std::uint64_t count = 0;
};

// ids must be sorted and unique (ParameterError otherwise).
std::vector<ReadRequest> coalesce(std::span<const GroupId> ids);

// Bytes transferred by one request: every group but the last is read with
// its padding.
std::uint64_t request_bytes(const DiskLayout& layout, const ReadRequest& request);

struct IoStats {
    std::uint64_t requests = 0;
    std::uint64_t bytes = 0;                  // payload bytes, Σ group_byte_size
    std::vector<std::uint64_t> request_blocks;  // transfer size per request
    double seconds = 0.0;

    IoStats& operator+=(const IoStats& other);
};

class BlockDevice {
public:
    virtual ~BlockDevice() = default;
    virtual void read(std::uint64_t offset, std::span<std::byte> out) = 0;
    virtual void write(std::uint64_t offset, std::span<const std::byte> data) = 0;
    virtual void sync() {}
};

class FileDevice final : public BlockDevice {
public:
    // Opens (creating if needed) the file; `truncate` discards previous contents.
    FileDevice(const std::filesystem::path& path, bool truncate);
    ~FileDevice() override;
    FileDevice(const FileDevice&) = delete;
    FileDevice& operator=(const FileDevice&) = delete;

    void read(std::uint64_t offset, std::span<std::byte> out) override;
    void write(std::uint64_t offset, std::span<const std::byte> data) override;
    void sync() override;

private:
    std::filesystem::path path_;
    int fd_ = -1;
};

// Sparse in-memory device; unwritten bytes read as zero.
class MemoryDevice final : public BlockDevice {
public:
    explicit MemoryDevice(std::uint64_t page_bytes = 512);
    ~MemoryDevice() override;
    void read(std::uint64_t offset, std::span<std::byte> out) override;
    void write(std::uint64_t offset, std::span<const std::byte> data) override;
    std::size_t resident_pages() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct PrefillResult {
    std::uint64_t groups_written = 0;
    std::uint64_t remainder = 0;  // trailing tokens not written
    IoStats stats;
};

struct ReadResult {
    std::vector<Payload> payloads;  // in id order
    IoStats stats;
};

void write_header(BlockDevice& device, const DiskLayout& layout);
DiskLayout read_header(BlockDevice& device);  // FormatError on bad magic/version

// Group-granular KV store. With a DiskModel, IoStats::seconds is the modeled
// transfer time; without one it is measured wall time. Reads of written
// groups may run concurrently with writes of other groups; a group's
// written-range bookkeeping must be updated by a single writer.
class KvStore {
public:
    KvStore(DiskLayout layout, std::unique_ptr<BlockDevice> device, std::optional<DiskModel> model);

    const DiskLayout& layout() const { return layout_; }
    const std::optional<DiskModel>& model() const { return model_; }

    // Writes all complete groups of `tokens` starting at group 0 of the layer.
    PrefillResult prefill_write(std::uint32_t layer, std::span<const TokenKv> tokens);

    // Appends one full group; id.index must equal groups_written(id.layer).
    IoStats write_group(GroupId id, std::span<const TokenKv> tokens);

    ReadResult read_groups(std::span<const GroupId> ids);

    std::uint64_t groups_written(std::uint32_t layer) const;

private:
    double time_requests(std::span<const std::uint64_t> blocks, double measured) const;

    DiskLayout layout_;
    std::unique_ptr<BlockDevice> device_;
    std::optional<DiskModel> model_;
    std::unique_ptr<std::atomic<std::uint64_t>[]> written_;
};

}  // namespace kvo::kvstore
