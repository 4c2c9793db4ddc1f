#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "kvo/kvstore.hpp"
#include "kvo/numerics.hpp"

namespace kvo::membuf {

using kvstore::GroupId;
using kvstore::TokenKv;
using numerics::Matrix;

// Decoded K/V of one group (group_size × h_kv·d each). Copies are counted so
// tests can check that the attention view never duplicates payloads.
class GroupData {
public:
    GroupData() = default;
    GroupData(Matrix k, Matrix v);
    GroupData(const GroupData& other);
    GroupData& operator=(const GroupData& other);
    GroupData(GroupData&&) noexcept = default;
    GroupData& operator=(GroupData&&) noexcept = default;

    static GroupData from_tokens(std::span<const TokenKv> tokens);

    const Matrix& k() const { return k_; }
    const Matrix& v() const { return v_; }
    std::size_t tokens() const { return k_.rows(); }

    static std::uint64_t copies() { return copies_.load(); }

private:
    Matrix k_;
    Matrix v_;
    static std::atomic<std::uint64_t> copies_;
};

// Slot-granular FIFO cache of groups for one layer.
class ReuseBuffer {
public:
    struct Lookup {
        std::vector<std::pair<GroupId, std::size_t>> hits;      // id → slot
        std::vector<GroupId> misses;
        std::vector<std::pair<GroupId, std::size_t>> reserved;  // miss id → destination slot
        std::vector<GroupId> evicted;
    };

    explicit ReuseBuffer(std::size_t capacity_slots);

    // Whole slots that fit in `bytes` (floored).
    static std::size_t slots_for_bytes(std::uint64_t bytes, std::uint64_t group_byte_size);

    // Starts a step: pins the hits, releases reservations left over from the
    // previous step, and reserves a slot for every miss (free slots first,
    // then the FIFO-oldest unpinned occupant). ConfigError if the misses do not
    // fit; ParameterError on duplicate ids.
    Lookup lookup_and_reserve(std::span<const GroupId> ids);

    // Fills a slot reserved for `id` in this step; ContractViolation otherwise.
    void insert_loaded(GroupId id, std::size_t slot, GroupData payload);

    std::optional<std::size_t> find(GroupId id) const;
    const GroupData& payload(std::size_t slot) const;
    bool occupied(std::size_t slot) const;

    std::size_t capacity() const { return slots_.size(); }
    std::size_t size() const { return table_.size(); }
    std::vector<std::size_t> fifo_order() const { return {fifo_.begin(), fifo_.end()}; }

    void clear();

    // Throws ContractViolation if slot table, FIFO queue and slot states
    // disagree.
    void audit() const;

private:
    enum class State { free, reserved, occupied };
    struct Slot {
        State state = State::free;
        GroupId id;
        bool pinned = false;
        GroupData data;
    };

    std::vector<Slot> slots_;
    std::map<GroupId, std::size_t> table_;
    std::deque<std::size_t> fifo_;
};

// Per-layer staging of decode tokens that do not yet form a full group.
class RollingBuffer {
public:
    RollingBuffer(std::size_t num_layers, std::size_t group_size, std::size_t kv_width);

    // Appends one token; when the layer reaches group_size tokens the full
    // group is returned and the layer is emptied.
    std::optional<std::vector<TokenKv>> rb_append(std::size_t layer, TokenKv entry);

    std::span<const TokenKv> tokens(std::size_t layer) const;
    std::size_t size(std::size_t layer) const { return tokens(layer).size(); }
    std::size_t group_size() const { return group_size_; }
    std::size_t num_layers() const { return layers_.size(); }

    // Tokens currently held across all layers.
    std::size_t total_tokens() const;

private:
    std::size_t group_size_;
    std::size_t kv_width_;
    std::vector<std::vector<TokenKv>> layers_;
};

enum class Source { reuse_hit, loaded, rolling };

struct Segment {
    Source source = Source::rolling;
    std::size_t slot = 0;         // reuse-buffer slot (hit/loaded) or first rolling index
    std::uint64_t position = 0;   // group index, or rolling offset
    std::size_t count = 0;        // tokens
};

struct MappingTable {
    std::vector<Segment> segments;
    std::size_t total_tokens = 0;
};

// Orders the step's groups by position, then the rolling tokens.
// ContractViolation if hits and loaded do not cover `selected` exactly once.
MappingTable build_mapping(std::span<const GroupId> selected, std::span<const std::pair<GroupId, std::size_t>> hits,
                           std::span<const std::pair<GroupId, std::size_t>> loaded, std::size_t rolling_tokens,
                           std::size_t group_size);

// Contiguous per-token view over mapped storage (pointers only).
class LogicalKv {
public:
    LogicalKv(const MappingTable& table, const ReuseBuffer& buffer, std::span<const TokenKv> rolling);

    std::size_t size() const { return k_.size(); }
    std::span<const double> k(std::size_t i) const { return {k_[i], width_}; }
    std::span<const double> v(std::size_t i) const { return {v_[i], width_}; }

private:
    std::size_t width_ = 0;
    std::vector<const double*> k_;
    std::vector<const double*> v_;
};

struct ReplayResult {
    std::uint64_t hits = 0;
    std::uint64_t requests = 0;
    double rate() const { return requests == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(requests); }
};

// Runs a recorded selection sequence (one id list per step) through a fresh
// buffer without payloads and counts hits.
ReplayResult replay_reuse(const std::vector<std::vector<GroupId>>& steps, std::size_t capacity_slots);

}  // namespace kvo::membuf
