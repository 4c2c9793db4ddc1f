#include "kvo/membuf.hpp"

#include <algorithm>
#include <string>

#include "kvo/error.hpp"

namespace kvo::membuf {

namespace {

std::string describe(GroupId id) { return "(" + std::to_string(id.layer) + ", " + std::to_string(id.index) + ")"; }

}  // namespace

// ---- GroupData ----

std::atomic<std::uint64_t> GroupData::copies_{0};

GroupData::GroupData(Matrix k, Matrix v) : k_(std::move(k)), v_(std::move(v)) {
    if (k_.rows() != v_.rows() || k_.cols() != v_.cols()) throw ParameterError("group K and V shapes differ");
}

GroupData::GroupData(const GroupData& other) : k_(other.k_), v_(other.v_) { ++copies_; }

GroupData& GroupData::operator=(const GroupData& other) {
    if (this != &other) {
        k_ = other.k_;
        v_ = other.v_;
        ++copies_;
    }
    return *this;
}

GroupData GroupData::from_tokens(std::span<const TokenKv> tokens) {
    if (tokens.empty()) return {};
    const std::size_t width = tokens.front().k.size();
    Matrix k(0, width), v(0, width);
    k.reserve_rows(tokens.size());
    v.reserve_rows(tokens.size());
    for (const TokenKv& t : tokens) {
        k.append_row(t.k);
        v.append_row(t.v);
    }
    return {std::move(k), std::move(v)};
}

// ---- ReuseBuffer ----

ReuseBuffer::ReuseBuffer(std::size_t capacity_slots) : slots_(capacity_slots) {}

std::size_t ReuseBuffer::slots_for_bytes(std::uint64_t bytes, std::uint64_t group_byte_size) {
    if (group_byte_size == 0) throw ParameterError("group size in bytes must be positive");
    return static_cast<std::size_t>(bytes / group_byte_size);
}

ReuseBuffer::Lookup ReuseBuffer::lookup_and_reserve(std::span<const GroupId> ids) {
    {
        std::vector<GroupId> sorted(ids.begin(), ids.end());
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw ParameterError("duplicate group id in lookup");
    }
    for (Slot& s : slots_) {
        s.pinned = false;
        if (s.state == State::reserved) s.state = State::free;
    }

    Lookup out;
    for (const GroupId& id : ids) {
        if (const auto it = table_.find(id); it != table_.end()) {
            slots_[it->second].pinned = true;
            out.hits.emplace_back(id, it->second);
        } else {
            out.misses.push_back(id);
        }
    }
    if (out.misses.size() > slots_.size() - out.hits.size())
        throw ConfigError("reuse buffer of " + std::to_string(slots_.size()) + " slots cannot hold " +
                          std::to_string(out.misses.size()) + " misses plus " + std::to_string(out.hits.size()) +
                          " pinned hits");

    std::size_t next_free = 0;
    for (const GroupId& id : out.misses) {
        while (next_free < slots_.size() && slots_[next_free].state != State::free) ++next_free;
        std::size_t slot;
        if (next_free < slots_.size()) {
            slot = next_free;
        } else {
            const auto victim = std::find_if(fifo_.begin(), fifo_.end(), [&](std::size_t s) { return !slots_[s].pinned; });
            slot = *victim;  // exists: capacity check above
            fifo_.erase(victim);
            table_.erase(slots_[slot].id);
            out.evicted.push_back(slots_[slot].id);
            slots_[slot].data = GroupData{};
        }
        slots_[slot].state = State::reserved;
        slots_[slot].id = id;
        out.reserved.emplace_back(id, slot);
    }
    return out;
}

void ReuseBuffer::insert_loaded(GroupId id, std::size_t slot, GroupData payload) {
    if (slot >= slots_.size() || slots_[slot].state != State::reserved || slots_[slot].id != id)
        throw ContractViolation("slot " + std::to_string(slot) + " was not reserved for group " + describe(id));
    Slot& s = slots_[slot];
    s.state = State::occupied;
    s.data = std::move(payload);
    table_[id] = slot;
    fifo_.push_back(slot);
}

std::optional<std::size_t> ReuseBuffer::find(GroupId id) const {
    const auto it = table_.find(id);
    if (it == table_.end()) return std::nullopt;
    return it->second;
}

const GroupData& ReuseBuffer::payload(std::size_t slot) const {
    if (slot >= slots_.size() || slots_[slot].state != State::occupied)
        throw ContractViolation("slot " + std::to_string(slot) + " holds no group");
    return slots_[slot].data;
}

bool ReuseBuffer::occupied(std::size_t slot) const { return slot < slots_.size() && slots_[slot].state == State::occupied; }

void ReuseBuffer::clear() {
    for (Slot& s : slots_) s = Slot{};
    table_.clear();
    fifo_.clear();
}

void ReuseBuffer::audit() const {
    if (table_.size() > slots_.size()) throw ContractViolation("slot table larger than capacity");
    std::vector<int> seen(slots_.size(), 0);
    for (const auto& [id, slot] : table_) {
        if (slot >= slots_.size()) throw ContractViolation("slot table points past capacity");
        if (seen[slot]++) throw ContractViolation("slot table is not injective");
        if (slots_[slot].state != State::occupied || slots_[slot].id != id)
            throw ContractViolation("slot table entry " + describe(id) + " disagrees with slot state");
    }
    std::vector<int> queued(slots_.size(), 0);
    for (std::size_t slot : fifo_) {
        if (slot >= slots_.size() || queued[slot]++) throw ContractViolation("FIFO queue has invalid or repeated slot");
        if (slots_[slot].state != State::occupied) throw ContractViolation("FIFO queue holds an unoccupied slot");
    }
    std::size_t occupied_count = 0;
    for (const Slot& s : slots_) occupied_count += s.state == State::occupied;
    if (occupied_count != table_.size() || fifo_.size() != table_.size())
        throw ContractViolation("occupied slots, slot table and FIFO queue sizes differ");
}

// ---- RollingBuffer ----

RollingBuffer::RollingBuffer(std::size_t num_layers, std::size_t group_size, std::size_t kv_width)
    : group_size_(group_size), kv_width_(kv_width), layers_(num_layers) {
    if (group_size == 0) throw ParameterError("group size must be positive");
    for (auto& l : layers_) l.reserve(group_size);
}

std::optional<std::vector<TokenKv>> RollingBuffer::rb_append(std::size_t layer, TokenKv entry) {
    if (layer >= layers_.size()) throw ParameterError("layer out of range");
    if (entry.k.size() != kv_width_ || entry.v.size() != kv_width_)
        throw ParameterError("rolling buffer entry has wrong width");
    auto& l = layers_[layer];
    l.push_back(std::move(entry));
    if (l.size() < group_size_) return std::nullopt;
    std::vector<TokenKv> full;
    full.swap(l);
    l.reserve(group_size_);
    return full;
}

std::span<const TokenKv> RollingBuffer::tokens(std::size_t layer) const {
    if (layer >= layers_.size()) throw ParameterError("layer out of range");
    return layers_[layer];
}

std::size_t RollingBuffer::total_tokens() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.size();
    return n;
}

// ---- mapping ----

MappingTable build_mapping(std::span<const GroupId> selected, std::span<const std::pair<GroupId, std::size_t>> hits,
                           std::span<const std::pair<GroupId, std::size_t>> loaded, std::size_t rolling_tokens,
                           std::size_t group_size) {
    std::map<GroupId, Segment> by_id;
    auto add = [&](const std::pair<GroupId, std::size_t>& e, Source src) {
        if (!by_id.emplace(e.first, Segment{src, e.second, e.first.index, group_size}).second)
            throw ContractViolation("group " + describe(e.first) + " mapped twice");
    };
    for (const auto& e : hits) add(e, Source::reuse_hit);
    for (const auto& e : loaded) add(e, Source::loaded);
    if (by_id.size() != selected.size())
        throw ContractViolation("mapped groups do not match the selection");
    for (const GroupId& id : selected)
        if (!by_id.contains(id)) throw ContractViolation("selected group " + describe(id) + " has no storage");

    MappingTable t;
    t.segments.reserve(by_id.size() + 1);
    for (auto& [id, seg] : by_id) {  // std::map iterates in position order
        t.segments.push_back(seg);
        t.total_tokens += seg.count;
    }
    if (rolling_tokens > 0) {
        t.segments.push_back({Source::rolling, 0, 0, rolling_tokens});
        t.total_tokens += rolling_tokens;
    }
    return t;
}

LogicalKv::LogicalKv(const MappingTable& table, const ReuseBuffer& buffer, std::span<const TokenKv> rolling) {
    k_.reserve(table.total_tokens);
    v_.reserve(table.total_tokens);
    for (const Segment& seg : table.segments) {
        if (seg.source == Source::rolling) {
            if (seg.slot + seg.count > rolling.size()) throw ContractViolation("rolling segment out of range");
            for (std::size_t i = 0; i < seg.count; ++i) {
                const TokenKv& t = rolling[seg.slot + i];
                width_ = t.k.size();
                k_.push_back(t.k.data());
                v_.push_back(t.v.data());
            }
        } else {
            const GroupData& g = buffer.payload(seg.slot);
            if (g.tokens() != seg.count) throw ContractViolation("group payload has unexpected token count");
            width_ = g.k().cols();
            for (std::size_t i = 0; i < seg.count; ++i) {
                k_.push_back(g.k().row(i).data());
                v_.push_back(g.v().row(i).data());
            }
        }
    }
}

// ---- replay ----

ReplayResult replay_reuse(const std::vector<std::vector<GroupId>>& steps, std::size_t capacity_slots) {
    ReuseBuffer buf(capacity_slots);
    ReplayResult r;
    for (const auto& ids : steps) {
        const auto look = buf.lookup_and_reserve(ids);
        r.hits += look.hits.size();
        r.requests += ids.size();
        for (const auto& [id, slot] : look.reserved) buf.insert_loaded(id, slot, GroupData{});
    }
    return r;
}

}  // namespace kvo::membuf
