#include "kvo/kvstore.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <mutex>
#include <shared_mutex>
#include <unordered_map>

#include "kvo/error.hpp"

namespace kvo::kvstore {

namespace {

constexpr char kMagic[4] = {'K', 'V', 'S', 'W'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderFields = 4 + 4 * 7 + 8 * 2;

std::uint64_t round_up(std::uint64_t value, std::uint64_t align) { return (value + align - 1) / align * align; }

void put_u32(std::byte* out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out[i] = static_cast<std::byte>((v >> (8 * i)) & 0xff);
}
void put_u64(std::byte* out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out[i] = static_cast<std::byte>((v >> (8 * i)) & 0xff);
}
std::uint32_t get_u32(const std::byte* in) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::to_integer<std::uint8_t>(in[i])) << (8 * i);
    return v;
}
std::uint64_t get_u64(const std::byte* in) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::to_integer<std::uint8_t>(in[i])) << (8 * i);
    return v;
}

void put_scalar(std::byte* out, double value, std::uint32_t elem_bytes) {
    if (elem_bytes == 2) {
        const std::uint16_t h = float_to_half(static_cast<float>(value));
        out[0] = static_cast<std::byte>(h & 0xff);
        out[1] = static_cast<std::byte>(h >> 8);
    } else {
        put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(value)));
    }
}

double get_scalar(const std::byte* in, std::uint32_t elem_bytes) {
    if (elem_bytes == 2) {
        const auto h = static_cast<std::uint16_t>(std::to_integer<std::uint16_t>(in[0]) |
                                                  (std::to_integer<std::uint16_t>(in[1]) << 8));
        return half_to_float(h);
    }
    return std::bit_cast<float>(get_u32(in));
}

}  // namespace

// ---- layout ----

void DiskLayout::validate() const {
    if (num_layers == 0 || h_kv == 0 || head_dim == 0 || group_size == 0)
        throw ParameterError("disk layout dimensions must be positive");
    if (elem_bytes != 2 && elem_bytes != 4) throw ParameterError("elem_bytes must be 2 or 4");
    if (block_align == 0) throw ParameterError("block_align must be positive");
}

std::uint64_t DiskLayout::group_stride() const { return round_up(group_byte_size(), block_align); }

std::uint64_t DiskLayout::header_bytes() const { return round_up(kHeaderFields, block_align); }

std::uint64_t DiskLayout::layer_offset(std::uint32_t layer) const {
    return header_bytes() + std::uint64_t{layer} * groups_per_layer() * group_stride();
}

std::uint64_t DiskLayout::group_offset(std::uint32_t layer, std::uint64_t index) const {
    return layer_offset(layer) + index * group_stride();
}

std::uint64_t DiskLayout::file_size() const { return layer_offset(num_layers); }

// ---- payload codec ----

std::uint16_t float_to_half(float value) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
    const std::uint32_t sign = (x >> 16) & 0x8000u;
    std::uint32_t mant = x & 0x7fffffu;
    const int exp = static_cast<int>((x >> 23) & 0xffu);
    if (exp == 0xff) return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0u));
    const int e = exp - 127 + 15;
    if (e >= 0x1f) return static_cast<std::uint16_t>(sign | 0x7c00u);
    if (e <= 0) {
        if (e < -10) return static_cast<std::uint16_t>(sign);
        mant |= 0x800000u;
        const int shift = 14 - e;
        std::uint32_t h = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (h & 1u))) ++h;
        return static_cast<std::uint16_t>(sign | h);
    }
    std::uint32_t h = sign | (static_cast<std::uint32_t>(e) << 10) | (mant >> 13);
    const std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;  // carry may round up to inf
    return static_cast<std::uint16_t>(h);
}

float half_to_float(std::uint16_t bits) {
    const std::uint32_t sign = (std::uint32_t{bits} & 0x8000u) << 16;
    const std::uint32_t exp = (bits >> 10) & 0x1fu;
    const std::uint32_t mant = bits & 0x3ffu;
    if (exp == 0) {
        const float mag = std::ldexp(static_cast<float>(mant), -24);
        return sign ? -mag : mag;
    }
    if (exp == 0x1f) return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
    return std::bit_cast<float>(sign | ((exp - 15 + 127) << 23) | (mant << 13));
}

Payload encode_group(const DiskLayout& layout, std::span<const TokenKv> tokens) {
    if (tokens.size() != layout.group_size)
        throw ParameterError("group must hold exactly group_size tokens");
    const std::uint64_t width = layout.kv_width();
    Payload out(layout.group_byte_size());
    std::byte* p = out.data();
    for (const TokenKv& t : tokens) {
        if (t.k.size() != width || t.v.size() != width) throw ParameterError("token K/V width mismatch");
        for (std::uint32_t h = 0; h < layout.h_kv; ++h) {
            for (std::uint32_t i = 0; i < layout.head_dim; ++i, p += layout.elem_bytes)
                put_scalar(p, t.k[h * layout.head_dim + i], layout.elem_bytes);
            for (std::uint32_t i = 0; i < layout.head_dim; ++i, p += layout.elem_bytes)
                put_scalar(p, t.v[h * layout.head_dim + i], layout.elem_bytes);
        }
    }
    return out;
}

std::vector<TokenKv> decode_group(const DiskLayout& layout, std::span<const std::byte> payload) {
    if (payload.size() != layout.group_byte_size()) throw FormatError("group payload has wrong size");
    const std::uint64_t width = layout.kv_width();
    std::vector<TokenKv> tokens(layout.group_size);
    const std::byte* p = payload.data();
    for (TokenKv& t : tokens) {
        t.k.resize(width);
        t.v.resize(width);
        for (std::uint32_t h = 0; h < layout.h_kv; ++h) {
            for (std::uint32_t i = 0; i < layout.head_dim; ++i, p += layout.elem_bytes)
                t.k[h * layout.head_dim + i] = get_scalar(p, layout.elem_bytes);
            for (std::uint32_t i = 0; i < layout.head_dim; ++i, p += layout.elem_bytes)
                t.v[h * layout.head_dim + i] = get_scalar(p, layout.elem_bytes);
        }
    }
    return tokens;
}

// ---- disk model ----

void DiskModel::validate() const {
    if (!(peak_bandwidth > 0.0)) throw ParameterError("peak_bandwidth must be positive");
    if (!(per_request_latency >= 0.0)) throw ParameterError("per_request_latency must be non-negative");
    if (curve.empty()) throw ParameterError("bandwidth curve needs at least one point");
    for (std::size_t i = 0; i < curve.size(); ++i) {
        if (curve[i].block_bytes == 0) throw ParameterError("calibration block size must be positive");
        if (!(curve[i].fraction > 0.0 && curve[i].fraction <= 1.0))
            throw ParameterError("calibration fraction must lie in (0, 1]");
        if (i > 0 && (curve[i].block_bytes <= curve[i - 1].block_bytes || curve[i].fraction < curve[i - 1].fraction))
            throw ParameterError("bandwidth curve must be ascending in block size and non-decreasing");
    }
}

DiskModel DiskModel::nvme() {
    return {"nvme", 1.8e9, 20e-6,
            {{512, 0.05}, {4096, 0.25}, {16384, 0.55}, {65536, 0.80}, {262144, 0.95}, {1048576, 1.0}}};
}

DiskModel DiskModel::emmc() {
    return {"emmc", 250e6, 100e-6,
            {{512, 0.04}, {4096, 0.15}, {16384, 0.40}, {65536, 0.70}, {262144, 0.90}, {1048576, 1.0}}};
}

DiskModel DiskModel::from_config(const KeyValueConfig& cfg) {
    DiskModel m;
    m.name = cfg.get("name").value_or("custom");
    m.peak_bandwidth = cfg.require_double("peak_bandwidth");
    m.per_request_latency = cfg.get_double("per_request_latency", 0.0);
    for (const std::string& line : cfg.get_all("point")) {
        const auto sp = line.find_first_of(" \t");
        if (sp == std::string::npos) throw FormatError("point needs '<block_bytes> <fraction>'");
        m.curve.push_back({parse_uint(line.substr(0, sp), "point block"), parse_double(line.substr(sp + 1), "point fraction")});
    }
    m.validate();
    return m;
}

DiskModel DiskModel::load(const std::filesystem::path& path) { return from_config(KeyValueConfig::load(path)); }

DiskModel DiskModel::resolve(const std::string& name_or_path) {
    if (name_or_path == "nvme") return nvme();
    if (name_or_path == "emmc") return emmc();
    if (!std::filesystem::exists(name_or_path)) throw ParameterError("unknown disk preset '" + name_or_path + "'");
    return load(name_or_path);
}

KeyValueConfig DiskModel::to_config() const {
    KeyValueConfig cfg;
    cfg.add("name", name);
    cfg.add("peak_bandwidth", format_double(peak_bandwidth));
    cfg.add("per_request_latency", format_double(per_request_latency));
    for (const auto& p : curve) cfg.add("point", std::to_string(p.block_bytes) + " " + format_double(p.fraction));
    return cfg;
}

double bandwidth_fraction(const DiskModel& model, std::uint64_t block_bytes) {
    const auto& c = model.curve;
    if (block_bytes == 0) throw ParameterError("block size must be positive");
    if (block_bytes <= c.front().block_bytes)
        return c.front().fraction * static_cast<double>(block_bytes) / static_cast<double>(c.front().block_bytes);
    if (block_bytes >= c.back().block_bytes) return c.back().fraction;
    const auto hi = std::upper_bound(c.begin(), c.end(), block_bytes,
                                     [](std::uint64_t b, const CalibrationPoint& p) { return b < p.block_bytes; });
    const auto lo = hi - 1;
    const double x0 = std::log2(static_cast<double>(lo->block_bytes));
    const double x1 = std::log2(static_cast<double>(hi->block_bytes));
    const double t = (std::log2(static_cast<double>(block_bytes)) - x0) / (x1 - x0);
    return lo->fraction + t * (hi->fraction - lo->fraction);
}

double effective_bandwidth(const DiskModel& model, std::uint64_t block_bytes) {
    return model.peak_bandwidth * bandwidth_fraction(model, block_bytes);
}

double estimate_io_time(const DiskModel& model, std::span<const std::uint64_t> request_blocks) {
    double total = 0.0;
    for (std::uint64_t b : request_blocks)
        total += model.per_request_latency + static_cast<double>(b) / effective_bandwidth(model, b);
    return total;
}

// ---- requests ----

std::vector<ReadRequest> coalesce(std::span<const GroupId> ids) {
    std::vector<ReadRequest> out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i > 0 && !(ids[i - 1] < ids[i])) throw ParameterError("group ids must be sorted and unique");
        if (!out.empty() && out.back().layer == ids[i].layer && out.back().first + out.back().count == ids[i].index)
            ++out.back().count;
        else
            out.push_back({ids[i].layer, ids[i].index, 1});
    }
    return out;
}

std::uint64_t request_bytes(const DiskLayout& layout, const ReadRequest& request) {
    return (request.count - 1) * layout.group_stride() + layout.group_byte_size();
}

IoStats& IoStats::operator+=(const IoStats& other) {
    requests += other.requests;
    bytes += other.bytes;
    request_blocks.insert(request_blocks.end(), other.request_blocks.begin(), other.request_blocks.end());
    seconds += other.seconds;
    return *this;
}

// ---- devices ----

FileDevice::FileDevice(const std::filesystem::path& path, bool truncate) : path_(path) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC | (truncate ? O_TRUNC : 0), 0644);
    if (fd_ < 0) throw StorageError("cannot open " + path.string() + ": " + std::strerror(errno));
}

FileDevice::~FileDevice() {
    if (fd_ >= 0) ::close(fd_);
}

void FileDevice::read(std::uint64_t offset, std::span<std::byte> out) {
    std::size_t done = 0;
    while (done < out.size()) {
        const ssize_t n = ::pread(fd_, out.data() + done, out.size() - done, static_cast<off_t>(offset + done));
        if (n < 0) {
            if (errno == EINTR) continue;
            throw StorageError("read failed on " + path_.string() + ": " + std::strerror(errno));
        }
        if (n == 0) {  // past end of file: sparse tail reads as zero
            std::fill(out.begin() + static_cast<std::ptrdiff_t>(done), out.end(), std::byte{0});
            return;
        }
        done += static_cast<std::size_t>(n);
    }
}

void FileDevice::write(std::uint64_t offset, std::span<const std::byte> data) {
    std::size_t done = 0;
    while (done < data.size()) {
        const ssize_t n = ::pwrite(fd_, data.data() + done, data.size() - done, static_cast<off_t>(offset + done));
        if (n < 0) {
            if (errno == EINTR) continue;
            throw StorageError("write failed on " + path_.string() + ": " + std::strerror(errno));
        }
        done += static_cast<std::size_t>(n);
    }
}

void FileDevice::sync() {
    if (::fsync(fd_) != 0) throw StorageError("fsync failed on " + path_.string() + ": " + std::strerror(errno));
}

struct MemoryDevice::Impl {
    std::uint64_t page_bytes;
    mutable std::shared_mutex mutex;
    std::unordered_map<std::uint64_t, std::vector<std::byte>> pages;
};

MemoryDevice::MemoryDevice(std::uint64_t page_bytes) : impl_(std::make_unique<Impl>()) {
    if (page_bytes == 0) throw ParameterError("page size must be positive");
    impl_->page_bytes = page_bytes;
}

MemoryDevice::~MemoryDevice() = default;

void MemoryDevice::read(std::uint64_t offset, std::span<std::byte> out) {
    std::shared_lock lock(impl_->mutex);
    const std::uint64_t pb = impl_->page_bytes;
    std::size_t done = 0;
    while (done < out.size()) {
        const std::uint64_t pos = offset + done;
        const std::uint64_t in_page = pos % pb;
        const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(pb - in_page, out.size() - done));
        const auto it = impl_->pages.find(pos / pb);
        if (it == impl_->pages.end())
            std::fill_n(out.data() + done, n, std::byte{0});
        else
            std::memcpy(out.data() + done, it->second.data() + in_page, n);
        done += n;
    }
}

void MemoryDevice::write(std::uint64_t offset, std::span<const std::byte> data) {
    std::unique_lock lock(impl_->mutex);
    const std::uint64_t pb = impl_->page_bytes;
    std::size_t done = 0;
    while (done < data.size()) {
        const std::uint64_t pos = offset + done;
        const std::uint64_t in_page = pos % pb;
        const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(pb - in_page, data.size() - done));
        auto& page = impl_->pages[pos / pb];
        if (page.empty()) page.assign(pb, std::byte{0});
        std::memcpy(page.data() + in_page, data.data() + done, n);
        done += n;
    }
}

std::size_t MemoryDevice::resident_pages() const {
    std::shared_lock lock(impl_->mutex);
    return impl_->pages.size();
}

// ---- header ----

void write_header(BlockDevice& device, const DiskLayout& layout) {
    std::vector<std::byte> buf(layout.header_bytes(), std::byte{0});
    std::memcpy(buf.data(), kMagic, 4);
    std::byte* p = buf.data() + 4;
    for (std::uint32_t v : {kVersion, layout.num_layers, layout.h_kv, layout.head_dim, layout.group_size,
                            layout.elem_bytes, layout.block_align}) {
        put_u32(p, v);
        p += 4;
    }
    put_u64(p, layout.max_tokens);
    put_u64(p + 8, layout.groups_per_layer());
    device.write(0, buf);
}

DiskLayout read_header(BlockDevice& device) {
    std::array<std::byte, kHeaderFields> buf{};
    device.read(0, buf);
    if (std::memcmp(buf.data(), kMagic, 4) != 0) throw FormatError("not a KV cache file (bad magic)");
    const std::byte* p = buf.data() + 4;
    if (get_u32(p) != kVersion) throw FormatError("unsupported KV cache file version");
    DiskLayout l;
    l.num_layers = get_u32(p + 4);
    l.h_kv = get_u32(p + 8);
    l.head_dim = get_u32(p + 12);
    l.group_size = get_u32(p + 16);
    l.elem_bytes = get_u32(p + 20);
    l.block_align = get_u32(p + 24);
    l.max_tokens = get_u64(p + 28);
    try {
        l.validate();
    } catch (const ParameterError& e) {
        throw FormatError(std::string("corrupt KV cache header: ") + e.what());
    }
    if (get_u64(p + 36) != l.groups_per_layer()) throw FormatError("corrupt KV cache header: group count mismatch");
    return l;
}

// ---- store ----

KvStore::KvStore(DiskLayout layout, std::unique_ptr<BlockDevice> device, std::optional<DiskModel> model)
    : layout_(layout), device_(std::move(device)), model_(std::move(model)) {
    layout_.validate();
    if (!device_) throw ParameterError("KvStore needs a device");
    if (model_) model_->validate();
    written_ = std::make_unique<std::atomic<std::uint64_t>[]>(layout_.num_layers);
    write_header(*device_, layout_);
}

double KvStore::time_requests(std::span<const std::uint64_t> blocks, double measured) const {
    return model_ ? estimate_io_time(*model_, blocks) : measured;
}

PrefillResult KvStore::prefill_write(std::uint32_t layer, std::span<const TokenKv> tokens) {
    if (layer >= layout_.num_layers) throw ParameterError("layer out of range");
    if (tokens.size() > layout_.max_tokens) throw ParameterError("prefill exceeds max_tokens");
    const auto start = std::chrono::steady_clock::now();
    const std::uint64_t groups = tokens.size() / layout_.group_size;
    for (std::uint64_t g = 0; g < groups; ++g) {
        const Payload payload = encode_group(layout_, tokens.subspan(g * layout_.group_size, layout_.group_size));
        device_->write(layout_.group_offset(layer, g), payload);
    }
    const double measured = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    written_[layer].store(groups);

    PrefillResult r;
    r.groups_written = groups;
    r.remainder = tokens.size() - groups * layout_.group_size;
    if (groups > 0) {
        r.stats.requests = 1;
        r.stats.bytes = groups * layout_.group_byte_size();
        r.stats.request_blocks.push_back(request_bytes(layout_, {layer, 0, groups}));
        r.stats.seconds = time_requests(r.stats.request_blocks, measured);
    }
    return r;
}

IoStats KvStore::write_group(GroupId id, std::span<const TokenKv> tokens) {
    if (id.layer >= layout_.num_layers) throw ParameterError("layer out of range");
    if (id.index != written_[id.layer].load()) throw ParameterError("groups must be appended in order");
    if (id.index >= layout_.groups_per_layer()) throw StorageError("layer region is full");
    const auto start = std::chrono::steady_clock::now();
    device_->write(layout_.group_offset(id.layer, id.index), encode_group(layout_, tokens));
    const double measured = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    written_[id.layer].store(id.index + 1);

    IoStats s;
    s.requests = 1;
    s.bytes = layout_.group_byte_size();
    s.request_blocks.push_back(layout_.group_byte_size());
    s.seconds = time_requests(s.request_blocks, measured);
    return s;
}

ReadResult KvStore::read_groups(std::span<const GroupId> ids) {
    const auto requests = coalesce(ids);
    for (const GroupId& id : ids) {
        if (id.layer >= layout_.num_layers || id.index >= written_[id.layer].load())
            throw NotFoundError("group (" + std::to_string(id.layer) + ", " + std::to_string(id.index) +
                                ") has not been written");
    }
    ReadResult r;
    r.payloads.reserve(ids.size());
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::byte> buf;
    for (const ReadRequest& req : requests) {
        const std::uint64_t n = request_bytes(layout_, req);
        buf.resize(n);
        device_->read(layout_.group_offset(req.layer, req.first), buf);
        for (std::uint64_t k = 0; k < req.count; ++k) {
            const auto* begin = buf.data() + k * layout_.group_stride();
            r.payloads.emplace_back(begin, begin + layout_.group_byte_size());
        }
        r.stats.request_blocks.push_back(n);
    }
    const double measured = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.stats.requests = requests.size();
    r.stats.bytes = ids.size() * layout_.group_byte_size();
    r.stats.seconds = time_requests(r.stats.request_blocks, measured);
    return r;
}

std::uint64_t KvStore::groups_written(std::uint32_t layer) const {
    if (layer >= layout_.num_layers) throw ParameterError("layer out of range");
    return written_[layer].load();
}

}  // namespace kvo::kvstore
