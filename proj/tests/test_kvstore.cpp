#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

#include "kvo/error.hpp"
#include "kvo/kv_config.hpp"
#include "kvo/kvstore.hpp"
#include "kvo/random.hpp"

using namespace kvo::kvstore;

namespace {

DiskLayout small_layout(std::uint32_t g = 4, std::uint32_t elem = 2) {
    DiskLayout l;
    l.num_layers = 3;
    l.h_kv = 2;
    l.head_dim = 8;
    l.group_size = g;
    l.elem_bytes = elem;
    l.max_tokens = 256;
    return l;
}

std::vector<TokenKv> random_tokens(const DiskLayout& l, std::size_t n, std::uint64_t seed) {
    kvo::Rng rng(seed);
    std::vector<TokenKv> out(n);
    for (auto& t : out) {
        t.k.resize(l.kv_width());
        t.v.resize(l.kv_width());
        // Values representable in half precision so round trips are exact.
        for (double& x : t.k) x = std::round(rng.normal() * 256.0) / 256.0;
        for (double& x : t.v) x = std::round(rng.normal() * 256.0) / 256.0;
    }
    return out;
}

struct TempFile {
    std::filesystem::path path;
    explicit TempFile(const std::string& name)
        : path(std::filesystem::temp_directory_path() / (name + "_" + std::to_string(::getpid()))) {}
    ~TempFile() { std::filesystem::remove(path); }
};

}  // namespace

TEST(DiskLayout, GroupByteSizeForHalfEntries) {
    DiskLayout l;
    l.num_layers = 1;
    l.h_kv = 8;
    l.head_dim = 128;
    l.group_size = 4;
    l.elem_bytes = 2;
    l.max_tokens = 64;
    EXPECT_EQ(l.group_byte_size(), 16384u);
    EXPECT_EQ(l.entry_bytes() / l.h_kv, 512u);
}

TEST(DiskLayout, OffsetsAlignedAndLayersDisjoint) {
    for (std::uint32_t g : {1u, 3u, 4u, 16u}) {
        const DiskLayout l = small_layout(g);
        EXPECT_GE(l.group_stride(), l.group_byte_size());
        for (std::uint32_t layer = 0; layer < l.num_layers; ++layer) {
            for (std::uint64_t i = 0; i < l.groups_per_layer(); ++i)
                EXPECT_EQ(l.group_offset(layer, i) % l.block_align, 0u);
            const std::uint64_t last = l.group_offset(layer, l.groups_per_layer() - 1) + l.group_byte_size();
            EXPECT_LE(last, l.layer_offset(layer + 1));
        }
    }
}

TEST(KvStore, PrefillExactMultiple) {
    const DiskLayout l = small_layout();
    KvStore store(l, std::make_unique<MemoryDevice>(), std::nullopt);
    const auto r = store.prefill_write(0, random_tokens(l, 8, 1));
    EXPECT_EQ(r.groups_written, 2u);
    EXPECT_EQ(r.remainder, 0u);
}

TEST(KvStore, PrefillReportsRemainder) {
    const DiskLayout l = small_layout();
    KvStore store(l, std::make_unique<MemoryDevice>(), std::nullopt);
    const auto r = store.prefill_write(0, random_tokens(l, 10, 1));
    EXPECT_EQ(r.groups_written, 2u);
    EXPECT_EQ(r.remainder, 2u);
    EXPECT_EQ(store.groups_written(0), 2u);
    EXPECT_THROW(store.prefill_write(3, random_tokens(l, 4, 1)), kvo::ParameterError);
}

TEST(KvStore, ConsecutiveRunCoalesces) {
    const DiskLayout l = small_layout();
    KvStore store(l, std::make_unique<MemoryDevice>(), std::nullopt);
    store.prefill_write(0, random_tokens(l, 32, 2));
    const std::vector<GroupId> ids{{0, 3}, {0, 4}, {0, 5}};
    const auto r = store.read_groups(ids);
    EXPECT_EQ(r.stats.requests, 1u);
    EXPECT_EQ(r.payloads.size(), 3u);
    ASSERT_EQ(r.stats.request_blocks.size(), 1u);
    EXPECT_EQ(r.stats.request_blocks[0], 2 * l.group_stride() + l.group_byte_size());
}

TEST(KvStore, GapBreaksCoalescing) {
    const DiskLayout l = small_layout();
    KvStore store(l, std::make_unique<MemoryDevice>(), std::nullopt);
    store.prefill_write(0, random_tokens(l, 32, 2));
    const std::vector<GroupId> ids{{0, 1}, {0, 3}};
    EXPECT_EQ(store.read_groups(ids).stats.requests, 2u);
}

TEST(KvStore, LayerBoundaryBreaksCoalescing) {
    const auto reqs = coalesce(std::vector<GroupId>{{0, 7}, {1, 0}, {1, 1}});
    ASSERT_EQ(reqs.size(), 2u);
    EXPECT_EQ(reqs[1].count, 2u);
}

TEST(KvStore, ByteConservationForRandomIds) {
    DiskLayout l = small_layout(1);
    l.max_tokens = 512;
    KvStore store(l, std::make_unique<MemoryDevice>(), std::nullopt);
    store.prefill_write(1, random_tokens(l, 512, 3));
    kvo::Rng rng(17);
    std::set<std::uint64_t> picked;
    while (picked.size() < 100) picked.insert(rng.below(512));
    std::vector<GroupId> ids;
    for (auto i : picked) ids.push_back({1, i});
    const auto r = store.read_groups(ids);
    EXPECT_EQ(r.stats.bytes, 100 * l.group_byte_size());
    EXPECT_LT(r.stats.requests, 100u);  // some adjacent picks merge
}

TEST(KvStore, RejectsUnsortedAndUnknownIds) {
    const DiskLayout l = small_layout();
    KvStore store(l, std::make_unique<MemoryDevice>(), std::nullopt);
    store.prefill_write(0, random_tokens(l, 8, 4));
    EXPECT_THROW(store.read_groups(std::vector<GroupId>{{0, 1}, {0, 0}}), kvo::ParameterError);
    EXPECT_THROW(store.read_groups(std::vector<GroupId>{{0, 1}, {0, 1}}), kvo::ParameterError);
    EXPECT_THROW(store.read_groups(std::vector<GroupId>{{0, 2}}), kvo::NotFoundError);
    EXPECT_THROW(store.read_groups(std::vector<GroupId>{{1, 0}}), kvo::NotFoundError);
}

TEST(KvStore, FileRoundTripIsByteIdentical) {
    for (std::uint32_t elem : {2u, 4u}) {
        const DiskLayout l = small_layout(4, elem);
        TempFile tmp("kvo_roundtrip");
        const auto tokens = random_tokens(l, 30, 5);
        std::vector<Payload> expected;
        {
            KvStore store(l, std::make_unique<FileDevice>(tmp.path, true), std::nullopt);
            for (std::uint32_t layer = 0; layer < l.num_layers; ++layer) store.prefill_write(layer, tokens);
            for (std::uint64_t g = 0; g < 7; ++g)
                expected.push_back(encode_group(l, std::span(tokens).subspan(g * 4, 4)));

            std::vector<GroupId> ids;
            for (std::uint64_t g = 0; g < 7; ++g) ids.push_back({2, g});
            const auto r = store.read_groups(ids);
            EXPECT_EQ(r.payloads, expected);
            EXPECT_EQ(r.stats.requests, 1u);
            for (std::uint64_t g = 0; g < 7; ++g) {
                const auto decoded = decode_group(l, r.payloads[g]);
                for (std::size_t t = 0; t < 4; ++t) {
                    EXPECT_EQ(decoded[t].k, tokens[g * 4 + t].k);
                    EXPECT_EQ(decoded[t].v, tokens[g * 4 + t].v);
                }
            }
        }
        FileDevice reopened(tmp.path, false);
        EXPECT_EQ(read_header(reopened), l);
        // Padding between groups is zero.
        std::vector<std::byte> pad(l.group_stride() - l.group_byte_size());
        reopened.read(l.group_offset(0, 0) + l.group_byte_size(), pad);
        EXPECT_TRUE(std::all_of(pad.begin(), pad.end(), [](std::byte b) { return b == std::byte{0}; }));
    }
}

TEST(KvStore, HeaderIsLittleEndianWithMagic) {
    const DiskLayout l = small_layout();
    MemoryDevice dev;
    write_header(dev, l);
    std::vector<std::byte> head(16);
    dev.read(0, head);
    EXPECT_EQ(std::to_integer<char>(head[0]), 'K');
    EXPECT_EQ(std::to_integer<char>(head[3]), 'W');
    EXPECT_EQ(std::to_integer<int>(head[4]), 1);  // version
    EXPECT_EQ(std::to_integer<int>(head[8]), 3);  // num_layers
    EXPECT_EQ(std::to_integer<int>(head[12]), 2);  // h_kv
    MemoryDevice bad;
    bad.write(0, head);
    std::byte junk{0x58};
    bad.write(0, std::span(&junk, 1));
    EXPECT_THROW(read_header(bad), kvo::FormatError);
}

TEST(KvStore, IncrementalWriteAppends) {
    const DiskLayout l = small_layout();
    KvStore store(l, std::make_unique<MemoryDevice>(), DiskModel::nvme());
    store.prefill_write(1, random_tokens(l, 9, 6));
    const auto more = random_tokens(l, 4, 7);
    EXPECT_THROW(store.write_group({1, 3}, more), kvo::ParameterError);
    const auto s = store.write_group({1, 2}, more);
    EXPECT_EQ(s.bytes, l.group_byte_size());
    EXPECT_GT(s.seconds, 0.0);
    const auto r = store.read_groups(std::vector<GroupId>{{1, 2}});
    EXPECT_EQ(r.payloads[0], encode_group(l, more));
}

TEST(HalfCodec, KnownValuesAndRounding) {
    EXPECT_EQ(float_to_half(1.0f), 0x3c00);
    EXPECT_EQ(float_to_half(-2.0f), 0xc000);
    EXPECT_EQ(float_to_half(65504.0f), 0x7bff);
    EXPECT_EQ(float_to_half(1e6f), 0x7c00);
    EXPECT_EQ(float_to_half(5.960464477539063e-8f), 0x0001);  // smallest subnormal
    EXPECT_EQ(float_to_half(1.0f + 0x1p-11f), 0x3c00);          // tie to even
    EXPECT_EQ(float_to_half(1.0f + 3 * 0x1p-11f), 0x3c02);
    EXPECT_TRUE(std::isnan(half_to_float(float_to_half(std::numeric_limits<float>::quiet_NaN()))));
    for (std::uint32_t bits = 0; bits < 0x7c00; ++bits) {
        const auto h = static_cast<std::uint16_t>(bits);
        EXPECT_EQ(float_to_half(half_to_float(h)), h);
    }
}

TEST(DiskModel, EmmcSmallBlocksBelowSixPercent) {
    const DiskModel m = DiskModel::emmc();
    EXPECT_LT(effective_bandwidth(m, 512), 15e6);
    EXPECT_LT(bandwidth_fraction(DiskModel::nvme(), 512), 0.06);
    EXPECT_LT(bandwidth_fraction(m, 512), 0.06);
}

TEST(DiskModel, SaturatesAtTopPoint) {
    for (const DiskModel& m : {DiskModel::nvme(), DiskModel::emmc()}) {
        const auto& top = m.curve.back();
        EXPECT_DOUBLE_EQ(effective_bandwidth(m, top.block_bytes), m.peak_bandwidth * top.fraction);
        EXPECT_DOUBLE_EQ(effective_bandwidth(m, top.block_bytes * 64), m.peak_bandwidth * top.fraction);
    }
}

TEST(DiskModel, NvmeInterpolationMatchesHandValues) {
    const DiskModel m = DiskModel::nvme();
    // 16 KiB is a calibration point: 0.55 × 1.8e9.
    EXPECT_NEAR(effective_bandwidth(m, 16384), 990e6, 1e-3);
    // 8 KiB sits halfway (in log2) between 4 KiB (0.25) and 16 KiB (0.55).
    EXPECT_NEAR(effective_bandwidth(m, 8192), 720e6, 1e-3);
    // 100000 B between 64 KiB (0.80) and 256 KiB (0.95).
    EXPECT_NEAR(effective_bandwidth(m, 100000), 1522301464.0489697, 1e-3);
}

TEST(DiskModel, CurveMonotoneForPresets) {
    for (const DiskModel& m : {DiskModel::nvme(), DiskModel::emmc()}) {
        double prev = 0.0;
        for (std::uint64_t b = 1; b <= (1u << 22); b = b * 3 / 2 + 1) {
            const double f = bandwidth_fraction(m, b);
            EXPECT_GE(f, prev);
            EXPECT_LE(f, 1.0);
            prev = f;
        }
    }
}

TEST(DiskModel, ShippedPresetFilesMatchBuiltins) {
    const std::filesystem::path dir = KVO_PRESET_DIR;
    const DiskModel nvme = DiskModel::load(dir / "nvme.disk");
    const DiskModel emmc = DiskModel::load(dir / "emmc.disk");
    for (auto [file, builtin] : {std::pair{nvme, DiskModel::nvme()}, std::pair{emmc, DiskModel::emmc()}}) {
        EXPECT_EQ(file.name, builtin.name);
        EXPECT_DOUBLE_EQ(file.peak_bandwidth, builtin.peak_bandwidth);
        EXPECT_DOUBLE_EQ(file.per_request_latency, builtin.per_request_latency);
        ASSERT_EQ(file.curve.size(), builtin.curve.size());
        for (std::size_t i = 0; i < file.curve.size(); ++i) {
            EXPECT_EQ(file.curve[i].block_bytes, builtin.curve[i].block_bytes);
            EXPECT_DOUBLE_EQ(file.curve[i].fraction, builtin.curve[i].fraction);
        }
    }
    const auto rt = DiskModel::from_config(kvo::KeyValueConfig::parse(nvme.to_config().to_string()));
    EXPECT_DOUBLE_EQ(rt.peak_bandwidth, nvme.peak_bandwidth);
}

TEST(DiskModel, RejectsBadCurves) {
    DiskModel m = DiskModel::nvme();
    std::swap(m.curve[1], m.curve[2]);
    EXPECT_THROW(m.validate(), kvo::ParameterError);
    m = DiskModel::nvme();
    m.curve[3].fraction = 0.1;
    EXPECT_THROW(m.validate(), kvo::ParameterError);
    EXPECT_THROW(DiskModel::from_config(kvo::KeyValueConfig::parse("peak_bandwidth = 1e9\npoint = 512\n")),
                 kvo::FormatError);
}

TEST(IoTime, EmptyAndSingleRequest) {
    DiskModel m = DiskModel::nvme();
    EXPECT_EQ(estimate_io_time(m, std::vector<std::uint64_t>{}), 0.0);
    m.per_request_latency = 0.0;
    const std::vector<std::uint64_t> one{20000};
    EXPECT_DOUBLE_EQ(estimate_io_time(m, one), 20000.0 / effective_bandwidth(m, 20000));
}

TEST(IoTime, GroupedPlanFasterOnEmmc) {
    // 400 entries of 512 B: 100 requests of 2048 B versus 400 of 512 B.
    const DiskModel m = DiskModel::emmc();
    const std::vector<std::uint64_t> grouped(100, 2048);
    const std::vector<std::uint64_t> single(400, 512);
    const double tg = estimate_io_time(m, grouped);
    const double ts = estimate_io_time(m, single);
    EXPECT_NEAR(tg, 0.017228235294117645, 1e-12);
    EXPECT_NEAR(ts, 0.06047999999999999, 1e-12);
    EXPECT_LT(tg, ts);
}

TEST(IoTime, RepartitioningIntoLargerBlocksNeverSlower) {
    kvo::Rng rng(11);
    for (const DiskModel& m : {DiskModel::nvme(), DiskModel::emmc()}) {
        for (int trial = 0; trial < 200; ++trial) {
            const std::uint64_t unit = 256 * (1 + rng.below(64));
            const std::uint64_t units = 2 + rng.below(64);
            const std::uint64_t merge = 2 + rng.below(4);
            std::vector<std::uint64_t> fine(units, unit), coarse;
            for (std::uint64_t left = units; left > 0;) {
                const std::uint64_t k = std::min(left, merge);
                coarse.push_back(k * unit);
                left -= k;
            }
            EXPECT_LE(estimate_io_time(m, coarse), estimate_io_time(m, fine) * (1 + 1e-12));
        }
    }
}

TEST(IoTime, SimulatedReadTimeUsesRequestBlocks) {
    const DiskLayout l = small_layout();
    KvStore store(l, std::make_unique<MemoryDevice>(), DiskModel::emmc());
    store.prefill_write(0, random_tokens(l, 40, 8));
    const std::vector<GroupId> ids{{0, 1}, {0, 2}, {0, 6}};
    const auto r = store.read_groups(ids);
    const std::vector<std::uint64_t> blocks{l.group_stride() + l.group_byte_size(), l.group_byte_size()};
    EXPECT_EQ(r.stats.request_blocks, blocks);
    EXPECT_DOUBLE_EQ(r.stats.seconds, estimate_io_time(DiskModel::emmc(), blocks));
}

TEST(KeyValueConfig, ParsesCommentsAndRepeats) {
    const auto cfg = kvo::KeyValueConfig::parse("# header\na = 1\n\nb=two  # trailing\na = 3\n");
    EXPECT_EQ(cfg.get("a"), "3");
    EXPECT_EQ(cfg.get_all("a"), (std::vector<std::string>{"1", "3"}));
    EXPECT_EQ(cfg.require("b"), "two");
    EXPECT_EQ(cfg.get_uint("missing", 7), 7u);
    EXPECT_THROW(cfg.require_double("b"), kvo::FormatError);
    EXPECT_THROW(kvo::KeyValueConfig::parse("novalue\n"), kvo::FormatError);
}
