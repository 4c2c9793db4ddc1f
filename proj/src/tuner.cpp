#include "kvo/tuner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>

#include "kvo/error.hpp"
#include "kvo/membuf.hpp"
#include "kvo/random.hpp"

namespace kvo::tuner {

namespace {

struct AxisPos {
    std::size_t lo = 0;
    std::size_t hi = 0;
    double w = 0.0;  // weight of hi
};

AxisPos locate(const std::vector<double>& axis, double x, bool& clamped) {
    if (x <= axis.front()) {
        clamped = clamped || x < axis.front();
        return {};
    }
    if (x >= axis.back()) {
        clamped = clamped || x > axis.back();
        return {axis.size() - 1, axis.size() - 1, 0.0};
    }
    const std::size_t hi = static_cast<std::size_t>(std::upper_bound(axis.begin(), axis.end(), x) - axis.begin());
    const std::size_t lo = hi - 1;
    return {lo, hi, (x - axis[lo]) / (axis[hi] - axis[lo])};
}

// Multilinear interpolation over a row-major grid; sizes[k] is the length of
// axis k.
double interpolate(const std::vector<double>& values, const std::vector<std::size_t>& sizes,
                   const std::vector<AxisPos>& pos) {
    const std::size_t k = sizes.size();
    double total = 0.0;
    for (std::size_t corner = 0; corner < (std::size_t{1} << k); ++corner) {
        double weight = 1.0;
        std::size_t index = 0;
        for (std::size_t a = 0; a < k; ++a) {
            const bool high = (corner >> a) & 1;
            weight *= high ? pos[a].w : 1.0 - pos[a].w;
            index = index * sizes[a] + (high ? pos[a].hi : pos[a].lo);
        }
        if (weight != 0.0) total += weight * values[index];
    }
    return total;
}

void check_axis(const std::vector<double>& axis, const char* name) {
    if (axis.empty()) throw ParameterError(std::string("profile axis ") + name + " is empty");
    for (std::size_t i = 1; i < axis.size(); ++i)
        if (!(axis[i] > axis[i - 1])) throw ParameterError(std::string("profile axis ") + name + " must increase");
}

}  // namespace

// ---- shapes and lookups ----

KvShape KvShape::of(const refmodel::ModelDims& dims, std::uint32_t elem_bytes) {
    return {dims.layers, dims.h_kv, dims.head_dim, elem_bytes};
}

std::uint64_t KvShape::klr_bytes(std::size_t s, double sigma) const {
    return static_cast<std::uint64_t>(layers) * s * kcompress::rank_for_sigma(kv_width(), sigma) * elem_bytes;
}

double LookupTables::reuse_at(std::size_t group_size, std::uint64_t capacity) const {
    const auto it = reuse_rate.find(group_size);
    if (it == reuse_rate.end() || it->second.empty())
        throw NotFoundError("no reuse lookup for group size " + std::to_string(group_size));
    const auto& table = it->second;
    const auto hi = table.lower_bound(capacity);
    if (hi == table.end()) return std::prev(hi)->second;
    if (hi->first == capacity || hi == table.begin()) return hi->second;
    const auto lo = std::prev(hi);
    const double w = static_cast<double>(capacity - lo->first) / static_cast<double>(hi->first - lo->first);
    return lo->second + w * (hi->second - lo->second);
}

void LookupTables::validate() const {
    for (const auto& [g, table] : reuse_rate) {
        double previous = 0.0;
        for (const auto& [c, r] : table) {
            if (!(r >= 0.0 && r <= 1.0)) throw ParameterError("reuse rate outside [0, 1]");
            if (r < previous) throw ParameterError("reuse rate decreases with capacity at G=" + std::to_string(g));
            previous = r;
        }
    }
    for (const auto& [sigma, proj] : projections)
        if (proj.empty()) throw ParameterError("empty projection set for a sigma key");
}

void TunerConfig::validate() const {
    if (b_max == 0) throw ParameterError("b_max must be >= 1");
    if (s_min == 0 || s_min > s_max) throw ParameterError("need 0 < S_min <= S_max");
    if (s_step == 0) throw ParameterError("S step must be positive");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("alpha must lie in [0, 1]");
    if (!(sigma_max >= 1.0)) throw ParameterError("sigma_max must be >= 1");
    if (g_max == 0) throw ParameterError("G_max must be >= 1");
    if (mg_const == 0) throw ParameterError("MG constant must be >= 1");
}

std::size_t m_for_group(std::size_t mg_const, std::size_t group_size) {
    return std::max<std::size_t>(1, mg_const / group_size);
}

LookupTables build_reuse_lookup(const refmodel::ToyModel& model, const runtime::RuntimeConfig& base,
                                const std::vector<kcompress::ProjectionMatrix>& projections,
                                const refmodel::WorkloadSpec& workload, std::span<const std::size_t> group_sizes,
                                const ReuseSampling& sampling) {
    if (sampling.samples == 0) throw ParameterError("reuse sampling needs at least one sample");
    const std::size_t layers = model.dims().layers;
    LookupTables out;
    for (std::size_t g : group_sizes) {
        runtime::RuntimeConfig cfg = base;
        cfg.group_size = g;
        cfg.m = m_for_group(base.mg_const, g);
        cfg.reuse = false;  // selections only; replayed below
        cfg.oracle_recall = false;
        std::vector<std::uint64_t> hits(sampling.capacities.size(), 0), requests(sampling.capacities.size(), 0);
        for (std::size_t k = 0; k < sampling.samples; ++k) {
            refmodel::WorkloadSpec spec = workload;
            spec.seed = workload.seed + k;
            const auto w = refmodel::gen_workload(model, spec);
            runtime::Engine engine(model, cfg, projections);
            engine.prefill(w.prompt_k, w.prompt_v);
            std::vector<std::vector<std::vector<kvstore::GroupId>>> per_layer(layers);
            for (const auto& x : w.inputs) {
                const auto st = engine.decode_step(x).stats;
                for (std::size_t l = 0; l < layers; ++l) {
                    std::vector<kvstore::GroupId> ids;
                    for (std::size_t idx : st.selected[l]) ids.push_back({static_cast<std::uint32_t>(l), idx});
                    per_layer[l].push_back(std::move(ids));
                }
            }
            const auto gbs = engine.store().layout().group_byte_size();
            for (std::size_t ci = 0; ci < sampling.capacities.size(); ++ci) {
                const std::size_t slots = runtime::slots_per_layer(sampling.capacities[ci], layers, gbs);
                for (const auto& steps : per_layer) {
                    std::uint64_t n = 0;
                    for (const auto& ids : steps) n += ids.size();
                    requests[ci] += n;
                    if (slots >= cfg.m) hits[ci] += membuf::replay_reuse(steps, slots).hits;
                }
            }
        }
        auto& table = out.reuse_rate[g];
        double running = 0.0;
        for (std::size_t ci = 0; ci < sampling.capacities.size(); ++ci) {
            const double r =
                requests[ci] == 0 ? 0.0 : static_cast<double>(hits[ci]) / static_cast<double>(requests[ci]);
            table[sampling.capacities[ci]] = r;
        }
        // FIFO can lose hits when it grows; keep the table monotone.
        for (auto& [c, r] : table) {
            running = std::max(running, r);
            r = running;
        }
    }
    return out;
}

// ---- profile tables ----

void ProfileTables::validate() const {
    check_axis(b_axis, "b");
    check_axis(g_axis, "G");
    check_axis(c_axis, "C");
    check_axis(s_axis, "S");
    check_axis(sigma_axis, "sigma");
    if (t_io.size() != b_axis.size() * g_axis.size() * c_axis.size())
        throw ParameterError("t_io size does not match its grid");
    if (t_model.size() != b_axis.size() * c_axis.size() * s_axis.size() * sigma_axis.size())
        throw ParameterError("t_model size does not match its grid");
    for (double v : t_io)
        if (!(v >= 0.0) || !std::isfinite(v)) throw ParameterError("t_io samples must be finite and non-negative");
    for (double v : t_model)
        if (!(v > 0.0) || !std::isfinite(v)) throw ParameterError("t_model samples must be finite and positive");
}

double ProfileTables::io(double b, double g, double c, bool* clamped) const {
    bool cl = false;
    const std::vector<AxisPos> pos{locate(b_axis, b, cl), locate(g_axis, g, cl), locate(c_axis, c, cl)};
    if (clamped) *clamped = cl;
    return interpolate(t_io, {b_axis.size(), g_axis.size(), c_axis.size()}, pos);
}

double ProfileTables::model(double b, double c, double s, double sigma, bool* clamped) const {
    bool cl = false;
    const std::vector<AxisPos> pos{locate(b_axis, b, cl), locate(c_axis, c, cl), locate(s_axis, s, cl),
                                   locate(sigma_axis, sigma, cl)};
    if (clamped) *clamped = cl;
    return interpolate(t_model, {b_axis.size(), c_axis.size(), s_axis.size(), sigma_axis.size()}, pos);
}

double& ProfileTables::io_at(std::size_t bi, std::size_t gi, std::size_t ci) {
    return t_io.at((bi * g_axis.size() + gi) * c_axis.size() + ci);
}

double& ProfileTables::model_at(std::size_t bi, std::size_t ci, std::size_t si, std::size_t sigi) {
    return t_model.at(((bi * c_axis.size() + ci) * s_axis.size() + si) * sigma_axis.size() + sigi);
}

ProfileTables profile(const refmodel::ModelDims& dims, std::uint32_t elem_bytes, const TunerConfig& tc,
                      const LookupTables& lookup, const ProfileOptions& options) {
    tc.validate();
    lookup.validate();
    if (options.patterns == 0) throw ParameterError("profile needs at least one miss pattern");
    ProfileTables t;
    t.shape = KvShape::of(dims, elem_bytes);
    t.mg_const = tc.mg_const;
    for (std::size_t b = 1; b <= tc.b_max; ++b) t.b_axis.push_back(static_cast<double>(b));
    for (std::size_t g = 1; g <= tc.g_max; ++g) {
        if (!lookup.reuse_rate.contains(g))
            throw NotFoundError("reuse lookup has no entry for G=" + std::to_string(g));
        t.g_axis.push_back(static_cast<double>(g));
    }
    std::vector<std::uint64_t> caps;
    for (const auto& [c, r] : lookup.reuse_rate.begin()->second) caps.push_back(c);
    for (std::uint64_t c : caps) t.c_axis.push_back(static_cast<double>(c));
    for (std::size_t s = tc.s_min; s <= tc.s_max; s += tc.s_step) t.s_axis.push_back(static_cast<double>(s));
    if (t.s_axis.back() != static_cast<double>(tc.s_max)) t.s_axis.push_back(static_cast<double>(tc.s_max));
    for (const auto& [sigma, p] : lookup.projections)
        if (sigma <= tc.sigma_max) t.sigma_axis.push_back(sigma);
    if (t.sigma_axis.empty()) throw ParameterError("no projection with sigma <= sigma_max");

    // Disk time of one step for one sequence: every layer reads its misses.
    // Positions are drawn uniformly from the shortest context on the grid.
    Rng rng(options.seed);
    t.t_io.assign(t.b_axis.size() * t.g_axis.size() * t.c_axis.size(), 0.0);
    for (std::size_t gi = 0; gi < t.g_axis.size(); ++gi) {
        const std::size_t g = gi + 1;
        kvstore::DiskLayout layout;
        layout.num_layers = static_cast<std::uint32_t>(dims.layers);
        layout.h_kv = static_cast<std::uint32_t>(dims.h_kv);
        layout.head_dim = static_cast<std::uint32_t>(dims.head_dim);
        layout.group_size = static_cast<std::uint32_t>(g);
        layout.elem_bytes = elem_bytes;
        layout.block_align = options.block_align;
        layout.max_tokens = tc.s_max;
        const std::size_t m = m_for_group(tc.mg_const, g);
        const std::size_t universe = std::max(tc.s_min / g, m);
        for (std::size_t ci = 0; ci < t.c_axis.size(); ++ci) {
            const double rate = lookup.reuse_at(g, caps[ci]);
            const auto misses = static_cast<std::size_t>(std::llround(static_cast<double>(m) * (1.0 - rate)));
            double sum = 0.0;
            for (std::size_t p = 0; p < options.patterns && misses > 0; ++p) {
                std::vector<std::uint64_t> pool(universe);
                for (std::size_t i = 0; i < universe; ++i) pool[i] = i;
                for (std::size_t i = 0; i < misses; ++i) std::swap(pool[i], pool[i + rng.below(universe - i)]);
                std::vector<kvstore::GroupId> ids;
                for (std::size_t i = 0; i < misses; ++i) ids.push_back({0, pool[i]});
                std::sort(ids.begin(), ids.end());
                std::vector<std::uint64_t> blocks;
                for (const auto& req : kvstore::coalesce(ids)) blocks.push_back(kvstore::request_bytes(layout, req));
                sum += kvstore::estimate_io_time(options.disk, blocks);
            }
            const double per_seq = sum / static_cast<double>(options.patterns) * static_cast<double>(dims.layers);
            for (std::size_t bi = 0; bi < t.b_axis.size(); ++bi) t.io_at(bi, gi, ci) = per_seq * t.b_axis[bi];
        }
    }

    // Compute time of one step: prediction over S compressed tokens, attention
    // over the MG selected tokens, lookup of MG groups (the G=1 bound) and
    // per-slot management for C.
    t.t_model.assign(t.b_axis.size() * t.c_axis.size() * t.s_axis.size() * t.sigma_axis.size(), 0.0);
    for (std::size_t ci = 0; ci < t.c_axis.size(); ++ci) {
        const std::size_t slots = static_cast<std::size_t>(caps[ci] / (dims.layers * t.shape.token_bytes()));
        for (std::size_t si = 0; si < t.s_axis.size(); ++si) {
            const auto s = static_cast<std::size_t>(t.s_axis[si]);
            for (std::size_t k = 0; k < t.sigma_axis.size(); ++k) {
                const std::size_t rank = kcompress::rank_for_sigma(dims.kv_width(), t.sigma_axis[k]);
                const double per_layer = options.cost.prediction_seconds(dims, rank, s) +
                                         options.cost.compute_seconds(dims, tc.mg_const) +
                                         options.cost.management_seconds(tc.mg_const, slots);
                const double per_seq = per_layer * static_cast<double>(dims.layers);
                for (std::size_t bi = 0; bi < t.b_axis.size(); ++bi) t.model_at(bi, ci, si, k) = per_seq * t.b_axis[bi];
            }
        }
    }
    t.validate();
    return t;
}

// ---- solver ----

Solution solve(const TunerConfig& tc, std::size_t b, std::size_t s, const ProfileTables& tables) {
    tc.validate();
    std::vector<double> sigmas;
    for (double sg : tables.sigma_axis)
        if (sg <= tc.sigma_max) sigmas.push_back(sg);
    if (sigmas.empty()) throw ParameterError("profile has no sigma <= sigma_max");

    const KvShape& shape = tables.shape;
    const std::uint64_t budget = tc.per_batch_budget();
    const std::uint64_t delta = tc.delta ? tc.delta : tc.g_max * shape.token_bytes();
    const std::uint64_t rolling = shape.rolling_bytes(tc.g_max);
    const std::uint64_t c0 = shape.selection_bytes(tc.mg_const);

    // Smallest sigma whose compressed K fits next to C and the rolling buffer.
    auto pick_sigma = [&](std::uint64_t c) -> std::optional<double> {
        for (double sg : sigmas)
            if (shape.klr_bytes(s, sg) + c + rolling <= budget) return sg;
        return std::nullopt;
    };
    // Largest C that still fits with sigma.
    auto c_limit = [&](double sg) -> std::uint64_t {
        const std::uint64_t fixed = shape.klr_bytes(s, sg) + rolling;
        return budget >= fixed ? budget - fixed : 0;
    };

    std::vector<std::string> notes;
    if (b < tables.b_axis.front() || b > tables.b_axis.back() || s < tables.s_axis.front() ||
        s > tables.s_axis.back())
        notes.push_back("(b, S) outside the profiled grid; surfaces clamped");
    auto finish = [&](Solution sol) {
        std::ostringstream d;
        for (std::size_t i = 0; i < notes.size(); ++i) d << (i ? "; " : "") << notes[i];
        sol.diagnostics = d.str();
        return sol;
    };

    std::uint64_t c = c0;
    std::optional<double> sigma = pick_sigma(c);
    if (!sigma) {
        std::ostringstream d;
        d << "budget of " << budget << " bytes per batch is below the minimum " << shape.klr_bytes(s, sigmas.back()) + c0 + rolling
          << " (compressed K at sigma " << sigmas.back() << ", one selection per layer, rolling buffer)";
        notes.push_back(d.str());
        Solution sol;
        sol.sigma = sigmas.back();
        sol.m = m_for_group(tc.mg_const, 1);
        sol.c = c0;
        return finish(sol);
    }

    const double c_top = tables.c_axis.back();
    Solution last;
    while (true) {
        for (std::size_t g = 1; g <= tc.g_max; ++g) {
            Solution cand;
            cand.g = g;
            cand.sigma = *sigma;
            cand.m = m_for_group(tc.mg_const, g);
            cand.c = c;
            cand.t_io = tables.io(static_cast<double>(b), static_cast<double>(g), static_cast<double>(c));
            cand.t_model = tables.model(static_cast<double>(b), static_cast<double>(c), static_cast<double>(s), *sigma);
            cand.feasible = (1.0 - tc.alpha) * cand.t_io <= cand.t_model;
            last = cand;
            if (cand.feasible) return finish(cand);
        }
        // Past the top of the C axis the surfaces no longer change with C, so
        // only a new sigma can change the outcome: jump to where it changes.
        std::uint64_t next = c + delta;
        if (static_cast<double>(c) >= c_top) {
            const std::uint64_t limit = c_limit(*sigma);
            const std::uint64_t steps = (limit - c) / delta + 1;
            last.c = c + (steps - 1) * delta;
            next = c + steps * delta;
        }
        const auto next_sigma = pick_sigma(next);
        if (!next_sigma) break;
        c = next;
        sigma = next_sigma;
    }
    std::ostringstream d;
    d << "no feasible point up to sigma " << last.sigma << ", G " << tc.g_max << ", C " << last.c << " bytes";
    notes.push_back(d.str());
    return finish(last);
}

SolutionTable build_solution_table(const TunerConfig& tc, const ProfileTables& tables,
                                   std::vector<std::string>* diagnostics) {
    tc.validate();
    SolutionTable out;
    std::vector<std::size_t> lengths;
    for (std::size_t s = tc.s_min; s <= tc.s_max; s += tc.s_step) lengths.push_back(s);
    if (lengths.back() != tc.s_max) lengths.push_back(tc.s_max);
    for (std::size_t b = 1; b <= tc.b_max; ++b)
        for (std::size_t s : lengths) {
            Solution sol = solve(tc, b, s, tables);
            if (sol.feasible) {
                out.emplace(SolutionKey{b, s}, std::move(sol));
            } else if (diagnostics) {
                diagnostics->push_back("b=" + std::to_string(b) + " S=" + std::to_string(s) + ": " + sol.diagnostics);
            }
        }
    return out;
}

const Solution& query_solution(const SolutionTable& table, std::size_t b, std::size_t s, bool normalize) {
    if (table.empty()) throw ParameterError("solution table is empty");
    if (const auto it = table.find({b, s}); it != table.end()) return it->second;
    double scale_b = 1.0, scale_s = 1.0;
    if (normalize) {
        std::size_t b_lo = table.begin()->first.first, b_hi = b_lo, s_lo = table.begin()->first.second, s_hi = s_lo;
        for (const auto& [key, sol] : table) {
            b_lo = std::min(b_lo, key.first);
            b_hi = std::max(b_hi, key.first);
            s_lo = std::min(s_lo, key.second);
            s_hi = std::max(s_hi, key.second);
        }
        if (b_hi > b_lo) scale_b = static_cast<double>(b_hi - b_lo);
        if (s_hi > s_lo) scale_s = static_cast<double>(s_hi - s_lo);
    }
    const Solution* best = nullptr;
    double best_d = std::numeric_limits<double>::infinity();
    // Map order is (b, S) ascending, so keeping the first minimum breaks ties
    // toward the smaller b, then the smaller S.
    for (const auto& [key, sol] : table) {
        const double db = (static_cast<double>(key.first) - static_cast<double>(b)) / scale_b;
        const double ds = (static_cast<double>(key.second) - static_cast<double>(s)) / scale_s;
        const double dist = std::sqrt(db * db + ds * ds);
        if (dist < best_d) {
            best_d = dist;
            best = &sol;
        }
    }
    return *best;
}

}  // namespace kvo::tuner
