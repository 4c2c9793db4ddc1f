#include "kvo/runtime.hpp"

#include <time.h>

#include <algorithm>
#include <condition_variable>
#include <exception>
#include <istream>
#include <mutex>
#include <json.hpp>
#include <ostream>
#include <set>
#include <thread>

#include "kvo/error.hpp"
#include "kvo/predictor.hpp"

namespace kvo::runtime {

namespace {

double thread_cpu_seconds() {
    timespec ts{};
    clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
    return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

std::vector<kvstore::TokenKv> rows_to_tokens(const Matrix& k, const Matrix& v, std::size_t first, std::size_t count) {
    std::vector<kvstore::TokenKv> out(count);
    for (std::size_t t = 0; t < count; ++t) {
        out[t].k.assign(k.row(first + t).begin(), k.row(first + t).end());
        out[t].v.assign(v.row(first + t).begin(), v.row(first + t).end());
    }
    return out;
}

}  // namespace

// ---- cost model ----

double ComputeCostModel::prediction_seconds(const refmodel::ModelDims& dims, std::size_t rank, std::size_t n) const {
    const double dm = static_cast<double>(dims.model_dim), hq = static_cast<double>(dims.h_q),
                 d = static_cast<double>(dims.head_dim), r = static_cast<double>(rank), nn = static_cast<double>(n);
    const double flops = 2 * dm * hq * d + 2 * hq * d * r + 2 * hq * r * nn + hq * nn + nn;
    return flops / flops_per_second + per_layer_fixed_seconds;
}

double ComputeCostModel::compute_seconds(const refmodel::ModelDims& dims, std::size_t attended) const {
    const double dm = static_cast<double>(dims.model_dim), hq = static_cast<double>(dims.h_q),
                 hkv = static_cast<double>(dims.h_kv), d = static_cast<double>(dims.head_dim),
                 f = static_cast<double>(dims.ffn_dim), t = static_cast<double>(attended);
    const double flops = 2 * dm * (hq * d + 2 * hkv * d) + 4 * hq * d * t + 2 * hq * d * dm + 4 * dm * f;
    return flops / flops_per_second + per_layer_fixed_seconds;
}

double ComputeCostModel::management_seconds(std::size_t groups, std::size_t slots) const {
    return per_group_lookup_seconds * static_cast<double>(groups) + per_slot_seconds * static_cast<double>(slots);
}

// ---- config ----

void RuntimeConfig::validate() const {
    if (group_size == 0) throw ParameterError("group size must be >= 1");
    if (!(sigma >= 1.0)) throw ParameterError("sigma must be >= 1");
    if (m == 0) throw ParameterError("M must be >= 1");
    if (backend == Backend::simulated && !disk) throw ParameterError("simulated backend needs a disk model");
    if (backend == Backend::file && offload_path.empty()) throw ParameterError("file backend needs an offload path");
    if (elem_bytes != 2 && elem_bytes != 4) throw ParameterError("elem_bytes must be 2 or 4");
    if (!(cost.flops_per_second > 0.0)) throw ParameterError("flops_per_second must be positive");
}

std::size_t slots_per_layer(std::uint64_t capacity_bytes, std::size_t layers, std::uint64_t group_byte_size) {
    if (layers == 0) throw ParameterError("layer count must be positive");
    return membuf::ReuseBuffer::slots_for_bytes(capacity_bytes / layers, group_byte_size);
}

// ---- summary ----

DecodeSummary summarize(std::span<const StepStats> steps, double peak_bandwidth) {
    DecodeSummary s;
    s.steps = steps.size();
    double recall_sum = 0.0;
    std::size_t recall_n = 0;
    for (const StepStats& st : steps) {
        s.io_seconds += st.io_seconds;
        s.flush_seconds += st.flush_seconds;
        s.compute_seconds += st.compute_seconds;
        s.wall_seconds += st.wall_seconds;
        s.bytes_read += st.bytes_read;
        s.requests += st.requests;
        s.reuse_hits += st.reuse_hits;
        s.reuse_requests += st.reuse_requests;
        for (double r : st.recall) {
            recall_sum += r;
            ++recall_n;
        }
    }
    if (s.wall_seconds > 0.0) s.tokens_per_second = static_cast<double>(s.steps) / s.wall_seconds;
    if (s.io_seconds > 0.0 && peak_bandwidth > 0.0)
        s.io_utilization = std::min(1.0, static_cast<double>(s.bytes_read) / s.io_seconds / peak_bandwidth);
    if (s.reuse_requests > 0)
        s.reuse_rate = static_cast<double>(s.reuse_hits) / static_cast<double>(s.reuse_requests);
    if (recall_n > 0) s.mean_recall = recall_sum / static_cast<double>(recall_n);
    return s;
}

// ---- engine ----

struct Engine::Impl {
    std::unique_ptr<kvstore::KvStore> store;
    std::unique_ptr<membuf::RollingBuffer> rolling;
    std::vector<kcompress::ProjectionMatrix> projections;
    std::vector<Matrix> exact_k;  // on-disk K rows, kept only for oracle recall
};

Engine::Engine(const refmodel::ToyModel& model, RuntimeConfig config, std::vector<kcompress::ProjectionMatrix> projections)
    : impl_(std::make_unique<Impl>()), model_(model), config_(std::move(config)) {
    config_.validate();
    const auto& dims = model_.dims();
    if (projections.size() != dims.layers) throw ParameterError("need one projection per layer");
    for (const auto& p : projections)
        if (p.width() != dims.kv_width()) throw ParameterError("projection width does not match h_kv·d");
    impl_->projections = projections;
    klr_ = kcompress::CompressedKCache(std::move(projections));
}

Engine::~Engine() = default;

const membuf::RollingBuffer& Engine::rolling() const {
    if (!impl_->rolling) throw ContractViolation("engine has not been prefilled");
    return *impl_->rolling;
}

const kvstore::KvStore& Engine::store() const {
    if (!impl_->store) throw ContractViolation("engine has not been prefilled");
    return *impl_->store;
}

void Engine::prefill(const std::vector<Matrix>& prompt_k, const std::vector<Matrix>& prompt_v) {
    const auto& dims = model_.dims();
    if (impl_->store) throw ContractViolation("engine already prefilled");
    if (prompt_k.size() != dims.layers || prompt_v.size() != dims.layers)
        throw ParameterError("prompt KV must cover every layer");
    const std::size_t s = prompt_k.front().rows();
    for (std::size_t l = 0; l < dims.layers; ++l)
        if (prompt_k[l].rows() != s || prompt_v[l].rows() != s || prompt_k[l].cols() != dims.kv_width() ||
            prompt_v[l].cols() != dims.kv_width())
            throw ParameterError("prompt KV shapes are inconsistent");

    kvstore::DiskLayout layout;
    layout.num_layers = static_cast<std::uint32_t>(dims.layers);
    layout.h_kv = static_cast<std::uint32_t>(dims.h_kv);
    layout.head_dim = static_cast<std::uint32_t>(dims.head_dim);
    layout.group_size = static_cast<std::uint32_t>(config_.group_size);
    layout.elem_bytes = config_.elem_bytes;
    layout.block_align = config_.block_align;
    layout.max_tokens = config_.max_context ? config_.max_context : s + 4096;
    if (layout.max_tokens < s) throw ParameterError("max_context is smaller than the prompt");

    std::unique_ptr<kvstore::BlockDevice> device;
    std::optional<kvstore::DiskModel> timing_model;
    if (config_.backend == Backend::simulated) {
        device = std::make_unique<kvstore::MemoryDevice>();
        timing_model = config_.disk;
    } else {
        auto path = config_.offload_path;
        if (std::filesystem::is_directory(path)) path /= "kv_cache.bin";
        device = std::make_unique<kvstore::FileDevice>(path, true);
    }
    impl_->store = std::make_unique<kvstore::KvStore>(layout, std::move(device), timing_model);
    impl_->rolling = std::make_unique<membuf::RollingBuffer>(dims.layers, config_.group_size, dims.kv_width());

    const std::size_t reuse_slots = config_.reuse_capacity_bytes == 0
                                        ? 2 * config_.m
                                        : runtime::slots_per_layer(config_.reuse_capacity_bytes, dims.layers,
                                                                   layout.group_byte_size());
    slots_ = config_.reuse ? reuse_slots : config_.m;
    buffers_.assign(dims.layers, membuf::ReuseBuffer(slots_));

    for (std::size_t l = 0; l < dims.layers; ++l) {
        const auto tokens = rows_to_tokens(prompt_k[l], prompt_v[l], 0, s);
        const auto r = impl_->store->prefill_write(static_cast<std::uint32_t>(l), tokens);
        prefill_bytes_ += r.stats.bytes;
        const std::size_t on_disk = r.groups_written * config_.group_size;
        const Matrix disk_rows = prompt_k[l].row_block(0, on_disk);
        klr_.compress_append(l, disk_rows);
        if (config_.oracle_recall) impl_->exact_k.push_back(disk_rows);
        for (std::size_t t = on_disk; t < s; ++t) impl_->rolling->rb_append(l, tokens[t]);
    }
    seq_len_ = s;
}

std::size_t Engine::attendable_tokens(std::size_t layer) const {
    const std::size_t on_disk = store().groups_written(static_cast<std::uint32_t>(layer)) * config_.group_size;
    return on_disk + (config_.rolling_buffer ? rolling().size(layer) : 0);
}

StepOutput Engine::decode_step(std::span<const double> x) {
    if (!impl_->store) throw ContractViolation("decode_step before prefill");
    const auto& dims = model_.dims();
    const std::size_t layers = dims.layers;
    const std::size_t g = config_.group_size;
    if (x.size() != dims.model_dim) throw ParameterError("input width does not match model_dim");
    const bool modeled = config_.timing == TimingMode::modeled;

    struct LayerWork {
        std::vector<kvstore::GroupId> ids;
        membuf::ReuseBuffer::Lookup look;
        membuf::MappingTable table;
        kvstore::IoStats io;
        double p_seconds = 0.0;
        double c_seconds = 0.0;
        double f_seconds = 0.0;
        std::optional<std::vector<kvstore::TokenKv>> flushed;
        double recall = -1.0;
    };
    std::vector<LayerWork> work(layers);
    std::vector<std::vector<double>> inputs(layers + 1);
    inputs[0].assign(x.begin(), x.end());
    StepOutput out;
    out.attn_out.resize(layers);
    std::uint64_t flushed_groups = 0;

    auto prefetch = [&](std::size_t i) {
        LayerWork& w = work[i];
        const double t0 = modeled ? 0.0 : thread_cpu_seconds();
        const std::vector<double>& xin = inputs[i == 0 ? 0 : i - 1];
        const std::size_t n = klr_.n_tokens(i);
        const std::size_t m_eff = std::min(config_.m, n / g);
        if (m_eff > 0) {
            const Matrix q = model_.queries(i, xin);
            const Matrix q_lr = predictor::low_rank_queries_from(q, klr_.projection(i), model_.head_map());
            const auto sel = predictor::select_groups(predictor::approx_scores(q_lr, klr_.k_lr(i)), g, m_eff);
            for (std::size_t idx : sel.selected) w.ids.push_back({static_cast<std::uint32_t>(i), idx});
        }
        if (!config_.reuse) buffers_[i].clear();
        try {
            w.look = buffers_[i].lookup_and_reserve(w.ids);
        } catch (const ConfigError& e) {
            throw ConfigError("layer " + std::to_string(i) + ": " + e.what());
        }
        const double t1 = modeled ? 0.0 : thread_cpu_seconds();
        if (!w.look.misses.empty()) {
            auto read = impl_->store->read_groups(w.look.misses);
            w.io = std::move(read.stats);
            for (std::size_t k = 0; k < w.look.reserved.size(); ++k) {
                const auto tokens = kvstore::decode_group(impl_->store->layout(), read.payloads[k]);
                buffers_[i].insert_loaded(w.look.reserved[k].first, w.look.reserved[k].second,
                                          membuf::GroupData::from_tokens(tokens));
            }
        }
        const double t2 = modeled ? 0.0 : thread_cpu_seconds();
        w.table = membuf::build_mapping(w.ids, w.look.hits, w.look.reserved, 0, g);
        if (modeled) {
            w.p_seconds = config_.cost.prediction_seconds(dims, klr_.projection(i).rank(), n) +
                          config_.cost.management_seconds(w.ids.size(), slots_);
        } else {
            // CPU time of the read call is part of the disk time; count the rest.
            w.p_seconds = (t1 - t0) + (thread_cpu_seconds() - t2);
        }
    };

    auto compute = [&](std::size_t i) {
        LayerWork& w = work[i];
        const double t0 = modeled ? 0.0 : thread_cpu_seconds();
        const std::vector<double>& xi = inputs[i];
        w.flushed = impl_->rolling->rb_append(i, model_.kv(i, xi));
        std::span<const kvstore::TokenKv> recent;
        if (config_.rolling_buffer) recent = w.flushed ? std::span<const kvstore::TokenKv>(*w.flushed) : impl_->rolling->tokens(i);
        if (!recent.empty()) {
            w.table.segments.push_back({membuf::Source::rolling, 0, 0, recent.size()});
            w.table.total_tokens += recent.size();
        }
        const membuf::LogicalKv view(w.table, buffers_[i], recent);
        const Matrix q = model_.queries(i, xi);
        Matrix attn(dims.h_q, dims.head_dim);
        if (view.size() > 0)
            attn = refmodel::attend(q, model_.head_map(), view.size(), [&](std::size_t t) { return view.k(t); },
                                    [&](std::size_t t) { return view.v(t); });
        inputs[i + 1] = model_.finish_layer(i, xi, attn);
        w.c_seconds = modeled ? config_.cost.compute_seconds(dims, view.size()) : thread_cpu_seconds() - t0;
        out.attn_out[i] = std::move(attn);
        if (config_.oracle_recall && !w.ids.empty()) {
            const auto oracle = refmodel::oracle_top_groups(q, impl_->exact_k[i], model_.head_map(), g, w.ids.size());
            std::vector<std::size_t> sel;
            for (const auto& id : w.ids) sel.push_back(id.index);
            w.recall = refmodel::recall_at_m(sel, oracle);
        }
    };

    auto flush = [&]() {
        for (std::size_t i = 0; i < layers; ++i) {
            LayerWork& w = work[i];
            if (!w.flushed) continue;
            const auto layer = static_cast<std::uint32_t>(i);
            const kvstore::IoStats s = impl_->store->write_group({layer, impl_->store->groups_written(layer)}, *w.flushed);
            w.f_seconds = s.seconds;
            Matrix rows(0, dims.kv_width());
            for (const auto& t : *w.flushed) rows.append_row(t.k);
            klr_.compress_append(i, rows);
            if (config_.oracle_recall) impl_->exact_k[i].append_rows(rows);
            ++flushed_groups;
        }
    };

    if (config_.overlap) {
        std::mutex mu;
        std::condition_variable cv;
        std::size_t inputs_ready = 1;  // inputs[j] is valid for j < inputs_ready
        std::size_t prefetched = 0;
        bool compute_done = false, flush_done = false, abort = false;
        std::exception_ptr error;

        std::jthread worker([&] {
            try {
                for (std::size_t i = 0; i < layers; ++i) {
                    {
                        std::unique_lock lock(mu);
                        cv.wait(lock, [&] { return abort || inputs_ready >= std::max<std::size_t>(i, 1); });
                        if (abort) return;
                    }
                    prefetch(i);
                    {
                        std::lock_guard lock(mu);
                        prefetched = i + 1;
                    }
                    cv.notify_all();
                }
                {
                    std::unique_lock lock(mu);
                    cv.wait(lock, [&] { return abort || compute_done; });
                    if (abort) return;
                }
                flush();
                {
                    std::lock_guard lock(mu);
                    flush_done = true;
                }
                cv.notify_all();
            } catch (...) {
                {
                    std::lock_guard lock(mu);
                    error = std::current_exception();
                    abort = true;
                }
                cv.notify_all();
            }
        });

        try {
            for (std::size_t i = 0; i < layers; ++i) {
                {
                    std::unique_lock lock(mu);
                    cv.wait(lock, [&] { return abort || prefetched > i; });
                    if (abort) break;
                }
                compute(i);
                {
                    std::lock_guard lock(mu);
                    inputs_ready = i + 2;
                }
                cv.notify_all();
            }
            std::unique_lock lock(mu);
            compute_done = true;
            cv.notify_all();
            cv.wait(lock, [&] { return abort || flush_done; });
        } catch (...) {
            {
                std::lock_guard lock(mu);
                abort = true;
            }
            cv.notify_all();
            worker.join();
            throw;
        }
        worker.join();
        if (error) std::rethrow_exception(error);
    } else {
        for (std::size_t i = 0; i < layers; ++i) {
            prefetch(i);
            compute(i);
        }
        flush();
    }

    // Timing: prefetch lane runs P_i then D_i; P_i (i ≥ 2) waits for C_{i-2},
    // which produces its input. C_i waits for C_{i-1} and the prefetch of i.
    // Flushes follow on the prefetch lane once the layer's compute is done.
    StepStats& st = out.stats;
    st.step = history_.size();
    double lane = 0.0, total = 0.0;
    std::vector<double> c_end(layers, 0.0);
    for (std::size_t i = 0; i < layers; ++i) {
        const LayerWork& w = work[i];
        if (config_.overlap) {
            const double ready = i <= 1 ? 0.0 : c_end[i - 2];
            const double d_end = std::max(lane, ready) + w.p_seconds + w.io.seconds;
            lane = d_end;
            c_end[i] = std::max(i == 0 ? 0.0 : c_end[i - 1], d_end) + w.c_seconds;
        } else {
            total += w.p_seconds + w.io.seconds + w.c_seconds;
        }
        st.io_seconds += w.io.seconds;
        st.prediction_seconds += w.p_seconds;
        st.compute_seconds += w.p_seconds + w.c_seconds;
        st.flush_seconds += w.f_seconds;
        st.reuse_hits += w.look.hits.size();
        st.reuse_requests += w.ids.size();
        st.bytes_read += w.io.bytes;
        st.requests += w.io.requests;
        std::vector<std::size_t> sel;
        for (const auto& id : w.ids) sel.push_back(id.index);
        st.selected.push_back(std::move(sel));
        if (w.recall >= 0.0) st.recall.push_back(w.recall);
    }
    if (config_.overlap) {
        for (std::size_t i = 0; i < layers; ++i)
            if (work[i].flushed) lane = std::max(lane, c_end[i]) + work[i].f_seconds;
        st.wall_seconds = std::max(c_end[layers - 1], lane);
    } else {
        st.wall_seconds = total + st.flush_seconds;
    }
    st.groups_flushed = flushed_groups;

    out.output = std::move(inputs[layers]);
    ++seq_len_;
    history_.push_back(st);
    return out;
}

DecodeSummary Engine::summary() const {
    const double peak = config_.disk ? config_.disk->peak_bandwidth : 0.0;
    return summarize(history_, peak);
}

// ---- analysis and records ----

std::vector<double> overlap_ratio(const std::vector<std::vector<std::size_t>>& log) {
    if (log.size() < 2) throw ParameterError("overlap ratio needs at least two steps");
    std::vector<double> out;
    for (std::size_t j = 1; j < log.size(); ++j) {
        if (log[j].empty()) {
            out.push_back(1.0);
            continue;
        }
        const std::set<std::size_t> prev(log[j - 1].begin(), log[j - 1].end());
        const std::set<std::size_t> cur(log[j].begin(), log[j].end());
        std::size_t common = 0;
        for (std::size_t id : cur) common += prev.count(id);
        out.push_back(static_cast<double>(common) / static_cast<double>(cur.size()));
    }
    return out;
}

void write_selection_log(std::ostream& out, std::span<const StepStats> steps) {
    for (const StepStats& s : steps)
        for (std::size_t l = 0; l < s.selected.size(); ++l)
            out << nlohmann::json{{"step", s.step}, {"layer", l}, {"groups", s.selected[l]}}.dump() << '\n';
}

std::vector<std::vector<std::vector<std::size_t>>> read_selection_log(std::istream& in) {
    std::vector<std::vector<std::vector<std::size_t>>> per_layer;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            const auto step = j.at("step").get<std::size_t>();
            const auto layer = j.at("layer").get<std::size_t>();
            auto groups = j.at("groups").get<std::vector<std::size_t>>();
            if (layer >= per_layer.size()) per_layer.resize(layer + 1);
            auto& steps = per_layer[layer];
            if (step != steps.size())
                throw FormatError("line " + std::to_string(line_no) + ": steps out of order for layer " +
                                  std::to_string(layer));
            steps.push_back(std::move(groups));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (per_layer.empty()) throw FormatError("selection log is empty");
    return per_layer;
}

void write_stats(std::ostream& out, std::span<const StepStats> steps) {
    for (const StepStats& s : steps) {
        nlohmann::json j{{"step", s.step},
                         {"io_seconds", s.io_seconds},
                         {"flush_seconds", s.flush_seconds},
                         {"prediction_seconds", s.prediction_seconds},
                         {"compute_seconds", s.compute_seconds},
                         {"wall_seconds", s.wall_seconds},
                         {"reuse_hits", s.reuse_hits},
                         {"reuse_requests", s.reuse_requests},
                         {"bytes_read", s.bytes_read},
                         {"requests", s.requests},
                         {"groups_flushed", s.groups_flushed}};
        if (!s.recall.empty()) j["recall"] = s.recall;
        out << j.dump() << '\n';
    }
}

}  // namespace kvo::runtime
