// kvo: tune offloading parameters, run the decode loop on the toy model, and
// analyze selection logs.

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "kvo/artifact.hpp"
#include "kvo/error.hpp"
#include "kvo/kcompress.hpp"
#include "kvo/refmodel.hpp"
#include "kvo/runtime.hpp"
#include "kvo/tuner.hpp"

namespace {

using namespace kvo;

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitInfeasible = 2;
constexpr int kExitMismatch = 3;
constexpr int kExitMalformed = 4;

struct InfeasibleError : Error {
    using Error::Error;
};

void add_model_options(CLI::App& cmd, refmodel::ModelDims& dims) {
    cmd.add_option("--layers", dims.layers, "Model layers")->capture_default_str();
    cmd.add_option("--model-dim", dims.model_dim, "Hidden size")->capture_default_str();
    cmd.add_option("--heads", dims.h_q, "Query heads")->capture_default_str();
    cmd.add_option("--kv-heads", dims.h_kv, "KV heads")->capture_default_str();
    cmd.add_option("--head-dim", dims.head_dim, "Head dimension")->capture_default_str();
    cmd.add_option("--ffn-dim", dims.ffn_dim, "FFN hidden size")->capture_default_str();
    cmd.add_option("--model-seed", dims.seed, "Weight seed")->capture_default_str();
}

void add_workload_options(CLI::App& cmd, refmodel::WorkloadSpec& w) {
    cmd.add_option("--seed", w.seed, "Workload seed")->capture_default_str();
    cmd.add_option("--steps", w.steps, "Decode steps")->capture_default_str();
    cmd.add_option("--context-len", w.context_len, "Prompt tokens")->capture_default_str();
    cmd.add_option("--drift", w.drift, "Per-step topic replacement probability")->capture_default_str();
}

// ---- tune ----

struct TuneArgs {
    refmodel::ModelDims dims;
    refmodel::WorkloadSpec workload;
    std::size_t max_context = 32768;
    std::size_t min_context = 2048;
    std::size_t max_batch = 1;
    double max_kv_mib = 2200;
    std::string disk = "nvme";
    std::string out = "config.json";
    tuner::TunerConfig tc;
    std::size_t samples = 2;
    std::size_t fit_sequences = 8;
    std::uint32_t elem_bytes = 2;
};

int cmd_tune(TuneArgs args) {
    const refmodel::ToyModel model(args.dims);
    auto& tc = args.tc;
    tc.b_max = args.max_batch;
    tc.s_max = args.max_context;
    tc.s_min = std::min(args.min_context, args.max_context);
    tc.budget_max = static_cast<std::uint64_t>(args.max_kv_mib * 1024.0 * 1024.0);
    tc.validate();
    const tuner::KvShape shape = tuner::KvShape::of(model.dims(), args.elem_bytes);

    // Nothing fits even at the smallest context and the largest sigma.
    const std::uint64_t floor_bytes = shape.klr_bytes(tc.s_min, tc.sigma_max) +
                                      shape.selection_bytes(tc.mg_const) + shape.rolling_bytes(tc.g_max);
    if (tc.per_batch_budget() < floor_bytes)
        throw InfeasibleError("budget of " + std::to_string(tc.per_batch_budget()) +
                              " bytes per batch is below the minimum " + std::to_string(floor_bytes));

    const auto disk = kvstore::DiskModel::resolve(args.disk);
    std::cerr << "fitting projections\n";
    const auto held = refmodel::held_out_k_samples(model, args.workload, args.fit_sequences);
    std::vector<double> sigmas;
    for (double s : {1.0, 2.0, 4.0, 8.0, 16.0, 32.0})
        if (s <= tc.sigma_max) sigmas.push_back(s);
    tuner::LookupTables lookup;
    for (const auto& k : held) {
        const auto fitted = kcompress::fit_projections(k, sigmas);
        for (const auto& p : fitted) lookup.projections[p.sigma].push_back(p);
    }

    std::cerr << "sampling reuse rates\n";
    runtime::RuntimeConfig base;
    base.mg_const = tc.mg_const;
    base.disk = disk;
    base.elem_bytes = args.elem_bytes;
    const auto& sampling_proj = lookup.projections.count(4.0) ? lookup.projections.at(4.0)
                                                               : lookup.projections.begin()->second;
    base.sigma = lookup.projections.count(4.0) ? 4.0 : lookup.projections.begin()->first;
    tuner::ReuseSampling sampling;
    sampling.samples = args.samples;
    const std::uint64_t c_min = shape.selection_bytes(tc.mg_const);
    for (double f : {1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0})
        sampling.capacities.push_back(static_cast<std::uint64_t>(f * static_cast<double>(c_min)));
    std::vector<std::size_t> gs;
    for (std::size_t g = 1; g <= tc.g_max; ++g) gs.push_back(g);
    const auto reuse = tuner::build_reuse_lookup(model, base, sampling_proj, args.workload, gs, sampling);
    lookup.reuse_rate = reuse.reuse_rate;

    std::cerr << "profiling\n";
    tuner::ProfileOptions popt;
    popt.disk = disk;
    popt.seed = args.workload.seed;
    const auto tables = tuner::profile(model.dims(), args.elem_bytes, tc, lookup, popt);
    std::vector<std::string> diagnostics;
    auto solutions = tuner::build_solution_table(tc, tables, &diagnostics);
    for (const auto& d : diagnostics) std::cerr << "infeasible: " << d << "\n";
    if (solutions.empty()) throw InfeasibleError("no (batch, context) pair has a feasible configuration");

    artifact::TuningArtifact a;
    a.dims = model.dims();
    a.elem_bytes = args.elem_bytes;
    a.disk = args.disk;
    a.tuner = tc;
    a.workload = args.workload;
    a.lookup = std::move(lookup);
    a.solutions = std::move(solutions);
    artifact::save(a, args.out);
    std::cout << "wrote " << args.out << " (" << a.solutions.size() << " solutions)\n";
    return kExitOk;
}

// ---- run ----

struct RunArgs {
    refmodel::ModelDims dims;
    refmodel::WorkloadSpec workload;
    std::string config;
    std::string offload_path;
    std::string backend = "simulated";
    std::string disk;  // empty: the artifact's disk
    std::size_t batch = 1;
    bool no_reuse = false;
    bool no_rolling = false;
    bool serial = false;
    bool oracle_recall = false;
    std::string stats_path;
    std::string selection_path;
};

int cmd_run(RunArgs args) {
    const auto a = artifact::load(args.config);
    artifact::check_compatible(a, args.dims);
    const refmodel::ToyModel model(args.dims);
    const auto& sol = tuner::query_solution(a.solutions, args.batch, args.workload.context_len,
                                            a.tuner.normalize_distance);
    const auto proj = a.lookup.projections.find(sol.sigma);
    if (proj == a.lookup.projections.end()) throw MismatchError("artifact has no projection for the chosen sigma");

    runtime::RuntimeConfig cfg;
    cfg.group_size = sol.g;
    cfg.sigma = sol.sigma;
    cfg.m = sol.m;
    cfg.mg_const = a.tuner.mg_const;
    cfg.reuse_capacity_bytes = sol.c;
    cfg.reuse = !args.no_reuse;
    cfg.rolling_buffer = !args.no_rolling;
    cfg.overlap = !args.serial;
    cfg.oracle_recall = args.oracle_recall;
    cfg.elem_bytes = a.elem_bytes;
    cfg.disk = kvstore::DiskModel::resolve(args.disk.empty() ? a.disk : args.disk);
    if (args.backend == "file") {
        cfg.backend = runtime::Backend::file;
        cfg.timing = runtime::TimingMode::measured;
        if (args.offload_path.empty())
            if (const char* env = std::getenv("KVO_OFFLOAD_PATH")) args.offload_path = env;
        if (args.offload_path.empty()) throw ParameterError("file backend needs --offload-path or KVO_OFFLOAD_PATH");
        cfg.offload_path = args.offload_path;
    } else if (args.backend != "simulated") {
        throw ParameterError("unknown backend '" + args.backend + "'");
    }

    const auto w = refmodel::gen_workload(model, args.workload);
    runtime::Engine engine(model, cfg, proj->second);
    engine.prefill(w.prompt_k, w.prompt_v);
    for (const auto& x : w.inputs) engine.decode_step(x);

    if (!args.stats_path.empty()) {
        std::ofstream out(args.stats_path);
        if (!out) throw StorageError("cannot write " + args.stats_path);
        runtime::write_stats(out, engine.history());
    }
    if (!args.selection_path.empty()) {
        std::ofstream out(args.selection_path);
        if (!out) throw StorageError("cannot write " + args.selection_path);
        runtime::write_selection_log(out, engine.history());
    }
    const auto s = engine.summary();
    std::cout << std::setprecision(6);
    std::cout << "group_size " << cfg.group_size << "\n"
              << "sigma " << cfg.sigma << "\n"
              << "m " << cfg.m << "\n"
              << "reuse_capacity_bytes " << cfg.reuse_capacity_bytes << "\n"
              << "steps " << s.steps << "\n"
              << "tokens_per_second " << s.tokens_per_second << "\n"
              << "reuse_rate " << s.reuse_rate << "\n"
              << "io_utilization " << s.io_utilization << "\n"
              << "io_seconds " << s.io_seconds << "\n"
              << "compute_seconds " << s.compute_seconds << "\n"
              << "wall_seconds " << s.wall_seconds << "\n"
              << "bytes_read " << s.bytes_read << "\n"
              << "requests " << s.requests << "\n";
    if (s.mean_recall >= 0.0) std::cout << "mean_recall " << s.mean_recall << "\n";
    return kExitOk;
}

// ---- analyze ----

struct AnalyzeArgs {
    std::string log;
    std::string plot_dir;
};

int cmd_analyze(const AnalyzeArgs& args) {
    std::ifstream in(args.log);
    if (!in) throw NotFoundError("cannot open " + args.log);
    const auto per_layer = runtime::read_selection_log(in);

    std::ostringstream overlap, freq;
    overlap << "layer\tstep\toverlap\n";
    freq << "layer\tgroup\tcount\n";
    std::cout << "# overlap\nlayer\tstep\toverlap\n";
    std::cout << std::setprecision(6);
    for (std::size_t l = 0; l < per_layer.size(); ++l) {
        const auto& steps = per_layer[l];
        if (steps.size() >= 2) {
            const auto ratio = runtime::overlap_ratio(steps);
            for (std::size_t j = 0; j < ratio.size(); ++j) {
                std::cout << l << '\t' << j + 1 << '\t' << ratio[j] << '\n';
                overlap << l << '\t' << j + 1 << '\t' << ratio[j] << '\n';
            }
        }
    }
    std::cout << "# frequency\nlayer\tgroup\tcount\n";
    for (std::size_t l = 0; l < per_layer.size(); ++l) {
        std::map<std::size_t, std::size_t> counts;
        for (const auto& ids : per_layer[l])
            for (std::size_t id : ids) ++counts[id];
        for (const auto& [id, n] : counts) {
            std::cout << l << '\t' << id << '\t' << n << '\n';
            freq << l << '\t' << id << '\t' << n << '\n';
        }
    }
    if (!args.plot_dir.empty()) {
        std::filesystem::create_directories(args.plot_dir);
        std::ofstream(std::filesystem::path(args.plot_dir) / "overlap.tsv") << overlap.str();
        std::ofstream(std::filesystem::path(args.plot_dir) / "frequency.tsv") << freq.str();
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV cache offloading toolkit"};
    app.require_subcommand(1);

    TuneArgs tune;
    auto* t = app.add_subcommand("tune", "Build a tuning artifact");
    add_model_options(*t, tune.dims);
    add_workload_options(*t, tune.workload);
    tune.workload.steps = 64;
    t->add_option("--max-context-len", tune.max_context, "Largest context to plan for")->capture_default_str();
    t->add_option("--min-context-len", tune.min_context, "Smallest context to plan for")->capture_default_str();
    t->add_option("--max-batch-size", tune.max_batch, "Largest batch")->capture_default_str();
    t->add_option("--max-kv-mem", tune.max_kv_mib, "KV memory budget in MiB")->capture_default_str();
    t->add_option("--disk", tune.disk, "nvme, emmc, or a preset file")->capture_default_str();
    t->add_option("--alpha", tune.tc.alpha, "Fraction of I/O allowed to stay exposed")->capture_default_str();
    t->add_option("--g-max", tune.tc.g_max, "Largest group size")->capture_default_str();
    t->add_option("--sigma-max", tune.tc.sigma_max, "Largest compression ratio")->capture_default_str();
    t->add_option("--mg-const", tune.tc.mg_const, "Selected tokens per step (M·G)")->capture_default_str();
    t->add_option("--samples", tune.samples, "Workloads per reuse-rate sample")->capture_default_str();
    t->add_option("--fit-sequences", tune.fit_sequences, "Held-out sequences for projections")->capture_default_str();
    t->add_flag("--normalize-distance", tune.tc.normalize_distance, "Normalize (b, S) for nearest lookup");
    t->add_option("-o,--output", tune.out, "Artifact path")->capture_default_str();

    RunArgs run;
    auto* r = app.add_subcommand("run", "Prefill and decode a synthetic workload");
    add_model_options(*r, run.dims);
    add_workload_options(*r, run.workload);
    r->add_option("--config", run.config, "Tuning artifact")->required();
    r->add_option("--offload-path", run.offload_path, "File or directory for the file backend");
    r->add_option("--backend", run.backend, "simulated or file")->capture_default_str();
    r->add_option("--disk", run.disk, "Override the artifact's disk model");
    r->add_option("--batch", run.batch, "Batch size used to pick the solution")->capture_default_str();
    r->add_flag("--no-reuse", run.no_reuse, "Disable the reuse buffer");
    r->add_flag("--no-rolling-buffer", run.no_rolling, "Do not attend to unflushed tokens");
    r->add_flag("--serial", run.serial, "Run prefetch and compute on one thread");
    r->add_flag("--oracle-recall", run.oracle_recall, "Report recall against exact top groups");
    r->add_option("--stats", run.stats_path, "Write per-step records (JSON lines)");
    r->add_option("--selection-log", run.selection_path, "Write selected groups (JSON lines)");

    AnalyzeArgs analyze;
    auto* an = app.add_subcommand("analyze", "Overlap and frequency report for a selection log");
    an->add_option("log", analyze.log, "Selection log")->required();
    an->add_option("--plot-data", analyze.plot_dir, "Directory for overlap.tsv and frequency.tsv");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (t->parsed()) return cmd_tune(tune);
        if (r->parsed()) return cmd_run(run);
        if (an->parsed()) return cmd_analyze(analyze);
    } catch (const InfeasibleError& e) {
        std::cerr << "infeasible: " << e.what() << "\n";
        return kExitInfeasible;
    } catch (const MismatchError& e) {
        std::cerr << "mismatch: " << e.what() << "\n";
        return kExitMismatch;
    } catch (const FormatError& e) {
        std::cerr << "malformed input: " << e.what() << "\n";
        return kExitMalformed;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitError;
}
