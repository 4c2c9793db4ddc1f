#include "kvo/artifact.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "kvo/error.hpp"

namespace kvo::artifact {

using nlohmann::json;

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int decode_char(char c) {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
}

json matrix_to_json(const numerics::Matrix& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", encode_doubles(m.data())}};
}

numerics::Matrix matrix_from_json(const json& j) {
    const auto rows = j.at("rows").get<std::size_t>();
    const auto cols = j.at("cols").get<std::size_t>();
    auto data = decode_doubles(j.at("data").get<std::string>());
    if (data.size() != rows * cols) throw FormatError("matrix block size does not match its shape");
    return numerics::Matrix(rows, cols, std::move(data));
}

json dims_to_json(const refmodel::ModelDims& d) {
    return {{"layers", d.layers},   {"model_dim", d.model_dim}, {"h_q", d.h_q},
            {"h_kv", d.h_kv},       {"head_dim", d.head_dim},   {"ffn_dim", d.ffn_dim},
            {"residual_scale", d.residual_scale}, {"seed", d.seed}};
}

refmodel::ModelDims dims_from_json(const json& j) {
    refmodel::ModelDims d;
    d.layers = j.at("layers").get<std::size_t>();
    d.model_dim = j.at("model_dim").get<std::size_t>();
    d.h_q = j.at("h_q").get<std::size_t>();
    d.h_kv = j.at("h_kv").get<std::size_t>();
    d.head_dim = j.at("head_dim").get<std::size_t>();
    d.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    d.residual_scale = j.at("residual_scale").get<double>();
    d.seed = j.at("seed").get<std::uint64_t>();
    return d;
}

json tuner_to_json(const tuner::TunerConfig& t) {
    return {{"budget_max", t.budget_max}, {"b_max", t.b_max},     {"s_min", t.s_min},
            {"s_max", t.s_max},           {"s_step", t.s_step},   {"alpha", t.alpha},
            {"delta", t.delta},           {"sigma_max", t.sigma_max}, {"g_max", t.g_max},
            {"mg_const", t.mg_const},     {"normalize_distance", t.normalize_distance}};
}

tuner::TunerConfig tuner_from_json(const json& j) {
    tuner::TunerConfig t;
    t.budget_max = j.at("budget_max").get<std::uint64_t>();
    t.b_max = j.at("b_max").get<std::size_t>();
    t.s_min = j.at("s_min").get<std::size_t>();
    t.s_max = j.at("s_max").get<std::size_t>();
    t.s_step = j.at("s_step").get<std::size_t>();
    t.alpha = j.at("alpha").get<double>();
    t.delta = j.at("delta").get<std::uint64_t>();
    t.sigma_max = j.at("sigma_max").get<double>();
    t.g_max = j.at("g_max").get<std::size_t>();
    t.mg_const = j.at("mg_const").get<std::size_t>();
    t.normalize_distance = j.at("normalize_distance").get<bool>();
    return t;
}

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 3 <= bytes.size(); i += 3) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += kAlphabet[(v >> 6) & 63];
        out += kAlphabet[v & 63];
    }
    const std::size_t rest = bytes.size() - i;
    if (rest == 1) {
        const std::uint32_t v = bytes[i] << 16;
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += "==";
    } else if (rest == 2) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += kAlphabet[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    if (text.size() % 4 != 0) throw FormatError("base64 length is not a multiple of 4");
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        const bool last = i + 4 == text.size();
        int pad = 0;
        std::uint32_t v = 0;
        for (std::size_t k = 0; k < 4; ++k) {
            const char c = text[i + k];
            int d;
            if (c == '=' && last && k >= 2) {
                ++pad;
                d = 0;
            } else {
                if (pad > 0) throw FormatError("base64 padding in the middle of a block");
                d = decode_char(c);
                if (d < 0) throw FormatError("invalid base64 character");
            }
            v = (v << 6) | static_cast<std::uint32_t>(d);
        }
        out.push_back(static_cast<std::uint8_t>(v >> 16));
        if (pad < 2) out.push_back(static_cast<std::uint8_t>(v >> 8));
        if (pad < 1) out.push_back(static_cast<std::uint8_t>(v));
    }
    return out;
}

std::string encode_doubles(std::span<const double> values) {
    std::vector<std::uint8_t> bytes(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
    return base64_encode(bytes);
}

std::vector<double> decode_doubles(const std::string& text) {
    const auto bytes = base64_decode(text);
    if (bytes.size() % 8 != 0) throw FormatError("double block length is not a multiple of 8 bytes");
    std::vector<double> out(bytes.size() / 8);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

std::string to_json(const TuningArtifact& a) {
    json j;
    j["version"] = a.version;
    j["model"] = dims_to_json(a.dims);
    j["elem_bytes"] = a.elem_bytes;
    j["disk"] = a.disk;
    j["tuner"] = tuner_to_json(a.tuner);
    json workload;
    const KeyValueConfig wl = a.workload.to_config();
    for (const auto& [key, value] : wl.entries()) workload[key] = value;
    j["workload"] = workload;

    json reuse = json::array();
    for (const auto& [g, table] : a.lookup.reuse_rate) {
        json caps = json::array(), rates = json::array();
        for (const auto& [c, r] : table) {
            caps.push_back(c);
            rates.push_back(r);
        }
        reuse.push_back({{"group_size", g}, {"capacity", caps}, {"rate", rates}});
    }
    j["reuse_rate"] = reuse;

    json projections = json::array();
    for (const auto& [sigma, layers] : a.lookup.projections) {
        json per_layer = json::array();
        for (const auto& p : layers) per_layer.push_back(matrix_to_json(p.a));
        projections.push_back({{"sigma", sigma}, {"layers", per_layer}});
    }
    j["projections"] = projections;

    json solutions = json::array();
    for (const auto& [key, s] : a.solutions)
        solutions.push_back({{"b", key.first}, {"S", key.second}, {"G", s.g}, {"sigma", s.sigma}, {"M", s.m},
                             {"C", s.c}, {"t_io", s.t_io}, {"t_model", s.t_model}});
    j["solutions"] = solutions;
    return j.dump(2) + "\n";
}

TuningArtifact from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        TuningArtifact a;
        a.version = j.at("version").get<int>();
        if (a.version != kVersion) throw FormatError("unsupported artifact version " + std::to_string(a.version));
        a.dims = dims_from_json(j.at("model"));
        a.elem_bytes = j.at("elem_bytes").get<std::uint32_t>();
        a.disk = j.at("disk").get<std::string>();
        a.tuner = tuner_from_json(j.at("tuner"));
        KeyValueConfig wl;
        for (const auto& [key, value] : j.at("workload").items()) wl.add(key, value.get<std::string>());
        a.workload = refmodel::WorkloadSpec::from_config(wl);

        for (const auto& r : j.at("reuse_rate")) {
            const auto caps = r.at("capacity").get<std::vector<std::uint64_t>>();
            const auto rates = r.at("rate").get<std::vector<double>>();
            if (caps.size() != rates.size()) throw FormatError("reuse table columns differ in length");
            auto& table = a.lookup.reuse_rate[r.at("group_size").get<std::size_t>()];
            for (std::size_t i = 0; i < caps.size(); ++i) table[caps[i]] = rates[i];
        }
        for (const auto& p : j.at("projections")) {
            const double sigma = p.at("sigma").get<double>();
            auto& layers = a.lookup.projections[sigma];
            for (const auto& m : p.at("layers")) layers.push_back({matrix_from_json(m), sigma});
        }
        for (const auto& s : j.at("solutions")) {
            tuner::Solution sol;
            sol.g = s.at("G").get<std::size_t>();
            sol.sigma = s.at("sigma").get<double>();
            sol.m = s.at("M").get<std::size_t>();
            sol.c = s.at("C").get<std::uint64_t>();
            sol.t_io = s.at("t_io").get<double>();
            sol.t_model = s.at("t_model").get<double>();
            sol.feasible = true;
            a.solutions[{s.at("b").get<std::size_t>(), s.at("S").get<std::size_t>()}] = sol;
        }
        a.lookup.validate();
        return a;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed artifact: ") + e.what());
    } catch (const ParameterError& e) {
        throw FormatError(std::string("invalid artifact: ") + e.what());
    }
}

void save(const TuningArtifact& a, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot write " + path.string());
    out << to_json(a);
    if (!out) throw StorageError("write failed for " + path.string());
}

TuningArtifact load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_json(buf.str());
}

void check_compatible(const TuningArtifact& a, const refmodel::ModelDims& dims) {
    if (!(a.dims == dims)) throw MismatchError("artifact was tuned for a different model");
    for (const auto& [sigma, layers] : a.lookup.projections) {
        if (layers.size() != dims.layers) throw MismatchError("artifact projections do not cover every layer");
        for (const auto& p : layers)
            if (p.width() != dims.kv_width()) throw MismatchError("artifact projection width differs from h_kv·d");
    }
}

}  // namespace kvo::artifact
