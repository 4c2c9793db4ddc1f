#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kvo/refmodel.hpp"
#include "kvo/tuner.hpp"

namespace kvo::artifact {

inline constexpr int kVersion = 1;

// Everything `kvo run` needs from a tuning session. Stored as JSON with sorted
// keys; matrices are base64 blocks of little-endian doubles.
struct TuningArtifact {
    int version = kVersion;
    refmodel::ModelDims dims;
    std::uint32_t elem_bytes = 2;
    std::string disk;  // preset name or path used while profiling
    tuner::TunerConfig tuner;
    refmodel::WorkloadSpec workload;
    tuner::LookupTables lookup;
    tuner::SolutionTable solutions;
};

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);  // FormatError on bad input

std::string encode_doubles(std::span<const double> values);
std::vector<double> decode_doubles(const std::string& text);

std::string to_json(const TuningArtifact& a);
TuningArtifact from_json(const std::string& text);  // FormatError on malformed input

void save(const TuningArtifact& a, const std::filesystem::path& path);
TuningArtifact load(const std::filesystem::path& path);

// MismatchError unless the artifact was produced for these dimensions.
void check_compatible(const TuningArtifact& a, const refmodel::ModelDims& dims);

}  // namespace kvo::artifact
