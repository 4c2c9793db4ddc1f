#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "kvo/numerics.hpp"

namespace kvo::kcompress {

using numerics::Matrix;

// Joint-head projection A: (h_kv·d) × r with orthonormal columns.
struct ProjectionMatrix {
    Matrix a;
    double sigma = 1.0;

    std::size_t width() const { return a.rows(); }
    std::size_t rank() const { return a.cols(); }
};

// r = round(width / sigma), at least 1. ParameterError for sigma < 1 or
// non-finite sigma, or width == 0.
std::size_t rank_for_sigma(std::size_t width, double sigma);

// Top-r right singular vectors of the flattened K samples (N × h_kv·d).
ProjectionMatrix fit_projection(const Matrix& k_samples, double sigma, const numerics::SvdOptions& options = {});

// Same as fit_projection for each sigma, sharing one decomposition.
std::vector<ProjectionMatrix> fit_projections(const Matrix& k_samples, std::span<const double> sigmas,
                                              const numerics::SvdOptions& options = {});

// Per-layer low-rank K cache: k_lr(l) = Flatten(K_l)·A_l over every token
// whose K has been compressed so far.
class CompressedKCache {
public:
    CompressedKCache() = default;
    explicit CompressedKCache(std::vector<ProjectionMatrix> per_layer);

    std::size_t num_layers() const { return layers_.size(); }
    const ProjectionMatrix& projection(std::size_t layer) const;
    const Matrix& k_lr(std::size_t layer) const;
    std::size_t n_tokens(std::size_t layer) const { return k_lr(layer).rows(); }

    // Appends k_rows·A for m rows of width h_kv·d.
    void compress_append(std::size_t layer, const Matrix& k_rows);

    // Σ_layers N_l × r_l × elem_bytes.
    std::uint64_t bytes(std::uint32_t elem_bytes) const;

private:
    struct Layer {
        ProjectionMatrix proj;
        Matrix k_lr;
    };
    std::vector<Layer> layers_;
};

}  // namespace kvo::kcompress
