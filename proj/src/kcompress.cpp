#include "kvo/kcompress.hpp"

#include <cmath>
#include <string>

#include "kvo/error.hpp"

namespace kvo::kcompress {

std::size_t rank_for_sigma(std::size_t width, double sigma) {
    if (width == 0) throw ParameterError("projection width must be positive");
    if (!std::isfinite(sigma) || sigma < 1.0) throw ParameterError("compression ratio must be finite and >= 1");
    const double r = std::round(static_cast<double>(width) / sigma);
    return r < 1.0 ? 1 : static_cast<std::size_t>(r);
}

namespace {

ProjectionMatrix slice(const numerics::SvdResult& svd, std::size_t width, double sigma, std::size_t samples) {
    const std::size_t r = rank_for_sigma(width, sigma);
    if (r > samples)
        throw ParameterError("rank " + std::to_string(r) + " needs at least that many K samples, got " +
                             std::to_string(samples));
    Matrix a(width, r);
    for (std::size_t i = 0; i < width; ++i)
        for (std::size_t j = 0; j < r; ++j) a(i, j) = svd.right_vectors(i, j);
    return {std::move(a), sigma};
}

}  // namespace

ProjectionMatrix fit_projection(const Matrix& k_samples, double sigma, const numerics::SvdOptions& options) {
    const std::size_t r = rank_for_sigma(k_samples.cols(), sigma);
    if (r > k_samples.rows()) throw ParameterError("not enough K samples for requested rank");
    return {numerics::svd_top_r(k_samples, r, options), sigma};
}

std::vector<ProjectionMatrix> fit_projections(const Matrix& k_samples, std::span<const double> sigmas,
                                              const numerics::SvdOptions& options) {
    for (double s : sigmas) rank_for_sigma(k_samples.cols(), s);
    const auto svd = numerics::svd_right(k_samples, options);
    std::vector<ProjectionMatrix> out;
    out.reserve(sigmas.size());
    for (double s : sigmas) out.push_back(slice(svd, k_samples.cols(), s, k_samples.rows()));
    return out;
}

CompressedKCache::CompressedKCache(std::vector<ProjectionMatrix> per_layer) {
    for (auto& p : per_layer) {
        if (p.rank() == 0 || p.width() == 0) throw ParameterError("empty projection");
        Matrix empty(0, p.rank());
        layers_.push_back({std::move(p), std::move(empty)});
    }
}

const ProjectionMatrix& CompressedKCache::projection(std::size_t layer) const {
    if (layer >= layers_.size()) throw ParameterError("layer out of range");
    return layers_[layer].proj;
}

const Matrix& CompressedKCache::k_lr(std::size_t layer) const {
    if (layer >= layers_.size()) throw ParameterError("layer out of range");
    return layers_[layer].k_lr;
}

void CompressedKCache::compress_append(std::size_t layer, const Matrix& k_rows) {
    if (layer >= layers_.size()) throw ParameterError("layer out of range");
    Layer& l = layers_[layer];
    if (k_rows.rows() == 0) return;
    if (k_rows.cols() != l.proj.width())
        throw ParameterError("K rows have width " + std::to_string(k_rows.cols()) + ", projection expects " +
                             std::to_string(l.proj.width()));
    l.k_lr.append_rows(numerics::matmul(k_rows, l.proj.a));
}

std::uint64_t CompressedKCache::bytes(std::uint32_t elem_bytes) const {
    std::uint64_t total = 0;
    for (const Layer& l : layers_) total += std::uint64_t{l.k_lr.rows()} * l.proj.rank() * elem_bytes;
    return total;
}

}  // namespace kvo::kcompress
