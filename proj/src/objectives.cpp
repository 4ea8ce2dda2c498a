#include "promise/objectives.hpp"

#include <cstring>
#include <stdexcept>

namespace promise {

namespace F = torch::nn::functional;

void LossWeights::validate() const {
    if (structural < 0 || boundary < 0) throw std::invalid_argument("loss weights must be >= 0");
}

void BoundarySpec::validate() const {
    if (kernel_size < 3 || kernel_size % 2 == 0) throw std::invalid_argument("boundary kernel must be odd and >= 3");
}

torch::Tensor boundary_map(const torch::Tensor &m, const BoundarySpec &spec) {
    spec.validate();
    if (m.dim() != 3 && m.dim() != 5) throw std::invalid_argument("boundary_map: expected a 3D or 5D tensor");
    auto x = m.dim() == 3 ? m.unsqueeze(0).unsqueeze(0) : m;
    const auto r = spec.kernel_size / 2;
    auto padded = F::pad(x, F::PadFuncOptions({r, r, r, r, r, r}).mode(torch::kReplicate));
    const double n = static_cast<double>(spec.kernel_size * spec.kernel_size * spec.kernel_size);
    // |n*M - window sum| / n; exact under M -> 1 - M for binary masks
    auto sum = F::avg_pool3d(padded, F::AvgPool3dFuncOptions(spec.kernel_size).stride(1).divisor_override(1));
    auto b = (x * n - sum).abs() / n;
    return m.dim() == 3 ? b.squeeze(0).squeeze(0) : b;
}

FloatArray3 boundary_map(const FloatArray3 &m, const BoundarySpec &spec) {
    const auto &s = m.shape();
    auto t = torch::from_blob(const_cast<float *>(m.data()), {s.d, s.h, s.w}, torch::kFloat32);
    auto b = boundary_map(t, spec).contiguous();
    FloatArray3 out(s);
    std::memcpy(out.data(), b.data_ptr<float>(), out.size() * sizeof(float));
    return out;
}

torch::Tensor soft_dice_loss(const torch::Tensor &logits, const torch::Tensor &target) {
    auto p = torch::sigmoid(logits);
    auto inter = (p * target).sum();
    return 1.0 - (2.0 * inter + kDiceSmooth) / (p.sum() + target.sum() + kDiceSmooth);
}

torch::Tensor bce_loss(const torch::Tensor &logits, const torch::Tensor &target) {
    return F::binary_cross_entropy_with_logits(logits, target);
}

torch::Tensor structural_loss(const torch::Tensor &logits, const torch::Tensor &target) {
    if (logits.sizes() != target.sizes()) throw std::invalid_argument("structural_loss: shape mismatch");
    return soft_dice_loss(logits, target) + bce_loss(logits, target);
}

LossTerms total_loss(const torch::Tensor &logits, const torch::Tensor &target, const LossWeights &weights,
                     const BoundarySpec &spec, bool use_boundary) {
    weights.validate();
    LossTerms t;
    t.structural = structural_loss(logits, target);
    t.boundary = F::mse_loss(boundary_map(torch::sigmoid(logits), spec), boundary_map(target, spec));
    t.total = weights.structural * t.structural;
    if (use_boundary && weights.boundary != 0.0) t.total = t.total + weights.boundary * t.boundary;
    if (!torch::isfinite(t.total).item<bool>())
        throw std::runtime_error("loss is not finite (structural=" + std::to_string(t.structural.item<double>()) +
                                 ", boundary=" + std::to_string(t.boundary.item<double>()) + ")");
    return t;
}

} // namespace promise
