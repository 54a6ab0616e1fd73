#include "vct/codec.hpp"

#include <cmath>

#include <Eigen/Dense>

namespace vct {

CodecKind parse_codec_kind(std::string_view name) {
    if (name == "identity") return CodecKind::identity;
    if (name == "scaled_identity") return CodecKind::scaled_identity;
    if (name == "tiny_autoencoder") return CodecKind::tiny_autoencoder;
    throw ValidationError("unknown codec '" + std::string(name) +
                          "' (expected identity|scaled_identity|tiny_autoencoder)");
}

std::string_view to_string(CodecKind kind) {
    switch (kind) {
        case CodecKind::identity: return "identity";
        case CodecKind::scaled_identity: return "scaled_identity";
        case CodecKind::tiny_autoencoder: return "tiny_autoencoder";
    }
    return "identity";
}

ScaledIdentityCodec::ScaledIdentityCodec(double scale) : scale_(scale) {
    if (!std::isfinite(scale) || scale <= 0.0) throw ValidationError("codec scale must be finite and > 0");
}

namespace {

void check_image(const Tensor& image, int patch) {
    if (image.rank() != 3) throw ValidationError("codec expects a (C, H, W) image, got " + shape_str(image.shape()));
    if (image.dim(1) % patch != 0 || image.dim(2) % patch != 0) {
        throw ValidationError("image size " + shape_str(image.shape()) + " is not divisible by patch " +
                              std::to_string(patch));
    }
}

// Patch vectors as rows: (num_patches, C * p * p), channel-major inside a patch.
Eigen::MatrixXd patches_of(const Tensor& image, int p) {
    const auto C = image.dim(0), H = image.dim(1), W = image.dim(2);
    const auto ph = H / p, pw = W / p;
    Eigen::MatrixXd out(ph * pw, C * p * p);
    for (std::int64_t i = 0; i < ph; ++i) {
        for (std::int64_t j = 0; j < pw; ++j) {
            std::int64_t k = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                for (int dy = 0; dy < p; ++dy) {
                    for (int dx = 0; dx < p; ++dx) {
                        out(i * pw + j, k++) = image[static_cast<std::size_t>((c * H + i * p + dy) * W + j * p + dx)];
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace

PatchPcaCodec::PatchPcaCodec(int patch, Tensor mean, Tensor basis)
    : patch_(patch), mean_(std::move(mean)), basis_(std::move(basis)) {
    if (patch_ < 1) throw ValidationError("codec patch size must be >= 1");
    if (mean_.rank() != 1 || basis_.rank() != 2 || basis_.dim(1) != mean_.dim(0) || basis_.dim(0) < 1 ||
        basis_.dim(0) > basis_.dim(1) || mean_.dim(0) % (patch_ * patch_) != 0) {
        throw ValidationError("inconsistent patch codec arrays: mean " + shape_str(mean_.shape()) + ", basis " +
                              shape_str(basis_.shape()));
    }
    if (!mean_.all_finite() || !basis_.all_finite()) throw ValidationError("patch codec arrays are not finite");
}

PatchPcaCodec PatchPcaCodec::fit(const std::vector<Tensor>& images, int patch, int components) {
    if (images.empty()) throw ValidationError("codec fit needs at least one image");
    check_image(images.front(), patch);
    const auto dim = images.front().dim(0) * patch * patch;
    if (components < 1 || components > dim) {
        throw ValidationError("codec components must lie in [1, " + std::to_string(dim) + "]");
    }
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
    Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(dim, dim);
    std::int64_t n = 0;
    for (const auto& img : images) {
        if (img.shape() != images.front().shape()) throw ValidationError("codec fit images differ in shape");
        const Eigen::MatrixXd P = patches_of(img, patch);
        mean += P.colwise().sum().transpose();
        scatter += P.transpose() * P;
        n += P.rows();
    }
    mean /= static_cast<double>(n);
    const Eigen::MatrixXd cov = scatter / static_cast<double>(n) - mean * mean.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    Tensor m({dim});
    Tensor basis({components, dim});
    for (std::int64_t i = 0; i < dim; ++i) m[static_cast<std::size_t>(i)] = mean(i);
    // eigenvalues ascend; take the largest
    for (int r = 0; r < components; ++r) {
        Eigen::VectorXd u = eig.eigenvectors().col(dim - 1 - r);
        // deterministic sign: largest-magnitude entry positive
        Eigen::Index arg = 0;
        u.cwiseAbs().maxCoeff(&arg);
        if (u(arg) < 0) u = -u;
        for (std::int64_t k = 0; k < dim; ++k) basis[static_cast<std::size_t>(r * dim + k)] = u(k);
    }
    round_to_float(m);
    round_to_float(basis);
    return PatchPcaCodec(patch, std::move(m), std::move(basis));
}

Shape PatchPcaCodec::latent_shape(const Shape& image_shape) const {
    if (image_shape.size() != 3 || image_shape[0] * patch_ * patch_ != mean_.dim(0) || image_shape[1] % patch_ ||
        image_shape[2] % patch_) {
        throw ValidationError("image shape " + shape_str(image_shape) + " does not fit the patch codec");
    }
    return {components(), image_shape[1] / patch_, image_shape[2] / patch_};
}

Tensor PatchPcaCodec::encode(const Tensor& image) const {
    const Shape ls = latent_shape(image.shape());
    const Eigen::MatrixXd P = patches_of(image, patch_);
    const auto dim = mean_.dim(0);
    Eigen::Map<const Eigen::VectorXd> mean(mean_.data(), dim);
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> B(basis_.data(),
                                                                                                basis_.dim(0), dim);
    const Eigen::MatrixXd coeff = (P.rowwise() - mean.transpose()) * B.transpose();  // (patches, k)
    Tensor out(ls);
    const auto K = ls[0], np = ls[1] * ls[2];
    for (std::int64_t k = 0; k < K; ++k) {
        for (std::int64_t q = 0; q < np; ++q) out[static_cast<std::size_t>(k * np + q)] = coeff(q, k);
    }
    return out;
}

Tensor PatchPcaCodec::decode(const Tensor& latent) const {
    if (latent.rank() != 3 || latent.dim(0) != components()) {
        throw ValidationError("latent " + shape_str(latent.shape()) + " does not fit the patch codec");
    }
    const auto dim = mean_.dim(0);
    const auto C = dim / (patch_ * patch_);
    const auto ph = latent.dim(1), pw = latent.dim(2), np = ph * pw;
    Eigen::MatrixXd coeff(np, components());
    for (std::int64_t k = 0; k < components(); ++k) {
        for (std::int64_t q = 0; q < np; ++q) coeff(q, k) = latent[static_cast<std::size_t>(k * np + q)];
    }
    Eigen::Map<const Eigen::VectorXd> mean(mean_.data(), dim);
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> B(basis_.data(),
                                                                                                basis_.dim(0), dim);
    const Eigen::MatrixXd P = (coeff * B).rowwise() + mean.transpose();
    const auto H = ph * patch_, W = pw * patch_;
    Tensor out({C, H, W});
    for (std::int64_t i = 0; i < ph; ++i) {
        for (std::int64_t j = 0; j < pw; ++j) {
            std::int64_t k = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                for (int dy = 0; dy < patch_; ++dy) {
                    for (int dx = 0; dx < patch_; ++dx) {
                        out[static_cast<std::size_t>((c * H + i * patch_ + dy) * W + j * patch_ + dx)] =
                            P(i * pw + j, k++);
                    }
                }
            }
        }
    }
    return out;
}

nlohmann::json PatchPcaCodec::describe() const {
    return {{"kind", "tiny_autoencoder"}, {"patch", patch_}, {"components", components()}};
}

ParameterSet PatchPcaCodec::arrays() const { return {{"codec.mean", mean_}, {"codec.basis", basis_}}; }

std::shared_ptr<LatentCodec> make_codec(const nlohmann::json& description, const ParameterSet& arrays) {
    try {
        switch (parse_codec_kind(description.at("kind").get<std::string>())) {
            case CodecKind::identity: return std::make_shared<IdentityCodec>();
            case CodecKind::scaled_identity:
                return std::make_shared<ScaledIdentityCodec>(description.at("scale").get<double>());
            case CodecKind::tiny_autoencoder:
                return std::make_shared<PatchPcaCodec>(description.at("patch").get<int>(),
                                                       find_tensor(arrays, "codec.mean"),
                                                       find_tensor(arrays, "codec.basis"));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed codec description: ") + e.what());
    }
    throw ValidationError("unreachable codec kind");
}

}  // namespace vct
