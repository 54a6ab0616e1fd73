#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "vct/tiny_denoiser.hpp"

namespace vct {

enum class CodecKind { identity, scaled_identity, tiny_autoencoder };

CodecKind parse_codec_kind(std::string_view name);
std::string_view to_string(CodecKind kind);

// Maps (3, H, W) images in [-1, 1] to diffusion latents and back.
class LatentCodec {
public:
    virtual ~LatentCodec() = default;
    virtual CodecKind kind() const = 0;
    virtual Shape latent_shape(const Shape& image_shape) const = 0;
    virtual Tensor encode(const Tensor& image) const = 0;
    virtual Tensor decode(const Tensor& latent) const = 0;
    // Metadata plus arrays, enough to rebuild the codec.
    virtual nlohmann::json describe() const = 0;
    virtual ParameterSet arrays() const { return {}; }
};

class IdentityCodec final : public LatentCodec {
public:
    CodecKind kind() const override { return CodecKind::identity; }
    Shape latent_shape(const Shape& image_shape) const override { return image_shape; }
    Tensor encode(const Tensor& image) const override { return image; }
    Tensor decode(const Tensor& latent) const override { return latent; }
    nlohmann::json describe() const override { return {{"kind", "identity"}}; }
};

class ScaledIdentityCodec final : public LatentCodec {
public:
    explicit ScaledIdentityCodec(double scale);
    CodecKind kind() const override { return CodecKind::scaled_identity; }
    Shape latent_shape(const Shape& image_shape) const override { return image_shape; }
    Tensor encode(const Tensor& image) const override { return scale_ * image; }
    Tensor decode(const Tensor& latent) const override { return (1.0 / scale_) * latent; }
    nlohmann::json describe() const override { return {{"kind", "scaled_identity"}, {"scale", scale_}}; }
    double scale() const { return scale_; }

private:
    double scale_;
};

// Linear autoencoder over non-overlapping p x p patches: each patch is
// projected onto `components` principal directions fitted on a dataset.
// Latent shape is (components, H / p, W / p).
class PatchPcaCodec final : public LatentCodec {
public:
    PatchPcaCodec(int patch, Tensor mean, Tensor basis);
    static PatchPcaCodec fit(const std::vector<Tensor>& images, int patch, int components);

    CodecKind kind() const override { return CodecKind::tiny_autoencoder; }
    Shape latent_shape(const Shape& image_shape) const override;
    Tensor encode(const Tensor& image) const override;
    Tensor decode(const Tensor& latent) const override;
    nlohmann::json describe() const override;
    ParameterSet arrays() const override;

    int patch() const { return patch_; }
    int components() const { return static_cast<int>(basis_.dim(0)); }

private:
    int patch_;
    Tensor mean_;   // (C * p * p)
    Tensor basis_;  // (components, C * p * p), orthonormal rows
};

// Rebuilds a codec from describe() + arrays().
std::shared_ptr<LatentCodec> make_codec(const nlohmann::json& description, const ParameterSet& arrays);

}  // namespace vct
