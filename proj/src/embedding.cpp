#include "vct/embedding.hpp"

#include <random>

namespace vct {

ConceptEmbedding::ConceptEmbedding(Tensor m, std::string l) : matrix(std::move(m)), label(std::move(l)) { validate(); }

void ConceptEmbedding::validate() const {
    if (matrix.rank() != 2 || matrix.dim(0) < 1 || matrix.dim(1) < 1) {
        throw ValidationError("concept embedding must be (num_tokens >= 1, embed_dim), got " +
                              shape_str(matrix.shape()));
    }
    if (!matrix.all_finite()) throw NumericalError("concept embedding '" + label + "' has non-finite entries");
}

ConceptEmbedding pad_to(const ConceptEmbedding& v, int num_tokens, const std::string& label) {
    if (v.num_tokens() > num_tokens) {
        throw ValidationError("embedding has " + std::to_string(v.num_tokens()) + " tokens, context holds " +
                              std::to_string(num_tokens));
    }
    Tensor m(Shape{num_tokens, v.embed_dim()});
    std::copy(v.matrix.data(), v.matrix.data() + v.matrix.size(), m.data());
    return ConceptEmbedding(std::move(m), label.empty() ? v.label : label);
}

const std::vector<std::string>& toy_vocabulary() {
    static const std::vector<std::string> vocab = {
        EmbeddingTable::kNullToken,
        // colors
        "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple", "white",
        // shapes
        "square", "circle", "triangle", "diamond",
        // textures
        "solid", "striped", "checkered", "dotted",
        // filler
        "a", "an", "the", "photo", "of", "with", "on", "in", "and", "background", "small", "large", "tiny",
        "big", "left", "right", "top", "bottom", "center", "bright", "dark", "pattern", "object", "image",
        "picture", "toy", "shape", "texture", "color", "painting", "sketch", "style", "art", "drawing",
        "render", "scene", "simple", "plain", "flat", "sharp", "soft", "bold", "light", "shadow", "edge",
        "line", "dot",
    };
    return vocab;
}

EmbeddingTable::EmbeddingTable(std::vector<std::string> vocabulary, Tensor weights)
    : vocabulary_(std::move(vocabulary)), weights_(std::move(weights)) {
    if (weights_.rank() != 2 || weights_.dim(0) != static_cast<std::int64_t>(vocabulary_.size())) {
        throw ValidationError("embedding table weights " + shape_str(weights_.shape()) + " do not match vocabulary of " +
                              std::to_string(vocabulary_.size()));
    }
    for (std::size_t i = 0; i < vocabulary_.size(); ++i) {
        if (!index_.emplace(vocabulary_[i], static_cast<int>(i)).second) {
            throw ValidationError("duplicate token '" + vocabulary_[i] + "'");
        }
    }
    if (!contains(kNullToken)) throw ValidationError("embedding table lacks the reserved null token");
}

EmbeddingTable EmbeddingTable::make_toy(int embed_dim, std::uint64_t seed, double scale) {
    const auto& vocab = toy_vocabulary();
    Tensor w(Shape{static_cast<std::int64_t>(vocab.size()), embed_dim});
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, scale);
    for (std::size_t r = 1; r < vocab.size(); ++r) {
        for (int c = 0; c < embed_dim; ++c) w[r * static_cast<std::size_t>(embed_dim) + c] = normal(rng);
    }
    round_to_float(w);
    return EmbeddingTable(vocab, std::move(w));
}

int EmbeddingTable::index_of(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw ValidationError("unknown token '" + token + "'");
    return it->second;
}

ConceptEmbedding EmbeddingTable::embed(const std::vector<std::string>& tokens) const {
    if (tokens.empty()) throw ValidationError("embed: empty token list");
    const int d = embed_dim();
    Tensor m(Shape{static_cast<std::int64_t>(tokens.size()), d});
    std::string label;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const int row = index_of(tokens[i]);
        std::copy_n(weights_.data() + static_cast<std::ptrdiff_t>(row) * d, d, m.data() + i * d);
        if (i) label += ' ';
        label += tokens[i];
    }
    return ConceptEmbedding(std::move(m), label);
}

ConceptEmbedding EmbeddingTable::null_embedding(int num_tokens) const {
    return embed(std::vector<std::string>(static_cast<std::size_t>(num_tokens), kNullToken));
}

}  // namespace vct
