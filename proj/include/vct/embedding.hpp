#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vct/tensor.hpp"

namespace vct {

// Conditioning matrix v of shape (num_tokens, embed_dim).
struct ConceptEmbedding {
    Tensor matrix;
    std::string label;

    ConceptEmbedding() = default;
    ConceptEmbedding(Tensor m, std::string l);

    int num_tokens() const { return static_cast<int>(matrix.dim(0)); }
    int embed_dim() const { return static_cast<int>(matrix.dim(1)); }

    // Throws ValidationError unless rank 2, at least one row, and finite.
    void validate() const;

    bool operator==(const ConceptEmbedding& other) const { return matrix == other.matrix; }
};

// Appends null rows until `num_tokens` rows; errors if already longer.
ConceptEmbedding pad_to(const ConceptEmbedding& v, int num_tokens, const std::string& label = {});

// Toy stand-in for a tokenizer plus its lookup table. Row 0 is the reserved
// null token, kept at zero.
class EmbeddingTable {
public:
    static constexpr const char* kNullToken = "<null>";

    EmbeddingTable(std::vector<std::string> vocabulary, Tensor weights);

    // Default toy vocabulary with entries ~ N(0, scale^2) from `seed`; null row zero.
    static EmbeddingTable make_toy(int embed_dim, std::uint64_t seed, double scale = 0.1);

    int vocab_size() const { return static_cast<int>(weights_.dim(0)); }
    int embed_dim() const { return static_cast<int>(weights_.dim(1)); }
    bool contains(const std::string& token) const { return index_.count(token) != 0; }
    int index_of(const std::string& token) const;
    const std::vector<std::string>& vocabulary() const { return vocabulary_; }
    const Tensor& weights() const { return weights_; }

    ConceptEmbedding embed(const std::vector<std::string>& tokens) const;
    // The null embedding repeated to `num_tokens` rows.
    ConceptEmbedding null_embedding(int num_tokens) const;

private:
    std::vector<std::string> vocabulary_;
    std::map<std::string, int> index_;
    Tensor weights_;
};

inline ConceptEmbedding embed_tokens(const EmbeddingTable& table, const std::vector<std::string>& tokens) {
    return table.embed(tokens);
}

// Built-in toy vocabulary: the null token, attribute words used by the toy
// dataset, and filler words.
const std::vector<std::string>& toy_vocabulary();

}  // namespace vct
