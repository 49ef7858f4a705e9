#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "latentforge/bottleneck.hpp"
#include "latentforge/corpus.hpp"

namespace lf {

// One decoded probe sample. `key` names the group within a seed sentence:
// the traversed dimension, the interpolation alpha, or an expression label.
struct ProbeRow {
    std::string seed;
    std::string key;
    double distance = 0.0;
    std::string generated;
};

// Rows are ordered by (seed, key group, distance); distances are monotone
// non-decreasing within a group.
struct ProbeReport {
    std::vector<ProbeRow> rows;
};

// One term of a latent-space expression; sign must be +1 or -1.
struct ArithmeticTerm {
    int sign = 1;
    FactorSentence sentence;
};

// Deterministic posterior for a sentence: z = mu, no noise. Annotations are
// attached automatically when the model's annotation path is configured.
LatentCode encode_deterministic(const LmVae& model, const FactorSentence& sentence);

// Greedy decode of z to text, capped at the decoder's max_len.
std::string decode_text(const LmVae& model, const Tokenizer& tok, const Tensor& z);

// For each sentence and each dim d, decodes z with z_d = mu_d + delta for
// sample_size deltas equally spaced over [-3*sigma_d, +3*sigma_d]; the grid
// is symmetric, so odd sample sizes hit delta = 0 exactly. distance = delta.
ProbeReport traverse(const LmVae& model, const Tokenizer& tok,
                     const std::vector<FactorSentence>& sentences,
                     const std::vector<std::size_t>& dims, std::size_t sample_size);

// Decodes (1-alpha)*z_src + alpha*z_tgt at `steps` alphas equally spaced over
// [0, 1]; distance = ||z_src - z_tgt|| on every row of the pair.
ProbeReport interpolate(const LmVae& model, const Tokenizer& tok, const FactorSentence& source,
                        const FactorSentence& target, std::size_t steps);

// Decodes the signed sum of the terms' deterministic latents.
std::string arithmetic(const LmVae& model, const Tokenizer& tok,
                       const std::vector<ArithmeticTerm>& terms);

// CSV columns: seed,key,distance,generated. JSONL: one object per row.
void write_probe_csv(const ProbeReport& report, const std::string& path);
void write_probe_jsonl(const ProbeReport& report, const std::string& path);

}  // namespace lf
