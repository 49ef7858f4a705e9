#ifndef LATENTFORGE_CORPUS_HPP
#define LATENTFORGE_CORPUS_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "latentforge/tensor.hpp"

namespace lf {

// Five generative factors realized through one fixed template:
//   subject [do not] verb object to modifier
// Every combination is grammatical and parses back unambiguously.
struct FactorSpec {
    struct Factor {
        std::string name;
        std::vector<std::string> values;
    };
    // Fixed order: subject_class, verb_class, object_class, negation, modifier.
    std::vector<Factor> factors;

    static FactorSpec defaults();
    std::size_t total_combinations() const;
    std::vector<std::string> vocabulary() const;  // all surface words, incl. do/not/to
    void validate() const;
};

// Token-aligned ids carry BOS/EOS; roles align with the text's words only.
struct FactorSentence {
    std::string text;
    std::vector<std::size_t> factors;  // value index per factor, spec order
    std::vector<std::string> roles;    // per word: ARG0, V, ARG1, MOD, NEG, O
    std::vector<int> tokens;           // [BOS, word ids..., EOS]
};

// Closed whitespace vocabulary; ids 0..3 are PAD/BOS/EOS/UNK, then the
// sorted unique words.
class Tokenizer {
public:
    static constexpr int pad_id = 0;
    static constexpr int bos_id = 1;
    static constexpr int eos_id = 2;
    static constexpr int unk_id = 3;

    explicit Tokenizer(const std::vector<std::string>& words);
    static Tokenizer for_spec(const FactorSpec& spec);

    std::vector<int> encode(const std::string& text) const;  // BOS ... EOS
    std::string decode(const std::vector<int>& ids) const;   // specials skipped, UNK -> "<unk>"

    std::size_t size() const { return id_to_word_.size(); }
    const std::vector<std::string>& vocab() const { return id_to_word_; }

private:
    std::vector<std::string> id_to_word_;
};

const std::vector<std::string>& role_classes();  // ARG0, V, ARG1, MOD, NEG, O
std::size_t role_index(const std::string& role);

std::size_t flatten_factors(const FactorSpec& spec, const std::vector<std::size_t>& tuple);
std::vector<std::size_t> unflatten_factors(const FactorSpec& spec, std::size_t index);

// (text, word roles) for one factor tuple.
std::pair<std::string, std::vector<std::string>> render_sentence(
    const FactorSpec& spec, const std::vector<std::size_t>& tuple);

// Inverse of render_sentence; nullopt when text is not in the grammar. This
// doubles as the well-formedness oracle.
std::optional<std::vector<std::size_t>> parse_sentence(const FactorSpec& spec,
                                                       const std::string& text);

// n <= total: sampling without replacement, greedily balanced so factor
// marginals stay near uniform; n == total is the exhaustive grid. n > total
// samples with replacement. Deterministic per seed.
std::vector<FactorSentence> generate_corpus(const FactorSpec& spec, std::size_t n,
                                            std::uint64_t seed);

// Longest token sequence (BOS/EOS included) the spec can produce.
std::size_t max_token_length(const FactorSpec& spec);

// Deterministic stratified split; every factor value stays represented in
// the train half.
std::pair<std::vector<FactorSentence>, std::vector<FactorSentence>> split_corpus(
    const std::vector<FactorSentence>& corpus, double train_frac, std::uint64_t seed);

// One-hot role rows aligned with sentence.tokens; BOS/EOS rows are zero.
Tensor annotation_matrix(const FactorSentence& sentence);

void write_corpus_jsonl(const std::string& path, const std::vector<FactorSentence>& corpus,
                        const FactorSpec& spec);
std::vector<FactorSentence> read_corpus_jsonl(const std::string& path, const FactorSpec& spec);

}  // namespace lf

#endif
