#include "latentforge/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace lf {

namespace {

using nlohmann::json;

enum FactorIdx : std::size_t { kSubject = 0, kVerb, kObject, kNegation, kModifier };

std::vector<std::string> split_words(const std::string& text) {
    std::istringstream is(text);
    std::vector<std::string> words;
    std::string w;
    while (is >> w) {
        words.push_back(w);
    }
    return words;
}

}  // namespace

FactorSpec FactorSpec::defaults() {
    FactorSpec spec;
    spec.factors = {
        {"subject_class", {"animals", "plants", "humans", "machines", "bacteria"}},
        {"verb_class", {"require", "consume", "produce", "absorb"}},
        {"object_class", {"food", "water", "energy", "oxygen", "light"}},
        {"negation", {"affirmative", "negated"}},
        {"modifier", {"survive", "grow", "thrive"}},
    };
    return spec;
}

std::size_t FactorSpec::total_combinations() const {
    std::size_t total = 1;
    for (const Factor& f : factors) {
        total *= f.values.size();
    }
    return total;
}

std::vector<std::string> FactorSpec::vocabulary() const {
    std::vector<std::string> words = {"do", "not", "to"};
    for (std::size_t f = 0; f < factors.size(); ++f) {
        if (f == kNegation) {
            continue;  // negation surfaces as the fixed words "do not"
        }
        for (const std::string& w : factors[f].values) {
            words.push_back(w);
        }
    }
    return words;
}

void FactorSpec::validate() const {
    if (factors.size() != 5) {
        throw ConfigError("factor spec must hold the 5 template factors");
    }
    if (factors[kNegation].values.size() != 2) {
        throw ConfigError("negation factor must have exactly 2 values");
    }
    std::set<std::string> seen = {"do", "not", "to"};
    for (std::size_t f = 0; f < factors.size(); ++f) {
        if (factors[f].values.empty()) {
            throw ConfigError("factor '" + factors[f].name + "' has no values");
        }
        if (f == kNegation) {
            continue;
        }
        for (const std::string& w : factors[f].values) {
            // Distinct single words keep the grammar unambiguous.
            if (w.empty() || w.find(' ') != std::string::npos || !seen.insert(w).second) {
                throw ConfigError("factor word '" + w + "' is empty, multi-word, or reused");
            }
        }
    }
}

Tokenizer::Tokenizer(const std::vector<std::string>& words) {
    id_to_word_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    std::vector<std::string> sorted = words;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    id_to_word_.insert(id_to_word_.end(), sorted.begin(), sorted.end());
}

Tokenizer Tokenizer::for_spec(const FactorSpec& spec) { return Tokenizer(spec.vocabulary()); }

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> ids = {bos_id};
    for (const std::string& w : split_words(text)) {
        auto it = std::find(id_to_word_.begin() + 4, id_to_word_.end(), w);
        ids.push_back(it == id_to_word_.end() ? unk_id
                                              : static_cast<int>(it - id_to_word_.begin()));
    }
    ids.push_back(eos_id);
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id == pad_id || id == bos_id || id == eos_id) {
            continue;
        }
        if (id < 0 || static_cast<std::size_t>(id) >= id_to_word_.size()) {
            throw ConfigError("token id " + std::to_string(id) + " outside vocabulary");
        }
        if (!out.empty()) {
            out += ' ';
        }
        out += id == unk_id ? "<unk>" : id_to_word_[static_cast<std::size_t>(id)];
    }
    return out;
}

const std::vector<std::string>& role_classes() {
    static const std::vector<std::string> kClasses = {"ARG0", "V", "ARG1", "MOD", "NEG", "O"};
    return kClasses;
}

std::size_t role_index(const std::string& role) {
    const auto& classes = role_classes();
    auto it = std::find(classes.begin(), classes.end(), role);
    if (it == classes.end()) {
        throw ConfigError("unknown role label '" + role + "'");
    }
    return static_cast<std::size_t>(it - classes.begin());
}

std::size_t flatten_factors(const FactorSpec& spec, const std::vector<std::size_t>& tuple) {
    if (tuple.size() != spec.factors.size()) {
        throw ConfigError("factor tuple arity mismatch");
    }
    std::size_t idx = 0;
    for (std::size_t f = 0; f < tuple.size(); ++f) {
        if (tuple[f] >= spec.factors[f].values.size()) {
            throw ConfigError("factor value index out of range");
        }
        idx = idx * spec.factors[f].values.size() + tuple[f];
    }
    return idx;
}

std::vector<std::size_t> unflatten_factors(const FactorSpec& spec, std::size_t index) {
    std::vector<std::size_t> tuple(spec.factors.size());
    for (std::size_t f = spec.factors.size(); f-- > 0;) {
        const std::size_t card = spec.factors[f].values.size();
        tuple[f] = index % card;
        index /= card;
    }
    if (index != 0) {
        throw ConfigError("combination index out of range");
    }
    return tuple;
}

std::pair<std::string, std::vector<std::string>> render_sentence(
    const FactorSpec& spec, const std::vector<std::size_t>& tuple) {
    flatten_factors(spec, tuple);  // bounds check
    std::vector<std::string> words, roles;
    words.push_back(spec.factors[kSubject].values[tuple[kSubject]]);
    roles.push_back("ARG0");
    if (tuple[kNegation] == 1) {
        words.push_back("do");
        roles.push_back("NEG");
        words.push_back("not");
        roles.push_back("NEG");
    }
    words.push_back(spec.factors[kVerb].values[tuple[kVerb]]);
    roles.push_back("V");
    words.push_back(spec.factors[kObject].values[tuple[kObject]]);
    roles.push_back("ARG1");
    words.push_back("to");
    roles.push_back("O");
    words.push_back(spec.factors[kModifier].values[tuple[kModifier]]);
    roles.push_back("MOD");

    std::string text;
    for (const std::string& w : words) {
        if (!text.empty()) {
            text += ' ';
        }
        text += w;
    }
    return {text, roles};
}

namespace {

std::optional<std::size_t> value_index(const FactorSpec::Factor& factor, const std::string& w) {
    auto it = std::find(factor.values.begin(), factor.values.end(), w);
    if (it == factor.values.end()) {
        return std::nullopt;
    }
    return static_cast<std::size_t>(it - factor.values.begin());
}

}  // namespace

std::optional<std::vector<std::size_t>> parse_sentence(const FactorSpec& spec,
                                                       const std::string& text) {
    const std::vector<std::string> words = split_words(text);
    std::vector<std::size_t> tuple(5, 0);
    std::size_t i = 0;
    auto take = [&](std::size_t factor) -> bool {
        if (i >= words.size()) {
            return false;
        }
        auto idx = value_index(spec.factors[factor], words[i]);
        if (!idx) {
            return false;
        }
        tuple[factor] = *idx;
        ++i;
        return true;
    };
    if (!take(kSubject)) {
        return std::nullopt;
    }
    if (i + 1 < words.size() && words[i] == "do" && words[i + 1] == "not") {
        tuple[kNegation] = 1;
        i += 2;
    }
    if (!take(kVerb) || !take(kObject)) {
        return std::nullopt;
    }
    if (i >= words.size() || words[i] != "to") {
        return std::nullopt;
    }
    ++i;
    if (!take(kModifier) || i != words.size()) {
        return std::nullopt;
    }
    return tuple;
}

std::vector<FactorSentence> generate_corpus(const FactorSpec& spec, std::size_t n,
                                            std::uint64_t seed) {
    spec.validate();
    const std::size_t total = spec.total_combinations();
    Rng rng(seed);
    std::vector<std::size_t> chosen;
    if (n > total) {
        // With replacement.
        chosen.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            chosen.push_back(rng.below(total));
        }
    } else {
        std::vector<std::size_t> all(total);
        for (std::size_t i = 0; i < total; ++i) {
            all[i] = i;
        }
        rng.shuffle(all);
        // Greedy per-factor caps keep subset marginals near uniform.
        std::vector<std::size_t> caps(spec.factors.size());
        std::vector<std::vector<std::size_t>> counts(spec.factors.size());
        for (std::size_t f = 0; f < spec.factors.size(); ++f) {
            const std::size_t card = spec.factors[f].values.size();
            caps[f] = (n + card - 1) / card;
            counts[f].assign(card, 0);
        }
        std::vector<std::size_t> overflow;
        for (std::size_t idx : all) {
            if (chosen.size() == n) {
                break;
            }
            const auto tuple = unflatten_factors(spec, idx);
            bool fits = true;
            for (std::size_t f = 0; f < tuple.size(); ++f) {
                fits = fits && counts[f][tuple[f]] < caps[f];
            }
            if (fits) {
                for (std::size_t f = 0; f < tuple.size(); ++f) {
                    ++counts[f][tuple[f]];
                }
                chosen.push_back(idx);
            } else {
                overflow.push_back(idx);
            }
        }
        for (std::size_t i = 0; chosen.size() < n; ++i) {
            chosen.push_back(overflow[i]);
        }
    }

    Tokenizer tok = Tokenizer::for_spec(spec);
    std::vector<FactorSentence> corpus;
    corpus.reserve(n);
    for (std::size_t idx : chosen) {
        FactorSentence s;
        s.factors = unflatten_factors(spec, idx);
        auto [text, roles] = render_sentence(spec, s.factors);
        s.text = std::move(text);
        s.roles = std::move(roles);
        s.tokens = tok.encode(s.text);
        corpus.push_back(std::move(s));
    }
    return corpus;
}

std::size_t max_token_length(const FactorSpec&) {
    // subject + "do not" + verb + object + "to" + modifier, plus BOS/EOS.
    // validate() pins every factor value to a single word.
    return 7 + 2;
}

std::pair<std::vector<FactorSentence>, std::vector<FactorSentence>> split_corpus(
    const std::vector<FactorSentence>& corpus, double train_frac, std::uint64_t seed) {
    if (!(train_frac > 0.0 && train_frac < 1.0)) {
        throw ConfigError("train fraction must be in (0, 1)");
    }
    const std::size_t n = corpus.size();
    const std::size_t n_train = static_cast<std::size_t>(static_cast<double>(n) * train_frac);
    const std::size_t n_val = n - n_train;
    if (n_val == 0 || n_train == 0) {
        throw ConfigError("split leaves an empty side");
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    Rng rng(seed);
    rng.shuffle(order);

    // Per factor value occurrence counts over the whole corpus; a sentence
    // may go to validation only if every one of its values stays in train.
    const std::size_t n_factors = corpus[0].factors.size();
    std::vector<std::vector<std::size_t>> remaining(n_factors);
    for (const FactorSentence& s : corpus) {
        for (std::size_t f = 0; f < n_factors; ++f) {
            if (remaining[f].size() <= s.factors[f]) {
                remaining[f].resize(s.factors[f] + 1, 0);
            }
            ++remaining[f][s.factors[f]];
        }
    }
    std::vector<bool> to_val(n, false);
    std::size_t picked = 0;
    for (std::size_t i : order) {
        if (picked == n_val) {
            break;
        }
        const FactorSentence& s = corpus[i];
        bool safe = true;
        for (std::size_t f = 0; f < n_factors; ++f) {
            safe = safe && remaining[f][s.factors[f]] >= 2;
        }
        if (safe) {
            for (std::size_t f = 0; f < n_factors; ++f) {
                --remaining[f][s.factors[f]];
            }
            to_val[i] = true;
            ++picked;
        }
    }
    if (picked < n_val) {
        throw ConfigError("corpus too small to stratify the requested split");
    }
    std::vector<FactorSentence> train, val;
    for (std::size_t i = 0; i < n; ++i) {
        (to_val[i] ? val : train).push_back(corpus[i]);
    }
    return {std::move(train), std::move(val)};
}

Tensor annotation_matrix(const FactorSentence& sentence) {
    const std::size_t t = sentence.tokens.size();
    const std::size_t c = role_classes().size();
    if (sentence.roles.size() + 2 != t) {
        throw ConfigError("roles must align with the sentence words");
    }
    Tensor m = Tensor::zeros({t, c});
    for (std::size_t w = 0; w < sentence.roles.size(); ++w) {
        m.mutable_value()[(w + 1) * c + role_index(sentence.roles[w])] = 1.0;
    }
    return m;
}

void write_corpus_jsonl(const std::string& path, const std::vector<FactorSentence>& corpus,
                        const FactorSpec& spec) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot open '" + path + "' for writing");
    }
    for (const FactorSentence& s : corpus) {
        json obj;
        obj["text"] = s.text;
        json factors = json::object();
        for (std::size_t f = 0; f < s.factors.size(); ++f) {
            factors[spec.factors[f].name] = s.factors[f];
        }
        obj["factors"] = factors;
        obj["roles"] = s.roles;
        out << obj.dump() << '\n';
    }
}

std::vector<FactorSentence> read_corpus_jsonl(const std::string& path, const FactorSpec& spec) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open '" + path + "' for reading");
    }
    Tokenizer tok = Tokenizer::for_spec(spec);
    std::vector<FactorSentence> corpus;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::parse_error& e) {
            throw std::runtime_error("corpus line " + std::to_string(line_no) + ": " + e.what());
        }
        FactorSentence s;
        s.text = obj.at("text").get<std::string>();
        s.factors.resize(spec.factors.size());
        for (std::size_t f = 0; f < spec.factors.size(); ++f) {
            s.factors[f] = obj.at("factors").at(spec.factors[f].name).get<std::size_t>();
            if (s.factors[f] >= spec.factors[f].values.size()) {
                throw std::runtime_error("corpus line " + std::to_string(line_no) +
                                         ": factor index out of range");
            }
        }
        s.roles = obj.at("roles").get<std::vector<std::string>>();
        s.tokens = tok.encode(s.text);
        if (s.roles.size() + 2 != s.tokens.size()) {
            throw std::runtime_error("corpus line " + std::to_string(line_no) +
                                     ": roles misaligned with text");
        }
        corpus.push_back(std::move(s));
    }
    return corpus;
}

}  // namespace lf
