#include "latentforge/probes.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace lf {

using nlohmann::json;

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string quoted = "\"";
    for (char c : s) {
        if (c == '"') {
            quoted += '"';
        }
        quoted += c;
    }
    quoted += '"';
    return quoted;
}

std::string format_alpha(double alpha) {
    std::ostringstream os;
    os << alpha;
    return os.str();
}

}  // namespace

LatentCode encode_deterministic(const LmVae& model, const FactorSentence& sentence) {
    const std::vector<std::uint8_t> mask(sentence.tokens.size(), 1);
    if (model.config().n_annotation_classes > 0) {
        const Tensor annot = annotation_matrix(sentence);
        return model.encode_latent(sentence.tokens, mask, &annot, nullptr);
    }
    return model.encode_latent(sentence.tokens, mask, nullptr, nullptr);
}

std::string decode_text(const LmVae& model, const Tokenizer& tok, const Tensor& z) {
    const std::vector<int> ids = model.generate(z, model.config().decoder.max_len);
    return tok.decode(ids);
}

ProbeReport traverse(const LmVae& model, const Tokenizer& tok,
                     const std::vector<FactorSentence>& sentences,
                     const std::vector<std::size_t>& dims, std::size_t sample_size) {
    const std::size_t d_latent = model.config().injector.latent_dim;
    for (std::size_t d : dims) {
        if (d >= d_latent) {
            throw ConfigError("traversal dim " + std::to_string(d) + " outside latent size " +
                              std::to_string(d_latent));
        }
    }
    if (sample_size == 0) {
        throw ConfigError("traversal sample_size must be positive");
    }

    ProbeReport report;
    report.rows.reserve(sentences.size() * dims.size() * sample_size);
    for (const FactorSentence& s : sentences) {
        const LatentCode code = encode_deterministic(model, s);
        for (std::size_t d : dims) {
            const double sigma = std::exp(0.5 * code.log_var.at(0, d));
            for (std::size_t i = 0; i < sample_size; ++i) {
                // Symmetric integer grid: the midpoint of an odd-sized grid
                // is exactly 0, the ends exactly +-3 sigma.
                double delta = 0.0;
                if (sample_size > 1) {
                    const double num = 2.0 * static_cast<double>(i) -
                                       static_cast<double>(sample_size - 1);
                    delta = 3.0 * sigma * (num / static_cast<double>(sample_size - 1));
                }
                std::vector<double> z = code.mu.value();
                z[d] = code.mu.at(0, d) + delta;
                const Tensor shifted = Tensor::from(std::move(z), code.mu.shape());
                report.rows.push_back(
                    {s.text, std::to_string(d), delta, decode_text(model, tok, shifted)});
            }
        }
    }
    return report;
}

ProbeReport interpolate(const LmVae& model, const Tokenizer& tok, const FactorSentence& source,
                        const FactorSentence& target, std::size_t steps) {
    if (steps < 2) {
        throw ConfigError("interpolation needs at least 2 steps");
    }
    const LatentCode src = encode_deterministic(model, source);
    const LatentCode tgt = encode_deterministic(model, target);

    double sq = 0.0;
    for (std::size_t j = 0; j < src.mu.numel(); ++j) {
        const double diff = src.mu.at(j) - tgt.mu.at(j);
        sq += diff * diff;
    }
    const double distance = std::sqrt(sq);

    ProbeReport report;
    report.rows.reserve(steps);
    for (std::size_t i = 0; i < steps; ++i) {
        const double alpha = static_cast<double>(i) / static_cast<double>(steps - 1);
        std::vector<double> z(src.mu.numel());
        for (std::size_t j = 0; j < z.size(); ++j) {
            z[j] = (1.0 - alpha) * src.mu.at(j) + alpha * tgt.mu.at(j);
        }
        const Tensor mixed = Tensor::from(std::move(z), src.mu.shape());
        report.rows.push_back(
            {source.text, format_alpha(alpha), distance, decode_text(model, tok, mixed)});
    }
    return report;
}

std::string arithmetic(const LmVae& model, const Tokenizer& tok,
                       const std::vector<ArithmeticTerm>& terms) {
    if (terms.empty()) {
        throw ConfigError("arithmetic expression needs at least one term");
    }
    std::vector<double> sum;
    for (const ArithmeticTerm& term : terms) {
        if (term.sign != 1 && term.sign != -1) {
            throw ConfigError("arithmetic term sign must be +1 or -1");
        }
        const LatentCode code = encode_deterministic(model, term.sentence);
        if (sum.empty()) {
            sum.assign(code.mu.numel(), 0.0);
        }
        for (std::size_t j = 0; j < sum.size(); ++j) {
            sum[j] += static_cast<double>(term.sign) * code.mu.at(j);
        }
    }
    const std::size_t d = sum.size();
    return decode_text(model, tok, Tensor::from(std::move(sum), {1, d}));
}

void write_probe_csv(const ProbeReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot open '" + path + "' for writing");
    }
    out << "seed,key,distance,generated\n";
    out << std::setprecision(17);
    for (const ProbeRow& row : report.rows) {
        out << csv_field(row.seed) << ',' << csv_field(row.key) << ',' << row.distance << ','
            << csv_field(row.generated) << '\n';
    }
    if (!out) {
        throw std::runtime_error("short write to '" + path + "'");
    }
}

void write_probe_jsonl(const ProbeReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot open '" + path + "' for writing");
    }
    for (const ProbeRow& row : report.rows) {
        const json line{{"seed", row.seed},
                        {"key", row.key},
                        {"distance", row.distance},
                        {"generated", row.generated}};
        out << line.dump() << '\n';
    }
    if (!out) {
        throw std::runtime_error("short write to '" + path + "'");
    }
}

}  // namespace lf
