#include "latentforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "latentforge/rng.hpp"

namespace lf {

using nlohmann::json;

namespace {

void warn(const std::string& msg) { std::cerr << "[metrics] warning: " << msg << "\n"; }

std::vector<std::string> split_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string tok;
    while (in >> tok) {
        out.push_back(tok);
    }
    return out;
}

// ---- multinomial linear classifier -----------------------------------------
//
// Full-batch gradient descent on the softmax cross-entropy, zero-initialized,
// features standardized with the training statistics. The optional L1 penalty
// is applied to weights (never the bias) by proximal soft-thresholding.

struct LinearModel {
    std::size_t d = 0;
    std::size_t classes = 0;
    std::vector<double> w;     // [classes, d]
    std::vector<double> b;     // [classes]
    std::vector<double> mean;  // [d]
    std::vector<double> scale;  // [d], 1 where the feature is constant

    std::size_t predict(const std::vector<double>& x) const {
        std::size_t best = 0;
        double best_logit = -1e300;
        for (std::size_t c = 0; c < classes; ++c) {
            double logit = b[c];
            for (std::size_t j = 0; j < d; ++j) {
                logit += w[c * d + j] * ((x[j] - mean[j]) / scale[j]);
            }
            if (logit > best_logit) {
                best_logit = logit;
                best = c;
            }
        }
        return best;
    }
};

LinearModel fit_linear(const std::vector<std::vector<double>>& x,
                       const std::vector<std::size_t>& y, std::size_t classes, double l1,
                       std::size_t iters, double lr) {
    const std::size_t n = x.size();
    const std::size_t d = x[0].size();
    LinearModel m;
    m.d = d;
    m.classes = classes;
    m.w.assign(classes * d, 0.0);
    m.b.assign(classes, 0.0);
    m.mean.assign(d, 0.0);
    m.scale.assign(d, 1.0);

    for (const auto& row : x) {
        for (std::size_t j = 0; j < d; ++j) {
            m.mean[j] += row[j];
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
        m.mean[j] /= static_cast<double>(n);
    }
    std::vector<double> var(d, 0.0);
    for (const auto& row : x) {
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - m.mean[j];
            var[j] += c * c;
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
        const double s = std::sqrt(var[j] / static_cast<double>(n));
        m.scale[j] = s > 1e-12 ? s : 1.0;
    }

    std::vector<double> xs(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            xs[i * d + j] = (x[i][j] - m.mean[j]) / m.scale[j];
        }
    }

    std::vector<double> logits(classes);
    std::vector<double> gw(classes * d);
    std::vector<double> gb(classes);
    for (std::size_t it = 0; it < iters; ++it) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double max_logit = -1e300;
            for (std::size_t c = 0; c < classes; ++c) {
                double v = m.b[c];
                for (std::size_t j = 0; j < d; ++j) {
                    v += m.w[c * d + j] * xs[i * d + j];
                }
                logits[c] = v;
                max_logit = std::max(max_logit, v);
            }
            double denom = 0.0;
            for (std::size_t c = 0; c < classes; ++c) {
                logits[c] = std::exp(logits[c] - max_logit);
                denom += logits[c];
            }
            for (std::size_t c = 0; c < classes; ++c) {
                const double p = logits[c] / denom;
                const double g = p - (c == y[i] ? 1.0 : 0.0);
                gb[c] += g;
                for (std::size_t j = 0; j < d; ++j) {
                    gw[c * d + j] += g * xs[i * d + j];
                }
            }
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t c = 0; c < classes; ++c) {
            m.b[c] -= lr * gb[c] * inv_n;
            for (std::size_t j = 0; j < d; ++j) {
                double v = m.w[c * d + j] - lr * gw[c * d + j] * inv_n;
                if (l1 > 0.0) {
                    const double shrink = lr * l1;
                    if (v > shrink) {
                        v -= shrink;
                    } else if (v < -shrink) {
                        v += shrink;
                    } else {
                        v = 0.0;
                    }
                }
                m.w[c * d + j] = v;
            }
        }
    }
    return m;
}

// ---- factor bookkeeping -----------------------------------------------------

struct FactorIndex {
    std::size_t column = 0;                        // column in CodesFactors::factors
    std::vector<std::size_t> values;               // distinct values, sorted
    std::vector<std::vector<std::size_t>> groups;  // rows per value
};

// Non-constant factors with row groups per value; constant columns warn.
std::vector<FactorIndex> usable_factors(const CodesFactors& data) {
    std::vector<FactorIndex> out;
    for (std::size_t k = 0; k < data.n_factors(); ++k) {
        std::map<std::size_t, std::vector<std::size_t>> by_value;
        for (std::size_t i = 0; i < data.n(); ++i) {
            by_value[data.factors[i][k]].push_back(i);
        }
        if (by_value.size() < 2) {
            warn("factor column " + std::to_string(k) + " is constant; excluded");
            continue;
        }
        FactorIndex fi;
        fi.column = k;
        for (auto& [value, rows] : by_value) {
            fi.values.push_back(value);
            fi.groups.push_back(std::move(rows));
        }
        out.push_back(std::move(fi));
    }
    if (out.empty()) {
        throw ConfigError("no factor varies across the dataset");
    }
    return out;
}

double entropy_nats(const std::vector<double>& probs) {
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) {
            h -= p * std::log(p);
        }
    }
    return h;
}

// ---- Levenshtein ------------------------------------------------------------

std::size_t levenshtein(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const std::size_t la = a.size();
    const std::size_t lb = b.size();
    std::vector<std::size_t> prev(lb + 1);
    std::vector<std::size_t> cur(lb + 1);
    std::iota(prev.begin(), prev.end(), std::size_t{0});
    for (std::size_t i = 1; i <= la; ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= lb; ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[lb];
}

// ---- symmetric eigensolver ---------------------------------------------------

// Cyclic Jacobi; a is destroyed. Eigenvectors land in the columns of v.
void jacobi_eigen(std::vector<std::vector<double>>& a, std::vector<double>& eigvals,
                  std::vector<std::vector<double>>& v) {
    const std::size_t n = a.size();
    v.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        v[i][i] = 1.0;
    }
    for (std::size_t sweep = 0; sweep < 200; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                off = std::max(off, std::abs(a[p][q]));
            }
        }
        double diag = 1e-300;
        for (std::size_t p = 0; p < n; ++p) {
            diag = std::max(diag, std::abs(a[p][p]));
        }
        if (off <= 1e-15 * diag) {
            break;
        }
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(a[p][q]) <= 1e-300) {
                    continue;
                }
                const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a[i][p];
                    const double aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double api = a[p][i];
                    const double aqi = a[q][i];
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = v[i][p];
                    const double viq = v[i][q];
                    v[i][p] = c * vip - s * viq;
                    v[i][q] = s * vip + c * viq;
                }
            }
        }
    }
    eigvals.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        eigvals[i] = a[i][i];
    }
}

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

}  // namespace

void CodesFactors::validate() const {
    if (codes.empty()) {
        throw ConfigError("codes are empty");
    }
    if (codes.size() != factors.size()) {
        throw ConfigError("codes and factors disagree on row count");
    }
    const std::size_t d = codes[0].size();
    if (d == 0) {
        throw ConfigError("codes have zero dimensions");
    }
    for (const auto& row : codes) {
        if (row.size() != d) {
            throw ConfigError("ragged codes matrix");
        }
    }
    const std::size_t f = factors[0].size();
    if (f == 0) {
        throw ConfigError("factor matrix has zero columns");
    }
    for (const auto& row : factors) {
        if (row.size() != f) {
            throw ConfigError("ragged factor matrix");
        }
    }
}

double bleu(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
            std::size_t max_n) {
    if (candidates.empty() || candidates.size() != references.size()) {
        throw ConfigError("bleu needs equal, nonzero candidate and reference counts");
    }
    if (max_n == 0) {
        throw ConfigError("bleu max_n must be positive");
    }

    std::vector<double> matched(max_n, 0.0);
    std::vector<double> total(max_n, 0.0);
    std::size_t cand_len = 0;
    std::size_t ref_len = 0;

    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto cand = split_tokens(candidates[i]);
        const auto ref = split_tokens(references[i]);
        cand_len += cand.size();
        ref_len += ref.size();
        for (std::size_t n = 1; n <= max_n; ++n) {
            if (cand.size() < n) {
                continue;
            }
            std::map<std::string, std::size_t> ref_counts;
            if (ref.size() >= n) {
                for (std::size_t j = 0; j + n <= ref.size(); ++j) {
                    std::string key;
                    for (std::size_t t = 0; t < n; ++t) {
                        key += ref[j + t];
                        key += '\x1f';
                    }
                    ++ref_counts[key];
                }
            }
            std::map<std::string, std::size_t> cand_counts;
            for (std::size_t j = 0; j + n <= cand.size(); ++j) {
                std::string key;
                for (std::size_t t = 0; t < n; ++t) {
                    key += cand[j + t];
                    key += '\x1f';
                }
                ++cand_counts[key];
            }
            for (const auto& [key, count] : cand_counts) {
                total[n - 1] += static_cast<double>(count);
                const auto it = ref_counts.find(key);
                if (it != ref_counts.end()) {
                    matched[n - 1] += static_cast<double>(std::min(count, it->second));
                }
            }
        }
    }

    if (cand_len == 0) {
        return 0.0;
    }
    double log_sum = 0.0;
    std::size_t used = 0;
    for (std::size_t n = 0; n < max_n; ++n) {
        if (total[n] == 0.0) {
            continue;  // no candidate n-grams of this order anywhere
        }
        const double num = matched[n] > 0.0 ? matched[n] : 1e-9;
        log_sum += std::log(num / total[n]);
        ++used;
    }
    if (used == 0) {
        return 0.0;
    }
    const double geo = std::exp(log_sum / static_cast<double>(used));
    const double bp =
        cand_len > ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
    return bp * geo;
}

double z_diff(const CodesFactors& data, std::size_t n_votes, std::uint64_t seed,
              std::size_t pair_batch) {
    data.validate();
    if (n_votes < 10) {
        throw ConfigError("z_diff needs at least 10 votes for a held-out split");
    }
    if (pair_batch == 0) {
        throw ConfigError("z_diff pair_batch must be positive");
    }
    const auto factors = usable_factors(data);
    for (const FactorIndex& fi : factors) {
        for (std::size_t v = 0; v < fi.groups.size(); ++v) {
            if (fi.groups[v].size() < 2) {
                throw ConfigError("factor column " + std::to_string(fi.column) + " value " +
                                  std::to_string(fi.values[v]) +
                                  " has fewer than 2 samples; cannot draw pairs");
            }
        }
    }

    const std::size_t d = data.dims();
    Rng rng(seed);
    std::vector<std::vector<double>> x(n_votes, std::vector<double>(d, 0.0));
    std::vector<std::size_t> y(n_votes);
    for (std::size_t i = 0; i < n_votes; ++i) {
        const std::size_t kf = rng.below(factors.size());
        const FactorIndex& fi = factors[kf];
        y[i] = kf;
        for (std::size_t b = 0; b < pair_batch; ++b) {
            const std::size_t a = rng.below(data.n());
            const std::size_t value = data.factors[a][fi.column];
            const std::size_t vi = static_cast<std::size_t>(
                std::lower_bound(fi.values.begin(), fi.values.end(), value) - fi.values.begin());
            const auto& group = fi.groups[vi];
            std::size_t partner = group[rng.below(group.size())];
            if (partner == a) {
                // Deterministic neighbor keeps pairs distinct.
                const std::size_t at = static_cast<std::size_t>(
                    std::find(group.begin(), group.end(), a) - group.begin());
                partner = group[(at + 1) % group.size()];
            }
            for (std::size_t j = 0; j < d; ++j) {
                x[i][j] += std::abs(data.codes[a][j] - data.codes[partner][j]);
            }
        }
        for (std::size_t j = 0; j < d; ++j) {
            x[i][j] /= static_cast<double>(pair_batch);
        }
    }

    const std::size_t n_train = n_votes * 8 / 10;
    const std::vector<std::vector<double>> train_x(x.begin(), x.begin() + n_train);
    const std::vector<std::size_t> train_y(y.begin(), y.begin() + n_train);
    const LinearModel model = fit_linear(train_x, train_y, factors.size(), 0.0, 400, 0.5);

    std::size_t correct = 0;
    for (std::size_t i = n_train; i < n_votes; ++i) {
        if (model.predict(x[i]) == y[i]) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(n_votes - n_train);
}

double z_min_var(const CodesFactors& data, std::size_t n_votes, std::uint64_t seed,
                 std::size_t batch) {
    data.validate();
    if (n_votes < 10) {
        throw ConfigError("z_min_var needs at least 10 votes for a held-out split");
    }
    if (batch < 2) {
        throw ConfigError("z_min_var batch must be at least 2");
    }
    const auto factors = usable_factors(data);

    const std::size_t d = data.dims();
    std::vector<double> global_std(d, 0.0);
    std::vector<double> mean(d, 0.0);
    for (const auto& row : data.codes) {
        for (std::size_t j = 0; j < d; ++j) {
            mean[j] += row[j];
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
        mean[j] /= static_cast<double>(data.n());
    }
    for (const auto& row : data.codes) {
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mean[j];
            global_std[j] += c * c;
        }
    }
    std::vector<std::size_t> dims;
    for (std::size_t j = 0; j < d; ++j) {
        global_std[j] = std::sqrt(global_std[j] / static_cast<double>(data.n()));
        if (global_std[j] > 1e-12) {
            dims.push_back(j);
        } else {
            warn("code dimension " + std::to_string(j) + " has zero variance; excluded");
        }
    }
    if (dims.empty()) {
        throw ConfigError("every code dimension is constant");
    }

    Rng rng(seed);
    std::vector<std::size_t> vote_dim(n_votes);
    std::vector<std::size_t> vote_factor(n_votes);
    std::vector<double> column(batch);
    for (std::size_t i = 0; i < n_votes; ++i) {
        const std::size_t kf = rng.below(factors.size());
        const FactorIndex& fi = factors[kf];
        const std::size_t anchor = rng.below(data.n());
        const std::size_t value = data.factors[anchor][fi.column];
        const std::size_t vi = static_cast<std::size_t>(
            std::lower_bound(fi.values.begin(), fi.values.end(), value) - fi.values.begin());
        const auto& group = fi.groups[vi];

        std::vector<std::size_t> rows(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            rows[b] = group[rng.below(group.size())];
        }
        double best_var = 1e300;
        std::size_t best_dim = dims[0];
        for (std::size_t j : dims) {
            double m = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
                column[b] = data.codes[rows[b]][j] / global_std[j];
                m += column[b];
            }
            m /= static_cast<double>(batch);
            double var = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
                const double c = column[b] - m;
                var += c * c;
            }
            if (var < best_var) {
                best_var = var;
                best_dim = j;
            }
        }
        vote_dim[i] = best_dim;
        vote_factor[i] = kf;
    }

    const std::size_t n_train = n_votes * 8 / 10;
    std::vector<std::vector<std::size_t>> counts(d, std::vector<std::size_t>(factors.size(), 0));
    for (std::size_t i = 0; i < n_train; ++i) {
        ++counts[vote_dim[i]][vote_factor[i]];
    }
    std::size_t correct = 0;
    for (std::size_t i = n_train; i < n_votes; ++i) {
        const auto& row = counts[vote_dim[i]];
        const std::size_t predicted = static_cast<std::size_t>(
            std::max_element(row.begin(), row.end()) - row.begin());
        if (predicted == vote_factor[i]) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(n_votes - n_train);
}

double mig(const CodesFactors& data, std::size_t n_bins) {
    data.validate();
    if (n_bins < 2) {
        throw ConfigError("mig needs at least 2 bins");
    }
    if (data.n() < 10 * n_bins) {
        throw ConfigError("mig needs at least 10 samples per bin; have " +
                          std::to_string(data.n()) + " rows for " + std::to_string(n_bins) +
                          " bins");
    }
    const auto factors = usable_factors(data);
    const std::size_t n = data.n();
    const std::size_t d = data.dims();

    // Equal-frequency bins via rank; ties resolve by row order.
    std::vector<std::vector<std::size_t>> bins(d, std::vector<std::size_t>(n));
    std::vector<std::size_t> order(n);
    for (std::size_t j = 0; j < d; ++j) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return data.codes[a][j] < data.codes[b][j];
        });
        for (std::size_t rank = 0; rank < n; ++rank) {
            bins[j][order[rank]] = rank * n_bins / n;
        }
    }

    double gap_sum = 0.0;
    for (const FactorIndex& fi : factors) {
        std::vector<double> value_probs(fi.values.size());
        for (std::size_t v = 0; v < fi.groups.size(); ++v) {
            value_probs[v] = static_cast<double>(fi.groups[v].size()) / static_cast<double>(n);
        }
        const double h = entropy_nats(value_probs);

        std::vector<double> mi(d, 0.0);
        for (std::size_t j = 0; j < d; ++j) {
            std::vector<std::vector<double>> joint(n_bins,
                                                   std::vector<double>(fi.values.size(), 0.0));
            for (std::size_t v = 0; v < fi.groups.size(); ++v) {
                for (std::size_t row : fi.groups[v]) {
                    joint[bins[j][row]][v] += 1.0;
                }
            }
            std::vector<double> bin_probs(n_bins, 0.0);
            for (std::size_t bq = 0; bq < n_bins; ++bq) {
                for (std::size_t v = 0; v < fi.values.size(); ++v) {
                    joint[bq][v] /= static_cast<double>(n);
                    bin_probs[bq] += joint[bq][v];
                }
            }
            double info = 0.0;
            for (std::size_t bq = 0; bq < n_bins; ++bq) {
                for (std::size_t v = 0; v < fi.values.size(); ++v) {
                    const double p = joint[bq][v];
                    if (p > 0.0) {
                        info += p * std::log(p / (bin_probs[bq] * value_probs[v]));
                    }
                }
            }
            mi[j] = info;
        }

        double top1 = -1e300;
        double top2 = 0.0;
        for (double v : mi) {
            if (v > top1) {
                top2 = top1;
                top1 = v;
            } else if (v > top2) {
                top2 = v;
            }
        }
        if (d == 1) {
            top2 = 0.0;
        }
        gap_sum += (top1 - top2) / h;
    }
    return gap_sum / static_cast<double>(factors.size());
}

DciScores dci(const CodesFactors& data, std::uint64_t seed) {
    data.validate();
    if (data.n() < 10) {
        throw ConfigError("dci needs at least 10 samples for a held-out split");
    }
    const auto factors = usable_factors(data);
    const std::size_t n = data.n();
    const std::size_t d = data.dims();

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        std::swap(order[i - 1], order[rng.below(i)]);
    }
    const std::size_t n_train = n * 8 / 10;

    std::vector<std::vector<double>> train_x;
    train_x.reserve(n_train);
    for (std::size_t i = 0; i < n_train; ++i) {
        train_x.push_back(data.codes[order[i]]);
    }

    // Importance R[j][k] = sum of |weights| feeding factor k from dim j.
    std::vector<std::vector<double>> importance(d, std::vector<double>(factors.size(), 0.0));
    double accuracy_sum = 0.0;
    for (std::size_t kf = 0; kf < factors.size(); ++kf) {
        const FactorIndex& fi = factors[kf];
        std::vector<std::size_t> train_y(n_train);
        for (std::size_t i = 0; i < n_train; ++i) {
            const std::size_t value = data.factors[order[i]][fi.column];
            train_y[i] = static_cast<std::size_t>(
                std::lower_bound(fi.values.begin(), fi.values.end(), value) - fi.values.begin());
        }
        const LinearModel model =
            fit_linear(train_x, train_y, fi.values.size(), 0.01, 600, 0.5);
        for (std::size_t j = 0; j < d; ++j) {
            double total = 0.0;
            for (std::size_t c = 0; c < fi.values.size(); ++c) {
                total += std::abs(model.w[c * d + j]);
            }
            importance[j][kf] = total;
        }
        std::size_t correct = 0;
        for (std::size_t i = n_train; i < n; ++i) {
            const std::size_t value = data.factors[order[i]][fi.column];
            const std::size_t label = static_cast<std::size_t>(
                std::lower_bound(fi.values.begin(), fi.values.end(), value) - fi.values.begin());
            if (model.predict(data.codes[order[i]]) == label) {
                ++correct;
            }
        }
        accuracy_sum += static_cast<double>(correct) / static_cast<double>(n - n_train);
    }

    DciScores out;
    out.informativeness = accuracy_sum / static_cast<double>(factors.size());

    double grand_total = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t k = 0; k < factors.size(); ++k) {
            grand_total += importance[j][k];
        }
    }
    if (grand_total <= 0.0) {
        warn("all predictor importances are zero; disentanglement and completeness are 0");
        return out;
    }

    const double log_f = std::log(static_cast<double>(factors.size()));
    double disent = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        double row_total = 0.0;
        for (std::size_t k = 0; k < factors.size(); ++k) {
            row_total += importance[j][k];
        }
        if (row_total <= 0.0) {
            warn("code dimension " + std::to_string(j) + " has zero importance for every factor");
            continue;
        }
        std::vector<double> p(factors.size());
        for (std::size_t k = 0; k < factors.size(); ++k) {
            p[k] = importance[j][k] / row_total;
        }
        const double dj = factors.size() == 1 ? 1.0 : 1.0 - entropy_nats(p) / log_f;
        disent += (row_total / grand_total) * dj;
    }
    out.disentanglement = disent;

    const double log_d = std::log(static_cast<double>(d));
    double completeness = 0.0;
    for (std::size_t k = 0; k < factors.size(); ++k) {
        double col_total = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            col_total += importance[j][k];
        }
        if (col_total <= 0.0) {
            warn("factor column " + std::to_string(factors[k].column) +
                 " received zero importance from every dimension");
            continue;
        }
        std::vector<double> p(d);
        for (std::size_t j = 0; j < d; ++j) {
            p[j] = importance[j][k] / col_total;
        }
        completeness += d == 1 ? 1.0 : 1.0 - entropy_nats(p) / log_d;
    }
    out.completeness = completeness / static_cast<double>(factors.size());
    return out;
}

InterpolationScores interpolation_metrics(const FactorSpec& spec,
                                          const std::vector<ProbeReport>& paths) {
    if (paths.empty()) {
        throw ConfigError("no interpolation paths to score");
    }
    std::size_t grammatical = 0;
    std::size_t intermediates = 0;
    double distance_sum = 0.0;
    std::size_t transitions = 0;
    for (const ProbeReport& rep : paths) {
        if (rep.rows.size() < 3) {
            throw ConfigError("interpolation metrics need paths with at least 3 steps");
        }
        for (std::size_t i = 1; i + 1 < rep.rows.size(); ++i) {
            ++intermediates;
            if (parse_sentence(spec, rep.rows[i].generated).has_value()) {
                ++grammatical;
            }
        }
        for (std::size_t i = 1; i < rep.rows.size(); ++i) {
            const auto a = split_tokens(rep.rows[i - 1].generated);
            const auto b = split_tokens(rep.rows[i].generated);
            const std::size_t longest = std::max(a.size(), b.size());
            distance_sum += longest == 0
                                ? 0.0
                                : static_cast<double>(levenshtein(a, b)) /
                                      static_cast<double>(longest);
            ++transitions;
        }
    }
    InterpolationScores out;
    out.quality = static_cast<double>(grammatical) / static_cast<double>(intermediates);
    out.smoothness = 1.0 - distance_sum / static_cast<double>(transitions);
    return out;
}

PcaResult pca_project(const std::vector<std::vector<double>>& codes, std::size_t k) {
    if (k == 0) {
        throw ConfigError("pca needs at least one component");
    }
    const std::size_t n = codes.size();
    if (n <= k) {
        throw ConfigError("pca needs more samples than components");
    }
    const std::size_t d = codes[0].size();
    for (const auto& row : codes) {
        if (row.size() != d) {
            throw ConfigError("ragged codes matrix");
        }
    }
    if (d < k) {
        throw ConfigError("pca rank below requested components");
    }

    std::vector<double> mean(d, 0.0);
    for (const auto& row : codes) {
        for (std::size_t j = 0; j < d; ++j) {
            mean[j] += row[j];
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
        mean[j] /= static_cast<double>(n);
    }
    std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
    for (const auto& row : codes) {
        for (std::size_t a = 0; a < d; ++a) {
            const double ca = row[a] - mean[a];
            for (std::size_t b = a; b < d; ++b) {
                cov[a][b] += ca * (row[b] - mean[b]);
            }
        }
    }
    for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = a; b < d; ++b) {
            cov[a][b] /= static_cast<double>(n - 1);
            cov[b][a] = cov[a][b];
        }
    }

    std::vector<double> eigvals;
    std::vector<std::vector<double>> eigvecs;
    jacobi_eigen(cov, eigvals, eigvecs);

    std::vector<std::size_t> idx(d);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return eigvals[a] > eigvals[b]; });

    const double top = std::max(eigvals[idx[0]], 0.0);
    for (std::size_t c = 0; c < k; ++c) {
        if (eigvals[idx[c]] <= std::max(top * 1e-12, 0.0)) {
            throw ConfigError("pca rank below requested components");
        }
    }

    PcaResult out;
    out.explained_variance.resize(k);
    out.components.assign(d, std::vector<double>(k, 0.0));
    for (std::size_t c = 0; c < k; ++c) {
        out.explained_variance[c] = eigvals[idx[c]];
        // Sign convention: the largest-magnitude coordinate is positive.
        std::size_t arg = 0;
        double best = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            if (std::abs(eigvecs[j][idx[c]]) > best) {
                best = std::abs(eigvecs[j][idx[c]]);
                arg = j;
            }
        }
        const double flip = eigvecs[arg][idx[c]] < 0.0 ? -1.0 : 1.0;
        for (std::size_t j = 0; j < d; ++j) {
            out.components[j][c] = flip * eigvecs[j][idx[c]];
        }
    }
    out.projected.assign(n, std::vector<double>(k, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < k; ++c) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                acc += (codes[i][j] - mean[j]) * out.components[j][c];
            }
            out.projected[i][c] = acc;
        }
    }
    return out;
}

void write_report_json(const DisentanglementReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot open '" + path + "' for writing");
    }
    const json doc{
        {"z_diff", report.z_diff},
        {"z_min_var", report.z_min_var},
        {"mig", report.mig},
        {"dci",
         {{"disentanglement", report.dci.disentanglement},
          {"completeness", report.dci.completeness},
          {"informativeness", report.dci.informativeness}}},
        {"notes",
         {"z_min_var is a raw accuracy (higher = better); the tabular column label mirrors a "
          "lower-is-better header for layout parity only"}}};
    out << doc.dump(2) << "\n";
    if (!out) {
        throw std::runtime_error("short write to '" + path + "'");
    }
}

void write_grid_csv(const std::vector<GridRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot open '" + path + "' for writing");
    }
    out << "encoder_cfg,decoder_cfg,annot,bleu,z_diff,z_min_var,informativeness\n";
    out << std::setprecision(17);
    for (const GridRow& row : rows) {
        out << csv_field(row.encoder_cfg) << ',' << csv_field(row.decoder_cfg) << ','
            << (row.annot ? "on" : "off") << ',' << row.bleu << ',' << row.z_diff << ','
            << row.z_min_var << ',' << row.informativeness << '\n';
    }
    if (!out) {
        throw std::runtime_error("short write to '" + path + "'");
    }
}

}  // namespace lf
