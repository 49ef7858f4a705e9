#include "latentforge/rng.hpp"

#include <bit>
#include <sstream>
#include <stdexcept>

namespace lf {

// Text form: "<has_spare> <spare bits as u64> <mt19937_64 stream>".
// The spare is stored as raw bits so the resumed normal() stream is bit-exact.
std::string Rng::serialize() const {
    std::ostringstream os;
    os << (has_spare_ ? 1 : 0) << ' ' << std::bit_cast<std::uint64_t>(spare_) << ' ' << engine_;
    return os.str();
}

Rng Rng::deserialize(const std::string& text) {
    std::istringstream is(text);
    int has = 0;
    std::uint64_t bits = 0;
    Rng rng;
    if (!(is >> has >> bits >> rng.engine_)) {
        throw std::runtime_error("invalid rng state string");
    }
    rng.has_spare_ = has != 0;
    rng.spare_ = std::bit_cast<double>(bits);
    return rng;
}

}  // namespace lf
