#include "flowlm/random.hpp"

#include <array>
#include <fstream>
#include <sstream>

#include "flowlm/errors.hpp"

namespace flowlm {

std::string to_hex(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

std::string Fnv1a::hex() const { return to_hex(state_); }

std::uint64_t fnv1a(std::string_view s) noexcept {
    Fnv1a h;
    h.update(s);
    return h.digest();
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::string file_fingerprint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path + "' for fingerprinting");
    }
    Fnv1a h;
    std::array<char, 1 << 16> buf{};
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return "fnv1a64:" + h.hex();
}

std::uint64_t child_seed(std::uint64_t root, std::string_view name) noexcept {
    return splitmix64(root ^ fnv1a(name));
}

SeedStreams seed_all(std::uint64_t root) {
    SeedStreams s;
    s.root = root;
    s.init.seed(child_seed(root, "init"));
    s.sampler.seed(child_seed(root, "sampler"));
    s.masking.seed(child_seed(root, "masking"));
    s.dropout.seed(child_seed(root, "dropout"));
    return s;
}

double truncated_normal(Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, 1.0);
    double z = 0.0;
    do {
        z = dist(rng);
    } while (z < -2.0 || z > 2.0);
    return z * stddev;
}

std::string rng_state(const Rng& rng) {
    std::ostringstream out;
    out << rng;
    return out.str();
}

void restore_rng_state(Rng& rng, const std::string& state) {
    std::istringstream in(state);
    in >> rng;
    if (!in) {
        throw FormatVersionMismatch("corrupt generator state in checkpoint metadata");
    }
}

}  // namespace flowlm
