#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace flowlm {

using Rng = std::mt19937_64;

/// 64-bit FNV-1a. Used for fingerprints and for deriving child seeds.
class Fnv1a {
public:
    void update(const void* data, std::size_t size) noexcept {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < size; ++i) {
            state_ ^= bytes[i];
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) noexcept { update(s.data(), s.size()); }
    template <typename T>
    void update_value(const T& v) noexcept {
        update(&v, sizeof(T));
    }
    std::uint64_t digest() const noexcept { return state_; }
    std::string hex() const;

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string to_hex(std::uint64_t v);
std::uint64_t fnv1a(std::string_view s) noexcept;
std::uint64_t splitmix64(std::uint64_t x) noexcept;

/// Fingerprint of a file's bytes ("fnv1a64:<hex>").
std::string file_fingerprint(const std::string& path);

/// Seed of the named child stream of a root seed: splitmix64(root ^ fnv1a(name)).
std::uint64_t child_seed(std::uint64_t root, std::string_view name) noexcept;

/// Independent generators split from one root seed. Consuming one stream never
/// perturbs another.
struct SeedStreams {
    std::uint64_t root = 0;
    Rng init;     // parameter initialisation
    Rng sampler;  // training segment start indices
    Rng masking;  // MLM position selection and corruption
    Rng dropout;  // dropout masks
};

SeedStreams seed_all(std::uint64_t root);

/// Normal(0, stddev) resampled until it lies within two standard deviations.
double truncated_normal(Rng& rng, double stddev);

std::string rng_state(const Rng& rng);
void restore_rng_state(Rng& rng, const std::string& state);

}  // namespace flowlm
