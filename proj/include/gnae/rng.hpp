#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace gnae {

// Deterministic random streams. Every consumer derives its own stream from
// (master seed, purpose tag, index) so adding a consumer never shifts the
// draws seen by another.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    static Rng derive(std::uint64_t master, std::string_view tag, std::uint64_t index = 0) {
        std::uint64_t h = 0xcbf29ce484222325ull;
        h = (h ^ master) * 0x100000001b3ull;
        for (char c : tag) {
            h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ull;
        }
        h ^= index + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
        return Rng(splitmix(h));
    }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(gen_); }

    double normal() { return normal_(gen_); }

    // uniform over {0, ..., n-1}
    int uniform_int(int n) { return std::uniform_int_distribution<int>(0, n - 1)(gen_); }

    bool bernoulli(double p) { return uniform() < p; }

private:
    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    std::mt19937_64 gen_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

} // namespace gnae
