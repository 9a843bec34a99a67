#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

namespace pliv {

// xoshiro256** with splitmix64 seeding. Chosen over std::mt19937 because the
// whole generator state (4 words + the Box-Muller spare) serializes into a
// StreamState, and std engines have no portable state layout.
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
        has_spare_ = false;
        spare_ = 0.0;
    }

    static Rng child(uint64_t seed, uint64_t stream) {
        // derive a decorrelated sub-generator (per clip, per frame, ...)
        uint64_t x = seed ^ (0x9e3779b97f4a7c15ull * (stream + 1));
        Rng r;
        for (auto& w : r.s_) w = splitmix64(x);
        r.has_spare_ = false;
        r.spare_ = 0.0;
        return r;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0,1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = uint64_t(hi - lo) + 1;
        return lo + int64_t(next_u64() % span);
    }

    // standard normal via Box-Muller; the spare is part of the state
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    struct State {
        std::array<uint64_t, 4> s;
        bool has_spare;
        double spare;
        bool operator==(const State&) const = default;
    };

    State state() const { return State{s_, has_spare_, spare_}; }

    void set_state(const State& st) {
        s_ = st.s;
        has_spare_ = st.has_spare;
        spare_ = st.spare;
    }

private:
    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> s_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace pliv
