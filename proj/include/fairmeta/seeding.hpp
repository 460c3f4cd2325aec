#pragma once

#include <cstdint>
#include <initializer_list>

namespace fairmeta {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Independent sub-seed for a (base, stream, indices...) coordinate.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) noexcept {
    std::uint64_t h = mix64(base);
    for (std::uint64_t p : path) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
    return h;
}

namespace seed_stream {
inline constexpr std::uint64_t init = 1;
inline constexpr std::uint64_t train_episodes = 2;
inline constexpr std::uint64_t val_episodes = 3;
inline constexpr std::uint64_t test_episodes = 4;
inline constexpr std::uint64_t data = 5;
} // namespace seed_stream

} // namespace fairmeta
