#include "peampc/rng.hpp"

#include <cmath>

namespace peampc {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = a;
    std::uint64_t h = splitmix64(s);
    s ^= b + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return splitmix64(s);
}

} // namespace

RngStream RngStream::keyed(std::uint64_t master, std::uint64_t run,
                           std::uint64_t step, RngPurpose purpose) {
    std::uint64_t k = mix(master, 0x5bf0'3635'dead'beefULL);
    k = mix(k, run);
    k = mix(k, step);
    k = mix(k, static_cast<std::uint64_t>(purpose));
    return RngStream(k);
}

std::uint64_t RngStream::next_u64() { return splitmix64(state_); }

double RngStream::next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::next_open_double() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
}

double RngStream::next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
}

double RngStream::next_gaussian() {
    const double u1 = next_open_double();
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

std::uint64_t RngStream::next_below(std::uint64_t n) {
    // Rejection to avoid modulo bias.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
}

} // namespace peampc
