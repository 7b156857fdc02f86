#pragma once

#include <array>
#include <cstdint>

namespace sinewich {

/// Counter-based random stream (Philox4x32-10) keyed by (seed, streamId).
///
/// The 128-bit Philox counter holds the block index in its low half and the
/// stream id in its high half, so two streams with different ids never share
/// a block. The raw integer sequence depends only on (seed, streamId, call
/// order). Instances are single-owner; split work across stream ids instead
/// of sharing one stream between threads.
class RandomStream {
public:
    RandomStream(std::uint64_t seed, std::uint64_t stream_id) noexcept;

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream_id() const noexcept { return stream_id_; }

    std::uint64_t next_u64() noexcept;
    /// Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept;
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller; the second variate of each pair is cached.
    double normal() noexcept;
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept;

    /// One Philox4x32-10 block; exposed for known-answer tests.
    static std::array<std::uint32_t, 4> philox(std::array<std::uint32_t, 4> counter,
                                               std::array<std::uint32_t, 2> key) noexcept;

private:
    void refill() noexcept;

    std::uint64_t seed_;
    std::uint64_t stream_id_;
    std::uint64_t block_ = 0;
    std::array<std::uint32_t, 4> buffer_{};
    int buffered_ = 0;  // 64-bit words left in buffer_ (0..2)
    double spare_normal_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace sinewich
