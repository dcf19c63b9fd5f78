#pragma once

// binary16 <-> binary32 conversion. Round-to-nearest-even on the way
// down; exact on the way up. No FP16 hardware assumptions — pure bit
// manipulation, so results are identical across machines.

#include <cstdint>
#include <cstring>

namespace gsq {

inline uint16_t f32_to_f16(float f) {
    uint32_t x;
    std::memcpy(&x, &f, 4);
    uint32_t sign = (x >> 16) & 0x8000u;
    uint32_t mant = x & 0x007FFFFFu;
    int32_t exp = static_cast<int32_t>((x >> 23) & 0xFF) - 127 + 15;

    if (((x >> 23) & 0xFF) == 0xFF)  // inf / nan
        return static_cast<uint16_t>(sign | 0x7C00u | (mant ? 0x0200u : 0u));
    if (exp >= 0x1F)  // overflow -> inf
        return static_cast<uint16_t>(sign | 0x7C00u);
    if (exp <= 0) {  // subnormal or zero
        if (exp < -10) return static_cast<uint16_t>(sign);
        mant |= 0x00800000u;  // implicit leading 1
        int shift = 14 - exp;
        uint32_t half = mant >> shift;
        uint32_t rem = mant & ((1u << shift) - 1);
        uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half & 1u))) half++;
        return static_cast<uint16_t>(sign | half);
    }
    uint32_t half = (static_cast<uint32_t>(exp) << 10) | (mant >> 13);
    uint32_t rem = mant & 0x1FFFu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) half++;  // may carry into exp: correct
    return static_cast<uint16_t>(sign | half);
}

inline float f16_to_f32(uint16_t h) {
    uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
    uint32_t exp = (h >> 10) & 0x1Fu;
    uint32_t mant = h & 0x3FFu;
    uint32_t x;
    if (exp == 0) {
        if (mant == 0) {
            x = sign;
        } else {  // subnormal: normalize
            int e = -1;
            do {
                mant <<= 1;
                e++;
            } while (!(mant & 0x400u));
            x = sign | (static_cast<uint32_t>(112 - e) << 23) | ((mant & 0x3FFu) << 13);
        }
    } else if (exp == 0x1F) {
        x = sign | 0x7F800000u | (mant << 13);
    } else {
        x = sign | ((exp + 112) << 23) | (mant << 13);
    }
    float f;
    std::memcpy(&f, &x, 4);
    return f;
}

// Largest finite binary16 magnitude; scales beyond this cannot be stored.
constexpr float kF16Max = 65504.0f;

inline float f16_round(float f) { return f16_to_f32(f32_to_f16(f)); }

}  // namespace gsq
