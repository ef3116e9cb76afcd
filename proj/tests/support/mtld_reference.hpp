#pragma once
// Generated by gen_mtld_reference.py from fixtures/mtld_texts.txt.

#include <array>

namespace sensor::testing {

inline constexpr std::array<double, 20> kMtldReference{{
    2.0,
    50.0,
    3.076923076923077,
    67.75999999999999,
    61.74000000000001,
    4.0,
    8.0,
    40.320000000000014,
    90.71999999999997,
    3.5,
    111.99999999999991,
    1.0,
    6.0,
    2.75,
    25.0,
    5.0,
    12.767045454545453,
    2.0,
    16.0,
    6.333333333333333,
}};

}  // namespace sensor::testing
