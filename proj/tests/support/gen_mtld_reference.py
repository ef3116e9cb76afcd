#!/usr/bin/env python3
# Straightforward MTLD reference: recomputes the type-token ratio of the
# current segment from scratch at every step. Writes mtld_reference.hpp.
import os
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
TEXTS = os.path.join(HERE, "..", "fixtures", "mtld_texts.txt")
OUT = os.path.join(HERE, "mtld_reference.hpp")
THRESHOLD = 0.72


def one_pass(tokens):
    factors = 0.0
    start = 0
    for end in range(1, len(tokens) + 1):
        seg = tokens[start:end]
        if len(set(seg)) / len(seg) < THRESHOLD:
            factors += 1.0
            start = end
    rest = tokens[start:]
    if rest:
        factors += (1.0 - len(set(rest)) / len(rest)) / (1.0 - THRESHOLD)
    return float(len(tokens)) if factors == 0 else len(tokens) / factors


def mtld(tokens):
    return (one_pass(tokens) + one_pass(tokens[::-1])) / 2.0


def main():
    lines = [l.split() for l in open(TEXTS).read().splitlines() if l.strip()]
    with open(OUT, "w") as f:
        f.write("#pragma once\n// Generated by gen_mtld_reference.py from fixtures/mtld_texts.txt.\n\n")
        f.write("#include <array>\n\nnamespace sensor::testing {\n\n")
        f.write("inline constexpr std::array<double, %d> kMtldReference{{\n" % len(lines))
        for toks in lines:
            f.write("    %r,\n" % mtld(toks))
        f.write("}};\n\n}  // namespace sensor::testing\n")


if __name__ == "__main__":
    sys.exit(main())
