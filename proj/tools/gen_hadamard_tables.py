#!/usr/bin/env python3
"""Generate include/modex/hadamard_tables.hpp.

Orders reachable by the Paley constructions are built here:
  Paley I  (q prime, q = 3 mod 4): order q + 1      -> 12, 20, 44, 60, 108, 140
  Paley II (q prime, q = 1 mod 4): order 2 (q + 1)  -> 36, 76
The remaining orders (28, 40, 52, 156, 172) come from N. J. A. Sloane's library
of Hadamard matrices; pass a torch file holding them (as shipped with brevitas,
brevitas/graph/hadamard_tensors.pt) via --library.
"""
import argparse
import numpy as np

PALEY1 = {12: 11, 20: 19, 44: 43, 60: 59, 108: 107, 140: 139}
PALEY2 = {36: 17, 76: 37}
LIBRARY = [28, 40, 52, 156, 172]
ORDERS = [12, 20, 28, 36, 40, 44, 52, 60, 76, 108, 140, 156, 172]


def legendre(a, q):
    a %= q
    if a == 0:
        return 0
    return 1 if pow(a, (q - 1) // 2, q) == 1 else -1


def jacobsthal(q):
    return np.array([[legendre(j - i, q) for j in range(q)] for i in range(q)], dtype=np.int64)


def paley1(q):
    n = q + 1
    s = np.zeros((n, n), dtype=np.int64)
    s[0, 1:] = 1
    s[1:, 0] = -1
    s[1:, 1:] = jacobsthal(q)
    return np.eye(n, dtype=np.int64) + s


def paley2(q):
    n = q + 1
    c = np.zeros((n, n), dtype=np.int64)
    c[0, 1:] = 1
    c[1:, 0] = 1
    c[1:, 1:] = jacobsthal(q)
    a = np.array([[1, 1], [1, -1]])
    b = np.array([[1, -1], [-1, -1]])
    return np.kron(c, a) + np.kron(np.eye(n, dtype=np.int64), b)


def encode_row(row):
    bits = ''.join('1' if v > 0 else '0' for v in row)
    bits += '0' * (-len(bits) % 4)
    return ''.join('%x' % int(bits[i:i + 4], 2) for i in range(0, len(bits), 4))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument('--library', required=True)
    ap.add_argument('--out', required=True)
    args = ap.parse_args()

    import torch
    lib = torch.load(args.library, weights_only=True)
    tables = {}
    for b, q in PALEY1.items():
        tables[b] = paley1(q)
    for b, q in PALEY2.items():
        tables[b] = paley2(q)
    for b in LIBRARY:
        tables[b] = lib['get_had%d' % b].numpy().astype(np.int64)
    for b in ORDERS:
        h = tables[b]
        assert h.shape == (b, b)
        assert (h @ h.T == b * np.eye(b, dtype=np.int64)).all(), b

    with open(args.out, 'w') as f:
        f.write('#pragma once\n\n')
        f.write('// Generated by tools/gen_hadamard_tables.py. Do not edit.\n')
        f.write('// Each row is a big-endian bit string in hex: bit 1 -> +1, bit 0 -> -1.\n\n')
        f.write('#include <array>\n#include <cstddef>\n#include <string_view>\n\n')
        f.write('namespace modex::detail {\n\n')
        f.write('struct base_hadamard_table {\n  std::size_t order;\n  const std::string_view* rows;\n};\n\n')
        for b in ORDERS:
            f.write('inline constexpr std::string_view had%d_rows[%d] = {\n' % (b, b))
            for row in tables[b]:
                f.write('    "%s",\n' % encode_row(row))
            f.write('};\n\n')
        f.write('inline constexpr std::array<base_hadamard_table, %d> base_hadamard_tables = {{\n' % len(ORDERS))
        for b in ORDERS:
            f.write('    {%d, had%d_rows},\n' % (b, b))
        f.write('}};\n\n}  // namespace modex::detail\n')


if __name__ == '__main__':
    main()
