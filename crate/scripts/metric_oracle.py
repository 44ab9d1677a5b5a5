#!/usr/bin/env python3
"""Brute-force reference values for the metric tests.

Writes crates/core/tests/fixtures/metric_oracles.json. Everything here is
deliberately naive: direct 2-D window sums for SSIM, exhaustive subsequence
enumeration for LCS, plain loops for the rest. Standard library only.
"""

import itertools
import json
import math
import os
import sys

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "fixtures", "metric_oracles.json")


def psnr(ref, test, peak=1.0):
    n = 0
    se = 0.0
    for a, b in zip(flat(ref), flat(test)):
        se += (a - b) ** 2
        n += 1
    mse = se / n
    if mse == 0.0:
        return "inf"
    return 10.0 * math.log10(peak * peak / mse)


def flat(img):
    for row in img:
        for px in row:
            for v in px:
                yield v


def ssim(ref, test):
    h, w, c = len(ref), len(ref[0]), len(ref[0][0])
    size, sigma = 11, 1.5
    r = size // 2
    g = [[math.exp(-((i - r) ** 2 + (j - r) ** 2) / (2 * sigma * sigma)) for j in range(size)] for i in range(size)]
    s = sum(sum(row) for row in g)
    g = [[v / s for v in row] for row in g]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    total = 0.0
    for ch in range(c):
        acc = 0.0
        count = 0
        for y0 in range(h - size + 1):
            for x0 in range(w - size + 1):
                ux = uy = 0.0
                for i in range(size):
                    for j in range(size):
                        ux += g[i][j] * ref[y0 + i][x0 + j][ch]
                        uy += g[i][j] * test[y0 + i][x0 + j][ch]
                vx = vy = cov = 0.0
                for i in range(size):
                    for j in range(size):
                        dx = ref[y0 + i][x0 + j][ch] - ux
                        dy = test[y0 + i][x0 + j][ch] - uy
                        vx += g[i][j] * dx * dx
                        vy += g[i][j] * dy * dy
                        cov += g[i][j] * dx * dy
                acc += ((2 * ux * uy + c1) * (2 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
                count += 1
        total += acc / count
    return total / c


def lcs(a, b):
    # Longest subsequence of the shorter string that is also a subsequence of the longer.
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for k in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), k):
            if is_subsequence("".join(short[i] for i in idx), long_):
                return k
    return 0


def is_subsequence(s, t):
    it = iter(t)
    return all(ch in it for ch in s)


def awdr(scenes):
    ratios = []
    for sc in scenes:
        matched = len({g for g, _ in sc["word_matches"]})
        ratios.append(matched / len(sc["gt_words"]))
    return sum(ratios) / len(ratios)


def ad_lcs(scenes):
    total = 0
    for sc in scenes:
        for g, d in sc["word_matches"]:
            total += lcs(sc["detections"][d], sc["gt_words"][g])
    return total / len(scenes)


def constant(h, w, c, v):
    return [[[v] * c for _ in range(w)] for _ in range(h)]


def pattern(h, w, c, salt):
    # Deterministic integer hash so the Rust side reads values, never regenerates them.
    img = []
    for y in range(h):
        row = []
        for x in range(w):
            px = []
            for ch in range(c):
                k = (y * 73856093 ^ x * 19349663 ^ ch * 83492791 ^ salt * 2654435761) & 0xFFFFFFFF
                k = (k * 1103515245 + 12345) & 0x7FFFFFFF
                px.append((k % 1024) / 1023.0)
            row.append(px)
        img.append(row)
    return img


def main():
    a = pattern(13, 15, 2, 1)
    noisy = [[[min(1.0, max(0.0, 0.7 * v + 0.3 * n)) for v, n in zip(p, q)] for p, q in zip(ra, rb)]
             for ra, rb in zip(a, pattern(13, 15, 2, 2))]
    ca, cb = constant(12, 12, 1, 0.3), constant(12, 12, 1, 0.7)

    ocr_two = [
        {"scene_id": "a", "gt_words": ["TURB", "NET", "TEXT", "CHART"], "detections": ["TURB", "NT", "TXT"],
         "word_matches": [[0, 0], [1, 1], [2, 2]]},
        {"scene_id": "b", "gt_words": ["E", "FOG"], "detections": ["E"], "word_matches": [[0, 0]]},
    ]
    ocr_cat = [{"scene_id": "cat", "gt_words": ["CAT", "DOG"], "detections": ["CAT", "DG"],
                "word_matches": [[0, 0], [1, 1]]}]
    ocr_perfect = [{"scene_id": "p", "gt_words": ["ABC", "DEFGH", "IJKLMNO"],
                    "detections": ["ABC", "DEFGH", "IJKLMNO"], "word_matches": [[0, 0], [1, 1], [2, 2]]}]
    ocr_none = [{"scene_id": "n", "gt_words": ["X", "YZ"], "detections": [], "word_matches": []}]

    lcs_pairs = [["ABCBDAB", "BDCABA"], ["", "ABC"], ["TURBNET", "TURBNET"], ["HELLO", "HLLO"],
                 ["AGGTAB", "GXTXAYB"], ["abc", "ABC"]]

    out = {
        "psnr": [
            {"name": "constant_1_vs_half", "ref": constant(4, 5, 3, 1.0), "test": constant(4, 5, 3, 0.5), "peak": 1.0,
             "value": psnr(constant(4, 5, 3, 1.0), constant(4, 5, 3, 0.5))},
            {"name": "pattern_vs_noisy", "ref": a, "test": noisy, "peak": 1.0, "value": psnr(a, noisy)},
            {"name": "pattern_vs_self", "ref": a, "test": a, "peak": 1.0, "value": psnr(a, a)},
        ],
        "ssim": [
            {"name": "constant_0.3_vs_0.7", "ref": ca, "test": cb, "value": ssim(ca, cb)},
            {"name": "pattern_vs_noisy", "ref": a, "test": noisy, "value": ssim(a, noisy)},
            {"name": "pattern_vs_self", "ref": a, "test": a, "value": ssim(a, a)},
        ],
        "lcs": [{"a": x, "b": y, "value": lcs(x, y)} for x, y in lcs_pairs],
        "ocr": [
            {"name": name, "scenes": sc, "awdr": awdr(sc), "ad_lcs": ad_lcs(sc)}
            for name, sc in [("two_scenes", ocr_two), ("cat_dog", ocr_cat), ("perfect", ocr_perfect), ("none", ocr_none)]
        ],
    }
    with open(OUT, "w") as f:
        json.dump(out, f, separators=(",", ":"))
        f.write("\n")
    print(f"wrote {os.path.normpath(OUT)}", file=sys.stderr)


if __name__ == "__main__":
    main()
