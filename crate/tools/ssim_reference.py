"""Freeze reference SSIM values for the Rust test-suite.

The image pairs come from the same 64-bit LCG the tests use, so both sides
regenerate identical pixels. Output goes to
crates/core/tests/fixtures/ssim_reference.json.
"""

import json
import pathlib

import numpy as np
from skimage.metrics import structural_similarity

MASK = (1 << 64) - 1


class Lcg:
    def __init__(self, seed):
        self.state = seed & MASK

    def next_byte(self):
        self.state = (self.state * 6364136223846793005 + 1442695040888963407) & MASK
        return self.state >> 56


def pair(index):
    rng = Lcg(1000 + index)
    w = 11 + (index * 7) % 23
    h = 11 + (index * 5) % 19
    a = np.array([rng.next_byte() for _ in range(w * h)], dtype=np.int64)
    if index % 2 == 0:
        noise = np.array([rng.next_byte() for _ in range(w * h)], dtype=np.int64)
        b = np.clip(a + (noise - 128) // 4, 0, 255)
    else:
        b = np.array([rng.next_byte() for _ in range(w * h)], dtype=np.int64)
    return w, h, a.reshape(h, w), b.reshape(h, w)


def main():
    cases = []
    for i in range(20):
        w, h, a, b = pair(i)
        value = structural_similarity(
            a.astype(np.float64),
            b.astype(np.float64),
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=255,
        )
        cases.append({"index": i, "width": w, "height": h, "inverted": False, "ssim": float(value)})
    # a against its photographic negative
    for i in (2, 5):
        w, h, a, _ = pair(i)
        value = structural_similarity(
            a.astype(np.float64),
            (255 - a).astype(np.float64),
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=255,
        )
        cases.append({"index": i, "width": w, "height": h, "inverted": True, "ssim": float(value)})
    out = pathlib.Path(__file__).resolve().parent.parent / "crates/core/tests/fixtures/ssim_reference.json"
    out.write_text(json.dumps(cases, indent=1) + "\n")


if __name__ == "__main__":
    main()
