#!/usr/bin/env python3
"""Regenerate the bundled calibration fixtures.

The .gsqt files are committed; this script documents exactly how they
were produced. Weight entries are N(0, 0.1^2), activations N(0, 1),
from a fixed Mersenne-Twister seed (independent of the library's own
counter-based generator on purpose).
"""
import random
import struct
from pathlib import Path

HERE = Path(__file__).resolve().parent


def write_gsqt(path: Path, rows: int, cols: int, values) -> None:
    blob = b"GSQT"
    blob += struct.pack("<H", 1)   # container version
    blob += struct.pack("<B", 0)   # dtype f32
    blob += struct.pack("<B", 2)   # rank
    blob += struct.pack("<QQ", rows, cols)
    blob += struct.pack(f"<{rows * cols}f", *values)
    path.write_bytes(blob)


def main() -> None:
    rng = random.Random(20240817)
    w = [rng.gauss(0.0, 0.1) for _ in range(64 * 64)]
    write_gsqt(HERE / "weights_64x64.gsqt", 64, 64, w)
    x = [rng.gauss(0.0, 1.0) for _ in range(256 * 64)]
    write_gsqt(HERE / "calib_256x64.gsqt", 256, 64, x)
    print("wrote weights_64x64.gsqt calib_256x64.gsqt")


if __name__ == "__main__":
    main()
