"""Small file formats shared across the package.

Three formats live here: flat key-value config text, a plain text matrix
format with a 3-integer header line, and 8-bit binary PGM for visual dumps.
All float emission goes through ``fmt_float`` (shortest round-trip repr of a
builtin float) so that repeated runs write byte-identical files.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "fmt_float",
    "read_kv",
    "write_kv",
    "load_matrix",
    "save_matrix",
    "read_pgm",
    "write_pgm",
]


def fmt_float(x) -> str:
    """Shortest round-trip decimal form of a float64 value."""
    return repr(float(x))


def write_kv(path, mapping: dict) -> None:
    """Write a flat key-value config file, keys sorted, one `key = value` per line."""
    lines = []
    for key in sorted(mapping):
        value = mapping[key]
        if isinstance(value, float):
            value = fmt_float(value)
        lines.append(f"{key} = {value}\n")
    with open(path, "w") as fh:
        fh.writelines(lines)


def read_kv(path) -> dict:
    """Read a flat key-value config file into a str -> str dict."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if not key:
                raise ValueError(f"{path}:{lineno}: empty key")
            out[key] = value.strip()
    return out


def save_matrix(path, matrix: np.ndarray, header: tuple[int, int, int]) -> None:
    """Write a 2-D float matrix as text under a 3-integer header line.

    The header carries format-specific metadata (e.g. dictionary files store
    (n_l, n_lambda, d)); the body is one row per line, full precision.
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.ndim != 2:
        raise ValueError("save_matrix expects a 2-D array")
    h0, h1, h2 = (int(v) for v in header)
    with open(path, "w") as fh:
        fh.write(f"{h0} {h1} {h2}\n")
        for row in matrix:
            fh.write(" ".join(fmt_float(v) for v in row))
            fh.write("\n")


def load_matrix(path) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Read a matrix written by :func:`save_matrix`; returns (matrix, header)."""
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 3:
            raise ValueError(f"{path}: expected a 3-integer header line")
        header = tuple(int(v) for v in head)
        rows = [[float(v) for v in line.split()] for line in fh if line.strip()]
    if rows:
        width = len(rows[0])
        if any(len(r) != width for r in rows):
            raise ValueError(f"{path}: ragged rows")
    matrix = np.array(rows, dtype=float)
    return matrix, header  # type: ignore[return-value]


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D array as binary 8-bit PGM, clamping and rounding to 0..255."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError("write_pgm expects a 2-D array")
    pix = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM into a 2-D float array."""
    with open(path, "rb") as fh:
        data = fh.read()
    # header: magic, width, height, maxval; comments start with '#'
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        tokens.append(data[start:i])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, got {maxval}")
    i += 1  # single whitespace after maxval
    pix = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=i)
    return pix.reshape(h, w).astype(float)
