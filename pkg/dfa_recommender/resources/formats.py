"""
Plain-text formats for posterior draws, point estimates and MF models.

A draw file starts with ``# m=<users> n=<items> b0=<baseline>`` and holds one
draw per line with tab-separated fields::

    iteration  K  A-bits  B-bits  theta  rho  tau  pB

``A-bits`` and ``B-bits`` are the row-major 0/1 strings of A (m x K) and
B (n x K); ``theta`` and ``rho`` are comma-separated decimals. Floats are
written with ``repr`` so every draw re-parses to identical values.
"""
import logging
import re
from typing import List, Sequence, Tuple

import numpy as np

from ..exceptions import ParseError
from ..model.baseline_mf import MfModel
from ..model.core import BASELINE, FeatureAllocation, McmcDraw, ModelParams

logger = logging.getLogger(__name__)

DRAW_FIELDS = 8
_HEADER = re.compile(r"#\s*m=(\d+)\s+n=(\d+)(?:\s+b0=(\S+))?")


def _floats(values: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in values)


def _parse_floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")]) if text else np.zeros(0)


def _bits(M: np.ndarray) -> str:
    return "".join("1" if v else "0" for v in np.asarray(M).ravel())


def _parse_bits(text: str, shape: Tuple[int, int]) -> np.ndarray:
    if len(text) != shape[0] * shape[1] or set(text) - {"0", "1"}:
        raise ValueError(f"expected {shape[0] * shape[1]} binary digits")
    if not text:
        return np.zeros(shape, dtype=np.int8)
    return (np.frombuffer(text.encode(), dtype=np.uint8) - ord("0")).astype(np.int8).reshape(shape)


def draw_header(m: int, n: int, b0: float = BASELINE) -> str:
    return f"# m={m} n={n} b0={float(b0)!r}"


def format_draw(draw: McmcDraw) -> str:
    fields = [
        str(draw.iteration),
        str(draw.K),
        _bits(draw.allocation.A),
        _bits(draw.allocation.B),
        _floats(draw.params.theta),
        _floats(draw.params.rho),
        repr(float(draw.params.tau)),
        repr(float(draw.pB)),
    ]
    return "\t".join(fields)


def parse_draw(line: str, m: int, n: int, b0: float = BASELINE) -> McmcDraw:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != DRAW_FIELDS:
        raise ValueError(f"expected {DRAW_FIELDS} tab-separated fields, got {len(fields)}")
    iteration, K = int(fields[0]), int(fields[1])
    A = _parse_bits(fields[2], (m, K))
    B = _parse_bits(fields[3], (n, K))
    params = ModelParams(_parse_floats(fields[4]), _parse_floats(fields[5]), float(fields[6]), b0)
    return McmcDraw(FeatureAllocation(A, B), params, iteration, float(fields[7]))


def write_draws(path: str, draws: Sequence[McmcDraw], m: int, n: int) -> str:
    b0 = draws[0].params.b0 if draws else BASELINE
    with open(path, "w") as f:
        f.write(draw_header(m, n, b0) + "\n")
        for draw in draws:
            f.write(format_draw(draw) + "\n")
    logger.info(f"Wrote {len(draws)} draws to {path}")
    return path


def read_draws(path: str) -> Tuple[int, int, List[McmcDraw]]:
    """
    Read a draw file

    Args:
        path: Draw file written by ``write_draws``

    Returns:
        Tuple of (m, n, draws)

    Raises:
        ParseError: on a malformed header or draw line, with its line number
    """
    with open(path) as f:
        lines = f.read().splitlines()
    header = _HEADER.fullmatch(lines[0].strip()) if lines else None
    if header is None:
        raise ParseError("draw file must start with '# m=<users> n=<items>'", 1)
    m, n = int(header.group(1)), int(header.group(2))
    b0 = float(header.group(3)) if header.group(3) else BASELINE

    draws = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            draws.append(parse_draw(line, m, n, b0))
        except ValueError as e:
            raise ParseError(str(e), line_no)
    logger.info(f"Read {len(draws)} draws from {path}")
    return m, n, draws


def write_bit_matrix(path: str, M: np.ndarray) -> str:
    """One line of 0/1 characters per row."""
    M = np.asarray(M)
    with open(path, "w") as f:
        f.write(f"# rows={M.shape[0]} cols={M.shape[1]}\n")
        for row in M:
            f.write(_bits(row) + "\n")
    return path


def read_bit_matrix(path: str) -> np.ndarray:
    with open(path) as f:
        lines = f.read().splitlines()
    found = re.fullmatch(r"#\s*rows=(\d+)\s+cols=(\d+)", lines[0].strip()) if lines else None
    if found is None:
        raise ParseError("bit matrix must start with '# rows=<r> cols=<c>'", 1)
    rows, cols = int(found.group(1)), int(found.group(2))
    body = lines[1:1 + rows]
    if len(body) != rows:
        raise ParseError(f"expected {rows} rows, got {len(body)}")
    try:
        return _parse_bits("".join(line.strip() for line in body), (rows, cols))
    except ValueError as e:
        raise ParseError(str(e))


def write_vector(path: str, values: np.ndarray) -> str:
    with open(path, "w") as f:
        for v in np.asarray(values, dtype=float):
            f.write(repr(float(v)) + "\n")
    return path


def read_vector(path: str) -> np.ndarray:
    with open(path) as f:
        return np.array([float(line) for line in f if line.strip()])


def write_mf_model(path: str, model: MfModel) -> str:
    """Header ``k m n`` followed by the rows of P and then the rows of Q."""
    with open(path, "w") as f:
        f.write(f"{model.k} {model.P.shape[1]} {model.Q.shape[1]}\n")
        for row in [*model.P, *model.Q]:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")
    logger.info(f"Wrote rank-{model.k} MF model to {path}")
    return path


def read_mf_model(path: str) -> MfModel:
    with open(path) as f:
        lines = [line for line in f.read().splitlines() if line.strip()]
    try:
        k, m, n = (int(v) for v in lines[0].split())
        P = np.array([[float(v) for v in line.split()] for line in lines[1:1 + k]])
        Q = np.array([[float(v) for v in line.split()] for line in lines[1 + k:1 + 2 * k]])
    except (ValueError, IndexError) as e:
        raise ParseError(f"malformed MF model file: {e}")
    if P.shape != (k, m) or Q.shape != (k, n):
        raise ParseError(f"factor shapes {P.shape}, {Q.shape} do not match header {k} {m} {n}")
    return MfModel(k, P, Q)
