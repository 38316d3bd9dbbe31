"""
Incremental cell enumeration for central hyperplane arrangements.

Each coarsening-phase subject x_t defines the hyperplane {β : (1, x_tᵀ)β = 0}
in LES coefficient space. A cell is labelled by the side of every hyperplane
it lies on; its witness is an interior coefficient vector, i.e. one LES rule.
Hyperplanes are inserted one at a time and every surviving label is extended
by + and −, keeping the extensions whose slack LP is feasible. Each child LP
starts from its parent's optimal basis. An infeasible label never has
feasible extensions, so the frontier stays at most Harding(t, J) long.
"""
import itertools
import json
import logging
import math
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .conf import get_setting
from .core import LesRule, UniformRandom, as_covariates
from .exceptions import DimensionMismatchError, InvariantViolationError
from .lpfeas import MINUS, PLUS, FeasibilityStatus, bound_system, solve_units

logger = logging.getLogger(__name__)

DEDUP_TOLERANCE = 1e-12

SIGN_CHARS = {PLUS: '+', MINUS: '-'}
CHAR_SIGNS = {'+': PLUS, '-': MINUS}


def harding(t: int, J: int) -> int:
    """2·Σ_{j=0}^{J} C(t−1, j): the most signed partitions of t points by central hyperplanes."""
    if t < 2:
        raise InvariantViolationError(f"Harding number needs t >= 2, got {t}")
    if J < 0:
        raise InvariantViolationError(f"Harding number needs J >= 0, got {J}")
    return 2 * sum(math.comb(t - 1, j) for j in range(J + 1))


@dataclass(frozen=True)
class CellLabel:
    """Signs (+1/−1) of a cell with respect to each deduplicated hyperplane, in insertion order."""
    signs: Tuple[int, ...]

    def __str__(self):
        return ''.join(SIGN_CHARS[s] for s in self.signs)

    def __len__(self):
        return len(self.signs)

    @classmethod
    def parse(cls, text):
        try:
            return cls(tuple(CHAR_SIGNS[ch] for ch in text.strip()))
        except KeyError:
            raise InvariantViolationError(f"Cell labels use only '+' and '-', got {text!r}") from None

    def mirror(self):
        return CellLabel(tuple(-s for s in self.signs))


@dataclass(frozen=True)
class CellCatalog:
    """
    The coarsened LES class: one (label, witness) per nonempty cell, the
    deduplicated hyperplane rows (1, xᵀ), and the map from each original point
    to its hyperplane.
    """
    labels: Tuple[CellLabel, ...]
    witnesses: np.ndarray
    hyperplanes: np.ndarray
    dedup_map: Tuple[int, ...]
    dim: int

    def __len__(self):
        return len(self.labels)

    @property
    def cells(self):
        return list(zip(self.labels, self.witnesses))

    @property
    def n_hyperplanes(self):
        return int(self.hyperplanes.shape[0])

    def sign_matrix(self):
        """Cells x hyperplanes matrix of ±1."""
        return np.array([label.signs for label in self.labels], dtype=np.int8).reshape(len(self), -1)

    def experts(self):
        return [LesRule(tuple(w)) for w in self.witnesses]

    def write(self, csv_path):
        """CSV of label, beta_0..beta_J plus a JSON sidecar with hyperplanes and dedup_map."""
        csv_path = Path(csv_path)
        frame = pd.DataFrame(self.witnesses, columns=[f'beta_{j}' for j in range(self.dim + 1)])
        frame.insert(0, 'label', [str(label) for label in self.labels])
        frame.to_csv(csv_path, index=False, float_format='%.17g')
        sidecar = {
            'dim': self.dim,
            'hyperplanes': self.hyperplanes.tolist(),
            'dedup_map': list(self.dedup_map),
        }
        sidecar_path = csv_path.with_suffix('.json')
        sidecar_path.write_text(json.dumps(sidecar, indent=2) + '\n', encoding='utf-8')
        return csv_path, sidecar_path

    @classmethod
    def read(cls, csv_path, sidecar_path=None):
        csv_path = Path(csv_path)
        sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix('.json')
        sidecar = json.loads(sidecar_path.read_text(encoding='utf-8'))
        frame = pd.read_csv(csv_path, dtype={'label': str}, keep_default_na=False, float_precision='round_trip')
        dim = int(sidecar['dim'])
        beta_columns = [f'beta_{j}' for j in range(dim + 1)]
        missing = [c for c in ['label'] + beta_columns if c not in frame.columns]
        if missing:
            raise InvariantViolationError(f"Catalog {csv_path} is missing columns {missing}")
        return cls(
            labels=tuple(CellLabel.parse(text) for text in frame['label']),
            witnesses=frame[beta_columns].to_numpy(dtype=float),
            hyperplanes=np.array(sidecar['hyperplanes'], dtype=float).reshape(-1, dim + 1),
            dedup_map=tuple(int(i) for i in sidecar['dedup_map']),
            dim=dim,
        )


def deduplicate(points, J) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """
    Augment each point to (1, xᵀ) and merge rows that coincide after scaling to
    unit norm with the first nonzero component positive.
    """
    rows, normalised, dedup_map = [], [], []
    for index, point in enumerate(points):
        x = as_covariates(point)
        if x.size != J:
            raise DimensionMismatchError(f"Coarsening point {index}", J, x.size)
        if not np.all(np.isfinite(x)):
            raise InvariantViolationError(f"Coarsening point {index} has non-finite entries")
        row = np.concatenate(([1.0], x))
        unit = row / np.linalg.norm(row)
        leading = unit[np.flatnonzero(unit)[0]]
        unit = unit if leading > 0 else -unit
        match = None
        if normalised:
            distance = np.max(np.abs(np.asarray(normalised) - unit), axis=1)
            hits = np.flatnonzero(distance <= DEDUP_TOLERANCE)
            if hits.size:
                match = int(hits[0])
        if match is None:
            match = len(rows)
            rows.append(row)
            normalised.append(unit)
        dedup_map.append(match)
    return np.array(rows).reshape(-1, J + 1), tuple(dedup_map)


class _Frontier:
    """
    Ordered store of (signs, witness, basis) triples. Past `spill_threshold`
    entries the buffer is written to .npz chunks in a temporary directory.
    """

    def __init__(self, spill_threshold):
        self.spill_threshold = spill_threshold
        self._signs, self._witnesses, self._bases = [], [], []
        self._chunks = []
        self._directory = None
        self._length = 0

    def __len__(self):
        return self._length

    def append(self, signs, witness, basis):
        self._signs.append(signs)
        self._witnesses.append(witness)
        self._bases.append(basis)
        self._length += 1
        if len(self._signs) >= self.spill_threshold:
            self._spill()

    def _spill(self):
        if self._directory is None:
            self._directory = Path(tempfile.mkdtemp(prefix='policylab-frontier-'))
        path = self._directory / f'chunk-{len(self._chunks):06d}.npz'
        np.savez(path, signs=np.array(self._signs, dtype=np.int8), witnesses=np.array(self._witnesses),
                 bases=np.array(self._bases, dtype=np.int64))
        logger.debug(f"Spilled {len(self._signs)} frontier labels to {path}")
        self._chunks.append(path)
        self._signs, self._witnesses, self._bases = [], [], []

    def __iter__(self):
        for path in self._chunks:
            with np.load(path) as chunk:
                yield from zip(chunk['signs'], chunk['witnesses'], (tuple(b) for b in chunk['bases']))
        yield from zip(self._signs, self._witnesses, self._bases)

    def close(self):
        if self._directory is not None:
            shutil.rmtree(self._directory, ignore_errors=True)
            self._directory = None


@dataclass(frozen=True)
class _LpOptions:
    bounds: Tuple[np.ndarray, np.ndarray]
    eps: float
    max_iter: int
    pivot_tol: float

    def solve(self, units, signs, basis):
        return solve_units(units, signs, self.bounds, basis=basis, eps=self.eps, max_iter=self.max_iter,
                           pivot_tol=self.pivot_tol)


def _label_text(signs):
    return ''.join(SIGN_CHARS[int(s)] for s in signs)


def _extend_label(parent, units, lp):
    """
    Children (signs, witness, basis) of one frontier label after adding
    units[-1], in (+, −) order. A parent witness strictly on one side of the
    new hyperplane already witnesses that child; the other child is solved
    from the parent's basis.
    """
    signs, witness, basis = parent
    slack = float(units[-1] @ witness)
    side = PLUS if slack > lp.eps else MINUS if slack < -lp.eps else None
    children = []
    for sign in (PLUS, MINUS):
        child = np.append(np.asarray(signs, dtype=np.int8), np.int8(sign))
        if sign == side:
            children.append((child, witness, basis))
            continue
        result = lp.solve(units, child, basis)
        if result.status is FeasibilityStatus.FEASIBLE:
            children.append((child, result.witness, result.basis))
        elif result.status is FeasibilityStatus.DEGENERATE:
            logger.warning(f"Degenerate LP for label {_label_text(child)}; treating it as empty")
    return children


def _recentre_label(entry, units, lp):
    """Optimal witness against every hyperplane, warm-started from the stored basis."""
    signs, witness, basis = entry
    result = lp.solve(units, signs, basis)
    if result.status is FeasibilityStatus.FEASIBLE:
        return signs, result.witness
    logger.warning(f"Re-centring LP for label {_label_text(signs)} returned {result.status.value}; "
                   f"keeping the incremental witness")
    return signs, witness


class _Pool:
    """
    Maps a function over frontier entries in order. Work goes to a process
    pool once the frontier reaches `min_frontier` entries, in batches of at
    most `batch_size` so spilled chunks are never all loaded at once.
    """

    def __init__(self, workers, min_frontier, batch_size):
        self.workers = workers or 1
        self.min_frontier = min_frontier
        self.batch_size = batch_size
        self._executor = None

    def map(self, function, frontier):
        if self.workers <= 1 or len(frontier) < self.min_frontier:
            for entry in frontier:
                yield function(entry)
            return
        if self._executor is None:
            self._executor = ProcessPoolExecutor(max_workers=self.workers)
        entries = iter(frontier)
        while True:
            batch = list(itertools.islice(entries, self.batch_size))
            if not batch:
                return
            chunksize = max(1, len(batch) // (4 * self.workers))
            yield from self._executor.map(function, batch, chunksize=chunksize)

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None


def enumerate_cells(points: Sequence, J: int, workers: Optional[int] = None, recentre: bool = True) -> CellCatalog:
    """
    Enumerate the nonempty cells of the arrangement defined by `points`.

    Cells of a central arrangement come in mirror pairs (s, −s) with witnesses
    (β, −β), so only labels starting with + are grown and the rest are their
    mirrors. Labels come out in lexicographic order with + before −, so
    catalogs are identical across runs and worker counts. With `recentre`
    every witness is the slack-maximising point of its cell against the full
    constraint set.
    """
    points = list(points)
    if not points:
        raise InvariantViolationError("Cell enumeration needs at least one point")
    if J < 1:
        raise InvariantViolationError(f"Cell enumeration needs J >= 1, got {J}")
    workers = get_setting('ENUMERATION_WORKERS') if workers is None else workers
    spill = get_setting('FRONTIER_SPILL_THRESHOLD')
    lp = _LpOptions(
        bounds=bound_system(J + 1, float(get_setting('LP_BOX_BOUND'))),
        eps=get_setting('LP_FEASIBILITY_EPS'),
        max_iter=get_setting('LP_MAX_ITER'),
        pivot_tol=get_setting('LP_PIVOT_TOL'),
    )

    hyperplanes, dedup_map = deduplicate(points, J)
    units = hyperplanes / np.linalg.norm(hyperplanes, axis=1)[:, None]
    t_total = hyperplanes.shape[0]
    logger.info(f"Enumerating cells for {len(points)} points ({t_total} distinct hyperplanes, J={J}, "
                f"{workers} worker(s))")

    root = lp.solve(units[:1], np.array([PLUS], dtype=np.int8), None)
    if not root.feasible:
        raise InvariantViolationError(f"A single half-space came out {root.status.value}")
    frontier = _Frontier(spill)
    frontier.append(np.array([PLUS], dtype=np.int8), root.witness, root.basis)
    pool = _Pool(workers, get_setting('PARALLEL_MIN_FRONTIER'), get_setting('ENUMERATION_BATCH'))
    try:
        for t in range(2, t_total + 1):
            extend = partial(_extend_label, units=units[:t], lp=lp)
            next_frontier = _Frontier(spill)
            for children in pool.map(extend, frontier):
                for child in children:
                    next_frontier.append(*child)
            frontier.close()
            frontier = next_frontier
            logger.debug(f"Hyperplane {t}/{t_total}: {2 * len(frontier)} cells")

        if recentre:
            cells = list(pool.map(partial(_recentre_label, units=units, lp=lp), frontier))
        else:
            cells = [(signs, witness) for signs, witness, _ in frontier]
    finally:
        pool.close()
        frontier.close()

    half = [(CellLabel(tuple(int(s) for s in signs)), np.asarray(witness, dtype=float)) for signs, witness in cells]
    mirrored = [(label.mirror(), -witness) for label, witness in reversed(half)]
    labels = [label for label, _ in half + mirrored]
    witnesses = [witness for _, witness in half + mirrored]

    bound = harding(max(t_total, 2), J)
    if len(labels) > bound:
        raise InvariantViolationError(f"Found {len(labels)} cells, more than Harding({t_total}, {J}) = {bound}")
    logger.info(f"Cell enumeration finished: {len(labels)} cells (Harding bound {bound})")
    return CellCatalog(
        labels=tuple(labels),
        witnesses=np.array(witnesses).reshape(len(labels), J + 1),
        hyperplanes=hyperplanes,
        dedup_map=dedup_map,
        dim=J,
    )


def coarsen_les(points: Sequence, J: int, catalog: Optional[CellCatalog] = None, workers=None) -> List:
    """
    One LES rule per cell plus the uniform random expert. On the coarsening
    points every LES assignment pattern is produced by exactly one returned rule.
    """
    catalog = enumerate_cells(points, J, workers=workers) if catalog is None else catalog
    if catalog.dim != J:
        raise DimensionMismatchError("Imported catalog", J, catalog.dim)
    return catalog.experts() + [UniformRandom()]
