"""Streaming accumulation of the inner-product sufficient statistics.

A store holds ``y'y``, ``X'y``, ``A_p'y``, ``X'X``, ``X'A_p`` and
``A_p'A_q`` (``p <= q`` only). Stores are additive: accumulating blocks one
after another, or accumulating them separately and merging, gives the same
result up to floating-point reassociation.
"""

import json
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDataError, InvalidInputError, ModelFormatError, NumericalInconsistencyError

STORE_FORMAT = "mamm-store"
STORE_VERSION = 1


@dataclass
class InnerProductStore:
    m_yy: float
    m_0: np.ndarray
    m_p: list
    M_00: np.ndarray
    M_0p: list
    M_pq: dict
    N_seen: int = 0
    finalized: bool = field(default=False, compare=False)

    @property
    def K(self):
        return self.m_0.shape[0]

    @property
    def widths(self):
        return tuple(m.shape[0] for m in self.m_p)

    @property
    def P(self):
        return len(self.m_p)

    def pair(self, p, q):
        """``A_p' A_q`` for any ordered pair, transposing the stored block if needed."""
        return self.M_pq[(p, q)] if p <= q else self.M_pq[(q, p)].T

    def copy(self):
        return InnerProductStore(
            float(self.m_yy), self.m_0.copy(), [m.copy() for m in self.m_p], self.M_00.copy(),
            [M.copy() for M in self.M_0p], {k: v.copy() for k, v in self.M_pq.items()},
            self.N_seen, self.finalized,
        )

    def arrays(self):
        """Flat name -> array mapping, used for comparisons and serialization."""
        out = {"m_yy": np.array(self.m_yy), "m_0": self.m_0, "M_00": self.M_00}
        for p, m in enumerate(self.m_p):
            out[f"m_{p + 1}"] = m
            out[f"M_0_{p + 1}"] = self.M_0p[p]
        for (p, q), M in self.M_pq.items():
            out[f"M_{p + 1}_{q + 1}"] = M
        return out


def init_store(K, widths):
    if K < 1 or any(w < 1 for w in widths):
        raise InvalidInputError(f"need K >= 1 and widths >= 1, got K={K}, widths={tuple(widths)}")
    widths = [int(w) for w in widths]
    P = len(widths)
    return InnerProductStore(
        0.0,
        np.zeros(K),
        [np.zeros(w) for w in widths],
        np.zeros((K, K)),
        [np.zeros((K, w)) for w in widths],
        {(p, q): np.zeros((widths[p], widths[q])) for p in range(P) for q in range(p, P)},
    )


def _check_block(store, X, y, A_blocks):
    n = y.shape[0]
    if X.ndim != 2 or X.shape != (n, store.K):
        raise InvalidInputError(f"X block has shape {X.shape}, expected ({n}, {store.K})")
    if len(A_blocks) != store.P:
        raise InvalidInputError(f"got {len(A_blocks)} basis blocks for {store.P} terms")
    for p, (A, w) in enumerate(zip(A_blocks, store.widths)):
        if A.shape != (n, w):
            raise InvalidInputError(f"basis block {p + 1} has shape {A.shape}, expected ({n}, {w})")


def accumulate_block(store, X_block, y_block, A_blocks):
    """Add one block's inner products to ``store`` in place and return it."""
    if store.finalized:
        raise InvalidInputError("cannot accumulate into a finalized store")
    X = np.asarray(X_block, dtype=np.float64)
    y = np.asarray(y_block, dtype=np.float64).ravel()
    A_blocks = [np.asarray(A, dtype=np.float64) for A in A_blocks]
    _check_block(store, X, y, A_blocks)
    if y.size == 0:
        return store
    store.m_yy += float(y @ y)
    store.m_0 += X.T @ y
    store.M_00 += X.T @ X
    for p, A in enumerate(A_blocks):
        store.m_p[p] += A.T @ y
        store.M_0p[p] += X.T @ A
        for q in range(p, store.P):
            store.M_pq[(p, q)] += A.T @ A_blocks[q]
    store.N_seen += y.size
    return store


def merge_stores(a, b):
    """Fieldwise sum of two stores as a new store."""
    if a.K != b.K or a.widths != b.widths:
        raise InvalidInputError(
            f"cannot merge stores with shapes K={a.K}, widths={a.widths} and K={b.K}, widths={b.widths}"
        )
    return InnerProductStore(
        a.m_yy + b.m_yy,
        a.m_0 + b.m_0,
        [x + y for x, y in zip(a.m_p, b.m_p)],
        a.M_00 + b.M_00,
        [x + y for x, y in zip(a.M_0p, b.M_0p)],
        {k: a.M_pq[k] + b.M_pq[k] for k in a.M_pq},
        a.N_seen + b.N_seen,
    )


def _check_psd(M, name):
    M = 0.5 * (M + M.T)
    if M.size == 0:
        return M
    lo = np.linalg.eigvalsh(M)[0]
    if lo < -1e-8 * max(np.trace(M), np.finfo(float).tiny):
        raise NumericalInconsistencyError(f"{name} is not positive semidefinite (min eigenvalue {lo:.3g})")
    return M


def finalize(store, n_expected=None):
    """Symmetrize and validate a fully accumulated store."""
    if store.N_seen == 0:
        raise EmptyDataError("no rows were accumulated")
    if n_expected is not None and store.N_seen != n_expected:
        raise InvalidInputError(f"accumulated {store.N_seen} rows but the dataset declares {n_expected}")
    out = store.copy()
    out.M_00 = _check_psd(out.M_00, "X'X")
    for p in range(out.P):
        out.M_pq[(p, p)] = _check_psd(out.M_pq[(p, p)], f"A_{p + 1}'A_{p + 1}")
    out.finalized = True
    return out


def accumulate_stream(blocks, K, widths, build, workers=1, deterministic=True, queue_depth=2):
    """Accumulate a stream of data blocks with a pool of worker threads.

    Parameters
    ----------
    blocks : iterable
        Yields data blocks in order; each is handed to ``build``.
    build : callable
        ``build(block) -> (X_block, y_block, A_blocks)``. Runs on a worker
        thread; the basis blocks it returns are dropped once added.
    workers : int
        Each worker owns a private store.
    deterministic : bool
        If true, block ``h`` always goes to worker ``h % workers`` and worker
        stores are merged in worker order, so the result is bit-reproducible
        for a given worker count. Otherwise workers pull from a shared queue.
    """
    widths = list(widths)
    if workers <= 1:
        store = init_store(K, widths)
        for blk in blocks:
            X, y, A = build(blk)
            accumulate_block(store, X, y, A)
            del A
        return store

    stores = [init_store(K, widths) for _ in range(workers)]
    if deterministic:
        queues = [queue.Queue(maxsize=queue_depth) for _ in range(workers)]
    else:
        shared = queue.Queue(maxsize=queue_depth * workers)
        queues = [shared] * workers
    errors = []
    stop = object()

    def run(w):
        q = queues[w]
        while True:
            blk = q.get()
            if blk is stop:
                return
            if errors:
                continue
            try:
                X, y, A = build(blk)
                accumulate_block(stores[w], X, y, A)
                del A
            except BaseException as exc:  # re-raised on the calling thread
                errors.append(exc)

    threads = [threading.Thread(target=run, args=(w,), daemon=True) for w in range(workers)]
    for t in threads:
        t.start()
    try:
        for h, blk in enumerate(blocks):
            if errors:
                break
            queues[h % workers].put(blk)
    finally:
        for w in range(workers):
            queues[w].put(stop)
        for t in threads:
            t.join()
    if errors:
        raise errors[0]
    out = stores[0]
    for s in stores[1:]:
        out = merge_stores(out, s)
    return out


def save_store(store, path):
    """Write a finalized store to a versioned ``.npz`` sidecar."""
    meta = {"format": STORE_FORMAT, "version": STORE_VERSION, "K": store.K,
            "widths": list(store.widths), "N_seen": store.N_seen}
    np.savez(path, meta=np.array(json.dumps(meta)), **store.arrays())


def load_store(path):
    with np.load(path, allow_pickle=False) as f:
        meta = json.loads(str(f["meta"]))
        if meta.get("format") != STORE_FORMAT or meta.get("version") != STORE_VERSION:
            raise ModelFormatError(
                f"{path}: expected {STORE_FORMAT} v{STORE_VERSION}, found "
                f"{meta.get('format')} v{meta.get('version')}"
            )
        P = len(meta["widths"])
        store = InnerProductStore(
            float(f["m_yy"]),
            f["m_0"].copy(),
            [f[f"m_{p + 1}"].copy() for p in range(P)],
            f["M_00"].copy(),
            [f[f"M_0_{p + 1}"].copy() for p in range(P)],
            {(p, q): f[f"M_{p + 1}_{q + 1}"].copy() for p in range(P) for q in range(p, P)},
            int(meta["N_seen"]),
        )
    store.finalized = True
    return store
