"""Vector-quantization bottleneck.

Numpy-level codebook operations (quantize, lookup, usage tracking, LBG
splitting, Lloyd refinement) plus :class:`VectorQuantizer`, the torch layer
used inside the tokenizer. The torch layer defers every codebook mutation to
the numpy functions so both views stay in agreement.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import _accel


class CodebookError(ValueError):
    pass


class NonFiniteLatents(CodebookError):
    """NaN/Inf reached the quantizer."""


@dataclass
class Codebook:
    vectors: np.ndarray  # (K, D)
    usage: np.ndarray  # (K,) EMA assignment counts

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        self.usage = np.asarray(self.usage, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise CodebookError("codebook vectors must be (K, D)")
        if self.usage.shape != (self.vectors.shape[0],):
            raise CodebookError("usage length must equal K")
        if self.vectors.shape[0] < 1:
            raise CodebookError("empty codebook")
        if not np.all(np.isfinite(self.vectors)):
            raise CodebookError("codebook contains NaN/Inf")

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def D(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def zeros_usage(cls, vectors) -> "Codebook":
        vectors = np.asarray(vectors)
        return cls(vectors, np.zeros(vectors.shape[0]))

    def copy(self) -> "Codebook":
        return Codebook(self.vectors.copy(), self.usage.copy())


@dataclass
class QuantizeResult:
    indices: np.ndarray
    quantized: np.ndarray
    codebook_loss: float
    commitment_loss: float


def _check_input(h: np.ndarray, book: Codebook) -> np.ndarray:
    h = np.asarray(h)
    if h.ndim != 2:
        raise CodebookError(f"expected (N, D) input, got shape {h.shape}")
    if h.shape[0] == 0:
        raise CodebookError("empty input")
    if h.shape[1] != book.D:
        raise CodebookError(f"input dim {h.shape[1]} != codebook dim {book.D}")
    return h


def nearest(h: np.ndarray, book: Codebook):
    """Indices and squared distances of the nearest codes (ties -> lowest index)."""
    h = _check_input(h, book)
    return _accel.nearest_code(h, book.vectors.astype(h.dtype, copy=False))


def quantize(h: np.ndarray, book: Codebook) -> QuantizeResult:
    idx, dist = nearest(h, book)
    q = book.vectors[idx]
    # forward values agree; the two losses differ only in where gradients stop
    mse = float(np.mean(np.sum((np.asarray(h, dtype=np.float64) - q) ** 2, axis=1)) / book.D)
    return QuantizeResult(idx, q, mse, mse)


def lookup(indices, book: Codebook) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= book.K):
        raise CodebookError(f"index out of range for K={book.K}")
    return book.vectors[idx]


def usage_counts(indices, k: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise CodebookError(f"index out of range for K={k}")
    return np.bincount(idx, minlength=k).astype(np.float64)


def update_usage(book: Codebook, indices, decay: float = 0.99, data=None) -> Codebook:
    """EMA update of usage counters; with ``data`` also EMA-updates the vectors.

    Vector updates follow the ratio form of the EMA codebook rule: each code
    becomes the EMA of its assigned data sum divided by its EMA count.
    """
    counts = usage_counts(indices, book.K)
    usage = decay * book.usage + (1.0 - decay) * counts
    vectors = book.vectors
    if data is not None:
        data = np.asarray(data, dtype=np.float64).reshape(-1, book.D)
        sums, _ = _accel.accumulate_centroids(data, np.asarray(indices).reshape(-1), book.K)
        num = decay * book.usage[:, None] * book.vectors + (1.0 - decay) * sums
        live = usage > 1e-12
        vectors = book.vectors.copy()
        vectors[live] = (num[live] / usage[live, None]).astype(vectors.dtype)
    return Codebook(vectors, usage)


def usage_distribution(usage: np.ndarray) -> np.ndarray:
    usage = np.asarray(usage, dtype=np.float64)
    total = usage.sum()
    if total <= 0:
        return np.full(usage.shape, 1.0 / len(usage))
    return usage / total


def usage_entropy(usage) -> float:
    p = usage_distribution(usage)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def perplexity(usage) -> float:
    return float(np.exp(usage_entropy(usage)))


def utilization(usage, threshold: float = 0.01) -> float:
    """Fraction of codes whose usage share is at least ``threshold / K``."""
    usage = np.asarray(usage, dtype=np.float64)
    if usage.sum() <= 0:
        return 0.0
    p = usage / usage.sum()
    return float(np.mean(p >= threshold / len(usage)))


def split_codebook(book: Codebook, policy: str = "double", eps: float = 1e-3,
                   k_max: int | None = None, threshold: float = 0.01, rng=None,
                   protected=None) -> Codebook:
    """Grow or repair a codebook by splitting.

    ``double``: LBG split, each code c becomes c(1+eps) and c(1-eps); usage is
    halved and copied. ``dead_replace``: codes whose usage share is below
    ``threshold / K`` (and not listed in ``protected``) become perturbed copies
    of the busiest code, which shares its usage with them.
    """
    if policy == "double":
        if k_max is not None and 2 * book.K > k_max:
            raise CodebookError(f"doubling K={book.K} exceeds K_max={k_max}")
        v = book.vectors.astype(np.float64)
        # zero codes have no relative scale; fall back to an absolute nudge
        nudge = np.where(np.abs(v) > 0, v * eps, eps)
        hi, lo = v + nudge, v - nudge
        vectors = np.empty((2 * book.K, book.D), dtype=np.float64)
        vectors[0::2], vectors[1::2] = hi, lo
        usage = np.repeat(book.usage / 2.0, 2)
        return Codebook(vectors.astype(book.vectors.dtype), usage)
    if policy == "dead_replace":
        p = usage_distribution(book.usage)
        dead = p < threshold / book.K
        if protected is not None:
            dead[np.asarray(protected, dtype=np.int64)] = False
        top = int(np.argmax(book.usage))
        dead[top] = False
        n_dead = int(dead.sum())
        if n_dead == 0:
            return book.copy()
        rng = np.random.default_rng(rng)
        base = book.vectors[top].astype(np.float64)
        scale = eps * max(float(np.abs(base).max()), 1.0)
        vectors = book.vectors.copy()
        vectors[dead] = (base + rng.normal(0.0, scale, (n_dead, book.D))).astype(vectors.dtype)
        usage = book.usage.copy()
        share = usage[top] / (n_dead + 1)
        usage[dead] = share
        usage[top] = share
        return Codebook(vectors, usage)
    raise CodebookError(f"unknown split policy {policy!r}")


def quantization_mse(data: np.ndarray, book: Codebook) -> float:
    _, d = nearest(data, book)
    return float(np.mean(d))


def refine_assignments(data: np.ndarray, book: Codebook, iters: int = 10,
                       tol: float = 0.0, history: list | None = None) -> Codebook:
    """Lloyd iterations: assign to nearest code, move codes to centroids.

    An empty cell is re-seeded at the point of the largest cell that lies
    farthest from its centroid. ``history`` (if given) receives the MSE
    before each iteration and once more at the end.
    """
    if iters < 1:
        raise CodebookError("iters must be >= 1")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise CodebookError("empty data")
    vectors = book.vectors.astype(np.float64).copy()
    prev = None
    for _ in range(iters):
        idx, dist = _accel.nearest_code(data, vectors)
        mse = float(dist.mean())
        if history is not None:
            history.append(mse)
        sums, counts = _accel.accumulate_centroids(data, idx, book.K)
        live = counts > 0
        vectors[live] = sums[live] / counts[live, None]
        for j in np.flatnonzero(~live):
            big = int(np.argmax(counts))
            members = np.flatnonzero(idx == big)
            far = members[np.argmax(np.sum((data[members] - vectors[big]) ** 2, axis=1))]
            vectors[j] = data[far]
            idx[far] = j
            counts[big] -= 1
            counts[j] = 1
        if prev is not None and prev - mse <= tol * max(prev, 1e-30) and live.all():
            break
        prev = mse
    if history is not None:
        history.append(float(_accel.nearest_code(data, vectors)[1].mean()))
    counts = np.bincount(_accel.nearest_code(data, vectors)[0], minlength=book.K).astype(np.float64)
    usage = book.usage if book.usage.sum() > 0 else counts
    return Codebook(vectors.astype(book.vectors.dtype), usage)


def lbg(data: np.ndarray, k: int, eps: float = 1e-3, iters: int = 50) -> Codebook:
    """Linde-Buzo-Gray design from a single centroid up to ``k`` codes."""
    data = np.asarray(data, dtype=np.float64)
    book = Codebook(data.mean(axis=0, keepdims=True), np.array([float(len(data))]))
    book = refine_assignments(data, book, 1)
    while book.K < k:
        book = split_codebook(book, "double", eps=eps)
        book = refine_assignments(data, book, iters)
    return book


def kmeans(data: np.ndarray, k: int, iters: int = 100, rng=None) -> Codebook:
    """Plain Lloyd k-means from random data points (a baseline, not used in training)."""
    data = np.asarray(data, dtype=np.float64)
    rng = np.random.default_rng(rng)
    init = data[rng.choice(len(data), size=k, replace=False)]
    return refine_assignments(data, Codebook(init, np.zeros(k)), iters)


# ---------------------------------------------------------------------------
# torch layer

class VectorQuantizer(nn.Module):
    """Nearest-code quantizer with straight-through gradients and an EMA codebook.

    The codebook lives in buffers (it is not trained by the optimizer).
    """

    def __init__(self, codebook_size: int, dim: int, decay: float = 0.99, beta: float = 0.25):
        super().__init__()
        self.decay = decay
        self.beta = beta
        self.dim = dim
        self.register_buffer("codes", torch.zeros(codebook_size, dim))
        # float32 like the serialized codebook block, so checkpoints restore it exactly
        self.register_buffer("usage", torch.zeros(codebook_size, dtype=torch.float32))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))
        self.ema_enabled = True
        self.init_seed = 0  # seeds the data-dependent initialization
        # instrumentation: tokens routed through the bottleneck on the last call
        self.last_input_tokens = 0
        self.calls = 0

    @property
    def K(self) -> int:
        return self.codes.shape[0]

    def codebook(self) -> Codebook:
        return Codebook(self.codes.detach().cpu().numpy().copy(),
                        self.usage.detach().cpu().numpy().copy())

    def load_codebook(self, book: Codebook) -> None:
        self.codes = torch.as_tensor(np.asarray(book.vectors), dtype=self.codes.dtype,
                                     device=self.codes.device).clone()
        self.usage = torch.as_tensor(book.usage, dtype=torch.float32,
                                     device=self.usage.device).clone()
        self.initialized.fill_(True)

    def init_from_data(self, flat: torch.Tensor, rng=None) -> None:
        x = flat.detach().cpu().numpy().astype(np.float64)
        rng = np.random.default_rng(rng)
        pick = rng.choice(len(x), size=self.K, replace=len(x) < self.K)
        vec = x[pick] + rng.normal(0.0, 1e-3, (self.K, x.shape[1]))
        self.load_codebook(Codebook(vec.astype(np.float32), np.zeros(self.K)))

    def indices(self, flat: torch.Tensor) -> torch.Tensor:
        x = flat.detach().cpu().numpy()
        idx, _ = _accel.nearest_code(x, self.codes.detach().cpu().numpy().astype(x.dtype))
        return torch.as_tensor(idx, device=flat.device)

    def lookup(self, idx: torch.Tensor) -> torch.Tensor:
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= self.K):
            raise CodebookError(f"index out of range for K={self.K}")
        return self.codes[idx]

    def forward(self, h: torch.Tensor, offset: torch.Tensor | None = None):
        """Quantize (..., D) vectors.

        Returns (z, indices, commitment_loss, codebook_loss). In training mode z
        is the straight-through value h + sg(q - h); in eval mode it is q exactly.
        ``offset`` replaces sg(q - h) with a fixed tensor (finite-difference checks).
        """
        shape = h.shape
        flat = h.reshape(-1, shape[-1])
        if flat.shape[0] == 0:
            raise CodebookError("empty input")
        self.calls += 1
        self.last_input_tokens = flat.shape[0]
        if not bool(torch.isfinite(flat).all()):
            raise NonFiniteLatents("non-finite latents reached the quantizer")
        if self.training and not bool(self.initialized):
            self.init_from_data(flat, rng=self.init_seed)
        idx = self.indices(flat)
        q = self.codes.to(flat.dtype)[idx]
        commit = ((flat - q.detach()) ** 2).mean()
        cb_loss = ((flat.detach() - q) ** 2).mean()
        if offset is not None:
            z = flat + offset.reshape(flat.shape)
        elif self.training:
            z = flat + (q - flat).detach()
        else:
            z = q
        if self.training and self.ema_enabled:
            with torch.no_grad():
                book = update_usage(self.codebook(), idx.cpu().numpy(), self.decay,
                                    data=flat.detach().cpu().numpy())
                self.load_codebook(book)
        return z.reshape(shape), idx.reshape(shape[:-1]), commit, cb_loss
