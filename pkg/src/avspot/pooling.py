"""Temporal pooling of a W x D chunk into a fixed-size descriptor.

Kinds: mean, max, netvlad, netrvlad. Every kind ends with a dense
projection to pool_out_dim and an optional context gate, so downstream
models only see the projected descriptor.

All reductions over the frame axis run on a canonical row ordering
(rows sorted by their byte representation), which makes permutation
invariance hold bit-exactly despite floating-point non-associativity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Dense, Param, sigmoid, uniform_init, zeros_init

POOLING_KINDS = ("mean", "max", "netvlad", "netrvlad")
VLAD_KINDS = ("netvlad", "netrvlad")

ZERO_NORM_EPS = 1e-12  # columns/vectors below this L2 norm are left unscaled


@dataclass
class PoolingSpec:
    kind: str
    input_dim: int
    clusters: int = 0
    pool_out_dim: int = 512
    gating: bool | None = None  # default: on for VLAD kinds, off otherwise

    def __post_init__(self) -> None:
        if self.kind not in POOLING_KINDS:
            raise ValueError(f"unknown pooling kind {self.kind!r}")
        if self.kind in VLAD_KINDS and self.clusters < 1:
            raise ValueError(f"{self.kind} needs clusters >= 1, got {self.clusters}")
        if self.pool_out_dim < 1:
            raise ValueError(f"pool_out_dim must be >= 1, got {self.pool_out_dim}")
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.gating is None:
            self.gating = self.kind in VLAD_KINDS

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "clusters": self.clusters,
            "pool_out_dim": self.pool_out_dim,
            "gating": self.gating,
        }

    @staticmethod
    def from_dict(d: dict) -> "PoolingSpec":
        return PoolingSpec(**d)


# ---------------------------------------------------------------------------
# Canonical frame ordering
# ---------------------------------------------------------------------------


def canonical_order(x: np.ndarray) -> np.ndarray:
    """Per-chunk permutation sorting rows by their raw bytes.

    Any total order works; byte order is cheap and deterministic. Equal
    rows have equal keys, so the sorted value sequence is a function of
    the row multiset only.
    """
    b, w, d = x.shape
    keys = np.ascontiguousarray(x).view(
        np.dtype((np.bytes_, x.dtype.itemsize * d))
    ).reshape(b, w)
    return np.argsort(keys, axis=1, kind="stable")


def _sort_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = canonical_order(x)
    return np.take_along_axis(x, order[:, :, None], axis=1), order


def _unsort_grad(dxs: np.ndarray, order: np.ndarray) -> np.ndarray:
    dx = np.empty_like(dxs)
    np.put_along_axis(dx, order[:, :, None], dxs, axis=1)
    return dx


# ---------------------------------------------------------------------------
# Simple pooling ops (single chunk)
# ---------------------------------------------------------------------------


def mean_pool(x: np.ndarray) -> np.ndarray:
    """Column-wise mean of a W x D chunk."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"need a non-empty W x D chunk, got shape {x.shape}")
    xs, _ = _sort_rows(x[None])
    return xs[0].mean(axis=0)


def max_pool(x: np.ndarray) -> np.ndarray:
    """Column-wise max of a W x D chunk."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"need a non-empty W x D chunk, got shape {x.shape}")
    return x.max(axis=0)


# ---------------------------------------------------------------------------
# Context gating
# ---------------------------------------------------------------------------


def context_gating_forward(
    y: np.ndarray, gate_w: np.ndarray, gate_b: np.ndarray
) -> tuple[np.ndarray, dict]:
    """sigma(y W + b) * y, elementwise over a batch of descriptors."""
    if gate_w.shape[0] != gate_w.shape[1] or gate_w.shape[0] != y.shape[-1]:
        raise ValueError(
            f"gate weights must be square of side {y.shape[-1]}, got {gate_w.shape}"
        )
    g = sigmoid(y @ gate_w + gate_b)
    return g * y, {"y": y, "g": g}


def context_gating_backward(
    cache: dict, upstream: np.ndarray, gate_w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dy, d_gate_w, d_gate_b)."""
    y, g = cache["y"], cache["g"]
    dz = upstream * y * g * (1.0 - g)
    dy = upstream * g + dz @ gate_w.T
    return dy, y.T @ dz, dz.sum(axis=0)


# ---------------------------------------------------------------------------
# Pooling block
# ---------------------------------------------------------------------------


class PoolingBlock:
    """Pool a batch of chunks (B x W x D) to descriptors (B x pool_out_dim).

    VLAD forward:
      1. soft assignment a = row-softmax(X A + b), a: W x K
      2. netvlad:  V[j,k] = sum_i a[i,k] (X[i,j] - centers[j,k])
         netrvlad: V[j,k] = sum_i a[i,k] X[i,j]
      3. each column V[:,k] scaled to unit L2 (zero-safe)
      4. flatten to D*K and L2-normalize the whole vector (zero-safe)
      5. dense projection to pool_out_dim
      6. optional context gate
    Mean/max skip to a column-wise reduction, then steps 5-6.
    """

    def __init__(self, spec: PoolingSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        d, k, out = spec.input_dim, spec.clusters, spec.pool_out_dim
        self._names: list[str] = []
        if spec.kind in VLAD_KINDS:
            self.assign_w = uniform_init(rng, (d, k), fan_in=d, dtype=dtype)
            self.assign_b = zeros_init((k,), dtype=dtype)
            self._names += ["assign_w", "assign_b"]
            if spec.kind == "netvlad":
                self.centers = uniform_init(rng, (d, k), fan_in=d, dtype=dtype)
                self._names.append("centers")
            self.proj = Dense(d * k, out, rng, dtype=dtype)
        else:
            self.proj = Dense(d, out, rng, dtype=dtype)
        self._names += ["proj_w", "proj_b"]
        if spec.gating:
            self.gate_w = uniform_init(rng, (out, out), fan_in=out, dtype=dtype)
            self.gate_b = zeros_init((out,), dtype=dtype)
            self._names += ["gate_w", "gate_b"]

    def named_params(self) -> list[tuple[str, Param]]:
        lookup = {
            "proj_w": self.proj.w,
            "proj_b": self.proj.b,
        }
        for n in ("assign_w", "assign_b", "centers", "gate_w", "gate_b"):
            if hasattr(self, n):
                lookup[n] = getattr(self, n)
        return [(n, lookup[n]) for n in self._names]

    @property
    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    # -- forward ---------------------------------------------------------

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        """Returns (descriptors B x pool_out_dim, cache for backward)."""
        if x.ndim != 3 or x.shape[2] != self.spec.input_dim:
            raise ValueError(
                f"expected B x W x {self.spec.input_dim}, got shape {x.shape}"
            )
        if x.shape[1] < 1:
            raise ValueError("empty chunk")
        x = x.astype(self.dtype, copy=False)
        xs, order = _sort_rows(x)
        cache: dict = {"order": order, "xs": xs}
        if self.spec.kind in VLAD_KINDS:
            pooled = self._vlad_forward(xs, cache)
        elif self.spec.kind == "mean":
            pooled = xs.mean(axis=1)
        else:  # max
            pooled = xs.max(axis=1)
            cache["argmax"] = xs.argmax(axis=1)
        cache["pooled"] = pooled
        y0 = self.proj.forward(pooled)
        cache["y0"] = y0
        if self.spec.gating:
            y, gcache = context_gating_forward(y0, self.gate_w.value, self.gate_b.value)
            cache["gate"] = gcache
            return y, cache
        return y0, cache

    def _vlad_forward(self, xs: np.ndarray, cache: dict) -> np.ndarray:
        b = xs.shape[0]
        d, k = self.spec.input_dim, self.spec.clusters
        logits = xs @ self.assign_w.value + self.assign_b.value
        logits -= logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        a = e / e.sum(axis=-1, keepdims=True)
        agg = np.matmul(xs.transpose(0, 2, 1), a)  # B x D x K
        if self.spec.kind == "netvlad":
            s = a.sum(axis=1)  # B x K
            v = agg - self.centers.value[None, :, :] * s[:, None, :]
            cache["s"] = s
        else:
            v = agg
        col_norm = np.linalg.norm(v, axis=1)  # B x K
        col_safe = np.where(col_norm < ZERO_NORM_EPS, 1.0, col_norm)
        u = v / col_safe[:, None, :]
        flat = u.reshape(b, d * k)
        full_norm = np.linalg.norm(flat, axis=1)  # B
        full_safe = np.where(full_norm < ZERO_NORM_EPS, 1.0, full_norm)
        desc = flat / full_safe[:, None]
        cache.update(
            a=a, u=u, desc=desc,
            col_norm=col_norm, col_safe=col_safe,
            full_norm=full_norm, full_safe=full_safe,
        )
        return desc

    # -- backward --------------------------------------------------------

    def backward(self, cache: dict, upstream: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. x."""
        if self.spec.gating:
            upstream, dgw, dgb = context_gating_backward(
                cache["gate"], upstream, self.gate_w.value
            )
            self.gate_w.grad += dgw
            self.gate_b.grad += dgb
        dpooled = self.proj.backward(cache["pooled"], upstream)
        xs, order = cache["xs"], cache["order"]
        if self.spec.kind in VLAD_KINDS:
            dxs = self._vlad_backward(xs, cache, dpooled)
        elif self.spec.kind == "mean":
            w = xs.shape[1]
            dxs = np.broadcast_to(dpooled[:, None, :] / w, xs.shape).astype(xs.dtype)
        else:  # max: route to the first maximum in canonical order
            dxs = np.zeros_like(xs)
            np.put_along_axis(dxs, cache["argmax"][:, None, :], dpooled[:, None, :], axis=1)
        return _unsort_grad(np.ascontiguousarray(dxs), order)

    def _vlad_backward(self, xs: np.ndarray, cache: dict, ddesc: np.ndarray) -> np.ndarray:
        b, w, d = xs.shape
        k = self.spec.clusters
        a, u, desc = cache["a"], cache["u"], cache["desc"]
        # full L2 normalization
        full_small = cache["full_norm"] < ZERO_NORM_EPS
        dot = (ddesc * desc).sum(axis=1, keepdims=True)
        dflat = np.where(
            full_small[:, None], ddesc, (ddesc - desc * dot) / cache["full_safe"][:, None]
        )
        du = dflat.reshape(b, d, k)
        # intra (per-column) normalization
        col_small = cache["col_norm"] < ZERO_NORM_EPS
        dotc = (du * u).sum(axis=1, keepdims=True)
        dv = np.where(
            col_small[:, None, :], du, (du - u * dotc) / cache["col_safe"][:, None, :]
        )
        # aggregation
        da = np.matmul(xs, dv)  # B x W x K
        dxs = np.matmul(a, dv.transpose(0, 2, 1))  # B x W x D
        if self.spec.kind == "netvlad":
            t = (dv * self.centers.value[None, :, :]).sum(axis=1)  # B x K
            da -= t[:, None, :]
            self.centers.grad += -(dv * cache["s"][:, None, :]).sum(axis=0)
        # softmax
        dlogits = a * (da - (da * a).sum(axis=-1, keepdims=True))
        # assignment affine
        dxs += dlogits @ self.assign_w.value.T
        self.assign_w.grad += np.tensordot(xs, dlogits, axes=([0, 1], [0, 1]))
        self.assign_b.grad += dlogits.sum(axis=(0, 1))
        return dxs
