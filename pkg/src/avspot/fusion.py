"""Single-modality and audio-visual fusion models over pooled chunk descriptors.

Fusion methods (fused mode):
  1  product of the two branches' class probabilities (branches pre-trained)
  2  sigmoid of averaged branch logits (branches pre-trained)
  3  same graph as 2, trained jointly through the common sigmoid
  4  concat of post-dropout pooled descriptors -> shared classification layer
  5  concat of pooled descriptors -> dropout -> shared classification layer
  6  per-frame concat -> one pooling block (output 1024) -> dropout -> head
  7  per-frame concat -> one pooling block (output 512) -> dropout -> head

Methods 1 and 2 are assembled from independently trained single-modality
models and cannot be trained through the merge point.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .features import N_CLASSES
from .nn import Dense, Param, bce_multilabel, dropout_forward, sigmoid
from .pooling import PoolingSpec, PoolingBlock

MODES = ("video_only", "audio_only", "fused")
LATE_FUSION_METHODS = (1, 2)
JOINT_FUSION_METHODS = (3, 4, 5, 6, 7)


class TrainingProtocolError(RuntimeError):
    """Raised when a fused graph without a joint loss is asked to train."""


@dataclass
class ModelSpec:
    mode: str
    pooling: PoolingSpec  # per-branch spec; input_dim is the per-modality dim
    fusion_method: int | None = None
    n_classes: int = N_CLASSES
    dropout_keep: float = 0.6

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "fused":
            if self.fusion_method not in range(1, 8):
                raise ValueError(
                    f"fused mode needs fusion_method in 1..7, got {self.fusion_method}"
                )
            if self.fusion_method == 6 and self.pooling.pool_out_dim != 2 * self.pooling.input_dim:
                raise ValueError(
                    "method 6 requires pool_out_dim = 2 * input_dim "
                    f"(got {self.pooling.pool_out_dim}, input_dim {self.pooling.input_dim})"
                )
            if self.fusion_method == 7 and self.pooling.pool_out_dim != self.pooling.input_dim:
                raise ValueError(
                    "method 7 requires pool_out_dim = input_dim "
                    f"(got {self.pooling.pool_out_dim}, input_dim {self.pooling.input_dim})"
                )
        elif self.fusion_method is not None:
            raise ValueError("fusion_method only applies to fused mode")
        if not (0.0 < self.dropout_keep <= 1.0):
            raise ValueError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "pooling": self.pooling.to_dict(),
            "fusion_method": self.fusion_method,
            "n_classes": self.n_classes,
            "dropout_keep": self.dropout_keep,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        d = dict(d)
        d["pooling"] = PoolingSpec.from_dict(d["pooling"])
        return ModelSpec(**d)


@dataclass
class ForwardResult:
    probs: np.ndarray
    logits: np.ndarray | None  # None for method 1 (no joint logit exists)
    cache: dict


class Model:
    """Parameter container plus forward/backward for one ModelSpec."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        self.blocks: dict[str, PoolingBlock] = {}
        self.heads: dict[str, Dense] = {}
        m = spec.fusion_method
        pool = spec.pooling
        if spec.mode in ("video_only", "audio_only"):
            branch = "video" if spec.mode == "video_only" else "audio"
            self.blocks[branch] = PoolingBlock(pool, rng, dtype)
            self.heads[branch] = Dense(pool.pool_out_dim, spec.n_classes, rng, dtype)
        elif m in (1, 2, 3):
            for branch in ("video", "audio"):
                self.blocks[branch] = PoolingBlock(pool, rng, dtype)
                self.heads[branch] = Dense(pool.pool_out_dim, spec.n_classes, rng, dtype)
        elif m in (4, 5):
            for branch in ("video", "audio"):
                self.blocks[branch] = PoolingBlock(pool, rng, dtype)
            self.heads["shared"] = Dense(2 * pool.pool_out_dim, spec.n_classes, rng, dtype)
        else:  # 6, 7: one block over per-frame concatenated features
            wide = PoolingSpec(
                kind=pool.kind,
                input_dim=2 * pool.input_dim,
                clusters=pool.clusters,
                pool_out_dim=pool.pool_out_dim,
                gating=pool.gating,
            )
            self.blocks["main"] = PoolingBlock(wide, rng, dtype)
            self.heads["shared"] = Dense(pool.pool_out_dim, spec.n_classes, rng, dtype)

    # -- parameter access --------------------------------------------------

    def named_params(self) -> list[tuple[str, Param]]:
        out: list[tuple[str, Param]] = []
        for bname in sorted(self.blocks):
            for pname, p in self.blocks[bname].named_params():
                out.append((f"{bname}/{pname}", p))
        for hname in sorted(self.heads):
            out.append((f"{hname}_head/w", self.heads[hname].w))
            out.append((f"{hname}_head/b", self.heads[hname].b))
        return out

    @property
    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def copy_branch_from(self, branch: str, source: "Model") -> None:
        """Copy a trained single-modality model's parameters into a branch."""
        src = dict(source.named_params())
        for name, p in self.named_params():
            if name.startswith(branch):
                key = name.replace(f"{branch}/", f"{branch}/").replace(
                    f"{branch}_head/", f"{branch}_head/"
                )
                src_key = key if key in src else None
                if src_key is None:
                    raise KeyError(f"source model lacks parameter {key}")
                p.value = src[src_key].value.copy()

    @staticmethod
    def late_fusion(spec: ModelSpec, video_model: "Model", audio_model: "Model") -> "Model":
        """Assemble a method-1/2 model from trained single-modality models."""
        if spec.fusion_method not in LATE_FUSION_METHODS + (3,):
            raise ValueError("late_fusion applies to methods 1-3")
        model = Model(spec, np.random.default_rng(0), dtype=video_model.dtype)
        model.copy_branch_from("video", video_model)
        model.copy_branch_from("audio", audio_model)
        return model

    # -- forward -------------------------------------------------------------

    def forward(
        self,
        video: np.ndarray,
        audio: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
        keep: float | None = None,
    ) -> ForwardResult:
        keep = self.spec.dropout_keep if keep is None else keep
        m = self.spec.fusion_method
        cache: dict = {}
        if self.spec.mode == "video_only":
            z = self._branch_logits("video", video, training, rng, keep, cache)
            return ForwardResult(sigmoid(z), z, cache)
        if self.spec.mode == "audio_only":
            z = self._branch_logits("audio", audio, training, rng, keep, cache)
            return ForwardResult(sigmoid(z), z, cache)
        if m in (1, 2, 3):
            zv = self._branch_logits("video", video, training, rng, keep, cache)
            za = self._branch_logits("audio", audio, training, rng, keep, cache)
            if m == 1:
                return ForwardResult(sigmoid(zv) * sigmoid(za), None, cache)
            z = 0.5 * (zv + za)
            return ForwardResult(sigmoid(z), z, cache)
        if m in (4, 5):
            yv, cache["video_pool"] = self.blocks["video"].forward(video)
            ya, cache["audio_pool"] = self.blocks["audio"].forward(audio)
            if m == 4:
                hv, cache["video_mask"] = dropout_forward(yv, keep, training, rng)
                ha, cache["audio_mask"] = dropout_forward(ya, keep, training, rng)
                h = np.concatenate([hv, ha], axis=1)
            else:
                y = np.concatenate([yv, ya], axis=1)
                h, cache["mask"] = dropout_forward(y, keep, training, rng)
            cache["h"] = h
            z = self.heads["shared"].forward(h)
            return ForwardResult(sigmoid(z), z, cache)
        # methods 6, 7
        x = np.concatenate([video, audio], axis=2)
        y, cache["pool"] = self.blocks["main"].forward(x)
        h, cache["mask"] = dropout_forward(y, keep, training, rng)
        cache["h"] = h
        z = self.heads["shared"].forward(h)
        return ForwardResult(sigmoid(z), z, cache)

    def _branch_logits(self, branch, x, training, rng, keep, cache) -> np.ndarray:
        y, cache[f"{branch}_pool"] = self.blocks[branch].forward(x)
        h, cache[f"{branch}_mask"] = dropout_forward(y, keep, training, rng)
        cache[f"{branch}_h"] = h
        return self.heads[branch].forward(h)

    def predict_proba(self, video: np.ndarray, audio: np.ndarray) -> np.ndarray:
        return self.forward(video, audio, training=False).probs

    # -- training ------------------------------------------------------------

    def loss_and_backward(
        self,
        video: np.ndarray,
        audio: np.ndarray,
        targets: np.ndarray,
        training: bool = True,
        rng: np.random.Generator | None = None,
        keep: float | None = None,
    ) -> float:
        """BCE on the model's final output; accumulates gradients in place."""
        m = self.spec.fusion_method
        if m in LATE_FUSION_METHODS:
            raise TrainingProtocolError(
                f"method {m} has no joint loss; train the two single-modality "
                "models separately and assemble with Model.late_fusion"
            )
        keep = self.spec.dropout_keep if keep is None else keep
        out = self.forward(video, audio, training=training, rng=rng, keep=keep)
        loss, dz = bce_multilabel(out.logits, targets)
        cache = out.cache
        if self.spec.mode in ("video_only", "audio_only"):
            branch = "video" if self.spec.mode == "video_only" else "audio"
            x = video if branch == "video" else audio
            self._branch_backward(branch, x, dz, cache)
            return loss
        if m == 3:
            self._branch_backward("video", video, 0.5 * dz, cache)
            self._branch_backward("audio", audio, 0.5 * dz, cache)
            return loss
        if m in (4, 5):
            dh = self.heads["shared"].backward(cache["h"], dz)
            out_dim = self.spec.pooling.pool_out_dim
            if m == 4:
                dhv, dha = dh[:, :out_dim], dh[:, out_dim:]
                dyv = dhv if cache["video_mask"] is None else dhv * cache["video_mask"]
                dya = dha if cache["audio_mask"] is None else dha * cache["audio_mask"]
            else:
                dy = dh if cache["mask"] is None else dh * cache["mask"]
                dyv, dya = dy[:, :out_dim], dy[:, out_dim:]
            self.blocks["video"].backward(cache["video_pool"], dyv)
            self.blocks["audio"].backward(cache["audio_pool"], dya)
            return loss
        # methods 6, 7
        dh = self.heads["shared"].backward(cache["h"], dz)
        dy = dh if cache["mask"] is None else dh * cache["mask"]
        dx = self.blocks["main"].backward(cache["pool"], dy)
        # callers never need dx split back per modality, but keep shapes honest
        cache["dx"] = dx
        return loss

    def _branch_backward(self, branch: str, x: np.ndarray, dz: np.ndarray, cache: dict) -> None:
        dh = self.heads[branch].backward(cache[f"{branch}_h"], dz)
        mask = cache[f"{branch}_mask"]
        dy = dh if mask is None else dh * mask
        self.blocks[branch].backward(cache[f"{branch}_pool"], dy)

    # -- snapshots -------------------------------------------------------------

    def state_values(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.params]

    def load_state_values(self, values: list[np.ndarray]) -> None:
        params = self.params
        if len(values) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(values)}")
        for p, v in zip(params, values):
            if p.value.shape != v.shape:
                raise ValueError(f"shape mismatch: {p.value.shape} vs {v.shape}")
            p.value = v.astype(p.value.dtype).copy()


def build_model(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    """Construct a model with seeded parameter initialization."""
    return Model(spec, np.random.default_rng(seed), dtype=dtype)
