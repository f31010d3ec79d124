"""Feature streams, annotations, PCA reduction, chunking and sliding windows.

On-disk formats:
  * feature manifest -- JSON object with keys game_id, half, modality,
    frame_rate_hz, dim, n_frames, data_file; the data file is raw
    little-endian float32, row-major, n_frames x dim, no header.
  * annotations -- JSON {"game_id": ..., "events": [{"half", "time_s",
    "label"}, ...]}.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FRAME_RATE_HZ = 2.0
CLASSES = ("background", "card", "substitution", "goal")
EVENT_CLASSES = CLASSES[1:]
N_CLASSES = len(CLASSES)

MODALITIES = ("video", "audio")


class FormatError(ValueError):
    """Raised when an on-disk feature/annotation file violates its format."""


@dataclass
class FeatureStream:
    """One modality's per-frame features for one game half, sampled at 2 Hz.

    Frame i covers game time [i/2, i/2 + 0.5) seconds from half start.
    """

    game_id: str
    half: int
    modality: str
    frames: np.ndarray  # n_frames x dim, float32

    def __post_init__(self) -> None:
        if self.half not in (1, 2):
            raise ValueError(f"half must be 1 or 2, got {self.half}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be 2-D, got shape {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError("frames contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_frames / FRAME_RATE_HZ


@dataclass
class Event:
    half: int
    time_s: float
    label: str

    def __post_init__(self) -> None:
        if self.label not in EVENT_CLASSES:
            raise ValueError(f"unknown event label {self.label!r}")
        if self.time_s < 0:
            raise ValueError(f"event time must be non-negative, got {self.time_s}")


@dataclass
class AnnotationSet:
    """Ground-truth event anchors (half, second, class) for one game."""

    game_id: str
    events: list[Event] = field(default_factory=list)

    def for_half(self, half: int) -> list[Event]:
        return [e for e in self.events if e.half == half]


# ---------------------------------------------------------------------------
# On-disk IO
# ---------------------------------------------------------------------------

_MANIFEST_KEYS = {
    "game_id", "half", "modality", "frame_rate_hz", "dim", "n_frames", "data_file",
}


def read_feature_stream(manifest_path: str | Path) -> FeatureStream:
    """Load a feature stream from its JSON manifest and raw float32 blob.

    The data file path in the manifest is resolved relative to the
    manifest's directory.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FormatError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    missing = _MANIFEST_KEYS - manifest.keys()
    if missing:
        raise FormatError(f"manifest missing keys {sorted(missing)}: {manifest_path}")
    if manifest["frame_rate_hz"] != FRAME_RATE_HZ:
        raise FormatError(
            f"frame_rate_hz must be {FRAME_RATE_HZ}, got {manifest['frame_rate_hz']}"
        )
    dim = int(manifest["dim"])
    n_frames = int(manifest["n_frames"])
    data_path = manifest_path.parent / manifest["data_file"]
    if not data_path.exists():
        raise FormatError(f"data file not found: {data_path}")
    expected = n_frames * dim * 4
    actual = data_path.stat().st_size
    if actual != expected:
        raise FormatError(
            f"{data_path}: expected {expected} bytes for "
            f"{n_frames}x{dim} float32, found {actual}"
        )
    raw = np.fromfile(data_path, dtype="<f4").reshape(n_frames, dim)
    if not np.isfinite(raw).all():
        raise FormatError(f"{data_path}: non-finite values in feature blob")
    return FeatureStream(
        game_id=manifest["game_id"],
        half=int(manifest["half"]),
        modality=manifest["modality"],
        frames=raw,
    )


def write_feature_stream(
    stream: FeatureStream, manifest_path: str | Path, data_file: str | None = None
) -> None:
    """Write a stream as manifest JSON plus raw little-endian float32 blob."""
    manifest_path = Path(manifest_path)
    if data_file is None:
        data_file = manifest_path.stem + ".f32"
    manifest = {
        "game_id": stream.game_id,
        "half": stream.half,
        "modality": stream.modality,
        "frame_rate_hz": FRAME_RATE_HZ,
        "dim": stream.dim,
        "n_frames": stream.n_frames,
        "data_file": data_file,
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    stream.frames.astype("<f4").tofile(manifest_path.parent / data_file)
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def read_annotations(path: str | Path) -> AnnotationSet:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"annotation file not found: {path}")
    with open(path) as f:
        doc = json.load(f)
    try:
        events = [
            Event(half=int(e["half"]), time_s=float(e["time_s"]), label=e["label"])
            for e in doc["events"]
        ]
        return AnnotationSet(game_id=doc["game_id"], events=events)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad annotation file {path}: {exc}") from exc


def write_annotations(ann: AnnotationSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "game_id": ann.game_id,
        "events": [
            {"half": e.half, "time_s": e.time_s, "label": e.label} for e in ann.events
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass
class PcaModel:
    """Mean-centered orthonormal projection onto leading principal directions."""

    mean: np.ndarray  # dim_in
    basis: np.ndarray  # dim_in x dim_out, orthonormal columns
    explained_variance_ratio: float

    @property
    def dim_in(self) -> int:
        return self.basis.shape[0]

    @property
    def dim_out(self) -> int:
        return self.basis.shape[1]


def fit_pca(streams: list[FeatureStream], dim_out: int) -> PcaModel:
    """Fit PCA on the stacked frames of all streams.

    No whitening: projection is plain centering followed by multiplication
    with the orthonormal basis of the dim_out leading principal directions.

    Raises:
        ValueError: if dim_out exceeds the input dimension, streams disagree
            on dimension, or there are not more frames than dim_out.
    """
    if not streams:
        raise ValueError("need at least one stream to fit PCA")
    dims = {s.dim for s in streams}
    if len(dims) != 1:
        raise ValueError(f"streams disagree on dim: {sorted(dims)}")
    dim_in = dims.pop()
    if dim_out > dim_in:
        raise ValueError(f"dim_out {dim_out} > input dim {dim_in}")
    x = np.concatenate([s.frames for s in streams], axis=0).astype(np.float64)
    if x.shape[0] <= dim_out:
        raise ValueError(f"need more than {dim_out} frames, got {x.shape[0]}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    var = s**2
    total = var.sum()
    ratio = 1.0 if total == 0.0 else float(var[:dim_out].sum() / total)
    return PcaModel(mean=mean, basis=vt[:dim_out].T.copy(), explained_variance_ratio=ratio)


def apply_pca(model: PcaModel, stream: FeatureStream) -> FeatureStream:
    """Project a stream onto the PCA basis: rows become (row - mean) @ basis."""
    if stream.dim != model.dim_in:
        raise ValueError(f"stream dim {stream.dim} != PCA input dim {model.dim_in}")
    projected = (stream.frames.astype(np.float64) - model.mean) @ model.basis
    return FeatureStream(
        game_id=stream.game_id,
        half=stream.half,
        modality=stream.modality,
        frames=projected.astype(np.float32),
    )


# ---------------------------------------------------------------------------
# Chunking and sliding windows
# ---------------------------------------------------------------------------


@dataclass
class WindowDataset:
    """Labeled fixed-length chunks of paired video/audio features.

    Targets are 4-dim multi-hot over (background, card, substitution, goal);
    the background bit is set exactly when no event bit is.
    """

    chunk_len_s: int
    video: np.ndarray  # n x W x D
    audio: np.ndarray  # n x W x D
    targets: np.ndarray  # n x 4, float32 in {0, 1}

    def __post_init__(self) -> None:
        if self.video.shape[0] != self.audio.shape[0] or self.video.shape[0] != self.targets.shape[0]:
            raise ValueError("video/audio/targets sample counts disagree")
        if self.video.shape[1] != self.window_frames:
            raise ValueError(
                f"chunks have {self.video.shape[1]} frames, expected W={self.window_frames}"
            )

    @property
    def window_frames(self) -> int:
        return 2 * self.chunk_len_s

    def __len__(self) -> int:
        return self.targets.shape[0]

    @staticmethod
    def merge(datasets: list["WindowDataset"]) -> "WindowDataset":
        if not datasets:
            raise ValueError("nothing to merge")
        ts = {d.chunk_len_s for d in datasets}
        if len(ts) != 1:
            raise ValueError(f"chunk lengths disagree: {sorted(ts)}")
        return WindowDataset(
            chunk_len_s=ts.pop(),
            video=np.concatenate([d.video for d in datasets], axis=0),
            audio=np.concatenate([d.audio for d in datasets], axis=0),
            targets=np.concatenate([d.targets for d in datasets], axis=0),
        )

    def class_counts(self) -> dict[str, int]:
        return {c: int(self.targets[:, i].sum()) for i, c in enumerate(CLASSES)}


def _truncate_pair(video: FeatureStream, audio: FeatureStream) -> tuple[np.ndarray, np.ndarray]:
    if video.half != audio.half:
        raise ValueError(f"half mismatch: video {video.half}, audio {audio.half}")
    n = min(video.n_frames, audio.n_frames)
    return video.frames[:n], audio.frames[:n]


def make_chunks(
    video: FeatureStream, audio: FeatureStream, ann: AnnotationSet, chunk_len_s: int
) -> WindowDataset:
    """Split a half into consecutive non-overlapping T-second chunks.

    Chunk k covers [kT, (k+1)T); an event anchored inside sets that class
    bit (several events may set several bits). The trailing partial chunk
    is dropped. Video/audio are truncated to the shorter stream.
    """
    if chunk_len_s <= 0:
        raise ValueError(f"chunk_len_s must be positive, got {chunk_len_s}")
    vframes, aframes = _truncate_pair(video, audio)
    w = 2 * chunk_len_s
    n_chunks = vframes.shape[0] // w
    vchunks = vframes[: n_chunks * w].reshape(n_chunks, w, -1)
    achunks = aframes[: n_chunks * w].reshape(n_chunks, w, -1)
    targets = np.zeros((n_chunks, N_CLASSES), dtype=np.float32)
    for event in ann.for_half(video.half):
        k = int(event.time_s // chunk_len_s)
        if 0 <= k < n_chunks:
            targets[k, CLASSES.index(event.label)] = 1.0
    targets[:, 0] = (targets[:, 1:].sum(axis=1) == 0).astype(np.float32)
    return WindowDataset(
        chunk_len_s=chunk_len_s, video=vchunks, audio=achunks, targets=targets
    )


def sliding_windows(
    video: FeatureStream, audio: FeatureStream, chunk_len_s: int, batch: int = 256
):
    """Yield (center_times, video_windows, audio_windows) batches.

    One window per integer start second s in [0, duration - T]; the window
    spans W = 2T frames and is attributed to its center time s + T/2.
    Consecutive windows overlap by W - 2 frames (stride 1 s = 2 frames).
    """
    if chunk_len_s <= 0:
        raise ValueError(f"chunk_len_s must be positive, got {chunk_len_s}")
    vframes, aframes = _truncate_pair(video, audio)
    n = vframes.shape[0]
    w = 2 * chunk_len_s
    if n < w:
        raise ValueError(
            f"stream too short for one window: {n} frames < W={w}"
        )
    n_windows = (n - w) // 2 + 1
    for lo in range(0, n_windows, batch):
        hi = min(lo + batch, n_windows)
        centers = np.arange(lo, hi, dtype=np.float64) + chunk_len_s / 2.0
        vwin = np.stack([vframes[2 * s : 2 * s + w] for s in range(lo, hi)])
        awin = np.stack([aframes[2 * s : 2 * s + w] for s in range(lo, hi)])
        yield centers, vwin, awin


def count_sliding_windows(n_frames: int, chunk_len_s: int) -> int:
    w = 2 * chunk_len_s
    if n_frames < w:
        return 0
    return (n_frames - w) // 2 + 1
