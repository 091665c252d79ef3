"""Learning from occluded images.

Occluded pixels start at zero and are refreshed from the model's
mean-inference reconstruction while training runs on the composite
(visible ground truth + current fill). Ground truth is kept out of the
training path and used only to score recovery.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .data import BatchSource
from .metrics import reconstruct
from .models import ModelConfig, _atomic_write
from .optim import stream
from .trainer import TrainConfig, TrainResult, train

MASK_TAGS = {
    "P.5": ("salt_pepper", {"ratio": 0.5}),
    "P.7": ("salt_pepper", {"ratio": 0.7}),
    "MB10": ("multi_block", {"count": 10, "size": 10}),
    "B20": ("single_block", {"size": 20}),
    "B30": ("single_block", {"size": 30}),
}
MASK_KINDS = ("salt_pepper", "multi_block", "single_block")
TRACE_COLUMNS = ("update_index", "mask_kind", "recovery_error", "baseline_error")


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    kind: str
    ratio: float = 0.0
    count: int = 1
    size: int = 0
    tag: str = ""

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise MaskError(f"unknown mask kind {self.kind!r}; valid kinds: {', '.join(MASK_KINDS)}")
        if self.kind == "salt_pepper" and not 0.0 <= self.ratio <= 1.0:
            raise MaskError("salt_pepper ratio must lie in [0, 1]")
        if self.kind != "salt_pepper" and (self.size < 1 or self.count < 1):
            raise MaskError("block masks need size >= 1 and count >= 1")

    @property
    def name(self) -> str:
        if self.tag:
            return self.tag
        if self.kind == "salt_pepper":
            return f"salt_pepper({self.ratio:g})"
        if self.kind == "multi_block":
            return f"multi_block({self.count},{self.size})"
        return f"single_block({self.size})"


def parse_mask_tag(tag: str) -> MaskSpec:
    """``P.5``, ``P.7``, ``MB10``, ``B20``, ``B30`` or an explicit ``kind:args`` form.

    Explicit forms: ``salt_pepper:0.3``, ``multi_block:5x8`` (count x size),
    ``single_block:12``. Bare block tags ``B<s>`` / ``MB<s>`` with other sizes
    are accepted too (``MB<s>`` places 10 blocks).
    """
    if tag in MASK_TAGS:
        kind, kw = MASK_TAGS[tag]
        return MaskSpec(kind, tag=tag, **kw)
    try:
        if ":" in tag:
            kind, arg = tag.split(":", 1)
            if kind == "salt_pepper":
                return MaskSpec(kind, ratio=float(arg))
            if kind == "multi_block":
                c, s = arg.lower().split("x")
                return MaskSpec(kind, count=int(c), size=int(s))
            if kind == "single_block":
                return MaskSpec(kind, size=int(arg))
        elif tag.startswith("MB") and tag[2:].isdigit():
            return MaskSpec("multi_block", count=10, size=int(tag[2:]), tag=tag)
        elif tag.startswith("B") and tag[1:].isdigit():
            return MaskSpec("single_block", size=int(tag[1:]), tag=tag)
    except ValueError:
        pass
    raise MaskError(f"unknown mask tag {tag!r}; valid tags: {', '.join(MASK_TAGS)} or kind:args")


@dataclass
class OcclusionMask:
    visible: np.ndarray  # bool, signal shape
    spec: MaskSpec
    placement: tuple  # occluded flat pixel indices (salt_pepper) or block corners

    @property
    def occluded_count(self) -> int:
        return int((~self.visible).sum())


def _spatial(shape) -> tuple[int, int]:
    shape = tuple(shape)
    if len(shape) not in (2, 3):
        raise MaskError(f"image shape must be (H, W) or (C, H, W), got {shape}")
    return shape[-2], shape[-1]


def make_mask(kind: MaskSpec | str, image_shape, rng: np.random.Generator) -> OcclusionMask:
    """Draw one mask; the same pattern is applied to every channel."""
    spec = parse_mask_tag(kind) if isinstance(kind, str) else kind
    H, W = _spatial(image_shape)
    occ = np.zeros((H, W), dtype=bool)
    if spec.kind == "salt_pepper":
        k = int(np.floor(spec.ratio * H * W))
        idx = np.sort(rng.choice(H * W, size=k, replace=False))
        occ.flat[idx] = True
        placement = tuple(int(i) for i in idx)
    else:
        s = spec.size
        if s > H or s > W:
            raise MaskError(f"block of size {s} does not fit in a {H}x{W} image")
        n = 1 if spec.kind == "single_block" else spec.count
        corners = []
        for _ in range(n):
            y, x = int(rng.integers(0, H - s + 1)), int(rng.integers(0, W - s + 1))
            occ[y : y + s, x : x + s] = True
            corners.append((y, x))
        placement = tuple(corners)
    visible = np.broadcast_to(~occ, tuple(image_shape)).copy()
    return OcclusionMask(visible, spec, placement)


def make_masks(kind: MaskSpec | str, n: int, image_shape, seed: int) -> list[OcclusionMask]:
    """One independent mask per image from the ``mask`` stream."""
    rng = stream(seed, "mask")
    return [make_mask(kind, image_shape, rng) for _ in range(n)]


def apply_fill(ground_truth, visible, fill) -> np.ndarray:
    """Visible pixels from ``ground_truth``, occluded ones from ``fill``."""
    gt = np.asarray(ground_truth, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    fill = np.asarray(fill, dtype=np.float64)
    if not (gt.shape == visible.shape == fill.shape):
        raise ValueError(f"shape mismatch: {gt.shape}, {visible.shape}, {fill.shape}")
    return np.where(visible, gt, fill)


def recovery_error(recovered, ground_truth, visible, value_range: float = 2.0) -> float:
    """Mean ``|recovered - ground_truth| / value_range`` over occluded pixels."""
    rec = np.asarray(recovered, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    occ = ~np.asarray(visible, dtype=bool)
    if rec.shape != gt.shape or occ.shape != gt.shape:
        raise ValueError("recovered, ground truth and mask must share a shape")
    if not occ.any():
        raise ValueError("recovery error is undefined without occluded pixels")
    return float(np.mean(np.abs(rec[occ] - gt[occ])) / value_range)


@dataclass
class IncompleteDataset:
    """Ground truth plus masks plus mutable fill; ``composite`` is what training sees."""

    ground_truth: np.ndarray
    visible: np.ndarray
    spec: MaskSpec
    labels: np.ndarray | None = None
    fill: np.ndarray = field(init=False)
    composite: np.ndarray = field(init=False)

    def __post_init__(self):
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.float64)
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.visible.shape != self.ground_truth.shape:
            raise ValueError("masks must match the image stack")
        self.fill = np.zeros_like(self.ground_truth)
        # composite is updated in place so batch views picked up by training see refreshes
        self.composite = apply_fill(self.ground_truth, self.visible, self.fill)

    @classmethod
    def from_images(cls, images, kind, seed: int, labels=None) -> "IncompleteDataset":
        images = np.asarray(images, dtype=np.float64)
        masks = make_masks(kind, len(images), images.shape[1:], seed)
        spec = masks[0].spec if masks else (parse_mask_tag(kind) if isinstance(kind, str) else kind)
        return cls(images, np.stack([m.visible for m in masks]), spec, labels)

    def __len__(self) -> int:
        return len(self.ground_truth)

    def set_fill(self, fill) -> None:
        fill = np.asarray(fill, dtype=np.float64)
        occ = ~self.visible
        self.fill[occ] = fill[occ]
        self.composite[occ] = self.fill[occ]

    def error(self) -> float:
        return recovery_error(self.composite, self.ground_truth, self.visible)

    def baseline_error(self) -> float:
        """Error of the zero fill."""
        return recovery_error(np.zeros_like(self.ground_truth), self.ground_truth, self.visible)


def recovery_update(ds: IncompleteDataset, gen=None, inf=None, *, reconstructor=None) -> np.ndarray:
    """Replace occluded pixels with ``g(mu(composite))``; returns the new fill.

    ``reconstructor`` (``composite -> images``) substitutes for the model pair.
    """
    if reconstructor is None:
        if gen is None or inf is None:
            raise ValueError("need gen and inf, or a reconstructor")
        recon = reconstruct(ds.composite, gen, inf)
    else:
        recon = np.asarray(reconstructor(ds.composite.copy()), dtype=np.float64)
    ds.set_fill(recon)
    return ds.fill


@dataclass
class IncompleteResult:
    train: TrainResult
    trace: list[dict]
    trace_csv: str
    baseline: float

    @property
    def final_error(self) -> float:
        return self.trace[-1]["recovery_error"]


def _trace_row(k: int, name: str, err: float, base: float) -> str:
    return f"{k},{name},{err!r},{base!r}"


def train_incomplete(
    config: TrainConfig,
    model_config: ModelConfig,
    ds: IncompleteDataset,
    update_every: int | None = None,
    *,
    out_dir: str | None = None,
) -> IncompleteResult:
    """Train on the composite, refreshing the fill every ``update_every`` iterations.

    The default cadence is once per epoch. Row 0 of the trace is the zero-fill
    state; a final refresh is made after the last iteration if one is not
    already due there.
    """
    source = BatchSource(ds.composite, config.batch_size, config.seed, masks=ds.visible.astype(np.float64))
    every = update_every or source.batches_per_epoch
    if every < 1:
        raise ValueError("update_every must be >= 1")
    base = ds.baseline_error()
    name = ds.spec.name
    trace = [{"update_index": 0, "mask_kind": name, "recovery_error": ds.error(), "baseline_error": base}]

    def refresh(state, _values=None):
        m = state.models
        recovery_update(ds, m.gen, m.inf)
        trace.append(
            {"update_index": len(trace), "mask_kind": name, "recovery_error": ds.error(), "baseline_error": base}
        )

    def on_iter(state, values):
        if state.iteration % every == 0:
            refresh(state)

    result = train(config, source, model_config, callbacks=[on_iter], out_dir=out_dir)
    if config.iterations > 0 and config.iterations % every != 0:
        refresh(result.state)
    lines = [",".join(TRACE_COLUMNS)] + [
        _trace_row(r["update_index"], r["mask_kind"], r["recovery_error"], r["baseline_error"]) for r in trace
    ]
    csv = "\n".join(lines) + "\n"
    if out_dir:
        _atomic_write(os.path.join(out_dir, "recovery_trace.csv"), csv.encode("utf-8"))
    return IncompleteResult(result, trace, csv, base)


def recovery_panel(ds: IncompleteDataset, n: int = 8) -> np.ndarray:
    """Stack for a three-row grid: originals, zero-filled inputs, recovered images."""
    n = min(n, len(ds))
    occluded = apply_fill(ds.ground_truth[:n], ds.visible[:n], np.zeros_like(ds.ground_truth[:n]))
    return np.concatenate([ds.ground_truth[:n], occluded, ds.composite[:n]])
