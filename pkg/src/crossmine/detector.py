"""Pluggable toy detector: features, one-vs-rest scoring, losses, updates, mAP.

The detector is a linear one-vs-rest logistic classifier plus a linear
box regressor over hand-crafted crop statistics.  It stands in for a
CNN: the rest of the pipeline only sees per-category probabilities,
per-category classification losses, a localization loss, and a
gradient-descent update, so any richer detector could be dropped in
behind the same surface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .geometry import BoundingBox, clip, iou_many, DegenerateBoxError
from .synthbench import SyntheticImage

FEATURE_GRID = 4
FEATURE_DIM = FEATURE_GRID * FEATURE_GRID * 3 * 2 + 2  # 98 for the default featurizer

PROPOSALS_PER_IMAGE = 32
NMS_THRESHOLD = 0.5

PROVENANCES = ("proposer", "ground-truth-jittered", "pasted")
LABEL_SOURCES = ("ground-truth", "user", "pseudo", "unknown")
TRAINABLE_SOURCES = ("ground-truth", "user", "pseudo")

CHECKPOINT_VERSION = 1


class DimensionMismatchError(ValueError):
    """Feature vector length does not match the detector state."""


class EmptyBatchError(ValueError):
    """train_step received an empty batch."""


class NonFiniteGradientError(RuntimeError):
    """A sample produced a non-finite gradient; the step was aborted."""

    def __init__(self, sample_id: str):
        super().__init__(f"non-finite gradient from sample {sample_id}")
        self.sample_id = sample_id


class MissingTargetError(ValueError):
    """loss_loc was called without a regression target."""


class CheckpointFormatError(ValueError):
    """Detector checkpoint file is malformed or has a bad version."""


@dataclass
class RegionProposal:
    id: str
    image_id: str
    box: BoundingBox
    features: np.ndarray
    provenance: str = "proposer"


@dataclass
class LabelVector:
    """Per-category labels in {-1, +1} with at most one positive entry."""

    values: np.ndarray
    source: str
    regression_target: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int8)
        if not np.isin(self.values, (-1, 1)).all():
            raise ValueError(f"label values must be -1 or +1, got {self.values}")
        if int((self.values == 1).sum()) > 1:
            raise ValueError("at most one category may be positive")
        if self.source not in LABEL_SOURCES:
            raise ValueError(f"unknown label source {self.source!r}")
        if self.regression_target is not None:
            self.regression_target = np.asarray(self.regression_target, dtype=np.float64)
            if self.regression_target.shape != (4,):
                raise ValueError("regression target must have 4 components")

    @classmethod
    def one_hot(cls, m: int, category: int, source: str, regression_target=None):
        values = -np.ones(m, dtype=np.int8)
        values[category] = 1
        return cls(values, source, regression_target)

    @classmethod
    def background(cls, m: int, source: str):
        return cls(-np.ones(m, dtype=np.int8), source)

    def positive_category(self) -> int | None:
        hits = np.flatnonzero(self.values == 1)
        return int(hits[0]) if hits.size else None


@dataclass
class DetectorState:
    """Snapshot of all detector weights; training returns a new snapshot."""

    classifier: np.ndarray  # (m, d+1), bias in the last column
    regressor: np.ndarray   # (4, d+1)
    feature_dim: int
    num_categories: int
    update_counter: int = 0

    @classmethod
    def initial(cls, num_categories: int, feature_dim: int = FEATURE_DIM):
        return cls(
            classifier=np.zeros((num_categories, feature_dim + 1)),
            regressor=np.zeros((4, feature_dim + 1)),
            feature_dim=feature_dim,
            num_categories=num_categories,
        )

    def to_json(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "m": self.num_categories,
            "d": self.feature_dim,
            "classifier": self.classifier.tolist(),
            "regressor": self.regressor.tolist(),
            "update_counter": self.update_counter,
        }

    @classmethod
    def from_json(cls, data: dict) -> "DetectorState":
        if data.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointFormatError(
                f"unsupported checkpoint version {data.get('format_version')!r}"
            )
        state = cls(
            classifier=np.array(data["classifier"], dtype=np.float64),
            regressor=np.array(data["regressor"], dtype=np.float64),
            feature_dim=data["d"],
            num_categories=data["m"],
            update_counter=data["update_counter"],
        )
        if state.classifier.shape != (state.num_categories, state.feature_dim + 1):
            raise CheckpointFormatError("classifier shape inconsistent with m, d")
        if state.regressor.shape != (4, state.feature_dim + 1):
            raise CheckpointFormatError("regressor shape inconsistent with d")
        return state

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DetectorState":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_json(data)


@dataclass
class Detection:
    box: BoundingBox
    scores: np.ndarray
    best_category: int
    confidence: float


def _summed_tables(image: SyntheticImage) -> np.ndarray:
    """Stacked summed-area tables of pixel values and squares, (h+1, w+1, 6).

    Memoized on the image object; pixels are treated as immutable after
    construction.
    """
    cached = getattr(image, "_feature_tables", None)
    if cached is not None:
        return cached
    px = image.pixels.astype(np.float64) / 255.0
    h, w = image.height, image.width
    stacked = np.concatenate([px, px * px], axis=2)
    tables = np.zeros((h + 1, w + 1, 6))
    tables[1:, 1:] = stacked.cumsum(axis=0).cumsum(axis=1)
    image._feature_tables = tables
    return tables


def features_for_boxes(image: SyntheticImage, coords) -> np.ndarray:
    """Feature matrix for an (n, 4) array of boxes inside the image.

    Each row is per-channel mean and variance over a 4x4 grid of the
    crop (96 values) plus aspect ratio and relative area.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 4)
    n = coords.shape[0]
    if n == 0:
        return np.zeros((0, FEATURE_DIM))
    tables = _summed_tables(image)
    x0, y0, x1, y1 = coords.T
    k = np.arange(FEATURE_GRID + 1)
    xe = x0[:, None] + ((x1 - x0)[:, None] * k) // FEATURE_GRID  # (n, 5)
    ye = y0[:, None] + ((y1 - y0)[:, None] * k) // FEATURE_GRID
    stride = image.width + 1
    flat_idx = (ye[:, :, None] * stride + xe[:, None, :]).reshape(-1)
    corners = np.take(tables.reshape(-1, 6), flat_idx, axis=0).reshape(n, 5, 5, 6)
    cells = (
        corners[:, 1:, 1:]
        - corners[:, :-1, 1:]
        - corners[:, 1:, :-1]
        + corners[:, :-1, :-1]
    )
    area = np.diff(ye, axis=1)[:, :, None] * np.diff(xe, axis=1)[:, None, :]  # (n, 4, 4)
    inv = 1.0 / np.maximum(area, 1)[..., None]
    mean = cells[..., :3] * inv
    var = cells[..., 3:] * inv - mean * mean
    np.maximum(var, 0.0, out=var)
    if (area <= 0).any():
        empty = (area <= 0)[..., None]
        mean = np.where(empty, 0.0, mean)
        var = np.where(empty, 0.0, var)
    width = (x1 - x0).astype(np.float64)
    height = (y1 - y0).astype(np.float64)
    out = np.empty((n, FEATURE_DIM))
    half = FEATURE_GRID * FEATURE_GRID * 3
    out[:, :half] = mean.reshape(n, -1)
    out[:, half : 2 * half] = var.reshape(n, -1)
    out[:, 2 * half] = width / height
    out[:, 2 * half + 1] = width * height / float(image.width * image.height)
    return out


def extract_features(image: SyntheticImage, box: BoundingBox) -> np.ndarray:
    """Feature vector for a single crop (see features_for_boxes)."""
    if box.x_max > image.width or box.y_max > image.height:
        raise ValueError(f"box {box.as_tuple()} exceeds image bounds")
    return features_for_boxes(image, [box.as_tuple()])[0]


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _augment(features: np.ndarray) -> np.ndarray:
    return np.concatenate([features, [1.0]])


def _check_dim(state: DetectorState, features: np.ndarray) -> None:
    if features.shape != (state.feature_dim,):
        raise DimensionMismatchError(
            f"features have shape {features.shape}, expected ({state.feature_dim},)"
        )


def classify(state: DetectorState, features: np.ndarray) -> np.ndarray:
    """Per-category probabilities via independent logistic units."""
    _check_dim(state, features)
    return _sigmoid(state.classifier @ _augment(features))


def loss_cls(state: DetectorState, features: np.ndarray, label: LabelVector):
    """Per-category logistic losses and the analytic classifier gradient."""
    _check_dim(state, features)
    if label.values.shape != (state.num_categories,):
        raise DimensionMismatchError("label length does not match num_categories")
    aug = _augment(features)
    z = state.classifier @ aug
    t = (1 + label.values.astype(np.float64)) / 2.0
    # Stable binary cross-entropy straight from the logits.
    losses = t * np.logaddexp(0.0, -z) + (1.0 - t) * np.logaddexp(0.0, z)
    grad = np.outer(_sigmoid(z) - t, aug)
    return losses, grad


def _smooth_l1(u: np.ndarray):
    absu = np.abs(u)
    small = absu < 1.0
    loss = np.where(small, 0.5 * u * u, absu - 0.5)
    dloss = np.where(small, u, np.sign(u))
    return loss.sum(), dloss


def loss_loc(state: DetectorState, features: np.ndarray, target):
    """Smooth-L1 box-delta loss and the analytic regressor gradient."""
    if target is None:
        raise MissingTargetError("regression target missing for foreground sample")
    _check_dim(state, features)
    target = np.asarray(target, dtype=np.float64)
    aug = _augment(features)
    pred = state.regressor @ aug
    loss, dloss = _smooth_l1(pred - target)
    return float(loss), np.outer(dloss, aug)


def train_step(state: DetectorState, batch, learning_rate: float) -> DetectorState:
    """One gradient-descent step on the batch-mean objective.

    The objective is the mean over (proposal, label) pairs of the summed
    per-category classification losses plus the localization loss for
    samples that carry a regression target.  The input state is left
    untouched; a new snapshot is returned.
    """
    if not batch:
        raise EmptyBatchError("train_step needs at least one sample")
    n = len(batch)
    feats = np.empty((n, state.feature_dim + 1))
    targets_mask = np.zeros(n, dtype=bool)
    labels = np.empty((n, state.num_categories))
    targets = np.zeros((n, 4))
    for row, (proposal, label) in enumerate(batch):
        if label.source not in TRAINABLE_SOURCES:
            raise ValueError(f"label source {label.source!r} is not trainable")
        if proposal.features.shape != (state.feature_dim,):
            raise DimensionMismatchError(
                f"sample {proposal.id} has features of shape {proposal.features.shape}"
            )
        feats[row, :-1] = proposal.features
        feats[row, -1] = 1.0
        labels[row] = label.values
        if label.regression_target is not None:
            targets_mask[row] = True
            targets[row] = label.regression_target
    t = (1.0 + labels) / 2.0
    phi = _sigmoid(feats @ state.classifier.T)  # (n, m)
    grad_cls = (phi - t).T @ feats
    pred = feats[targets_mask] @ state.regressor.T  # (k, 4)
    residual = pred - targets[targets_mask]
    small = np.abs(residual) < 1.0
    dloc = np.where(small, residual, np.sign(residual))
    grad_loc = dloc.T @ feats[targets_mask]
    if not (np.isfinite(grad_cls).all() and np.isfinite(grad_loc).all()):
        for proposal, label in batch:
            _, g_cls = loss_cls(state, proposal.features, label)
            finite = np.isfinite(g_cls).all()
            if finite and label.regression_target is not None:
                _, g_loc = loss_loc(state, proposal.features, label.regression_target)
                finite = np.isfinite(g_loc).all()
            if not finite:
                raise NonFiniteGradientError(proposal.id)
        raise NonFiniteGradientError(batch[0][0].id)
    return DetectorState(
        classifier=state.classifier - learning_rate * grad_cls / n,
        regressor=state.regressor - learning_rate * grad_loc / n,
        feature_dim=state.feature_dim,
        num_categories=state.num_categories,
        update_counter=state.update_counter + 1,
    )


def batch_losses(state: DetectorState, batch) -> tuple[float, float]:
    """Mean classification and localization loss over a batch (for logging)."""
    cls_total = 0.0
    loc_total = 0.0
    for proposal, label in batch:
        losses, _ = loss_cls(state, proposal.features, label)
        cls_total += float(losses.sum())
        if label.regression_target is not None:
            value, _ = loss_loc(state, proposal.features, label.regression_target)
            loc_total += value
    n = max(len(batch), 1)
    return cls_total / n, loc_total / n


def box_to_deltas(src: BoundingBox, dst: BoundingBox) -> np.ndarray:
    """Center/size offsets of dst relative to src (regression targets)."""
    sw, sh = src.width, src.height
    scx, scy = src.center
    dcx, dcy = dst.center
    return np.array(
        [
            (dcx - scx) / sw,
            (dcy - scy) / sh,
            np.log(dst.width / sw),
            np.log(dst.height / sh),
        ]
    )


def deltas_to_box(src: BoundingBox, deltas, width: int, height: int) -> BoundingBox:
    """Invert box_to_deltas, clipping into the image; falls back to src."""
    dx, dy, dw, dh = np.asarray(deltas, dtype=np.float64)
    dw, dh = np.clip([dw, dh], -2.0, 2.0)
    cx = (src.x_min + src.x_max) / 2.0 + dx * src.width
    cy = (src.y_min + src.y_max) / 2.0 + dy * src.height
    w = src.width * np.exp(dw)
    h = src.height * np.exp(dh)
    x0, x1 = int(round(cx - w / 2)), int(round(cx + w / 2))
    y0, y1 = int(round(cy - h / 2)), int(round(cy + h / 2))
    try:
        return clip(BoundingBox(max(x0, 0), max(y0, 0), max(x1, x0 + 1), max(y1, y0 + 1)),
                    width, height)
    except (ValueError, DegenerateBoxError):
        return clip(src, width, height)


@lru_cache(maxsize=16)
def _sliding_windows(width: int, height: int) -> np.ndarray:
    """Window grid at 3 scales and 2 aspect ratios, stride = 1/4 window size."""
    base = min(width, height)
    heights = sorted({max(4, (base * 3) // 16), max(6, (base * 5) // 16), max(8, base // 2)})
    boxes = []
    for h in heights:
        h = min(h, height)
        for ratio in (1.0, 1.5):
            w = min(width, max(4, round(h * ratio)))
            sy = max(1, h // 4)
            sx = max(1, w // 4)
            ys = list(range(0, height - h + 1, sy))
            if ys[-1] != height - h:
                ys.append(height - h)
            xs = list(range(0, width - w + 1, sx))
            if xs[-1] != width - w:
                xs.append(width - w)
            boxes.extend((x, y, x + w, y + h) for y in ys for x in xs)
    return np.array(list(dict.fromkeys(boxes)), dtype=np.int64)


def _nms(coords: np.ndarray, scores: np.ndarray, threshold: float, limit: int) -> list[int]:
    """Greedy suppression of boxes overlapping a higher-scoring keep at IoU > threshold."""
    order = np.argsort(-scores, kind="stable")
    x0, y0, x1, y1 = (coords[:, i] for i in range(4))
    areas = (x1 - x0) * (y1 - y0)
    keep: list[int] = []
    while order.size and len(keep) < limit:
        idx = int(order[0])
        keep.append(idx)
        rest = order[1:]
        iw = np.minimum(x1[idx], x1[rest]) - np.maximum(x0[idx], x0[rest])
        ih = np.minimum(y1[idx], y1[rest]) - np.maximum(y0[idx], y0[rest])
        inter = np.maximum(iw, 0) * np.maximum(ih, 0)
        overlap = inter / (areas[idx] + areas[rest] - inter)
        order = rest[overlap <= threshold]
    return keep


def proposal_id(image_id: str, box: BoundingBox) -> str:
    return f"{image_id}:{box.x_min}-{box.y_min}-{box.x_max}-{box.y_max}"


def propose(image: SyntheticImage, state: DetectorState) -> list[RegionProposal]:
    """Sliding-window proposals scored by max foreground probability.

    Windows are suppressed at IoU > 0.5 against higher-scoring keeps and
    truncated to the top 32; deterministic given (image, state).
    """
    coords = _sliding_windows(image.width, image.height)
    feats = features_for_boxes(image, coords)
    aug = np.hstack([feats, np.ones((feats.shape[0], 1))])
    probs = _sigmoid(aug @ state.classifier.T)
    scores = probs.max(axis=1)
    keep = _nms(coords, scores, NMS_THRESHOLD, PROPOSALS_PER_IMAGE)
    proposals = []
    for idx in keep:
        box = BoundingBox(*coords[idx])
        proposals.append(
            RegionProposal(
                id=proposal_id(image.id, box),
                image_id=image.id,
                box=box,
                features=feats[idx],
                provenance="proposer",
            )
        )
    return proposals


def refine_box(
    state: DetectorState, proposal: RegionProposal, width: int, height: int
) -> BoundingBox:
    """The regressor's localization belief for a proposal."""
    deltas = state.regressor @ _augment(proposal.features)
    return deltas_to_box(proposal.box, deltas, width, height)


def detect(state: DetectorState, image: SyntheticImage) -> list[Detection]:
    """Proposals classified and refined by the box regressor."""
    proposals = propose(image, state)
    if not proposals:
        return []
    feats = np.hstack(
        [np.stack([p.features for p in proposals]), np.ones((len(proposals), 1))]
    )
    scores = _sigmoid(feats @ state.classifier.T)
    deltas = feats @ state.regressor.T
    detections = []
    for row, prop in enumerate(proposals):
        best = int(np.argmax(scores[row]))
        refined = deltas_to_box(prop.box, deltas[row], image.width, image.height)
        detections.append(
            Detection(
                box=refined,
                scores=scores[row],
                best_category=best,
                confidence=float(scores[row, best]),
            )
        )
    return detections


def _ap_all_points(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone envelope of the precision-recall curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    ap = 0.0
    for i in range(1, mrec.size):
        if mrec[i] != mrec[i - 1]:
            ap += (mrec[i] - mrec[i - 1]) * mpre[i]
    return ap


def evaluate_map(state: DetectorState, images) -> tuple[dict[int, float], float]:
    """Per-category AP and mAP under the IoU >= 0.5 greedy matching protocol.

    Detections are ranked per category by descending confidence (ties
    broken on image id then box coordinates), each ground-truth object
    matches at most one detection, and AP uses all-point interpolation.
    Categories absent from the ground truth are excluded from the mean.
    """
    images = list(images)
    if not images:
        raise ValueError("test split is empty")
    gt_by_image = {}
    categories = set()
    for img in images:
        gt_by_image[img.id] = [(obj.category, obj.box) for obj in img.objects]
        categories.update(obj.category for obj in img.objects)
    all_dets = []
    for img in sorted(images, key=lambda im: im.id):
        for det in detect(state, img):
            all_dets.append((img.id, det))
    aps: dict[int, float] = {}
    for category in sorted(categories):
        dets = [
            (det.confidence, image_id, det.box)
            for image_id, det in all_dets
            if det.best_category == category
        ]
        dets.sort(key=lambda d: (-d[0], d[1], d[2]))
        gt_total = sum(
            1 for objs in gt_by_image.values() for cat, _ in objs if cat == category
        )
        matched: set[tuple[str, int]] = set()
        tp = np.zeros(len(dets))
        fp = np.zeros(len(dets))
        for rank, (_, image_id, box) in enumerate(dets):
            best_iou, best_idx = 0.0, -1
            for idx, (cat, gt_box) in enumerate(gt_by_image[image_id]):
                if cat != category or (image_id, idx) in matched:
                    continue
                value = iou_many(box, [gt_box.as_tuple()])[0]
                if value > best_iou:
                    best_iou, best_idx = float(value), idx
            if best_iou >= 0.5:
                matched.add((image_id, best_idx))
                tp[rank] = 1.0
            else:
                fp[rank] = 1.0
        if gt_total == 0:
            continue
        if not dets:
            aps[category] = 0.0
            continue
        cum_tp = tp.cumsum()
        cum_fp = fp.cumsum()
        recall = cum_tp / gt_total
        precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
        aps[category] = float(_ap_all_points(recall, precision))
    mean_ap = float(np.mean(list(aps.values()))) if aps else 0.0
    return aps, mean_ap
