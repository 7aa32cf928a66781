"""Active-learning side: sample selection, the oracle, pools, and the queue.

Low-consistency proposals (small consistency score yet at least two
positive class predictions) are the ambiguous ones worth human effort.
They are queued as annotation requests; resolutions promote proposals
from the unlabeled pool into the permanent labeled pool with
user-sourced label vectors.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .detector import (
    LabelVector,
    RegionProposal,
    box_to_deltas,
    classify,
    refine_box,
)
from .geometry import BoundingBox, iou
from .seeding import derive_seed
from .synthbench import Dataset, SyntheticImage

BACKGROUND = -1


class UnknownImageError(KeyError):
    """An annotation request references an image that is not in the dataset."""


class StaleRequestError(ValueError):
    """A result arrived for a request that is no longer pending."""


class ConflictingResultError(ValueError):
    """Two different results were submitted for the same request."""


@dataclass
class AnnotationRequest:
    request_id: str
    proposal_id: str
    image_id: str
    box: BoundingBox
    s_score: float | None
    positive_categories: list[int]
    thumbnail_png: bytes
    created_round: int

    @property
    def thumbnail_sha256(self) -> str:
        return hashlib.sha256(self.thumbnail_png).hexdigest()

    def to_json(self, include_thumbnail: bool = False) -> dict:
        data = {
            "request_id": self.request_id,
            "proposal_id": self.proposal_id,
            "image_id": self.image_id,
            "box": self.box.to_json(),
            "s_score": self.s_score,
            "positive_categories": list(self.positive_categories),
            "thumbnail_sha256": self.thumbnail_sha256,
            "round": self.created_round,
        }
        if include_thumbnail:
            import base64

            data["thumbnail_png_base64"] = base64.b64encode(self.thumbnail_png).decode("ascii")
        return data


@dataclass
class AnnotationResult:
    request_id: str
    label: int  # category index or BACKGROUND
    corrected_box: BoundingBox | None = None
    annotator: str = "simulated-oracle"

    def to_json(self) -> dict:
        return {
            "request_id": self.request_id,
            "label": self.label,
            "corrected_box": None if self.corrected_box is None else self.corrected_box.to_json(),
            "annotator": self.annotator,
        }

    @classmethod
    def from_json(cls, data: dict) -> "AnnotationResult":
        corrected = data.get("corrected_box")
        return cls(
            request_id=data["request_id"],
            label=int(data["label"]),
            corrected_box=None if corrected is None else BoundingBox.from_json(corrected),
            annotator=data.get("annotator", "human"),
        )


def render_thumbnail(image: SyntheticImage, box: BoundingBox) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(image.crop(box)).save(buffer, format="PNG")
    return buffer.getvalue()


def select_low_consistency(
    records,
    proposals: dict[str, RegionProposal],
    images: dict[str, SyntheticImage],
    state,
    z: int,
    tau_low: float,
    seed: int,
    min_positive: int = 2,
    round_index: int = 0,
) -> list[AnnotationRequest]:
    """Ambiguous low-score records, uniformly subsampled to at most z.

    Eligibility: the consistency score exists and is below tau_low, and
    at least min_positive categories score above 0.5 under the given
    detector state.  An empty return is the loop's termination signal.
    """
    if z < 1:
        raise ValueError("z must be >= 1")
    if not 0.0 < tau_low < 1.0:
        raise ValueError("tau_low must lie in (0, 1)")
    eligible = []
    for record in sorted(records, key=lambda r: r.proposal_id):
        if record.s_score is None or record.s_score >= tau_low:
            continue
        proposal = proposals[record.proposal_id]
        phi = classify(state, proposal.features)
        positive = [int(j) for j in np.flatnonzero(phi > 0.5)]
        if len(positive) < min_positive:
            continue
        eligible.append((record, proposal, positive))
    if not eligible:
        return []
    rng = np.random.default_rng(derive_seed(seed, "al-select", round_index))
    count = min(z, len(eligible))
    chosen = sorted(rng.choice(len(eligible), size=count, replace=False).tolist())
    requests = []
    for idx in chosen:
        record, proposal, positive = eligible[idx]
        image = images[proposal.image_id]
        # Show the annotator the detector's localization belief, not the
        # raw window: that is the box worth confirming or correcting.
        shown = refine_box(state, proposal, image.width, image.height)
        requests.append(
            AnnotationRequest(
                request_id=f"r{round_index}:{proposal.id}",
                proposal_id=proposal.id,
                image_id=proposal.image_id,
                box=shown,
                s_score=record.s_score,
                positive_categories=positive,
                thumbnail_png=render_thumbnail(image, shown),
                created_round=round_index,
            )
        )
    return requests


def oracle_annotate(request: AnnotationRequest, dataset: Dataset) -> AnnotationResult:
    """Resolve a request from hidden ground truth.

    The ground-truth object with maximal IoU against the request box
    decides: at IoU >= 0.5 its category and box are returned, otherwise
    the request is background.
    """
    if not dataset.has_image(request.image_id):
        raise UnknownImageError(request.image_id)
    image = dataset.image(request.image_id)
    best_iou = 0.0
    best_obj = None
    for obj in image.objects:
        value = iou(request.box, obj.box)
        if value > best_iou:
            best_iou = value
            best_obj = obj
    if best_obj is not None and best_iou >= 0.5:
        return AnnotationResult(
            request_id=request.request_id,
            label=best_obj.category,
            corrected_box=best_obj.box,
            annotator="simulated-oracle",
        )
    return AnnotationResult(
        request_id=request.request_id,
        label=BACKGROUND,
        corrected_box=None,
        annotator="simulated-oracle",
    )


@dataclass
class SamplePools:
    """Labeled and unlabeled proposal pools with source-precedence rules."""

    num_categories: int
    labeled: dict[str, tuple[RegionProposal, LabelVector]] = field(default_factory=dict)
    unlabeled: dict[str, RegionProposal] = field(default_factory=dict)

    def add_labeled(self, proposal: RegionProposal, label: LabelVector) -> None:
        if label.source not in ("ground-truth", "user"):
            raise ValueError("only ground-truth and user labels may persist in the pool")
        if proposal.id in self.labeled:
            raise ValueError(f"proposal {proposal.id} already labeled")
        self.unlabeled.pop(proposal.id, None)
        self.labeled[proposal.id] = (proposal, label)

    def add_unlabeled(self, proposal: RegionProposal) -> None:
        if proposal.id not in self.labeled:
            self.unlabeled.setdefault(proposal.id, proposal)

    def labeled_samples(self) -> list[tuple[RegionProposal, LabelVector]]:
        return list(self.labeled.values())

    @property
    def total(self) -> int:
        return len(self.labeled) + len(self.unlabeled)


@dataclass
class AnnotationQueue:
    pending: dict[str, AnnotationRequest] = field(default_factory=dict)
    applied: dict[str, AnnotationResult] = field(default_factory=dict)
    expired: set = field(default_factory=set)

    def add_requests(self, requests) -> None:
        for request in requests:
            self.pending[request.request_id] = request

    def expire_pending(self) -> list[str]:
        stale = sorted(self.pending)
        for request_id in stale:
            self.expired.add(request_id)
        self.pending.clear()
        return stale


def _same_result(a: AnnotationResult, b: AnnotationResult) -> bool:
    return a.label == b.label and a.corrected_box == b.corrected_box


def apply_annotations(results, pools: SamplePools, queue: AnnotationQueue) -> list[str]:
    """Promote annotated proposals into the labeled pool; idempotent per request.

    Returns the request ids actually applied (duplicates are no-ops).
    """
    applied = []
    for result in results:
        prior = queue.applied.get(result.request_id)
        if prior is not None:
            if _same_result(prior, result):
                continue
            raise ConflictingResultError(
                f"conflicting duplicate result for {result.request_id}"
            )
        request = queue.pending.get(result.request_id)
        if request is None:
            raise StaleRequestError(f"request {result.request_id} is not pending")
        proposal = pools.unlabeled.get(request.proposal_id)
        if proposal is None:
            raise StaleRequestError(
                f"proposal {request.proposal_id} is no longer in the unlabeled pool"
            )
        if result.label == BACKGROUND:
            label = LabelVector.background(pools.num_categories, "user")
        else:
            target = None
            if result.corrected_box is not None:
                target = box_to_deltas(proposal.box, result.corrected_box)
            label = LabelVector.one_hot(pools.num_categories, result.label, "user", target)
        queue.pending.pop(result.request_id)
        queue.applied[result.request_id] = result
        pools.add_labeled(proposal, label)
        applied.append(result.request_id)
    return applied


class SimulatedOracle:
    """Annotator that resolves every request from hidden ground truth."""

    name = "simulated-oracle"

    def __init__(self, dataset: Dataset):
        self.dataset = dataset

    def annotate(self, requests) -> list[AnnotationResult]:
        return [oracle_annotate(request, self.dataset) for request in requests]
