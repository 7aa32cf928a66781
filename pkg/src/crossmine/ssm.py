"""Self-supervised mining core.

A candidate region proposal is validated by pasting its crop into
annotated images that lack its predicted category and checking whether
the up-to-date detector re-detects it there.  Per validation image the
contribution is the mean, over all proposals generated on the composited
image, of the predicted-class probability restricted to proposals
overlapping the pasted box (IoU >= gamma).  Averaging across validation
images gives the consistency score s; scaling by the pace parameter
gives the loss tolerance f that switches the per-category binary
weights v on or off.  High-consistency proposals are re-ranked per
category, capped at k, and receive a disposable pseudo-label from the
constrained (m+1)-candidate solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detector import DetectorState, LabelVector, RegionProposal, classify, propose
from .geometry import BoundingBox, iou
from .seeding import derive_seed
from .synthbench import SyntheticImage, paste


class InvalidValidationImageError(ValueError):
    """A validation image contains the category being validated."""


class ZeroWeightVectorError(ValueError):
    """solve_pseudo_labels was called with all-zero weights."""


@dataclass
class OverlapTerm:
    proposal_id: str
    iou: float
    phi: float

    def to_json(self):
        return {"proposal_id": self.proposal_id, "iou": self.iou, "phi": self.phi}


@dataclass
class ValidationTraceEntry:
    validation_image_id: str
    placed_box: BoundingBox
    omega_size: int
    empty: bool
    overlaps: list[OverlapTerm]

    def term(self) -> float:
        """Per-image consistency value replayed from the stored overlaps."""
        if self.empty or self.omega_size == 0:
            return 0.0
        return sum(o.phi for o in self.overlaps) / self.omega_size

    def to_json(self):
        return {
            "validation_image_id": self.validation_image_id,
            "placed_box": self.placed_box.to_json(),
            "omega_size": self.omega_size,
            "empty": self.empty,
            "overlaps": [o.to_json() for o in self.overlaps],
        }


@dataclass
class ConsistencyRecord:
    proposal_id: str
    j_star: int
    phi: np.ndarray              # per-category probabilities at scoring time
    f_value: float
    s_score: float | None        # absent when no validation image existed
    v: np.ndarray                # per-category binary weights
    trace: list[ValidationTraceEntry] = field(default_factory=list)

    def to_json(self):
        return {
            "proposal_id": self.proposal_id,
            "j_star": self.j_star,
            "phi": [float(p) for p in self.phi],
            "f_value": self.f_value,
            "s_score": self.s_score,
            "v": [int(x) for x in self.v],
            "trace": [e.to_json() for e in self.trace],
        }


@dataclass
class HighConsistencyEntry:
    proposal_id: str
    s_score: float
    record: ConsistencyRecord
    label: LabelVector | None = None


@dataclass
class HighConsistencySet:
    per_category: dict[int, list[HighConsistencyEntry]]

    def entries(self) -> list[HighConsistencyEntry]:
        out = []
        for category in sorted(self.per_category):
            out.extend(self.per_category[category])
        return out

    def __len__(self):
        return sum(len(v) for v in self.per_category.values())


def candidate_losses(phi: np.ndarray, positive: int | None) -> np.ndarray:
    """Per-category logistic losses for a one-hot (or all-negative) labeling."""
    phi = np.asarray(phi, dtype=np.float64)
    with np.errstate(divide="ignore"):
        losses = -np.log1p(-phi)
        if positive is not None:
            losses[positive] = -np.log(phi[positive])
    return losses


def update_weights(loss: float, f_value: float) -> int:
    """Closed-form binary weight: on exactly when the loss is within tolerance."""
    return 1 if loss <= f_value else 0


def cross_image_validate(
    proposal: RegionProposal,
    source_image: SyntheticImage,
    category: int,
    validation_images: list[SyntheticImage],
    state: DetectorState,
    config,
    seed: int = 0,
) -> tuple[float, list[ValidationTraceEntry]]:
    """Paste the proposal into each validation image and score re-detection.

    Returns the pace-scaled mean per-image consistency value and a full
    trace (placed box, proposal count, overlapping proposals with their
    probabilities) sufficient to replay the computation.
    """
    if not 1 <= len(validation_images) <= config.validation_images:
        raise ValueError(
            f"need 1..{config.validation_images} validation images, "
            f"got {len(validation_images)}"
        )
    terms = []
    trace = []
    for val_img in validation_images:
        if val_img.has_category(category):
            raise InvalidValidationImageError(
                f"{val_img.id} contains category {category}"
            )
        paste_seed = derive_seed(seed, "paste", proposal.id, val_img.id)
        composited, placed = paste(source_image, proposal.box, val_img, paste_seed)
        omega = propose(composited, state)
        if not omega:
            terms.append(0.0)
            trace.append(ValidationTraceEntry(val_img.id, placed, 0, True, []))
            continue
        overlaps = []
        for candidate in omega:
            overlap = iou(placed, candidate.box)
            if overlap >= config.iou_gamma:
                phi_j = float(classify(state, candidate.features)[category])
                overlaps.append(OverlapTerm(candidate.id, overlap, phi_j))
        entry = ValidationTraceEntry(val_img.id, placed, len(omega), False, overlaps)
        terms.append(entry.term())
        trace.append(entry)
    f_value = config.lambda_pace * float(np.mean(terms))
    return f_value, trace


def _record_from_terms(proposal, phi, j_star, f_value, s_score, trace):
    positive_losses = candidate_losses(phi, j_star)
    v = np.array(
        [update_weights(float(positive_losses[j]), f_value) for j in range(len(phi))],
        dtype=np.int8,
    )
    return ConsistencyRecord(
        proposal_id=proposal.id,
        j_star=j_star,
        phi=phi,
        f_value=f_value,
        s_score=s_score,
        v=v,
        trace=trace,
    )


def consistency_score(
    proposal: RegionProposal,
    source_image: SyntheticImage,
    state: DetectorState,
    annotated_images: list[SyntheticImage],
    config,
    seed: int = 0,
) -> ConsistencyRecord:
    """Full consistency record for one proposal.

    Samples up to N annotated images lacking the predicted category
    (seeded, without replacement), runs cross-image validation, and
    fills the binary weights from the candidate labeling's losses.
    When every annotated image contains the predicted category the
    record carries s_score=None and is ineligible for pseudo-labeling.
    """
    phi = classify(state, proposal.features)
    j_star = int(np.argmax(phi))
    candidates = [img for img in annotated_images if not img.has_category(j_star)]
    if not candidates:
        return _record_from_terms(proposal, phi, j_star, 0.0, None, [])
    candidates = sorted(candidates, key=lambda img: img.id)
    count = min(config.validation_images, len(candidates))
    rng = np.random.default_rng(derive_seed(seed, "valimgs", proposal.id))
    chosen_idx = sorted(rng.choice(len(candidates), size=count, replace=False).tolist())
    chosen = [candidates[i] for i in chosen_idx]
    f_value, trace = cross_image_validate(
        proposal, source_image, j_star, chosen, state, config, seed=seed
    )
    s_score = float(np.mean([entry.term() for entry in trace]))
    return _record_from_terms(proposal, phi, j_star, f_value, s_score, trace)


def single_image_record(
    proposal: RegionProposal, state: DetectorState, config
) -> ConsistencyRecord:
    """Baseline scoring without cross-image validation.

    The consistency score collapses to the proposal's own predicted-class
    probability; everything downstream (re-ranking, the pseudo-label
    solver) is unchanged, which isolates the contribution of pasting.
    """
    phi = classify(state, proposal.features)
    j_star = int(np.argmax(phi))
    s_score = float(phi[j_star])
    f_value = config.lambda_pace * s_score
    return _record_from_terms(proposal, phi, j_star, f_value, s_score, [])


def rerank_topk(records, k: int) -> HighConsistencySet:
    """Group records by predicted class, sort by score, keep top-k nonzero."""
    if k < 1:
        raise ValueError("k must be >= 1")
    groups: dict[int, list[ConsistencyRecord]] = {}
    for record in records:
        if record.s_score is None or record.s_score <= 0.0:
            continue
        groups.setdefault(record.j_star, []).append(record)
    per_category = {}
    for category, group in groups.items():
        group.sort(key=lambda r: (-r.s_score, r.proposal_id))
        per_category[category] = [
            HighConsistencyEntry(r.proposal_id, r.s_score, r) for r in group[:k]
        ]
    return HighConsistencySet(per_category=per_category)


def solve_pseudo_labels(record: ConsistencyRecord) -> LabelVector:
    """Minimize the weighted labeling cost over the m+1 feasible vectors.

    Feasible vectors are the all-negative vector and the m one-hot
    positives; the weights stay fixed.  Ties prefer the all-negative
    vector, then the lowest category index.
    """
    v = np.asarray(record.v, dtype=bool)
    if not v.any():
        raise ZeroWeightVectorError(
            f"proposal {record.proposal_id} has an all-zero weight vector"
        )
    m = len(v)
    best_positive: int | None = None
    best_cost = np.inf
    for positive in [None, *range(m)]:
        losses = candidate_losses(record.phi, positive)
        cost = float(losses[v].sum())
        if cost < best_cost:
            best_cost = cost
            best_positive = positive
    if best_positive is None:
        return LabelVector.background(m, "pseudo")
    return LabelVector.one_hot(m, best_positive, "pseudo")
