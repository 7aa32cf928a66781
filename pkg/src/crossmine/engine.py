"""Alternating mining loop: score, re-rank, pseudo-label, train, annotate.

Each round runs T mini-batches.  A mini-batch (re)scores a seeded sample
of unlabeled proposals when its staleness window expires, re-ranks the
round's records into the per-category high-consistency set, solves the
constrained pseudo-labels, takes one detector step on the pseudo plus
labeled batch, and immediately discards the pseudo-labels.  After T
batches the low-consistency selection runs; an empty selection (or an
exhausted annotation budget) terminates the loop.

All randomness is derived statelessly from the master seed with
(purpose, round, batch) context, so two runs with the same config are
byte-identical and checkpoint/resume continues the exact event stream.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import al, ssm
from .al import AnnotationQueue, SamplePools, select_low_consistency
from .detector import (
    FEATURE_DIM,
    DetectorState,
    LabelVector,
    RegionProposal,
    _sliding_windows,
    batch_losses,
    box_to_deltas,
    classify,
    evaluate_map,
    extract_features,
    features_for_boxes,
    propose,
    refine_box,
    train_step,
)
from .geometry import BoundingBox, iou, iou_many
from .seeding import derive_seed
from .synthbench import Dataset

CHECKPOINT_VERSION = 1

METRICS_HEADER = "round,annotations_used,pseudo_count,mAP"


class CheckpointError(ValueError):
    """An engine checkpoint could not be restored."""


@dataclass(frozen=True)
class MiningConfig:
    """Resolved knobs for one mining run.

    The "paper" preset stores the published hyper-parameters verbatim
    ({lambda, k, N, gamma, z} = {0.9, 500, 5, 0.5, 100}); the "desk"
    preset scales k and z down and tunes the scoring workload so a full
    run finishes in seconds on a laptop CPU.
    """

    lambda_pace: float = 0.9
    top_k: int = 50
    validation_images: int = 5
    iou_gamma: float = 0.5
    annotation_batch: int = 10           # z
    batches_per_round: int = 20          # T
    tau_low: float = 0.1
    min_positive: int = 2
    learning_rate: float = 0.05
    lr_decay_steps: int | None = None  # halves the step size every this many updates
    batch_size: int = 32
    warmup_steps: int = 150
    rescore_every: int = 5
    images_per_rescore: int = 4
    score_top_per_image: int = 6
    pseudo_per_batch: int = 32
    background_per_image: int = 2
    # Fraction of the labeled split's objects that come pre-annotated; the
    # rest exist in the pixels but are not given to the detector, leaving
    # the initial model data-starved the way a 5%-annotated corpus would.
    annotation_fraction: float = 1.0
    strategy: str = "ssm"                # ssm | spl | rand
    annotation_budget: int | None = None
    seed: int = 0
    preset: str = "custom"

    def validate(self) -> None:
        if not 0.0 <= self.lambda_pace <= 1.0:
            raise ValueError("lambda_pace must lie in [0, 1]")
        if not 0.0 < self.iou_gamma < 1.0:
            raise ValueError("iou_gamma must lie in (0, 1)")
        for name in ("top_k", "validation_images", "annotation_batch", "batches_per_round"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.tau_low < 1.0:
            raise ValueError("tau_low must lie in (0, 1)")
        if self.strategy not in ("ssm", "spl", "rand"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.annotation_budget is not None and self.annotation_budget < 0:
            raise ValueError("annotation_budget must be >= 0")
        if not 0.0 < self.annotation_fraction <= 1.0:
            raise ValueError("annotation_fraction must lie in (0, 1]")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "MiningConfig":
        if name == "paper":
            base = dict(
                lambda_pace=0.9, top_k=500, validation_images=5,
                iou_gamma=0.5, annotation_batch=100,
            )
        elif name == "desk":
            base = dict(
                lambda_pace=0.9, top_k=50, validation_images=5,
                iou_gamma=0.5, annotation_batch=10, tau_low=0.1,
                batches_per_round=20, rescore_every=5,
                images_per_rescore=16, score_top_per_image=3,
                warmup_steps=3000, learning_rate=0.1, lr_decay_steps=3000,
                pseudo_per_batch=10, annotation_fraction=0.25,
            )
        else:
            raise ValueError(f"unknown preset {name!r}")
        base.update(overrides)
        config = cls(preset=name, **base)
        config.validate()
        return config

    def to_json(self) -> dict:
        data = asdict(self)
        return data

    @classmethod
    def from_json(cls, data: dict) -> "MiningConfig":
        config = cls(**data)
        config.validate()
        return config


@dataclass
class RunLog:
    """Append-only event stream stamped with (round, batch) indices."""

    events: list[dict] = field(default_factory=list)

    def append(self, event: str, round_index: int, batch_index: int, **payload) -> dict:
        entry = {"event": event, "round": round_index, "batch": batch_index}
        entry.update(payload)
        self.events.append(entry)
        return entry

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(event, sort_keys=True, separators=(",", ":")) + "\n"
            for event in self.events
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunLog":
        events = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    events.append(json.loads(line))
        return cls(events=events)

    def validate(self) -> None:
        """Check (round, batch) ordering and same-batch pseudo-label disposal."""
        last = (-1, -1)
        open_pseudo: set[str] = set()
        open_stamp = None
        for event in self.events:
            stamp = (event["round"], event["batch"])
            if stamp < last:
                raise ValueError(f"event stamps regressed: {last} -> {stamp}")
            if stamp != last and open_pseudo:
                raise ValueError(
                    f"pseudo-labels {sorted(open_pseudo)} from batch {open_stamp} "
                    "were never discarded"
                )
            last = stamp
            if event["event"] == "pseudo-assigned":
                open_pseudo.update(entry["proposal_id"] for entry in event["labels"])
                open_stamp = stamp
            elif event["event"] == "pseudo-discarded":
                open_pseudo.difference_update(event["proposal_ids"])
        if open_pseudo:
            raise ValueError(f"pseudo-labels {sorted(open_pseudo)} never discarded")


def _jitter_box(box: BoundingBox, width: int, height: int, rng) -> BoundingBox:
    """Seeded jitter keeping IoU >= 0.5 with the original box."""
    for _ in range(20):
        dx = int(round(rng.uniform(-0.15, 0.15) * box.width))
        dy = int(round(rng.uniform(-0.15, 0.15) * box.height))
        dw = int(round(rng.uniform(-0.15, 0.15) * box.width))
        dh = int(round(rng.uniform(-0.15, 0.15) * box.height))
        x0, y0 = box.x_min + dx, box.y_min + dy
        x1, y1 = box.x_max + dx + dw, box.y_max + dy + dh
        if x0 < 0 or y0 < 0 or x1 > width or y1 > height or x1 - x0 < 4 or y1 - y0 < 4:
            continue
        candidate = BoundingBox(x0, y0, x1, y1)
        if iou(candidate, box) >= 0.5:
            return candidate
    return box


def _interior_box(box: BoundingBox, rng) -> BoundingBox | None:
    """Sub-window well inside the box (IoU < 0.3): a hard negative, since
    a crop from the middle of an object looks like the object itself."""
    if box.width < 10 or box.height < 10:
        return None
    w = max(4, int(round(box.width * rng.uniform(0.4, 0.5))))
    h = max(4, int(round(box.height * rng.uniform(0.4, 0.5))))
    x0 = box.x_min + int(rng.integers(0, box.width - w + 1))
    y0 = box.y_min + int(rng.integers(0, box.height - h + 1))
    candidate = BoundingBox(x0, y0, x0 + w, y0 + h)
    return candidate if iou(candidate, box) < 0.3 else None


def _partial_box(box: BoundingBox, width: int, height: int, rng) -> BoundingBox | None:
    """Box straddling the object border with marginal overlap (background).

    The overlap is kept below 0.1: stronger partial overlaps carry real
    class evidence, and teaching the units to reject those would also
    stop them from firing on genuinely mixed crops.
    """
    for _ in range(10):
        dx = int(round(rng.choice([-1, 1]) * box.width * rng.uniform(0.8, 1.1)))
        dy = int(round(rng.choice([-1, 1]) * box.height * rng.uniform(0.8, 1.1)))
        x0, y0 = box.x_min + dx, box.y_min + dy
        x1, y1 = box.x_max + dx, box.y_max + dy
        if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
            continue
        candidate = BoundingBox(x0, y0, x1, y1)
        if iou(candidate, box) < 0.1:
            return candidate
    return None


def given_annotations(dataset: Dataset, config: MiningConfig) -> dict[str, set[int]]:
    """Object indices per labeled image that count as pre-given annotations.

    With annotation_fraction < 1 the labeled split is only partially
    annotated: a class-balanced seeded subsample of objects is given,
    guaranteeing at least one instance of every category.
    """
    per_category: dict[int, list[tuple[str, int]]] = {}
    for image in sorted(dataset.split("train-labeled"), key=lambda im: im.id):
        for idx, obj in enumerate(image.objects):
            per_category.setdefault(obj.category, []).append((image.id, idx))
    given: dict[str, set[int]] = {}
    for category in sorted(per_category):
        members = per_category[category]
        keep = max(1, int(round(config.annotation_fraction * len(members))))
        rng = np.random.default_rng(
            derive_seed(config.seed, "given-annotations", category)
        )
        chosen = sorted(rng.choice(len(members), size=keep, replace=False).tolist())
        for pick in chosen:
            image_id, idx = members[pick]
            given.setdefault(image_id, set()).add(idx)
    return given


def annotation_samples(image, box, category, m, rng, prefix, source, avoid=()):
    """Training-sample family for one annotated object.

    Mirrors what a ground-truth annotation is worth: the exact box plus a
    jittered copy (both with regression targets), the best-matching
    sliding windows (the 0.35 IoU floor keeps mid-section windows of tall
    objects in -- they are the only anchor the box regressor can learn
    the vertical expansion from), and hard negatives carved from the
    object (interior sub-windows, marginal partial overlaps).
    """
    samples = []
    exact = RegionProposal(
        id=f"{prefix}:gt",
        image_id=image.id,
        box=box,
        features=extract_features(image, box),
        provenance="ground-truth-jittered",
    )
    samples.append(
        (exact, LabelVector.one_hot(m, category, source, box_to_deltas(box, box)))
    )
    jittered_box = _jitter_box(box, image.width, image.height, rng)
    jittered = RegionProposal(
        id=f"{prefix}:jit",
        image_id=image.id,
        box=jittered_box,
        features=extract_features(image, jittered_box),
        provenance="ground-truth-jittered",
    )
    samples.append(
        (jittered,
         LabelVector.one_hot(m, category, source, box_to_deltas(jittered_box, box)))
    )
    windows = _sliding_windows(image.width, image.height)
    ious = iou_many(box, windows)
    for rank, wi in enumerate(np.argsort(-ious)[:2]):
        if ious[wi] < 0.35:
            break
        win_box = BoundingBox(*windows[wi])
        win = RegionProposal(
            id=f"{prefix}:win{rank}",
            image_id=image.id,
            box=win_box,
            features=features_for_boxes(image, [win_box.as_tuple()])[0],
            provenance="ground-truth-jittered",
        )
        samples.append(
            (win, LabelVector.one_hot(m, category, source, box_to_deltas(win_box, box)))
        )
    for kind, hard in (
        ("in", _interior_box(box, rng)),
        ("part", _partial_box(box, image.width, image.height, rng)),
    ):
        if hard is None:
            continue
        if any(iou(hard, other) >= 0.3 for other in avoid):
            continue
        proposal = RegionProposal(
            id=f"{prefix}:{kind}",
            image_id=image.id,
            box=hard,
            features=extract_features(image, hard),
            provenance="ground-truth-jittered",
        )
        samples.append((proposal, LabelVector.background(m, source)))
    return samples


def build_initial_pools(dataset: Dataset, config: MiningConfig) -> SamplePools:
    """Seed the labeled pool from the train-labeled split's given annotations.

    Every given object contributes its annotation_samples family; each
    image also contributes a few random background boxes.
    """
    m = dataset.spec.num_categories
    pools = SamplePools(num_categories=m)
    given = given_annotations(dataset, config)
    for image in sorted(dataset.split("train-labeled"), key=lambda im: im.id):
        rng = np.random.default_rng(derive_seed(config.seed, "init-pool", image.id))
        gt_boxes = [obj.box for obj in image.objects]
        given_here = given.get(image.id, set())
        for idx, obj in enumerate(image.objects):
            if idx not in given_here:
                continue
            for proposal, label in annotation_samples(
                image, obj.box, obj.category, m, rng,
                prefix=f"{image.id}:a{idx}", source="ground-truth", avoid=gt_boxes,
            ):
                if proposal.id not in pools.labeled:
                    pools.add_labeled(proposal, label)
        placed = 0
        attempts = 0
        size_lo, size_hi = dataset.spec.object_size
        while placed < config.background_per_image and attempts < 100:
            attempts += 1
            h = int(rng.integers(size_lo, size_hi + 1))
            w = int(rng.integers(size_lo, size_hi + 1))
            if w > image.width or h > image.height:
                continue
            x0 = int(rng.integers(0, image.width - w + 1))
            y0 = int(rng.integers(0, image.height - h + 1))
            box = BoundingBox(x0, y0, x0 + w, y0 + h)
            if any(iou(box, gt) >= 0.3 for gt in gt_boxes):
                continue
            proposal = RegionProposal(
                id=f"{image.id}:bg{placed}",
                image_id=image.id,
                box=box,
                features=extract_features(image, box),
                provenance="ground-truth-jittered",
            )
            pools.add_labeled(proposal, LabelVector.background(m, "ground-truth"))
            placed += 1
    return pools


def _sample_indices(n: int, count: int, seed: int) -> list[int]:
    if count >= n:
        return list(range(n))
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(n, size=count, replace=False).tolist())


class MiningEngine:
    def __init__(self, config: MiningConfig, dataset: Dataset, annotator, run_dir=None):
        config.validate()
        self.config = config
        self.dataset = dataset
        self.annotator = annotator
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.log = RunLog()
        self.queue = AnnotationQueue()
        self.metrics_rows: list[str] = []
        self.pseudo_ids: set[str] = set()
        self.annotations_used = 0
        self.round_index = 1
        self.current_map = 0.0
        self.initial_annotations = sum(
            len(v) for v in given_annotations(dataset, config).values()
        )
        self._warm = False
        self.observer = None
        self._groups = None
        self.pools = build_initial_pools(dataset, config)
        self.state = DetectorState.initial(dataset.spec.num_categories, FEATURE_DIM)
        self._labeled_images = sorted(
            dataset.split("train-labeled"), key=lambda im: im.id
        )
        self._unlabeled_images = sorted(dataset.split("unlabeled"), key=lambda im: im.id)
        self._test_images = sorted(dataset.split("test"), key=lambda im: im.id)
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "checkpoints").mkdir(exist_ok=True)

    # ------------------------------------------------------------------ setup

    def _label_groups(self):
        if self._groups is None:
            by_class: dict[int, list] = {}
            background = []
            user = []
            for sample in self.pools.labeled.values():
                if sample[1].source == "user":
                    user.append(sample)
                category = sample[1].positive_category()
                if category is None:
                    background.append(sample)
                else:
                    by_class.setdefault(category, []).append(sample)
            self._groups = (by_class, background, user)
        return self._groups

    def _balanced_batch(self, seed: int) -> list:
        """Class-balanced labeled batch.

        One-vs-rest units starve on the natural ~8% per-class positive
        rate, so positives are oversampled; user-won annotations are the
        scarcest and most informative samples, so they get a dedicated
        slice on top.
        """
        by_class, background, user = self._label_groups()
        rng = np.random.default_rng(seed)
        m = self.dataset.spec.num_categories
        per_class = max(1, int(round(self.config.batch_size * 0.6 / m)))
        batch = []
        for j in range(m):
            group = by_class.get(j)
            if not group:
                continue
            batch.extend(group[i] for i in rng.integers(0, len(group), size=per_class))
        if user:
            user_slots = max(1, int(round(self.config.batch_size * 0.1)))
            batch.extend(user[i] for i in rng.integers(0, len(user), size=user_slots))
        remaining = max(0, self.config.batch_size - len(batch))
        if background and remaining:
            batch.extend(
                background[i]
                for i in rng.integers(0, len(background), size=remaining)
            )
        return batch

    def _learning_rate(self) -> float:
        base = self.config.learning_rate
        if self.config.lr_decay_steps is None:
            return base
        return base / (1.0 + self.state.update_counter / self.config.lr_decay_steps)

    def _warmup(self) -> None:
        for step in range(self.config.warmup_steps):
            batch = self._balanced_batch(derive_seed(self.config.seed, "warmup", step))
            self.state = train_step(self.state, batch, self._learning_rate())
        self._warm = True

    def _log_start(self) -> None:
        self.log.append(
            "run-start",
            0,
            0,
            strategy=self.config.strategy,
            labeled_images=len(self._labeled_images),
            unlabeled_images=len(self._unlabeled_images),
            test_images=len(self._test_images),
            initial_annotations=self.initial_annotations,
            initial_labeled_proposals=len(self.pools.labeled),
            warmup_steps=self.config.warmup_steps,
            conventions={
                "predicted_class": "argmax over the proposal's own features",
                "consistency_indicator": "overlap indicator applied inside the score",
                "validation_normalizer": "all proposals on the composited image",
            },
        )

    # ------------------------------------------------------------ mini-batch

    def _labeled_batch(self, batch_index: int) -> list:
        return self._balanced_batch(
            derive_seed(self.config.seed, "batch", self.round_index, batch_index)
        )

    def _rescore_images(self, batch_index: int):
        count = min(self.config.images_per_rescore, len(self._unlabeled_images))
        idx = _sample_indices(
            len(self._unlabeled_images),
            count,
            derive_seed(self.config.seed, "rescore-imgs", self.round_index, batch_index),
        )
        return [self._unlabeled_images[i] for i in idx]

    def _candidate_proposals(self, image, limit: int | None) -> list[RegionProposal]:
        """Proposals worth scoring on this image, most informative first.

        Scoring every unlabeled proposal each batch is unaffordable, so
        candidates are capped per image; ambiguous crops (several
        positive classes) come first since both the annotation queue and
        the pseudo-labeling pipeline feed on them, then the most
        confident remainder.
        """
        proposals = [
            p for p in propose(image, self.state) if p.id not in self.pools.labeled
        ]
        if limit is not None and len(proposals) > limit:
            scored = []
            for p in proposals:
                phi = classify(self.state, p.features)
                positives = int((phi > 0.5).sum())
                scored.append((-min(positives, 2), -float(phi.max()), p.id, p))
            scored.sort(key=lambda item: item[:3])
            proposals = [p for *_, p in scored[:limit]]
        for proposal in proposals:
            self.pools.add_unlabeled(proposal)
        return proposals

    def _score_proposals(self, records: dict, batch_index: int) -> None:
        for image in self._rescore_images(batch_index):
            for proposal in self._candidate_proposals(
                image, self.config.score_top_per_image
            ):
                if self.config.strategy == "spl":
                    record = ssm.single_image_record(proposal, self.state, self.config)
                else:
                    record = ssm.consistency_score(
                        proposal,
                        image,
                        self.state,
                        self._labeled_images,
                        self.config,
                        seed=derive_seed(
                            self.config.seed, "score", self.round_index, batch_index
                        ),
                    )
                records[proposal.id] = record
                self.log.append(
                    "consistency-record",
                    self.round_index,
                    batch_index,
                    record=record.to_json(),
                )

    def _mining_batch(self, records: dict, batch_index: int) -> None:
        if (batch_index - 1) % self.config.rescore_every == 0:
            self._score_proposals(records, batch_index)
        high_set = ssm.rerank_topk(records.values(), self.config.top_k)
        self.log.append(
            "high-consistency-set",
            self.round_index,
            batch_index,
            classes={
                str(cat): [entry.proposal_id for entry in entries]
                for cat, entries in sorted(high_set.per_category.items())
            },
        )
        # Train only on entries whose predicted class is itself within the
        # loss tolerance: with v[j*]=0 the labeling cost is tied between
        # the one-hot and all-negative vectors, so the solved label carries
        # no evidence about the predicted class and would only add noise.
        entries = [
            e
            for e in high_set.entries()
            if e.record.v.any() and e.record.v[e.record.j_star]
        ]
        if len(entries) > self.config.pseudo_per_batch:
            # A stale-window H can exceed what one mini-batch should absorb;
            # rotate a best-scores-first window through it so no pseudo-label
            # is recycled many times within a round.
            entries.sort(key=lambda e: (-e.s_score, e.proposal_id))
            cap = self.config.pseudo_per_batch
            start = ((batch_index - 1) * cap) % len(entries)
            doubled = entries + entries
            entries = doubled[start : start + cap]
        pseudo_batch = []
        assigned = []
        for entry in entries:
            entry.label = ssm.solve_pseudo_labels(entry.record)
            proposal = self.pools.unlabeled[entry.proposal_id]
            pseudo_batch.append((proposal, entry.label))
            assigned.append(
                {
                    "proposal_id": entry.proposal_id,
                    "image_id": proposal.image_id,
                    "box": proposal.box.to_json(),
                    "category": entry.label.positive_category()
                    if entry.label.positive_category() is not None
                    else al.BACKGROUND,
                    "s_score": entry.s_score,
                }
            )
            self.pseudo_ids.add(entry.proposal_id)
        if assigned:
            self.log.append(
                "pseudo-assigned", self.round_index, batch_index, labels=assigned
            )
        batch = self._labeled_batch(batch_index) + pseudo_batch
        cls_loss, loc_loss = batch_losses(self.state, batch)
        self.state = train_step(self.state, batch, self._learning_rate())
        self.log.append(
            "train-step",
            self.round_index,
            batch_index,
            cls_loss=cls_loss,
            loc_loss=loc_loss,
            n_labeled=len(batch) - len(pseudo_batch),
            n_pseudo=len(pseudo_batch),
            update_counter=self.state.update_counter,
        )
        if assigned:
            self.log.append(
                "pseudo-discarded",
                self.round_index,
                batch_index,
                proposal_ids=[entry["proposal_id"] for entry in assigned],
            )

    def _random_requests(self) -> list[al.AnnotationRequest]:
        candidates = sorted(
            pid for pid in self.pools.unlabeled if pid not in self.pools.labeled
        )
        if not candidates:
            return []
        idx = _sample_indices(
            len(candidates),
            min(self.config.annotation_batch, len(candidates)),
            derive_seed(self.config.seed, "rand-select", self.round_index),
        )
        requests = []
        for i in idx:
            proposal = self.pools.unlabeled[candidates[i]]
            image = self.dataset.image(proposal.image_id)
            shown = refine_box(self.state, proposal, image.width, image.height)
            requests.append(
                al.AnnotationRequest(
                    request_id=f"r{self.round_index}:{proposal.id}",
                    proposal_id=proposal.id,
                    image_id=proposal.image_id,
                    box=shown,
                    s_score=None,
                    positive_categories=[],
                    thumbnail_png=al.render_thumbnail(image, shown),
                    created_round=self.round_index,
                )
            )
        return requests

    # ----------------------------------------------------------------- round

    def _expand_annotations(self, results, request_map, applied_ids) -> None:
        """A confirmed box is worth a full ground-truth annotation: derive
        the same training-sample family from it that pre-given objects get."""
        m = self.dataset.spec.num_categories
        for result in results:
            if result.request_id not in applied_ids:
                continue
            if result.label == al.BACKGROUND or result.corrected_box is None:
                continue
            request = request_map[result.request_id]
            image = self.dataset.image(request.image_id)
            rng = np.random.default_rng(
                derive_seed(self.config.seed, "annot-expand", result.request_id)
            )
            for proposal, label in annotation_samples(
                image, result.corrected_box, result.label, m, rng,
                prefix=f"u:{result.request_id}", source="user",
            ):
                if proposal.id not in self.pools.labeled:
                    self.pools.unlabeled.pop(proposal.id, None)
                    self.pools.add_labeled(proposal, label)

    def _evaluate(self, batch_index: int) -> None:
        aps, mean_ap = evaluate_map(self.state, self._test_images)
        self.current_map = mean_ap
        self.log.append(
            "evaluation",
            self.round_index,
            batch_index,
            per_category={str(cat): ap for cat, ap in sorted(aps.items())},
            map=mean_ap,
        )
        self.metrics_rows.append(
            f"{self.round_index},{self.annotations_used},{len(self.pseudo_ids)},{mean_ap!r}"
        )
        if self.observer is not None:
            self.observer(self)

    def _terminate(self, reason: str, batch_index: int) -> None:
        self.log.append("termination", self.round_index, batch_index, reason=reason)
        self._evaluate(batch_index)

    def run(self) -> tuple[DetectorState, RunLog]:
        if not self._warm:
            self._log_start()
            self._warmup()
        budget = self.config.annotation_budget
        terminated = False
        while not terminated:
            self.log.append("round-start", self.round_index, 0)
            self.queue.expire_pending()
            records: dict[str, ssm.ConsistencyRecord] = {}
            for batch_index in range(1, self.config.batches_per_round + 1):
                if self.config.strategy == "rand":
                    if (batch_index - 1) % self.config.rescore_every == 0:
                        # The random baseline draws from the full proposal
                        # stream, not the curated scoring shortlist.
                        for image in self._rescore_images(batch_index):
                            self._candidate_proposals(image, None)
                    batch = self._labeled_batch(batch_index)
                    cls_loss, loc_loss = batch_losses(self.state, batch)
                    self.state = train_step(self.state, batch, self._learning_rate())
                    self.log.append(
                        "train-step",
                        self.round_index,
                        batch_index,
                        cls_loss=cls_loss,
                        loc_loss=loc_loss,
                        n_labeled=len(batch),
                        n_pseudo=0,
                        update_counter=self.state.update_counter,
                    )
                else:
                    self._mining_batch(records, batch_index)
            final_batch = self.config.batches_per_round
            if budget is not None and self.annotations_used >= budget:
                self._terminate("budget-exhausted", final_batch)
                terminated = True
                break
            if self.config.strategy == "rand":
                requests = self._random_requests()
            else:
                requests = select_low_consistency(
                    records.values(),
                    self.pools.unlabeled,
                    {img.id: img for img in self.dataset.images},
                    self.state,
                    self.config.annotation_batch,
                    self.config.tau_low,
                    self.config.seed,
                    min_positive=self.config.min_positive,
                    round_index=self.round_index,
                )
            if budget is not None:
                requests = requests[: budget - self.annotations_used]
            if not requests:
                self._terminate("empty-U", final_batch)
                terminated = True
                break
            self.queue.add_requests(requests)
            self.log.append(
                "annotation-requests",
                self.round_index,
                final_batch,
                requests=[r.to_json() for r in requests],
            )
            results = self.annotator.annotate(requests)
            request_map = {r.request_id: r for r in requests}
            applied = al.apply_annotations(results, self.pools, self.queue)
            self._expand_annotations(results, request_map, set(applied))
            self._groups = None
            self.annotations_used += len(applied)
            self.log.append(
                "annotation-results",
                self.round_index,
                final_batch,
                results=[r.to_json() for r in results],
                annotations_used=self.annotations_used,
            )
            self._evaluate(final_batch)
            if self.run_dir is not None:
                self.checkpoint(
                    self.run_dir / "checkpoints" / f"round-{self.round_index}.json"
                )
                self._flush()
            self.round_index += 1
        if self.run_dir is not None:
            self._flush()
            self.state.save(self.run_dir / "detector.json")
        return self.state, self.log

    # ------------------------------------------------------------ persistence

    def _flush(self) -> None:
        self.log.save(self.run_dir / "runlog.jsonl")
        metrics = "\n".join([METRICS_HEADER, *self.metrics_rows])
        (self.run_dir / "metrics.csv").write_text(metrics + "\n", encoding="utf-8")

    def _proposal_to_json(self, proposal: RegionProposal) -> dict:
        return {
            "id": proposal.id,
            "image_id": proposal.image_id,
            "box": proposal.box.to_json(),
            "provenance": proposal.provenance,
        }

    def _proposal_from_json(self, data: dict) -> RegionProposal:
        image = self.dataset.image(data["image_id"])
        box = BoundingBox.from_json(data["box"])
        return RegionProposal(
            id=data["id"],
            image_id=data["image_id"],
            box=box,
            features=extract_features(image, box),
            provenance=data["provenance"],
        )

    def checkpoint(self, path) -> None:
        """Snapshot everything needed to resume at the next round boundary."""
        labeled = []
        for proposal, label in self.pools.labeled.values():
            labeled.append(
                {
                    "proposal": self._proposal_to_json(proposal),
                    "values": label.values.tolist(),
                    "source": label.source,
                    "regression_target": None
                    if label.regression_target is None
                    else label.regression_target.tolist(),
                }
            )
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_json(),
            "next_round": self.round_index + 1,
            "annotations_used": self.annotations_used,
            "pseudo_ids": sorted(self.pseudo_ids),
            "current_map": self.current_map,
            "metrics_rows": list(self.metrics_rows),
            "detector": self.state.to_json(),
            "labeled": labeled,
            "unlabeled": [
                self._proposal_to_json(p) for p in self.pools.unlabeled.values()
            ],
            "applied_requests": {
                rid: result.to_json() for rid, result in sorted(self.queue.applied.items())
            },
        }
        Path(path).write_text(
            json.dumps(payload, sort_keys=True), encoding="utf-8"
        )

    @classmethod
    def resume(cls, path, dataset: Dataset, annotator, run_dir=None) -> "MiningEngine":
        """Rebuild an engine from a checkpoint; later rounds replay exactly."""
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version mismatch: {payload.get('format_version')!r}"
            )
        try:
            config = MiningConfig.from_json(payload["config"])
            engine = cls(config, dataset, annotator, run_dir=run_dir)
            engine.state = DetectorState.from_json(payload["detector"])
            pools = SamplePools(num_categories=dataset.spec.num_categories)
            for item in payload["labeled"]:
                proposal = engine._proposal_from_json(item["proposal"])
                label = LabelVector(
                    np.array(item["values"], dtype=np.int8),
                    item["source"],
                    item["regression_target"],
                )
                pools.add_labeled(proposal, label)
            for item in payload["unlabeled"]:
                pools.add_unlabeled(engine._proposal_from_json(item))
            engine.pools = pools
            engine.queue = AnnotationQueue(
                applied={
                    rid: al.AnnotationResult.from_json(data)
                    for rid, data in payload["applied_requests"].items()
                }
            )
            engine.annotations_used = payload["annotations_used"]
            engine.pseudo_ids = set(payload["pseudo_ids"])
            engine.current_map = payload["current_map"]
            engine.metrics_rows = list(payload["metrics_rows"])
            engine.round_index = payload["next_round"]
            engine._warm = True
        except CheckpointError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
        return engine


def run(
    config: MiningConfig, dataset: Dataset, annotator, run_dir=None, extra_config=None
) -> tuple[DetectorState, RunLog]:
    """Run the full mining loop; convenience wrapper around MiningEngine."""
    engine = MiningEngine(config, dataset, annotator, run_dir=run_dir)
    if run_dir is not None:
        resolved = dict(config.to_json())
        if extra_config:
            resolved.update(extra_config)
        (Path(run_dir) / "config.json").write_text(
            json.dumps(resolved, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    return engine.run()
