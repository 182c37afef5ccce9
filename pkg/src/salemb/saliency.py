"""Saliency-target construction.

A target is a distribution over the patch grid marking where the model
ought to look for a given query. The pipeline is: extract the salient
subjects shared by the query and its positive candidate, segment each
subject in the query image, smooth each binary mask with a Gaussian,
score each mask's grounding confidence, filter by a confidence
threshold, merge survivors by pointwise max, then average-pool to the
patch grid and normalize.

Extraction, segmentation, and scoring sit behind small interfaces so a
real captioner/segmenter/scorer can be plugged in later; this package
ships oracle implementations backed by the synthetic corpus ground
truth. Every interface call can be captured as a wire record (one dict
per call) for replay or remote execution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import fileio
from .numerics import convolve2d, gaussian_kernel

# Instruction given to the subject extractor. Encodes the three rules the
# rest of the pipeline depends on, plus the input template.
EXTRACTION_PROMPT = (
    "Identify the salient subjects shared by the query and the positive samples. "
    "Constraints: (1) retain only nouns appearing in both the query and the "
    "positive samples; (2) every entity must be visually recognizable; "
    "(3) aggressively filter out abstract or non-visually-grounded concepts. "
    "Return the subject nouns as a list. "
    "Input template: QUERY:<Image_q><Text_q>; POSITIVE SAMPLES: <Image_t><Text_t>..."
)


@dataclass(frozen=True)
class PipelineConfig:
    sigma: float = 2.0
    delta: float = 0.2
    filtering: bool = True
    patch_size: int = 4
    prompt: str = EXTRACTION_PROMPT

    def validate(self) -> None:
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not -1.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [-1, 1]")
        if self.patch_size < 1:
            raise ValueError("patch_size must be at least 1")


@dataclass
class ScoredMask:
    """A smoothed mask in [0,1] with its grounding confidence."""

    smoothed: np.ndarray
    alpha: float


@dataclass
class SaliencyTarget:
    target: np.ndarray          # distribution over the N patches (flat, row-major)
    valid: bool
    merged: np.ndarray | None   # pixel-level merged map, kept for visualization


class Extractor(Protocol):
    def extract(
        self,
        sample_id: str,
        prompt: str,
        query_tokens: list[int],
        query_image: np.ndarray | None,
        positive_tokens: list[int],
        positive_image: np.ndarray | None,
    ) -> list[str]: ...


class Segmenter(Protocol):
    def segment(self, sample_id: str, image: np.ndarray, subject: str) -> np.ndarray: ...


class Scorer(Protocol):
    def score(self, sample_id: str, subject: str, masked_image: np.ndarray) -> float: ...


class OracleExtractor:
    """Ground-truth extractor: intersection of query and positive subjects.

    ``table`` maps sample id to (query subject labels, positive subject
    labels); ``known`` is the closed vocabulary of concrete classes, used
    to drop anything non-visual.
    """

    def __init__(self, table: dict[str, tuple[list[str], list[str]]], known: set[str]):
        self.table = table
        self.known = known

    def extract(self, sample_id, prompt, query_tokens, query_image, positive_tokens, positive_image):
        if sample_id not in self.table:
            raise KeyError(f"extractor has no ground truth for sample {sample_id!r}")
        query_subjects, positive_subjects = self.table[sample_id]
        shared = set(query_subjects) & set(positive_subjects) & self.known
        return sorted(shared)


class OracleSegmenter:
    """Ground-truth segmenter: returns stored object footprints.

    ``masks`` maps sample id to {class label: boolean footprint}. A known
    label absent from the image yields an all-zero mask.
    """

    def __init__(self, masks: dict[str, dict[str, np.ndarray]], known: set[str]):
        self.masks = masks
        self.known = known

    def segment(self, sample_id, image, subject):
        if subject not in self.known:
            raise KeyError(f"unknown subject {subject!r}")
        per_sample = self.masks.get(sample_id, {})
        if subject in per_sample:
            return per_sample[subject].astype(np.float64)
        return np.zeros(image.shape[:2])


class OracleScorer:
    """Grounding confidence as overlap between the mask and the true footprint.

    The mask is recovered from the masked image as its non-zero support
    (synthetic images have no all-zero pixels), then scored by
    intersection-over-union against the stored footprint.
    """

    def __init__(self, masks: dict[str, dict[str, np.ndarray]], known: set[str]):
        self.masks = masks
        self.known = known

    def score(self, sample_id, subject, masked_image):
        if subject not in self.known:
            raise KeyError(f"unknown subject {subject!r}")
        recovered = np.max(np.asarray(masked_image, dtype=np.float64), axis=2) > 0
        truth = self.masks.get(sample_id, {}).get(subject)
        if truth is None:
            truth = np.zeros_like(recovered, dtype=bool)
        truth = truth.astype(bool)
        union = np.count_nonzero(recovered | truth)
        if union == 0:
            return 0.0
        return np.count_nonzero(recovered & truth) / union


@dataclass
class Interfaces:
    extractor: Extractor
    segmenter: Segmenter
    scorer: Scorer


def encode_call(op: str, sample_id: str, payload: dict, response) -> dict:
    """One wire record per interface call; schema is the contract."""
    if op not in ("extract", "segment", "score"):
        raise ValueError(f"unknown op {op!r}")
    return {"op": op, "sample": sample_id, "payload": payload, "response": response}


def decode_call(record: dict) -> tuple[str, str, dict, object]:
    for key in ("op", "sample", "payload", "response"):
        if key not in record:
            raise ValueError(f"wire record missing field {key!r}")
    if record["op"] not in ("extract", "segment", "score"):
        raise ValueError(f"unknown op {record['op']!r}")
    return record["op"], record["sample"], record["payload"], record["response"]


class CallRecorder:
    """Wraps the three interfaces and logs every call as a wire record."""

    def __init__(self, inner: Interfaces):
        self.inner = inner
        self.records: list[dict] = []

    def extract(self, sample_id, prompt, query_tokens, query_image, positive_tokens, positive_image):
        out = self.inner.extractor.extract(
            sample_id, prompt, query_tokens, query_image, positive_tokens, positive_image
        )
        payload = {"prompt": prompt, "query_tokens": list(query_tokens), "positive_tokens": list(positive_tokens)}
        self.records.append(encode_call("extract", sample_id, payload, list(out)))
        return out

    def segment(self, sample_id, image, subject):
        out = self.inner.segmenter.segment(sample_id, image, subject)
        self.records.append(
            encode_call("segment", sample_id, {"subject": subject}, np.asarray(out).tolist())
        )
        return out

    def score(self, sample_id, subject, masked_image):
        out = self.inner.scorer.score(sample_id, subject, masked_image)
        self.records.append(encode_call("score", sample_id, {"subject": subject}, float(out)))
        return out

    def as_interfaces(self) -> Interfaces:
        return Interfaces(extractor=self, segmenter=self, scorer=self)

    def dump_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)


def extract_subjects(
    extractor: Extractor,
    prompt: str,
    sample_id: str,
    query_tokens: list[int],
    query_image: np.ndarray,
    positive_tokens: list[int],
    positive_image: np.ndarray | None,
) -> list[str]:
    """Ask the extractor which subjects the query and positive share."""
    try:
        return list(
            extractor.extract(sample_id, prompt, query_tokens, query_image, positive_tokens, positive_image)
        )
    except Exception as exc:
        raise RuntimeError(f"subject extraction failed for sample {sample_id!r}") from exc


def segment_subject(segmenter: Segmenter, sample_id: str, image: np.ndarray, subject: str) -> np.ndarray:
    """Delegate pixel-level segmentation of one subject; mask matches image size."""
    mask = np.asarray(segmenter.segment(sample_id, image, subject))
    if mask.shape != image.shape[:2]:
        raise ValueError(
            f"segmenter returned mask {mask.shape} for image {image.shape[:2]} (sample {sample_id!r})"
        )
    return mask


def smooth_mask(mask: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian-blur a binary footprint into a soft attention-like map."""
    return convolve2d(np.asarray(mask, dtype=np.float64), gaussian_kernel(sigma))


def score_subject(scorer: Scorer, sample_id: str, image: np.ndarray, mask: np.ndarray, subject: str) -> float:
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    masked = np.asarray(image, dtype=np.float64) * np.asarray(mask, dtype=np.float64)[:, :, None]
    return float(scorer.score(sample_id, subject, masked))


def merge_masks(scored: list[ScoredMask], delta: float, filtering: bool) -> tuple[np.ndarray, bool]:
    """Pointwise max over masks whose confidence clears the threshold.

    With filtering disabled every mask survives. Returns the merged map
    and whether any mask survived; an empty surviving set yields an
    all-zero map and valid=False.
    """
    shapes = {m.smoothed.shape for m in scored}
    if len(shapes) > 1:
        raise ValueError(f"mask shapes differ: {sorted(shapes)}")
    survivors = [m.smoothed for m in scored if not filtering or m.alpha >= delta]
    if not survivors:
        shape = scored[0].smoothed.shape if scored else (0, 0)
        return np.zeros(shape), False
    merged = survivors[0].copy()
    for m in survivors[1:]:
        np.maximum(merged, m, out=merged)
    return merged, True


def to_patch_target(merged: np.ndarray, patch_size: int) -> SaliencyTarget:
    """Average-pool the pixel map to the patch grid and normalize to sum 1."""
    h, w = merged.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"grid {merged.shape} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    pooled = merged.reshape(gh, patch_size, gw, patch_size).mean(axis=(1, 3))
    flat = pooled.reshape(-1)
    total = float(np.sum(flat))
    if total <= 0.0:
        return SaliencyTarget(target=np.zeros(gh * gw), valid=False, merged=merged)
    return SaliencyTarget(target=flat / total, valid=True, merged=merged)


def build_target(
    sample_id: str,
    query_tokens: list[int],
    query_image: np.ndarray,
    positive_tokens: list[int],
    positive_image: np.ndarray | None,
    config: PipelineConfig,
    interfaces: Interfaces,
) -> SaliencyTarget:
    """Run the full construction pipeline for one image-bearing query."""
    if query_image is None:
        raise ValueError(f"sample {sample_id!r} has no query image")
    config.validate()
    subjects = extract_subjects(
        interfaces.extractor, config.prompt, sample_id,
        query_tokens, query_image, positive_tokens, positive_image,
    )
    n_patches = (query_image.shape[0] // config.patch_size) * (query_image.shape[1] // config.patch_size)
    if not subjects:
        return SaliencyTarget(target=np.zeros(n_patches), valid=False, merged=None)

    scored: list[ScoredMask] = []
    for subject in subjects:
        try:
            mask = segment_subject(interfaces.segmenter, sample_id, query_image, subject)
            alpha = score_subject(interfaces.scorer, sample_id, query_image, mask, subject)
        except Exception as exc:
            raise RuntimeError(f"saliency pipeline failed for sample {sample_id!r}, subject {subject!r}") from exc
        scored.append(ScoredMask(smoothed=smooth_mask(mask, config.sigma), alpha=alpha))

    merged, valid = merge_masks(scored, config.delta, config.filtering)
    if not valid:
        return SaliencyTarget(target=np.zeros(n_patches), valid=False, merged=merged)
    return to_patch_target(merged, config.patch_size)


def make_oracle_interfaces(corpus) -> Interfaces:
    """Ground-truth interfaces for a synthetic corpus."""
    from .datagen import CLASS_LABELS, referenced_label

    known = set(CLASS_LABELS)
    cand_map = corpus.candidate_map()
    table: dict[str, tuple[list[str], list[str]]] = {}
    masks: dict[str, dict[str, np.ndarray]] = {}
    for sample in corpus.samples:
        if sample.flavor == "it2i":
            query_classes = sorted(sample.masks)
        else:
            query_classes = [referenced_label(sample)]
        table[sample.id] = (query_classes, list(cand_map[sample.positive].classes))
        masks[sample.id] = dict(sample.masks)
    return Interfaces(
        extractor=OracleExtractor(table, known),
        segmenter=OracleSegmenter(masks, known),
        scorer=OracleScorer(masks, known),
    )


def build_corpus_targets(corpus_dir, config: PipelineConfig, interfaces: Interfaces | None = None) -> dict:
    """Construct and store targets for every image-bearing query.

    Writes one target file and one merged-map image per it2i sample under
    ``targets/``, then rewrites the manifest with the file names filled
    in. Text-only queries keep a null target entry.
    """
    from . import datagen

    corpus = datagen.load_corpus(corpus_dir)
    if interfaces is None:
        interfaces = make_oracle_interfaces(corpus)
    cand_map = corpus.candidate_map()
    (corpus.root / "targets").mkdir(exist_ok=True)
    built = valid_count = 0
    for sample in corpus.samples:
        if sample.image is None:
            continue
        positive = cand_map[sample.positive]
        target = build_target(
            sample.id,
            sample.tokens,
            datagen.image_to_float(sample.image),
            positive.tokens,
            datagen.image_to_float(positive.image),
            config,
            interfaces,
        )
        target_path = f"targets/{sample.id}.tnsr"
        mask_path = f"targets/{sample.id}_mask.pgm"
        fileio.write_target(corpus.root / target_path, target.target, target.valid)
        if target.merged is None:
            merged_img = np.zeros(sample.image.shape[:2], dtype=np.uint8)
        else:
            peak = float(np.max(target.merged))
            scale = 255.0 / peak if peak > 0 else 0.0
            merged_img = np.round(target.merged * scale).astype(np.uint8)
        fileio.write_pgm(corpus.root / mask_path, merged_img)
        sample.files["target"] = target_path
        sample.files["target_mask"] = mask_path
        built += 1
        valid_count += int(target.valid)
    datagen.write_manifest(corpus.root, corpus.samples)
    return {"built": built, "valid": valid_count, "invalid": built - valid_count}
