"""Synthetic image-text retrieval corpus.

Images are 32x32 RGB canvases with geometric objects (disc, box,
triangle in eight colors: 24 classes) over noisy gray background. Each
shape paints a distinctive fill (solid, stripes, checker) so class
identity is readable from any small crop of the object, not just from
its outline.
Two task flavors:

* ``t2i``: the query is text naming a class; the positive is a candidate
  image featuring that class.
* ``it2i``: the query is an image containing several objects of distinct
  colors plus a text token naming one color; the positive is a candidate
  image featuring the class of the referenced object (same shape and
  color). Solving it requires finding the named color in the query image
  and reading the fill pattern there.

Candidates are single-object images drawn from a shared bank. Every
query gets a candidate pool holding the positive exactly once plus
distractors that never feature the referenced class; pools for it2i
additionally stress pattern binding (same-color distractors) and object
selection (distractors featuring the query's other objects).

Ground truth (object classes and exact footprints) is stored alongside
the images so saliency oracles and evaluation can use it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .model import build_sequence
from .numerics import make_rng

SHAPES = ("disc", "box", "triangle")
COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "magenta": (255, 0, 255),
    "cyan": (0, 255, 255),
    "white": (255, 255, 255),
    "orange": (255, 128, 0),
}
COLOR_NAMES = tuple(COLORS)
CLASS_LABELS = tuple(f"{shape}_{color}" for shape in SHAPES for color in COLORS)

EOL_TOKEN = 0
CLASS_TOKEN_BASE = 1                        # 24 ids
COLOR_TOKEN_BASE = CLASS_TOKEN_BASE + len(CLASS_LABELS)   # 8 ids
INSTR_T2I = COLOR_TOKEN_BASE + len(COLOR_NAMES)  # "find an image of this class"
INSTR_IT2I = INSTR_T2I + 1                  # "find an image of the named object"
INSTR_CAND = INSTR_T2I + 2                  # "this is a candidate image"

BACKGROUND = 26  # uint8 gray, distinct from every object color channel
SHADE = 0.45     # brightness of the secondary tone in two-tone fills


def class_token(label: str) -> int:
    return CLASS_TOKEN_BASE + CLASS_LABELS.index(label)


def color_token(color: str) -> int:
    return COLOR_TOKEN_BASE + COLOR_NAMES.index(color)


def label_parts(label: str) -> tuple[str, str]:
    shape, color = label.split("_", 1)
    return shape, color


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 2000
    n_eval: int = 500
    pool_size: int = 64
    image_size: int = 32
    t2i_fraction: float = 0.5
    bank_per_class: int = 12
    min_objects: int = 2
    max_objects: int = 3
    noise: int = 12
    seed: int = 0

    def validate(self) -> None:
        if self.pool_size < 2:
            raise ValueError("pool_size must be at least 2")
        if not 0.0 <= self.t2i_fraction <= 1.0:
            raise ValueError("t2i_fraction must lie in [0, 1]")
        if not 1 <= self.min_objects <= self.max_objects <= len(COLOR_NAMES):
            raise ValueError("object count range must fit the distinct-color constraint")
        if self.bank_per_class < 1:
            raise ValueError("bank_per_class must be positive")
        if self.image_size < 16:
            raise ValueError("image_size below 16 leaves no room to place objects")
        if not 0 <= self.noise <= 255 - BACKGROUND:
            raise ValueError("noise must keep the background inside uint8 range")


@dataclass(frozen=True)
class ObjectSpec:
    label: str
    center: tuple[int, int]   # (row, col)
    scale: int


@dataclass
class Candidate:
    id: str
    tokens: list[int]
    classes: list[str]
    image: np.ndarray | None = None   # uint8 (H, W, 3)
    image_path: str = ""


@dataclass
class Sample:
    id: str
    flavor: str                       # "t2i" or "it2i"
    tokens: list[int]
    positive: str
    pool: list[str]
    image: np.ndarray | None = None
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    target: np.ndarray | None = None
    target_valid: bool = False
    files: dict = field(default_factory=dict)


@dataclass
class Corpus:
    root: Path
    meta: dict
    candidates: list[Candidate]
    samples: list[Sample]

    def by_split(self, split: str) -> list[Sample]:
        prefix = split + "_"
        return [s for s in self.samples if s.id.startswith(prefix)]

    def candidate_map(self) -> dict[str, Candidate]:
        return {c.id: c for c in self.candidates}


def footprint(shape: str, center: tuple[int, int], scale: int, size: int) -> np.ndarray:
    """Exact boolean footprint on pixel centers."""
    cy, cx = center
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= scale**2
    if shape == "box":
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= scale
    if shape == "triangle":
        # apex up: at row y the half-width grows linearly from 0 to scale
        inside_rows = (yy >= cy - scale) & (yy <= cy + scale)
        return inside_rows & (np.abs(xx - cx) * 2 <= (yy - cy + scale))
    raise ValueError(f"unknown shape {shape!r}")


def fill_pattern(shape: str, color: str, size: int) -> np.ndarray:
    """Full-canvas fill colors for one class, uint8 (size, size, 3).

    Discs are solid, boxes striped, triangles checkered; the second tone
    is the same hue at ``SHADE`` brightness. Patterns are anchored to the
    canvas grid, so every aligned 4x4 crop of an object interior shows
    the same motif regardless of where the object sits.
    """
    base = np.array(COLORS[color], dtype=np.float64)
    dark = np.round(base * SHADE)
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "disc":
        bright = np.ones((size, size), dtype=bool)
    elif shape == "box":
        bright = (yy // 2) % 2 == 0
    elif shape == "triangle":
        bright = ((yy // 2) + (xx // 2)) % 2 == 0
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return np.where(bright[:, :, None], base, dark).astype(np.uint8)


def render_image(
    objects: list[ObjectSpec], image_size: int, noise: int, rng: np.random.Generator
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Paint objects over noisy gray; returns uint8 image + exact footprints."""
    labels = [o.label for o in objects]
    if len(set(labels)) != len(labels):
        raise ValueError("object class ids must be distinct within one image")
    gray = BACKGROUND + rng.integers(0, noise + 1, (image_size, image_size), dtype=np.int64)
    image = np.repeat(gray[:, :, None], 3, axis=2).astype(np.uint8)
    masks: dict[str, np.ndarray] = {}
    for obj in objects:
        shape, color = label_parts(obj.label)
        mask = footprint(shape, obj.center, obj.scale, image_size)
        if not mask.any():
            raise ValueError(f"empty footprint for {obj.label}")
        edge = np.zeros_like(mask)
        edge[0, :] = edge[-1, :] = edge[:, 0] = edge[:, -1] = True
        if (mask & edge).any():
            raise ValueError(f"{obj.label} footprint leaves the canvas")
        image[mask] = fill_pattern(shape, color, image_size)[mask]
        masks[obj.label] = mask
    return image, masks


def _place_objects(labels: list[str], image_size: int, rng: np.random.Generator) -> list[ObjectSpec]:
    """Rejection-sample non-overlapping placements for the given classes."""
    for _ in range(200):
        specs: list[ObjectSpec] = []
        occupied = np.zeros((image_size, image_size), dtype=bool)
        ok = True
        for label in labels:
            shape, _ = label_parts(label)
            scale = int(rng.integers(3, 6))
            margin = scale + 1
            cy = int(rng.integers(margin, image_size - margin))
            cx = int(rng.integers(margin, image_size - margin))
            mask = footprint(shape, (cy, cx), scale, image_size)
            if (mask & occupied).any():
                ok = False
                break
            occupied |= mask
            specs.append(ObjectSpec(label=label, center=(cy, cx), scale=scale))
        if ok:
            return specs
    raise RuntimeError(f"could not place objects {labels} without overlap")


def _sample_pool(
    rng: np.random.Generator,
    positive: str,
    referenced: str,
    context_labels: list[str],
    by_class: dict[str, list[str]],
    pool_size: int,
) -> list[str]:
    """Positive + distractors that never feature the referenced class."""
    _, color = label_parts(referenced)
    color_mates = [
        cid
        for label in CLASS_LABELS
        if label != referenced and label_parts(label)[1] == color
        for cid in by_class[label]
    ]
    context = [cid for label in context_labels for cid in by_class[label]]
    eligible = [
        cid for label in CLASS_LABELS if label != referenced for cid in by_class[label]
    ]
    if pool_size - 1 > len(eligible):
        raise ValueError(
            f"pool_size {pool_size} unsatisfiable: only {len(eligible)} distractor candidates"
        )
    chosen: list[str] = []
    taken = {positive}

    def draw(source: list[str], count: int) -> None:
        avail = [c for c in source if c not in taken]
        count = min(count, len(avail))
        if count > 0:
            picks = rng.choice(len(avail), size=count, replace=False)
            for p in sorted(picks.tolist()):
                chosen.append(avail[p])
                taken.add(avail[p])

    budget = pool_size - 1
    draw(color_mates, min(16, budget))
    draw(context, min(16, budget - len(chosen)))
    draw(eligible, budget - len(chosen))
    pool = [positive] + chosen
    order = rng.permutation(len(pool))
    return [pool[i] for i in order]


def generate_corpus(config: DataConfig, out_dir: str | Path) -> Corpus:
    """Write the full corpus tree; a pure function of the config record."""
    config.validate()
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    (root / "targets").mkdir(exist_ok=True)
    rng = make_rng(config.seed)

    candidates: list[Candidate] = []
    by_class: dict[str, list[str]] = {label: [] for label in CLASS_LABELS}
    for label in CLASS_LABELS:
        for _ in range(config.bank_per_class):
            cid = f"cand_{len(candidates):05d}"
            specs = _place_objects([label], config.image_size, rng)
            image, _ = render_image(specs, config.image_size, config.noise, rng)
            path = f"images/{cid}.ppm"
            fileio.write_ppm(root / path, image)
            seq = build_sequence([], [INSTR_CAND], has_image=True, eol_token=EOL_TOKEN)
            candidates.append(
                Candidate(id=cid, tokens=list(seq.ids), classes=[label], image=image, image_path=path)
            )
            by_class[label].append(cid)

    samples: list[Sample] = []
    for split, count in (("train", config.n_train), ("eval", config.n_eval)):
        n_t2i = int(round(count * config.t2i_fraction))
        for i in range(count):
            sid = f"{split}_{i:05d}"
            flavor = "t2i" if i < n_t2i else "it2i"
            if flavor == "t2i":
                label = CLASS_LABELS[int(rng.integers(len(CLASS_LABELS)))]
                seq = build_sequence([class_token(label)], [INSTR_T2I], has_image=False, eol_token=EOL_TOKEN)
                positive = by_class[label][int(rng.integers(len(by_class[label])))]
                pool = _sample_pool(rng, positive, label, [], by_class, config.pool_size)
                sample = Sample(
                    id=sid, flavor=flavor, tokens=list(seq.ids), positive=positive, pool=pool,
                    files={"image": None, "masks": {}, "target": None, "target_mask": None},
                )
            else:
                n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
                color_idx = rng.choice(len(COLOR_NAMES), size=n_obj, replace=False)
                labels = []
                for ci in color_idx.tolist():
                    shape = SHAPES[int(rng.integers(len(SHAPES)))]
                    labels.append(f"{shape}_{COLOR_NAMES[ci]}")
                referenced = labels[int(rng.integers(len(labels)))]
                _, ref_color = label_parts(referenced)
                specs = _place_objects(labels, config.image_size, rng)
                image, masks = render_image(specs, config.image_size, config.noise, rng)
                image_path = f"images/{sid}.ppm"
                fileio.write_ppm(root / image_path, image)
                mask_paths = {}
                for label in sorted(masks):
                    mpath = f"masks/{sid}_{label}.pgm"
                    fileio.write_pgm(root / mpath, masks[label].astype(np.uint8) * 255)
                    mask_paths[label] = mpath
                seq = build_sequence([color_token(ref_color)], [INSTR_IT2I], has_image=True, eol_token=EOL_TOKEN)
                positive = by_class[referenced][int(rng.integers(len(by_class[referenced])))]
                context = [lab for lab in labels if lab != referenced]
                pool = _sample_pool(rng, positive, referenced, context, by_class, config.pool_size)
                sample = Sample(
                    id=sid, flavor=flavor, tokens=list(seq.ids), positive=positive, pool=pool,
                    image=image, masks=masks,
                    files={"image": image_path, "masks": mask_paths, "target": None, "target_mask": None},
                )
            samples.append(sample)

    meta = {
        "image_size": config.image_size,
        "n_train": config.n_train,
        "n_eval": config.n_eval,
        "pool_size": config.pool_size,
        "t2i_fraction": config.t2i_fraction,
        "bank_per_class": config.bank_per_class,
        "min_objects": config.min_objects,
        "max_objects": config.max_objects,
        "noise": config.noise,
        "seed": config.seed,
    }
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    with open(root / "candidates.jsonl", "w") as fh:
        for cand in candidates:
            fh.write(json.dumps(
                {"id": cand.id, "tokens": cand.tokens, "classes": cand.classes,
                 "files": {"image": cand.image_path}},
                sort_keys=True) + "\n")
    write_manifest(root, samples)
    return Corpus(root=root, meta=meta, candidates=candidates, samples=samples)


def write_manifest(root: Path, samples: list[Sample]) -> None:
    with open(root / "manifest.jsonl", "w") as fh:
        for s in samples:
            record = {
                "id": s.id, "flavor": s.flavor, "tokens": s.tokens,
                "files": s.files, "positive": s.positive, "pool": s.pool,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_corpus(corpus_dir: str | Path, load_images: bool = True) -> Corpus:
    root = Path(corpus_dir)
    if not (root / "manifest.jsonl").exists():
        raise FileNotFoundError(f"no manifest.jsonl under {root}")
    meta = json.loads((root / "meta.json").read_text())
    candidates: list[Candidate] = []
    for line in (root / "candidates.jsonl").read_text().splitlines():
        rec = json.loads(line)
        image = fileio.read_ppm(root / rec["files"]["image"]) if load_images else None
        candidates.append(
            Candidate(id=rec["id"], tokens=rec["tokens"], classes=rec["classes"],
                      image=image, image_path=rec["files"]["image"])
        )
    samples: list[Sample] = []
    for line in (root / "manifest.jsonl").read_text().splitlines():
        rec = json.loads(line)
        files = rec["files"]
        sample = Sample(
            id=rec["id"], flavor=rec["flavor"], tokens=rec["tokens"],
            positive=rec["positive"], pool=rec["pool"], files=files,
        )
        if load_images and files.get("image"):
            path = root / files["image"]
            if not path.exists():
                raise FileNotFoundError(f"sample {rec['id']}: missing image {path}")
            sample.image = fileio.read_ppm(path)
            sample.masks = {
                label: fileio.read_pgm(root / mpath) > 127
                for label, mpath in files["masks"].items()
            }
        if files.get("target"):
            tpath = root / files["target"]
            if not tpath.exists():
                raise FileNotFoundError(f"sample {rec['id']}: missing target {tpath}")
            sample.target, sample.target_valid = fileio.read_target(tpath)
        samples.append(sample)
    return Corpus(root=root, meta=meta, candidates=candidates, samples=samples)


def referenced_label(sample: Sample) -> str:
    """Class the query asks for: explicit for t2i, color-resolved for it2i."""
    for tok in sample.tokens:
        if CLASS_TOKEN_BASE <= tok < CLASS_TOKEN_BASE + len(CLASS_LABELS):
            return CLASS_LABELS[tok - CLASS_TOKEN_BASE]
        if COLOR_TOKEN_BASE <= tok < COLOR_TOKEN_BASE + len(COLOR_NAMES):
            color = COLOR_NAMES[tok - COLOR_TOKEN_BASE]
            for label in sample.masks or sample.files["masks"]:
                if label_parts(label)[1] == color:
                    return label
    raise ValueError(f"sample {sample.id} references no class")


def epoch_batches(samples: list[Sample], batch_size: int, rng: np.random.Generator):
    """One shuffled epoch of sample batches (last batch may be short)."""
    order = rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield [samples[i] for i in order[start : start + batch_size]]


def image_to_float(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / 255.0


def footprint_patches(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Boolean (N,) marking patches touched by the footprint, row-major."""
    h, w = mask.shape
    gh, gw = h // patch_size, w // patch_size
    return mask.reshape(gh, patch_size, gw, patch_size).any(axis=(1, 3)).reshape(-1)
