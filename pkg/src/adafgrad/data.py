"""Synthetic task sequences, binary feature/prototype files, and manifests.

Feature file (little-endian): magic ``WSF1``, u32 N_r, u32 k, u32 d_vis,
then N_r*d_vis float32 region values and N_r*k*k*d_vis float32 patch values,
row-major. Labels and identity live in the manifest, not the file.

Prototype file: magic ``WSP1``, u32 n_cls, u32 n_neg, u32 C_text, then the
class vectors in global-class order followed by the negative vectors, all
float32.

Manifest: UTF-8 JSON declaring every task, class, and slide up front so the
classification head can be pre-allocated at the full class count.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, ManifestError
from .metrics import TaskMaskRanges
from .model import SlideFeatures
from .prototypes import (
    BASE_TEMPLATES,
    CLASS_VARIANTS,
    NEGATIVES_PER_TASK,
    PrototypeBuffer,
    SentenceEmbedding,
    accumulate_task,
    build_class_prototype,
    build_negative_prototype,
)

_FEATURE_MAGIC = b"WSF1"
_PROTO_MAGIC = b"WSP1"

# Production-scale preset for reference runs against foundation-encoder
# feature dumps (768-d features, 4x4 patches per region, 384-d model).
FULL_SCALE_DIMS = {"d_vis": 768, "k": 4, "C_text": 768, "d_model": 384}


# ---------------------------------------------------------------------------
# Binary feature files


def write_slide_features(s: SlideFeatures, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_FEATURE_MAGIC)
        fh.write(struct.pack("<III", s.n_regions, s.k, s.d_vis))
        fh.write(np.ascontiguousarray(s.regions, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(s.patches, dtype="<f4").tobytes())


def read_slide_features(path, *, slide_id=None, task_index=0, class_in_task=0,
                         global_class=None) -> SlideFeatures:
    """Read a feature file; identity/labels come from the caller (manifest)."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FEATURE_MAGIC:
            raise FormatError(f"bad magic {magic!r} in feature file: {path}")
        header = fh.read(12)
        if len(header) != 12:
            raise FormatError(f"truncated feature header: {path}")
        n_r, k, d_vis = struct.unpack("<III", header)
        if n_r < 1 or k < 1 or d_vis < 1 or n_r * k * k * d_vis > 2 ** 31:
            raise FormatError(f"implausible dims ({n_r}, {k}, {d_vis}): {path}")
        body = fh.read()
    expect = 4 * (n_r * d_vis + n_r * k * k * d_vis)
    if len(body) != expect:
        raise FormatError(
            f"payload is {len(body)} bytes, expected {expect}: {path}")
    regions = np.frombuffer(body[: 4 * n_r * d_vis], dtype="<f4").reshape(n_r, d_vis)
    patches = np.frombuffer(body[4 * n_r * d_vis:], dtype="<f4").reshape(
        n_r, k * k, d_vis)
    return SlideFeatures(
        slide_id=path.stem if slide_id is None else slide_id,
        task_index=task_index,
        class_in_task=class_in_task,
        global_class=class_in_task if global_class is None else global_class,
        regions=regions,
        patches=patches,
    )


# ---------------------------------------------------------------------------
# Prototype files


def write_prototype_buffer(buffer: PrototypeBuffer, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_PROTO_MAGIC)
        width = buffer.width
        fh.write(struct.pack("<III", len(buffer.cls), len(buffer.neg), width))
        for _, vec in buffer.cls:
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())
        for _, vec in buffer.neg:
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def read_prototype_buffer(path) -> PrototypeBuffer:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != _PROTO_MAGIC:
            raise FormatError(f"bad magic in prototype file: {path}")
        header = fh.read(12)
        if len(header) != 12:
            raise FormatError(f"truncated prototype header: {path}")
        n_cls, n_neg, width = struct.unpack("<III", header)
        body = fh.read()
    expect = 4 * width * (n_cls + n_neg)
    if len(body) != expect:
        raise FormatError(f"payload is {len(body)} bytes, expected {expect}: {path}")
    flat = np.frombuffer(body, dtype="<f4").reshape(n_cls + n_neg, width)
    return PrototypeBuffer(
        cls=[(i, flat[i]) for i in range(n_cls)],
        neg=[(i, flat[n_cls + i]) for i in range(n_neg)],
    )


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class SlideEntry:
    id: str
    path: str
    task_index: int
    class_in_task: int
    split: str


@dataclass
class TaskEntry:
    name: str
    classes: list
    slides: list


@dataclass
class Manifest:
    n_tasks: int
    dims: dict                     # {"d_vis", "k", "C_text"}
    prototypes: str
    tasks: list
    base_dir: Path = field(default=Path("."), repr=False)

    @property
    def class_counts(self):
        return [len(t.classes) for t in self.tasks]

    @property
    def total_classes(self) -> int:
        return sum(self.class_counts)

    def offsets(self):
        offs, run = [], 0
        for c in self.class_counts:
            offs.append(run)
            run += c
        return offs

    def mask_ranges(self) -> TaskMaskRanges:
        return TaskMaskRanges.from_class_counts(self.class_counts)

    def split_entries(self, task_index: int, split: str):
        return [e for e in self.tasks[task_index].slides if e.split == split]

    def prototype_path(self) -> Path:
        return self.base_dir / self.prototypes

    def load_slide(self, entry: SlideEntry) -> SlideFeatures:
        offset = self.offsets()[entry.task_index]
        return read_slide_features(
            self.base_dir / entry.path,
            slide_id=entry.id,
            task_index=entry.task_index,
            class_in_task=entry.class_in_task,
            global_class=offset + entry.class_in_task,
        )

    def load_split(self, task_index: int, split: str):
        return [self.load_slide(e) for e in self.split_entries(task_index, split)]


def manifest_to_dict(m: Manifest) -> dict:
    return {
        "n_tasks": m.n_tasks,
        "dims": dict(m.dims),
        "prototypes": m.prototypes,
        "tasks": [
            {"name": t.name, "classes": list(t.classes),
             "slides": [asdict(e) for e in t.slides]}
            for t in m.tasks
        ],
    }


def save_manifest(m: Manifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest_to_dict(m), fh, indent=2)
        fh.write("\n")


def load_manifest(path) -> Manifest:
    """Parse and fully validate a manifest; fails list every offender."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {path}: {exc}") from exc
    for key in ("n_tasks", "dims", "prototypes", "tasks"):
        if key not in raw:
            raise ManifestError(f"manifest missing key {key!r}: {path}")
    tasks = []
    for t_idx, t in enumerate(raw["tasks"]):
        slides = [SlideEntry(**e) for e in t["slides"]]
        tasks.append(TaskEntry(name=t["name"], classes=list(t["classes"]),
                               slides=slides))
    m = Manifest(n_tasks=int(raw["n_tasks"]), dims=dict(raw["dims"]),
                 prototypes=raw["prototypes"], tasks=tasks,
                 base_dir=path.parent)

    if m.n_tasks != len(m.tasks):
        raise ManifestError(
            f"n_tasks={m.n_tasks} but {len(m.tasks)} tasks declared")
    for key in ("d_vis", "k", "C_text"):
        if key not in m.dims or int(m.dims[key]) < 1:
            raise ManifestError(f"dims.{key} missing or < 1")
    if any(c < 1 for c in m.class_counts):
        raise ManifestError("every task needs at least one class")

    seen_ids, dup_ids, overlap = {}, [], []
    dangling, bad_class = [], []
    for t_idx, t in enumerate(m.tasks):
        for e in t.slides:
            if e.task_index != t_idx:
                raise ManifestError(
                    f"slide {e.id!r} declares task_index {e.task_index} "
                    f"inside task {t_idx}")
            if e.split not in ("train", "val", "test"):
                raise ManifestError(f"slide {e.id!r} has unknown split {e.split!r}")
            if not 0 <= e.class_in_task < len(t.classes):
                bad_class.append(e.id)
            if e.id in seen_ids:
                (dup_ids if seen_ids[e.id] == e.split else overlap).append(e.id)
            seen_ids[e.id] = e.split
            if not (m.base_dir / e.path).is_file():
                dangling.append(e.path)
    if dup_ids or overlap:
        raise ManifestError(
            f"duplicate slide ids {sorted(set(dup_ids))}; "
            f"split overlaps {sorted(set(overlap))}")
    if bad_class:
        raise ManifestError(f"class_in_task out of range for: {sorted(bad_class)}")
    if dangling:
        raise ManifestError(f"unresolvable slide paths: {sorted(dangling)[:10]}")
    if not m.prototype_path().is_file():
        raise ManifestError(f"prototype file not found: {m.prototype_path()}")
    return m


# ---------------------------------------------------------------------------
# Synthetic sequence generation


@dataclass
class SyntheticSpec:
    """Knobs for the synthetic six-task benchmark.

    Class means are unit vectors separated by at least
    ``separation_degrees``; regions are mean + Gaussian noise, patches are
    their region + noise. Prototypes push each class mean through one fixed
    random linear map into the text space, then average noisy variants.
    """

    class_counts: list = field(default_factory=lambda: [2, 3, 2, 2, 2, 2])
    slides_per_class: int = 80
    n_regions_range: tuple = (8, 16)
    k: int = 2
    d_vis: int = 32
    c_text: int = 24
    separation_degrees: float = 30.0
    region_noise: float = 0.6
    patch_noise: float = 0.4
    prototype_noise: float = 0.1
    negatives_per_task: int = NEGATIVES_PER_TASK
    class_variants: int = CLASS_VARIANTS
    templates: int = BASE_TEMPLATES

    def __post_init__(self):
        if self.slides_per_class < 10:
            raise ConfigurationError("need >= 10 slides per class for 0.8/0.1/0.1 splits")
        lo, hi = self.n_regions_range
        if not (1 <= lo <= hi):
            raise ConfigurationError(f"bad region-count range {self.n_regions_range}")
        if not 0 < self.separation_degrees < 180:
            raise ConfigurationError("separation angle must be in (0, 180)")


def spec_from_dict(raw: dict) -> SyntheticSpec:
    known = set(SyntheticSpec.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown synthetic-spec keys: {sorted(unknown)}")
    if "n_regions_range" in raw:
        raw = dict(raw, n_regions_range=tuple(raw["n_regions_range"]))
    return SyntheticSpec(**raw)


def _sample_separated_means(rng, n_classes, d_vis, min_angle_deg, max_restarts=200):
    """Unit mean vectors with min pairwise angle; rejection with restarts."""
    cos_max = np.cos(np.radians(min_angle_deg))
    for _ in range(max_restarts):
        means = []
        ok = True
        for _ in range(n_classes):
            placed = False
            for _ in range(500):
                v = rng.normal(size=d_vis)
                v /= np.linalg.norm(v)
                if all(float(np.dot(v, u)) <= cos_max for u in means):
                    means.append(v)
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            return np.stack(means)
    raise ConfigurationError(
        f"could not place {n_classes} means with {min_angle_deg} degree "
        f"separation in {d_vis} dimensions")


def _split_counts(n: int):
    n_train = int(n * 0.8)
    n_val = int(n * 0.1)
    return n_train, n_val, n - n_train - n_val


def synth_sequence(spec: SyntheticSpec, seed: int, out_dir):
    """Generate a dataset directory, its manifest, and its prototype file.

    Deterministic: the same (spec, seed) yields byte-identical trees.
    Returns (out_dir, Manifest, prototype_path).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    n_classes = sum(spec.class_counts)
    means = _sample_separated_means(rng, n_classes, spec.d_vis,
                                    spec.separation_degrees)
    # One fixed map from vision space to text space for the whole sequence.
    align_map = rng.normal(size=(spec.d_vis, spec.c_text)) / np.sqrt(spec.d_vis)

    proto_buffer = PrototypeBuffer()
    tasks = []
    global_class = 0
    lo, hi = spec.n_regions_range
    n_variants = spec.class_variants * spec.templates

    for t_idx, c_t in enumerate(spec.class_counts):
        task_name = f"task{t_idx}"
        class_names = [f"{task_name}_class{j}" for j in range(c_t)]
        task_dir = out_dir / task_name
        task_dir.mkdir(exist_ok=True)
        entries = []

        cls_protos = []
        for j, cname in enumerate(class_names):
            mu = means[global_class + j]
            base = mu @ align_map
            sentences = [
                SentenceEmbedding(
                    vector=base + spec.prototype_noise * rng.normal(size=spec.c_text),
                    kind="class", owner=cname, template_id=v)
                for v in range(n_variants)
            ]
            cls_protos.append((global_class + j, build_class_prototype(sentences)))

        neg_protos = []
        for c_idx in range(spec.negatives_per_task):
            concept = rng.normal(size=spec.c_text)
            concept /= np.linalg.norm(concept)
            cname = f"{task_name}_negative{c_idx}"
            sentences = [
                SentenceEmbedding(
                    vector=concept + spec.prototype_noise * rng.normal(size=spec.c_text),
                    kind="negative", owner=cname, template_id=v)
                for v in range(spec.templates)
            ]
            neg_protos.append((len(proto_buffer.neg) + c_idx,
                               build_negative_prototype(sentences)))
        proto_buffer = accumulate_task(proto_buffer, cls_protos, neg_protos)

        n_train, n_val, n_test = _split_counts(spec.slides_per_class)
        split_of = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
        for j in range(c_t):
            mu = means[global_class + j]
            for s_idx in range(spec.slides_per_class):
                n_r = int(rng.integers(lo, hi + 1))
                regions = mu[None, :] + spec.region_noise * rng.normal(
                    size=(n_r, spec.d_vis))
                patches = regions[:, None, :] + spec.patch_noise * rng.normal(
                    size=(n_r, spec.k * spec.k, spec.d_vis))
                slide_id = f"t{t_idx}_c{j}_s{s_idx:03d}"
                slide = SlideFeatures(
                    slide_id=slide_id, task_index=t_idx, class_in_task=j,
                    global_class=global_class + j,
                    regions=regions.astype(np.float32),
                    patches=patches.astype(np.float32),
                )
                rel = f"{task_name}/{slide_id}.wsf"
                write_slide_features(slide, out_dir / rel)
                entries.append(SlideEntry(id=slide_id, path=rel, task_index=t_idx,
                                          class_in_task=j, split=split_of[s_idx]))
        tasks.append(TaskEntry(name=task_name, classes=class_names, slides=entries))
        global_class += c_t

    proto_path = out_dir / "prototypes.wsp"
    write_prototype_buffer(proto_buffer, proto_path)
    manifest = Manifest(n_tasks=len(spec.class_counts),
                        dims={"d_vis": spec.d_vis, "k": spec.k,
                              "C_text": spec.c_text},
                        prototypes="prototypes.wsp", tasks=tasks,
                        base_dir=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return out_dir, manifest, proto_path
