"""Deterministic synthetic vehicle scenes.

A scene is a top-down "vehicle" made of coloured part polygons, with damage
instances painted onto visible parts, optional distractors (glare streaks,
decals) and an optional occluder.  Every random draw comes from a generator
seeded by the sample seed, so a seed fully determines the sample.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from shapely import affinity
from shapely.geometry import Polygon
from skimage import draw

from . import tensor as T
from .blocks import StructuralPriorGraph, weak_heatmap

NONE_DAMAGE = "none"


@dataclass(frozen=True)
class Taxonomy:
    parts: tuple = ("hood", "door_l", "door_r", "bumper_f", "bumper_r", "roof")
    damages: tuple = ("dent", "scratch", "crack", "fake_mud")
    fake: tuple = ("fake_mud",)

    def __post_init__(self):
        if set(self.parts) & set(self.damages):
            raise ValueError("part and damage ids must be disjoint")
        if not set(self.fake) <= set(self.damages):
            raise ValueError("fake damages must be damage classes")
        if NONE_DAMAGE in self.parts or NONE_DAMAGE in self.damages:
            raise ValueError(f"{NONE_DAMAGE!r} is reserved")

    @property
    def damages_with_none(self) -> tuple:
        return tuple(self.damages) + (NONE_DAMAGE,)

    def to_json(self) -> dict:
        return {"parts": list(self.parts), "damages": list(self.damages), "fake": list(self.fake)}

    @classmethod
    def from_json(cls, d: dict) -> "Taxonomy":
        return cls(tuple(d["parts"]), tuple(d["damages"]), tuple(d.get("fake", ())))


# normalised (x, y) vertices; y grows downwards, front of the vehicle on top
CANONICAL_LAYOUT = {
    "bumper_f": [(0.30, 0.06), (0.70, 0.06), (0.70, 0.16), (0.30, 0.16)],
    "hood": [(0.32, 0.16), (0.68, 0.16), (0.70, 0.38), (0.30, 0.38)],
    "roof": [(0.30, 0.38), (0.70, 0.38), (0.70, 0.74), (0.30, 0.74)],
    "bumper_r": [(0.30, 0.74), (0.70, 0.74), (0.68, 0.86), (0.32, 0.86)],
    "door_l": [(0.12, 0.40), (0.30, 0.38), (0.30, 0.74), (0.12, 0.72)],
    "door_r": [(0.70, 0.38), (0.88, 0.40), (0.88, 0.72), (0.70, 0.74)],
}

PART_COLORS = {
    "hood": (0.85, 0.20, 0.20),
    "door_l": (0.20, 0.70, 0.25),
    "door_r": (0.15, 0.35, 0.85),
    "bumper_f": (0.90, 0.75, 0.15),
    "bumper_r": (0.70, 0.25, 0.80),
    "roof": (0.15, 0.75, 0.80),
}


def make_graph(taxonomy: Taxonomy = Taxonomy(), layout: dict | None = None,
               bias_pos: float = 1.0, bias_neg: float = -1.0, tol: float = 1e-9) -> StructuralPriorGraph:
    """Adjacency from shared polygon edges; symmetry from the left-right mirror."""
    layout = CANONICAL_LAYOUT if layout is None else layout
    polys = {p: Polygon(layout[p]) for p in taxonomy.parts if p in layout}
    names = list(polys)
    adjacency, symmetry = set(), set()
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            shared = polys[a].boundary.intersection(polys[b].boundary)
            if shared.length > tol:
                adjacency.add(frozenset((a, b)))
            mirrored = affinity.scale(polys[a], xfact=-1.0, yfact=1.0, origin=(0.5, 0.5))
            if mirrored.symmetric_difference(polys[b]).area < 1e-6:
                symmetry.add(frozenset((a, b)))
    return StructuralPriorGraph(parts=list(taxonomy.parts), adjacency=adjacency, symmetry=symmetry,
                                bias_pos=bias_pos, bias_neg=bias_neg)


@dataclass
class SceneSample:
    image: np.ndarray            # (H, W, 3) in [0, 1]
    part_masks: np.ndarray       # (Kp, H, W) binary
    part_labels: np.ndarray      # (Kp,) part index
    damage_masks: np.ndarray     # (Kd, H, W) binary
    damage_labels: np.ndarray    # (Kd, 2) host part index, damage index
    heatmap: np.ndarray          # (H, W)
    geometry: np.ndarray         # (H, W) signed distance to part boundaries
    seed: int
    difficulty: float = 0.0
    occlusion: float = 0.0
    distractors: int = 0
    annotations: list = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def instance_masks(self) -> np.ndarray:
        return np.concatenate([self.part_masks, self.damage_masks], axis=0)

    def instance_labels(self, num_damages: int) -> np.ndarray:
        """(K, 2) (part index, damage index); part instances carry damage index num_damages."""
        parts = np.stack([self.part_labels, np.full(len(self.part_labels), num_damages)], axis=1)
        return np.concatenate([parts.reshape(-1, 2), self.damage_labels.reshape(-1, 2)]).astype(int)


def _raster(poly_xy, H, W) -> np.ndarray:
    xy = np.asarray(poly_xy)
    rr, cc = draw.polygon(xy[:, 1] * H, xy[:, 0] * W, shape=(H, W))
    m = np.zeros((H, W), dtype=bool)
    m[rr, cc] = True
    return m


def _thick_line(r0, c0, r1, c1, width, H, W) -> np.ndarray:
    m = np.zeros((H, W), dtype=bool)
    rr, cc = draw.line(int(round(r0)), int(round(c0)), int(round(r1)), int(round(c1)))
    keep = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
    m[rr[keep], cc[keep]] = True
    if width > 1:
        m = ndimage.binary_dilation(m, iterations=width - 1)
    return m


def _ellipse(r, c, ry, rx, angle, H, W) -> np.ndarray:
    m = np.zeros((H, W), dtype=bool)
    rr, cc = draw.ellipse(r, c, max(ry, 1.0), max(rx, 1.0), shape=(H, W), rotation=angle)
    m[rr, cc] = True
    return m


def _signed_distance(label_map: np.ndarray) -> np.ndarray:
    boundary = np.zeros(label_map.shape, dtype=bool)
    boundary[:-1] |= label_map[:-1] != label_map[1:]
    boundary[1:] |= label_map[1:] != label_map[:-1]
    boundary[:, :-1] |= label_map[:, :-1] != label_map[:, 1:]
    boundary[:, 1:] |= label_map[:, 1:] != label_map[:, :-1]
    if not boundary.any():
        return np.zeros(label_map.shape)
    dist = ndimage.distance_transform_edt(~boundary)
    return np.where(label_map >= 0, dist, -dist)


def generate(seed: int, H: int = 64, W: int = 64, taxonomy: Taxonomy = Taxonomy(),
             difficulty: float = 0.3, min_part_area: int = 12, min_damage_area: int = 4) -> SceneSample:
    if H < 32 or W < 32:
        raise ValueError("scenes need H, W >= 32")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError("difficulty must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    img = 0.35 + 0.03 * rng.standard_normal((H, W, 3))

    scale = rng.uniform(0.85, 1.05)
    shift = rng.uniform(-0.06, 0.06, size=2)
    label_map = np.full((H, W), -1)
    for pi, part in enumerate(taxonomy.parts):
        verts = np.asarray(CANONICAL_LAYOUT[part])
        verts = (verts - 0.5) * scale + 0.5 + shift + rng.uniform(-0.012, 0.012, verts.shape)
        label_map[_raster(verts, H, W)] = pi
    for pi, part in enumerate(taxonomy.parts):
        sel = label_map == pi
        color = np.asarray(PART_COLORS.get(part, rng.uniform(0.2, 0.9, 3))) + rng.uniform(-0.08, 0.08)
        img[sel] = color + 0.02 * rng.standard_normal((sel.sum(), 3))
    geometry = _signed_distance(label_map) / 8.0

    # damages are painted on parts before any occlusion; masks are clipped later
    size_scale = 1.0 - 0.4 * difficulty
    raw_damage = []
    for _ in range(int(rng.integers(0, 3))):
        areas = np.bincount(label_map[label_map >= 0], minlength=len(taxonomy.parts))
        candidates = np.flatnonzero(areas >= 30)
        if candidates.size == 0:
            break
        host = int(rng.choice(candidates))
        di = int(rng.integers(len(taxonomy.damages)))
        kind = taxonomy.damages[di]
        ys, xs = np.nonzero(label_map == host)
        k = rng.integers(len(ys))
        r, c = float(ys[k]), float(xs[k])
        if kind == "scratch":
            ang = rng.uniform(0, np.pi)
            length = rng.uniform(8, 14) * size_scale
            shape = _thick_line(r, c, r + length * np.sin(ang), c + length * np.cos(ang), 2, H, W)
        elif kind == "crack":
            shape = np.zeros((H, W), dtype=bool)
            r0, c0 = r, c
            for _ in range(3):
                r1 = r0 + rng.uniform(-5, 5) * size_scale
                c1 = c0 + rng.uniform(-5, 5) * size_scale
                shape |= _thick_line(r0, c0, r1, c1, 2, H, W)
                r0, c0 = r1, c1
        else:
            shape = _ellipse(r, c, rng.uniform(2.5, 5.0) * size_scale, rng.uniform(2.5, 5.0) * size_scale,
                             rng.uniform(0, np.pi), H, W)
        shape &= label_map == host
        if kind == "dent":
            img[shape] *= 0.55
            img[shape] += 0.05
        elif kind == "scratch":
            img[shape] = np.clip(img[shape] + 0.45, 0, 1)
        elif kind == "crack":
            img[shape] = 0.08 + 0.02 * rng.standard_normal((shape.sum(), 3))
        else:
            mud = np.array([0.45, 0.30, 0.12])
            img[shape] = 0.25 * img[shape] + 0.75 * (mud + 0.05 * rng.standard_normal((shape.sum(), 3)))
        if kind not in taxonomy.fake:
            geometry[shape] -= 0.5
        raw_damage.append((host, di, shape))

    n_distract = int(round(4 * difficulty))
    for j in range(n_distract):
        if j % 2 == 0:
            r0, c0 = rng.uniform(0, H), rng.uniform(0, W)
            ang = rng.uniform(0, np.pi)
            streak = _thick_line(r0, c0, r0 + 20 * np.sin(ang), c0 + 20 * np.cos(ang), 1, H, W)
            img[streak] = 0.5 * img[streak] + 0.5
        else:
            decal = _ellipse(rng.uniform(0, H), rng.uniform(0, W), 2.5, 2.5, 0.0, H, W)
            img[decal] = rng.uniform(0, 1, 3)

    occluded = np.zeros((H, W), dtype=bool)
    if difficulty > 0 and rng.uniform() < difficulty:
        oh = int(H * rng.uniform(0.15, 0.15 + 0.3 * difficulty))
        ow = int(W * rng.uniform(0.15, 0.15 + 0.3 * difficulty))
        r0, c0 = rng.integers(0, H - oh), rng.integers(0, W - ow)
        occluded[r0:r0 + oh, c0:c0 + ow] = True
        img[occluded] = np.array([0.55, 0.55, 0.6]) + 0.02 * rng.standard_normal((occluded.sum(), 3))
    car = label_map >= 0
    occlusion = float((occluded & car).sum() / max(car.sum(), 1))

    part_masks, part_labels = [], []
    for pi in range(len(taxonomy.parts)):
        m = (label_map == pi) & ~occluded
        if m.sum() >= min_part_area:
            part_masks.append(m)
            part_labels.append(pi)
    visible = np.any(part_masks, axis=0) if part_masks else np.zeros((H, W), dtype=bool)
    damage_masks, damage_labels = [], []
    for host, di, shape in raw_damage:
        m = shape & ~occluded & visible
        if m.sum() >= min_damage_area:
            damage_masks.append(m)
            damage_labels.append((host, di))

    boxes, scratch = [], []
    for m, (_, di) in zip(damage_masks, damage_labels):
        ys, xs = np.nonzero(m)
        boxes.append((int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1))
        if taxonomy.damages[di] == "scratch":
            scratch.append(0.5 * m)
    heat = weak_heatmap(boxes, scratch, (H, W)).map[..., 0]

    annotations = [(taxonomy.parts[p], NONE_DAMAGE) for p in part_labels]
    annotations += [(taxonomy.parts[p], taxonomy.damages[d]) for p, d in damage_labels]
    stack = lambda ms: np.asarray(ms, dtype=np.float64).reshape(len(ms), H, W)
    return SceneSample(
        image=np.clip(img, 0.0, 1.0), part_masks=stack(part_masks),
        part_labels=np.asarray(part_labels, dtype=int),
        damage_masks=stack(damage_masks),
        damage_labels=np.asarray(damage_labels, dtype=int).reshape(-1, 2),
        heatmap=heat, geometry=geometry, seed=int(seed), difficulty=float(difficulty),
        occlusion=occlusion, distractors=n_distract, annotations=annotations)


def generate_many(seeds, H: int = 64, W: int = 64, taxonomy: Taxonomy = Taxonomy(),
                  difficulty: float = 0.3) -> list[SceneSample]:
    return [generate(int(s), H, W, taxonomy, difficulty) for s in seeds]


def check_invariants(sample: SceneSample, taxonomy: Taxonomy = Taxonomy()) -> list[str]:
    """Return a list of violated invariants (empty when the sample is valid)."""
    problems = []
    pm = sample.part_masks.astype(bool)
    if pm.size and (pm.sum(axis=0) > 1).any():
        problems.append("part masks overlap")
    union = pm.any(axis=0) if len(pm) else np.zeros(sample.shape, dtype=bool)
    for m in sample.damage_masks.astype(bool):
        if (m & ~union).any():
            problems.append("damage mask outside the part union")
    if ((sample.part_labels < 0) | (sample.part_labels >= len(taxonomy.parts))).any():
        problems.append("invalid part label")
    dl = sample.damage_labels.reshape(-1, 2)
    if ((dl[:, 0] < 0) | (dl[:, 0] >= len(taxonomy.parts)) | (dl[:, 1] < 0)
            | (dl[:, 1] >= len(taxonomy.damages))).any():
        problems.append("invalid damage label")
    if not ((sample.heatmap >= 0) & (sample.heatmap <= 1)).all():
        problems.append("heatmap outside [0, 1]")
    return problems


def annotations_from_masks(sample: SceneSample, taxonomy: Taxonomy = Taxonomy()) -> Counter:
    """Rebuild (part, damage) co-occurrence counts from the masks alone."""
    counts = Counter()
    for p in sample.part_labels:
        counts[(taxonomy.parts[p], NONE_DAMAGE)] += 1
    for m, (_, d) in zip(sample.damage_masks, sample.damage_labels):
        overlap = [(m * pm).sum() for pm in sample.part_masks]
        host = sample.part_labels[int(np.argmax(overlap))]
        counts[(taxonomy.parts[host], taxonomy.damages[d])] += 1
    return counts


# ---------------------------------------------------------------- dataset IO

_ARRAYS = ("image", "part_masks", "damage_masks", "heatmap", "geometry")


def export_dataset(samples: list[SceneSample], directory, taxonomy: Taxonomy = Taxonomy()) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        sub = f"sample_{i:05d}"
        (root / sub).mkdir(exist_ok=True)
        for name in _ARRAYS:
            T.save_tensor(root / sub / f"{name}.slkt", getattr(s, name))
        labels = {"part_labels": s.part_labels.tolist(), "damage_labels": s.damage_labels.tolist(),
                  "seed": s.seed, "difficulty": s.difficulty, "occlusion": s.occlusion,
                  "distractors": s.distractors, "annotations": [list(a) for a in s.annotations]}
        with open(root / sub / "labels.json", "w") as fh:
            json.dump(labels, fh, indent=1, sort_keys=True)
        entries.append({"id": sub, "seed": s.seed})
    manifest = {"format": "slick-dataset", "version": 1, "taxonomy": taxonomy.to_json(),
                "samples": entries, "seeds": [e["seed"] for e in entries]}
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def import_dataset(directory) -> tuple[list[SceneSample], Taxonomy]:
    root = Path(directory)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "slick-dataset":
        raise ValueError(f"{root} is not a dataset directory")
    samples = []
    for entry in manifest["samples"]:
        sub = root / entry["id"]
        arrays = {name: T.load_tensor(sub / f"{name}.slkt") for name in _ARRAYS}
        with open(sub / "labels.json") as fh:
            labels = json.load(fh)
        samples.append(SceneSample(
            part_labels=np.asarray(labels["part_labels"], dtype=int),
            damage_labels=np.asarray(labels["damage_labels"], dtype=int).reshape(-1, 2),
            seed=labels["seed"], difficulty=labels["difficulty"], occlusion=labels["occlusion"],
            distractors=labels["distractors"],
            annotations=[tuple(a) for a in labels["annotations"]], **arrays))
    return samples, Taxonomy.from_json(manifest["taxonomy"])


def dataset_checksum(samples: list[SceneSample]) -> str:
    import hashlib
    h = hashlib.sha256()
    for s in samples:
        for name in _ARRAYS:
            h.update(np.ascontiguousarray(getattr(s, name), dtype="<f8").tobytes())
        h.update(s.part_labels.astype("<i8").tobytes())
        h.update(s.damage_labels.astype("<i8").tobytes())
    return h.hexdigest()
