"""Synthetic shape dataset, augmentations and the on-disk XYZ format."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import normalize_unit_sphere

CLASSES = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "plane-cross", "helix")


@dataclass
class PointCloud:
    coords: np.ndarray
    label: int
    id: str = ""


def _weighted_pick(rng, areas, n):
    p = np.asarray(areas, dtype=np.float64)
    return rng.choice(len(p), size=n, p=p / p.sum())


def _triangle(rng, a, b, c, n):
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def _sphere(rng, n):
    # antipodal pairs (plus one balanced great-circle triple when n is odd)
    # keep the sample centroid exactly at the origin
    half = (n - 3) // 2 if n % 2 and n >= 3 else n // 2
    v = rng.normal(size=(half, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    parts = [v, -v]
    if n % 2:
        if n == 1:
            parts.append(np.array([[0.0, 0.0, 1.0]]))
        else:
            basis = np.linalg.qr(rng.normal(size=(3, 2)))[0].T
            ang = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.0, 4.0]) * np.pi / 3
            parts.append(np.cos(ang)[:, None] * basis[0] + np.sin(ang)[:, None] * basis[1])
    return np.concatenate(parts)


def _cube(rng, n):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1, 1, size=(n, 2))
    pts = np.empty((n, 3))
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    for ax in range(3):
        sel = axis == ax
        others = [o for o in range(3) if o != ax]
        pts[sel, ax] = sign[sel]
        pts[sel, others[0]] = uv[sel, 0]
        pts[sel, others[1]] = uv[sel, 1]
    return pts


def _cylinder(rng, n, r=0.5, h=2.0):
    part = _weighted_pick(rng, [2 * np.pi * r * h, np.pi * r * r, np.pi * r * r], n)
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.random(n)))
    z = np.select([part == 0, part == 1], [rng.uniform(-h / 2, h / 2, n), np.full(n, h / 2)], -h / 2)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _cone(rng, n, r=0.8, h=1.6):
    slant = np.hypot(r, h)
    part = _weighted_pick(rng, [np.pi * r * slant, np.pi * r * r], n)
    theta = rng.uniform(0, 2 * np.pi, n)
    # lateral: radius fraction ~ sqrt(U) gives uniform area density
    s = np.sqrt(rng.random(n))
    rad = np.where(part == 0, r * s, r * np.sqrt(rng.random(n)))
    z = np.where(part == 0, h * (1 - s), 0.0)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _torus(rng, n, R=1.0, r=0.3):
    out = []
    while sum(len(o) for o in out) < n:
        u = rng.uniform(0, 2 * np.pi, 2 * n)
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.random(2 * n) < (R + r * np.cos(v)) / (R + r)
        u, v = u[keep], v[keep]
        out.append(np.stack([(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)], 1))
    return np.concatenate(out)[:n]


def _pyramid(rng, n, h=1.2):
    base = [np.array(p, float) for p in [(-1, -1, 0), (1, -1, 0), (1, 1, 0), (-1, 1, 0)]]
    apex = np.array([0.0, 0.0, h])
    tris = [(base[0], base[1], base[2]), (base[0], base[2], base[3])]
    tris += [(base[i], base[(i + 1) % 4], apex) for i in range(4)]
    areas = [0.5 * np.linalg.norm(np.cross(b - a, c - a)) for a, b, c in tris]
    which = _weighted_pick(rng, areas, n)
    pts = np.empty((n, 3))
    for t, (a, b, c) in enumerate(tris):
        sel = which == t
        pts[sel] = _triangle(rng, a, b, c, int(sel.sum()))
    return pts


def _plane_cross(rng, n):
    which = rng.integers(0, 2, n)
    uv = rng.uniform(-1, 1, size=(n, 2))
    return np.where(
        (which == 0)[:, None],
        np.stack([uv[:, 0], np.zeros(n), uv[:, 1]], 1),
        np.stack([np.zeros(n), uv[:, 0], uv[:, 1]], 1),
    )


def _helix(rng, n, turns=3.0, radius=0.6, pitch=0.5, tube=0.08):
    t = rng.uniform(0, 2 * np.pi * turns, n)
    centre = np.stack([radius * np.cos(t), radius * np.sin(t), pitch * t / (2 * np.pi)], 1)
    tangent = np.stack([-radius * np.sin(t), radius * np.cos(t), np.full(n, pitch / (2 * np.pi))], 1)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.stack([-np.cos(t), -np.sin(t), np.zeros(n)], 1)
    binormal = np.cross(tangent, normal)
    phi = rng.uniform(0, 2 * np.pi, n)
    return centre + tube * (np.cos(phi)[:, None] * normal + np.sin(phi)[:, None] * binormal)


_SHAPES = (_sphere, _cube, _cylinder, _cone, _torus, _pyramid, _plane_cross, _helix)


def sample_shape(label: int, points: int, rng: np.random.Generator) -> np.ndarray:
    pts = _SHAPES[label](rng, points)
    rot = Rotation.random(random_state=rng).as_matrix()
    return normalize_unit_sphere(pts @ rot.T)


def synth_dataset(n_per_class: int, points: int = 256, seed: int = 0, split: str = "train",
                  classes: int = len(CLASSES)) -> list[PointCloud]:
    """Deterministic list of unit-sphere-normalised, randomly rotated shapes."""
    if not 1 <= classes <= len(CLASSES):
        raise ValueError(f"classes must be in 1..{len(CLASSES)}")
    salt = {"train": 0, "test": 1}.get(split, 2)
    rng = np.random.default_rng([seed, salt])
    out = []
    for label in range(classes):
        for i in range(n_per_class):
            coords = sample_shape(label, points, rng)
            out.append(PointCloud(coords, label, f"{split}/{CLASSES[label]}_{i:04d}"))
    return out


def augment(pc: PointCloud, policy: str, rng: np.random.Generator) -> PointCloud:
    """Random isotropic scale + translation; ``strong`` also rotates first."""
    if policy == "none":
        return pc
    if policy not in ("default", "strong"):
        raise ValueError(f"unknown augmentation policy {policy!r}")
    x = pc.coords
    if policy == "strong":
        x = x @ Rotation.random(random_state=rng).as_matrix().T
    s = rng.uniform(0.8, 1.2)
    t = rng.uniform(-0.1, 0.1, size=3)
    return replace(pc, coords=x * s + t)


# ---------------------------------------------------------------------------
# disk format


def write_xyz(path: Path, coords: np.ndarray) -> None:
    lines = [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in coords]
    Path(path).write_bytes(("\n".join(lines) + "\n").encode())


def read_xyz(path: Path) -> np.ndarray:
    rows = Path(path).read_text().split("\n")
    return np.array([[float(v) for v in r.split(" ")] for r in rows if r], dtype=np.float64)


def write_dataset(root, train: list[PointCloud], test: list[PointCloud], force: bool = False) -> Path:
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"{root} exists and is not empty (use --force)")
    lines = ["path\tlabel\tsplit"]
    for split, items in (("train", train), ("test", test)):
        (root / split).mkdir(parents=True, exist_ok=True)
        for pc in items:
            rel = f"{pc.id}.xyz"
            write_xyz(root / rel, pc.coords)
            lines.append(f"{rel}\t{pc.label}\t{split}")
    (root / "manifest.tsv").write_bytes(("\n".join(lines) + "\n").encode())
    return root


def read_dataset(root) -> dict[str, list[PointCloud]]:
    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest.tsv under {root}")
    out: dict[str, list[PointCloud]] = {"train": [], "test": []}
    for line in manifest.read_text().splitlines()[1:]:
        if not line:
            continue
        rel, label, split = line.split("\t")
        if split not in out:
            raise ValueError(f"bad split {split!r} in manifest")
        out[split].append(PointCloud(read_xyz(root / rel), int(label), os.path.splitext(rel)[0]))
    return out


def manifest_checksum(root) -> str:
    return hashlib.sha256((Path(root) / "manifest.tsv").read_bytes()).hexdigest()
