"""Synthetic two-modality tracking sequences.

A disk-shaped target does a bounded random walk over a noisy background with
distractor disks that move independently in each modality. For a configured
share of frames the target is drawn at near-zero contrast in one modality
(alternating between modalities window by window), so neither modality alone
sees it everywhere. Frames render lazily from stored trajectories and a
per-frame noise seed, so a sequence costs a few kilobytes until indexed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.ndimage import map_coordinates

from .config import ModelConfig, Perturbation, SequenceSpec, to_dict

BOTH, RGB_ONLY, X_ONLY = 0, 1, 2
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class FramePair:
    img_rgb: np.ndarray
    img_x: np.ndarray
    gt: np.ndarray  # (cx, cy, w, h), normalised to the frame
    visible_rgb: bool
    visible_x: bool
    t: int

    @property
    def visible(self) -> bool:
        return self.visible_rgb or self.visible_x


def complementary_schedule(spec: SequenceSpec) -> np.ndarray:
    """Per-frame code: 0 both visible, 1 RGB only, 2 X only.

    Exactly ``spec.n_complementary`` frames are one-modality frames. The
    first window always shows both modalities; the one-modality windows are
    spread evenly over the rest and alternate RGB-only / X-only.
    """
    L, W, n = spec.length, spec.comp_window, spec.n_complementary
    codes = np.zeros(L, dtype=np.int8)
    if n == 0:
        return codes
    k = -(-n // W)
    spare = (L - W) - n
    gaps = [spare // k + (1 if i < spare % k else 0) for i in range(k)]
    t = W
    for i in range(k):
        t += gaps[i]
        length = W if i < k - 1 else n - W * (k - 1)
        codes[t:t + length] = RGB_ONLY if i % 2 == 0 else X_ONLY
        t += length
    return codes


def _walk(rng, start, steps, sigma, lo, hi):
    pts = np.empty((steps, 2))
    p = np.array(start, dtype=np.float64)
    for t in range(steps):
        if t:
            p = p + rng.normal(0.0, sigma, size=2)
            # reflect into the allowed box
            p = np.where(p < lo, 2 * lo - p, p)
            p = np.where(p > hi, 2 * hi - p, p)
            p = np.clip(p, lo, hi)
        pts[t] = p
    return pts


def _far_colour(rng, avoid, min_dist, dims):
    for _ in range(100):
        c = rng.uniform(0.0, 1.0, size=dims)
        if all(np.abs(c - a).max() >= min_dist for a in avoid):
            return c
    return c


class SyntheticSequence:
    """Indexable sequence of :class:`FramePair`, rendered on demand."""

    def __init__(self, spec: SequenceSpec):
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
        size = spec.image_size
        self.radius = float(rng.uniform(spec.radius_min, spec.radius_max))
        margin = self.radius + 1.0
        start = rng.uniform(size * 0.3, size * 0.7, size=2)
        self.target_path = _walk(rng, start, spec.length, spec.motion_sigma, margin, size - margin)
        self.bg_rgb = rng.uniform(0.2, 0.5, size=3)
        self.bg_x = float(rng.uniform(0.1, 0.3))
        self.col_rgb = _far_colour(rng, [self.bg_rgb], 0.35, 3)
        self.col_x = self.bg_x + float(rng.uniform(0.5, 0.65))
        self.distractors = []
        for m in ("rgb", "x"):
            for _ in range(spec.n_distractors):
                r = float(rng.uniform(spec.radius_min, spec.radius_max))
                path = _walk(rng, rng.uniform(r + 1, size - r - 1, size=2), spec.length,
                             spec.motion_sigma * 1.5, r + 1, size - r - 1)
                if m == "rgb":
                    col = _far_colour(rng, [self.bg_rgb, self.col_rgb], 0.3, 3)
                else:
                    # dimmer than the target so intensity alone identifies it
                    col = self.bg_x + float(rng.uniform(0.15, 0.35))
                self.distractors.append((m, r, path, col))
        self.codes = complementary_schedule(spec)

    def __len__(self) -> int:
        return self.spec.length

    def __iter__(self) -> Iterator[FramePair]:
        for t in range(len(self)):
            yield self[t]

    def __getitem__(self, t: int) -> FramePair:
        if not 0 <= t < len(self):
            raise IndexError(f"frame {t} outside sequence of length {len(self)}")
        return self.render(t)

    def gt(self, t: int) -> np.ndarray:
        size = self.spec.image_size
        cx, cy = self.target_path[t]
        d = 2 * self.radius
        return np.array([cx / size, cy / size, d / size, d / size])

    def visibility(self, t: int) -> tuple[bool, bool]:
        code = self.codes[t]
        return code != X_ONLY, code != RGB_ONLY

    def _paint(self, img: np.ndarray, centre, radius: float, colour) -> None:
        """Alpha-blend an anti-aliased disk into ``img`` in place."""
        size = img.shape[0]
        x0, x1 = max(int(centre[0] - radius) - 2, 0), min(int(centre[0] + radius) + 3, size)
        y0, y1 = max(int(centre[1] - radius) - 2, 0), min(int(centre[1] + radius) + 3, size)
        if x0 >= x1 or y0 >= y1:
            return
        yy = np.arange(y0, y1)[:, None] + 0.5
        xx = np.arange(x0, x1)[None, :] + 0.5
        dist = np.sqrt((xx - centre[0]) ** 2 + (yy - centre[1]) ** 2)
        a = np.clip(radius + 0.5 - dist, 0.0, 1.0)[..., None]
        patch = img[y0:y1, x0:x1]
        img[y0:y1, x0:x1] = patch * (1 - a) + a * np.asarray(colour)

    def render(self, t: int, noise: bool = True) -> FramePair:
        spec = self.spec
        size = spec.image_size
        rgb = np.broadcast_to(self.bg_rgb, (size, size, 3)).copy()
        xim = np.full((size, size, 3), self.bg_x)
        for m, r, path, col in self.distractors:
            self._paint(rgb if m == "rgb" else xim, path[t], r, col)
        vis_rgb, vis_x = self.visibility(t)
        self._paint(rgb, self.target_path[t], self.radius,
                    self.col_rgb if vis_rgb else self.bg_rgb + spec.low_contrast)
        self._paint(xim, self.target_path[t], self.radius,
                    self.col_x if vis_x else self.bg_x + spec.low_contrast)
        rgb, xim = rgb.astype(np.float32), xim.astype(np.float32)
        if noise:
            nrng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xF00D, t]))
            sigma = np.float32(spec.noise_sigma)
            rgb += sigma * nrng.standard_normal(rgb.shape, dtype=np.float32)
            xim += sigma * nrng.standard_normal(xim.shape, dtype=np.float32)
        return FramePair(rgb, xim, self.gt(t), bool(vis_rgb), bool(vis_x), t)

    def frames(self) -> list[FramePair]:
        return list(self)


def generate_sequence(spec: SequenceSpec) -> SyntheticSequence:
    return SyntheticSequence(spec)


def sequence_pool(spec: SequenceSpec, n: int, seed: int, single_modality: bool = False
                  ) -> list[SyntheticSequence]:
    """``n`` sequences with seeds spawned from ``seed``."""
    children = np.random.SeedSequence(seed).generate_state(n)
    base = replace(spec, comp_fraction=0.0) if single_modality else spec
    return [SyntheticSequence(replace(base, seed=int(s))) for s in children]


# ---------------------------------------------------------------- cropping

@dataclass(frozen=True)
class CropGeom:
    """Square crop of side ``side`` pixels centred at (cx, cy) in frame pixels."""

    cx: float
    cy: float
    side: float
    frame: int

    def to_crop(self, box: np.ndarray) -> np.ndarray:
        """Frame-normalised (cx,cy,w,h) -> crop-normalised."""
        b = np.asarray(box, dtype=np.float64) * self.frame
        x0, y0 = self.cx - self.side / 2, self.cy - self.side / 2
        return np.array([(b[0] - x0) / self.side, (b[1] - y0) / self.side,
                         b[2] / self.side, b[3] / self.side])

    def to_frame(self, box: np.ndarray) -> np.ndarray:
        b = np.asarray(box, dtype=np.float64)
        x0, y0 = self.cx - self.side / 2, self.cy - self.side / 2
        return np.array([x0 + b[0] * self.side, y0 + b[1] * self.side,
                         b[2] * self.side, b[3] * self.side]) / self.frame


def crop_region(img: np.ndarray, geom: CropGeom, out: int) -> np.ndarray:
    """Bilinear crop-and-resize; samples outside the frame are zero."""
    step = geom.side / out
    u = (np.arange(out) + 0.5) * step + geom.cx - geom.side / 2 - 0.5
    v = (np.arange(out) + 0.5) * step + geom.cy - geom.side / 2 - 0.5
    rows, cols = np.meshgrid(v, u, indexing="ij")
    coords = np.stack([rows, cols])
    chans = [map_coordinates(img[..., c], coords, order=1, mode="constant", cval=0.0)
             for c in range(img.shape[-1])]
    return np.stack(chans, axis=-1).astype(np.float32)


def template_geom(box: np.ndarray, frame: int, factor: float = 2.0) -> CropGeom:
    b = np.asarray(box) * frame
    return CropGeom(float(b[0]), float(b[1]), float(factor * np.sqrt(b[2] * b[3])), frame)


def search_geom(prev_box: np.ndarray, frame: int, factor: float = 4.0) -> CropGeom:
    return template_geom(prev_box, frame, factor)


@dataclass
class CropPair:
    rgb: np.ndarray
    x: np.ndarray
    geom: CropGeom


def crop_pair(frame: FramePair, geom: CropGeom, out: int) -> CropPair:
    return CropPair(crop_region(frame.img_rgb, geom, out), crop_region(frame.img_x, geom, out), geom)


def crop_template_search(seq, t_template: int, t_search: int, cfg: ModelConfig,
                         prev_box: Optional[np.ndarray] = None
                         ) -> tuple[CropPair, CropPair, np.ndarray]:
    """Template around the ground truth at ``t_template`` (factor 2 context),
    search around the previous box (factor 4 context).

    ``prev_box`` defaults to the ground truth of frame ``t_search - 1``.
    Returns the two crop pairs and the search-frame ground truth in search-crop units.
    """
    n = len(seq)
    if not (0 <= t_template < n and 0 <= t_search < n):
        raise IndexError(f"frame indices ({t_template}, {t_search}) outside [0, {n})")
    zf, xf = seq[t_template], seq[t_search]
    size = zf.img_rgb.shape[0]
    if prev_box is None:
        prev_box = seq[max(t_search - 1, 0)].gt
    tg = template_geom(zf.gt, size)
    sg = search_geom(prev_box, size)
    return crop_pair(zf, tg, cfg.template_size), crop_pair(xf, sg, cfg.search_size), sg.to_crop(xf.gt)


# ---------------------------------------------------------------- perturbation

def perturb(pair: FramePair, p: Perturbation, rng: np.random.Generator) -> FramePair:
    """Drop a modality (zero image) or paint black rectangles, with probability
    ``p.probability`` per frame. Annotations are never changed."""
    if p.kind == "none" or rng.random() >= p.probability:
        return pair
    if p.kind == "drop_rgb":
        return replace(pair, img_rgb=np.zeros_like(pair.img_rgb))
    if p.kind == "drop_x":
        return replace(pair, img_x=np.zeros_like(pair.img_x))
    return replace(pair, img_rgb=occlude(pair.img_rgb, p, rng), img_x=occlude(pair.img_x, p, rng))


def occlude(img: np.ndarray, p: Perturbation, rng: np.random.Generator) -> np.ndarray:
    out = img.copy()
    H, W = img.shape[:2]
    for _ in range(p.n_rects):
        h = int(round(rng.uniform(p.rect_min, p.rect_max) * H))
        w = int(round(rng.uniform(p.rect_min, p.rect_max) * W))
        y = int(rng.integers(0, H - h + 1))
        x = int(rng.integers(0, W - w + 1))
        out[y:y + h, x:x + w] = 0
    return out


def zero_rect(img: np.ndarray, y: int, x: int, h: int, w: int) -> np.ndarray:
    out = img.copy()
    out[y:y + h, x:x + w] = 0
    return out


# ---------------------------------------------------------------- export / import

def export_sequence(frames, spec: SequenceSpec, path) -> Path:
    """Write ``frame_XXXX_{rgb,x}.npy`` files plus a JSON manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for f in frames:
        np.save(root / f"frame_{f.t:04d}_rgb.npy", f.img_rgb, allow_pickle=False)
        np.save(root / f"frame_{f.t:04d}_x.npy", f.img_x, allow_pickle=False)
        records.append({"t": f.t, "gt": [float(v) for v in f.gt],
                        "visible_rgb": f.visible_rgb, "visible_x": f.visible_x})
    manifest = {"format": "symtrack-sequence", "version": 1, "spec": to_dict(spec), "frames": records}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def import_sequence(path) -> tuple[list[FramePair], dict]:
    root = Path(path)
    manifest = json.loads((root / MANIFEST).read_text())
    frames = []
    for rec in manifest["frames"]:
        t = rec["t"]
        frames.append(FramePair(
            np.load(root / f"frame_{t:04d}_rgb.npy", allow_pickle=False),
            np.load(root / f"frame_{t:04d}_x.npy", allow_pickle=False),
            np.array(rec["gt"], dtype=np.float64), bool(rec["visible_rgb"]),
            bool(rec["visible_x"]), t))
    return frames, manifest
