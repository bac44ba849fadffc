"""Task datasets and procedural hidden distributions.

Two generator families live here, deliberately disjoint:

- *glyph tasks*: the benign classification problem. Each class is a fixed
  parametric pattern (an oriented bar for even labels, an arc for odd
  labels) plus seeded Gaussian pixel noise.
- *hidden textures*: sinusoidal textures driven by a bounded latent
  vector. A hidden distribution is a latent mean plus a small Gaussian
  spread; sampling draws per-sample latents around the mean, clips them
  back into the latent box, and renders. Nearby latents render to nearby
  images (see `render_lipschitz_bound`), so distinct latent means give
  distinct, smoothly-parameterized data distributions.

All generation is deterministic given explicit seeds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .seeding import child_seed

LATENT_DIM = 16
LATENT_BOUND = 0.5
DEFAULT_SPREAD = 0.3
DEFAULT_SAMPLES_PER_LABEL = 100

# Texture renderer constants. Each of the four waves consumes four latent
# coordinates: frequency, orientation, phase, amplitude. Base brightness is
# pinned near the glyph corpus's global mean so textures stay in-range yet
# off the task manifold.
_WAVES = 4
_FREQ_MIN, _FREQ_SPAN = 1.5, 3.0
_AMP_MIN, _AMP_SPAN = 0.5, 0.5
_CONTRAST = 0.45
_BASE = 0.25


# ---------------------------------------------------------------------------
# task datasets


@dataclass(frozen=True)
class TaskDataset:
    """Train/validation/test splits of a fixed-dimension labelled task."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int

    @property
    def input_dim(self) -> int:
        return self.train_x.shape[1]

    def validate(self) -> None:
        for name in ("train", "val", "test"):
            x = getattr(self, f"{name}_x")
            y = getattr(self, f"{name}_y")
            if x.ndim != 2 or x.shape[1] != self.input_dim:
                raise ValueError(f"{name} split has shape {x.shape}")
            if len(x) != len(y):
                raise ValueError(f"{name} split: {len(x)} inputs, {len(y)} labels")
            if not np.isfinite(x).all():
                raise ValueError(f"{name} split contains non-finite inputs")
            if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError(f"{name} split has labels outside [0, {self.num_classes})")
        present = np.unique(self.train_y)
        if len(present) != self.num_classes:
            missing = sorted(set(range(self.num_classes)) - set(present.tolist()))
            raise ValueError(f"train split is missing classes {missing}")


@dataclass(frozen=True)
class GlyphParams:
    num_classes: int = 10
    side: int = 8
    train_per_class: int = 200
    val_per_class: int = 50
    test_per_class: int = 100
    noise: float = 0.15

    def validate(self) -> None:
        if not 2 <= self.num_classes <= 26:
            raise ValueError(f"num_classes must be in [2, 26], got {self.num_classes}")
        if not 8 <= self.side <= 16:
            raise ValueError(f"side must be in [8, 16], got {self.side}")
        if self.train_per_class < 50:
            raise ValueError(f"train_per_class must be >= 50, got {self.train_per_class}")
        if min(self.val_per_class, self.test_per_class) < 1:
            raise ValueError("val_per_class and test_per_class must be >= 1")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")


@dataclass(frozen=True)
class FileParams:
    path: str
    val_fraction: float = 0.15
    test_fraction: float = 0.15

    def validate(self) -> None:
        if not 0 < self.val_fraction < 1 or not 0 < self.test_fraction < 1:
            raise ValueError("val_fraction and test_fraction must be in (0, 1)")
        if self.val_fraction + self.test_fraction >= 0.9:
            raise ValueError("val_fraction + test_fraction leaves too little training data")


def glyph_pattern(label: int, num_classes: int, side: int) -> np.ndarray:
    """Noise-free class template, flattened to side*side values in [0, 1]."""
    lin = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    xx, yy = np.meshgrid(lin, lin)
    if label % 2 == 0:
        theta = np.pi * label / num_classes
        dist = np.abs(-xx * np.sin(theta) + yy * np.cos(theta))
        img = np.exp(-((dist / 0.25) ** 2))
    else:
        phi = 2.0 * np.pi * label / num_classes
        r = np.hypot(xx, yy)
        ang = np.arctan2(yy, xx)
        wrapped = np.mod(ang - phi + np.pi, 2.0 * np.pi) - np.pi
        img = np.exp(-(((r - 0.62) / 0.16) ** 2)) * (np.abs(wrapped) <= np.pi / 2)
    return img.ravel()


def _render_glyph_split(params: GlyphParams, per_class: int, rng: np.random.Generator):
    d = params.side * params.side
    xs = np.empty((params.num_classes * per_class, d))
    ys = np.empty(params.num_classes * per_class, dtype=int)
    for label in range(params.num_classes):
        base = glyph_pattern(label, params.num_classes, params.side)
        noise = params.noise * rng.standard_normal((per_class, d))
        block = slice(label * per_class, (label + 1) * per_class)
        xs[block] = np.clip(base + noise, 0.0, 1.0)
        ys[block] = label
    return xs, ys


def make_task(kind: str, params=None, seed: int = 0) -> TaskDataset:
    """Build a TaskDataset. kind is "synthetic_glyphs" or "from_file".

    params may be a GlyphParams / FileParams or a plain mapping with the
    same keys (unknown keys rejected).
    """
    if kind == "synthetic_glyphs":
        params = _coerce_params(params, GlyphParams)
        params.validate()
        rng = np.random.default_rng(seed)
        train = _render_glyph_split(params, params.train_per_class, rng)
        val = _render_glyph_split(params, params.val_per_class, rng)
        test = _render_glyph_split(params, params.test_per_class, rng)
        task = TaskDataset(*train, *val, *test, num_classes=params.num_classes)
    elif kind == "from_file":
        params = _coerce_params(params, FileParams)
        params.validate()
        task = _load_csv_task(params, seed)
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    task.validate()
    return task


def _coerce_params(params, cls):
    if params is None:
        return cls()
    if isinstance(params, cls):
        return params
    if isinstance(params, Mapping):
        allowed = set(cls.__dataclass_fields__)
        unknown = set(params) - allowed
        if unknown:
            raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
        return cls(**params)
    raise TypeError(f"params must be {cls.__name__} or mapping, got {type(params)}")


def _load_csv_task(params: FileParams, seed: int) -> TaskDataset:
    """CSV rows are: label, then d pixel values in [0, 1]."""
    rows: list[np.ndarray] = []
    labels: list[int] = []
    width = None
    with open(params.path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                label = int(row[0])
                values = np.array([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ValueError(f"{params.path}: line {lineno}: {exc}") from exc
            if label < 0:
                raise ValueError(f"{params.path}: line {lineno}: negative label {label}")
            if width is None:
                width = len(values)
                if width == 0:
                    raise ValueError(f"{params.path}: line {lineno}: no pixel values")
            elif len(values) != width:
                raise ValueError(
                    f"{params.path}: line {lineno}: expected {width} values, got {len(values)}"
                )
            bad = np.flatnonzero((values < 0) | (values > 1) | ~np.isfinite(values))
            if bad.size:
                raise ValueError(
                    f"{params.path}: line {lineno}: value at offset {bad[0] + 1} outside [0, 1]"
                )
            rows.append(values)
            labels.append(label)
    if not rows:
        raise ValueError(f"{params.path}: no data rows")
    x = np.stack(rows)
    y = np.asarray(labels)
    num_classes = int(y.max()) + 1
    if num_classes < 2:
        raise ValueError(f"{params.path}: needs at least 2 classes")

    n = len(x)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(params.val_fraction * n)))
    n_test = max(1, int(round(params.test_fraction * n)))
    val_idx, test_idx, train_idx = np.split(perm, [n_val, n_val + n_test])
    if len(train_idx) == 0:
        raise ValueError(f"{params.path}: splits leave no training data")
    return TaskDataset(
        x[train_idx], y[train_idx], x[val_idx], y[val_idx], x[test_idx], y[test_idx],
        num_classes=num_classes,
    )


def save_dataset_csv(x: np.ndarray, y: np.ndarray, path: str | Path) -> None:
    """Write rows of (label, pixels...) in the format `from_file` reads."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for xi, yi in zip(np.asarray(x), np.asarray(y)):
            writer.writerow([int(yi)] + [f"{v:.17g}" for v in xi])


# ---------------------------------------------------------------------------
# hidden distributions


@dataclass(frozen=True)
class HiddenDistribution:
    """A latent mean plus sampling spread; one per (version, label)."""

    latent: np.ndarray
    spread: float = DEFAULT_SPREAD
    samples_per_label: int = DEFAULT_SAMPLES_PER_LABEL

    def validate(self) -> None:
        z = np.asarray(self.latent)
        if z.ndim != 1 or z.size == 0:
            raise ValueError("latent must be a non-empty 1-D vector")
        if np.abs(z).max() > LATENT_BOUND + 1e-12:
            raise ValueError(f"latent entries must lie in [-{LATENT_BOUND}, {LATENT_BOUND}]")
        if self.spread <= 0:
            raise ValueError(f"spread must be positive, got {self.spread}")
        if self.samples_per_label < 1:
            raise ValueError("samples_per_label must be >= 1")


@dataclass(frozen=True)
class HiddenAssignment:
    """One hidden distribution per task label; the secret of one model version."""

    distributions: tuple[HiddenDistribution, ...]

    def __len__(self) -> int:
        return len(self.distributions)

    def __getitem__(self, label: int) -> HiddenDistribution:
        return self.distributions[label]

    def validate(self) -> None:
        if len(self.distributions) < 2:
            raise ValueError("assignment needs at least 2 labels")
        for dist in self.distributions:
            dist.validate()

    def to_json_dict(self) -> dict:
        return {
            "spread": self.distributions[0].spread,
            "samples_per_label": self.distributions[0].samples_per_label,
            "latents": {str(l): d.latent.tolist() for l, d in enumerate(self.distributions)},
        }

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "HiddenAssignment":
        latents = data["latents"]
        dists = tuple(
            HiddenDistribution(
                latent=np.asarray(latents[str(l)], dtype=float),
                spread=float(data["spread"]),
                samples_per_label=int(data["samples_per_label"]),
            )
            for l in range(len(latents))
        )
        return cls(dists)


def sample_latent(rng: np.random.Generator, dim: int = LATENT_DIM) -> np.ndarray:
    """Latent mean drawn uniformly from the bounded latent box."""
    return rng.uniform(-LATENT_BOUND, LATENT_BOUND, size=dim)


def assign_per_label(
    num_labels: int,
    spread: float = DEFAULT_SPREAD,
    rng: np.random.Generator | None = None,
    samples_per_label: int = DEFAULT_SAMPLES_PER_LABEL,
    latent_dim: int = LATENT_DIM,
) -> HiddenAssignment:
    """Independently sampled hidden distribution for each task label."""
    if num_labels < 2:
        raise ValueError(f"need at least 2 labels, got {num_labels}")
    rng = np.random.default_rng() if rng is None else rng
    dists = tuple(
        HiddenDistribution(sample_latent(rng, latent_dim), spread, samples_per_label)
        for _ in range(num_labels)
    )
    assignment = HiddenAssignment(dists)
    assignment.validate()
    return assignment


def render_textures(latents: np.ndarray, input_dim: int) -> np.ndarray:
    """Render a batch of latent vectors to flat images with values in [0, 1].

    Pixels sit on a ceil(sqrt(d)) grid with centred coordinates in
    [-1/2, 1/2]; the first `input_dim` pixels in row-major order are kept.
    Four sinusoidal waves are summed; wave m reads latent coordinates
    4m..4m+3 as (frequency, orientation, phase, amplitude), each mapped
    affinely from [-1/2, 1/2] into its range. Latent dims beyond 4 waves
    are ignored; missing coordinates default to the range midpoint.
    """
    z = np.atleast_2d(np.asarray(latents, dtype=float))
    n = z.shape[0]
    side = int(np.ceil(np.sqrt(input_dim)))
    lin = (np.arange(side) + 0.5) / side - 0.5
    xx, yy = np.meshgrid(lin, lin)
    u = xx.ravel()[:input_dim]
    v = yy.ravel()[:input_dim]

    t = np.full((n, _WAVES * 4), 0.5)
    take = min(z.shape[1], _WAVES * 4)
    t[:, :take] = z[:, :take] + LATENT_BOUND

    acc = np.zeros((n, input_dim))
    for m in range(_WAVES):
        freq = _FREQ_MIN + _FREQ_SPAN * t[:, 4 * m]
        theta = np.pi * t[:, 4 * m + 1]
        phase = 2.0 * np.pi * t[:, 4 * m + 2]
        amp = _AMP_MIN + _AMP_SPAN * t[:, 4 * m + 3]
        s = np.outer(np.cos(theta), u) + np.outer(np.sin(theta), v)
        acc += amp[:, None] * np.sin(2.0 * np.pi * freq[:, None] * s + phase[:, None])
    return np.clip(_BASE + (_CONTRAST / _WAVES) * acc, 0.0, 1.0)


def render_texture(latent: np.ndarray, input_dim: int) -> np.ndarray:
    return render_textures(latent, input_dim)[0]


def render_lipschitz_bound(input_dim: int) -> float:
    """K such that ||render(z1) - render(z2)||_2 <= K * ||z1 - z2||_1.

    Per pixel, the derivative of one wave wrt its latent coordinates is
    bounded by (contrast/waves) times:
      frequency:   a_max * 2*pi*freq_span * |s|          (|s| <= sqrt(2)/2)
      orientation: a_max * 2*pi*f_max * |ds/dtheta| * pi (|ds/dtheta| <= sqrt(2)/2)
      phase:       a_max * 2*pi
      amplitude:   amp_span
    Clipping to [0, 1] is 1-Lipschitz, so the per-pixel bound is the max of
    these, and the image-level L2 bound multiplies by sqrt(input_dim).
    """
    c = _CONTRAST / _WAVES
    a_max = _AMP_MIN + _AMP_SPAN
    f_max = _FREQ_MIN + _FREQ_SPAN
    half_diag = np.sqrt(2.0) / 2.0
    per_coord = c * max(
        a_max * 2.0 * np.pi * _FREQ_SPAN * half_diag,
        a_max * 2.0 * np.pi * f_max * half_diag * np.pi,
        a_max * 2.0 * np.pi,
        _AMP_SPAN,
    )
    return float(np.sqrt(input_dim) * per_coord)


def gen_hidden_samples(
    dist: HiddenDistribution, n: int, seed: int, input_dim: int
) -> np.ndarray:
    """n rendered samples from one hidden distribution, deterministic in seed.

    Per-sample latents are Gaussian around the latent mean with the
    distribution's spread, clipped back into the latent box.
    """
    dist.validate()
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    latents = dist.latent[None, :] + dist.spread * rng.standard_normal((n, len(dist.latent)))
    latents = np.clip(latents, -LATENT_BOUND, LATENT_BOUND)
    return render_textures(latents, input_dim)


def hidden_pool(
    assignment: HiddenAssignment, input_dim: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """All labels' hidden samples stacked, with their assigned labels."""
    xs, ys = [], []
    for label, dist in enumerate(assignment.distributions):
        samples = gen_hidden_samples(dist, dist.samples_per_label, child_seed(seed, label), input_dim)
        xs.append(samples)
        ys.append(np.full(len(samples), label, dtype=int))
    return np.vstack(xs), np.concatenate(ys)
