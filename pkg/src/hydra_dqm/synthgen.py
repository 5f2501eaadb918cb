"""Deterministic synthetic monitoring-plot generator.

Produces occupancy-style heatmaps (per-cell Poisson counts peaked toward
the image center, mimicking beam-centered detector occupancy) with three
injectable fault modes:

  HalfColumnsDead  left half of the grid reads zero      -> class Bad
  PedestalNoise    uniform pedestal on off-center cells  -> class Bad
  Blank            empty axes frame, no data at all      -> class NoData

Everything is a pure function of the fault spec's seed, so corpora are
bit-reproducible.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

import numpy as np
from PIL import Image

from .errors import IoFailure

KIND_NONE = "None"
KIND_HALF_COLUMNS_DEAD = "HalfColumnsDead"
KIND_PEDESTAL_NOISE = "PedestalNoise"
KIND_BLANK = "Blank"

CLASS_FOR_KIND = {
    KIND_NONE: "Good",
    KIND_HALF_COLUMNS_DEAD: "Bad",
    KIND_PEDESTAL_NOISE: "Bad",
    KIND_BLANK: "NoData",
}

PEAK_RATE = 50.0          # Poisson rate at the grid center
RENDER_FULL_SCALE = 2.0 * PEAK_RATE  # counts mapped to white
FRAME_INTENSITY = 90      # 1px axes frame drawn on every plot

TRUTH_CSV_NAME = "truth.csv"
TRUTH_CSV_HEADER = ("path", "class")


@dataclass(frozen=True)
class FaultSpec:
    kind: str = KIND_NONE
    magnitude: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in CLASS_FOR_KIND:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")

    @property
    def class_name(self) -> str:
        return CLASS_FOR_KIND[self.kind]


def rate_profile(grid: tuple[int, int] = (32, 24)) -> np.ndarray:
    """Center-peaked Poisson rate per cell: PEAK_RATE * exp(-r^2 / 2 sigma^2),
    sigma = one third of the grid diagonal. Shape (rows, cols)."""
    cols, rows = grid
    sigma = np.hypot(cols, rows) / 3.0
    cy, cx = (rows - 1) / 2.0, (cols - 1) / 2.0
    yy, xx = np.mgrid[0:rows, 0:cols]
    r2 = (xx - cx) ** 2 + (yy - cy) ** 2
    return PEAK_RATE * np.exp(-r2 / (2.0 * sigma * sigma))


def off_center_mask(grid: tuple[int, int] = (32, 24)) -> np.ndarray:
    """Cells farther than one profile sigma from the grid center."""
    cols, rows = grid
    sigma = np.hypot(cols, rows) / 3.0
    cy, cx = (rows - 1) / 2.0, (cols - 1) / 2.0
    yy, xx = np.mgrid[0:rows, 0:cols]
    return np.hypot(xx - cx, yy - cy) > sigma


def occupancy_grid(spec: FaultSpec, grid: tuple[int, int] = (32, 24)) -> np.ndarray:
    """Per-cell counts with the fault applied, shape (rows, cols)."""
    cols, rows = grid
    if spec.kind == KIND_BLANK:
        return np.zeros((rows, cols), dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    counts = rng.poisson(rate_profile(grid)).astype(np.float64)
    if spec.kind == KIND_HALF_COLUMNS_DEAD:
        counts[:, : cols // 2] = 0.0
    elif spec.kind == KIND_PEDESTAL_NOISE:
        counts[off_center_mask(grid)] += spec.magnitude * PEAK_RATE
    return counts


def render_png(counts: np.ndarray, image_dims: tuple[int, int] = (320, 240)) -> bytes:
    """Grayscale heatmap: counts on a fixed scale (white = 2x peak rate),
    cells expanded to equal pixel blocks, 1px axes frame."""
    width, height = image_dims
    rows, cols = counts.shape
    if width % cols or height % rows:
        raise ValueError(f"image dims {image_dims} must be a multiple of the grid {cols}x{rows}")
    intensity = np.clip(counts / RENDER_FULL_SCALE, 0.0, 1.0)
    pixels = np.rint(intensity * 255.0).astype(np.uint8)
    pixels = np.kron(pixels, np.ones((height // rows, width // cols), dtype=np.uint8))
    pixels[0, :] = FRAME_INTENSITY
    pixels[-1, :] = FRAME_INTENSITY
    pixels[:, 0] = FRAME_INTENSITY
    pixels[:, -1] = FRAME_INTENSITY
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def generate_plot(
    spec: FaultSpec,
    grid: tuple[int, int] = (32, 24),
    image_dims: tuple[int, int] = (320, 240),
) -> tuple[bytes, str]:
    """(png_bytes, class_name) for one synthetic plot, deterministic per seed."""
    return render_png(occupancy_grid(spec, grid), image_dims), spec.class_name


def _schedule(counts: dict[str, int], seed: int) -> list[FaultSpec]:
    """Fault spec per image: Bad alternates its two modes, pedestal magnitudes
    drawn from [0.5, 1.2]; the whole schedule is shuffled so classes interleave
    over time."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    specs: list[FaultSpec] = []
    serial = 0
    for class_name in ("Good", "Bad", "NoData"):
        for k in range(counts.get(class_name, 0)):
            if class_name == "Good":
                kind, mag = KIND_NONE, 0.0
            elif class_name == "NoData":
                kind, mag = KIND_BLANK, 0.0
            elif k % 2 == 0:
                kind, mag = KIND_HALF_COLUMNS_DEAD, 0.0
            else:
                kind, mag = KIND_PEDESTAL_NOISE, float(rng.uniform(0.5, 1.2))
            specs.append(FaultSpec(kind=kind, magnitude=mag, seed=seed * 1_000_003 + serial))
            serial += 1
    order = rng.permutation(len(specs))
    return [specs[i] for i in order]


def generate_corpus(
    n_per_class: int | dict[str, int],
    seed: int,
    out_dir: str,
    plot_type: str = "occupancy",
    run_period: str = "RunPeriod-2025-01",
    images_per_run: int = 100,
    start_time: datetime | None = None,
    grid: tuple[int, int] = (32, 24),
    image_dims: tuple[int, int] = (320, 240),
) -> list[tuple[str, str]]:
    """Write a labeled corpus in the catalog's on-disk layout.

    Images land under <out_dir>/<run_period>/Run<NNNNNN>/ with filenames
    carrying a basic-format UTC timestamp (one image per minute), and a
    truth CSV (header ``path,class``) is written next to them. Returns
    the (absolute path, class) pairs in capture order.
    """
    if isinstance(n_per_class, int):
        if n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        counts = {"Good": n_per_class, "Bad": n_per_class, "NoData": n_per_class}
    else:
        counts = dict(n_per_class)
    start = start_time or datetime(2025, 1, 1, tzinfo=timezone.utc)
    specs = _schedule(counts, seed)
    truth: list[tuple[str, str]] = []
    try:
        for i, spec in enumerate(specs):
            captured = start + timedelta(minutes=i)
            run_number = 1 + i // images_per_run
            run_dir = os.path.join(out_dir, run_period, f"Run{run_number:06d}")
            os.makedirs(run_dir, exist_ok=True)
            filename = f"{plot_type}_{captured.strftime('%Y%m%dT%H%M%SZ')}.png"
            png, class_name = generate_plot(spec, grid, image_dims)
            path = os.path.abspath(os.path.join(run_dir, filename))
            with open(path, "wb") as fh:
                fh.write(png)
            truth.append((path, class_name))
        csv_path = os.path.join(out_dir, TRUTH_CSV_NAME)
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRUTH_CSV_HEADER)
            writer.writerows(truth)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return truth


def load_truth_csv(out_dir: str) -> list[tuple[str, str]]:
    """Read back the (path, class) pairs written by generate_corpus."""
    csv_path = os.path.join(out_dir, TRUTH_CSV_NAME)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRUTH_CSV_HEADER:
            raise IoFailure(f"unexpected truth CSV header: {header}")
        return [(row[0], row[1]) for row in reader]
