"""
Reconstruction reporting: image export, figure panels and run metrics.
"""
import json
import os
import time
from contextlib import contextmanager
from typing import Any, Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
from loguru import logger

from phantoms.phantom import ImageGrid, compare, ncc, support_mask
from utils.errors import ConfigError, MetricError


def render(grid: ImageGrid, path: str, lo: float, hi: float) -> str:
    """
    Write an 8-bit binary PGM (P5) with the linear window [lo, hi].

    Values are clipped to the window; hi maps to 255 and lo to 0. The top
    image row is the largest y.
    """
    if not hi > lo:
        raise ConfigError(f"Display window needs hi > lo, got [{lo}, {hi}]", stage="render")
    scaled = np.clip((grid.values - lo) / (hi - lo), 0.0, 1.0)
    pixels = np.round(scaled * 255.0).astype(np.uint8)[::-1]

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(f"P5\n{grid.n} {grid.n}\n255\n".encode("ascii"))
        handle.write(np.ascontiguousarray(pixels).tobytes())
    return path


def render_figure(images: Sequence[ImageGrid], titles: Sequence[str], path: str,
                  lo: float, hi: float) -> str:
    """Side-by-side gray panels with a shared display window."""
    if len(images) != len(titles):
        raise ConfigError("Every panel needs a title", stage="render")

    fig, axes = plt.subplots(1, len(images), figsize=(4.5 * len(images), 4.5), squeeze=False)
    for ax, image, title in zip(axes[0], images, titles):
        extent = [-image.half_width, image.half_width, -image.half_width, image.half_width]
        ax.imshow(image.values, origin="lower", cmap="gray", vmin=lo, vmax=hi, extent=extent)
        ax.set_title(title, fontsize=12, fontweight="bold")
        ax.set_aspect("equal")

    plt.tight_layout()
    plt.savefig(path, format="png", bbox_inches="tight", dpi=150)
    plt.close(fig)
    return path


def annulus_metrics(rec: ImageGrid, truth: ImageGrid, inner: float, outer: float) -> Dict[str, float]:
    """
    Compare the reconstruction with the phantom on the ring inner <= r < outer.

    Returns the ratio of ring means (reconstruction / phantom) and the ring ncc.
    """
    mask = support_mask(truth, inner, outer)
    truth_mean = float(np.mean(truth.values[mask])) if np.any(mask) else 0.0
    if truth_mean == 0.0:
        raise MetricError(f"Phantom ring [{inner}, {outer}) has zero mean", stage="metrics")
    return {
        "ring_mean_ratio": float(np.mean(rec.values[mask]) / truth_mean),
        "ring_ncc": ncc(rec.values[mask], truth.values[mask]),
    }


class ReconstructionReporter:
    """Collects stage timings and metrics for one pipeline run."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.stage_timings_ms: Dict[str, float] = {}
        self.extra: Dict[str, Any] = {}
        os.makedirs(out_dir, exist_ok=True)

    @contextmanager
    def stage(self, name: str):
        """Time a pipeline stage."""
        start = time.perf_counter()
        logger.debug(f"Stage {name} started")
        try:
            yield
        finally:
            elapsed = 1000.0 * (time.perf_counter() - start)
            self.stage_timings_ms[name] = elapsed
            logger.info(f"Stage {name} finished in {elapsed:.0f} ms")

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def export_images(self, phantom: ImageGrid, reconstruction: ImageGrid,
                      titles: Optional[List[str]] = None) -> Dict[str, str]:
        """Write both PGMs and a figure, all in the phantom's display window."""
        lo = float(np.min(phantom.values))
        hi = float(np.max(phantom.values))
        if hi <= lo:
            hi = lo + 1.0
        titles = titles or ["Phantom", "Reconstruction"]
        return {
            "phantom_pgm": render(phantom, self.path("phantom.pgm"), lo, hi),
            "reconstruction_pgm": render(reconstruction, self.path("reconstruction.pgm"), lo, hi),
            "figure": render_figure([phantom, reconstruction], titles, self.path("comparison.png"), lo, hi),
        }

    def metrics(self, reconstruction: ImageGrid, phantom: ImageGrid) -> Dict[str, Any]:
        """Full-image metrics plus everything added to ``extra``."""
        report = compare(reconstruction, phantom).to_dict()
        report.update(self.extra)
        report["stage_timings_ms"] = dict(self.stage_timings_ms)
        return report

    def write_metrics(self, report: Dict[str, Any]) -> str:
        path = self.path("metrics.json")
        with open(path, "w") as handle:
            json.dump(report, handle, indent=2, sort_keys=True)
        return path
