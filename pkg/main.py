"""
Command-line runner for the circular-means reconstruction experiments.

Each run renders a phantom, simulates the measurements of the chosen
modality, optionally adds noise, reconstructs and writes the artifacts:

- interior / ext-int / ext-invisible: circular means inversion
- ivpa: photoacoustic traces through the Abel pair
- ivus-born: Born measurements from the Volterra forward map
- ivus-wave: Born measurements from the finite-difference simulator

Usage:
    python main.py --experiment interior --geom-preset desk --out runs/interior
    python main.py --config run.json --noise 0.05
"""
import argparse
import json
import sys
from typing import Any, Dict, List, Literal, Optional

import numpy as np
from loguru import logger
from pydantic import BaseModel, ValidationError, field_validator

from analytics.reporter import ReconstructionReporter, annulus_metrics
from modalities.ivpa import abel_forward, ivpa_reconstruct
from modalities.ivus import (
    build_kernel_table,
    ivus_reconstruct,
    resample_measurements,
    synthesize_measurements,
    volterra_grids,
)
from phantoms.phantom import ImageGrid, add_noise, make_phantom, preset
from simulation.wavesim import SimConfig, SpeedField, acquire_all
from tomography.cmt import AcquisitionGeometry, CircularMeansSinogram, InversionParams, forward_cmt, invert
from utils.config import Config
from utils.errors import ConfigError, ReconstructionError
from utils.logger import setup_logger
from utils.storage import save_array

EXPERIMENT_PHANTOMS = {
    "interior": "interior",
    "ext-int": "ext-int",
    "ext-invisible": "ext-invisible",
    "ivpa": "interior",
    "ivus-born": "vessel",
    "ivus-wave": "vessel",
}

# Ring holding the "aorta wall" annuli of the ext-* presets
WALL_RING = (0.75, 1.22)

EXIT_VALIDATION = 2


class RunConfig(BaseModel):
    """Settings of one reconstruction run."""

    experiment: Literal["interior", "ext-int", "ext-invisible", "ivpa", "ivus-born", "ivus-wave"] = "interior"
    geom_preset: Literal["full", "desk", "small"] = "desk"
    noise: float = 0.0
    contrast: float = 0.01
    seed: int = 0
    out: str = Config.OUTPUT_DIR
    contour_a: Optional[float] = None
    contour_M: Optional[float] = None
    cone_margin: float = 0.0
    n_phi: Optional[int] = None
    n_r: Optional[int] = None
    image_n: Optional[int] = None
    n_jobs: Optional[int] = None
    bandwidth: Optional[float] = None
    wave_dx: float = 0.02
    solver: Literal["triangular", "iterative"] = "triangular"
    resume_from: Optional[str] = None

    @field_validator("noise")
    @classmethod
    def noise_nonnegative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("noise must be nonnegative")
        return value

    @field_validator("contrast")
    @classmethod
    def contrast_in_born_regime(cls, value: float) -> float:
        if not 0 < value < Config.BORN_CONTRAST_LIMIT:
            raise ValueError(f"contrast must lie in (0, {Config.BORN_CONTRAST_LIMIT})")
        return value

    @field_validator("n_phi")
    @classmethod
    def n_phi_power_of_two(cls, value: Optional[int]) -> Optional[int]:
        if value is not None and (value < 2 or value & (value - 1)):
            raise ValueError("n_phi must be a power of two")
        return value

    @field_validator("cone_margin")
    @classmethod
    def margin_in_range(cls, value: float) -> float:
        if not 0 <= value < 1:
            raise ValueError("cone_margin must lie in [0, 1)")
        return value

    @field_validator("contour_a", "contour_M", "bandwidth", "wave_dx")
    @classmethod
    def positive(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and value <= 0:
            raise ValueError("must be positive")
        return value


class ReconstructionApp:
    """
    Runs one experiment end to end.

    Attributes:
        config (RunConfig): Run settings
        reporter (ReconstructionReporter): Timings, metrics and image export
        geom (AcquisitionGeometry): Acquisition geometry from the preset
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.reporter = ReconstructionReporter(config.out)

        preset_values = dict(Config.get_geometry_preset(config.geom_preset))
        self.geom = AcquisitionGeometry(
            preset_values["R0"],
            preset_values["R1"],
            config.n_phi or preset_values["n_phi"],
            config.n_r or preset_values["n_r"],
        )
        self.image_n = config.image_n or preset_values["image_n"]
        self.params = self._inversion_params()

    def _inversion_params(self) -> InversionParams:
        config = self.config
        return InversionParams.defaults_for(
            self.geom,
            a=config.contour_a,
            M=config.contour_M,
            margin=config.cone_margin,
            n_jobs=config.n_jobs,
            bandwidth=config.bandwidth,
        )

    def _save(self, name: str, values: np.ndarray, **meta) -> str:
        return save_array(self.reporter.path(name), values, meta)

    def make_phantom(self) -> ImageGrid:
        contrast = self.config.contrast if self.config.experiment.startswith("ivus") else None
        spec = preset(EXPERIMENT_PHANTOMS[self.config.experiment], contrast=contrast)
        phantom = make_phantom(spec, self.image_n, self.geom.R1)
        self._save("phantom", phantom.values, half_width=phantom.half_width, **phantom.meta)
        return phantom

    def _noisy(self, values: np.ndarray) -> np.ndarray:
        return add_noise(values, self.config.noise, self.config.seed)

    def reconstruct(self, phantom: ImageGrid) -> ImageGrid:
        """Data stage, noise stage and inversion for the configured experiment."""
        config = self.config
        experiment = config.experiment

        if config.resume_from:
            with self.reporter.stage("data"):
                sino = CircularMeansSinogram.load(config.resume_from)
                self.geom = sino.geom
                self.params = self._inversion_params()
                logger.info(f"Resuming from sinogram {config.resume_from}")
            with self.reporter.stage("inversion"):
                return invert(sino, self.params, self.image_n, self.geom.R1)

        if experiment == "ivus-wave":
            with self.reporter.stage("measurements"):
                cfg = SimConfig.for_geometry(self.geom, config.wave_dx)
                raw = acquire_all(SpeedField(phantom), self.geom, cfg, config.n_jobs)
                W = resample_measurements(raw, volterra_grids(self.geom)[1])
                self._save("measurements", W.values, s_grid=W.s_grid, **W.meta)
            with self.reporter.stage("noise"):
                W = W.with_values(self._noisy(W.values), noise=config.noise)
            with self.reporter.stage("inversion"):
                return ivus_reconstruct(W, self.geom, self.params, solver=config.solver,
                                        n=self.image_n, cache_dir=Config.CACHE_DIR)

        with self.reporter.stage("forward"):
            sino = forward_cmt(phantom, self.geom, n_jobs=config.n_jobs)
            sino.save(self.reporter.path("sinogram"))

        if experiment == "ivpa":
            with self.reporter.stage("traces"):
                traces = abel_forward(sino)
                traces.save(self.reporter.path("traces"))
            with self.reporter.stage("noise"):
                traces = traces.with_values(self._noisy(traces.values), noise=config.noise)
            with self.reporter.stage("inversion"):
                return ivpa_reconstruct(traces, self.params, self.image_n)

        if experiment == "ivus-born":
            with self.reporter.stage("measurements"):
                table = build_kernel_table(*volterra_grids(self.geom), cache_dir=Config.CACHE_DIR,
                                           n_jobs=config.n_jobs)
                W = synthesize_measurements(sino, table)
                self._save("measurements", W.values, s_grid=W.s_grid, **W.meta)
            with self.reporter.stage("noise"):
                W = W.with_values(self._noisy(W.values), noise=config.noise)
            with self.reporter.stage("inversion"):
                return ivus_reconstruct(W, self.geom, self.params, table=table, solver=config.solver,
                                        n=self.image_n)

        with self.reporter.stage("noise"):
            sino = sino.with_values(self._noisy(sino.values), noise=config.noise)
        with self.reporter.stage("inversion"):
            return invert(sino, self.params, self.image_n, self.geom.R1)

    def run(self) -> Dict[str, Any]:
        """Run all stages and write the artifacts; returns the metrics report."""
        logger.info(f"Running {self.config.experiment} on {self.geom.n_phi}x{self.geom.n_r} geometry")

        with self.reporter.stage("phantom"):
            phantom = self.make_phantom()

        reconstruction = self.reconstruct(phantom)

        with self.reporter.stage("metrics"):
            for key in ("imag_ratio", "imag_warning", "zero_residual", "abel_calibration", "c_jump"):
                if key in reconstruction.meta:
                    self.reporter.extra[key] = reconstruction.meta[key]
            if self.config.experiment in ("ext-int", "ext-invisible"):
                self.reporter.extra.update(annulus_metrics(reconstruction, phantom, *WALL_RING))

        try:
            with self.reporter.stage("artifacts"):
                self._save("reconstruction", reconstruction.values, **reconstruction.meta)
                self.reporter.export_images(phantom, reconstruction)
                with open(self.reporter.path("run_config.json"), "w") as handle:
                    json.dump(self.config.model_dump(), handle, indent=2, sort_keys=True)
            report = self.reporter.metrics(reconstruction, phantom)
            self.reporter.write_metrics(report)
        except OSError as e:
            raise ConfigError(f"Could not write artifacts: {e}", stage="artifacts") from e
        return report


def run(config: RunConfig) -> Dict[str, Any]:
    """Run one experiment and return its metrics report."""
    return ReconstructionApp(config).run()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Circular means reconstruction experiments")
    parser.add_argument("--config", help="JSON file with RunConfig fields")
    parser.add_argument("--experiment", choices=sorted(EXPERIMENT_PHANTOMS))
    parser.add_argument("--geom-preset", dest="geom_preset", choices=sorted(Config.GEOMETRY_PRESETS))
    parser.add_argument("--noise", type=float, help="Relative noise level, 0.05 for 5%%")
    parser.add_argument("--contrast", type=float, help="Peak |m| for the IVUS experiments")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--contour-a", dest="contour_a", type=float)
    parser.add_argument("--contour-M", dest="contour_M", type=float)
    parser.add_argument("--cone-margin", dest="cone_margin", type=float)
    parser.add_argument("--bandwidth", type=float, help="Spectral taper width (default scales with the grid)")
    parser.add_argument("--n-phi", dest="n_phi", type=int)
    parser.add_argument("--n-r", dest="n_r", type=int)
    parser.add_argument("--image-n", dest="image_n", type=int)
    parser.add_argument("--n-jobs", dest="n_jobs", type=int)
    parser.add_argument("--wave-dx", dest="wave_dx", type=float)
    parser.add_argument("--solver", choices=["triangular", "iterative"])
    parser.add_argument("--resume-from", dest="resume_from", help="Sinogram stem to restart the inversion from")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    """RunConfig from the JSON file (if any) overridden by explicit flags."""
    values: Dict[str, Any] = {}
    if args.config:
        with open(args.config) as handle:
            values.update(json.load(handle))
    values.update({key: value for key, value in vars(args).items() if key != "config" and value is not None})
    return RunConfig(**values)


def main(argv: Optional[List[str]] = None) -> int:
    """Parse flags, run and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    setup_logger()

    try:
        config = load_config(args)
    except (ValidationError, OSError, json.JSONDecodeError) as e:
        logger.error(f"Invalid run configuration: {e}")
        print(f"[config] {e}", file=sys.stderr)
        return EXIT_VALIDATION

    if not Config.validate():
        logger.error("Configuration validation failed - check your .env file")
        return EXIT_VALIDATION

    try:
        report = run(config)
    except ReconstructionError as e:
        logger.error(f"Run failed: {e.tagged()}")
        print(e.tagged(), file=sys.stderr)
        return e.exit_code

    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
