"""
Configuration management for the reconstruction toolkit.
"""
import os
from loguru import logger
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class Config:
    """Configuration class for the reconstruction toolkit."""

    # Acquisition geometry defaults (sound speed = 1 units)
    DEFAULT_R0 = 0.5           # transducer circle radius
    DEFAULT_R1 = 1.5           # support radius, R0 + R1 = 2
    DEFAULT_N_PHI = 256        # transducers
    DEFAULT_N_R = 401          # circle radii on [0, R0 + R1]
    DEFAULT_IMAGE_N = 256      # reconstruction pixels per side

    # Geometry presets used by the command-line runner
    GEOMETRY_PRESETS = {
        "full": {"R0": 0.5, "R1": 1.5, "n_phi": 256, "n_r": 401, "image_n": 256},
        "desk": {"R0": 0.5, "R1": 1.5, "n_phi": 128, "n_r": 201, "image_n": 160},
        "small": {"R0": 0.5, "R1": 1.5, "n_phi": 64, "n_r": 101, "image_n": 96},
    }

    # Numerical guards
    BESSEL_MAX_ARGUMENT = float(os.getenv("BESSEL_MAX_ARGUMENT", "1e5"))
    BESSEL_FLOOR = 1e-13       # smallest admissible |J| in the kept region
    BORN_CONTRAST_LIMIT = 0.2  # |m| must stay below this in the simulator

    # Spectral taper width = TAPER_SCALE * (n_phi / dr)^(1/3), capped at pi / (2 dr)
    TAPER_SCALE = float(os.getenv("TAPER_SCALE", "4.0"))

    # Kernel quadrature
    KERNEL_QUAD_NODES = int(os.getenv("KERNEL_QUAD_NODES", "200"))

    # Parallelism
    N_JOBS = int(os.getenv("N_JOBS", "1"))

    # Paths
    CACHE_DIR = os.getenv("CACHE_DIR", ".cache/kernels")
    OUTPUT_DIR = os.getenv("OUTPUT_DIR", "runs")

    # Logging Configuration
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
    LOG_FILE = os.getenv("LOG_FILE", "reconstruction.log")

    @classmethod
    def validate(cls) -> bool:
        """Validate configuration settings."""
        if cls.N_JOBS == 0 or cls.N_JOBS < -1:
            logger.error(f"N_JOBS must be positive or -1, got {cls.N_JOBS}")
            return False

        if cls.BESSEL_MAX_ARGUMENT <= 0:
            logger.error("BESSEL_MAX_ARGUMENT must be positive")
            return False

        if cls.TAPER_SCALE <= 0:
            logger.error("TAPER_SCALE must be positive")
            return False

        if cls.KERNEL_QUAD_NODES < 16:
            logger.error("KERNEL_QUAD_NODES must be at least 16")
            return False

        logger.debug(f"Workers: {cls.N_JOBS}, kernel cache: {cls.CACHE_DIR}")
        logger.info("Configuration validated successfully")
        return True

    @classmethod
    def get_geometry_preset(cls, name: str) -> dict:
        """Get a geometry preset by name (None if unknown)."""
        return cls.GEOMETRY_PRESETS.get(name.lower())
