#!/usr/bin/env python3
"""
Configuration file for the deformable reconstruction engine
Contains all loss weights, optimizer settings, scene parameters and run settings
"""

import json
import logging
import os
from typing import Any, Dict, List

from exceptions import ConfigError

logger = logging.getLogger(__name__)


class ReconConfig:
    """Configuration class for the reconstruction pipeline"""

    # Output settings
    OUTPUT_DIR = "output"
    LOG_LEVEL = "INFO"
    LOG_FILE = "recon.log"

    # Numerics
    DTYPE = "float64"
    SEED = 0
    DETERMINISTIC = False

    # Synthetic scene settings
    SCENE_NAME = "bending-bar"
    NUM_FRAMES = 32
    IMAGE_SIZE = 96
    ARC_DEGREES = 90.0
    CAMERA_RADIUS = 4.0
    CAMERA_ELEVATION_DEGREES = 20.0
    DEFORMATION_AMPLITUDE = 1.0
    KEYFRAME = -1  # -1: middle frame for synthetic scenes, largest mask for loaded sequences

    # Oracle tracks
    TRACK_POINTS_PER_CHUNK = 128
    TRACK_NOISE_PX = 0.5

    # Static stage
    STATIC_APPEARANCE = "oracle"  # oracle | fit
    STATIC_FIT_ITERATIONS = 300
    STATIC_FIT_LR = 0.01

    # Renderer
    CULL_SIGMA = 3.0
    MIN_TRANSMITTANCE = 1e-4
    SPLAT_DILATION = 0.0  # px^2 added to every screen covariance; 0 keeps J Sigma J^T exact

    # Pose regressor (stage 1)
    POSE_ITERATIONS = 4000
    POSE_LR = 5e-4
    POSE_BETAS = [0.9, 0.999]
    POSE_BATCH_SIZE = 8
    POSE_RADIUS_MIN = 3.5
    POSE_RADIUS_MAX = 4.5
    POSE_ROLL_DEGREES = 15.0
    POSE_INPUT_SIZE = 64
    POSE_FEATURE_DIM = 128
    POSE_LAMBDA_ROT = 1.0
    POSE_LAMBDA_TRANS = 1.0
    POSE_LAMBDA_UNC = 0.1
    POSE_HELDOUT_SAMPLES = 512
    POSE_PREFETCH = 4  # bounded queue size for the render producer, 0 disables
    POSE_LOG_EVERY = 200

    # Augmentation
    AUGMENT = True
    AUG_COLOR_JITTER = 0.2
    AUG_MAX_OCCLUSION = 0.2
    AUG_MAX_ROTATION_DEGREES = 10.0

    # Deformation model
    NODE_COUNT = 0  # 0 selects max(16, vertex_count / 50)
    SKIN_NEIGHBORS = 4
    DEFORMATION_MODEL = "table"  # table | mlp
    DELTA_POSE_MODEL = "table"  # table | mlp

    # 4D optimization (stage 2)
    OPTIMIZE_ITERATIONS = 2000
    DEFORM_LR = 5e-3
    DELTA_POSE_LR = 1e-3
    OPTIMIZE_BETAS = [0.9, 0.99]
    WEIGHT_DECAY = 0.0
    LAMBDA_RGB = 1.0
    LAMBDA_TRACK = 0.1
    LAMBDA_MULTI = 0.05
    LAMBDA_ARAP = 0.5
    LAMBDA_SMOOTH = 0.0
    FRAMES_PER_STEP = 4
    KEYFRAME_PROBABILITY = 0.25
    PAIRS_PER_STEP = 64
    CHUNK_STRIDE = 4
    CHUNK_MODE = "bidirectional"  # bidirectional | forward
    ASSOCIATION_REFRESH = 500
    ASSOCIATION_RADIUS_FACTOR = 2.0
    LOSS_WINDOW = 100
    OPTIMIZE_LOG_EVERY = 100

    # Ablation flags
    ABLATION_NO_POSE_INIT = False
    ABLATION_NO_TRACK = False
    ABLATION_NO_MULTI_TRACK = False
    ABLATION_NO_POSE_REFINE = False

    # Evaluation
    HELDOUT_AZIMUTHS = [45.0, 135.0, -90.0]
    PSNR_CAP = 60.0

    # Sweeps
    COVERAGE_ARCS = [0.0, 40.0, 90.0, 140.0, 180.0]
    ABLATION_SEEDS = [0, 1, 2]

    def __init__(self, **overrides: Any):
        for key, value in overrides.items():
            self.set(key, value)

    @classmethod
    def keys(cls) -> List[str]:
        """All configuration keys, sorted"""
        return sorted(name for name in dir(cls) if name.isupper() and not name.startswith('_'))

    def set(self, key: str, value: Any):
        """Set a single key, rejecting names the config does not know"""
        name = key.upper().replace('-', '_')
        if name not in self.keys():
            raise ConfigError(f"Unknown configuration key: {key}")
        setattr(self, name, value)

    def to_dict(self) -> Dict[str, Any]:
        """Flatten the effective configuration into a plain dict"""
        return {key: getattr(self, key) for key in self.keys()}

    def copy(self, **overrides: Any) -> 'ReconConfig':
        """Copy of this config (same class) with overrides applied"""
        clone = self.__class__()
        for key, value in self.to_dict().items():
            setattr(clone, key, value)
        for key, value in overrides.items():
            clone.set(key, value)
        return clone

    @property
    def loss_weights(self) -> Dict[str, float]:
        """Effective λ values after ablation flags"""
        return {
            'rgb': float(self.LAMBDA_RGB),
            'track': 0.0 if self.ABLATION_NO_TRACK else float(self.LAMBDA_TRACK),
            'multi': 0.0 if self.ABLATION_NO_MULTI_TRACK else float(self.LAMBDA_MULTI),
            'arap': float(self.LAMBDA_ARAP),
            'smooth': float(self.LAMBDA_SMOOTH),
        }

    @classmethod
    def load(cls, path: str, environment: str = 'production') -> 'ReconConfig':
        """
        Load a key-value config file on top of an environment

        Format: one `KEY = value` per line, `#` starts a comment, values are
        JSON literals (numbers, true/false, lists, quoted strings) or bare
        strings.
        """
        config = get_config(environment)
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")

        with open(path, 'r', encoding='utf-8') as f:
            for line_no, raw in enumerate(f, 1):
                line = raw.split('#', 1)[0].strip()
                if not line:
                    continue
                if '=' not in line:
                    raise ConfigError(f"{path}:{line_no}: expected KEY = value, got {raw.strip()!r}")
                key, value = (part.strip() for part in line.split('=', 1))
                try:
                    config.set(key, _parse_value(value))
                except ConfigError as e:
                    raise ConfigError(f"{path}:{line_no}: {e}") from e

        logger.info(f"Loaded config {path} on top of {environment} environment")
        return config

    def snapshot(self, path: str) -> str:
        """Write the effective config in the key-value format"""
        lines = [f"# {self.__class__.__name__} snapshot"]
        for key, value in self.to_dict().items():
            lines.append(f"{key} = {json.dumps(value)}")
        with open(path, 'w', encoding='utf-8') as f:
            f.write('\n'.join(lines) + '\n')
        return path

    def get_output_path(self, filename: str) -> str:
        """Get full output path for a file"""
        return os.path.join(self.OUTPUT_DIR, filename)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        lowered = text.lower()
        if lowered in ('true', 'false'):
            return lowered == 'true'
        return text


# Environment-specific configurations
class DevelopmentConfig(ReconConfig):
    """Development environment configuration"""
    LOG_LEVEL = "DEBUG"
    POSE_ITERATIONS = 1000
    OPTIMIZE_ITERATIONS = 500


class ProductionConfig(ReconConfig):
    """Production environment configuration"""
    LOG_LEVEL = "INFO"


class TestingConfig(ReconConfig):
    """Testing environment configuration"""
    OUTPUT_DIR = "test_output"
    LOG_LEVEL = "DEBUG"
    NUM_FRAMES = 8
    IMAGE_SIZE = 48
    TRACK_POINTS_PER_CHUNK = 32
    STATIC_FIT_ITERATIONS = 10
    POSE_ITERATIONS = 20
    POSE_BATCH_SIZE = 2
    POSE_INPUT_SIZE = 32
    POSE_HELDOUT_SAMPLES = 8
    POSE_PREFETCH = 0
    OPTIMIZE_ITERATIONS = 20
    ASSOCIATION_REFRESH = 10
    LOSS_WINDOW = 5
    PAIRS_PER_STEP = 16
    ABLATION_SEEDS = [0]
    COVERAGE_ARCS = [0.0, 90.0]


# Configuration factory
def get_config(environment: str = 'production') -> ReconConfig:
    """Get configuration based on environment"""
    configs = {
        'development': DevelopmentConfig,
        'production': ProductionConfig,
        'testing': TestingConfig
    }

    config_class = configs.get(environment.lower(), ProductionConfig)
    return config_class()


if __name__ == "__main__":
    config = get_config('production')
    print(f"Output directory: {config.OUTPUT_DIR}")
    print(f"Loss weights: {config.loss_weights}")
    print(f"Pose iterations: {config.POSE_ITERATIONS}")
    print(f"Optimization iterations: {config.OPTIMIZE_ITERATIONS}")
