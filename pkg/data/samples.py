"""Generate weighted train/test sample sets with a seeded teacher target."""

from dataclasses import dataclass
from typing import Optional, Tuple
import logging

import numpy as np

from models.netlab import ModelSpec, SampleSet, forward, init_network

logger = logging.getLogger(__name__)

DISTRIBUTIONS = ('uniform-box', 'gaussian')
TEACHERS = ('random-net', 'sine')


@dataclass
class DataSpec:
    """How inputs are drawn and what the target function is."""
    distribution: str = 'uniform-box'
    input_dim: int = 1
    box: float = 1.0  # half-width of the input box / std of the gaussian
    n_train: int = 16
    n_test: int = 0
    teacher: str = 'random-net'
    teacher_width: int = 16
    teacher_seed: int = 1234
    noise: float = 0.0

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}, got {self.distribution!r}")
        if self.teacher not in TEACHERS:
            raise ValueError(f"teacher must be one of {TEACHERS}, got {self.teacher!r}")
        if self.n_train < 1:
            raise ValueError(f"n_train must be >= 1, got {self.n_train}")
        if self.n_test < 0:
            raise ValueError(f"n_test must be >= 0, got {self.n_test}")
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if not self.box > 0:
            raise ValueError(f"box must be positive, got {self.box}")
        if self.noise < 0:
            raise ValueError(f"noise must be nonnegative, got {self.noise}")


class SampleGenerator:
    """Draw inputs from a fixed distribution and label them with a teacher."""

    def __init__(self, spec: DataSpec):
        self.spec = spec
        self.teacher_spec = ModelSpec(
            kind='mlp',
            layer_widths=(spec.input_dim, spec.teacher_width, 1),
            activation='tanh',
            init_scale=2.0,
            seed=spec.teacher_seed,
        )
        self._teacher = init_network(self.teacher_spec)

    def draw_inputs(self, n: int, rng: np.random.Generator) -> np.ndarray:
        d = self.spec.input_dim
        if self.spec.distribution == 'uniform-box':
            return rng.uniform(-self.spec.box, self.spec.box, size=(n, d))
        return rng.standard_normal((n, d)) * self.spec.box

    def target(self, inputs: np.ndarray) -> np.ndarray:
        """Noise-free f*(x)."""
        if self.spec.teacher == 'sine':
            return np.sin(np.pi * inputs).sum(axis=1)
        dummy = SampleSet(inputs, np.zeros(inputs.shape[0]))
        return forward(self._teacher, dummy)

    def sample(self, n: int, seed: int, stream: int = 0) -> SampleSet:
        """Uniformly weighted sample set of size n.

        ``stream`` separates train (0) and test (1) draws of the same seed.
        """
        rng = np.random.default_rng([self.spec.teacher_seed, seed, stream])
        inputs = self.draw_inputs(n, rng)
        targets = self.target(inputs)
        if self.spec.noise > 0:
            targets = targets + self.spec.noise * rng.standard_normal(n)
        return SampleSet(inputs, targets)

    def train_test(self, seed: int) -> Tuple[SampleSet, Optional[SampleSet]]:
        train = self.sample(self.spec.n_train, seed, stream=0)
        test = self.sample(self.spec.n_test, seed, stream=1) if self.spec.n_test else None
        logger.debug(
            f"Drew {self.spec.n_train} train / {self.spec.n_test} test points "
            f"({self.spec.distribution}, teacher={self.spec.teacher}, seed={seed})"
        )
        return train, test
