"""Tiny differentiable models and explicit gradient-flow training.

Two model families are supported: small fully connected networks (``mlp``)
and random-feature regressors with a frozen feature map and a trainable
linear head (``random-features``). Every quantity is evaluated in the
weighted empirical geometry of a :class:`SampleSet`.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np

from models.errors import ConfigError, DimensionError, DivergenceError

logger = logging.getLogger(__name__)

MODEL_KINDS = ('mlp', 'random-features')
ACTIVATIONS = ('tanh', 'relu', 'identity')
INTEGRATORS = ('euler', 'rk4')

# Per-step slack allowed on loss increases (roundoff)
MONOTONE_TOL = 1e-12


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and initialization of a model.

    ``layer_widths[0]`` is always the input dimension. For ``mlp`` the list
    runs input → hidden... → 1; for ``random-features`` only the first
    entry is read and ``feature_count`` sets the width of the frozen map.
    """
    kind: str = 'mlp'
    layer_widths: Tuple[int, ...] = (1, 8, 1)
    activation: str = 'tanh'
    feature_count: int = 0
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'layer_widths', tuple(int(w) for w in self.layer_widths))
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not self.init_scale > 0:
            raise ValueError(f"init_scale must be positive, got {self.init_scale}")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError(f"layer_widths entries must be >= 1, got {self.layer_widths}")
        if self.kind == 'mlp':
            if len(self.layer_widths) < 2:
                raise ValueError(f"mlp needs at least 2 layer widths, got {self.layer_widths}")
            if self.layer_widths[-1] != 1:
                raise ValueError(f"mlp output width must be 1, got {self.layer_widths[-1]}")
        else:
            if len(self.layer_widths) < 1:
                raise ValueError("random-features needs layer_widths[0] as input dimension")
            if self.feature_count < 1:
                raise ValueError(f"feature_count must be >= 1, got {self.feature_count}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        """(fan_out, fan_in) of every trainable weight matrix."""
        if self.kind == 'random-features':
            return [(1, self.feature_count)]
        return [(self.layer_widths[i + 1], self.layer_widths[i])
                for i in range(len(self.layer_widths) - 1)]

    @property
    def parameter_count(self) -> int:
        if self.kind == 'random-features':
            return self.feature_count
        return sum(out * fan_in + out for out, fan_in in self.layer_shapes)

    def to_dict(self) -> dict:
        return {
            'kind': self.kind,
            'layer_widths': list(self.layer_widths),
            'activation': self.activation,
            'feature_count': self.feature_count,
            'init_scale': self.init_scale,
            'seed': self.seed,
        }


@dataclass
class NetworkState:
    """Parameter vector θ together with the spec that shapes it."""
    params: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if self.params.ndim != 1 or self.params.size != self.spec.parameter_count:
            raise ValueError(
                f"params length {self.params.size} does not match "
                f"parameter count {self.spec.parameter_count}"
            )


@dataclass
class SampleSet:
    """Weighted sample points: the empirical stand-in for p(x) and f*."""
    inputs: np.ndarray
    targets: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs.reshape(-1, 1)
        self.targets = np.asarray(self.targets, dtype=float).ravel()
        n = self.inputs.shape[0]
        if self.targets.size != n:
            raise ValueError(f"targets length {self.targets.size} != number of inputs {n}")
        if not np.all(np.isfinite(self.targets)):
            raise ValueError("targets must be finite")
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.weights.size != n:
            raise ValueError(f"weights length {self.weights.size} != number of inputs {n}")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be strictly positive")
        if abs(self.weights.sum() - 1.0) > 1e-10:
            raise ValueError(f"weights must sum to 1, got {self.weights.sum()}")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        """Weighted empirical inner product Σ w_i f_i g_i."""
        return float(np.sum(self.weights * f * g))

    def with_targets(self, targets: np.ndarray) -> 'SampleSet':
        return SampleSet(self.inputs.copy(), targets, self.weights.copy())


@dataclass
class ErrorVector:
    """e = f* − f_θ on the sample points at time t."""
    values: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"error vector at t={self.timestamp} has non-finite entries")
        if self.timestamp < 0:
            raise ValueError(f"timestamp must be nonnegative, got {self.timestamp}")

    def loss(self, weights: np.ndarray) -> float:
        """½ Σ w_i e_i²."""
        return 0.5 * float(np.sum(weights * self.values ** 2))


@dataclass
class Trajectory:
    """Parameter history of a gradient-flow run."""
    spec: ModelSpec
    times: np.ndarray
    params: np.ndarray  # (steps + 1) × N
    losses: np.ndarray
    method: str = 'euler'
    loss_increases: int = 0

    @property
    def monotone(self) -> bool:
        return self.loss_increases == 0

    def state(self, index: int) -> NetworkState:
        return NetworkState(self.params[index].copy(), self.spec)

    def __len__(self) -> int:
        return len(self.times)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'tanh':
        return np.tanh(z)
    if activation == 'relu':
        return np.maximum(z, 0.0)
    return z


def _activate_grad(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'tanh':
        return 1.0 - np.tanh(z) ** 2
    if activation == 'relu':
        return (z > 0).astype(float)
    return np.ones_like(z)


@lru_cache(maxsize=32)
def _feature_map_weights(spec: ModelSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Frozen projection (W, b) of a random-features model, derived from the seed."""
    rng = np.random.default_rng([spec.seed, 1])
    W = rng.standard_normal((spec.feature_count, spec.input_dim))
    b = rng.uniform(-1.0, 1.0, spec.feature_count)
    return W, b


def feature_map(spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    """φ(x) of a random-features model, scaled by 1/√m."""
    W, b = _feature_map_weights(spec)
    return _activate(inputs @ W.T + b, spec.activation) / np.sqrt(spec.feature_count)


def init_network(spec: ModelSpec) -> NetworkState:
    """Draw initial parameters deterministically from ``spec.seed``.

    Entries are standard normal scaled by ``init_scale / sqrt(fan_in)`` of
    the layer they belong to (biases share their layer's scale).
    """
    rng = np.random.default_rng(spec.seed)
    chunks = []
    if spec.kind == 'random-features':
        chunks.append(rng.standard_normal(spec.feature_count) * spec.init_scale / np.sqrt(spec.feature_count))
    else:
        for fan_out, fan_in in spec.layer_shapes:
            scale = spec.init_scale / np.sqrt(fan_in)
            chunks.append(rng.standard_normal(fan_out * fan_in) * scale)
            chunks.append(rng.standard_normal(fan_out) * scale)
    params = np.concatenate(chunks)
    logger.debug(f"Initialized {spec.kind} with {params.size} parameters (seed {spec.seed})")
    return NetworkState(params, spec)


def _unpack(net: NetworkState) -> List[Tuple[np.ndarray, np.ndarray]]:
    layers = []
    offset = 0
    for fan_out, fan_in in net.spec.layer_shapes:
        W = net.params[offset:offset + fan_out * fan_in].reshape(fan_out, fan_in)
        offset += fan_out * fan_in
        b = net.params[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def _check_inputs(net: NetworkState, samples: SampleSet):
    if samples.input_dim != net.spec.input_dim:
        raise DimensionError(
            f"sample input dimension {samples.input_dim} != model input dimension {net.spec.input_dim}"
        )


def _mlp_pass(net: NetworkState, inputs: np.ndarray):
    """Forward pass keeping layer inputs and pre-activations for the chain rule."""
    layers = _unpack(net)
    hs, zs = [inputs], []
    h = inputs
    for i, (W, b) in enumerate(layers):
        z = h @ W.T + b
        zs.append(z)
        h = z if i == len(layers) - 1 else _activate(z, net.spec.activation)
        hs.append(h)
    return layers, hs, zs


def forward(net: NetworkState, samples: SampleSet) -> np.ndarray:
    """f_θ(x_i) for every sample point."""
    _check_inputs(net, samples)
    if net.spec.kind == 'random-features':
        return feature_map(net.spec, samples.inputs) @ net.params
    _, hs, _ = _mlp_pass(net, samples.inputs)
    return hs[-1][:, 0]


def jacobian(net: NetworkState, samples: SampleSet) -> np.ndarray:
    """n × N matrix with rows ∇_θ f_θ(x_i), by the layer-wise chain rule."""
    _check_inputs(net, samples)
    if net.spec.kind == 'random-features':
        return feature_map(net.spec, samples.inputs)

    layers, hs, zs = _mlp_pass(net, samples.inputs)
    n = samples.size
    blocks = []
    delta = np.ones((n, 1))  # df/dz of the output layer
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grad_W = np.einsum('io,ij->ioj', delta, hs[i]).reshape(n, -1)
        blocks.append(np.hstack([grad_W, delta]))
        if i > 0:
            delta = (delta @ W) * _activate_grad(zs[i - 1], net.spec.activation)
    return np.hstack(blocks[::-1])


def error_vector(net: NetworkState, samples: SampleSet, t: float = 0.0) -> ErrorVector:
    return ErrorVector(samples.targets - forward(net, samples), t)


def loss(net: NetworkState, samples: SampleSet) -> float:
    """L(θ) = ½ Σ w_i (f*(x_i) − f_θ(x_i))²."""
    e = samples.targets - forward(net, samples)
    return 0.5 * float(np.sum(samples.weights * e ** 2))


def loss_gradient(net: NetworkState, samples: SampleSet) -> np.ndarray:
    """∇_θ L = −Jᵀ (w ⊙ e)."""
    e = samples.targets - forward(net, samples)
    grad = -jacobian(net, samples).T @ (samples.weights * e)
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient encountered during gradient flow")
    return grad


def _velocity(params: np.ndarray, spec: ModelSpec, samples: SampleSet) -> np.ndarray:
    return -loss_gradient(NetworkState(params, spec), samples)


def gradient_flow_step(
    net: NetworkState,
    samples: SampleSet,
    dt: float,
    method: str = 'euler',
) -> Tuple[NetworkState, float]:
    """Advance θ by one step of dθ/dt = −∇L(θ).

    Args:
        net: Current state
        samples: Training sample set
        dt: Step size (a learning rate is a dt)
        method: 'euler' (default) or 'rk4'

    Returns:
        (new state, loss after the step)
    """
    if not dt > 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    if method not in INTEGRATORS:
        raise ConfigError(f"method must be one of {INTEGRATORS}, got {method!r}")

    theta = net.params
    if method == 'euler':
        new_theta = theta + dt * _velocity(theta, net.spec, samples)
    else:
        k1 = _velocity(theta, net.spec, samples)
        k2 = _velocity(theta + 0.5 * dt * k1, net.spec, samples)
        k3 = _velocity(theta + 0.5 * dt * k2, net.spec, samples)
        k4 = _velocity(theta + dt * k3, net.spec, samples)
        new_theta = theta + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

    if not np.all(np.isfinite(new_theta)):
        raise DivergenceError(f"parameters became non-finite (dt={dt})")
    new_net = NetworkState(new_theta, net.spec)
    return new_net, loss(new_net, samples)


def gradient_flow(
    net: NetworkState,
    samples: SampleSet,
    dts: Sequence[float],
    method: str = 'euler',
) -> Trajectory:
    """Run a whole dt sequence; learning-rate schedules are dt sequences.

    Loss increases beyond ``MONOTONE_TOL`` are counted, not raised.
    """
    dts = np.asarray(dts, dtype=float)
    params = np.empty((len(dts) + 1, net.params.size))
    losses = np.empty(len(dts) + 1)
    times = np.concatenate([[0.0], np.cumsum(dts)])
    params[0] = net.params
    losses[0] = loss(net, samples)
    increases = 0
    state = net
    for k, dt in enumerate(dts):
        state, losses[k + 1] = gradient_flow_step(state, samples, float(dt), method)
        params[k + 1] = state.params
        if losses[k + 1] > losses[k] + MONOTONE_TOL:
            increases += 1
    if increases:
        logger.warning(f"Loss increased on {increases} of {len(dts)} steps; dt may exceed the stability threshold")
    logger.debug(f"Gradient flow finished: {len(dts)} steps, final loss {losses[-1]:.3e}")
    return Trajectory(net.spec, times, params, losses, method, increases)
