"""Skip-connection tanh network (S-CNN) and its plain fully connected baseline.

A kernel-size-1 convolution over a length-1 sequence mixes channels exactly
like a dense layer, so every layer here is stored as a dense ``(W, b)`` pair.
Layer ``l`` (1-based, hidden layers only) receives the activation of layer
``l - n - 1`` inside its tanh when the skip distance ``n`` is non-zero.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"NPINNCK1"


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 2
    hidden_width: int = 26
    depth: int = 10
    skip_distance: int = 2
    init_std: float = 0.2
    seed: int = 0
    input_range: float = 1.0  # the problem box maps onto [-input_range, input_range]

    def __post_init__(self):
        if self.input_dim not in (2, 3):
            raise ValueError(f"input_dim must be 2 or 3, got {self.input_dim}")
        if self.depth < 3:
            raise ValueError(f"depth must be >= 3, got {self.depth}")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")
        if self.skip_distance not in (0, 2):
            raise ValueError(f"skip_distance must be 0 or 2, got {self.skip_distance}")
        if not self.init_std > 0:
            raise ValueError(f"init_std must be positive, got {self.init_std}")
        if not self.input_range > 0:
            raise ValueError(f"input_range must be positive, got {self.input_range}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) for every layer, input projection first."""
        w = self.hidden_width
        shapes = [(w, self.input_dim)]
        shapes += [(w, w)] * (self.depth - 2)
        shapes.append((1, w))
        return shapes

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def skip_source(self, layer: int) -> int | None:
        """1-based index of the layer feeding a skip into ``layer``, if any."""
        n = self.skip_distance
        if n == 0 or layer <= n + 1 or layer >= self.depth:
            return None
        return layer - n - 1


@dataclass
class Network:
    """Parameters of one network plus the fixed input scaling.

    ``in_center``/``in_scale`` map physical coordinates onto roughly
    ``[-1, 1]`` before the first layer: ``xhat = (x - center) * scale``.
    """

    config: NetworkConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    in_center: np.ndarray = field(default=None)
    in_scale: np.ndarray = field(default=None)

    def __post_init__(self):
        d = self.config.input_dim
        if self.in_center is None:
            self.in_center = np.zeros(d)
        if self.in_scale is None:
            self.in_scale = np.ones(d)
        self.in_center = np.asarray(self.in_center, dtype=np.float64)
        self.in_scale = np.asarray(self.in_scale, dtype=np.float64)

    @property
    def depth(self) -> int:
        return self.config.depth

    @property
    def n_params(self) -> int:
        return self.config.n_params

    def layer_slices(self) -> list[slice]:
        """Slices of the flat parameter vector owned by each layer."""
        out, start = [], 0
        for o, i in self.config.layer_shapes:
            out.append(slice(start, start + o * i + o))
            start += o * i + o
        return out

    def get_flat(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        for l, (sl, (o, i)) in enumerate(zip(self.layer_slices(), self.config.layer_shapes)):
            chunk = theta[sl]
            self.weights[l] = chunk[: o * i].reshape(o, i).copy()
            self.biases[l] = chunk[o * i :].copy()

    def copy(self) -> "Network":
        return Network(
            self.config,
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.in_center.copy(),
            self.in_scale.copy(),
        )

    def scale_inputs(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.config.input_dim:
            raise ValueError(
                f"point dimension {X.shape[1]} does not match network input {self.config.input_dim}"
            )
        return (X - self.in_center) * self.in_scale

    def activations(self, X: np.ndarray) -> list[np.ndarray]:
        """Plain forward pass returning the output of every layer (1-based list index - 1)."""
        z = [self.scale_inputs(X)]
        L = self.depth
        for l in range(1, L + 1):
            W, b = self.weights[l - 1], self.biases[l - 1]
            u = z[l - 1] @ W.T + b
            src = self.config.skip_source(l)
            if src is not None:
                u = u + z[src]
            z.append(u if l == L else np.tanh(u))
        return z[1:]

    def forward(self, X: np.ndarray) -> np.ndarray:
        """Scalar flux prediction at each row of ``X``."""
        return self.activations(X)[-1][:, 0]

    __call__ = forward


def set_input_box(net: Network, lo, hi, half: float | None = None) -> Network:
    """Scale inputs so that the box ``[lo, hi]`` maps onto ``[-half, half]``.

    ``half`` defaults to ``net.config.input_range``.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("degenerate input box")
    net.in_center = 0.5 * (lo + hi)
    half = net.config.input_range if half is None else half
    net.in_scale = 2.0 * half / (hi - lo)
    return net


def init_gaussian(cfg: NetworkConfig, box=None, bias_std: float = 0.0) -> Network:
    """Gaussian N(0, std^2) weights, zero biases by default, reproducible from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    weights, biases = [], []
    for o, i in cfg.layer_shapes:
        weights.append(rng.normal(0.0, cfg.init_std, size=(o, i)))
        if bias_std > 0:
            biases.append(rng.normal(0.0, bias_std, size=o))
        else:
            biases.append(np.zeros(o))
    net = Network(cfg, weights, biases)
    if box is not None:
        set_input_box(net, *box)
    return net


@dataclass
class GradientReport:
    norms: np.ndarray  # one Euclidean norm per layer, input projection first

    def __len__(self):
        return len(self.norms)


def gradient_norm_report(net: Network, loss_fn) -> GradientReport:
    """Per-layer ``sqrt(sum g_i^2)`` of the loss gradient (weights and bias together)."""
    from .autodiff import loss_param_gradient

    _, g = loss_param_gradient(net, loss_fn)
    return GradientReport(np.array([np.linalg.norm(g[sl]) for sl in net.layer_slices()]))


def save_checkpoint(net: Network, path_or_buf) -> None:
    """Versioned binary checkpoint: magic, JSON header length + header, float64 LE arrays."""
    header = {
        "format": CHECKPOINT_MAGIC.decode(),
        "config": asdict(net.config),
        "layers": [list(s) for s in net.config.layer_shapes],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(net.in_center.astype("<f8").tobytes())
    buf.write(net.in_scale.astype("<f8").tobytes())
    for W, b in zip(net.weights, net.biases):
        buf.write(np.ascontiguousarray(W).astype("<f8").tobytes())
        buf.write(b.astype("<f8").tobytes())
    data = buf.getvalue()
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(data)
    else:
        with open(path_or_buf, "wb") as fh:
            fh.write(data)


def load_checkpoint(path_or_buf) -> Network:
    if hasattr(path_or_buf, "read"):
        data = path_or_buf.read()
    else:
        with open(path_or_buf, "rb") as fh:
            data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a network checkpoint")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + n])
    cfg = NetworkConfig(**header["config"])
    pos = 12 + n
    d = cfg.input_dim

    def take(count):
        nonlocal pos
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        return arr

    center, scale = take(d), take(d)
    weights, biases = [], []
    for o, i in cfg.layer_shapes:
        weights.append(take(o * i).reshape(o, i))
        biases.append(take(o))
    return Network(cfg, weights, biases, center, scale)
