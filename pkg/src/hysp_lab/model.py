"""Twin-branch network: graph encoder, projector, online-only predictor, EMA target."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InvalidInput, ShapeError

# head, torso, l_elbow, l_hand, r_elbow, r_hand, l_foot, r_foot
DEFAULT_EDGES = ((0, 1), (1, 2), (2, 3), (1, 4), (4, 5), (1, 6), (1, 7))
DEFAULT_MIRROR = (0, 1, 4, 5, 2, 3, 7, 6)


@dataclass(frozen=True)
class SkeletonGraph:
    num_joints: int
    edges: tuple[tuple[int, int], ...]
    mirror: tuple[int, ...]
    adjacency: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        v = self.num_joints
        if sorted(self.mirror) != list(range(v)):
            raise InvalidInput("mirror map must be a permutation of the joints")
        a = np.eye(v)
        for i, j in self.edges:
            if not (0 <= i < v and 0 <= j < v) or i == j:
                raise InvalidInput(f"bad edge ({i}, {j}) for {v} joints")
            a[i, j] = a[j, i] = 1.0
        # dividing by the largest degree keeps the matrix symmetric with row sums <= 1
        object.__setattr__(self, "adjacency", a / a.sum(axis=1).max())


def default_skeleton() -> SkeletonGraph:
    return SkeletonGraph(8, DEFAULT_EDGES, DEFAULT_MIRROR)


@dataclass
class ModelConfig:
    embed_dim: int = 64
    hidden: int = 32
    blocks: int = 2
    kernel: int = 3
    use_predictor: bool = True
    boundary_init_scale: float = 1.0
    head_norm: str = "batch"  # "none" gives bias-only heads
    # fixed input normalisation: "root" subtracts joint root_joint per frame,
    # "temporal" subtracts each joint's mean position; then divide by input_scale
    input_center: str = "root"
    root_joint: int = 1
    input_scale: float = 1.0


def block_widths(cfg: ModelConfig) -> list[int]:
    if cfg.blocks < 1:
        raise InvalidInput("encoder needs at least one block")
    return [cfg.hidden] * (cfg.blocks - 1) + [cfg.embed_dim]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(rng: np.random.Generator, cfg: ModelConfig, in_channels: int = 3) -> dict[str, np.ndarray]:
    params = {}
    c_in = in_channels
    for i, width in enumerate(block_widths(cfg)):
        p = f"encoder.block{i}"
        params[f"{p}.mix.w"] = _uniform(rng, c_in, (c_in, width))
        params[f"{p}.mix.b"] = _uniform(rng, c_in, (width,))
        fan = cfg.kernel * width
        params[f"{p}.tconv.w"] = _uniform(rng, fan, (cfg.kernel, width, width))
        params[f"{p}.tconv.b"] = _uniform(rng, fan, (width,))
        c_in = width
    return params


def init_head(rng: np.random.Generator, prefix: str, dim: int, out_scale: float = 1.0,
              norm: str = "none") -> dict[str, np.ndarray]:
    params = {
        f"{prefix}.fc1.w": _uniform(rng, dim, (dim, dim)),
        f"{prefix}.fc1.b": _uniform(rng, dim, (dim,)),
        f"{prefix}.fc2.w": _uniform(rng, dim, (dim, dim)) * out_scale,
        f"{prefix}.fc2.b": _uniform(rng, dim, (dim,)) * out_scale,
    }
    if norm == "batch":
        params[f"{prefix}.bn.gamma"] = np.ones(dim)
        params[f"{prefix}.bn.beta"] = np.zeros(dim)
    return params


INPUT_CENTERING = ("none", "root", "temporal")


def normalize_input(x: np.ndarray, center: str = "none", root_joint: int = 1, scale: float = 1.0) -> np.ndarray:
    """Centre ``(N, 3, T, V)`` coordinates and express them in units of ``scale``."""
    if center == "root":
        x = x - x[:, :, :, root_joint : root_joint + 1]
    elif center == "temporal":
        x = x - x.mean(axis=2, keepdims=True)
    elif center != "none":
        raise InvalidInput(f"unknown input centering {center!r}")
    return x / scale if scale != 1.0 else x


def encoder_forward(x, params, graph: SkeletonGraph, n_blocks: int, center: str = "none", root_joint: int = 1,
                    input_scale: float = 1.0) -> ad.Tensor:
    """Encode a batch ``(N, 3, T, V)`` into features ``(N, D)``.

    After the fixed input normalisation, each block does adjacency
    aggregation, 1x1 channel mix, ReLU, temporal convolution, ReLU.
    Features are mean-pooled over frames and joints.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected input (N, 3, T, V), got {x.shape}")
    if x.shape[3] != graph.num_joints:
        raise ShapeError(f"input has {x.shape[3]} joints, graph has {graph.num_joints}")
    x = normalize_input(x, center, root_joint, input_scale)
    out = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    for i in range(n_blocks):
        p = f"encoder.block{i}"
        out = ad.graph_agg(out, graph.adjacency)
        out = ad.relu(ad.add(ad.matmul(out, params[f"{p}.mix.w"]), params[f"{p}.mix.b"]))
        out = ad.relu(ad.conv_time(out, params[f"{p}.tconv.w"], params[f"{p}.tconv.b"]))
    return ad.mean(out, axis=(1, 2))


def head_forward(y, params, prefix: str) -> ad.Tensor:
    """Linear, (batch norm,) ReLU, linear.

    Batch normalisation is used when the head carries ``bn`` parameters; it
    always normalises with the statistics of the batch it is given.
    """
    w1 = params[f"{prefix}.fc1.w"]
    if ad._data(y).shape[-1] != ad._data(w1).shape[0]:
        raise ShapeError(f"{prefix}: input dim {ad._data(y).shape[-1]} != {ad._data(w1).shape[0]}")
    hidden = ad.add(ad.matmul(y, w1), params[f"{prefix}.fc1.b"])
    if f"{prefix}.bn.gamma" in params:
        hidden = ad.batch_norm(hidden, params[f"{prefix}.bn.gamma"], params[f"{prefix}.bn.beta"])
    hidden = ad.relu(hidden)
    return ad.add(ad.matmul(hidden, params[f"{prefix}.fc2.w"]), params[f"{prefix}.fc2.b"])


@dataclass
class TwinModel:
    online: dict[str, np.ndarray]
    target: dict[str, np.ndarray]
    config: ModelConfig
    graph: SkeletonGraph
    ema_coefficient: float = 0.99

    @classmethod
    def initialize(cls, rng: np.random.Generator, config: ModelConfig, graph: SkeletonGraph | None = None,
                   ema_coefficient: float = 0.99) -> "TwinModel":
        graph = graph or default_skeleton()
        if config.input_scale <= 0:
            raise InvalidInput("input_scale must be positive")
        if config.head_norm not in ("none", "batch"):
            raise InvalidInput(f"head_norm must be 'none' or 'batch', got {config.head_norm!r}")
        if config.input_center not in INPUT_CENTERING:
            raise InvalidInput(f"input_center must be one of {INPUT_CENTERING}")
        if not 0 <= config.root_joint < graph.num_joints:
            raise InvalidInput(f"root_joint {config.root_joint} outside the {graph.num_joints}-joint graph")
        d = config.embed_dim
        online = init_encoder(rng, config)
        online.update(init_head(rng, "projector", d, config.boundary_init_scale, config.head_norm))
        if config.use_predictor:
            online.update(init_head(rng, "predictor", d, config.boundary_init_scale, config.head_norm))
        target = {k: v.copy() for k, v in online.items() if not k.startswith("predictor.")}
        return cls(online, target, config, graph, ema_coefficient)

    def copy(self) -> "TwinModel":
        return copy.deepcopy(self)

    def online_tensors(self) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in self.online.items()}

    def embed_online(self, x, params=None) -> ad.Tensor:
        """Pre-map online output ``q(g(f(x)))`` (or ``g(f(x))`` without a predictor)."""
        params = self.online if params is None else params
        z = head_forward(self.encode(x, params), params, "projector")
        if self.config.use_predictor:
            z = head_forward(z, params, "predictor")
        return z

    def embed_target(self, x) -> np.ndarray:
        """Pre-map target output, evaluated without recording gradients."""
        with ad.no_grad():
            return head_forward(self.encode(x, self.target), self.target, "projector").data

    def encode(self, x, params=None) -> ad.Tensor:
        params = self.online if params is None else params
        cfg = self.config
        return encoder_forward(x, params, self.graph, cfg.blocks, cfg.input_center, cfg.root_joint,
                              cfg.input_scale)


def ema_update(twin: TwinModel) -> None:
    """Move every target parameter toward its online counterpart, in place."""
    a = twin.ema_coefficient
    for name, value in twin.target.items():
        online = twin.online[name]
        if online.shape != value.shape:
            raise ShapeError(f"{name}: target {value.shape} vs online {online.shape}")
        twin.target[name] = a * value + (1.0 - a) * online


def twin_forward(x, x_hat, twin: TwinModel, c: float = 1.0, params=None) -> tuple[ad.Tensor, np.ndarray]:
    """Map both branches into the ball: ``h`` (differentiable) and ``h_hat`` (constant)."""
    if np.shape(x)[0] != np.shape(x_hat)[0]:
        raise ShapeError(f"view batches differ: {np.shape(x)} vs {np.shape(x_hat)}")
    h = ad.exp_map0(twin.embed_online(x, params), c)
    with ad.no_grad():
        h_hat = ad.exp_map0(twin.embed_target(x_hat), c).data
    return h, h_hat
