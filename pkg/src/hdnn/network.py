"""Plain and highway feedforward acoustic models.

Layer 1 always projects the spliced input to the hidden width and is a
plain sigmoid layer. In a highway network every later hidden layer mixes
its transformed activations with the carried input through two sigmoid
gates:

    h_l = sigmoid(W_l h_{l-1} + b_l) * T(h_{l-1}) + h_{l-1} * C(h_{l-1})

The transform gate T and carry gate C are bias-free and share one
parameter matrix each across all layers (structural tying: every layer
multiplies by the same array object). The output layer is affine with a
temperature softmax on top.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, STORAGE_DTYPE, matmul, sigmoid, softmax_with_temperature

PLAIN = "plain"
HIGHWAY = "highway"

INIT_LO = -0.5
INIT_HI = 0.5


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture description: dims, depth and plain/highway switch.

    ``num_hidden_layers`` counts the input projection as hidden layer 1,
    so depth L means one input_dim->H layer followed by L-1 HxH layers.
    """

    input_dim: int
    hidden_dim: int
    num_hidden_layers: int
    output_dim: int
    architecture: str = HIGHWAY

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "num_hidden_layers", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.architecture not in (PLAIN, HIGHWAY):
            raise ValueError(f"unknown architecture {self.architecture!r}")

    @property
    def is_highway(self) -> bool:
        return self.architecture == HIGHWAY


@dataclass
class Network:
    """Parameter container; gate matrices present only for highway nets."""

    config: NetworkConfig
    hidden_weights: list[np.ndarray]   # [H x input_dim, then (L-1) x (H x H)]
    hidden_biases: list[np.ndarray]    # L vectors of dim H
    gate_transform: np.ndarray | None  # H x H, tied across layers, no bias
    gate_carry: np.ndarray | None      # H x H, tied across layers, no bias
    output_weight: np.ndarray          # output_dim x H
    output_bias: np.ndarray            # output_dim

    @property
    def dtype(self):
        return self.hidden_weights[0].dtype

    def copy(self) -> "Network":
        return Network(
            config=self.config,
            hidden_weights=[w.copy() for w in self.hidden_weights],
            hidden_biases=[b.copy() for b in self.hidden_biases],
            gate_transform=None if self.gate_transform is None else self.gate_transform.copy(),
            gate_carry=None if self.gate_carry is None else self.gate_carry.copy(),
            output_weight=self.output_weight.copy(),
            output_bias=self.output_bias.copy(),
        )


@dataclass
class ForwardTrace:
    """Everything the backward pass needs from one forward evaluation.

    Per-layer lists are indexed 0..L-1; gate entries are None for layer 1
    and for plain networks. ``hidden`` holds the post-gating activations,
    ``transformed`` the sigmoid outputs before gating (identical for
    plain layers).
    """

    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    transformed: list[np.ndarray]
    gate_transform_acts: list[np.ndarray | None]
    gate_carry_acts: list[np.ndarray | None]
    hidden: list[np.ndarray]
    logits: np.ndarray
    posteriors: np.ndarray
    temperature: float

    @property
    def num_frames(self) -> int:
        return self.inputs.shape[0]


@dataclass
class GradientSet:
    """Gradient buffers shape-congruent with a Network's parameters.

    Gate buffers hold the sum over all layers sharing the tied matrices.
    """

    hidden_weights: list[np.ndarray]
    hidden_biases: list[np.ndarray]
    gate_transform: np.ndarray | None
    gate_carry: np.ndarray | None
    output_weight: np.ndarray
    output_bias: np.ndarray


def param_shapes(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) listing of every parameter tensor."""
    h, l = config.hidden_dim, config.num_hidden_layers
    shapes: list[tuple[str, tuple[int, ...]]] = []
    prev = config.input_dim
    for i in range(l):
        shapes.append((f"hidden_weights/{i}", (h, prev)))
        shapes.append((f"hidden_biases/{i}", (h,)))
        prev = h
    if config.is_highway:
        shapes.append(("gate_transform", (h, h)))
        shapes.append(("gate_carry", (h, h)))
    shapes.append(("output_weight", (config.output_dim, h)))
    shapes.append(("output_bias", (config.output_dim,)))
    return shapes


def count_params(config: NetworkConfig) -> int:
    """Total trainable parameter count, in closed form."""
    d, h, l, out = config.input_dim, config.hidden_dim, config.num_hidden_layers, config.output_dim
    n = d * h + h + (l - 1) * (h * h + h) + h * out + out
    if config.is_highway:
        n += 2 * h * h
    return n


def build(config: NetworkConfig, rng: Rng, dtype=STORAGE_DTYPE) -> Network:
    """Fresh network: weights uniform in [-0.5, 0.5), biases zero.

    Every tensor draws from its own named substream, so the same seed
    reproduces the same parameters bit-exactly and deeper configs leave
    shallower layers' draws untouched.
    """
    from .numerics import uniform_init

    h = config.hidden_dim
    weights, biases = [], []
    prev = config.input_dim
    for i in range(config.num_hidden_layers):
        weights.append(uniform_init(h, prev, INIT_LO, INIT_HI,
                                    rng.stream(f"hidden_weights/{i}"), dtype))
        biases.append(np.zeros(h, dtype=dtype))
        prev = h
    gate_t = gate_c = None
    if config.is_highway:
        gate_t = uniform_init(h, h, INIT_LO, INIT_HI, rng.stream("gate_transform"), dtype)
        gate_c = uniform_init(h, h, INIT_LO, INIT_HI, rng.stream("gate_carry"), dtype)
    out_w = uniform_init(config.output_dim, h, INIT_LO, INIT_HI,
                         rng.stream("output_weight"), dtype)
    out_b = np.zeros(config.output_dim, dtype=dtype)
    return Network(config, weights, biases, gate_t, gate_c, out_w, out_b)


def _check_features(net: Network, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.config.input_dim:
        raise ValueError(
            f"features must be N x {net.config.input_dim}, got {x.shape}")
    return x


def forward(net: Network, features: np.ndarray, temperature: float = 1.0) -> ForwardTrace:
    """Run the network over a batch of frames (rows)."""
    x = _check_features(net, features)
    cfg = net.config
    pre, transformed, t_acts, c_acts, hidden = [], [], [], [], []
    h = x
    for i in range(cfg.num_hidden_layers):
        z = matmul(h, net.hidden_weights[i].T) + np.asarray(net.hidden_biases[i], dtype=np.float64)
        a = sigmoid(z)
        if cfg.is_highway and i > 0:
            t = sigmoid(matmul(h, net.gate_transform.T))
            c = sigmoid(matmul(h, net.gate_carry.T))
            h_next = a * t + h * c
        else:
            t = c = None
            h_next = a
        pre.append(z)
        transformed.append(a)
        t_acts.append(t)
        c_acts.append(c)
        hidden.append(h_next)
        h = h_next
    logits = matmul(h, net.output_weight.T) + np.asarray(net.output_bias, dtype=np.float64)
    posteriors = softmax_with_temperature(logits, temperature)
    return ForwardTrace(x, pre, transformed, t_acts, c_acts, hidden, logits,
                        posteriors, float(temperature))


@dataclass
class PackedGates:
    """Per-layer stacked [W_l; W_T; W_c] matrices for layers 2..L.

    Layer 1 cannot be packed (its weight is H x input_dim while the gates
    are H x H) and is listed in ``unpacked_layers``.
    """

    hidden_dim: int
    layer_indices: list[int] = field(default_factory=list)  # 1-based, 2..L
    matrices: list[np.ndarray] = field(default_factory=list)  # each 3H x H
    unpacked_layers: list[int] = field(default_factory=lambda: [1])


def pack_gates(net: Network) -> PackedGates:
    """Stack each layer's weight with the tied gate matrices for fused multiplies."""
    if not net.config.is_highway:
        raise ValueError("pack_gates requires a highway network")
    packed = PackedGates(hidden_dim=net.config.hidden_dim)
    for i in range(1, net.config.num_hidden_layers):
        packed.layer_indices.append(i + 1)
        packed.matrices.append(
            np.vstack([net.hidden_weights[i], net.gate_transform, net.gate_carry]))
    return packed


def forward_packed(net: Network, features: np.ndarray, temperature: float = 1.0,
                   packed: PackedGates | None = None) -> ForwardTrace:
    """Forward pass using one fused multiply per highway layer.

    Produces the same trace as :func:`forward`; layer 1 and the output
    layer are computed unpacked.
    """
    if packed is None:
        packed = pack_gates(net)
    x = _check_features(net, features)
    cfg = net.config
    hdim = cfg.hidden_dim
    pre, transformed, t_acts, c_acts, hidden = [], [], [], [], []

    z = matmul(x, net.hidden_weights[0].T) + np.asarray(net.hidden_biases[0], dtype=np.float64)
    a = sigmoid(z)
    pre.append(z)
    transformed.append(a)
    t_acts.append(None)
    c_acts.append(None)
    hidden.append(a)
    h = a
    for i, w_packed in zip(range(1, cfg.num_hidden_layers), packed.matrices):
        fused = matmul(h, w_packed.T)  # N x 3H: transform block, T block, C block
        z = fused[:, :hdim] + np.asarray(net.hidden_biases[i], dtype=np.float64)
        a = sigmoid(z)
        t = sigmoid(fused[:, hdim:2 * hdim])
        c = sigmoid(fused[:, 2 * hdim:])
        h_next = a * t + h * c
        pre.append(z)
        transformed.append(a)
        t_acts.append(t)
        c_acts.append(c)
        hidden.append(h_next)
        h = h_next
    logits = matmul(h, net.output_weight.T) + np.asarray(net.output_bias, dtype=np.float64)
    posteriors = softmax_with_temperature(logits, temperature)
    return ForwardTrace(x, pre, transformed, t_acts, c_acts, hidden, logits,
                        posteriors, float(temperature))


def zero_gradients(net: Network) -> GradientSet:
    return GradientSet(
        hidden_weights=[np.zeros_like(w, dtype=np.float64) for w in net.hidden_weights],
        hidden_biases=[np.zeros_like(b, dtype=np.float64) for b in net.hidden_biases],
        gate_transform=None if net.gate_transform is None else np.zeros_like(net.gate_transform, dtype=np.float64),
        gate_carry=None if net.gate_carry is None else np.zeros_like(net.gate_carry, dtype=np.float64),
        output_weight=np.zeros_like(net.output_weight, dtype=np.float64),
        output_bias=np.zeros_like(net.output_bias, dtype=np.float64),
    )


def backward(net: Network, trace: ForwardTrace, dloss_dlogits: np.ndarray) -> GradientSet:
    """Exact reverse-mode gradients of the forward map.

    ``dloss_dlogits`` is the loss gradient at the logits (before softmax);
    the loss functions in :mod:`hdnn.losses` produce it. Highway layers
    propagate through all three paths: the transformed signal, both gates,
    and the direct carry skip. Tied gate gradients are accumulated over
    layers in a fixed order.
    """
    cfg = net.config
    d = np.asarray(dloss_dlogits, dtype=np.float64)
    if d.shape != trace.logits.shape:
        raise ValueError(
            f"dloss_dlogits shape {d.shape} does not match logits {trace.logits.shape}")
    grads = zero_gradients(net)

    h_last = trace.hidden[-1]
    grads.output_weight[...] = matmul(d.T, h_last)
    grads.output_bias[...] = d.sum(axis=0, dtype=np.float64)
    dh = matmul(d, net.output_weight)

    for i in range(cfg.num_hidden_layers - 1, -1, -1):
        h_prev = trace.inputs if i == 0 else trace.hidden[i - 1]
        a = trace.transformed[i]
        if cfg.is_highway and i > 0:
            t = trace.gate_transform_acts[i]
            c = trace.gate_carry_acts[i]
            dz = dh * t * a * (1.0 - a)
            du = dh * a * t * (1.0 - t)
            dv = dh * h_prev * c * (1.0 - c)
            grads.hidden_weights[i][...] = matmul(dz.T, h_prev)
            grads.hidden_biases[i][...] = dz.sum(axis=0, dtype=np.float64)
            grads.gate_transform += matmul(du.T, h_prev)
            grads.gate_carry += matmul(dv.T, h_prev)
            dh = (matmul(dz, net.hidden_weights[i])
                  + matmul(du, net.gate_transform)
                  + matmul(dv, net.gate_carry)
                  + dh * c)
        else:
            dz = dh * a * (1.0 - a)
            grads.hidden_weights[i][...] = matmul(dz.T, h_prev)
            grads.hidden_biases[i][...] = dz.sum(axis=0, dtype=np.float64)
            if i > 0:
                dh = matmul(dz, net.hidden_weights[i])
    return grads


def iter_params(net: Network):
    """Yield (name, array) over parameter tensors in canonical order.

    The arrays are the network's own buffers, so in-place writes through
    them update the network (used by the optimizer and serialization).
    """
    for i, w in enumerate(net.hidden_weights):
        yield f"hidden_weights/{i}", w
    for i, b in enumerate(net.hidden_biases):
        yield f"hidden_biases/{i}", b
    if net.config.is_highway:
        yield "gate_transform", net.gate_transform
        yield "gate_carry", net.gate_carry
    yield "output_weight", net.output_weight
    yield "output_bias", net.output_bias


def iter_gradients(grads: GradientSet):
    """Same ordering as :func:`iter_params` over a gradient set."""
    for i, w in enumerate(grads.hidden_weights):
        yield f"hidden_weights/{i}", w
    for i, b in enumerate(grads.hidden_biases):
        yield f"hidden_biases/{i}", b
    if grads.gate_transform is not None:
        yield "gate_transform", grads.gate_transform
        yield "gate_carry", grads.gate_carry
    yield "output_weight", grads.output_weight
    yield "output_bias", grads.output_bias


GATE_PARAM_NAMES = ("gate_transform", "gate_carry")


def param_partition(net: Network) -> dict[str, dict[str, np.ndarray]]:
    """Split parameters into the tied gate pair and everything else.

    The returned arrays are references into the network, so the partition
    can drive scoped updates. The two groups are disjoint and together
    cover every tensor.
    """
    gates: dict[str, np.ndarray] = {}
    rest: dict[str, np.ndarray] = {}
    for name, arr in iter_params(net):
        (gates if name in GATE_PARAM_NAMES else rest)[name] = arr
    return {"gates": gates, "rest": rest}
