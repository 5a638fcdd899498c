"""Fully-connected ReLU networks: parameters, forward passes, activation
patterns, and exact per-region gradients.

A network with hidden widths (n_1, ..., n_L) maps an input x of dimension p
through z = b + W h recursions with ReLU in between and a linear readout
f = beta0 + beta @ h_L.  Everything here is float64 and pure; parameter and
pattern objects are immutable after construction.

Layers and node indices are 0-based throughout the code; reports and CSV
output label layers 1..L for readability.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

__all__ = [
    "ArchSpec",
    "ParamDistribution",
    "NetworkParams",
    "ForwardState",
    "ActivationPattern",
    "WeightFileError",
    "generate_params",
    "forward",
    "activation_pattern",
    "gradient_of_region",
    "gradient_pathsum_oracle",
    "flip_gradient_diff",
    "flip_norms",
    "save_params",
    "load_params",
    "weight_histogram",
]


class WeightFileError(ValueError):
    """Raised when a weight file is malformed or internally inconsistent."""


@dataclass(frozen=True)
class ArchSpec:
    """Network architecture: input dimension, hidden widths, output count."""

    input_dim: int
    hidden_widths: tuple
    output_count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if len(self.hidden_widths) < 1:
            raise ValueError("need at least one hidden layer")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden_widths}")
        if self.output_count < 1:
            raise ValueError(f"output_count must be >= 1, got {self.output_count}")

    @property
    def depth(self) -> int:
        """Number of hidden layers L."""
        return len(self.hidden_widths)

    @property
    def total_nodes(self) -> int:
        return sum(self.hidden_widths)

    def parameter_count(self) -> int:
        fan_ins = (self.input_dim,) + self.hidden_widths[:-1]
        n = sum(w * (f + 1) for w, f in zip(self.hidden_widths, fan_ins))
        return n + self.output_count * (1 + self.hidden_widths[-1])


@dataclass(frozen=True)
class ParamDistribution:
    """Symmetric bounded parameter distribution on [-tau, tau].

    kind is "truncated-gaussian" (mean-0 Gaussian with the given
    pre-truncation variance, truncated to [-tau, tau]) or "uniform".
    """

    kind: str = "truncated-gaussian"
    tau: float = 1.0
    variance: float = 1.0

    def __post_init__(self):
        if self.kind not in ("truncated-gaussian", "uniform"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if not (self.tau > 0):
            raise ValueError("tau must be positive")
        if self.kind == "truncated-gaussian" and not (self.variance > 0):
            raise ValueError("variance must be positive")

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        """Map iid Uniform(0,1) draws to this distribution via the inverse CDF.

        Inverse-CDF sampling keeps the draw order identical to the uniform
        stream, which is what makes seeds portable.
        """
        if self.kind == "uniform":
            return self.tau * (2.0 * u - 1.0)
        sigma = math.sqrt(self.variance)
        lo = ndtr(-self.tau / sigma)
        hi = ndtr(self.tau / sigma)
        x = sigma * ndtri(lo + u * (hi - lo))
        # inverse CDF can overshoot the bound by one ulp at u ~ 0 or 1
        return np.clip(x, -self.tau, self.tau)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class NetworkParams:
    """All weights and biases of a network plus the linear readout.

    weights[l] has shape (n_{l+1 in 1-based}, fan_in): row j feeds node j of
    that layer.  beta0 has shape (K,), beta has shape (K, n_L).
    """

    arch: ArchSpec
    weights: tuple
    biases: tuple
    beta0: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(_freeze(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_freeze(b) for b in self.biases))
        object.__setattr__(self, "beta0", _freeze(np.atleast_1d(self.beta0)))
        object.__setattr__(self, "beta", _freeze(np.atleast_2d(self.beta)))
        arch = self.arch
        fan_ins = (arch.input_dim,) + arch.hidden_widths[:-1]
        if len(self.weights) != arch.depth or len(self.biases) != arch.depth:
            raise ValueError("layer count does not match architecture")
        for l, (w, b, n, f) in enumerate(zip(self.weights, self.biases, arch.hidden_widths, fan_ins)):
            if w.shape != (n, f):
                raise ValueError(f"layer {l}: weight shape {w.shape} != ({n}, {f})")
            if b.shape != (n,):
                raise ValueError(f"layer {l}: bias shape {b.shape} != ({n},)")
        if self.beta0.shape != (arch.output_count,):
            raise ValueError(f"beta0 shape {self.beta0.shape} != ({arch.output_count},)")
        if self.beta.shape != (arch.output_count, arch.hidden_widths[-1]):
            raise ValueError(
                f"beta shape {self.beta.shape} != ({arch.output_count}, {arch.hidden_widths[-1]})"
            )
        for name, arrs in (("weights", self.weights), ("biases", self.biases),
                           ("beta0", (self.beta0,)), ("beta", (self.beta,))):
            if any(not np.all(np.isfinite(a)) for a in arrs):
                raise ValueError(f"non-finite value in {name}")

    def all_values(self) -> np.ndarray:
        """Every parameter as a flat vector (weights, biases, readout)."""
        parts = [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        parts += [self.beta0.ravel(), self.beta.ravel()]
        return np.concatenate(parts)

    def equals(self, other: "NetworkParams") -> bool:
        """Bit-exact equality of architecture and every parameter."""
        if self.arch != other.arch:
            return False
        same = all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
        same = same and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        return same and np.array_equal(self.beta0, other.beta0) and np.array_equal(self.beta, other.beta)


@dataclass(frozen=True)
class ForwardState:
    """One exact forward evaluation: input, preactivations, activations, output."""

    x: np.ndarray
    preactivations: tuple
    activations: tuple
    output: np.ndarray


@dataclass(frozen=True)
class ActivationPattern:
    """Per-node binary indicators I(z >= 0), one uint8 vector per layer."""

    bits: tuple

    def __post_init__(self):
        frozen = []
        for b in self.bits:
            a = np.asarray(b)
            if a.size and not np.isin(a, (0, 1)).all():
                raise ValueError("pattern entries must be 0 or 1")
            a = np.ascontiguousarray(a, dtype=np.uint8)
            a.flags.writeable = False
            frozen.append(a)
        object.__setattr__(self, "bits", tuple(frozen))

    def key(self) -> bytes:
        """Hashable fingerprint for region-set bookkeeping."""
        return b"".join(np.packbits(b).tobytes() for b in self.bits)

    def __eq__(self, other):
        return isinstance(other, ActivationPattern) and len(self.bits) == len(other.bits) \
            and all(np.array_equal(a, b) for a, b in zip(self.bits, other.bits))

    def __hash__(self):
        return hash(self.key())

    def flip(self, layer: int, index: int) -> "ActivationPattern":
        """New pattern with the bit of node (layer, index) inverted."""
        bits = [b.copy() for b in self.bits]
        bits[layer][index] ^= 1
        return ActivationPattern(tuple(bits))

    def layer_widths(self) -> tuple:
        return tuple(len(b) for b in self.bits)


def _check_pattern(params: NetworkParams, pattern: ActivationPattern):
    if pattern.layer_widths() != params.arch.hidden_widths:
        raise ValueError(
            f"pattern widths {pattern.layer_widths()} do not match "
            f"architecture {params.arch.hidden_widths}"
        )


def _readout_row(params: NetworkParams, output):
    """Resolve an output selector into (intercept, coefficient row).

    output is an output index, or a pair (k, k2) meaning the class-score
    difference f_k - f_k2 (its gradient is obtained by differencing the
    readout rows before the backward sweep).
    """
    K = params.arch.output_count
    if isinstance(output, (tuple, list)):
        k, k2 = output
        if not (0 <= k < K and 0 <= k2 < K):
            raise ValueError(f"output pair {output} out of range for {K} outputs")
        return params.beta0[k] - params.beta0[k2], params.beta[k] - params.beta[k2]
    k = int(output)
    if not (0 <= k < K):
        raise ValueError(f"output index {k} out of range for {K} outputs")
    return params.beta0[k], params.beta[k]


def generate_params(arch: ArchSpec, dist: ParamDistribution, seed: int) -> NetworkParams:
    """Draw every weight, bias, and readout coefficient iid from dist.

    Deterministic in (arch, dist, seed).  Draw order is fixed: layers in
    order, within a layer node-major with each node's bias preceding its
    fan-in weights, then the readout intercepts followed by the readout
    rows.
    """
    rng = np.random.default_rng(seed)
    u = rng.random(arch.parameter_count())
    values = dist.from_uniform(u)

    pos = 0
    weights, biases = [], []
    fan_in = arch.input_dim
    for n in arch.hidden_widths:
        block = values[pos:pos + n * (1 + fan_in)].reshape(n, 1 + fan_in)
        pos += n * (1 + fan_in)
        biases.append(block[:, 0].copy())
        weights.append(block[:, 1:].copy())
        fan_in = n
    K = arch.output_count
    beta0 = values[pos:pos + K].copy()
    pos += K
    beta = values[pos:pos + K * fan_in].reshape(K, fan_in).copy()
    return NetworkParams(arch, tuple(weights), tuple(biases), beta0, beta)


def forward(params: NetworkParams, x) -> ForwardState:
    """Exact evaluation of the defining recursion at a single point."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.arch.input_dim,):
        raise ValueError(f"input shape {x.shape} != ({params.arch.input_dim},)")
    zs, hs = [], []
    h = x
    for w, b in zip(params.weights, params.biases):
        z = b + w @ h
        h = np.maximum(z, 0.0)
        zs.append(z)
        hs.append(h)
    out = params.beta0 + params.beta @ h
    return ForwardState(x=_freeze(x.copy()), preactivations=tuple(map(_freeze, zs)),
                        activations=tuple(map(_freeze, hs)), output=_freeze(out))


def forward_batch(params: NetworkParams, X: np.ndarray) -> tuple:
    """Vectorized forward over rows of X; returns (top preactivations, outputs).

    Used by feature extraction and grid region counting where only the top
    layer and the readout are needed.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.arch.input_dim:
        raise ValueError(f"expected (N, {params.arch.input_dim}) inputs, got {X.shape}")
    h = X
    for w, b in zip(params.weights, params.biases):
        z = h @ w.T + b
        h = np.maximum(z, 0.0)
    out = h @ params.beta.T + params.beta0
    return z, out


def activation_pattern(state: ForwardState) -> ActivationPattern:
    """Binary pattern of the state; exact zero counts as active (z >= 0)."""
    return ActivationPattern(tuple((z >= 0.0).astype(np.uint8) for z in state.preactivations))


def gradient_of_region(params: NetworkParams, pattern: ActivationPattern, output=0) -> np.ndarray:
    """Gradient of the region selected by pattern, by masked back-substitution.

    Computes beta_row @ D_L W_L @ ... @ D_1 W_1 with D_l the 0/1 diagonal
    from the pattern; equal to the literal path-sum over all index tuples.
    """
    _check_pattern(params, pattern)
    _, row = _readout_row(params, output)
    g = row
    for i in range(params.arch.depth - 1, -1, -1):
        g = (g * pattern.bits[i]) @ params.weights[i]
    return g


def gradient_pathsum_oracle(params: NetworkParams, pattern: ActivationPattern,
                            output=0, max_paths: int = 10**6) -> np.ndarray:
    """Gradient by literal enumeration of every path through the network.

    Test oracle with exponential cost; refuses architectures whose hidden
    index tuples exceed max_paths.
    """
    _check_pattern(params, pattern)
    widths = params.arch.hidden_widths
    n_paths = math.prod(widths)
    if n_paths > max_paths:
        raise ValueError(f"path enumeration needs {n_paths} tuples, cap is {max_paths}")
    _, row = _readout_row(params, output)
    L = params.arch.depth
    grad = np.zeros(params.arch.input_dim)
    for hidden in itertools.product(*(range(n) for n in widths)):
        if any(pattern.bits[l][j] == 0 for l, j in enumerate(hidden)):
            continue
        coeff = row[hidden[-1]]
        for l in range(L - 1, 0, -1):
            coeff *= params.weights[l][hidden[l], hidden[l - 1]]
        grad += coeff * params.weights[0][hidden[0], :]
    return grad


def flip_gradient_diff(params: NetworkParams, pattern: ActivationPattern, node, output=0) -> np.ndarray:
    """Gradient difference from flipping one node out of the pattern.

    Returns grad(R) - grad(R') where R' inverts the bit of node=(layer,
    index).  Evaluated directly as the signed sum over the paths through
    that node with the node forced active: the head is the gradient of f
    with respect to that layer's activations (no mask at the node's own
    layer), the tail is the node's preactivation row pushed down to the
    input under the masks below.
    """
    _check_pattern(params, pattern)
    layer, index = node
    L = params.arch.depth
    if not (0 <= layer < L):
        raise ValueError(f"layer {layer} out of range (network has {L} hidden layers)")
    if not (0 <= index < params.arch.hidden_widths[layer]):
        raise ValueError(f"node index {index} out of range for layer {layer}")
    _, row = _readout_row(params, output)
    head = row
    for i in range(L - 1, layer, -1):
        head = (head * pattern.bits[i]) @ params.weights[i]
    tail = params.weights[layer][index, :]
    for i in range(layer - 1, -1, -1):
        tail = (tail * pattern.bits[i]) @ params.weights[i]
    sign = 1.0 if pattern.bits[layer][index] else -1.0
    return sign * head[index] * tail


def flip_norms(params: NetworkParams, pattern: ActivationPattern, output=0) -> list:
    """Euclidean norms of flip_gradient_diff for every node at once.

    Returns one array per layer.  The per-node difference factorizes into a
    scalar head coefficient times a tail row, so its norm is |head| times
    the tail row norm; heads come from one backward sweep and tail rows
    from one forward matrix sweep.
    """
    _check_pattern(params, pattern)
    _, row = _readout_row(params, output)
    L = params.arch.depth
    heads = [None] * L
    g = row
    for i in range(L - 1, -1, -1):
        heads[i] = g
        g = (g * pattern.bits[i]) @ params.weights[i]
    norms = []
    masked = None
    for i in range(L):
        tail_rows = params.weights[i] if i == 0 else params.weights[i] @ masked
        norms.append(np.abs(heads[i]) * np.linalg.norm(tail_rows, axis=1))
        masked = pattern.bits[i][:, None] * tail_rows
    return norms


def _fmt(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError("cannot serialize non-finite value")
    return format(x, ".17g")


def _json_floats(obj) -> str:
    """Serialize nested lists/dicts with floats at 17 significant digits."""
    if isinstance(obj, dict):
        items = ", ".join(f"{json.dumps(k)}: {_json_floats(v)}" for k, v in obj.items())
        return "{" + items + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_json_floats(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return _json_floats(obj.tolist())
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt(float(obj))
    return json.dumps(obj)


def save_params(params: NetworkParams, destination):
    """Write params as JSON with lossless decimal floats (17 significant digits)."""
    doc = {
        "dims": [params.arch.input_dim, *params.arch.hidden_widths],
        "outputs": params.arch.output_count,
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "beta0": params.beta0.tolist(),
        "beta": params.beta.tolist(),
    }
    text = _json_floats(doc)
    with open(destination, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.write("\n")


def load_params(source) -> NetworkParams:
    """Read a weight file written by save_params (or by hand)."""
    try:
        with open(source, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise WeightFileError(f"{source}: not valid JSON ({exc})") from exc
    for key in ("dims", "outputs", "weights", "biases", "beta0", "beta"):
        if key not in doc:
            raise WeightFileError(f"{source}: missing key {key!r}")
    dims = doc["dims"]
    if not isinstance(dims, list) or len(dims) < 2:
        raise WeightFileError(f"{source}: dims must list [p, n1, ..., nL]")
    try:
        arch = ArchSpec(input_dim=int(dims[0]), hidden_widths=tuple(int(d) for d in dims[1:]),
                        output_count=int(doc["outputs"]))
        weights = tuple(np.asarray(w, dtype=np.float64) for w in doc["weights"])
        biases = tuple(np.asarray(b, dtype=np.float64) for b in doc["biases"])
        params = NetworkParams(arch, weights, biases,
                               np.asarray(doc["beta0"], dtype=np.float64),
                               np.asarray(doc["beta"], dtype=np.float64))
    except (ValueError, TypeError) as exc:
        raise WeightFileError(f"{source}: {exc}") from exc
    return params


@dataclass(frozen=True)
class HistogramTable:
    counts: np.ndarray
    bin_edges: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def weight_histogram(params: NetworkParams, bin_count: int) -> HistogramTable:
    """Histogram of every parameter value over equal-width bins on [min, max]."""
    if bin_count < 1:
        raise ValueError("bin_count must be >= 1")
    values = params.all_values()
    counts, edges = np.histogram(values, bins=bin_count)
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    counts.flags.writeable = False
    return HistogramTable(counts=counts, bin_edges=_freeze(edges))
