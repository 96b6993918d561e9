"""Small numpy MLP toolkit: swish hidden layers, Gaussian output heads, Adam.

Parameters may carry a leading ensemble axis. A stacked ``MlpParams`` holds
``E`` independent networks (weights ``(E, out, in)``, biases ``(E, out)``)
that are evaluated with batched matmuls on inputs of shape ``(E, B, in)``.
Because the loss is a sum of per-member means and Adam is elementwise, a
training step on a stacked network is exactly ``E`` independent steps.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

DETERMINISTIC = "deterministic"
GAUSSIAN = "gaussian"
OUTPUT_MODES = (DETERMINISTIC, GAUSSIAN)

VAR_MIN = 1e-6
VAR_MAX = 1e2


class ShapeError(ValueError):
    """Input does not match the network's declared dimensions."""


class DomainError(ValueError):
    """A value lies outside the domain of the operation (e.g. variance <= 0)."""


class TrainingDivergenceError(FloatingPointError):
    """Raised when a gradient or loss becomes NaN/Inf."""

    def __init__(self, message: str, layer: int | None = None, member: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.member = member


def swish(z: np.ndarray) -> np.ndarray:
    return z * _sigmoid(z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-z) overflows to inf for very negative z, which still gives the right limit 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


@dataclass
class MlpParams:
    """Weights and biases of one MLP, or of ``E`` stacked MLPs.

    ``weights[k]`` has shape ``(out_k, in_k)`` (or ``(E, out_k, in_k)``) and
    ``biases[k]`` has shape ``(out_k,)`` (or ``(E, out_k)``). The output layer
    is linear. In ``gaussian`` mode the last layer emits ``d`` means followed
    by ``d`` raw variance parameters.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_mode: str = DETERMINISTIC
    var_min: float = VAR_MIN
    var_max: float = VAR_MAX

    def __post_init__(self) -> None:
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"unknown output_mode {self.output_mode!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("need one weight matrix and bias per layer transition")
        if self.output_mode == GAUSSIAN and self.layer_sizes[-1] % 2:
            raise ShapeError("gaussian head needs an even output width (means + variances)")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_sizes[k + 1], self.layer_sizes[k])
            if w.shape[-2:] != want or b.shape[-1] != want[0]:
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape}, expected {want}")
            if w.ndim != self.weights[0].ndim or b.ndim != w.ndim - 1:
                raise ShapeError(f"layer {k}: inconsistent ensemble stacking")

    @property
    def n_members(self) -> int | None:
        """Ensemble size, or None for a single network."""
        return self.weights[0].shape[0] if self.weights[0].ndim == 3 else None

    @property
    def out_dim(self) -> int:
        d = self.layer_sizes[-1]
        return d // 2 if self.output_mode == GAUSSIAN else d

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.output_mode,
            self.var_min,
            self.var_max,
        )

    def member(self, i: int) -> "MlpParams":
        if self.n_members is None:
            raise ValueError("not an ensemble")
        return MlpParams(
            list(self.layer_sizes),
            [w[i].copy() for w in self.weights],
            [b[i].copy() for b in self.biases],
            self.output_mode,
            self.var_min,
            self.var_max,
        )

    @classmethod
    def stack(cls, members: Sequence["MlpParams"]) -> "MlpParams":
        first = members[0]
        return cls(
            list(first.layer_sizes),
            [np.stack([m.weights[k] for m in members]) for k in range(len(first.weights))],
            [np.stack([m.biases[k] for m in members]) for k in range(len(first.biases))],
            first.output_mode,
            first.var_min,
            first.var_max,
        )


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_mlp(
    layer_sizes: Sequence[int],
    rng: np.random.Generator,
    output_mode: str = DETERMINISTIC,
    n_members: int | None = None,
    var_min: float = VAR_MIN,
    var_max: float = VAR_MAX,
) -> MlpParams:
    """Truncated-normal fan-in initialization (std = 1/sqrt(fan_in)), zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ShapeError(f"invalid layer sizes {layer_sizes}")
    lead = () if n_members is None else (n_members,)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(_truncated_normal(rng, lead + (fan_out, fan_in), 1.0 / np.sqrt(fan_in)))
        biases.append(np.zeros(lead + (fan_out,)))
    return MlpParams(sizes, weights, biases, output_mode, var_min, var_max)


def _check_input(params: MlpParams, x: np.ndarray) -> None:
    if x.shape[-1] != params.layer_sizes[0]:
        raise ShapeError(f"input width {x.shape[-1]} != layer_sizes[0]={params.layer_sizes[0]}")
    if params.n_members is not None and (x.ndim != 3 or x.shape[0] != params.n_members):
        raise ShapeError(f"ensemble of {params.n_members} expects input (E, B, in), got {x.shape}")


def _affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    z = x @ np.swapaxes(w, -1, -2)
    return z + (b[:, None, :] if w.ndim == 3 else b)


def _head(params: MlpParams, out: np.ndarray):
    if params.output_mode == DETERMINISTIC:
        return out
    d = params.out_dim
    mean = out[..., :d]
    var = np.clip(softplus(out[..., d:]), params.var_min, params.var_max)
    return mean, var


def _forward_cache(params: MlpParams, x: np.ndarray):
    pre, acts = [], [x]
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = _affine(h, w, b)
        pre.append(z)
        h = z if k == last else swish(z)
        acts.append(h)
    return pre, acts


def forward(params: MlpParams, x):
    """Evaluate the network.

    Returns the raw output for deterministic nets and ``(mean, variance)`` for
    gaussian heads. A 1-D input yields 1-D outputs.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    _check_input(params, x)
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = _affine(h, w, b)
        if k != last:
            h = swish(h)
    out = _head(params, h)
    if squeeze:
        out = tuple(o[0] for o in out) if isinstance(out, tuple) else out[0]
    return out


def gaussian_nll(mean, var, target) -> float:
    """Gaussian negative log-likelihood with constants dropped, summed over dims.

    For batched inputs the per-sample sums are averaged over the batch.
    """
    mean, var, target = (np.asarray(a, dtype=float) for a in (mean, var, target))
    if mean.shape != target.shape or var.shape != target.shape:
        raise ShapeError(f"shape mismatch: mean {mean.shape}, var {var.shape}, target {target.shape}")
    if np.any(~(var > 0)):
        raise DomainError("variance must be strictly positive")
    per = ((target - mean) ** 2 / (2.0 * var) + 0.5 * np.log(var)).sum(axis=-1)
    return float(per.mean())


def mse(pred, target) -> float:
    """Squared error summed over output dims, averaged over the batch."""
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(((pred - target) ** 2).sum(axis=-1).mean())


def loss_and_grads(params: MlpParams, x: np.ndarray, y: np.ndarray, loss: str = "nll"):
    """Batch loss and reverse-mode gradients.

    Returns ``(losses, grads)`` where ``losses`` is the batch-mean loss (an array
    of per-member values for stacked params) and ``grads`` mirrors
    ``params.arrays()``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_input(params, x)
    pre, acts = _forward_cache(params, x)
    out = acts[-1]
    n = x.shape[-2]
    if n == 0:
        raise ShapeError("empty batch")

    if loss == "mse":
        pred = out[..., : params.out_dim] if params.output_mode == GAUSSIAN else out
        if pred.shape != y.shape:
            raise ShapeError(f"target shape {y.shape} != prediction {pred.shape}")
        diff = pred - y
        losses = (diff**2).sum(axis=-1).mean(axis=-1)
        g_out = np.zeros_like(out)
        g_out[..., : pred.shape[-1]] = 2.0 * diff / n
    elif loss == "nll":
        if params.output_mode != GAUSSIAN:
            raise ValueError("nll loss needs a gaussian head")
        d = params.out_dim
        mean, raw = out[..., :d], out[..., d:]
        if mean.shape != y.shape:
            raise ShapeError(f"target shape {y.shape} != prediction {mean.shape}")
        sp = softplus(raw)
        var = np.clip(sp, params.var_min, params.var_max)
        r2 = (y - mean) ** 2
        losses = (r2 / (2.0 * var) + 0.5 * np.log(var)).sum(axis=-1).mean(axis=-1)
        g_mean = (mean - y) / var / n
        g_var = 0.5 * (1.0 / var - r2 / var**2) / n
        inside = (sp >= params.var_min) & (sp <= params.var_max)
        g_raw = g_var * _sigmoid(raw) * inside
        g_out = np.concatenate([g_mean, g_raw], axis=-1)
    else:
        raise ValueError(f"unknown loss {loss!r}")

    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.weights)
    g = g_out
    for k in range(len(params.weights) - 1, -1, -1):
        if k != len(params.weights) - 1:
            z = pre[k]
            s = _sigmoid(z)
            g = g * (s + z * s * (1.0 - s))
        grads_w[k] = np.swapaxes(g, -1, -2) @ acts[k]
        grads_b[k] = g.sum(axis=-2)
        if k > 0:
            g = g @ params.weights[k]
    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads.extend((gw, gb))
    return losses, grads


@dataclass
class AdamState:
    """First/second moment estimates mirroring a parameter list."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    @classmethod
    def like(cls, params: MlpParams | Sequence[np.ndarray], learning_rate: float = 1e-3, **kw) -> "AdamState":
        arrays = params.arrays() if isinstance(params, MlpParams) else list(params)
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], learning_rate, **kw)

    def step(self, arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        """Apply one in-place Adam update to ``arrays``."""
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(arrays, grads, self.first_moment, self.second_moment):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)


def backward_and_step(
    params: MlpParams, adam: AdamState, x: np.ndarray, y: np.ndarray, loss: str = "nll"
):
    """One Adam step on a batch; returns the pre-update batch-mean loss.

    For stacked params the return value is an array of per-member losses.
    """
    losses, grads = loss_and_grads(params, x, y, loss)
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            layer = i // 2
            member = None
            if params.n_members is not None:
                bad = ~np.isfinite(g.reshape(params.n_members, -1)).all(axis=1)
                member = int(np.flatnonzero(bad)[0])
            raise TrainingDivergenceError(
                f"non-finite gradient in layer {layer}" + ("" if member is None else f" (member {member})"),
                layer=layer,
                member=member,
            )
    adam.step(params.arrays(), grads)
    return losses if params.n_members is not None else float(losses)


# --- checkpoint format -------------------------------------------------------
#
# magic "SVMLP1\0\0" | u32 header length (little endian) | JSON header |
# arrays W0, b0, W1, b1, ... as row-major float64 in the byte order named by
# header["endianness"] ("<" or ">").

MAGIC = b"SVMLP1\x00\x00"


class CheckpointError(ValueError):
    pass


def dump_mlp(params: MlpParams, fh: BinaryIO) -> None:
    if params.n_members is not None:
        raise ValueError("dump members individually; this format holds one network")
    header = {
        "layer_sizes": list(params.layer_sizes),
        "output_mode": params.output_mode,
        "endianness": "<",
        "dtype": "float64",
        "var_min": params.var_min,
        "var_max": params.var_max,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)
    for a in params.arrays():
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_mlp_from(fh: BinaryIO) -> MlpParams:
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("not an MLP checkpoint (bad magic)")
    raw = fh.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<I", raw)
    try:
        header = json.loads(fh.read(n))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    dt = np.dtype(header["endianness"] + "f8")
    sizes = header["layer_sizes"]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        for shape, dest in (((fan_out, fan_in), weights), ((fan_out,), biases)):
            count = int(np.prod(shape))
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise CheckpointError("truncated checkpoint body")
            dest.append(np.frombuffer(buf, dtype=dt).astype(float).reshape(shape))
    return MlpParams(sizes, weights, biases, header["output_mode"], header["var_min"], header["var_max"])


def save_mlp(params: MlpParams, path) -> None:
    with open(path, "wb") as fh:
        dump_mlp(params, fh)


def load_mlp(path) -> MlpParams:
    with open(path, "rb") as fh:
        return load_mlp_from(fh)


def mlp_to_bytes(params: MlpParams) -> bytes:
    buf = io.BytesIO()
    dump_mlp(params, buf)
    return buf.getvalue()


def mlp_from_bytes(data: bytes) -> MlpParams:
    return load_mlp_from(io.BytesIO(data))
