"""Feedforward networks with optional layer normalization, written on numpy.

Every hidden layer computes ``Linear -> LayerNorm (optional) -> activation``;
the output layer is a bare ``Linear``. Parameters are plain value records and
every function here is pure: optimizers and target updates return new
records instead of mutating their inputs.

Weights are stored as ``(fan_out, fan_in)`` matrices and initialised from
``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; biases start at zero and layer-norm
affine parameters at the identity (scale 1, shift 0). All arithmetic is
float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr

ACTIVATIONS = ("relu", "gelu", "sigmoid", "silu", "none")

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Input or gradient array does not match the network's shapes."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_dims: tuple[int, ...] = (256, 256)
    activation: str = "relu"
    use_ln: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "activation", self.activation.lower())
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError("hidden_dims must be a non-empty sequence of positive ints")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if not self.ln_eps > 0:
            raise ValueError("ln_eps must be positive")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for every linear layer, output layer last."""
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class MlpParams:
    """Weights, biases and (when ``spec.use_ln``) per-hidden-layer LN affine parameters.

    The same record type doubles as the container for gradients and Adam moments.
    """

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    ln_scale: list[np.ndarray] = field(default_factory=list)
    ln_shift: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        dims = self.spec.layer_dims
        if len(self.weights) != len(dims) or len(self.biases) != len(dims):
            raise ShapeError("number of layers does not match spec")
        for (fan_in, fan_out), w, b in zip(dims, self.weights, self.biases):
            if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise ShapeError(f"layer shapes {w.shape}/{b.shape} do not match ({fan_out}, {fan_in})")
        n_ln = len(self.spec.hidden_dims) if self.spec.use_ln else 0
        if len(self.ln_scale) != n_ln or len(self.ln_shift) != n_ln:
            raise ShapeError("layer-norm parameters must exist iff spec.use_ln")
        for h, g, s in zip(self.spec.hidden_dims, self.ln_scale, self.ln_shift):
            if g.shape != (h,) or s.shape != (h,):
                raise ShapeError("layer-norm parameter shape mismatch")

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in a fixed order (weights, biases, LN scales, LN shifts)."""
        return [*self.weights, *self.biases, *self.ln_scale, *self.ln_shift]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        n = len(self.weights)
        k = len(self.ln_scale)
        arrays = list(arrays)
        return MlpParams(
            self.spec,
            arrays[:n],
            arrays[n : 2 * n],
            arrays[2 * n : 2 * n + k],
            arrays[2 * n + k :],
        )

    def map(self, fn) -> "MlpParams":
        return self.with_arrays([fn(a) for a in self.arrays()])

    def zeros_like(self) -> "MlpParams":
        return self.map(np.zeros_like)

    def copy(self) -> "MlpParams":
        return self.map(np.array)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat: np.ndarray) -> "MlpParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(flat[pos : pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        if pos != flat.size:
            raise ShapeError("flat vector length does not match parameter count")
        return self.with_arrays(out)

    def equals(self, other: "MlpParams") -> bool:
        return self.spec == other.spec and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass
class AdamState:
    m: MlpParams
    v: MlpParams
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ForwardTrace:
    """Per-hidden-layer intermediates retained for backprop and diagnostics.

    ``inputs[l]`` is the input to linear layer ``l`` (so ``inputs[0]`` is x),
    ``pre`` the linear outputs, ``normed`` the pre-affine LN outputs,
    ``inv_std`` the LN reciprocal standard deviations, ``post_ln`` the
    activation inputs and ``post_act`` the activation outputs.
    """

    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    normed: list[np.ndarray]
    inv_std: list[np.ndarray]
    post_ln: list[np.ndarray]
    post_act: list[np.ndarray]
    output: np.ndarray


def mlp_init(spec: MlpSpec, seed: int | np.random.Generator) -> MlpParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_dims:
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if spec.use_ln:
        ln_scale = [np.ones(h) for h in spec.hidden_dims]
        ln_shift = [np.zeros(h) for h in spec.hidden_dims]
    else:
        ln_scale, ln_shift = [], []
    return MlpParams(spec, weights, biases, ln_scale, ln_shift)


def layer_norm(h, eta, beta_shift, eps: float = 1e-5) -> np.ndarray:
    """Normalize over the last axis, then apply the elementwise affine map."""
    h = np.asarray(h, dtype=np.float64)
    mu = h.mean(axis=-1, keepdims=True)
    var = ((h - mu) ** 2).mean(axis=-1, keepdims=True)
    return (h - mu) / np.sqrt(var + eps) * eta + beta_shift


def activate(name: str, u: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(u, 0.0)
    if name == "gelu":
        return u * ndtr(u)
    if name == "sigmoid":
        return _sigmoid(u)
    if name == "silu":
        return u * _sigmoid(u)
    return u


def activation_derivative(name: str, u: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (u > 0.0).astype(np.float64)
    if name == "gelu":
        return ndtr(u) + u * _INV_SQRT_2PI * np.exp(-0.5 * u * u)
    if name == "sigmoid":
        s = _sigmoid(u)
        return s * (1.0 - s)
    if name == "silu":
        s = _sigmoid(u)
        return s * (1.0 + u * (1.0 - s))
    return np.ones_like(u)


def _sigmoid(u: np.ndarray) -> np.ndarray:
    # Branch-free stable form: exp never sees a positive argument.
    e = np.exp(-np.abs(u))
    return np.where(u >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def mlp_forward(params: MlpParams, x, want_trace: bool = False):
    """Evaluate the network on a single vector ``(input_dim,)`` or a batch ``(n, input_dim)``.

    Returns ``(output, trace)``; ``trace`` is ``None`` unless requested.
    """
    spec = params.spec
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"expected input of width {spec.input_dim}, got shape {x.shape}")

    inputs, pre, normed, inv_std, post_ln, post_act = [], [], [], [], [], []
    a = x
    n_hidden = len(spec.hidden_dims)
    for layer in range(n_hidden):
        inputs.append(a)
        z = a @ params.weights[layer].T + params.biases[layer]
        pre.append(z)
        if spec.use_ln:
            mu = z.mean(axis=1, keepdims=True)
            centered = z - mu
            istd = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + spec.ln_eps)
            xhat = centered * istd
            u = xhat * params.ln_scale[layer] + params.ln_shift[layer]
            normed.append(xhat)
            inv_std.append(istd)
        else:
            u = z
        post_ln.append(u)
        a = activate(spec.activation, u)
        post_act.append(a)
    inputs.append(a)
    out = a @ params.weights[-1].T + params.biases[-1]

    result = out[0] if single else out
    if not want_trace:
        return result, None
    return result, ForwardTrace(inputs, pre, normed, inv_std, post_ln, post_act, out)


def mlp_backward(params: MlpParams, trace: ForwardTrace, out_grads) -> tuple[MlpParams, np.ndarray]:
    """Backpropagate per-sample output gradients through a recorded forward pass.

    Returns ``(param_grads, input_grads)``. ``param_grads`` is the gradient of
    ``mean_i <out_grads[i], f(x_i)>``; ``input_grads[i]`` is the (unaveraged)
    gradient of ``<out_grads[i], f(x_i)>`` with respect to ``x_i``.
    """
    spec = params.spec
    g = np.asarray(out_grads, dtype=np.float64)
    if g.ndim == 1 and g.size == trace.output.size:
        g = g.reshape(trace.output.shape)
    if g.shape != trace.output.shape:
        raise ShapeError(f"output gradient shape {g.shape} != output shape {trace.output.shape}")
    n = g.shape[0]
    n_hidden = len(spec.hidden_dims)

    d_w = [None] * (n_hidden + 1)
    d_b = [None] * (n_hidden + 1)
    d_scale = [None] * n_hidden if spec.use_ln else []
    d_shift = [None] * n_hidden if spec.use_ln else []

    d_w[-1] = g.T @ trace.inputs[-1] / n
    d_b[-1] = g.sum(axis=0) / n
    da = g @ params.weights[-1]
    for layer in reversed(range(n_hidden)):
        du = da * activation_derivative(spec.activation, trace.post_ln[layer])
        if spec.use_ln:
            xhat = trace.normed[layer]
            d_scale[layer] = (du * xhat).sum(axis=0) / n
            d_shift[layer] = du.sum(axis=0) / n
            dxhat = du * params.ln_scale[layer]
            dz = trace.inv_std[layer] * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
        else:
            dz = du
        d_w[layer] = dz.T @ trace.inputs[layer] / n
        d_b[layer] = dz.sum(axis=0) / n
        da = dz @ params.weights[layer]
    return MlpParams(spec, d_w, d_b, d_scale, d_shift), da


def per_sample_grads(params: MlpParams, batch_inputs, output_index: int = 0) -> np.ndarray:
    """Flattened gradient of output ``output_index`` for every input row, shape ``(n, params.size)``.

    Column order matches :meth:`MlpParams.flatten`.
    """
    spec = params.spec
    x = np.atleast_2d(np.asarray(batch_inputs, dtype=np.float64))
    _, trace = mlp_forward(params, x, want_trace=True)
    n = x.shape[0]
    n_hidden = len(spec.hidden_dims)
    g = np.zeros((n, spec.output_dim))
    g[:, output_index] = 1.0

    w_parts = [None] * (n_hidden + 1)
    b_parts = [None] * (n_hidden + 1)
    s_parts = [None] * n_hidden if spec.use_ln else []
    h_parts = [None] * n_hidden if spec.use_ln else []
    w_parts[-1] = (g[:, :, None] * trace.inputs[-1][:, None, :]).reshape(n, -1)
    b_parts[-1] = g
    da = g @ params.weights[-1]
    for layer in reversed(range(n_hidden)):
        du = da * activation_derivative(spec.activation, trace.post_ln[layer])
        if spec.use_ln:
            xhat = trace.normed[layer]
            s_parts[layer] = du * xhat
            h_parts[layer] = du
            dxhat = du * params.ln_scale[layer]
            dz = trace.inv_std[layer] * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
        else:
            dz = du
        w_parts[layer] = (dz[:, :, None] * trace.inputs[layer][:, None, :]).reshape(n, -1)
        b_parts[layer] = dz
        da = dz @ params.weights[layer]
    return np.concatenate([*w_parts, *b_parts, *s_parts, *h_parts], axis=1)


def mlp_grad(params: MlpParams, batch_inputs, per_sample_output_grads) -> MlpParams:
    """Gradient of ``mean_i <g_i, f(x_i)>`` with respect to every parameter."""
    x = np.atleast_2d(np.asarray(batch_inputs, dtype=np.float64))
    g = np.asarray(per_sample_output_grads, dtype=np.float64).reshape(x.shape[0], -1)
    if g.shape[1] != params.spec.output_dim:
        raise ShapeError("output gradient width does not match output_dim")
    _, trace = mlp_forward(params, x, want_trace=True)
    grads, _ = mlp_backward(params, trace, g)
    return grads


def adam_init(params: MlpParams, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState) -> tuple[MlpParams, AdamState]:
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        if p.shape != g.shape:
            raise ShapeError("gradient shape mismatch")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return params.with_arrays(new_p), replace(
        state, m=state.m.with_arrays(new_m), v=state.v.with_arrays(new_v), t=t
    )


def soft_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if target.spec != online.spec:
        raise ShapeError("target and online specs differ")
    return target.with_arrays(
        [tau * o + (1.0 - tau) * t for t, o in zip(target.arrays(), online.arrays())]
    )


def without_ln_affine_grads(grads: MlpParams) -> MlpParams:
    """Zero the LN scale/shift gradients (keeps the affine map frozen at identity)."""
    return replace(
        grads,
        ln_scale=[np.zeros_like(a) for a in grads.ln_scale],
        ln_shift=[np.zeros_like(a) for a in grads.ln_shift],
    )


# ---------------------------------------------------------------------------
# Checkpoint text format
#
#   network <name>
#   spec input_dim=<int> output_dim=<int> hidden_dims=<a,b,...> activation=<str> use_ln=<0|1> ln_eps=<float>
#   param <label> <rows> <cols>
#   <row of space-separated floats>          (one line per row)
#   end
#
# Floats are written with repr(), the shortest string that round-trips.

_FORMAT_TAG = "# parslab checkpoint v1"


def _fmt(values: Iterable[float]) -> str:
    return " ".join(repr(float(v)) for v in values)


def _labelled_arrays(params: MlpParams) -> list[tuple[str, np.ndarray]]:
    items = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        items.append((f"W{i}", w))
        items.append((f"b{i}", b))
    for i, (g, s) in enumerate(zip(params.ln_scale, params.ln_shift)):
        items.append((f"ln_scale{i}", g))
        items.append((f"ln_shift{i}", s))
    return items


def dumps_checkpoint(nets: dict[str, MlpParams]) -> str:
    lines = [_FORMAT_TAG]
    for name, params in nets.items():
        s = params.spec
        lines.append(f"network {name}")
        lines.append(
            f"spec input_dim={s.input_dim} output_dim={s.output_dim} "
            f"hidden_dims={','.join(map(str, s.hidden_dims))} activation={s.activation} "
            f"use_ln={int(s.use_ln)} ln_eps={s.ln_eps!r}"
        )
        for label, arr in _labelled_arrays(params):
            mat = arr.reshape(arr.shape[0], -1) if arr.ndim == 2 else arr[None, :]
            lines.append(f"param {label} {mat.shape[0]} {mat.shape[1]}")
            lines.extend(_fmt(row) for row in mat)
        lines.append("end")
    return "\n".join(lines) + "\n"


def loads_checkpoint(text: str) -> dict[str, MlpParams]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != _FORMAT_TAG:
        raise ValueError("not a parslab checkpoint (missing header line)")
    nets: dict[str, MlpParams] = {}
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if not line.startswith("network "):
            raise ValueError(f"line {i}: expected 'network <name>'")
        name = line.split(maxsplit=1)[1]
        fields = dict(tok.split("=", 1) for tok in lines[i].split()[1:])
        i += 1
        spec = MlpSpec(
            input_dim=int(fields["input_dim"]),
            output_dim=int(fields["output_dim"]),
            hidden_dims=tuple(int(h) for h in fields["hidden_dims"].split(",")),
            activation=fields["activation"],
            use_ln=fields["use_ln"] == "1",
            ln_eps=float(fields["ln_eps"]),
        )
        arrays: dict[str, np.ndarray] = {}
        while lines[i].strip() != "end":
            _, label, rows, cols = lines[i].split()
            rows, cols = int(rows), int(cols)
            i += 1
            block = [np.array(lines[i + r].split(), dtype=np.float64) for r in range(rows)]
            mat = np.vstack(block) if rows else np.zeros((0, cols))
            if mat.shape != (rows, cols):
                raise ValueError(f"line {i}: block {label} has wrong shape")
            arrays[label] = mat
            i += rows
        i += 1
        n = len(spec.layer_dims)
        params = MlpParams(
            spec,
            [arrays[f"W{k}"] for k in range(n)],
            [arrays[f"b{k}"][0] for k in range(n)],
            [arrays[f"ln_scale{k}"][0] for k in range(len(spec.hidden_dims))] if spec.use_ln else [],
            [arrays[f"ln_shift{k}"][0] for k in range(len(spec.hidden_dims))] if spec.use_ln else [],
        )
        nets[name] = params
    return nets


def save_checkpoint(path, nets: dict[str, MlpParams]) -> None:
    Path(path).write_text(dumps_checkpoint(nets))


def load_checkpoint(path) -> dict[str, MlpParams]:
    return loads_checkpoint(Path(path).read_text())
