"""Shared oracles for the test suite."""

import numpy as np

from parslab import nn_core


def fd_gradient_check(spec, seed: int, batch: int = 4, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference parameter gradients.

    The scalar under test is ``mean_i sum_j G_ij * f(x_i)_j`` for random ``G``.
    Entries where both gradients are below 1e-7 in magnitude count as agreeing.
    """
    rng = np.random.default_rng(seed)
    params = nn_core.mlp_init(spec, rng)
    # Random affine LN parameters so their gradients are exercised away from the identity.
    if spec.use_ln:
        params = params.with_arrays(
            params.weights
            + params.biases
            + [1.0 + 0.3 * rng.standard_normal(a.shape) for a in params.ln_scale]
            + [0.3 * rng.standard_normal(a.shape) for a in params.ln_shift]
        )
    x = rng.standard_normal((batch, spec.input_dim))
    G = rng.standard_normal((batch, spec.output_dim))

    def scalar(flat):
        out, _ = nn_core.mlp_forward(params.unflatten(flat), x)
        return float(np.sum(out * G) / batch)

    _, trace = nn_core.mlp_forward(params, x, want_trace=True)
    analytic = nn_core.mlp_backward(params, trace, G)[0].flatten()
    flat = params.flatten()
    numeric = np.empty_like(flat)
    for k in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[k] += step
        dn[k] -= step
        numeric[k] = (scalar(up) - scalar(dn)) / (2 * step)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-7)
    return float(np.max(np.abs(analytic - numeric) / scale))
