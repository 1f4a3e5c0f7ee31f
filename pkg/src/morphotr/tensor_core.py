"""Dense-array engine: float64 tensors, FFT long convolution, reverse-mode gradients.

Arrays are ``torch.Tensor`` objects in float64; the autograd tape plays the
role of the node graph.  Convolutions are evaluated with real FFTs padded to
the next power of two, so cost is O(L log L) in the sequence length.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
import torch

from .errors import ConfigError, NumericError

DTYPE = torch.float64

torch.set_default_dtype(DTYPE)


def as_array(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def check_finite(t: torch.Tensor, what: str = "array") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite values in {what}")
    return t


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


def _linear_conv_full(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Full linear convolution over the last axis (length len(a)+len(b)-1)."""
    n_full = a.shape[-1] + b.shape[-1] - 1
    n_fft = next_pow2(n_full)
    fa = torch.fft.rfft(a, n=n_fft)
    fb = torch.fft.rfft(b, n=n_fft)
    return torch.fft.irfft(fa * fb, n=n_fft)[..., :n_full]


def conv_long(u: torch.Tensor, h: torch.Tensor, mode: str = "circular") -> torch.Tensor:
    """Convolve ``u`` with filter ``h`` of equal length along the last axis.

    ``y[t] = sum_{s=0}^{L-1} h[t-s] u[s]``.  In ``linear`` mode ``h`` is zero
    for negative offsets (zero padding to 2L); in ``circular`` mode offsets wrap
    modulo L.  Leading axes broadcast.
    """
    u = torch.as_tensor(u, dtype=DTYPE)
    h = torch.as_tensor(h, dtype=DTYPE)
    L = u.shape[-1]
    if L < 1 or h.shape[-1] != L:
        raise ConfigError(f"conv_long needs equal lengths >= 1, got {u.shape[-1]} and {h.shape[-1]}")
    if mode not in ("circular", "linear"):
        raise ConfigError(f"unknown convolution mode {mode!r}")
    check_finite(u, "conv_long input")
    check_finite(h, "conv_long filter")
    full = _linear_conv_full(u, h)
    y = full[..., :L]
    if mode == "circular" and L > 1:
        # wrap the tail (offsets >= L) back onto the head
        y = y + torch.nn.functional.pad(full[..., L:], (0, 1))
    return y


def conv_noncausal(u: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Linear convolution with a two-sided kernel.

    ``kernel`` has length ``2L-1`` and holds taps for offsets ``-(L-1)..L-1``;
    the output keeps the input length: ``y[t] = sum_s kernel[t-s+L-1] u[s]``.
    """
    L = u.shape[-1]
    if kernel.shape[-1] != 2 * L - 1:
        raise ConfigError(f"two-sided kernel must have {2 * L - 1} taps, got {kernel.shape[-1]}")
    full = _linear_conv_full(u, kernel)
    return full[..., L - 1 : 2 * L - 1]


def backward(root: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``root`` with respect to each named parameter.

    Parameters with no path to ``root`` get an exact zero gradient.
    """
    if root.numel() != 1:
        raise ConfigError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(root.reshape(()), tensors, allow_unused=True, retain_graph=True)
    out = {}
    for n, t, g in zip(names, tensors, grads):
        out[n] = torch.zeros_like(t) if g is None else g.detach().clone()
    return out


def _ridders(ev: Callable[[float], float], h0: float, n: int = 8, shrink: float = 1.6) -> tuple[float, float]:
    """Central differences at shrinking steps, Richardson-extrapolated.

    Returns the estimate with the smallest internal error and that error.
    """
    table = np.zeros((n, n))
    best, err = float("nan"), float("inf")
    h = h0
    table[0, 0] = (ev(h) - ev(-h)) / (2.0 * h)
    for i in range(1, n):
        h /= shrink
        table[0, i] = (ev(h) - ev(-h)) / (2.0 * h)
        fac = shrink * shrink
        for j in range(1, i + 1):
            table[j, i] = (table[j - 1, i] * fac - table[j - 1, i - 1]) / (fac - 1.0)
            fac *= shrink * shrink
            e = max(abs(table[j, i] - table[j - 1, i]), abs(table[j, i] - table[j - 1, i - 1]))
            if e <= err:
                best, err = table[j, i], e
        # once the tableau diverges, higher orders only add round-off
        if abs(table[i, i] - table[i - 1, i - 1]) >= 2.0 * err:
            break
    return best, err


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    step: float = 1e-4,
    eps: float = 1e-8,
) -> float:
    """Max relative error between autograd and numerical gradients.

    ``f`` is re-evaluated after each in-place perturbation of a parameter
    entry, so it must read the parameters at call time.  The numerical
    derivative runs Ridders' extrapolation from starting steps ``step``,
    ``10*step`` and ``100*step`` and keeps the estimate with the smallest
    internal error, which copes with entries whose curvature spans many
    orders of magnitude.  The error for one entry is
    ``|a - n| / max(|a|, |n|, eps)``.
    """
    if step <= 0:
        raise ConfigError("grad_check step must be positive")
    root = f()
    check_finite(root, "grad_check objective")
    analytic = backward(root, params)
    worst = 0.0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            a_flat = analytic[name].reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()

                def ev(d, flat=flat, i=i, orig=orig, name=name):
                    flat[i] = orig + d
                    val = f().item()
                    if not np.isfinite(val):
                        flat[i] = orig
                        raise NumericError(f"non-finite objective while perturbing {name}[{i}]")
                    return val

                try:
                    num = min((_ridders(ev, step * s) for s in (1.0, 10.0, 100.0)), key=lambda c: c[1])[0]
                finally:
                    flat[i] = orig
                a = a_flat[i].item()
                err = abs(a - num) / max(abs(a), abs(num), eps)
                worst = max(worst, err)
    return worst
