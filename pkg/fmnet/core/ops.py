"""Operações diferenciáveis sobre `Tensor`.

Convenção de eixos: (tempo, altura, largura, canal), sempre com o canal por
último. Todas as operações aceitam eixos de lote à esquerda, então um lote de
clipes tem forma (B, N, H, W, C).
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fmnet.core.errors import ConfigError
from fmnet.core.tensor import Tensor, as_tensor


def _conv_arrays(
    x: np.ndarray, kernel: np.ndarray, stride: int, pad: int
):
    """Correlação 3D com passo temporal 1 via im2col.

    `x` tem forma (..., T, H, W, C) e `kernel` (wt, k, k, C, O). O tempo recebe
    zero-padding de (wt-1)/2, de modo que T não muda.
    """
    wt, k, _, cin, cout = kernel.shape
    *lead, frames, height, width, _ = x.shape
    pt = (wt - 1) // 2
    padding = [(0, 0)] * len(lead) + [(pt, pt), (pad, pad), (pad, pad), (0, 0)]
    xp = np.pad(x, padding)
    out_h = (height + 2 * pad - k) // stride + 1
    out_w = (width + 2 * pad - k) // stride + 1

    windows = sliding_window_view(xp, (k, k), axis=(-3, -2))[..., ::stride, ::stride, :, :, :]
    cols = np.ascontiguousarray(windows).reshape(*lead, frames + 2 * pt, out_h, out_w, cin * k * k)
    if wt == 1:
        stacked = cols
    else:
        stacked = np.concatenate([cols[..., tau:tau + frames, :, :, :] for tau in range(wt)], axis=-1)
    kmat = kernel.transpose(0, 3, 1, 2, 4).reshape(wt * cin * k * k, cout)
    flat = stacked.reshape(-1, kmat.shape[0])
    out = (flat @ kmat).reshape(*lead, frames, out_h, out_w, cout)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g2 = g.reshape(-1, cout)
        gk = (flat.T @ g2).reshape(wt, cin, k, k, cout).transpose(0, 2, 3, 1, 4)
        gstack = (g2 @ kmat.T).reshape(*lead, frames, out_h, out_w, wt, cin, k, k)
        gcols = np.zeros((*lead, frames + 2 * pt, out_h, out_w, cin, k, k), dtype=g.dtype)
        for tau in range(wt):
            gcols[..., tau:tau + frames, :, :, :, :, :] += gstack[..., tau, :, :, :]
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[..., i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride, :] += (
                    gcols[..., i, j]
                )
        gx = gxp[..., pt:pt + frames, pad:pad + height, pad:pad + width, :]
        return gx, gk

    return out, grad_fn


def _check_conv(x: Tensor, kernel: Tensor, k: int, stride: int, pad: int, spatial_axes: int) -> None:
    if stride < 1:
        raise ConfigError(f"stride deve ser >= 1, recebeu {stride}")
    if pad < 0:
        raise ConfigError(f"padding negativo: {pad}")
    if x.ndim < spatial_axes:
        raise ConfigError(f"entrada com eixos insuficientes: {x.shape}")
    if x.shape[-1] != kernel.shape[-2]:
        raise ConfigError(
            f"canais da entrada ({x.shape[-1]}) diferem do Cin do kernel ({kernel.shape[-2]})"
        )
    height, width = x.shape[-3], x.shape[-2]
    if k > height + 2 * pad or k > width + 2 * pad:
        raise ConfigError(f"kernel {k}x{k} maior que a entrada {height}x{width} com padding {pad}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Correlação cruzada 2D.

    Args:
        x: entrada (..., H, W, Cin).
        kernel: pesos (k, k, Cin, Cout).
        stride: passo espacial.
        pad: zero-padding espacial.

    Returns:
        Tensor (..., H', W', Cout) com H' = floor((H + 2*pad - k) / stride) + 1.
    """
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ConfigError(f"kernel 2D deve ter forma (k, k, Cin, Cout), recebeu {kernel.shape}")
    _check_conv(x, kernel, kernel.shape[0], stride, pad, spatial_axes=3)
    out, inner = _conv_arrays(x.data[..., None, :, :, :], kernel.data[None], stride, pad)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gx, gk = inner(g[..., None, :, :, :])
        return gx[..., 0, :, :, :], gk[0]

    return Tensor.from_op(out[..., 0, :, :, :], (x, kernel), grad_fn)


def conv3d(x: Tensor, kernel: Tensor, spatial_stride: int = 1, pad: int | None = None) -> Tensor:
    """Convolução 3D com passo temporal fixo em 1.

    Args:
        x: entrada (..., T, H, W, Cin).
        kernel: pesos (wt, k, k, Cin, Cout) com wt ímpar.
        spatial_stride: passo espacial.
        pad: zero-padding espacial; por padrão (k - 1) // 2.

    Returns:
        Tensor (..., T, H', W', Cout); o comprimento temporal é preservado.
    """
    if kernel.ndim != 5 or kernel.shape[1] != kernel.shape[2]:
        raise ConfigError(f"kernel 3D deve ter forma (wt, k, k, Cin, Cout), recebeu {kernel.shape}")
    wt, k = kernel.shape[0], kernel.shape[1]
    if wt % 2 == 0:
        raise ConfigError(f"kernel temporal deve ser ímpar, recebeu w_t={wt}")
    pad = (k - 1) // 2 if pad is None else pad
    _check_conv(x, kernel, k, spatial_stride, pad, spatial_axes=4)
    out, grad_fn = _conv_arrays(x.data, kernel.data, spatial_stride, pad)
    return Tensor.from_op(out, (x, kernel), grad_fn)


def avg_pool_channels(x: Tensor, group: int) -> Tensor:
    """Média de cada bloco de `group` canais consecutivos (sem parâmetros)."""
    channels = x.shape[-1]
    if group < 1 or channels % group:
        raise ConfigError(f"grupo {group} não divide {channels} canais")
    if group == 1:
        return x
    lead = x.shape[:-1]
    out = x.data.reshape(*lead, channels // group, group).mean(axis=-1)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.repeat(g, group, axis=-1) / group,)

    return Tensor.from_op(out, (x,), grad_fn)


def interpolation_matrix(n_in: int, n_out: int, mode: str, dtype=np.float64) -> np.ndarray:
    """Matriz (n_out, n_in) de reamostragem 1D com centros de pixel alinhados."""
    rows = np.arange(n_out)
    scale = n_in / n_out
    matrix = np.zeros((n_out, n_in), dtype=dtype)
    if mode == "nearest":
        src = np.minimum(np.floor((rows + 0.5) * scale).astype(int), n_in - 1)
        matrix[rows, src] = 1.0
    elif mode == "bilinear":
        src = np.clip((rows + 0.5) * scale - 0.5, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        np.add.at(matrix, (rows, lo), 1.0 - frac)
        np.add.at(matrix, (rows, hi), frac)
    else:
        raise ConfigError(f"modo de reamostragem desconhecido: {mode}")
    return matrix


def resample(x: Tensor, target: tuple[int, int], mode: str = "bilinear") -> Tensor:
    """Reamostragem espacial independente por canal de (..., h, w, c) para (..., h', w', c)."""
    out_h, out_w = target
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"dimensões alvo inválidas: {target}")
    in_h, in_w = x.shape[-3], x.shape[-2]
    if (out_h, out_w) == (in_h, in_w):
        return x
    ry = interpolation_matrix(in_h, out_h, mode, dtype=x.dtype)
    rx = interpolation_matrix(in_w, out_w, mode, dtype=x.dtype)
    rows = np.einsum("ph,...hwc->...pwc", ry, x.data, optimize=True)
    out = np.einsum("qw,...pwc->...pqc", rx, rows, optimize=True)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        gw = np.einsum("qw,...pqc->...pwc", rx, g, optimize=True)
        return (np.einsum("ph,...pwc->...hwc", ry, gw, optimize=True),)

    return Tensor.from_op(out, (x,), grad_fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Camada totalmente conectada sobre o último eixo."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ConfigError(
            f"dense incompatível: entrada {x.shape}, peso {weight.shape}, bias {bias.shape}"
        )
    return x @ weight + bias


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return Tensor.from_op(t, (x,), lambda g: (g * (1.0 - t * t),))


def sigmoid(x: Tensor) -> Tensor:
    # forma via tanh: estável para |x| grande e exata em 0
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor.from_op(s.astype(x.dtype), (x,), lambda g: (g * s * (1.0 - s),))


def mse(prediction: Tensor, target: Tensor | np.ndarray) -> Tensor:
    """Média do quadrado da diferença sobre todos os elementos."""
    target = as_tensor(target, like=prediction)
    if prediction.shape != target.shape:
        raise ConfigError(f"formas diferentes no MSE: {prediction.shape} vs {target.shape}")
    diff = prediction.data - target.data
    count = diff.size
    value = np.asarray(np.mean(diff * diff), dtype=prediction.dtype)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        scaled = (2.0 / count) * g * diff
        return scaled, -scaled

    return Tensor.from_op(value, (prediction, target), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def grad_fn(g: np.ndarray) -> list[np.ndarray]:
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return Tensor.from_op(np.stack([t.data for t in tensors], axis=axis), tensors, grad_fn)
