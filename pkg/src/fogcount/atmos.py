"""Physics-guided fog module.

Implements the atmospheric scattering image model I = J*t + A*(1-t) with
t = exp(-beta*d), its inversion with a transmission floor, the three-stage
transmission estimate (dark-channel prior -> learned residual refinement ->
guided filtering), and the scattering-parameter estimator.

Synthesis is a plain numpy function (data side); everything downstream of
the observed image is built on the tape and is differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ParamStore, add_conv, conv_layer
from .tensor import Tensor

A_MIN = 0.5
A_MAX = 0.95
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class FogParams:
    """Per-image scattering parameters: airlight, extinction, transmission."""
    A: np.ndarray          # per-channel airlight in [A_MIN, A_MAX] (or [0,1] for synthesis)
    beta: float            # scattering coefficient per unit depth, >= 0
    t: np.ndarray | None = None   # (H, W) transmission in [0, 1]


# --------------------------------------------------------------------- data side


def vertical_depth_ramp(h: int, w: int, d_min: float = 0.1, d_max: float = 2.0,
                        far: str = "bottom") -> np.ndarray:
    """Linear depth ramp d = d_min + (d_max - d_min) * row/(H-1).

    far="top" flips the ramp so the top row is the deepest (perspective
    scenes put the horizon at the top).
    """
    ramp = np.linspace(d_min, d_max, h) if h > 1 else np.full(1, d_min)
    if far == "top":
        ramp = ramp[::-1]
    return np.repeat(ramp[:, None], w, axis=1)


def synthesize_fog(J: np.ndarray, d: np.ndarray, beta: float, A) -> np.ndarray:
    """Koschmieder forward model: I = J*exp(-beta*d) + A*(1 - exp(-beta*d)).

    J: (H, W, C) clear image in [0,1]; d: (H, W) nonnegative depth;
    A: scalar or per-channel airlight in [0,1]. Output clamped to [0,1];
    beta == 0 returns J bit-exactly.
    """
    if beta < 0:
        raise ValueError(f"synthesize_fog: beta must be >= 0, got {beta}")
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("synthesize_fog: depth must be finite and nonnegative")
    A = np.asarray(A, dtype=np.float64)
    if np.any(A < 0) or np.any(A > 1):
        raise ValueError("synthesize_fog: airlight must lie in [0, 1]")
    if beta == 0.0:
        return np.asarray(J, dtype=np.float64).copy()
    t = np.exp(-beta * d)[:, :, None]
    I = J * t + A * (1.0 - t)
    return np.clip(I, 0.0, 1.0)


def transmission_from_depth(d: np.ndarray, beta: float) -> np.ndarray:
    return np.exp(-beta * np.asarray(d, dtype=np.float64))


# ------------------------------------------------------------------ tape side


def grayscale(I: Tensor) -> Tensor:
    """Luma projection (B, H, W, 3) -> (B, H, W, 1)."""
    return T.matmul(I, Tensor(LUMA[:, None]))


def dark_channel_transmission(I: Tensor, A: Tensor, window: int = 15,
                              omega: float = 0.95) -> Tensor:
    """Dark-channel prior transmission estimate.

    t = 1 - omega * min_window min_channel min(I_c / A_c, 1); windows are
    truncated at the borders, so the output range is exactly [1-omega, 1].
    """
    if not (0.0 < omega <= 1.0):
        raise ValueError(f"dark_channel_transmission: omega must be in (0, 1], got {omega}")
    if window < 1:
        raise ValueError(f"dark_channel_transmission: window must be >= 1, got {window}")
    if np.any(A.data <= 0):
        raise ValueError("dark_channel_transmission: airlight must be strictly positive")
    ratio = T.clamp(I / A, hi=1.0)
    chan_min = T.neg(T.reduce_max(T.neg(ratio), axis=3, keepdims=True))
    dark = T.window_min2d(chan_min, window) if window > 1 else chan_min
    return 1.0 - omega * dark


def guided_filter(guide: Tensor, p: Tensor, r: int = 8, eps: float = 1e-3,
                  clamp_output: bool = True) -> Tensor:
    """Edge-preserving smoothing of p steered by guide (both (B, H, W, 1)).

    Per truncated box window: a = cov(guide, p) / (var(guide) + eps),
    b = mean(p) - a * mean(guide); output = mean(a) * guide + mean(b).
    """
    if eps <= 0:
        raise ValueError(f"guided_filter: eps must be > 0, got {eps}")
    if r < 1:
        raise ValueError(f"guided_filter: radius must be >= 1, got {r}")
    if guide.shape != p.shape:
        raise T.ShapeError(f"guided_filter: guide {guide.shape} vs p {p.shape}")
    n = Tensor(box_counts(guide.shape[1], guide.shape[2], r))
    mean_g = T.box_sum2d(guide, r) / n
    mean_p = T.box_sum2d(p, r) / n
    corr_gp = T.box_sum2d(guide * p, r) / n
    corr_gg = T.box_sum2d(guide * guide, r) / n
    cov = corr_gp - mean_g * mean_p
    var = corr_gg - mean_g * mean_g
    a = cov / (var + eps)
    b = mean_p - a * mean_g
    out = (T.box_sum2d(a, r) / n) * guide + T.box_sum2d(b, r) / n
    return T.clamp(out, 0.0, 1.0) if clamp_output else out


def box_counts(h: int, w: int, r: int) -> np.ndarray:
    return T.box_count2d((h, w), r)[None, :, :, None]


def dehaze(I: Tensor, A: Tensor, t_final: Tensor, t_min: float = 0.1) -> Tensor:
    """Invert the scattering model: J = (I - A*(1 - t)) / max(t, t_min), in [0,1]."""
    if not (0.0 < t_min < 1.0):
        raise ValueError(f"dehaze: t_min must be in (0, 1), got {t_min}")
    t_floor = T.clamp(t_final, lo=t_min)
    J = (I - A * (1.0 - t_final)) / t_floor
    return T.clamp(J, 0.0, 1.0)


def logit_residual(t: Tensor, r: Tensor, r_limit: float = 40.0) -> Tensor:
    """sigmoid(logit(t) + r) in the algebraically equivalent stable form
    t / (t + (1 - t) * exp(-r)); exact identity at r = 0."""
    rc = T.clamp(r, -r_limit, r_limit)
    e = T.exp(T.neg(rc))
    return t / (t + (1.0 - t) * e)


class TransmissionRefiner:
    """Two-level encoder-decoder refining the dark-channel transmission.

    Takes [t_initial, I] stacked on channels; the final layer is
    zero-initialized so that at init the refiner is the identity map.
    Spatial dims must be divisible by 4.
    """

    def __init__(self, store: ParamStore, rng, width: int = 8, prefix: str = "refiner"):
        self.width = width
        w = width
        self.enc1 = add_conv(store, rng, f"{prefix}.enc1", 3, 3, 4, w)
        self.enc2 = add_conv(store, rng, f"{prefix}.enc2", 3, 3, w, 2 * w)
        self.mid = add_conv(store, rng, f"{prefix}.mid", 3, 3, 2 * w, 2 * w)
        self.dec1 = add_conv(store, rng, f"{prefix}.dec1", 3, 3, 4 * w, w)
        self.dec2 = add_conv(store, rng, f"{prefix}.dec2", 3, 3, 2 * w, w)
        self.out = add_conv(store, rng, f"{prefix}.out", 3, 3, w, 1, zero=True)

    def forward(self, t_initial: Tensor, I: Tensor) -> Tensor:
        if t_initial.shape[1:3] != I.shape[1:3]:
            raise T.ShapeError(
                f"refine_transmission: spatial mismatch {t_initial.shape} vs {I.shape}")
        h, w = I.shape[1], I.shape[2]
        if h % 4 or w % 4:
            raise T.ShapeError(f"refine_transmission: spatial dims ({h},{w}) must divide by 4")
        x = T.concat([t_initial, I], axis=3)
        e1 = conv_layer(x, *self.enc1)
        e2 = conv_layer(T.avg_pool2d(e1, 2), *self.enc2)
        m = conv_layer(T.avg_pool2d(e2, 2), *self.mid)
        d1 = conv_layer(T.concat([T.upsample_nearest2d(m, 2, 2), e2], axis=3), *self.dec1)
        d2 = conv_layer(T.concat([T.upsample_nearest2d(d1, 2, 2), e1], axis=3), *self.dec2)
        residual = conv_layer(d2, *self.out, act=False)
        return logit_residual(t_initial, residual)


def refine_transmission(t_initial: Tensor, I: Tensor, refiner: TransmissionRefiner) -> Tensor:
    return refiner.forward(t_initial, I)


def refine_loss(t_refined: Tensor, t_gt: Tensor, lambda_edge: float = 0.1) -> Tensor:
    """Mean squared pixel error plus edge-keeping term on forward differences."""
    pix = T.square(t_refined - t_gt).mean()
    ry, rx = T.spatial_gradient(t_refined)
    gy, gx = T.spatial_gradient(t_gt)
    edge = T.square(ry - gy).mean() + T.square(rx - gx).mean()
    return pix + lambda_edge * edge


class PhysicsParamEstimator:
    """Estimates (beta, A) from the hazy image plus fused multi-scale features.

    beta = sigmoid(pool(conv_b([F_global, F_multi]))) * beta_max;
    A = clip(conv_A(pool(F_multi)), A_MIN, A_MAX), per channel;
    F_multi = sum_s softmax(w)_s * conv_s(F) over scales {1, 2, 4}.
    The feature stack runs on a downsampled copy of the image.
    """

    SCALES = (1, 2, 4)

    def __init__(self, store: ParamStore, rng, beta_max: float = 2.5,
                 downsample: int = 4, prefix: str = "phys"):
        self.beta_max = beta_max
        self.downsample = downsample
        ch = (3, 16, 32, 32, 32)
        self.backbone = [add_conv(store, rng, f"{prefix}.backbone{i}", 3, 3, ch[i], ch[i + 1])
                         for i in range(4)]
        self.scale_convs = [add_conv(store, rng, f"{prefix}.scale{s}", 3, 3, 32, 32)
                            for s in self.SCALES]
        self.scale_logits = store.add(f"{prefix}.scale_logits", np.zeros(len(self.SCALES)),
                                      kind="scalar")
        self.beta_head = add_conv(store, rng, f"{prefix}.beta_head", 1, 1, 64, 1)
        self.a_head = add_conv(store, rng, f"{prefix}.a_head", 1, 1, 32, 3)

    def features(self, I: Tensor) -> Tensor:
        x = T.avg_pool2d(I, self.downsample) if self.downsample > 1 else I
        for w, b in self.backbone:
            x = conv_layer(x, w, b)
        return x

    def multi_scale(self, F: Tensor) -> Tensor:
        weights = T.softmax(self.scale_logits)
        h, w = F.shape[1], F.shape[2]
        parts = []
        for i, s in enumerate(self.SCALES):
            if s == 1:
                y = conv_layer(F, *self.scale_convs[i], act=False)
            else:
                y = conv_layer(T.avg_pool2d(F, s), *self.scale_convs[i], act=False)
                y = T.upsample_nearest2d(y, s, s)
            parts.append(y * weights[i:i + 1])
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out

    def forward(self, I: Tensor):
        F = self.features(I)
        f_multi = self.multi_scale(F)
        h, w = f_multi.shape[1], f_multi.shape[2]
        f_global = T.upsample_nearest2d(T.global_avg_pool(f_multi), h, w)
        beta_map = T.conv2d(T.concat([f_global, f_multi], axis=3), *self.beta_head)
        beta = T.sigmoid(T.global_avg_pool(beta_map)) * self.beta_max   # (B,1,1,1)
        A = T.clamp(T.conv2d(T.global_avg_pool(f_multi), *self.a_head), A_MIN, A_MAX)  # (B,1,1,3)
        return beta, A, f_multi


def estimate_params(I: Tensor, estimator: PhysicsParamEstimator):
    return estimator.forward(I)
