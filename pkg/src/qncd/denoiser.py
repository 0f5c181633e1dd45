"""Noise-prediction network, analytic Gaussian-mixture denoiser, and a manual-gradient trainer.

The network is a stack of residual blocks. Each block projects its input,
applies SiLU, group-normalizes, and fuses the timestep embedding in one of
two ways:

* ``scale_shift``:   f = (norm(h) * gamma + beta) * (1 + scale_t) + shift_t
* ``add_groupnorm``: f = norm(h + emb_proj_t) * gamma + beta

then projects ``f`` out (``w_out``) with an optional residual add.

Hook points, in execution order per block ``i``::

    blocks.i.in       input of w_in
    blocks.i.emb      input of emb_layer (sinusoidal embedding)
    blocks.i.emb_out  emb_layer output (scale/shift or additive projection)
    blocks.i.fused    post-fusion activation, input of w_out

A hook is a callable ``hook(name, x) -> x``; weight hooks ``weight_hook(name, W) -> W``
see ``blocks.i.w_in``, ``blocks.i.emb_layer`` and ``blocks.i.w_out``.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import DTYPE, Rng, ShapeError, as_tensor
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

NORM_EPS = 1e-5
FORMAT_NAME = "qncd-denoiser"
FORMAT_VERSION = 1

Hook = Callable[[str, np.ndarray], np.ndarray]


class FusionStyle(str, Enum):
    SCALE_SHIFT = "scale_shift"
    ADD_GROUPNORM = "add_groupnorm"


PARAM_NAMES = ("w_in", "b_in", "emb_layer", "b_emb", "norm_gamma", "norm_beta", "w_out", "b_out")
WEIGHT_NAMES = ("w_in", "emb_layer", "w_out")
HOOK_NAMES = ("in", "emb", "emb_out", "fused")


@dataclass
class ResBlock:
    w_in: np.ndarray        # [c_in, c]
    b_in: np.ndarray        # [c]
    emb_layer: np.ndarray   # [emb_dim, 2c] (scale_shift) or [emb_dim, c] (add_groupnorm)
    b_emb: np.ndarray
    norm_gamma: np.ndarray  # [c]
    norm_beta: np.ndarray   # [c]
    w_out: np.ndarray       # [c, c_out]
    b_out: np.ndarray       # [c_out]
    style: FusionStyle
    skip: bool
    groups: int = 4
    # per-channel divisor applied to the fused activation (set by folding)
    smooth: Optional[np.ndarray] = None

    def __post_init__(self):
        self.style = FusionStyle(self.style)
        c = self.width
        emb_out = 2 * c if self.style is FusionStyle.SCALE_SHIFT else c
        if self.emb_layer.shape[1] != emb_out:
            raise ShapeError("ResBlock.emb_layer", self.emb_layer.shape, (self.emb_layer.shape[0], emb_out))
        if self.w_out.shape[0] != c:
            raise ShapeError("ResBlock.w_out", self.w_out.shape, (c, self.w_out.shape[1]))
        if self.skip and self.c_in != self.c_out:
            raise ValueError(f"skip requires c_in == c_out, got {self.c_in} and {self.c_out}")
        if c % self.groups:
            raise ValueError(f"width {c} not divisible by {self.groups} groups")

    @property
    def width(self) -> int:
        return self.w_in.shape[1]

    @property
    def c_in(self) -> int:
        return self.w_in.shape[0]

    @property
    def c_out(self) -> int:
        return self.w_out.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "ResBlock":
        kw = {k: v.copy() for k, v in self.params().items()}
        if self.smooth is not None:
            kw["smooth"] = self.smooth.copy()
        return replace(self, **kw)


@dataclass
class DenoiserModel:
    blocks: list[ResBlock]
    emb_dim: int
    dim: int
    max_period: float = 10000.0

    def forward(self, x, t, hook: Optional[Hook] = None,
                weight_hook: Optional[Hook] = None) -> np.ndarray:
        return forward(self, x, t, hook=hook, weight_hook=weight_hook)

    __call__ = forward

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, b in enumerate(self.blocks):
            for k, v in b.params().items():
                out[f"blocks.{i}.{k}"] = v
        return out

    def hook_names(self) -> list[str]:
        return [f"blocks.{i}.{h}" for i in range(len(self.blocks)) for h in HOOK_NAMES]

    def weight_names(self) -> list[str]:
        return [f"blocks.{i}.{w}" for i in range(len(self.blocks)) for w in WEIGHT_NAMES]

    def copy(self) -> "DenoiserModel":
        return replace(self, blocks=[b.copy() for b in self.blocks])

    def architecture(self) -> dict:
        return {
            "dim": self.dim,
            "emb_dim": self.emb_dim,
            "max_period": self.max_period,
            "blocks": [
                {"c_in": b.c_in, "width": b.width, "c_out": b.c_out, "style": b.style.value,
                 "skip": b.skip, "groups": b.groups}
                for b in self.blocks
            ],
        }

    def architecture_hash(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# forward pieces


def sinusoidal_embedding(t, emb_dim: int, max_period: float = 10000.0) -> np.ndarray:
    """``[sin(t f_k), cos(t f_k)]`` with ``f_k = max_period ** (-k / half)``.

    ``t`` may be a scalar (returns ``[emb_dim]``) or a 1-D array (returns ``[n, emb_dim]``).
    """
    if emb_dim % 2:
        raise ValueError(f"emb_dim must be even, got {emb_dim}")
    half = emb_dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=DTYPE) / half)
    ts = np.asarray(t, dtype=DTYPE)
    args = ts[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def silu(a: np.ndarray) -> np.ndarray:
    return a / (1.0 + np.exp(-a))


def group_norm(x: np.ndarray, groups: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalize each group of channels per row; returns ``(xhat, inv_std)``."""
    n, c = x.shape
    xg = x.reshape(n, groups, c // groups)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    return ((xg - mu) * inv).reshape(n, c), inv


def _group_norm_backward(dxhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray, groups: int) -> np.ndarray:
    n, c = dxhat.shape
    dg = dxhat.reshape(n, groups, c // groups)
    xg = xhat.reshape(n, groups, c // groups)
    dx = inv * (dg - dg.mean(axis=-1, keepdims=True) - xg * (dg * xg).mean(axis=-1, keepdims=True))
    return dx.reshape(n, c)


def _identity(name, x):
    return x


def resblock_forward(block: ResBlock, h, emb, hook: Optional[Hook] = None,
                     weight_hook: Optional[Hook] = None, prefix: str = "block",
                     cache: Optional[dict] = None) -> np.ndarray:
    """One residual block; ``h`` is ``[n, c_in]``, ``emb`` is ``[emb_dim]`` or ``[n, emb_dim]``."""
    hook = hook or _identity
    wq = weight_hook or _identity
    h = as_tensor(h)
    if h.ndim != 2 or h.shape[1] != block.c_in:
        raise ShapeError(f"{prefix}.in", h.shape, (h.shape[0] if h.ndim else -1, block.c_in))
    emb = np.broadcast_to(as_tensor(emb), (h.shape[0], block.emb_layer.shape[0]))
    c = block.width

    a_in = hook(f"{prefix}.in", h)
    pre = a_in @ wq(f"{prefix}.w_in", block.w_in) + block.b_in
    u = silu(pre)

    e = hook(f"{prefix}.emb", emb)
    p = hook(f"{prefix}.emb_out", e @ wq(f"{prefix}.emb_layer", block.emb_layer) + block.b_emb)

    if block.style is FusionStyle.SCALE_SHIFT:
        xhat, inv = group_norm(u, block.groups)
        n = xhat * block.norm_gamma + block.norm_beta
        scale, shift = p[:, :c], p[:, c:]
        f = n * (1.0 + scale) + shift
    else:
        xhat, inv = group_norm(u + p, block.groups)
        n = None
        scale = None
        f = xhat * block.norm_gamma + block.norm_beta

    if block.smooth is not None:
        f = f / block.smooth
    g = hook(f"{prefix}.fused", f)
    out = g @ wq(f"{prefix}.w_out", block.w_out) + block.b_out
    if block.skip:
        out = out + h

    if cache is not None:
        cache.update(h=a_in, pre=pre, e=e, xhat=xhat, inv=inv, n=n, scale=scale, g=g)
    return out


def resblock_backward(block: ResBlock, cache: dict, dout: np.ndarray) -> tuple[np.ndarray, dict]:
    """Gradients of a full-precision block; returns ``(d_input, param_grads)``."""
    grads = {}
    g = cache["g"]
    grads["w_out"] = g.T @ dout
    grads["b_out"] = dout.sum(axis=0)
    df = dout @ block.w_out.T
    if block.smooth is not None:
        df = df / block.smooth

    xhat, inv = cache["xhat"], cache["inv"]
    if block.style is FusionStyle.SCALE_SHIFT:
        n, scale = cache["n"], cache["scale"]
        dn = df * (1.0 + scale)
        dp = np.concatenate([df * n, df], axis=1)
        grads["norm_gamma"] = (dn * xhat).sum(axis=0)
        grads["norm_beta"] = dn.sum(axis=0)
        du = _group_norm_backward(dn * block.norm_gamma, xhat, inv, block.groups)
    else:
        grads["norm_gamma"] = (df * xhat).sum(axis=0)
        grads["norm_beta"] = df.sum(axis=0)
        du = _group_norm_backward(df * block.norm_gamma, xhat, inv, block.groups)
        dp = du

    grads["emb_layer"] = cache["e"].T @ dp
    grads["b_emb"] = dp.sum(axis=0)

    pre = cache["pre"]
    sig = 1.0 / (1.0 + np.exp(-pre))
    dpre = du * (sig + pre * sig * (1.0 - sig))
    grads["w_in"] = cache["h"].T @ dpre
    grads["b_in"] = dpre.sum(axis=0)
    dh = dpre @ block.w_in.T
    if block.skip:
        dh = dh + dout
    return dh, grads


def forward(model: DenoiserModel, x, t, hook: Optional[Hook] = None,
            weight_hook: Optional[Hook] = None, caches: Optional[list] = None) -> np.ndarray:
    """Predict the noise in ``x`` (``[n, dim]``) at timestep(s) ``t``."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ShapeError("forward", x.shape, ("n", model.dim))
    emb = sinusoidal_embedding(t, model.emb_dim, model.max_period)
    h = x
    for i, block in enumerate(model.blocks):
        cache = {} if caches is not None else None
        h = resblock_forward(block, h, emb, hook, weight_hook, f"blocks.{i}", cache)
        if caches is not None:
            caches.append(cache)
    return h


def loss_and_grads(model: DenoiserModel, x, t, target) -> tuple[float, dict[str, np.ndarray]]:
    """Mean-squared eps error and its gradient for every parameter."""
    caches: list = []
    out = forward(model, x, t, caches=caches)
    diff = out - target
    loss = float(np.mean(diff * diff))
    d = 2.0 * diff / diff.size
    grads = {}
    for i in reversed(range(len(model.blocks))):
        d, g = resblock_backward(model.blocks[i], caches[i], d)
        for k, v in g.items():
            grads[f"blocks.{i}.{k}"] = v
    return loss, grads


# ---------------------------------------------------------------------------
# construction


def init_block(c_in: int, width: int, c_out: int, emb_dim: int, style: FusionStyle,
               gen: np.random.Generator, skip: bool | None = None, groups: int = 4,
               out_gain: float = 1.0) -> ResBlock:
    style = FusionStyle(style)
    emb_out = 2 * width if style is FusionStyle.SCALE_SHIFT else width
    return ResBlock(
        w_in=gen.standard_normal((c_in, width)) * math.sqrt(2.0 / c_in),
        b_in=np.zeros(width),
        emb_layer=gen.standard_normal((emb_dim, emb_out)) * (0.5 / math.sqrt(emb_dim)),
        b_emb=np.zeros(emb_out),
        norm_gamma=np.ones(width),
        norm_beta=np.zeros(width),
        w_out=gen.standard_normal((width, c_out)) * (out_gain / math.sqrt(width)),
        b_out=np.zeros(c_out),
        style=style,
        skip=(c_in == c_out) if skip is None else skip,
        groups=groups,
    )


def init_model(dim: int = 2, hidden: int = 64, emb_dim: int = 32, n_blocks: int = 3,
               styles: FusionStyle | str | list = FusionStyle.SCALE_SHIFT, seed: int = 0,
               groups: int = 4, max_period: float = 10000.0) -> DenoiserModel:
    """Blocks map ``dim -> hidden -> ... -> hidden -> dim``; hidden-to-hidden blocks are residual."""
    if n_blocks < 2:
        raise ValueError("need at least two blocks")
    if isinstance(styles, (str, FusionStyle)):
        styles = [styles] * n_blocks
    if len(styles) != n_blocks:
        raise ValueError(f"got {len(styles)} styles for {n_blocks} blocks")
    gen = Rng(seed).stream("init")
    blocks = []
    for i in range(n_blocks):
        c_in = dim if i == 0 else hidden
        c_out = dim if i == n_blocks - 1 else hidden
        gain = 0.5 if c_out == hidden else 1.0
        blocks.append(init_block(c_in, hidden, c_out, emb_dim, styles[i], gen, groups=groups, out_gain=gain))
    return DenoiserModel(blocks, emb_dim, dim, max_period)


def inject_imbalance(model: DenoiserModel, factor: float = 8.0, n_channels: int = 4,
                     seed: int = 0, blocks: Optional[list[int]] = None) -> tuple[DenoiserModel, dict]:
    """Blow up a few fused channels per block by ``factor`` without changing the function.

    scale_shift blocks get the amplification through emb_layer
    (``1 + scale' = factor * (1 + scale)``, ``shift' = factor * shift``),
    add_groupnorm blocks through the norm affine; ``w_out`` rows are divided by
    ``factor`` so the full-precision output is unchanged.
    Returns the new model and ``{block_index: channel list}``.
    """
    out = model.copy()
    gen = Rng(seed).stream("inject")
    chosen = {}
    for i, b in enumerate(out.blocks):
        if blocks is not None and i not in blocks:
            continue
        c = b.width
        ch = np.sort(gen.choice(c, size=min(n_channels, c), replace=False))
        if b.style is FusionStyle.SCALE_SHIFT:
            b.emb_layer[:, ch] *= factor
            b.b_emb[ch] = factor * b.b_emb[ch] + (factor - 1.0)
            b.emb_layer[:, c + ch] *= factor
            b.b_emb[c + ch] *= factor
        else:
            b.norm_gamma[ch] *= factor
            b.norm_beta[ch] *= factor
        b.w_out[ch, :] /= factor
        chosen[i] = ch.tolist()
    return out, chosen


# ---------------------------------------------------------------------------
# data and analytic oracle


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray   # [K]
    means: np.ndarray     # [K, d]
    stds: np.ndarray      # [K]

    def __post_init__(self):
        w = as_tensor(self.weights)
        mu = np.atleast_2d(as_tensor(self.means))
        sd = as_tensor(self.stds).reshape(-1)
        if not (w.ndim == 1 and w.size == mu.shape[0] == sd.size):
            raise ValueError("weights, means and stds disagree on the component count")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(sd <= 0):
            raise ValueError("stds must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", sd)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, gen: np.random.Generator) -> np.ndarray:
        k = gen.choice(self.weights.size, size=n, p=self.weights)
        return self.means[k] + self.stds[k, None] * gen.standard_normal((n, self.dim))

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "stds": self.stds.tolist()}


def posterior_responsibilities(x_t, t: int, gmm: GaussianMixture, s: NoiseSchedule) -> np.ndarray:
    x = np.atleast_2d(as_tensor(x_t))
    ab = s.alpha_bar[s.check(t)]
    var = ab * gmm.stds**2 + (1.0 - ab)                      # [K]
    d2 = ((x[:, None, :] - np.sqrt(ab) * gmm.means[None]) ** 2).sum(-1)  # [n, K]
    logp = np.log(gmm.weights) - 0.5 * d2 / var - 0.5 * gmm.dim * np.log(2 * np.pi * var)
    logp -= logp.max(axis=1, keepdims=True)
    r = np.exp(logp)
    return r / r.sum(axis=1, keepdims=True)


def posterior_mean_x0(x_t, t: int, gmm: GaussianMixture, s: NoiseSchedule) -> np.ndarray:
    x = np.atleast_2d(as_tensor(x_t))
    if x.shape[1] != gmm.dim:
        raise ShapeError("posterior_mean_x0", x.shape, ("n", gmm.dim))
    ab = s.alpha_bar[s.check(t)]
    var = ab * gmm.stds**2 + (1.0 - ab)
    r = posterior_responsibilities(x, t, gmm, s)
    m = (np.sqrt(ab) * gmm.stds[None, :, None] ** 2 * x[:, None, :]
         + (1.0 - ab) * gmm.means[None]) / var[None, :, None]  # [n, K, d]
    return (r[:, :, None] * m).sum(axis=1)


def analytic_eps(x_t, t: int, gmm: GaussianMixture, s: NoiseSchedule) -> np.ndarray:
    """Bayes-optimal noise prediction E[eps | x_t] for Gaussian-mixture data."""
    x = np.atleast_2d(as_tensor(x_t))
    ab = s.alpha_bar[s.check(t)]
    return (x - np.sqrt(ab) * posterior_mean_x0(x, t, gmm, s)) / np.sqrt(1.0 - ab)


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")


@dataclass
class TrainOptions:
    lr: float = 0.02
    batch_size: int = 256
    iterations: int = 6000
    seed: int = 0
    momentum: float = 0.9
    # cosine decay to lr * final_lr_frac
    final_lr_frac: float = 0.05
    grad_clip: float = 1.0


@dataclass
class TrainResult:
    model: DenoiserModel
    losses: list[float] = field(default_factory=list)


def diffusion_batch(gmm: GaussianMixture, s: NoiseSchedule, n: int,
                    gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw ``(x_t, t, eps)`` with t uniform on 1..T."""
    x0 = gmm.sample(n, gen)
    t = gen.integers(1, s.T + 1, size=n)
    eps = gen.standard_normal(x0.shape)
    ab = s.alpha_bar[t][:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, t, eps


def train(model: DenoiserModel, gmm: GaussianMixture, s: NoiseSchedule,
          opts: TrainOptions = TrainOptions()) -> TrainResult:
    """SGD with momentum on the simple eps-prediction loss. The input model is not modified."""
    model = model.copy()
    if opts.iterations == 0:
        return TrainResult(model, [])
    gen = Rng(opts.seed).stream("train")
    params = model.named_params()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    losses = []
    for it in range(opts.iterations):
        x, t, eps = diffusion_batch(gmm, s, opts.batch_size, gen)
        loss, grads = loss_and_grads(model, x, t, eps)
        if not np.isfinite(loss):
            raise TrainingDiverged(it, loss)
        losses.append(loss)
        gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        clip = min(1.0, opts.grad_clip / gnorm) if opts.grad_clip and gnorm > 0 else 1.0
        frac = opts.final_lr_frac + (1 - opts.final_lr_frac) * 0.5 * (1 + math.cos(math.pi * it / opts.iterations))
        lr = opts.lr * frac
        for k, p in params.items():
            v = velocity[k]
            v *= opts.momentum
            v -= lr * clip * grads[k]
            p += v
        if it % 1000 == 0:
            log.debug("iter %d loss %.5f", it, loss)
    return TrainResult(model, losses)


# ---------------------------------------------------------------------------
# persistence


def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").astype(DTYPE).reshape(shape)


def model_to_dict(model: DenoiserModel) -> dict:
    arch = model.architecture()
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "architecture_hash": model.architecture_hash(),
        "architecture": arch,
        "params": [
            {"name": name, "shape": list(arr.shape), "data": _encode(arr)}
            for name, arr in model.named_params().items()
        ],
    }


def model_from_dict(doc: dict) -> DenoiserModel:
    if doc.get("format") != FORMAT_NAME:
        raise ValueError(f"not a {FORMAT_NAME} container")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {doc.get('version')}")
    arch = doc["architecture"]
    params = {p["name"]: _decode(p["data"], p["shape"]) for p in doc["params"]}
    blocks = []
    for i, b in enumerate(arch["blocks"]):
        kw = {k: params[f"blocks.{i}.{k}"] for k in PARAM_NAMES}
        blocks.append(ResBlock(**kw, style=b["style"], skip=b["skip"], groups=b["groups"]))
    model = DenoiserModel(blocks, arch["emb_dim"], arch["dim"], arch["max_period"])
    if model.architecture_hash() != doc["architecture_hash"]:
        raise ValueError("architecture hash mismatch; container is corrupt or from another build")
    return model


def save_model(model: DenoiserModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path: str | Path) -> DenoiserModel:
    return model_from_dict(json.loads(Path(path).read_text()))
