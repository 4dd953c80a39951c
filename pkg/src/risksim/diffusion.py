"""Denoising-diffusion machinery for joint trajectory windows.

Contents: the noise schedule, closed-form forward noising, guided reverse
sampling with first-state inpainting and low-temperature noise scaling, the
pluggable noise-predictor interface, an analytic Gaussian oracle predictor
used for sampler validation, and a small fully-connected reference predictor
trained with the condition-dropout objective.

The sampler and all predictors operate in a normalized model space; each
predictor carries the affine map between world coordinates and model space.
"""

from __future__ import annotations

import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from .safety import RiskParams, risk_from_pet, window_pet_values
from .scene import JointTrajectory, Recording, RiskLevel, SceneConfig, fmt9, slice_window


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    """Per-step noising variances and the derived cumulative products.

    Arrays are indexed directly by step k in 1..num_steps; index 0 holds the
    conventional base values (beta 0, alpha_bar 1, posterior variance 0).
    """

    kind: str
    num_steps: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    def __post_init__(self):
        K = self.num_steps
        for name in ("betas", "alpha_bars", "posterior_vars"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (K + 1,):
                raise ValueError(f"{name} must have shape ({K + 1},)")
            setattr(self, name, arr)
        b = self.betas[1:]
        if not ((b > 0) & (b < 1)).all():
            raise ValueError("betas must lie strictly in (0, 1)")
        if not (np.diff(self.alpha_bars) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")
        if not self.alpha_bars[-1] < 0.01:
            raise ValueError("terminal alpha_bar must be below 0.01")


def make_schedule(kind: str = "cosine", num_steps: int = 100) -> NoiseSchedule:
    """Build a noise schedule; cosine is the default, linear is scaled to K."""
    if num_steps < 2:
        raise ValueError("num_steps must be >= 2")
    K = num_steps
    if kind == "cosine":
        s = 0.008
        i = np.arange(K + 1)
        f = np.cos(((i / K + s) / (1 + s)) * (math.pi / 2)) ** 2
        raw_betas = 1.0 - f[1:] / f[:-1]
    elif kind == "linear":
        scale = 1000.0 / K
        raw_betas = np.linspace(1e-4 * scale, 0.02 * scale, K)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = _cap_betas(raw_betas)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    betas = np.concatenate([[0.0], betas])
    posterior = np.zeros(K + 1)
    posterior[1:] = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:]
    return NoiseSchedule(kind, K, betas, alpha_bars, posterior)


def _cap_betas(raw: np.ndarray, terminal: float = 0.009) -> np.ndarray:
    """Clip per-step variances as low as the terminal constraint allows.

    Large betas amplify noise-prediction error by 1/sqrt(1-beta) per reverse
    step, which destabilizes sampling with learned predictors; the binary
    search finds the smallest cap that still drives the terminal alpha_bar
    to the target.
    """

    def terminal_for(cap):
        return float(np.prod(1.0 - np.clip(raw, 1e-8, cap)))

    lo, hi = 1e-4, 1.0 - 1e-6
    if terminal_for(hi) > terminal:
        raise ValueError("schedule cannot reach the terminal noise level")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if terminal_for(mid) <= terminal:
            hi = mid
        else:
            lo = mid
    return np.clip(raw, 1e-8, hi)


def forward_noise(
    tau0: np.ndarray,
    k: int,
    eps: np.ndarray,
    sched: NoiseSchedule,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Closed-form marginal of the forward noising process at step k."""
    tau0 = np.asarray(tau0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if tau0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tau0.shape} vs {eps.shape}")
    if not 1 <= k <= sched.num_steps:
        raise ValueError(f"step k={k} outside 1..{sched.num_steps}")
    ab = sched.alpha_bars[k]
    out = math.sqrt(ab) * tau0 + math.sqrt(1.0 - ab) * eps
    if mask is not None:
        out = np.where(np.asarray(mask, dtype=bool)[..., None], out, 0.0)
    return out


def denoise_step(
    tau_k: np.ndarray, eps_hat: np.ndarray, k: int, sched: NoiseSchedule
) -> tuple[np.ndarray, float]:
    """Posterior mean and fixed variance of one reverse step."""
    if not 1 <= k <= sched.num_steps:
        raise ValueError(f"step k={k} outside 1..{sched.num_steps}")
    b = sched.betas[k]
    ab = sched.alpha_bars[k]
    mu = (tau_k - b / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(1.0 - b)
    return mu, float(sched.posterior_vars[k])


def analytic_eps(
    mean: np.ndarray, var: float, tau_k: np.ndarray, k: int, sched: NoiseSchedule
) -> np.ndarray:
    """Exact conditional expectation of the injected noise when the clean
    data is Gaussian with the given mean and isotropic variance."""
    if not var > 0:
        raise ValueError("variance must be positive")
    ab = sched.alpha_bars[k]
    denom = ab * var + 1.0 - ab
    return math.sqrt(1.0 - ab) * (tau_k - math.sqrt(ab) * np.asarray(mean)) / denom


# ---------------------------------------------------------------------------
# Predictor interface
# ---------------------------------------------------------------------------

def window_anchors(data: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-agent anchor state: the first present row, with unit heading.

    Absent agents anchor at the origin pose so their zero-filled rows stay
    zero through the codec.
    """
    n = data.shape[0]
    anchors = np.tile([0.0, 0.0, 1.0, 0.0], (n, 1))
    for i in range(n):
        present = np.flatnonzero(mask[i])
        if present.size:
            x, y, c, s = data[i, present[0]]
            norm = math.hypot(c, s)
            c, s = (c / norm, s / norm) if norm > 1e-12 else (1.0, 0.0)
            anchors[i] = (x, y, c, s)
    return anchors


@dataclass(frozen=True)
class WindowCodec:
    """Map between world windows and the ego-anchored model space.

    Each agent's window is expressed relative to its anchor (its first
    present state): positions become displacements rotated into the anchor
    heading frame, headings become rotations relative to the anchor heading.
    The four resulting dimensions are z-scored. In this space forward motion
    is canonically along +x, so speed differences appear as plain mean
    shifts instead of direction-averaged spread.
    """

    mean: np.ndarray
    std: np.ndarray

    # std floors keep rare large turns representable without enormous z values
    STD_FLOOR = np.array([0.5, 0.5, 0.1, 0.1])

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(4))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=float).reshape(4))
        if not (self.std > 0).all():
            raise ValueError("std must be positive")

    def encode(self, data: np.ndarray, mask: np.ndarray, anchors: np.ndarray) -> np.ndarray:
        data = np.asarray(data, dtype=float)
        ax, ay = anchors[:, 0, None], anchors[:, 1, None]
        ac, a_s = anchors[:, 2, None], anchors[:, 3, None]
        wx = data[:, :, 0] - ax
        wy = data[:, :, 1] - ay
        rel = np.empty_like(data)
        rel[:, :, 0] = ac * wx + a_s * wy
        rel[:, :, 1] = -a_s * wx + ac * wy
        rel[:, :, 2] = ac * data[:, :, 2] + a_s * data[:, :, 3]
        rel[:, :, 3] = ac * data[:, :, 3] - a_s * data[:, :, 2]
        z = (rel - self.mean) / self.std
        return np.where(np.asarray(mask, dtype=bool)[..., None], z, 0.0)

    def decode(self, z: np.ndarray, mask: np.ndarray, anchors: np.ndarray) -> np.ndarray:
        rel = np.asarray(z, dtype=float) * self.std + self.mean
        ax, ay = anchors[:, 0, None], anchors[:, 1, None]
        ac, a_s = anchors[:, 2, None], anchors[:, 3, None]
        out = np.empty_like(rel)
        out[:, :, 0] = ax + ac * rel[:, :, 0] - a_s * rel[:, :, 1]
        out[:, :, 1] = ay + a_s * rel[:, :, 0] + ac * rel[:, :, 1]
        out[:, :, 2] = ac * rel[:, :, 2] - a_s * rel[:, :, 3]
        out[:, :, 3] = a_s * rel[:, :, 2] + ac * rel[:, :, 3]
        return np.where(np.asarray(mask, dtype=bool)[..., None], out, 0.0)


def fit_codec(windows: list[JointTrajectory]) -> WindowCodec:
    """Codec statistics over the anchored representation of a window set."""
    raw = WindowCodec(np.zeros(4), np.ones(4))
    rows = []
    for w in windows:
        if not w.mask.any():
            continue
        anchors = window_anchors(w.data, w.mask)
        rows.append(raw.encode(w.data, w.mask, anchors)[w.mask])
    if not rows:
        raise ValueError("no present states to fit a codec")
    stacked = np.concatenate(rows, axis=0)
    std = np.maximum(stacked.std(axis=0), WindowCodec.STD_FLOOR)
    return WindowCodec(stacked.mean(axis=0), std)


class NoisePredictor(ABC):
    """Noise model queried by the sampler, operating in model space.

    Implementations must be deterministic for fixed inputs and must accept
    both a concrete risk condition and the unconditional marker. The anchors
    argument carries the clean per-agent anchor states for predictors whose
    model space is anchored.
    """

    @abstractmethod
    def predict(
        self,
        noisy: np.ndarray,
        condition: RiskLevel,
        k: int,
        mask: np.ndarray | None = None,
        anchors: np.ndarray | None = None,
    ) -> np.ndarray:
        """Estimate the injected noise for a (N, T, 4) model-space array."""

    @property
    def codec(self) -> WindowCodec | None:
        """Model-space codec, or None when the predictor works on raw arrays."""
        return None


class AnalyticGaussianPredictor(NoisePredictor):
    """Optimal noise estimate for Gaussian data; a sampler validation oracle."""

    def __init__(self, mean: np.ndarray, var: float, sched: NoiseSchedule):
        if not var > 0:
            raise ValueError("variance must be positive")
        self.mean = np.asarray(mean, dtype=float)
        self.var = float(var)
        self.sched = sched

    def predict(self, noisy, condition, k, mask=None, anchors=None):
        return analytic_eps(self.mean, self.var, noisy, k, self.sched)


def guided_noise(
    pred: NoisePredictor,
    tau_k: np.ndarray,
    risk: RiskLevel,
    k: int,
    omega: float,
    mask: np.ndarray | None = None,
    anchors: np.ndarray | None = None,
) -> np.ndarray:
    """Classifier-free guided noise: unconditional plus omega times the
    conditional-minus-unconditional direction."""
    if risk.is_unconditional:
        raise ValueError("guided sampling needs a concrete risk condition")
    if omega == 1.0:
        return pred.predict(tau_k, risk, k, mask, anchors)
    eps_u = pred.predict(tau_k, RiskLevel.unconditional(), k, mask, anchors)
    if omega == 0.0:
        return eps_u
    eps_c = pred.predict(tau_k, risk, k, mask, anchors)
    return eps_u + omega * (eps_c - eps_u)


# ---------------------------------------------------------------------------
# Sampler
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    """Guidance scale, low-temperature factor, and step count."""

    omega: float = 1.5
    alpha: float = 0.5
    num_steps: int = 100

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1] (production uses (0, 1])")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if self.num_steps < 2:
            raise ValueError("num_steps must be >= 2")


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_free(
    pred: NoisePredictor,
    shape: tuple[int, ...],
    risk: RiskLevel,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    seed,
    mask: np.ndarray | None = None,
    inpaint: np.ndarray | None = None,
    anchors: np.ndarray | None = None,
    on_step=None,
) -> np.ndarray:
    """Ancestral sampling loop in model space.

    When inpaint is given, its rows overwrite slot t=0 of present agents
    before every predictor call and after every stochastic step. Initial and
    per-step noise draws are scaled by sqrt(alpha). Deterministic given seed.
    """
    if cfg.num_steps != sched.num_steps:
        raise ValueError("sampler and schedule step counts differ")
    rng = _as_rng(seed)
    sqrt_alpha = math.sqrt(cfg.alpha)
    mask_col = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        mask_col = mask[..., None]

    def _constrain(tau):
        if mask_col is not None:
            tau = np.where(mask_col, tau, 0.0)
        if inpaint is not None:
            present = mask[:, 0] if mask is not None else slice(None)
            tau[present, 0, :] = inpaint[present]
        return tau

    tau = _constrain(sqrt_alpha * rng.standard_normal(shape))
    if on_step is not None:
        on_step(sched.num_steps, tau)
    for k in range(sched.num_steps, 0, -1):
        eps_hat = guided_noise(pred, tau, risk, k, cfg.omega, mask, anchors)
        mu, var = denoise_step(tau, eps_hat, k, sched)
        noise = rng.standard_normal(shape)
        tau = _constrain(mu + math.sqrt(cfg.alpha * var) * noise)
        if on_step is not None:
            on_step(k - 1, tau)
    return tau


def sample(
    pred: NoisePredictor,
    current: np.ndarray,
    present: np.ndarray,
    risk: RiskLevel,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    horizon: int,
    dt: float,
    seed,
    on_step=None,
) -> JointTrajectory:
    """Sample a joint future window anchored at the current scene state.

    Slot t=0 of the result equals the given current states exactly; the
    remaining steps are generated conditioned on the risk level.
    """
    current = np.asarray(current, dtype=float)
    present = np.asarray(present, dtype=bool)
    if current.ndim != 2 or current.shape[1] != 4:
        raise ValueError("current states must have shape (N, 4)")
    if present.shape != (current.shape[0],):
        raise ValueError("present mask must have shape (N,)")
    if not present.any():
        raise ValueError("at least one agent must be present")
    if horizon < 2:
        raise ValueError("horizon must be >= 2")

    codec = pred.codec
    n = current.shape[0]
    mask = np.repeat(present[:, None], horizon, axis=1)
    if codec is not None:
        anchors = window_anchors(current[:, None, :], present[:, None])
        inpaint = codec.encode(current[:, None, :], present[:, None], anchors)[:, 0, :]
    else:
        anchors = None
        inpaint = current
    z = sample_free(
        pred,
        (n, horizon, 4),
        risk,
        cfg,
        sched,
        seed,
        mask=mask,
        inpaint=inpaint,
        anchors=anchors,
        on_step=on_step,
    )
    if codec is not None:
        data = codec.decode(z, mask, anchors)
    else:
        data = np.where(mask[..., None], z, 0.0)
    data[present, 0, :] = current[present]
    return JointTrajectory(data, mask, dt)


# ---------------------------------------------------------------------------
# Reference predictor
# ---------------------------------------------------------------------------

def step_embedding(k: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the diffusion step index."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = k * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


class ToyPredictor(NoisePredictor):
    """Small fully-connected noise model over per-agent window features.

    Each present agent is scored from its own anchored window, the mean
    pooled anchored windows of all present agents, its anchor pose, and the
    relative anchor poses of its nearest neighbors; a sinusoidal step
    embedding and a learned risk embedding are concatenated to the input and
    also injected into every hidden layer, so the condition can steer the
    whole network. The risk embedding is all zeros for the unconditional
    branch. Pooling and nearest-neighbor selection keep the model
    equivariant under agent permutation.
    """

    PARAM_NAMES = (
        "w1", "b1", "we1", "w2", "b2", "we2", "w3", "b3",
        "wr1", "br1", "wr2", "br2",
    )
    N_NEIGHBORS = 2
    NEIGHBOR_SCALE = 10.0  # m, softens raw relative-anchor coordinates
    ANCHOR_POS_SCALE = 15.0  # m, scales absolute anchor positions

    def __init__(
        self,
        horizon: int = 8,
        hidden: int = 128,
        step_dim: int = 16,
        risk_dim: int = 16,
        codec: WindowCodec | None = None,
        seed: int = 0,
        params: dict | None = None,
    ):
        if horizon < 2:
            raise ValueError("horizon must be >= 2")
        self.horizon = horizon
        self.hidden = hidden
        self.step_dim = step_dim
        self.risk_dim = risk_dim
        self._codec = codec or WindowCodec(np.zeros(4), np.ones(4))
        self.flat_dim = horizon * 4
        self.emb_dim = step_dim + risk_dim
        # own window, pooled context, own anchor, neighbors, agent count, emb
        self.in_dim = (
            2 * self.flat_dim + 4 + 5 * self.N_NEIGHBORS + 1 + self.emb_dim
        )
        if params is not None:
            self.params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        else:
            rng = np.random.default_rng(seed)
            self.params = {
                "w1": self._glorot(rng, self.in_dim, hidden),
                "b1": np.zeros(hidden),
                "we1": self._glorot(rng, self.emb_dim, hidden),
                "w2": self._glorot(rng, hidden, hidden),
                "b2": np.zeros(hidden),
                "we2": self._glorot(rng, self.emb_dim, hidden),
                "w3": self._glorot(rng, hidden, self.flat_dim),
                "b3": np.zeros(self.flat_dim),
                # nonzero bias keeps the risk-0 embedding distinct from the
                # all-zeros unconditional embedding from the first step on
                "wr1": self._glorot(rng, 1, risk_dim),
                "br1": rng.uniform(-0.5, 0.5, size=risk_dim),
                "wr2": self._glorot(rng, risk_dim, risk_dim),
                "br2": np.zeros(risk_dim),
            }
        for name in self.PARAM_NAMES:
            if name not in self.params:
                raise ValueError(f"missing parameter {name}")

    @staticmethod
    def _glorot(rng, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    @property
    def codec(self) -> WindowCodec:
        return self._codec

    def _anchor_features(self, anchors: np.ndarray, present: np.ndarray) -> np.ndarray:
        """Per-agent pose and nearest-neighbor relative poses from anchors."""
        sub = anchors[present]
        n = sub.shape[0]
        feats = np.zeros((n, 4 + 5 * self.N_NEIGHBORS + 1))
        feats[:, 0] = sub[:, 0] / self.ANCHOR_POS_SCALE
        feats[:, 1] = sub[:, 1] / self.ANCHOR_POS_SCALE
        feats[:, 2] = sub[:, 2]
        feats[:, 3] = sub[:, 3]
        feats[:, -1] = n / 10.0
        if n > 1:
            diff = sub[None, :, :2] - sub[:, None, :2]
            dist = np.linalg.norm(diff, axis=2)
            np.fill_diagonal(dist, np.inf)
            for i in range(n):
                order = np.lexsort((np.arange(n), dist[i]))
                c, s = sub[i, 2], sub[i, 3]
                for rank, j in enumerate(order[: self.N_NEIGHBORS]):
                    if not math.isfinite(dist[i, j]):
                        break
                    dx, dy = diff[i, j]
                    base = 4 + 5 * rank
                    feats[i, base] = (c * dx + s * dy) / self.NEIGHBOR_SCALE
                    feats[i, base + 1] = (-s * dx + c * dy) / self.NEIGHBOR_SCALE
                    feats[i, base + 2] = c * sub[j, 2] + s * sub[j, 3]
                    feats[i, base + 3] = c * sub[j, 3] - s * sub[j, 2]
                    feats[i, base + 4] = math.exp(-dist[i, j] / self.NEIGHBOR_SCALE)
        return feats

    # -- parameter plumbing ------------------------------------------------

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.PARAM_NAMES])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for n in self.PARAM_NAMES:
            size = self.params[n].size
            self.params[n] = flat[pos : pos + size].reshape(self.params[n].shape).copy()
            pos += size
        if pos != flat.size:
            raise ValueError("flat parameter vector has wrong length")

    # -- forward pieces ------------------------------------------------------

    def _risk_embedding(self, condition: RiskLevel, want_cache=False):
        if condition.is_unconditional:
            emb = np.zeros(self.risk_dim)
            return (emb, None) if want_cache else emb
        p = self.params
        pre = condition.value * p["wr1"][0] + p["br1"]
        h = np.tanh(pre)
        emb = h @ p["wr2"] + p["br2"]
        return (emb, h) if want_cache else emb

    def _features(
        self,
        noisy: np.ndarray,
        mask: np.ndarray,
        condition: RiskLevel,
        k: int,
        anchors: np.ndarray | None,
    ):
        """Rows for present agents plus the shared condition embedding."""
        present_rows = mask.any(axis=1)
        present = np.flatnonzero(present_rows)
        flat = (noisy * mask[..., None])[present].reshape(present.size, self.flat_dim)
        ctx = flat.mean(axis=0)
        if anchors is None:
            anchors = np.tile([0.0, 0.0, 1.0, 0.0], (mask.shape[0], 1))
        anchor_feats = self._anchor_features(np.asarray(anchors, dtype=float), present_rows)
        emb = np.concatenate(
            [step_embedding(k, self.step_dim), self._risk_embedding(condition)]
        )
        rows = np.concatenate(
            [
                flat,
                np.tile(ctx, (present.size, 1)),
                anchor_feats,
                np.tile(emb, (present.size, 1)),
            ],
            axis=1,
        )
        return present, rows, emb

    def _forward_rows(self, rows: np.ndarray, emb: np.ndarray, want_cache=False):
        p = self.params
        inject1 = emb @ p["we1"]
        inject2 = emb @ p["we2"]
        h1 = np.tanh(rows @ p["w1"] + p["b1"] + inject1)
        h2 = np.tanh(h1 @ p["w2"] + p["b2"] + inject2)
        out = h2 @ p["w3"] + p["b3"]
        if want_cache:
            return out, (rows, h1, h2)
        return out

    def predict(self, noisy, condition, k, mask=None, anchors=None):
        noisy = np.asarray(noisy, dtype=float)
        if noisy.ndim != 3 or noisy.shape[2] != 4:
            raise ValueError("noisy array must have shape (N, T, 4)")
        if noisy.shape[1] != self.horizon:
            raise ValueError(
                f"window length {noisy.shape[1]} != model horizon {self.horizon}"
            )
        if mask is None:
            mask = np.ones(noisy.shape[:2], dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        out = np.zeros_like(noisy)
        if not mask.any():
            return out
        present, rows, emb = self._features(noisy, mask, condition, k, anchors)
        pred = self._forward_rows(rows, emb).reshape(present.size, self.horizon, 4)
        out[present] = pred
        out[~mask] = 0.0
        return out

    # -- loss and gradients --------------------------------------------------

    def loss_and_grad(self, prepared: list[dict], want_grad: bool = True):
        """Mean per-sample MSE over masked-in entries excluding slot 0.

        prepared items carry model-space arrays: tau_k, eps, mask, condition,
        k. Returns (loss, grads) with grads keyed like params.
        """
        if not prepared:
            raise ValueError("empty batch")
        grads = {n: np.zeros_like(self.params[n]) for n in self.PARAM_NAMES}
        total_loss = 0.0
        n_used = 0
        for item in prepared:
            tau_k, eps, mask = item["tau_k"], item["eps"], item["mask"]
            condition, k = item["condition"], item["k"]
            sel = mask.copy()
            sel[:, 0] = False
            n_sel = int(sel.sum()) * 4
            if n_sel == 0:
                continue
            present = np.flatnonzero(mask.any(axis=1))
            _, rows, emb = self._features(tau_k, mask, condition, k, item.get("anchors"))
            out_rows, cache = self._forward_rows(rows, emb, want_cache=True)
            pred = out_rows.reshape(present.size, self.horizon, 4)
            resid = np.zeros_like(tau_k)
            resid[present] = pred
            resid -= eps
            resid[~sel] = 0.0
            total_loss += float((resid**2).sum()) / n_sel
            n_used += 1
            if not want_grad:
                continue

            d_pred = (2.0 / n_sel) * resid[present]
            d_out = d_pred.reshape(present.size, self.flat_dim)
            rows_in, h1, h2 = cache
            p = self.params
            grads["w3"] += h2.T @ d_out
            grads["b3"] += d_out.sum(axis=0)
            d_p2 = (d_out @ p["w3"].T) * (1.0 - h2**2)
            grads["w2"] += h1.T @ d_p2
            grads["b2"] += d_p2.sum(axis=0)
            d_p1 = (d_p2 @ p["w2"].T) * (1.0 - h1**2)
            grads["w1"] += rows_in.T @ d_p1
            grads["b1"] += d_p1.sum(axis=0)
            s1 = d_p1.sum(axis=0)
            s2 = d_p2.sum(axis=0)
            grads["we1"] += np.outer(emb, s1)
            grads["we2"] += np.outer(emb, s2)
            if not condition.is_unconditional:
                # risk slice of the embedding, fed at the input and both layers
                d_emb = p["we1"] @ s1 + p["we2"] @ s2 + p["w1"][-self.emb_dim :] @ s1
                d_remb = d_emb[self.step_dim :]
                _, h_r = self._risk_embedding(condition, want_cache=True)
                grads["wr2"] += np.outer(h_r, d_remb)
                grads["br2"] += d_remb
                d_hr = (p["wr2"] @ d_remb) * (1.0 - h_r**2)
                grads["wr1"] += condition.value * d_hr[None, :]
                grads["br1"] += d_hr
        if n_used == 0:
            raise ValueError("no usable entries in batch")
        loss = total_loss / n_used
        if want_grad:
            for n in grads:
                grads[n] /= n_used
            return loss, grads
        return loss, None


# ---------------------------------------------------------------------------
# Training objective
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    """Condition-dropout training settings."""

    dropout_p: float = 0.25
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    lr_decay: str = "cosine"  # "cosine" anneals to zero over all steps, "none" holds

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.lr_decay not in ("cosine", "none"):
            raise ValueError("lr_decay must be 'cosine' or 'none'")


def prepare_batch(
    pred: NoisePredictor,
    batch: list[tuple[JointTrajectory, float]],
    dropout_p: float,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> list[dict]:
    """Draw (k, noise, condition dropout) per sample and noise the windows.

    Slot t=0 of the noisy sample is overwritten with the clean first state,
    mirroring the sampler's inpainting.
    """
    if not batch:
        raise ValueError("empty batch")
    codec = pred.codec
    out = []
    for window, label in batch:
        if codec is not None:
            anchors = window_anchors(window.data, window.mask)
            tau0 = codec.encode(window.data, window.mask, anchors)
        else:
            anchors = None
            tau0 = np.where(window.mask[..., None], window.data, 0.0)
        k = int(rng.integers(1, sched.num_steps + 1))
        eps = rng.standard_normal(tau0.shape)
        eps[~window.mask] = 0.0
        dropped = rng.random() < dropout_p
        tau_k = forward_noise(tau0, k, eps, sched, window.mask)
        at_start = window.mask[:, 0]
        tau_k[at_start, 0, :] = tau0[at_start, 0, :]
        condition = RiskLevel.unconditional() if dropped else RiskLevel(label)
        out.append(
            {
                "tau_k": tau_k,
                "eps": eps,
                "mask": window.mask,
                "condition": condition,
                "k": k,
                "anchors": anchors,
            }
        )
    return out


def training_loss(
    pred: NoisePredictor,
    batch: list[tuple[JointTrajectory, float]],
    dropout_p: float,
    sched: NoiseSchedule,
    seed,
) -> float:
    """Monte-Carlo estimate of the condition-dropout denoising loss."""
    rng = _as_rng(seed)
    prepared = prepare_batch(pred, batch, dropout_p, sched, rng)
    total = 0.0
    n_used = 0
    for item in prepared:
        sel = item["mask"].copy()
        sel[:, 0] = False
        n_sel = int(sel.sum()) * 4
        if n_sel == 0:
            continue
        est = pred.predict(
            item["tau_k"], item["condition"], item["k"], item["mask"], item["anchors"]
        )
        resid = est - item["eps"]
        resid[~sel] = 0.0
        total += float((resid**2).sum()) / n_sel
        n_used += 1
    if n_used == 0:
        raise ValueError("no usable entries in batch")
    return total / n_used


def train(
    pred: ToyPredictor,
    dataset: list[tuple[JointTrajectory, float]],
    cfg: TrainingConfig,
    sched: NoiseSchedule,
) -> dict:
    """Adam minimization of the denoising loss; returns the loss history.

    The predictor is updated in place. Raises DivergenceError when the loss
    stops being finite.
    """
    if not dataset:
        raise ValueError("empty dataset")
    # windows with no present entries past slot 0 carry no training signal
    dataset = [(w, r) for w, r in dataset if w.mask[:, 1:].any()]
    if not dataset:
        raise ValueError("no trainable windows in dataset")
    rng = np.random.default_rng(cfg.seed)
    m = {n: np.zeros_like(pred.params[n]) for n in pred.PARAM_NAMES}
    v = {n: np.zeros_like(pred.params[n]) for n in pred.PARAM_NAMES}
    beta1, beta2, eps_adam = 0.9, 0.999, 1e-8
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    step = 0
    epoch_means = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for lo in range(0, len(dataset), cfg.batch_size):
            batch = [dataset[i] for i in order[lo : lo + cfg.batch_size]]
            prepared = prepare_batch(pred, batch, cfg.dropout_p, sched, rng)
            loss, grads = pred.loss_and_grad(prepared)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss {loss} at epoch {epoch}, step {step}"
                )
            losses.append(loss)
            if cfg.lr_decay == "cosine":
                lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            else:
                lr = cfg.lr
            step += 1
            for n in pred.PARAM_NAMES:
                g = grads[n]
                m[n] = beta1 * m[n] + (1 - beta1) * g
                v[n] = beta2 * v[n] + (1 - beta2) * g * g
                m_hat = m[n] / (1 - beta1**step)
                v_hat = v[n] / (1 - beta2**step)
                pred.params[n] -= lr * m_hat / (np.sqrt(v_hat) + eps_adam)
        epoch_means.append(float(np.mean(losses)))
    return {"epoch_loss": epoch_means, "steps": step}


# ---------------------------------------------------------------------------
# Dataset labeling
# ---------------------------------------------------------------------------

def window_at(jt: JointTrajectory, t0: int, horizon: int) -> JointTrajectory:
    """Training window at offset t0: sliced and compacted to present agents."""
    window = slice_window(jt, t0, horizon)
    keep = window.mask.any(axis=1)
    return JointTrajectory(window.data[keep], window.mask[keep], window.dt)


def label_recording(
    rec: Recording,
    scene: SceneConfig,
    risk_params: RiskParams = RiskParams(),
) -> list[tuple[int, float]]:
    """Risk label per sliding-window offset of one recording."""
    from .geometry import grid_from_bounds

    if rec.jt.dt != scene.dt:
        raise ValueError(f"recording dt {rec.jt.dt} != scene dt {scene.dt}")
    horizon = scene.horizon_steps
    if rec.jt.n_steps < horizon:
        return []
    grid = grid_from_bounds(scene.bounds, scene.grid_cell)
    pets = window_pet_values(rec.jt, rec.dims, grid, horizon)
    return [(t0, risk_from_pet(pet, risk_params)) for t0, pet in enumerate(pets)]


def label_dataset(
    recordings: list[Recording],
    scene: SceneConfig,
    risk_params: RiskParams = RiskParams(),
) -> list[tuple[JointTrajectory, float]]:
    """Sliding-window risk labels: one (window, risk) pair per window.

    Windows are horizon_steps long with stride 1; the label is the risk of
    the window's scene PET, with conflict-free windows capped at the PET
    limit. Agents absent from a window are dropped from it.
    """
    out: list[tuple[JointTrajectory, float]] = []
    for rec in recordings:
        for t0, risk in label_recording(rec, scene, risk_params):
            out.append((window_at(rec.jt, t0, scene.horizon_steps), risk))
    return out


# ---------------------------------------------------------------------------
# Model serialization
# ---------------------------------------------------------------------------

def save_model(pred: ToyPredictor, sched: NoiseSchedule, path) -> None:
    doc = {
        "version": 1,
        "kind": "toy_mlp",
        "horizon": pred.horizon,
        "hidden": pred.hidden,
        "step_dim": pred.step_dim,
        "risk_dim": pred.risk_dim,
        "schedule": {"kind": sched.kind, "num_steps": sched.num_steps},
        "codec": {
            "mean": [float(fmt9(x)) for x in pred.codec.mean],
            "std": [float(fmt9(x)) for x in pred.codec.std],
        },
        "layers": {
            n: {
                "shape": list(pred.params[n].shape),
                "data": [float(fmt9(x)) for x in pred.params[n].ravel()],
            }
            for n in ("w1", "b1", "we1", "w2", "b2", "we2", "w3", "b3")
        },
        "risk_embedding": {
            n: {
                "shape": list(pred.params[n].shape),
                "data": [float(fmt9(x)) for x in pred.params[n].ravel()],
            }
            for n in ("wr1", "br1", "wr2", "br2")
        },
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_model(path) -> tuple[ToyPredictor, NoiseSchedule]:
    from .scene import SchemaError

    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        if doc.get("version") != 1 or doc.get("kind") != "toy_mlp":
            raise ValueError("unsupported model file")
        params = {}
        for section in ("layers", "risk_embedding"):
            for n, entry in doc[section].items():
                params[n] = np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
        codec = WindowCodec(doc["codec"]["mean"], doc["codec"]["std"])
        pred = ToyPredictor(
            horizon=int(doc["horizon"]),
            hidden=int(doc["hidden"]),
            step_dim=int(doc["step_dim"]),
            risk_dim=int(doc["risk_dim"]),
            codec=codec,
            params=params,
        )
        sched = make_schedule(doc["schedule"]["kind"], int(doc["schedule"]["num_steps"]))
        return pred, sched
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: invalid model file ({exc})") from exc
