"""Desk-scale episodic harness on synthetic organ phantoms."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable

import numpy as np
from scipy import ndimage

from . import autograd as ag
from . import gm as gm_mod
from . import losses
from . import spb as spb_mod
from . import tensor as tc

log = logging.getLogger(__name__)

EVAL_SEED_BASE = 1_000_003
MIN_FG_PIXELS = 16


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    center: tuple[float, float] = (32.0, 32.0)
    axes: tuple[float, float] = (12.0, 9.0)
    angle: float = 0.0
    organ_intensity: float = 0.7
    background_intensity: float = 0.25
    texture_freq: float = 0.18
    texture_amp: float = 0.06
    boundary_contrast: float = 0.12
    n_clutter: int = 2
    clutter_radius: float = 3.5
    noise_sigma: float = 0.03
    max_shift: int = 8
    intensity_jitter: float = 0.1


@dataclass(frozen=True)
class PhantomFamily:
    """Ranges from which per-episode phantom specs are drawn."""

    size: int = 64
    axes_range: tuple[float, float] = (8.0, 13.0)
    center_jitter: float = 4.0
    organ_range: tuple[float, float] = (0.55, 0.8)
    background_range: tuple[float, float] = (0.15, 0.3)
    texture_freq_range: tuple[float, float] = (0.1, 0.25)
    texture_amp_range: tuple[float, float] = (0.03, 0.08)
    boundary_range: tuple[float, float] = (0.05, 0.15)
    clutter_count: tuple[int, int] = (1, 3)
    clutter_radius_range: tuple[float, float] = (2.5, 4.0)
    noise_range: tuple[float, float] = (0.01, 0.04)
    max_shift: int = 8

    def sample(self, rng: np.random.Generator) -> PhantomSpec:
        u = rng.uniform
        c = self.size / 2
        return PhantomSpec(
            size=self.size,
            center=(c + u(-self.center_jitter, self.center_jitter),
                    c + u(-self.center_jitter, self.center_jitter)),
            axes=(u(*self.axes_range), u(*self.axes_range)),
            angle=u(0.0, math.pi),
            organ_intensity=u(*self.organ_range),
            background_intensity=u(*self.background_range),
            texture_freq=u(*self.texture_freq_range),
            texture_amp=u(*self.texture_amp_range),
            boundary_contrast=u(*self.boundary_range),
            n_clutter=int(rng.integers(self.clutter_count[0], self.clutter_count[1] + 1)),
            clutter_radius=u(*self.clutter_radius_range),
            noise_sigma=u(*self.noise_range),
            max_shift=self.max_shift,
        )


@dataclass
class Episode:
    I_s: np.ndarray
    I_q: np.ndarray
    M_s: np.ndarray
    M_q: np.ndarray
    seed: int
    clutter_s: np.ndarray | None = None
    clutter_q: np.ndarray | None = None


class PhantomError(ValueError):
    pass


def _ellipse_radius(spec: PhantomSpec, center, yy, xx):
    dy, dx = yy - center[0], xx - center[1]
    ca, sa = math.cos(spec.angle), math.sin(spec.angle)
    u = ca * dy + sa * dx
    v = -sa * dy + ca * dx
    return np.sqrt((u / spec.axes[0]) ** 2 + (v / spec.axes[1]) ** 2)


def _render(spec: PhantomSpec, rng: np.random.Generator):
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    shift = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
    center = (spec.center[0] + shift[0], spec.center[1] + shift[1])
    r = _ellipse_radius(spec, center, yy, xx)
    organ = r <= 1.0
    if np.count_nonzero(organ) < MIN_FG_PIXELS:
        raise PhantomError("organ smaller than 16 pixels")
    _, n_comp = ndimage.label(organ)
    if n_comp != 1:
        raise PhantomError("organ foreground is not connected")
    rim = organ & ((1.0 - r) * min(spec.axes) < 2.0)

    phase = rng.uniform(0, 2 * math.pi, size=2)
    img = spec.background_intensity + 0.04 * np.cos(2 * math.pi * yy / n + phase[0]) \
        * np.cos(2 * math.pi * xx / n + phase[1])
    direction = spec.angle + math.pi / 4
    texture = spec.texture_amp * np.sin(
        2 * math.pi * spec.texture_freq * (xx * math.cos(direction) + yy * math.sin(direction)))
    img = np.where(organ, spec.organ_intensity + texture, img)
    img = np.where(rim, img + spec.boundary_contrast, img)

    keepout = ndimage.binary_dilation(organ, iterations=int(spec.clutter_radius) + 4)
    clutter = np.zeros_like(organ)
    margin = spec.clutter_radius + 1
    for _ in range(spec.n_clutter):
        for _attempt in range(50):
            cy, cx = rng.uniform(margin, n - 1 - margin, size=2)
            disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= spec.clutter_radius ** 2
            if not (disk & keepout).any():
                clutter |= disk
                keepout |= ndimage.binary_dilation(disk, iterations=2)
                break
    img = np.where(clutter, spec.organ_intensity, img)

    img = img * (1.0 + rng.uniform(-spec.intensity_jitter, spec.intensity_jitter))
    img = img + spec.noise_sigma * rng.standard_normal(img.shape)
    return img, organ.astype(np.uint8), clutter


def gen_phantom(spec: PhantomSpec, seed: int) -> Episode:
    """Support/query pair: two perturbations of one organ with disconnected look-alike clutter."""
    rng = np.random.default_rng(seed)
    I_s, M_s, C_s = _render(spec, rng)
    I_q, M_q, C_q = _render(spec, rng)
    return Episode(I_s[None, None], I_q[None, None], M_s[None], M_q[None], int(seed),
                   C_s[None], C_q[None])


SMALL_FAMILY = PhantomFamily(size=16, axes_range=(3.0, 4.5), center_jitter=1.0,
                             clutter_count=(1, 1), clutter_radius_range=(1.2, 1.6), max_shift=2)


def sample_episode(seed: int, family: PhantomFamily = PhantomFamily()) -> Episode:
    rng = np.random.default_rng([seed, 7])
    for attempt in range(20):
        try:
            return gen_phantom(family.sample(rng), seed + attempt * 104729)
        except PhantomError:
            continue
    raise PhantomError(f"could not build a phantom for seed {seed}")


# ---------------------------------------------------------------------------
# Toy model
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    channels: int = 32
    k: int = 3
    t: int = 5
    sigma_a: float = 0.5
    s: float = 20.0
    q: float = 0.85
    r1: float = 0.25
    r2: float = 0.55
    beta: float = 10.0
    decoder_hidden: int = 32
    matcher: str = "geodesic"
    tie_decoders: bool = False

    def __post_init__(self):
        if self.matcher not in ("geodesic", "cosine"):
            raise ValueError(f"matcher must be 'geodesic' or 'cosine', got {self.matcher!r}")


def _conv_params(name: str, c_out: int, c_in: int, rng) -> list[ag.Param]:
    std = 1.0 / math.sqrt(c_in * 9)
    return [ag.Param(f"{name}.w", rng.normal(0.0, std, (c_out, c_in, 3, 3))),
            ag.Param(f"{name}.b", np.zeros(c_out))]


class ToyModel:
    """Three-layer conv encoder, shared SPB/GM, and fg/bg two-layer decoders."""

    ENCODER_STRIDES = (2, 2, 1)

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = cfg = config or ModelConfig()
        rng = np.random.default_rng([seed, 11])
        C = cfg.channels
        self.encoder = []
        c_in = 1
        for i in range(3):
            self.encoder.append(_conv_params(f"enc.conv{i + 1}", C, c_in, rng))
            c_in = C
        self.spectral = spb_mod.init_spectral_params(cfg.r1, cfg.r2, cfg.beta, k=cfg.k)
        self.gm = gm_mod.init_gm_params(C, cfg.k, cfg.sigma_a, cfg.s, cfg.q, cfg.t,
                                        geodesic=cfg.matcher == "geodesic")
        d_in = 2 * C + cfg.k
        self.dec_fg = [_conv_params("dec_fg.conv1", cfg.decoder_hidden, d_in, rng),
                       _conv_params("dec_fg.conv2", 1, cfg.decoder_hidden, rng)]
        if cfg.tie_decoders:
            self.dec_bg = self.dec_fg
        else:
            self.dec_bg = [_conv_params("dec_bg.conv1", cfg.decoder_hidden, d_in, rng),
                           _conv_params("dec_bg.conv2", 1, cfg.decoder_hidden, rng)]

    def params(self) -> list[ag.Param]:
        out = [p for layer in self.encoder for p in layer]
        out += self.spectral.params() + self.gm.params()
        out += [p for layer in self.dec_fg for p in layer]
        if not self.config.tie_decoders:
            out += [p for layer in self.dec_bg for p in layer]
        return out

    def named_params(self) -> dict[str, ag.Param]:
        return {p.name: p for p in self.params()}

    def encode(self, image) -> ag.Tensor:
        x = ag.as_tensor(image)
        for i, ((w, b), stride) in enumerate(zip(self.encoder, self.ENCODER_STRIDES)):
            x = ag.conv2d(x, w, b, stride=stride, padding=1)
            if i < 2:
                x = ag.tanh(x)
        return x

    def _decode(self, layers, matched, out_hw) -> ag.Tensor:
        (w1, b1), (w2, b2) = layers
        x = ag.tanh(ag.conv2d(matched, w1, b1, padding=1))
        x = ag.conv2d(x, w2, b2, padding=1)
        return ag.resize(x, out_hw)

    def predict(self, F_s, F_q, M_s):
        """Soft prediction ``[B, 2, H, W]`` (channel 1 = foreground) plus diagnostics."""
        F_s, F_q = ag.as_tensor(F_s), ag.as_tensor(F_q)
        M_s = ag.as_tensor(M_s)
        out_hw = M_s.shape[-2:]
        h, w = F_s.shape[-2:]
        masks = spb_mod.band_masks(self.spectral, tc.freq_grid(h, w))
        bands_s = spb_mod.decompose(F_s, masks)
        bands_q = spb_mod.decompose(F_q, masks)
        m_ds = spb_mod.downsample_mask(M_s, (h, w))
        protos_fg = spb_mod.band_prototypes(bands_s, m_ds)
        protos_bg = spb_mod.band_prototypes(bands_s, 1.0 - m_ds)
        fg = gm_mod.gm_forward(F_q, bands_q, protos_fg, self.gm)
        bg = gm_mod.gm_forward(F_q, bands_q, protos_bg, self.gm)
        logit_fg = self._decode(self.dec_fg, fg.matched, out_hw)
        logit_bg = self._decode(self.dec_bg, bg.matched, out_hw)
        pred = ag.softmax(ag.concat([logit_bg, logit_fg], axis=1), axis=1)
        diag = {"masks": masks, "fg": fg, "bg": bg, "logit_fg": logit_fg, "logit_bg": logit_bg,
                "radii": self.spectral.radii_values(), "beta": self.spectral.beta_value()}
        return pred, diag


def episode_forward(model: ToyModel, episode: Episode):
    """Encoder, then the symmetric fg/bg SPB+GM passes and decoders."""
    F_s = model.encode(episode.I_s)
    F_q = model.encode(episode.I_q)
    pred, diag = model.predict(F_s, F_q, episode.M_s.astype(np.float64))
    diag["features"] = (F_s, F_q)
    return pred, diag


def episode_losses(model: ToyModel, episode: Episode) -> dict:
    pred, diag = episode_forward(model, episode)
    prim, b = losses.segmentation_loss(pred, episode.M_q)
    align = losses.align_loss(model, episode, pred, diag["features"])
    return {"pred": pred, "diag": diag, "L_prim": prim, "L_b": b, "L_align": align,
            "L_total": losses.total_loss(prim, b, align)}


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def dice(pred_mask, true_mask) -> float:
    """Dice similarity in percent; two empty masks score 100."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(true_mask).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 100.0
    return 200.0 * np.count_nonzero(a & b) / total


def evaluate(model: ToyModel, episodes: Iterable[Episode]) -> dict:
    """Mean Dice and clutter false-positive mass over held-out episodes."""
    dices, fp = [], []
    for ep in episodes:
        pred, _ = episode_forward(model, ep)
        fg = pred.value[:, 1]
        dices.append(dice(fg > 0.5, ep.M_q == 1))
        if ep.clutter_q is not None and ep.clutter_q.any():
            fp.append(float(fg[ep.clutter_q].mean()))
    return {"dice": float(np.mean(dices)), "fp_mass": float(np.mean(fp)) if fp else 0.0}


def eval_episodes(n: int, family: PhantomFamily = PhantomFamily()) -> list[Episode]:
    return [sample_episode(EVAL_SEED_BASE + i, family) for i in range(n)]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    step_size: int = 1000
    gamma: float = 0.9
    seed: int = 0
    eval_every: int = 100
    n_eval: int = 8


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    radii: list[tuple] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def total_losses(self) -> np.ndarray:
        return np.array([m["L_total"] for m in self.metrics])


def learning_rate(cfg: TrainConfig, it: int) -> float:
    return cfg.lr * cfg.gamma ** ((it - 1) // cfg.step_size)


def train(model: ToyModel, n_iters: int, family: PhantomFamily = PhantomFamily(),
          cfg: TrainConfig | None = None, on_log: Callable[[dict], None] | None = None) -> TrainResult:
    """Episodic SGD on freshly sampled phantoms, one episode per iteration."""
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    cfg = cfg or TrainConfig()
    params = model.params()
    held_out = eval_episodes(cfg.n_eval, family) if cfg.eval_every else []
    result = TrainResult()
    ss = np.random.SeedSequence(cfg.seed)
    episode_seeds = ss.generate_state(n_iters, dtype=np.uint32)
    for it in range(1, n_iters + 1):
        ep = sample_episode(int(episode_seeds[it - 1]), family)
        ag.zero_grads(params)
        with ag.Tape() as tape:
            terms = episode_losses(model, ep)
        row = {"iter": it, **{k: float(terms[k].value) for k in ("L_prim", "L_b", "L_align", "L_total")}}
        if not np.isfinite(row["L_total"]):
            raise TrainingDiverged(f"non-finite loss at iteration {it}", {
                **row, "episode_seed": ep.seed,
                "params": {p.name: float(np.abs(p.value).max()) for p in params}})
        tape.backward(terms["L_total"])
        lr = learning_rate(cfg, it)
        ag.sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
        r = model.spectral.radii_values()
        row["lr"] = lr
        row["r1"], row["r2"] = (float(r[0]), float(r[1])) if r.size >= 2 else (
            float(r[0]) if r.size else float("nan"), float("nan"))
        result.radii.append((it, row["r1"], row["r2"]))
        if held_out and (it % cfg.eval_every == 0 or it == n_iters):
            ev = evaluate(model, held_out)
            row.update(ev)
            result.evals.append({"iter": it, **ev})
        result.metrics.append(row)
        if on_log is not None:
            on_log(row)
    return result


def smoothed(values, window: int = 10) -> np.ndarray:
    """Trailing mean over ``window`` entries (shorter at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

AXES = {"K": "k", "T": "t", "matcher": "matcher"}


def _ablation_job(args):
    base, axis, value, n_iters, seed, train_cfg, family = args
    cfg = replace(base, **{AXES[axis]: value})
    model = ToyModel(cfg, seed=seed)
    tcfg = replace(train_cfg, seed=seed, eval_every=0)
    train(model, n_iters, family, tcfg)
    ev = evaluate(model, eval_episodes(train_cfg.n_eval, family))
    return {"axis": axis, "value": value, "seed": seed, **ev}


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SGP_THREADS", "1")))
    except ValueError:
        return 1


def ablate(axis: str, values, n_iters: int, seeds: Iterable[int],
           base: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
           family: PhantomFamily = PhantomFamily(), workers: int | None = None) -> list[dict]:
    """Train one model per (value, seed); report mean/std Dice and clutter FP mass."""
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    values = list(values)
    if not values:
        raise ValueError("no ablation values given")
    base = base or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    jobs = [(base, axis, v, n_iters, s, train_cfg, family) for v in values for s in seeds]
    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            runs = list(ex.map(_ablation_job, jobs))
    else:
        runs = [_ablation_job(j) for j in jobs]
    table = []
    for v in values:
        rows = [r for r in runs if r["value"] == v]
        d = np.array([r["dice"] for r in rows])
        f = np.array([r["fp_mass"] for r in rows])
        table.append({"axis": axis, "value": v, "dice_mean": float(d.mean()),
                      "dice_std": float(d.std()), "fp_mass_mean": float(f.mean()),
                      "runs": rows})
    return table


def config_dict(cfg) -> dict:
    return asdict(cfg)


def dumps(row: dict) -> str:
    return json.dumps(row, sort_keys=True)
