"""Noise schedule, guided ancestral sampling, training loop and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import metrics
from . import numerics as nx
from .grouping import StagePlan, ungrouped_plan
from .imagery import Image, batch_from_model_space, batch_to_model_space
from .net import FREEU_IDENTITY, FreeUParams, UNet, UNetConfig, parse_prompt, refine_subject_embedding
from .numerics import Tensor
from .synthcloud import CorpusManifest

log = logging.getLogger(__name__)

ENABLE_FLAGS = ("lora", "control", "freeu", "style_loss")


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- schedule

@dataclass
class DiffusionSchedule:
    """Linear beta schedule.

    ``beta_end`` is quoted for a 1000-step chain and rescaled by 1000/T so a
    short chain still ends near pure noise; ``beta_start`` is kept as is.
    """

    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be >= 2")
        end = min(self.beta_end * 1000.0 / self.T, 0.999)
        self.betas = np.linspace(self.beta_start, end, self.T)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t >= self.T):
            raise ValueError(f"timestep outside [0, {self.T}): {t}")
        return t

    def snr(self, t) -> np.ndarray:
        ab = self.alpha_bars[self.check_t(t)]
        return ab / (1.0 - ab)


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(-1, *([1] * (ndim - 1)))


def q_sample(schedule: DiffusionSchedule, x0, t, eps):
    """sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps; works on Tensors and arrays."""
    t = schedule.check_t(t)
    x_shape = x0.shape
    if eps.shape != x_shape:
        raise ValueError(f"noise shape {eps.shape} differs from x0 {x_shape}")
    ab = schedule.alpha_bars[t]
    if np.ndim(t) == 0:
        a, s = math.sqrt(ab), math.sqrt(1.0 - ab)
    else:
        a, s = _bcast(np.sqrt(ab), len(x_shape)), _bcast(np.sqrt(1.0 - ab), len(x_shape))
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        return nx.add(nx.mul(nx.as_tensor(x0), Tensor(np.broadcast_to(a, x_shape).copy())),
                      nx.mul(nx.as_tensor(eps), Tensor(np.broadcast_to(s, x_shape).copy())))
    return a * np.asarray(x0) + s * np.asarray(eps)


def predict_x0(schedule: DiffusionSchedule, x_t, t, eps_hat):
    """Invert q_sample given a noise estimate."""
    t = schedule.check_t(t)
    ab = schedule.alpha_bars[t]
    nd = len(x_t.shape)
    inv_a = _bcast(1.0 / np.sqrt(ab), nd) if np.ndim(t) else 1.0 / math.sqrt(ab)
    s = _bcast(np.sqrt(1.0 - ab), nd) if np.ndim(t) else math.sqrt(1.0 - ab)
    if isinstance(eps_hat, Tensor):
        shape = x_t.shape
        return nx.mul(
            nx.add(nx.as_tensor(x_t), nx.mul(eps_hat, Tensor(-np.broadcast_to(s, shape)))),
            Tensor(np.broadcast_to(inv_a, shape).copy()),
        )
    return (np.asarray(x_t) - s * np.asarray(eps_hat)) * inv_a


# ---------------------------------------------------------------- sampling

@dataclass
class SampleConfig:
    prompt: Optional[str] = None  # None: each image's own cloud type
    scale: float = 4.0
    strength: float = 1.1
    freeu: Optional[FreeUParams] = None  # None: the checkpoint's stored FreeU parameters
    alpha: Optional[float] = 0.7  # None: leave adapter alpha untouched
    steps: Optional[int] = None  # None: the schedule's T
    seed: int = 0
    batch: int = 16

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if self.strength < 0:
            raise ValueError("strength must be >= 0")
        if self.prompt is not None:
            self.prompt = parse_prompt(self.prompt)


def guided_eps(net: UNet, x_t: Tensor, t, prompts, control, cfg: SampleConfig, freeu) -> np.ndarray:
    cond = net.cond_matrix(prompts)
    eps_c = net(x_t, t, cond, control, freeu, cfg.strength).data
    if cfg.scale == 1.0:
        return eps_c
    null = net.cond_matrix([None] * x_t.shape[0])
    eps_u = net(x_t, t, null, control, freeu, cfg.strength).data
    return eps_u + cfg.scale * (eps_c - eps_u)


def guided_step(
    net: UNet,
    schedule: DiffusionSchedule,
    x_t: np.ndarray,
    t: int,
    prompts: Sequence,
    control: Optional[Tensor],
    cfg: SampleConfig,
    rng: np.random.Generator,
    freeu: Optional[FreeUParams] = None,
) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1} with classifier-free guidance.

    The clean-image estimate is clipped to [-1, 1] before forming the
    posterior mean. At t == 0 the clipped estimate itself is returned.
    """
    t = int(schedule.check_t(t))
    with nx.no_grad():
        eps = guided_eps(net, Tensor(x_t), np.full(x_t.shape[0], t), prompts, control, cfg, freeu)
    x0 = np.clip(predict_x0(schedule, x_t, t, eps), -1.0, 1.0)
    if t == 0:
        return x0
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t - 1]
    beta, alpha = schedule.betas[t], schedule.alphas[t]
    mean = (math.sqrt(ab_prev) * beta / (1.0 - ab)) * x0 + (math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)) * x_t
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return mean + math.sqrt(var) * rng.standard_normal(x_t.shape)


def _resolve_freeu(net: UNet, cfg: SampleConfig) -> Optional[FreeUParams]:
    p = cfg.freeu if cfg.freeu is not None else net.freeu_default
    return None if p == FREEU_IDENTITY else p


def remove_clouds(
    net: UNet,
    schedule: DiffusionSchedule,
    cloudy: Sequence[Image],
    cfg: SampleConfig,
    cloud_types: Optional[Sequence[str]] = None,
) -> list:
    """Full reverse chain from pure noise, conditioned on each cloudy image."""
    images = [cloudy] if isinstance(cloudy, Image) else list(cloudy)
    for im in images:
        if im.height % 4 or im.width % 4:
            raise ValueError(f"image size must be a multiple of 4, got {im.height}x{im.width}")
    if cfg.prompt is not None:
        prompts = [cfg.prompt] * len(images)
    elif cloud_types is not None:
        prompts = [parse_prompt(c) for c in cloud_types]
    else:
        raise ValueError("no prompt given and no per-image cloud types")
    steps = cfg.steps or schedule.T
    if steps != schedule.T:
        schedule = DiffusionSchedule(steps, schedule.beta_start, schedule.beta_end)
    freeu = _resolve_freeu(net, cfg)

    saved_alpha = {n: a.alpha for n, a in net.adapters.items()}
    if cfg.alpha is not None:
        net.set_alpha(cfg.alpha)
    try:
        out = []
        for b0 in range(0, len(images), cfg.batch):
            chunk = images[b0:b0 + cfg.batch]
            rng = np.random.default_rng([cfg.seed, b0])
            control = batch_to_model_space(chunk)
            x = rng.standard_normal(control.shape)
            for t in range(schedule.T - 1, -1, -1):
                x = guided_step(net, schedule, x, t, prompts[b0:b0 + cfg.batch], control, cfg, rng, freeu)
            out += batch_from_model_space(x)
        return out
    finally:
        for n, a in net.adapters.items():
            a.alpha = saved_alpha[n]


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    batch: int = 4
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    epochs: int = 15
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.01
    seed: int = 0
    T: int = 200
    lora_rank: int = 4
    lora_alpha: float = 0.7
    null_prompt_prob: float = 0.1
    subject_lr: float = 1e-2
    snr_gamma: Optional[float] = 5.0
    freeu: tuple = (0.9, 0.4, 1.1, 1.1)
    channels: tuple = (16, 32, 64)
    max_steps: Optional[int] = None

    def __post_init__(self):
        for name in ("batch", "lr", "epochs", "T"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        self.freeu = tuple(float(v) for v in self.freeu)
        self.channels = tuple(int(c) for c in self.channels)

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda_sum"] = self.lambda1 + self.lambda2 + self.lambda3
        return d


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.5, 0.9), eps: float = 1e-8):
        self.params = list(params)
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1, c2 = 1.0 - self.b1**self.t, 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class LossTerms:
    total: Tensor
    mse: float
    ssim: float
    style: float


def clip_unit(x: Tensor) -> Tensor:
    """Clamp to [0, 1]; gradient passes only where the input is inside the range."""
    inside = (x.data >= 0.0) & (x.data <= 1.0)
    return nx._result(np.clip(x.data, 0.0, 1.0), (x,), lambda g: (g * inside,))


def reconstruction_loss(
    x0_hat: Tensor,
    clean: Tensor,
    cfg: TrainConfig,
    use_style: bool,
    weights: Optional[np.ndarray] = None,
) -> LossTerms:
    """lambda1 * MSE + lambda2 * (1 - SSIM) + lambda3 * style on [0, 1] images.

    Inputs are model-space tensors. ``weights`` (per sample) scale each
    sample's contribution; the batch mean is returned.
    """
    n = x0_hat.shape[0]
    w = Tensor(np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64))
    gen = (x0_hat + 1.0) * 0.5
    ref = Tensor((clean.data + 1.0) * 0.5)
    per_mse = nx.square(gen - ref).reshape(n, -1).mean(axis=1)
    total = nx.mul(per_mse, w) * cfg.lambda1
    ssim_val, style_val = float("nan"), 0.0
    if cfg.lambda2 > 0 and min(gen.shape[2:]) >= metrics.SSIM_WINDOW:
        s = metrics.ssim_tensor(clip_unit(gen), ref)
        total = total + nx.mul(1.0 - s, w) * cfg.lambda2
        ssim_val = float(s.data.mean())
    if use_style and cfg.lambda3 > 0:
        st = metrics.style_loss_tensor(clip_unit(gen), ref)
        total = total + nx.mul(st, w) * cfg.lambda3
        style_val = float(st.data.mean())
    return LossTerms(total.mean(), float(per_mse.data.mean()), ssim_val, style_val)


class Trainer:
    """Owns the network, optimizer and data for one training run."""

    def __init__(
        self,
        manifest: CorpusManifest,
        cfg: TrainConfig,
        enable: Iterable[str] = ENABLE_FLAGS,
        net: Optional[UNet] = None,
    ):
        self.enable = set(enable)
        unknown = self.enable - set(ENABLE_FLAGS)
        if unknown:
            raise ValueError(f"unknown enable flags {sorted(unknown)}; valid: {ENABLE_FLAGS}")
        self.cfg = cfg
        self.schedule = DiffusionSchedule(cfg.T)
        self.net = net or UNet(UNetConfig(channels=cfg.channels, seed=cfg.seed))
        if "lora" in self.enable and not self.net.adapters:
            self.net.attach_lora(cfg.lora_rank, cfg.lora_alpha, cfg.seed)
        self.net.set_trainable(lora="lora" in self.enable, control="control" in self.enable)
        self.freeu = FreeUParams(*cfg.freeu) if "freeu" in self.enable else None
        self.net.freeu_default = self.freeu or FREEU_IDENTITY
        subject = self.net.params["prompt.subject"]
        self.subject = subject
        self.opt = Adam(
            [p for _, p in self.net.named_parameters(trainable_only=True) if p is not subject],
            cfg.lr,
            (cfg.beta1, cfg.beta2),
        )
        self.rng = np.random.default_rng([cfg.seed, 0x7A1])
        self.data = self._load(manifest)
        self.history: list = []
        self.step_count = 0

    def _load(self, manifest: CorpusManifest) -> dict:
        rows = {}
        for e in manifest.split("train"):
            cloudy, clean = e.load()
            rows[e.id] = dict(
                cloudy=cloudy.pixels.transpose(2, 0, 1) * 2.0 - 1.0,
                clean=clean.pixels.transpose(2, 0, 1) * 2.0 - 1.0,
                cloud_type=e.cloud_type,
                group=e.group,
            )
        if not rows:
            raise ValueError("manifest has no train entries")
        return rows

    def pool(self, groups: Optional[Sequence[int]]) -> list:
        ids = sorted(self.data)
        if groups is None:
            return ids
        return [i for i in ids if self.data[i]["group"] in groups]

    def loss_on(self, ids: Sequence[str], t: np.ndarray, eps: np.ndarray, null_mask: np.ndarray) -> LossTerms:
        clean = Tensor(np.stack([self.data[i]["clean"] for i in ids]))
        control = Tensor(np.stack([self.data[i]["cloudy"] for i in ids])) if "control" in self.enable else None
        prompts = [None if null else self.data[i]["cloud_type"] for i, null in zip(ids, null_mask)]
        x_t = q_sample(self.schedule, clean.data, t, eps)
        eps_hat = self.net(Tensor(x_t), t, self.net.cond_matrix(prompts), control, self.freeu, 1.0)
        x0_hat = predict_x0(self.schedule, x_t, t, eps_hat)
        weights = None
        if self.cfg.snr_gamma is not None:
            weights = np.minimum(self.schedule.snr(t), self.cfg.snr_gamma)
        return reconstruction_loss(x0_hat, clean, self.cfg, "style_loss" in self.enable, weights)

    def step(self, ids: Sequence[str], stage: int) -> LossTerms:
        n = len(ids)
        t = self.rng.integers(0, self.schedule.T, n)
        shape = self.data[ids[0]]["clean"].shape
        eps = self.rng.standard_normal((n, *shape))
        null_mask = self.rng.random(n) < self.cfg.null_prompt_prob
        try:
            terms = self.loss_on(ids, t, eps, null_mask)
            if not np.isfinite(terms.total.data).all():
                raise FloatingPointError("non-finite loss")
            self.opt.zero_grad()
            self.subject.grad = None
            terms.total.backward()
        except FloatingPointError as exc:
            raise TrainingDiverged(
                f"step {self.step_count} stage {stage}: {exc} (ids={list(ids)}, t={t.tolist()})"
            ) from exc
        self.opt.step()
        if self.subject.requires_grad and self.subject.grad is not None:
            self.subject.data = refine_subject_embedding(self.subject, self.subject.grad, self.cfg.subject_lr)
        self.step_count += 1
        self.history.append(
            dict(step=self.step_count, stage=stage, loss=float(terms.total.data),
                 mse_term=terms.mse, ssim_term=terms.ssim, style_term=terms.style)
        )
        return terms

    def run(self, plan: Optional[StagePlan] = None) -> UNet:
        if plan is None:
            plan = ungrouped_plan(self.cfg.epochs, len(self.data))
        grouped = plan.k > 1
        if grouped and any(r["group"] is None for r in self.data.values()):
            raise ValueError("multi-stage plan needs a grouped manifest")
        for stage_idx, (groups, epochs) in enumerate(plan.stages, 1):
            ids = self.pool(groups if grouped else None)
            if not ids:
                raise ValueError(f"stage {stage_idx} has no samples")
            for _ in range(epochs):
                order = [ids[i] for i in self.rng.permutation(len(ids))]
                for b0 in range(0, len(order), self.cfg.batch):
                    if self.cfg.max_steps is not None and self.step_count >= self.cfg.max_steps:
                        return self.net
                    self.step(order[b0:b0 + self.cfg.batch], stage_idx)
        return self.net

    def full_train_loss(self, seed: int = 1234, repeats: int = 1) -> float:
        """Training objective over the whole train split with a fixed (t, noise) draw."""
        rng = np.random.default_rng([seed, 0xE7A])
        ids = sorted(self.data)
        shape = self.data[ids[0]]["clean"].shape
        total, count = 0.0, 0
        with nx.no_grad():
            for _ in range(repeats):
                for b0 in range(0, len(ids), 16):
                    chunk = ids[b0:b0 + 16]
                    t = rng.integers(0, self.schedule.T, len(chunk))
                    eps = rng.standard_normal((len(chunk), *shape))
                    terms = self.loss_on(chunk, t, eps, np.zeros(len(chunk), dtype=bool))
                    total += float(terms.total.data) * len(chunk)
                    count += len(chunk)
        return total / count

    def write_history(self, path) -> None:
        write_loss_csv(self.history, path)


def write_loss_csv(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "stage", "loss", "mse_term", "ssim_term", "style_term"])
        for h in history:
            w.writerow([h["step"], h["stage"], repr(h["loss"]), repr(h["mse_term"]), repr(h["ssim_term"]), repr(h["style_term"])])


def train(
    manifest: CorpusManifest,
    cfg: TrainConfig,
    plan: Optional[StagePlan] = None,
    enable: Iterable[str] = ENABLE_FLAGS,
    net: Optional[UNet] = None,
) -> Trainer:
    trainer = Trainer(manifest, cfg, enable, net)
    trainer.run(plan)
    return trainer


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalRow:
    id: str
    cloud_type: str
    psnr: float
    ssim: float
    pd: float


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def summary(self) -> dict:
        n = len(self.rows)
        mean = lambda k: float(np.mean([getattr(r, k) for r in self.rows])) if n else float("nan")
        return {"n": n, "psnr_mean": mean("psnr"), "ssim_mean": mean("ssim"), "pd_mean": mean("pd")}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "cloud_type", "psnr", "ssim", "pd"])
            for r in sorted(self.rows, key=lambda r: r.id):
                w.writerow([r.id, r.cloud_type, repr(r.psnr), repr(r.ssim), repr(r.pd)])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate(
    manifest: CorpusManifest,
    net: Optional[UNet],
    schedule: DiffusionSchedule,
    cfg: SampleConfig,
    split: str = "test",
    identity: bool = False,
    cloud_type: Optional[str] = None,
) -> EvalReport:
    """Run cloud removal over a split and score against the clean images.

    ``identity=True`` scores each clean image against itself (sanity mode).
    """
    entries = sorted(manifest.split(split), key=lambda e: e.id)
    if cloud_type is not None:
        entries = [e for e in entries if e.cloud_type == cloud_type]
    pairs = [e.load() for e in entries]
    if identity:
        outputs = [clean for _, clean in pairs]
    else:
        if net is None:
            raise ValueError("evaluate needs a trained network")
        outputs = remove_clouds(net, schedule, [c for c, _ in pairs], cfg, [e.cloud_type for e in entries])
    report = EvalReport()
    for e, out, (_, clean) in zip(entries, outputs, pairs):
        q = metrics.quality_report(out, clean)
        report.rows.append(EvalRow(e.id, e.cloud_type, q.psnr, q.ssim, q.pd))
    return report
