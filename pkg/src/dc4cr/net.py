"""Tiny conditional U-Net denoiser with a zero-initialised control branch.

Layout for a 3-level config (16, 32, 64)::

    x_t -> enc.in -> enc.l1 (e1) -> enc.down1 -> enc.l2 (e2) -> enc.down2
        -> [+ time/prompt embedding] -> enc.mid (e3)
    e3 -> up -> dec.up2 -> FreeU -> cat(e2 + ctrl2) -> dec.l2
       -> up -> dec.up1 -> FreeU -> cat(e1 + ctrl1) -> dec.l1 -> dec.out

The control branch is a copy of the encoder fed with the cloudy image; its
per-level outputs pass through zero-initialised 1x1 projections, are scaled
by ``strength`` and added to the skips (and to the bottleneck).
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import lora as lora_mod
from . import numerics as nx
from .numerics import Tensor

PROMPTS = ("thin", "thick")
CHECKPOINT_MAGIC = b"DC4C"
CHECKPOINT_VERSION = 1


@dataclass
class UNetConfig:
    channels: tuple = (16, 32, 64)
    time_embed_dim: int = 32
    prompt_embed_dim: int = 32
    seed: int = 0

    @property
    def levels(self) -> int:
        return len(self.channels)


@dataclass(frozen=True)
class FreeUParams:
    s1: float = 1.0
    s2: float = 0.0
    b1: float = 1.0
    b2: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "FreeUParams":
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 4:
            raise ValueError("FreeU needs four comma-separated values s1,s2,b1,b2")
        return cls(*vals)

    def as_tuple(self) -> tuple:
        return (self.s1, self.s2, self.b1, self.b2)


FREEU_IDENTITY = FreeUParams()
FREEU_DEFAULT = FreeUParams(0.9, 0.4, 1.1, 1.1)


def freeu_transform(h, p: FreeUParams):
    """b1 * (s1 * h + s2) + b2, elementwise (Tensor or ndarray)."""
    if isinstance(h, Tensor):
        return (h * p.s1 + p.s2) * p.b1 + p.b2
    return p.b1 * (p.s1 * np.asarray(h) + p.s2) + p.b2


@dataclass
class PromptCondition:
    cloud_type: Optional[str]  # None = null (unconditional) prompt
    embedding: Optional[Tensor]
    subject: Optional[Tensor]

    def vector(self, dim: int) -> Tensor:
        if self.cloud_type is None:
            return Tensor(np.zeros(dim))
        return nx.add(self.embedding, self.subject)


def parse_prompt(text: str) -> str:
    """Accept 'thin', 'thick' or the full directive 'remove thin cloud'."""
    token = text.strip().lower()
    if token.startswith("remove ") and token.endswith(" cloud"):
        token = token[len("remove "):-len(" cloud")].strip()
    if token not in PROMPTS:
        raise ValueError(f"unknown prompt {text!r}; valid prompts: {', '.join(PROMPTS)}")
    return token


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


_ENCODER_LAYERS = ("in", "l1", "down1", "l2", "down2", "mid")


class UNet:
    def __init__(self, config: Optional[UNetConfig] = None):
        self.config = config or UNetConfig()
        c1, c2, c3 = self.config.channels
        td, pd = self.config.time_embed_dim, self.config.prompt_embed_dim
        rng = np.random.default_rng([self.config.seed, 0x0E7])
        self.params: dict = {}
        self.adapters: dict = {}

        def conv(name, cout, cin, k=3, gain=1.0):
            std = gain * math.sqrt(2.0 / (cin * k * k))
            self.params[name + ".w"] = Tensor(rng.normal(0.0, std, (cout, cin, k, k)))
            self.params[name + ".b"] = Tensor(np.zeros(cout))

        def dense(name, din, dout):
            self.params[name + ".w"] = Tensor(rng.normal(0.0, math.sqrt(1.0 / din), (din, dout)))
            self.params[name + ".b"] = Tensor(np.zeros(dout))

        conv("enc.in", c1, 3)
        conv("enc.l1", c1, c1)
        conv("enc.down1", c2, c1)
        conv("enc.l2", c2, c2)
        conv("enc.down2", c3, c2)
        conv("enc.mid", c3, c3)
        dense("emb.t1", td, c3)
        dense("emb.t2", c3, c3)
        dense("emb.p", pd, c3)
        conv("dec.up2", c2, c3)
        conv("dec.l2", c2, 2 * c2)
        conv("dec.up1", c1, c2)
        conv("dec.l1", c1, 2 * c1)
        conv("dec.out", 3, c1, gain=0.1)
        for layer in _ENCODER_LAYERS:
            for suffix in (".w", ".b"):
                self.params[f"ctrl.{layer}{suffix}"] = Tensor(self.params[f"enc.{layer}{suffix}"].data.copy())
        for i, c in enumerate((c1, c2, c3), 1):
            self.params[f"ctrl.proj{i}.w"] = Tensor(np.zeros((c, c, 1, 1)))
            self.params[f"ctrl.proj{i}.b"] = Tensor(np.zeros(c))
        # independently seeded so thin/thick differ from the first step
        self.params["prompt.thin"] = Tensor(rng.normal(0.0, 1.0, pd))
        self.params["prompt.thick"] = Tensor(rng.normal(0.0, 1.0, pd))
        self.params["prompt.subject"] = Tensor(np.zeros(pd))
        self.freeu_default = FREEU_IDENTITY
        self.lora_rank = 0

    # ------------------------------------------------------------ parameters

    def weight(self, name: str) -> Tensor:
        base = self.params[name]
        adapter = self.adapters.get(name)
        return base if adapter is None else lora_mod.effective_weight(base, adapter)

    def named_parameters(self, trainable_only: bool = False) -> list:
        out = [(n, t) for n, t in self.params.items()]
        for n, a in self.adapters.items():
            out += [(n + ".lora_A", a.A), (n + ".lora_B", a.B)]
        if trainable_only:
            out = [(n, t) for n, t in out if t.requires_grad]
        return out

    def lora_targets(self) -> list:
        """Matrix weights of the control branch, decoder and embedding MLP."""
        return [
            n for n, t in self.params.items()
            if n.endswith(".w") and t.ndim >= 2 and n.split(".")[0] in ("ctrl", "dec", "emb")
        ]

    def attach_lora(self, rank: int, alpha: float, seed: int = 0) -> None:
        self.lora_rank = rank
        for i, name in enumerate(self.lora_targets()):
            m, n = lora_mod.matrix_shape(self.params[name].shape)
            self.adapters[name] = lora_mod.new_adapter((m, n), min(rank, m, n), alpha, seed * 1000 + i)

    def set_alpha(self, alpha: float) -> None:
        for a in self.adapters.values():
            lora_mod.set_alpha(a, alpha)

    def merged(self) -> "UNet":
        """Copy with adapters folded into standalone weights."""
        other = copy.deepcopy(self)
        for name, a in other.adapters.items():
            other.params[name] = lora_mod.merge(other.params[name], a)
        other.adapters = {}
        return other

    def set_trainable(self, lora: bool, control: bool) -> None:
        """LoRA mode: only adapters, control projections' adapters, prompts and embeddings' adapters train."""
        for name, t in self.params.items():
            group = name.split(".")[0]
            if group == "prompt":
                t.requires_grad = True
            elif group == "ctrl":
                t.requires_grad = control and not lora
            elif lora:
                t.requires_grad = False
            else:
                t.requires_grad = True
        for name, a in self.adapters.items():
            active = control or not name.startswith("ctrl")
            a.A.requires_grad = a.B.requires_grad = active

    def prompt(self, cloud_type: Optional[str]) -> PromptCondition:
        if cloud_type is None:
            return PromptCondition(None, None, None)
        cloud_type = parse_prompt(cloud_type)
        return PromptCondition(cloud_type, self.params["prompt." + cloud_type], self.params["prompt.subject"])

    def cond_matrix(self, prompts: Sequence[Optional[str]]) -> Tensor:
        dim = self.config.prompt_embed_dim
        rows = [self.prompt(p).vector(dim).reshape(1, dim) for p in prompts]
        return nx.concat(rows, axis=0)

    # ------------------------------------------------------------ forward

    def _conv(self, name, x, stride=1):
        w = self.weight(name + ".w")
        pad = w.shape[-1] // 2
        return nx.conv2d(x, w, self.params[name + ".b"], stride=stride, padding=pad)

    def _encode(self, prefix, x, embed=None):
        h = nx.silu(self._conv(prefix + ".in", x))
        e1 = nx.silu(self._conv(prefix + ".l1", h))
        h = nx.silu(self._conv(prefix + ".down1", e1, stride=2))
        e2 = nx.silu(self._conv(prefix + ".l2", h))
        h = nx.silu(self._conv(prefix + ".down2", e2, stride=2))
        if embed is not None:
            h = h + embed.reshape(embed.shape[0], embed.shape[1], 1, 1)
        e3 = nx.silu(self._conv(prefix + ".mid", h))
        return e1, e2, e3

    def _embed(self, t: np.ndarray, cond: Tensor) -> Tensor:
        temb = Tensor(sinusoidal_embedding(t, self.config.time_embed_dim))
        h = nx.silu(nx.linear(temb, self.weight("emb.t1.w"), self.params["emb.t1.b"]))
        h = nx.linear(h, self.weight("emb.t2.w"), self.params["emb.t2.b"])
        return h + nx.linear(cond, self.weight("emb.p.w"), self.params["emb.p.b"])

    def control_residuals(self, control: Tensor, strength: float) -> list:
        c = self._encode("ctrl", control)
        return [self._conv(f"ctrl.proj{i}", f) * float(strength) for i, f in enumerate(c, 1)]

    def forward(
        self,
        x_t: Tensor,
        t,
        cond: Tensor,
        control: Optional[Tensor] = None,
        freeu: Optional[FreeUParams] = None,
        strength: float = 1.0,
        num_steps: Optional[int] = None,
    ) -> Tensor:
        """Predict the noise in ``x_t``; output shape equals input shape."""
        n, _, h, w = x_t.shape
        if h % 4 or w % 4:
            raise ValueError(f"image size must be a multiple of 4, got {h}x{w}")
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        if np.any(t < 0) or (num_steps is not None and np.any(t >= num_steps)):
            raise ValueError(f"timestep out of range: {t}")
        if cond.shape[0] != n:
            cond = nx.concat([cond.reshape(1, -1)] * n, axis=0) if cond.ndim == 1 else cond

        e1, e2, e3 = self._encode("enc", x_t, self._embed(t, cond))
        if control is not None and strength != 0.0:
            if control.shape != x_t.shape:
                raise ValueError(f"control input {control.shape} must match x_t {x_t.shape}")
            r1, r2, r3 = self.control_residuals(control, strength)
            e1, e2, e3 = e1 + r1, e2 + r2, e3 + r3

        d = nx.silu(self._conv("dec.up2", nx.upsample2x(e3)))
        if freeu is not None:
            d = freeu_transform(d, freeu)
        d = nx.silu(self._conv("dec.l2", nx.concat([d, e2], axis=1)))
        d = nx.silu(self._conv("dec.up1", nx.upsample2x(d)))
        if freeu is not None:
            d = freeu_transform(d, freeu)
        d = nx.silu(self._conv("dec.l1", nx.concat([d, e1], axis=1)))
        return self._conv("dec.out", d)

    __call__ = forward


def set_prompt(net: UNet, cloud_type: str) -> PromptCondition:
    return net.prompt(cloud_type)


def refine_subject_embedding(z_s, gradient, eta: float):
    """One descent step z_s - eta * grad (base weights untouched)."""
    if eta <= 0:
        raise ValueError("eta must be > 0")
    z = z_s.data if isinstance(z_s, Tensor) else np.asarray(z_s, dtype=np.float64)
    g = gradient.data if isinstance(gradient, Tensor) else np.asarray(gradient, dtype=np.float64)
    return z - eta * g


# ------------------------------------------------------------ checkpoints

def _pack_record(name: str, data: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    data = np.ascontiguousarray(data, dtype="<f8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", data.ndim)
    head += struct.pack(f"<{data.ndim}Q", *data.shape)
    return head + data.tobytes()


def write_records(path, records: dict) -> None:
    body = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(records))]
    body += [_pack_record(k, np.asarray(v, dtype=np.float64)) for k, v in records.items()]
    Path(path).write_bytes(b"".join(body))


def read_records(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(raw):
                raise ValueError("truncated record")
            out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after {count} records")
    return out


def save_checkpoint(net: UNet, path, extra: Optional[dict] = None) -> None:
    cfg = net.config
    records = {
        "config.channels": np.array(cfg.channels, dtype=np.float64),
        "config.dims": np.array([cfg.time_embed_dim, cfg.prompt_embed_dim, cfg.seed], dtype=np.float64),
        "config.lora": np.array([net.lora_rank, next(iter(net.adapters.values())).alpha if net.adapters else 0.0]),
        "freeu": np.array(net.freeu_default.as_tuple()),
    }
    for name, t in net.params.items():
        records["param." + name] = t.data
    for name, a in net.adapters.items():
        records[f"lora.{name}.meta"] = np.array([a.r, a.alpha])
        records[f"lora.{name}.A"] = a.A.data
        records[f"lora.{name}.B"] = a.B.data
    for k, v in (extra or {}).items():
        records["extra." + k] = np.atleast_1d(np.asarray(v, dtype=np.float64))
    write_records(path, records)


def load_checkpoint(path) -> UNet:
    rec = read_records(path)
    dims = rec["config.dims"]
    cfg = UNetConfig(
        channels=tuple(int(c) for c in rec["config.channels"]),
        time_embed_dim=int(dims[0]),
        prompt_embed_dim=int(dims[1]),
        seed=int(dims[2]),
    )
    net = UNet(cfg)
    for name in net.params:
        net.params[name] = Tensor(rec["param." + name].copy())
    net.lora_rank = int(rec["config.lora"][0])
    for key in rec:
        if key.startswith("lora.") and key.endswith(".meta"):
            name = key[len("lora."):-len(".meta")]
            r, alpha = rec[key]
            A = Tensor(rec[f"lora.{name}.A"].copy())
            B = Tensor(rec[f"lora.{name}.B"].copy())
            net.adapters[name] = lora_mod.LoraAdapter(tuple(A.shape[:1]) + tuple(B.shape[1:]), A, B, int(r), float(alpha))
    net.freeu_default = FreeUParams(*rec["freeu"])
    return net


def checkpoint_extra(path) -> dict:
    return {k[len("extra."):]: v for k, v in read_records(path).items() if k.startswith("extra.")}
