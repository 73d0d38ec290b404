"""Learned components: condition pre-mapping, adaLN transformer denoiser and MFEN.

Tensors, reverse-mode gradients and the optimizer come from torch. This module
adds the model layout, initialization, a finite-difference gradient checker and
the ``ckpt_v1`` checkpoint format.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

Tensor = torch.Tensor

CKPT_VERSION = "ckpt_v1"
N_NETWORK_PARAMS = 10


class NonFiniteActivationError(FloatingPointError):
    def __init__(self, where: str):
        super().__init__(f"non-finite activations in {where}")
        self.where = where


@dataclass(frozen=True)
class MFENConfig:
    cnn_layers: int = 3
    kernel: int = 3
    cnn_hidden: int = 64
    attn_dim: int = 64
    attn_heads: int = 8
    embed_dim: int = 256

    def __post_init__(self):
        if self.attn_dim % self.attn_heads:
            raise ValueError("attn_dim must be divisible by attn_heads")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")


@dataclass(frozen=True)
class DenoiserConfig:
    hidden_size: int = 256
    attention_heads: int = 6
    blocks: int = 12
    condition_channels: int = 256
    pe_dim: int = 64
    mlp_ratio: float = 4.0
    e_re_dim: int = 25
    use_e_re: bool = True
    use_e_of: bool = True
    use_mfen: bool = True
    mfen: MFENConfig = field(default_factory=MFENConfig)

    def __post_init__(self):
        if self.pe_dim % 2:
            raise ValueError("pe_dim must be even")
        if self.attention_heads < 1 or self.hidden_size < self.attention_heads:
            raise ValueError("need 1 <= attention_heads <= hidden_size")
        if isinstance(self.mfen, dict):
            object.__setattr__(self, "mfen", MFENConfig(**self.mfen))

    @property
    def head_dim(self) -> int:
        # heads that do not divide the width share floor(hidden / heads) channels each
        return self.hidden_size // self.attention_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        if "mfen" in d and isinstance(d["mfen"], dict):
            d["mfen"] = MFENConfig(**d["mfen"])
        return cls(**d)


TOY_CONFIG = DenoiserConfig(hidden_size=64, attention_heads=4, blocks=4, condition_channels=64, pe_dim=32,
                            mfen=MFENConfig(cnn_hidden=16, attn_dim=16, attn_heads=4, embed_dim=32))


def positional_encoding(T: int, d_pe: int) -> np.ndarray:
    """pe[t, 2i] = sin(t / 10^(4*2i/D)), pe[t, 2i+1] = cos(t / 10^(4*(2i+1)/D))."""
    if d_pe % 2:
        raise ValueError("D_PE must be even")
    t = np.arange(T, dtype=np.float64)[:, None]
    j = np.arange(d_pe)
    arg = t / 10.0 ** (4.0 * j / d_pe)
    return np.where(j % 2 == 0, np.sin(arg), np.cos(arg))


def step_embedding(k: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half).to(k.device)
    args = k.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _trunc_normal(t: Tensor, std: float = 0.02) -> None:
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


def _zero(module: nn.Module) -> None:
    for p in module.parameters():
        nn.init.zeros_(p)


@dataclass
class ConditionBundle:
    """Batched condition streams; every sequence stream is (B, T, ·)."""

    network_params: Tensor
    k: Tensor  # (B,) integer steps
    e_re: Optional[Tensor] = None
    e_of: Optional[Tensor] = None
    crops: Optional[Tensor] = None  # (B, T, 2, S, S)
    coords: Optional[Tensor] = None  # (B, T, 2, S, S)
    e_me: Optional[Tensor] = None  # precomputed (B, T, E), bypasses the MFEN
    pos_offset: Optional[Tensor] = None  # (B,) first position index; training-time shift augmentation

    @property
    def T(self) -> int:
        return self.network_params.shape[1]

    def check(self) -> None:
        B, T = self.network_params.shape[:2]
        for name in ("e_re", "e_of", "crops", "coords", "e_me"):
            v = getattr(self, name)
            if v is not None and tuple(v.shape[:2]) != (B, T):
                raise ValueError(f"{name} has leading shape {tuple(v.shape[:2])}, expected {(B, T)}")
        if tuple(self.k.shape) != (B,):
            raise ValueError("k must be a (B,) tensor")
        if self.pos_offset is not None and tuple(self.pos_offset.shape) != (B,):
            raise ValueError("pos_offset must be a (B,) tensor")

    def positions(self, d_pe: int, dtype) -> Tensor:
        """Positional encodings (1 or B, T, d_pe) honoring ``pos_offset``."""
        T = self.T
        if self.pos_offset is None:
            return torch.as_tensor(positional_encoding(T, d_pe), dtype=dtype)[None]
        off = self.pos_offset.long()
        pe = torch.as_tensor(positional_encoding(T + int(off.max()), d_pe), dtype=dtype)
        return pe[off[:, None] + torch.arange(T)[None, :]]

    @property
    def is_teacher(self) -> bool:
        return self.e_re is None and self.e_of is None and self.crops is None and self.e_me is None


class ConditionPremap(nn.Module):
    """One temporal conv per stream into condition_channels, plus step and position embeddings.

    Streams only seen in the student stage start from zero weights, so a
    student initialized from a teacher computes exactly the teacher's output.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        C = cfg.condition_channels
        self.cfg = cfg
        self.params = nn.Conv1d(N_NETWORK_PARAMS, C, 3, padding=1)
        self.e_re = nn.Conv1d(cfg.e_re_dim, C, 3, padding=1) if cfg.use_e_re else None
        self.e_of = nn.Conv1d(1, C, 3, padding=1) if cfg.use_e_of else None
        self.e_me = nn.Conv1d(cfg.mfen.embed_dim, C, 3, padding=1) if cfg.use_mfen else None
        self.step = nn.Linear(cfg.pe_dim, C)
        self.pos = nn.Linear(cfg.pe_dim, C)
        for m in (self.params, self.step, self.pos):
            _trunc_normal(m.weight)
            nn.init.zeros_(m.bias)
        for m in (self.e_re, self.e_of, self.e_me):
            if m is not None:
                _zero(m)

    @staticmethod
    def _conv(conv: nn.Conv1d, x: Tensor) -> Tensor:
        return conv(x.transpose(1, 2)).transpose(1, 2)

    def forward(self, bundle: ConditionBundle, e_me: Optional[Tensor] = None) -> Tensor:
        bundle.check()
        x = bundle.network_params
        out = self._conv(self.params, x)
        for conv, v in ((self.e_re, bundle.e_re), (self.e_of, bundle.e_of), (self.e_me, e_me)):
            if v is None:
                continue
            if conv is None:
                raise ValueError("bundle carries a stream this model was built without")
            if v.dim() == 2:
                v = v[..., None]
            out = out + self._conv(conv, v)
        out = out + self.pos(bundle.positions(self.cfg.pe_dim, x.dtype))
        kemb = step_embedding(bundle.k, self.cfg.pe_dim).to(x.dtype)
        return out + self.step(kemb)[:, None, :]


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        inner = heads * self.head_dim
        self.qkv = nn.Linear(dim, 3 * inner)
        self.proj = nn.Linear(inner, dim)
        self.last_weights: Optional[Tensor] = None

    def forward(self, x: Tensor, keep_weights: bool = False) -> Tensor:
        B, N, _ = x.shape
        q, k, v = self.qkv(x).view(B, N, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        w = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        if keep_weights:
            self.last_weights = w.detach()
        y = (w @ v).transpose(1, 2).reshape(B, N, self.heads * self.head_dim)
        return self.proj(y)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale) + shift


class DenoiserBlock(nn.Module):
    """Pre-norm transformer block with per-token adaLN shift, scale and gate."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        H = cfg.hidden_size
        self.norm1 = nn.LayerNorm(H, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(H, cfg.attention_heads)
        self.norm2 = nn.LayerNorm(H, elementwise_affine=False, eps=1e-6)
        hidden = int(H * cfg.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(H, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, H))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(cfg.condition_channels, 6 * H))
        for m in (self.attn.qkv, self.attn.proj, self.mlp[0], self.mlp[2]):
            _trunc_normal(m.weight)
            nn.init.zeros_(m.bias)
        _zero(self.ada)

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        s1, sc1, g1, s2, sc2, g2 = self.ada(c).chunk(6, dim=-1)
        x = x + g1 * self.attn(modulate(self.norm1(x), s1, sc1))
        return x + g2 * self.mlp(modulate(self.norm2(x), s2, sc2))


class FinalLayer(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        H = cfg.hidden_size
        self.norm = nn.LayerNorm(H, elementwise_affine=False, eps=1e-6)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(cfg.condition_channels, 2 * H))
        self.linear = nn.Linear(H, 1)
        _zero(self.ada)
        _zero(self.linear)

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        shift, scale = self.ada(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class MFEN(nn.Module):
    """Micro-map encoder: conv stack + coordinate encoding, one attention layer, pooled MLP."""

    def __init__(self, cfg: MFENConfig):
        super().__init__()
        layers, c_in = [], 2
        for i in range(cfg.cnn_layers):
            c_out = cfg.attn_dim if i == cfg.cnn_layers - 1 else cfg.cnn_hidden
            layers.append(nn.Conv2d(c_in, c_out, cfg.kernel, padding=cfg.kernel // 2))
            if i < cfg.cnn_layers - 1:
                layers.append(nn.GELU())
            c_in = c_out
        self.conv = nn.Sequential(*layers)
        self.coord = nn.Conv2d(2, cfg.attn_dim, 1)
        self.attn = Attention(cfg.attn_dim, cfg.attn_heads)
        self.norm = nn.LayerNorm(cfg.attn_dim)
        self.mlp = nn.Sequential(nn.Linear(cfg.attn_dim, cfg.embed_dim), nn.GELU(approximate="tanh"),
                                 nn.Linear(cfg.embed_dim, cfg.embed_dim))
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                _trunc_normal(m.weight, 0.1 if isinstance(m, nn.Conv2d) else 0.02)
                nn.init.zeros_(m.bias)

    def forward(self, crops: Tensor, coords: Optional[Tensor] = None, keep_weights: bool = False) -> Tensor:
        """crops (B, T, 2, S, S) -> (B, T, embed_dim)."""
        B, T, C, S, _ = crops.shape
        x = crops.reshape(B * T, C, S, S)
        m = self.conv(x)
        if coords is not None:
            m = m + self.coord(coords.reshape(B * T, C, S, S))
        tokens = m.flatten(2).transpose(1, 2)  # (BT, S*S, d)
        h = tokens + self.attn(self.norm(tokens), keep_weights=keep_weights)
        return self.mlp(h.mean(dim=1)).reshape(B, T, -1)


class RSRPDenoiser(nn.Module):
    """Noise-prediction network over a length-T RSRP sequence.

    The head emits the noise component ``b_k * eps`` (or ``b_k * delta_eps``);
    callers divide by ``b_k`` to get the noise estimate itself.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        self.premap = ConditionPremap(cfg)
        self.mfen = MFEN(cfg.mfen) if cfg.use_mfen else None
        self.x_in = nn.Linear(1, cfg.hidden_size)
        self.pos = nn.Linear(cfg.pe_dim, cfg.hidden_size)
        self.blocks = nn.ModuleList(DenoiserBlock(cfg) for _ in range(cfg.blocks))
        self.final = FinalLayer(cfg)
        for m in (self.x_in, self.pos):
            _trunc_normal(m.weight)
            nn.init.zeros_(m.bias)

    def encode_conditions(self, bundle: ConditionBundle) -> Tensor:
        e_me = bundle.e_me
        if e_me is None and bundle.crops is not None:
            if self.mfen is None:
                raise ValueError("bundle carries micro-maps but the model has no MFEN")
            e_me = self.mfen(bundle.crops, bundle.coords)
        return self.premap(bundle, e_me)

    def forward(self, x_k: Tensor, bundle: ConditionBundle, check_finite: bool = False) -> Tensor:
        """x_k (B, T) or (B, T, 1) -> (B, T)."""
        if x_k.dim() == 2:
            x_k = x_k[..., None]
        if x_k.shape[:2] != bundle.network_params.shape[:2]:
            raise ValueError("x_k and conditions disagree on (B, T)")
        c = self.encode_conditions(bundle)
        h = self.x_in(x_k) + self.pos(bundle.positions(self.cfg.pe_dim, x_k.dtype))
        for i, blk in enumerate(self.blocks):
            h = blk(h, c)
            if check_finite and not torch.isfinite(h).all():
                raise NonFiniteActivationError(f"block {i}")
        return self.final(h, c)[..., 0]

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(cfg: DenoiserConfig, seed: int) -> RSRPDenoiser:
    g = torch.random.fork_rng(devices=[])
    with g:
        torch.manual_seed(seed)
        model = RSRPDenoiser(cfg)
    return model


def make_optimizer(model: nn.Module, lr: float = 1e-4) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr)


def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor, direction: Optional[Tensor] = None,
               h: float = 1e-4, seed: int = 0) -> float:
    """Relative error between a central difference and the reverse-mode directional derivative.

    ``fn`` maps a tensor to a scalar tensor; evaluation is done in float64.
    """
    x = point.detach().to(torch.float64).clone().requires_grad_(True)
    if direction is None:
        g = torch.Generator().manual_seed(seed)
        direction = torch.randn(x.shape, generator=g, dtype=torch.float64)
    d = direction.to(torch.float64)
    d = d / d.norm()
    y = fn(x)
    (grad,) = torch.autograd.grad(y, x)
    analytic = float((grad * d).sum())
    with torch.no_grad():
        fd = float((fn(x + h * d) - fn(x - h * d)) / (2 * h))
    scale = max(abs(fd), abs(analytic), 1e-12)
    return abs(fd - analytic) / scale


def save_checkpoint(path, model: RSRPDenoiser, extra: Optional[dict] = None) -> None:
    """JSON manifest ``path`` plus a float32 little-endian blob next to it."""
    path = Path(path)
    blob = path.with_suffix(path.suffix + ".bin")
    entries, offset, chunks = [], 0, []
    for name, t in model.state_dict().items():
        a = t.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.ravel())
    data = np.concatenate(chunks) if chunks else np.zeros(0, "<f4")
    blob.write_bytes(data.tobytes())
    manifest = {"format": CKPT_VERSION, "config": model.cfg.to_dict(), "params": entries,
                "blob": blob.name, "extra": extra or {}}
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")


def load_checkpoint(path) -> tuple:
    """Returns (model, extra)."""
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    cfg = DenoiserConfig.from_dict(manifest["config"])
    model = RSRPDenoiser(cfg)
    data = np.frombuffer((path.parent / manifest["blob"]).read_bytes(), dtype="<f4")
    state = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        state[e["name"]] = torch.from_numpy(data[e["offset"]:e["offset"] + n].reshape(e["shape"]).copy())
    model.load_state_dict(state)
    return model, manifest.get("extra", {})
