"""Distribution learner: DCGRU window encoder + transformer encoder + distribution head.

Input is a counts distribution D_E of shape (o, n_sec); output is a global
production (or attraction) distribution of length I * n_od.  Everything runs
in float64 so that autograd gradients can be checked against finite
differences at tight tolerance.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .core import GlobalDistribution, ModelError, Network, TimeGrid, build_incidence

log = logging.getLogger(__name__)

DTYPE = torch.float64
EPS = 1e-12
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class LearnerConfig:
    d_model: int = 32
    heads: int = 4
    layers: int = 1
    K: int = 2
    ffn_mult: int = 4
    lr: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 20
    train_ratio: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.K < 1:
            raise ValueError("K must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


# ---------------------------------------------------------------------------
# graph pieces (numpy)


@dataclass(frozen=True)
class GraphDiffusion:
    W: np.ndarray
    forward: np.ndarray  # D_O^-1 W
    reverse: np.ndarray  # D_I^-1 W^T
    K: int

    def supports(self) -> tuple[np.ndarray, np.ndarray]:
        """Matrix powers s = 0..K-1 of both transition matrices, shape (K, n, n) each."""
        n = self.W.shape[0]
        fw, rv = [np.eye(n)], [np.eye(n)]
        for _ in range(1, self.K):
            fw.append(fw[-1] @ self.forward)
            rv.append(rv[-1] @ self.reverse)
        return np.stack(fw), np.stack(rv)


def _row_normalize(M: np.ndarray) -> np.ndarray:
    deg = M.sum(axis=1, keepdims=True)
    out = np.zeros_like(M)
    np.divide(M, deg, out=out, where=deg > 0)
    return out


def build_adjacency(network: Network, K: int = 2) -> GraphDiffusion:
    W = np.zeros((network.n_od, network.n_od))
    for s in network.sections:
        W[s.from_node, s.to_node] = 1.0
    return GraphDiffusion(W, _row_normalize(W), _row_normalize(W.T), K)


def build_features(incidence: np.ndarray, D_E: np.ndarray) -> np.ndarray:
    """chi[..., tau, i, e] = N[i, e] * D_E[..., tau, e]."""
    incidence = np.asarray(incidence, dtype=float)
    D_E = np.asarray(D_E, dtype=float)
    if incidence.shape[-1] != D_E.shape[-1]:
        raise ModelError(f"incidence has {incidence.shape[-1]} sections, counts have {D_E.shape[-1]}")
    return incidence * D_E[..., :, None, :]


def windows(grid: TimeGrid) -> list[range]:
    """Observation slices read for each estimation interval."""
    out = []
    for t in range(grid.I):
        start = t * grid.k
        if start + grid.delta >= grid.o:
            raise ModelError(f"window of interval t={t} overruns the {grid.o} observation intervals")
        out.append(range(start, start + grid.delta + 1))
    return out


# ---------------------------------------------------------------------------
# torch building blocks


def diffusion_conv(fw: torch.Tensor, rv: torch.Tensor, x: torch.Tensor, w_fw: torch.Tensor,
                   w_rv: torch.Tensor) -> torch.Tensor:
    """sum_s fw[s] @ x @ w_fw[s] + rv[s] @ x @ w_rv[s].

    fw, rv: (K, n, n); x: (..., n, f_in); w_*: (K, f_in, f_out).
    """
    if x.shape[-1] != w_fw.shape[1] or fw.shape[-1] != x.shape[-2]:
        raise ModelError(f"diffusion_conv shape mismatch: x {tuple(x.shape)}, weights {tuple(w_fw.shape)}")
    xf = torch.einsum("snm,...mf->...snf", fw, x)
    xr = torch.einsum("snm,...mf->...snf", rv, x)
    return torch.einsum("...snf,sfg->...ng", xf, w_fw) + torch.einsum("...snf,sfg->...ng", xr, w_rv)


class DiffusionFilter(nn.Module):
    def __init__(self, K: int, f_in: int, f_out: int, scale: float):
        super().__init__()
        self.w_fw = nn.Parameter(torch.randn(K, f_in, f_out, dtype=DTYPE) * scale)
        self.w_rv = nn.Parameter(torch.randn(K, f_in, f_out, dtype=DTYPE) * scale)
        self.bias = nn.Parameter(torch.zeros(f_out, dtype=DTYPE))

    def forward(self, fw, rv, x):
        return diffusion_conv(fw, rv, x, self.w_fw, self.w_rv) + self.bias


class DCGRUCell(nn.Module):
    """GRU cell whose gate transforms are diffusion convolutions; hidden width = n_sec."""

    def __init__(self, K: int, n_sec: int):
        super().__init__()
        scale = 1.0 / math.sqrt(2 * n_sec * 2 * K)
        self.reset = DiffusionFilter(K, 2 * n_sec, n_sec, scale)
        self.update = DiffusionFilter(K, 2 * n_sec, n_sec, scale)
        self.candidate = DiffusionFilter(K, 2 * n_sec, n_sec, scale)

    def forward(self, fw, rv, x, h):
        xh = torch.cat([x, h], dim=-1)
        r = torch.sigmoid(self.reset(fw, rv, xh))
        u = torch.sigmoid(self.update(fw, rv, xh))
        c = torch.tanh(self.candidate(fw, rv, torch.cat([x, r * h], dim=-1)))
        return u * h + (1.0 - u) * c


def self_attention(zeta: torch.Tensor, u_qkv: torch.Tensor) -> torch.Tensor:
    """Single head: zeta (..., L, d), u_qkv (d, 3 d_h) -> (..., L, d_h)."""
    d_h = u_qkv.shape[-1] // 3
    q, k, v = torch.split(zeta @ u_qkv, d_h, dim=-1)
    A = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d_h), dim=-1)
    return A @ v


def msa(zeta: torch.Tensor, u_qkv: torch.Tensor, u_msa: torch.Tensor) -> torch.Tensor:
    """u_qkv: (h, d, 3 d_h); u_msa: (h d_h, d)."""
    heads = [self_attention(zeta, u_qkv[i]) for i in range(u_qkv.shape[0])]
    return torch.cat(heads, dim=-1) @ u_msa


class EncoderLayer(nn.Module):
    """Pre-norm block: z + MSA(LN z), then z + FFN(LN z)."""

    def __init__(self, d: int, heads: int, ffn_mult: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} is not divisible by h={heads}")
        d_h = d // heads
        self.u_qkv = nn.Parameter(torch.randn(heads, d, 3 * d_h, dtype=DTYPE) / math.sqrt(d))
        self.u_msa = nn.Parameter(torch.randn(heads * d_h, d, dtype=DTYPE) / math.sqrt(d))
        self.norm1 = nn.LayerNorm(d, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d, dtype=DTYPE)
        self.ff1 = nn.Linear(d, ffn_mult * d, dtype=DTYPE)
        self.ff2 = nn.Linear(ffn_mult * d, d, dtype=DTYPE)

    def forward(self, z):
        z = z + msa(self.norm1(z), self.u_qkv, self.u_msa)
        return z + self.ff2(torch.nn.functional.gelu(self.ff1(self.norm2(z))))


class DistributionLearner(nn.Module):
    def __init__(self, network: Network, grid: TimeGrid, config: LearnerConfig):
        super().__init__()
        self.config = config
        self.grid = grid
        self.n_od, self.n_sec = network.n_od, network.n_sec
        windows(grid)
        g = build_adjacency(network, config.K)
        fw, rv = g.supports()
        self.register_buffer("fw", torch.tensor(fw, dtype=DTYPE))
        self.register_buffer("rv", torch.tensor(rv, dtype=DTYPE))
        self.register_buffer("incidence", torch.tensor(build_incidence(network), dtype=DTYPE))
        d = config.d_model
        self.cell = DCGRUCell(config.K, self.n_sec)
        self.proj = nn.Linear(self.n_sec, d, dtype=DTYPE)
        self.pos = nn.Parameter(torch.randn(grid.I * self.n_od, d, dtype=DTYPE) * 0.02)
        self.layers = nn.ModuleList(EncoderLayer(d, config.heads, config.ffn_mult) for _ in range(config.layers))

    def encode(self, D_E: torch.Tensor) -> torch.Tensor:
        """Hidden states (B, I, n_od, n_sec), one DCGRU pass per estimation-interval window."""
        chi = self.incidence * D_E[..., :, None, :]  # (B, o, n_od, n_sec)
        k, delta, I = self.grid.k, self.grid.delta, self.grid.I
        # slices t*k + s for every interval t, stacked on a new axis
        starts = torch.arange(I) * k
        h = chi.new_zeros(chi.shape[0], I, self.n_od, self.n_sec)
        for s in range(delta + 1):
            h = self.cell(self.fw, self.rv, chi[:, starts + s], h)
        return h

    def head(self, H: torch.Tensor) -> torch.Tensor:
        B = H.shape[0]
        z = self.proj(H.reshape(B, self.grid.I * self.n_od, self.n_sec)) + self.pos
        for layer in self.layers:
            z = layer(z)
        z = z + self.pos
        g = z.sum(dim=-2, keepdim=True)
        return torch.softmax((z * g).sum(dim=-1), dim=-1)

    def forward(self, D_E: torch.Tensor) -> torch.Tensor:
        if D_E.dim() == 2:
            return self.forward(D_E[None])[0]
        if D_E.shape[-2:] != (self.grid.o, self.n_sec):
            raise ModelError(f"counts distribution has shape {tuple(D_E.shape[-2:])}, "
                             f"model expects {(self.grid.o, self.n_sec)}")
        return self.head(self.encode(D_E))


def jsd_loss(p: torch.Tensor, q: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean Jensen-Shannon divergence over the leading batch axis (natural log)."""
    m = 0.5 * (p + q)

    def kl(a, b):
        return (a * torch.log((a + eps) / (b + eps))).sum(dim=-1)

    return (0.5 * kl(p, m) + 0.5 * kl(q, m)).mean()


# ---------------------------------------------------------------------------
# training / inference


@dataclass
class TrainResult:
    model: DistributionLearner
    curve: list[dict]
    best_epoch: int


def _as_tensor(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)


def evaluate(model: DistributionLearner, X: torch.Tensor, Y: torch.Tensor, batch: int = 256) -> float:
    with torch.no_grad():
        total = 0.0
        for s in range(0, len(X), batch):
            total += float(jsd_loss(model(X[s:s + batch]), Y[s:s + batch])) * len(X[s:s + batch])
    return total / len(X)


def train(dataset, network: Network, grid: TimeGrid, kind: str = "production",
          config: Optional[LearnerConfig] = None) -> TrainResult:
    """Adam on mean JSD; epoch 0 is the untrained model; keeps the best-validation weights."""
    config = config or LearnerConfig()
    if len(dataset) == 0:
        raise ModelError("empty dataset")
    torch.manual_seed(config.seed)
    train_s, val_s = dataset.split(config.train_ratio)
    if not val_s:
        val_s = train_s
    pick = (lambda s: s.d_p) if kind == "production" else (lambda s: s.d_a)
    Xt = _as_tensor([s.D_E for s in train_s])
    Yt = _as_tensor([pick(s) for s in train_s])
    Xv = _as_tensor([s.D_E for s in val_s])
    Yv = _as_tensor([pick(s) for s in val_s])

    model = DistributionLearner(network, grid, config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)

    curve = [{"epoch": 0, "train": evaluate(model, Xt, Yt), "val": evaluate(model, Xv, Yv)}]
    best_val, best_epoch = curve[0]["val"], 0
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(Xt))
        for b, s in enumerate(range(0, len(order), config.batch_size)):
            idx = torch.as_tensor(order[s:s + config.batch_size])
            loss = jsd_loss(model(Xt[idx]), Yt[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {float(loss)} at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        row = {"epoch": epoch, "train": evaluate(model, Xt, Yt), "val": evaluate(model, Xv, Yv)}
        curve.append(row)
        log.info("epoch %d train %.6f val %.6f", epoch, row["train"], row["val"])
        if row["val"] < best_val:
            best_val, best_epoch, stale = row["val"], epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state_dict(best_state)
    return TrainResult(model, curve, best_epoch)


def infer(model: DistributionLearner, D_E, kind: str = "production", provenance: str = "inferred") -> GlobalDistribution:
    model.eval()
    with torch.no_grad():
        out = model(_as_tensor(D_E)).numpy().astype(float)
    out = out / out.sum()
    return GlobalDistribution(out, kind, provenance)


def save_curve(curve: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_jsd", "val_jsd"])
        for r in curve:
            w.writerow([r["epoch"], repr(r["train"]), repr(r["val"])])


def save_checkpoint(model: DistributionLearner, path, extra: Optional[dict] = None) -> None:
    state = model.state_dict()
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "grid": asdict(model.grid),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "params": {k: v.reshape(-1).tolist() for k, v in state.items()},
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path, network: Network) -> tuple[DistributionLearner, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    model = DistributionLearner(network, TimeGrid(**doc["grid"]), LearnerConfig(**doc["config"]))
    state = model.state_dict()
    for k, shape in doc["shapes"].items():
        if k not in state or list(state[k].shape) != shape:
            raise ModelError(f"{path}: parameter {k} has shape {shape}, network implies "
                             f"{list(state[k].shape) if k in state else 'none'}")
        state[k] = torch.tensor(doc["params"][k], dtype=DTYPE).reshape(shape)
    model.load_state_dict(state)
    return model, doc.get("extra", {})
