"""Recurrent canvas painter.

Starting from an all-zero canvas, each of ``t`` timesteps attends over the
caption's per-token states, advances a GRU, emits three low-resolution colour
planes that an upscaling stack turns into a full-size patch δ, and adds
``γ · δ`` to the canvas with a scalar sigmoid gate γ.

    c, μ, log σ  = f_ca(s)                      (conditioning augmentation)
    h_0          = f_0([c; z])                  (GRU cell from a zero state)
    β_i          = softmax(e · W[c; z; h_{i-1}]) (dot-product word attention)
    ē_i          = Σ_j β_ij e_j
    h_i          = GRU(ē_i, h_{i-1})
    δ_i, γ_i     = f_up([r; g; b](h_i)), σ(f_γ(h_i))
    canvas_i     = canvas_{i-1} + γ_i δ_i

The reported image is ``clamp(canvas_t, -1, 1)``; ``canvas_t`` itself is kept
on the result so the accumulation identity can be checked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from canvasgan.config import GeneratorConfig
from canvasgan.errors import EmptySequence, ShapeMismatch
from canvasgan.ops import masked_softmax


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

class GRUCell(nn.Module):
    """Gated recurrent unit written out gate by gate.

        u  = σ(W_ux x + W_uh h)           update gate
        r  = σ(W_rx x + W_rh h)           reset gate
        h~ = tanh(W_cx x + W_ch (r ⊙ h))  candidate
        h' = (1 - u) ⊙ h + u ⊙ h~
    """

    def __init__(self, input_size: int, hidden_size: int) -> None:
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.update_x = nn.Linear(input_size, hidden_size)
        self.update_h = nn.Linear(hidden_size, hidden_size)
        self.reset_x = nn.Linear(input_size, hidden_size)
        self.reset_h = nn.Linear(hidden_size, hidden_size)
        self.cand_x = nn.Linear(input_size, hidden_size)
        self.cand_h = nn.Linear(hidden_size, hidden_size)

    def gates(self, x: torch.Tensor, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return (update gate, reset gate, candidate state)."""
        u = torch.sigmoid(self.update_x(x) + self.update_h(h))
        r = torch.sigmoid(self.reset_x(x) + self.reset_h(h))
        cand = torch.tanh(self.cand_x(x) + self.cand_h(r * h))
        return u, r, cand

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_size or h.shape[-1] != self.hidden_size:
            raise ShapeMismatch(
                f"GRU expects input {self.input_size} / hidden {self.hidden_size}, "
                f"got {x.shape[-1]} / {h.shape[-1]}"
            )
        u, _, cand = self.gates(x, h)
        return (1 - u) * h + u * cand


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, slope: float = 0.0) -> None:
        super().__init__()
        act = nn.LeakyReLU(slope) if slope > 0 else nn.ReLU()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            act,
            nn.Conv2d(channels, channels, 3, padding=1),
        )
        self.act = nn.LeakyReLU(slope) if slope > 0 else nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(x + self.body(x))


class UpscaleStack(nn.Module):
    """(B, 3, p, p) planes → (B, 3, H, W) patch with entries in [-1, 1]."""

    def __init__(self, plane_size: int, image_size: int, channels: int) -> None:
        super().__init__()
        n_up = int(round(math.log2(image_size // plane_size)))
        layers: list[nn.Module] = [nn.Conv2d(3, channels, 3, padding=1), nn.ReLU(), ResidualBlock(channels)]
        for _ in range(n_up):
            layers += [
                nn.ConvTranspose2d(channels, channels, 4, stride=2, padding=1),
                nn.ReLU(),
                ResidualBlock(channels),
            ]
        layers += [nn.Conv2d(channels, 3, 3, padding=1), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, planes: torch.Tensor) -> torch.Tensor:
        return self.net(planes)


# ---------------------------------------------------------------------------
# Conditioning augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentedCondition:
    mu: torch.Tensor         # (B, d_c)
    log_sigma: torch.Tensor  # (B, d_c)
    sample: torch.Tensor     # (B, d_c)
    kl: torch.Tensor         # (B,)


def kl_to_standard_normal(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma²) ‖ N(0, 1)) summed over the last dimension."""
    return 0.5 * (mu.pow(2) + torch.exp(2 * log_sigma) - 2 * log_sigma - 1).sum(dim=-1)


class ConditionAugmentation(nn.Module):
    def __init__(self, text_dim: int, cond_dim: int) -> None:
        super().__init__()
        self.cond_dim = cond_dim
        self.head = nn.Linear(text_dim, 2 * cond_dim)

    def forward(self, s: torch.Tensor, rng: torch.Generator | None = None) -> AugmentedCondition:
        stats = self.head(s)
        mu, log_sigma = stats[..., : self.cond_dim], stats[..., self.cond_dim:]
        eps = torch.randn(mu.shape, generator=rng, dtype=mu.dtype, device=mu.device)
        sample = mu + torch.exp(log_sigma) * eps
        return AugmentedCondition(mu, log_sigma, sample, kl_to_standard_normal(mu, log_sigma))


# ---------------------------------------------------------------------------
# Attention & patch emission
# ---------------------------------------------------------------------------

class WordAttention(nn.Module):
    """One affine map from [c; z; h_prev] to a query, dot-scored against each e_j."""

    def __init__(self, cond_dim: int, noise_dim: int, hidden_dim: int, text_dim: int) -> None:
        super().__init__()
        self.query = nn.Linear(cond_dim + noise_dim + hidden_dim, text_dim)

    def scores(self, c: torch.Tensor, z: torch.Tensor, h_prev: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        q = self.query(torch.cat([c, z, h_prev], dim=-1))
        return torch.einsum("bnd,bd->bn", e, q)

    def forward(
        self,
        c: torch.Tensor,
        z: torch.Tensor,
        h_prev: torch.Tensor,
        e: torch.Tensor,
        mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if e.shape[1] == 0:
            raise EmptySequence("cannot attend over an empty token sequence")
        beta = masked_softmax(self.scores(c, z, h_prev, e), mask)
        e_bar = torch.einsum("bn,bnd->bd", beta, e)
        return beta, e_bar


class PatchEmitter(nn.Module):
    def __init__(self, hidden_dim: int, plane_size: int, image_size: int, channels: int) -> None:
        super().__init__()
        self.plane_size = plane_size
        plane = plane_size * plane_size
        self.red = nn.Sequential(nn.Linear(hidden_dim, plane), nn.ReLU())
        self.green = nn.Sequential(nn.Linear(hidden_dim, plane), nn.ReLU())
        self.blue = nn.Sequential(nn.Linear(hidden_dim, plane), nn.ReLU())
        self.gate = nn.Linear(hidden_dim, 1)
        self.upscale = UpscaleStack(plane_size, image_size, channels)

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        p = self.plane_size
        planes = torch.stack([self.red(h), self.green(h), self.blue(h)], dim=1)
        delta = self.upscale(planes.view(h.shape[0], 3, p, p))
        gamma = torch.sigmoid(self.gate(h))
        return delta, gamma


# ---------------------------------------------------------------------------
# Painter
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    beta: torch.Tensor    # (B, n)
    gamma: torch.Tensor   # (B, 1)
    delta: torch.Tensor   # (B, 3, H, W)
    hidden: torch.Tensor  # (B, d_h)


@dataclass
class PaintResult:
    image: torch.Tensor   # (B, 3, H, W) clamped to [-1, 1]
    canvas: torch.Tensor  # (B, 3, H, W) before the clamp
    trace: list[StepRecord]
    condition: AugmentedCondition
    z: torch.Tensor


class CanvasGenerator(nn.Module):
    def __init__(self, text_dim: int, cfg: GeneratorConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.text_dim = text_dim
        self.condition = ConditionAugmentation(text_dim, cfg.cond_dim)
        self.initial = GRUCell(cfg.cond_dim + cfg.noise_dim, cfg.hidden_dim)
        self.attention = WordAttention(cfg.cond_dim, cfg.noise_dim, cfg.hidden_dim, text_dim)
        self.cell = GRUCell(text_dim, cfg.hidden_dim)
        self.emitter = PatchEmitter(cfg.hidden_dim, cfg.plane_size, cfg.image_size, cfg.channels)

    def sample_noise(self, batch: int, rng: torch.Generator | None = None,
                     dtype: torch.dtype | None = None) -> torch.Tensor:
        dtype = dtype or next(self.parameters()).dtype
        return torch.randn((batch, self.cfg.noise_dim), generator=rng, dtype=dtype)

    def condition_augment(self, s: torch.Tensor, rng: torch.Generator | None = None) -> AugmentedCondition:
        return self.condition(s, rng)

    def init_hidden(self, c: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if c.shape[-1] != self.cfg.cond_dim or z.shape[-1] != self.cfg.noise_dim:
            raise ShapeMismatch(
                f"init_hidden expects c:{self.cfg.cond_dim} z:{self.cfg.noise_dim}, "
                f"got c:{c.shape[-1]} z:{z.shape[-1]}"
            )
        h = c.new_zeros(c.shape[:-1] + (self.cfg.hidden_dim,))
        return self.initial(torch.cat([c, z], dim=-1), h)

    def attend(self, c, z, h_prev, e, mask=None) -> tuple[torch.Tensor, torch.Tensor]:
        return self.attention(c, z, h_prev, e, mask)

    def step(self, h_prev: torch.Tensor, e_bar: torch.Tensor) -> torch.Tensor:
        return self.cell(e_bar, h_prev)

    def emit_patch(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.emitter(h)

    def paint(
        self,
        e: torch.Tensor,
        s: torch.Tensor,
        mask: torch.Tensor | None = None,
        z: torch.Tensor | None = None,
        rng: torch.Generator | None = None,
    ) -> PaintResult:
        """Unroll the painter over per-token states ``e`` (B, n, d) and sentences ``s`` (B, d)."""
        if e.shape[1] == 0:
            raise EmptySequence("cannot paint from an empty token sequence")
        if z is None:
            z = self.sample_noise(e.shape[0], rng, dtype=e.dtype)
        cond = self.condition_augment(s, rng)
        h = self.init_hidden(cond.sample, z)
        size = self.cfg.image_size
        canvas = e.new_zeros((e.shape[0], 3, size, size))
        trace: list[StepRecord] = []
        for _ in range(self.cfg.timesteps):
            beta, e_bar = self.attend(cond.sample, z, h, e, mask)
            h = self.step(h, e_bar)
            delta, gamma = self.emit_patch(h)
            canvas = canvas + gamma.view(-1, 1, 1, 1) * delta
            trace.append(StepRecord(beta=beta, gamma=gamma, delta=delta, hidden=h))
        return PaintResult(image=canvas.clamp(-1.0, 1.0), canvas=canvas, trace=trace,
                           condition=cond, z=z)

    def forward(self, e, s, mask=None, z=None, rng=None) -> PaintResult:
        return self.paint(e, s, mask=mask, z=z, rng=rng)
