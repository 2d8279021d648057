"""Latent DDPM: noise schedule, forward noising, 3D U-Net noise predictor, ancestral sampling."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator

from .checkpoint import ParameterStore, save_checkpoint
from .layers import AttentionBlock3d, Downsample3d, ResBlock3d, Upsample3d, norm, timestep_embedding
from .seeding import torch_generator
from .training import adam, batch_indices, check_finite, lr_schedule
from .validation import as_tensor, check_divisible, check_is_fitted, check_volumes

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss")


# -- schedule ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-timestep coefficients, float64, indexed ``0 .. T-1``.

    ``posterior_var[t] = beta[t] * (1 - alpha_bar[t-1]) / (1 - alpha_bar[t])``;
    index 0 uses ``alpha_bar[-1] := alpha[0]``, which reduces it to ``beta[0]``.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "NoiseSchedule":
        beta = np.asarray(betas, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        prev = np.concatenate([[alpha[0]], alpha_bar[:-1]])
        posterior_var = beta * (1.0 - prev) / (1.0 - alpha_bar)
        return cls(beta, alpha, alpha_bar, posterior_var)

    def check_t(self, t) -> None:
        tt = np.asarray(t)
        if np.any(tt < 0) or np.any(tt >= self.T):
            raise IndexError(f"timestep {t} outside [0, {self.T})")

    def to_dict(self) -> dict:
        return {"betas": self.beta.tolist()}


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if T < 2:
        raise ValueError("T must be >= 2 for a linear schedule")
    if not 0 < beta_start < beta_end < 1:
        raise ValueError("need 0 < beta_start < beta_end < 1")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def scaled_beta_range(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> tuple[float, float]:
    """Rescale a 1000-step beta range to ``T`` steps so ``alpha_bar[T-1]`` stays near zero."""
    k = 1000.0 / T
    return beta_start * k, min(beta_end * k, 0.999)


def _coef(arr: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather ``arr[t]`` and shape it to broadcast against ``like``'s batch axis."""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        vals = torch.as_tensor(arr, dtype=torch.float64)[t.long()].to(like.dtype)
        return vals.reshape(-1, *([1] * (like.dim() - 1)))
    return torch.tensor(float(arr[int(t)]), dtype=like.dtype)


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward marginal ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``."""
    s.check_t(t.numpy() if isinstance(t, torch.Tensor) else t)
    ab = _coef(s.alpha_bar, t, z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def posterior_mean(z_t: torch.Tensor, eps_hat: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """Reverse-step mean ``(z_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(alpha_t)``."""
    if z_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(z_t.shape)} vs {tuple(eps_hat.shape)}")
    s.check_t(t.numpy() if isinstance(t, torch.Tensor) else t)
    beta = _coef(s.beta, t, z_t)
    alpha = _coef(s.alpha, t, z_t)
    ab = _coef(s.alpha_bar, t, z_t)
    return (z_t - beta / torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(alpha)


EpsFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def reverse_step(z_t: torch.Tensor, t: int, eps_fn: EpsFn, s: NoiseSchedule,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    """One ancestral step ``z_t -> z_{t-1}``; no noise is added at ``t == 0``."""
    s.check_t(t)
    tt = torch.full((z_t.shape[0],), int(t), dtype=torch.long)
    mean = posterior_mean(z_t, eps_fn(z_t, tt), t, s)
    if t == 0:
        return mean
    g = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
    return mean + float(np.sqrt(s.posterior_var[t])) * g


def ancestral_sample(shape: Sequence[int], eps_fn: EpsFn, s: NoiseSchedule, seed: int,
                     dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Start from ``N(0, I)`` and apply all ``T`` reverse steps."""
    gen = torch_generator(seed)
    z = torch.randn(tuple(shape), generator=gen, dtype=dtype)
    with torch.no_grad():
        for t in range(s.T - 1, -1, -1):
            z = reverse_step(z, t, eps_fn, s, gen)
    return z


def draw_batch(data: torch.Tensor, batch_size: int, T: int, gen: torch.Generator):
    """Batch indices, uniform timesteps and unit Gaussian noise for one training step."""
    idx = batch_indices(data.shape[0], batch_size, gen)
    t = torch.randint(0, T, (len(idx),), generator=gen)
    eps = torch.randn((len(idx), *data.shape[1:]), generator=gen, dtype=data.dtype)
    return idx, t, eps


# -- denoiser network --------------------------------------------------------

@dataclass(frozen=True)
class UNet3DConfig:
    in_channels: int = 4
    out_channels: int | None = None
    levels: int = 4
    resnet_blocks_per_level: int = 3
    attention_per_level: int = 1
    mid_resnet_blocks: int = 2
    mid_attention: int = 1
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 1, 2, 2)
    time_embedding_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        if self.out_channels is None:
            object.__setattr__(self, "out_channels", self.in_channels)
        if len(self.channel_multipliers) != self.levels:
            raise ValueError(f"{self.levels} levels need {self.levels} channel multipliers")
        if self.attention_per_level < 1:
            raise ValueError("every level carries an attention block")
        if self.resnet_blocks_per_level < 1 or self.mid_resnet_blocks < 1:
            raise ValueError("need at least one ResNet block per level and in the middle")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def factor(self) -> int:
        return 2 ** (self.levels - 1)

    @property
    def temb_channels(self) -> int:
        return 4 * self.time_embedding_dim

    def level_shapes(self, spatial: Sequence[int]) -> list[tuple[int, ...]]:
        """Spatial shape at each down level."""
        check_divisible(spatial, self.factor)
        return [tuple(n // 2 ** i for n in spatial) for i in range(self.levels)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int, out: int):
        super().__init__()
        self.dim = dim
        self.lin1 = nn.Linear(dim, out)
        self.lin2 = nn.Linear(out, out)

    def forward(self, t):
        emb = timestep_embedding(t, self.dim).to(self.lin1.weight.dtype)
        return self.lin2(F.silu(self.lin1(emb)))


class DownLevel(nn.Module):
    def __init__(self, in_ch: int, ch: int, cfg: UNet3DConfig, downsample: bool):
        super().__init__()
        self.res = nn.ModuleList(
            [ResBlock3d(in_ch if i == 0 else ch, ch, cfg.temb_channels) for i in range(cfg.resnet_blocks_per_level)]
        )
        self.attn = nn.ModuleList([AttentionBlock3d(ch) for _ in range(cfg.attention_per_level)])
        self.down = Downsample3d(ch) if downsample else None

    def forward(self, h, temb):
        for block in self.res:
            h = block(h, temb)
        for block in self.attn:
            h = block(h)
        skip = h
        if self.down is not None:
            h = self.down(h)
        return h, skip


class MidBlock(nn.Module):
    """ResNet blocks interleaved with attention: Res, Attn, Res for the defaults."""

    def __init__(self, ch: int, cfg: UNet3DConfig):
        super().__init__()
        self.res = nn.ModuleList([ResBlock3d(ch, ch, cfg.temb_channels) for _ in range(cfg.mid_resnet_blocks)])
        self.attn = nn.ModuleList([AttentionBlock3d(ch) for _ in range(cfg.mid_attention)])

    def forward(self, h, temb):
        h = self.res[0](h, temb)
        for i, block in enumerate(self.res[1:]):
            if i < len(self.attn):
                h = self.attn[i](h)
            h = block(h, temb)
        for extra in self.attn[len(self.res) - 1:]:
            h = extra(h)
        return h


class UpLevel(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, ch: int, cfg: UNet3DConfig, upsample: bool):
        super().__init__()
        self.res = nn.ModuleList(
            [ResBlock3d(in_ch + skip_ch if i == 0 else ch, ch, cfg.temb_channels)
             for i in range(cfg.resnet_blocks_per_level)]
        )
        self.attn = nn.ModuleList([AttentionBlock3d(ch) for _ in range(cfg.attention_per_level)])
        self.up = Upsample3d(ch) if upsample else None

    def forward(self, h, skip, temb):
        h = torch.cat([h, skip], dim=1)
        for block in self.res:
            h = block(h, temb)
        for block in self.attn:
            h = block(h)
        if self.up is not None:
            h = self.up(h)
        return h


class DownPath(nn.Module):
    """Time embedding, input convolution, down levels and middle block.

    Shared layout of the denoiser's encoder half and of the control branch,
    so parameters can be copied between them by name.
    """

    def __init__(self, cfg: UNet3DConfig, in_channels: int | None = None):
        super().__init__()
        chs = cfg.channels
        self.time_embed = TimeEmbedding(cfg.time_embedding_dim, cfg.temb_channels)
        self.conv_in = nn.Conv3d(in_channels or cfg.in_channels, chs[0], 3, padding=1)
        self.down = nn.ModuleList()
        prev = chs[0]
        for i, ch in enumerate(chs):
            self.down.append(DownLevel(prev, ch, cfg, downsample=i < cfg.levels - 1))
            prev = ch
        self.mid = MidBlock(chs[-1], cfg)

    def forward(self, x, t):
        temb = self.time_embed(t)
        h = self.conv_in(x)
        skips = []
        for level in self.down:
            h, skip = level(h, temb)
            skips.append(skip)
        return skips, self.mid(h, temb), temb


class UNet3D(nn.Module):
    """Noise predictor ``eps_theta(z_t, t)``; output shape equals input shape."""

    def __init__(self, cfg: UNet3DConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.channels
        self.encoder = DownPath(cfg)
        self.up = nn.ModuleList()
        prev = chs[-1]
        for i in reversed(range(cfg.levels)):
            self.up.append(UpLevel(prev, chs[i], chs[i], cfg, upsample=i > 0))
            prev = chs[i]
        self.norm_out = norm(chs[0])
        self.conv_out = nn.Conv3d(chs[0], cfg.out_channels, 3, padding=1)

    def forward(self, x, t):
        skips, h, temb = self.encoder(x, t)
        for level, skip in zip(self.up, reversed(skips)):
            h = level(h, skip, temb)
        return self.conv_out(F.silu(self.norm_out(h)))


class DenoiserOutput(NamedTuple):
    eps_hat: torch.Tensor
    features: dict | None = None


# -- estimator ---------------------------------------------------------------

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class LatentDiffusion(BaseEstimator):
    """Unconditional DDPM over latent grids ``(N, c, d, h, w)``.

    ``fit`` trains the epsilon-prediction U-Net with MSE; ``sample`` runs
    ancestral sampling. Latents are multiplied by ``latent_scale_`` (one over
    the training standard deviation) before diffusion when
    ``scale_latents`` is set, and divided again on the way out.

    ``beta_start``/``beta_end`` of ``None`` mean the 1000-step range
    [1e-4, 0.02] rescaled to ``timesteps``.
    """

    def __init__(self, base_channels=16, channel_multipliers=(1, 1, 2, 2), levels=4,
                 resnet_blocks_per_level=3, attention_per_level=1, mid_resnet_blocks=2, mid_attention=1,
                 time_embedding_dim=32, timesteps=200, beta_start=None, beta_end=None,
                 n_steps=2000, batch_size=6, lr=1e-4, lr_decay="none", scale_latents=True,
                 checkpoint_interval=0, checkpoint_dir=None, random_state=0, dtype="float32", verbose=0):
        self.base_channels = base_channels
        self.channel_multipliers = channel_multipliers
        self.levels = levels
        self.resnet_blocks_per_level = resnet_blocks_per_level
        self.attention_per_level = attention_per_level
        self.mid_resnet_blocks = mid_resnet_blocks
        self.mid_attention = mid_attention
        self.time_embedding_dim = time_embedding_dim
        self.timesteps = timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.scale_latents = scale_latents
        self.checkpoint_interval = checkpoint_interval
        self.checkpoint_dir = checkpoint_dir
        self.random_state = random_state
        self.dtype = dtype
        self.verbose = verbose

    checkpoint_name = "diffusion_last.ckpt"

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def unet_config(self, in_channels: int) -> UNet3DConfig:
        return UNet3DConfig(
            in_channels=in_channels, levels=self.levels,
            resnet_blocks_per_level=self.resnet_blocks_per_level, attention_per_level=self.attention_per_level,
            mid_resnet_blocks=self.mid_resnet_blocks, mid_attention=self.mid_attention,
            base_channels=self.base_channels, channel_multipliers=tuple(self.channel_multipliers),
            time_embedding_dim=self.time_embedding_dim,
        )

    def schedule(self) -> NoiseSchedule:
        start, end = scaled_beta_range(self.timesteps)
        return make_schedule(
            self.timesteps,
            start if self.beta_start is None else self.beta_start,
            end if self.beta_end is None else self.beta_end,
        )

    def _build_model(self, latent_shape) -> nn.Module:
        return UNet3D(self.unet_config(latent_shape[0]))

    def init_networks(self, latent_shape: Sequence[int], latent_scale: float = 1.0) -> "LatentDiffusion":
        """Build an untrained denoiser for latents of shape ``(c, d, h, w)``."""
        latent_shape = tuple(int(n) for n in latent_shape)
        check_divisible(latent_shape[1:], 2 ** (self.levels - 1))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(self.random_state))
            self.model_ = self._build_model(latent_shape).to(self.torch_dtype)
        self.latent_shape_ = latent_shape
        self.latent_scale_ = float(latent_scale)
        self.schedule_ = self.schedule()
        self.optimizer_ = adam(self.model_.parameters(), self.lr)
        self.log_ = []
        self.step_ = 0
        return self

    def _check_latents(self, Z) -> np.ndarray:
        Z = check_volumes(Z, name="latents")
        check_divisible(Z.shape[2:], 2 ** (self.levels - 1))
        return Z

    def fit(self, Z, y=None):
        Z = self._check_latents(Z)
        scale = 1.0 / float(Z.std()) if self.scale_latents and Z.std() > 0 else 1.0
        self.init_networks(Z.shape[1:], scale)
        self._train(as_tensor(Z, self.torch_dtype) * self.latent_scale_, self.n_steps)
        return self

    def _eps(self, z_t, t, cond=None):
        return self.model_(z_t, t)

    def batch_loss(self, z0, t, eps, cond=None) -> torch.Tensor:
        """Mean squared error between ``eps`` and the prediction at ``q_sample(z0, t, eps)``."""
        z_t = q_sample(z0, t, eps, self.schedule_)
        return F.mse_loss(self._eps(z_t, t, cond), eps)

    def _trainable(self):
        return self.model_.parameters()

    def _train(self, data: torch.Tensor, n_steps: int, cond: torch.Tensor | None = None) -> None:
        gen = torch_generator(self.random_state)
        sched = lr_schedule(self.optimizer_, self.lr_decay, self.n_steps, self.step_)
        # a ZeroFusion wrapper may have frozen this model
        self.model_.requires_grad_(True)
        # replay the generator so resumed training continues the same stream
        for _ in range(self.step_):
            self._draw(data, gen)
        last_ckpt = None
        for _ in range(n_steps):
            step = self.step_
            idx, t, eps = self._draw(data, gen)
            loss = self.batch_loss(data[idx], t, eps, None if cond is None else cond[idx])
            value = float(loss.detach())
            check_finite(value, step, "diffusion loss", last_ckpt)
            self.optimizer_.zero_grad(set_to_none=True)
            loss.backward()
            self.optimizer_.step()
            sched.step()
            self.log_.append({"step": step, "loss": value})
            self.step_ += 1
            if self.verbose and step % max(1, self.verbose) == 0:
                logger.info("%s step %d loss %.5f", type(self).__name__, step, value)
            if self.checkpoint_interval and self.checkpoint_dir and self.step_ % self.checkpoint_interval == 0:
                last_ckpt = str(Path(self.checkpoint_dir) / self.checkpoint_name)
                save_checkpoint(self.to_store(), last_ckpt)

    def _draw(self, data: torch.Tensor, gen: torch.Generator):
        return draw_batch(data, self.batch_size, self.schedule_.T, gen)

    # inference

    def predict_noise(self, z_t, t) -> DenoiserOutput:
        """``eps_theta(z_t, t)`` on the scaled latent."""
        check_is_fitted(self)
        z_t = as_tensor(z_t, self.torch_dtype)
        unbatched = z_t.dim() == 4
        if unbatched:
            z_t = z_t[None]
        if tuple(z_t.shape[1:]) != self.latent_shape_[:1] + tuple(z_t.shape[2:]):
            raise ValueError(f"latent has {z_t.shape[1]} channels, model expects {self.latent_shape_[0]}")
        check_divisible(z_t.shape[2:], 2 ** (self.levels - 1))
        tt = torch.as_tensor(np.broadcast_to(np.asarray(t), (z_t.shape[0],)).copy(), dtype=torch.long)
        with torch.no_grad():
            eps = self.model_(z_t, tt)
        return DenoiserOutput(eps[0] if unbatched else eps)

    def eps_fn(self) -> EpsFn:
        model = self.model_

        def fn(z, t):
            return model(z, t)

        return fn

    def sample(self, n_samples: int = 1, seed: int = 0, shape: Sequence[int] | None = None) -> np.ndarray:
        """Generate ``n_samples`` latents in the data scale."""
        check_is_fitted(self)
        shape = tuple(shape or self.latent_shape_)
        with torch.no_grad():
            z = ancestral_sample((n_samples, *shape), self.eps_fn(), self.schedule_, seed, self.torch_dtype)
        return (z / self.latent_scale_).numpy()

    # persistence

    def _config(self) -> dict:
        params = self.get_params()
        params["channel_multipliers"] = list(params["channel_multipliers"])
        return params

    def to_store(self) -> ParameterStore:
        check_is_fitted(self)
        return ParameterStore.from_module(
            self.model_, config=self._config(), kind="diffusion", step=self.step_,
            extra={"latent_shape": list(self.latent_shape_), "latent_scale": self.latent_scale_},
        )

    @classmethod
    def from_store(cls, store: ParameterStore) -> "LatentDiffusion":
        if store.kind != "diffusion":
            raise ValueError(f"expected a diffusion store, got {store.kind!r}")
        est = cls(**{k: v for k, v in store.config.items() if k in cls._get_param_names()})
        est.init_networks(store.extra["latent_shape"], store.extra["latent_scale"])
        store.load_into(est.model_)
        est.step_ = store.step
        return est


# -- functional surface -------------------------------------------------------

def denoise(z_t, t, params: ParameterStore) -> DenoiserOutput:
    return LatentDiffusion.from_store(params).predict_noise(z_t, t)


def sample_unconditional(shape: Sequence[int], params: ParameterStore, seed: int) -> np.ndarray:
    """``shape`` is ``(N, c, d, h, w)``."""
    est = LatentDiffusion.from_store(params)
    return est.sample(shape[0], seed, shape[1:])


def train_diffusion(latents, run_config: dict | None = None, **params):
    est = LatentDiffusion(**{**(run_config or {}), **params})
    est.fit(latents)
    return est.to_store(), est.log_
