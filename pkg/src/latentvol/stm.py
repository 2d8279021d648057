"""Vector-quantized 3D autoencoder with a patch discriminator.

The encoder compresses a volume by ``2**L`` per axis into a ``latent_channels``
grid, every latent vector is snapped to its nearest codebook row, and the
decoder maps the quantized grid back to a volume in [-1, 1]. Training
minimizes

    L_r + lambda_a * L_a + lambda_p * L_p + lambda_cb * L_cb + lambda_cm * L_cm

with an L1 reconstruction term, a hinge generator term on the patch
discriminator, discriminator feature matching, and the usual codebook and
commitment terms.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from .checkpoint import ParameterStore, save_checkpoint
from .layers import Downsample3d, ResBlock3d, Upsample3d, norm
from .seeding import torch_generator
from .training import adam, batch_indices, check_finite, lr_schedule
from .validation import as_tensor, check_divisible, check_is_fitted, check_volumes

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss_total", "loss_r", "loss_a", "loss_p", "loss_cb", "loss_cm", "disc_loss")


@dataclass(frozen=True)
class LossWeights:
    lambda_a: float = 0.1
    lambda_p: float = 1.0
    lambda_cb: float = 1.0
    lambda_cm: float = 0.25

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValueError(f"{name} must be >= 0, got {value}")


@dataclass(frozen=True)
class STMConfig:
    in_channels: int = 1
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2)
    blocks_per_level: int = 1
    latent_channels: int = 4
    codebook_size: int = 64
    disc_channels: int = 8
    disc_patch_level: int = 3
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        if not self.channel_multipliers:
            raise ValueError("channel_multipliers must name at least one level")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.disc_patch_level < 1:
            raise ValueError("disc_patch_level must be >= 1")

    @property
    def embedding_dim(self) -> int:
        return self.latent_channels

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def factor(self) -> int:
        return 2 ** self.levels

    def latent_shape(self, spatial: Sequence[int]) -> tuple[int, ...]:
        check_divisible(spatial, self.factor)
        return (self.latent_channels, *(n // self.factor for n in spatial))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d


# -- networks ----------------------------------------------------------------

class Encoder(nn.Module):
    def __init__(self, cfg: STMConfig):
        super().__init__()
        chs = [cfg.base_channels * m for m in cfg.channel_multipliers]
        self.conv_in = nn.Conv3d(cfg.in_channels, cfg.base_channels, 3, padding=1)
        self.down = nn.ModuleList()
        prev = cfg.base_channels
        for ch in chs:
            blocks = [Downsample3d(prev, ch)] + [ResBlock3d(ch, ch) for _ in range(cfg.blocks_per_level)]
            self.down.append(nn.Sequential(*blocks))
            prev = ch
        self.norm_out = norm(prev)
        self.conv_out = nn.Conv3d(prev, cfg.latent_channels, 1)

    def forward(self, x):
        h = self.conv_in(x)
        for stage in self.down:
            h = stage(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, cfg: STMConfig):
        super().__init__()
        chs = [cfg.base_channels * m for m in cfg.channel_multipliers]
        self.conv_in = nn.Conv3d(cfg.latent_channels, chs[-1], 3, padding=1)
        self.up = nn.ModuleList()
        targets = [cfg.base_channels] + chs[:-1]
        for ch, out in zip(reversed(chs), reversed(targets)):
            blocks = [ResBlock3d(ch, ch) for _ in range(cfg.blocks_per_level)] + [Upsample3d(ch, out)]
            self.up.append(nn.Sequential(*blocks))
        self.norm_out = norm(cfg.base_channels)
        self.conv_out = nn.Conv3d(cfg.base_channels, cfg.in_channels, 3, padding=1)

    def forward(self, z):
        h = self.conv_in(z)
        for stage in self.up:
            h = stage(h)
        return torch.tanh(self.conv_out(F.silu(self.norm_out(h))))


class QuantizationResult(NamedTuple):
    quantized: torch.Tensor
    indices: torch.Tensor
    loss_cb: torch.Tensor
    loss_cm: torch.Tensor


def nearest_codes(flat: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """Index of the nearest row of ``entries`` for every row of ``flat``.

    Exact squared distances (no norm expansion); ``argmin`` returns the first
    minimum, so ties go to the lowest index.
    """
    d = ((flat[:, None, :] - entries[None, :, :]) ** 2).sum(-1)
    return torch.argmin(d, dim=1)


def quantize(z: torch.Tensor, entries: torch.Tensor) -> QuantizationResult:
    """Snap every latent vector of ``z`` (channel axis 1, or 0 if unbatched) to the codebook.

    ``loss_cb`` and ``loss_cm`` are per-position squared distances averaged
    over positions; ``quantized`` carries straight-through gradients.
    """
    unbatched = z.dim() == 4
    if unbatched:
        z = z[None]
    if z.shape[1] != entries.shape[1]:
        raise ValueError(f"latent has {z.shape[1]} channels, codebook rows have {entries.shape[1]}")
    b, c, *spatial = z.shape
    flat = z.movedim(1, -1).reshape(-1, c)
    idx = nearest_codes(flat.detach(), entries.detach())
    q = entries[idx]
    loss_cb = ((flat.detach() - q) ** 2).sum(-1).mean()
    loss_cm = ((flat - q.detach()) ** 2).sum(-1).mean()
    q_st = flat + (q - flat).detach()
    quantized = q_st.reshape(b, *spatial, c).movedim(-1, 1)
    indices = idx.reshape(b, *spatial)
    if unbatched:
        quantized, indices = quantized[0], indices[0]
    return QuantizationResult(quantized, indices, loss_cb, loss_cm)


class Codebook(nn.Module):
    def __init__(self, size: int, dim: int):
        super().__init__()
        self.entries = nn.Parameter(torch.empty(size, dim).uniform_(-1.0 / size, 1.0 / size))
        self.register_buffer("usage_counts", torch.zeros(size))
        self.register_buffer("last_used", torch.zeros(size))
        self.register_buffer("initialized", torch.zeros(()))

    def forward(self, z):
        return quantize(z, self.entries)

    @torch.no_grad()
    def init_from(self, z: torch.Tensor, gen: torch.Generator) -> None:
        flat = z.movedim(1, -1).reshape(-1, z.shape[1])
        pick = torch.randint(0, flat.shape[0], (self.entries.shape[0],), generator=gen)
        self.entries.copy_(flat[pick])
        self.initialized.fill_(1.0)

    @torch.no_grad()
    def update_usage(self, indices: torch.Tensor, step: int) -> None:
        counts = torch.bincount(indices.reshape(-1), minlength=self.entries.shape[0]).to(self.usage_counts)
        self.usage_counts += counts
        self.last_used[counts > 0] = float(step)

    @torch.no_grad()
    def reseed_dead(self, z: torch.Tensor, step: int, patience: int, gen: torch.Generator) -> int:
        dead = (step - self.last_used) >= patience
        n = int(dead.sum())
        if n:
            flat = z.detach().movedim(1, -1).reshape(-1, z.shape[1])
            pick = torch.randint(0, flat.shape[0], (n,), generator=gen)
            self.entries[dead] = flat[pick]
            self.last_used[dead] = float(step)
        return n


class VQAutoencoder(nn.Module):
    def __init__(self, cfg: STMConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.codebook = Codebook(cfg.codebook_size, cfg.embedding_dim)
        self.decoder = Decoder(cfg)

    def forward(self, x):
        z = self.encoder(x)
        qr = self.codebook(z)
        return self.decoder(qr.quantized), qr, z


class DiscriminatorOutput(NamedTuple):
    logits: torch.Tensor
    features: list


class PatchDiscriminator(nn.Module):
    """Stack of stride-2 convolutions ending in one logit per patch.

    No normalization layers, so each logit depends only on its receptive field.
    """

    kernel, stride, padding = 4, 2, 1

    def __init__(self, in_channels: int = 1, channels: int = 8, levels: int = 3):
        super().__init__()
        self.stages = nn.ModuleList()
        prev = in_channels
        for i in range(levels):
            ch = channels * 2 ** min(i, 3)
            self.stages.append(nn.Conv3d(prev, ch, self.kernel, self.stride, self.padding))
            prev = ch
        self.head = nn.Conv3d(prev, 1, 3, padding=1)

    def forward(self, x) -> DiscriminatorOutput:
        feats = []
        h = x
        for conv in self.stages:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return DiscriminatorOutput(self.head(h), feats)


def receptive_field(levels: int) -> tuple[int, int, int]:
    """(size, jump, start offset) of one logit of :class:`PatchDiscriminator`.

    Logit ``i`` along an axis sees input voxels
    ``[start + i * jump, start + i * jump + size)``.
    """
    layers = [(PatchDiscriminator.kernel, PatchDiscriminator.stride, PatchDiscriminator.padding)] * levels
    layers.append((3, 1, 1))
    size, jump, start = 1, 1, 0
    for k, s, p in layers:
        start -= p * jump
        size += (k - 1) * jump
        jump *= s
    return size, jump, start


# -- losses ------------------------------------------------------------------

def stm_loss(v, v_rec, qr: QuantizationResult, disc_out_real: DiscriminatorOutput,
             disc_out_fake: DiscriminatorOutput, w: LossWeights):
    """Weighted autoencoder objective; returns ``(total, breakdown)``.

    ``disc_out_real`` may be ``None`` when ``lambda_p`` is zero and
    ``disc_out_fake`` may be ``None`` when both ``lambda_a`` and
    ``lambda_p`` are zero.
    """
    if isinstance(w, dict):
        w = LossWeights(**w)
    if v.shape != v_rec.shape:
        raise ValueError(f"shape mismatch: {tuple(v.shape)} vs {tuple(v_rec.shape)}")
    zero = v_rec.new_zeros(())
    loss_r = (v - v_rec).abs().mean()
    loss_a = -disc_out_fake.logits.mean() if disc_out_fake is not None else zero
    if disc_out_real is not None and disc_out_fake is not None:
        loss_p = sum(((fr.detach() - ff) ** 2).mean() for fr, ff in zip(disc_out_real.features, disc_out_fake.features))
        loss_p = loss_p / len(disc_out_fake.features)
    else:
        loss_p = zero
    total = (loss_r + w.lambda_a * loss_a + w.lambda_p * loss_p
             + w.lambda_cb * qr.loss_cb + w.lambda_cm * qr.loss_cm)
    breakdown = {
        "loss_total": total, "loss_r": loss_r, "loss_a": loss_a, "loss_p": loss_p,
        "loss_cb": qr.loss_cb, "loss_cm": qr.loss_cm,
    }
    return total, breakdown


def discriminator_hinge_loss(logits_real, logits_fake):
    return F.relu(1.0 - logits_real).mean() + F.relu(1.0 + logits_fake).mean()


# -- estimator ---------------------------------------------------------------

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class SpatialTransformer(TransformerMixin, BaseEstimator):
    """Vector-quantized volume autoencoder as a scikit-learn transformer.

    ``fit`` trains on volumes of shape ``(N, C, D, H, W)`` in [-1, 1];
    ``transform`` returns quantized latents ``(N, c, D/2**L, H/2**L, W/2**L)``
    and ``inverse_transform`` decodes them back to volumes.

    Parameters
    ----------
    base_channels, channel_multipliers, blocks_per_level, latent_channels,
    codebook_size : architecture; ``len(channel_multipliers)`` is the number
        of 2x downsamplings.
    disc_channels, disc_patch_level : width and number of stride-2 stages of
        the patch discriminator.
    lambda_a, lambda_p, lambda_cb, lambda_cm : loss weights.
    n_steps, batch_size, lr, disc_lr : optimization budget (Adam).
    lr_decay : ``"none"`` or ``"cosine"`` (generator lr decays to 0 at ``n_steps``).
    warmup_steps : generator steps before the adversarial term switches on.
    dead_code_steps : codes unused this many steps are reseeded from
        encoder outputs; 0 disables reseeding.
    reseed_until : last step at which reseeding may happen (default
        ``n_steps // 2``) so the decoder can settle on the final codebook.
    checkpoint_interval, checkpoint_dir : periodic checkpointing.
    """

    def __init__(self, in_channels=1, base_channels=32, channel_multipliers=(1, 2), blocks_per_level=1,
                 latent_channels=4, codebook_size=64, disc_channels=8, disc_patch_level=3,
                 lambda_a=0.1, lambda_p=1.0, lambda_cb=1.0, lambda_cm=0.25,
                 n_steps=5000, batch_size=6, lr=1e-3, disc_lr=1e-4, lr_decay="none", warmup_steps=500,
                 dead_code_steps=1000, reseed_until=None, checkpoint_interval=0, checkpoint_dir=None,
                 random_state=0, dtype="float32", verbose=0):
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.channel_multipliers = channel_multipliers
        self.blocks_per_level = blocks_per_level
        self.latent_channels = latent_channels
        self.codebook_size = codebook_size
        self.disc_channels = disc_channels
        self.disc_patch_level = disc_patch_level
        self.lambda_a = lambda_a
        self.lambda_p = lambda_p
        self.lambda_cb = lambda_cb
        self.lambda_cm = lambda_cm
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.disc_lr = disc_lr
        self.lr_decay = lr_decay
        self.warmup_steps = warmup_steps
        self.dead_code_steps = dead_code_steps
        self.reseed_until = reseed_until
        self.checkpoint_interval = checkpoint_interval
        self.checkpoint_dir = checkpoint_dir
        self.random_state = random_state
        self.dtype = dtype
        self.verbose = verbose

    # construction

    def config(self) -> STMConfig:
        return STMConfig(
            in_channels=self.in_channels, base_channels=self.base_channels,
            channel_multipliers=tuple(self.channel_multipliers), blocks_per_level=self.blocks_per_level,
            latent_channels=self.latent_channels, codebook_size=self.codebook_size,
            disc_channels=self.disc_channels, disc_patch_level=self.disc_patch_level,
            loss_weights=self.loss_weights(),
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_a, self.lambda_p, self.lambda_cb, self.lambda_cm)

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def init_networks(self) -> "SpatialTransformer":
        """Build freshly initialized networks without training."""
        cfg = self.config()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(self.random_state))
            self.model_ = VQAutoencoder(cfg).to(self.torch_dtype)
            self.discriminator_ = PatchDiscriminator(
                cfg.in_channels, cfg.disc_channels, cfg.disc_patch_level).to(self.torch_dtype)
        self.opt_g_ = adam(self.model_.parameters(), self.lr)
        self.opt_d_ = adam(self.discriminator_.parameters(), self.disc_lr)
        self.log_ = []
        self.step_ = 0
        return self

    # training

    def fit(self, X, y=None):
        X = check_volumes(X)
        cfg = self.config()
        check_divisible(X.shape[2:], cfg.factor)
        if X.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} channels, got {X.shape[1]}")
        self.init_networks()
        self._train(as_tensor(X, self.torch_dtype), self.n_steps)
        return self

    def _train(self, data: torch.Tensor, n_steps: int) -> None:
        gen = torch_generator(self.random_state)
        w = self.loss_weights()
        model, disc = self.model_, self.discriminator_
        opt_g, opt_d = self.opt_g_, self.opt_d_
        sched = lr_schedule(opt_g, self.lr_decay, self.n_steps, self.step_)
        use_disc = w.lambda_a > 0 or w.lambda_p > 0
        last_ckpt = None
        for _ in range(n_steps):
            step = self.step_
            x = data[batch_indices(data.shape[0], self.batch_size, gen)]
            z = model.encoder(x)
            if not bool(model.codebook.initialized):
                model.codebook.init_from(z, gen)
            qr = model.codebook(z)
            x_rec = model.decoder(qr.quantized)
            adversarial = step >= self.warmup_steps
            w_step = w if adversarial else LossWeights(0.0, w.lambda_p, w.lambda_cb, w.lambda_cm)
            if use_disc:
                with torch.no_grad():
                    d_real = disc(x)
                d_fake = disc(x_rec)
            else:
                d_real = d_fake = None
            total, parts = stm_loss(x, x_rec, qr, d_real, d_fake, w_step)
            row = {"step": step, **{k: float(v.detach()) for k, v in parts.items()}}
            check_finite(row["loss_total"], step, "generator loss", last_ckpt)
            opt_g.zero_grad(set_to_none=True)
            total.backward()
            opt_g.step()
            sched.step()

            disc_loss = 0.0
            if use_disc:
                opt_d.zero_grad(set_to_none=True)
                d_loss = discriminator_hinge_loss(disc(x).logits, disc(x_rec.detach()).logits)
                disc_loss = float(d_loss.detach())
                check_finite(disc_loss, step, "discriminator loss", last_ckpt)
                d_loss.backward()
                opt_d.step()
            row["disc_loss"] = disc_loss

            model.codebook.update_usage(qr.indices, step)
            reseed_until = self.n_steps // 2 if self.reseed_until is None else self.reseed_until
            if self.dead_code_steps and step < reseed_until:
                model.codebook.reseed_dead(z, step, self.dead_code_steps, gen)
            self.log_.append(row)
            self.step_ += 1
            if self.verbose and step % max(1, self.verbose) == 0:
                logger.info("stm step %d: %s", step, {k: round(v, 5) for k, v in row.items() if k != "step"})
            if self.checkpoint_interval and self.checkpoint_dir and self.step_ % self.checkpoint_interval == 0:
                last_ckpt = str(Path(self.checkpoint_dir) / "stm_last.ckpt")
                save_checkpoint(self.to_store(), last_ckpt)

    # inference

    def _run(self, fn, X, batch: int = 8):
        outs = []
        with torch.no_grad():
            for i in range(0, X.shape[0], batch):
                outs.append(fn(as_tensor(X[i:i + batch], self.torch_dtype)).numpy())
        return np.concatenate(outs)

    def encode(self, X) -> np.ndarray:
        """Continuous encoder output before quantization."""
        check_is_fitted(self)
        X = check_volumes(X)
        check_divisible(X.shape[2:], self.config().factor)
        return self._run(self.model_.encoder, X)

    def quantize(self, Z) -> QuantizationResult:
        check_is_fitted(self)
        with torch.no_grad():
            return self.model_.codebook(as_tensor(Z, self.torch_dtype))

    def transform(self, X) -> np.ndarray:
        """Quantized latents ``(N, c, d, h, w)``."""
        check_is_fitted(self)
        X = check_volumes(X)
        check_divisible(X.shape[2:], self.config().factor)
        return self._run(lambda x: self.model_.codebook(self.model_.encoder(x)).quantized, X)

    def inverse_transform(self, Z) -> np.ndarray:
        """Decode latents to volumes ``(N, C, D, H, W)`` in [-1, 1]."""
        check_is_fitted(self)
        Z = check_volumes(Z, name="Z")
        if Z.shape[1] != self.latent_channels:
            raise ValueError(f"latent has {Z.shape[1]} channels, expected {self.latent_channels}")
        return self._run(self.model_.decoder, Z)

    decode = inverse_transform

    def reconstruct(self, X) -> np.ndarray:
        return self.inverse_transform(self.transform(X))

    def discriminate(self, X) -> np.ndarray:
        check_is_fitted(self, "discriminator_")
        return self._run(lambda x: self.discriminator_(x).logits, check_volumes(X))

    # persistence

    def to_store(self) -> ParameterStore:
        check_is_fitted(self)
        arrays = {f"autoencoder.{k}": v for k, v in ParameterStore.from_module(self.model_).arrays.items()}
        arrays.update({f"discriminator.{k}": v for k, v in ParameterStore.from_module(self.discriminator_).arrays.items()})
        params = self.get_params()
        params["channel_multipliers"] = list(params["channel_multipliers"])
        return ParameterStore(arrays, config=params, kind="stm", step=self.step_)

    @classmethod
    def from_store(cls, store: ParameterStore) -> "SpatialTransformer":
        if store.kind != "stm":
            raise ValueError(f"expected an stm store, got {store.kind!r}")
        est = cls(**{k: v for k, v in store.config.items() if k in cls._get_param_names()})
        est.init_networks()
        _load_prefixed(store, "autoencoder.", est.model_)
        _load_prefixed(store, "discriminator.", est.discriminator_)
        est.step_ = store.step
        return est


def _load_prefixed(store: ParameterStore, prefix: str, module: nn.Module) -> None:
    arrays = {k[len(prefix):]: v for k, v in store.arrays.items() if k.startswith(prefix)}
    ParameterStore(arrays).load_into(module)


# -- functional surface -------------------------------------------------------

def encode(v, params: ParameterStore) -> np.ndarray:
    return SpatialTransformer.from_store(params).encode(v)


def decode(z_q, params: ParameterStore) -> np.ndarray:
    return SpatialTransformer.from_store(params).inverse_transform(z_q)


def discriminate(v, params: ParameterStore) -> np.ndarray:
    return SpatialTransformer.from_store(params).discriminate(v)


def train_stm(volumes, run_config: dict | None = None, **params):
    """Fit a :class:`SpatialTransformer`; returns ``(store, log_rows)``."""
    est = SpatialTransformer(**{**(run_config or {}), **params})
    est.fit(volumes)
    return est.to_store(), est.log_
