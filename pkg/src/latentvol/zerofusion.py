"""Mask-conditioned control branch on top of a frozen latent denoiser.

The branch is a trainable copy of the denoiser's down path and middle block.
Its input convolution also sees the one-hot mask occupancy at latent
resolution. Two zero-initialized 1x1x1 convolutions merge its features into
the frozen noise estimate:

    eps = eps_frozen + up(h_out(f_d + up(h_in(f_m))))

``f_m`` is the middle-block output and ``f_d`` the output of down level
``control_level``; ``up`` is trilinear resampling to the next resolution.
Because ``h_out`` starts at zero, an untrained branch reproduces the frozen
model bit for bit.
"""
from __future__ import annotations

import hashlib
import logging
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator

from .checkpoint import CompatibilityError, ParameterStore
from .diffusion import (
    DownPath,
    LatentDiffusion,
    UNet3D,
    UNet3DConfig,
    ancestral_sample,
    draw_batch,
    q_sample,
)
from .layers import ZeroConv3d
from .seeding import torch_generator
from .training import adam, check_finite, lr_schedule
from .validation import as_tensor, check_is_fitted, check_masks
from .volume_io import SegMask3D, Volume3D

logger = logging.getLogger(__name__)


class FrozenWeightsModified(AssertionError):
    pass


# -- condition ---------------------------------------------------------------

def _factor(mask_spatial: Sequence[int], latent_spatial: Sequence[int]) -> int:
    factors = set()
    for m, z in zip(mask_spatial, latent_spatial):
        if z <= 0 or m % z:
            raise ValueError(f"mask shape {tuple(mask_spatial)} is not a multiple of latent shape {tuple(latent_spatial)}")
        factors.add(m // z)
    if len(factors) != 1:
        raise ValueError(f"mask shape {tuple(mask_spatial)} and latent shape {tuple(latent_spatial)} differ by unequal factors")
    return factors.pop()


def condition_tensor(masks: torch.Tensor, num_classes: int, latent_spatial: Sequence[int],
                     dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Per-class occupancy fractions ``(B, num_classes, d, h, w)`` from labels ``(B, D, H, W)``."""
    masks = masks.long()
    if masks.numel() and int(masks.max()) >= num_classes:
        raise ValueError(f"mask label {int(masks.max())} outside num_classes={num_classes}")
    k = _factor(masks.shape[1:], latent_spatial)
    onehot = F.one_hot(masks, num_classes).movedim(-1, 1).to(torch.float64)
    occ = F.avg_pool3d(onehot, k) if k > 1 else onehot
    return occ.to(dtype)


def encode_condition(mask: SegMask3D | np.ndarray, latent_shape: Sequence[int],
                     num_classes: int | None = None) -> np.ndarray:
    """One-hot mask box-averaged down to the latent grid, shape ``(num_classes, d, h, w)``.

    ``latent_shape`` may include the channel axis; only the last three
    entries are used.
    """
    if isinstance(mask, SegMask3D):
        labels, n = mask.labels, mask.num_classes
    else:
        labels = np.asarray(mask)
        n = int(labels.max()) + 1
    n = num_classes or n
    out = condition_tensor(torch.as_tensor(labels[None].astype(np.int64)), n, tuple(latent_shape)[-3:], torch.float64)
    return out[0].numpy()


# -- branch ------------------------------------------------------------------

class ControlFeatures(NamedTuple):
    f_d: torch.Tensor
    f_m: torch.Tensor


def _resize(x: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    if tuple(x.shape[2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="trilinear", align_corners=False)


def fuse(eps_frozen: torch.Tensor, feats: ControlFeatures, h_in: nn.Module, h_out: nn.Module,
         latent_shape: Sequence[int] | None = None) -> torch.Tensor:
    """``eps_frozen + up(h_out(f_d + up(h_in(f_m))))`` at the latent resolution."""
    spatial = tuple(latent_shape)[-3:] if latent_shape is not None else tuple(eps_frozen.shape[2:])
    inner = _resize(h_in(feats.f_m), feats.f_d.shape[2:])
    if inner.shape != feats.f_d.shape:
        raise ValueError(f"h_in(f_m) has shape {tuple(inner.shape)}, f_d has {tuple(feats.f_d.shape)}")
    delta = _resize(h_out(feats.f_d + inner), spatial)
    if delta.shape != eps_frozen.shape:
        raise ValueError(f"fused correction {tuple(delta.shape)} does not match {tuple(eps_frozen.shape)}")
    return eps_frozen + delta


class ControlBranch(nn.Module):
    """Trainable copy of a denoiser's down path with a condition-aware stem."""

    def __init__(self, cfg: UNet3DConfig, cond_channels: int, control_level: int = 0):
        super().__init__()
        if not 0 <= control_level < cfg.levels:
            raise ValueError(f"control_level must be in [0, {cfg.levels})")
        self.cfg = cfg
        self.cond_channels = cond_channels
        self.control_level = control_level
        self.path = DownPath(cfg, in_channels=cfg.in_channels + cond_channels)
        down_ch = cfg.channels[control_level]
        self.h_in = ZeroConv3d(cfg.channels[-1], down_ch)
        self.h_out = ZeroConv3d(down_ch, cfg.out_channels)

    @classmethod
    def from_backbone(cls, unet: UNet3D, cond_channels: int, control_level: int = 0,
                      seed: int = 0) -> "ControlBranch":
        """Copy the backbone's down path; the stem's condition weights get default init."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(seed))
            branch = cls(unet.cfg, cond_channels, control_level)
        branch = branch.to(next(unet.parameters()).dtype)
        src = unet.encoder.state_dict()
        dst = branch.path.state_dict()
        with torch.no_grad():
            for name, value in src.items():
                if name == "conv_in.weight":
                    dst[name][:, : value.shape[1]].copy_(value)
                else:
                    dst[name].copy_(value)
        return branch

    def forward(self, z_t, t, cond) -> ControlFeatures:
        if cond.shape[1] != self.cond_channels:
            raise ValueError(f"condition has {cond.shape[1]} channels, branch expects {self.cond_channels}")
        if cond.shape[2:] != z_t.shape[2:]:
            raise ValueError(f"condition grid {tuple(cond.shape[2:])} != latent grid {tuple(z_t.shape[2:])}")
        skips, f_m, _ = self.path(torch.cat([z_t, cond], dim=1), t)
        return ControlFeatures(skips[self.control_level], f_m)


def control_forward(z_t, t, cond, branch: ControlBranch) -> ControlFeatures:
    return branch(z_t, t, cond)


def module_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, value in sorted(module.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- estimators --------------------------------------------------------------

class _ConditionalMixin:
    def _cond(self, masks, spatial) -> torch.Tensor:
        return condition_tensor(torch.as_tensor(check_masks(masks).astype(np.int64)), self.num_classes_, spatial,
                                self.torch_dtype)


class ZeroFusion(_ConditionalMixin, BaseEstimator):
    """Mask-conditioned generation from a frozen :class:`LatentDiffusion` backbone.

    ``fit(Z, masks)`` trains only the control branch (copy, stem, zero
    modules) on latents ``Z`` paired with label grids ``masks``;
    ``sample(masks, seed)`` returns conditional latents. The backbone's
    weights are checksummed before and after training.
    """

    def __init__(self, backbone=None, num_classes=None, control_level=0, n_steps=1000, batch_size=6,
                 lr=2.5e-5, lr_decay="none", random_state=0, verbose=0):
        self.backbone = backbone
        self.num_classes = num_classes
        self.control_level = control_level
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.random_state = random_state
        self.verbose = verbose

    @property
    def torch_dtype(self) -> torch.dtype:
        return self.backbone.torch_dtype

    def _check_backbone(self) -> LatentDiffusion:
        if self.backbone is None:
            raise ValueError("ZeroFusion needs a fitted LatentDiffusion backbone")
        check_is_fitted(self.backbone)
        return self.backbone

    def init_branch(self, num_classes: int) -> "ZeroFusion":
        bb = self._check_backbone()
        for p in bb.model_.parameters():
            p.requires_grad_(False)
        self.num_classes_ = int(num_classes)
        self.branch_ = ControlBranch.from_backbone(bb.model_, self.num_classes_, self.control_level, self.random_state)
        self.backbone_checksum_ = module_checksum(bb.model_)
        self.optimizer_ = adam(self.branch_.parameters(), self.lr)
        self.log_ = []
        self.step_ = 0
        return self

    def fit(self, Z, masks):
        bb = self._check_backbone()
        Z = bb._check_latents(Z)
        M = check_masks(masks)
        if len(M) != len(Z):
            raise ValueError(f"{len(Z)} latents but {len(M)} masks")
        self.init_branch(self.num_classes or int(M.max()) + 1)
        data = as_tensor(Z, self.torch_dtype) * bb.latent_scale_
        cond = self._cond(M, Z.shape[2:])
        self._train(data, cond, self.n_steps)
        return self

    def predict_noise(self, z_t, t, cond) -> torch.Tensor:
        """Fused noise estimate on the scaled latent; ``cond`` is the occupancy tensor."""
        eps = self.backbone.model_(z_t, t)
        return fuse(eps, self.branch_(z_t, t, cond), self.branch_.h_in, self.branch_.h_out, z_t.shape)

    def batch_loss(self, z0, t, eps, cond) -> torch.Tensor:
        z_t = q_sample(z0, t, eps, self.backbone.schedule_)
        return F.mse_loss(self.predict_noise(z_t, t, cond), eps)

    def _train(self, data, cond, n_steps: int) -> None:
        bb = self.backbone
        gen = torch_generator(self.random_state)
        sched = lr_schedule(self.optimizer_, self.lr_decay, self.n_steps, self.step_)
        T = bb.schedule_.T
        for _ in range(self.step_):
            draw_batch(data, self.batch_size, T, gen)
        for _ in range(n_steps):
            step = self.step_
            idx, t, eps = draw_batch(data, self.batch_size, T, gen)
            loss = self.batch_loss(data[idx], t, eps, cond[idx])
            value = float(loss.detach())
            check_finite(value, step, "zerofusion loss")
            self.optimizer_.zero_grad(set_to_none=True)
            loss.backward()
            self.optimizer_.step()
            sched.step()
            self.log_.append({"step": step, "loss": value})
            self.step_ += 1
            if self.verbose and step % max(1, self.verbose) == 0:
                logger.info("zerofusion step %d loss %.5f", step, value)
        self.verify_frozen()

    def verify_frozen(self) -> None:
        if module_checksum(self.backbone.model_) != self.backbone_checksum_:
            raise FrozenWeightsModified("backbone weights changed during control-branch training")

    def eps_fn(self, cond: torch.Tensor):
        def fn(z, t):
            return self.predict_noise(z, t, cond)

        return fn

    def sample(self, masks, seed: int = 0) -> np.ndarray:
        """One latent per mask, in the data scale."""
        check_is_fitted(self, "branch_")
        bb = self.backbone
        M = check_masks(masks)
        shape = (len(M), *bb.latent_shape_)
        cond = self._cond(M, shape[2:])
        with torch.no_grad():
            z = ancestral_sample(shape, self.eps_fn(cond), bb.schedule_, seed, self.torch_dtype)
        return (z / bb.latent_scale_).numpy()

    # persistence

    def to_store(self) -> ParameterStore:
        check_is_fitted(self, "branch_")
        config = {k: v for k, v in self.get_params(deep=False).items() if k != "backbone"}
        config["num_classes"] = self.num_classes_
        return ParameterStore.from_module(
            self.branch_, config=config, kind="zerofusion", step=self.step_,
            parent_hash=self.backbone.to_store().checksum(),
            extra={"frozen_backbone_hash": self.backbone.to_store().checksum()},
        )

    @classmethod
    def from_store(cls, store: ParameterStore, backbone: LatentDiffusion) -> "ZeroFusion":
        if store.kind != "zerofusion":
            raise ValueError(f"expected a zerofusion store, got {store.kind!r}")
        expected = store.extra.get("frozen_backbone_hash")
        actual = backbone.to_store().checksum()
        if expected != actual:
            raise CompatibilityError(
                f"control branch was trained against backbone {expected}, got backbone {actual}"
            )
        est = cls(backbone=backbone, **{k: v for k, v in store.config.items() if k in cls._get_param_names()})
        est.init_branch(store.config["num_classes"])
        store.load_into(est.branch_)
        est.step_ = store.step
        return est


class ConcatBaseline(_ConditionalMixin, LatentDiffusion):
    """Baseline conditioning: mask occupancy concatenated to the noisy latent.

    Same U-Net as :class:`LatentDiffusion` with extra input channels, trained
    from scratch.
    """

    def __init__(self, num_classes=None, base_channels=16, channel_multipliers=(1, 1, 2, 2), levels=4,
                 resnet_blocks_per_level=3, attention_per_level=1, mid_resnet_blocks=2, mid_attention=1,
                 time_embedding_dim=32, timesteps=200, beta_start=None, beta_end=None,
                 n_steps=1000, batch_size=6, lr=1e-4, lr_decay="none", scale_latents=True,
                 checkpoint_interval=0, checkpoint_dir=None, random_state=0, dtype="float32", verbose=0):
        super().__init__(
            base_channels=base_channels, channel_multipliers=channel_multipliers, levels=levels,
            resnet_blocks_per_level=resnet_blocks_per_level, attention_per_level=attention_per_level,
            mid_resnet_blocks=mid_resnet_blocks, mid_attention=mid_attention,
            time_embedding_dim=time_embedding_dim, timesteps=timesteps, beta_start=beta_start,
            beta_end=beta_end, n_steps=n_steps, batch_size=batch_size, lr=lr, lr_decay=lr_decay,
            scale_latents=scale_latents, checkpoint_interval=checkpoint_interval,
            checkpoint_dir=checkpoint_dir, random_state=random_state, dtype=dtype, verbose=verbose,
        )
        self.num_classes = num_classes

    checkpoint_name = "concat_last.ckpt"

    def _build_model(self, latent_shape) -> nn.Module:
        c = latent_shape[0]
        cfg = self.unet_config(c + self.num_classes_)
        return UNet3D(UNet3DConfig(**{**cfg.to_dict(), "out_channels": c}))

    def init_networks(self, latent_shape, latent_scale: float = 1.0, num_classes: int | None = None):
        self.num_classes_ = int(num_classes or self.num_classes or 2)
        return super().init_networks(latent_shape, latent_scale)

    def fit(self, Z, masks):
        Z = self._check_latents(Z)
        M = check_masks(masks)
        if len(M) != len(Z):
            raise ValueError(f"{len(Z)} latents but {len(M)} masks")
        scale = 1.0 / float(Z.std()) if self.scale_latents and Z.std() > 0 else 1.0
        self.init_networks(Z.shape[1:], scale, self.num_classes or int(M.max()) + 1)
        self._train(as_tensor(Z, self.torch_dtype) * self.latent_scale_, self.n_steps,
                    cond=self._cond(M, Z.shape[2:]))
        return self

    def _eps(self, z_t, t, cond=None):
        return self.model_(torch.cat([z_t, cond], dim=1), t)

    def sample(self, masks, seed: int = 0) -> np.ndarray:
        check_is_fitted(self)
        M = check_masks(masks)
        shape = (len(M), *self.latent_shape_)
        cond = self._cond(M, shape[2:])
        model = self.model_
        with torch.no_grad():
            z = ancestral_sample(shape, lambda z, t: model(torch.cat([z, cond], dim=1), t),
                                 self.schedule_, seed, self.torch_dtype)
        return (z / self.latent_scale_).numpy()

    def to_store(self) -> ParameterStore:
        store = super().to_store()
        store.kind = "concat_baseline"
        store.extra["num_classes"] = self.num_classes_
        return store

    @classmethod
    def from_store(cls, store: ParameterStore) -> "ConcatBaseline":
        if store.kind != "concat_baseline":
            raise ValueError(f"expected a concat_baseline store, got {store.kind!r}")
        est = cls(**{k: v for k, v in store.config.items() if k in cls._get_param_names()})
        est.init_networks(store.extra["latent_shape"], store.extra["latent_scale"], store.extra["num_classes"])
        store.load_into(est.model_)
        est.step_ = store.step
        return est


# -- functional surface -------------------------------------------------------

def train_zerofusion(latents, masks, backbone: LatentDiffusion, **params):
    est = ZeroFusion(backbone=backbone, **params).fit(latents, masks)
    return est, est.log_


def sample_conditional(mask, stm, backbone: LatentDiffusion, branch: ZeroFusion | None, seed: int) -> Volume3D:
    """Generate one volume for ``mask``; ``branch=None`` samples unconditionally."""
    labels = check_masks(mask)
    if branch is None:
        z = backbone.sample(len(labels), seed)
    else:
        z = branch.sample(labels, seed)
    vol = stm.inverse_transform(z)[0]
    return Volume3D(vol, intensity_range=(-1.0, 1.0), modality_tag="generated")
