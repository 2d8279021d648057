"""Stage runners shared by the CLI and the tests.

Every stage reads the resolved config, writes its artifacts under
``run.out`` and drops ``resolved_config.<stage>.json`` next to them:

    <out>/data/                     phantoms + manifest.json
    <out>/checkpoints/<kind>.ckpt   stm, diffusion, zerofusion, concat_baseline
    <out>/logs/<kind>.csv           per-step training losses
    <out>/samples/<mode>/           generated volumes + their masks
    <out>/reports/<mode>/           report.json / report.csv
    <out>/ablation/                 ablation table

Stage seeds come from ``derive_seed(run.seed, 0, <stage>)``. Downstream
stages verify the config hash of the checkpoints they consume against the
current config, so a stale upstream checkpoint is refused rather than
silently reused.
"""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Mapping

import numpy as np

from ..checkpoint import ParameterStore, config_hash, load_checkpoint, save_checkpoint
from ..diffusion import LatentDiffusion
from ..metrics import MetricReport, evaluate as evaluate_manifests, report_from_pairs
from ..seeding import derive_seed
from ..stm import LOG_COLUMNS as STM_LOG_COLUMNS, SpatialTransformer
from ..training import write_csv
from ..volume_io import (DatasetManifest, ManifestEntry, PhantomSpec, SegMask3D, Volume3D, _atomic_write,
                         build_dataset, load_volume, save_volume)
from ..zerofusion import ConcatBaseline, ZeroFusion
from .config import dump

logger = logging.getLogger(__name__)


class MissingArtifactError(FileNotFoundError):
    """An upstream stage has not been run (or wrote somewhere else)."""


class MissingCheckpointError(MissingArtifactError):
    pass


class BudgetMismatchError(ValueError):
    """Ablation arms were configured with different training budgets."""


# -- paths and seeds -----------------------------------------------------------

class RunPaths:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def manifest(self) -> Path:
        return self.data / "manifest.json"

    def checkpoint(self, kind: str) -> Path:
        return self.root / "checkpoints" / f"{kind}.ckpt"

    def log(self, kind: str) -> Path:
        return self.root / "logs" / f"{kind}.csv"

    def samples(self, mode: str) -> Path:
        return self.root / "samples" / mode

    def report(self, mode: str) -> Path:
        return self.root / "reports" / mode

    @property
    def ablation(self) -> Path:
        return self.root / "ablation"


def stage_seed(config: Mapping, stream: str, index: int = 0) -> int:
    return derive_seed(int(config["run"]["seed"]), index, stream)


def write_snapshot(config: Mapping, paths: RunPaths, stage: str) -> Path:
    path = paths.root / f"resolved_config.{stage}.json"
    _atomic_write(path, dump(config).encode("utf-8"))
    return path


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- estimators from config ------------------------------------------------------

def phantom_spec(config: Mapping) -> PhantomSpec:
    d = config["data"]
    return PhantomSpec(
        grid_shape=tuple(d["grid_shape"]),
        head_axes=tuple(d["head_axes"]),
        tumor_count_range=tuple(d["tumor_count_range"]),
        tumor_radius_range=tuple(d["tumor_radius_range"]),
        smooth_noise_scale=d["smooth_noise_scale"],
        modality_tag=d["modality_tag"],
        intensity_range=tuple(d["intensity_range"]),
    )


def num_classes(config: Mapping) -> int:
    """Background plus one label per tumor the phantom generator may place."""
    return int(config["data"]["tumor_count_range"][1]) + 1


def make_stm(config: Mapping) -> SpatialTransformer:
    return SpatialTransformer(**config["stm"], random_state=stage_seed(config, "stm"))


def make_diffusion(config: Mapping) -> LatentDiffusion:
    return LatentDiffusion(**config["diffusion"], random_state=stage_seed(config, "diffusion"))


def make_zerofusion(config: Mapping, backbone: LatentDiffusion | None, seed: int | None = None) -> ZeroFusion:
    seed = stage_seed(config, "zerofusion") if seed is None else seed
    return ZeroFusion(backbone=backbone, num_classes=num_classes(config), **config["zerofusion"], random_state=seed)


def make_concat(config: Mapping, seed: int | None = None) -> ConcatBaseline:
    seed = stage_seed(config, "concat_baseline") if seed is None else seed
    arch = {k: v for k, v in config["diffusion"].items() if k not in config["concat_baseline"]}
    return ConcatBaseline(num_classes=num_classes(config), **arch, **config["concat_baseline"], random_state=seed)


def expected_hash(est, kind: str) -> str:
    """Config hash a checkpoint written by ``est`` will carry."""
    params = est.get_params(deep=False)
    if kind == "zerofusion":
        params = {k: v for k, v in params.items() if k != "backbone"}
    return config_hash({"kind": kind, **params})


def _load(paths: RunPaths, kind: str, est) -> ParameterStore:
    path = paths.checkpoint(kind)
    if not path.exists():
        raise MissingCheckpointError(f"missing checkpoint: {path} (run the stage that trains {kind!r} first)")
    return load_checkpoint(path, expected_kind=kind, expected_config_hash=expected_hash(est, kind))


def load_stm(config: Mapping, paths: RunPaths) -> SpatialTransformer:
    return SpatialTransformer.from_store(_load(paths, "stm", make_stm(config)))


def load_diffusion(config: Mapping, paths: RunPaths) -> LatentDiffusion:
    return LatentDiffusion.from_store(_load(paths, "diffusion", make_diffusion(config)))


def load_zerofusion(config: Mapping, paths: RunPaths, backbone: LatentDiffusion) -> ZeroFusion:
    return ZeroFusion.from_store(_load(paths, "zerofusion", make_zerofusion(config, None)), backbone)


def load_concat(config: Mapping, paths: RunPaths) -> ConcatBaseline:
    return ConcatBaseline.from_store(_load(paths, "concat_baseline", make_concat(config)))


def load_dataset(paths: RunPaths) -> DatasetManifest:
    if not paths.manifest.exists():
        raise MissingArtifactError(f"missing dataset manifest: {paths.manifest} (run make-phantoms first)")
    return DatasetManifest.load(paths.manifest)


def _save(store: ParameterStore, paths: RunPaths, kind: str, log: list[dict], columns) -> dict:
    checksum = save_checkpoint(store, paths.checkpoint(kind))
    write_csv(log, paths.log(kind), columns)
    return {"checkpoint": str(paths.checkpoint(kind)), "checksum": checksum, "steps": store.step}


# -- stages ------------------------------------------------------------------

def make_phantoms(config: Mapping) -> dict:
    paths = RunPaths(config["run"]["out"])
    man = build_dataset(phantom_spec(config), int(config["data"]["n_phantoms"]), stage_seed(config, "data"),
                        paths.data, overwrite=True)
    write_snapshot(config, paths, "make-phantoms")
    return {"manifest": str(paths.manifest), "n": len(man)}


def train_stm(config: Mapping) -> dict:
    paths = RunPaths(config["run"]["out"])
    X, _ = load_dataset(paths).arrays()
    est = make_stm(config).fit(X)
    write_snapshot(config, paths, "train-stm")
    return _save(est.to_store(), paths, "stm", est.log_, STM_LOG_COLUMNS)


def latents(config: Mapping, paths: RunPaths, stm: SpatialTransformer | None = None):
    """Quantized latents and masks of the dataset."""
    stm = stm or load_stm(config, paths)
    X, M = load_dataset(paths).arrays()
    return stm.transform(X), M


def train_diffusion(config: Mapping) -> dict:
    paths = RunPaths(config["run"]["out"])
    stm_store = _load(paths, "stm", make_stm(config))
    Z, _ = latents(config, paths, SpatialTransformer.from_store(stm_store))
    est = make_diffusion(config).fit(Z)
    store = est.to_store()
    store.parent_hash = stm_store.checksum()
    write_snapshot(config, paths, "train-diffusion")
    return _save(store, paths, "diffusion", est.log_, ("step", "loss"))


def train_conditional(config: Mapping, mode: str | None = None) -> dict:
    """Train the control branch (``zerofusion``) or the concat baseline."""
    paths = RunPaths(config["run"]["out"])
    mode = mode or config["run"]["condition_mode"]
    Z, M = latents(config, paths)
    if mode == "zerofusion":
        backbone = load_diffusion(config, paths)
        est = make_zerofusion(config, backbone).fit(Z, M)
    elif mode == "concat_baseline":
        est = make_concat(config).fit(Z, M)
    else:
        raise ValueError(f"condition_mode {mode!r} has nothing to train")
    write_snapshot(config, paths, "train-zerofusion")
    return _save(est.to_store(), paths, mode, est.log_, ("step", "loss"))


def load_generator(config: Mapping, paths: RunPaths, mode: str):
    """Checkpointed model that produces latents under ``mode``."""
    if mode == "concat_baseline":
        return load_concat(config, paths)
    backbone = load_diffusion(config, paths)
    return load_zerofusion(config, paths, backbone) if mode == "zerofusion" else backbone


def generate(config: Mapping, paths: RunPaths, masks: np.ndarray, seed: int, mode: str,
             stm: SpatialTransformer | None = None, model=None) -> np.ndarray:
    """Volumes ``(N, 1, D, H, W)`` for ``masks`` under ``mode``."""
    stm = stm or load_stm(config, paths)
    model = model or load_generator(config, paths, mode)
    z = model.sample(len(masks), seed) if mode == "none" else model.sample(masks, seed)
    return stm.inverse_transform(z)


def _write_samples(out_dir: Path, vols: np.ndarray, masks: list[SegMask3D], seed: int, mode: str) -> DatasetManifest:
    entries = []
    for i, (v, m) in enumerate(zip(vols, masks)):
        vname, mname = f"sample_{i:04d}_vol.lvol", f"sample_{i:04d}_mask.lvol"
        save_volume(Volume3D(v, intensity_range=(-1.0, 1.0), modality_tag="generated"), out_dir / vname)
        save_volume(m, out_dir / mname)
        entries.append(ManifestEntry(vname, mname, derive_seed(seed, i, "sample"), "generated"))
    man = DatasetManifest(entries, normalization={"method": "minmax_sym"}, grid_shape=tuple(vols.shape[2:]),
                          root=out_dir, meta={"sample_seed": int(seed), "condition_mode": mode})
    man.save(out_dir / "manifest.json")
    return man


def sample(config: Mapping, mask_path=None, seed: int | None = None, montage: bool | None = None) -> dict:
    """Generate one volume per dataset mask, or for the single mask at ``mask_path``."""
    paths = RunPaths(config["run"]["out"])
    mode = config["run"]["condition_mode"]
    seed = int(config["sample"]["seed"] if seed is None else seed)
    stm = load_stm(config, paths)
    model = load_generator(config, paths, mode)
    if mask_path is not None:
        m = load_volume(mask_path)
        if not isinstance(m, SegMask3D):
            raise ValueError(f"{mask_path} does not hold a segmentation mask")
        masks = [m]
    else:
        man = load_dataset(paths)
        masks = [man.load_pair(i)[1] for i in range(len(man))]
    vols = generate(config, paths, np.stack([m.labels for m in masks]), seed, mode, stm=stm, model=model)
    out_dir = paths.samples(mode)
    _write_samples(out_dir, vols, masks, seed, mode)
    write_snapshot(config, paths, "sample")
    result = {"samples": str(out_dir), "n": len(vols), "mode": mode, "seed": seed}
    if config["sample"]["montage"] if montage is None else montage:
        from .montage import save_montage

        result["montage"] = str(save_montage(vols, out_dir / "montage.png"))
    return result


def evaluate(config: Mapping) -> dict:
    paths = RunPaths(config["run"]["out"])
    mode = config["run"]["condition_mode"]
    gen_path = paths.samples(mode) / "manifest.json"
    if not gen_path.exists():
        raise MissingArtifactError(f"missing samples: {gen_path} (run sample first)")
    report = evaluate_manifests(DatasetManifest.load(gen_path), load_dataset(paths), paths.report(mode))
    write_snapshot(config, paths, "evaluate")
    return report.to_dict()


# -- ablation ------------------------------------------------------------------

ARMS = ("zerofusion", "concat_baseline")
ABLATION_COLUMNS = ("arm", "seed", "n_steps", "batch_size", "ssim_mean", "ssim_std", "ms_ssim_mean", "ms_ssim_std",
                    "psnr_mean", "psnr_std", "mmd", "dice_mean", "dice_std", "n_pairs")


def check_budgets(config: Mapping) -> dict:
    budgets = {arm: (config[arm]["n_steps"], config[arm]["batch_size"]) for arm in ARMS}
    if len(set(budgets.values())) != 1:
        raise BudgetMismatchError(f"ablation arms need identical budgets (n_steps, batch_size), got {budgets}")
    n_steps, batch_size = budgets[ARMS[0]]
    return {"n_steps": n_steps, "batch_size": batch_size}


def ablate(config: Mapping) -> dict:
    """Train and evaluate both conditioning arms for every seed in ``ablate.seeds``.

    The STM and the diffusion backbone are shared upstream artifacts. Each
    seed trains both arms from the same derived seed, samples the dataset
    masks with that seed, and scores them against the real volumes. The
    trend passes when the zerofusion arm's mean SSIM is at least the
    baseline's for a strict majority of seeds.
    """
    budget = check_budgets(config)
    paths = RunPaths(config["run"]["out"])
    man = load_dataset(paths)
    X, M = man.arrays()
    real = [man.load_pair(i)[0] for i in range(len(man))]
    stm = load_stm(config, paths)
    Z = stm.transform(X)
    backbone = load_diffusion(config, paths)
    rows, reports = [], {}
    for seed in config["ablate"]["seeds"]:
        arm_seed = derive_seed(int(seed), 0, "ablate")
        models = {
            "zerofusion": make_zerofusion(config, backbone, arm_seed).fit(Z, M),
            "concat_baseline": make_concat(config, arm_seed).fit(Z, M),
        }
        for arm in ARMS:
            vols = generate(config, paths, M, arm_seed, arm, stm=stm, model=models[arm])
            report = report_from_pairs(list(vols), real, 2.0, list(M))
            reports[(arm, int(seed))] = report
            rows.append({"arm": arm, "seed": int(seed), **budget, **report.csv_row()})
            logger.info("ablate seed %s %s ssim %.4f", seed, arm, report.ssim[0])
    trend = ordering_trend(reports, [int(s) for s in config["ablate"]["seeds"]])
    paths.ablation.mkdir(parents=True, exist_ok=True)
    write_csv(rows, paths.ablation / "ablation.csv", ABLATION_COLUMNS)
    result = {"rows": rows, "trend": trend, "budget": budget}
    _atomic_write(paths.ablation / "ablation.json",
                  json.dumps(result, indent=2, sort_keys=True, default=str).encode("utf-8"))
    write_snapshot(config, paths, "ablate")
    return result


def ordering_trend(reports: Mapping[tuple[str, int], MetricReport], seeds) -> dict:
    wins = [reports[("zerofusion", s)].ssim[0] >= reports[("concat_baseline", s)].ssim[0] for s in seeds]
    return {
        "claim": "zerofusion ssim >= concat_baseline ssim",
        "wins": int(sum(wins)),
        "seeds": len(wins),
        "per_seed": dict(zip([str(s) for s in seeds], wins)),
        "passed": len(wins) >= 3 and sum(wins) * 2 > len(wins),
    }


STAGE_RUNNERS = {
    "make-phantoms": make_phantoms,
    "train-stm": train_stm,
    "train-diffusion": train_diffusion,
    "train-zerofusion": train_conditional,
    "sample": sample,
    "evaluate": evaluate,
    "ablate": ablate,
}


def run_pipeline(config: Mapping, stages=("make-phantoms", "train-stm", "train-diffusion", "train-zerofusion",
                                          "sample", "evaluate")) -> dict:
    return {stage: STAGE_RUNNERS[stage](config) for stage in stages}
