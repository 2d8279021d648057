"""Acceptance criteria, one test per criterion.

Each test records ``(passed, detail)`` in ``conftest.ACCEPTANCE``; the
terminal summary prints one PASS/FAIL line per criterion. Criteria 7 and 9
share one desk-scale run of the harness (shipped ``desk`` profile) in a
temporary directory, which takes roughly 40 minutes on one CPU core.
"""
import math
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE
from oracles import brute_nearest, mmd2_ref, ms_ssim_ref_2d, psnr_ref
from test_diffusion import reverse_mean_oracle_max_error, stepwise_marginal_check, unet_eps_mse_gradcheck
from test_stm import toy_stm_gradcheck
from latentvol.diffusion import LatentDiffusion
from latentvol.harness import pipeline
from latentvol.harness.config import load_config
from latentvol.metrics import _box_features, mmd_sets, ms_ssim_volume, psnr_volume, ssim_volume
from latentvol.stm import quantize
from latentvol.volume_io import PhantomSpec, generate_phantom, normalize
from latentvol.zerofusion import ZeroFusion, module_checksum, sample_conditional

# tolerances as stated by the criteria
ZERO_INIT_TOL = 0.0
REVERSE_MEAN_TOL = 1e-6
MARGINAL_SE, MARGINAL_VAR = 3.0, 0.02
GRAD_TOL = 1e-3
PSNR_MIN_DB, DICE_MIN, STM_MAX_STEPS, PIPELINE_SECONDS = 28.0, 0.5, 5000, 3600.0
METRIC_TOL, MMD_TOL = 1e-6, 0.01


def record(n: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(passed), detail)
    print(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
    assert passed, detail


SMALL = dict(base_channels=4, channel_multipliers=(1, 1), levels=2, resnet_blocks_per_level=1,
             mid_resnet_blocks=2, time_embedding_dim=4, timesteps=20, batch_size=4)


def _pairs(n=6, seed=0):
    rng = np.random.default_rng(seed)
    masks = np.zeros((n, 8, 8, 8), dtype=np.int64)
    for i in range(n):
        a, b, c = rng.integers(0, 4, size=3)
        masks[i, a:a + 4, b:b + 4, c:c + 4] = 1
    return rng.normal(size=(n, 2, 4, 4, 4)).astype(np.float32), masks


class _UpsampleDecoder:
    """Stands in for the autoencoder decoder: nearest upsampling of channel 0."""

    def inverse_transform(self, z):
        z = np.asarray(z)[:, :1]
        for axis in (2, 3, 4):
            z = np.repeat(z, 2, axis)
        return z


def test_criterion_1_zero_init_identity():
    Z, M = _pairs()
    backbone = LatentDiffusion(**SMALL, n_steps=20, lr=1e-3).fit(Z)
    branch = ZeroFusion(backbone=backbone, n_steps=0, batch_size=4).fit(Z, M)
    worst = 0.0
    for i, seed in enumerate((0, 1, 2)):
        cond = sample_conditional(M[i], _UpsampleDecoder(), backbone, branch, seed)
        uncond = sample_conditional(M[i], _UpsampleDecoder(), backbone, None, seed)
        worst = max(worst, float(np.abs(cond.data - uncond.data).max()))
    record(1, worst <= ZERO_INIT_TOL, f"max |conditional - unconditional| = {worst:g} (tol {ZERO_INIT_TOL:g})")


def test_criterion_2_reverse_mean_oracle():
    err = reverse_mean_oracle_max_error(n=1000)
    record(2, err <= REVERSE_MEAN_TOL, f"max abs error over 1000 tuples = {err:.3g} (tol {REVERSE_MEAN_TOL:g})")


def test_criterion_3_forward_marginal():
    t0 = time.perf_counter()
    mean_se, var_rel = stepwise_marginal_check(n=10_000)
    secs = time.perf_counter() - t0
    ok = mean_se <= MARGINAL_SE and var_rel <= MARGINAL_VAR and secs < 60
    record(3, ok, f"mean error {mean_se:.2f} SE (tol {MARGINAL_SE}), variance error {var_rel:.4f} "
                  f"(tol {MARGINAL_VAR}), {secs:.1f}s")


def test_criterion_4_quantizer_oracle():
    rng = np.random.default_rng(0)
    mismatches, ties = 0, 0
    for trial in range(5):
        book = rng.normal(size=(64, 4))
        book[rng.choice(64, 8, replace=False)] = book[rng.choice(64, 8, replace=False)]  # duplicate rows
        z = rng.normal(size=(100, 4))
        z[:10] = book[rng.integers(0, 64, 10)]  # exact hits, ties where the row is duplicated
        got = quantize(torch.as_tensor(z.T.reshape(4, 100, 1, 1)), torch.as_tensor(book)).indices.reshape(-1)
        ref = brute_nearest(z, book)
        mismatches += int(sum(int(a) != b for a, b in zip(got.tolist(), ref)))
        ties += int(sum((book == z[i]).all(1).sum() > 1 for i in range(10)))
    record(4, mismatches == 0, f"{mismatches} mismatches over 5 x 100 latents, K=64 ({ties} exact ties)")


def test_criterion_5_gradient_checks():
    n_params, stm_errors = toy_stm_gradcheck()
    n_probed, unet_err = unet_eps_mse_gradcheck()
    stm_err = max(stm_errors.values())
    ok = n_params <= 1000 and stm_err <= GRAD_TOL and unet_err <= GRAD_TOL
    record(5, ok, f"(a) STM loss, {n_params} params: rel err {stm_err:.2e}; "
                  f"(b) U-Net eps-MSE, {n_probed} entries: rel err {unet_err:.2e} (tol {GRAD_TOL:g}, float64)")


def test_criterion_6_freezing_contract():
    Z, M = _pairs()
    backbone = LatentDiffusion(**SMALL, n_steps=20, lr=1e-3).fit(Z)
    before_store, before_module = backbone.to_store().checksum(), module_checksum(backbone.model_)
    branch = ZeroFusion(backbone=backbone, n_steps=100, batch_size=4, lr=1e-3).fit(Z, M)
    moved = float(branch.branch_.h_out.weight.detach().abs().sum())
    ok = backbone.to_store().checksum() == before_store and module_checksum(backbone.model_) == before_module
    record(6, ok and moved > 0, f"backbone checksum unchanged after {branch.step_} steps: {ok}; "
                                f"h_out moved by {moved:.3g}")


def test_criterion_8_metric_sanity():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(8, 32, 32))
    ssim_id = ssim_volume(x, x, 2.0)
    psnr_err = 0.0
    for mse in (0.02, 0.001, 0.5):
        b = x + math.sqrt(mse) * np.where(rng.random(x.shape) < 0.5, -1.0, 1.0)
        psnr_err = max(psnr_err, abs(psnr_volume(x, b, 2.0) - 10 * math.log10(4 / mse)),
                       abs(psnr_volume(x, b, 2.0) - psnr_ref(x, b, 2.0)))
    spec = PhantomSpec()
    A = [normalize(generate_phantom(spec, 1000 + i)[0]) for i in range(32)]
    B = [normalize(generate_phantom(spec, 2000 + i)[0]) for i in range(32)]
    mmd = mmd_sets(A, B)
    fa, fb = _box_features(A[:4]), _box_features(B[:4])
    mmd_oracle_err = abs(mmd_sets(A[:4], B[:4], bandwidth=5.0) - mmd2_ref(fa, fb, 5.0))
    a = _smooth(64, 7)
    b = 0.7 * a + 0.3 * _smooth(64, 8)
    ms_err = abs(ms_ssim_volume(a[None], b[None], 2.0) - ms_ssim_ref_2d(a, b, 2.0, 4))
    ok = ssim_id == 1.0 and psnr_err <= METRIC_TOL and abs(mmd) <= MMD_TOL and ms_err <= METRIC_TOL \
        and mmd_oracle_err <= METRIC_TOL
    record(8, ok, f"SSIM(x,x) = {ssim_id!r}; PSNR err {psnr_err:.1e}; same-distribution MMD^2 (32 vs 32) = "
                  f"{mmd:+.4f} (tol {MMD_TOL}); MS-SSIM vs loop reference {ms_err:.1e}; "
                  f"MMD^2 vs loop reference {mmd_oracle_err:.1e}")


def _smooth(side, seed):
    from scipy.ndimage import gaussian_filter

    x = gaussian_filter(np.random.default_rng(seed).normal(size=(side, side)), 2.0)
    return x / np.abs(x).max()


# -- desk-scale run (criteria 7 and 9) -------------------------------------------

@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    config = load_config("desk", out=str(tmp_path_factory.mktemp("desk")))
    timings = {}
    results = {}
    t_all = time.perf_counter()
    for stage in ("make-phantoms", "train-stm", "train-diffusion", "train-zerofusion", "sample", "evaluate"):
        t0 = time.perf_counter()
        results[stage] = pipeline.STAGE_RUNNERS[stage](config)
        timings[stage] = time.perf_counter() - t0
    timings["pipeline"] = time.perf_counter() - t_all
    t0 = time.perf_counter()
    results["ablate"] = pipeline.ablate(config)
    timings["ablate"] = time.perf_counter() - t0
    return config, results, timings


def test_criterion_7_desk_overfit(desk_run):
    config, results, timings = desk_run
    paths = pipeline.RunPaths(config["run"]["out"])
    X, _ = pipeline.load_dataset(paths).arrays()
    stm = pipeline.load_stm(config, paths)
    R = stm.reconstruct(X)
    psnrs = [psnr_ref(r, x, 2.0) for r, x in zip(R, X)]
    dice_mean = results["evaluate"]["dice"]["mean"]
    steps = results["train-stm"]["steps"]
    ok = (np.mean(psnrs) >= PSNR_MIN_DB and steps <= STM_MAX_STEPS and dice_mean >= DICE_MIN
          and config["data"]["modality_tag"] == "flair-like" and timings["pipeline"] <= PIPELINE_SECONDS)
    record(7, ok, f"STM PSNR mean {np.mean(psnrs):.2f} dB (min {min(psnrs):.2f}) after {steps} steps "
                  f"(need >= {PSNR_MIN_DB} within {STM_MAX_STEPS}); conditional Dice {dice_mean:.3f} "
                  f"(need >= {DICE_MIN}); pipeline {timings['pipeline'] / 60:.1f} min "
                  f"(limit {PIPELINE_SECONDS / 60:.0f})")


def test_criterion_9_ablation_trend(desk_run):
    config, results, timings = desk_run
    ab = results["ablate"]
    trend = ab["trend"]
    ssim = {(r["arm"], r["seed"]): r["ssim_mean"] for r in ab["rows"]}
    per_seed = ", ".join(f"seed {s}: {ssim[('zerofusion', s)]:.4f} vs {ssim[('concat_baseline', s)]:.4f}"
                         for s in config["ablate"]["seeds"])
    record(9, trend["passed"], f"zerofusion >= concat SSIM in {trend['wins']}/{trend['seeds']} seeds "
                               f"({per_seed}); budget {ab['budget']}; {timings['ablate'] / 60:.1f} min")
