"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the summary lines are printed
at the end of the session) or ``python3 tests/test_acceptance.py``.
"""

import dataclasses
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from oracles import finite_difference_check, p3d_conv_loop  # noqa: E402
from p3drad.metrics import pearson_r, pproxy, pproxy_avg, tfi  # noqa: E402
from p3drad.network import (  # noqa: E402
    TINY,
    P3DConv,
    P3DResBlock,
    P3DUNet,
    SpatialFiLM,
    TimestepEmbedding,
    p3d_conv,
    spatial_timestep_embedding,
)
from p3drad.phantom import PhantomConfig, make_subject  # noqa: E402
from p3drad.sampler import SamplerConfig, cddpm_inpaint, rad_inpaint  # noqa: E402
from p3drad.schedule import (  # noqa: E402
    make_linear_schedule,
    min_snr,
    min_snr_weight,
    predict_x0_eps,
    q_sample,
    rad_region_map,
    v_target,
)
from p3drad.train import TrainConfig, Trainer, set_reference_mode  # noqa: E402
from p3drad.volumeio import Volume3D  # noqa: E402

RESULTS: dict[int, tuple[bool, str]] = {}

# Desk-scale learning setup shared by criteria 9 and 10.
LEARN_PHANTOM = PhantomConfig(dims=(16, 32, 32), lesion_count_range=(2, 4), lesion_radius_range=(2, 3))
LEARN_NETWORK = TINY
LEARN_TRAIN = TrainConfig(window=16, batch_size=2, epochs=10**6, max_steps=2000, learning_rate=1e-3, seed=0)
TRAIN_SEEDS = range(100, 108)
HELD_OUT_SEEDS = range(900, 904)
TFI_SEEDS = range(900, 908)
EVAL_STEPS = 50


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def summary_lines() -> list[str]:
    return [f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}" for n, (ok, detail) in sorted(RESULTS.items())]


def _perturbed(model: P3DUNet, seed: int, scale: float = 0.2) -> P3DUNet:
    """Add noise to every parameter so FiLM and the depth kernels are non-trivial."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def _bits_equal(a: Volume3D, b: Volume3D, where: np.ndarray) -> bool:
    return np.array_equal(a.data.view(np.uint32)[where], b.data.view(np.uint32)[where])


def test_c01_background_purity():
    t0 = time.perf_counter()
    cfg = dataclasses.replace(LEARN_PHANTOM, dims=(16, 16, 16))
    subjects = [make_subject(dataclasses.replace(cfg, seed=s)) for s in range(10)]
    violations, runs = 0, 0
    for seed in range(100):
        model = _perturbed(P3DUNet(TINY, seed=seed), seed)
        for s in subjects:
            res = rad_inpaint(model, s, SamplerConfig(steps=2, seed=seed))
            runs += 1
            ok1 = _bits_equal(res.inp_t1, s.img_t1, s.lesion_mask_t1.data == 0)
            ok2 = _bits_equal(res.inp_t2, s.img_t2, s.lesion_mask_t2.data == 0)
            violations += not (ok1 and ok2)
    elapsed = time.perf_counter() - t0
    record(1, violations == 0 and elapsed < 120,
           f"background purity: {violations} violations in {runs} runs (100 seeds, 10 subjects), {elapsed:.1f}s")


def test_c02_v_round_trip():
    s = make_linear_schedule()
    rng = np.random.default_rng(0)
    worst = {"single": 0.0, "double": 0.0}
    for dtype, key in ((np.float32, "single"), (np.float64, "double")):
        for t in rng.integers(1, s.T + 1, size=20):
            x0 = rng.random(1000).astype(dtype)
            eps = rng.standard_normal(1000).astype(dtype)
            tau = np.full(1000, t)
            xt = q_sample(s, x0, eps, tau)
            v = v_target(s, x0, eps, tau).v
            x0r, epsr = predict_x0_eps(s, xt, v, tau)
            worst[key] = max(worst[key], np.abs(x0r - x0).max(), np.abs(epsr - eps).max())
    ok = worst["single"] <= 1e-5 and worst["double"] <= 1e-10
    record(2, ok, f"v round trip max error single {worst['single']:.2e} (<=1e-5), double {worst['double']:.2e} (<=1e-10)")


def test_c03_rad_map_contract():
    s = make_linear_schedule()
    T = s.T
    mask = np.zeros((2, 4, 4), np.float32)
    mask[0, 1:3, 1:3] = 1
    m = mask > 0
    prev = None
    problems = []
    for g in range(T + 1):
        tau = rad_region_map(s, g, mask).tau
        tm, tb = np.unique(tau[m]), np.unique(tau[~m])
        if len(tm) != 1 or len(tb) != 1:
            problems.append(f"t={g}: more than two values")
            continue
        if tm[0] != min(2 * g, T) or tb[0] != max(0, 2 * g - T) or tm[0] < tb[0]:
            problems.append(f"t={g}: values {tm[0]}, {tb[0]}")
        if prev is not None and np.any(tau < prev):
            problems.append(f"t={g}: not monotone")
        prev = tau
    half = rad_region_map(s, T // 2, mask).tau
    start_ok = np.all(half[m] == T) and np.all(half[~m] == 0)
    record(3, not problems and start_ok,
           f"RAD map over global_t in [0, {T}]: {len(problems)} violations, start state ok={start_ok}")


def test_c04_min_snr():
    s = make_linear_schedule()
    at_gamma = min_snr(5.0, 5.0)
    w = np.array([min_snr_weight(s, t, 5.0) for t in range(1, s.T + 1)])
    ok = abs(at_gamma - 5 / 6) <= 1e-12 and np.all(w > 0) and np.all(w <= 5.0) and np.all(np.isfinite(w))
    record(4, ok, f"w(SNR=5)={at_gamma!r}, |w-5/6|={abs(at_gamma - 5 / 6):.1e}; sweep range [{w.min():.2e}, {w.max():.3f}]")


def test_c05_gradient_check():
    t0 = time.perf_counter()
    cfg = dataclasses.replace(TINY, precision="double")
    model = _perturbed(P3DUNet(cfg, seed=1), 5, scale=0.1)
    g = torch.Generator().manual_seed(5)
    x = torch.randn(1, 8, 4, 8, 8, generator=g, dtype=torch.float64)
    tau1 = torch.where(torch.rand(1, 4, 8, 8, generator=g) < 0.5, 1000, 0)
    tau2 = torch.where(torch.rand(1, 4, 8, 8, generator=g) < 0.5, 500, 0)
    grad_out = torch.randn(1, 2, 4, 8, 8, generator=g, dtype=torch.float64)

    def loss():
        return (model(x, tau1, tau2) * grad_out).sum()

    model.zero_grad()
    loss().backward()
    worst = finite_difference_check(loss, dict(model.named_parameters()), 6, np.random.default_rng(0), step=1e-4)
    name, err = max(worst.items(), key=lambda kv: kv[1])
    elapsed = time.perf_counter() - t0
    record(5, err <= 1e-4 and elapsed < 300,
           f"gradient check over {len(worst)} parameter tensors: max rel err {err:.2e} ({name}), {elapsed:.1f}s")


def test_c06_p3d_conv_oracle():
    rng = np.random.default_rng(0)
    worst = {torch.float32: 0.0, torch.float64: 0.0}
    for _ in range(50):
        h = rng.standard_normal((2, 4, 6, 6))
        # Kernels at the usual fan-in scale, as a freshly initialized layer would have.
        w2, b2 = rng.standard_normal((3, 2, 3, 3)) / np.sqrt(18), rng.standard_normal(3) / np.sqrt(18)
        w1, b1 = rng.standard_normal((2, 3, 3)) / 3.0, rng.standard_normal(2) / 3.0
        want = p3d_conv_loop(h, w2, w1, b2, b1)
        for dtype in worst:
            got = p3d_conv(*(torch.tensor(a, dtype=dtype) for a in (h[None], w2, w1, b2, b1)))[0]
            worst[dtype] = max(worst[dtype], float(np.abs(got.numpy() - want).max()))
    h = torch.randn(1, 2, 4, 6, 6)
    w2 = torch.randn(3, 2, 3, 3)
    dirac = torch.nn.init.dirac_(torch.zeros(3, 3, 3))
    # The same 2D convolution applied to every axial slice in one call.
    slices = h.transpose(1, 2).reshape(4, 2, 6, 6)
    pure = torch.nn.functional.conv2d(slices, w2, padding=1).reshape(1, 4, 3, 6, 6).transpose(1, 2)
    exact = torch.equal(p3d_conv(h, w2, dirac), pure)
    s32, s64 = worst[torch.float32], worst[torch.float64]
    record(6, s32 <= 1e-5 and s64 <= 1e-10 and exact,
           f"p3d_conv vs loop oracle on 50 inputs: max err {s32:.2e} single, {s64:.2e} double; Dirac case exact={exact}")


def test_c07_film():
    torch.manual_seed(0)
    block = P3DResBlock(4, 4, 16, TINY)
    embed = TimestepEmbedding(8)
    h = torch.randn(1, 4, 3, 8, 8)
    tau = torch.randint(1, 1001, (1, 3, 8, 8))
    out = block(h, spatial_timestep_embedding(embed, tau, tau))
    plain = h + block.conv2(torch.nn.functional.silu(block.conv1(torch.nn.functional.silu(block.norm(h)))))
    identity = torch.equal(out, plain)

    film = SpatialFiLM(16, 4)
    torch.nn.init.normal_(film.proj.weight)
    torch.nn.init.normal_(film.proj.bias)
    region = torch.rand(1, 3, 8, 8) < 0.4
    t1 = torch.where(region, 1000, 0)
    t2 = torch.where(region, 800, 300)
    both = film(h, spatial_timestep_embedding(embed, t1, t2))
    worst = 0.0
    for r, a, b in ((region, 1000, 800), (~region, 0, 300)):
        single = film(h, spatial_timestep_embedding(embed, torch.full_like(t1, a), torch.full_like(t2, b)))
        sel = r[:, None].expand_as(h)
        worst = max(worst, float((both[sel] - single[sel]).abs().max().detach()))
    record(7, identity and worst <= 1e-6, f"zero-projection identity exact={identity}; two-region max diff {worst:.1e}")


def test_c08_efficiency():
    set_reference_mode(True)
    s = make_subject(dataclasses.replace(LEARN_PHANTOM, seed=7))
    model = P3DUNet(TINY, seed=0)
    rad_inpaint(model, s, SamplerConfig(steps=5))  # warm-up
    rad = rad_inpaint(model, s, SamplerConfig(mode="rad", steps=100, seed=0))
    ddpm = cddpm_inpaint(model, s, SamplerConfig(mode="cddpm", steps=1000, seed=0))
    nfe_ratio = ddpm.stats["nfe"] / rad.stats["nfe"]
    time_ratio = rad.stats["seconds"] / ddpm.stats["seconds"]
    record(8, nfe_ratio == 10 and time_ratio <= 0.2,
           f"NFE ratio {nfe_ratio:g} (==10); wall-clock rad@100 / cddpm@1000 = {time_ratio:.3f} (<=0.2) "
           f"[{rad.stats['seconds']:.1f}s vs {ddpm.stats['seconds']:.1f}s]")


@pytest.fixture(scope="module")
def trained_model():
    set_reference_mode(True)
    train = [make_subject(dataclasses.replace(LEARN_PHANTOM, seed=s)) for s in TRAIN_SEEDS]
    t0 = time.perf_counter()
    trainer = Trainer(train, LEARN_TRAIN, LEARN_NETWORK)
    trainer.fit()
    trainer.model.eval()
    return trainer.model, time.perf_counter() - t0


def _masked_psnr(pred, truth, mask):
    return 10 * np.log10(1.0 / np.mean((pred[mask] - truth[mask]) ** 2))


def test_c09_learning_signal(trained_model):
    model, train_seconds = trained_model
    t0 = time.perf_counter()
    scores = {"model": [], "zero": [], "mean": []}
    for seed in HELD_OUT_SEEDS:
        s = make_subject(dataclasses.replace(LEARN_PHANTOM, seed=seed))
        res = rad_inpaint(model, s, SamplerConfig(steps=EVAL_STEPS, seed=1))
        for img, mask, out in ((s.img_t1, s.lesion_mask_t1, res.inp_t1), (s.img_t2, s.lesion_mask_t2, res.inp_t2)):
            m, truth = mask.data > 0, img.data.astype(np.float64)
            fill = truth[(s.brain_mask.data > 0) & ~m].mean()
            scores["model"].append(_masked_psnr(out.data.astype(np.float64), truth, m))
            scores["zero"].append(_masked_psnr(np.zeros_like(truth), truth, m))
            scores["mean"].append(_masked_psnr(np.full_like(truth, fill), truth, m))
    mean = {k: float(np.mean(v)) for k, v in scores.items()}
    margin = mean["model"] - max(mean["zero"], mean["mean"])
    total = train_seconds + time.perf_counter() - t0
    record(9, margin >= 2.0 and total <= 3600,
           f"masked PSNR model {mean['model']:.2f} dB vs zero-fill {mean['zero']:.2f}, mean-fill {mean['mean']:.2f} "
           f"(margin {margin:.2f} dB >= 2); {total / 60:.1f} min")


def test_c10_tfi(trained_model):
    model, _ = trained_model
    s0 = make_subject(dataclasses.replace(LEARN_PHANTOM, seed=1))
    o1, o2, m = s0.img_t1, s0.img_t2, s0.lesion_mask_t1
    identity = tfi(o1, o2, o1, o2, m)
    collapsed = tfi(o1, o2, o1, o1, m)
    tfis, orig_d, inp_d = [], [], []
    for i, seed in enumerate(TFI_SEEDS):
        s = make_subject(dataclasses.replace(LEARN_PHANTOM, seed=seed))
        res = rad_inpaint(model, s, SamplerConfig(steps=EVAL_STEPS, seed=1))
        union = np.maximum(s.lesion_mask_t1.data, s.lesion_mask_t2.data)
        d_o = pproxy_avg(s.img_t1, s.img_t2, union)
        d_i = pproxy_avg(res.inp_t1, res.inp_t2, union)
        orig_d.append(d_o)
        inp_d.append(d_i)
        tfis.append(d_i / d_o)
    mean_tfi = float(np.mean(tfis))
    r = pearson_r(orig_d, inp_d)
    ok = identity == 1.0 and collapsed == 0.0 and 0.5 < mean_tfi < 2.0 and r > 0.5
    record(10, ok, f"TFI identity={identity!r}, collapsed={collapsed!r}; trained model mean TFI {mean_tfi:.3f} "
                   f"(range {min(tfis):.3f}-{max(tfis):.3f}), Pearson r {r:.3f} over {len(tfis)} subjects")


def test_c11_staircase():
    wins, margins = 0, []
    for seed in range(10):
        s = make_subject(PhantomConfig(seed=seed))
        perm = np.random.default_rng(seed).permutation(s.dims[0])
        shuffled = Volume3D(s.img_t1.data[perm])
        sag = pproxy(shuffled, s.img_t1, "sagittal", s.brain_mask)
        ax = pproxy(shuffled, s.img_t1, "axial", s.brain_mask)
        wins += sag > ax
        margins.append(sag - ax)
    record(11, wins == 10, f"pproxy(sagittal) > pproxy(axial) on {wins}/10 shuffled phantoms (min margin {min(margins):.4f})")


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
