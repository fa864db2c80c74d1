"""Release acceptance suite.

One test per criterion; each prints a single PASS line with its measured
runtime (run with ``pytest tests/test_acceptance.py -v -s`` to see them).
The long-running criteria (overfit smoke, desk-scale restoration,
determinism) train real models on the CPU and dominate suite time.
"""

import subprocess
import sys
import time

import numpy as np
import numpy.testing as npt
import pytest
import torch

from pslnet import degrade
from pslnet.degrade import (CleanAccessError, CorpusConfig, DegradationParams,
                            WatermarkAsset, blend_watermark, build_corpus,
                            forbid_clean_access, generate_test_assets,
                            make_pair, scaled_watermark, save_image,
                            save_watermark, sha256_file)
from pslnet.loss import loss_gradient, mixed_loss
from pslnet.metrics import evaluate_corpus, psnr, rmse, ssim
from pslnet.model import (ModelConfig, PAPER_CONFIG, PSLNet, TOY_CONFIG,
                          count_conv_layers, init_weights, summarize)
from pslnet.perception import make_perception
from pslnet.train import (TrainConfig, build_state, load_training_arrays,
                          lr_at, preset_config, stack_samples, train_step)

from oracles import (blend_loop, psnr_loop, rel_err, rmse_loop,
                     smooth_central_difference, ssim_direct)


def _report(criterion, detail, elapsed, limit):
    print(f"\n[criterion {criterion:02d}] PASS in {elapsed:.1f}s "
          f"(limit {limit:.0f}s): {detail}")


def _make_corpus(tmp_path, n_images, seed, *, patch, stride, image_size=96,
                 sigmas=(25.0,), alphas=(0.3,)):
    images, marks = generate_test_assets(n_images, 6, seed,
                                         image_size=image_size, wm_size=40)
    clean_dir = tmp_path / f"clean{seed}"
    wm_dir = tmp_path / f"wm{seed}"
    clean_dir.mkdir()
    wm_dir.mkdir()
    for i, img in enumerate(images):
        save_image(clean_dir / f"img{i:04d}.png", img)
    for wm in marks:
        save_watermark(wm_dir / f"{wm.wm_id}.png", wm)
    config = CorpusConfig(patch_size=patch, stride=stride, sigma_set=sigmas,
                          transparencies=alphas, seed=seed)
    return build_corpus(clean_dir, wm_dir, config, tmp_path / f"corpus{seed}")


def test_c01_parameter_count_anchor():
    t0 = time.monotonic()
    count = summarize(PAPER_CONFIG).parameter_count
    elapsed = time.monotonic() - t0
    rel = abs(count - 2_516_000) / 2_516_000
    assert rel <= 0.25
    assert elapsed < 1.0
    _report(1, f"paper-scale preset: {count} parameters, {rel:.2%} from 2.516M",
            elapsed, 1)


def test_c02_conv_layer_count_anchor():
    t0 = time.monotonic()
    net = PSLNet(ModelConfig(base_channels=8, depth=4))
    upper = count_conv_layers(net.upper)
    lower = count_conv_layers(net.lower)
    elapsed = time.monotonic() - t0
    assert upper == 36 and lower == 36
    assert elapsed < 1.0
    _report(2, f"graph traversal: {upper} convs in the upper branch, "
               f"{lower} in the lower", elapsed, 1)


def test_c03_metric_oracles():
    t0 = time.monotonic()
    rng = np.random.default_rng(303)
    worst = {"psnr": 0.0, "rmse": 0.0, "ssim": 0.0}
    for _ in range(100):
        a = rng.random((16, 16, 3))
        b = np.clip(a + rng.normal(0.0, rng.uniform(0.02, 0.3), a.shape), 0, 1)
        worst["psnr"] = max(worst["psnr"], abs(psnr(a, b) - psnr_loop(a, b)))
        worst["rmse"] = max(worst["rmse"], abs(rmse(a, b) - rmse_loop(a, b)))
        worst["ssim"] = max(worst["ssim"], abs(ssim(a, b) - ssim_direct(a, b)))
    assert worst["psnr"] < 1e-6 and worst["rmse"] < 1e-6 and worst["ssim"] < 1e-6

    flat = np.full((16, 16, 3), 0.5)
    assert abs(psnr(flat, flat - 1.0 / 255.0) - 48.1308) < 1e-3
    assert abs(ssim(flat, np.full((16, 16, 3), 0.25)) - 0.8004) < 1e-3
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    _report(3, "100 random pairs vs. brute force, worst gaps "
               f"psnr {worst['psnr']:.1e}, rmse {worst['rmse']:.1e}, "
               f"ssim {worst['ssim']:.1e}; closed forms hold", elapsed, 10)


def test_c04_blending_oracle():
    t0 = time.monotonic()
    rng = np.random.default_rng(404)
    for _ in range(100):
        clean = rng.random((24, 24, 3))
        wm = WatermarkAsset(rgb=rng.random((9, 11, 3)), alpha=rng.random((9, 11)),
                            wm_id="w")
        scale = float(rng.uniform(0.5, 1.0))
        rgb_s, alpha_s = scaled_watermark(wm, scale)
        sh, sw = alpha_s.shape
        pos = (int(rng.integers(0, 24 - sh + 1)), int(rng.integers(0, 24 - sw + 1)))
        t = float(rng.uniform(0.0, 1.0))
        params = DegradationParams("w", t, scale, pos, coverage_max=1.0)
        got = blend_watermark(clean, wm, params)
        ref = blend_loop(clean, rgb_s, alpha_s, t, pos)
        npt.assert_array_equal(got, ref)

    clean = rng.random((24, 24, 3))
    wm = WatermarkAsset(rgb=rng.random((8, 8, 3)), alpha=np.ones((8, 8)), wm_id="w")
    ident = blend_watermark(clean, wm, DegradationParams("w", 0.0, 1.0, (4, 4),
                                                         coverage_max=1.0))
    npt.assert_array_equal(ident, clean)
    full = blend_watermark(clean, wm, DegradationParams("w", 1.0, 1.0, (4, 4),
                                                        coverage_max=1.0))
    npt.assert_array_equal(full[4:12, 4:12], wm.rgb)
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    _report(4, "blend equals the per-pixel loop bit-exactly on 100 cases; "
               "alpha 0/1 identities exact", elapsed, 10)


def test_c05_gradient_check():
    t0 = time.monotonic()
    config = ModelConfig(base_channels=4, depth=4, interaction_hidden=8)
    net = PSLNet(config).double()
    init_weights(net, 505)
    pn = make_perception(seed=506, dtype=torch.float64)
    gen = torch.Generator().manual_seed(507)

    class Batch:
        input = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
        denoise_target = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
        removal_target = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)

    batch = Batch()
    lam = 0.05
    _, grads = loss_gradient(net, pn, batch, lam=lam)

    def total():
        with torch.no_grad():
            out = net(batch.input)
            return float(mixed_loss(out, out.intermediates["dn_out"], batch,
                                    pn, lam=lam).total)

    rng = np.random.default_rng(508)
    params = dict(net.named_parameters())
    names = sorted(params)
    worst = 0.0
    checked = 0
    skipped = 0
    for _ in range(40):
        if checked == 20:
            break
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)

        def read():
            return p.data[idx].item()

        def write(v):
            with torch.no_grad():
                p.data[idx] = v

        fd = smooth_central_difference(total, read, write, h=1e-5)
        if fd is None:  # secant straddles a ReLU/|.| kink; resample
            skipped += 1
            continue
        err = rel_err(fd, grads[name][idx].item())
        worst = max(worst, err)
        assert err < 1e-4, (name, idx, err)
        checked += 1
    assert checked == 20

    # gradient w.r.t. the input image
    x = batch.input.clone().requires_grad_(True)
    out = net(x)
    mixed_loss(out, out.intermediates["dn_out"], batch, pn, lam=lam).total.backward()
    input_grad = x.grad.detach()
    checked_in = 0
    for _ in range(15):
        if checked_in == 5:
            break
        idx = (0, int(rng.integers(3)), int(rng.integers(16)), int(rng.integers(16)))

        def read():
            return batch.input[idx].item()

        def write(v):
            batch.input[idx] = v

        fd = smooth_central_difference(total, read, write, h=1e-5)
        if fd is None:
            continue
        err = rel_err(fd, input_grad[idx].item())
        worst = max(worst, err)
        assert err < 1e-4, ("input", idx, err)
        checked_in += 1
    assert checked_in == 5

    elapsed = time.monotonic() - t0
    assert elapsed < 120.0
    _report(5, f"20 parameters + 5 input pixels, worst relative error {worst:.2e} "
               f"({skipped} kink-straddling probes resampled)", elapsed, 120)


def test_c06_gate_ablation_equivalence():
    t0 = time.monotonic()
    net = PSLNet(TOY_CONFIG)
    init_weights(net, 606)
    x = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        clamped = net(x, interactions_on=False)
        plain = net.lower.dw2(net.lower.dw1(x))
        assert float((clamped.lower - plain).abs().max()) == 0.0

        for gate in (net.interact1, net.interact2):
            gate.conv2.weight.zero_()
            gate.conv2.bias.fill_(50.0)
        saturated = net(x)
        assert float((saturated.lower - plain).abs().max()) == 0.0
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    _report(6, "gates clamped to 1: lower branch equals DW2(DW1(x)) with zero "
               "absolute error (clamp and saturating-bias routes)", elapsed, 10)


def test_c07_overfit_smoke(tmp_path):
    t0 = time.monotonic()
    manifest = _make_corpus(tmp_path, 8, seed=707, patch=64, stride=64,
                            image_size=64)
    data = load_training_arrays(manifest)
    cfg = preset_config("toy", seed=707)
    state = build_state(cfg)
    batch = stack_samples(data[:cfg.batch_size])
    first = float(train_step(state, batch, cfg).total)
    last = first
    for _ in range(499):
        last = float(train_step(state, batch, cfg).total)
    elapsed = time.monotonic() - t0
    assert last < 0.25 * first, (first, last)
    assert elapsed < 300.0
    _report(7, f"fixed batch, 500 steps: loss {first:.4f} -> {last:.4f} "
               f"({last / first:.1%} of start)", elapsed, 300)


def test_c08_desk_scale_restoration(tmp_path):
    t0 = time.monotonic()
    train_manifest = _make_corpus(tmp_path, 50, seed=808, patch=64, stride=32,
                                  image_size=96)
    heldout_manifest = _make_corpus(tmp_path, 20, seed=809, patch=96, stride=96,
                                    image_size=96)
    assert len(train_manifest.entries) == 200
    assert len(heldout_manifest.entries) == 20

    cfg = preset_config("toy", seed=808)
    from pslnet.train import fit
    final = fit(train_manifest, cfg, tmp_path / "run")
    report = evaluate_corpus(final, heldout_manifest)
    overall = report.overall()
    margin = overall["psnr_mean"] - overall["psnr_input_mean"]
    elapsed = time.monotonic() - t0
    assert margin >= 3.0, overall
    assert elapsed < 1800.0
    _report(8, f"held-out restored PSNR {overall['psnr_mean']:.2f} dB vs degraded "
               f"{overall['psnr_input_mean']:.2f} dB (margin {margin:.2f} dB, "
               f"ssim {overall['ssim_mean']:.4f})", elapsed, 1800)


def test_c09_self_supervision_contract(monkeypatch, micro_corpus, micro_config):
    t0 = time.monotonic()
    # the training loader never opens clean-image files
    opened = []
    real = degrade.load_image

    def spy(path):
        opened.append(str(path))
        return real(path)

    monkeypatch.setattr(degrade, "load_image", spy)
    data = load_training_arrays(micro_corpus)
    monkeypatch.setattr(degrade, "load_image", real)
    assert opened and not any("clean" in p for p in opened)

    # in-memory samples: the guard intercepts any clean read during training
    images, marks = generate_test_assets(1, 2, seed=909, image_size=32, wm_size=12)
    sample = make_pair(images[0], marks, sigma_set=[15.0], seed=909)
    cfg = TrainConfig(batch_size=2, lam=0.0, texture_loss_on=False,
                      seed=1, model=micro_config)
    state = build_state(cfg)
    batch = stack_samples(data[:2])
    train_step(state, batch, cfg)  # passes: nothing reads .clean
    with forbid_clean_access():
        with pytest.raises(CleanAccessError):
            _ = sample.clean
    assert sample.clean is not None  # evaluation context may read it
    elapsed = time.monotonic() - t0
    assert elapsed < 1.0
    _report(9, "training loader opens no clean files; guarded .clean raises "
               "inside training contexts and reads fine outside", elapsed, 1)


def test_c10_training_determinism(tmp_path):
    t0 = time.monotonic()
    env_cmd = [sys.executable, "-m", "pslnet.cli"]

    corpus = tmp_path / "corpus"
    subprocess.run(env_cmd + ["dataset-build", "--synthetic", "8", "--out",
                              str(corpus), "--patch-size", "64", "--stride", "64",
                              "--sigmas", "25", "--alphas", "0.3",
                              "--synthetic-size", "64", "--seed", "5"],
                   check=True, capture_output=True)
    train_flags = ["train", "--data", str(corpus / "manifest.json"),
                   "--preset", "toy", "--num-threads", "1", "--seed", "123",
                   "--checkpoint-every", "0"]

    def run(out, extra):
        subprocess.run(env_cmd + train_flags + ["--out", str(tmp_path / out)]
                       + extra, check=True, capture_output=True)
        return tmp_path / out / "checkpoint_final.zip"

    a = run("a", ["--max-steps", "30"])
    b = run("b", ["--max-steps", "30"])
    assert sha256_file(a) == sha256_file(b)

    half = run("half", ["--max-steps", "15"])
    resumed = run("resumed", ["--max-steps", "30", "--resume", str(half)])
    assert sha256_file(resumed) == sha256_file(a)
    elapsed = time.monotonic() - t0
    assert elapsed < 600.0
    _report(10, "identical seeds give bit-identical final checkpoints; "
                "resume at step 15 matches the uninterrupted 30-step run",
            elapsed, 600)


def test_c11_learning_rate_schedule():
    t0 = time.monotonic()
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-3
    assert lr_at(30, cfg) == 1e-4
    assert lr_at(60, cfg) == 1e-5
    assert lr_at(90, cfg) == 1e-6
    assert lr_at(29, cfg) == 1e-3
    elapsed = time.monotonic() - t0
    assert elapsed < 1.0
    _report(11, "lr at epochs 0/30/60/90 is exactly 1e-3/1e-4/1e-5/1e-6",
            elapsed, 1)
