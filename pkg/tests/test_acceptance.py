"""Acceptance criteria. Each test ends in one PASS/FAIL line via the ``verdict`` fixture."""

import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from voxattn import ops
from voxattn.backbone import NetworkConfig, build_network
from voxattn.blocks import BlockConfig, BlockParams, CAWeights, DAWeights, ca_forward, da_forward, \
    dual_attention_block_forward
from voxattn.cam import sample_cams
from voxattn.checkpoint import decode_checkpoint, encode_checkpoint
from voxattn.cli import dispatch
from voxattn.data import VolumeSample, decode_volume, encode_volume, load_samples, read_manifest
from voxattn.gradcheck import gradient_suite
from voxattn.metrics import roc_auc
from voxattn.ops import ConvSpec
from voxattn.optim import TrainConfig, cosine_lr
from voxattn.synth import SynthConfig, synth_generate
from voxattn.tensor import Tensor
from voxattn.train import train_and_evaluate

T = lambda a: Tensor(np.asarray(a, np.float64))  # noqa: E731


def test_1_parameter_count(capsys, verdict):
    start = time.perf_counter()
    assert dispatch(["params"]) == 0
    elapsed = time.perf_counter() - start
    out = capsys.readouterr().out
    line = next(l for l in out.splitlines() if l.strip().startswith("no attn"))
    total = int(line.split(":")[1].split()[0].replace(",", ""))
    rel = abs(total - 33.15e6) / 33.15e6
    verdict(1, "parameter count", rel <= 0.01 and elapsed < 1.0,
            f"{total:,} vs 33.15M, off {rel:.3%}, {elapsed:.2f}s")


def test_2_ca_overhead(verdict):
    base = NetworkConfig(use_ca=False, use_da=False)
    with_ca = NetworkConfig(use_ca=True, use_da=False)
    count = lambda c: sum(t.data.size for t in build_network(c, initialize=False).parameters())  # noqa: E731
    delta = count(with_ca) - count(base)
    closed = sum(2 * w * w // 16 for w, n in zip(base.stage_widths, base.blocks_per_stage) for _ in range(n))
    verdict(2, "CA overhead", delta == 87_040 == closed, f"delta {delta:,}, closed form {closed:,}")


def test_3_gradient_suite(verdict):
    start = time.perf_counter()
    reports = gradient_suite(range(5))
    elapsed = time.perf_counter() - start
    worst = max(reports, key=lambda r: r.max_rel_error)
    failed = [f"{r.op}={r.max_rel_error:.1e}" for r in reports if not r.passed(1e-4)]
    verdict(3, "gradient suite", not failed and elapsed < 300,
            f"{len(reports)} checks, worst {worst.op} {worst.max_rel_error:.2e}, {elapsed:.0f}s"
            + (f", failing {failed}" if failed else ""))


def _oracle_cases():
    """(name, check) pairs; each check draws one random small instance and returns max abs error."""

    def conv(r):
        k = tuple(int(v) for v in r.choice([1, 3], 3))
        s = tuple(int(v) for v in r.integers(1, 3, 3))
        p = tuple(int(r.integers(0, kk // 2 + 1)) for kk in k)
        c_in, c_out = (int(v) for v in r.integers(1, 4, 2))
        x = r.standard_normal((int(r.integers(1, 3)), c_in) + tuple(int(v) for v in r.integers(3, 6, 3)))
        w = r.standard_normal((c_out, c_in) + k)
        b = r.standard_normal(c_out) if r.random() < 0.5 else None
        spec = ConvSpec(c_in, c_out, k, s, p, bias=b is not None)
        got = ops.conv3d(T(x), spec, T(w), None if b is None else T(b)).data
        return np.abs(got - oracles.conv3d_loops(x, w, b, s, p)).max()

    def pool(r):
        x = r.standard_normal((int(r.integers(1, 3)), 2) + tuple(int(v) for v in r.integers(1, 7, 3)))
        k, s = (3, 2) if r.random() < 0.5 else (3, 1)
        return np.abs(ops.maxpool3d(T(x), k, s, 1).data - oracles.maxpool_loops(x, k, s, 1)).max()

    def shape(r):
        return (int(r.integers(1, 3)), int(r.integers(1, 5))) + tuple(int(v) for v in r.integers(1, 5, 3))

    def gap_s(r):
        x = r.standard_normal(shape(r))
        return np.abs(ops.gap_spatial(T(x)).data - oracles.gap_spatial_loops(x)).max()

    def gap_g(r):
        x = r.standard_normal(shape(r))
        return np.abs(ops.gap_global(T(x)).data - oracles.gap_global_loops(x)).max()

    def da(r):
        x = r.standard_normal(shape(r))
        n_flat = x.shape[1] * x.shape[2]
        w = DAWeights.create(n_flat, int(r.integers(1, n_flat + 1)), r)
        w = DAWeights(T(w.w1.data), T(w.w2.data), w.r)
        got = da_forward(T(x), w, depth=x.shape[2]).data
        return np.abs(got - oracles.da_dense(x, w.w1.data, w.w2.data)).max()

    def ca(r):
        x = r.standard_normal(shape(r))
        w = CAWeights.create(x.shape[1], int(r.integers(1, x.shape[1] + 1)), r)
        w = CAWeights(T(w.w1.data), T(w.w2.data), w.r)
        return np.abs(ca_forward(T(x), w).data - oracles.ca_dense(x, w.w1.data, w.w2.data)).max()

    def auc(r):
        n = int(r.integers(2, 60))
        scores = np.round(r.random(n), int(r.integers(1, 4)))
        labels = r.integers(0, 2, n)
        labels[:2] = [0, 1]
        return 0.0 if roc_auc(scores, labels) == oracles.auc_pairs(scores, labels) else np.inf

    return [("conv3d", conv), ("maxpool3d", pool), ("gap_spatial", gap_s), ("gap_global", gap_g),
            ("da_forward", da), ("ca_forward", ca), ("roc_auc", auc)]


def test_4_oracle_equivalence(verdict):
    instances = 20
    worst = {}
    for name, check in _oracle_cases():
        worst[name] = max(check(np.random.default_rng([4, i])) for i in range(instances))
    bad = {k: v for k, v in worst.items() if not v <= 1e-9}
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(4, "oracle equivalence", not bad, f"{instances} instances each; max abs err {detail}")


def test_5_da_calibration(rng, verdict):
    x = rng.standard_normal((2, 8, 4, 3, 3))
    da_err = np.abs(da_forward(T(x), DAWeights.create(32, 16), depth=4).data - 0.5 * x).max()

    worst_block = 0.0
    for c_in, c_out, stride in [(4, 4, 1), (4, 8, 2)]:
        cfg = BlockConfig(c_in, c_out, stride, feature_depth=4 // stride, r_ca=2, r_da=4)
        block = BlockParams.create(cfg, rng, zero_gates=True)
        xb = T(rng.standard_normal((2, c_in, 4, 4, 4)))
        got = dual_attention_block_forward(xb, cfg, block, training=False).data
        branch = block.conv2(ops.relu(block.conv1(xb, False)), False).data
        short = block.shortcut(xb, False).data if block.shortcut is not None else xb.data
        worst_block = max(worst_block, np.abs(got - np.maximum(0.25 * branch + short, 0)).max())
    verdict(5, "DA calibration", da_err <= 1e-6 and worst_block <= 1e-6,
            f"DA max err {da_err:.1e}, block 0.25-gain max err {worst_block:.1e}")


# desk-scale end-to-end, shared by criteria 6 and 7

@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    synth_generate(SynthConfig(counts=(80, 80, 80), seed=0), root / "train")
    synth_generate(SynthConfig(counts=(30, 30, 30), seed=1), root / "test")
    train = load_samples(read_manifest(root / "train/manifest.csv"), root / "train")
    test = load_samples(read_manifest(root / "test/manifest.csv"), root / "test")
    cfg = TrainConfig(epochs=30, batch_size=4, seed=0)
    runs = {}
    for name, on in [("baseline", False), ("dual", True)]:
        net = NetworkConfig.desk_scale(use_ca=on, use_da=on)
        runs[name] = train_and_evaluate(net, cfg, train, test, root / name)
    return runs, test, time.perf_counter() - start


@pytest.mark.slow
def test_6_desk_scale_end_to_end(desk_runs, verdict):
    runs, _, elapsed = desk_runs
    base, dual = runs["baseline"].report, runs["dual"].report
    ok_a = base.accuracy >= 0.85 and dual.accuracy >= 0.85
    ok_b = dual.auc >= base.auc - 0.01 and dual.accuracy >= base.accuracy
    verdict(6, "desk-scale end-to-end", ok_a and ok_b and elapsed <= 45 * 60,
            f"baseline acc {base.accuracy:.4f} auc {base.auc:.4f}; dual acc {dual.accuracy:.4f} "
            f"auc {dual.auc:.4f}; {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_7_cam_localization(desk_runs, verdict):
    from voxattn.checkpoint import load_checkpoint
    runs, test, _ = desk_runs
    params = load_checkpoint(runs["dual"].checkpoint)
    covid = [s for s in test if s.label == 2]
    ratios = []
    for s, cam in zip(covid, sample_cams(params, covid)):
        if cam.predicted_class != 2:
            continue
        mask = s.lesion_mask[0].astype(bool)
        inside, outside = cam.values[mask].mean(), cam.values[~mask].mean()
        ratios.append(np.inf if outside == 0 else inside / outside)
    hits = sum(r >= 1.5 for r in ratios)
    frac = hits / len(ratios) if ratios else 0.0
    verdict(7, "CAM localization", frac >= 0.8,
            f"{hits}/{len(ratios)} correctly classified COVID volumes with inside/outside >= 1.5, "
            f"median ratio {np.median(ratios) if ratios else float('nan'):.2f}")


def test_8_determinism_and_round_trips(tmp_path, verdict):
    cfg = SynthConfig(counts=(8, 8, 8), seed=3)
    synth_generate(cfg, tmp_path / "d")
    samples = load_samples(read_manifest(tmp_path / "d/manifest.csv"), tmp_path / "d")
    train_cfg = TrainConfig(epochs=2, batch_size=4, seed=5)
    net = NetworkConfig.desk_scale()
    blobs = [encode_checkpoint(build_and_fit(net, train_cfg, samples, tmp_path / f"r{i}")) for i in range(2)]
    same_ckpt = blobs[0] == blobs[1]

    decoded = decode_checkpoint(blobs[0])
    ckpt_exact = encode_checkpoint(decoded) == blobs[0]

    davl_ok = all(_davl_identity(s) for s in samples)
    davl_ok = davl_ok and _davl_property()
    verdict(8, "determinism and round trips", same_ckpt and ckpt_exact and davl_ok,
            f"repeat training bit-identical {same_ckpt}, checkpoint round trip {ckpt_exact}, DAVL identity {davl_ok}")


def build_and_fit(net, train_cfg, samples, out):
    from voxattn.checkpoint import load_checkpoint
    return load_checkpoint(train_and_evaluate(net, train_cfg, samples, samples[:4], out).checkpoint)


def _davl_identity(sample):
    back = decode_volume(encode_volume(sample))
    same_mask = (sample.lesion_mask is None and back.lesion_mask is None) or \
        np.array_equal(sample.lesion_mask, back.lesion_mask)
    return back.voxels.tobytes() == sample.voxels.astype("<f4").tobytes() and same_mask


def _davl_property():
    failures = []

    @settings(max_examples=60, deadline=None)
    @given(st.tuples(st.integers(1, 5), st.integers(1, 6), st.integers(1, 7)), st.booleans(), st.integers(0, 2**32 - 1))
    def check(geometry, with_mask, seed):
        r = np.random.default_rng(seed)
        mask = r.random(geometry) < 0.3 if with_mask else None
        sample = VolumeSample(r.random((1,) + geometry).astype(np.float32), lesion_mask=mask)
        if not _davl_identity(sample):
            failures.append(geometry)

    check()
    return not failures


def test_9_schedule_exactness(verdict):
    worst = 0.0
    for total, hi, lo in [(30, 1e-3, 0.0), (30, 1e-3, 1e-5), (7, 0.3, 0.01), (1000, 2.5e-2, 1e-6)]:
        worst = max(worst, abs(cosine_lr(0, total, hi, lo) - hi), abs(cosine_lr(total, total, hi, lo) - lo))
        if total % 2 == 0:
            worst = max(worst, abs(cosine_lr(total // 2, total, hi, lo) - (hi + lo) / 2))
    verdict(9, "schedule exactness", worst <= 1e-12, f"max deviation {worst:.1e}")
