"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line (collected again in the terminal summary)
and then asserts. The training criteria share one lazily filled cache of
runs; each criterion's runtime is the summed cost of the runs it uses.
"""

import math
import statistics
import time

import numpy as np
import pytest

from conftest import record_acceptance
from f2c import tensor as T
from f2c.model import ModelSpec, build

CHANCE = 0.1


def rel_err(a, b):
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else 0.0


# -- 1. gradient fidelity ------------------------------------------------------


def _conv_case(rng):
    c, o, k = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    side = int(rng.integers(k + 1, 7))
    x = rng.normal(size=(c, side, side))
    w = rng.normal(size=(o, c, k, k))
    b = rng.normal(size=o)
    out = T.conv2d(x, w, b, stride, pad)
    r = rng.normal(size=out.shape)
    lg = T.conv2d_backward(x, w, r, stride, pad)
    errs = [
        rel_err(lg.input_grad, T.finite_diff_grad(lambda v: float(np.sum(T.conv2d(v, w, b, stride, pad) * r)), x)),
        rel_err(lg.param_grads["weight"], T.finite_diff_grad(lambda v: float(np.sum(T.conv2d(x, v, b, stride, pad) * r)), w)),
        rel_err(lg.param_grads["bias"], T.finite_diff_grad(lambda v: float(np.sum(T.conv2d(x, w, v, stride, pad) * r)), b)),
    ]
    return max(errs)


def _relu_case(rng):
    x = rng.normal(size=(2, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    r = rng.normal(size=x.shape)
    return rel_err(T.relu_backward(x, r), T.finite_diff_grad(lambda v: float(np.sum(T.relu(v) * r)), x))


def _pool_case(rng):
    window = int(rng.choice([2, 3]))
    stride = int(rng.choice([window, 1]))
    side = int(rng.integers(window + 1, 8))
    # distinct values spaced far beyond eps keep every window's max unique
    x = rng.permutation(2 * side * side).reshape(2, side, side) * 1e-2
    out, arg = T.maxpool2d(x, window, stride)
    r = rng.normal(size=out.shape)
    analytic = T.maxpool2d_backward(r, arg, x.shape, window, stride)
    return rel_err(analytic, T.finite_diff_grad(lambda v: float(np.sum(T.maxpool2d(v, window, stride)[0] * r)), x))


def _dense_case(rng):
    n_in, n_out = int(rng.integers(1, 9)), int(rng.integers(1, 6))
    x, w, b = rng.normal(size=n_in), rng.normal(size=(n_out, n_in)), rng.normal(size=n_out)
    r = rng.normal(size=n_out)
    lg = T.dense_backward(x, w, r)
    return max(
        rel_err(lg.input_grad, T.finite_diff_grad(lambda v: float(T.dense(v, w, b) @ r), x)),
        rel_err(lg.param_grads["weight"], T.finite_diff_grad(lambda v: float(T.dense(x, v, b) @ r), w)),
        rel_err(lg.param_grads["bias"], T.finite_diff_grad(lambda v: float(T.dense(x, w, v) @ r), b)),
    )


def _xent_case(rng):
    k = int(rng.integers(2, 8))
    z = rng.normal(size=k) * 3
    label = int(rng.integers(k))
    _, grad = T.softmax_xent(z, label)
    return rel_err(grad, T.finite_diff_grad(lambda v: T.softmax_xent(v, label)[0], z))


def _dropout_case(rng):
    x = rng.normal(size=(3, 5))
    _, mask = T.dropout(x, 0.5, True, np.random.default_rng(int(rng.integers(1 << 30))))
    r = rng.normal(size=x.shape)
    # with the mask frozen dropout is linear in its input
    return rel_err(T.dropout_backward(r, mask), T.finite_diff_grad(lambda v: float(np.sum(T.dropout_backward(v, mask) * r)), x))


GRAD_OPS = {
    "conv2d": _conv_case,
    "relu": _relu_case,
    "maxpool2d": _pool_case,
    "dense": _dense_case,
    "softmax_xent": _xent_case,
    "dropout": _dropout_case,
}


def test_criterion_01_gradient_fidelity():
    t0 = time.perf_counter()
    worst = {}
    for i, (name, case) in enumerate(GRAD_OPS.items()):
        rng = np.random.default_rng([1, i])
        worst[name] = max(case(rng) for _ in range(100))
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-6 for v in worst.values()) and elapsed < 30
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record_acceptance(1, ok, f"max rel err over 100 cases/op: {summary}; {elapsed:.1f}s (< 30s)")
    assert ok


# -- 2. resampling oracle ------------------------------------------------------


def test_criterion_02_resampling_oracle():
    from f2c.resample import ResolutionSpec, degrade, resize_bilinear

    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    identity_exact = True
    for _ in range(50):
        c = int(rng.choice([1, 3]))
        h, w = 2 * int(rng.integers(1, 40)), 2 * int(rng.integers(1, 40))
        img = rng.random((c, h, w))
        half = resize_bilinear(img, h // 2, w // 2)
        block = img.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
        worst = max(worst, float(np.max(np.abs(half - block))))
        identity_exact &= bool(np.array_equal(resize_bilinear(img, h, w), img))
    dims_ok = True
    for net in (8, 16, 33, 64, 100, 227):
        for low in sorted({1, 2, net // 4 or 1, net // 2, net - 1 or 1, net}):
            img = rng.random((1, net, net))
            dims_ok &= degrade(img, ResolutionSpec(net, low)).shape == img.shape
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and identity_exact and dims_ok and elapsed < 10
    record_acceptance(
        2, ok,
        f"2x decimation vs block mean max err {worst:.1e} (<= 1e-12); identity bit-exact {identity_exact}; "
        f"degrade keeps dims {dims_ok}; {elapsed:.1f}s (< 10s)",
    )
    assert ok


# -- 3. occlusion oracle -------------------------------------------------------


def test_criterion_03_occlusion_oracle():
    from f2c.occlusion import GRAY, OcclusionConfig, occlusion_heatmap

    t0 = time.perf_counter()
    worst = 0.0
    fixed_point = True
    perm_exact = True
    for case in range(20):
        rng = np.random.default_rng([3, case])
        side = int(rng.integers(8, 17))
        channels = int(rng.choice([1, 3]))
        k = int(rng.integers(2, 6))
        spec = ModelSpec(input_side=side, input_channels=channels, conv_blocks=(), fc_dims=(), num_classes=k)
        model = build(spec, rng, init_std=1.0)
        model.params["out.bias"] = rng.normal(size=k)
        cfg = OcclusionConfig(patch_size=int(rng.choice([1, 3, 5, 7])), stride=int(rng.integers(1, 3)))
        image = rng.random((channels, side, side))
        hm = occlusion_heatmap(model, image, cfg)

        wk = model.params["out.weight"].reshape(k, channels, side, side)
        half = cfg.patch_size // 2
        expected = np.zeros_like(hm.raw)
        for i, y in enumerate(range(0, side, cfg.stride)):
            for j, x in enumerate(range(0, side, cfg.stride)):
                ys, xs = slice(max(0, y - half), y + half + 1), slice(max(0, x - half), x + half + 1)
                delta = image[:, ys, xs] - cfg.gray_value
                expected[i, j] = math.fsum(float(np.sum(wk[c][:, ys, xs] * delta)) ** 2 for c in range(k))
        worst = max(worst, float(np.max(np.abs(hm.raw - expected))))

        gray = occlusion_heatmap(model, np.full_like(image, GRAY), cfg)
        fixed_point &= bool(np.all(gray.raw == 0.0) and np.all(gray.normalized == 0.0))

        perm = rng.permutation(k)
        shuffled = model.copy()
        shuffled.params["out.weight"] = model.params["out.weight"][perm].copy()
        shuffled.params["out.bias"] = model.params["out.bias"][perm].copy()
        perm_exact &= bool(np.array_equal(occlusion_heatmap(shuffled, image, cfg).raw, hm.raw))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and fixed_point and perm_exact and elapsed < 30
    record_acceptance(
        3, ok,
        f"linear closed form max err {worst:.1e} (<= 1e-9); gray fixed point exact {fixed_point}; "
        f"output permutation exact {perm_exact}; {elapsed:.1f}s (< 30s)",
    )
    assert ok


# -- shared training runs for 4-8 ----------------------------------------------

# CLI keys for the training criteria; everything else is the default benchmark
EXPERIMENT = {
    "train.lr_stage1": "0.02",
    "train.lr_stage2": "0.01",
    "train.epochs_stage1": "20",
    "train.epochs_stage2": "20",
    "train.pretrain_epochs": "10",
    "train.pretrain_lr": "0.02",
    "train.clip_norm": "5",
}
SEEDS3 = (0, 1, 2)
SEEDS5 = (0, 1, 2, 3, 4)


class Bench:
    """Lazily trained runs keyed by (method, seed, per_class), each with its cost."""

    def __init__(self):
        from f2c.cli import build_config, synthesize

        self.cfg = build_config(None, EXPERIMENT)
        self.data = synthesize(self.cfg)
        self.runs = {}
        self.cost = {}

    def _timed(self, key, fn):
        if key not in self.runs:
            t0 = time.perf_counter()
            self.runs[key] = fn()
            self.cost[key] = time.perf_counter() - t0
        return self.runs[key]

    def pretrained(self, seed):
        from f2c.cli import _model_spec_for
        from f2c.train import TrainPlan, pretrain_model

        def fn():
            stage = TrainPlan.for_strategy("high-only", self.cfg.hyper, seed).pretrain
            model, _ = pretrain_model(self.data.aux, _model_spec_for(self.cfg, self.data), stage, self.cfg.res, self.cfg.init_std)
            return model

        return self._timed(("pretrain", seed), fn)

    def run(self, method, seed, per_class=None):
        """(EvalResult, Model) for a strategy; ``per_class`` trains on that many samples per class."""
        from f2c.cli import _model_spec_for, run_ablation_cell
        from f2c.train import TrainPlan, run_strategy

        def fn():
            pre = self.pretrained(seed)
            if per_class is not None:
                return run_ablation_cell(self.cfg, self.data, method, per_class, per_class, seed, pre), None
            plan = TrainPlan.for_strategy(method, self.cfg.hyper, seed)
            return run_strategy(
                plan, self.data.aux, self.data.train, self.data.test, self.cfg.res,
                _model_spec_for(self.cfg, self.data), seed, pre, self.cfg.init_std,
            )

        return self._timed((method, seed, per_class), fn)

    def low(self, method, seeds, per_class=None):
        return [self.run(method, s, per_class)[0].accuracy_low for s in seeds]

    def seconds(self, keys):
        return sum(self.cost[k] for k in set(keys) if k in self.cost)


@pytest.fixture(scope="module")
def bench():
    return Bench()


def _fmt(values):
    return "[" + " ".join(f"{v:.3f}" for v in values) + "]"


# -- 4. domain mismatch --------------------------------------------------------


def test_criterion_04_domain_mismatch(bench):
    runs = [bench.run("high-only", s)[0] for s in SEEDS3]
    high = statistics.median(r.accuracy_high for r in runs)
    low = statistics.median(r.accuracy_low for r in runs)
    used = [("high-only", s, None) for s in SEEDS3] + [("pretrain", s) for s in SEEDS3]
    elapsed = bench.seconds(used)
    ok = low <= 2 * CHANCE and high >= 0.80 and elapsed < 15 * 60
    record_acceptance(
        4, ok,
        f"high-only median native {high:.3f} (>= 0.80) {_fmt(r.accuracy_high for r in runs)}, "
        f"degraded {low:.3f} (<= 0.20) {_fmt(r.accuracy_low for r in runs)}; {elapsed / 60:.1f} min (< 15)",
    )
    assert ok


# -- 5. staged beats low-only --------------------------------------------------


def test_criterion_05_staged_beats_low_only(bench):
    staged = bench.low("staged-hl", SEEDS5)
    low_only = bench.low("low-only", SEEDS5)
    used = [(m, s, None) for m in ("staged-hl", "low-only") for s in SEEDS5] + [("pretrain", s) for s in SEEDS5]
    elapsed = bench.seconds(used)
    gap = statistics.median(staged) - statistics.median(low_only)
    ok = gap >= 0.03 and elapsed < 30 * 60
    record_acceptance(
        5, ok,
        f"degraded acc staged-hl median {statistics.median(staged):.3f} {_fmt(staged)} vs low-only "
        f"{statistics.median(low_only):.3f} {_fmt(low_only)}, gap {gap:+.3f} (>= +0.03); {elapsed / 60:.1f} min (< 30)",
    )
    assert ok


# -- 6. reverse order ----------------------------------------------------------


def test_criterion_06_reverse_order_not_better(bench):
    hl = bench.low("staged-hl", SEEDS5)
    lh = bench.low("staged-lh", SEEDS5)
    ok = statistics.median(lh) <= statistics.median(hl)
    record_acceptance(
        6, ok,
        f"degraded acc staged-lh median {statistics.median(lh):.3f} {_fmt(lh)} <= staged-hl "
        f"{statistics.median(hl):.3f} {_fmt(hl)}",
    )
    assert ok


# -- 7. limited-data ablation --------------------------------------------------


def test_criterion_07_limited_data_trend(bench):
    quarter = int(np.bincount(bench.data.train.labels).min()) // 4
    small_staged = bench.low("staged-hl", SEEDS5, quarter)
    small_mixed = bench.low("mixed", SEEDS5, quarter)
    full_staged = bench.low("staged-hl", SEEDS5)
    full_mixed = bench.low("mixed", SEEDS5)
    m = statistics.median
    small_ok = m(small_staged) >= m(small_mixed)
    full_ok = abs(m(full_staged) - m(full_mixed)) <= 0.05
    ok = small_ok and full_ok
    record_acceptance(
        7, ok,
        f"25% ({quarter}/class) staged {m(small_staged):.3f} {_fmt(small_staged)} >= mixed {m(small_mixed):.3f} "
        f"{_fmt(small_mixed)}: {small_ok}; 100% staged {m(full_staged):.3f} vs mixed {m(full_mixed):.3f} "
        f"{_fmt(full_mixed)}, |diff| {abs(m(full_staged) - m(full_mixed)):.3f} (<= 0.05): {full_ok}",
    )
    assert ok


# -- 8. heat inside the mark ---------------------------------------------------


def test_criterion_08_heat_in_mark(bench):
    from f2c.occlusion import OcclusionConfig, mean_heat_in_box, occlusion_heatmap
    from f2c.resample import degrade

    t0 = time.perf_counter()
    staged = bench.run("staged-hl", 0)[1]
    low_only = bench.run("low-only", 0)[1]
    test = bench.data.test
    # two images per class, heat maps on the degraded view the models are meant for
    picks = [int(i) for c in range(test.num_classes) for i in np.flatnonzero(test.labels == c)[:2]]
    cfg = OcclusionConfig()
    heat = {"staged": [], "low": []}
    for i in picks:
        image = degrade(test.images[i], bench.cfg.res)
        box = tuple(int(v) for v in test.mark_boxes[i])
        heat["staged"].append(mean_heat_in_box(occlusion_heatmap(staged, image, cfg), box))
        heat["low"].append(mean_heat_in_box(occlusion_heatmap(low_only, image, cfg), box))
    elapsed = time.perf_counter() - t0
    ms, ml = statistics.median(heat["staged"]), statistics.median(heat["low"])
    ok = len(picks) == 20 and ms > ml
    record_acceptance(
        8, ok,
        f"median mean normalized heat in mark box over {len(picks)} degraded test images: staged-hl {ms:.3f} "
        f"> low-only {ml:.3f}; {elapsed:.0f}s",
    )
    assert ok


# -- 9. determinism ------------------------------------------------------------

SMALL_COMPARE = [
    "--net-input", "32", "--target-low", "8",
    "--set", "synth.classes=4", "--set", "synth.samples_per_class=20", "--set", "synth.mark_side=5",
    "--set", "synth.jitter=3", "--set", "aux.shapes=4", "--set", "aux.samples_per_class=10",
    "--set", "train.epochs_stage1=2", "--set", "train.epochs_stage2=2", "--set", "train.pretrain_epochs=2",
    "--seed", "0", "--seed", "1",
]


def test_criterion_09_compare_is_deterministic(tmp_path):
    from f2c.cli import main

    t0 = time.perf_counter()
    codes = [main(["compare", "--out", str(tmp_path / f"run{i}"), *SMALL_COMPARE]) for i in (1, 2)]
    a = (tmp_path / "run1" / "report.csv").read_bytes()
    b = (tmp_path / "run2" / "report.csv").read_bytes()
    rows = len(a.decode().splitlines()) - 1
    elapsed = time.perf_counter() - t0
    ok = codes == [0, 0] and a == b and rows == 10
    record_acceptance(
        9, ok,
        f"two compare runs (5 strategies x 2 seeds, reduced benchmark): exit {codes}, {rows} rows, "
        f"CSV byte-identical {a == b}; {elapsed:.0f}s",
    )
    assert ok


# -- 10. persistence -----------------------------------------------------------


def test_criterion_10_checkpoint_persistence(tmp_path):
    import struct

    from f2c import model as M
    from f2c.cli import _model_spec_for, build_config, synthesize
    from f2c.train import TrainPlan, evaluate, run_strategy

    cfg = build_config(None, {
        "res.net_input": "32", "res.target_low": "8", "synth.classes": "4", "synth.samples_per_class": "20",
        "synth.mark_side": "5", "synth.jitter": "3", "aux.shapes": "4", "aux.samples_per_class": "10",
        "train.epochs_stage1": "2", "train.epochs_stage2": "2", "train.pretrain_epochs": "2",
    })
    data = synthesize(cfg)
    plan = TrainPlan.for_strategy("staged-hl", cfg.hyper, 0)
    spec = _model_spec_for(cfg, data)
    result, model = run_strategy(plan, data.aux, data.train, data.test, cfg.res, spec, 0, None, cfg.init_std)
    path = tmp_path / "m.f2ck"
    M.save(model, path)
    back = M.load(path)
    acc_same = (
        evaluate(back, data.test, "native", cfg.res)[0] == result.accuracy_high
        and evaluate(back, data.test, "degraded", cfg.res)[0] == result.accuracy_low
        and all(np.array_equal(back.params[k], model.params[k]) for k in model.params)
    )

    blob = path.read_bytes()
    cases = {
        "bad magic": (b"XXXX" + blob[4:], M.BadMagicError),
        "version": (blob[:4] + struct.pack("<I", M.VERSION + 1) + blob[8:], M.VersionMismatchError),
        "trailing bytes": (blob + b"\0", M.InconsistentCheckpointError),
    }
    rng = np.random.default_rng(10)
    for cut in sorted(set(rng.integers(0, len(blob), 200).tolist()) | {0, 3, 8, len(blob) - 1}):
        cases[f"truncated at {cut}"] = (blob[:cut], M.TruncatedCheckpointError if cut >= 4 else (M.BadMagicError, M.TruncatedCheckpointError))
    flips = 0
    for k in range(300):
        bad = bytearray(blob)
        for pos in rng.integers(0, len(blob), int(rng.integers(1, 5))):
            bad[pos] ^= int(rng.integers(1, 256))
        cases[f"flip {k}"] = (bytes(bad), None)
        flips += 1
    wrong = []
    for name, (data_bytes, expect) in cases.items():
        p = tmp_path / "bad.f2ck"
        p.write_bytes(data_bytes)
        try:
            M.load(p)
            if expect is not None:
                wrong.append(f"{name}: loaded")
        except M.CheckpointError as exc:
            if expect is not None and not isinstance(exc, expect):
                wrong.append(f"{name}: {type(exc).__name__}")
        except Exception as exc:  # any other exception is a crash
            wrong.append(f"{name}: crashed with {type(exc).__name__}")
    ok = acc_same and not wrong
    record_acceptance(
        10, ok,
        f"reloaded accuracy identical {acc_same}; {len(cases)} corrupted files ({flips} random byte flips) "
        f"all raise the expected CheckpointError subclass: {not wrong}" + (f" {wrong[:3]}" if wrong else ""),
    )
    assert ok
