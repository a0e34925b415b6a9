"""Command-line driver: generate, compare, ablate, train, eval, heatmap.

Configuration is a flat ``key = value`` file with dotted keys. Precedence is
defaults < config file < flags; the effective config is echoed into reports.
Exit codes: 0 success, 2 validation error, 3 runtime error, 4 I/O error.
"""

import argparse
import csv
import io
import json
import logging
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .dataset import (
    Dataset,
    DatasetLoadError,
    SynthSpec,
    auxiliary_spec,
    generate_auxiliary,
    generate_synthetic,
    load_directory,
    write_directory,
)
from .model import CheckpointError, ModelSpec, load, save
from .netpbm import NetpbmError, read_netpbm
from .occlusion import OcclusionConfig, apply_heatmap_filter, export_heatmap, export_image, occlusion_heatmap
from .resample import ResolutionSpec
from .train import EvalResult, Hyper, Strategy, TrainPlan, evaluate, pretrain_model, run_strategy

log = logging.getLogger("f2c")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4
ALL_STRATEGIES = ",".join(s.value for s in Strategy)


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _str_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# key -> (parser, default text); order here is the echo order
SCHEMA = {
    "res.net_input": (int, "64"),
    "res.target_low": (int, "16"),
    "synth.classes": (int, "10"),
    "synth.samples_per_class": (int, "200"),
    "synth.mark_side": (int, "9"),
    "synth.base_shapes": (int, "4"),
    "synth.noise_std": (float, "0.05"),
    "synth.jitter": (int, "6"),
    "synth.seed": (int, "0"),
    "aux.shapes": (int, "20"),
    "aux.samples_per_class": (int, "60"),
    "aux.seed_offset": (int, "1000"),
    "model.dropout": (float, "0.5"),
    "model.init": (str, "he"),
    "train.lr_stage1": (float, "0.01"),
    "train.lr_stage2": (float, "0.001"),
    "train.epochs_stage1": (int, "30"),
    "train.epochs_stage2": (int, "30"),
    "train.batch_size": (int, "32"),
    "train.momentum": (float, "0.9"),
    "train.weight_decay": (float, "0.0005"),
    "train.clip_norm": (float, "0"),
    "train.pretrain": (_bool, "true"),
    "train.pretrain_epochs": (int, "30"),
    "train.pretrain_lr": (float, "0.01"),
    "train.strategy": (str, "staged-hl"),
    "run.seeds": (_int_list, "0"),
    "run.strategies": (_str_list, ALL_STRATEGIES),
    "run.data": (str, ""),
    "run.jobs": (int, "1"),
    "ablate.fractions": (_float_list, "0.25,0.5,1.0"),
    "heatmap.patch": (int, "7"),
    "heatmap.stride": (int, "1"),
    "heatmap.gray": (float, repr(128 / 255)),
}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


@dataclass
class RunConfig:
    raw: Dict[str, str]
    values: Dict[str, object]
    synth: SynthSpec
    res: ResolutionSpec
    model: ModelSpec
    hyper: Hyper

    def __getitem__(self, key):
        return self.values[key]

    def echo(self) -> str:
        return "".join(f"{k} = {self.raw[k]}\n" for k in SCHEMA)

    @property
    def init_std(self):
        return None if self["model.init"] == "he" else 0.01

    def with_overrides(self, **overrides) -> "RunConfig":
        raw = dict(self.raw)
        raw.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
        return resolve(raw)


def resolve(raw: Dict[str, str]) -> RunConfig:
    """Type-check every key and build the module specs; raises ConfigError."""
    values = {}
    for key, (parse, _) in SCHEMA.items():
        try:
            values[key] = parse(raw[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    try:
        res = ResolutionSpec(values["res.net_input"], values["res.target_low"])
        synth = SynthSpec(
            num_classes=values["synth.classes"],
            samples_per_class=values["synth.samples_per_class"],
            image_side=res.net_input,
            mark_side=values["synth.mark_side"],
            base_shape_count=values["synth.base_shapes"],
            noise_std=values["synth.noise_std"],
            seed=values["synth.seed"],
            jitter=values["synth.jitter"],
        )
        if values["aux.shapes"] < 2 or values["aux.samples_per_class"] < 1:
            raise ValueError("aux.shapes must be >= 2 and aux.samples_per_class >= 1")
        model = ModelSpec(input_side=res.net_input, num_classes=synth.num_classes, dropout_p=values["model.dropout"])
        if values["model.init"] not in ("he", "gaussian"):
            raise ValueError(f"model.init must be 'he' or 'gaussian', got {values['model.init']!r}")
        hyper = Hyper(
            lr=values["train.lr_stage1"],
            lr_finetune=values["train.lr_stage2"],
            epochs=values["train.epochs_stage1"],
            epochs_finetune=values["train.epochs_stage2"],
            batch_size=values["train.batch_size"],
            momentum=values["train.momentum"],
            weight_decay=values["train.weight_decay"],
            clip_norm=values["train.clip_norm"],
            pretrain_epochs=values["train.pretrain_epochs"],
            pretrain_lr=values["train.pretrain_lr"],
        )
        strategies = values["run.strategies"] + [values["train.strategy"]]
        for s in strategies:
            # building every plan runs the stage and lr-ordering checks up front
            TrainPlan.for_strategy(s, hyper, 0, values["train.pretrain"])
        if not values["run.strategies"]:
            raise ValueError("run.strategies is empty")
        if not values["run.seeds"] or any(s < 0 for s in values["run.seeds"]):
            raise ValueError("run.seeds must be a non-empty list of non-negative integers")
        if values["run.jobs"] < 1:
            raise ValueError("run.jobs must be >= 1")
        fr = values["ablate.fractions"]
        if not fr or any(not 0 <= f <= 1 for f in fr) or max(fr) == 0:
            raise ValueError("ablate.fractions must lie in [0, 1] with at least one positive value")
        OcclusionConfig(values["heatmap.patch"], values["heatmap.stride"], values["heatmap.gray"])
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return RunConfig(raw, values, synth, res, model, hyper)


def default_raw() -> Dict[str, str]:
    return {k: default for k, (_, default) in SCHEMA.items()}


def build_config(config_path: Optional[str], flag_values: Dict[str, str]) -> RunConfig:
    raw = default_raw()
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"{config_path}: cannot read config ({exc.strerror})") from exc
        raw.update(parse_config_text(text, config_path))
    raw.update(flag_values)
    return resolve(raw)


# -- data ----------------------------------------------------------------------


@dataclass
class Data:
    train: Dataset
    test: Dataset
    aux: Dataset


def aux_synth_spec(cfg: RunConfig) -> SynthSpec:
    spec = auxiliary_spec(cfg.synth, cfg["aux.shapes"], cfg["aux.samples_per_class"])
    return replace(spec, seed=cfg.synth.seed + cfg["aux.seed_offset"])


def synthesize(cfg: RunConfig) -> Data:
    train, test, _ = generate_synthetic(cfg.synth)
    aux, _, _ = generate_auxiliary(aux_synth_spec(cfg))
    return Data(train, test, aux)


def _load_marks(root: Path, test: Dataset):
    manifest = root / "manifest.json"
    if not manifest.exists():
        return
    marks = json.loads(manifest.read_text(encoding="utf-8")).get("test_marks", {})
    if all(i in marks for i in test.ids):
        test.mark_boxes = np.array([marks[i] for i in test.ids], dtype=int)


def load_data(cfg: RunConfig) -> Data:
    if not cfg["run.data"]:
        return synthesize(cfg)
    root = Path(cfg["run.data"])
    net = cfg.res.net_input
    train = load_directory(root / "train", net)
    test = load_directory(root / "test", net)
    aux = load_directory(root / "aux", net)
    if train.class_names != test.class_names:
        raise DatasetLoadError(f"{root}: train and test class directories differ")
    _load_marks(root, test)
    return Data(train, test, aux)


def check_data_exists(cfg: RunConfig):
    if cfg["run.data"]:
        root = Path(cfg["run.data"])
        for sub in ("train", "test", "aux"):
            if not (root / sub).is_dir():
                raise OSError(f"{root / sub}: dataset directory not found")


def _model_spec_for(cfg: RunConfig, data: Data) -> ModelSpec:
    return replace(cfg.model, num_classes=data.train.num_classes, input_channels=int(data.train.images.shape[1]))


# -- running -------------------------------------------------------------------


def run_seed(cfg: RunConfig, data: Data, seed: int, strategies: Sequence[str], train_sets=None) -> List[EvalResult]:
    """Every requested strategy for one seed, sharing one pretrained model."""
    spec = _model_spec_for(cfg, data)
    pretrain = cfg["train.pretrain"]
    pretrained = None
    if pretrain:
        stage = TrainPlan.for_strategy(strategies[0], cfg.hyper, seed).pretrain
        pretrained, _ = pretrain_model(data.aux, spec, stage, cfg.res, cfg.init_std)
    results = []
    for s in strategies:
        plan = TrainPlan.for_strategy(s, cfg.hyper, seed, pretrain)
        train, low = (data.train, None) if train_sets is None else train_sets[s]
        log.info("seed %d: %s", seed, s)
        result, _ = run_strategy(plan, data.aux, train, data.test, cfg.res, spec, seed, pretrained, cfg.init_std, low)
        results.append(result)
    return results


def _seed_job(args):
    cfg_raw, seed, strategies = args
    cfg = resolve(cfg_raw)
    return run_seed(cfg, load_data(cfg), seed, strategies)


def compare_results(cfg: RunConfig, data: Optional[Data] = None, on_result=None) -> List[EvalResult]:
    """All (strategy, seed) results, ordered by strategy then seed."""
    strategies = cfg["run.strategies"]
    seeds = cfg["run.seeds"]
    by_seed = {}
    if cfg["run.jobs"] > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg["run.jobs"]) as pool:
            jobs = [(cfg.raw, seed, strategies) for seed in seeds]
            for seed, res in zip(seeds, pool.map(_seed_job, jobs)):
                by_seed[seed] = res
                for r in res:
                    on_result and on_result(r)
    else:
        data = data or load_data(cfg)
        for seed in seeds:
            by_seed[seed] = []
            for r in run_seed(cfg, data, seed, strategies):
                by_seed[seed].append(r)
                on_result and on_result(r)
    return [by_seed[seed][i] for i in range(len(strategies)) for seed in seeds]


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def compare_csv(results: Sequence[EvalResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "seed", "acc_high", "acc_low"])
    for r in results:
        w.writerow([r.strategy, r.seed, _fmt(r.accuracy_high), _fmt(r.accuracy_low)])
    return buf.getvalue()


def medians(results: Sequence[EvalResult]) -> Dict[str, Dict[str, float]]:
    out = {}
    for name in dict.fromkeys(r.strategy for r in results):
        rows = [r for r in results if r.strategy == name]
        out[name] = {
            "acc_high": statistics.median(r.accuracy_high for r in rows),
            "acc_low": statistics.median(r.accuracy_low for r in rows),
            "seeds": len(rows),
        }
    return out


def _provenance(cfg: RunConfig, started: float) -> dict:
    return {
        "version": __version__,
        "config": cfg.echo(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _prepare_out(out: Optional[str]) -> Path:
    if not out:
        raise ConfigError("--out is required")
    path = Path(out)
    if path.exists() and not path.is_dir():
        raise OSError(f"{path}: exists and is not a directory")
    return path


# -- subcommands ---------------------------------------------------------------


def cmd_generate(cfg: RunConfig, args) -> int:
    out = _prepare_out(args.out)
    data = synthesize(cfg)
    for name, ds in (("train", data.train), ("test", data.test), ("aux", data.aux)):
        write_directory(ds, out / name)
    manifest = {
        "version": __version__,
        "config": cfg.echo(),
        "seed": cfg.synth.seed,
        "counts": {name: len(ds) for name, ds in (("train", data.train), ("test", data.test), ("aux", data.aux))},
        "classes": data.train.class_names,
        "test_marks": {i: [int(v) for v in box] for i, box in zip(_written_ids(data.test), data.test.mark_boxes)},
    }
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(data.train)} train, {len(data.test)} test, {len(data.aux)} aux images to {out}")
    return EXIT_OK


def _written_ids(ds: Dataset) -> List[str]:
    # ids as load_directory will report them for a tree made by write_directory
    return [f"{ds.class_names[label]}/{sid}.pgm" for label, sid in zip(ds.labels, ds.ids)]


def cmd_compare(cfg: RunConfig, args) -> int:
    out = _prepare_out(args.out)
    check_data_exists(cfg)
    started = time.time()
    done: List[EvalResult] = []
    try:
        results = compare_results(cfg, on_result=done.append)
    except (OSError, DatasetLoadError, NetpbmError):
        raise
    except Exception as exc:
        _write(out / "report.csv", compare_csv(done))
        _write(out / "report.partial", f"aborted after {len(done)} runs: {type(exc).__name__}: {exc}\n")
        log.error("compare aborted: %s", exc)
        return EXIT_RUNTIME
    _write(out / "report.csv", compare_csv(results))
    report = {
        "rows": [
            {"strategy": r.strategy, "seed": r.seed, "acc_high": r.accuracy_high, "acc_low": r.accuracy_low,
             "train": r.train_description}
            for r in results
        ],
        "medians": medians(results),
        "provenance": _provenance(cfg, started),
    }
    _write(out / "report.json", json.dumps(report, indent=2) + "\n")
    (out / "report.partial").unlink(missing_ok=True)
    for name, m in report["medians"].items():
        print(f"{name:10s} acc_high={_fmt(m['acc_high'])} acc_low={_fmt(m['acc_low'])}")
    return EXIT_OK


def ablation_counts(per_class: int, fractions: Sequence[float]) -> List[int]:
    # a zero fraction stays zero (the pure low-res row); others keep at least one sample
    return sorted({0 if f == 0 else max(1, int(round(f * per_class))) for f in fractions})


def _per_class_size(ds: Dataset) -> int:
    return int(np.bincount(ds.labels, minlength=ds.num_classes).min())


def ablation_cells(counts: Sequence[int]):
    """(method, high_count, low_count): staged on the full grid, mixed on the diagonal.

    A zero count drops that stage, so H_0 cells are low-only runs.
    """
    cells = [("staged-hl", h, l) for h in counts for l in counts if h or l]
    cells += [("mixed", c, c) for c in counts if c]
    return cells


def run_ablation_cell(cfg, data, method, high, low, seed, pretrained):
    spec = _model_spec_for(cfg, data)
    pretrain = cfg["train.pretrain"]
    high_set = data.train.per_class_subset(high) if high else None
    low_set = data.train.per_class_subset(low) if low else None
    if method == "mixed":
        plan, train, low_train = TrainPlan.for_strategy("mixed", cfg.hyper, seed, pretrain), high_set, None
    elif high == 0:
        plan, train, low_train = TrainPlan.for_strategy("low-only", cfg.hyper, seed, pretrain), low_set, None
    elif low == 0:
        plan, train, low_train = TrainPlan.for_strategy("high-only", cfg.hyper, seed, pretrain), high_set, None
    else:
        plan, train, low_train = TrainPlan.for_strategy("staged-hl", cfg.hyper, seed, pretrain), high_set, low_set
    result, _ = run_strategy(plan, data.aux, train, data.test, cfg.res, spec, seed, pretrained, cfg.init_std, low_train)
    return result


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = _prepare_out(args.out)
    check_data_exists(cfg)
    data = load_data(cfg)
    per_class = _per_class_size(data.train)
    counts = ablation_counts(per_class, cfg["ablate.fractions"])
    cells = ablation_cells(counts)
    rows = []
    started = time.time()
    try:
        for seed in cfg["run.seeds"]:
            pretrained = None
            if cfg["train.pretrain"]:
                stage = TrainPlan.for_strategy("staged-hl", cfg.hyper, seed).pretrain
                pretrained, _ = pretrain_model(data.aux, _model_spec_for(cfg, data), stage, cfg.res, cfg.init_std)
            for method, h, l in cells:
                log.info("seed %d: %s H%d L%d", seed, method, h, l)
                r = run_ablation_cell(cfg, data, method, h, l, seed, pretrained)
                rows.append((method, h, l, seed, r.accuracy_high, r.accuracy_low))
    except Exception as exc:
        _write(out / "ablate.csv", ablation_csv(rows))
        _write(out / "ablate.partial", f"aborted after {len(rows)} runs: {type(exc).__name__}: {exc}\n")
        log.error("ablate aborted: %s", exc)
        return EXIT_RUNTIME
    _write(out / "ablate.csv", ablation_csv(rows))
    grid = ablation_grid(rows, counts)
    _write(out / "grid.csv", grid)
    report = {"rows": [dict(zip(("method", "high", "low", "seed", "acc_high", "acc_low"), r)) for r in rows],
              "per_class_counts": counts, "provenance": _provenance(cfg, started)}
    _write(out / "ablate.json", json.dumps(report, indent=2) + "\n")
    print(grid, end="")
    return EXIT_OK


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "high_per_class", "low_per_class", "seed", "acc_high", "acc_low"])
    for method, h, l, seed, ah, al in rows:
        w.writerow([method, h, l, seed, _fmt(ah), _fmt(al)])
    return buf.getvalue()


def ablation_grid(rows, counts) -> str:
    """Median low-res accuracy laid out like the data-size table: H rows, L columns, a Mixed row."""
    def med(method, h, l):
        vals = [r[5] for r in rows if r[0] == method and r[1] == h and r[2] == l]
        return _fmt(statistics.median(vals)) if vals else ""

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["-"] + [f"L_{c}" for c in counts])
    for h in counts:
        w.writerow([f"H_{h}"] + [med("staged-hl", h, l) for l in counts])
    w.writerow(["Mixed"] + [med("mixed", c, c) for c in counts])
    return buf.getvalue()


def cmd_train(cfg: RunConfig, args) -> int:
    out = _prepare_out(args.out)
    check_data_exists(cfg)
    data = load_data(cfg)
    seed = cfg["run.seeds"][0]
    plan = TrainPlan.for_strategy(cfg["train.strategy"], cfg.hyper, seed, cfg["train.pretrain"])
    try:
        result, model = run_strategy(plan, data.aux, data.train, data.test, cfg.res, _model_spec_for(cfg, data),
                                     seed, None, cfg.init_std)
    except (OSError, DatasetLoadError):
        raise
    except Exception as exc:
        log.error("training failed: %s", exc)
        return EXIT_RUNTIME
    out.mkdir(parents=True, exist_ok=True)
    save(model, out / "model.f2ck")
    summary = {"strategy": result.strategy, "seed": seed, "acc_high": result.accuracy_high,
               "acc_low": result.accuracy_low, "train": result.train_description,
               "loss_curves": result.loss_curves, "config": cfg.echo()}
    _write(out / "result.json", json.dumps(summary, indent=2) + "\n")
    print(f"acc_high={_fmt(result.accuracy_high)} acc_low={_fmt(result.accuracy_low)}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    check_data_exists(cfg)
    model = load(args.checkpoint)
    data = load_data(cfg)
    if model.spec.num_classes != data.test.num_classes:
        raise ConfigError(f"checkpoint has {model.spec.num_classes} classes, test set has {data.test.num_classes}")
    if model.spec.input_side != cfg.res.net_input:
        raise ConfigError(f"checkpoint input {model.spec.input_side} != --net-input {cfg.res.net_input}")
    acc_high, _ = evaluate(model, data.test, "native", cfg.res)
    acc_low, _ = evaluate(model, data.test, "degraded", cfg.res)
    print(f"acc_high={_fmt(acc_high)} acc_low={_fmt(acc_low)}")
    return EXIT_OK


def cmd_heatmap(cfg: RunConfig, args) -> int:
    for flag in ("baseline", "staged", "image"):
        if not getattr(args, flag):
            raise ConfigError(f"--{flag} is required")
    out = _prepare_out(args.out)
    occ = OcclusionConfig(cfg["heatmap.patch"], cfg["heatmap.stride"], cfg["heatmap.gray"])
    models = {"baseline": load(args.baseline), "staged": load(args.staged)}
    image = read_netpbm(args.image)
    for name, m in models.items():
        expected = (m.spec.input_channels, m.spec.input_side, m.spec.input_side)
        if image.shape != expected:
            raise ConfigError(f"{args.image}: image shape {image.shape} does not match {name} model input {expected}")
    ext = ".pgm" if image.shape[0] == 1 else ".ppm"
    for name, m in models.items():
        hm = occlusion_heatmap(m, image, occ)
        export_heatmap(hm, out / f"{name}_heatmap.pgm")
        export_image(apply_heatmap_filter(image, hm), out / f"{name}_filtered{ext}")
    print(f"wrote heat maps to {out}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
    "train": cmd_train,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
    common.add_argument("--net-input", type=int)
    common.add_argument("--target-low", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--data", help="dataset root written by 'generate' (default: synthesize in memory)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="f2c", description="fine-to-coarse staged training experiments")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="write synthetic train/test/aux trees")
    g.add_argument("--classes", type=int)
    g.add_argument("--samples-per-class", type=int)
    for name in ("compare", "ablate", "train"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--epochs", type=int, help="epochs for both stages")
        sp.add_argument("--pretrain-epochs", type=int)
        if name == "compare":
            sp.add_argument("--strategies", help=f"comma list from {ALL_STRATEGIES}")
            sp.add_argument("--jobs", type=int, help="parallel seed workers")
        if name == "ablate":
            sp.add_argument("--fractions", help="comma list of training-set fractions")
        if name == "train":
            sp.add_argument("--strategy")
    e = sub.add_parser("eval", parents=[common])
    e.add_argument("--checkpoint")
    h = sub.add_parser("heatmap", parents=[common])
    h.add_argument("--baseline", help="baseline checkpoint")
    h.add_argument("--staged", help="staged-training checkpoint")
    h.add_argument("--image", help="PGM/PPM image at the network input size")
    h.add_argument("--patch", type=int)
    h.add_argument("--stride", type=int)
    return p


def flag_overrides(args) -> Dict[str, str]:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in SCHEMA:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE with a known key")
        out[key] = value.strip()
    direct = {
        "net_input": "res.net_input",
        "target_low": "res.target_low",
        "classes": "synth.classes",
        "samples_per_class": "synth.samples_per_class",
        "pretrain_epochs": "train.pretrain_epochs",
        "strategies": "run.strategies",
        "jobs": "run.jobs",
        "fractions": "ablate.fractions",
        "strategy": "train.strategy",
        "patch": "heatmap.patch",
        "stride": "heatmap.stride",
        "data": "run.data",
    }
    for attr, key in direct.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = str(value)
    if getattr(args, "epochs", None) is not None:
        out["train.epochs_stage1"] = out["train.epochs_stage2"] = str(args.epochs)
    if args.seed:
        seeds = ",".join(str(s) for s in args.seed)
        if args.command == "generate":
            out["synth.seed"] = str(args.seed[0])
        out["run.seeds"] = seeds
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args.config, flag_overrides(args))
        return COMMANDS[args.command](cfg, args)
    except (CheckpointError, DatasetLoadError, NetpbmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # training or other runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
