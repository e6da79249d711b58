"""``multipose`` command line: data generation, training, quantization and evaluation.

Every subcommand reads one JSON config (sections ``data``, ``flow``, ``model``,
``mdn``, ``eval``, ``quantize``, ``paths``), applies ``--set section.key=value``
overrides and derives all seeds from ``--seed``.  Relative paths resolve
against ``--out-dir``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("multipose")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")
LOCK_NAME = ".multipose.lock"

EVAL_DEFAULTS = {"ns": [1, 5, 10, 25], "M": None, "split": "test", "uniform": False, "temperature": 1.0,
                 "restarts": 10, "scale": False, "model_file": None}
QUANTIZE_DEFAULTS = {"n": 5, "M": None, "split": "test", "indices": [0], "uniform": False,
                     "temperature": 1.0, "restarts": 10, "model_file": None}
PATH_DEFAULTS = {"dataset": "dataset.jsonl", "manifest": "manifest.json", "flow": "flow.ckpt",
                 "model": "model.ckpt", "mdn": "mdn.ckpt", "report": "report.csv", "plot": "report.svg",
                 "hypotheses": "hypotheses.json"}
TRAIN_SPLIT = "train"


def _configure_threads() -> None:
    n = os.environ.get("MULTIPOSE_THREADS")
    if n:
        for var in THREAD_VARS:
            os.environ[var] = n


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


# ---------------------------------------------------------------------------
# Config


def _dataclass_schema():
    from dataclasses import fields

    from . import baseline_mdn, data, flow, losses, regressor

    def names(cls, drop=("seed",)):
        return {f.name for f in fields(cls)} - set(drop)

    return {
        "data": (data.GenConfig, names(data.GenConfig), {"pose_distribution": names(data.PoseDistribution, ())}),
        "flow": (flow.FlowTrainConfig, names(flow.FlowTrainConfig), {}),
        "model": (regressor.RegressorConfig, names(regressor.RegressorConfig),
                  {"weights": names(losses.LossWeights, ())}),
        "mdn": (baseline_mdn.MDNConfig, names(baseline_mdn.MDNConfig), {"weights": names(losses.LossWeights, ())}),
    }


def _parse_override(item: str) -> tuple[list[str], object]:
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise _Fail(EXIT_CONFIG, f"--set expects section.key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Read the JSON config, apply overrides and reject unknown keys.

    Raises:
        _Fail: exit code 2 naming the offending key.
    """
    cfg: dict = {}
    if path:
        try:
            cfg = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise _Fail(EXIT_CONFIG, f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise _Fail(EXIT_CONFIG, f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise _Fail(EXIT_CONFIG, "config must be a JSON object")
    for item in overrides:
        keys, value = _parse_override(item)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise _Fail(EXIT_CONFIG, f"config key '{k}' is not a section")
        node[keys[-1]] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    schema = _dataclass_schema()
    flat = {"eval": set(EVAL_DEFAULTS), "quantize": set(QUANTIZE_DEFAULTS), "paths": set(PATH_DEFAULTS)}
    for section, body in cfg.items():
        if section not in schema and section not in flat:
            raise _Fail(EXIT_CONFIG, f"unknown config key '{section}'")
        if not isinstance(body, dict):
            raise _Fail(EXIT_CONFIG, f"config section '{section}' must be an object")
        allowed, nested = (schema[section][1], schema[section][2]) if section in schema else (flat[section], {})
        for key, value in body.items():
            if key not in allowed:
                raise _Fail(EXIT_CONFIG, f"unknown config key '{section}.{key}'")
            if key in nested and isinstance(value, dict):
                for sub in value:
                    if sub not in nested[key]:
                        raise _Fail(EXIT_CONFIG, f"unknown config key '{section}.{key}.{sub}'")


def _build(cfg: dict, section: str, seed: int):
    cls = _dataclass_schema()[section][0]
    try:
        return cls(**cfg.get(section, {}), seed=seed)
    except (TypeError, ValueError) as exc:
        raise _Fail(EXIT_CONFIG, f"invalid '{section}' config: {exc}") from None


def _section(cfg: dict, section: str, defaults: dict) -> dict:
    return {**defaults, **cfg.get(section, {})}


# ---------------------------------------------------------------------------
# Helpers


@contextlib.contextmanager
def out_dir_lock(out_dir: Path):
    """Exclusive lockfile so two invocations never write the same directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise _Fail(EXIT_CONFIG, f"{out_dir} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class Context:
    def __init__(self, args, cfg: dict):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out_dir)
        self.paths = _section(cfg, "paths", PATH_DEFAULTS)
        from .pipeline import derive_seeds

        # gen, mask, split, unused, flow, model, mdn, quantize
        self.seeds = derive_seeds(args.seed, 8)

    def path(self, key: str) -> Path:
        p = Path(self.paths[key])
        return p if p.is_absolute() else self.out / p

    def load_split(self, split: str):
        from . import data

        ds_path, man_path = self.path("dataset"), self.path("manifest")
        for p in (ds_path, man_path):
            if not p.exists():
                raise _Fail(EXIT_DATA, f"dataset file missing: {p}")
        ds = data.load(ds_path)
        manifest = json.loads(man_path.read_text())
        if split not in manifest["splits"]:
            raise _Fail(EXIT_CONFIG, f"unknown split '{split}'")
        idx = manifest["splits"][split]
        if len(ds) != manifest["count"]:
            raise _Fail(EXIT_DATA, f"{ds_path} has {len(ds)} records, manifest says {manifest['count']}")
        return ds.subset(idx)

    def require(self, key: str) -> Path:
        p = self.path(key)
        if not p.exists():
            raise _Fail(EXIT_DATA, f"checkpoint missing: {p}")
        return p


def _load_predictor(path: Path):
    from . import baseline_mdn, diffcore, regressor

    meta, _ = diffcore.load_checkpoint(path)
    if meta.get("kind") == "mdn":
        return baseline_mdn.load_mdn(path)[0].model
    return regressor.load_regressor(path)[0].model


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(ctx: Context) -> None:
    from . import data

    gen = _build(ctx.cfg, "data", ctx.seeds[0])
    ds = data.apply_ambiguity(data.generate(gen), ctx.seeds[1], gen.crop_padding)
    data.save(ds, ctx.path("dataset"))
    manifest = data.write_manifest(ctx.path("manifest"), gen, ds, ctx.seeds[2], ctx.paths["dataset"],
                                   ctx.seeds[1])
    log.info("wrote %d records (%s)", len(ds), {k: len(v) for k, v in manifest["splits"].items()})


def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,term,value\n")
        for rec in history:
            for k, v in rec.items():
                if k != "epoch":
                    fh.write(f"{rec['epoch']},{k},{float(v)!r}\n")


def cmd_train_flow(ctx: Context) -> None:
    from dataclasses import replace

    from . import flow

    cfg = _build(ctx.cfg, "flow", ctx.seeds[4])
    train = ctx.load_split(TRAIN_SPLIT)
    model = adam = None
    history, done = [], 0
    if ctx.args.resume and ctx.path("flow").exists():
        model, adam, meta = flow.load_flow(ctx.path("flow"))
        history, done = meta["extra"].get("history", []), meta["extra"].get("epochs_done", 0)
    res = flow.train_flow(flow.pose_vectors(train.X), replace(cfg, epochs=max(0, cfg.epochs - done)),
                          model=model, adam=adam)
    for rec in res.history:
        rec["epoch"] += done
    history = history + res.history
    flow.save_flow(ctx.path("flow"), res.model, res.adam,
                   {"history": history, "epochs_done": done + len(res.history)})
    _write_history(ctx.out / "flow_loss.csv", history)
    log.info("flow holdout NLL %.4f -> %.4f", res.initial_holdout_nll, res.final_holdout_nll)


def cmd_train_model(ctx: Context) -> None:
    from dataclasses import replace

    from . import losses, regressor

    cfg = _build(ctx.cfg, "model", ctx.seeds[5])
    if ctx.args.no_mode_reproj:
        cfg = replace(cfg, reproj_all=False)
    train = ctx.load_split(TRAIN_SPLIT)
    resume = None
    ckpt = ctx.path("model")
    if ctx.args.resume and ckpt.exists():
        resume = regressor.load_regressor(ckpt)[0]
    with losses.LossCurveWriter(ctx.out / "model_loss.csv", append=resume is not None) as curve:
        res = regressor.train(train, cfg, resume=resume, curve=curve)
    regressor.save_regressor(ckpt, res, cfg)
    log.info("trained %d epochs, %d steps", res.epochs_done, res.adam.step)


def cmd_train_mdn(ctx: Context) -> None:
    from . import baseline_mdn, losses

    cfg = _build(ctx.cfg, "mdn", ctx.seeds[6])
    train = ctx.load_split(TRAIN_SPLIT)
    resume = None
    ckpt = ctx.path("mdn")
    if ctx.args.resume and ckpt.exists():
        resume = baseline_mdn.load_mdn(ckpt)[0]
    with losses.LossCurveWriter(ctx.out / "mdn_loss.csv", append=resume is not None) as curve:
        res = baseline_mdn.train_mdn(train, cfg, resume=resume, curve=curve)
    baseline_mdn.save_mdn(ckpt, res, cfg)
    log.info("trained MDN %d epochs, %d steps", res.epochs_done, res.adam.step)


def _flow_or_none(ctx: Context, uniform: bool):
    from . import flow

    if uniform:
        return None
    return flow.load_flow(ctx.require("flow"))[0]


def cmd_quantize(ctx: Context) -> None:
    from . import quantizer

    q = _section(ctx.cfg, "quantize", QUANTIZE_DEFAULTS)
    uniform = bool(q["uniform"] or ctx.args.no_flow_weighting)
    model = _load_predictor(Path(q["model_file"]) if q["model_file"] else ctx.require("model"))
    fl = _flow_or_none(ctx, uniform)
    ds = ctx.load_split(q["split"])
    M = q["M"] or model.M
    out = []
    for i in q["indices"]:
        if not 0 <= i < len(ds):
            raise _Fail(EXIT_CONFIG, f"quantize index {i} outside split of size {len(ds)}")
        hyps = model.predict(ds.record(i).obs, M)
        wp = quantizer.weigh(hyps.joints, fl, q["temperature"], uniform)
        qs = quantizer.quantize(wp, q["n"], ctx.seeds[7], q["restarts"], record_trace=ctx.args.trace)
        order = quantizer.order_by_weight(qs)
        out.append({"index": i, "energy": qs.energy, "weights": qs.cluster_weight[order].tolist(),
                    "centers": qs.centers[order].tolist()})
        if ctx.args.trace:
            quantizer.write_trace(ctx.out / f"trace_{i}.csv", qs)
    ctx.path("hypotheses").write_text(json.dumps(out, separators=(",", ":")) + "\n")
    log.info("quantized %d observation(s) to n = %d", len(out), q["n"])


def cmd_evaluate(ctx: Context) -> None:
    from . import metrics

    e = _section(ctx.cfg, "eval", EVAL_DEFAULTS)
    uniform = bool(e["uniform"] or ctx.args.no_flow_weighting)
    model = _load_predictor(Path(e["model_file"]) if e["model_file"] else ctx.require("model"))
    fl = None if hasattr(model, "hypothesis_sets") else _flow_or_none(ctx, uniform)
    ds = ctx.load_split(e["split"])
    try:
        rows = metrics.evaluate(model, fl, ds, tuple(e["ns"]), e["M"], ctx.seeds[7], name=e["split"],
                                uniform=uniform, temperature=e["temperature"], restarts=e["restarts"],
                                scale=e["scale"])
    except ValueError as exc:
        if "exceed" in str(exc):
            raise _Fail(EXIT_CONFIG, str(exc)) from None
        raise
    metrics.write_report(ctx.path("report"), rows)
    metrics.plot_report(ctx.path("plot"), rows)
    print(f"{'n':>4} {'metric':>6} {'mean':>10} {'stderr':>10}")
    for r in rows:
        print(f"{r.n:>4} {r.metric:>6} {r.mean:>10.5f} {r.stderr:>10.5f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-flow": cmd_train_flow,
    "train-model": cmd_train_model,
    "train-mdn": cmd_train_mdn,
    "quantize": cmd_quantize,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed; every RNG derives from it")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out-dir", default=".", help="directory for all inputs and outputs")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config entry (value parsed as JSON when possible)")
    common.add_argument("--log-level", default="INFO")
    p = argparse.ArgumentParser(prog="multipose", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name.startswith("train-"):
            sp.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
        if name == "train-model":
            sp.add_argument("--no-mode-reproj", action="store_true",
                            help="drop the reprojection loss on non-selected hypotheses")
        if name in ("quantize", "evaluate"):
            sp.add_argument("--no-flow-weighting", action="store_true", help="uniform hypothesis weights")
        if name == "quantize":
            sp.add_argument("--trace", action="store_true", help="write per-iteration energies")
    return p


def main(argv: list[str] | None = None) -> int:
    _configure_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    from .errors import ConfigError, DataFormatError, NonFiniteError, SingularProjectionError

    try:
        cfg = load_config(args.config, args.set)
        ctx = Context(args, cfg)
        with out_dir_lock(ctx.out):
            COMMANDS[args.command](ctx)
    except _Fail as exc:
        log.error("%s", exc)
        return exc.code
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataFormatError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (NonFiniteError, SingularProjectionError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
