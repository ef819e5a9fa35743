"""``vila`` command-line entry point.

Config precedence, lowest to highest: built-in defaults, ``--config`` JSON
file, ``--seed``, then ``section.key=value`` overrides.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .data import (BagFormatError, ConfigError, DatasetManifest, ProtocolError,
                   SynthConfig, atomic_write_bytes, generate_synthetic,
                   read_bag)
from .gradcheck import run_suite
from .model import ModelConfig, ViLaMIL
from .train import (METRICS, ExperimentReport, NumericalError, TrainConfig,
                    _one_run, format_table, run_experiment)

log = logging.getLogger("vila_mil")

COMMANDS = ("synth", "train", "experiment", "ablate", "sweep", "explain", "gradcheck")
SECTIONS = {"synth": SynthConfig, "model": ModelConfig, "train": TrainConfig}
SWEEP_AXES = {"N_p": ("model", "n_prototypes"), "M": ("model", "n_context"), "shots": ("train", "shots")}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(config_path, seed, overrides) -> dict[str, dict]:
    doc = {k: {} for k in SECTIONS}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError("--config", f"file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON: {exc}") from exc
        for key, val in loaded.items():
            if key not in SECTIONS:
                raise ConfigError(key, "unknown config section")
            doc[key].update(val)
    if seed is not None:
        for sec in SECTIONS:
            doc[sec]["seed"] = seed
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(item, "overrides must look like section.key=value")
        key, value = item.split("=", 1)
        sec, name = key.split(".", 1)
        if sec not in SECTIONS:
            raise ConfigError(key, "unknown config section")
        doc[sec][name] = _parse_value(value)
    return doc


def build(doc: dict, section: str):
    try:
        return SECTIONS[section].from_dict(doc[section])
    except TypeError as exc:
        raise ConfigError(section, str(exc)) from exc


def resolved_snapshot(doc: dict) -> dict:
    out = {}
    for sec in SECTIONS:
        try:
            obj = build(doc, sec)
        except ConfigError:
            out[sec] = doc[sec]
            continue
        d = dataclasses.asdict(obj)
        if "patches_low" in d:
            d["patches_low"] = list(d["patches_low"])
        out[sec] = d
    return out


def write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_json(path: Path, doc) -> None:
    write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_run_manifest(out: Path, command: str, doc: dict, outputs: list[str]) -> None:
    write_json(out / "run_manifest.json", {
        "command": command,
        "config": resolved_snapshot(doc),
        "master_seed": doc["train"].get("seed", 0) if command != "synth" else doc["synth"].get("seed", 0),
        "outputs": outputs,
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    })


def _load_manifest(path) -> DatasetManifest:
    if path is None:
        raise ConfigError("--dataset", "a dataset manifest is required")
    if not Path(path).exists():
        raise ConfigError("--dataset", f"manifest not found: {path}")
    return DatasetManifest.load_file(path)


def _model_config(doc, manifest: DatasetManifest) -> ModelConfig:
    doc["model"].setdefault("d", manifest.d)
    cfg = build(doc, "model")
    if cfg.d != manifest.d:
        raise ConfigError("model.d", f"model d={cfg.d} but dataset d={manifest.d}")
    return cfg


# ------------------------------------------------------------ commands

def cmd_synth(args, doc) -> int:
    cfg = build(doc, "synth")
    out = Path(args.out)
    write_run_manifest(out, "synth", doc, ["manifest.json", "bags/"])
    manifest = generate_synthetic(cfg, out)
    print(f"wrote {len(manifest.bags)} bags to {out} (oracle accuracy {manifest.extra['oracle_accuracy']})")
    return 0


def cmd_train(args, doc) -> int:
    manifest = _load_manifest(args.dataset)
    mcfg = _model_config(doc, manifest)
    tcfg = build(doc, "train")
    out = Path(args.out)
    write_run_manifest(out, "train", doc, ["params.json", "curve.csv", "report.json"])
    bags = manifest.load_all()
    rr, result, model = _one_run(manifest, bags, mcfg, tcfg, 0, return_model=True)
    model.save(out / "params.json")
    write_text(out / "curve.csv", result.curve_csv())
    report = ExperimentReport("ViLa-MIL", [rr])
    write_json(out / "report.json", {**report.to_json(), "params_sha256": model.checksum()})
    print(format_table([report]), end="")
    return 0


def _write_report(out: Path, stem: str, reports: list[ExperimentReport], pvalues=None) -> None:
    write_json(out / f"{stem}.json", {"reports": [r.to_json((pvalues or {}).get(r.name)) for r in reports]})
    write_text(out / f"{stem}.txt", format_table(reports, pvalues))
    lines = ["method," + ",".join(f"{m}_mean,{m}_std" for m in METRICS)
             + ("," + ",".join(f"p_{m}" for m in METRICS) if pvalues else "")]
    for rep in reports:
        s = rep.summary()
        row = [rep.name] + [repr(s[m][k]) for m in METRICS for k in ("mean", "std")]
        if pvalues:
            row += [repr(pvalues[rep.name][m]) for m in METRICS]
        lines.append(",".join(row))
    write_text(out / f"{stem}.csv", "\n".join(lines) + "\n")
    for rep in reports:
        for i, curve in enumerate(rep.curves):
            write_text(out / "curves" / f"{_slug(rep.name)}_run{i}.csv", curve.curve_csv())


def _slug(name: str) -> str:
    return "".join(c.lower() if c.isalnum() else "_" for c in name).strip("_")


def cmd_experiment(args, doc) -> int:
    manifest = _load_manifest(args.dataset)
    if args.runs is not None:
        doc["train"]["runs"] = args.runs
    mcfg = _model_config(doc, manifest)
    tcfg = build(doc, "train")
    out = Path(args.out)
    write_run_manifest(out, "experiment", doc, ["experiment.json", "experiment.txt", "experiment.csv", "curves/"])
    report = run_experiment(manifest, mcfg, tcfg)
    _write_report(out, "experiment", [report])
    print(format_table([report]), end="")
    return 0


def ablation_arms(base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    """Module, aggregator, fusion and similarity ablation grid (13 arms)."""
    r = lambda **kw: dataclasses.replace(base, **kw)
    full = r(aggregator="prototype_decoder", fusion="logit_summation", similarity="bag_level",
             text_decoder=True, alpha_low=base.alpha_low or 1.0, alpha_high=base.alpha_high or 1.0)
    no_td = dataclasses.replace(full, text_decoder=False)
    low = {"alpha_high": 0.0}
    high = {"alpha_low": 0.0}
    return [
        ("ABMIL + Low-scale", dataclasses.replace(no_td, aggregator="abmil", **low)),
        ("ABMIL + High-scale", dataclasses.replace(no_td, aggregator="abmil", **high)),
        ("Patch Decoder + Low-scale", dataclasses.replace(no_td, **low)),
        ("Patch Decoder + High-scale", dataclasses.replace(no_td, **high)),
        ("Patch Decoder + Dual-scale", no_td),
        ("ViLa-MIL", full),
        ("Mean Pooling", dataclasses.replace(full, aggregator="mean_pool")),
        ("Attention-based Pooling", dataclasses.replace(full, aggregator="attention_pool")),
        ("Self-attention-based Pooling", dataclasses.replace(full, aggregator="self_attention_pool")),
        ("Feature Summation", dataclasses.replace(full, fusion="feature_summation")),
        ("Instance-level + Max Pooling", dataclasses.replace(full, similarity="instance_max")),
        ("Instance-level + Top-K", dataclasses.replace(full, similarity="instance_topk")),
        ("Instance-level + Mean Pooling", dataclasses.replace(full, similarity="instance_mean")),
    ]


def cmd_ablate(args, doc) -> int:
    manifest = _load_manifest(args.dataset)
    if args.runs is not None:
        doc["train"]["runs"] = args.runs
    base = _model_config(doc, manifest)
    tcfg = build(doc, "train")
    out = Path(args.out)
    write_run_manifest(out, "ablate", doc, ["ablation.json", "ablation.txt", "ablation.csv", "curves/"])
    bags = manifest.load_all()
    reports = [run_experiment(manifest, cfg, tcfg, name=name, bags=bags) for name, cfg in ablation_arms(base)]
    full = next(r for r in reports if r.name == "ViLa-MIL")
    pvalues = {r.name: r.compare(full) for r in reports}
    _write_report(out, "ablation", reports, pvalues)
    print(format_table(reports, pvalues), end="")
    return 0


def cmd_sweep(args, doc) -> int:
    manifest = _load_manifest(args.dataset)
    if args.axis not in SWEEP_AXES:
        raise ConfigError("--axis", f"must be one of {tuple(SWEEP_AXES)}")
    if not args.values:
        raise ConfigError("--values", "at least one value is required")
    if args.runs is not None:
        doc["train"]["runs"] = args.runs
    section, key = SWEEP_AXES[args.axis]
    out = Path(args.out)
    write_run_manifest(out, "sweep", doc, ["sweep.csv", "sweep.txt"])
    bags = manifest.load_all()
    reports = []
    for v in args.values:
        doc[section][key] = v
        mcfg = _model_config(doc, manifest)
        tcfg = build(doc, "train")
        reports.append(run_experiment(manifest, mcfg, tcfg, name=f"{args.axis}={v}", bags=bags))
    lines = ["axis,value," + ",".join(f"{m}_mean,{m}_std" for m in METRICS)]
    for v, rep in zip(args.values, reports):
        s = rep.summary()
        lines.append(f"{args.axis},{v}," + ",".join(repr(s[m][k]) for m in METRICS for k in ("mean", "std")))
    write_text(out / "sweep.csv", "\n".join(lines) + "\n")
    write_text(out / "sweep.txt", format_table(reports))
    print(format_table(reports), end="")
    return 0


def cmd_explain(args, doc) -> int:
    if not args.params or not Path(args.params).exists():
        raise ConfigError("--params", f"params file not found: {args.params}")
    if not args.bag or not Path(args.bag).exists():
        raise ConfigError("--bag", f"bag file not found: {args.bag}")
    try:
        model = ViLaMIL.load(args.params)
    except (KeyError, json.JSONDecodeError) as exc:
        raise ConfigError("--params", f"malformed params file: {exc}") from exc
    bag = read_bag(args.bag)
    try:
        result = model.explain(bag)
    except ValueError as exc:
        raise ConfigError("--params", str(exc)) from exc
    text = json.dumps(result, indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        write_run_manifest(out, "explain", doc, ["explain.json"])
        write_text(out / "explain.json", text)
    print(text, end="")
    return 0


def cmd_gradcheck(args, doc) -> int:
    seed = doc["train"].get("seed", 0)
    report = run_suite(seed=seed)
    if args.out:
        out = Path(args.out)
        write_run_manifest(out, "gradcheck", doc, ["gradcheck.json"])
        write_json(out / "gradcheck.json", report)
    for group in ("ops", "parameter_groups"):
        for name, r in report[group].items():
            print(f"{'PASS' if r['passed'] else 'FAIL'}  {group[:-1]:<16} {name:<22} max rel err {r['max_rel_error']:.3e}")
    if not report["passed"]:
        print(f"gradient check failed: {', '.join(report['failed'])}")
        return 3
    print("gradient check passed")
    return 0


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "experiment": cmd_experiment, "ablate": cmd_ablate,
    "sweep": cmd_sweep, "explain": cmd_explain, "gradcheck": cmd_gradcheck,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vila", description="Dual-scale vision-language MIL on patch-feature bags.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("overrides", nargs="*", metavar="section.key=value")
    p.add_argument("--config", help="JSON config with optional synth/model/train sections")
    p.add_argument("--seed", type=int, help="master seed (applied to every section)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dataset", help="dataset manifest.json")
    p.add_argument("--runs", type=int, help="number of runs (overrides train.runs)")
    p.add_argument("--axis", help="sweep axis: N_p, M or shots")
    p.add_argument("--values", type=int, nargs="+", help="sweep values")
    p.add_argument("--params", help="params.json written by `vila train`")
    p.add_argument("--bag", help="bag file (.vlmb)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_intermixed_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("synth", "train", "experiment", "ablate", "sweep") and not args.out:
        print("error: --out is required", file=sys.stderr)
        return 2
    try:
        doc = resolve_config(args.config, args.seed, args.overrides)
        return HANDLERS[args.command](args, doc)
    except (ConfigError, ProtocolError, BagFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
