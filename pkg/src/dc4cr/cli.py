"""Command-line entry point: ``dc4cr <command> [options]``.

Commands: dataset, group, train, remove, eval, sweep, replay.

Every command that produces artifacts also writes a ``run.json`` provenance
record holding the fully resolved parameters. ``dc4cr replay run.json``
executes the same command again from that record.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Errors are reported
as a single ``dc4cr: error: <kind>: <reason>`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence


from . import __version__
from .diffusion import (
    ENABLE_FLAGS,
    DiffusionSchedule,
    SampleConfig,
    TrainConfig,
    Trainer,
    evaluate,
    remove_clouds,
)
from .grouping import group_corpus, make_stage_plan, write_group_report
from .imagery import load_image, save_image
from .net import FreeUParams, checkpoint_extra, load_checkpoint, parse_prompt, save_checkpoint
from .synthcloud import gen_corpus, read_manifest, write_manifest

log = logging.getLogger("dc4cr")

SWEEP_PARAMS = ("alpha", "scale", "strength", "freeu")
SAMPLE_KEYS = ("prompt", "scale", "strength", "freeu", "alpha", "steps", "seed", "batch")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


class UsageError(Exception):
    """Bad invocation; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------ helpers


def _prompt_arg(text: str) -> str:
    try:
        return parse_prompt(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _freeu_arg(text: str) -> tuple:
    try:
        return FreeUParams.parse(text).as_tuple()
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _enable_arg(text: str) -> list:
    if text.strip().lower() == "none":
        return []
    flags = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in flags if f not in ENABLE_FLAGS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown enable flag(s) {bad}; valid: {', '.join(ENABLE_FLAGS)}")
    return flags


def _load_json_config(path: Optional[str], allowed: Sequence[str]) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise UsageError(f"config {path}: unknown keys {unknown}")
    return data


def _overrides(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _record(path, command: str, params: dict, results: Optional[dict] = None) -> None:
    _write_json(path, {"command": command, "params": params, "results": results or {}, "version": __version__})


def _sample_config(params: dict) -> SampleConfig:
    freeu = params.get("freeu")
    return SampleConfig(
        prompt=params.get("prompt"),
        scale=params.get("scale", 4.0),
        strength=params.get("strength", 1.1),
        freeu=FreeUParams(*freeu) if freeu is not None else None,
        alpha=params.get("alpha", 0.7),
        steps=params.get("steps"),
        seed=params.get("seed", 0),
        batch=params.get("batch", 16),
    )


def _resolved_sample(args, config: dict) -> dict:
    """Config-file values, then flags; every field made explicit."""
    merged = {**asdict(SampleConfig()), **config, **_overrides(args, SAMPLE_KEYS)}
    if merged["freeu"] is not None:
        merged["freeu"] = list(FreeUParams(*merged["freeu"]).as_tuple())
    if merged["prompt"] is not None:
        merged["prompt"] = parse_prompt(merged["prompt"])
    _sample_config(merged)  # validate ranges now, before any work
    return merged


def load_model(path):
    """Checkpoint plus the diffusion schedule it was trained with."""
    net = load_checkpoint(path)
    extra = checkpoint_extra(path)
    if "schedule" in extra:
        T, b0, b1 = extra["schedule"]
        return net, DiffusionSchedule(int(T), float(b0), float(b1))
    return net, DiffusionSchedule()


# ------------------------------------------------------------ commands


def run_dataset(p: dict) -> dict:
    m = gen_corpus(p["seed"], p["n"], p["size"], p["thin_fraction"], p["out"], force=p["force"])
    res = {"train": len(m.split("train")), "test": len(m.split("test")),
           "thin": sum(e.cloud_type == "thin" for e in m.entries)}
    print(f"wrote {len(m.entries)} pairs to {p['out']} (train {res['train']}, test {res['test']})")
    return res


def run_group(p: dict) -> dict:
    manifest = read_manifest(p["manifest"])
    annotated, result, (ids, mses, ssims) = group_corpus(
        manifest, p["k"], p["seed"], p["lambda1"], p["lambda2"]
    )
    write_manifest(annotated, p["out"])
    if p["report"]:
        write_group_report(p["report"], ids, mses, ssims, result.assignment)
    sizes = result.sizes()
    print("group sizes (easiest first): " + " ".join(str(s) for s in sizes))
    return {"sizes": sizes}


def run_train(p: dict) -> dict:
    cfg = TrainConfig(**p["config"])
    manifest = read_manifest(p["manifest"])
    k = p["stages"]
    plan = None
    if k > 1:
        groups = {e.group for e in manifest.split("train")}
        if None in groups:
            manifest, result, _ = group_corpus(manifest, k, cfg.seed)
        elif len(groups) != k:
            raise ValueError(f"manifest is grouped into {len(groups)} groups but --stages is {k}")
        sizes = [sum(e.group == g for e in manifest.split("train")) for g in range(1, k + 1)]
        plan = make_stage_plan(sizes, cfg.epochs)
    net = load_checkpoint(p["init"]) if p["init"] else None
    trainer = Trainer(manifest, cfg, p["enable"], net)
    trainer.run(plan)
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    extra = {"schedule": [cfg.T, trainer.schedule.beta_start, trainer.schedule.beta_end]}
    save_checkpoint(trainer.net, out / "model.ckpt", extra)
    trainer.write_history(out / "loss.csv")
    losses = [h["loss"] for h in trainer.history]
    res = {
        "steps": trainer.step_count,
        "final_loss": losses[-1] if losses else None,
        "plan": [[list(g), e] for g, e in plan.stages] if plan else [[[1], cfg.epochs]],
    }
    print(f"trained {trainer.step_count} steps; checkpoint {out / 'model.ckpt'}")
    return res


def run_remove(p: dict) -> dict:
    net, schedule = load_model(p["checkpoint"])
    cfg = _sample_config(p["sample"])
    if cfg.prompt is None:
        raise ValueError("remove needs a prompt (thin or thick)")
    out = remove_clouds(net, schedule, [load_image(p["input"])], cfg)[0]
    save_image(out, p["out"])
    print(f"wrote {p['out']}")
    return {}


def _eval_params(p: dict, cfg: SampleConfig):
    net, schedule = load_model(p["checkpoint"])
    manifest = read_manifest(p["manifest"])
    return evaluate(manifest, net, schedule, cfg, p["split"], cloud_type=p["cloud_type"])


def run_eval(p: dict) -> dict:
    report = _eval_params(p, _sample_config(p["sample"]))
    if p["out_csv"]:
        report.write_csv(p["out_csv"])
    if p["out_json"]:
        report.write_json(p["out_json"])
    summary = report.summary()
    print(json.dumps(summary, sort_keys=True))
    return summary


def run_sweep(p: dict) -> dict:
    net, schedule = load_model(p["checkpoint"])
    manifest = read_manifest(p["manifest"])
    rows = []
    for value in p["values"]:
        sample = dict(p["sample"])
        sample[p["param"]] = value
        rep = evaluate(manifest, net, schedule, _sample_config(sample), p["split"], cloud_type=p["cloud_type"])
        s = rep.summary()
        label = ",".join(repr(float(v)) for v in value) if p["param"] == "freeu" else repr(float(value))
        rows.append([label, s["psnr_mean"], s["ssim_mean"], s["pd_mean"]])
        print(f"{p['param']}={label} psnr={s['psnr_mean']:.4f} ssim={s['ssim_mean']:.4f} pd={s['pd_mean']:.4f}")
    with open(p["out"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "psnr_mean", "ssim_mean", "pd_mean"])
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    return {"rows": len(rows)}


RUNNERS = {
    "dataset": run_dataset,
    "group": run_group,
    "train": run_train,
    "remove": run_remove,
    "eval": run_eval,
    "sweep": run_sweep,
}


# ------------------------------------------------------------ argument parsing


def _add_sample_flags(sp, prompt_required=False):
    sp.add_argument("--prompt", type=_prompt_arg, required=prompt_required,
                    help="thin or thick (also accepts 'remove thin cloud')")
    sp.add_argument("--scale", type=float, help="guidance scale (default 4)")
    sp.add_argument("--strength", type=float, help="control strength (default 1.1)")
    sp.add_argument("--alpha", type=float, help="LoRA weight alpha (default 0.7)")
    sp.add_argument("--freeu", type=_freeu_arg, metavar="S1,S2,B1,B2",
                    help="FreeU parameters (default: the checkpoint's)")
    sp.add_argument("--steps", type=int, help="reverse-chain length (default: training T)")
    sp.add_argument("--seed", type=int, help="sampling seed (default 0)")
    sp.add_argument("--batch", type=int, help="images per sampling batch (default 16)")
    sp.add_argument("--config", help="JSON file with sampling settings")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dc4cr", description="Prompt-controlled diffusion cloud removal on CPU.")
    parser.add_argument("--version", action="version", version=f"dc4cr {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("dataset", help="generate a synthetic paired corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--thin-fraction", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    sp = sub.add_parser("group", help="score and cluster the train split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lambda1", type=float, default=1.0)
    sp.add_argument("--lambda2", type=float, default=1.0)
    sp.add_argument("--report", help="per-pair CSV (id, mse, one_minus_ssim, group)")
    sp.add_argument("--out", help="annotated manifest (default: manifest.grouped.jsonl beside the input)")

    sp = sub.add_parser("train", help="train a checkpoint")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="directory for model.ckpt, loss.csv and run.json")
    sp.add_argument("--config", help="JSON file with training settings")
    sp.add_argument("--stages", type=int, default=3, help="number of curriculum stages (1 = ungrouped)")
    sp.add_argument("--enable", type=_enable_arg, default=None,
                    help=f"comma list from {','.join(ENABLE_FLAGS)} or 'none' (default: all)")
    sp.add_argument("--init", help="start from this checkpoint instead of a fresh network")
    for key in ("epochs", "batch", "seed", "T", "max_steps", "lora_rank"):
        sp.add_argument("--" + key.replace("_", "-"), dest=key, type=int)
    for key in ("lr", "lambda1", "lambda2", "lambda3", "lora_alpha"):
        sp.add_argument("--" + key.replace("_", "-"), dest=key, type=float)

    sp = sub.add_parser("remove", help="remove clouds from one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    _add_sample_flags(sp, prompt_required=True)

    for name, text in (("eval", "score a checkpoint on a manifest split"),
                       ("sweep", "evaluate one checkpoint over a range of one sampling knob")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--split", choices=("train", "test"), default="test")
        sp.add_argument("--cloud-type", choices=("thin", "thick"))
        _add_sample_flags(sp)
        if name == "eval":
            sp.add_argument("--out-csv")
            sp.add_argument("--out-json")
        else:
            sp.add_argument("--param", required=True)
            sp.add_argument("--values", required=True, nargs="+")
            sp.add_argument("--out", required=True, help="CSV of value, psnr_mean, ssim_mean, pd_mean")

    sp = sub.add_parser("replay", help="rerun a command from its run.json")
    sp.add_argument("record")
    return parser


def resolve(args) -> tuple:
    """Turn parsed arguments into (command, params, run.json path or None)."""
    cmd = args.command
    if cmd == "dataset":
        p = {k: getattr(args, k) for k in ("out", "n", "size", "thin_fraction", "seed", "force")}
        return cmd, p, None
    if cmd == "group":
        out = args.out or str(Path(args.manifest).with_name("manifest.grouped.jsonl"))
        p = {k: getattr(args, k) for k in ("manifest", "k", "seed", "lambda1", "lambda2", "report")}
        p["out"] = out
        return cmd, p, Path(out).with_suffix(".run.json")
    if cmd == "train":
        config = _load_json_config(args.config, TRAIN_KEYS)
        try:
            train_cfg = TrainConfig(**{**config, **_overrides(args, TRAIN_KEYS)})
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from None
        enable = list(ENABLE_FLAGS) if args.enable is None else args.enable
        p = {
            "manifest": args.manifest, "out": args.out, "stages": args.stages, "enable": enable,
            "init": args.init, "config": train_cfg.to_json(),
        }
        p["config"].pop("lambda_sum")
        p["config"]["freeu"] = list(p["config"]["freeu"])
        p["config"]["channels"] = list(p["config"]["channels"])
        if args.stages < 1:
            raise UsageError("--stages must be >= 1")
        return cmd, p, Path(args.out) / "run.json"
    try:
        sample = _resolved_sample(args, _load_json_config(args.config, SAMPLE_KEYS))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if cmd == "remove":
        p = {"checkpoint": args.checkpoint, "input": args.input, "out": args.out, "sample": sample}
        return cmd, p, Path(args.out + ".run.json")
    p = {"checkpoint": args.checkpoint, "manifest": args.manifest, "split": args.split,
         "cloud_type": args.cloud_type, "sample": sample}
    if cmd == "eval":
        p.update(out_csv=args.out_csv, out_json=args.out_json)
        target = args.out_json or args.out_csv
        return cmd, p, Path(target + ".run.json") if target else None
    if args.param not in SWEEP_PARAMS:
        raise UsageError(f"unknown sweep param {args.param!r}; valid: {', '.join(SWEEP_PARAMS)}")
    try:
        values = [_freeu_arg(v) if args.param == "freeu" else float(v) for v in args.values]
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"bad --values: {exc}") from None
    p.update(param=args.param, values=[list(v) if isinstance(v, tuple) else v for v in values], out=args.out)
    return cmd, p, Path(args.out + ".run.json")


def execute(cmd: str, params: dict, record: Optional[Path]) -> int:
    results = RUNNERS[cmd](params)
    if record is not None:
        _record(record, cmd, params, results)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        if args.command == "replay":
            data = json.loads(Path(args.record).read_text())
            if data.get("command") not in RUNNERS:
                raise UsageError(f"{args.record} is not a run record")
            return execute(data["command"], data["params"], Path(args.record))
        cmd, params, record = resolve(args)
        return execute(cmd, params, record)
    except UsageError as exc:
        print(f"dc4cr: error: usage: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - one-line report for every runtime failure
        reason = " ".join(str(exc).split()) or exc.__class__.__name__
        print(f"dc4cr: error: {exc.__class__.__name__}: {reason}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
