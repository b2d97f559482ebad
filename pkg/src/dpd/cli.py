"""Command-line entry point: ``dpd <subcommand> [--config FILE] [--seed N] [--out-dir DIR]``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import io
from .autodiff import NonFiniteError
from .evaluation import evaluate, noise_baseline
from .experiments import (
    RunConfig,
    TrainingCache,
    ablation_suite,
    baselines,
    prepare,
    pretrain_classifier,
    run_pipeline,
    sweep,
)
from .pipeline import NumericalError, config_hash, distill
from .prototype import PrototypePair
from .conditioning import Caption
from .data import generate_toy_dataset
from .reports import ablation_markdown, eval_markdown, ipc_markdown, sweep_markdown

log = logging.getLogger("dpd")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2

SUBCOMMANDS = (
    "gen-data",
    "train-classifier",
    "train-diffusion",
    "prototypes",
    "distill",
    "evaluate",
    "ablate",
    "sweep",
    "pipeline",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dpd", description="Prototype-guided diffusion dataset distillation on a toy harness.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="flat JSON run config")
        sp.add_argument("--seed", type=int, help="root seed (overrides config)")
        sp.add_argument("--out-dir", type=Path, default=Path("runs"), help="output directory")
        return sp

    add("gen-data", "generate the toy dataset")
    sp = add("train-classifier", "pretrain the frozen classifier")
    sp.add_argument("--data", type=Path)
    sp = add("train-diffusion", "train the conditional noise predictor")
    sp.add_argument("--data", type=Path)
    sp.add_argument("--classifier", type=Path)
    sp = add("prototypes", "select prototypes and aggregate their captions")
    sp.add_argument("--data", type=Path)
    sp = add("distill", "generate the distilled dataset")
    sp.add_argument("--data", type=Path)
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--prototypes", type=Path)
    sp = add("evaluate", "train classifiers on a distilled set and score on real test data")
    sp.add_argument("--data", type=Path)
    sp.add_argument("--distilled", type=Path)
    sp.add_argument("--baseline", choices=("full", "noise"), help="evaluate a reference set instead")
    add("ablate", "run the four ablation rows over paired seeds")
    sp = add("sweep", "sweep lambda, sampler_steps or ipc")
    sp.add_argument("--param", choices=("lambda", "sampler_steps", "ipc"))
    sp.add_argument("--values", help="comma-separated values")
    add("pipeline", "data, classifier, diffusion, prototypes, distillation, evaluation")
    return p


def load_config(args) -> RunConfig:
    d = {}
    if args.config is not None:
        try:
            d = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        return RunConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _dataset(cfg, args, out: Path):
    path = getattr(args, "data", None) or out / "dataset.dpds"
    if path.exists():
        return io.load_dataset(path, cfg.dataset_spec()), path
    if getattr(args, "data", None) is not None:
        raise UsageError(f"dataset not found: {path}")
    ds = generate_toy_dataset(cfg.dataset_spec())
    io.save_dataset(path, ds)
    return ds, path


def _workspace(cfg, args, out):
    ds, data_path = _dataset(cfg, args, out)
    clf_path = getattr(args, "classifier", None) or out / "classifier.dpds"
    if clf_path.exists():
        phi = io.load_params(clf_path)
    elif getattr(args, "classifier", None) is not None:
        raise UsageError(f"classifier checkpoint not found: {clf_path}")
    else:
        phi = pretrain_classifier(ds, cfg)
        io.save_params(clf_path, phi)
    return prepare(cfg, ds, phi), {"dataset": data_path, "classifier": clf_path}


def write_manifest(out: Path, command: str, cfg: RunConfig, inputs: dict, outputs: dict) -> None:
    """Everything needed to repeat the run: config, seeds, content hashes."""
    def hashes(d):
        return {k: {"path": str(p), "sha256": io.file_sha256(p)} for k, p in d.items() if Path(p).exists()}

    io.write_json(
        out / f"manifest-{command}.json",
        {
            "command": command,
            "config": cfg.to_dict(),
            "config_hash": config_hash(cfg.to_dict()),
            "seed": cfg.seed,
            "inputs": hashes(inputs),
            "outputs": hashes(outputs),
        },
    )


def _save_history(path: Path, history: dict | None):
    if history is not None:
        io.write_container(path, {"diffusion": history["diffusion"], "classification": history["classification"]})


def cmd_gen_data(cfg, args, out):
    ds = generate_toy_dataset(cfg.dataset_spec())
    path = out / "dataset.dpds"
    io.save_dataset(path, ds)
    return {}, {"dataset": path}


def cmd_train_classifier(cfg, args, out):
    ds, data_path = _dataset(cfg, args, out)
    phi = pretrain_classifier(ds, cfg)
    path = out / "classifier.dpds"
    io.save_params(path, phi)
    te = ds.test
    from .models import classifier_forward

    oa = float((classifier_forward(phi, te.images).argmax(1) == te.labels).mean() * 100)
    io.write_json(out / "classifier.json", {"test_oa": oa, "digest": phi.digest()})
    log.info("classifier test OA %.2f%%", oa)
    return {"dataset": data_path}, {"classifier": path}


def cmd_train_diffusion(cfg, args, out):
    ws, inputs = _workspace(cfg, args, out)
    cache = TrainingCache()
    tcfg = cfg.train_config()
    theta = cache.get(ws, tcfg)
    path = out / "theta.dpds"
    io.save_params(path, theta)
    _save_history(out / "history.dpds", cache.histories.get(cache.key(ws, tcfg)))
    (out / "vocab.json").write_text(ws.vocab.to_json() + "\n")
    return inputs, {"checkpoint": path, "history": out / "history.dpds", "vocab": out / "vocab.json"}


def _proto_manifest(ws, protos, cfg):
    return {
        "ipc": cfg.ipc,
        "seed": cfg.seed,
        "prototypes": [
            {
                "class": p.label,
                "class_name": ws.class_names[p.label],
                "cluster": p.cluster,
                "source_index": p.source_index,
                "caption": list(p.caption.tokens),
                "caption_words": ws.vocab.words(p.caption),
            }
            for p in protos
        ],
    }


def cmd_prototypes(cfg, args, out):
    ds, data_path = _dataset(cfg, args, out)
    ws = prepare(cfg, ds, phi=_unused_phi())
    protos = ws.prototypes(cfg.seed, cfg.ipc)
    path = out / "prototypes.json"
    io.write_json(path, _proto_manifest(ws, protos, cfg))
    (out / "vocab.json").write_text(ws.vocab.to_json() + "\n")
    return {"dataset": data_path}, {"prototypes": path, "vocab": out / "vocab.json"}


def _unused_phi():
    # prototype selection never touches the classifier
    from .autodiff import ParamTree

    return ParamTree({})


def _load_prototypes(path: Path, ws):
    man = io.read_json(path)
    try:
        return [
            PrototypePair(
                int(e["class"]),
                int(e["cluster"]),
                int(e["source_index"]),
                ws.latents[int(e["source_index"])].copy(),
                Caption(tuple(e["caption"])),
            )
            for e in man["prototypes"]
        ]
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed prototype manifest {path}: {exc}") from None


def cmd_distill(cfg, args, out):
    ws, inputs = _workspace(cfg, args, out)
    ckpt = args.checkpoint or out / "theta.dpds"
    theta = io.load_params(_need(ckpt, "checkpoint"))
    inputs["checkpoint"] = ckpt
    if args.prototypes is not None:
        protos = _load_prototypes(_need(args.prototypes, "prototype manifest"), ws)
        inputs["prototypes"] = args.prototypes
    else:
        protos = ws.prototypes(cfg.seed, cfg.ipc)
    dcfg = cfg.distill_config()
    ds = distill(theta, protos, ws.vocab, dcfg, cfg.train_config().schedule(), cfg.n_classes, ws.image_shape)
    path = out / "distilled.dpds"
    io.save_distilled(path, ds)
    io.write_json(out / "distilled.json", ds.manifest)
    return inputs, {"distilled": path, "distilled_manifest": out / "distilled.json"}


def cmd_evaluate(cfg, args, out):
    ds, data_path = _dataset(cfg, args, out)
    te, tr = ds.test, ds.train
    inputs = {"dataset": data_path}
    if args.baseline == "full":
        X, y, name, ipc = tr.images, tr.labels, "Full-data", None
    elif args.baseline == "noise":
        X, y = noise_baseline(cfg.n_classes, cfg.ipc, tr.images.shape[1:], seed=cfg.seed)
        name, ipc = "Noise", cfg.ipc
    else:
        path = _need(args.distilled or out / "distilled.dpds", "distilled dataset")
        dd = io.load_distilled(path)
        X, y, name, ipc = dd.images, dd.labels, "DPD", len(dd) // cfg.n_classes
        inputs["distilled"] = path
    rep = evaluate(X, y, te.images, te.labels, cfg.eval_config(), seed=cfg.seed, name=name, n_classes=cfg.n_classes, ipc=ipc, n_train_real=len(tr))
    io.write_json(out / "report.json", rep.to_dict())
    (out / "report.md").write_text(eval_markdown([rep]))
    log.info("%s OA %.2f%%", name, rep.oa_mean)
    return inputs, {"report": out / "report.json"}


def cmd_ablate(cfg, args, out):
    ws, inputs = _workspace(cfg, args, out)
    res = ablation_suite(ws, cache=TrainingCache(out / "cache"))
    base = baselines(ws)
    payload = {**res.to_dict(), "baselines": {k: v.to_dict() for k, v in base.items()}}
    io.write_json(out / "ablation.json", payload)
    (out / "ablation.md").write_text(ablation_markdown(res) + "\n" + eval_markdown(list(base.values())))
    return inputs, {"ablation": out / "ablation.json"}


def cmd_sweep(cfg, args, out):
    param = args.param or cfg.sweep_param
    values = cfg.sweep_values
    if args.values:
        try:
            values = tuple(float(v) if param == "lambda" else int(v) for v in args.values.split(","))
        except ValueError:
            raise UsageError(f"cannot parse --values {args.values!r} for {param}") from None
    ws, inputs = _workspace(cfg, args, out)
    res = sweep(ws, param, values or None, cache=TrainingCache(out / "cache"))
    io.write_json(out / f"sweep-{param}.json", res.to_dict())
    md = sweep_markdown(res)
    if param == "ipc":
        full = baselines(ws)["full"]
        noise = {v: baselines(ws, ipc=v, full=False)["noise"] for v in res.values}
        md += "\n" + ipc_markdown(res, cfg.n_classes, len(ws.dataset.train), full, noise)
    (out / f"sweep-{param}.md").write_text(md)
    return inputs, {"sweep": out / f"sweep-{param}.json"}


def cmd_pipeline(cfg, args, out):
    ws, inputs = _workspace(cfg, args, out)
    res = run_pipeline(ws)
    outputs = {
        "checkpoint": out / "theta.dpds",
        "distilled": out / "distilled.dpds",
        "prototypes": out / "prototypes.json",
        "vocab": out / "vocab.json",
        "report": out / "report.json",
    }
    io.save_params(outputs["checkpoint"], res.theta)
    _save_history(out / "history.dpds", res.history)
    io.save_distilled(outputs["distilled"], res.distilled)
    io.write_json(out / "distilled.json", res.distilled.manifest)
    io.write_json(outputs["prototypes"], _proto_manifest(ws, res.prototypes, cfg))
    outputs["vocab"].write_text(ws.vocab.to_json() + "\n")
    io.write_json(outputs["report"], res.report.to_dict())
    (out / "report.md").write_text(eval_markdown([res.report]))
    log.info("DPD OA %.2f%%", res.report.oa_mean)
    return inputs, outputs


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-classifier": cmd_train_classifier,
    "train-diffusion": cmd_train_diffusion,
    "prototypes": cmd_prototypes,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        out = args.out_dir
        out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        inputs, outputs = COMMANDS[args.command](cfg, args, out)
        write_manifest(out, args.command, cfg, inputs, outputs)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
        return EXIT_OK
    except UsageError as exc:
        print(f"dpd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, NonFiniteError, FloatingPointError) as exc:
        print(f"dpd: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, io.ContainerError, OSError) as exc:
        print(f"dpd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
