"""``loid`` command line: gen-synth, init-base, pretrain, merge, train, eval, domain-sim, experiment, replay.

Exit codes: 0 ok, 2 usage or config error, 3 data or artifact error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from .adapters import FormatError, MergeSpec, dare_merge, load_adapter, load_encoder, save_adapter, save_encoder
from .data import Interaction, SynthSpec, domain_similarity, load_reviews, split, write_synthetic
from .pipeline import (
    TrainConfig, evaluate, load_checkpoint, pretrain_source, run_transfer_experiment, save_checkpoint, text_encoder,
    train_target, write_log,
)
from .textenc import Vocab, build_vocab, init_encoder

log = logging.getLogger("loid")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out, args, config: dict, inputs: list, artifacts: list, started: float) -> Path:
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "config": config,
        "seed": args.seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "artifacts": [str(p) for p in artifacts],
        "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_s": round(time.time() - started, 3),
        "git": git_describe(),
    }
    path = Path(str(out) + ".manifest.json")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


# --- argument resolution --------------------------------------------------

def load_config(args) -> TrainConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config} is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    overrides = {"seed": args.seed, "k": getattr(args, "k", None), "lam": getattr(args, "lam", None),
                 "margin": getattr(args, "margin", None), "rank": getattr(args, "rank", None),
                 "p": getattr(args, "p", None), "eval_repeats": getattr(args, "repeats", None)}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "no_cl", False):
        raw["no_cl"] = True
    try:
        return TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}") from None


def read_data(path) -> list[Interaction]:
    try:
        data = load_reviews(path)
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None
    except ValueError as e:
        raise DataError(str(e)) from None
    if not data:
        raise DataError(f"{path}: no usable reviews")
    return data


def read_base(path):
    try:
        params = load_encoder(path)
        vocab = Vocab.load(str(path) + ".vocab")
    except FileNotFoundError as e:
        raise DataError(f"missing base artifact: {e.filename}") from None
    except (FormatError, ValueError) as e:
        raise DataError(str(e)) from None
    if len(vocab) != params.vocab_size:
        raise DataError(f"vocab size {len(vocab)} does not match encoder table {params.vocab_size}")
    return params, vocab


def write_base(params, vocab: Vocab, out) -> list[Path]:
    save_encoder(params, out)
    vocab.save(str(out) + ".vocab")
    return [Path(out), Path(str(out) + ".vocab")]


def split_data(data, config: TrainConfig):
    try:
        return split(data, config.split_seed)
    except ValueError as e:
        raise DataError(str(e)) from None


def comma_list(value: str | None) -> list[str]:
    return [v for v in (value or "").split(",") if v.strip()]


# --- commands -------------------------------------------------------------

def cmd_gen_synth(args, started):
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read synth config: {e}") from None
    raw["seed"] = args.seed
    try:
        spec = SynthSpec(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid synth config: {e}") from None
    paths = write_synthetic(args.out, spec)
    write_manifest(Path(args.out) / "run", args, asdict(spec), [], paths, started)
    for p in paths:
        print(p)


def cmd_init_base(args, started):
    config = load_config(args)
    paths = comma_list(args.data)
    texts = [x.text for p in paths for x in read_data(p)]
    vocab = build_vocab(texts)
    params = init_encoder(len(vocab), config.encoder, seed=config.seed)
    artifacts = write_base(params, vocab, args.out)
    write_manifest(args.out, args, config.to_dict(), paths, artifacts, started)
    print(f"base {args.out} vocab={len(vocab)} checksum={params.checksum()[:16]}")


def cmd_pretrain(args, started):
    config = load_config(args)
    data = read_data(args.data)
    inputs = [args.data]
    artifacts = []
    if args.base:
        base, vocab = read_base(args.base)
        inputs.append(args.base)
    else:
        vocab = build_vocab([x.text for x in data])
        base = init_encoder(len(vocab), config.encoder, seed=config.seed)
        artifacts += write_base(base, vocab, str(args.out) + ".base")
    train, val, _ = split_data(data, config)
    before = base.checksum()
    result = pretrain_source(train, base, vocab, config, val=val, label=Path(args.data).stem)
    if base.checksum() != before:
        raise RuntimeError("base encoder changed during pretraining")
    save_adapter(result.adapter, args.out)
    write_log(str(args.out) + ".log.csv", result.log)
    artifacts = [Path(args.out), Path(str(args.out) + ".log.csv")] + artifacts
    write_manifest(args.out, args, config.to_dict(), inputs, artifacts, started)
    print(f"adapter {args.out} steps={len(result.log)}")


def cmd_merge(args, started):
    if args.p is None or not 0.0 <= args.p < 1.0:
        raise ConfigError(f"--p must be in [0, 1), got {args.p}")
    base, vocab = read_base(args.base)
    paths = comma_list(args.adapters)
    try:
        adapters = [load_adapter(p) for p in paths]
    except FileNotFoundError as e:
        raise DataError(f"adapter not found: {e.filename}") from None
    except FormatError as e:
        raise DataError(str(e)) from None
    try:
        merged = dare_merge(base, MergeSpec(args.p, args.seed, adapters))
    except ValueError as e:
        raise DataError(str(e)) from None
    artifacts = write_base(merged, vocab, args.out)
    write_manifest(args.out, args, {"p": args.p, "adapters": paths}, [args.base] + paths, artifacts, started)
    print(f"merged {len(adapters)} adapter(s) into {args.out} checksum={merged.checksum()[:16]}")


def cmd_train(args, started):
    config = load_config(args)
    data = read_data(args.data)
    base, vocab = read_base(args.base)
    train, val, _ = split_data(data, config)
    before = base.checksum()
    model = train_target(data, train, base, vocab, config, val=val)
    if base.checksum() != before:
        raise RuntimeError("merged encoder changed during target training")
    save_checkpoint(model, args.out)
    write_log(str(args.out) + ".log.csv", model.log)
    artifacts = [Path(args.out), Path(str(args.out) + ".log.csv")]
    write_manifest(args.out, args, config.to_dict(), [args.data, args.base], artifacts, started)
    best = min((r["val_mse"] for r in model.log if r["val_mse"] != ""), default=float("nan"))
    print(f"checkpoint {args.out} steps={len(model.log)} best_val_mse={best:.6f}")


def cmd_eval(args, started):
    config = load_config(args)
    data = read_data(args.data)
    base, vocab = read_base(args.base)
    train, val, test = split_data(data, config)
    try:
        model = load_checkpoint(args.model, data, train, base, vocab, config)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {args.model}") from None
    except FormatError as e:
        raise DataError(str(e)) from None
    target = test if args.split == "test" else val
    result = evaluate(model, target, config.eval_repeats, seed=args.seed)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["repeat", "user", "item", "rating", "prediction"])
            for r in range(result.predictions.shape[0]):
                for x, pred in zip(target, result.predictions[r]):
                    w.writerow([r, x.user, x.item, repr(float(x.rating)), repr(float(pred))])
        write_manifest(args.out, args, config.to_dict(), [args.data, args.base, args.model], [args.out], started)
    print(f"mse {result.mean_mse!r}")
    print("per_repeat " + " ".join(repr(v) for v in result.per_repeat))
    print(f"mse_clamped {result.clamped_mse!r}")


def cmd_domain_sim(args, started):
    paths = comma_list(args.data)
    if len(paths) != 2:
        raise ConfigError("--data needs exactly two comma-separated domain files")
    a, b = (read_data(p) for p in paths)
    base, vocab = read_base(args.base)
    config = load_config(args)
    try:
        sim = domain_similarity(a, b, args.n, text_encoder(base, vocab, config.max_len), seed=args.seed)
    except ValueError as e:
        raise DataError(str(e)) from None
    print(f"similarity {sim:.4f} n={args.n}")


def cmd_experiment(args, started):
    config = load_config(args)
    target = read_data(args.data)
    sources = {Path(p).stem: read_data(p) for p in comma_list(args.sources)}
    report = run_transfer_experiment(sources, target, config, target_name=Path(args.data).stem,
                                     similarity_n=args.n)
    print(report.table())
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sources", "sim", "val_mse", "test_mse", "gain"])
            base = report.baseline.test_mse
            for r in report.rows:
                name = "&".join(r.sources)
                w.writerow([name or "-", report.similarity.get(name, ""), r.val_mse, r.test_mse,
                            (base - r.test_mse) / base])
        write_manifest(args.out, args, config.to_dict(), [args.data] + comma_list(args.sources), [args.out], started)


def cmd_replay(args, started):
    manifest = json.loads(Path(args.manifest).read_text())
    return main(manifest["argv"])


COMMANDS = {
    "gen-synth": cmd_gen_synth, "init-base": cmd_init_base, "pretrain": cmd_pretrain, "merge": cmd_merge,
    "train": cmd_train, "eval": cmd_eval, "domain-sim": cmd_domain_sim, "experiment": cmd_experiment,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, data_required=True):
        if data:
            p.add_argument("--data", required=data_required)
        p.add_argument("--config")
        p.add_argument("--seed", type=int, default=0)
        return p

    def hyper(p):
        p.add_argument("--k", type=int)
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--margin", type=float)
        p.add_argument("--rank", type=int)
        p.add_argument("--no-cl", action="store_true")
        p.add_argument("--repeats", type=int)
        return p

    p = common(sub.add_parser("gen-synth", help="write two synthetic review domains"), data=False)
    p.add_argument("--out", required=True)
    p = common(sub.add_parser("init-base", help="build vocab and a random base encoder"))
    p.add_argument("--out", required=True)
    p = hyper(common(sub.add_parser("pretrain", help="train a source-domain adapter")))
    p.add_argument("--base")
    p.add_argument("--out", required=True)
    p = common(sub.add_parser("merge", help="drop-and-rescale merge adapters into a base"), data=False)
    p.add_argument("--base", required=True)
    p.add_argument("--adapters", default="")
    p.add_argument("--p", type=float, default=0.9)
    p.add_argument("--out", required=True)
    p = hyper(common(sub.add_parser("train", help="train the target model")))
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p = hyper(common(sub.add_parser("eval", help="evaluate a target checkpoint")))
    p.add_argument("--base", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--out")
    p.set_defaults(repeats=None)
    p = common(sub.add_parser("domain-sim", help="cosine similarity of two domains"))
    p.add_argument("--base", required=True)
    p.add_argument("--n", type=int, default=100)
    p = hyper(common(sub.add_parser("experiment", help="full transfer experiment on a target domain")))
    p.add_argument("--sources", default="")
    p.add_argument("--p", type=float)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--out")
    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(seed=None)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    if args.command == "eval" and args.repeats is None:
        args.repeats = 5
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        result = COMMANDS[args.command](args, started)
    except ConfigError as e:
        print(f"loid {args.command}: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"loid {args.command}: {e}", file=sys.stderr)
        return 3
    return int(result or 0)


if __name__ == "__main__":
    sys.exit(main())
