"""Command-line entry point: ``tfsep <subcommand> [--config run.json] [flags]``.

Every subcommand reads an optional JSON config; explicit flags win over it.
Config schema (all sections optional)::

    {
      "seed": 0,
      "preset": "micro",
      "model": {"D": 16, "H": 2, "L_layers": 2, "M": 2, "I": 2, ...},
      "train": {"lr": 0.001, "batch_size": 4, "max_epochs": 40, "max_minutes": 60, ...},
      "stft":  {"frame_len": 256, "hop_len": 128},
      "scene": {"M": 2, "I": 2, "clip_seconds": 2.0, ...},
      "counts": {"train": 128, "val": 16, "test": 16}
    }
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_model
from .model import (
    PRESETS,
    AttentionCapture,
    dump_attention,
    param_count_formula,
    preset,
    separate,
)
from .model import build as build_model
from .model import count_params as count_model_params
from .objective import improvements, report_header, report_line
from .signal import MultichannelWaveform, StftConfig, read_wav, write_wav
from .synth import DatasetManifest, SceneConfig, build_dataset
from .train import TrainConfig, Trainer

REFERENCE_COUNTS = {
    "dasformer-base": 2.2e6,
    "dasformer-plus": 6.4e6,
    "ablation-no-se": 1.4e6,
    "ablation-1x1-no-se": 1.3e6,
}


class CliError(Exception):
    pass


def _int_list(text: str) -> set[int]:
    try:
        return {int(v) for v in text.split(",") if v.strip()}
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must hold a JSON object")
    return cfg


def _seed(args, cfg) -> int:
    return int(args.seed if args.seed is not None else cfg.get("seed", 0))


def _model_config(args, cfg):
    name = getattr(args, "preset", None) or cfg.get("preset", "micro")
    return preset(name, **cfg.get("model", {}))


# --- subcommands ----------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    scene = dict(cfg.get("scene", {}))
    scene["seed"] = _seed(args, cfg)
    for flag, key in (("mics", "M"), ("speakers", "I"), ("clip_seconds", "clip_seconds"),
                      ("source_kind", "source_kind")):
        if getattr(args, flag) is not None:
            scene[key] = getattr(args, flag)
    counts = {"train": 100, "val": 16, "test": 16, **cfg.get("counts", {})}
    for split in counts:
        if getattr(args, split, None) is not None:
            counts[split] = getattr(args, split)
    manifest = build_dataset(SceneConfig.from_dict(scene), counts, args.out)
    print(f"wrote {len(manifest.records)} utterances to {args.out}")
    return 0


def cmd_train(args, cfg) -> int:
    manifest = DatasetManifest.load(args.data)
    overrides = {k: v for k, v in (("lr", args.lr), ("batch_size", args.batch_size),
                                   ("max_minutes", args.max_minutes), ("grad_accum", args.grad_accum))
                 if v is not None}
    if args.resume:
        trainer = Trainer.resume(args.resume, out_dir=args.out, **overrides)
        if args.epochs is not None:  # on resume, --epochs counts additional epochs
            trainer.cfg.max_epochs = trainer.epoch + args.epochs
    else:
        train = {**cfg.get("train", {}), **overrides, "seed": _seed(args, cfg)}
        if args.epochs is not None:
            train["max_epochs"] = args.epochs
        rec = manifest.records[0]
        model_cfg = preset(args.preset or cfg.get("preset", "micro"),
                           **{**cfg.get("model", {}), "M": rec["n_channels"], "I": rec["n_speakers"]})
        stft_cfg = StftConfig(**cfg["stft"]) if "stft" in cfg else StftConfig.from_ms(rec["sample_rate"])
        trainer = Trainer(model_cfg, TrainConfig.from_dict(train), stft_cfg, args.out)
    trainer.fit(manifest, epochs=args.epochs if args.resume else None,
                callback=lambda r: print(json.dumps(r), flush=True))
    best = max(trainer.history, key=lambda r: r["val_si_sdri"]) if trainer.history else None
    if best:
        print(f"best val SI-SDRi {best['val_si_sdri']:.2f} dB at epoch {best['epoch']}")
    return 0


def _load(path):
    store, model, meta = load_model(path)
    return store, model, StftConfig.from_dict(meta["stft"])


def cmd_separate(args, cfg) -> int:
    store, model, stft_cfg = _load(args.checkpoint)
    wave = read_wav(args.input)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, est in enumerate(separate(model, store, wave, stft_cfg)):
        path = out / f"{Path(args.input).stem}_est{i}.wav"
        write_wav(path, est)
        print(path)
    return 0


def cmd_eval(args, cfg) -> int:
    manifest = DatasetManifest.load(args.data)
    records = manifest.split(args.split)
    if not records:
        raise CliError(f"no {args.split!r} utterances in {args.data}")
    if (args.checkpoint is None) == (args.estimates is None):
        raise CliError("eval needs exactly one of --checkpoint or --estimates")
    model = None
    if args.checkpoint:
        store, model, stft_cfg = _load(args.checkpoint)
    lines = [report_header(records[0]["n_speakers"])]
    si, sd = [], []
    for rec in records:
        mixture, targets = manifest.load_example(rec)
        if model is not None:
            wave = MultichannelWaveform(mixture.astype(np.float64), rec["sample_rate"])
            est = np.concatenate([w.samples for w in separate(model, store, wave, stft_cfg)])
        else:
            est = np.concatenate([read_wav(Path(args.estimates) / Path(p).name).samples
                                  for p in rec["references"]])
        rep = improvements(est, targets, mixture[0])
        lines.append(report_line(rec["id"], rep))
        si.append(rep.si_sdri)
        sd.append(rep.sdri)
    text = "\n".join(lines) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"mean SI-SDRi {np.mean(si):.4f} dB, SDRi {np.mean(sd):.4f} dB over {len(si)} utterances",
          file=sys.stderr if not args.report else sys.stdout)
    return 0


def cmd_count_params(args, cfg) -> int:
    name = args.preset or cfg.get("preset", "micro")
    model_cfg = _model_config(args, cfg)
    store, _ = build_model(model_cfg, _seed(args, cfg))
    total = count_model_params(store)
    formula = param_count_formula(model_cfg)
    print(f"preset {name}: D={model_cfg.D} H={model_cfg.H} L={model_cfg.L_layers} M={model_cfg.M} "
          f"I={model_cfg.I} se={model_cfg.use_se} dw={model_cfg.dw_kind}")
    for key, n in count_model_params(store, by=args.by).items():
        print(f"  {key:32s} {n:>12,d}")
    print(f"total {total:,d} ({total / 1e6:.2f}M); closed form {sum(formula.values()):,d}")
    ref = REFERENCE_COUNTS.get(name)
    if ref and not cfg.get("model"):
        print(f"reference {ref / 1e6:.1f}M, deviation {100 * (total - ref) / ref:+.1f}%")
    return 0


def cmd_dump_attn(args, cfg) -> int:
    store, model, stft_cfg = _load(args.checkpoint)
    wave = read_wav(args.input)
    capture = AttentionCapture(layers=args.layers, heads=args.heads, slices=args.slices,
                               modules=set(args.modules.split(",")) if args.modules else None)
    separate(model, store, wave, stft_cfg, capture=capture)
    if not capture.records:
        raise CliError("no attention maps matched the requested layers/heads/slices")
    index = dump_attention(capture.records, args.out)
    worst = max(float(np.max(np.abs(r.matrix.sum(axis=1) - 1))) for r in capture.records)
    print(f"wrote {len(capture.records)} matrices to {args.out} (index {index.name}); "
          f"max |row sum - 1| = {worst:.2e}")
    return 0


def cmd_grad_check(args, cfg) -> int:
    from .checks import model_check, primitive_checks

    seed = _seed(args, cfg)
    ok = True
    for name, report in primitive_checks(seed):
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} {name:20s} max rel err {report.max_error:.3e} (tol {report.tolerance:.0e})")
        if not report.passed:
            print(report.summary())
        ok &= report.passed
    if not args.skip_model:
        report = model_check(seed, max_entries=args.max_entries)
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} {'micro-model':20s} max rel err {report.max_error:.3e} (tol {report.tolerance:.0e})")
        if getattr(args, "verbose", False) or not report.passed:
            print(report.summary())
        ok &= report.passed
    return 0 if ok else 1


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tfsep", description="Alternating-spectrogram speech separation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, help="random seed (default: config value or 0)")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        p.set_defaults(func=func, subparser=p)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic multichannel mixture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int)
    p.add_argument("--val", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--mics", type=int)
    p.add_argument("--speakers", type=int)
    p.add_argument("--clip-seconds", type=float)
    p.add_argument("--source-kind", choices=["band-disjoint-noise", "multitone", "am-chirp"])

    p = add("train", cmd_train, "train a model on a generated dataset")
    p.add_argument("--data", required=True, help="dataset directory or manifest.jsonl")
    p.add_argument("--out", required=True, help="run directory for checkpoints and metrics.jsonl")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--epochs", type=int, help="epoch budget (with --resume: additional epochs)")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--grad-accum", type=int)
    p.add_argument("--max-minutes", type=float)
    p.add_argument("--resume", help="continue from a checkpoint written by a previous run")

    p = add("separate", cmd_separate, "separate one multichannel WAV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)

    p = add("eval", cmd_eval, "per-utterance SI-SDR/SDR improvement report")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint")
    p.add_argument("--estimates", help="directory holding <id>_s<i>.wav estimates")
    p.add_argument("--report", help="CSV output path (default: stdout)")

    p = add("count-params", cmd_count_params, "print trainable parameter counts")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--by", choices=["submodule", "module"], default="submodule")

    p = add("dump-attn", cmd_dump_attn, "export attention matrices for one input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=_int_list)
    p.add_argument("--heads", type=_int_list)
    p.add_argument("--slices", type=_int_list)
    p.add_argument("--modules", help="comma-separated subset of fsa,bta")

    p = add("grad-check", cmd_grad_check, "finite-difference check of every backward rule")
    p.add_argument("--max-entries", type=int, help="probe at most this many entries per model tensor")
    p.add_argument("--skip-model", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra:
        args.subparser.error(f"unrecognized arguments: {' '.join(extra)}")
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args, load_config(args.config))
    except (CliError, ValueError, KeyError, OSError) as exc:
        print(f"tfsep {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
