"""Command-line entry point: ``hique <subcommand> ...``.

Exit codes: 0 success, 2 usage, 3 data validation, 4 runtime/divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import yaml

from . import __version__
from .errors import DataValidationError, HiqueRuntimeError

log = logging.getLogger("hique")

SEED_ENV = "HIQUE_SEED"
EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4


class UsageError(Exception):
    pass


_ARGV: list[str] = []  # arguments of the current invocation, recorded in manifests
_NON_SEMANTIC_FLAGS = {"--force", "--verbose", "-v"}


# ---------------------------------------------------------------------------
# helpers


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise DataValidationError(f"config file {path} is not valid YAML/JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise DataValidationError(f"config file {path} must hold a mapping")
    return cfg


def _resolve_seed(args, cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in cfg:
        return int(cfg["seed"])
    return int(os.environ.get(SEED_ENV, "0"))


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def _manifest_paths(out: Path) -> tuple[Path, Path]:
    if out.is_dir() or not out.suffix:
        return out / "manifest.json", out / "timings.json"
    return out.with_name(out.name + ".manifest.json"), out.with_name(out.name + ".timings.json")


def _opt_path(p: Optional[str]) -> Optional[Path]:
    return Path(p) if p else None


def _portable(obj, base: Path):
    """Paths become POSIX strings relative to the manifest's directory."""
    if isinstance(obj, Path):
        return Path(os.path.relpath(obj.resolve(), base.resolve())).as_posix()
    if isinstance(obj, dict):
        return {k: _portable(v, base) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_portable(v, base) for v in obj]
    return obj


def write_manifest(command: str, out: Path, config: dict, seed: int, inputs: dict, outputs: dict, started: float) -> None:
    """Reproducibility record next to ``out``; wall-clock timings go to a sibling file."""
    manifest_path, timings_path = _manifest_paths(out)
    _dump_json(manifest_path, {
        "command": command,
        "argv": list(_ARGV),
        "artifact_version": __version__,
        "seed": seed,
        "config": config,
        "inputs": _portable(inputs, manifest_path.parent),
        "outputs": _portable(outputs, manifest_path.parent),
    })
    _dump_json(timings_path, {"command": command, "wall_clock_seconds": round(time.time() - started, 3)})


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _model_train_configs(cfg: dict, seed: int):
    from .model import ModelConfig
    from .training import TrainConfig

    mc = ModelConfig.from_dict(cfg.get("model", {}))
    train_cfg = dict(cfg.get("train", {}))
    train_cfg["seed"] = seed
    if "dropout_rate" in train_cfg:
        mc.dropout_rate = float(train_cfg.pop("dropout_rate"))
        mc.validate()
    return mc, TrainConfig.from_dict(train_cfg)


def _synthetic_config(cfg: dict, seed: int, args=None):
    from .features import SyntheticConfig

    syn = dict(cfg.get("synthetic", {}))
    if args is not None:
        for key in ("n_depressed", "n_normal", "signal_strength", "signal_slots", "signal_parents"):
            value = getattr(args, key, None)
            if value is not None:
                syn[key] = value
    syn["seed"] = seed
    for key in ("signal_slots", "signal_parents"):
        if key in syn:
            syn[key] = tuple(int(v) for v in syn[key])
    unknown = set(syn) - set(SyntheticConfig.__dataclass_fields__)
    if unknown:
        raise DataValidationError(f"unknown synthetic config keys: {sorted(unknown)}")
    return SyntheticConfig(**syn)


def _select(interviews, ids: Optional[list]):
    if ids is None:
        return list(interviews)
    by_id = {iv.participant_id: iv for iv in interviews}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DataValidationError(f"{len(missing)} participants from the checkpoint split are missing, e.g. {missing[:3]}")
    return [by_id[i] for i in ids]


def _eval_subset(interviews, ckpt: dict, split_name: str):
    if split_name == "all":
        return list(interviews)
    split = (ckpt.get("metadata") or {}).get("split")
    if not split:
        log.warning("checkpoint has no stored split; evaluating on all interviews")
        return list(interviews)
    return _select(interviews, split[split_name])


# ---------------------------------------------------------------------------
# commands


def cmd_synthesize(args) -> int:
    from .cache import save_corpus
    from .features import generate_synthetic_corpus

    started = time.time()
    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    syn = _synthetic_config(cfg, seed, args)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    corpus = generate_synthetic_corpus(syn)
    save_corpus(out, corpus)
    snapshot = asdict(syn)
    write_manifest("synthesize", out, {"synthetic": snapshot}, seed, {}, {"features_dir": Path(out), "n_interviews": len(corpus)}, started)
    print(f"wrote {len(corpus)} interviews to {out}")
    return 0


def cmd_structure(args) -> int:
    from .cache import read_labels
    from .encoders import get_encoder
    from .structuring import (
        QuestionMatcher, build_slot_layout, interview_to_dict, looks_like_question,
        read_transcript, structure_interview,
    )
    from .taxonomy import load_taxonomy

    started = time.time()
    seed = _resolve_seed(args, _load_config(args.config))
    taxonomy = load_taxonomy(args.taxonomy)
    matcher = QuestionMatcher(taxonomy, get_encoder(args.encoder), args.threshold) if args.allow_unseen else None
    labels = read_labels(args.labels) if args.labels else {}
    out = Path(args.out)
    _prepare_out_dir(out, args.force)

    files = []
    for t in args.transcripts:
        p = Path(t)
        files.extend(sorted(p.glob("*_TRANSCRIPT.csv")) + sorted(p.glob("*.jsonl")) if p.is_dir() else [p])
    if not files:
        raise DataValidationError("no transcripts found")

    failures = {}
    summary = []
    for path in files:
        pid = path.name.split("_")[0] if path.name.endswith("_TRANSCRIPT.csv") else path.stem
        interview = structure_interview(pid, read_transcript(path), taxonomy, labels.get(pid), matcher)
        layout = build_slot_layout(interview, taxonomy)
        record = interview_to_dict(interview, layout)
        unmatched_questions = [t.text for t in interview.unmatched if looks_like_question(t.text)]
        record["unmatched_questions"] = unmatched_questions
        _dump_json(out / f"{pid}.json", record)
        summary.append({"participant_id": pid, "segments": len(interview.segments), "occupied": int(layout.mask.sum())})
        if unmatched_questions and not args.allow_unseen:
            failures[pid] = unmatched_questions
    if args.allow_unseen:
        taxonomy.save(out / "taxonomy.tsv")

    write_manifest(
        "structure", out,
        {"allow_unseen": args.allow_unseen, "encoder": args.encoder, "threshold": matcher.threshold if matcher else None,
         "taxonomy": args.taxonomy or "builtin"},
        seed, {"transcripts": [Path(f) for f in files], "labels": _opt_path(args.labels)}, {"interviews": summary}, started,
    )
    for s in summary:
        print(f"{s['participant_id']}: {s['segments']} segments, {s['occupied']} slots occupied")
    if failures:
        for pid, qs in failures.items():
            print(f"{pid}: unmatched questions: {qs}", file=sys.stderr)
        print("re-run with --allow-unseen to map or append unseen questions", file=sys.stderr)
        return EXIT_DATA
    return 0


def _find(directory: Optional[str], pid: str, patterns: list[str]) -> Optional[Path]:
    if not directory:
        return None
    for pat in patterns:
        p = Path(directory) / pat.format(pid=pid)
        if p.exists():
            return p
    return None


def cmd_extract_features(args) -> int:
    from .cache import save_corpus
    from .encoders import get_encoder
    from .features import LandmarkTrack, embed_interview, get_acoustic_adapter, read_wav
    from .structuring import build_slot_layout, interview_from_dict
    from .taxonomy import load_taxonomy

    started = time.time()
    seed = _resolve_seed(args, _load_config(args.config))
    src = Path(args.structured)
    taxonomy_path = args.taxonomy or (str(src / "taxonomy.tsv") if (src / "taxonomy.tsv").exists() else None)
    taxonomy = load_taxonomy(taxonomy_path)
    encoder = get_encoder(args.text_encoder)
    adapter = get_acoustic_adapter(args.audio_adapter, seed) if args.audio_dir else None
    if not args.audio_dir:
        log.warning("no --audio-dir given; audio modality will be absent")
    if not args.landmarks_dir:
        log.warning("no --landmarks-dir given; visual modality will be absent")
    out = Path(args.out)
    _prepare_out_dir(out, args.force)

    files = sorted(p for p in src.glob("*.json") if p.name not in ("manifest.json", "timings.json"))
    if not files:
        raise DataValidationError(f"no structured interviews in {src}")
    embedded = []
    for path in files:
        interview = interview_from_dict(json.loads(path.read_text(encoding="utf-8")), taxonomy)
        pid = interview.participant_id
        layout = build_slot_layout(interview, taxonomy)
        wav = _find(args.audio_dir, pid, ["{pid}_AUDIO.wav", "{pid}.wav"])
        if args.audio_dir and wav is None:
            raise DataValidationError(f"no audio file for participant {pid} in {args.audio_dir}")
        lm = _find(args.landmarks_dir, pid, ["{pid}_CLNF_features.txt", "{pid}.txt", "{pid}.csv"])
        if args.landmarks_dir and lm is None:
            raise DataValidationError(f"no landmark file for participant {pid} in {args.landmarks_dir}")
        iv = embed_interview(
            interview, layout, encoder,
            acoustic=adapter,
            waveform=read_wav(wav) if wav else None,
            landmarks=LandmarkTrack.read_clnf(lm) if lm else None,
        )
        embedded.append(iv)
    save_corpus(out, embedded)
    written = [iv.participant_id for iv in embedded]
    write_manifest(
        "extract-features", out,
        {"text_encoder": args.text_encoder, "audio_adapter": args.audio_adapter if args.audio_dir else None},
        seed, {"structured": Path(src), "audio_dir": _opt_path(args.audio_dir), "landmarks_dir": _opt_path(args.landmarks_dir)},
        {"features_dir": Path(out), "participants": written}, started,
    )
    print(f"wrote features for {len(written)} interviews to {out}")
    return 0


def _train(cfg: dict, seed: int, features_dir: str, out: Path, command: str, started: float) -> dict:
    from .cache import load_corpus
    from .training import split_dataset, train

    mc, tc = _model_train_configs(cfg, seed)
    corpus = load_corpus(features_dir)
    split = split_dataset(corpus, seed, tc.split_sizes)
    result = train(mc, tc, split, out)
    best = result.history[result.best_epoch] if result.history else None
    write_manifest(
        command, out, {"model": mc.to_dict(), "train": tc.to_dict()}, seed,
        {"features_dir": Path(features_dir)},
        {"checkpoint": Path(out), "best_epoch": result.best_epoch,
         "best_val_macro_f1": best.val_macro_f1 if best else None,
         "split_sizes": {k: len(v) for k, v in split.ids().items()}},
        started,
    )
    return {"best_epoch": result.best_epoch}


def cmd_train(args) -> int:
    started = time.time()
    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    res = _train(cfg, seed, args.features_dir, Path(args.out), "train", started)
    print(f"saved checkpoint to {args.out} (best epoch {res['best_epoch']})")
    return 0


def _evaluate(checkpoint: str, features_dir: str, out: Path, split_name: str, seed: int, started: float) -> dict:
    from .cache import load_corpus
    from .training import evaluate_model, load_checkpoint

    model, ckpt = load_checkpoint(checkpoint)
    interviews = _eval_subset(load_corpus(features_dir), ckpt, split_name)
    loss, metrics = evaluate_model(model, interviews)
    payload = {"split": split_name, "n": len(interviews), "loss": loss, **metrics.to_dict()}
    _dump_json(out, payload)
    write_manifest("evaluate", out, {"split": split_name}, seed,
                   {"checkpoint": Path(checkpoint), "features_dir": Path(features_dir)}, {"metrics": Path(out)}, started)
    return payload


def cmd_evaluate(args) -> int:
    started = time.time()
    seed = _resolve_seed(args, _load_config(args.config))
    payload = _evaluate(args.checkpoint, args.features_dir, Path(args.out), args.split, seed, started)
    print(json.dumps({k: payload[k] for k in ("n", "macro_f1", "weighted_f1", "g_mean")}))
    return 0


def _report(checkpoint: str, features_dir: str, out: Path, split_name: str, plots: Optional[str], seed: int, started: float):
    from .cache import load_corpus
    from .evaluation import attention_report, plot_attention
    from .taxonomy import load_taxonomy
    from .training import load_checkpoint

    model, ckpt = load_checkpoint(checkpoint)
    interviews = _eval_subset(load_corpus(features_dir), ckpt, split_name)
    report = attention_report(model, interviews, load_taxonomy())
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    plot_files = [Path(p) for p in plot_attention(report, plots)] if plots else []
    write_manifest("report-attention", out, {"split": split_name}, seed,
                   {"checkpoint": Path(checkpoint), "features_dir": Path(features_dir)},
                   {"report": Path(out), "plots": plot_files}, started)
    return report


def cmd_report_attention(args) -> int:
    started = time.time()
    seed = _resolve_seed(args, _load_config(args.config))
    report = _report(args.checkpoint, args.features_dir, Path(args.out), args.split, args.plots, seed, started)
    for m in report.self_mass:
        print(f"{m}: top slots {report.top_slots(m)}")
    return 0


def cmd_ablate(args) -> int:
    from .cache import load_corpus
    from .evaluation import MODALITY_SETTINGS, COMPONENT_SETTINGS, AblationSetting, run_ablation, write_ablation_csv
    from .features import generate_synthetic_corpus
    from .training import split_dataset

    started = time.time()
    plan = _load_config(args.plan)
    cfg = {**_load_config(args.config), **plan}
    seed = _resolve_seed(args, cfg)
    presets = {"components": COMPONENT_SETTINGS, "modality": MODALITY_SETTINGS}
    raw = plan.get("settings", "components")
    if isinstance(raw, str):
        if raw not in presets:
            raise DataValidationError(f"unknown settings preset {raw!r}; choose from {sorted(presets)}")
        settings = list(presets[raw])
    else:
        try:
            settings = [AblationSetting.from_dict(s) for s in raw]
        except (TypeError, ValueError) as exc:
            raise DataValidationError(f"invalid ablation setting: {exc}") from None
    if plan.get("features_dir"):
        corpus = load_corpus(plan["features_dir"])
    else:
        corpus = generate_synthetic_corpus(_synthetic_config(cfg, seed))
    mc, tc = _model_train_configs(cfg, seed)
    split = split_dataset(corpus, seed, tc.split_sizes)
    rows = run_ablation(settings, split, mc, tc)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(rows, out)
    write_manifest("ablate", out, {"plan": plan, "model": mc.to_dict(), "train": tc.to_dict()}, seed,
                   {"plan": Path(args.plan)}, {"table": Path(out), "rows": len(rows)}, started)
    for r in rows:
        print(f"{r.setting.name:>12}: " + (f"macro F1 {r.metrics.macro_f1:.3f}" if r.metrics else f"FAILED {r.error}"))
    return 0


def cmd_map_question(args) -> int:
    from .encoders import get_encoder
    from .structuring import QuestionMatcher
    from .taxonomy import load_taxonomy

    taxonomy = load_taxonomy(args.taxonomy)
    matcher = QuestionMatcher(taxonomy, get_encoder(args.encoder), args.threshold)
    results = []
    for text in args.text:
        n_before = len(taxonomy)
        entry, sim = matcher.map(text)
        results.append({
            "query": text, "index": entry.index, "text": entry.text, "role": entry.role.value,
            "similarity": round(sim, 6), "appended": len(taxonomy) > n_before,
        })
    print(json.dumps({"threshold": round(matcher.threshold, 6), "results": results}, indent=2))
    if args.save_taxonomy:
        taxonomy.save(args.save_taxonomy)
    return 0


def cmd_pipeline(args) -> int:
    from .cache import save_corpus
    from .features import generate_synthetic_corpus

    cfg = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)

    started = time.time()
    if args.features_dir:
        features_dir = args.features_dir
    else:
        features_dir = out / "features"
        syn = _synthetic_config(cfg, seed)
        corpus = generate_synthetic_corpus(syn)
        save_corpus(features_dir, corpus)
        write_manifest("synthesize", features_dir, {"synthetic": asdict(syn)}, seed, {},
                       {"features_dir": Path(features_dir), "n_interviews": len(corpus)}, started)
    checkpoint = out / "model.pt"
    _train(cfg, seed, str(features_dir), checkpoint, "train", time.time())
    metrics = _evaluate(str(checkpoint), str(features_dir), out / "metrics.json", "test", seed, time.time())
    _report(str(checkpoint), str(features_dir), out / "attention.json", "test",
            str(out / "plots") if args.plots else None, seed, time.time())
    print(json.dumps({k: metrics[k] for k in ("n", "macro_f1", "weighted_f1", "g_mean")}))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"random seed (default: config, then ${SEED_ENV}, then 0)")
    common.add_argument("--config", default=None, help="YAML/JSON config file")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(prog="hique", description=__doc__, parents=[common],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"hique {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", parents=[common], help="write a synthetic feature corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-depressed", type=int, dest="n_depressed")
    p.add_argument("--n-normal", type=int, dest="n_normal")
    p.add_argument("--signal-strength", type=float, dest="signal_strength")
    p.add_argument("--signal-slots", type=int, nargs="+", dest="signal_slots")
    p.add_argument("--signal-parents", type=int, nargs="+", dest="signal_parents")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("structure", parents=[common], help="segment transcripts onto the question grid")
    p.add_argument("transcripts", nargs="+", help="transcript files (JSONL or DAIC-WOZ TSV) or directories")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", help="CSV with participant_id,label (or Participant_ID,PHQ8_Binary)")
    p.add_argument("--taxonomy", help="question list TSV (default: built-in)")
    p.add_argument("--allow-unseen", action="store_true", help="map or append questions not in the list")
    p.add_argument("--encoder", default="hashing", help="text encoder for unseen-question similarity")
    p.add_argument("--threshold", type=float, help="override the similarity threshold")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_structure)

    p = sub.add_parser("extract-features", parents=[common], help="build the per-slot feature cache")
    p.add_argument("--structured", required=True, help="output directory of 'structure'")
    p.add_argument("--out", required=True, help="features directory")
    p.add_argument("--text-encoder", default="hashing")
    p.add_argument("--audio-adapter", default="opensmile", choices=["opensmile", "synthetic", "none"])
    p.add_argument("--audio-dir")
    p.add_argument("--landmarks-dir")
    p.add_argument("--taxonomy")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train", parents=[common], help="train a model on a feature cache")
    p.add_argument("--features-dir", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "validation", "test", "all"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation sweep")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True, help="CSV table")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report-attention", parents=[common], help="per-question attention mass report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plots")
    p.add_argument("--split", default="test", choices=["train", "validation", "test", "all"])
    p.set_defaults(func=cmd_report_attention)

    p = sub.add_parser("map-question", parents=[common], help="map free-form questions onto the question list")
    p.add_argument("text", nargs="+")
    p.add_argument("--encoder", default="hashing")
    p.add_argument("--taxonomy")
    p.add_argument("--threshold", type=float)
    p.add_argument("--save-taxonomy")
    p.set_defaults(func=cmd_map_question)

    p = sub.add_parser("pipeline", parents=[common], help="synthesize/ingest -> train -> evaluate -> report")
    p.add_argument("--out", required=True)
    p.add_argument("--features-dir", help="use an existing feature cache instead of synthesizing")
    p.add_argument("--plots", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    _ARGV[:] = [a for a in argv if a not in _NON_SEMANTIC_FLAGS]
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with 2
    except DataValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (HiqueRuntimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
