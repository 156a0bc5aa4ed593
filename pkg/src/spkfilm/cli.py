"""Command-line pipeline: ``spkfilm <subcommand> [options]``.

Subcommands:

    toy        write a small labelled synthetic WAV corpus
    mix        render target/interferer mixtures at fixed SIRs
    featurize  WAVs (plain or mixture manifest) to ATFM features
    embed      per-speaker ATEM embeddings from enrollment features
    train      train one model variant, write checkpoint and log
    eval       frame metrics of a checkpoint, grouped by SIR
    gradcheck  finite-difference check of the configured model
    report     merge result CSVs and average repeats

Common options are ``--config`` (flat ``key = value`` file), ``--seed`` and
``--outdir``. Exit status is 0 on success, 1 for usage or configuration
errors, 2 for data errors and 3 for a failed numerical check. Every output
directory receives ``runconfig.cfg`` and text artifacts start with the
resolved configuration as ``#`` comment lines.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .dsp import (
    FeatureMatrix,
    compute_mfcc,
    expand_context,
    load_wav,
    read_features,
    read_manifest,
    write_features,
)
from .embeddings import read_embedding_manifest, stats_embedding, write_embedding, write_embedding_manifest
from .errors import ConfigError, DataError, LabelError, NumericalCheckError, SpkFilmError
from .mixer import build_overlap_corpus, read_mix_manifest
from .model import build_model
from .nn import check_model, load_checkpoint, save_checkpoint
from .toy import ToyAudioConfig, synthesize_toy_audio
from .training import (
    LabeledFrameSet,
    evaluate,
    merge_results,
    metrics_row,
    read_results_csv,
    split_by_utterance,
    train,
    ResultsTable,
)

FEATURES_TSV = "features.tsv"
CONFIG_NAME = "runconfig.cfg"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# provenance


def provenance(cfg: RunConfig, command: str) -> str:
    return f"spkfilm {__version__} {command}\n" + cfg.to_text()


def _prepare_outdir(args, cfg: RunConfig) -> Path:
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(provenance(cfg, args.command))
    return out


def _stamp(path: Path, cfg: RunConfig, command: str) -> None:
    """Prefix a text artifact with the resolved configuration."""
    header = "".join(f"# {line}\n" for line in provenance(cfg, command).splitlines())
    path.write_text(header + path.read_text())


# --------------------------------------------------------------------------
# feature manifests


@dataclass
class FeatureEntry:
    utt_id: str
    speaker_id: str
    path: Path
    label_path: Path | None
    sir_db: float


def write_feature_manifest(path, entries: list[FeatureEntry]) -> None:
    base = Path(path).parent
    lines = []
    for e in entries:
        lab = _rel(e.label_path, base) if e.label_path is not None else "-"
        sir = "clean" if np.isnan(e.sir_db) else f"{e.sir_db:g}"
        lines.append("\t".join([e.utt_id, e.speaker_id, _rel(e.path, base), lab, sir]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_feature_manifest(path) -> list[FeatureEntry]:
    path = _existing(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 tab-separated columns")
        lab = None if cols[3] == "-" else path.parent / cols[3]
        sir = np.nan if cols[4] == "clean" else float(cols[4])
        out.append(FeatureEntry(cols[0], cols[1], path.parent / cols[2], lab, sir))
    return out


def _rel(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(Path(p).resolve())


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    return p


def read_labels(path) -> np.ndarray:
    text = _existing(path).read_text().split()
    try:
        return np.array([int(v) for v in text], dtype=np.int64)
    except ValueError as exc:
        raise LabelError(f"{path}: labels must be integers") from exc


def load_frames(manifests, speakers: list[str], context: int) -> LabeledFrameSet:
    """Context windows, labels, speaker indices and SIR tags for every listed utterance."""
    index = {s: i for i, s in enumerate(speakers)}
    sets = []
    uid = 0
    for m in manifests:
        for e in read_feature_manifest(m):
            if e.label_path is None:
                raise LabelError(f"{e.utt_id}: no label file")
            if e.speaker_id not in index:
                raise DataError(f"{e.utt_id}: speaker {e.speaker_id!r} has no embedding")
            feats = read_features(_existing(e.path))
            labels = read_labels(e.label_path)
            if labels.size != feats.num_frames:
                raise LabelError(f"{e.utt_id}: {labels.size} labels for {feats.num_frames} frames")
            win = expand_context(feats, context).windows
            n = labels.size
            sets.append(LabeledFrameSet(win, labels, np.full(n, index[e.speaker_id]), np.full(n, e.sir_db), np.full(n, uid)))
            uid += 1
    if not sets:
        raise DataError("no utterances in the given feature manifests")
    return LabeledFrameSet.concat(sets)


def _embedding_table(path, cfg: RunConfig, speakers_hint=None):
    """Embedding matrix ordered by speaker id, or a dummy table for unconditioned models."""
    if path is None:
        if cfg.fusion != "none":
            raise ConfigError(f"fusion {cfg.fusion!r} needs --embeddings")
        names = sorted(set(speakers_hint or []))
        return names, None
    table = read_embedding_manifest(_existing(path), expected_dim=cfg.embedding_dim)
    names = sorted(table)
    return names, np.stack([table[s].vector for s in names]).astype(np.float32)


def _speakers_in(manifests) -> list[str]:
    return sorted({e.speaker_id for m in manifests for e in read_feature_manifest(m)})


# --------------------------------------------------------------------------
# subcommands


def cmd_toy(args, cfg):
    out = _prepare_outdir(args, cfg)
    tc = ToyAudioConfig(n_speakers=args.speakers, n_classes=args.classes, sample_rate=cfg.sample_rate)
    manifests = synthesize_toy_audio(out, tc, seed=cfg.derived_seed("toy"))
    for m in manifests.values():
        _stamp(m, cfg, "toy")
    print(f"wrote {', '.join(str(p) for p in manifests.values())}")


def cmd_mix(args, cfg):
    out = _prepare_outdir(args, cfg)
    entries = build_overlap_corpus(_existing(args.manifest), cfg.sirs, seed=cfg.derived_seed("mix"), outdir=out)
    _stamp(out / "mixtures.tsv", cfg, "mix")
    print(f"wrote {len(entries)} mixtures to {out / 'mixtures.tsv'}")


def cmd_featurize(args, cfg):
    out = _prepare_outdir(args, cfg)
    mcfg = cfg.mfcc()
    utts = {u.utt_id: u for u in read_manifest(_existing(args.manifest))}
    jobs = []
    if args.mixtures:
        for e in read_mix_manifest(_existing(args.mixtures)):
            if e.target_utt not in utts:
                raise DataError(f"{e.mix_id}: target {e.target_utt!r} not in {args.manifest}")
            t = utts[e.target_utt]
            jobs.append((e.mix_id, t.speaker_id, e.path, t.label_path, e.sir_db))
    else:
        jobs = [(u.utt_id, u.speaker_id, u.path, u.label_path, np.nan) for u in utts.values()]
    (out / "feats").mkdir(exist_ok=True)
    entries = []
    for uid, spk, wav, lab, sir in jobs:
        feats = compute_mfcc(load_wav(_existing(wav), allow_float=True), mcfg)
        p = out / "feats" / f"{uid}.atfm"
        write_features(p, feats)
        entries.append(FeatureEntry(uid, spk, p, lab, sir))
    write_feature_manifest(out / FEATURES_TSV, entries)
    _stamp(out / FEATURES_TSV, cfg, "featurize")
    print(f"wrote {len(entries)} feature files to {out / FEATURES_TSV}")


def cmd_embed(args, cfg):
    out = _prepare_outdir(args, cfg)
    by_spk: dict[str, list[FeatureMatrix]] = {}
    for m in args.features:
        for e in read_feature_manifest(m):
            if np.isnan(e.sir_db):
                by_spk.setdefault(e.speaker_id, []).append(read_features(_existing(e.path)))
    if not by_spk:
        raise DataError("no clean enrollment utterances found")
    (out / "emb").mkdir(exist_ok=True)
    paths = {}
    seed = cfg.derived_seed("embed")
    for spk in sorted(by_spk):
        z = stats_embedding(by_spk[spk], cfg.embedding_dim, seed=seed, speaker_id=spk)
        paths[spk] = out / "emb" / f"{spk}.atem"
        write_embedding(paths[spk], z)
    write_embedding_manifest(out / "embeddings.tsv", paths)
    _stamp(out / "embeddings.tsv", cfg, "embed")
    print(f"wrote {len(paths)} embeddings to {out / 'embeddings.tsv'}")


def cmd_train(args, cfg):
    out = _prepare_outdir(args, cfg)
    speakers, table = _embedding_table(args.embeddings, cfg, _speakers_in(args.features))
    frames = load_frames(args.features, speakers, cfg.context)
    tr, cv = split_by_utterance(frames, cfg.cv_fraction, seed=cfg.derived_seed("split"))
    model = build_model(cfg.model(), cfg.conditioning(), seed=cfg.derived_seed("init"))
    log_path = out / "train_log.csv"
    result = train(
        model, tr, cv, table, cfg.schedule(), seed=cfg.derived_seed("shuffle"),
        log_fn=lambda r: print(f"epoch {r['epoch']} train {r['train_loss']:.4f} cv {r['cv_loss']:.4f} lr {r['lr']:g} {r['action']}"),
    )
    log_path.write_text(result.log_csv())
    _stamp(log_path, cfg, "train")
    save_checkpoint(out / "model.atck", model.state_dict(), provenance(cfg, "train"))
    print(f"wrote {out / 'model.atck'} (best cv loss {result.best_cv_loss:.4f})")


def _checkpoint_config(path, overrides) -> tuple[RunConfig, dict]:
    tensors, text = load_checkpoint(_existing(path))
    if text is None:
        raise DataError(f"{path}: checkpoint carries no run configuration")
    body = "\n".join(text.splitlines()[1:])
    from .config import parse_config_text

    values = parse_config_text(body, str(path))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return load_config(None, values), tensors


def cmd_eval(args, cfg_unused):
    cfg, tensors = _checkpoint_config(args.checkpoint, {"variant": args.variant, "run_index": args.run_index})
    out = _prepare_outdir(args, cfg)
    model = build_model(cfg.model(), cfg.conditioning(), seed=0)
    model.load_state_dict(tensors)
    tests = {}
    for spec in args.test:
        name, sep, path = spec.partition("=")
        if not sep:
            raise UsageError(f"--test expects name=path, got {spec!r}")
        tests[name] = path
    speakers, table = _embedding_table(args.embeddings, cfg, _speakers_in(tests.values()))
    metrics = {name: evaluate(model, load_frames([p], speakers, cfg.context), table) for name, p in tests.items()}
    row = metrics_row(metrics)
    res = ResultsTable({f"{cfg.variant}/run{cfg.run_index}": row})
    path = out / "results.csv"
    path.write_text(res.to_csv(provenance(cfg, "eval")))
    for name, groups in metrics.items():
        for cond, m in groups.items():
            print(f"{name:<12} {cond:<8} acc {100 * m.accuracy:6.2f}  ce {m.cross_entropy:.4f}  frames {m.frames}")
    print(f"wrote {path}")


def cmd_gradcheck(args, cfg):
    model = build_model(cfg.model(), cfg.conditioning(), seed=cfg.derived_seed("init"), dtype=np.float64)
    rng = np.random.default_rng(cfg.derived_seed("gradcheck"))
    if model.generator is not None:
        # move off the identity start so the conditioning path carries gradient
        w = model.generator.fc2.params["weight"]
        w[:] = rng.standard_normal(w.shape) * (0.5 / np.sqrt(w.shape[1]))
    shape = cfg.model().input_shape[1:]
    x = rng.standard_normal((2,) + shape)
    z = rng.standard_normal((2, cfg.embedding_dim))
    labels = rng.integers(0, cfg.num_classes, 2)
    result = check_model(model, x, z, labels, samples_per_tensor=args.samples, seed=cfg.derived_seed("gradcheck"))
    print(f"max relative error {result.max_error:.3e} at {result.where} ({result.checked} checked, {result.skipped} skipped)")
    if not result.max_error < args.tol:
        raise NumericalCheckError(f"gradient check failed: {result.max_error:.3e} >= {args.tol:g}")


def cmd_report(args, cfg):
    out = _prepare_outdir(args, cfg)
    tables = [read_results_csv(_existing(p)) for p in args.results]
    merged = merge_results(tables)
    path = out / "summary.csv"
    path.write_text(merged.to_csv(provenance(cfg, "report")))
    cols = ["sir_0", "sir_5", "sir_10", "sir_15", "sir_20", "sir_25", "clean_dev", "clean_eval"]
    w = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
    w.writerow(["variant"] + cols)
    for name, row in merged.rows.items():
        if name.endswith("/mean"):
            w.writerow([name[:-5]] + [f"{row[c]:.2f}" if c in row else "" for c in cols])
    print(f"wrote {path}")


# --------------------------------------------------------------------------
# argument parsing

CONFIG_FLAGS = {
    "conditioning": "fusion", "at_blocks": "at_blocks", "scale_mode": "scale_mode", "bias_mode": "bias_mode",
    "context": "context", "num_classes": "num_classes", "embedding_dim": "embedding_dim",
    "stage_channels": "stage_channels", "generator_hidden": "generator_hidden", "lr": "initial_lr",
    "batch_size": "batch_size", "max_epochs": "max_epochs", "variant": "variant", "run_index": "run_index",
    "sirs": "sirs", "seed": "seed",
}


def _common(p, model_flags=False):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", help="master seed")
    p.add_argument("--outdir", required=True, help="output directory")
    if model_flags:
        p.add_argument("--conditioning", choices=["none", "affine", "input_bias", "middle_fusion"])
        p.add_argument("--at-blocks", help="comma-separated stages for affine conditioning")
        p.add_argument("--scale-mode", choices=["free", "frozen_one", "sigmoid", "tanh"])
        p.add_argument("--bias-mode", choices=["free", "frozen_zero"])
        p.add_argument("--context")
        p.add_argument("--num-classes")
        p.add_argument("--embedding-dim")
        p.add_argument("--stage-channels")
        p.add_argument("--generator-hidden")
        p.add_argument("--lr")
        p.add_argument("--batch-size")
        p.add_argument("--max-epochs")
        p.add_argument("--variant")
        p.add_argument("--run-index")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spkfilm", description="Speaker-conditioned acoustic model pipeline.")
    parser.add_argument("--version", action="version", version=f"spkfilm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("toy", help="write a synthetic labelled WAV corpus")
    _common(p)
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--classes", type=int, default=6)

    p = sub.add_parser("mix", help="mix utterances with interferers at fixed SIRs")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sirs", help="comma-separated SIRs in dB")

    p = sub.add_parser("featurize", help="compute MFCC features")
    _common(p)
    p.add_argument("--manifest", required=True, help="utterance manifest (targets when --mixtures is given)")
    p.add_argument("--mixtures", help="mixture manifest written by 'mix'")

    p = sub.add_parser("embed", help="speaker embeddings from clean enrollment features")
    _common(p)
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--embedding-dim")

    p = sub.add_parser("train", help="train one model variant")
    _common(p, model_flags=True)
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--embeddings")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", help="ignored; the checkpoint carries its configuration")
    p.add_argument("--seed", help="ignored; evaluation is deterministic")
    p.add_argument("--outdir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", nargs="+", required=True, help="name=features.tsv pairs")
    p.add_argument("--embeddings")
    p.add_argument("--variant")
    p.add_argument("--run-index")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config")
    p.add_argument("--seed")
    p.add_argument("--outdir", help="unused; accepted for symmetry")
    for flag in ("--conditioning", "--at-blocks", "--scale-mode", "--bias-mode", "--context", "--num-classes",
                 "--embedding-dim", "--stage-channels", "--generator-hidden"):
        p.add_argument(flag)
    p.add_argument("--samples", type=int, default=3, help="coordinates per tensor")
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("report", help="merge result CSVs")
    _common(p)
    p.add_argument("--results", nargs="+", required=True)
    return parser


COMMANDS = {
    "toy": cmd_toy, "mix": cmd_mix, "featurize": cmd_featurize, "embed": cmd_embed, "train": cmd_train,
    "eval": cmd_eval, "gradcheck": cmd_gradcheck, "report": cmd_report,
}


def resolve_config(args) -> RunConfig:
    overrides = {key: getattr(args, flag) for flag, key in CONFIG_FLAGS.items() if hasattr(args, flag)}
    return load_config(getattr(args, "config", None), overrides)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = None if args.command == "eval" else resolve_config(args)
        COMMANDS[args.command](args, cfg)
        return 0
    except SpkFilmError as exc:
        print(f"spkfilm: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"spkfilm: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
