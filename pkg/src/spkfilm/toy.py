"""Synthetic multi-speaker frame corpus for desk-scale experiments.

Frames live in a log-magnitude domain: a frame of speaker ``s`` saying
class ``k`` is ``template[k] + signature[s] + noise``, so the speaker
signature acts like a spectral envelope. Overlap is simulated in the
linear-magnitude domain (``exp`` of the frames) at an utterance-level
signal-to-interference ratio and mapped back with ``log``. Because the
mixture is symmetric in its two sources, a model without speaker
information cannot tell which source carries the target label when both
are equally loud.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import expand_context
from .errors import InsufficientSpeakersError
from .mixer import DEFAULT_SIRS, mix_arrays
from .training import ExperimentData, LabeledFrameSet


@dataclass
class ToyConfig:
    n_speakers: int = 8
    n_classes: int = 10
    dim: int = 13
    frames_per_speaker: int = 2000
    frames_per_utt: int = 200
    dev_utts_per_speaker: int = 2
    eval_utts_per_speaker: int = 1
    context: int = 10
    embedding_dim: int = 512
    template_scale: float = 1.0
    template_kind: str = "gaussian"
    signature_scale: float = 1.0
    noise: float = 0.1
    min_segment: int = 5
    max_segment: int = 15
    sirs: tuple[float, ...] = DEFAULT_SIRS
    clean_train_fraction: float = 1.0 / 7.0
    cv_fraction: float = 0.1


@dataclass
class ToyCorpus:
    data: ExperimentData
    templates: np.ndarray
    signatures: np.ndarray
    config: ToyConfig = field(repr=False, default_factory=ToyConfig)


def _utterance(rng, cfg: ToyConfig, templates, signature):
    labels = np.empty(cfg.frames_per_utt, dtype=np.int64)
    pos = 0
    while pos < cfg.frames_per_utt:
        seg = int(rng.integers(cfg.min_segment, cfg.max_segment + 1))
        labels[pos : pos + seg] = rng.integers(cfg.n_classes)
        pos += seg
    frames = templates[labels] + signature + cfg.noise * rng.standard_normal((labels.size, cfg.dim))
    return frames, labels


def mix_frames(target: np.ndarray, interferer: np.ndarray, sir_db: float) -> tuple[np.ndarray, float]:
    """Mix two log-magnitude frame sequences at ``sir_db`` in the linear domain."""
    t_lin, i_lin = np.exp(target), np.exp(interferer)
    n = target.shape[0]
    reps = -(-n // interferer.shape[0])
    i_lin = np.tile(i_lin, (reps, 1))[:n]
    mix, g = mix_arrays(t_lin.reshape(-1), i_lin.reshape(-1), sir_db)
    return np.log(mix.reshape(target.shape)), g


def embedding_table(signatures: np.ndarray, dim: int) -> np.ndarray:
    """True speaker signatures, zero-padded to ``dim`` and length-normalized."""
    n, d = signatures.shape
    if dim < d:
        raise ValueError(f"embedding_dim {dim} is smaller than the signature size {d}")
    table = np.zeros((n, dim))
    table[:, :d] = signatures
    table /= np.linalg.norm(table, axis=1, keepdims=True)
    return table.astype(np.float32)


def make_toy_corpus(cfg: ToyConfig | None = None, seed: int = 0) -> ToyCorpus:
    cfg = cfg or ToyConfig()
    if cfg.n_speakers < 2:
        raise InsufficientSpeakersError("toy corpus needs at least 2 speakers")
    rng = np.random.default_rng(seed)
    if cfg.template_kind == "gaussian":
        templates = cfg.template_scale * rng.standard_normal((cfg.n_classes, cfg.dim))
    elif cfg.template_kind == "disjoint":
        if cfg.n_classes > cfg.dim:
            raise ValueError("disjoint templates need n_classes <= dim")
        templates = cfg.template_scale * np.eye(cfg.n_classes, cfg.dim)
    else:
        raise ValueError(f"unknown template_kind {cfg.template_kind!r}")
    signatures = cfg.signature_scale * rng.standard_normal((cfg.n_speakers, cfg.dim))

    n_train = max(2, cfg.frames_per_speaker // cfg.frames_per_utt)
    pools = {"train": n_train, "dev": cfg.dev_utts_per_speaker, "eval": cfg.eval_utts_per_speaker}
    utts = {name: [] for name in pools}
    for name, count in pools.items():
        for s in range(cfg.n_speakers):
            for _ in range(count):
                f, y = _utterance(rng, cfg, templates, signatures[s])
                utts[name].append((s, f, y))

    def frameset(items):
        sets = []
        for uid, (s, feats, labels, sir) in enumerate(items):
            win = expand_context(feats.astype(np.float32), cfg.context).windows
            n = labels.size
            sets.append(LabeledFrameSet(win, labels, np.full(n, s), np.full(n, sir), np.full(n, uid)))
        return LabeledFrameSet.concat(sets)

    def interferer_for(pool, s):
        others = [u for u in pool if u[0] != s]
        return others[int(rng.integers(len(others)))]

    train_items = []
    for s, f, y in utts["train"]:
        if rng.random() < cfg.clean_train_fraction:
            train_items.append((s, f, y, np.nan))
        else:
            sir = float(cfg.sirs[int(rng.integers(len(cfg.sirs)))])
            mixed, _ = mix_frames(f, interferer_for(utts["train"], s)[1], sir)
            train_items.append((s, mixed, y, sir))
    train_all = frameset(train_items)
    utt_ids = np.unique(train_all.utt_index)
    n_cv = max(1, int(round(cfg.cv_fraction * utt_ids.size)))
    cv_ids = rng.permutation(utt_ids)[:n_cv]
    is_cv = np.isin(train_all.utt_index, cv_ids)

    overlap_items = []
    for s, f, y in utts["dev"]:
        for sir in cfg.sirs:
            mixed, _ = mix_frames(f, interferer_for(utts["dev"], s)[1], float(sir))
            overlap_items.append((s, mixed, y, float(sir)))
    tests = {
        "overlap": frameset(overlap_items),
        "clean_dev": frameset([(s, f, y, np.nan) for s, f, y in utts["dev"]]),
        "clean_eval": frameset([(s, f, y, np.nan) for s, f, y in utts["eval"]]),
    }
    data = ExperimentData(
        train=train_all.subset(~is_cv),
        cv=train_all.subset(is_cv),
        tests=tests,
        embeddings=embedding_table(signatures, cfg.embedding_dim),
    )
    return ToyCorpus(data, templates, signatures, cfg)


# --------------------------------------------------------------------------
# audio-level toy corpus for the command-line pipeline


@dataclass
class ToyAudioConfig:
    n_speakers: int = 4
    n_classes: int = 6
    train_utts_per_speaker: int = 6
    dev_utts_per_speaker: int = 2
    eval_utts_per_speaker: int = 1
    frames_per_utt: int = 100
    sample_rate: int = 16000
    frame_shift: int = 160
    frame_length: int = 400
    partials: int = 3
    noise: float = 0.003
    min_segment: int = 5
    max_segment: int = 15


def synthesize_toy_audio(outdir, cfg: ToyAudioConfig | None = None, seed: int = 0) -> dict[str, Path]:
    """Write a small labelled multi-speaker WAV corpus.

    Class ``k`` is a chord of ``partials`` sinusoids; speaker ``s`` rescales
    every frequency by its own factor and weights the partials with its own
    gains. Each utterance gets a ``.lab`` file with one class index per
    analysis frame. Returns the manifest path of each split.
    """
    from .dsp import Utterance, Waveform, write_manifest, write_wav

    cfg = cfg or ToyAudioConfig()
    if cfg.n_speakers < 2:
        raise InsufficientSpeakersError("toy corpus needs at least 2 speakers")
    rng = np.random.default_rng(seed)
    outdir = Path(outdir)
    (outdir / "wav").mkdir(parents=True, exist_ok=True)
    (outdir / "lab").mkdir(parents=True, exist_ok=True)
    freqs = rng.uniform(250.0, 3000.0, size=(cfg.n_classes, cfg.partials))
    warp = rng.uniform(0.85, 1.15, size=cfg.n_speakers)
    gains = rng.uniform(0.2, 1.0, size=(cfg.n_speakers, cfg.partials))
    n_samples = (cfg.frames_per_utt - 1) * cfg.frame_shift + cfg.frame_length
    t = np.arange(n_samples) / cfg.sample_rate
    centres = np.arange(cfg.frames_per_utt) * cfg.frame_shift + cfg.frame_length // 2

    manifests = {}
    for split, count in (("train", cfg.train_utts_per_speaker), ("dev", cfg.dev_utts_per_speaker),
                         ("eval", cfg.eval_utts_per_speaker)):
        utts = []
        for s in range(cfg.n_speakers):
            for u in range(count):
                cls = np.empty(n_samples, dtype=np.int64)
                pos = 0
                while pos < n_samples:
                    seg = int(rng.integers(cfg.min_segment, cfg.max_segment + 1)) * cfg.frame_shift
                    cls[pos : pos + seg] = rng.integers(cfg.n_classes)
                    pos += seg
                phase = rng.uniform(0, 2 * np.pi, size=cfg.partials)
                x = np.zeros(n_samples)
                for j in range(cfg.partials):
                    x += gains[s, j] * np.sin(2 * np.pi * warp[s] * freqs[cls, j] * t + phase[j])
                x = 0.1 * x / cfg.partials + cfg.noise * rng.standard_normal(n_samples)
                uid = f"{split}_spk{s}_u{u}"
                wav, lab = outdir / "wav" / f"{uid}.wav", outdir / "lab" / f"{uid}.lab"
                write_wav(wav, Waveform(x, cfg.sample_rate))
                lab.write_text("".join(f"{c}\n" for c in cls[centres]))
                utts.append(Utterance(uid, f"spk{s}", wav, lab))
        manifests[split] = outdir / f"{split}.tsv"
        write_manifest(manifests[split], utts)
    return manifests
