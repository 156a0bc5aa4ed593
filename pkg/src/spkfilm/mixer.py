"""Two-speaker overlap simulation at an exact signal-to-interference ratio."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import Utterance, Waveform, _rel, load_wav, read_manifest, write_wav
from .errors import (
    DegenerateInterfererError,
    FormatError,
    InsufficientSpeakersError,
    SampleRateError,
)

DEFAULT_SIRS = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0)


@dataclass(frozen=True)
class MixSpec:
    mix_id: str
    target_utt: str
    interferer_utt: str
    sir_db: float
    seed: int


@dataclass
class MixEntry:
    mix_id: str
    target_utt: str
    interferer_utt: str
    sir_db: float
    gain: float
    path: Path


def signal_power(x) -> float:
    """Mean-square power, accumulated in float64."""
    s = x.samples if isinstance(x, Waveform) else np.asarray(x)
    s = s.astype(np.float64).reshape(-1)
    return float(np.dot(s, s) / s.size)


def match_length(x: np.ndarray, n: int) -> np.ndarray:
    """Tile ``x`` cyclically or truncate it to exactly ``n`` samples."""
    if x.shape[0] >= n:
        return x[:n]
    reps = -(-n // x.shape[0])
    return np.tile(x, reps)[:n]


def sir_gain(p_target: float, p_interferer: float, sir_db: float) -> float:
    if not p_interferer > 0.0:
        raise DegenerateInterfererError("interferer has zero power")
    return float(np.sqrt(p_target / (p_interferer * 10.0 ** (sir_db / 10.0))))


def measured_sir(target, scaled_interferer) -> float:
    return float(10.0 * np.log10(signal_power(target) / signal_power(scaled_interferer)))


def mix_arrays(target: np.ndarray, interferer: np.ndarray, sir_db: float):
    """Mix raw float64 arrays; returns ``(mixture, gain)``."""
    if not np.isfinite(sir_db):
        raise ValueError(f"SIR must be finite, got {sir_db}")
    target = np.asarray(target, dtype=np.float64)
    interferer = match_length(np.asarray(interferer, dtype=np.float64), target.shape[0])
    g = sir_gain(signal_power(target), signal_power(interferer), sir_db)
    return target + g * interferer, g


def mix_at_sir(target: Waveform, interferer: Waveform, sir_db: float) -> tuple[Waveform, float]:
    if target.sample_rate != interferer.sample_rate:
        raise SampleRateError(
            f"sample rate mismatch: target {target.sample_rate} Hz, "
            f"interferer {interferer.sample_rate} Hz"
        )
    mix, g = mix_arrays(target.samples, interferer.samples, sir_db)
    return Waveform(mix, target.sample_rate), g


def plan_overlap_corpus(utts: list[Utterance], sirs=DEFAULT_SIRS, seed: int = 0) -> list[MixSpec]:
    """One interferer per (target, SIR), drawn uniformly from other speakers.

    Output order follows the input order; the plan depends only on the
    arguments.
    """
    if not sirs:
        raise ValueError("SIR list is empty")
    speakers = {u.speaker_id for u in utts}
    if len(speakers) < 2:
        raise InsufficientSpeakersError(
            f"need utterances from at least 2 speakers, got {len(speakers)}"
        )
    rng = np.random.default_rng(seed)
    specs = []
    for u in utts:
        pool = [v for v in utts if v.speaker_id != u.speaker_id]
        for sir in sirs:
            pick = pool[int(rng.integers(len(pool)))]
            specs.append(
                MixSpec(
                    mix_id=f"{u.utt_id}__{pick.utt_id}__sir{_fmt_sir(sir)}",
                    target_utt=u.utt_id,
                    interferer_utt=pick.utt_id,
                    sir_db=float(sir),
                    seed=int(rng.integers(2**63)),
                )
            )
    return specs


def build_overlap_corpus(manifest, sirs=DEFAULT_SIRS, seed: int = 0, outdir=None) -> list[MixEntry]:
    """Render every planned mixture as a float WAV and write ``mixtures.tsv``."""
    utts = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    outdir = Path(outdir if outdir is not None else "mixtures")
    (outdir / "wav").mkdir(parents=True, exist_ok=True)
    by_id = {u.utt_id: u for u in utts}
    if len(by_id) != len(utts):
        raise FormatError("duplicate utterance ids in manifest")
    cache: dict[str, Waveform] = {}

    def get(uid):
        if uid not in cache:
            cache[uid] = load_wav(by_id[uid].path, allow_float=True)
        return cache[uid]

    entries = []
    for spec in plan_overlap_corpus(utts, sirs, seed):
        mix, g = mix_at_sir(get(spec.target_utt), get(spec.interferer_utt), spec.sir_db)
        wav_path = outdir / "wav" / f"{spec.mix_id}.wav"
        write_wav(wav_path, mix, float32=True)
        entries.append(
            MixEntry(spec.mix_id, spec.target_utt, spec.interferer_utt, spec.sir_db, g, wav_path)
        )
    write_mix_manifest(outdir / "mixtures.tsv", entries)
    return entries


def write_mix_manifest(path, entries: list[MixEntry]) -> None:
    base = Path(path).parent
    lines = [
        "\t".join(
            [e.mix_id, e.target_utt, e.interferer_utt, _fmt_sir(e.sir_db), repr(e.gain), _rel(e.path, base)]
        )
        for e in entries
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mix_manifest(path) -> list[MixEntry]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 6:
            raise FormatError(f"{path}:{lineno}: expected 6 tab-separated columns")
        out.append(
            MixEntry(cols[0], cols[1], cols[2], float(cols[3]), float(cols[4]), path.parent / cols[5])
        )
    return out


def _fmt_sir(sir: float) -> str:
    return f"{sir:g}"
