"""Synthetic multimodal time-series corpora: generation, serialization, splits.

Each instance is a per-channel sum of motifs (linear trend, class-keyed
sinusoid, spike train, level shift) plus Gaussian noise, paired with
deterministic channel descriptions and a sample-level context text. Every
continuous motif parameter is snapped to the precision printed in the texts
before it is used to synthesize values, so the texts are exact ground truth:
a least-squares fit on a noise-free instance recovers the stated slope.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import substream

MOTIF_VOCABULARY_VERSION = "1"

CLASS_NAMES = (
    "drift", "surge", "ripple", "steady", "pulse",
    "swing", "creep", "burst", "wobble", "flux",
)

SPLITS = ("train", "val", "test")

_TREND_BINS = 8
_AMP_BINS = 4
_PHASE_BINS = 8
_SHIFT_BINS = 4


class CorpusFormatError(ValueError):
    """Raised on malformed corpus files, naming the line and field."""


@dataclass
class TimeSeriesInstance:
    id: str
    values: np.ndarray          # (C, T) float64
    channel_texts: list[str]    # length C
    context_text: str
    label: int
    split: str

    def __eq__(self, other):
        if not isinstance(other, TimeSeriesInstance):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.split == other.split
            and self.context_text == other.context_text
            and self.channel_texts == other.channel_texts
            and self.values.shape == other.values.shape
            and bool(np.all(self.values == other.values))
        )


@dataclass
class CorpusManifest:
    channels: int
    timesteps: int
    patch_len: int
    class_count: int
    split_counts: dict[str, int]
    seed: int
    motif_vocabulary_version: str = MOTIF_VOCABULARY_VERSION


@dataclass
class Corpus:
    manifest: CorpusManifest
    instances: list[TimeSeriesInstance] = field(default_factory=list)

    def split(self, name: str) -> list[TimeSeriesInstance]:
        return [inst for inst in self.instances if inst.split == name]

    def by_id(self, inst_id: str) -> TimeSeriesInstance:
        for inst in self.instances:
            if inst.id == inst_id:
                return inst
        raise KeyError(inst_id)


@dataclass
class ForecastPair:
    history: np.ndarray   # (C, T)
    future: np.ndarray    # (C, H)
    instance: TimeSeriesInstance


def _snap(x: float, step: float = 0.01) -> float:
    return round(round(x / step) * step, 2)


def _bin_index(x: float, lo: float, hi: float, bins: int) -> int:
    frac = (x - lo) / (hi - lo)
    return min(bins - 1, max(0, int(frac * bins)))


def class_period(label: int) -> int:
    return 10 + 4 * label


def _dominant_channels(label: int, channels: int) -> tuple[int, int]:
    d1 = label % channels
    d2 = (3 * label + 1) % channels
    if d2 == d1:
        d2 = (d1 + 1) % channels
    return d1, d2


def _channel_tokens(c: int, slope: float, amp: float, n_spikes: int) -> list[str]:
    ti = _bin_index(slope, -1.0, 1.0, _TREND_BINS)
    ai = _bin_index(amp, 0.4, 3.2, _AMP_BINS)
    return [f"ch{c}-t{ti}", f"ch{c}-a{ai}", f"ch{c}-s{n_spikes}"]


def generate_corpus(
    seed: int,
    channels: int = 7,
    timesteps: int = 168,
    n_per_class: int = 250,
    class_count: int = 10,
    noise_scale: float = 0.1,
    trend_scale: float = 1.0,
    cycle_scale: float = 1.0,
    spike_scale: float = 1.0,
    shift_scale: float = 1.0,
    patch_len: int = 6,
    split_fractions: tuple[float, float] = (0.8, 0.1),
) -> Corpus:
    """Build a balanced labeled corpus, deterministic for a given seed.

    Class identity fixes the sinusoid period, the dominant-channel pair, the
    spike budget, and level-shift presence. The cycle phase and the level
    shift are shared by all channels of an instance (a common regime every
    channel reflects), while trend slope, cycle amplitude, baseline, and
    spikes are drawn per channel. ``*_scale`` factors of zero disable a motif
    family entirely (useful for degenerate fixtures).
    """
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    if class_count < 2 or class_count > len(CLASS_NAMES):
        raise ValueError(f"class_count must be in [2, {len(CLASS_NAMES)}], got {class_count}")
    if timesteps < 2 * patch_len:
        raise ValueError(f"timesteps must be >= 2*patch_len ({2 * patch_len}), got {timesteps}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")

    rng = substream(seed, "data")
    t_axis = np.arange(timesteps, dtype=np.float64)
    lin = 2.0 * t_axis / max(timesteps - 1, 1) - 1.0  # [-1, 1] ramp

    n_train = int(split_fractions[0] * n_per_class)
    n_val = int(split_fractions[1] * n_per_class)

    instances: list[TimeSeriesInstance] = []
    split_counts = {name: 0 for name in SPLITS}
    for label in range(class_count):
        period = class_period(label)
        d1, d2 = _dominant_channels(label, channels)
        max_spikes = label % 4
        has_shift = label % 2 == 1
        name = CLASS_NAMES[label]
        for k in range(n_per_class):
            if k < n_train:
                split = "train"
            elif k < n_train + n_val:
                split = "val"
            else:
                split = "test"
            split_counts[split] += 1

            phase = _snap(rng.uniform(0.0, 2 * math.pi))
            shift_mag = 0.0
            shift_pos = -1
            if has_shift and shift_scale > 0:
                shift_mag = _snap(rng.uniform(1.0, 2.0)) * shift_scale
                shift_pos = int(rng.integers(timesteps // 4, 3 * timesteps // 4))

            values = np.zeros((channels, timesteps))
            channel_texts = []
            compound_tokens = []
            for c in range(channels):
                offset = _snap(rng.uniform(-1.0, 1.0))
                slope = _snap(rng.uniform(-1.0, 1.0)) * trend_scale
                dominant = c in (d1, d2)
                amp = _snap(rng.uniform(0.5, 1.5) * (2.0 if dominant else 1.0)) * cycle_scale
                n_spikes = int(rng.integers(0, max_spikes + 1)) if spike_scale > 0 else 0

                row = offset + slope * lin + amp * np.sin(2 * math.pi * t_axis / period + phase)

                spike_desc = []
                for _ in range(n_spikes):
                    pos = int(rng.integers(0, timesteps))
                    height = _snap(rng.uniform(1.0, 2.0) * (1 if rng.random() < 0.5 else -1)) * spike_scale
                    row[pos] += height
                    spike_desc.append(f"{height:+.2f}@{pos}")

                if shift_pos >= 0:
                    row[shift_pos:] += shift_mag

                sigma = noise_scale * abs(amp)
                if sigma > 0:
                    row = row + rng.normal(0.0, sigma, size=timesteps)
                values[c] = row

                tokens = _channel_tokens(c, slope, amp, n_spikes)
                compound_tokens.extend(tokens)
                direction = "rising" if slope >= 0 else "falling"
                spikes_txt = f"{n_spikes} spikes" + (f" ({' '.join(spike_desc)})" if spike_desc else "")
                shift_part = (
                    f" and a level shift of {shift_mag:.2f} at step {shift_pos}" if shift_pos >= 0 else ""
                )
                channel_texts.append(
                    f"channel {c} around baseline {offset:.2f} shows a {direction} trend of slope "
                    f"{slope:.2f}, a cycle of period {period} with amplitude {amp:.2f} and phase "
                    f"{phase:.2f}, {spikes_txt}{shift_part} {' '.join(tokens)}"
                )

            # the context summary names only coarse, series-recoverable
            # descriptors: class regime, phase/shift bins, dominant channels,
            # and each channel's binned motif tokens
            pi = _bin_index(phase, 0.0, 2 * math.pi, _PHASE_BINS)
            shift_txt = (
                f" shift sh{_bin_index(shift_mag, 1.0, 2.0, _SHIFT_BINS)}" if shift_pos >= 0 else ""
            )
            context_text = (
                f"regime {name} event period {period} phase ph{pi}{shift_txt}"
                f" dominant ch{d1} ch{d2} ; " + " ".join(compound_tokens)
            )
            instances.append(
                TimeSeriesInstance(
                    id=f"i{label:02d}-{k:05d}",
                    values=values,
                    channel_texts=channel_texts,
                    context_text=context_text,
                    label=label,
                    split=split,
                )
            )

    manifest = CorpusManifest(
        channels=channels,
        timesteps=timesteps,
        patch_len=patch_len,
        class_count=class_count,
        split_counts=split_counts,
        seed=seed,
    )
    return Corpus(manifest=manifest, instances=instances)


# ---------------------------------------------------------------------------
# serialization: line-delimited JSON records, manifest first


def save_corpus(corpus: Corpus, path: str) -> None:
    m = corpus.manifest
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            json.dumps(
                {
                    "record": "manifest",
                    "channels": m.channels,
                    "timesteps": m.timesteps,
                    "patch_len": m.patch_len,
                    "class_count": m.class_count,
                    "split_counts": m.split_counts,
                    "seed": m.seed,
                    "motif_vocabulary_version": m.motif_vocabulary_version,
                },
                sort_keys=True,
            )
        )
        fh.write("\n")
        for inst in corpus.instances:
            fh.write(
                json.dumps(
                    {
                        "record": "instance",
                        "id": inst.id,
                        "label": inst.label,
                        "split": inst.split,
                        "values": inst.values.tolist(),
                        "channel_texts": inst.channel_texts,
                        "context_text": inst.context_text,
                    },
                    sort_keys=True,
                )
            )
            fh.write("\n")


def _require(record: dict, key: str, kind, line_no: int):
    if key not in record:
        raise CorpusFormatError(f"line {line_no}: field '{key}': missing")
    value = record[key]
    if kind is not None and not isinstance(value, kind):
        raise CorpusFormatError(
            f"line {line_no}: field '{key}': expected {getattr(kind, '__name__', kind)}, "
            f"got {type(value).__name__}"
        )
    return value


def load_corpus(path: str) -> Corpus:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorpusFormatError("line 1: field 'record': empty file, manifest expected")

    def parse(line: str, line_no: int) -> dict:
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise CorpusFormatError(f"line {line_no}: field 'record': invalid JSON ({err.msg})") from err
        if not isinstance(rec, dict):
            raise CorpusFormatError(f"line {line_no}: field 'record': expected an object")
        return rec

    head = parse(lines[0], 1)
    if head.get("record") != "manifest":
        raise CorpusFormatError("line 1: field 'record': first record must be the manifest")
    manifest = CorpusManifest(
        channels=_require(head, "channels", int, 1),
        timesteps=_require(head, "timesteps", int, 1),
        patch_len=_require(head, "patch_len", int, 1),
        class_count=_require(head, "class_count", int, 1),
        split_counts=dict(_require(head, "split_counts", dict, 1)),
        seed=_require(head, "seed", int, 1),
        motif_vocabulary_version=_require(head, "motif_vocabulary_version", str, 1),
    )

    instances = []
    counts = {name: 0 for name in SPLITS}
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec = parse(line, i)
        if rec.get("record") != "instance":
            raise CorpusFormatError(f"line {i}: field 'record': expected 'instance'")
        values_raw = _require(rec, "values", list, i)
        try:
            values = np.asarray(values_raw, dtype=np.float64)
        except (TypeError, ValueError) as err:
            raise CorpusFormatError(f"line {i}: field 'values': not a numeric matrix") from err
        if values.ndim != 2 or values.shape != (manifest.channels, manifest.timesteps):
            raise CorpusFormatError(
                f"line {i}: field 'values': shape {values.shape} does not match manifest "
                f"({manifest.channels}, {manifest.timesteps})"
            )
        if not np.all(np.isfinite(values)):
            raise CorpusFormatError(f"line {i}: field 'values': non-finite entry")
        label = _require(rec, "label", int, i)
        if not 0 <= label < manifest.class_count:
            raise CorpusFormatError(f"line {i}: field 'label': {label} outside [0, {manifest.class_count})")
        split = _require(rec, "split", str, i)
        if split not in SPLITS:
            raise CorpusFormatError(f"line {i}: field 'split': unknown split '{split}'")
        channel_texts = _require(rec, "channel_texts", list, i)
        if len(channel_texts) != manifest.channels:
            raise CorpusFormatError(
                f"line {i}: field 'channel_texts': {len(channel_texts)} entries for "
                f"{manifest.channels} channels"
            )
        counts[split] += 1
        instances.append(
            TimeSeriesInstance(
                id=_require(rec, "id", str, i),
                values=values,
                channel_texts=[str(t) for t in channel_texts],
                context_text=_require(rec, "context_text", str, i),
                label=label,
                split=split,
            )
        )

    if counts != manifest.split_counts:
        raise CorpusFormatError(
            f"line {len(lines)}: field 'split_counts': manifest says {manifest.split_counts}, "
            f"file holds {counts}"
        )
    return Corpus(manifest=manifest, instances=instances)


def corpus_checksum(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def make_forecast_pairs(corpus: Corpus, history_len: int, horizon: int) -> list[ForecastPair]:
    """Split each instance at ``history_len`` into (history, future) windows."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if history_len < 1:
        raise ValueError(f"history_len must be >= 1, got {history_len}")
    needed = history_len + horizon
    pairs = []
    for inst in corpus.instances:
        if inst.values.shape[1] < needed:
            raise ValueError(
                f"instance {inst.id} has {inst.values.shape[1]} steps, "
                f"need {needed} for history {history_len} + horizon {horizon}"
            )
        pairs.append(
            ForecastPair(
                history=inst.values[:, :history_len].copy(),
                future=inst.values[:, history_len:needed].copy(),
                instance=inst,
            )
        )
    return pairs
