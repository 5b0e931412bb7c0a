"""Dataset model: trials, on-disk manifests, fold splitting and the synthetic
corpus generator used for desk-scale verification."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensorfile import read_tensor, write_tensor

ACOUSTIC_DIM = 29
MEL_CHANNELS = slice(0, 25)
AP_CHANNELS = slice(25, 27)
F0_CHANNEL = 27
UV_CHANNEL = 28

DEFAULT_VOWELS = ("a", "i", "u", "e", "o", "y")


class CorpusError(Exception):
    pass


@dataclass(frozen=True)
class GridGeometry:
    n_x: int
    n_y: int
    n_features: int = 21

    @property
    def n_channels(self) -> int:
        return self.n_x * self.n_y

    @property
    def flattened_dim(self) -> int:
        # e.g. 9*8*21 = 1512, 4*8*21 = 672
        return self.n_x * self.n_y * self.n_features


@dataclass(frozen=True)
class VowelInterval:
    label: str
    start_frame: int
    end_frame: int


@dataclass(frozen=True)
class Trial:
    trial_id: str
    sentence_id: str
    repetition_index: int
    raw_neural: np.ndarray  # (channels, samples) float32
    raw_audio_features: np.ndarray  # (29, frames) float32
    vowel_intervals: tuple[VowelInterval, ...]
    block_id: str
    audio_signal: np.ndarray | None = None  # optional, contamination audit only
    source_trial: str | None = None  # set on augmented trials
    audio_donor_trial: str | None = None

    @property
    def n_frames(self) -> int:
        return self.raw_audio_features.shape[1]

    @property
    def is_augmented(self) -> bool:
        return self.source_trial is not None

    def validate(self) -> None:
        if self.raw_audio_features.shape[0] != ACOUSTIC_DIM:
            raise CorpusError(
                f"{self.trial_id}: expected {ACOUSTIC_DIM} acoustic channels, "
                f"got {self.raw_audio_features.shape[0]}"
            )
        frames = self.n_frames
        prev_end = 0
        for iv in sorted(self.vowel_intervals, key=lambda v: v.start_frame):
            if not (0 <= iv.start_frame < iv.end_frame <= frames):
                raise CorpusError(
                    f"{self.trial_id}: vowel interval {iv} outside [0, {frames})"
                )
            if iv.start_frame < prev_end:
                raise CorpusError(f"{self.trial_id}: overlapping vowel intervals")
            prev_end = iv.end_frame


@dataclass(frozen=True)
class Corpus:
    trials: tuple[Trial, ...]
    grid: GridGeometry
    sample_rate_neural: float
    frame_rate: float = 100.0
    vowel_inventory: tuple[str, ...] = DEFAULT_VOWELS

    def __post_init__(self):
        if not self.trials:
            raise CorpusError("empty corpus")
        seen_ids: set[str] = set()
        seen_reps: set[tuple[str, int]] = set()
        inventory = set(self.vowel_inventory)
        for t in self.trials:
            if t.trial_id in seen_ids:
                raise CorpusError(f"duplicate trial_id {t.trial_id}")
            seen_ids.add(t.trial_id)
            key = (t.sentence_id, t.repetition_index)
            if key in seen_reps and not t.is_augmented:
                raise CorpusError(f"duplicate repetition {key}")
            seen_reps.add(key)
            if t.raw_neural.shape[0] != self.grid.n_channels:
                raise CorpusError(
                    f"{t.trial_id}: {t.raw_neural.shape[0]} channels, "
                    f"grid expects {self.grid.n_channels}"
                )
            for iv in t.vowel_intervals:
                if iv.label not in inventory:
                    raise CorpusError(f"{t.trial_id}: vowel {iv.label!r} not in inventory")
            t.validate()

    def trial(self, trial_id: str) -> Trial:
        for t in self.trials:
            if t.trial_id == trial_id:
                return t
        raise KeyError(trial_id)

    def sentences(self) -> dict[str, list[Trial]]:
        groups: dict[str, list[Trial]] = {}
        for t in self.trials:
            groups.setdefault(t.sentence_id, []).append(t)
        return groups


@dataclass(frozen=True)
class FoldAssignment:
    fold_index: int
    train_ids: tuple[str, ...]
    validation_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

def write_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for t in corpus.trials:
        neural_file = f"{t.trial_id}.neural.bin"
        audio_file = f"{t.trial_id}.audio.bin"
        write_tensor(out_dir / neural_file, t.raw_neural)
        write_tensor(out_dir / audio_file, t.raw_audio_features)
        entry = {
            "trial_id": t.trial_id,
            "sentence_id": t.sentence_id,
            "repetition": t.repetition_index,
            "block_id": t.block_id,
            "neural_file": neural_file,
            "audio_file": audio_file,
            "vowels": [[iv.label, iv.start_frame, iv.end_frame] for iv in t.vowel_intervals],
        }
        if t.audio_signal is not None:
            sig_file = f"{t.trial_id}.signal.bin"
            write_tensor(out_dir / sig_file, t.audio_signal)
            entry["audio_signal_file"] = sig_file
        if t.source_trial is not None:
            entry["source_trial"] = t.source_trial
            entry["audio_donor_trial"] = t.audio_donor_trial
        entries.append(entry)
    manifest = {
        "grid": {"n_x": corpus.grid.n_x, "n_y": corpus.grid.n_y,
                 "n_features": corpus.grid.n_features},
        "sample_rate_neural": corpus.sample_rate_neural,
        "frame_rate": corpus.frame_rate,
        "vowel_inventory": list(corpus.vowel_inventory),
        "trials": entries,
    }
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest_path


def load_corpus(manifest_path: str | Path) -> Corpus:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise CorpusError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    base = manifest_path.parent
    if not manifest.get("trials"):
        raise CorpusError("empty corpus")
    grid = GridGeometry(**manifest["grid"])
    trials = []
    for entry in manifest["trials"]:
        raw_neural = read_tensor(base / entry["neural_file"])
        raw_audio = read_tensor(base / entry["audio_file"])
        if raw_neural.ndim != 2:
            raise CorpusError(f"{entry['trial_id']}: neural tensor must be 2-D")
        if raw_audio.ndim != 2:
            raise CorpusError(f"{entry['trial_id']}: audio tensor must be 2-D")
        audio_signal = None
        if "audio_signal_file" in entry:
            audio_signal = read_tensor(base / entry["audio_signal_file"])
        trials.append(Trial(
            trial_id=entry["trial_id"],
            sentence_id=entry["sentence_id"],
            repetition_index=int(entry["repetition"]),
            raw_neural=raw_neural,
            raw_audio_features=raw_audio,
            vowel_intervals=tuple(
                VowelInterval(v[0], int(v[1]), int(v[2])) for v in entry["vowels"]
            ),
            block_id=entry["block_id"],
            audio_signal=audio_signal,
            source_trial=entry.get("source_trial"),
            audio_donor_trial=entry.get("audio_donor_trial"),
        ))
    return Corpus(
        trials=tuple(trials),
        grid=grid,
        sample_rate_neural=float(manifest["sample_rate_neural"]),
        frame_rate=float(manifest["frame_rate"]),
        vowel_inventory=tuple(manifest["vowel_inventory"]),
    )


# ---------------------------------------------------------------------------
# Fold splitting
# ---------------------------------------------------------------------------

def make_folds(
    corpus: Corpus,
    n_folds: int = 10,
    ratios: tuple[float, float, float] = (0.72, 0.18, 0.10),
    seed: int = 0,
    group_by_sentence: bool = False,
) -> list[FoldAssignment]:
    """Deterministic train/validation/test assignments.

    Test sets are disjoint slices of a seeded permutation; when
    n_folds * test_ratio == 1 they form an exact partition of the corpus
    (extra trials go to the highest-index folds, so fold 0 has the modal
    size).  The validation count is floor(n * val_ratio) and training
    takes the remainder, which reproduces the sizes (457, 114, 63) for
    634 trials and (960, 239, 133) for 1332.
    """
    train_r, val_r, test_r = ratios
    if abs(train_r + val_r + test_r - 1.0) > 1e-9:
        raise CorpusError(f"ratios {ratios} do not sum to 1")
    if n_folds < 1 or n_folds * test_r > 1.0 + 1e-9:
        raise CorpusError(f"n_folds={n_folds} incompatible with test ratio {test_r}")

    ids = sorted(t.trial_id for t in corpus.trials)
    n = len(ids)
    if n < n_folds:
        raise CorpusError(f"corpus of {n} trials cannot support {n_folds} folds")
    rng = np.random.default_rng(seed)

    if group_by_sentence:
        by_sentence: dict[str, list[str]] = {}
        for t in sorted(corpus.trials, key=lambda t: t.trial_id):
            by_sentence.setdefault(t.sentence_id, []).append(t.trial_id)
        sentences = sorted(by_sentence)
        order = [sentences[i] for i in rng.permutation(len(sentences))]
        groups = [by_sentence[s] for s in order]
    else:
        groups = [[ids[i]] for i in rng.permutation(n)]

    # Disjoint test chunks over the group sequence.
    if abs(n_folds * test_r - 1.0) < 1e-9:
        bounds = _partition_bounds(len(groups), n_folds)
    else:
        per_fold = max(1, int(np.floor(n * test_r)))
        # group counts approximate trial counts when grouping by sentence
        per_fold_groups = max(1, int(round(per_fold * len(groups) / n)))
        bounds = [(i * per_fold_groups, (i + 1) * per_fold_groups) for i in range(n_folds)]

    folds = []
    for fold in range(n_folds):
        lo, hi = bounds[fold]
        test_ids = [tid for g in groups[lo:hi] for tid in g]
        rest_groups = groups[:lo] + groups[hi:]
        fold_rng = np.random.default_rng(seed * 10_000 + fold + 1)
        rest_groups = [rest_groups[i] for i in fold_rng.permutation(len(rest_groups))]
        val_target = int(np.floor(n * val_r))
        val_ids: list[str] = []
        train_ids: list[str] = []
        for g in rest_groups:
            if len(val_ids) < val_target:
                val_ids.extend(g)
            else:
                train_ids.extend(g)
        folds.append(FoldAssignment(
            fold_index=fold,
            train_ids=tuple(sorted(train_ids)),
            validation_ids=tuple(sorted(val_ids)),
            test_ids=tuple(sorted(test_ids)),
        ))
    return folds


def _partition_bounds(n: int, k: int) -> list[tuple[int, int]]:
    """k contiguous chunks covering range(n); the extras go to the last folds."""
    base, extra = divmod(n, k)
    sizes = [base] * (k - extra) + [base + 1] * extra
    bounds = []
    start = 0
    for s in sizes:
        bounds.append((start, start + s))
        start += s
    return bounds


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_sentences: int = 20
    reps_per_sentence: int = 3
    grid: GridGeometry = field(default_factory=lambda: GridGeometry(4, 8))
    frames_range: tuple[int, int] = (100, 200)
    snr_db: float = 40.0
    mapping: str = "linear"  # linear | tanh
    seed: int = 0
    sample_rate: float = 1000.0
    vowels_per_sentence: int = 3
    vowel_inventory: tuple[str, ...] = DEFAULT_VOWELS
    n_blocks: int = 3
    informative_channels: tuple[int, ...] | None = None
    contamination_gain_db: float | None = None
    with_audio_signal: bool = False

    def validate(self) -> None:
        if self.n_sentences < 1 or self.reps_per_sentence < 1:
            raise CorpusError("need at least one sentence and one repetition")
        if self.mapping not in ("linear", "tanh"):
            raise CorpusError(f"unknown mapping {self.mapping!r}")
        if self.frames_range[0] < 20 or self.frames_range[1] < self.frames_range[0]:
            raise CorpusError(f"bad frames_range {self.frames_range}")
        if self.sample_rate < 400.0:
            raise CorpusError("sample_rate must cover the 200 Hz top band")


WINDOW_S = 0.2
HOP_S = 0.01


def _smooth_components(rng: np.random.Generator, n_channels: int, frames: int,
                       n_comp: int, amplitude: float) -> np.ndarray:
    """Sum of random slow sinusoids per channel, (n_channels, frames)."""
    # frequencies in cycles per second (frames arrive at 100 Hz) so the
    # trajectory timescale does not depend on sentence length, and stays
    # well below the 5 Hz resolution of the 200 ms analysis window
    t = np.arange(frames) * HOP_S
    out = np.zeros((n_channels, frames))
    for _ in range(n_comp):
        freq = rng.uniform(0.3, 1.5, size=(n_channels, 1))
        phase = rng.uniform(0, 2 * np.pi, size=(n_channels, 1))
        amp = rng.uniform(0.3, 1.0, size=(n_channels, 1)) * amplitude
        out += amp * np.sin(2 * np.pi * freq * t[None, :] + phase)
    return out


def _sentence_prototype(rng: np.random.Generator, cfg: SynthConfig,
                        vowel_profiles: dict[str, np.ndarray],
                        vowel_seq: list[str], frames: int):
    """Canonical 29 x frames acoustic trajectory plus vowel intervals."""
    a = np.zeros((ACOUSTIC_DIM, frames))
    a[:25] = _smooth_components(rng, 25, frames, 3, 0.15)
    a[25:27] = 0.2 + _smooth_components(rng, 2, frames, 3, 0.15)

    n_v = len(vowel_seq)
    lead = max(3, frames // 12)
    usable = frames - 2 * lead
    seg = usable // n_v
    intervals = []
    voicing = np.zeros(frames)
    f0 = np.zeros(frames)
    for k, label in enumerate(vowel_seq):
        start = lead + k * seg
        end = start + max(2, int(seg * 0.7))
        prof = vowel_profiles[label]
        a[:25, start:end] += prof[:25, None]
        f0[start:end] = prof[25]
        voicing[start:end] = 1.0
        intervals.append(VowelInterval(label, start, end))
    # soften segment boundaries so trajectories stay smooth
    kernel = np.hanning(15)
    kernel /= kernel.sum()
    a[:25] = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, a[:25])
    f0 = np.convolve(f0, kernel, mode="same")
    a[F0_CHANNEL] = f0
    a[UV_CHANNEL] = voicing
    return a, intervals


def _time_warp(rng: np.random.Generator, a: np.ndarray,
               intervals: list[VowelInterval], jitter: float):
    """Resample the time axis with a smooth random monotone warp."""
    frames = a.shape[1]
    scale = float(rng.uniform(1.0 - jitter, 1.0 + jitter))
    new_frames = max(20, int(round(frames * scale)))
    u = np.linspace(0, 1, new_frames)
    bend = rng.uniform(-jitter, jitter)
    warp = u + bend * np.sin(np.pi * u)  # monotone for |bend| < 1/pi
    src = warp * (frames - 1)
    idx = np.clip(src, 0, frames - 1)
    lo = np.floor(idx).astype(int)
    hi = np.minimum(lo + 1, frames - 1)
    frac = idx - lo
    warped = a[:, lo] * (1 - frac) + a[:, hi] * frac
    inv = np.interp(np.arange(frames), src, np.arange(new_frames))
    new_intervals = []
    for iv in intervals:
        s = int(round(inv[iv.start_frame]))
        e = int(round(inv[min(iv.end_frame, frames - 1)]))
        s = max(0, min(s, new_frames - 2))
        e = max(s + 1, min(e, new_frames))
        new_intervals.append(VowelInterval(iv.label, s, e))
    return warped, new_intervals


def _band_carriers(rng: np.random.Generator, n_channels: int) -> np.ndarray:
    """One carrier frequency per (channel, band), inside [10b+2, 10b+8) Hz."""
    b = np.arange(20)
    lo = 10 * b + 2.0
    return lo[None, :] + rng.uniform(0, 6, size=(n_channels, 20))


def _synthesize_raw(rng: np.random.Generator, cfg: SynthConfig,
                    power: np.ndarray, lfp: np.ndarray,
                    carriers: np.ndarray) -> np.ndarray:
    """Raw signals whose 200-ms band powers track `power` (C x 20 x T)."""
    n_channels, _, frames = power.shape
    fs = cfg.sample_rate
    window = int(round(WINDOW_S * fs))
    hop = int(round(HOP_S * fs))
    samples = (frames - 1) * hop + window
    t = np.arange(samples) / fs
    centers = window / 2 + hop * np.arange(frames)
    amp = np.sqrt(np.maximum(power, 0.0))
    raw = np.zeros((n_channels, samples))
    for c in range(n_channels):
        env = np.empty((20, samples))
        for b in range(20):
            env[b] = np.interp(np.arange(samples), centers, amp[c, b])
        phases = rng.uniform(0, 2 * np.pi, size=20)
        raw[c] = np.sum(env * np.cos(2 * np.pi * carriers[c][:, None] * t[None, :]
                                     + phases[:, None]), axis=0)
        raw[c] += np.interp(np.arange(samples), centers, lfp[c])
    sig_power = float(np.mean(raw ** 2))
    noise_power = sig_power / (10 ** (cfg.snr_db / 10))
    raw += rng.normal(0, np.sqrt(noise_power), size=raw.shape)
    return raw


def _synth_audio_signal(rng: np.random.Generator, cfg: SynthConfig,
                        a: np.ndarray) -> np.ndarray:
    """Speech-like waveform in the 60-200 Hz range driven by the Mel channels."""
    frames = a.shape[1]
    fs = cfg.sample_rate
    window = int(round(WINDOW_S * fs))
    hop = int(round(HOP_S * fs))
    samples = (frames - 1) * hop + window
    t = np.arange(samples) / fs
    centers = window / 2 + hop * np.arange(frames)
    freqs = rng.uniform(60, 200, size=8)
    phases = rng.uniform(0, 2 * np.pi, size=8)
    drive = np.abs(a[:8]) + 0.05
    sig = np.zeros(samples)
    for k in range(8):
        env = np.interp(np.arange(samples), centers, drive[k])
        sig += env * np.cos(2 * np.pi * freqs[k] * t + phases[k])
    return sig


def generate_synthetic_corpus(cfg: SynthConfig) -> Corpus:
    """Corpus whose extracted neural features are a noisy image of the
    acoustic features, with per-repetition time jitter and vowel annotations."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_channels = cfg.grid.n_channels

    vowel_profiles = {
        v: np.concatenate([rng.normal(0, 1.0, size=25), [rng.uniform(0.5, 1.5)]])
        for v in cfg.vowel_inventory
    }
    # acoustic -> band-power mapping, per (channel, band)
    w_bands = rng.normal(0, 0.35, size=(n_channels, 20, ACOUSTIC_DIM))
    w_lfp = rng.normal(0, 0.5, size=(n_channels, ACOUSTIC_DIM))
    carriers = _band_carriers(rng, n_channels)
    active = np.ones(n_channels, dtype=bool)
    if cfg.informative_channels is not None:
        active[:] = False
        active[list(cfg.informative_channels)] = True
    w_bands[~active] = 0.0
    w_lfp[~active] = 0.0

    contamination_gain = None
    if cfg.contamination_gain_db is not None:
        contamination_gain = 10 ** (cfg.contamination_gain_db / 20)

    need_audio = cfg.with_audio_signal or contamination_gain is not None

    trials = []
    for s in range(cfg.n_sentences):
        sid = f"s{s:03d}"
        vowel_seq = [cfg.vowel_inventory[int(rng.integers(len(cfg.vowel_inventory)))]
                     for _ in range(cfg.vowels_per_sentence)]
        frames = int(rng.integers(cfg.frames_range[0], cfg.frames_range[1] + 1))
        proto, proto_ivs = _sentence_prototype(rng, cfg, vowel_profiles, vowel_seq, frames)
        for r in range(cfg.reps_per_sentence):
            if r == 0:
                a, ivs = proto.copy(), list(proto_ivs)
            else:
                a, ivs = _time_warp(rng, proto, proto_ivs, jitter=0.1)
            a = a + _smooth_components(rng, ACOUSTIC_DIM, a.shape[1], 2, 0.02)
            a[UV_CHANNEL] = np.clip(a[UV_CHANNEL], 0, 1)

            drive = np.einsum("cbk,kt->cbt", w_bands, a)
            if cfg.mapping == "tanh":
                drive = np.tanh(drive)
            power = np.maximum(1.0 + drive, 0.01)
            power[~active] = 1.0
            lfp = np.einsum("ck,kt->ct", w_lfp, a)
            lfp = lfp - lfp.mean(axis=1, keepdims=True)
            lfp[~active] = 0.0
            raw = _synthesize_raw(rng, cfg, power, lfp, carriers)

            audio_signal = None
            if need_audio:
                audio_signal = _synth_audio_signal(rng, cfg, a)
                if contamination_gain is not None:
                    rms_n = np.sqrt(np.mean(raw ** 2, axis=1, keepdims=True))
                    rms_a = np.sqrt(np.mean(audio_signal ** 2)) + 1e-12
                    raw = raw + contamination_gain * rms_n * audio_signal[None, :] / rms_a

            block = f"B{(s % cfg.n_blocks) + 1}"
            trials.append(Trial(
                trial_id=f"{sid}_r{r}",
                sentence_id=sid,
                repetition_index=r,
                raw_neural=raw.astype(np.float32),
                raw_audio_features=a.astype(np.float32),
                vowel_intervals=tuple(ivs),
                block_id=block,
                audio_signal=None if audio_signal is None
                else audio_signal.astype(np.float32),
            ))
    return Corpus(
        trials=tuple(trials),
        grid=cfg.grid,
        sample_rate_neural=cfg.sample_rate,
        vowel_inventory=cfg.vowel_inventory,
    )
