"""Dataset handling: records, patch construction, causal-prefix
normalization, synthetic corpus generation and training batches.

A series is cut into non-overlapping patches of size P (the first patch is
left-padded so the most recent value always closes the last patch). The
normalizer (mean/std) is computed only from the leading ``n_mask`` patches
and applied to the whole window, which keeps it independent of anything a
position is later asked to predict.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

EPS_NORM = 1e-5

SYNTHETIC_FAMILIES = ("sine-mix", "sawtooth", "spiky", "trend+season", "regime-switch")


class DataError(ValueError):
    """Malformed dataset input."""


@dataclass
class TimeSeriesRecord:
    id: str
    freq: str
    values: np.ndarray
    variate_group: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.freq == "":
            raise DataError(f"record {self.id!r} has an empty freq tag")


@dataclass
class PatchedSequence:
    """Normalized patch matrix plus the masks the loss needs.

    ``loss_mask[t]`` is True when position t's prediction of patch t+1
    counts toward the loss: False for the ``n_mask`` normalizer-prefix
    patches, for the final patch (no successor) and for any patch whose
    successor is entirely padding.
    """

    patches: np.ndarray      # (N, P) normalized, pad positions zeroed
    pad_mask: np.ndarray     # (N, P) bool, True = real data
    loss_mask: np.ndarray    # (N,) bool
    normalizer: tuple        # (mu, sigma)
    n_mask: int


def patchify(values, patch_size):
    """Split a sequence into ceil(S/P) patches, left-padding the first."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("cannot patchify an empty sequence")
    if patch_size < 1:
        raise DataError("patch size must be >= 1")
    n = -(-values.size // patch_size)
    pad = n * patch_size - values.size
    padded = np.concatenate([np.zeros(pad), values])
    pad_mask = np.concatenate([np.zeros(pad, dtype=bool),
                               np.ones(values.size, dtype=bool)])
    return padded.reshape(n, patch_size), pad_mask.reshape(n, patch_size)


def prefix_patch_count(n_patches, masking_ratio):
    return max(1, math.ceil(masking_ratio * n_patches))


def causal_normalize(patches, pad_mask, masking_ratio):
    """Normalize all patches with statistics of the masked prefix only."""
    if not 0.0 < masking_ratio < 1.0:
        raise DataError("masking ratio must lie strictly between 0 and 1")
    n = patches.shape[0]
    n_mask = prefix_patch_count(n, masking_ratio)
    prefix = patches[:n_mask][pad_mask[:n_mask]]
    if prefix.size == 0:
        raise DataError("normalizer prefix contains only padding")
    mu = float(prefix.mean())
    sigma = max(float(prefix.std()), EPS_NORM)
    normalized = np.where(pad_mask, (patches - mu) / sigma, 0.0)
    loss_mask = np.zeros(n, dtype=bool)
    for t in range(n_mask, n - 1):
        loss_mask[t] = bool(pad_mask[t + 1].any())
    return PatchedSequence(normalized, pad_mask.copy(), loss_mask, (mu, sigma), n_mask)


def denormalize(values, normalizer):
    mu, sigma = normalizer
    return np.asarray(values) * sigma + mu


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class GroupSpec:
    label: str
    periods: list
    family: str
    noise_sigma: float = 0.1

    def __post_init__(self):
        if self.family not in SYNTHETIC_FAMILIES:
            raise DataError(f"unknown pattern family {self.family!r}")
        if not self.periods or any(p < 2 for p in self.periods):
            raise DataError("every group needs at least one period >= 2")


@dataclass
class SyntheticSpec:
    n_series: int
    groups: list
    length: int
    seed: int = 0

    def __post_init__(self):
        self.groups = [g if isinstance(g, GroupSpec) else GroupSpec(**g)
                       for g in self.groups]
        if self.n_series < 1 or not self.groups:
            raise DataError("spec needs at least one series per group and one group")


def _periodic_phase(t, period, shift):
    # (t mod p)/p keeps noiseless waves bit-exactly periodic
    return ((t + shift) % period) / period


def _make_series(family, periods, length, noise_sigma, rng):
    t = np.arange(length)
    p = int(rng.choice(periods))
    shift = int(rng.integers(0, p))
    if family == "sine-mix":
        y = np.zeros(length)
        for q in periods:
            amp = rng.uniform(0.5, 1.5)
            sh = int(rng.integers(0, q))
            y += amp * np.sin(2.0 * np.pi * _periodic_phase(t, q, sh))
    elif family == "sawtooth":
        amp = rng.uniform(0.8, 1.6)
        y = amp * (2.0 * _periodic_phase(t, p, shift) - 1.0)
    elif family == "spiky":
        y = np.zeros(length)
        spikes = rng.random(length) < (2.0 / p)
        y[spikes] = rng.exponential(3.0, size=int(spikes.sum())) * rng.choice(
            [-1.0, 1.0], size=int(spikes.sum()))
    elif family == "trend+season":
        slope = rng.uniform(0.5, 2.0) * rng.choice([-1.0, 1.0])
        amp = rng.uniform(0.6, 1.4)
        y = slope * (t / length) * 4.0 + amp * np.sin(2.0 * np.pi * _periodic_phase(t, p, shift))
    elif family == "regime-switch":
        cut = int(rng.uniform(0.4, 0.6) * length)
        p2 = int(rng.choice(periods))
        a1, a2 = rng.uniform(0.5, 1.5), rng.uniform(1.5, 3.0)
        y = np.empty(length)
        y[:cut] = a1 * np.sin(2.0 * np.pi * _periodic_phase(t[:cut], p, shift))
        y[cut:] = a2 * np.sin(2.0 * np.pi * _periodic_phase(t[cut:], p2, shift))
    else:  # pragma: no cover - guarded by GroupSpec
        raise DataError(f"unknown pattern family {family!r}")
    level = rng.uniform(-1.0, 1.0)
    noise = rng.normal(0.0, noise_sigma, size=length) if noise_sigma > 0 else 0.0
    return y + level + noise


def generate_synthetic(spec):
    """Deterministic synthetic corpus; the group label doubles as freq tag."""
    records = []
    for gi, group in enumerate(spec.groups):
        for si in range(spec.n_series):
            rng = np.random.default_rng(np.random.SeedSequence((spec.seed, gi, si)))
            values = _make_series(group.family, group.periods, spec.length,
                                  group.noise_sigma, rng)
            records.append(TimeSeriesRecord(id=f"{group.label}-{si:03d}",
                                            freq=group.label, values=values))
    return records


# ---------------------------------------------------------------------------
# JSON-lines dataset files


def load_jsonl(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("id", "freq", "target"):
                if key not in obj:
                    raise DataError(f"line {lineno}: missing field {key!r}")
            target = obj["target"]
            if not isinstance(target, list) or any(
                    isinstance(v, bool) or not isinstance(v, (int, float))
                    for v in target):
                raise DataError(f"line {lineno}: target must be an array of numbers")
            records.append(TimeSeriesRecord(id=str(obj["id"]), freq=str(obj["freq"]),
                                            values=np.asarray(target, dtype=np.float64),
                                            variate_group=obj.get("variate_group")))
    return records


def save_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {"id": rec.id, "freq": rec.freq, "target": list(map(float, rec.values))}
            if rec.variate_group is not None:
                obj["variate_group"] = rec.variate_group
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """A padded stack of patched windows ready for the model.

    ``loss_mask[b, t]`` marks positions whose next-patch prediction counts;
    ``time_index``/``variate_id`` drive the attention mask and rotary
    encoding; ``normalizers`` maps each window back to original units.
    """

    patches: np.ndarray      # (B, N, P)
    pad_mask: np.ndarray     # (B, N, P) bool
    loss_mask: np.ndarray    # (B, N) bool
    time_index: np.ndarray   # (B, N) int
    variate_id: np.ndarray   # (B, N) int
    normalizers: list
    ids: list = field(default_factory=list)
    freqs: list = field(default_factory=list)

    @property
    def size(self):
        return self.patches.shape[0]

    @property
    def n_patches(self):
        return self.patches.shape[1]


def stack_sequences(sequences, ids=None, freqs=None, variate_ids=None):
    """Right-pad patched sequences to a common length and stack them."""
    if not sequences:
        raise DataError("cannot build an empty batch")
    p = sequences[0].patches.shape[1]
    n_max = max(s.patches.shape[0] for s in sequences)
    b = len(sequences)
    patches = np.zeros((b, n_max, p))
    pad_mask = np.zeros((b, n_max, p), dtype=bool)
    loss_mask = np.zeros((b, n_max), dtype=bool)
    for i, seq in enumerate(sequences):
        n = seq.patches.shape[0]
        patches[i, :n] = seq.patches
        pad_mask[i, :n] = seq.pad_mask
        loss_mask[i, :n] = seq.loss_mask
    time_index = np.broadcast_to(np.arange(n_max), (b, n_max)).copy()
    variate_id = (np.zeros((b, n_max), dtype=int) if variate_ids is None
                  else np.asarray(variate_ids))
    return Batch(patches, pad_mask, loss_mask, time_index, variate_id,
                 [s.normalizer for s in sequences],
                 ids or [""] * b, freqs or [""] * b)


def make_batch(records, context_patches, patch_size, masking_ratio, seed):
    """Sample one training window per record and stack them into a batch.

    Window starts are uniform per record; windows shorter than the requested
    context fall back to the whole series. Deterministic for a given seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    sequences = []
    for rec in records:
        s = rec.values.size
        if s < patch_size:
            raise DataError(f"record {rec.id!r} is shorter than one patch")
        window_len = context_patches * patch_size
        if s > window_len:
            start = int(rng.integers(0, s - window_len + 1))
            window = rec.values[start:start + window_len]
        else:
            window = rec.values
        patches, pad = patchify(window, patch_size)
        if patches.shape[0] < 2:
            raise DataError(f"record {rec.id!r} yields a window of fewer than 2 patches")
        sequences.append(causal_normalize(patches, pad, masking_ratio))
    return stack_sequences(sequences, ids=[r.id for r in records],
                           freqs=[r.freq for r in records])


def flatten_group(records, patch_size, masking_ratio):
    """Flatten the variates of one multivariate series into a single token
    sequence, lexicographic by record id, each variate normalized on its own.

    Returns a single-item Batch whose time_index restarts per variate.
    """
    records = sorted(records, key=lambda r: r.id)
    seqs = [causal_normalize(*patchify(r.values, patch_size), masking_ratio)
            for r in records]
    patches = np.concatenate([s.patches for s in seqs], axis=0)[None]
    pad_mask = np.concatenate([s.pad_mask for s in seqs], axis=0)[None]
    loss_mask = np.concatenate([s.loss_mask for s in seqs], axis=0)[None]
    time_index = np.concatenate([np.arange(s.patches.shape[0]) for s in seqs])[None]
    variate_id = np.concatenate([np.full(s.patches.shape[0], vi, dtype=int)
                                 for vi, s in enumerate(seqs)])[None]
    return Batch(patches, pad_mask, loss_mask, time_index, variate_id,
                 [s.normalizer for s in seqs],
                 [r.id for r in records], [r.freq for r in records])
