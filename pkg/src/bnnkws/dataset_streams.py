"""Dataset indexing, the three-way split, and continual-learning streams.

The 35 speech-commands keywords plus background noise collapse onto 16
classes: the ten command words, the four numeric words, "silence"
(one-second crops of the noise recordings), and "unknown" (every other
keyword, down-sampled so it does not dominate). Splitting is stratified by
class: ~3% test, ~40% pre-training drawn from the 12 non-numeric classes
only, remainder to the continual-learning pool with all 16 classes.

All sampling uses numpy's PCG64 generator, seeded explicitly; the same
(root, seed, fractions) always reproduce the same index, splits, and
streams. Manifests record the generator name so runs can be replayed.
"""

from __future__ import annotations

import itertools
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

__all__ = [
    "COMMAND_WORDS",
    "NUMERIC_WORDS",
    "SILENCE",
    "UNKNOWN",
    "PRETRAIN_CLASSES",
    "ALL_CLASSES",
    "RNG_NAME",
    "SampleRef",
    "DatasetIndex",
    "Splits",
    "Scenario",
    "Stream",
    "map_keyword",
    "index_dataset",
    "split_dataset",
    "enumerate_scenarios",
    "draw_stream",
    "build_stream",
    "save_manifest",
    "load_manifest",
]

COMMAND_WORDS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
NUMERIC_WORDS = ("one", "two", "three", "four")
SILENCE = "silence"
UNKNOWN = "unknown"

# The 12 classes the extractor head is pre-trained on, in canonical order,
# followed by the numeric words that arrive during continual learning.
PRETRAIN_CLASSES = COMMAND_WORDS + (SILENCE, UNKNOWN)
ALL_CLASSES = PRETRAIN_CLASSES + NUMERIC_WORDS

RNG_NAME = "numpy-PCG64"

_NOISE_DIR = "_background_noise_"
_CLIP_SAMPLES = 16000


def map_keyword(keyword: str) -> str:
    """GSC keyword folder name -> one of the 16 classes."""
    if keyword in COMMAND_WORDS or keyword in NUMERIC_WORDS:
        return keyword
    return UNKNOWN


@dataclass(frozen=True)
class SampleRef:
    """One labeled clip: a wav path, optionally a crop into a noise file."""

    path: str  # relative to the dataset root
    raw_keyword: str
    mapped_class: str
    crop_offset: int | None = None


@dataclass(frozen=True)
class DatasetIndex:
    root: str
    entries: tuple[SampleRef, ...]

    def by_class(self) -> dict[str, list[SampleRef]]:
        out: dict[str, list[SampleRef]] = {}
        for e in self.entries:
            out.setdefault(e.mapped_class, []).append(e)
        return out


@dataclass(frozen=True)
class Splits:
    test: tuple[SampleRef, ...]
    pretrain: tuple[SampleRef, ...]
    cl_pool: tuple[SampleRef, ...]
    seed: int
    test_fraction: float = 0.03
    pretrain_fraction: float = 0.40


@dataclass(frozen=True)
class Scenario:
    """A continual-learning task: which numeric words arrive as new classes."""

    new_classes: tuple[str, ...]
    known_classes: tuple[str, ...] = PRETRAIN_CLASSES

    def __post_init__(self) -> None:
        if not self.new_classes:
            raise ValueError("a scenario needs at least one new class")
        bad = set(self.new_classes) - set(NUMERIC_WORDS)
        if bad:
            raise ValueError(f"not numeric keywords: {sorted(bad)}")

    @property
    def name(self) -> str:
        return "+".join(self.new_classes)


@dataclass(frozen=True)
class Stream:
    """Shuffled labeled sample sequence fed to the learner."""

    events: tuple[SampleRef, ...]
    seed: int

    def labels(self) -> list[str]:
        return [e.mapped_class for e in self.events]


def _wav_length(path: Path) -> int:
    try:
        with wave.open(str(path), "rb") as w:
            return w.getnframes()
    except (wave.Error, OSError) as e:
        raise DataError(f"{path}: unreadable wav: {e}") from None


def index_dataset(root: str | Path, seed: int = 0) -> DatasetIndex:
    """Index a speech-commands directory tree into the 16-class selection.

    Command and numeric keyword folders are taken whole. The remaining
    keyword folders feed the "unknown" class, down-sampled to the mean
    command-class count to keep the selection balanced; "silence" entries
    are synthesized as seeded one-second crops of the background-noise
    files, at the same count.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")

    keyword_dirs = sorted(
        d for d in root.iterdir() if d.is_dir() and d.name != _NOISE_DIR
    )
    if not keyword_dirs:
        raise DataError(f"{root}: no keyword folders found")

    rng = np.random.Generator(np.random.PCG64(seed))
    kept: list[SampleRef] = []
    unknown_pool: list[SampleRef] = []
    command_counts: list[int] = []

    for d in keyword_dirs:
        keyword = d.name
        files = sorted(p.name for p in d.glob("*.wav"))
        refs = [
            SampleRef(f"{keyword}/{name}", keyword, map_keyword(keyword))
            for name in files
        ]
        if keyword in COMMAND_WORDS:
            command_counts.append(len(refs))
            kept.extend(refs)
        elif keyword in NUMERIC_WORDS:
            kept.extend(refs)
        else:
            unknown_pool.extend(refs)

    target = int(round(np.mean(command_counts))) if command_counts else 0

    if unknown_pool:
        take = min(target, len(unknown_pool)) if command_counts else len(unknown_pool)
        order = rng.permutation(len(unknown_pool))[:take]
        kept.extend(unknown_pool[i] for i in sorted(order))

    noise_dir = root / _NOISE_DIR
    if noise_dir.is_dir() and target > 0:
        noise_files = sorted(p for p in noise_dir.glob("*.wav"))
        if noise_files:
            lengths = {p: _wav_length(p) for p in noise_files}
            for _ in range(target):
                p = noise_files[int(rng.integers(len(noise_files)))]
                span = max(lengths[p] - _CLIP_SAMPLES, 0)
                offset = int(rng.integers(span + 1))
                kept.append(
                    SampleRef(
                        f"{_NOISE_DIR}/{p.name}", _NOISE_DIR, SILENCE, offset
                    )
                )

    return DatasetIndex(str(root), tuple(kept))


def _apportion(targets: dict[str, int], total: int) -> dict[str, int]:
    """Largest-remainder split of `total` across classes, proportional to
    the available counts in `targets`."""
    pool = sum(targets.values())
    quotas = {c: total * n / pool for c, n in targets.items()}
    out = {c: int(q) for c, q in quotas.items()}
    short = total - sum(out.values())
    by_frac = sorted(targets, key=lambda c: (out[c] - quotas[c], c))
    for c in by_frac[:short]:
        out[c] += 1
    return out


def split_dataset(
    index: DatasetIndex,
    seed: int,
    pretrain_fraction: float = 0.40,
    test_fraction: float = 0.03,
) -> Splits:
    """Stratified three-way split; see the module docstring for the rules."""
    if not (0 < test_fraction < 1 and 0 < pretrain_fraction < 1):
        raise ValueError("fractions must lie in (0, 1)")
    if test_fraction + pretrain_fraction >= 1:
        raise ValueError("fractions must sum to less than 1")

    groups = index.by_class()
    total = len(index.entries)
    rng = np.random.Generator(np.random.PCG64(seed))

    # Seeded per-class shuffles, consumed in sorted-class order.
    shuffled: dict[str, list[SampleRef]] = {}
    for cls in sorted(groups):
        members = groups[cls]
        order = rng.permutation(len(members))
        shuffled[cls] = [members[i] for i in order]

    test_quota = _apportion(
        {c: len(v) for c, v in shuffled.items()}, int(round(test_fraction * total))
    )
    if any(q == 0 for q in test_quota.values()):
        empty = sorted(c for c, q in test_quota.items() if q == 0)
        raise DataError(f"test fraction leaves classes empty: {empty}")

    test: list[SampleRef] = []
    rest: dict[str, list[SampleRef]] = {}
    for cls, members in shuffled.items():
        q = test_quota[cls]
        test.extend(members[:q])
        rest[cls] = members[q:]

    pretrain_classes = {c for c in rest if c not in NUMERIC_WORDS}
    pretrain_avail = {c: len(rest[c]) for c in sorted(pretrain_classes)}
    pretrain_target = int(round(pretrain_fraction * total))
    if pretrain_target > sum(pretrain_avail.values()):
        raise DataError("pretrain fraction exceeds available non-numeric samples")
    pretrain_quota = _apportion(pretrain_avail, pretrain_target)

    pretrain: list[SampleRef] = []
    cl_pool: list[SampleRef] = []
    for cls, members in rest.items():
        q = pretrain_quota.get(cls, 0)
        if cls in pretrain_classes and q == 0:
            raise DataError(f"pretrain fraction leaves class {cls!r} empty")
        if q >= len(members):
            raise DataError(f"no samples left in cl pool for class {cls!r}")
        pretrain.extend(members[:q])
        cl_pool.extend(members[q:])

    return Splits(
        tuple(test),
        tuple(pretrain),
        tuple(cl_pool),
        seed,
        test_fraction,
        pretrain_fraction,
    )


def enumerate_scenarios(k: int) -> list[Scenario]:
    """All C(4, k) subsets of the numeric keywords, in deterministic
    lexicographic order over (one, two, three, four)."""
    if not 1 <= k <= len(NUMERIC_WORDS):
        raise ValueError(f"k must be in 1..{len(NUMERIC_WORDS)}, got {k}")
    return [Scenario(combo) for combo in itertools.combinations(NUMERIC_WORDS, k)]


def draw_stream(
    labels: list[str] | tuple[str, ...],
    allowed_classes: set[str],
    sample_budget: int | None,
    seed,
) -> tuple[int, ...]:
    """Pick the indices of a shuffled stream over a labeled pool.

    Entries whose class is not allowed are dropped; the rest are uniformly
    shuffled, and a budget takes the shuffle's prefix (equivalently, a
    uniform draw without replacement). seed may be an int or a sequence of
    ints (fed to numpy's SeedSequence).
    """
    candidates = [i for i, cls in enumerate(labels) if cls in allowed_classes]
    if sample_budget is not None and sample_budget > len(candidates):
        raise DataError(
            f"budget {sample_budget} exceeds {len(candidates)} available samples"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    order = rng.permutation(len(candidates))
    if sample_budget is not None:
        order = order[:sample_budget]
    return tuple(candidates[i] for i in order)


def build_stream(
    splits: Splits,
    scenario: Scenario,
    sample_budget: int | None,
    seed: int,
) -> Stream:
    """Shuffled stream over the cl pool restricted to known + new classes."""
    allowed = set(scenario.known_classes) | set(scenario.new_classes)
    pool_labels = [e.mapped_class for e in splits.cl_pool]
    for cls in sorted(allowed):
        if cls not in pool_labels:
            raise DataError(f"cl pool has no samples of class {cls!r}")
    picks = draw_stream(pool_labels, allowed, sample_budget, seed)
    return Stream(tuple(splits.cl_pool[i] for i in picks), seed)


# --- manifest ---------------------------------------------------------------
#
# Line-oriented text: comment header with seed, fractions, and generator
# name, then one `relative/path<TAB>class<TAB>split` record per sample.
# Silence crops append `#<offset>` to the path.


def _encode_path(ref: SampleRef) -> str:
    if ref.crop_offset is None:
        return ref.path
    return f"{ref.path}#{ref.crop_offset}"


def _decode_ref(encoded: str, cls: str) -> SampleRef:
    path, sep, offset = encoded.partition("#")
    keyword = path.split("/", 1)[0]
    return SampleRef(path, keyword, cls, int(offset) if sep else None)


def save_manifest(splits: Splits, path: str | Path) -> None:
    lines = [
        "# bnnkws splits manifest v1",
        f"# seed={splits.seed} test_fraction={splits.test_fraction} "
        f"pretrain_fraction={splits.pretrain_fraction} rng={RNG_NAME}",
    ]
    for name, refs in (
        ("test", splits.test),
        ("pretrain", splits.pretrain),
        ("cl_pool", splits.cl_pool),
    ):
        lines.extend(
            f"{_encode_path(r)}\t{r.mapped_class}\t{name}" for r in refs
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> Splits:
    seed = 0
    test_fraction, pretrain_fraction = 0.03, 0.40
    buckets: dict[str, list[SampleRef]] = {"test": [], "pretrain": [], "cl_pool": []}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                key, sep, value = token.partition("=")
                if not sep:
                    continue
                if key == "seed":
                    seed = int(value)
                elif key == "test_fraction":
                    test_fraction = float(value)
                elif key == "pretrain_fraction":
                    pretrain_fraction = float(value)
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
        encoded, cls, split = parts
        if split not in buckets:
            raise DataError(f"{path}:{lineno}: unknown split {split!r}")
        buckets[split].append(_decode_ref(encoded, cls))
    return Splits(
        tuple(buckets["test"]),
        tuple(buckets["pretrain"]),
        tuple(buckets["cl_pool"]),
        seed,
        test_fraction,
        pretrain_fraction,
    )
