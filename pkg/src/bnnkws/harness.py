"""End-to-end experiment orchestration.

A run takes a pre-trained 12-class head, expands it with the scenario's new
classes, consumes a shuffled stream through one of the seven update rules,
and scores the result on the old/new/all partitions of the test set.
Features come from one of three sources: the BNN extractor over wav files,
a precomputed feature cache, or seeded synthetic Gaussian clusters pushed
through a fixed random rotation (a stand-in for the frozen extractor that
makes the full pipeline runnable without the speech dataset).

Everything is deterministic given (config, seeds): streams derive their
shuffle from (seed, scenario), runs execute in a worker pool but reports
are merged in sorted key order, and emitted files contain no timestamps.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio_frontend import FrontendConfig, PcmClip, load_wav, log_mel
from .bnn_engine import BnnModel, forward_features, load_model
from .cl_algorithms import (
    Algorithm,
    ClConfig,
    ClHead,
    cl_step,
    expand_head,
    flush_batch,
    make_state,
)
from .dataset_streams import (
    ALL_CLASSES,
    NUMERIC_WORDS,
    PRETRAIN_CLASSES,
    SampleRef,
    Scenario,
    Splits,
    draw_stream,
    enumerate_scenarios,
)
from .errors import ConfigError, DataError, NumericError
from .flops_model import FlopQuery, backprop_flops

__all__ = [
    "SWEEP_BUDGETS",
    "SyntheticSpec",
    "SyntheticFeatures",
    "BnnFeatures",
    "CachedFeatures",
    "RunConfig",
    "RunRow",
    "RunReport",
    "fit_head",
    "evaluate_head",
    "evaluate",
    "run_continual",
    "sensitivity_sweep",
    "emit_report",
    "load_report",
    "save_feature_cache",
]

# Exponential data-volume sweep, worst-case (four new classes) scenario.
SWEEP_BUDGETS = (64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384)

CSV_COLUMNS = (
    "algorithm",
    "scenario",
    "k_new",
    "budget",
    "seed",
    "acc_old",
    "acc_new",
    "acc_all",
    "backprop_flops",
)


# --- feature sources ---------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Geometry and sizes of the synthetic cluster world.

    Cluster means and the frozen rotation depend only on geometry_seed, so
    different data seeds redraw samples on fixed class geometry.
    """

    world_seed: int = 0
    geometry_seed: int = 97
    feature_dim: int = 12
    pretrain_per_class: int = 80
    pool_per_class: int = 1300
    test_per_class: int = 25
    mean_scale: float = 4.0
    noise_scale: float = 1.0
    # Gentle pretraining keeps the 12-class logit scale moderate: argmax
    # accuracy on separable clusters is scale-free, and the zero-initialized
    # new-class columns can then catch up within a short stream even for the
    # slow batch-mean rules.
    pretrain_iterations: int = 35
    pretrain_lr: float = 0.2


class SyntheticFeatures:
    """Seeded Gaussian class clusters behind a fixed random rotation."""

    def __init__(self, spec: SyntheticSpec = SyntheticSpec()):
        self.spec = spec
        m = spec.feature_dim
        geo = np.random.Generator(np.random.PCG64(spec.geometry_seed))
        means = geo.normal(size=(len(ALL_CLASSES), m))
        means *= spec.mean_scale / np.linalg.norm(means, axis=1, keepdims=True)
        self._means = means
        self._rotation, _ = np.linalg.qr(geo.normal(size=(m, m)))
        self._rng = np.random.Generator(np.random.PCG64(spec.world_seed))

        self.feature_dim = m
        self.pretrain_features, self.pretrain_labels = self._draw(
            PRETRAIN_CLASSES, spec.pretrain_per_class
        )
        self.pool_features, self.pool_labels = self._draw(
            ALL_CLASSES, spec.pool_per_class
        )
        self.test_features, self.test_labels = self._draw(
            ALL_CLASSES, spec.test_per_class
        )

    def _draw(self, classes, per_class) -> tuple[np.ndarray, list[str]]:
        feats, labels = [], []
        for cls in classes:
            mean = self._means[ALL_CLASSES.index(cls)]
            noise = self._rng.normal(size=(per_class, self.feature_dim))
            feats.append(mean + self.spec.noise_scale * noise)
            labels.extend([cls] * per_class)
        return np.vstack(feats) @ self._rotation.T, labels


def _read_clip(root: str | Path, ref: SampleRef) -> PcmClip:
    path = Path(root) / ref.path
    if ref.crop_offset is None:
        return load_wav(path)
    import wave

    with wave.open(str(path), "rb") as w:
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2")
    crop = samples[ref.crop_offset : ref.crop_offset + 16000]
    if crop.shape[0] < 16000:
        crop = np.concatenate([crop, np.zeros(16000 - crop.shape[0], np.int16)])
    return PcmClip(crop)


class BnnFeatures:
    """Features from the frozen extractor over the dataset's wav files."""

    def __init__(self, splits: Splits, root: str | Path, model: BnnModel,
                 frontend: FrontendConfig):
        self.splits = splits
        self.root = root
        self.model = model
        self.frontend = frontend
        self.feature_dim = model.feature_dim

        self.pool_features = self._extract(splits.cl_pool)
        self.pool_labels = [e.mapped_class for e in splits.cl_pool]
        self.test_features = self._extract(splits.test)
        self.test_labels = [e.mapped_class for e in splits.test]
        self.pretrain_features = self._extract(splits.pretrain)
        self.pretrain_labels = [e.mapped_class for e in splits.pretrain]

    def _extract(self, refs) -> np.ndarray:
        out = np.empty((len(refs), self.feature_dim))
        for i, ref in enumerate(refs):
            spec = log_mel(_read_clip(self.root, ref), self.frontend)
            out[i] = forward_features(self.model, spec)
        return out


class CachedFeatures:
    """Features loaded from an npz cache written by save_feature_cache."""

    def __init__(self, path: str | Path):
        try:
            data = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as e:
            raise DataError(f"{path}: unreadable feature cache: {e}") from None
        required = {
            "pool_features", "pool_labels", "test_features", "test_labels",
            "pretrain_features", "pretrain_labels",
        }
        missing = required - set(data.files)
        if missing:
            raise DataError(f"{path}: cache missing arrays {sorted(missing)}")
        self.pool_features = data["pool_features"].astype(np.float64)
        self.pool_labels = [str(s) for s in data["pool_labels"]]
        self.test_features = data["test_features"].astype(np.float64)
        self.test_labels = [str(s) for s in data["test_labels"]]
        self.pretrain_features = data["pretrain_features"].astype(np.float64)
        self.pretrain_labels = [str(s) for s in data["pretrain_labels"]]
        self.feature_dim = self.pool_features.shape[1]


def save_feature_cache(source, path: str | Path) -> None:
    np.savez(
        path,
        pool_features=source.pool_features,
        pool_labels=np.array(source.pool_labels),
        test_features=source.test_features,
        test_labels=np.array(source.test_labels),
        pretrain_features=source.pretrain_features,
        pretrain_labels=np.array(source.pretrain_labels),
    )


# --- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    feature_source: str = "synthetic"  # synthetic | bnn | cache
    dataset_root: str | None = None
    weights_path: str | None = None
    cache_path: str | None = None
    head_path: str | None = None
    out_dir: str | None = None
    algorithms: tuple[Algorithm, ...] = tuple(Algorithm)
    new_classes: int | tuple[str, ...] = 4  # k, or one explicit subset
    sample_budget: int | None = 2048
    seeds: tuple[int, ...] = (0,)
    split_seed: int = 0
    workers: int = 1
    eval_every: int | None = None
    cl: ClConfig = field(default_factory=ClConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def __post_init__(self) -> None:
        if self.feature_source not in ("synthetic", "bnn", "cache"):
            raise ConfigError(f"unknown feature source {self.feature_source!r}")
        if not self.algorithms:
            raise ConfigError("at least one algorithm must be selected")
        if self.sample_budget is not None and self.sample_budget < 0:
            raise ConfigError("sample budget must be nonnegative")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def scenarios(self) -> list[Scenario]:
        if isinstance(self.new_classes, int):
            return enumerate_scenarios(self.new_classes)
        return [Scenario(tuple(self.new_classes))]

    def to_dict(self) -> dict:
        """Experiment parameters as JSON-ready data. out_dir is an output
        location, not a parameter, so it is excluded (reports must not
        depend on where they are written)."""

        def convert(value):
            if isinstance(value, Algorithm):
                return value.value
            if dataclasses.is_dataclass(value) and not isinstance(value, type):
                return {
                    f.name: convert(getattr(value, f.name))
                    for f in dataclasses.fields(value)
                }
            if isinstance(value, tuple):
                return [convert(v) for v in value]
            return value

        d = convert(self)
        d.pop("out_dir")
        return d

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass(frozen=True)
class RunRow:
    algorithm: str
    scenario: str
    k_new: int
    budget: int | None
    seed: int | str
    acc_old: float
    acc_new: float
    acc_all: float
    backprop_flops: int
    stream_len: int = 0
    eval_trace: tuple[tuple[int, float], ...] = ()

    def to_dict(self) -> dict:
        d = {
            "algorithm": self.algorithm,
            "scenario": self.scenario,
            "k_new": self.k_new,
            "budget": self.budget,
            "seed": self.seed,
            "acc_old": self.acc_old,
            "acc_new": self.acc_new,
            "acc_all": self.acc_all,
            "backprop_flops": self.backprop_flops,
            "stream_len": self.stream_len,
        }
        if self.eval_trace:
            d["eval_trace"] = [list(p) for p in self.eval_trace]
        return d


@dataclass(frozen=True)
class RunReport:
    rows: tuple[RunRow, ...]
    config: dict
    config_digest: str


# --- head fitting and evaluation ---------------------------------------------


def fit_head(
    features: np.ndarray,
    labels: list[str],
    class_labels: tuple[str, ...],
    learning_rate: float = 0.5,
    iterations: int = 300,
    init: ClHead | None = None,
) -> ClHead:
    """Full-batch gradient descent on mean cross entropy.

    Used to fit the pre-trained head on extractor features; the extractor
    itself stays frozen.
    """
    f = np.asarray(features, dtype=np.float64)
    idx = {c: i for i, c in enumerate(class_labels)}
    try:
        y = np.array([idx[label] for label in labels])
    except KeyError as e:
        raise DataError(f"label {e} not in {class_labels}") from None
    n, m = f.shape
    onehot = np.zeros((n, len(class_labels)))
    onehot[np.arange(n), y] = 1.0

    head = init if init is not None else ClHead.zeros(m, class_labels)
    w, b = head.weights.copy(), head.bias.copy()
    for _ in range(iterations):
        z = f @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= learning_rate * (f.T @ g)
        b -= learning_rate * g.sum(axis=0)
    return ClHead(w, b, class_labels)


def evaluate_head(head: ClHead, features: np.ndarray, label_indices: np.ndarray) -> float:
    """Fraction of argmax-correct predictions (ties to the lowest index)."""
    logits = np.asarray(features, dtype=np.float64) @ head.weights + head.bias
    return float(np.mean(np.argmax(logits, axis=1) == label_indices))


def evaluate(state, features: np.ndarray, labels: list[str], classes) -> float:
    """Accuracy of a learning state on the test samples whose label is in
    `classes`. Read-only: the state is never modified."""
    keep = [i for i, label in enumerate(labels) if label in set(classes)]
    if not keep:
        raise DataError(f"no test samples for partition {sorted(set(classes))}")
    head = state.head
    if state.algorithm is Algorithm.CWR:
        head = state.consolidated_head
    idx = {c: i for i, c in enumerate(head.class_labels)}
    sub = np.asarray(features)[keep]
    y = np.array([idx[labels[i]] for i in keep])
    return evaluate_head(head, sub, y)


# --- the run itself ----------------------------------------------------------


def _build_source(cfg: RunConfig):
    if cfg.feature_source == "synthetic":
        return SyntheticFeatures(cfg.synthetic)
    if cfg.feature_source == "cache":
        if cfg.cache_path is None:
            raise ConfigError("feature_source=cache requires cache_path")
        return CachedFeatures(cfg.cache_path)
    if cfg.dataset_root is None or cfg.weights_path is None:
        raise ConfigError("feature_source=bnn requires dataset_root and weights_path")
    from .dataset_streams import index_dataset, split_dataset

    index = index_dataset(cfg.dataset_root, seed=cfg.split_seed)
    splits = split_dataset(index, seed=cfg.split_seed)
    model = load_model(cfg.weights_path)
    return BnnFeatures(splits, cfg.dataset_root, model, cfg.frontend)


def _pretrained_head(cfg: RunConfig, source) -> ClHead:
    if cfg.head_path is not None:
        from .cl_algorithms import load_state

        return load_state(cfg.head_path, class_labels=PRETRAIN_CLASSES).head
    return fit_head(
        source.pretrain_features,
        source.pretrain_labels,
        PRETRAIN_CLASSES,
        learning_rate=cfg.synthetic.pretrain_lr,
        iterations=cfg.synthetic.pretrain_iterations,
    )


def _check_finite(state) -> None:
    heads = [state.head, state.copy_head, state.consolidated_head]
    for head in heads:
        if head is not None and not (
            np.isfinite(head.weights).all() and np.isfinite(head.bias).all()
        ):
            raise NumericError("non-finite learning state after stream")


def _run_single(
    algorithm: Algorithm,
    scenario: Scenario,
    scenario_ordinal: int,
    seed: int,
    source,
    pretrained: ClHead,
    cfg: RunConfig,
) -> RunRow:
    expanded = expand_head(pretrained, scenario.new_classes)
    clcfg = replace(cfg.cl, initial_class_count=pretrained.num_classes)
    state = make_state(algorithm, expanded, clcfg)

    allowed = set(scenario.known_classes) | set(scenario.new_classes)
    order = draw_stream(
        source.pool_labels, allowed, cfg.sample_budget, [seed, scenario_ordinal]
    )
    label_idx = {c: i for i, c in enumerate(expanded.class_labels)}

    trace = []
    for step, i in enumerate(order, start=1):
        state = cl_step(
            state, source.pool_features[i], label_idx[source.pool_labels[i]], clcfg
        )
        if cfg.eval_every and step % cfg.eval_every == 0:
            trace.append(
                (step, evaluate(state, source.test_features, source.test_labels, allowed))
            )
    state = flush_batch(state, clcfg)
    _check_finite(state)

    acc_old = evaluate(
        state, source.test_features, source.test_labels, scenario.known_classes
    )
    acc_new = evaluate(
        state, source.test_features, source.test_labels, scenario.new_classes
    )
    acc_all = evaluate(state, source.test_features, source.test_labels, allowed)

    k = len(scenario.new_classes)
    flops = backprop_flops(
        FlopQuery(algorithm, pretrained.num_classes, expanded.num_classes,
                  clcfg.batch_size)
    )
    return RunRow(
        algorithm=algorithm.value,
        scenario=scenario.name,
        k_new=k,
        budget=cfg.sample_budget,
        seed=seed,
        acc_old=acc_old,
        acc_new=acc_new,
        acc_all=acc_all,
        backprop_flops=flops,
        stream_len=len(order),
        eval_trace=tuple(trace),
    )


def _mean_rows(rows: list[RunRow]) -> list[RunRow]:
    groups: dict[tuple, list[RunRow]] = {}
    for row in rows:
        groups.setdefault((row.algorithm, row.k_new, row.budget), []).append(row)
    out = []
    for (alg, k, budget), members in sorted(groups.items(), key=str):
        out.append(
            RunRow(
                algorithm=alg,
                scenario="mean",
                k_new=k,
                budget=budget,
                seed="mean",
                acc_old=float(np.mean([r.acc_old for r in members])),
                acc_new=float(np.mean([r.acc_new for r in members])),
                acc_all=float(np.mean([r.acc_all for r in members])),
                backprop_flops=members[0].backprop_flops,
                stream_len=members[0].stream_len,
            )
        )
    return out


def run_continual(
    cfg: RunConfig, source=None, pretrained: ClHead | None = None
) -> RunReport:
    """Run every (algorithm, scenario, seed) combination and score it.

    Rows are merged in sorted key order regardless of worker scheduling;
    scenario- and seed-averaged rows (scenario="mean") follow the per-run
    rows. On failure, partial results are flushed to out_dir before the
    error propagates.
    """
    if source is None:
        source = _build_source(cfg)
    if pretrained is None:
        pretrained = _pretrained_head(cfg, source)

    scenarios = cfg.scenarios()
    tasks = [
        (alg, scenario, ordinal, seed)
        for alg in cfg.algorithms
        for ordinal, scenario in enumerate(scenarios)
        for seed in cfg.seeds
    ]

    rows: list[RunRow] = []
    try:
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                futures = [
                    pool.submit(
                        _run_single, alg, scen, ordinal, seed, source, pretrained, cfg
                    )
                    for alg, scen, ordinal, seed in tasks
                ]
                for f in futures:
                    rows.append(f.result())
        else:
            for alg, scen, ordinal, seed in tasks:
                rows.append(
                    _run_single(alg, scen, ordinal, seed, source, pretrained, cfg)
                )
    except Exception:
        if cfg.out_dir and rows:
            partial = RunReport(
                tuple(_sorted_rows(rows)), cfg.to_dict(), cfg.digest()
            )
            emit_report(partial, cfg.out_dir, formats=("json",), stem="partial_report")
        raise

    rows = _sorted_rows(rows)
    rows.extend(_mean_rows(rows))
    return RunReport(tuple(rows), cfg.to_dict(), cfg.digest())


def _sorted_rows(rows: list[RunRow]) -> list[RunRow]:
    return sorted(rows, key=lambda r: (r.algorithm, r.k_new, r.scenario,
                                       str(r.budget), str(r.seed)))


def sensitivity_sweep(cfg: RunConfig, source=None, pretrained: ClHead | None = None) -> RunReport:
    """Data-volume sweep: budgets 64..16384 on the four-new-class scenario."""
    if source is None:
        source = _build_source(cfg)
    if pretrained is None:
        pretrained = _pretrained_head(cfg, source)

    rows: list[RunRow] = []
    for budget in SWEEP_BUDGETS:
        step_cfg = replace(cfg, sample_budget=budget, new_classes=NUMERIC_WORDS)
        report = run_continual(step_cfg, source=source, pretrained=pretrained)
        rows.extend(report.rows)
    return RunReport(tuple(rows), cfg.to_dict(), cfg.digest())


# --- report emission ---------------------------------------------------------


def _csv_cell(value) -> str:
    if value is None:
        return "all"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def emit_report(
    report: RunReport,
    out_dir: str | Path,
    formats: tuple[str, ...] = ("csv", "json"),
    stem: str = "report",
) -> dict[str, Path]:
    """Write the report as CSV and/or JSON with a stable column order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    if "csv" in formats:
        lines = [",".join(CSV_COLUMNS)]
        for row in report.rows:
            d = row.to_dict()
            lines.append(",".join(_csv_cell(d[c]) for c in CSV_COLUMNS))
        path = out_dir / f"{stem}.csv"
        path.write_text("\n".join(lines) + "\n")
        written["csv"] = path
    if "json" in formats:
        payload = {
            "config_digest": report.config_digest,
            "config": report.config,
            "rows": [row.to_dict() for row in report.rows],
        }
        path = out_dir / f"{stem}.json"
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        written["json"] = path
    return written


def load_report(path: str | Path) -> RunReport:
    payload = json.loads(Path(path).read_text())
    rows = []
    for d in payload["rows"]:
        rows.append(
            RunRow(
                algorithm=d["algorithm"],
                scenario=d["scenario"],
                k_new=d["k_new"],
                budget=d["budget"],
                seed=d["seed"],
                acc_old=d["acc_old"],
                acc_new=d["acc_new"],
                acc_all=d["acc_all"],
                backprop_flops=d["backprop_flops"],
                stream_len=d.get("stream_len", 0),
                eval_trace=tuple(tuple(p) for p in d.get("eval_trace", [])),
            )
        )
    return RunReport(tuple(rows), payload["config"], payload["config_digest"])
