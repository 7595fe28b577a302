"""End-to-end active-learning experiments, metrics, sweeps, and reports.

One run: train on the seed set, then for each round score the pool (or
draw at random), move the chosen batch through the annotation oracle
into the labeled set, retrain with the composite loss, and evaluate on
the fixed test set. Multi-seed experiments write per-seed learning
curves and per-round selection CSVs into a run directory; ``report``
aggregates them into mean/std curves, a quadrant-pattern census, and
graymap dumps of selected samples' attention.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import acquisition, explain
from .data import (
    DatasetError,
    DatasetSpec,
    PoolState,
    Sample,
    SyntheticDataset,
    generate,
    split,
)
from .model import (
    PrototypeSet,
    SmallCnn,
    TrainConfig,
    _proto_vectors,
    forward_batch,
    save_model,
    train,
)
from .tensor import ContractError

log = logging.getLogger(__name__)

# rng stream tags so strategies share identical initialization and training
# randomness and diverge only through what they select
_INIT, _TRAIN, _SELECT = 11, 13, 17


def _rng(run_seed: int, tag: int, round_idx: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([run_seed, tag, round_idx]))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    strategy: str = "composite"
    lam: float = 0.5
    k: int = 12
    rounds: int = 7
    seeds: tuple = (0, 1, 2, 3, 4)
    out_dir: Optional[str] = None
    warm_start: bool = True
    normalize_entropy: bool = True
    cam_threshold: Optional[float] = None
    tau_h: float = 0.5
    tau_d: float = 0.5

    def validate(self) -> None:
        self.dataset.validate()
        self.train.validate()
        if self.strategy not in acquisition.STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lambda {self.lam} outside [0, 1]")
        if self.k < 1:
            raise ContractError("k must be >= 1")
        if self.rounds < 0:
            raise ContractError("rounds must be >= 0")
        if not self.seeds:
            raise ContractError("need at least one seed")


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    accuracy: float
    macro_auc: float
    mean_dice: float


@dataclass
class RunResult:
    seed: int
    metrics: list[MetricsRecord]
    selections: list[dict]              # round, rank, id, H_norm, D_exp, score, pattern
    round_records: dict[int, list]      # full pool records per scored round
    truncated: bool
    model: SmallCnn
    protos: Optional[PrototypeSet]
    state: PoolState


# ---------------------------------------------------------------------------
# metrics


def _rank_with_ties(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank block."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_binary(scores, positives) -> float:
    """One-vs-rest AUC by the rank statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs both positive and negative samples")
    ranks = _rank_with_ties(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc_from_scores(scores: np.ndarray, labels: np.ndarray) -> tuple[float, list[int]]:
    """Unweighted mean one-vs-rest AUC; classes absent from labels skipped."""
    labels = np.asarray(labels)
    present = set(int(c) for c in np.unique(labels))
    if len(present) < 2:
        raise ContractError("macro-AUC undefined on a single-class test set")
    aucs, skipped = [], []
    for k in range(scores.shape[1]):
        if k not in present:
            skipped.append(k)
            continue
        aucs.append(auc_binary(scores[:, k], labels == k))
    if skipped:
        log.warning("macro-AUC skipped absent classes: %s", skipped)
    return float(np.mean(aucs)), skipped


def evaluate(model: SmallCnn, test_samples: Sequence[Sample], head: str = "linear",
             protos=None, chunk: int = 120) -> MetricsRecord:
    """Accuracy, macro-AUC, and mean CAM/mask Dice over a labeled test set."""
    if not test_samples:
        raise ContractError("evaluate: empty test set")
    pv = _proto_vectors(model, protos) if head == "prototypical" else None
    all_probs, all_labels, dices = [], [], []
    for start in range(0, len(test_samples), chunk):
        batch = test_samples[start:start + chunk]
        images = np.stack([np.asarray(s.image, dtype=np.float64) for s in batch])
        a_data, probs = forward_batch(model, images, head=head, protos=pv)
        preds = probs.argmax(axis=1)
        cams = explain.cam_from_activations(model, a_data, preds, images.shape[-2],
                                            images.shape[-1], head=head, protos=pv)
        for i, s in enumerate(batch):
            dices.append(explain.dice(cams[i], s.esm))
        all_probs.append(probs)
        all_labels.extend(s.label for s in batch)
    probs = np.concatenate(all_probs)
    labels = np.asarray(all_labels)
    acc = float((probs.argmax(axis=1) == labels).mean())
    auc, _ = macro_auc_from_scores(probs, labels)
    return MetricsRecord(round=-1, accuracy=acc, macro_auc=auc,
                         mean_dice=float(np.mean(dices)))


def accuracy(model: SmallCnn, test_samples: Sequence[Sample], head: str = "linear",
             protos=None) -> float:
    return evaluate(model, test_samples, head=head, protos=protos).accuracy


def macro_auc(model: SmallCnn, test_samples: Sequence[Sample], head: str = "linear",
              protos=None) -> float:
    return evaluate(model, test_samples, head=head, protos=protos).macro_auc


def mean_alignment(model: SmallCnn, test_samples: Sequence[Sample], head: str = "linear",
                   protos=None) -> float:
    return evaluate(model, test_samples, head=head, protos=protos).mean_dice


# ---------------------------------------------------------------------------
# one active-learning run


_DATASET_CACHE: dict[DatasetSpec, SyntheticDataset] = {}


def dataset_for(spec: DatasetSpec) -> SyntheticDataset:
    """Datasets are deterministic in their spec, so share one instance."""
    if spec not in _DATASET_CACHE:
        _DATASET_CACHE[spec] = generate(spec)
    return _DATASET_CACHE[spec]


def _assert_bookkeeping(state: PoolState, s0: int, total: int, k: int,
                        truncated: bool) -> None:
    state.check()
    if len(state.labeled) + len(state.pool) != total:
        raise ContractError("labeled + pool size drifted from the initial total")
    if not truncated and len(state.labeled) != s0 + state.round * k:
        raise ContractError(f"labeled set size {len(state.labeled)} != "
                            f"{s0} + {state.round} * {k}")


def run_active_learning(cfg: ExperimentConfig, run_seed: int,
                        dataset: Optional[SyntheticDataset] = None) -> RunResult:
    """Seed training plus ``cfg.rounds`` select/annotate/retrain cycles.

    Deterministic given (cfg, run_seed). Exhausting the pool before the
    final round truncates the run instead of failing.
    """
    cfg.validate()
    dataset = dataset if dataset is not None else dataset_for(cfg.dataset)
    state = split(dataset)
    s0, total = len(state.labeled), len(state.labeled) + len(state.pool)
    head = cfg.train.head

    model = SmallCnn(cfg.dataset.n_classes, cfg.dataset.image_size,
                     seed=_rng(run_seed, _INIT))
    test_samples = [dataset.annotated(i) for i in state.test]
    labeled = [dataset.annotated(i) for i in state.labeled]
    model, protos = train(model, labeled, cfg.train, rng=_rng(run_seed, _TRAIN, 0))
    first = evaluate(model, test_samples, head=head, protos=protos)
    metrics = [replace(first, round=0)]

    selections: list[dict] = []
    round_records: dict[int, list] = {}
    truncated = False
    for t in range(1, cfg.rounds + 1):
        if not state.pool:
            truncated = True
            log.warning("pool exhausted before round %d; truncating run", t)
            break
        k_t = min(cfg.k, len(state.pool))
        truncated = truncated or k_t < cfg.k

        if cfg.strategy == "random":
            rng = _rng(run_seed, _SELECT, t)
            chosen = sorted(int(i) for i in rng.choice(state.pool, size=k_t, replace=False))
            by_id = {}
        else:
            lam_eff = acquisition.strategy_lambda(cfg.strategy, cfg.lam)
            views = [dataset.scoring_view(i) for i in state.pool]
            records = acquisition.score_pool(
                model, views, lam_eff, head=head, protos=protos,
                normalize_entropy=cfg.normalize_entropy,
                cam_threshold=cfg.cam_threshold, tau_h=cfg.tau_h, tau_d=cfg.tau_d)
            round_records[t] = records
            chosen = acquisition.select_top_k(records, k_t)
            by_id = {r.sample_id: r for r in records}

        for rank, sid in enumerate(chosen):
            rec = by_id.get(sid)
            selections.append({
                "round": t, "rank": rank, "id": sid,
                "H_norm": "" if rec is None else repr(rec.entropy_norm),
                "D_exp": "" if rec is None else repr(rec.misalignment),
                "score": "" if rec is None else repr(rec.score),
                "pattern": "" if rec is None else rec.pattern,
            })

        acquired = []
        for sid in chosen:
            label, esm = dataset.oracle_annotate(sid)
            acquired.append(replace(dataset.sample(sid), label=label, esm=esm))
        state.acquire(chosen)
        _assert_bookkeeping(state, s0, total, cfg.k, truncated)
        if set(state.labeled) & set(state.test):
            raise ContractError("test ids leaked into the labeled set")

        if not cfg.warm_start:
            model = SmallCnn(cfg.dataset.n_classes, cfg.dataset.image_size,
                             seed=_rng(run_seed, _INIT))
        labeled = [dataset.annotated(i) for i in state.labeled]
        model, protos = train(model, labeled, cfg.train, rng=_rng(run_seed, _TRAIN, t))
        metrics.append(replace(evaluate(model, test_samples, head=head, protos=protos),
                               round=t))
        if k_t < cfg.k:
            break
    return RunResult(seed=run_seed, metrics=metrics, selections=selections,
                     round_records=round_records, truncated=truncated,
                     model=model, protos=protos, state=state)


# ---------------------------------------------------------------------------
# experiment directories


CURVE_COLUMNS = ("strategy", "lambda", "seed", "round", "accuracy", "macro_auc", "mean_dice")
SELECTION_COLUMNS = ("round", "rank", "id", "H_norm", "D_exp", "score", "pattern")
SWEEP_COLUMNS = ("lambda", "seed", "final_accuracy", "final_macro_auc", "final_mean_dice")


def _lam_field(cfg: ExperimentConfig) -> str:
    return "" if cfg.strategy == "random" else repr(cfg.lam)


def _curve_rows(cfg: ExperimentConfig, results: Sequence[RunResult]) -> list[str]:
    rows = [",".join(CURVE_COLUMNS)]
    for res in results:
        for m in res.metrics:
            rows.append(",".join([cfg.strategy, _lam_field(cfg), str(res.seed),
                                  str(m.round), repr(m.accuracy), repr(m.macro_auc),
                                  repr(m.mean_dice)]))
    return rows


def config_text(cfg: ExperimentConfig) -> str:
    """Flat key=value form, the same format the CLI accepts."""
    d = cfg.dataset
    t = cfg.train
    pairs = [
        ("n_classes", d.n_classes), ("image_size", d.image_size), ("pool", d.n_pool),
        ("seed_size", d.n_seed), ("test", d.n_test), ("noise", d.noise),
        ("p_shortcut_train", d.p_shortcut_train),
        ("p_shortcut_test", "none" if d.p_shortcut_test is None else d.p_shortcut_test),
        ("data_seed", d.seed), ("shortcut", int(d.shortcut)),
        ("alpha", t.alpha), ("lr", t.lr), ("epochs", t.epochs),
        ("batch_size", t.batch_size), ("shots", t.shots), ("head", t.head),
        ("strategy", cfg.strategy), ("lambda", cfg.lam), ("k", cfg.k),
        ("rounds", cfg.rounds), ("seeds", ",".join(str(s) for s in cfg.seeds)),
        ("warm_start", int(cfg.warm_start)), ("normalize_entropy", int(cfg.normalize_entropy)),
        ("cam_threshold", "none" if cfg.cam_threshold is None else cfg.cam_threshold),
        ("tau_h", cfg.tau_h), ("tau_d", cfg.tau_d),
    ]
    return "".join(f"{k} = {v}\n" for k, v in pairs)


def run_experiment(cfg: ExperimentConfig, out_dir=None,
                   dataset: Optional[SyntheticDataset] = None) -> list[RunResult]:
    """All seeds of one strategy config; optionally write run artifacts."""
    cfg.validate()
    results = [run_active_learning(cfg, s, dataset=dataset) for s in cfg.seeds]
    out_dir = out_dir if out_dir is not None else cfg.out_dir
    if out_dir is not None:
        out = Path(out_dir)
        (out / "records").mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config_text(cfg))
        (out / "curves.csv").write_text("\n".join(_curve_rows(cfg, results)) + "\n")
        for res in results:
            rows = [",".join(SELECTION_COLUMNS)]
            for sel in res.selections:
                rows.append(",".join(str(sel[c]) for c in SELECTION_COLUMNS))
            (out / f"selections_seed{res.seed}.csv").write_text("\n".join(rows) + "\n")
            for t, records in sorted(res.round_records.items()):
                acquisition.write_records_csv(
                    records, out / "records" / f"seed{res.seed}_round{t}.csv")
            save_model(res.model, out / f"model_seed{res.seed}.ckpt", res.protos)
    return results


def sweep_lambda(cfg: ExperimentConfig, lambdas: Sequence[float],
                 out_dir=None) -> list[dict]:
    """Composite runs across mixing weights; rows sorted by lambda then seed."""
    if len(lambdas) < 2:
        raise ContractError("lambda sweep needs at least two values")
    out = Path(out_dir) if out_dir is not None else (
        Path(cfg.out_dir) if cfg.out_dir else None)
    rows: list[dict] = []
    for lam in sorted(lambdas):
        run_cfg = replace(cfg, strategy="composite", lam=lam, out_dir=None)
        sub = out / f"lambda_{lam:g}" if out is not None else None
        results = run_experiment(run_cfg, out_dir=sub)
        for res in results:
            final = res.metrics[-1]
            rows.append({"lambda": lam, "seed": res.seed,
                         "final_accuracy": final.accuracy,
                         "final_macro_auc": final.macro_auc,
                         "final_mean_dice": final.mean_dice})
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.csv").write_text(sweep_csv(rows))
    return rows


def sweep_csv(rows: Sequence[dict]) -> str:
    lines = [",".join(SWEEP_COLUMNS)]
    for r in rows:
        lines.append(",".join([repr(float(r["lambda"])), str(r["seed"]),
                               repr(r["final_accuracy"]), repr(r["final_macro_auc"]),
                               repr(r["final_mean_dice"])]))
    by_lam: dict[float, list[dict]] = {}
    for r in rows:
        by_lam.setdefault(float(r["lambda"]), []).append(r)
    for lam in sorted(by_lam):
        grp = by_lam[lam]
        for tag, fn in (("mean", np.mean), ("std", np.std)):
            lines.append(",".join([repr(lam), tag,
                                   repr(float(fn([g["final_accuracy"] for g in grp]))),
                                   repr(float(fn([g["final_macro_auc"] for g in grp]))),
                                   repr(float(fn([g["final_mean_dice"] for g in grp])))]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# report: aggregate curves, pattern census, CAM dumps


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:] if line]


def _run_dirs(root: Path) -> list[Path]:
    dirs = [root] if (root / "curves.csv").exists() else []
    dirs += sorted(p.parent for p in root.glob("*/curves.csv"))
    return dirs


def report(root, out_dir=None) -> Path:
    """Aggregate a finished experiment directory into report files.

    Writes curves_summary.csv (per-strategy mean/std per round),
    census.csv (quadrant-pattern fractions per scored round), and
    graymap dumps of the first seed's final-round selections.
    """
    root = Path(root)
    run_dirs = _run_dirs(root)
    if not run_dirs:
        raise DatasetError(f"no run artifacts (curves.csv) under {root}")
    out = Path(out_dir) if out_dir is not None else root / "report"
    out.mkdir(parents=True, exist_ok=True)

    missing: list[str] = []
    for rd in run_dirs:
        for name in ("config.txt", "curves.csv"):
            if not (rd / name).exists():
                missing.append(str(rd / name))
    if missing:
        raise DatasetError("missing run artifacts: " + ", ".join(missing))

    # per-(strategy, lambda, round) mean/std over seeds
    curve_rows: list[list[str]] = []
    for rd in run_dirs:
        _, rows = _read_csv(rd / "curves.csv")
        curve_rows.extend(rows)
    grouped: dict[tuple, dict[int, list[list[float]]]] = {}
    for strat, lam, _seed, rnd, acc, auc, dice_v in curve_rows:
        by_round = grouped.setdefault((strat, lam), {})
        by_round.setdefault(int(rnd), []).append([float(acc), float(auc), float(dice_v)])
    lines = [",".join(CURVE_COLUMNS)]
    for (strat, lam) in sorted(grouped):
        for rnd in sorted(grouped[(strat, lam)]):
            vals = np.asarray(grouped[(strat, lam)][rnd])
            for tag, fn in (("mean", np.mean), ("std", np.std)):
                agg = fn(vals, axis=0)
                lines.append(",".join([strat, lam, tag, str(rnd), repr(float(agg[0])),
                                       repr(float(agg[1])), repr(float(agg[2]))]))
    (out / "curves_summary.csv").write_text("\n".join(lines) + "\n")

    # quadrant census over full-pool records, one row per seed and round
    census_lines = [",".join(("strategy", "lambda", "seed", "round") + acquisition.PATTERNS)]
    for rd in run_dirs:
        strat, lam = _strategy_of(rd)
        for rec_path in sorted((rd / "records").glob("seed*_round*.csv"),
                               key=_records_sort_key):
            seed_s, round_s = rec_path.stem.replace("seed", "").split("_round")
            _, rows = _read_csv(rec_path)
            patterns = [r[6] for r in rows]
            counts = [patterns.count(p) / len(patterns) for p in acquisition.PATTERNS]
            census_lines.append(",".join([strat, lam, seed_s, round_s]
                                         + [repr(c) for c in counts]))
    (out / "census.csv").write_text("\n".join(census_lines) + "\n")

    for rd in run_dirs:
        _dump_cams(rd, out / "cams" / rd.name)
    return out


def _records_sort_key(path: Path):
    seed_s, round_s = path.stem.replace("seed", "").split("_round")
    return (int(seed_s), int(round_s))


def _strategy_of(run_dir: Path) -> tuple[str, str]:
    pairs = parse_config_pairs((run_dir / "config.txt").read_text())
    lam = pairs.get("lambda", "")
    strat = pairs.get("strategy", "")
    return strat, ("" if strat == "random" else lam)


class ConfigError(ValueError):
    """Malformed configuration file, key, or value."""


_CONFIG_KEYS = (
    "n_classes", "image_size", "pool", "seed_size", "test", "noise",
    "p_shortcut_train", "p_shortcut_test", "data_seed", "shortcut",
    "alpha", "lr", "epochs", "batch_size", "shots", "head",
    "strategy", "lambda", "k", "rounds", "seeds", "out",
    "warm_start", "normalize_entropy", "cam_threshold", "tau_h", "tau_d",
)


def parse_config_pairs(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment."""
    pairs: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line: {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        pairs[key] = value.strip()
    return pairs


def _convert(pairs: dict[str, str], key: str, kind, default):
    if key not in pairs:
        return default
    raw = pairs[key]
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if kind == "optional_float":
            return None if raw.lower() == "none" else float(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def dataset_spec_from_pairs(pairs: dict[str, str]) -> DatasetSpec:
    base = DatasetSpec()
    return DatasetSpec(
        n_classes=_convert(pairs, "n_classes", int, base.n_classes),
        image_size=_convert(pairs, "image_size", int, base.image_size),
        n_pool=_convert(pairs, "pool", int, base.n_pool),
        n_seed=_convert(pairs, "seed_size", int, base.n_seed),
        n_test=_convert(pairs, "test", int, base.n_test),
        noise=_convert(pairs, "noise", float, base.noise),
        p_shortcut_train=_convert(pairs, "p_shortcut_train", float, base.p_shortcut_train),
        p_shortcut_test=_convert(pairs, "p_shortcut_test", "optional_float",
                                 base.p_shortcut_test),
        seed=_convert(pairs, "data_seed", int, base.seed),
        shortcut=_convert(pairs, "shortcut", bool, base.shortcut),
    )


def train_config_from_pairs(pairs: dict[str, str]) -> TrainConfig:
    base = TrainConfig()
    return TrainConfig(
        alpha=_convert(pairs, "alpha", float, base.alpha),
        lr=_convert(pairs, "lr", float, base.lr),
        epochs=_convert(pairs, "epochs", int, base.epochs),
        batch_size=_convert(pairs, "batch_size", int, base.batch_size),
        shots=_convert(pairs, "shots", int, base.shots),
        head=_convert(pairs, "head", str, base.head),
    )


def _parse_seeds(raw: str) -> tuple:
    try:
        return tuple(int(s) for s in raw.split(",") if s.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"bad seeds list {raw!r}") from exc


def experiment_config_from_pairs(pairs: dict[str, str]) -> ExperimentConfig:
    base = ExperimentConfig()
    cfg = ExperimentConfig(
        dataset=dataset_spec_from_pairs(pairs),
        train=train_config_from_pairs(pairs),
        strategy=_convert(pairs, "strategy", str, base.strategy),
        lam=_convert(pairs, "lambda", float, base.lam),
        k=_convert(pairs, "k", int, base.k),
        rounds=_convert(pairs, "rounds", int, base.rounds),
        seeds=_parse_seeds(pairs["seeds"]) if "seeds" in pairs else base.seeds,
        out_dir=pairs.get("out"),
        warm_start=_convert(pairs, "warm_start", bool, base.warm_start),
        normalize_entropy=_convert(pairs, "normalize_entropy", bool,
                                   base.normalize_entropy),
        cam_threshold=_convert(pairs, "cam_threshold", "optional_float",
                               base.cam_threshold),
        tau_h=_convert(pairs, "tau_h", float, base.tau_h),
        tau_d=_convert(pairs, "tau_d", float, base.tau_d),
    )
    try:
        cfg.validate()
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _dump_cams(run_dir: Path, out: Path, max_samples: int = 3) -> None:
    """Graymaps (image, mask, attention) for the first seed's last batch."""
    from .model import load_model

    pairs = parse_config_pairs((run_dir / "config.txt").read_text())
    cfg = experiment_config_from_pairs(pairs)
    seed = cfg.seeds[0]
    sel_path = run_dir / f"selections_seed{seed}.csv"
    ckpt_path = run_dir / f"model_seed{seed}.ckpt"
    missing = [str(p) for p in (sel_path, ckpt_path) if not p.exists()]
    if missing:
        raise DatasetError("missing run artifacts: " + ", ".join(missing))
    _, rows = _read_csv(sel_path)
    if not rows:
        return
    last_round = max(int(r[0]) for r in rows)
    ids = [int(r[2]) for r in rows if int(r[0]) == last_round][:max_samples]

    dataset = dataset_for(cfg.dataset)
    model, protos = load_model(ckpt_path)
    out.mkdir(parents=True, exist_ok=True)
    for sid in ids:
        s = dataset.sample(sid)
        cam = explain.grad_cam_batch(model, s.image[None],
                                     [int(np.argmax(_probs_one(model, s, cfg, protos)))],
                                     head=cfg.train.head, protos=_pv(model, cfg, protos))[0]
        explain.write_pgm(s.image[0], out / f"round{last_round}_id{sid}_image.pgm")
        explain.write_pgm(s.esm.grid, out / f"round{last_round}_id{sid}_mask.pgm")
        explain.write_pgm(cam, out / f"round{last_round}_id{sid}_cam.pgm")


def _pv(model, cfg, protos):
    return _proto_vectors(model, protos) if cfg.train.head == "prototypical" else None


def _probs_one(model, sample, cfg, protos):
    return forward_batch(model, sample.image[None], head=cfg.train.head,
                         protos=_pv(model, cfg, protos))[1][0]
