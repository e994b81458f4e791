"""Experiment driver: train, evaluate, grid runs, lag ablation, result files."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .autodiff import ConfigError, NumericError, Tape, Tensor, backward, sgd_step
from .datagen import BiasedClassConfig, ClassificationSet, SpanConfig, SpanSet, gen_span_like, gen_vqa_like
from .debias import StrategyKind, combine, infer_logits
from .losses import LossConfig, cross_entropy, focal_loss, gamma, span_losses
from .metrics import ResultRow, harmonic_mean, macro_f1, open_ended_accuracy, standard_accuracy
from .models import ClassifierModel, SpanModel, decode_span, forward_classifier, forward_span, save_params
from . import autodiff as ad

log = logging.getLogger(__name__)

__all__ = [
    "RunError",
    "ExperimentConfig",
    "TraceRow",
    "TrainResult",
    "build_datasets",
    "train",
    "evaluate",
    "run_experiment",
    "grid_run",
    "ablate_lag",
    "clamp_count",
    "write_rows",
    "read_rows",
    "aggregate",
    "RESULT_COLUMNS",
    "TRACE_COLUMNS",
]

RESULT_COLUMNS = ["method", "loss", "strategy", "seed", "split", "metric", "value"]
TRACE_COLUMNS = ["batch_index", "base_loss", "gamma", "scaled_loss"]
AGGREGATE_COLUMNS = ["method", "loss", "strategy", "split", "metric", "mean", "std", "n"]
DEFAULT_SEEDS = (1337, 1338, 1339, 1340, 1341)


class RunError(RuntimeError):
    """A training run diverged or otherwise failed."""


@dataclass(frozen=True)
class Schedule:
    """Optional warm-up then step decay; off unless configured."""

    warmup_epochs: int = 0
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 0.25

    def lr_at(self, base_lr: float, epoch: int) -> float:
        lr = base_lr
        if self.warmup_epochs > 0 and epoch < self.warmup_epochs:
            lr *= (epoch + 1) / self.warmup_epochs
        lr *= self.decay_factor ** sum(epoch >= d for d in self.decay_epochs)
        return lr


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "classification"
    strategy: StrategyKind = StrategyKind.NONE
    loss: LossConfig = field(default_factory=LossConfig)
    dataset: BiasedClassConfig | SpanConfig = field(default_factory=BiasedClassConfig)
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    max_grad_norm: float = 0.25
    name: str | None = None
    cf_c: float = 1.0
    cf_fusion: str = "sum"
    # "paper": best-on-validation model for in-distribution splits, final model otherwise
    selection: str = "paper"
    max_answer_len: int = 30
    hidden: int | None = None
    schedule: Schedule | None = None
    optimizer: str = "sgd"

    def __post_init__(self):
        object.__setattr__(self, "strategy", StrategyKind(self.strategy))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.task not in ("classification", "span"):
            raise ConfigError(f"unknown task {self.task!r}")
        want = BiasedClassConfig if self.task == "classification" else SpanConfig
        if not isinstance(self.dataset, want):
            raise ConfigError(f"{self.task} task needs a {want.__name__}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0 or not self.max_grad_norm > 0:
            raise ConfigError("lr and max_grad_norm must be positive")
        if self.cf_c < 0:
            raise ConfigError("cf_c must be >= 0")
        if self.optimizer not in ("sgd", "adamax"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.selection not in ("paper", "final"):
            raise ConfigError(f"unknown selection {self.selection!r}")

    @property
    def method(self) -> str:
        return self.name or f"{self.task}-{self.strategy.value}"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["strategy"] = self.strategy.value
        d["seeds"] = list(self.seeds)
        if self.schedule is not None:
            d["schedule"]["decay_epochs"] = list(self.schedule.decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        task = d.get("task", "classification")
        ds_cls = BiasedClassConfig if task == "classification" else SpanConfig
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossConfig(**d["loss"])
        if isinstance(d.get("dataset"), dict) or "dataset" not in d:
            d["dataset"] = ds_cls(**d.get("dataset", {}))
        if isinstance(d.get("schedule"), dict):
            sch = dict(d["schedule"])
            sch["decay_epochs"] = tuple(sch.get("decay_epochs", ()))
            d["schedule"] = Schedule(**sch)
        return cls(**d)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TraceRow:
    batch_index: int
    base_loss: float
    gamma: float
    scaled_loss: float


@dataclass
class TrainResult:
    model: Any
    trace: list[TraceRow]
    best_state: dict | None = None
    seed: int = 0


def build_datasets(cfg: ExperimentConfig, seed: int) -> dict:
    if cfg.task == "classification":
        return gen_vqa_like(cfg.dataset, seed)
    return gen_span_like(cfg.dataset, seed)


def _new_model(cfg: ExperimentConfig, seed: int):
    ds = cfg.dataset
    if cfg.task == "classification":
        return ClassifierModel(ds.context_dim, ds.question_dim, ds.n_answers, hidden=cfg.hidden or 64, seed=seed)
    return SpanModel(ds.feature_dim, ds.n_tokens, hidden=cfg.hidden or 32, seed=seed)


def _main_objective(scores: Tensor, targets, loss_cfg: LossConfig, state, gamma_input: float | None):
    """Return (objective tensor, base loss value, gamma)."""
    if loss_cfg.kind == "focal":
        base = focal_loss(scores, targets, loss_cfg.focal_gamma)
        return base, base.item(), 1.0
    base = cross_entropy(scores, targets)
    if loss_cfg.kind == "ce":
        return base, base.item(), 1.0
    g = gamma(state, base.item() if gamma_input is None else gamma_input)
    return ad.scale(base, g), base.item(), g


def _sum(tensors: list[Tensor]) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = ad.add(out, t)
    return out


def _classification_step(cfg, model, batch: ClassificationSet, state):
    y = batch.label
    main, bias = forward_classifier(model, batch.qfeat, batch.cfeat)
    comb = combine(cfg.strategy, main, bias, model.gate, model.cf_const, cfg.cf_fusion)
    g_in = None
    if cfg.loss.gamma_source == "main" and cfg.strategy is not StrategyKind.NONE:
        g_in = cross_entropy(ad.detach(main), y).item()
    objective, base, g = _main_objective(comb.scores, y, cfg.loss, state, g_in)
    terms = [objective] + [cross_entropy(a, y) for a in comb.aux]
    return _sum(terms), base, g, objective.item()


def _span_step(cfg, model, batch: SpanSet, states):
    s, e = batch.start, batch.end
    st, en, b_st, b_en = forward_span(model, batch.tokens)
    c_s = combine(cfg.strategy, st, b_st, model.gate, model.cf_const_start, cfg.cf_fusion)
    c_e = combine(cfg.strategy, en, b_en, model.gate, model.cf_const_end, cfg.cf_fusion)
    gamma_from = None
    if cfg.loss.gamma_source == "main" and cfg.strategy is not StrategyKind.NONE:
        gamma_from = (cross_entropy(ad.detach(st), s).item(), cross_entropy(ad.detach(en), e).item())
    ls, le, tot, info = span_losses(c_s.scores, c_e.scores, (s, e), cfg.loss, states, gamma_from=gamma_from)
    terms = [tot]
    terms += [cross_entropy(a, s) for a in c_s.aux]
    terms += [cross_entropy(a, e) for a in c_e.aux]
    return _sum(terms), info["base"], info["gamma"], tot.item()


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i : i + batch_size]
        if idx.shape[0] >= 2:
            yield idx


def train(cfg: ExperimentConfig, datasets: dict, seed: int) -> TrainResult:
    """Train one model; returns it with the per-batch loss trace.

    Raises :class:`RunError` if a loss or gradient becomes non-finite.
    """
    model = _new_model(cfg, seed)
    params = model.params()
    opt = ad.Adamax(params) if cfg.optimizer == "adamax" else None
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    if cfg.task == "classification":
        train_set = datasets["train"]
        step = _classification_step
        state = cfg.loss.new_state()
    else:
        train_set = datasets["train_k"]
        step = _span_step
        state = {}
    val = datasets.get("val") if cfg.task == "classification" and cfg.selection == "paper" else None
    trace: list[TraceRow] = []
    best_acc, best_state = -1.0, None
    t = 0
    for epoch in range(cfg.epochs):
        lr = cfg.schedule.lr_at(cfg.lr, epoch) if cfg.schedule else cfg.lr
        for idx in _batches(len(train_set), cfg.batch_size, rng):
            batch = train_set.subset(idx)
            try:
                with Tape() as tape:
                    loss, base, g, scaled = step(cfg, model, batch, state)
                if not math.isfinite(loss.item()):
                    raise NumericError("non-finite loss")
                backward(tape, loss)
                if opt is None:
                    sgd_step(params, lr, cfg.max_grad_norm)
                else:
                    opt.step(lr, cfg.max_grad_norm)
            except NumericError as exc:
                raise RunError(f"diverged at batch {t} (epoch {epoch}): {exc}") from exc
            trace.append(TraceRow(t, base, g, scaled))
            t += 1
        if val is not None and len(val):
            acc = standard_accuracy(predict_classes(cfg, model, val), val.label)
            if acc > best_acc:
                best_acc, best_state = acc, model.state()
    return TrainResult(model, trace, best_state, seed)


def predict_classes(cfg: ExperimentConfig, model: ClassifierModel, data: ClassificationSet, chunk: int = 2048) -> np.ndarray:
    out = []
    for i in range(0, len(data), chunk):
        main, bias = forward_classifier(model, data.qfeat[i : i + chunk], data.cfeat[i : i + chunk])
        z = infer_logits(cfg.strategy, main, bias, cfg.cf_c, model.cf_const, cfg.cf_fusion)
        out.append(np.argmax(z, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def predict_spans(cfg: ExperimentConfig, model: SpanModel, data: SpanSet, chunk: int = 512):
    starts, ends = [], []
    for i in range(0, len(data), chunk):
        st, en, b_st, b_en = forward_span(model, data.tokens[i : i + chunk])
        zs = infer_logits(cfg.strategy, st, b_st, cfg.cf_c, model.cf_const_start, cfg.cf_fusion)
        ze = infer_logits(cfg.strategy, en, b_en, cfg.cf_c, model.cf_const_end, cfg.cf_fusion)
        s, e = decode_span(zs, ze, cfg.max_answer_len)
        starts.append(s)
        ends.append(e)
    if not starts:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(starts), np.concatenate(ends)


def _hm(values: Sequence[float]) -> float:
    return 0.0 if min(values) <= 0 else harmonic_mean(values)


def evaluate(cfg: ExperimentConfig, result: TrainResult, datasets: dict) -> list[ResultRow]:
    """Metric rows for every evaluation split plus the ID/OOD harmonic mean."""
    model = result.model
    row = lambda split, metric, value: ResultRow(  # noqa: E731
        cfg.method, cfg.loss.kind, cfg.strategy.value, result.seed, split, metric, round(float(value), 6)
    )
    rows: list[ResultRow] = []
    if cfg.task == "classification":
        accs = {}
        final = model.state()
        for split in ("id_test", "ood_test"):
            data = datasets[split]
            use_best = split == "id_test" and result.best_state is not None
            if use_best:
                model.load_state(result.best_state)
            pred = predict_classes(cfg, model, data)
            if use_best:
                model.load_state(final)
            correct = pred == data.label
            # single-label data: either all three required annotators agree or none do
            oea = float(np.mean([open_ended_accuracy(3 if c else 0) for c in correct])) if len(data) else 0.0
            accs[split] = standard_accuracy(pred, data.label)
            rows.append(row(split, "accuracy", accs[split]))
            rows.append(row(split, "open_ended_accuracy", oea))
        rows.append(row("hm", "accuracy", _hm([accs["id_test"], accs["ood_test"]])))
        return rows

    k_train = cfg.dataset.train_sentence
    by_sentence = datasets["dev_by_sentence"]
    f1 = {}
    preds = {}
    for k, data in sorted(by_sentence.items()):
        s, e = predict_spans(cfg, model, data)
        preds[k] = (s, e)
        gold = np.stack([data.start, data.end], axis=1)
        f1[k] = macro_f1(np.stack([s, e], axis=1), gold)
        em = float(np.mean((s == data.start) & (e == data.end))) if len(data) else 0.0
        rows.append(row(f"dev_k{k}", "f1", f1[k]))
        rows.append(row(f"dev_k{k}", "exact_match", em))
    ood_keys = [k for k in by_sentence if k != k_train]
    ood_scores, ood_n = 0.0, 0
    for k in ood_keys:
        ood_scores += f1[k] * len(by_sentence[k])
        ood_n += len(by_sentence[k])
    id_f1 = f1[k_train]
    ood_f1 = ood_scores / ood_n if ood_n else 0.0
    rows.append(row("id", "f1", id_f1))
    rows.append(row("ood", "f1", ood_f1))
    rows.append(row("hm", "f1", _hm([id_f1, ood_f1])))
    return rows


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_rows(rows: Iterable[ResultRow], path, fmt: str = "csv") -> None:
    rows = list(rows)
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps([r.as_dict() for r in rows], indent=1) + "\n", encoding="utf-8")
        return
    if fmt != "csv":
        raise ConfigError(f"unknown format {fmt!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([r.method, r.loss, r.strategy, r.seed, r.split, r.metric, _fmt(r.value)])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_rows(path) -> list[ResultRow]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return [ResultRow(**d) for d in json.loads(text)]
    rows = []
    for d in csv.DictReader(line for line in io.StringIO(text) if not line.startswith("#")):
        rows.append(
            ResultRow(d["method"], d["loss"], d["strategy"], int(d["seed"]), d["split"], d["metric"], float(d["value"]))
        )
    return rows


def write_trace(trace: Sequence[TraceRow], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in trace:
        w.writerow([r.batch_index, _fmt(r.base_loss), _fmt(r.gamma), _fmt(r.scaled_loss)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_trace(path) -> list[TraceRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            TraceRow(int(d["batch_index"]), float(d["base_loss"]), float(d["gamma"]), float(d["scaled_loss"]))
            for d in csv.DictReader(fh)
        ]


def run_id(cfg: ExperimentConfig, seed: int) -> str:
    return f"{cfg.method}__{cfg.loss.kind}__lag{cfg.loss.lag}__s{seed}"


def run_experiment(cfg: ExperimentConfig, seed: int, out_dir=None, fmt: str = "csv", datasets=None):
    """Generate data, train, evaluate one seed. Optionally write run files.

    Returns ``(rows, train_result)``.
    """
    datasets = datasets if datasets is not None else build_datasets(cfg, seed)
    result = train(cfg, datasets, seed)
    rows = evaluate(cfg, result, datasets)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rid = run_id(cfg, seed)
        write_rows(rows, out / f"results_{rid}.{fmt}", fmt)
        write_trace(result.trace, out / f"trace_{rid}.csv")
        save_params(result.model, out / f"params_{rid}.jsonl")
    return rows, result


def _grid_job(args):
    cfg_dict, seed, out_dir, fmt = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        rows, _ = run_experiment(cfg, seed, out_dir, fmt)
        return run_id(cfg, seed), rows, None
    except Exception as exc:  # recorded in the aggregate's failure list
        log.warning("run %s failed: %s", run_id(cfg, seed), exc)
        return run_id(cfg, seed), [], f"{type(exc).__name__}: {exc}"


def aggregate(rows: Iterable[ResultRow]) -> list[dict]:
    """Mean and sample standard deviation across seeds per (method, loss, strategy, split, metric)."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r.method, r.loss, r.strategy, r.split, r.metric), []).append(r.value)
    out = []
    for key in sorted(groups):
        vals = groups[key]
        std = statistics.stdev(vals) if len(vals) > 1 else 0.0
        out.append(dict(zip(AGGREGATE_COLUMNS, [*key, statistics.fmean(vals), std, len(vals)])))
    return out


def write_aggregate(agg: list[dict], failures: list[tuple[str, str]], path, fmt: str = "csv") -> None:
    path = Path(path)
    if fmt == "json":
        payload = {"rows": agg, "failures": [{"run": r, "error": e} for r, e in failures]}
        path.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
        return
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_COLUMNS)
    for a in agg:
        w.writerow([a["method"], a["loss"], a["strategy"], a["split"], a["metric"], _fmt(a["mean"]), _fmt(a["std"]), a["n"]])
    buf.write("# failures\n")
    for rid, err in failures:
        buf.write(f"# {rid}: {err}\n")
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_aggregate(path) -> tuple[list[dict], list[str]]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        payload = json.loads(text)
        return payload["rows"], [f["run"] for f in payload["failures"]]
    lines = text.splitlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    failures = [ln[2:].split(":", 1)[0] for ln in lines if ln.startswith("# ") and ln != "# failures"]
    agg = []
    for d in csv.DictReader(body):
        d["mean"], d["std"], d["n"] = float(d["mean"]), float(d["std"]), int(d["n"])
        agg.append(d)
    return agg, failures


def grid_run(configs: Sequence[ExperimentConfig], out_dir, fmt: str = "csv", workers: int = 1):
    """Run every (config, seed), write one results file per run plus ``aggregate.<fmt>``.

    Failed runs do not stop the grid; they are listed in the aggregate.
    Returns ``(rows, failures)``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(c.to_dict(), s, str(out), fmt) for c in configs for s in c.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_grid_job, jobs))
    else:
        results = [_grid_job(j) for j in jobs]
    rows, failures = [], []
    for rid, rs, err in results:
        rows.extend(rs)
        if err is not None:
            failures.append((rid, err))
    write_aggregate(aggregate(rows), failures, out / f"aggregate.{fmt}", fmt)
    return rows, failures


def clamp_count(trace: Sequence[TraceRow], clamp: float = 0.999) -> int:
    """Number of batches whose loose factor sat exactly at the clamp."""
    return sum(1 for r in trace if r.gamma == clamp)


def ablate_lag(base_cfg: ExperimentConfig, n_values: Sequence[int], out_dir=None, fmt: str = "csv") -> dict:
    """Retrain with ``lag = n`` for each ``n``; everything else fixed.

    Returns ``{n: [(seed, rows, trace), ...]}``.
    """
    if base_cfg.loss.kind != "alo":
        raise ConfigError("lag ablation needs loss kind 'alo'")
    bad = [n for n in n_values if not 1 <= n <= 20]
    if bad:
        raise ConfigError(f"lag values must lie in [1, 20], got {bad}")
    out: dict[int, list] = {}
    for n in n_values:
        cfg = base_cfg.replace(loss=dataclasses.replace(base_cfg.loss, lag=int(n)))
        runs = []
        for seed in cfg.seeds:
            datasets = build_datasets(cfg, seed)
            rows, res = run_experiment(cfg, seed, out_dir, fmt, datasets=datasets)
            runs.append((seed, rows, res.trace))
        out[int(n)] = runs
    return out
