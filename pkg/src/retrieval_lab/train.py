"""Training runs, validation metrics and the IC / non-IC layer sweep."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import mse_loss
from .model import ModelConfig, Params, forward, init_model, predict, save_checkpoint
from .optim import AdamState, adam_update
from .tasks import STREAM_INIT, STREAM_SHUFFLE, STREAM_TRAIN, Batch, TaskConfig, derive_rng, gen_batch, validation_set

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, metrics: RunMetrics | None = None):
        super().__init__(message)
        self.metrics = metrics


@dataclass
class RunConfig:
    task: TaskConfig
    model: ModelConfig
    steps: int = 1000
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_examples: int = 2**16
    val_examples: int = 512
    val_every: int = 10
    seed: int = 0
    checkpoint_every_epochs: int = 0  # 0 disables periodic checkpoints
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.train_examples < self.batch_size:
            raise ValueError("train_examples must be >= batch_size")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")
        m = self.model
        t = self.task
        if (m.input_dim, m.output_dim, m.n_query) != (t.input_dim, t.target_dim, t.N):
            raise ValueError(
                f"model dims (in={m.input_dim}, out={m.output_dim}, n_query={m.n_query}) do not match task "
                f"(in={t.input_dim}, out={t.target_dim}, N={t.N})"
            )

    @property
    def steps_per_epoch(self) -> int:
        return self.train_examples // self.batch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.to_dict()
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        task = TaskConfig.from_dict(d.pop("task", {}))
        mdict = dict(d.pop("model", {}))
        mdict.setdefault("input_dim", task.input_dim)
        mdict.setdefault("output_dim", task.target_dim)
        mdict.setdefault("n_query", task.N)
        return cls(task=task, model=ModelConfig.from_dict(mdict), **d)


@dataclass
class RunMetrics:
    train_loss: list[float] = field(default_factory=list)  # index i -> step i+1
    eval_steps: list[int] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    partials: list[list[float]] = field(default_factory=list)
    epoch_ends: list[int] = field(default_factory=list)  # steps that closed an epoch

    def first_below(self, threshold: float, position: int | None = None) -> int | None:
        """First evaluation step whose loss (or partial loss) is below ``threshold``."""
        series = self.val_loss if position is None else [p[position] for p in self.partials]
        for s, v in zip(self.eval_steps, series):
            if v < threshold:
                return s
        return None

    def to_csv(self, path: str | Path, D: int | None = None) -> None:
        D = D if D is not None else (len(self.partials[0]) if self.partials and self.partials[0] else 0)
        evals = {s: i for i, s in enumerate(self.eval_steps)}
        ends = set(self.epoch_ends)
        epoch = 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "train_loss", "val_loss", *[f"partial_{j + 1}" for j in range(D)], "epoch"])
            for step in range(len(self.train_loss) + 1):
                tl = repr(self.train_loss[step - 1]) if step else ""
                vl, ps = "", [""] * D
                if step in evals:
                    i = evals[step]
                    vl = repr(self.val_loss[i])
                    ps = [repr(v) for v in self.partials[i][:D]]
                if step in ends:
                    epoch += 1
                w.writerow([step, tl, vl, *ps, epoch])

    @classmethod
    def from_csv(cls, path: str | Path) -> RunMetrics:
        m = cls()
        last_epoch = 0
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            D = sum(1 for h in header if h.startswith("partial_"))
            for lineno, row in enumerate(r, start=2):
                if len(row) != len(header):
                    raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
                try:
                    step = int(row[0])
                    if row[1]:
                        m.train_loss.append(float(row[1]))
                    if row[2]:
                        m.eval_steps.append(step)
                        m.val_loss.append(float(row[2]))
                        m.partials.append([float(v) for v in row[3 : 3 + D]])
                    epoch = int(row[-1])
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
                if epoch != last_epoch:
                    m.epoch_ends.append(step)
                    last_epoch = epoch
        return m


@dataclass
class TrainResult:
    run: RunConfig
    metrics: RunMetrics
    params: Params
    adam: AdamState
    epoch: int
    checkpoints: list[Path] = field(default_factory=list)


def partial_losses(pred: np.ndarray, target: np.ndarray, D: int, K: int) -> np.ndarray:
    """MSE restricted to each chain position's block of ``K`` columns."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape or pred.shape[-1] != D * K:
        raise ValueError(f"expected matching (..., {D * K}) arrays, got {pred.shape} and {target.shape}")
    sq = (pred.astype(np.float64) - target) ** 2
    return sq.reshape(-1, D, K).mean(axis=(0, 2))


def final_loss(metrics: RunMetrics, window: int = 100) -> float:
    """Mean of the last ``window`` validation losses."""
    if len(metrics.val_loss) < window:
        raise ValueError(f"need {window} validation evaluations, have {len(metrics.val_loss)}")
    return float(np.mean(metrics.val_loss[-window:]))


def evaluate(params: Params, cfg: ModelConfig, data: Batch, **kw) -> tuple[float, list[float]]:
    pred = predict(params, cfg, data.inputs, **kw)
    loss = float(np.mean((pred.astype(np.float64) - data.targets) ** 2))
    t = data.config
    parts = partial_losses(pred, data.targets, t.D, t.K).tolist() if t.ic else []
    return loss, parts


def _grads(params: Params) -> dict[str, np.ndarray | None]:
    return {k: p.grad for k, p in params.items()}


def train(run: RunConfig, out_dir: str | Path | None = None, progress: bool = False) -> TrainResult:
    """Train one model from scratch; deterministic given ``run``.

    With ``out_dir`` set, writes ``metrics.csv``, ``final.ckpt`` and (when
    ``checkpoint_every_epochs`` > 0) ``checkpoints/epoch-XXXXX.ckpt``.
    """
    t, mcfg = run.task, run.model
    corpus = gen_batch(t, derive_rng(run.seed, STREAM_TRAIN), run.train_examples)
    val = validation_set(t, run.seed, run.val_examples)
    params = init_model(mcfg, derive_rng(run.seed, STREAM_INIT))
    adam = AdamState.zeros_like(params)
    shuffle_rng = derive_rng(run.seed, STREAM_SHUFFLE)
    spe = run.steps_per_epoch
    out = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out / "checkpoints" if out is not None else None
    metrics = RunMetrics()
    saved: list[Path] = []

    def checkpoint(epoch: int, step: int) -> None:
        if ckpt_dir is None:
            return
        path = ckpt_dir / f"epoch-{epoch:05d}.ckpt"
        save_checkpoint(path, params, mcfg, adam, epoch=epoch, step=step, task=t, extra={"seed": run.seed})
        saved.append(path)

    def record_eval(step: int) -> None:
        vl, parts = evaluate(params, mcfg, val)
        metrics.eval_steps.append(step)
        metrics.val_loss.append(vl)
        metrics.partials.append(parts)

    record_eval(0)
    if run.checkpoint_every_epochs:
        checkpoint(0, 0)

    epoch = 0
    perm = None
    over = 0
    initial = None
    for step in range(1, run.steps + 1):
        pos = (step - 1) % spe
        if pos == 0:
            perm = shuffle_rng.permutation(run.train_examples)
        idx = np.sort(perm[pos * run.batch_size : (pos + 1) * run.batch_size])
        xb = corpus.inputs[idx]
        yb = corpus.targets[idx]
        try:
            pred, _ = forward(params, mcfg, xb)
            loss = mse_loss(pred, yb)
            loss.backward()
            adam_update(
                params, _grads(params), adam, run.lr, run.beta1, run.beta2, run.adam_eps, run.weight_decay
            )
        except (ag.NonFiniteError, FloatingPointError) as exc:
            raise TrainingDiverged(f"step {step}: {exc}", metrics) from exc
        for p in params.values():
            p.grad = None
        lv = float(loss.data)
        metrics.train_loss.append(lv)
        if initial is None:
            initial = lv
        over = over + 1 if lv > run.divergence_factor * initial else 0
        if over >= run.divergence_patience:
            raise TrainingDiverged(
                f"step {step}: train loss {lv:.4g} above {run.divergence_factor}x initial {initial:.4g} "
                f"for {run.divergence_patience} steps",
                metrics,
            )
        if step % run.val_every == 0 or step == run.steps:
            record_eval(step)
            if progress:
                log.info("step %d train %.4f val %.4f %s", step, lv, metrics.val_loss[-1],
                         " ".join(f"{v:.3f}" for v in metrics.partials[-1]))
        if pos == spe - 1:
            epoch += 1
            metrics.epoch_ends.append(step)
            if run.checkpoint_every_epochs and epoch % run.checkpoint_every_epochs == 0:
                checkpoint(epoch, step)

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics.to_csv(out / "metrics.csv", t.D if t.ic else 0)
        save_checkpoint(out / "final.ckpt", params, mcfg, adam, epoch=epoch, step=run.steps, task=t,
                        extra={"seed": run.seed, "run": run.to_dict()})
    return TrainResult(run, metrics, params, adam, epoch, saved)


# -- sweeps --------------------------------------------------------------------------


@dataclass
class SweepConfig:
    base: RunConfig
    formulations: tuple[str, ...] = ("ic", "non_ic")
    layers: tuple[int, ...] = (1, 2, 3, 4)
    seeds: tuple[int, ...] = (0, 1)
    D_ic: int | None = None
    D_non_ic: int | None = None
    final_window: int = 100
    workers: int = 1

    def __post_init__(self):
        if not (self.formulations and self.layers and self.seeds):
            raise ValueError("sweep grid is empty")
        for f in self.formulations:
            if f not in ("ic", "non_ic"):
                raise ValueError(f"unknown formulation {f!r}")

    def cells(self) -> list[tuple[str, int, int]]:
        return [(f, l, s) for f in self.formulations for l in self.layers for s in self.seeds]

    def cell_run(self, formulation: str, layers: int, seed: int) -> RunConfig:
        ic = formulation == "ic"
        D = (self.D_ic if ic else self.D_non_ic) or self.base.task.D
        task = replace(self.base.task, ic=ic, D=D)
        model = replace(self.base.model, layers=layers, output_dim=task.target_dim, n_query=task.N,
                        input_dim=task.input_dim)
        return replace(self.base, task=task, model=model, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base"] = self.base.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SweepConfig:
        d = dict(d)
        base = RunConfig.from_dict(d.pop("base"))
        for k in ("formulations", "layers", "seeds"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(base=base, **d)


@dataclass
class SweepCell:
    formulation: str
    layers: int
    seed: int
    D: int
    final_loss: float | None
    partials: list[float]
    status: str = "ok"
    error: str = ""


@dataclass
class SweepReport:
    cells: list[SweepCell]

    def summary(self) -> list[dict]:
        """Mean final loss (and partials) per (formulation, layers)."""
        groups: dict[tuple[str, int], list[SweepCell]] = {}
        for c in self.cells:
            groups.setdefault((c.formulation, c.layers), []).append(c)
        rows = []
        for (f, l), cs in sorted(groups.items()):
            ok = [c for c in cs if c.status == "ok"]
            row = {
                "formulation": f,
                "layers": l,
                "n_ok": len(ok),
                "n_failed": len(cs) - len(ok),
                "mean_final_loss": float(np.mean([c.final_loss for c in ok])) if ok else math.nan,
            }
            if ok and ok[0].partials:
                arr = np.array([c.partials for c in ok])
                for j, v in enumerate(arr.mean(axis=0)):
                    row[f"mean_partial_{j + 1}"] = float(v)
            rows.append(row)
        return rows

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dmax = max((len(c.partials) for c in self.cells), default=0)
        with open(out / "sweep_cells.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["formulation", "layers", "seed", "D", "final_loss", *[f"partial_{j + 1}" for j in range(dmax)],
                        "status", "error"])
            for c in self.cells:
                ps = [repr(v) for v in c.partials] + [""] * (dmax - len(c.partials))
                fl = "" if c.final_loss is None else repr(c.final_loss)
                w.writerow([c.formulation, c.layers, c.seed, c.D, fl, *ps, c.status, c.error])
        rows = self.summary()
        keys = ["formulation", "layers", "n_ok", "n_failed", "mean_final_loss",
                *[f"mean_partial_{j + 1}" for j in range(dmax)]]
        with open(out / "sweep_summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, restval="")
            w.writeheader()
            for r in rows:
                w.writerow(r)


def _run_cell(args) -> SweepCell:
    sweep, (f, layers, seed), out_dir = args
    run = sweep.cell_run(f, layers, seed)
    cell_dir = None if out_dir is None else Path(out_dir) / f"{f}-L{layers}-s{seed}"
    try:
        res = train(run, cell_dir)
        window = min(sweep.final_window, len(res.metrics.val_loss))
        fl = final_loss(res.metrics, window)
        parts = []
        if run.task.ic:
            parts = np.mean(np.array(res.metrics.partials[-window:]), axis=0).tolist()
        return SweepCell(f, layers, seed, run.task.D, fl, parts)
    except Exception as exc:  # recorded, sweep continues
        return SweepCell(f, layers, seed, run.task.D, None, [], "failed", f"{type(exc).__name__}: {exc}")


def sweep(cfg: SweepConfig, out_dir: str | Path | None = None) -> SweepReport:
    """Train every (formulation, layers, seed) cell; failures are recorded, not raised.

    Cells whose history is shorter than ``final_window`` evaluations average
    over whatever they have.
    """
    jobs = [(cfg, cell, out_dir) for cell in cfg.cells()]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            cells = list(ex.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]
    report = SweepReport(cells)
    if out_dir is not None:
        report.write(out_dir)
    return report

