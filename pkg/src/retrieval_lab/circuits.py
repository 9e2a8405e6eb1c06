"""Attention-map export, attention-replacement ablations and path emergence.

Circuits are written by hand as JSON::

    {
      "background": "uniform",            # or "identity"
      "paths": [
        {"layer": 3, "head": 0, "src": "PairSecond(1)", "dst": "PrevToken", "hop": 1},
        {"layer": 4, "head": 0, "src": "Query", "dst": "PairSecond(1)", "hop": 1}
      ]
    }

A path means: rows at ``src`` positions attend to the ``dst`` position of the
same chain.  ``PrevToken`` and ``Self`` are relative to the attending row.
Roles are ``PairFirst(k)``, ``PairSecond(k)``, ``Query``, ``PrevToken`` and
``Self``; ``hop`` is an optional tag used to order paths by retrieval step.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .container import ContainerError, write_container
from .model import ConfigMismatchError, ModelCheckpoint, ModelConfig, causal_mask, forward, load_checkpoint, predict
from .tasks import PAIR_FIRST, PAIR_SECOND, QUERY, Batch, EncodedExample, TaskConfig

log = logging.getLogger(__name__)

_ROLE_RE = re.compile(r"^(?:(PairFirst|PairSecond)\((\d+)\)|(Query|PrevToken|Self))$")
RELATIVE_ROLES = ("PrevToken", "Self")
BACKGROUNDS = ("uniform", "identity")


@dataclass(frozen=True)
class RoleRef:
    kind: str
    step: int | None = None

    def __str__(self) -> str:
        return f"{self.kind}({self.step})" if self.step is not None else self.kind

    @property
    def relative(self) -> bool:
        return self.kind in RELATIVE_ROLES


def parse_role(text: str) -> RoleRef:
    m = _ROLE_RE.match(text.strip())
    if not m:
        raise ValueError(f"unknown role {text!r}")
    if m.group(1):
        return RoleRef(m.group(1), int(m.group(2)))
    return RoleRef(m.group(3))


@dataclass(frozen=True)
class CircuitPath:
    layer: int
    head: int
    src: str
    dst: str
    hop: int | None = None

    def __post_init__(self):
        if parse_role(self.src).relative:
            raise ValueError(f"source role must be absolute, got {self.src!r}")
        parse_role(self.dst)

    @property
    def path_id(self) -> str:
        return f"L{self.layer}H{self.head}:{self.src}->{self.dst}"


@dataclass
class CircuitSpec:
    paths: list[CircuitPath] = field(default_factory=list)
    background: str = "uniform"

    def __post_init__(self):
        self.background = self.background.lower()
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}, got {self.background!r}")
        ids = [p.path_id for p in self.paths]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate paths in circuit")

    def validate(self, cfg: ModelConfig, task: TaskConfig) -> None:
        for p in self.paths:
            if not (0 <= p.layer < cfg.layers and 0 <= p.head < cfg.heads_per_layer):
                raise ValueError(f"{p.path_id}: no such head in a {cfg.layers}x{cfg.heads_per_layer} model")
            for r in (parse_role(p.src), parse_role(p.dst)):
                if r.step is not None and not 1 <= r.step <= task.D:
                    raise ValueError(f"{p.path_id}: step {r.step} outside 1..{task.D}")

    def to_dict(self) -> dict:
        return {"background": self.background, "paths": [asdict(p) for p in self.paths]}

    @classmethod
    def from_dict(cls, d: dict) -> CircuitSpec:
        return cls([CircuitPath(**p) for p in d.get("paths", [])], d.get("background", "uniform"))

    @classmethod
    def load(cls, path: str | Path) -> CircuitSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


# -- role resolution -------------------------------------------------------------


def _static_positions(kinds: np.ndarray, steps: np.ndarray, role: RoleRef) -> np.ndarray:
    if role.kind == "Query":
        return np.flatnonzero(kinds == QUERY)
    kind = PAIR_FIRST if role.kind == "PairFirst" else PAIR_SECOND
    return np.flatnonzero((kinds == kind) & (steps == role.step))


def resolve_roles(example: EncodedExample, role: str) -> list[int]:
    """Positions of ``role`` in ``example``.

    Relative roles resolve per attending position: ``Self`` yields every
    position and ``PrevToken`` every position that has a predecessor.
    """
    r = parse_role(role)
    L = len(example.roles)
    if r.kind == "Self":
        return list(range(L))
    if r.kind == "PrevToken":
        return list(range(L - 1))
    out = [i for i, x in enumerate(example.roles) if x.kind == r.kind and (r.step is None or x.step == r.step)]
    if r.step is not None and not out:
        raise ValueError(f"role {role!r} does not occur in this example")
    return out


def path_pairs(batch: Batch, src: str, dst: str) -> tuple[np.ndarray, np.ndarray]:
    """Resolved ``(src_positions (n,), dst_positions (B, n))`` for a path.

    Absolute destinations are matched by chain: the row for chain ``c``
    points at the ``dst`` position holding chain ``c``.
    """
    s, d = parse_role(src), parse_role(dst)
    rows = _static_positions(batch.kinds, batch.steps, s)
    if rows.size == 0:
        raise ValueError(f"role {src!r} does not occur for this task")
    B = len(batch)
    if d.kind == "Self":
        return rows, np.broadcast_to(rows, (B, rows.size)).copy()
    if d.kind == "PrevToken":
        if rows.min() == 0:
            raise ValueError("PrevToken is undefined at position 0")
        return rows, np.broadcast_to(rows - 1, (B, rows.size)).copy()
    cols = _static_positions(batch.kinds, batch.steps, d)
    if cols.size == 0:
        raise ValueError(f"role {dst!r} does not occur for this task")
    match = batch.chains[:, rows][:, :, None] == batch.chains[:, cols][:, None, :]
    if not match.any(-1).all():
        raise ValueError(f"some {src} rows have no same-chain {dst} position")
    return rows, cols[match.argmax(-1)]


# -- ablations -------------------------------------------------------------------


@dataclass(frozen=True)
class HeadAblation:
    kind: str  # keep | uniform | identity | onehot
    paths: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.kind not in ("keep", "uniform", "identity", "onehot"):
            raise ValueError(f"unknown ablation kind {self.kind!r}")
        if self.kind == "onehot" and not self.paths:
            raise ValueError("onehot ablation needs at least one (src, dst) path")


KEEP = HeadAblation("keep")
UNIFORM = HeadAblation("uniform")
IDENTITY = HeadAblation("identity")


@dataclass
class AblationSpec:
    heads: dict[tuple[int, int], HeadAblation]

    @classmethod
    def uniform_all(cls, cfg: ModelConfig, kind: HeadAblation = KEEP) -> AblationSpec:
        return cls({(l, h): kind for l in range(cfg.layers) for h in range(cfg.heads_per_layer)})

    @classmethod
    def from_circuit(cls, circuit: CircuitSpec, cfg: ModelConfig, drop: CircuitPath | None = None) -> AblationSpec:
        """Circuit heads become OneHot, every other head the background.

        ``drop`` removes one path; if its head has no paths left it falls
        back to the background, otherwise its rows fall back to Identity.
        """
        bg = HeadAblation(circuit.background)
        spec = cls.uniform_all(cfg, bg)
        grouped: dict[tuple[int, int], list[tuple[str, str]]] = {}
        for p in circuit.paths:
            grouped.setdefault((p.layer, p.head), [])
            if p is not drop:
                grouped[(p.layer, p.head)].append((p.src, p.dst))
        for key, paths in grouped.items():
            spec.heads[key] = HeadAblation("onehot", tuple(paths)) if paths else bg
        return spec

    def check(self, cfg: ModelConfig) -> None:
        want = {(l, h) for l in range(cfg.layers) for h in range(cfg.heads_per_layer)}
        if set(self.heads) != want:
            missing = sorted(want - set(self.heads))
            extra = sorted(set(self.heads) - want)
            raise ValueError(f"ablation must cover every head exactly; missing {missing}, extra {extra}")

    def overrides(self, cfg: ModelConfig, batch: Batch) -> dict[tuple[int, int], np.ndarray]:
        """Replacement attention maps for every non-Keep head."""
        self.check(cfg)
        L = batch.inputs.shape[1]
        B = len(batch)
        allowed = causal_mask(L) if cfg.causal else np.ones((L, L), dtype=bool)
        uniform = (allowed / allowed.sum(1, keepdims=True)).astype(np.float32)
        eye = np.eye(L, dtype=np.float32)
        out = {}
        for key, ab in self.heads.items():
            if ab.kind == "keep":
                continue
            if ab.kind == "uniform":
                out[key] = uniform
            elif ab.kind == "identity":
                out[key] = eye
            else:
                w = np.broadcast_to(eye, (B, L, L)).copy()
                b_idx = np.arange(B)[:, None]
                for src, dst in ab.paths:
                    rows, cols = path_pairs(batch, src, dst)
                    if not allowed[rows[None, :], cols].all():
                        raise ValueError(f"path {src}->{dst} points at masked (future) positions")
                    w[b_idx, rows[None, :], :] = 0.0
                    w[b_idx, rows[None, :], cols] = 1.0
                out[key] = w
        return out


def ablate_forward(params, cfg: ModelConfig, batch: Batch, spec: AblationSpec, batch_size: int = 256) -> np.ndarray:
    outs = []
    for i in range(0, len(batch), batch_size):
        sub = batch.take(np.arange(i, min(i + batch_size, len(batch))))
        ov = spec.overrides(cfg, sub)
        outs.append(predict(params, cfg, sub.inputs, batch_size=batch_size, attention_override=ov or None))
    return np.concatenate(outs, axis=0)


def _mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred.astype(np.float64) - target) ** 2))


@dataclass
class CircuitReport:
    unablated_mse: float
    combined_mse: float
    knockouts: dict[str, float]  # path_id -> mse with that path removed

    def rows(self) -> list[dict]:
        out = [{"ablation": "combined", "mse": self.combined_mse}]
        out += [{"ablation": f"without {pid}", "mse": m} for pid, m in self.knockouts.items()]
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["ablation", "mse"])
            w.writeheader()
            w.writerow({"ablation": "none", "mse": self.unablated_mse})
            w.writerows(self.rows())


def _task_of(ck: ModelCheckpoint, data: Batch) -> None:
    if ck.task is not None and ck.task != data.config.to_dict():
        raise ConfigMismatchError(f"checkpoint task {ck.task} differs from data task {data.config.to_dict()}")
    if data.inputs.shape[-1] != ck.config.input_dim:
        raise ConfigMismatchError("data width does not match the model")


def validate_circuit(ck: ModelCheckpoint, circuit: CircuitSpec, data: Batch) -> CircuitReport:
    """Combined ablation plus one leave-one-path-out run per path."""
    _task_of(ck, data)
    circuit.validate(ck.config, data.config)
    base = _mse(predict(ck.params, ck.config, data.inputs), data.targets)
    combined = _mse(ablate_forward(ck.params, ck.config, data, AblationSpec.from_circuit(circuit, ck.config)), data.targets)
    knock = {}
    for p in circuit.paths:
        spec = AblationSpec.from_circuit(circuit, ck.config, drop=p)
        knock[p.path_id] = _mse(ablate_forward(ck.params, ck.config, data, spec), data.targets)
    return CircuitReport(base, combined, knock)


# -- attention maps --------------------------------------------------------------


def capture_attention(params, cfg: ModelConfig, inputs: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Post-softmax weights ``(B, layers, heads, L, L)``."""
    from .autograd import no_grad

    caps = []
    with no_grad():
        for i in range(0, len(inputs), batch_size):
            _, cap = forward(params, cfg, inputs[i : i + batch_size], capture=True)
            caps.append(cap)
    return np.concatenate(caps, axis=0)


def export_attention_maps(
    ck: ModelCheckpoint, data: Batch, out_dir: str | Path, per_example: int = 4
) -> tuple[np.ndarray, np.ndarray]:
    """Write raw maps and grayscale SVG heatmaps; returns ``(maps, mean)``.

    ``attention.rlab`` holds every example's maps plus their mean; SVGs
    are written for the mean and for the first ``per_example`` examples.
    """
    from .plots import heatmap_svg

    _task_of(ck, data)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps = capture_attention(ck.params, ck.config, data.inputs)
    mean = maps.mean(axis=0)
    write_container(
        out / "attention.rlab",
        "attention",
        {"model": ck.config.to_dict(), "task": data.config.to_dict(), "epoch": ck.epoch},
        {"maps": maps.astype(np.float32), "mean": mean.astype(np.float32), "chains": data.chains.astype(np.int32)},
    )
    for l in range(ck.config.layers):
        for h in range(ck.config.heads_per_layer):
            heatmap_svg(mean[l, h], out / f"mean_L{l}_H{h}.svg", title=f"layer {l} head {h} (mean of {len(data)})")
            for b in range(min(per_example, len(data))):
                heatmap_svg(maps[b, l, h], out / f"ex{b}_L{l}_H{h}.svg", title=f"layer {l} head {h} example {b}",
                            labels=[str(r) for r in data[b].roles])
    return maps, mean


# -- emergence -------------------------------------------------------------------


@dataclass
class PathTrace:
    path_id: str
    epochs: list[int]
    values: list[float]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.epochs, self.epochs[1:])):
            raise ValueError("trace epochs must be strictly increasing")
        if len(self.epochs) != len(self.values):
            raise ValueError("trace epochs and values differ in length")


def path_attention(maps: np.ndarray, batch: Batch, path: CircuitPath) -> float:
    """Mean weight on the path's resolved (row, column) pairs.

    ``maps`` is ``(B, layers, heads, L, L)``; averages over examples and
    over every chain's pair.
    """
    rows, cols = path_pairs(batch, path.src, path.dst)
    B = maps.shape[0]
    w = maps[np.arange(B)[:, None], path.layer, path.head, rows[None, :], cols]
    return float(w.mean())


def list_checkpoints(checkpoint_dir: str | Path) -> list[Path]:
    return sorted(Path(checkpoint_dir).glob("epoch-*.ckpt"))


def emergence_trace(
    checkpoint_dir: str | Path, circuit: CircuitSpec, data: Batch, n_examples: int = 32
) -> dict[str, PathTrace]:
    """Average path attention at every readable checkpoint, keyed by path id."""
    data = data.take(np.arange(min(n_examples, len(data))))
    found: list[tuple[int, dict[str, float]]] = []
    for path in list_checkpoints(checkpoint_dir):
        try:
            ck = load_checkpoint(path)
        except (ContainerError, ConfigMismatchError, KeyError, ValueError, OSError) as exc:
            log.warning("skipping unreadable checkpoint %s: %s", path, exc)
            continue
        _task_of(ck, data)
        circuit.validate(ck.config, data.config)
        maps = capture_attention(ck.params, ck.config, data.inputs)
        found.append((ck.epoch, {p.path_id: path_attention(maps, data, p) for p in circuit.paths}))
    found.sort(key=lambda e: e[0])
    epochs = [e for e, _ in found]
    return {p.path_id: PathTrace(p.path_id, epochs, [v[p.path_id] for _, v in found]) for p in circuit.paths}


def write_traces(traces: dict[str, PathTrace], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "path_id", "attention"])
        for tr in traces.values():
            for e, v in zip(tr.epochs, tr.values):
                w.writerow([e, tr.path_id, f"{v:.6f}"])


def read_traces(path: str | Path) -> dict[str, PathTrace]:
    series: dict[str, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["epoch", "path_id", "attention"]:
            raise ValueError(f"{path}: line 1: expected header epoch,path_id,attention")
        for n, row in enumerate(reader, start=2):
            try:
                e, pid, v = row
                series.setdefault(pid, []).append((int(e), float(v)))
            except ValueError as exc:
                raise ValueError(f"{path}: line {n}: {exc}") from exc
    return {pid: PathTrace(pid, [e for e, _ in s], [v for _, v in s]) for pid, s in series.items()}


def crossing_epoch(trace: PathTrace, threshold: float = 0.5) -> float | None:
    """First epoch where the piecewise-linear trace reaches ``threshold``."""
    if not trace.epochs:
        raise ValueError("empty trace")
    e, v = trace.epochs, trace.values
    if v[0] >= threshold:
        return float(e[0])
    for i in range(1, len(v)):
        if v[i] >= threshold:
            return float(e[i - 1] + (threshold - v[i - 1]) * (e[i] - e[i - 1]) / (v[i] - v[i - 1]))
    return None


def hop_crossings(circuit: CircuitSpec, traces: dict[str, PathTrace], threshold: float = 0.5) -> dict[int, float | None]:
    """Epoch by which every path tagged with a hop has crossed; ``None`` if some never do."""
    out: dict[int, float | None] = {}
    for hop in sorted({p.hop for p in circuit.paths if p.hop is not None}):
        xs = [crossing_epoch(traces[p.path_id], threshold) for p in circuit.paths if p.hop == hop]
        out[hop] = None if any(x is None for x in xs) else max(xs)
    return out


def in_chain_order(values: Sequence[float | None]) -> bool:
    """Non-decreasing, with ``None`` (never) sorting last."""
    keyed = [np.inf if v is None else v for v in values]
    return all(a <= b for a, b in zip(keyed, keyed[1:]))
