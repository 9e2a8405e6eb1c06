import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retrieval_lab.circuits import (
    IDENTITY,
    KEEP,
    UNIFORM,
    AblationSpec,
    CircuitPath,
    CircuitSpec,
    HeadAblation,
    PathTrace,
    ablate_forward,
    crossing_epoch,
    emergence_trace,
    export_attention_maps,
    hop_crossings,
    in_chain_order,
    path_pairs,
    read_traces,
    resolve_roles,
    validate_circuit,
    write_traces,
)
from retrieval_lab.container import read_container
from retrieval_lab.model import ModelConfig, init_model, load_checkpoint, predict, save_checkpoint
from retrieval_lab.tasks import TaskConfig, gen_batch, validation_set

from test_model import perturbed


def setup(N=4, D=3, layers=2, heads=2, seed=0, n=6):
    t = TaskConfig(N=N, D=D, K=4)
    cfg = ModelConfig.for_task(t, layers=layers, heads_per_layer=heads, residual_dim=16)
    return t, cfg, perturbed(cfg, seed, 0.3), gen_batch(t, np.random.default_rng(seed), n)


# -- roles -------------------------------------------------------------------------


def test_resolve_roles_examples():
    t = TaskConfig(N=4, D=3)
    ex = gen_batch(t, np.random.default_rng(0), 1)[0]
    assert resolve_roles(ex, "Query") == [24, 25, 26, 27]
    assert resolve_roles(ex, "PairFirst(1)") == [0, 2, 4, 6]
    assert resolve_roles(ex, "PairSecond(3)") == [17, 19, 21, 23]
    assert resolve_roles(ex, "PrevToken") == list(range(27))
    with pytest.raises(ValueError):
        resolve_roles(ex, "Key(1)")
    with pytest.raises(ValueError):
        resolve_roles(ex, "PairFirst(4)")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 1000))
def test_roles_partition_positions(N, D, seed):
    ex = gen_batch(TaskConfig(N=N, D=D), np.random.default_rng(seed), 1)[0]
    names = ["Query"] + [f"{k}({s})" for k in ("PairFirst", "PairSecond") for s in range(1, D + 1)]
    seen = sorted(p for name in names for p in resolve_roles(ex, name))
    assert seen == list(range(N * (2 * D + 1)))


def test_path_pairs_match_chains():
    t, cfg, P, b = setup()
    rows, cols = path_pairs(b, "Query", "PairSecond(2)")
    assert np.array_equal(b.chains[:, rows], np.take_along_axis(b.chains, cols, 1))
    rows, cols = path_pairs(b, "PairSecond(1)", "PrevToken")
    assert np.all(cols == rows - 1)


def test_circuit_spec_round_trip_and_validation(tmp_path):
    c = CircuitSpec([CircuitPath(1, 0, "Query", "PairSecond(1)", hop=1)], "Identity")
    c.save(tmp_path / "c.json")
    assert CircuitSpec.load(tmp_path / "c.json") == c
    t, cfg, _, _ = setup()
    c.validate(cfg, t)
    with pytest.raises(ValueError):
        CircuitSpec([CircuitPath(5, 0, "Query", "Self")]).validate(cfg, t)
    with pytest.raises(ValueError):
        CircuitSpec([CircuitPath(0, 0, "Query", "PairFirst(9)")]).validate(cfg, t)
    with pytest.raises(ValueError):
        CircuitPath(0, 0, "PrevToken", "Query")
    with pytest.raises(ValueError):
        CircuitSpec([], "zeros")


# -- ablation ----------------------------------------------------------------------


def test_all_keep_is_bit_exact():
    t, cfg, P, b = setup()
    out = ablate_forward(P, cfg, b, AblationSpec.uniform_all(cfg, KEEP))
    assert np.array_equal(out, predict(P, cfg, b.inputs))


def test_all_uniform_changes_outputs():
    t, cfg, P, b = setup()
    out = ablate_forward(P, cfg, b, AblationSpec.uniform_all(cfg, UNIFORM))
    ref = predict(P, cfg, b.inputs)
    assert out.shape == ref.shape and np.isfinite(out).all()
    assert not np.allclose(out, ref)


kinds = st.sampled_from(
    [KEEP, UNIFORM, IDENTITY, HeadAblation("onehot", (("Query", "PairSecond(1)"), ("PairSecond(2)", "PrevToken")))]
)


@settings(max_examples=25, deadline=None)
@given(st.lists(kinds, min_size=4, max_size=4))
def test_ablated_rows_are_distributions(choice):
    t, cfg, P, b = setup()
    spec = AblationSpec({(l, h): choice[2 * l + h] for l in range(2) for h in range(2)})
    for w in spec.overrides(cfg, b).values():
        w = np.broadcast_to(w, (len(b), 28, 28))
        assert np.allclose(w.sum(-1), 1.0)
        assert np.all(np.triu(w, 1) == 0)


def test_onehot_rows_and_identity_fallback():
    t, cfg, P, b = setup()
    spec = AblationSpec.uniform_all(cfg, KEEP)
    spec.heads[(1, 0)] = HeadAblation("onehot", (("Query", "PairSecond(1)"),))
    w = spec.overrides(cfg, b)[(1, 0)]
    rows, cols = path_pairs(b, "Query", "PairSecond(1)")
    for i in range(len(b)):
        for r, c in zip(rows, cols[i]):
            assert w[i, r, c] == 1.0
        others = np.setdiff1d(np.arange(28), rows)
        assert np.array_equal(w[i][others], np.eye(28)[others])


def test_onehot_future_target_rejected():
    t, cfg, P, b = setup()
    spec = AblationSpec.uniform_all(cfg, KEEP)
    spec.heads[(0, 0)] = HeadAblation("onehot", (("PairFirst(1)", "Query"),))
    with pytest.raises(ValueError):
        spec.overrides(cfg, b)


def test_spec_must_cover_heads():
    t, cfg, P, b = setup()
    with pytest.raises(ValueError):
        AblationSpec({(0, 0): KEEP}).overrides(cfg, b)


def test_from_circuit_drop_semantics():
    t, cfg, _, _ = setup()
    a = CircuitPath(1, 0, "Query", "PairSecond(1)")
    c = CircuitPath(1, 0, "PairSecond(2)", "PrevToken")
    d = CircuitPath(0, 1, "PairSecond(1)", "PrevToken")
    circ = CircuitSpec([a, c, d], "uniform")
    full = AblationSpec.from_circuit(circ, cfg)
    assert full.heads[(0, 0)] == UNIFORM and full.heads[(1, 1)] == UNIFORM
    assert full.heads[(1, 0)].paths == (("Query", "PairSecond(1)"), ("PairSecond(2)", "PrevToken"))
    assert AblationSpec.from_circuit(circ, cfg, drop=a).heads[(1, 0)].paths == (("PairSecond(2)", "PrevToken"),)
    assert AblationSpec.from_circuit(circ, cfg, drop=d).heads[(0, 1)] == UNIFORM


def test_validate_circuit_report(tmp_path):
    t, cfg, P, b = setup(n=16)
    save_checkpoint(tmp_path / "m.ckpt", P, cfg, task=t)
    ck = load_checkpoint(tmp_path / "m.ckpt")
    circ = CircuitSpec([CircuitPath(0, 0, "PairSecond(1)", "PrevToken"), CircuitPath(1, 1, "Query", "PairSecond(1)")])
    rep = validate_circuit(ck, circ, b)
    assert len(rep.rows()) == 1 + len(circ.paths)
    rep.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().count("\n") == 3 + len(circ.paths)
    with pytest.raises(ValueError):
        validate_circuit(ck, circ, gen_batch(TaskConfig(N=4, D=2), np.random.default_rng(0), 2))


# -- trained induction model -------------------------------------------------------


def test_trained_induction_model(induction_run):
    ck = load_checkpoint(induction_run / "final.ckpt")
    t = TaskConfig.from_dict(ck.task)
    val = validation_set(t, 0, 256)
    maps, _ = export_attention_maps(ck, val.take(np.arange(32)), induction_run / "maps-test", per_example=0)
    # a previous-token stripe on PairSecond rows in some layer
    rows, cols = path_pairs(val.take(np.arange(32)), "PairSecond(1)", "PrevToken")
    stripe = [maps[:, l, 0][:, rows, rows - 1].mean() for l in range(ck.config.layers)]
    assert max(stripe) > 0.5
    # ablating every head destroys the computation
    rep = validate_circuit(ck, CircuitSpec([], "uniform"), val)
    assert rep.unablated_mse < 0.1
    assert rep.combined_mse > 0.5


# -- attention maps ----------------------------------------------------------------


def test_export_attention_maps(tmp_path):
    t, cfg, _, b = setup(n=32)
    P = init_model(cfg, np.random.default_rng(0))
    save_checkpoint(tmp_path / "m.ckpt", P, cfg, task=t)
    ck = load_checkpoint(tmp_path / "m.ckpt")
    maps, mean = export_attention_maps(ck, b, tmp_path / "maps", per_example=2)
    assert np.allclose(maps.sum(-1), 1.0, atol=1e-5)
    assert np.allclose(mean, maps.mean(0))
    header, arrays = read_container(tmp_path / "maps" / "attention.rlab", kind="attention")
    assert arrays["maps"].shape == (32, 2, 2, 28, 28)
    svgs = sorted(p.name for p in (tmp_path / "maps").glob("*.svg"))
    assert len(svgs) == 4 + 2 * 4
    assert "<rect" in (tmp_path / "maps" / "mean_L0_H0.svg").read_text()


# -- emergence ---------------------------------------------------------------------


def test_crossing_epoch_examples():
    assert crossing_epoch(PathTrace("p", [100, 110], [0.4, 0.6])) == 105.0
    assert crossing_epoch(PathTrace("p", [0, 10, 20], [0.1, 0.2, 0.49])) is None
    assert crossing_epoch(PathTrace("p", [30, 40], [0.7, 0.9])) == 30.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.floats(0.05, 0.9), st.floats(0.0, 0.1))
def test_crossing_epoch_monotone_in_threshold(values, thr, bump):
    tr = PathTrace("p", list(range(0, 10 * len(values), 10)), values)
    lo, hi = crossing_epoch(tr, thr), crossing_epoch(tr, thr + bump)
    if hi is not None:
        assert lo is not None and lo <= hi + 1e-9


def test_hop_crossings_and_order():
    circ = CircuitSpec([CircuitPath(0, 0, "PairSecond(1)", "PrevToken", 1), CircuitPath(1, 0, "Query", "PairSecond(1)", 1),
                        CircuitPath(2, 0, "Query", "PairSecond(2)", 2)])
    traces = {
        circ.paths[0].path_id: PathTrace("a", [0, 10], [0.0, 1.0]),
        circ.paths[1].path_id: PathTrace("b", [0, 10], [0.3, 0.7]),
        circ.paths[2].path_id: PathTrace("c", [0, 10], [0.0, 0.4]),
    }
    hops = hop_crossings(circ, traces)
    assert hops == {1: 5.0, 2: None}
    assert in_chain_order([hops[1], hops[2]])
    assert not in_chain_order([None, 3.0])
    assert in_chain_order([1.0, 1.0, 2.0])


def test_traces_csv_round_trip(tmp_path):
    tr = {"a": PathTrace("a", [0, 10], [0.25, 0.5]), "b": PathTrace("b", [0, 10], [0.125, 1.0])}
    write_traces(tr, tmp_path / "t.csv")
    assert read_traces(tmp_path / "t.csv") == tr
    (tmp_path / "bad.csv").write_text("epoch,path_id,attention\n0,a,0.1\nx,a,0.2\n")
    with pytest.raises(ValueError, match="line 3"):
        read_traces(tmp_path / "bad.csv")
    with pytest.raises(ValueError):
        PathTrace("p", [10, 10], [0.1, 0.2])


def test_emergence_trace(tmp_path, caplog):
    t, cfg, P, b = setup()
    circ = CircuitSpec([CircuitPath(0, 0, "PairSecond(1)", "PrevToken"), CircuitPath(1, 1, "Query", "PairSecond(2)")])
    ckdir = tmp_path / "ck"
    save_checkpoint(ckdir / "epoch-00000.ckpt", P, cfg, epoch=0, task=t)
    traces = emergence_trace(ckdir, circ, b)
    assert all(len(tr.epochs) == 1 for tr in traces.values())
    save_checkpoint(ckdir / "epoch-00010.ckpt", perturbed(cfg, 1, 0.3), cfg, epoch=10, task=t)
    (ckdir / "epoch-00005.ckpt").write_bytes(b"garbage")
    with caplog.at_level(logging.WARNING):
        traces = emergence_trace(ckdir, circ, b)
    assert "epoch-00005" in caplog.text
    for tr in traces.values():
        assert tr.epochs == [0, 10]
        assert all(0.0 <= v <= 1.0 for v in tr.values)
    maps_mean = traces[circ.paths[0].path_id].values[0]
    from retrieval_lab.circuits import capture_attention

    cap = capture_attention(P, cfg, b.inputs)
    rows, cols = path_pairs(b, "PairSecond(1)", "PrevToken")
    assert maps_mean == pytest.approx(cap[:, 0, 0][:, rows, rows - 1].mean())
