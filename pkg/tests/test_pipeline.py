import json

import numpy as np
import pytest

from prefixgen import pipeline as P
from prefixgen.molprops import PropVec

SMALL = dict(d=16, n_heads=2, n_layers=1, max_len=96, pocket_d_f=8, pocket_d_e=8, pocket_c_v=2,
             pocket_layers=1, batch_size=4, steps=6, checkpoint_every=3, pred_every=2, pred_max_len=12,
             eval_every=3, warmup=0, lr_schedule="constant")


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("syn")
    P.write_synthetic(out, n=40, n_pockets=2, seed=3)
    return out


@pytest.fixture(scope="module")
def dataset(corpus_dir):
    return P.ingest(corpus_dir / "corpus.smi")


def small_cfg(**kw):
    return P.TrainConfig(**{**SMALL, **kw})


def test_synthetic_corpus_is_seeded_and_valid():
    a = P.synthetic_corpus(30, seed=1)
    assert a == P.synthetic_corpus(30, seed=1)
    assert a != P.synthetic_corpus(30, seed=2)
    assert len(set(a)) == 30


def test_ingest_skips_invalid(tmp_path):
    path = tmp_path / "in.smi"
    path.write_text("CCO\nc1ccccc1\nCC(=O)O\nC1CC\n")
    ds = P.ingest(path)
    assert len(ds) == 3 and ds.skipped == 1
    benzene = ds.examples[1].props
    assert benzene.lipinski == 5 and 0 <= benzene.qed <= 1 and benzene.vina is not None


def test_ingest_empty_raises(tmp_path):
    path = tmp_path / "bad.smi"
    path.write_text("C1CC\n")
    with pytest.raises(P.EmptyDataset):
        P.ingest(path)


def test_dataset_round_trip_is_byte_identical(tmp_path, dataset):
    first = tmp_path / "a.jsonl"
    P.write_dataset(dataset, first)
    again = P.read_dataset(first, dataset.pocket_dir)
    second = tmp_path / "b.jsonl"
    P.write_dataset(again, second)
    assert first.read_bytes() == second.read_bytes()
    row = json.loads(first.read_text().splitlines()[0])
    assert set(row) == {"smiles", "vina", "qed", "sa", "logp", "lipinski", "pocket"}


def test_trusted_labels_are_kept(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"smiles": "CCO", "vina": -9.0, "qed": 0.1, "sa": 0.2, "logp": 3.0,
                                "lipinski": 2, "pocket": None}) + "\n")
    assert P.read_dataset(path, trust_labels=True).examples[0].props.vina == -9.0
    assert P.read_dataset(path).examples[0].props.vina != -9.0


def test_split_indices():
    tr, ho = P.split_indices(50, 0.1, 0)
    assert len(ho) == 5 and not set(tr) & set(ho) and len(tr) + len(ho) == 50
    assert np.array_equal(P.split_indices(50, 0.1, 0)[1], ho)


def test_config_parse_and_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nlr = 0.001\nsteps = 7\n")
    cfg = P.load_config(path, seed=9)
    assert (cfg.lr, cfg.steps, cfg.seed) == (0.001, 7, 9)
    assert P.parse_config_text(P.config_text(cfg)) == {k: getattr(cfg, k) for k in P.config_field_types()}
    for bad in ["nope = 1\n", "lr 3\n", "steps = x\n"]:
        with pytest.raises(P.ConfigError):
            P.parse_config_text(bad)
    with pytest.raises(P.ConfigError):
        P.TrainConfig(p_drop=1.5)


def test_learning_rate_schedule():
    cfg = P.TrainConfig(lr=1e-3, steps=110, warmup=10, lr_floor=0.1)
    assert cfg.lr_at(5) == pytest.approx(5e-4)
    assert cfg.lr_at(10) == pytest.approx(1e-3)
    assert cfg.lr_at(60) == pytest.approx(1e-3 * (0.1 + 0.9 * 0.5))
    assert cfg.lr_at(110) == pytest.approx(1e-4)
    flat = P.TrainConfig(lr=1e-3, steps=110, warmup=0, lr_schedule="constant")
    assert all(flat.lr_at(s) == 1e-3 for s in (1, 50, 110))
    with pytest.raises(P.ConfigError):
        P.TrainConfig(lr_schedule="step")


def test_zero_learning_rate_leaves_weights(dataset):
    res = P.train(small_cfg(lr=0.0, steps=3), dataset)
    fresh = P.train(small_cfg(lr=0.0, steps=0), dataset).model
    a, b = res.model.state_dict(), fresh.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_training_is_deterministic(tmp_path, dataset):
    r1 = P.train(small_cfg(), dataset, tmp_path / "a")
    r2 = P.train(small_cfg(), dataset, tmp_path / "b")
    assert (tmp_path / "a" / "final.ndgt").read_bytes() == (tmp_path / "b" / "final.ndgt").read_bytes()
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    assert r1.log == r2.log
    assert [r["heldout"] != "" for r in r1.log] == [False, False, True, False, False, True]
    assert any(r["pred_loss"] != 0.0 for r in r1.log)


def test_resume_matches_uninterrupted(tmp_path, dataset):
    P.train(small_cfg(), dataset, tmp_path / "full")
    P.train(small_cfg(steps=3), dataset, tmp_path / "half")
    P.train(small_cfg(), dataset, tmp_path / "half", resume=tmp_path / "half" / "final.ndgt")
    assert (tmp_path / "full" / "final.ndgt").read_bytes() == (tmp_path / "half" / "final.ndgt").read_bytes()
    assert ((tmp_path / "full" / "train_log.csv").read_bytes()
            == (tmp_path / "half" / "train_log.csv").read_bytes())


def test_short_run_on_small_corpus_reduces_heldout_loss(tmp_path):
    """200 default-config steps on 50 molecules cut held-out loss by at least 20%."""
    P.write_synthetic(tmp_path, n=50, n_pockets=2, seed=4)
    res = P.train(P.TrainConfig(steps=200, eval_every=200, checkpoint_every=200),
                  P.ingest(tmp_path / "corpus.smi"))
    assert res.final_heldout <= 0.8 * res.initial_heldout


def test_adam_clips_global_norm():
    from prefixgen.ndgrad import Tensor
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([30.0, 40.0], np.float32)
    opt = P.Adam({"p": p}, lr=0.1, clip=1.0)
    assert opt.step() == pytest.approx(50.0)
    assert np.allclose(opt.m["p"], 0.1 * np.array([0.6, 0.8]), atol=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_loss_is_reported(dataset):
    with pytest.raises(P.DivergedLoss):
        P.train(small_cfg(lr=1e30, steps=6, grad_clip=1e30), dataset)


@pytest.fixture(scope="module")
def trained(dataset):
    return P.train(small_cfg(steps=4), dataset).model


def test_evaluate_report_ranges(trained, dataset):
    rep = P.evaluate(trained, dataset, n_samples=12, seed=1)
    assert rep.n_samples == 12
    for v in (rep.validity, rep.diversity, rep.sim_train):
        assert 0.0 <= v <= 1.0
    assert json.loads(rep.to_json())["n_samples"] == 12
    unc = P.evaluate(trained, dataset, n_samples=5, mode="unconditional", seed=1)
    assert all(v is None for v in unc.mae.values())


def test_report_edge_cases():
    dup = ["CCO"] * 4
    from prefixgen.molprops import fingerprint
    from prefixgen.smiles import parse
    rep = P.report(dup, [None] * 4, [fingerprint(parse("CCO"))])
    assert rep.validity == 1.0 and rep.diversity == 0.0 and rep.sim_train == 1.0
    bad = P.report(["C1CC", "", "CC"], [PropVec(qed=0.5)] * 3, [])
    assert bad.validity == pytest.approx(1 / 3)


def test_sweep_rows_and_scale_zero(trained, dataset):
    rows = P.control_sweep(trained, dataset, "logp", [-1, 0, 1], n_samples=6, seed=4)
    assert [r.scale for r in rows] == [-1.0, 0.0, 1.0]
    gt = P.evaluate(trained, dataset, n_samples=6, seed=4)
    assert rows[1].mean == gt.prop_mean["logp"] and rows[1].validity == gt.validity
    lines = P.sweep_csv(rows).strip().split("\n")
    assert lines[0] == "scale,mean,std,validity" and len(lines) == 4
    with pytest.raises(ValueError):
        P.control_sweep(trained, dataset, "weight", [0], n_samples=2)


def test_condition_settings_modes():
    conds = [PropVec(-1.0, 0.5, 0.5, 1.0, 4), PropVec(-2.0, 0.4, 0.6, 2.0, 5)]
    assert P.condition_settings(conds, 3, "ground_truth")[2] is conds[0]
    shifted = P.condition_settings(conds, 2, "shifted", "logp", 2.0)
    assert [c.logp for c in shifted] == [3.0, 4.0]
    assert P.condition_settings(conds, 2, "unconditional") == [None, None]
    with pytest.raises(ValueError):
        P.condition_settings(conds, 2, "random")
