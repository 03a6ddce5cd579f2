import random

import numpy as np
import pytest

from faultex import pipeline as pl, seq2seq as s2s, simulator as sim, worldmodel as wm
from faultex.faults import FaultSpec
from faultex.pipeline import E_CORR, Hyperparams, SimRef


@pytest.fixture(scope="module")
def paper_traces(envs):
    kitchen = sim.generate_batch(envs["kitchen"], 60, seed=7, match_paper_counts=True)
    office = sim.generate_batch(envs["office"], 12, seed=8, match_paper_counts=True)
    return kitchen, office


@pytest.fixture(scope="module")
def paper_dataset(paper_traces, vocab, envs):
    kitchen, office = paper_traces
    return pl.assemble_dataset(kitchen + office, vocab, envs)


def test_corpus_is_deterministic(envs, tax, book):
    assert pl.corpus_for(envs, tax, book) == pl.corpus_for(envs, tax, book)


def test_paper_counts_dataset(paper_dataset):
    examples = paper_dataset.examples
    assert len(examples) == 2100
    n_err = sum(1 for ex in examples if ex.label_class != E_CORR)
    assert n_err == 720
    assert len(examples) - n_err == 1380


def test_single_episode_example_count(kitchen, vocab, envs):
    task = wm.make_task(kitchen, "milk")
    trace = sim.run_episode(
        kitchen, task, FaultSpec("object occluded", task.target_object), seed=1, pre_error_steps=15
    )
    ds = pl.assemble_dataset([trace], vocab, envs)
    assert len(ds) == 25
    assert sum(1 for ex in ds.examples if ex.label_class == "object occluded") == 10


def test_assemble_rejects_empty():
    with pytest.raises(ValueError):
        pl.assemble_dataset([], None)


def _sim_refs(traces):
    return [SimRef(t.episode_id, t.fault.cause) for t in traces]


def test_fold_plan_shape(paper_traces):
    kitchen, office = paper_traces
    plan = pl.make_folds(_sim_refs(kitchen), _sim_refs(office), seed=7)
    assert len(plan.folds) == 10
    assert len(plan.eval_ids) == 12
    # 12 office sims x 10 error explanations each
    assert len(plan.eval_ids) * 10 == 120
    for fold in plan.folds:
        assert len(fold.train_ids) == 48
        assert len(fold.val_ids) == 6
        assert len(fold.test_ids) == 6
        # 10 error explanations per simulation
        assert len(fold.train_ids) * 10 == 480
        assert len(fold.val_ids) * 10 == 60


def test_fold_sets_partition_exhaustively(paper_traces):
    kitchen, office = paper_traces
    plan = pl.make_folds(_sim_refs(kitchen), _sim_refs(office), seed=7)
    all_ids = {t.episode_id for t in kitchen}
    causes = {t.episode_id: t.fault.cause for t in kitchen}
    for fold in plan.folds:
        train, val, test = set(fold.train_ids), set(fold.val_ids), set(fold.test_ids)
        assert train | val | test == all_ids
        assert not (train & val) and not (train & test) and not (val & test)
        # one simulation per cause in val and test
        assert len({causes[i] for i in fold.val_ids}) == 6
        assert len({causes[i] for i in fold.test_ids}) == 6
        # no leakage from the office evaluation set
        assert not (set(plan.eval_ids) & all_ids)


def test_fold_plan_deterministic(paper_traces):
    kitchen, office = paper_traces
    a = pl.make_folds(_sim_refs(kitchen), _sim_refs(office), seed=7)
    b = pl.make_folds(_sim_refs(kitchen), _sim_refs(office), seed=7)
    assert a == b
    c = pl.make_folds(_sim_refs(kitchen), _sim_refs(office), seed=8)
    assert a != c


def test_fold_rejects_nonuniform_causes(paper_traces):
    kitchen, office = paper_traces
    refs = _sim_refs(kitchen)[:-1]  # drop one sim -> its cause has 9
    with pytest.raises(ValueError):
        pl.make_folds(refs, _sim_refs(office), seed=7)


def test_confusion_matrix_matches_hand_tally(tax):
    classes = tuple(tax.causes) + (E_CORR,)
    matrix = pl.ConfusionMatrix(classes)
    pairs = [
        ("object occluded", "object occluded"),
        ("object occluded", "object not present"),
        ("controller error", "controller error"),
        (E_CORR, E_CORR),
        ("object too far away", None),
        ("object too far away", "object too close to others"),
    ]
    for true, pred in pairs:
        matrix.add(true, pred)
    # brute-force tally oracle
    tally = {}
    for true, pred in pairs:
        row = "unparsed" if pred is None else pred
        tally[(row, true)] = tally.get((row, true), 0) + 1
    for r, row_name in enumerate(matrix.rows):
        for c, col_name in enumerate(classes):
            assert matrix.counts[r, c] == tally.get((row_name, col_name), 0)
    # column sums equal per-class example counts
    per_class = {c: sum(1 for t, _ in pairs if t == c) for c in classes}
    assert list(matrix.column_sums()) == [per_class[c] for c in classes]


def test_evaluate_echo_model_is_identity(paper_dataset, vocab, envs, tax, book, monkeypatch):
    examples = paper_dataset.subset(sorted({ex.episode_id for ex in paper_dataset.examples})[:4])
    catalog = pl.build_label_catalog(envs, tax, book)
    wanted = {id(ex.features): " ".join(pl.tokenize(ex.label_text)) for ex in examples}
    monkeypatch.setattr(pl.seq2seq, "greedy_decode", lambda p, fv, v: wanted[id(fv)])
    result = pl.evaluate_exact_match(None, examples, vocab, catalog)
    assert result.accuracy == 1.0
    assert result.error_accuracy == 1.0
    m7 = result.confusion.matrix7()
    off_diag = m7.sum() - np.trace(m7)
    assert off_diag == 0
    assert result.confusion.counts[-1].sum() == 0  # nothing unparsed


def test_evaluate_is_order_invariant(paper_dataset, vocab, envs, tax, book, monkeypatch):
    examples = paper_dataset.subset(sorted({ex.episode_id for ex in paper_dataset.examples})[:2])
    catalog = pl.build_label_catalog(envs, tax, book)
    monkeypatch.setattr(pl.seq2seq, "greedy_decode", lambda p, fv, v: "nonsense words")
    a = pl.evaluate_exact_match(None, examples, vocab, catalog)
    shuffled = list(examples)
    random.Random(3).shuffle(shuffled)
    b = pl.evaluate_exact_match(None, shuffled, vocab, catalog)
    assert np.array_equal(a.confusion.counts, b.confusion.counts)
    assert a.accuracy == b.accuracy
    # unparsed predictions land in the diagnostic row, keeping column mass
    assert a.confusion.counts[-1].sum() == len(examples)


def test_select_model_argmax_and_ties():
    p0, p1, p2 = (s2s.init_params(8, seed=i, emb_dim=3, enc_hidden=3, dec_hidden=5,
                                  attn_dim=3, n_features=4) for i in range(3))
    results = [pl.FoldEval(0, p0, 0.7), pl.FoldEval(1, p1, 0.82), pl.FoldEval(2, p2, 0.75)]
    assert pl.select_model(results) is p1
    tie = [pl.FoldEval(0, p0, 0.8), pl.FoldEval(1, p1, 0.8)]
    assert pl.select_model(tie) is p0
    assert pl.select_model([pl.FoldEval(0, p2, 0.1)]) is p2
    with pytest.raises(ValueError):
        pl.select_model([])


def test_train_fold_overfits_small_dataset(paper_dataset, vocab, envs, tax, book):
    episode_ids = sorted({ex.episode_id for ex in paper_dataset.examples})[:2]
    pool = paper_dataset.subset(episode_ids)
    small = pl.Dataset(tuple(pool[::5][:10]))
    assert len(small) == 10
    fold = pl.Fold(index=0, train_ids=tuple(episode_ids), val_ids=tuple(episode_ids), test_ids=())
    hp = Hyperparams(batch_size=10, lr=3e-3, max_epochs=800, patience=800)
    result = pl.train_fold(small, vocab, fold, hp, seed=42)
    catalog = pl.build_label_catalog(envs, tax, book)
    train_eval = pl.evaluate_exact_match(result.params, small.examples, vocab, catalog)
    assert train_eval.accuracy == 1.0


def test_train_fold_deterministic(paper_dataset, vocab):
    episode_ids = sorted({ex.episode_id for ex in paper_dataset.examples})[:2]
    small = pl.Dataset(tuple(paper_dataset.subset(episode_ids)[:8]))
    fold = pl.Fold(index=0, train_ids=tuple(episode_ids), val_ids=tuple(episode_ids), test_ids=())
    hp = Hyperparams(batch_size=4, lr=1e-3, max_epochs=3, patience=3)
    a = pl.train_fold(small, vocab, fold, hp, seed=5)
    b = pl.train_fold(small, vocab, fold, hp, seed=5)
    for name in s2s.PARAM_NAMES:
        assert np.array_equal(getattr(a.params, name), getattr(b.params, name))
    assert a.history == b.history


def test_train_fold_aborts_on_divergence(paper_dataset, vocab, monkeypatch):
    episode_ids = sorted({ex.episode_id for ex in paper_dataset.examples})[:2]
    small = pl.Dataset(tuple(paper_dataset.subset(episode_ids)[:4]))
    fold = pl.Fold(index=0, train_ids=tuple(episode_ids), val_ids=tuple(episode_ids), test_ids=())
    monkeypatch.setattr(
        pl.seq2seq, "loss_and_grads",
        lambda p, batch: (float("nan"), {n: np.zeros_like(a) for n, a in p.arrays().items()}),
    )
    with pytest.raises(pl.TrainingDivergedError):
        pl.train_fold(small, vocab, fold, Hyperparams(max_epochs=1), seed=1)


def test_manifest_and_report_shape(paper_traces, vocab, envs, tax, book):
    kitchen, office = paper_traces
    plan = pl.make_folds(_sim_refs(kitchen), _sim_refs(office), seed=7)
    manifest = pl.build_manifest(7, Hyperparams(), plan, vocab)
    assert manifest["hyperparams"]["batch_size"] == 20
    assert manifest["hyperparams"]["lr"] == 1e-4
    assert len(manifest["fold_plan_sha256"]) == 64
    catalog = pl.build_label_catalog(envs, tax, book)
    result = pl.EvalResult(
        confusion=pl.ConfusionMatrix(catalog.classes),
        per_class={c: (0, 0) for c in catalog.classes},
        accuracy=0.5, error_accuracy=0.25, n_examples=4,
    )
    text = pl.report_text(result)
    assert "exact_match_accuracy=0.500000" in text
    assert "error_exact_match_accuracy=0.250000" in text
