import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spkfilm.errors import DataError, LabelError
from spkfilm.model import DESK_WIDTHS, ConditioningConfig, ModelConfig, build_model
from spkfilm.toy import ToyConfig, make_toy_corpus, mix_frames
from spkfilm.training import (
    CONTINUE,
    DECAY,
    STOP,
    LabeledFrameSet,
    Schedule,
    TrainState,
    evaluate,
    lr_schedule_step,
    merge_results,
    read_results_csv,
    relative_error_reduction,
    replay_schedule,
    run_experiment,
    split_by_utterance,
    train,
)

# ---------------------------------------------------------------- schedule


def _losses_from_improvements(start, improvements):
    out, cur = [], start
    for d in improvements:
        cur -= d
        out.append(cur)
    return out


def test_first_decay_after_three_small_improvements():
    losses = _losses_from_improvements(1.0, [0.5, 0.005, 0.005, 0.005])
    trace = replay_schedule(losses, initial_best=1.0)
    assert [a for _, a in trace] == [CONTINUE, CONTINUE, CONTINUE, DECAY]
    assert [lr for lr, _ in trace] == [0.01, 0.01, 0.01, 0.005]


def test_steady_improvement_runs_to_max_epochs():
    losses = _losses_from_improvements(10.0, [0.02] * 120)
    trace = replay_schedule(losses, initial_best=10.0)
    assert len(trace) == 100
    assert trace[-1] == (0.01, STOP)
    assert all(a == CONTINUE for _, a in trace[:-1])


def test_stop_when_plateau_completes_after_sixth_decay():
    state = TrainState(epoch=40, lr=0.01 * 0.5**6, decay_count=6, plateau_count=0, best_cv_loss=1.0)
    actions = []
    for _ in range(3):
        state, a = lr_schedule_step(state, 1.0)
        actions.append(a)
    assert actions == [CONTINUE, CONTINUE, STOP]
    assert state.decay_count == 6


def test_flat_loss_full_trajectory():
    trace = replay_schedule([1.0] * 50, initial_best=1.0)
    lrs = [0.01 * 0.5**d for d in range(7)]
    expected = []
    for d in range(1, 7):
        expected += [(lrs[d - 1], CONTINUE)] * 2 + [(lrs[d], DECAY)]
    expected += [(lrs[6], CONTINUE)] * 2 + [(lrs[6], STOP)]
    assert trace == expected
    assert [lr for lr, a in trace if a == DECAY] == [0.005, 0.0025, 0.00125, 0.000625, 0.0003125, 0.00015625]


def test_nonfinite_loss_rejected():
    with pytest.raises(ValueError):
        lr_schedule_step(TrainState(), float("nan"))


@given(st.lists(st.floats(0.0, 5.0), min_size=1, max_size=150))
@settings(max_examples=200, deadline=None)
def test_schedule_invariants(losses):
    state = TrainState(best_cv_loss=math.inf)
    for loss in losses:
        state, action = lr_schedule_step(state, loss)
        assert state.decay_count <= 6
        assert state.epoch <= 100
        assert state.lr == 0.01 * 0.5**state.decay_count
        if action == STOP:
            break


# ---------------------------------------------------------------- toy corpus

TINY = ToyConfig(
    n_speakers=3, n_classes=4, frames_per_speaker=240, frames_per_utt=40,
    dev_utts_per_speaker=1, eval_utts_per_speaker=1, context=2, embedding_dim=16, noise=0.1,
)
TINY_MC = ModelConfig(stage_channels=DESK_WIDTHS, num_classes=4, input_shape=(1, 5, 13), embedding_dim=16)


def test_toy_zero_db_construction():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((20, 13)), rng.standard_normal((20, 13))
    mix, g = mix_frames(a, b, 0.0)
    lin_a, lin_b = np.exp(a), np.exp(b)
    assert np.mean(lin_a**2) == pytest.approx(np.mean((g * lin_b) ** 2), rel=1e-12)
    np.testing.assert_allclose(mix, np.log(lin_a + g * lin_b), rtol=1e-12)


def test_toy_labels_are_target_labels():
    tc = make_toy_corpus(TINY, seed=0)
    ov = tc.data.tests["overlap"]
    clean = tc.data.tests["clean_dev"]
    assert len(ov) == 6 * len(clean)
    for i in range(3):
        per = TINY.frames_per_utt
        seg = ov.labels[i * 6 * per : i * 6 * per + per]
        np.testing.assert_array_equal(seg, clean.labels[i * per : (i + 1) * per])
    assert set(np.unique(ov.sir_db)) == {0.0, 5.0, 10.0, 15.0, 20.0, 25.0}
    assert not set(np.unique(tc.data.train.utt_index)) & set(np.unique(tc.data.cv.utt_index))


def test_toy_disjoint_noiseless_is_linearly_separable():
    cfg = ToyConfig(n_speakers=4, n_classes=6, template_kind="disjoint", template_scale=5.0,
                    signature_scale=0.5, noise=0.0, clean_train_fraction=1.0, context=0, embedding_dim=16)
    tc = make_toy_corpus(cfg, seed=1)
    x = tc.data.train.windows[:, 0]
    y = tc.data.train.labels
    feats = np.hstack([x, np.ones((len(x), 1))])
    w, *_ = np.linalg.lstsq(feats, np.eye(6)[y], rcond=None)
    assert np.mean((feats @ w).argmax(1) == y) == 1.0


def test_toy_zero_db_bayes_error_oracle():
    """Brute-force Bayes error on noiseless equal-power single-frame mixtures."""
    cfg = ToyConfig(n_speakers=4, n_classes=5)
    tc = make_toy_corpus(cfg, seed=2)
    T, S = tc.templates, tc.signatures
    by_frame, by_frame_spk = {}, {}
    for s1 in range(4):
        for s2 in range(4):
            if s1 == s2:
                continue
            for k1 in range(5):
                for k2 in range(5):
                    a, b = np.exp(T[k1] + S[s1]), np.exp(T[k2] + S[s2])
                    key = tuple(np.round(np.log(a + b), 9))
                    by_frame.setdefault(key, []).append(k1)
                    by_frame_spk.setdefault((key, s1), []).append(k1)

    def bayes_error(groups):
        wrong = sum(len(v) - max(v.count(c) for c in set(v)) for v in groups.values())
        return wrong / sum(len(v) for v in groups.values())

    # every input appears once as (s1,k1) target and once swapped; half of the k1 != k2 cases are lost
    assert bayes_error(by_frame) == pytest.approx(0.5 * (1 - 1 / 5))
    assert bayes_error(by_frame_spk) == 0.0


# ---------------------------------------------------------------- training


@pytest.fixture(scope="module")
def tiny_corpus():
    return make_toy_corpus(TINY, seed=0)


def _train_tiny(tc, seed, epochs=3, fusion="affine"):
    model = build_model(TINY_MC, ConditioningConfig(fusion=fusion, generator_hidden=16), seed=seed)
    sched = Schedule(max_epochs=epochs, batch_size=64)
    return model, train(model, tc.data.train, tc.data.cv, tc.data.embeddings, sched, seed=seed)


def test_training_log_bitwise_deterministic(tiny_corpus):
    _, a = _train_tiny(tiny_corpus, seed=5)
    _, b = _train_tiny(tiny_corpus, seed=5)
    assert a.log_csv() == b.log_csv()
    _, c = _train_tiny(tiny_corpus, seed=6)
    assert a.log_csv() != c.log_csv()
    assert a.log_csv().splitlines()[0] == "epoch,train_loss,cv_loss,lr,decay_count,action"


def test_training_descends_and_lr_invariant(tiny_corpus):
    _, res = _train_tiny(tiny_corpus, seed=0, epochs=4)
    assert res.best_cv_loss < res.initial_cv_loss
    assert res.log[-1]["action"] == STOP
    for r in res.log:
        assert r["lr"] == 0.01 * 0.5 ** r["decay_count"]


def test_restores_best_weights(tiny_corpus):
    model, res = _train_tiny(tiny_corpus, seed=1, epochs=3)
    from spkfilm.training import dataset_loss

    got = dataset_loss(model, tiny_corpus.data.cv, tiny_corpus.data.embeddings)
    assert got == pytest.approx(res.best_cv_loss, rel=1e-6)


def test_train_errors(tiny_corpus):
    d = tiny_corpus.data
    model = build_model(TINY_MC, ConditioningConfig(generator_hidden=16))
    with pytest.raises(DataError):
        train(model, d.train.subset(np.zeros(len(d.train), bool)), d.cv, d.embeddings)
    bad = LabeledFrameSet(d.cv.windows, np.full(len(d.cv), 9), d.cv.speakers)
    with pytest.raises(LabelError):
        train(model, d.train, bad, d.embeddings)
    with pytest.raises(DataError):
        train(model, d.train, d.cv, None)


def test_split_by_utterance_disjoint():
    n = 100
    fs = LabeledFrameSet(np.zeros((n, 3, 13)), np.zeros(n), np.zeros(n), utt_index=np.repeat(np.arange(10), 10))
    tr, cv = split_by_utterance(fs, 0.1, seed=0)
    assert len(cv) == 10 and len(tr) == 90
    assert not set(tr.utt_index) & set(cv.utt_index)


# ---------------------------------------------------------------- evaluation


def test_evaluate_chance_level():
    rng = np.random.default_rng(0)
    k, n = 5, 4000
    model = build_model(ModelConfig(stage_channels=DESK_WIDTHS, num_classes=k, embedding_dim=8), ConditioningConfig(fusion="none"))
    model.forward(rng.standard_normal((64, 21, 13)), train=True)
    fs = LabeledFrameSet(rng.standard_normal((n, 21, 13)).astype(np.float32), rng.integers(0, k, n), np.zeros(n))
    acc = evaluate(model, fs, None)["clean"].accuracy
    sigma = math.sqrt((1 / k) * (1 - 1 / k) / n)
    assert abs(acc - 1 / k) < 3 * sigma


def test_evaluate_groups_by_sir_and_label_check(tiny_corpus):
    model, _ = _train_tiny(tiny_corpus, seed=0, epochs=1)
    out = evaluate(model, tiny_corpus.data.tests["overlap"], tiny_corpus.data.embeddings)
    assert list(out) == ["sir_0", "sir_5", "sir_10", "sir_15", "sir_20", "sir_25"]
    assert sum(m.frames for m in out.values()) == len(tiny_corpus.data.tests["overlap"])
    again = evaluate(model, tiny_corpus.data.tests["overlap"], tiny_corpus.data.embeddings)
    assert {k: v.accuracy for k, v in out.items()} == {k: v.accuracy for k, v in again.items()}
    d = tiny_corpus.data.cv
    with pytest.raises(LabelError):
        evaluate(model, LabeledFrameSet(d.windows, np.full(len(d), 4), d.speakers), tiny_corpus.data.embeddings)


def test_overfit_tiny_train_set():
    cfg = ToyConfig(n_speakers=2, n_classes=4, frames_per_speaker=100, frames_per_utt=50, dev_utts_per_speaker=1,
                    eval_utts_per_speaker=1, context=2, embedding_dim=16, noise=0.3, clean_train_fraction=0.5)
    tc = make_toy_corpus(cfg, seed=3)
    model = build_model(TINY_MC, ConditioningConfig(generator_hidden=16), seed=0)
    train_all = LabeledFrameSet.concat([tc.data.train, tc.data.cv])
    sched = Schedule(max_epochs=60, batch_size=32, initial_lr=0.05)
    train(model, train_all, train_all, tc.data.embeddings, sched, seed=0)
    acc = np.mean([m.accuracy for m in evaluate(model, train_all, tc.data.embeddings).values()])
    assert acc > 0.99


# ---------------------------------------------------------------- experiments


def test_run_experiment_repeats_and_determinism(tiny_corpus, tmp_path):
    variants = {"baseline": ConditioningConfig(fusion="none")}
    sched = Schedule(max_epochs=1, batch_size=128)
    t3 = run_experiment(tiny_corpus.data, TINY_MC, variants, sched, n_repeats=3, base_seed=7)
    assert sorted(t3.rows) == ["baseline/mean", "baseline/run0", "baseline/run1", "baseline/run2"]
    col = "sir_0"
    assert t3.mean("baseline")[col] == pytest.approx(np.mean([t3.rows[f"baseline/run{i}"][col] for i in range(3)]))
    t1 = run_experiment(tiny_corpus.data, TINY_MC, variants, sched, n_repeats=1, base_seed=7)
    assert t1.mean("baseline") == t1.rows["baseline/run0"] == t3.rows["baseline/run0"]
    assert run_experiment(tiny_corpus.data, TINY_MC, variants, sched, n_repeats=1, base_seed=7).rows == t1.rows
    with pytest.raises(ValueError):
        run_experiment(tiny_corpus.data, TINY_MC, variants, sched, n_repeats=0)

    text = t3.to_csv(provenance="seed=7\ncmd=test")
    assert text.startswith("# seed=7\n# cmd=test\nvariant,sir_0,sir_5,sir_10,sir_15,sir_20,sir_25,clean_dev,clean_eval\n")
    p = tmp_path / "r.csv"
    p.write_text(text)
    back = read_results_csv(p)
    assert back["baseline/run1"]["clean_dev"] == pytest.approx(t3.rows["baseline/run1"]["clean_dev"], abs=1e-6)
    merged = merge_results([{k: v for k, v in back.items() if k != "baseline/run2"}, {"baseline/run0": back["baseline/run2"]}])
    assert merged.mean("baseline")["sir_0"] == pytest.approx(back["baseline/mean"]["sir_0"], abs=1e-6)


def test_relative_error_reduction():
    assert relative_error_reduction(80.0, 90.0) == pytest.approx(0.5)
    assert relative_error_reduction(50.0, 50.0) == 0.0
    assert relative_error_reduction(100.0, 100.0) == 0.0
