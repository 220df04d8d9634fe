import numpy as np
import pytest

from tttse.data import DomainSpec, Utterance, synthesize_utterance
from tttse.metrics import aggregate
from tttse.model import ModelDims, YModel
from tttse.tasks import AuxTask
from tttse.ttt import (
    STRATEGIES,
    TttConfig,
    TttError,
    TttState,
    noisy_records,
    reevaluate_source,
    run_ttt_eval,
    strategy_matrix,
)

DIMS = ModelDims(hidden=8, context=1)
ADAPTIVE = [s for s in STRATEGIES if s != "none"]


@pytest.fixture(scope="module")
def utts():
    spec = DomainSpec("shifted", ["brown", "burst"], n_utterances=6, duration=0.25, seed=9)
    out = []
    for i in range(6):
        clean, noisy, meta = synthesize_utterance(spec, i)
        out.append(Utterance(f"x{i}", noisy, clean, meta["snr_db"], meta["family"], "shifted"))
    return out


@pytest.fixture(scope="module", params=["msp", "nytt-real"])
def setup(request):
    aux = AuxTask(request.param)
    return YModel(aux.task, DIMS, seed=3), aux


def _outputs(model, aux, data, cfg):
    state = TttState(model.clone(), aux, cfg)
    return [state.step(u.uid, u.noisy)[0].samples for u in data], state


def test_config_rules():
    assert TttConfig("online-batch-bias").kinds == {"bias"}
    assert TttConfig("online").effective_window == 1
    assert TttConfig("online-batch", window=3).effective_window == 3
    assert TttConfig("none").label == "joint"
    with pytest.raises(TttError):
        TttConfig("offline")
    with pytest.raises(TttError):
        TttConfig(window=0)


def test_aux_must_fit_model():
    with pytest.raises(TttError):
        TttState(YModel("msp", DIMS), AuxTask("nytt-gaussian"), TttConfig())


@pytest.mark.parametrize("strategy", ADAPTIVE)
def test_zero_lr_reproduces_plain_inference(setup, utts, strategy):
    model, aux = setup
    plain, _ = _outputs(model, aux, utts, TttConfig("none"))
    adapted, _ = _outputs(model, aux, utts, TttConfig(strategy, lr=0.0, weight_decay=0.0))
    for a, b in zip(plain, adapted):
        assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("strategy", ADAPTIVE)
def test_main_branch_bit_frozen(setup, utts, strategy):
    model, aux = setup
    _, state = _outputs(model, aux, utts, TttConfig(strategy, lr=1e-2, steps=2))
    for n, p in state.model.registry.items():
        if p.group == "main":
            assert p.tensor.data.tobytes() == state.pristine.params[n].tobytes()


def test_online_actually_moves_encoder_and_ss(setup, utts):
    model, aux = setup
    _, state = _outputs(model, aux, utts, TttConfig("online", lr=1e-2))
    for group in ("encoder", "ss"):
        assert any(not np.array_equal(p.tensor.data, state.pristine.params[n])
                   for n, p in state.model.registry.items() if p.group == group)


def test_bias_only_keeps_weights(setup, utts):
    model, aux = setup
    _, state = _outputs(model, aux, utts, TttConfig("online-batch-bias", lr=1e-2))
    moved = False
    for n, p in state.model.registry.items():
        if p.kind == "weight":
            assert p.tensor.data.tobytes() == state.pristine.params[n].tobytes()
        elif p.group != "main":
            moved |= not np.array_equal(p.tensor.data, state.pristine.params[n])
    assert moved


def test_standalone_returns_to_pristine_after_every_sample(setup, utts):
    model, aux = setup
    state = TttState(model.clone(), aux, TttConfig("standalone", lr=1e-2))
    for u in utts:
        _, diag = state.step(u.uid, u.noisy)
        assert diag["delta_norm"] > 0  # the prediction used adapted parameters
        for n, p in state.model.registry.items():
            assert np.max(np.abs(p.tensor.data - state.pristine.params[n])) == 0.0


def test_standalone_is_order_independent(setup, utts):
    model, aux = setup
    cfg = TttConfig("standalone", lr=1e-2)
    fwd, _ = _outputs(model, aux, utts[:5], cfg)
    order = [3, 0, 4, 1, 2]
    perm, _ = _outputs(model, aux, [utts[i] for i in order], cfg)
    for out, i in zip(perm, order):
        assert out.tobytes() == fwd[i].tobytes()


def test_window_one_equals_online(setup, utts):
    model, aux = setup
    online, _ = _outputs(model, aux, utts, TttConfig("online", lr=1e-2))
    batch1, _ = _outputs(model, aux, utts, TttConfig("online-batch", lr=1e-2, window=1))
    for a, b in zip(online, batch1):
        assert a.tobytes() == b.tobytes()


def test_window_contents(setup, utts):
    model, aux = setup
    state = TttState(model.clone(), aux, TttConfig("online-batch", lr=1e-3, window=5))
    for i, u in enumerate(utts):
        _, diag = state.step(u.uid, u.noisy)
        assert diag["window"] == [v.uid for v in utts[max(0, i - 4):i + 1]]


def test_online_carries_state_over(setup, utts):
    model, aux = setup
    state = TttState(model.clone(), aux, TttConfig("online", lr=1e-2))
    state.step(utts[0].uid, utts[0].noisy)
    exiting = {n: p.tensor.data.copy() for n, p in state.model.registry.items()}
    # adaptation on the next sample starts from exactly these parameters
    ref = TttState(model.clone(), aux, TttConfig("online", lr=1e-2))
    ref.model.restore(state.model.snapshot())
    ref.optimizer = ref._new_optimizer()
    ref.optimizer.load_state_dict(state.optimizer.state_dict())
    ref.pristine = state.pristine
    a, _ = state.step(utts[1].uid, utts[1].noisy)
    b, _ = ref.step(utts[1].uid, utts[1].noisy)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert any(not np.array_equal(exiting[n], p.tensor.data) for n, p in state.model.registry.items())


def test_nan_rolls_back(setup, utts):
    model, aux = setup
    state = TttState(model.clone(), aux, TttConfig("online", lr=1e-2))
    state.step(utts[0].uid, utts[0].noisy)
    saved = {n: p.tensor.data.copy() for n, p in state.model.registry.items()}
    opt_t = state.optimizer.t
    poison = state.model.registry["ss.head1.w"].tensor
    original_step = state.optimizer.step

    def bad_step():
        original_step()
        poison.data[0, 0] = np.nan

    state.optimizer.step = bad_step
    _, diag = state.step(utts[1].uid, utts[1].noisy)
    assert diag["rolled_back"]
    assert state.optimizer.t == opt_t
    for n, p in state.model.registry.items():
        assert np.array_equal(p.tensor.data, saved[n]), n


def test_reset_clears_everything(setup, utts):
    model, aux = setup
    state = TttState(model.clone(), aux, TttConfig("online-batch", lr=1e-2))
    for u in utts[:3]:
        state.step(u.uid, u.noisy)
    state.reset()
    assert not state.window and state.optimizer is None and state.delta_norm() == 0.0


def test_run_eval_records_and_reevaluation(setup, utts):
    model, aux = setup
    recs, state = run_ttt_eval(model, utts, TttConfig("online", lr=1e-2), aux)
    again, _ = run_ttt_eval(model, utts, TttConfig("online", lr=1e-2), aux)
    assert [r.si_sdr for r in recs] == [r.si_sdr for r in again]
    assert all(r.strategy == "online" and r.domain == "shifted" and r.ss_loss_before is not None for r in recs)
    # the caller's model is never touched
    for n, p in model.registry.items():
        assert p.tensor.data.tobytes() == state.pristine.params[n].tobytes()

    _, plain = run_ttt_eval(model, utts, TttConfig("none"), aux)
    _, alone = run_ttt_eval(model, utts, TttConfig("standalone", lr=1e-2), aux)
    src_plain = reevaluate_source(plain, utts)
    src_alone = reevaluate_source(alone, utts)
    assert [r.si_sdr for r in src_plain] == [r.si_sdr for r in src_alone]
    assert [r.si_sdr for r in src_plain] == [r.si_sdr for r in run_ttt_eval(model, utts, TttConfig("none"), aux)[0]]


def test_missing_clean_still_enhances(setup, utts):
    model, aux = setup
    bare = [Utterance(u.uid, u.noisy) for u in utts[:2]]
    seen = []
    recs, _ = run_ttt_eval(model, bare, TttConfig("standalone", lr=1e-3), aux, on_sample=lambda d, w: seen.append(w))
    assert all(r.si_sdr is None for r in recs) and len(seen) == 2


def test_table_from_strategy_matrix(setup, utts):
    model, aux = setup
    recs = noisy_records(utts, "shifted")
    for cfg in strategy_matrix(1e-3, window=2):
        recs += run_ttt_eval(model, utts[:3], cfg, aux)[0]
    t = aggregate(recs)
    assert [r["strategy"] for r in t.rows] == ["-", "joint", "standalone", "online", "online-batch",
                                              "online-batch-bias"]
