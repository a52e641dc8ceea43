import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibens.combiners import (
    KINDS,
    HeadOutputs,
    MetaTrainConfig,
    Metamodel,
    build_metamodel,
    combine_average,
    combine_metamodel,
    combine_vote,
    hidden_width,
    load_metamodel,
    metamodel_forward,
    metamodel_gradients,
    param_count,
    save_metamodel,
    train_metamodel,
)
from calibens.errors import ConfigError, DataError, DimensionError, FormatError
from calibens.numerics import RngStream, cross_entropy, relu, softmax

from gradcheck import finite_difference_grads, relative_error


def random_outputs(stream, m, n, c, sharpness=1.0):
    return HeadOutputs([softmax(sharpness * stream.standard_normal((n, c))) for _ in range(m)])


class TestHeadOutputs:
    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            HeadOutputs([np.full((2, 2), 0.5), np.full((3, 2), 0.5)])

    def test_non_prob_rows_rejected(self):
        with pytest.raises(DataError):
            HeadOutputs([np.asarray([[0.9, 0.5]])])

    def test_logits_mode_skips_validation(self):
        outputs = HeadOutputs([np.asarray([[3.0, -1.0]])], rows_are_probs=False)
        assert outputs.m == 1

    def test_concatenation_is_head_major(self):
        a = np.asarray([[0.2, 0.8]])
        b = np.asarray([[0.6, 0.4]])
        assert np.array_equal(HeadOutputs([a, b]).concatenated(), [[0.2, 0.8, 0.6, 0.4]])


class TestCombineAverage:
    def test_identical_heads_idempotent(self):
        stream = RngStream(1)
        probs = softmax(stream.standard_normal((4, 3)))
        pred = combine_average(HeadOutputs([probs.copy() for _ in range(4)]), [0, 1, 2, 0])
        assert np.allclose(pred.probs, probs, atol=1e-15)

    def test_opposite_heads_tie_to_lowest_index(self):
        outputs = HeadOutputs([np.asarray([[1.0, 0.0]]), np.asarray([[0.0, 1.0]])])
        pred = combine_average(outputs, [1])
        assert np.array_equal(pred.probs, [[0.5, 0.5]])
        assert pred.predicted_class[0] == 0

    def test_matches_elementwise_mean_oracle(self):
        stream = RngStream(7)
        outputs = random_outputs(stream, 3, 10, 4)
        labels = stream.integers(0, 4, 10)
        pred = combine_average(outputs, labels)
        expect = (outputs.per_head[0] + outputs.per_head[1] + outputs.per_head[2]) / 3
        assert np.allclose(pred.probs, expect, atol=1e-12)

    def test_rows_remain_probability_vectors(self):
        outputs = random_outputs(RngStream(9), 5, 50, 6)
        pred = combine_average(outputs, np.zeros(50, dtype=int))
        assert np.allclose(pred.probs.sum(axis=1), 1.0, atol=1e-12)

    def test_rejects_logit_outputs(self):
        outputs = HeadOutputs([np.zeros((2, 2))], rows_are_probs=False)
        with pytest.raises(DataError):
            combine_average(outputs, [0, 1])


class TestCombineVote:
    def test_strict_majority(self):
        # head argmaxes {2, 2, 5} -> class 2
        rows = [np.zeros((1, 6)) for _ in range(3)]
        for row, cls in zip(rows, [2, 2, 5]):
            row[0, cls] = 1.0
        pred = combine_vote(HeadOutputs(rows), [0])
        assert pred.predicted_class[0] == 2

    def test_tie_broken_by_mean_confidence(self):
        h1 = np.asarray([[0.9, 0.1]])
        h2 = np.asarray([[0.4, 0.6]])
        pred = combine_vote(HeadOutputs([h1, h2]), [0])
        assert pred.predicted_class[0] == 0  # the 0.9 class wins
        assert pred.confidence[0] == pytest.approx(0.65, abs=1e-15)

    def test_remaining_tie_goes_to_lowest_index(self):
        h1 = np.asarray([[0.7, 0.3]])
        h2 = np.asarray([[0.3, 0.7]])
        pred = combine_vote(HeadOutputs([h1, h2]), [0])
        assert pred.predicted_class[0] == 0

    def test_single_head_equals_argmax(self):
        stream = RngStream(3)
        probs = softmax(stream.standard_normal((8, 4)))
        labels = stream.integers(0, 4, 8)
        pred = combine_vote(HeadOutputs([probs]), labels)
        assert np.array_equal(pred.predicted_class, np.argmax(probs, axis=1))
        assert np.allclose(pred.confidence, np.max(probs, axis=1), atol=1e-15)


class TestPermutationInvariance:
    @given(st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_average_and_vote_identical_under_head_permutation(self, seed):
        stream = RngStream(seed)
        m = int(stream.integers(2, 7))
        outputs = random_outputs(stream, m, 20, 5)
        labels = stream.integers(0, 5, 20)
        perm = stream.permutation(m)
        shuffled = HeadOutputs([outputs.per_head[i] for i in perm])
        for combine in (combine_average, combine_vote):
            a = combine(outputs, labels)
            b = combine(shuffled, labels)
            assert np.array_equal(a.predicted_class, b.predicted_class)
            assert np.array_equal(a.confidence, b.confidence)


class TestBuildMetamodel:
    def test_param_counts_match_formulas(self):
        assert param_count("SLpC", 5, 100) == 600
        assert param_count("SL", 5, 100) == 50_100
        assert param_count("DLL", 5, 100) == 300_600
        # DL at m=5, C=100: h=250; 250*500 + 250 + 250*100 + 100
        assert hidden_width("DL", 5, 100) == 250
        assert param_count("DL", 5, 100) == 250 * 500 + 250 + 250 * 100 + 100

    @pytest.mark.parametrize("kind", KINDS)
    def test_built_params_match_count(self, kind):
        meta = build_metamodel(kind, 3, 7, seed=5)
        assert meta.param_count == param_count(kind, 3, 7)

    @pytest.mark.parametrize("kind", KINDS)
    def test_deterministic(self, kind):
        a = build_metamodel(kind, 3, 4, seed=11)
        b = build_metamodel(kind, 3, 4, seed=11)
        for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
            assert np.array_equal(wa, wb)
            assert np.array_equal(ba, bb)

    def test_init_respects_fan_in_bound(self):
        meta = build_metamodel("SL", 4, 25, seed=2)
        bound = 1.0 / np.sqrt(4 * 25)
        w, b = meta.layers[0]
        assert np.all(np.abs(w) <= bound)
        assert np.all(np.abs(b) <= bound)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            build_metamodel("XXL", 3, 4, seed=0)

    def test_hidden_widths(self):
        assert hidden_width("DL", 3, 5) == 8  # ceil(15 / 2)
        assert hidden_width("DLL", 3, 5) == 15
        assert hidden_width("SL", 3, 5) == 0


class TestMetamodelForward:
    def test_sl_zero_weights_yield_bias(self):
        meta = build_metamodel("SL", 2, 3, seed=1)
        meta.layers = [(np.zeros((3, 6)), np.asarray([1.0, -1.0, 0.5]))]
        outputs = random_outputs(RngStream(2), 2, 4, 3)
        logits = metamodel_forward(meta, outputs)
        assert np.array_equal(logits, np.tile([1.0, -1.0, 0.5], (4, 1)))

    def test_slpc_uniform_weights_recover_averaging(self):
        m, c = 4, 5
        meta = build_metamodel("SLpC", m, c, seed=1)
        meta.layers = [(np.full((c, m), 1.0 / m), np.zeros(c))]
        outputs = random_outputs(RngStream(3), m, 12, c)
        logits = metamodel_forward(meta, outputs)
        expect = np.mean(outputs.stacked(), axis=0)
        assert np.allclose(logits, expect, atol=1e-12)

    def test_dl_matches_hand_composed_oracle(self):
        meta = build_metamodel("DL", 2, 2, seed=6)
        outputs = random_outputs(RngStream(8), 2, 5, 2)
        (w1, b1), (w2, b2) = meta.layers
        x = outputs.concatenated()
        expect = relu(x @ w1.T + b1) @ w2.T + b2
        assert np.allclose(metamodel_forward(meta, outputs), expect, atol=1e-12)

    def test_eval_mode_ignores_rng(self):
        meta = build_metamodel("DL", 2, 3, seed=4)
        outputs = random_outputs(RngStream(5), 2, 6, 3)
        a = metamodel_forward(meta, outputs)
        b = metamodel_forward(meta, outputs, rng=RngStream(99))
        assert np.array_equal(a, b)

    def test_training_mode_dropout_changes_output(self):
        meta = build_metamodel("DL", 2, 3, seed=4)
        outputs = random_outputs(RngStream(5), 2, 6, 3)
        evaluated = metamodel_forward(meta, outputs)
        trained = metamodel_forward(meta, outputs, training_mode=True, rng=RngStream(1))
        assert not np.array_equal(evaluated, trained)

    def test_training_mode_requires_rng(self):
        meta = build_metamodel("DLL", 2, 3, seed=4)
        outputs = random_outputs(RngStream(5), 2, 6, 3)
        with pytest.raises(ConfigError):
            metamodel_forward(meta, outputs, training_mode=True)

    def test_shape_mismatch(self):
        meta = build_metamodel("SL", 3, 4, seed=0)
        outputs = random_outputs(RngStream(5), 2, 6, 4)
        with pytest.raises(DimensionError):
            metamodel_forward(meta, outputs)


class TestGradients:
    @pytest.mark.parametrize("kind", KINDS)
    def test_matches_finite_differences(self, kind):
        stream = RngStream(42)
        outputs = random_outputs(stream, 3, 9, 4)
        labels = stream.integers(0, 4, 9)
        meta = build_metamodel(kind, 3, 4, seed=17)
        _, analytic = metamodel_gradients(meta, outputs, labels)
        params = [arr for pair in meta.layers for arr in pair]
        loss_fn = lambda: metamodel_gradients(meta, outputs, labels)[0]
        numeric = finite_difference_grads(loss_fn, params)
        flat_analytic = [g for pair in analytic for g in pair]
        for a, n in zip(flat_analytic, numeric):
            assert relative_error(a, n) <= 1e-4


def informative_outputs(stream, m, n, c, labels):
    """Heads that lean toward the true label, softened with noise."""
    one_hot = np.eye(c)[labels]
    return HeadOutputs(
        [softmax(stream.standard_normal((n, c)) + 2.0 * one_hot) for _ in range(m)]
    )


class TestTrainMetamodel:
    def make_problem(self, seed=0, m=3, c=4, n_train=120, n_val=40):
        stream = RngStream(seed)
        train_labels = stream.integers(0, c, n_train)
        val_labels = stream.integers(0, c, n_val)
        train_outputs = informative_outputs(stream, m, n_train, c, train_labels)
        val_outputs = informative_outputs(stream, m, n_val, c, val_labels)
        return train_outputs, train_labels, val_outputs, val_labels

    def test_single_epoch_history(self):
        tr_out, tr_y, va_out, va_y = self.make_problem()
        meta = build_metamodel("SL", 3, 4, seed=5)
        trained = train_metamodel(meta, tr_out, tr_y, va_out, va_y, MetaTrainConfig(epochs=1, seed=9))
        assert len(trained.training_history) == 1

    def test_slpc_from_averaging_point_never_validates_worse(self):
        tr_out, tr_y, va_out, va_y = self.make_problem(seed=2)
        meta = build_metamodel("SLpC", 3, 4, seed=5)
        meta.layers = [(np.full((4, 3), 1.0 / 3.0), np.zeros(4))]
        initial_loss = cross_entropy(softmax(metamodel_forward(meta, va_out)), va_y)
        trained = train_metamodel(meta, tr_out, tr_y, va_out, va_y, MetaTrainConfig(seed=9))
        final_loss = cross_entropy(softmax(metamodel_forward(trained, va_out)), va_y)
        assert final_loss <= initial_loss

    def test_bit_identical_across_runs(self):
        tr_out, tr_y, va_out, va_y = self.make_problem(seed=3)
        cfg = MetaTrainConfig(epochs=5, seed=13)
        results = []
        for _ in range(2):
            meta = build_metamodel("DL", 3, 4, seed=5)
            results.append(train_metamodel(meta, tr_out, tr_y, va_out, va_y, cfg))
        for (wa, ba), (wb, bb) in zip(results[0].layers, results[1].layers):
            assert np.array_equal(wa, wb)
            assert np.array_equal(ba, bb)
        assert results[0].training_history == results[1].training_history

    def test_input_model_untouched(self):
        tr_out, tr_y, va_out, va_y = self.make_problem(seed=4)
        meta = build_metamodel("SL", 3, 4, seed=5)
        before = [(w.copy(), b.copy()) for w, b in meta.layers]
        train_metamodel(meta, tr_out, tr_y, va_out, va_y,
                        MetaTrainConfig(epochs=3, initial_lr=0.05, seed=9))
        for (w0, b0), (w1, b1) in zip(before, meta.layers):
            assert np.array_equal(w0, w1)
            assert np.array_equal(b0, b1)

    def test_higher_lr_actually_learns(self):
        tr_out, tr_y, va_out, va_y = self.make_problem(seed=6, n_train=300)
        meta = build_metamodel("SLpC", 3, 4, seed=5)
        cfg = MetaTrainConfig(epochs=30, initial_lr=0.05, seed=9)
        trained = train_metamodel(meta, tr_out, tr_y, va_out, va_y, cfg)
        pred = combine_metamodel(trained, va_out, va_y)
        baseline = combine_average(va_out, va_y)
        from calibens.metrics import accuracy

        assert accuracy(pred) >= accuracy(baseline) - 0.05


class TestSlpcAveragingArgmax:
    @given(st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_argmax_agreement(self, seed):
        stream = RngStream(seed)
        m = int(stream.integers(1, 6))
        c = int(stream.integers(2, 8))
        n = int(stream.integers(1, 30))
        outputs = random_outputs(stream, m, n, c)
        labels = stream.integers(0, c, n)
        meta = build_metamodel("SLpC", m, c, seed=0)
        meta.layers = [(np.full((c, m), 1.0 / m), np.zeros(c))]
        via_meta = combine_metamodel(meta, outputs, labels)
        via_avg = combine_average(outputs, labels)
        assert np.array_equal(via_meta.predicted_class, via_avg.predicted_class)


class TestMetamodelFile:
    @pytest.mark.parametrize("kind", KINDS)
    def test_round_trip_at_f32(self, kind, tmp_path):
        meta = build_metamodel(kind, 3, 5, seed=21, dropout_p=0.25)
        path = tmp_path / f"{kind}.mmd"
        save_metamodel(meta, path)
        loaded = load_metamodel(path)
        assert loaded.kind == kind
        assert loaded.num_heads == 3 and loaded.num_classes == 5
        assert loaded.hidden == meta.hidden
        assert loaded.seed == 21
        for (w0, b0), (w1, b1) in zip(meta.layers, loaded.layers):
            assert np.array_equal(w1, w0.astype(np.float32))
            assert np.array_equal(b1, b0.astype(np.float32))

    def test_slpc_file_size(self, tmp_path):
        m, c = 5, 100
        meta = build_metamodel("SLpC", m, c, seed=0)
        path = tmp_path / "slpc.mmd"
        save_metamodel(meta, path)
        assert path.stat().st_size == 4 + 1 + 4 + 4 + 4 + 4 + 8 + 4 * c * (m + 1)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.mmd"
        path.write_bytes(b"WHAT" + b"\x00" * 40)
        with pytest.raises(FormatError, match="magic"):
            load_metamodel(path)

    def test_unknown_kind_tag(self, tmp_path):
        meta = build_metamodel("SL", 2, 2, seed=0)
        path = tmp_path / "m.mmd"
        save_metamodel(meta, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="kind tag"):
            load_metamodel(path)

    def test_truncated(self, tmp_path):
        meta = build_metamodel("DL", 2, 3, seed=0)
        path = tmp_path / "m.mmd"
        save_metamodel(meta, path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError):
            load_metamodel(path)
