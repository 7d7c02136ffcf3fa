"""Engine checks: encoder, stepping, conservation, rates, classification."""

import numpy as np
import pytest

import spikecast as sc
from spikecast.convert import SnnLayer, SnnModel
from spikecast.engine import NeuronLayerState, RecordFlags, step_layer
from spikecast.errors import DataError

from conftest import make_random_snn
from oracles import naive_if_run


def single_neuron_snn(weight=0.0, bias=0.0, threshold=100.0):
    """One spiking neuron feeding a pass-through readout."""
    return SnnModel(name="one", input_shape=(1,), layers=(
        SnnLayer(name="n", kind="dense", threshold=threshold,
                 weights=np.array([[weight]]), bias_current=np.array([bias]),
                 out_shape=(1,)),
        SnnLayer(name="out", kind="dense", threshold=threshold,
                 weights=np.array([[1.0]]), bias_current=np.array([0.0]),
                 out_shape=(1,)),
    ), kappa0=100.0, timesteps=16)


class TestEncodeInput:
    def test_max_pixel_fires_every_step(self):
        train = sc.encode_input(np.array([1.0]), 100.0, 4)
        np.testing.assert_array_equal(train[:, 0], [1, 1, 1, 1])

    def test_half_rate_pixel_alternates(self):
        train = sc.encode_input(np.array([0.5, 1.0]), 100.0, 4)
        np.testing.assert_array_equal(train[:, 1], [1, 1, 1, 1])
        np.testing.assert_array_equal(train[:, 0], [0, 1, 0, 1])

    def test_all_zero_input_encodes_to_silence(self):
        train = sc.encode_input(np.zeros((1, 2, 2)), 100.0, 8)
        assert train.shape == (8, 1, 2, 2)
        assert train.sum() == 0

    def test_counts_follow_floor_rule(self):
        rng = np.random.default_rng(61)
        for _ in range(200):
            x = rng.uniform(0, 1, 6)
            x[rng.integers(0, 6)] = 1.0
            T = int(rng.integers(1, 65))
            counts = sc.encode_input(x, 100.0, T).sum(axis=0)
            want = np.floor(T * x / x.max())
            assert np.all(np.abs(counts - want) <= 1)

    def test_values_outside_unit_interval_rejected(self):
        with pytest.raises(DataError):
            sc.encode_input(np.array([1.5]), 100.0, 4)


class TestStepLayer:
    def test_exact_threshold_fires_and_resets_to_zero(self):
        state = NeuronLayerState.zeros((1,), 100.0)
        spikes = step_layer(state, np.array([100.0]))
        assert spikes[0] == 1
        assert state.potential[0] == 0.0
        assert state.spike_count[0] == 1

    def test_subthreshold_accumulates_then_fires_with_residual(self):
        state = NeuronLayerState.zeros((1,), 100.0)
        assert step_layer(state, np.array([60.0]))[0] == 0
        assert step_layer(state, np.array([60.0]))[0] == 1
        assert state.potential[0] == pytest.approx(20.0)

    def test_matches_naive_stepper_on_random_currents(self):
        rng = np.random.default_rng(62)
        for _ in range(50):
            thr = float(rng.uniform(0.5, 50.0))
            currents = rng.uniform(-0.8, 1.5, int(rng.integers(5, 60))) * thr
            state = NeuronLayerState.zeros((1,), thr)
            got = [int(step_layer(state, np.array([z]))[0]) for z in currents]
            want, v, cum = naive_if_run(currents, thr)
            assert got == want
            assert state.potential[0] == pytest.approx(v, rel=1e-12, abs=1e-12)
            assert state.cumulative_input[0] == pytest.approx(cum, rel=1e-12, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        state = NeuronLayerState.zeros((2,), 1.0)
        with pytest.raises(DataError):
            step_layer(state, np.zeros(3))


class TestSimulate:
    def test_zero_input_zero_bias_is_silent(self):
        snn = single_neuron_snn(weight=1.0, bias=0.0)
        trace = sc.simulate(snn, np.zeros(1, np.float32), 16)
        assert trace.encoder.spike_count.sum() == 0
        assert all(lt.spike_count.sum() == 0 for lt in trace.layers)

    def test_threshold_current_spikes_every_step(self):
        snn = single_neuron_snn(weight=100.0)
        trace = sc.simulate(snn, np.array([1.0], np.float32), 8)
        assert int(trace.layers[0].spike_count[0]) == 8

    def test_timesteps_must_be_positive(self):
        snn = single_neuron_snn(weight=1.0)
        with pytest.raises(DataError):
            sc.simulate(snn, np.array([1.0], np.float32), 0)

    def test_deterministic(self, runs, test_bundle):
        snn = runs.snn(T=32)
        a = sc.simulate(snn, test_bundle.inputs[0], 32)
        b = sc.simulate(snn, test_bundle.inputs[0], 32)
        np.testing.assert_array_equal(a.layers[-1].potential, b.layers[-1].potential)
        for la, lb in zip(a.layers, b.layers):
            np.testing.assert_array_equal(la.spike_count, lb.spike_count)
            np.testing.assert_array_equal(la.potential, lb.potential)

    def test_batch_matches_single_sample_runs(self, runs, test_bundle):
        # spike trains agree exactly; potentials only to float summation
        # order (BLAS reduces differently per batch shape)
        snn = runs.snn(T=32)
        X = test_bundle.inputs[:6]
        batch = sc.simulate_batch(snn, X, 32)
        for i in range(6):
            single = sc.simulate(snn, X[i], 32)
            np.testing.assert_allclose(batch.sample(i).layers[-1].potential,
                                       single.layers[-1].potential, rtol=1e-12)
            for lb, ls in zip(batch.sample(i).layers, single.layers):
                np.testing.assert_array_equal(lb.spike_count, ls.spike_count)

    def test_monotone_spike_counts(self):
        rng = np.random.default_rng(63)
        snn = make_random_snn(rng, widths=(5, 6, 4))
        x = rng.uniform(0, 1, 5).astype(np.float32)
        trace = sc.simulate(snn, x, 24, record=RecordFlags(rasters=True))
        for lt in trace.layers[:-1]:
            running = np.cumsum(lt.raster.astype(np.int64), axis=0)
            assert np.all(np.diff(running, axis=0) >= 0)
            np.testing.assert_array_equal(running[-1], lt.spike_count)

    def test_fixture_classification_matches_cnn_on_probe_images(self, runs, folded_model,
                                                                test_bundle):
        from spikecast.models import forward_batch
        snn = runs.snn(T=256)
        X = test_bundle.inputs[:8]
        logits, _ = forward_batch(folded_model, X)
        trace = sc.simulate_batch(snn, X, 256)
        np.testing.assert_array_equal(sc.classify_batch(trace), np.argmax(logits, axis=1))


class TestConservation:
    def test_float_mode_random_networks(self):
        rng = np.random.default_rng(64)
        for _ in range(40):
            snn = make_random_snn(rng)
            x = rng.uniform(0, 1, snn.input_shape).astype(np.float32)
            T = int(rng.integers(1, 48))
            trace = sc.simulate(snn, x, T)
            for lt in trace.layers:
                lhs = lt.cumulative_input
                rhs = lt.spike_count * lt.threshold + lt.potential
                assert np.max(np.abs(lhs - rhs)) <= 1e-6 * T * max(1.0, np.abs(lhs).max())

    def test_fixed_point_mode_exact(self):
        rng = np.random.default_rng(65)
        for _ in range(40):
            snn = make_random_snn(rng, integer=True)
            x = rng.uniform(0, 1, snn.input_shape).astype(np.float32)
            trace = sc.simulate(snn, x, 32)
            for lt in trace.layers:
                np.testing.assert_array_equal(
                    lt.cumulative_input, lt.spike_count * lt.threshold + lt.potential)


class TestClassify:
    def test_argmax_of_accumulated_potential(self):
        snn = SnnModel(name="c", input_shape=(2,), layers=(
            SnnLayer(name="out", kind="dense", threshold=1.0,
                     weights=np.array([[0.1, 0.0], [0.9, 0.0]]),
                     bias_current=np.array([0.0, 0.0]), out_shape=(2,)),
        ), kappa0=100.0, timesteps=4)
        trace = sc.simulate(snn, np.array([1.0, 0.0], np.float32), 4)
        assert sc.classify(trace) == 1

    def test_tie_resolves_to_lowest_index(self):
        snn = SnnModel(name="c", input_shape=(1,), layers=(
            SnnLayer(name="out", kind="dense", threshold=1.0,
                     weights=np.array([[0.5], [0.5]]),
                     bias_current=np.array([0.0, 0.0]), out_shape=(2,)),
        ), kappa0=100.0, timesteps=4)
        trace = sc.simulate(snn, np.array([1.0], np.float32), 4)
        assert trace.layers[-1].potential[0] == trace.layers[-1].potential[1]
        assert sc.classify(trace) == 0


class TestRatesAndResiduals:
    def test_rate_is_count_over_time(self):
        snn = single_neuron_snn(weight=50.0)
        trace = sc.simulate(snn, np.array([1.0], np.float32), 8)
        assert sc.spiking_rate(trace, 1, 0, 8) == pytest.approx(0.5)

    def test_zero_final_potential_means_zero_delta(self):
        snn = single_neuron_snn(weight=100.0)
        trace = sc.simulate(snn, np.array([1.0], np.float32), 8)
        assert sc.residual_delta(trace, 1, 0, 8) == 0.0

    def test_rate_plus_delta_reproduces_normalised_current(self):
        snn = single_neuron_snn(weight=37.0)
        T = 16
        trace = sc.simulate(snn, np.array([1.0], np.float32), T)
        r = sc.spiking_rate(trace, 1, 0, T)
        d = sc.residual_delta(trace, 1, 0, T)
        total = float(trace.layers[0].cumulative_input[0])
        assert r + d == pytest.approx(total / (T * 100.0), rel=1e-12)

    def test_intermediate_time_needs_rasters(self):
        snn = single_neuron_snn(weight=50.0)
        trace = sc.simulate(snn, np.array([1.0], np.float32), 8)
        with pytest.raises(DataError, match="raster"):
            sc.spiking_rate(trace, 1, 0, 4)
        with_r = sc.simulate(snn, np.array([1.0], np.float32), 8,
                             record=RecordFlags(rasters=True, input_history=True))
        assert sc.spiking_rate(with_r, 1, 0, 4) == pytest.approx(0.5)
        assert sc.residual_delta(with_r, 1, 0, 4) == pytest.approx(0.0, abs=1e-12)

    def test_out_of_range_indices_rejected(self):
        snn = single_neuron_snn(weight=50.0)
        trace = sc.simulate(snn, np.array([1.0], np.float32), 8)
        with pytest.raises(DataError):
            trace.layer(5)
        with pytest.raises(DataError):
            sc.spiking_rate(trace, 1, 0, 9)


class TestRateIdentityOnFixture:
    def test_rate_error_decreases_with_longer_trains(self, runs, folded_model,
                                                     calib_stats, test_bundle):
        from spikecast.models import forward_batch
        X = test_bundle.inputs[:48]
        _, acts = forward_batch(folded_model, X)
        errors = {}
        for T in (64, 512):
            snn = runs.snn(T=T, eta=0.0)
            trace = sc.simulate_batch(snn, X, T)
            errs = []
            for k, lt in enumerate(trace.layers[:-1], start=1):
                rate = lt.spike_count / T
                errs.append(float(np.mean(np.abs(calib_stats.lambdas[k] * rate - acts[k - 1]))))
            errors[T] = errs
        improved = [e512 < e64 for e64, e512 in zip(errors[64], errors[512])]
        assert sum(improved) >= int(np.ceil(0.9 * len(improved)))
