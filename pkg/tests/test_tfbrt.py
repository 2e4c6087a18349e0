"""TF-BRT network: module contracts, recurrent state and gradients."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

from inertrack.errors import CheckpointError, SequenceTooShortError, ShapeError
from inertrack.loss import LossState, compute_losses, total_loss
from inertrack.preprocess import N_CHANNELS, SegmentSample, feature_streams, make_segments
from inertrack.tensor import Tensor, grad_check
from inertrack.tfbrt import TFBRT, ModelConfig, attention, parameter_shapes, relative_offsets


def _features(rng, batch=2, windows=3, length=8) -> np.ndarray:
    return rng.normal(size=(batch, windows, length, N_CHANNELS))


def _zero(model: TFBRT, *names: str) -> None:
    for name in names:
        model[name].data = np.zeros_like(model[name].data)


def test_forward_shapes(tiny_model, rng) -> None:
    result = tiny_model.forward(_features(rng))

    assert result.velocity.shape == (2, 3, 8, 2)
    assert result.state.shape == (2, 8, 16)
    assert result.hidden.shape == (2, 3, 8, 16)
    assert np.all(np.isfinite(result.velocity.data))


def test_forward_rejects_wrong_window_length(tiny_model, rng) -> None:
    with pytest.raises(ShapeError):
        tiny_model.forward(_features(rng, length=9))


def test_every_module_preserves_shape(tiny_model, rng) -> None:
    x = Tensor(rng.normal(size=(8, 16)))

    assert tiny_model.conv_module(x, 0).shape == (8, 16)
    assert tiny_model.mha_module(x, 0).shape == (8, 16)
    assert tiny_model.ff_module(x, 0).shape == (8, 16)
    out, state = tiny_model.br_attention(x, tiny_model.init_state())
    assert out.shape == state.shape == (8, 16)
    assert tiny_model.output_projection(x).shape == (8, 2)


def test_input_projection_of_zero_input_is_zero(tiny_model) -> None:
    out = tiny_model.input_projection(Tensor(np.zeros((8, 9))))

    np.testing.assert_array_equal(out.data, 0.0)


def test_zeroed_output_paths_make_modules_identities(tiny_model, rng) -> None:
    x = Tensor(rng.normal(size=(8, 16)))
    _zero(tiny_model, "block0.conv.pointwise", "block0.mha.wo", "block0.ff.w2", "block0.ff.b2")

    np.testing.assert_array_equal(tiny_model.conv_module(x, 0).data, x.data)
    np.testing.assert_array_equal(tiny_model.mha_module(x, 0).data, x.data)
    np.testing.assert_array_equal(tiny_model.ff_module(x, 0).data, x.data)


def test_zero_output_projection_gives_zero_velocity(tiny_model, rng) -> None:
    _zero(tiny_model, "output.weight", "output.bias")

    np.testing.assert_array_equal(tiny_model.forward(_features(rng)).velocity.data, 0.0)


def test_saturated_gates_carry_the_state_unchanged(tiny_model, rng) -> None:
    tiny_model["br.gate.forget.bias"].data = np.full(16, 1e4)
    tiny_model["br.gate.input.bias"].data = np.full(16, -1e4)
    state = Tensor(rng.normal(size=(8, 16)))

    _, next_state = tiny_model.br_attention(Tensor(rng.normal(size=(8, 16))), state)

    np.testing.assert_array_equal(next_state.data, state.data)


def test_attention_rows_are_distributions(rng) -> None:
    x = Tensor(rng.normal(size=(8, 16)))
    wq, wk, wv = (Tensor(rng.normal(size=(16, 16))) for _ in range(3))
    rpe = Tensor(rng.normal(size=(2, 7)))

    _, weights = attention(x, x, wq, wk, wv, rpe, n_heads=2)

    assert weights.shape == (2, 8, 8)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-9)


def test_relative_offsets_are_clipped_to_the_radius() -> None:
    offsets = relative_offsets(5, 2)

    assert offsets[0, 0] == 2
    assert offsets[0, 4] == 4
    assert offsets[4, 0] == 0


def test_attention_without_position_bias_is_permutation_equivariant(tiny_config, rng) -> None:
    model = TFBRT(replace(tiny_config, rpe_radius=0), seed=2)
    x = rng.normal(size=(8, 16))
    perm = rng.permutation(8)

    out = model.mha_module(Tensor(x), 0).data
    permuted = model.mha_module(Tensor(x[perm]), 0).data

    np.testing.assert_allclose(permuted, out[perm], atol=1e-12)


def test_streaming_matches_a_single_call(tiny_model, rng) -> None:
    features = _features(rng, batch=1, windows=3)

    whole = tiny_model.forward(features)
    head = tiny_model.forward(features[:, :2])
    tail = tiny_model.forward(features[:, 2:], state=head.state)

    np.testing.assert_array_equal(head.velocity.data, whole.velocity.data[:, :2])
    np.testing.assert_array_equal(tail.velocity.data, whole.velocity.data[:, 2:])
    np.testing.assert_array_equal(tail.state.data, whole.state.data)


def test_predict_sequence_streams_the_whole_record(tiny_model, walk_record) -> None:
    features, _ = feature_streams(walk_record)
    n_windows = len(walk_record) // 8

    velocity = tiny_model.predict_sequence(walk_record)
    batch = tiny_model.forward(features[: n_windows * 8].reshape(1, n_windows, 8, N_CHANNELS))

    assert velocity.shape == (n_windows * 8, 2)
    np.testing.assert_array_equal(velocity, batch.velocity.data.reshape(-1, 2))


def test_raw_magnetometer_model_streams_the_raw_field(tiny_config, walk_record) -> None:
    model = TFBRT(replace(tiny_config, mag_feature="raw"), seed=2)
    features, _ = feature_streams(walk_record, mag_feature="raw")
    n_windows = len(walk_record) // 8

    velocity = model.predict_sequence(walk_record)
    batch = model.forward(features[: n_windows * 8].reshape(1, n_windows, 8, N_CHANNELS))

    np.testing.assert_array_equal(velocity, batch.velocity.data.reshape(-1, 2))


def test_features_must_match_the_model_mag_feature(tiny_model, tiny_data_config, walk_record) -> None:
    with pytest.raises(ValueError) as exc:
        tiny_model.predict_sequence(walk_record, replace(tiny_data_config, mag_feature="raw"))

    assert "mag_feature" in str(exc.value)


def test_predict_sequence_needs_one_window(tiny_model, walk_record) -> None:
    with pytest.raises(SequenceTooShortError):
        tiny_model.predict_sequence(walk_record.head(5))


def test_parallel_inference_matches_serial(tiny_model, walk_record, stationary_record) -> None:
    records = [walk_record, stationary_record, walk_record.head(400)]
    serial = [tiny_model.predict_sequence(record) for record in records]

    with ThreadPoolExecutor(max_workers=3) as pool:
        parallel = list(pool.map(tiny_model.predict_sequence, records))

    for expected, got in zip(serial, parallel):
        np.testing.assert_array_equal(got, expected)


def test_eval_mode_is_deterministic_and_train_mode_applies_dropout(tiny_config, rng) -> None:
    model = TFBRT(replace(tiny_config, dropout=0.2), seed=1)
    features = _features(rng)

    first = model.forward(features).velocity.data
    second = model.forward(features).velocity.data
    dropped = model.forward(features, train=True, dropout_key=(0, 1)).velocity.data
    dropped_again = model.forward(features, train=True, dropout_key=(0, 1)).velocity.data

    np.testing.assert_array_equal(first, second)
    np.testing.assert_array_equal(dropped, dropped_again)
    assert not np.array_equal(first, dropped)


def test_initial_state_is_the_trainable_parameter(tiny_model) -> None:
    assert tiny_model.init_state() is tiny_model.init_state()
    assert tiny_model.init_state().shape == (8, 16)
    assert tiny_model.init_state().requires_grad


@pytest.mark.parametrize(
    "overrides",
    [
        {"use_magnetometer": False},
        {"frequency_input": False},
        {"block_recurrent": False},
    ],
)
def test_ablation_variants_run(tiny_config, rng, overrides) -> None:
    config = replace(tiny_config, **overrides)
    model = TFBRT(config, seed=0)

    result = model.forward(_features(rng, batch=1, windows=2))

    assert result.velocity.shape == (1, 2, 8, 2)
    assert set(model.parameters()) == set(parameter_shapes(config))
    if not config.use_magnetometer:
        assert model["input.time.weight"].shape == (6, 16)


def test_non_contiguous_windows_are_not_a_segment(walk_record) -> None:
    first, second = make_segments(walk_record, length=8, windows=1, seg_step=16)[:2]

    with pytest.raises(ValueError) as exc:
        SegmentSample(first.windows + second.windows)

    assert "contiguous" in str(exc.value)


def test_mismatched_arrays_are_a_checkpoint_error(tiny_model, tiny_config) -> None:
    arrays = tiny_model.state_arrays()
    arrays["output.weight"] = np.zeros((3, 2))

    with pytest.raises(CheckpointError):
        TFBRT.from_arrays(tiny_config, arrays, tiny_model.stats)
    with pytest.raises(CheckpointError):
        TFBRT.from_arrays(tiny_config, tiny_model.state_arrays(), tiny_model.stats,
                          expected=replace(tiny_config, depth=2))


def test_end_to_end_gradient_matches_finite_differences(tiny_model, rng) -> None:
    features = _features(rng, batch=1, windows=2)
    gt_vel = rng.normal(size=(1, 2, 8, 2))
    state = LossState()

    def loss() -> Tensor:
        velocity = tiny_model.forward(features).velocity
        return total_loss(compute_losses(velocity, gt_vel, 0.02), state)

    params = list(tiny_model.parameters().values())
    error = grad_check(lambda *_: loss(), params, max_elements=3, seed=4)

    assert error < 1e-3
    assert all(param.grad is not None for param in params)


@pytest.mark.parametrize(
    "kwargs, error_message",
    [
        ({"d_hidden": 10, "n_heads": 4}, "divisible"),
        ({"kernel_size": 4}, "kernel_size"),
        ({"dropout": 1.0}, "dropout"),
        ({"depth": 0}, "depth"),
        ({"window_length": -1}, "window_length"),
        ({"mag_feature": "integral"}, "mag_feature"),
    ],
)
def test_model_config_validates_inputs(kwargs, error_message) -> None:
    with pytest.raises(ValueError) as exc:
        ModelConfig(**kwargs)

    assert error_message in str(exc.value)
